import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from misinfo_dropout.cascade import CascadeRecord, run_cascade
from misinfo_dropout.experiments import BASE_2, generate_dataset, synthetic_matrices
from misinfo_dropout.fit import (FALSE, TRUE, ClassTransfer, ContentModelPair, InsufficientDataError, UserParams,
                                 _fit_column_tree, build_block_matrices, estimate_block_matrices,
                                 merge_small_partitions, remap_record)
from misinfo_dropout.graph import Partition, SbmModel


def test_build_identity_weights():
    part = Partition.from_sizes([2, 3])
    c = np.array([[0.4, 0.1], [0.2, 0.3]])
    pair = build_block_matrices(UserParams(np.ones(5), np.ones(5)), ClassTransfer(c, c), part)
    np.testing.assert_allclose(pair.b_plus, c)
    np.testing.assert_allclose(pair.b_minus, c)


def test_build_zero_reshare():
    part = Partition.from_sizes([2, 3])
    c = np.full((2, 2), 0.5)
    pair = build_block_matrices(UserParams(np.full(5, 0.3), np.zeros(5)), ClassTransfer(c, c), part)
    assert not pair.b_minus.any()


def test_build_class_average():
    part = Partition.from_sizes([2])
    pair = build_block_matrices(UserParams(np.array([0.9, 0.9]), np.array([0.2, 0.4])),
                                ClassTransfer([[0.5]], [[0.5]]), part)
    assert pair.b_minus[0, 0] == pytest.approx(0.15)


def test_build_dimension_errors():
    part = Partition.from_sizes([2, 2])
    c = np.full((2, 2), 0.1)
    with pytest.raises(ValueError):
        build_block_matrices(UserParams(np.ones(3), np.ones(3)), ClassTransfer(c, c), part)
    with pytest.raises(ValueError):
        build_block_matrices(UserParams(np.ones(4), np.ones(4)), ClassTransfer([[0.1]], [[0.1]]), part)
    with pytest.raises(ValueError):
        UserParams(np.array([1.2]), np.array([0.1]))


def test_transfer_warns_without_echo_chamber():
    with pytest.warns(UserWarning):
        ClassTransfer([[0.1, 0.5], [0.0, 0.2]], [[0.2, 0.1], [0.1, 0.2]])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ClassTransfer([[0.3, 0.1], [0.1, 0.3]], [[0.3, 0.1], [0.1, 0.3]])


@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.integers(0, 3), st.floats(0, 1))
def test_build_monotone_in_reshare(r, i, bump):
    part = Partition.from_sizes([2, 2])
    c = np.array([[0.6, 0.2], [0.3, 0.7]])
    r = np.array(r)
    r2 = r.copy()
    r2[i] = max(r[i], bump)
    lo = build_block_matrices(UserParams(r, r), ClassTransfer(c, c), part)
    hi = build_block_matrices(UserParams(r2, r2), ClassTransfer(c, c), part)
    assert np.all(hi.b_plus >= lo.b_plus - 1e-15)
    assert 0 <= lo.b_plus.min() and hi.b_plus.max() <= 1


def test_content_pair_requires_same_partition():
    with pytest.raises(ValueError):
        ContentModelPair(SbmModel(Partition.from_sizes([2, 2]), np.zeros((2, 2))),
                         SbmModel(Partition.from_sizes([3, 1]), np.zeros((2, 2))))


def _labelled(model, label, n, seed, n_seeds=3, track=True):
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        seeds = rng.choice(model.n_total, n_seeds, replace=False)
        out.append(run_cascade(model, seeds, rng=rng, track=track).with_label(label))
    return out


@pytest.mark.parametrize("method", ["tree", "counts"])
def test_estimate_all_exposures_succeed(method):
    part = Partition.from_sizes([10, 10])
    certain = SbmModel(part, np.ones((2, 2)))
    weak = SbmModel(part, np.full((2, 2), 0.05))
    data = _labelled(certain, FALSE, 5, 0) + _labelled(weak, TRUE, 5, 1)
    fit = estimate_block_matrices(data, part, method=method)
    observed = ~fit.unobserved[FALSE]
    assert observed.any()
    np.testing.assert_array_equal(fit.models.b_minus[observed], 1.0)


def test_estimate_needs_both_labels():
    part = Partition.from_sizes([5])
    with pytest.raises(InsufficientDataError):
        estimate_block_matrices([], part)
    only_true = [CascadeRecord([0], [[1], [0]], 1, TRUE)]
    with pytest.raises(InsufficientDataError, match="false"):
        estimate_block_matrices(only_true, part)


def test_estimate_rejects_k_mismatch():
    part = Partition.from_sizes([5, 5])
    recs = [CascadeRecord([0], [[1], [0]], 1, TRUE), CascadeRecord([0], [[1], [0]], 1, FALSE)]
    with pytest.raises(ValueError, match="k=2"):
        estimate_block_matrices(recs, part)


def test_zero_opportunity_pairs_are_flagged():
    # class 1 never holds the content, so row 1 has no opportunities
    part = Partition.from_sizes([10, 10])
    steps = [[2, 0], [1, 0], [0, 0]]
    recs = [CascadeRecord([0, 1], steps, 3, TRUE), CascadeRecord([0, 1], steps, 3, FALSE)]
    fit = estimate_block_matrices(recs, part, method="counts")
    for label in (TRUE, FALSE):
        assert fit.unobserved[label].tolist() == [[False, False], [True, True]]
        assert fit.opportunities[label][1].tolist() == [0.0, 0.0]
    assert fit.models.b_plus[1].tolist() == [0.0, 0.0]


def test_counts_estimate_single_step_closed_form():
    # one class, one exposure round per cascade with the same n: the MLE
    # solves 1 - (1 - b)^n = x / s exactly
    part = Partition.from_sizes([100])
    n, s = 4, 96
    xs = [10, 13, 7, 9]
    recs = [CascadeRecord(range(n), [[n], [x], [0]], n + x, lab)
            for x in xs for lab in (TRUE, FALSE)]
    # the second step also exposes; make it empty by zero infections after x
    fit = estimate_block_matrices(recs, part, method="counts")
    # second-round exposures: x infectors, s - x susceptibles, zero successes
    def nll(b):
        b = b[0]
        if not 0 < b < 1:
            return np.inf
        val = 0.0
        for x in xs:
            q = 1 - (1 - b) ** n
            val -= x * np.log(q) + (s - x) * np.log(1 - q)
            val -= (s - x) * x * np.log(1 - b)
        return val
    oracle = minimize(nll, [0.03], method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-14}).x[0]
    assert fit.models.b_plus[0, 0] == pytest.approx(oracle, rel=1e-5)


def test_tree_likelihood_matches_direct_maximisation():
    # independent oracle: the attribution likelihood written term by term
    rng = np.random.default_rng(1)
    g, k = 30, 3
    n = rng.integers(0, 6, (g, k))
    s = rng.integers(5, 40, g)
    x = np.zeros((g, k))
    for i in range(g):
        live = (n[i] > 0).astype(float)
        if live.sum():
            x[i] = rng.multinomial(rng.integers(0, min(s[i], 4) + 1), live / live.sum())
    z, w = np.polynomial.legendre.leggauss(60)
    z, w = (z + 1) / 2, w / 2

    def nll(p):
        p = np.asarray(p)
        if np.any(p <= 0) or np.any(p >= 1):
            return np.inf
        total = 0.0
        for i in range(g):
            total -= (s[i] - x[i].sum()) * np.sum(n[i] * np.log1p(-p))
            for c in range(k):
                if x[i, c]:
                    m = n[i].copy()
                    m[c] -= 1
                    integral = np.sum(w * np.prod((1 - p[None, :] * (1 - z)[:, None]) ** m[None, :], axis=1))
                    total -= x[i, c] * np.log(n[i, c] * p[c] * integral)
        return total

    est = _fit_column_tree(n, s, x)
    oracle = minimize(nll, est * 1.3, method="Nelder-Mead",
                      options={"xatol": 1e-12, "fatol": 1e-13, "maxiter": 20000})
    np.testing.assert_allclose(est, oracle.x, rtol=1e-4)
    assert nll(est) <= oracle.fun + 1e-8


def test_tree_estimator_needs_trees():
    part = Partition.from_sizes([5])
    recs = [CascadeRecord([0], [[1], [0]], 1, TRUE), CascadeRecord([0], [[1], [0]], 1, FALSE)]
    with pytest.raises(ValueError, match="tree"):
        estimate_block_matrices(recs, part, method="tree")
    with pytest.raises(ValueError):
        estimate_block_matrices(recs, part, method="magic")


def test_laplace_smoothing():
    part = Partition.from_sizes([10, 10])
    steps = [[2, 0], [0, 0]]
    recs = [CascadeRecord([0, 1], steps, 2, TRUE), CascadeRecord([0, 1], steps, 2, FALSE)]
    raw = estimate_block_matrices(recs, part, method="counts")
    smooth = estimate_block_matrices(recs, part, pseudo_count=1.0, method="counts")
    opp = raw.opportunities[TRUE]
    assert raw.models.b_plus[0, 0] == pytest.approx(0.0, abs=1e-8)
    assert smooth.models.b_plus[0, 0] == pytest.approx(1 / (opp[0, 0] + 2), rel=1e-6)
    assert smooth.models.b_plus[1, 0] == 0.0


@pytest.mark.parametrize("method", ["auto", "counts"])
def test_recovers_balanced_base_matrix(method):
    part = Partition.from_sizes([500, 500])
    b = np.array(BASE_2)
    models = ContentModelPair.from_blocks(part, b, b)
    data = generate_dataset(models, 500, n_seeds=10, seed=4)
    fit = estimate_block_matrices(data, part, method=method)
    for est in (fit.models.b_minus, fit.models.b_plus):
        assert np.all(np.abs(est / b - 1) < 0.2)


def test_recovery_error_shrinks_with_data():
    part = Partition.from_sizes([100, 100])
    b_plus, b_minus = synthetic_matrices([[0.03, 0.01], [0.01, 0.03]], 0.01, 0.003)
    models = ContentModelPair.from_blocks(part, b_plus, b_minus)

    def err(n, rep):
        fit = estimate_block_matrices(generate_dataset(models, n, n_seeds=3, seed=1000 + rep), part)
        return float(np.mean(np.abs(fit.models.b_minus - b_minus)))

    small = np.median([err(40, r) for r in range(10)])
    large = np.median([err(80, r + 100) for r in range(10)])
    assert large <= small


def test_merge_small_partitions_examples():
    part = Partition.from_sizes([990, 5, 5])
    merged, remap = merge_small_partitions(part, 0.01)
    assert merged.sizes == (990, 10)
    assert remap.tolist() == [0, 1, 1]
    big = Partition.from_sizes([400, 600])
    same, ident = merge_small_partitions(big, 0.01)
    assert same == big and ident.tolist() == [0, 1]
    one = Partition.from_sizes([7])
    assert merge_small_partitions(one, 0.5)[0] == one
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ValueError):
            merge_small_partitions(part, bad)


@given(st.lists(st.integers(1, 40), min_size=1, max_size=8), st.floats(0.01, 0.5))
def test_merge_preserves_membership(sizes, frac):
    rng = np.random.default_rng(len(sizes))
    part = Partition.from_class_of(rng.permutation(np.repeat(np.arange(len(sizes)), sizes)))
    merged, remap = merge_small_partitions(part, frac)
    assert merged.n_total == part.n_total
    np.testing.assert_array_equal(merged.class_of, remap[part.class_of])
    small = part.size_array < frac * part.n_total
    if small.any() and part.k > 1:
        assert merged.k == (~small).sum() + 1


def test_remap_record_sums_columns():
    rec = CascadeRecord([0], [[1, 2, 3], [0, 1, 0], [0, 0, 0]], 7, TRUE)
    out = remap_record(rec, np.array([0, 1, 1]))
    assert out.steps.tolist() == [[1, 5], [0, 1], [0, 0]]
    assert out.label == TRUE and out.r_infinity == 7
