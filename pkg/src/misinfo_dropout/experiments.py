"""Experiment orchestration: synthetic (x, y) sweeps, the labelled-dataset
pipeline, the extinction-bound check, and table/heatmap output."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cascade import CascadeStats, CascadeRecord, cascade_statistics, run_cascade
from .controller import (ControlConfig, ControlledRunRecord, SbmObserver, TreeReplayObserver, lp_policy,
                         make_policy, no_control, run_algorithm2, run_controlled)
from .dropout import BRANCH_LP, StepCounts, feasibility_lp, lemma1_bound
from .fit import FALSE, LABELS, TRUE, ContentModelPair, FitResult, estimate_block_matrices, \
    merge_small_partitions, remap_record
from .graph import Partition, SbmModel

BASE_2 = [[0.01, 0.002], [0.002, 0.01]]
BASE_3 = [[0.01, 0.002, 0.002], [0.002, 0.01, 0.002], [0.002, 0.002, 0.01]]

PRESETS = {
    "balanced-2": ([500, 500], BASE_2),
    "unbalanced-2": ([800, 200], BASE_2),
    "balanced-3": ([334, 333, 333], BASE_3),
    "unbalanced-3": ([500, 300, 200], BASE_3),
}


def synthetic_matrices(base, x: float, y: float) -> tuple[np.ndarray, np.ndarray]:
    """b+ = base + x I - y (J - I),  b- = base - x I + y (J - I)."""
    base = np.asarray(base, dtype=float)
    eye = np.eye(base.shape[0])
    shift = x * eye - y * (1.0 - eye)
    b_plus, b_minus = base + shift, base - shift
    for name, b in (("b_plus", b_plus), ("b_minus", b_minus)):
        if b.min() < -1e-15 or b.max() > 1 + 1e-15:
            raise ValueError(f"{name} leaves [0, 1] at x={x}, y={y}")
    return np.clip(b_plus, 0.0, 1.0), np.clip(b_minus, 0.0, 1.0)


@dataclass(frozen=True)
class GridRange:
    lo: float
    hi: float
    points: int

    def __post_init__(self):
        if self.points < 1 or self.hi < self.lo:
            raise ValueError("grid range needs lo <= hi and at least one point")

    def values(self) -> np.ndarray:
        if self.points == 1:
            return np.array([self.lo])
        return np.linspace(self.lo, self.hi, self.points)


@dataclass(frozen=True)
class SyntheticConfig:
    partition_sizes: tuple[int, ...]
    base_matrix: tuple[tuple[float, ...], ...]
    x_range: GridRange = GridRange(0.0, 0.01, 10)
    y_range: GridRange = GridRange(0.0, 0.001, 10)
    trials_per_cell: int = 20
    control: ControlConfig | None = None  # None: uncontrolled ("control") runs
    n_seeds: int = 10
    seed: int = 0
    name: str = "custom"
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "partition_sizes", tuple(int(s) for s in self.partition_sizes))
        object.__setattr__(self, "base_matrix", tuple(tuple(float(v) for v in row) for row in self.base_matrix))
        if len(self.base_matrix) != len(self.partition_sizes):
            raise ValueError("base matrix size does not match the number of partitions")
        if self.trials_per_cell < 1:
            raise ValueError("trials_per_cell must be >= 1")
        if not 1 <= self.n_seeds <= sum(self.partition_sizes):
            raise ValueError("n_seeds must be between 1 and N")

    @classmethod
    def preset(cls, name: str, **kw) -> "SyntheticConfig":
        sizes, base = PRESETS[name]
        return cls(tuple(sizes), tuple(map(tuple, base)), name=name, **kw)

    @property
    def control_name(self) -> str:
        return "control" if self.control is None else self.control.name

    def partition(self) -> Partition:
        return Partition.from_sizes(self.partition_sizes)


@dataclass(frozen=True)
class CellResult:
    x: float
    y: float
    skipped: bool
    feasible_t0: bool | None = None
    lp_fraction: float | None = None
    true: CascadeStats | None = None
    false: CascadeStats | None = None


@dataclass
class SweepResult:
    config: SyntheticConfig
    cells: list[CellResult] = field(default_factory=list)

    def grid(self, content: str = FALSE, stat: str = "mean") -> np.ndarray:
        """Cell values as an (nx, ny) array; NaN for skipped cells."""
        xs, ys = self.config.x_range.values(), self.config.y_range.values()
        out = np.full((xs.size, ys.size), np.nan)
        for idx, cell in enumerate(self.cells):
            if not cell.skipped:
                out[idx // ys.size, idx % ys.size] = getattr(getattr(cell, content), stat)
        return out

    def collate(self) -> dict[str, float]:
        """Equal-weight average of per-cell statistics over non-skipped cells."""
        done = [c for c in self.cells if not c.skipped]
        if not done:
            return {}
        out = {}
        for content in (TRUE, FALSE):
            for stat in ("mean", "low_fraction"):
                out[f"{content}_{stat}"] = float(np.mean([getattr(getattr(c, content), stat) for c in done]))
        return out

    @property
    def any_feasible(self) -> bool:
        return any(not c.skipped and c.feasible_t0 is not False for c in self.cells)


def _expected_t0_counts(sizes: np.ndarray, n_seeds: int) -> StepCounts:
    i0 = n_seeds * sizes / sizes.sum()
    return StepCounts(sizes - i0, i0)


def trial_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _run_cell(args) -> CellResult:
    config, ix, iy = args
    x = float(config.x_range.values()[ix])
    y = float(config.y_range.values()[iy])
    try:
        b_plus, b_minus = synthetic_matrices(config.base_matrix, x, y)
    except ValueError:
        return CellResult(x, y, skipped=True)
    part = config.partition()
    models = ContentModelPair.from_blocks(part, b_plus, b_minus)
    n = part.n_total
    feasible = lp_frac = None
    if config.control is None:
        policy = no_control(part.k)
        max_steps = n + 1
    else:
        policy = make_policy(models, config.control)
        max_steps = config.control.max_steps
        feasible = feasibility_lp(_expected_t0_counts(part.size_array, config.n_seeds), b_plus,
                                  config.control.alpha)
    stats, lp_steps, steps = {}, 0, 0
    for content, model in ((TRUE, models.g_plus), (FALSE, models.g_minus)):
        records = []
        for trial in range(config.trials_per_cell):
            # same stream for both content types: paired seeds and draws
            rng = trial_rng(config.seed, ix, iy, trial)
            seeds = rng.choice(n, size=config.n_seeds, replace=False)
            run = run_controlled(policy, SbmObserver(model), part, seeds, rng, max_steps)
            records.append(run.cascade)
            lp_steps += sum(b == BRANCH_LP for b in run.branches)
            steps += len(run.branches)
        stats[content] = cascade_statistics(records, n)
    if config.control is not None:
        lp_frac = lp_steps / steps if steps else 0.0
    return CellResult(x, y, False, feasible, lp_frac, stats[TRUE], stats[FALSE])


def run_sweep(config: SyntheticConfig) -> SweepResult:
    """Every (x, y) cell: paired true/false cascades, controlled or not.

    Cells are ordered lexicographically by (x, y); results are identical for
    any worker count.
    """
    jobs = [(config, ix, iy) for ix in range(config.x_range.points) for iy in range(config.y_range.points)]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(j) for j in jobs]
    return SweepResult(config, cells)


# ---- dataset generation and pipeline ---------------------------------------

def generate_dataset(models: ContentModelPair, n_cascades: int, n_seeds: int = 10, seed: int = 0,
                     true_fraction: float = 0.5) -> list[CascadeRecord]:
    """Labelled cascades, with propagation trees, simulated from known G+/G-."""
    n_true = int(round(n_cascades * true_fraction))
    labels = np.array([TRUE] * n_true + [FALSE] * (n_cascades - n_true))
    labels = trial_rng(seed, 0xDA7A).permutation(labels)
    n = models.partition.n_total
    out = []
    for i, label in enumerate(labels):
        rng = trial_rng(seed, i)
        seeds = rng.choice(n, size=n_seeds, replace=False)
        rec = run_cascade(models.for_label(str(label)), seeds, rng=rng, track=True)
        out.append(rec.with_label(str(label)))
    return out


@dataclass(frozen=True)
class PipelineRow:
    config: ControlConfig | None
    true: CascadeStats
    false: CascadeStats

    @property
    def name(self) -> str:
        return "control" if self.config is None else self.config.name


@dataclass
class PipelineResult:
    rows: list[PipelineRow]
    fit: FitResult
    partition: Partition
    remap: np.ndarray
    samples: int
    runs: dict = field(default_factory=dict, repr=False)


def run_dataset_pipeline(cascades: Sequence[CascadeRecord], partition: Partition, threshold_fraction: float,
                         configs: Sequence[ControlConfig | None], samples: int, seed: int = 0,
                         low_below: float = 5, keep_runs: bool = False) -> PipelineResult:
    """Merge small classes, fit G+/G-, then replay sampled cascades under each config.

    The same sampled cascades and the same dropout coins are used for every
    config, so rows are paired.
    """
    if not cascades:
        raise ValueError("empty dataset")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if any(r.label not in LABELS for r in cascades):
        raise ValueError("every cascade needs a 'true' or 'false' label")
    if any(r.tree is None for r in cascades):
        raise ValueError("replay needs propagation trees ('tree' field) in every cascade")
    merged, remap = merge_small_partitions(partition, threshold_fraction)
    recs = [remap_record(r, remap) for r in cascades]
    fit = estimate_block_matrices(recs, merged)
    picks = {}
    for li, label in enumerate(LABELS):
        pool = [r for r in recs if r.label == label]
        picks[label] = [pool[i] for i in trial_rng(seed, li, 0x5A).integers(0, len(pool), samples)]
    rows, runs = [], {}
    for ci, config in enumerate(configs):
        stats = {}
        for li, label in enumerate(LABELS):
            if config is None:
                policy = no_control(merged.k)
            else:
                policy = make_policy(fit.models, config)
            records = []
            for si, rec in enumerate(picks[label]):
                rng = trial_rng(seed, li, si)
                limit = len(rec.steps) + 1 if config is None else max(config.max_steps, len(rec.steps) + 1)
                run = run_controlled(policy, TreeReplayObserver(merged, rec.tree), merged, rec.seeds, rng,
                                     limit, label=label)
                records.append(run.cascade)
                if keep_runs:
                    runs.setdefault(ci, []).append(run)
            stats[label] = cascade_statistics(records, merged.n_total, low_below=low_below, normalize=False)
        rows.append(PipelineRow(config, stats[TRUE], stats[FALSE]))
    return PipelineResult(rows, fit, merged, remap, samples, runs)


# ---- extinction bound --------------------------------------------------------

@dataclass(frozen=True)
class BoundRow:
    lam: float
    runs_kept: int
    extinction: float
    extinction_se: float
    bound: float
    bound_se: float

    @property
    def holds(self) -> bool:
        return self.extinction <= self.bound + 2 * math.hypot(self.extinction_se, self.bound_se)


def bound_check(models: ContentModelPair, alpha: float, lams: Sequence[float], horizon: int = 5,
                runs: int = 2000, n_seeds: int = 1, seed: int = 0) -> list[BoundRow]:
    """Controlled true-content runs on G+ versus the moment-generating-function bound.

    Only runs whose steps 0..T-1 all took the feasible LP branch are kept.
    """
    cfg = ControlConfig(alpha=alpha, lam=1.0, max_steps=horizon)
    n = models.partition.n_total
    front = []
    for r in range(runs):
        rng = trial_rng(seed, r)
        seeds = rng.choice(n, size=n_seeds, replace=False)
        run = run_algorithm2(models, models.g_plus, seeds, cfg, rng)
        if any(b != BRANCH_LP for b in run.branches):
            continue
        totals = run.cascade.infected_totals
        front.append(float(totals[horizon]) if totals.size > horizon else 0.0)
    if not front:
        raise ValueError("no run stayed feasible up to the horizon")
    front = np.asarray(front)
    extinct = (front == 0).astype(float)
    ext_se = float(extinct.std(ddof=1) / math.sqrt(extinct.size)) if extinct.size > 1 else 0.0
    rows = []
    for lam in lams:
        bound, se = lemma1_bound(front, alpha, lam, horizon)
        rows.append(BoundRow(float(lam), int(front.size), float(extinct.mean()), ext_se, bound, se))
    return rows


# ---- output ------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


SWEEP_COLUMNS = ["x", "y", "skipped", "feasible_t0", "lp_fraction",
                 "true_mean", "true_mean_se", "true_low", "true_low_se",
                 "false_mean", "false_mean_se", "false_low", "false_low_se"]


def sweep_metadata(result: SweepResult) -> dict:
    cfg = result.config
    return {"config": cfg.name, "partition_sizes": list(cfg.partition_sizes), "n_seeds": cfg.n_seeds,
            "trials_per_cell": cfg.trials_per_cell, "control": cfg.control_name, "seed": cfg.seed,
            "grid": f"{cfg.x_range.points}x{cfg.y_range.points}", "collation": "equal-weight cells",
            "low_cascade": "R_inf < N/10"}


def sweep_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    for key, val in sweep_metadata(result).items():
        buf.write(f"# {key}={val}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for c in sorted(result.cells, key=lambda c: (c.x, c.y)):
        row = [c.x, c.y, c.skipped, c.feasible_t0, c.lp_fraction]
        for s in (c.true, c.false):
            row += [None] * 4 if s is None else [s.mean, s.mean_se, s.low_fraction, s.low_se]
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


TABLE1_COLUMNS = ["config", "partitions", "alpha", "lambda", "true_mean", "false_mean", "true_low", "false_low"]


def table1_csv(results: Sequence[SweepResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE1_COLUMNS)
    for r in results:
        col = r.collate()
        ctl = r.config.control
        w.writerow([_fmt(v) for v in [
            r.config.name, len(r.config.partition_sizes),
            "-" if ctl is None else ctl.alpha, "-" if ctl is None else ctl.lam,
            col.get("true_mean"), col.get("false_mean"), col.get("true_low_fraction"), col.get("false_low_fraction")]])
    return buf.getvalue()


TABLE2_COLUMNS = ["alpha", "lambda", "true_mean_r", "false_mean_r", "true_p_low", "false_p_low"]


def table2_csv(result: PipelineResult) -> str:
    buf = io.StringIO()
    buf.write(f"# samples={result.samples}\n# classes={result.partition.k}\n# low_cascade=R_inf < 5\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE2_COLUMNS)
    for row in result.rows:
        c = row.config
        w.writerow([_fmt(v) for v in ["-" if c is None else c.alpha, "-" if c is None else c.lam,
                                       row.true.mean, row.false.mean, row.true.low_fraction, row.false.low_fraction]])
    return buf.getvalue()


def heatmap_svg(result: SweepResult, content: str = FALSE, cell_px: int = 24) -> str:
    """Mean normalised cascade size per (x, y) cell as a grey-scale SVG grid."""
    grid = result.grid(content)
    nx, ny = grid.shape
    w, h = ny * cell_px + 80, nx * cell_px + 40
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<text x="4" y="14" font-size="12">{content} content, {result.config.name}, '
             f'{result.config.control_name}</text>']
    for ix in range(nx):
        for iy in range(ny):
            v = grid[ix, iy]
            fill = "#ff0000" if np.isnan(v) else "#{0:02x}{0:02x}{0:02x}".format(int(round(255 * (1 - v))))
            title = "skipped" if np.isnan(v) else f"{v:.3f}"
            parts.append(f'<rect x="{40 + iy * cell_px}" y="{20 + (nx - 1 - ix) * cell_px}" width="{cell_px}" '
                         f'height="{cell_px}" fill="{fill}"><title>x={result.config.x_range.values()[ix]:.6g} '
                         f'y={result.config.y_range.values()[iy]:.6g}: {title}</title></rect>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cells_jsonl(result: SweepResult) -> str:
    lines = []
    for c in result.cells:
        obj = asdict(c)
        lines.append(json.dumps(obj, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def emit_outputs(result, out_dir, formats: Sequence[str] = ("csv",), stem: str | None = None) -> list[Path]:
    """Write a SweepResult or PipelineResult in the requested formats."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        path = out / name
        path.write_text(text)
        written.append(path)

    if isinstance(result, SweepResult):
        stem = stem or f"{result.config.name}_{result.config.control_name}".replace(",", "_").replace("=", "")
        for fmt in formats:
            if fmt == "csv":
                put(f"{stem}_cells.csv", sweep_csv(result))
                put(f"{stem}_table.csv", table1_csv([result]))
            elif fmt == "jsonl":
                put(f"{stem}_cells.jsonl", cells_jsonl(result))
            elif fmt == "svg":
                for content in (TRUE, FALSE):
                    put(f"{stem}_{content}.svg", heatmap_svg(result, content))
            else:
                raise ValueError(f"unknown format {fmt!r}")
    elif isinstance(result, PipelineResult):
        stem = stem or "pipeline"
        for fmt in formats:
            if fmt == "csv":
                put(f"{stem}_table.csv", table2_csv(result))
            elif fmt == "jsonl":
                lines = [json.dumps({"config": r.name, "true": asdict(r.true), "false": asdict(r.false)})
                         for r in result.rows]
                put(f"{stem}_rows.jsonl", "".join(line + "\n" for line in lines))
            elif fmt != "svg":
                raise ValueError(f"unknown format {fmt!r}")
    else:
        raise TypeError(f"cannot emit {type(result).__name__}")
    return written
