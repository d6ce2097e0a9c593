"""Command-line entry point.

Exit codes: 0 success, 2 controlled sweep with no feasible cell, 3 I/O,
schema or usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .cascade import cascade_statistics, read_jsonl, run_cascade, write_jsonl
from .controller import ControlConfig, run_algorithm1, run_algorithm2, write_runs_jsonl
from .experiments import (PRESETS, GridRange, SyntheticConfig, bound_check, emit_outputs, generate_dataset,
                          run_dataset_pipeline, run_sweep, synthetic_matrices, trial_rng)
from .fit import ESTIMATORS, LABELS, TRUE, ContentModelPair, estimate_block_matrices
from .graph import Partition, SbmModel, load_partition

EXIT_OK, EXIT_INFEASIBLE, EXIT_IO = 0, 2, 3
FORMATS = ("csv", "jsonl", "svg")


class SchemaError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # keep exit code 2 for the infeasible-sweep outcome
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_IO, f"{self.prog}: error: {message}\n")


# ---- config and model files --------------------------------------------------

def load_config(path) -> dict:
    path = Path(path)
    raw = path.read_bytes()
    try:
        if path.suffix.lower() == ".toml":
            return tomllib.loads(raw.decode())
        return json.loads(raw)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"{path}: {exc}") from exc


_SWEEP_KEYS = {"preset", "name", "partition_sizes", "base_matrix", "x_range", "y_range", "trials_per_cell",
               "n_seeds", "seed", "workers", "control"}
_CONTROL_KEYS = {"alpha", "lambda", "solver", "max_steps"}


def _grid_range(obj, key) -> GridRange:
    if not isinstance(obj, dict) or set(obj) != {"lo", "hi", "points"}:
        raise SchemaError(f"{key} must be a table with lo, hi, points")
    return GridRange(float(obj["lo"]), float(obj["hi"]), int(obj["points"]))


def control_from_obj(obj) -> ControlConfig | None:
    if obj is None or obj == "control":
        return None
    if not isinstance(obj, dict) or not set(obj) <= _CONTROL_KEYS:
        raise SchemaError(f"control must be \"control\" or a table with keys {sorted(_CONTROL_KEYS)}")
    return ControlConfig(alpha=float(obj.get("alpha", 1.5)), lam=float(obj.get("lambda", 1.0)),
                         solver=str(obj.get("solver", "lp")), max_steps=int(obj.get("max_steps", 200)))


def sweep_config_from_dict(obj: dict) -> SyntheticConfig:
    unknown = set(obj) - _SWEEP_KEYS
    if unknown:
        raise SchemaError(f"unknown sweep config keys: {sorted(unknown)}")
    kw = {}
    if "preset" in obj:
        if obj["preset"] not in PRESETS:
            raise SchemaError(f"unknown preset {obj['preset']!r}; choose from {sorted(PRESETS)}")
        sizes, base = PRESETS[obj["preset"]]
        kw.update(partition_sizes=sizes, base_matrix=base, name=obj["preset"])
    for key in ("partition_sizes", "base_matrix", "name", "trials_per_cell", "n_seeds", "seed", "workers"):
        if key in obj:
            kw[key] = obj[key]
    if "partition_sizes" not in kw or "base_matrix" not in kw:
        raise SchemaError("sweep config needs a preset or both partition_sizes and base_matrix")
    for key in ("x_range", "y_range"):
        if key in obj:
            kw[key] = _grid_range(obj[key], key)
    kw["control"] = control_from_obj(obj.get("control"))
    try:
        return SyntheticConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad sweep config: {exc}") from exc


def load_models(path) -> ContentModelPair:
    """Models file: {"partition": {...}, "b_plus": [[...]], "b_minus": [[...]]}."""
    obj = load_config(path)
    try:
        part = Partition.from_json(obj["partition"])
        return ContentModelPair.from_blocks(part, obj["b_plus"], obj["b_minus"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: bad models file ({exc})") from exc


def models_to_json(models: ContentModelPair, **extra) -> dict:
    return {"partition": models.partition.to_json(), "b_plus": models.b_plus.tolist(),
            "b_minus": models.b_minus.tolist(), **extra}


def _preset_models(args) -> ContentModelPair:
    sizes, base = PRESETS[args.preset]
    b_plus, b_minus = synthetic_matrices(np.asarray(base) * args.scale, args.x, args.y)
    return ContentModelPair.from_blocks(Partition.from_sizes(sizes), b_plus, b_minus)


def _models(args) -> ContentModelPair:
    return load_models(args.models) if args.models else _preset_models(args)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---- subcommands -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    models = _models(args)
    model = models.for_label(args.content)
    n = model.n_total
    records = []
    for trial in range(args.trials):
        rng = trial_rng(args.seed, trial)
        seeds = rng.choice(n, size=args.n_seeds, replace=False)
        records.append(run_cascade(model, seeds, m=args.m, rng=rng, track=args.tree).with_label(args.content))
    out = _out_dir(args)
    if "jsonl" in args.format:
        write_jsonl(records, out / "cascades.jsonl")
    if "csv" in args.format:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "r_inf", "steps"])
        for i, r in enumerate(records):
            w.writerow([i, r.r_infinity, r.terminated_at])
        (out / "cascades.csv").write_text(buf.getvalue())
    st = cascade_statistics(records, n)
    print(f"{args.trials} cascade(s) on {args.content} content: mean R_inf/N = {st.mean:.4f}, "
          f"low fraction = {st.low_fraction:.3f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    obj = load_config(args.config) if args.config else {"preset": args.preset}
    if args.trials is not None:
        obj["trials_per_cell"] = args.trials
    if args.grid is not None:
        for key, hi in (("x_range", 0.01), ("y_range", 0.001)):
            cur = obj.get(key, {"lo": 0.0, "hi": hi})
            obj[key] = {"lo": cur["lo"], "hi": cur["hi"], "points": args.grid}
    if args.seed is not None:
        obj["seed"] = args.seed
    if args.workers is not None:
        obj["workers"] = args.workers
    if args.n_seeds is not None:
        obj["n_seeds"] = args.n_seeds
    if args.alpha is not None or args.lam is not None or args.solver is not None:
        base = obj.get("control") if isinstance(obj.get("control"), dict) else {}
        ctl = dict(base)
        if args.alpha is not None:
            ctl["alpha"] = args.alpha
        if args.lam is not None:
            ctl["lambda"] = args.lam
        if args.solver is not None:
            ctl["solver"] = args.solver
        obj["control"] = ctl
    config = sweep_config_from_dict(obj)
    result = run_sweep(config)
    for path in emit_outputs(result, args.out_dir, args.format):
        print(path)
    col = result.collate()
    if col:
        print("collated: " + ", ".join(f"{k}={v:.4f}" for k, v in col.items()))
    if config.control is not None and not result.any_feasible:
        print("no cell is LP-feasible at t=0", file=sys.stderr)
        return EXIT_INFEASIBLE
    if not col:
        print("every cell was skipped", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_fit(args) -> int:
    cascades = read_jsonl(args.dataset)
    partition = load_partition(args.partition)
    fit = estimate_block_matrices(cascades, partition, pseudo_count=args.pseudo_count, method=args.method)
    extra = {"opportunities": {k: v.tolist() for k, v in fit.opportunities.items()},
             "unobserved": {k: v.tolist() for k, v in fit.unobserved.items()},
             "n_cascades": fit.n_cascades}
    path = _out_dir(args) / "b_hat.json"
    path.write_text(json.dumps(models_to_json(fit.models, **extra), indent=1) + "\n")
    print(path)
    return EXIT_OK


def cmd_control(args) -> int:
    models = _models(args)
    real = load_models(args.real).for_label(args.content) if args.real else models.for_label(args.content)
    config = ControlConfig(alpha=args.alpha, lam=args.lam, solver=args.solver, max_steps=args.max_steps,
                           seed=args.seed)
    run = run_algorithm1 if args.algorithm == 1 else run_algorithm2
    n = real.n_total
    runs = []
    for trial in range(args.trials):
        rng = trial_rng(args.seed, trial)
        seeds = rng.choice(n, size=args.n_seeds, replace=False)
        runs.append(run(models, real, seeds, config, rng))
    path = _out_dir(args) / "controlled_runs.jsonl"
    write_runs_jsonl(runs, path)
    st = cascade_statistics([r.cascade for r in runs], n)
    print(path)
    print(f"{config.name}: mean R_inf/N = {st.mean:.4f}, low fraction = {st.low_fraction:.3f}")
    return EXIT_OK


def _pipeline_configs(args) -> list[ControlConfig | None]:
    if args.config:
        obj = load_config(args.config)
        if not isinstance(obj, dict) or not isinstance(obj.get("configs"), list):
            raise SchemaError("pipeline config needs a 'configs' list")
        return [control_from_obj(c) for c in obj["configs"]]
    alphas = args.alpha if args.alpha is not None else [1.5]
    lams = args.lam if args.lam is not None else [1.0]
    if len(lams) == 1:
        lams = lams * len(alphas)
    if len(alphas) != len(lams):
        raise SchemaError("--alpha and --lambda need matching lengths")
    return [None] + [ControlConfig(alpha=a, lam=l, solver=args.solver) for a, l in zip(alphas, lams)]


def cmd_pipeline(args) -> int:
    cascades = read_jsonl(args.dataset)
    partition = load_partition(args.partition)
    configs = _pipeline_configs(args)
    result = run_dataset_pipeline(cascades, partition, args.threshold, configs, args.samples, seed=args.seed)
    for path in emit_outputs(result, args.out_dir, args.format):
        print(path)
    for row in result.rows:
        print(f"{row.name}: true E[R]={row.true.mean:.2f} false E[R]={row.false.mean:.2f} "
              f"true P[R<5]={row.true.low_fraction:.3f} false P[R<5]={row.false.low_fraction:.3f}")
    return EXIT_OK


def cmd_generate(args) -> int:
    models = _models(args)
    data = generate_dataset(models, args.trials, n_seeds=args.n_seeds, seed=args.seed)
    out = _out_dir(args)
    write_jsonl(data, out / "cascades.jsonl")
    (out / "partition.json").write_text(json.dumps(models.partition.to_json()) + "\n")
    (out / "truth.json").write_text(json.dumps(models_to_json(models), indent=1) + "\n")
    for label in LABELS:
        sizes = [r.r_infinity for r in data if r.label == label]
        if sizes:
            print(f"{label}: {len(sizes)} cascades, mean R_inf = {np.mean(sizes):.1f}")
    print(out / "cascades.jsonl")
    return EXIT_OK


def cmd_bound(args) -> int:
    models = _models(args)
    alpha = 1.5 if args.alpha is None else args.alpha
    rows = bound_check(models, alpha, args.lambdas, horizon=args.horizon, runs=args.trials,
                       n_seeds=args.n_seeds, seed=args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda", "runs_kept", "extinction", "extinction_se", "bound", "bound_se", "holds"])
    for r in rows:
        w.writerow([r.lam, r.runs_kept, f"{r.extinction:.6g}", f"{r.extinction_se:.6g}", f"{r.bound:.6g}",
                    f"{r.bound_se:.6g}", int(r.holds)])
    path = _out_dir(args) / "bound_check.csv"
    path.write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


# ---- parser ----------------------------------------------------------------------

def _formats(text: str) -> list[str]:
    out = [f.strip() for f in text.split(",") if f.strip()]
    bad = [f for f in out if f not in FORMATS]
    if bad or not out:
        raise argparse.ArgumentTypeError(f"formats must be among {FORMATS}")
    return out


def _common(p, *, trials: int | None = None, fmt: str = "csv"):
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--trials", type=int, default=trials)
    p.add_argument("--out-dir", default="out")
    p.add_argument("--format", type=_formats, default=[fmt], help="comma list of csv, jsonl, svg")


def _model_source(p):
    p.add_argument("--models", help="models JSON with partition, b_plus, b_minus (overrides --preset)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="balanced-2")
    p.add_argument("--x", type=float, default=0.0)
    p.add_argument("--y", type=float, default=0.0)
    p.add_argument("--scale", type=float, default=1.0, help="multiply the preset base matrix")
    p.add_argument("--n-seeds", type=int, default=10, help="initially infected nodes")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="misinfo-dropout", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="run independent cascades on one content model")
    _common(p, trials=1, fmt="jsonl")
    _model_source(p)
    p.add_argument("--content", choices=LABELS, default="false")
    p.add_argument("--m", type=int, default=1, help="infectious period")
    p.add_argument("--tree", action="store_true", help="record propagation trees")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="synthetic (x, y) sweep")
    _common(p)
    p.set_defaults(seed=None)
    p.add_argument("config", nargs="?", help="TOML or JSON sweep config")
    p.add_argument("--preset", choices=sorted(PRESETS), default="balanced-2")
    p.add_argument("--grid", type=int, help="points per axis")
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--solver", choices=("lp", "convex"))
    p.add_argument("--n-seeds", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit", help="estimate b+/b- from a labelled dataset")
    _common(p, fmt="jsonl")
    p.add_argument("--dataset", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--pseudo-count", type=float, default=0.0)
    p.add_argument("--method", choices=ESTIMATORS, default="auto")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("control", help="controlled runs on the real network")
    _common(p, trials=1, fmt="jsonl")
    _model_source(p)
    p.add_argument("--real", help="models JSON for the real network (default: the model networks)")
    p.add_argument("--content", choices=LABELS, default="false")
    p.add_argument("--algorithm", type=int, choices=(1, 2), default=2)
    p.add_argument("--solver", choices=("lp", "convex"), default="lp")
    p.add_argument("--alpha", type=float, default=1.5)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--max-steps", type=int, default=200)
    p.set_defaults(func=cmd_control)

    p = sub.add_parser("pipeline", help="merge, fit, then replay sampled cascades under control")
    _common(p, trials=1000)
    p.add_argument("--dataset", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--threshold", type=float, default=0.01, help="merge classes below this fraction of N")
    p.add_argument("--config", help="TOML/JSON with a 'configs' list (\"control\" or control tables)")
    p.add_argument("--alpha", type=float, nargs="+")
    p.add_argument("--lambda", dest="lam", type=float, nargs="+")
    p.add_argument("--solver", choices=("lp", "convex"), default="lp")
    p.set_defaults(func=cmd_pipeline, samples=None)

    p = sub.add_parser("generate-dataset", help="labelled cascades with trees from known G+/G-")
    _common(p, trials=500, fmt="jsonl")
    _model_source(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bound-check", help="extinction frequency versus the exponential-moment bound")
    _common(p, trials=2000)
    _model_source(p)
    p.set_defaults(n_seeds=1)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambdas", type=float, nargs="+", default=[0.1, 1.0, 10.0])
    p.add_argument("--horizon", type=int, default=5)
    p.set_defaults(func=cmd_bound)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "pipeline":
        args.samples = args.trials
    if getattr(args, "trials", None) is not None and args.trials < 1:
        print("error: --trials must be >= 1", file=sys.stderr)
        return EXIT_IO
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
