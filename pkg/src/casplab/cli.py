"""casplab command line: gen-data, pretrain, fscil, gradcheck, report, sweep.

Exit codes: 0 success, 1 check failure, 2 usage or I/O error, 3 numerical
divergence. Global flags may appear before or after the subcommand.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ConfigError, apply_toggles, default_config, load_config, merge_config, resolve
from .gradcheck import component_of, model_gradcheck
from .harness.checkpoint import load_checkpoint
from .harness.data import read_cdsf, write_cdsf
from .harness.errors import DivergenceError, FormatError
from .harness.experiment import (
    FrozenStateError,
    build_dataset,
    load_pretrained,
    pretrain,
    run_fscil,
    write_pretrain,
    write_run,
    write_summary,
)
from .report import (
    ConsistencyError,
    ReportError,
    Series,
    ablation_table,
    check_a_avg,
    load_run_summary,
    render_svg,
    sweep_series,
)

log = logging.getLogger("casplab")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
SWEEP_KEYS = ("lambda_mix", "split_layer", "beta_alpha", "dropout_rate")


class UsageError(Exception):
    pass


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", metavar="PATH", help="JSON config file; flags override its keys", **d)
    parser.add_argument("--seed", type=int, metavar="U64", help="run seed (default 0)", **d)
    parser.add_argument("--out", metavar="DIR", help="output directory (default $CASP_OUT_DIR or ./casp_out)", **d)
    parser.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        help="pin BLAS to one thread so reductions run in a fixed order (default on)",
        **d,
    )
    parser.add_argument("-v", "--verbose", action="count", help="more logging", **d)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="casplab", description="CLS-prompt FSCIL lab on a micro vision transformer.")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic CDSF dataset")
    g.add_argument("--classes", type=int)
    g.add_argument("--per-class", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--source-classes", type=int, help="classes rendered in the pretraining domain")
    g.add_argument("--style", help="target-domain style, e.g. invert+light ('' for none)")
    g.add_argument("--file", help="output file (default <out>/dataset.cdsf)")

    pt = sub.add_parser("pretrain", parents=[common], help="pretrain and freeze the backbone")
    pt.add_argument("--data", help="CDSF dataset (default: generate from config)")

    f = sub.add_parser("fscil", parents=[common], help="base session plus incremental sessions")
    f.add_argument("--data", help="CDSF dataset (default: generate from config)")
    f.add_argument("--pretrained", help="pretrain checkpoint to load instead of pretraining")
    f.add_argument("--toggle", default="", help="component switches, e.g. cagp=off,mtm=off")
    f.add_argument("--seeds", type=int, default=1, help="run seeds seed..seed+N-1 and summarize")
    f.add_argument("--resume", help="fscil checkpoint: reuse its prompts and base prototypes")

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of a tiny model")
    gc.add_argument("--tol", type=float, default=1e-3)
    gc.add_argument("--step", type=float, default=1e-5, help="finite-difference step")
    gc.add_argument("--corrupt", metavar="PREFIX", help=argparse.SUPPRESS)

    r = sub.add_parser("report", parents=[common], help="SVG curves and ablation table")
    r.add_argument("inputs", nargs="*", help="run/summary JSON files or sweep CSV files")
    r.add_argument("--x", default="lambda_mix", help="sweep parameter on the x axis")
    r.add_argument("--metric", default="a_l", choices=("a_b", "a_n", "a_l", "a_avg"))

    s = sub.add_parser("sweep", parents=[common], help="grid over mixup and perturbation settings")
    s.add_argument("--data")
    s.add_argument("--pretrained")
    s.add_argument("--toggle", default="")
    s.add_argument("--seeds", type=int, default=1)
    s.add_argument("--jobs", type=int, default=1, help="worker processes")
    for key in SWEEP_KEYS:
        s.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar="LIST", help="comma-separated values")
    return p


# helpers


def _out_dir(args) -> Path:
    return Path(getattr(args, "out", None) or os.environ.get("CASP_OUT_DIR") or "casp_out")


def _config(args) -> dict:
    path = getattr(args, "config", None)
    return load_config(path) if path else default_config()


def _seed(args) -> int:
    seed = getattr(args, "seed", None)
    seed = 0 if seed is None else seed
    if not 0 <= seed < 2**64:
        raise UsageError("--seed must be an unsigned 64-bit integer")
    return seed


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from exc
    return path


def _dataset(args, res):
    path = getattr(args, "data", None)
    if path:
        if not Path(path).is_file():
            raise UsageError(f"dataset file not found: {path}")
        return read_cdsf(path)
    return build_dataset(res)


def _backbone(args, ds, res, out: Path | None):
    path = getattr(args, "pretrained", None)
    if path:
        if not Path(path).is_file():
            raise UsageError(f"pretrain checkpoint not found: {path}")
        return load_pretrained(path, res)
    t0 = time.perf_counter()
    result = pretrain(ds, res)
    log.info("pretrained in %.1fs, held-out accuracy %.4f", time.perf_counter() - t0, result.heldout_acc)
    if out is not None:
        write_pretrain(out / "pretrain.casp", result, res)
    return result.backbone


# commands


def cmd_gen_data(args) -> int:
    config = _config(args)
    overrides = {
        "classes": args.classes,
        "per_class": args.per_class,
        "size": args.size,
        "source_classes": args.source_classes,
        "target_style": args.style,
    }
    data = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, "seed", None) is not None:
        data["seed"] = _seed(args)
    config = merge_config(config, {"data": data}, where="flags")
    res = resolve(config, _seed(args))
    ds = build_dataset(res)
    path = Path(args.file) if args.file else _out_dir(args) / "dataset.cdsf"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        raw = write_cdsf(path, ds)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}") from exc
    print(f"wrote {path}: {len(ds)} records, sha256 {hashlib.sha256(raw).hexdigest()}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    res = resolve(_config(args), _seed(args))
    ds = _dataset(args, res)
    out = _mkdir(_out_dir(args))
    result = pretrain(ds, res)
    write_pretrain(out / "pretrain.casp", result, res)
    info = {
        "config": res.config,
        "seed": res.seed,
        "heldout_acc": result.heldout_acc,
        "final_loss": result.losses[-1] if result.losses else None,
    }
    (out / "pretrain.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    print(f"pretrain held-out accuracy {result.heldout_acc:.4f}, final loss {info['final_loss']:.6f}")
    print(f"wrote {out / 'pretrain.casp'}")
    return EXIT_OK


def _print_runs(results) -> None:
    for r in results:
        m = r.metrics
        a_n = "n/a" if m.a_n is None else f"{m.a_n:.4f}"
        print(f"seed {r.seed} [{r.label}] A_B {m.a_b:.4f} A_N {a_n} A_L {m.a_l:.4f} A_avg {m.a_avg:.4f}")


def cmd_fscil(args) -> int:
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    config = _config(args)
    if args.toggle:
        config = apply_toggles(config, args.toggle)
    resume = None
    if args.resume:
        if not Path(args.resume).is_file():
            raise UsageError(f"checkpoint not found: {args.resume}")
        resume = load_checkpoint(args.resume)
        echo = resume.config
        if echo is None:
            raise UsageError(f"{args.resume} carries no config echo")
        config, args.seed, args.seeds = echo["config"], echo["seed"], 1
    base_seed = _seed(args)
    out = _mkdir(_out_dir(args))
    res0 = resolve(config, base_seed)
    ds = _dataset(args, res0)
    backbone = resume.backbone(res0.model) if resume else _backbone(args, ds, res0, out)
    results = []
    for seed in range(base_seed, base_seed + args.seeds):
        res = resolve(config, seed)
        t0 = time.perf_counter()
        result = run_fscil(ds, res, backbone, resume=resume)
        log.info("seed %d finished in %.1fs", seed, time.perf_counter() - t0)
        write_run(result, out)
        results.append(result)
    if len(results) > 1:
        write_summary(results, out)
    _print_runs(results)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    corrupt = None
    if args.corrupt:
        prefix = args.corrupt

        def corrupt(name, g):
            return -g if name.startswith(prefix) else g

    t0 = time.perf_counter()
    phases = model_gradcheck(tol=args.tol, h=args.step, seed=_seed(args), corrupt=corrupt)
    elapsed = time.perf_counter() - t0
    failed = []
    for phase, results in phases.items():
        worst: dict[str, float] = {}
        for r in results:
            comp = component_of(r.name)
            worst[comp] = max(worst.get(comp, 0.0), r.max_rel_error)
            if not r.passed:
                failed.append(f"{phase}:{r.name}")
        for comp, err in worst.items():
            print(f"{phase:8s} {comp:9s} max rel error {err:.3e}  {'PASS' if err < args.tol else 'FAIL'}")
    print(f"gradcheck {'FAIL' if failed else 'PASS'} (tol {args.tol:g}, {elapsed:.1f}s)")
    if failed:
        print("failing tensors: " + ", ".join(failed))
        return EXIT_CHECK
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.inputs:
        raise UsageError("report needs at least one JSON or sweep CSV input")
    out = _mkdir(_out_dir(args))
    runs, sweeps = [], []
    for path in args.inputs:
        if not Path(path).is_file():
            raise UsageError(f"input not found: {path}")
        (sweeps if path.endswith(".csv") else runs).append(path)
    status = EXIT_OK
    if runs:
        summaries = []
        for path in runs:
            data = load_run_summary(path)
            try:
                check_a_avg(data, path)
            except ConsistencyError as exc:
                print(f"inconsistent: {exc}", file=sys.stderr)
                status = EXIT_CHECK
            summaries.append(data)
        series = [
            Series(_series_label(d, p), list(range(len(d["per_session"]))), d["per_session"])
            for d, p in zip(summaries, runs)
        ]
        (out / "sessions.svg").write_text(render_svg(series, title="Accuracy per session"))
        table = ablation_table(summaries)
        (out / "ablation.md").write_text(table)
        print(table, end="")
        print(f"wrote {out / 'sessions.svg'} and {out / 'ablation.md'}")
    for i, path in enumerate(sweeps):
        series = sweep_series(path, x=args.x, y=args.metric)
        name = "sweep.svg" if len(sweeps) == 1 else f"sweep{i}.svg"
        (out / name).write_text(render_svg(series, title=f"{args.metric} over {args.x}", xlabel=args.x, ylabel=args.metric))
        print(f"wrote {out / name} ({sum(len(s.x) for s in series)} points)")
    return status


def _series_label(summary: dict, path: str) -> str:
    seed = summary.get("seed")
    if isinstance(seed, int):
        return f"{summary.get('label', Path(path).stem)} (seed {seed})"
    return summary.get("label", Path(path).stem)


def _parse_list(text: str, key: str) -> list:
    cast = int if key == "split_layer" else float
    try:
        vals = [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--{key.replace('_', '-')}: {exc}") from exc
    if not vals:
        raise UsageError(f"--{key.replace('_', '-')}: empty grid")
    return vals


# sweep workers get the dataset and backbone once per process
_WORKER: dict = {}


def _init_worker(ds, named, model_cfg):
    from .vit import BackboneParams, VitConfig

    _WORKER["ds"] = ds
    _WORKER["backbone"] = BackboneParams.from_named(named, VitConfig(**model_cfg))


def _sweep_cell(job):
    config, seed, cell, control = job
    res = resolve(config, seed)
    result = run_fscil(_WORKER["ds"], res, _WORKER["backbone"])
    m = result.metrics
    return {**cell, "seed": seed, "control": control, "a_b": m.a_b, "a_n": m.a_n, "a_l": m.a_l, "a_avg": m.a_avg}


def _sweep_config(base: dict, cell: dict, control: bool) -> dict:
    mtm = {k: cell[k] for k in ("lambda_mix", "split_layer", "beta_alpha") if cell.get(k) != ""}
    mtm["enabled"] = not control
    return merge_config(base, {"mtm": mtm, "train": {"dropout_rate": cell["dropout_rate"]}}, where="sweep")


def cmd_sweep(args) -> int:
    if args.seeds < 1 or args.jobs < 1:
        raise UsageError("--seeds and --jobs must be >= 1")
    config = _config(args)
    if args.toggle:
        config = apply_toggles(config, args.toggle)
    grid = {}
    for key in SWEEP_KEYS:
        text = getattr(args, key)
        section = "train" if key == "dropout_rate" else "mtm"
        grid[key] = _parse_list(text, key) if text is not None else [config[section][key]]
    base_seed = _seed(args)
    out = _mkdir(_out_dir(args))
    res0 = resolve(config, base_seed)
    ds = _dataset(args, res0)
    backbone = _backbone(args, ds, res0, out)
    seeds = range(base_seed, base_seed + args.seeds)

    jobs = []
    for values in itertools.product(*(grid[k] for k in SWEEP_KEYS)):
        cell = dict(zip(SWEEP_KEYS, values))
        cfg = _sweep_config(config, cell, control=False)
        resolve(cfg, base_seed)  # validate before any work starts
        jobs += [(cfg, s, cell, "") for s in seeds]
    # mixed-token-off controls, one per perturbation rate
    for rate in grid["dropout_rate"]:
        cell = {"lambda_mix": "", "split_layer": "", "beta_alpha": "", "dropout_rate": rate}
        jobs += [(_sweep_config(config, cell, control=True), s, cell, "mtm_off") for s in seeds]

    named = {n: t.data for n, t in backbone.named_tensors()}
    if args.jobs == 1:
        _init_worker(ds, named, config["model"])
        rows = [_sweep_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(args.jobs, initializer=_init_worker, initargs=(ds, named, config["model"])) as pool:
            rows = list(pool.map(_sweep_cell, jobs))

    fields = [*SWEEP_KEYS, "seed", "control", "a_b", "a_n", "a_l", "a_avg"]
    buf = io.StringIO()
    buf.write("# " + json.dumps({"config": config, "seed": base_seed, "seeds": args.seeds}, sort_keys=True) + "\n")
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k]) for k in fields})
    (out / "sweep.csv").write_text(buf.getvalue())
    n_cells = len(jobs) // args.seeds - len(grid["dropout_rate"])
    print(f"wrote {out / 'sweep.csv'}: {n_cells} grid cells x {args.seeds} seeds plus {len(grid['dropout_rate'])} controls")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "fscil": cmd_fscil,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
    "sweep": cmd_sweep,
}


def _limits(deterministic: bool):
    if not deterministic:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    level = logging.WARNING - 10 * (getattr(args, "verbose", None) or 0)
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")
    deterministic = getattr(args, "deterministic", None)
    try:
        with _limits(deterministic is None or deterministic):
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError, FormatError, ReportError, OSError) as exc:
        print(f"casplab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError) as exc:
        print(f"casplab {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FrozenStateError as exc:
        print(f"casplab {args.command}: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
