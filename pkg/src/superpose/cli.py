"""``superpose`` command line: verification sweeps, toy training and MAC tables.

Every command writes its primary output (JSON lines, CSV or a checkpoint)
plus ``<output>.manifest.json`` recording the argv, resolved configuration,
seed, package version, timestamp and output paths. Each JSONL record and
CSV row carries the manifest file name, and ``superpose rerun MANIFEST``
replays the stored argv.

Exit codes: 0 success, 1 a verification check failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from . import complexity as cx
from . import rng as _rng
from . import sweeps

SCHEMA_VERSION = 1
OUT_DIR_ENV = "SUPERPOSE_OUT_DIR"
ATTENTION_CHECKS = ("favor", "favor-s", "kernel")
TRANSFORMER_MODES = tuple(m.value for m in cx.TransformerMode)


class UsageError(Exception):
    """Invalid combination of otherwise well-formed flags."""


# -- argument types ----------------------------------------------------------------


def positive_int(text: str) -> int:
    try:
        value = int(float(text)) if "e" in text.lower() else int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def nonneg_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}")
    return value


def positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return value


def int_list(text: str) -> list[int]:
    return [positive_int(t) for t in text.split(",") if t.strip()] or _empty(text)


def float_list(text: str) -> list[float]:
    return [positive_float(t) for t in text.split(",") if t.strip()] or _empty(text)


def grid_list(text: str) -> list[tuple[int, int]]:
    out = []
    for part in text.split(","):
        pieces = part.lower().split("x")
        if len(pieces) != 2:
            raise argparse.ArgumentTypeError(f"grid must look like 2x2, got {part!r}")
        out.append((positive_int(pieces[0]), positive_int(pieces[1])))
    return out


def _empty(text):
    raise argparse.ArgumentTypeError(f"empty list {text!r}")


def choice_list(choices):
    def parse(text: str) -> list[str]:
        items = [t.strip() for t in text.split(",") if t.strip()]
        bad = [t for t in items if t not in choices]
        if bad or not items:
            raise argparse.ArgumentTypeError(f"invalid choice {bad or text!r}; choose from {', '.join(choices)}")
        return items
    return parse


# -- output plumbing ---------------------------------------------------------------


def _default_out(args, name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_DIR_ENV) or "superpose-out") / name


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _write_manifest(args, outputs: list[Path], config: dict, status: str) -> Path:
    primary = outputs[0]
    path = _manifest_path(primary)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": args.command,
        "argv": args.argv,
        "config": config,
        "seed": args.seed,
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "outputs": [str(p) for p in outputs],
        "status": status,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _prepare(out: Path) -> str:
    out.parent.mkdir(parents=True, exist_ok=True)
    return _manifest_path(out).name


def _write_jsonl(out: Path, records: list[dict]) -> None:
    manifest = _prepare(out)
    with open(out, "w") as fh:
        for rec in records:
            fh.write(json.dumps({**rec, "manifest": manifest}, sort_keys=True) + "\n")


def _write_csv(out: Path, rows: list[dict]) -> None:
    manifest = _prepare(out)
    fields = list(rows[0]) + ["manifest"]
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({**row, "manifest": manifest})


def _table(rows: list[dict], cols: list[str]) -> str:
    fmt = lambda v: f"{v:.4g}" if isinstance(v, float) else str(v)
    cells = [[fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(r[i]) for r in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


# -- commands ----------------------------------------------------------------------


def cmd_bounds(args) -> int:
    if args.kind == "hoeffding":
        params = [math.cos(math.radians(a)) for a in args.alpha_deg]
    elif args.kind == "hadamard":
        params = args.beta
    else:
        params = args.alpha
    grids = args.grid if args.kind == "favor-s" else [(2, 2)]
    cells = []
    for d in args.dims:
        for p in params:
            for g in grids:
                idx = len(cells)
                cells.append(sweeps.BoundCell(args.kind, d, p, args.trials, _rng.derive_seed(args.seed, idx),
                                              args.channels, tuple(g)))
    reports = _map(sweeps.run_bound_cell, cells, args.workers)
    records = []
    for cell, rep in zip(cells, reports):
        rec = rep.to_dict()
        rec.update(kind=cell.kind, cell_seed=cell.seed, standard_error=rep.standard_error,
                   dominated=rep.dominated(args.n_se))
        records.append(rec)
    out = _default_out(args, "bounds.jsonl")
    _write_jsonl(out, records)
    ok = all(r["dominated"] for r in records)
    _write_manifest(args, [out], {"kind": args.kind, "dims": args.dims, "params": params,
                                  "grids": [list(g) for g in grids], "channels": args.channels,
                                  "trials": args.trials, "n_se": args.n_se}, "pass" if ok else "fail")
    print(_table([{"dim": c.dim, "param": c.param, "bound": r["bound"], "empirical": r["empirical"],
                   "ok": r["dominated"]} for c, r in zip(cells, records)],
                 ["dim", "param", "bound", "empirical", "ok"]))
    print(f"{sum(r['dominated'] for r in records)}/{len(records)} cells dominated -> {out}")
    return 0 if ok else 1


def _kernel_rows(args):
    rows = sweeps.kernel_check(args.seed, args.pairs, args.trials, args.dim, args.method)
    return rows, all(r["rel_err"] < args.tolerance for r in rows), ["rho", "closed_form", "monte_carlo", "rel_err"]


def _favor_rows(args):
    rows = _map(_FavorCell(args.seeds, args.seed), args.features, args.workers)
    rows = [r[0] for r in rows]
    ok = sweeps.strictly_decreasing([r["median_max_rel_dev"] for r in rows])
    return rows, ok, ["R", "median_max_rel_dev"]


def _favor_s_rows(args):
    rows = []
    for m, n in args.grid:
        rows += [r[0] for r in _map(_FavorSCell(args.families, args.seed, m, n), args.dims, args.workers)]
    ok = all(sweeps.strictly_decreasing([r["median_signal_err"] for r in rows if (r["M"], r["N"]) == g])
             for g in args.grid)
    return rows, ok, ["M", "N", "D", "median_signal_err", "median_l2_err"]


class _FavorCell:
    def __init__(self, seeds, seed):
        self.seeds, self.seed = seeds, seed

    def __call__(self, R):
        return sweeps.favor_sweep([R], self.seeds, self.seed)


class _FavorSCell:
    def __init__(self, families, seed, m, n):
        self.families, self.seed, self.m, self.n = families, seed, m, n

    def __call__(self, D):
        return sweeps.favor_s_sweep([D], self.families, self.seed, self.m, self.n)


def cmd_attention(args) -> int:
    run = {"kernel": _kernel_rows, "favor": _favor_rows, "favor-s": _favor_s_rows}[args.check]
    rows, ok, cols = run(args)
    out = _default_out(args, f"attention-{args.check}.csv")
    _write_csv(out, rows)
    config = {k: v for k, v in vars(args).items() if k not in ("func", "argv", "out", "workers", "command")}
    config["grid"] = [list(g) for g in args.grid]
    _write_manifest(args, [out], config, "pass" if ok else "fail")
    print(_table(rows, cols))
    print(("pass" if ok else "FAIL") + f" -> {out}")
    return 0 if ok else 1


def cmd_train(args) -> int:
    from .tensorio import save_checkpoint
    from .training import TrainConfig, TrainingDiverged, train_toy

    try:
        cfg = TrainConfig(steps=args.steps, batch=args.batch, lr=args.lr, gamma=args.gamma, mu=args.mu,
                          channels=args.channels, seed=args.seed, sigma=args.sigma, classes=args.classes,
                          samples_per_class=args.samples_per_class, dim=args.dim, blocks=args.blocks,
                          act=args.act, fast_fraction=args.fast_fraction, eval_every=args.eval_every)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _default_out(args, "train.jsonl")
    ckpt = Path(args.checkpoint) if args.checkpoint else out.with_name(out.stem + ".ckpt.spt")
    manifest = _prepare(out)
    config = cfg.as_dict()
    try:
        result = train_toy(cfg, out)
    except TrainingDiverged as exc:
        _write_manifest(args, [out], config, "diverged")
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    # stamp the manifest reference into the metric lines after the fact
    _write_jsonl(out, result.metrics)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, result.params, {"config": config, "manifest": manifest})
    last = result.metrics[-1]
    ok = args.min_accuracy is None or min(last["accuracy"]) >= args.min_accuracy
    _write_manifest(args, [out, ckpt], config, "pass" if ok else "fail")
    acc = ", ".join(f"{a:.3f}" for a in last["accuracy"])
    print(f"step {last['step']}: loss {last['loss']:.4f}, per-channel accuracy [{acc}] -> {out}, {ckpt}")
    return 0 if ok else 1


def cmd_eval_dynamic(args) -> int:
    from .tensorio import load_checkpoint
    from .training import TrainConfig, dynamic_eval

    try:
        params, meta = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read checkpoint: {exc}") from exc
    cfg = TrainConfig(**meta.get("config", {}))
    if args.modes and "normal" in args.modes and params.channels % 2:
        raise UsageError(f"normal mode needs an even channel count, checkpoint has {params.channels}")
    acc = dynamic_eval(params, cfg.task(), args.modes, split=args.split)
    rows = [{"mode": m, "accuracy": a, "channels": params.channels} for m, a in acc.items()]
    out = _default_out(args, "eval-dynamic.jsonl")
    _write_jsonl(out, rows)
    ok = True
    if "slow" in acc and "fast" in acc:
        ok = acc["slow"] >= acc["fast"] - args.max_drop
    _write_manifest(args, [out], {"checkpoint": str(args.checkpoint), "modes": args.modes, "split": args.split,
                                  "max_drop": args.max_drop}, "pass" if ok else "fail")
    print(_table(rows, ["mode", "accuracy"]))
    return 0 if ok else 1


def cmd_macs(args) -> int:
    kind = cx.PRESETS[args.preset]
    if kind == "conv":
        if args.mode or args.grid:
            raise UsageError(f"--mode/--grid apply to transformer presets, not {args.preset}")
        classes = 10 if args.preset.endswith("10") else 100
        reports = [cx.macs_mimoconv(cx.mimoconv_cifar(n, classes)) for n in sorted(set([1] + args.channels))]
    else:
        if args.channels != [1]:
            raise UsageError(f"--channels applies to conv presets, not {args.preset}")
        for m, n in args.grid or []:
            if m != n:
                raise UsageError(f"transformer grids must be square, got {m}x{n}")
        modes = args.mode or list(TRANSFORMER_MODES)
        grids = [g[0] for g in (args.grid or [(2, 2), (4, 4)])]
        reports = [cx.macs_mimoformer(cx.mimoformer_text("performer"))]
        for mode in modes:
            if mode == "performer":
                continue
            for g in ([1] if mode == "transformer" else grids):
                reports.append(cx.macs_mimoformer(cx.mimoformer_text(mode, g)))
    ref = reports[0]
    records = [{**r.to_dict(), "speedup_vs_reference": cx.speedup(ref, r), "reference": ref.label} for r in reports]
    out = _default_out(args, f"macs-{args.preset}.jsonl")
    _write_jsonl(out, records)
    _write_manifest(args, [out], {"preset": args.preset, "channels": args.channels, "mode": args.mode,
                                  "grid": [list(g) for g in args.grid or []]}, "pass")
    print(cx.format_table(reports))
    return 0


def cmd_rerun(args) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        argv = list(manifest["argv"])
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read manifest: {exc}") from exc
    if args.out:
        argv += ["--out", args.out]
    return main(argv)


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=nonneg_int, default=0, help="master seed (default 0)")
    common.add_argument("--out", help=f"primary output file (default: ${OUT_DIR_ENV} or ./superpose-out)")
    common.add_argument("--workers", type=positive_int, default=1, help="processes for independent sweep cells")

    p = argparse.ArgumentParser(prog="superpose", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bounds", parents=[common], help="Monte Carlo check of tail bounds")
    b.add_argument("--kind", required=True, choices=sweeps.BOUND_KINDS)
    b.add_argument("--dims", type=int_list, default=[16, 64, 256])
    b.add_argument("--alpha-deg", type=float_list, default=[70.0], help="angle thresholds for --kind hoeffding")
    b.add_argument("--alpha", type=float_list, default=[0.5], help="relative distortion for cleanup / favor-s")
    b.add_argument("--beta", type=float_list, default=[1.0], help="Markov slack for --kind hadamard")
    b.add_argument("--channels", type=positive_int, default=4, help="superposed values for --kind cleanup")
    b.add_argument("--grid", type=grid_list, default=[(2, 2)], help="channel grids for --kind favor-s, e.g. 2x2,3x3")
    b.add_argument("--trials", type=positive_int, default=10**4)
    b.add_argument("--n-se", type=positive_float, default=3.0, help="allowed standard errors above the bound")
    b.set_defaults(func=cmd_bounds)

    a = sub.add_parser("attention", parents=[common], help="attention approximation checks")
    a.add_argument("--check", required=True, choices=ATTENTION_CHECKS)
    a.add_argument("--features", type=int_list, default=[2**10, 2**12, 2**14], help="R values for --check favor")
    a.add_argument("--seeds", type=positive_int, default=8)
    a.add_argument("--dims", type=int_list, default=[64, 256, 1024], help="D values for --check favor-s")
    a.add_argument("--grid", type=grid_list, default=[(2, 2)])
    a.add_argument("--families", type=positive_int, default=16)
    a.add_argument("--trials", type=positive_int, default=10**6, help="Monte Carlo samples for --check kernel")
    a.add_argument("--pairs", type=positive_int, default=20)
    a.add_argument("--dim", type=positive_int, default=5, help="input dimension for --check kernel")
    a.add_argument("--method", choices=("stratified", "plain"), default="stratified")
    a.add_argument("--tolerance", type=positive_float, default=0.01)
    a.set_defaults(func=cmd_attention)

    t = sub.add_parser("train", parents=[common], help="train the toy superposed conv net")
    t.add_argument("--channels", type=positive_int, default=2)
    t.add_argument("--steps", type=positive_int, default=2000)
    t.add_argument("--batch", type=positive_int, default=16)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--gamma", type=float, default=1e-4)
    t.add_argument("--mu", type=float, default=0.1)
    t.add_argument("--sigma", type=float, default=0.1)
    t.add_argument("--classes", type=positive_int, default=4)
    t.add_argument("--samples-per-class", type=positive_int, default=64)
    t.add_argument("--dim", type=positive_int, default=64)
    t.add_argument("--blocks", type=nonneg_int, default=3)
    t.add_argument("--act", choices=("relu", "prelu", "srelu"), default="prelu")
    t.add_argument("--fast-fraction", type=float, default=1.0)
    t.add_argument("--eval-every", type=positive_int, default=100)
    t.add_argument("--checkpoint", help="checkpoint path (default: next to --out)")
    t.add_argument("--min-accuracy", type=float, default=None, help="fail unless every channel reaches this")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-dynamic", parents=[common], help="evaluate a checkpoint in fast/normal/slow modes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--modes", type=choice_list(("fast", "normal", "slow")), default=["fast", "normal", "slow"])
    e.add_argument("--split", type=nonneg_int, default=1, help="task sample split (0 = training data)")
    e.add_argument("--max-drop", type=float, default=0.02, help="allowed slow-below-fast accuracy gap")
    e.set_defaults(func=cmd_eval_dynamic)

    m = sub.add_parser("macs", parents=[common], help="analytic MAC tables")
    m.add_argument("--preset", required=True, choices=tuple(cx.PRESETS))
    m.add_argument("--channels", type=int_list, default=[1])
    m.add_argument("--mode", type=choice_list(TRANSFORMER_MODES), default=None)
    m.add_argument("--grid", type=grid_list, default=None)
    m.set_defaults(func=cmd_macs)

    r = sub.add_parser("rerun", help="replay the command recorded in a manifest")
    r.add_argument("manifest")
    r.add_argument("--out")
    r.set_defaults(func=cmd_rerun, seed=None)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = [a for a in argv]
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits 2


if __name__ == "__main__":
    sys.exit(main())
