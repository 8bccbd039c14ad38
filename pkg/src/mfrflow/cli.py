"""Command-line entry point: ``mfrflow <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import analysis, plotting
from . import tensor as T
from .config import ConfigError, RunConfig, load_config, parse_lines, write_config
from .flowio import FormatError, error_heatmap, flow_to_color, read_flo, write_ppm
from .model import MFRFlowModel
from .synth import REGIMES, make_dataset, parse_mix
from .train import NumericalError, evaluate, gradcheck_all, train_loop

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ENV = "MFRFLOW_OUT"
CONFIG_ECHO = "effective_config.txt"

log = logging.getLogger("mfrflow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------------ helpers
def _out_dir(args) -> str:
    out = args.out or os.environ.get(OUT_ENV)
    if not out:
        raise UsageError(f"--out is required (or set {OUT_ENV})")
    os.makedirs(out, exist_ok=True)
    return out


def _run_config(args) -> RunConfig:
    overrides = parse_lines(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("train.seed", str(args.seed))
        overrides.setdefault("data.seed", str(args.seed))
    return load_config(getattr(args, "config", None), overrides)


def _echo(cfg: RunConfig, out: str, argv: list[str]) -> None:
    write_config(cfg, os.path.join(out, CONFIG_ECHO))
    with open(os.path.join(out, CONFIG_ECHO), "a") as fh:
        fh.write("# command: " + " ".join(argv) + "\n")


def _require_file(path: str, what: str) -> None:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def _load_model(checkpoint: str, cfg: RunConfig) -> MFRFlowModel:
    _require_file(checkpoint, "checkpoint")
    model = MFRFlowModel(cfg.model, seed=cfg.train.seed)
    model.load_state_dict(T.load_checkpoint(checkpoint))
    return model


def _checkpoint_config(args) -> RunConfig:
    """Explicit --config, else the config echoed next to the checkpoint, else defaults."""
    if getattr(args, "config", None) is None and getattr(args, "checkpoint", None):
        echoed = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), CONFIG_ECHO)
        if os.path.isfile(echoed):
            return load_config(echoed, parse_lines(args.set or []))
    return _run_config(args)


def _dataset(path: str):
    _require_file(path, "dataset directory")
    return analysis.load_dataset(path)


def _split(samples, val_count: int):
    if val_count <= 0 or val_count >= len(samples):
        raise UsageError(f"cannot hold out {val_count} of {len(samples)} samples")
    return samples[:-val_count], samples[-val_count:]


# --------------------------------------------------------------- subcommands
def cmd_gen_data(args, argv) -> int:
    out = _out_dir(args)
    mix = parse_mix(args.spec)
    if not mix or not set(mix) <= set(REGIMES):
        raise UsageError(f"--spec must name regimes from {REGIMES}, got {args.spec!r}")
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    samples = make_dataset(mix, args.count, args.seed, args.history, args.height, args.width)
    analysis.save_dataset(samples, out)
    with open(os.path.join(out, CONFIG_ECHO), "w") as fh:
        fh.write(f"data.mix = {args.spec}\ndata.seed = {args.seed}\ncount = {args.count}\n")
        fh.write(f"data.height = {args.height}\ndata.width = {args.width}\nhistory = {args.history}\n")
        fh.write("# command: " + " ".join(argv) + "\n")
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def _train_data(args, cfg: RunConfig):
    if args.data:
        samples = _dataset(args.data)
        if args.val_data:
            return samples, _dataset(args.val_data)
        return _split(samples, cfg.data.val_count)
    d = cfg.data
    train = make_dataset(d.mix, d.train_count, d.seed, cfg.model.history, d.height, d.width)
    val = make_dataset(d.mix, d.val_count, d.seed + 1_000_003, cfg.model.history, d.height, d.width)
    return train, val


def cmd_train(args, argv) -> int:
    out = _out_dir(args)
    cfg = _run_config(args)
    _echo(cfg, out, argv)
    train, val = _train_data(args, cfg)
    model = MFRFlowModel(cfg.model, seed=cfg.train.seed)
    tlog = train_loop(cfg.train, model, train, val, out)
    if tlog.steps:
        ev = [e["step"] for e in tlog.evals]
        plotting.plot_training(tlog.steps, tlog.losses, os.path.join(out, "training.png"), ev, [e["val_epe"] for e in tlog.evals])
    if tlog.evals:
        print(f"final val EPE {tlog.evals[-1]['val_epe']:.4f} px")
    print(f"checkpoints: {', '.join(os.path.basename(c) for c in tlog.checkpoints)}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    out = _out_dir(args)
    cfg = _checkpoint_config(args)
    _echo(cfg, out, argv)
    model = _load_model(args.checkpoint, cfg)
    report = evaluate(model, _dataset(args.data))
    report.write_csv(os.path.join(out, "eval.csv"))
    print(f"mean EPE {report.mean_epe:.4f} px, Fl {report.fl_all:.2f}%")
    return EXIT_OK


def cmd_profile_nzr(args, argv) -> int:
    out = _out_dir(args)
    if bool(args.checkpoint) == bool(args.analytic_flow):
        raise UsageError("give exactly one of --checkpoint or --analytic-flow")
    cfg = _checkpoint_config(args)
    _echo(cfg, out, argv)
    samples = _dataset(args.data)
    if args.analytic_flow:
        profiles = [analytic_profile_for(s, cfg) for s in samples]
    else:
        profiles = analysis.model_profile(_load_model(args.checkpoint, cfg), samples)
    analysis.write_profile_csv(profiles, os.path.join(out, "nzr_profile.csv"))
    analysis.write_severity_csv(profiles, os.path.join(out, "severity.csv"))
    if profiles:
        base, rec = analysis.mean_profile(profiles)
        plotting.plot_nzr_levels(base, rec, os.path.join(out, "nzr_levels.png"))
        with open(os.path.join(out, "nzr_summary.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "nzr_baseline", "nzr_recovered"])
            for l, (b, r) in enumerate(zip(base, rec), start=1):
                w.writerow([l, repr(float(b)), repr(float(r))])
        print("level  w/o recovery  w. recovery")
        for l, (b, r) in enumerate(zip(base, rec), start=1):
            print(f"{l:5d}  {b:12.4f}  {r:11.4f}")
    return EXIT_OK


def analytic_profile_for(sample, cfg: RunConfig):
    return analysis.analytic_profile(sample, cfg.model.lookup, cfg.model.mfr)


def cmd_viz(args, argv) -> int:
    out = _out_dir(args)
    if args.flo:
        _require_file(args.flo, ".flo file")
        flow = read_flo(args.flo)
        img = flow_to_color(flow, args.max_magnitude)
        write_ppm(os.path.join(out, "flow.ppm"), img)
        plotting.save_image_panel({"flow": img}, os.path.join(out, "flow.png"))
        return EXIT_OK
    if not (args.checkpoint and args.data and args.sample is not None):
        raise UsageError("viz needs --flo, or --checkpoint with --data and --sample")
    cfg = _checkpoint_config(args)
    _echo(cfg, out, argv)
    model = _load_model(args.checkpoint, cfg)
    samples = _dataset(args.data)
    match = [s for s in samples if s.sample_id == args.sample]
    if not match:
        raise FormatError(f"sample {args.sample!r} not in {args.data}")
    sample = match[0]
    pred = analysis.predict(model, sample)
    gt = sample.gt_flow.numpy()
    top = args.max_magnitude or float(np.sqrt((gt**2).sum(0)).max()) or None
    images = {
        "prediction": flow_to_color(pred, top),
        "ground truth": flow_to_color(gt, top),
        "error": error_heatmap(np.sqrt(((pred - gt) ** 2).sum(0))),
    }
    for name, img in zip(("pred", "gt", "error"), images.values()):
        write_ppm(os.path.join(out, f"{name}.ppm"), img)
    plotting.save_image_panel(images, os.path.join(out, "panel.png"))
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    cfg = _run_config(args)
    out = args.out or os.environ.get(OUT_ENV)
    regime = sorted(parse_mix(cfg.data.mix))[0]
    sample = make_dataset(regime, 1, cfg.data.seed, cfg.model.history, cfg.data.height, cfg.data.width)[0]
    model = MFRFlowModel(cfg.model, seed=cfg.train.seed)
    report = gradcheck_all(model, sample, coords_per_group=args.coords, seed=cfg.train.seed)
    ok = report.passed(args.tol)
    lines = [f"{g:16s} max rel err {e:.3e}  ({report.checked[g]} checked, {report.skipped[g]} skipped)" for g, e in report.errors.items()]
    print("\n".join(lines))
    print("PASS" if ok else "FAIL")
    if out:
        os.makedirs(out, exist_ok=True)
        _echo(cfg, out, argv)
        with open(os.path.join(out, "gradcheck.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "max_rel_error", "checked", "skipped", "passed"])
            for g, e in report.errors.items():
                w.writerow([g, repr(e), report.checked[g], report.skipped[g], int(e < args.tol)])
    if not ok:
        raise NumericalError("gradient check failed")
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    out = _out_dir(args)
    cfg = _run_config(args)
    _echo(cfg, out, argv)
    train, val = _train_data(args, cfg)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    rows = analysis.ablate(cfg.model, cfg.train, train, val, seeds, out)
    plotting.plot_ablation([r.seed for r in rows], [r.epe_on for r in rows], [r.epe_off for r in rows], os.path.join(out, "ablation.png"))
    wins = sum(r.recovery_wins for r in rows)
    for r in rows:
        print(f"seed {r.seed}: on {r.epe_on:.4f}  off {r.epe_off:.4f}")
    print(f"recovery wins {wins}/{len(rows)}")
    return EXIT_OK


# --------------------------------------------------------------------- main
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mfrflow", description="Multi-frame optical flow with motion feature recovery.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, config=True):
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV})")
        if config:
            sp.add_argument("--config", help="key=value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
            sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    common(g, config=False)
    g.add_argument("--spec", default="small", help='regime mix, e.g. "small:0.5,large:0.5"')
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--history", type=int, default=2)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", help="dataset directory (default: generate from data.* config)")
    t.add_argument("--val-data", help="held-out dataset directory (default: split data.val_count off --data)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    n = sub.add_parser("profile-nzr", help="per-level NZR with and without recovery")
    common(n)
    n.add_argument("--checkpoint")
    n.add_argument("--analytic-flow", action="store_true", help="use the true flows instead of a model")
    n.add_argument("--data", required=True)
    n.set_defaults(func=cmd_profile_nzr)

    v = sub.add_parser("viz", help="render flow and error images")
    common(v)
    v.add_argument("--flo")
    v.add_argument("--checkpoint")
    v.add_argument("--data")
    v.add_argument("--sample", help="sample id within --data")
    v.add_argument("--max-magnitude", type=float)
    v.set_defaults(func=cmd_viz)

    c = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    common(c)
    c.add_argument("--coords", type=int, default=50)
    c.add_argument("--tol", type=float, default=1e-5)
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="paired runs with recovery on and off")
    common(a)
    a.add_argument("--data")
    a.add_argument("--val-data")
    a.add_argument("--seeds", default="0,1,2,3,4")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args, ["mfrflow"] + argv)
    except (UsageError, ConfigError) as exc:
        print(f"mfrflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, T.CheckpointFormatError, T.ShapeError, FileNotFoundError, KeyError) as exc:
        print(f"mfrflow: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"mfrflow: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
