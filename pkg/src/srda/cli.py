"""Command-line entry point: ``srda {gen-data,train,eval,gradcheck}``.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import PLANS, apply_override, load_config
from .data import SYNTHETIC_KINDS, Standardizer, load_idx_dataset, make_shifted_pair, read_dataset_csv, write_dataset_csv
from .errors import ConfigError, DivergedError, SrdaError
from .gradcheck import DEFAULT_TOL, LOSSES, run_gradcheck
from .metrics import accuracy, perturbed_eval
from .model import load_checkpoint, save_checkpoint
from .numeric import make_rng
from .perturbation import NoisePlan
from .runner import prepare, run_spec, write_outputs

log = logging.getLogger("srda")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("SRDA_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _floats(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# --------------------------------------------------------------------------- #
# gen-data


def cmd_gen_data(args) -> int:
    source, target = make_shifted_pair(args.kind, args.n, args.noise, args.rotate, args.translate,
                                       args.classes, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset_csv(source, out / "source.csv")
    write_dataset_csv(target, out / "target.csv")
    manifest = {
        "kind": args.kind,
        "n": args.n,
        "noise": args.noise,
        "rotate": args.rotate,
        "translate": args.translate,
        "classes": args.classes if args.kind == "blobs" else 2,
        "seed": args.seed,
        "files": ["source.csv", "target.csv"],
        "srda_version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out / 'source.csv'} {out / 'target.csv'} {out / 'manifest.json'}")
    return 0


# --------------------------------------------------------------------------- #
# train


def cmd_train(args) -> int:
    spec = load_config(args.config)
    for assignment in args.set or []:
        apply_override(spec, assignment)
    if args.plan is not None:
        spec.set("train.plan", args.plan)
    if args.seed is not None:
        spec.set("train.seed", str(args.seed))
    if args.epochs is not None:
        spec.set("train.epochs", str(args.epochs))
    if args.out is not None:
        spec.set("output.dir", args.out)

    out = Path(spec["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    every = spec["output.checkpoint_every"]
    prep = prepare(spec)

    def on_epoch(state):
        if every and state.epoch % every == 0:
            save_checkpoint(state.model, out / f"checkpoint_epoch{state.epoch:04d}.json", prep.preprocess)

    try:
        result = run_spec(spec, on_epoch=on_epoch, prepared=prep)
    except DivergedError as e:
        print(f"error: training diverged at step {e.step}: {e}", file=sys.stderr)
        return 1
    write_outputs(result, out)
    state = result.state
    print(f"epochs={state.epoch}")
    print(f"steps={state.step}")
    if state.history:
        last = state.history[-1]
        print(f"source_loss={last.source_loss:.6g}")
        print(f"mean_lsd={last.mean_lsd:.6g}")
        if last.target_accuracy is not None:
            print(f"target_accuracy={last.target_accuracy:.6g}")
        print(f"hdh_proxy={last.hdh_proxy:.6g}")
    print(f"out={out}")
    return 0


# --------------------------------------------------------------------------- #
# eval


def _load_eval_data(args):
    if args.data is not None:
        return read_dataset_csv(args.data, "eval")
    if args.images is None:
        raise UsageError("one of --data or --images is required")
    return load_idx_dataset(args.images, args.labels, "eval")


def cmd_eval(args) -> int:
    try:
        model, preprocess = load_checkpoint(args.checkpoint)
    except (OSError, SrdaError) as e:
        print(f"error: cannot read checkpoint {args.checkpoint}: {e}", file=sys.stderr)
        return 1
    ds = _load_eval_data(args)
    if preprocess is not None and not args.raw:
        ds = Standardizer(preprocess["mean"], preprocess["scale"]).apply(ds)
    if ds.dim != model.input_dim:
        print(f"error: data dim {ds.dim} != model input width {model.input_dim}", file=sys.stderr)
        return 1
    print(f"n={len(ds)}")
    if ds.labeled:
        print(f"accuracy={accuracy(model, ds):.6g}")
    for plan_name in args.plan or ["isotropic"]:
        plan = NoisePlan(plan_name, args.epsilon, args.vat_xi, args.vat_power_iters)
        res = perturbed_eval(model, ds, plan, make_rng(args.seed))
        print(f"mean_lsd.{plan_name}={res.mean_lsd:.6g}")
        print(f"hdh_proxy.{plan_name}={res.hdh_proxy:.6g}")
        print(f"fallbacks.{plan_name}={res.fallbacks}")
    return 0


# --------------------------------------------------------------------------- #
# gradcheck


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(range(args.seed, args.seed + args.seeds), args.h, args.corrupt_backward)
    failed = []
    for name in LOSSES:
        chk = report[name]
        ok = chk.max_rel_error <= args.tol
        print(f"{name} max_rel_error={chk.max_rel_error:.3e} worst_segment={chk.worst_segment} "
              f"{'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(chk)
    if failed:
        for chk in failed:
            print(f"error: {chk.loss} gradient mismatch in segment {chk.worst_segment} "
                  f"(rel. error {chk.max_rel_error:.3e} > {args.tol:g})", file=sys.stderr)
        return 1
    return 0


# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srda", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"srda {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic source/target CSV datasets")
    g.add_argument("--kind", required=True, choices=SYNTHETIC_KINDS)
    g.add_argument("--n", type=int, default=400, help="points per domain")
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--rotate", type=float, default=0.0, help="target rotation in degrees")
    g.add_argument("--translate", type=_floats, default=None, help="target offset, e.g. 1,0")
    g.add_argument("--classes", type=int, default=3, help="class count for blobs")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the training schedule from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--plan", choices=PLANS, help="override train.plan ('none' = source only)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset CSV")
    e.add_argument("--images", help="IDX image file")
    e.add_argument("--labels", help="IDX label file")
    e.add_argument("--plan", action="append", choices=PLANS[1:])
    e.add_argument("--epsilon", type=float, default=0.5)
    e.add_argument("--vat-xi", type=float, default=0.1)
    e.add_argument("--vat-power-iters", type=int, default=1)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--raw", action="store_true", help="skip the checkpoint's stored standardization")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="compare backprop with finite differences")
    c.add_argument("--seed", type=int, default=0, help="first seed")
    c.add_argument("--seeds", type=int, default=10, help="number of random models")
    c.add_argument("--tol", type=float, default=DEFAULT_TOL)
    c.add_argument("--h", type=float, default=1e-5)
    c.add_argument("--corrupt-backward", default=None, help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        parser.print_usage(sys.stderr)
        print(f"srda: error: {e}", file=sys.stderr)
        return 2
    except (SrdaError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
