"""Command-line entry point: ``vinevi {gen-data,fit,alpha-sweep,verify}``.

Exit codes: 0 success, 1 hard error (bad spec, IO, numerical failure),
2 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex
from . import verify as vf
from .numerics import NotSPD

log = logging.getLogger("vinevi")

EXIT_OK, EXIT_ERROR, EXIT_VERIFY = 0, 1, 2


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vinevi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_spec, help_text in (
        ("gen-data", True, "write a dataset CSV and its JSON sidecar"),
        ("fit", True, "fit a variational family; write report, family, metrics and samples"),
        ("alpha-sweep", True, "stepwise fits over the alpha grid; write KL tables"),
        ("verify", False, "run the theorem and property checks; write a JSON manifest"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--spec", type=Path, required=needs_spec, help="experiment spec (JSON)")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
        p.add_argument("--seed", type=_u64, default=None, help="override the spec's master seed")
        p.add_argument("--quick", action="store_true", default=None, help="reduced smoke-run settings")
    return parser


def _spec(args, default_kind=None) -> ex.ExperimentSpec:
    if args.spec is None:
        seed = vf.DEFAULT_SEED if args.seed is None else args.seed
        return ex.ExperimentSpec.from_dict({"experiment": default_kind, "seed": seed}, quick=args.quick)
    return ex.load_spec(args.spec, seed=args.seed, quick=args.quick)


def cmd_gen_data(args) -> int:
    spec = _spec(args)
    paths = ex.gen_data(spec, args.out)
    print(json.dumps(paths))
    return EXIT_OK


def cmd_fit(args) -> int:
    spec = _spec(args)
    if spec.quick:
        spec = ex.quick(spec)
    res = ex.fit(spec, args.out)
    rep, metrics = res["report"], res["metrics"]
    print(json.dumps(ex._jsonable({
        "method": spec.method,
        "stop_reason": rep["stop_reason"],
        "stop_tree": rep["stop_tree"],
        "tau": res["family"].tau,
        "exhausted_stages": rep["exhausted_stages"],
        "forward_kl": metrics["forward_kl"],
        "out": str(args.out),
    })))
    return EXIT_OK


def cmd_alpha_sweep(args) -> int:
    spec = _spec(args)
    if spec.quick:
        spec = ex.quick(spec)
    summary = ex.alpha_sweep(spec, args.out)
    print(json.dumps(ex._jsonable({
        "argmin_alpha": [e["argmin_alpha"] for e in summary["examples"]],
        "wall_clock_s": summary["wall_clock_s"],
        "out": str(args.out),
    })))
    return EXIT_OK


def cmd_verify(args) -> int:
    spec = _spec(args, "verify-theorems")
    manifest = vf.run_checks(seed=spec.seed, quick=spec.quick)
    args.out.mkdir(parents=True, exist_ok=True)
    ex.write_json(args.out / "manifest.json", {**ex.meta(spec, "vinevi.verify/1"), "manifest": manifest})
    for c in manifest["checks"]:
        print(f"{c['status']:>13}  {c['name']}  residual={c['residual']}  tol={c['tolerance']}")
    if not manifest["all_passed"]:
        print("failing: " + ", ".join(manifest["failing"]), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "fit": cmd_fit, "alpha-sweep": cmd_alpha_sweep, "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    log.info("%s spec=%s out=%s", args.command, args.spec, args.out)
    try:
        return COMMANDS[args.command](args)
    except (ex.SpecError, OSError, NotSPD, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
