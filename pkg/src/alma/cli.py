"""Command-line entry point: ``alma <subcommand> ...``.

Every subcommand accepts ``--config FILE``, a ``key=value`` text file whose
keys are the long flag names (dashes or underscores). Flags given on the
command line win over the file.
"""

from __future__ import annotations

import argparse
import json
import pathlib
import sys
from typing import Optional, Sequence

import numpy as np

from alma import nn
from alma.baselines import boundary_problem, generic_alm, halfspace_problem, inactive_problem
from alma.distances import DistanceSpec
from alma.harness import campaign as camp
from alma.harness.data import DESK_DATASET, REFERENCE_MODEL, bundled_path, load_dataset, make_desk_dataset, save_dataset
from alma.harness.train import TrainingFailedError, accuracy, train_reference_model
from alma.penalties import Penalty
from alma.solver import AlmaConfig


class ConfigFileError(ValueError):
    pass


def read_config_file(path: str) -> dict[str, str]:
    out = {}
    try:
        text = pathlib.Path(path).read_text()
    except OSError as exc:
        raise ConfigFileError(f"cannot read config file: {exc}") from None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{path}:{n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _truthy(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigFileError(f"not a boolean: {text!r}")


def _apply_config(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise ConfigFileError(f"unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = _truthy(value)
        elif action.type is not None:
            try:
                defaults[key] = action.type(value)
            except (TypeError, ValueError) as exc:
                raise ConfigFileError(f"bad value for {key}: {exc}") from None
        else:
            defaults[key] = value
        if action.choices is not None and defaults[key] not in action.choices:
            raise ConfigFileError(f"{key} must be one of {', '.join(map(str, action.choices))}")
    parser.set_defaults(**defaults)


# --------------------------------------------------------------------------
# argument definitions


def _add_campaign_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="model file (default: bundled reference model)")
    p.add_argument("--data", help="dataset file (default: bundled desk dataset)")
    p.add_argument("--distance", default="l2", choices=["l1", "l2", "ciede2000", "ssim"])
    p.add_argument("--ciede2000-accumulation", default="sum", choices=["sum", "mean", "l2"])
    p.add_argument("--targeted", action="store_true", help="same as --constraint tdlr+")
    p.add_argument("--constraint", default="dlr+", choices=["dlr+", "tdlr+"])
    p.add_argument("--target-rule", default="second", help="'second' or 'fixed:<k>'")
    p.add_argument("--limit", type=int, help="number of samples to attack")
    p.add_argument("--seed", type=int, default=0, help="sample-selection seed (-1 keeps dataset order)")
    p.add_argument("--workers", type=int, help=f"worker processes (default: ${camp.WORKERS_ENV} or 1)")
    p.add_argument("--epsilon", type=float, help="distance increase of the calibrated first step")
    p.add_argument("--out", help="output directory for samples.csv, report.json, curve.dat")


def _add_alma_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float, default=1.2)
    p.add_argument("--tau", type=float, default=0.95)
    p.add_argument("--check-period", type=int, default=10)
    p.add_argument("--penalty", default="p2", choices=[k.value for k in Penalty])
    p.add_argument("--mu-init", type=float, default=1.0)
    p.add_argument("--rho-init", type=float, default=1.0)
    p.add_argument("--mu-min", type=float, default=1e-6)
    p.add_argument("--mu-max", type=float, default=1e12)
    p.add_argument("--final-lr-fraction", type=float, default=0.01)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alma", description="Augmented Lagrangian adversarial attacks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attack", help="run an ALMA campaign")
    _add_campaign_args(p)
    _add_alma_args(p)

    p = sub.add_parser("penalty-attack", help="run the penalty-method baseline campaign")
    _add_campaign_args(p)
    p.add_argument("--search-steps", type=int, default=9)
    p.add_argument("--inner-iters", type=int, default=1000)
    p.add_argument("--c-init", type=float, default=1.0)

    p = sub.add_parser("bisect-budget", help="minimal L2 adversarials by bisecting a PGD budget")
    _add_campaign_args(p)
    p.add_argument("--hi", type=float, default=10.0, help="upper budget")
    p.add_argument("--precision", type=float, default=0.01)
    p.add_argument("--pgd-steps", type=int, default=100)

    p = sub.add_parser("train-ref", help="train the reference classifier")
    p.add_argument("--data", help="dataset file (default: bundled desk dataset)")
    p.add_argument("--write-data", help="regenerate the desk dataset to this path and train on it")
    p.add_argument("--samples", type=int, default=1000, help="desk dataset size with --write-data")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model file to write")

    p = sub.add_parser("alm-demo", help="generic augmented Lagrangian on analytic problems")
    p.add_argument("--penalty", choices=[k.value for k in Penalty], help="only this penalty")
    p.add_argument("--rho-factor", type=float, default=2.0)
    p.add_argument("--outer-iters", type=int, default=50)

    p = sub.add_parser("report", help="recompute aggregates from a campaign directory")
    p.add_argument("dir", help="campaign output directory")
    p.add_argument("--curve", action="store_true", help="rewrite curve.dat and print it")
    p.add_argument("--points", type=int, default=101, help="curve resolution")

    for action in sub.choices.values():
        action.add_argument("--config", help="key=value file mirroring the flags")
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(subparser, read_config_file(args.config))
        args = parser.parse_args(argv)
    return args


# --------------------------------------------------------------------------
# commands


def _campaign_from(args: argparse.Namespace, attack: str) -> camp.Campaign:
    spec = DistanceSpec(args.distance, ciede2000_accumulation=args.ciede2000_accumulation)
    targeted = args.targeted or args.constraint == "tdlr+"
    fields = dict(distance=spec, targeted=targeted, epsilon=args.epsilon)
    if attack == "alma":
        fields.update(
            iterations=args.iterations,
            alpha=args.alpha,
            gamma=args.gamma,
            tau=args.tau,
            check_period=args.check_period,
            penalty=args.penalty,
            mu_init=args.mu_init,
            rho_init=args.rho_init,
            mu_min=args.mu_min,
            mu_max=args.mu_max,
            final_lr_fraction=args.final_lr_fraction,
            record_trace=False,
        )
    extra = {}
    if attack == "penalty":
        extra = dict(penalty_steps=args.search_steps, penalty_inner=args.inner_iters, penalty_c_init=args.c_init)
    elif attack == "bisect":
        extra = dict(bisect_hi=args.hi, bisect_precision=args.precision, pgd_steps=args.pgd_steps)
    return camp.Campaign(
        model_path=args.model or str(bundled_path(REFERENCE_MODEL)),
        data_path=args.data or str(bundled_path(DESK_DATASET)),
        attack=attack,
        config=AlmaConfig(**fields),
        target_rule=args.target_rule,
        limit=args.limit,
        workers=args.workers,
        out_dir=args.out,
        seed=None if args.seed < 0 else args.seed,
        **extra,
    )


def _print_report(report: camp.CampaignReport, out=None) -> None:
    out = out or sys.stdout
    agg = report.aggregates()
    width = max(len(k) for k in agg)
    for key, value in agg.items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        print(f"{key:<{width}}  {value}", file=out)


def _run(args: argparse.Namespace, attack: str) -> int:
    report = camp.run_campaign(_campaign_from(args, attack))
    _print_report(report)
    return 0


def _train(args: argparse.Namespace) -> int:
    if args.write_data:
        ds = make_desk_dataset(args.samples, args.seed)
        save_dataset(ds, args.write_data)
    else:
        ds = load_dataset(args.data or bundled_path(DESK_DATASET))
    try:
        model = train_reference_model(ds, epochs=args.epochs, seed=args.seed)
    except TrainingFailedError as exc:
        print(f"alma: {exc}", file=sys.stderr)
        return 1
    nn.save_model(model, args.out)
    print(f"train accuracy {accuracy(model, ds):.4f}, {model.num_parameters()} parameters -> {args.out}")
    return 0


def _alm_demo(args: argparse.Namespace) -> int:
    kinds = [Penalty.parse(args.penalty)] if args.penalty else list(Penalty)
    problems = [
        ("halfspace", halfspace_problem()),
        ("boundary", boundary_problem()),
        ("inactive", inactive_problem()),
    ]
    print(f"{'problem':<10} {'penalty':<7} {'outer':>5} {'|x - x*|':>10} {'mu':>12} {'mu*':>5} {'rho':>9}")
    for name, problem in problems:
        for kind in kinds:
            x, trace = generic_alm(problem, kind, outer_iters=args.outer_iters, rho_factor=args.rho_factor)
            err = float(np.max(np.abs(x - problem.solution)))
            last = trace[-1]
            print(
                f"{name:<10} {kind.value:<7} {len(trace):>5} {err:>10.2e} {last.mu:>12.6g} "
                f"{problem.multiplier:>5g} {last.rho:>9.3g}"
            )
    return 0


def _report(args: argparse.Namespace) -> int:
    root = pathlib.Path(args.dir)
    records = camp.records_from_csv((root / "samples.csv").read_text())
    report = camp.summarize(records, camp.default_thresholds(records, args.points))
    _print_report(report)
    if args.curve:
        (root / "curve.dat").write_text(camp.curve_to_dat(report.curve))
        sys.stdout.write(camp.curve_to_dat(report.curve))
    (root / "report.json").write_text(json.dumps(report.aggregates(), indent=2, sort_keys=True) + "\n")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except ConfigFileError as exc:
        print(f"alma: {exc}", file=sys.stderr)
        return 2
    handlers = {
        "attack": lambda a: _run(a, "alma"),
        "penalty-attack": lambda a: _run(a, "penalty"),
        "bisect-budget": lambda a: _run(a, "bisect"),
        "train-ref": _train,
        "alm-demo": _alm_demo,
        "report": _report,
    }
    try:
        return handlers[args.command](args)
    except (OSError, ValueError, nn.ModelFormatError) as exc:
        print(f"alma: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
