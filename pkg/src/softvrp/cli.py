"""Command line entry point: gen, train, eval, ablate, report.

Exit status is 0 on success, 2 on bad input or configuration and 3 when
training aborts on non-finite numbers.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .errors import NumericError, SoftVRPError
from .instance import Variant, default_capacity, generate_dataset, load_instance, save_instance
from .model import load_params, save_params
from .trainer import LagrangianState, TrainConfig, initial_lagrangian, steps_for_size, train
from . import harness

log = logging.getLogger("softvrp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(f"{self.prog}: error: {message}") from None


def _add_data_args(p, count_default=100):
    p.add_argument("--variant", default="cvrp", help="cvrp, tsptw or cvrptw")
    p.add_argument("--n", type=int, default=10, help="customers per instance")
    p.add_argument("--capacity", type=float, default=None, help="default depends on --n")
    p.add_argument("--instances", type=int, default=count_default, help="number of instances to generate")
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--data", type=Path, default=None, help="directory of instance JSON files (overrides generation)")


def _add_train_args(p):
    p.add_argument("--config", type=Path, default=None, help="JSON file with TrainConfig fields")
    p.add_argument("--updates", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="steps per episode")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lambda-init", type=float, default=None)
    p.add_argument("--no-shaping", action="store_true")
    p.add_argument("--return-form", default=None)
    p.add_argument("--tw-cost-form", default=None)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    parser = _Parser(prog="softvrp", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="write random instances as JSON files")
    p.add_argument("--variant", default="cvrp")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--capacity", type=float, default=None)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("train", parents=[common], help="train a policy")
    _add_data_args(p, count_default=1000)
    _add_train_args(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("eval", parents=[common], help="evaluate trained and random policies on one instance set")
    _add_data_args(p)
    p.add_argument("--checkpoint", type=Path, default=None, help="trained model; omit for random only")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", choices=("best", "final"), default="best")
    p.add_argument("--no-random", action="store_true")
    p.add_argument("--out", type=Path, required=True, help="CSV path")

    p = sub.add_parser("ablate", parents=[common], help="shaping, return-form or lambda-init study")
    _add_data_args(p, count_default=1000)
    _add_train_args(p)
    p.add_argument("--study", choices=harness.STUDIES, required=True)
    p.add_argument("--values", default=None, help="comma-separated lambda_init values or return forms")
    p.add_argument("--seeds", default="0", help="comma-separated training seeds")
    p.add_argument("--out", type=Path, required=True, help="curves CSV path")

    p = sub.add_parser("report", parents=[common], help="merge eval CSV summaries into one table")
    p.add_argument("inputs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, default=None)
    return parser


def _load_dir(path: Path):
    files = sorted(path.glob("*.json"))
    if not files:
        raise SoftVRPError(f"no instance files in {path}")
    return [load_instance(f) for f in files]


def _instances(args):
    if args.data is not None:
        return _load_dir(args.data)
    variant = Variant.parse(args.variant)
    cap = args.capacity
    if variant.capacitated and cap is None:
        cap = default_capacity(args.n)
    return generate_dataset(variant, args.n, args.instances, cap, args.data_seed)


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {
        "total_updates": args.updates,
        "batch_size": args.batch,
        "steps_per_episode": args.steps,
        "seed": args.seed,
        "lambda_init": args.lambda_init,
        "return_form": args.return_form,
        "tw_cost_form": args.tw_cost_form,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.no_shaping:
        overrides["shaping"] = False
    return dataclasses.replace(cfg, **overrides)


def _progress(every=50):
    def report(row):
        if row["update"] % every == 0:
            log.info("update %d obj %.4f policy_loss %.4f", row["update"], row["mean_obj"], row["policy_loss"])
    return report


def cmd_gen(args) -> int:
    variant = Variant.parse(args.variant)
    cap = args.capacity
    if variant.capacitated and cap is None:
        cap = default_capacity(args.n)
    args.out.mkdir(parents=True, exist_ok=True)
    for k, inst in enumerate(generate_dataset(variant, args.n, args.count, cap, args.seed)):
        save_instance(inst, args.out / f"{variant.value}{args.n}_{k:04d}.json")
    print(f"wrote {args.count} instances to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    instances = _instances(args)
    args.out.mkdir(parents=True, exist_ok=True)
    result = train(instances, cfg, progress=_progress())
    save_params(result.params, args.out / "model.ckpt",
                extra={"config": cfg.to_dict(), "lagrangian": result.lagrangian.to_dict()})
    result.write_log(args.out / "train_log.csv")
    (args.out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    print(f"trained {cfg.total_updates} updates; lambdas {result.lagrangian.lambdas.tolist()}")
    return EXIT_OK


def _eval_rows(method, instances, rows):
    row = harness.ReportRow.from_metrics(method, instances, rows)
    out = [{"method": method, "variant": row.variant, "n": row.n, **r} for r in rows]
    out.append({**row.to_dict(), "instance": "summary"})
    return out, row


def cmd_eval(args) -> int:
    instances = _instances(args)
    steps = args.steps or steps_for_size(instances[0].num_customers)
    table, summaries = [], []
    if args.checkpoint is not None:
        params = load_params(args.checkpoint, variant=instances[0].variant.value)
        extra = params.extra
        cfg = TrainConfig.from_dict(extra["config"]) if "config" in extra else TrainConfig()
        cfg = dataclasses.replace(cfg, steps_per_episode=steps)
        lagr = (LagrangianState(**extra["lagrangian"]) if "lagrangian" in extra
                else initial_lagrangian(instances[0].variant, cfg))
        rows = harness.evaluate(instances, params, lagr, cfg, seed=args.seed, report=args.report)
        rows_out, summary = _eval_rows("trained", instances, rows)
        table += rows_out
        summaries.append(summary)
    if not args.no_random:
        rows = harness.random_policy_rows(instances, steps, args.seed, args.report)
        rows_out, summary = _eval_rows("random", instances, rows)
        table += rows_out
        summaries.append(summary)
    fields = ["method", "variant", "n", "instances", "instance", "obj", "obj_sd", "tgt", "travel", "waiting", "cost",
              "cost_capacity", "cost_earliness", "cost_lateness", "best_obj", "final_obj", "init_obj", "seconds"]
    harness.write_rows(table, args.out, fields)
    print(harness.format_table([s.to_dict() for s in summaries]))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    instances = _instances(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    values = None
    if args.values:
        parts = [v.strip() for v in args.values.split(",") if v.strip()]
        values = [float(v) for v in parts] if args.study == "lambda-init" else parts
    runs = harness.run_study(args.study, instances, cfg, seeds, values,
                             progress=lambda r: log.info("finished %s seed %d", r.label, r.seed))
    harness.write_rows(harness.curves_rows(runs), args.out)
    tail = max(1, cfg.total_updates // 5)
    for run in runs:
        tgt = harness.curve(run, "mean_tgt")[-tail:].mean()
        cost = sum(harness.curve(run, c)[-tail:].mean() for c in run.result.log[0] if c.startswith("cost_"))
        print(f"{run.label:>16} seed {run.seed}: auc {harness.area_under_curve(harness.curve(run)):.4f} "
              f"trailing sd {harness.trailing_sd(harness.curve(run), tail):.4f} tgt {tgt:.4f} cost {cost:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = harness.merge_reports(args.inputs)
    if args.out is not None:
        harness.write_rows(rows, args.out, harness.REPORT_FIELDS)
    print(harness.format_table(rows))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "report": cmd_report}


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return EXIT_CONFIG
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric abort: {exc} (step {exc.step})", file=sys.stderr)
        if exc.snapshot:
            print(json.dumps(exc.snapshot, default=str)[:2000], file=sys.stderr)
        return EXIT_NUMERIC
    except (SoftVRPError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(cli())
