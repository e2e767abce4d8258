"""Command-line entry point: ``medcl <subcommand>``.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 self-check failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("medcl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(top: bool) -> argparse.ArgumentParser:
    # global flags work before or after the subcommand; subcommand copies must not reset them
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", default=d(None), help="JSON run configuration")
    g.add_argument("--set", action="append", default=d([]), metavar="KEY=VALUE",
                   help="override a config field, e.g. trainer.lr=3e-3 (repeatable)")
    g.add_argument("--out", default=d(None), help="output directory")
    g.add_argument("--seed", type=int, default=d(None), help="seed for data generation or training")
    g.add_argument("--jobs", type=int, default=d(1), help="parallel training runs")
    g.add_argument("--run-name", default=d(None), help="run directory name (default: config hash + timestamp)")
    g.add_argument("-v", "--verbose", action="count", default=d(0))
    g.add_argument("--json", action="store_true", default=d(False), help="machine-readable output")
    return p


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = _common(top=False)
    parser = _Parser(prog="medcl", description="Scribble-supervised segmentation with mix and prototype consistency.",
                     parents=[_common(top=True)])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    g = sub.add_parser("gen-data", parents=[common], help="generate a phantom dataset")
    g.add_argument("--mode", choices=("structure", "pathology"), default="structure")
    g.add_argument("--m", type=int, default=3, help="number of foreground classes")
    g.add_argument("--train", type=int, default=40)
    g.add_argument("--val", type=int, default=10)
    g.add_argument("--test", type=int, default=20)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--coverage", type=float, default=0.05, help="scribble pixels per region pixel")

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", help="dataset directory (overrides the config)")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset directory (default: the one the checkpoint was trained on)")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))

    a = sub.add_parser("ablate", parents=[common], help="loss-term ablation")
    a.add_argument("--data")
    a.add_argument("--rows", default="1,2,3,4,full", help="comma-separated rows out of 1,2,3,4,full")
    a.add_argument("--seeds", type=int, default=3, help="number of seeds (0..N-1)")

    s = sub.add_parser("sweep", parents=[common], help="scribble-count sensitivity sweep")
    s.add_argument("--data")
    s.add_argument("--counts", type=_int_list, default=[1, 3, 5, 10])
    s.add_argument("--seeds", type=int, default=3)

    c = sub.add_parser("selfcheck", parents=[common], help="run fast correctness checks")
    c.add_argument("--inject-fault", help=argparse.SUPPRESS)
    return parser


# ---------------------------------------------------------------- helpers


def _load_config(args):
    from .config import TrainConfig

    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = list(args.set)
    if getattr(args, "data", None):
        overrides.append(f"dataset={json.dumps(args.data)}")
    if args.seed is not None:
        overrides += [f"trainer.seed={args.seed}", f"model.seed={args.seed}"]
    if args.out:
        overrides.append(f"out_dir={json.dumps(args.out)}")
    return cfg.with_overrides(overrides) if overrides else cfg


def _run_dir(args, cfg) -> Path:
    name = args.run_name or f"{cfg.digest()[:10]}-{time.strftime('%Y%m%d-%H%M%S')}"
    path = Path(cfg.out_dir) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, indent=1, default=str) if args.json else text)


def _summary_json(summary) -> dict:
    return {"dice_mean": summary.dice_mean, "dice_std": summary.dice_std,
            "hd_mean": summary.hd_mean, "hd_std": summary.hd_std, "hd_undefined": summary.hd_undefined}


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    from .phantom import PhantomSpec, generate_splits, write_dataset

    spec = PhantomSpec(args.size, args.size, args.m, mode=args.mode)
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out or "data")
    counts = {"train": args.train, "val": args.val, "test": args.test}
    splits = {}
    for split, samples in generate_splits(spec, counts, seed, args.coverage).items():
        if not samples:
            continue
        write_dataset(samples, None, out / split, split=split, spec=spec, coverage=args.coverage)
        splits[split] = {"count": len(samples), "warnings": sum(len(s.warnings) for s in samples)}
    total = sum(v["count"] for v in splits.values())
    lines = [f"wrote {total} samples to {out} (mode={args.mode}, m={args.m}, {args.size}x{args.size})"]
    lines += [f"  {k:<5} {v['count']:>4} samples, {v['warnings']} scribble warnings" for k, v in splits.items()]
    _emit(args, {"root": str(out), "splits": splits}, "\n".join(lines))
    return EXIT_OK


def cmd_train(args) -> int:
    from .evalkit import evaluate_model
    from .trainer import Dataset, load_state, train

    cfg = _load_config(args)
    dataset = Dataset.load(cfg.dataset, cfg.trainer.max_train_samples)
    run_dir = _run_dir(args, cfg)
    ckpt, train_log = train(cfg, run_dir, dataset)
    state, _ = load_state(ckpt)
    payload = {"run_dir": str(run_dir), "checkpoint": str(ckpt), "steps": len(train_log.records),
               "validation": train_log.validation}
    text = [f"run directory: {run_dir}", f"steps: {len(train_log.records)}"]
    if train_log.records:
        last = train_log.records[-1]
        text.append("final losses: " + " ".join(f"{k}={v:.4f}" for k, v in last.items() if k.startswith("l_")))
    if dataset.val:
        _, summ = evaluate_model(state.model, dataset.val)
        payload["val"] = _summary_json(summ)
        text += ["validation:", summ.table()]
    _emit(args, payload, "\n".join(text))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalkit import evaluate
    from .segnet import load_checkpoint

    data = args.data
    if data is None:
        _, header = load_checkpoint(args.checkpoint)
        data = header.get("config", {}).get("dataset")
        if data is None:
            raise UsageError("checkpoint does not record its dataset; pass --data")
    records, summ = evaluate(args.checkpoint, data, args.split)
    payload = {"split": args.split, "cases": [{"id": r.case_id, "dice": r.dice, "hd": r.hd} for r in records],
               "summary": _summary_json(summ)}
    _emit(args, payload, f"{args.split} split, {len(records)} cases\n{summ.table()}")
    return EXIT_OK


def _sweep_payload(result, run_dir) -> dict:
    return {"run_dir": str(run_dir), "axis": result.axis,
            "points": {str(k): {"mean": v[0], "std": v[1], "values": v[2]} for k, v in result.points().items()}}


def cmd_ablate(args) -> int:
    from .evalkit import ablate, format_sweep
    from .trainer import Dataset

    cfg = _load_config(args)
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    run_dir = _run_dir(args, cfg)
    cfg.save(run_dir / "config.json")
    dataset = Dataset.load(cfg.dataset, cfg.trainer.max_train_samples) if args.jobs <= 1 else None
    result = ablate(cfg, rows, range(args.seeds), dataset, run_dir, args.jobs)
    text = "\n".join([f"run directory: {run_dir}", "test split:", format_sweep(result, "test"),
                      "validation split:", format_sweep(result, "val")])
    _emit(args, _sweep_payload(result, run_dir), text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .evalkit import format_sweep, sensitivity_sweep, spearman
    from .trainer import Dataset

    cfg = _load_config(args)
    run_dir = _run_dir(args, cfg)
    cfg.save(run_dir / "config.json")
    dataset = Dataset.load(cfg.dataset, cfg.trainer.max_train_samples) if args.jobs <= 1 else None
    result = sensitivity_sweep(cfg, args.counts, range(args.seeds), dataset, run_dir, args.jobs)
    payload = _sweep_payload(result, run_dir)
    text = [f"run directory: {run_dir}", format_sweep(result)]
    if len(args.counts) > 1:
        rho = spearman(result)
        payload["spearman"] = rho
        text.append(f"spearman(count, dice) = {rho:.3f}")
    _emit(args, payload, "\n".join(text))
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import FAULTS, run_checks

    if args.inject_fault and args.inject_fault not in FAULTS:
        raise UsageError(f"unknown fault {args.inject_fault!r}")
    results = run_checks(args.inject_fault)
    ok = all(r.passed for r in results)
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<30} {r.detail} ({r.seconds:.2f}s)" for r in results]
    failed = [r.name for r in results if not r.passed]
    lines.append("all checks passed" if ok else "failed: " + ", ".join(failed))
    _emit(args, {"passed": ok, "checks": [r.to_json() for r in results]}, "\n".join(lines))
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "sweep": cmd_sweep, "selfcheck": cmd_selfcheck}


def main(argv: list[str] | None = None) -> int:
    from .config import ConfigError
    from .phantom import PhantomError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"medcl: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as err:  # --help
        return int(err.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, PhantomError) as err:
        print(f"medcl: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as err:  # runtime failures: I/O, corrupt data, diverged losses
        log.debug("traceback", exc_info=True)
        print(f"medcl: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
