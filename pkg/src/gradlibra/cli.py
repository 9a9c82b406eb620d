"""``gradlibra`` command line: generate, train, eval, compare, sweep.

Every command writes under ``--out`` (or the config's ``output_dir``) and
drops a ``manifest.json`` holding the fully resolved configuration, which is
enough to reproduce the run.

Exit codes: 0 ok, 2 usage, 3 config, 4 data, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import generate, load_dataset, save_dataset
from .errors import ConfigError, DataError, GradLibraError, NumericError
from .harness import (
    ExperimentConfig,
    dataset_for_seed,
    loss_label,
    manifest,
    parse_loss,
    run_grid,
    run_one,
)
from .losses import LossConfig, LossKind
from .metrics import TABLE_COLUMNS, evaluate, format_cell
from .model import Model, load_checkpoint, save_checkpoint
from .telemetry import LedgerMode

log = logging.getLogger("gradlibra")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5

TELEMETRY_MODES = {
    "raw-ce": (LedgerMode.RAW_CE,),
    "active-loss": (LedgerMode.ACTIVE_LOSS,),
    "both": (LedgerMode.RAW_CE, LedgerMode.ACTIVE_LOSS),
}


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int, action="append", dest="seeds",
                        help="run seed (repeatable); replaces the config's seed list")
    common.add_argument("--loss", action="append", dest="losses",
                        help="ce | focal | focal_star | grad_libra[:A_POS,A_NEG] (repeatable for compare)")
    common.add_argument("--alpha-pos", type=_floats, help="alpha+ (comma list for sweep)")
    common.add_argument("--alpha-neg", type=_floats, help="alpha- (comma list for sweep)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--telemetry-mode", choices=sorted(TELEMETRY_MODES), default="both")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gradlibra", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train one model per seed")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--dataset", type=Path, help="dataset dir (default: regenerate from config)")
    sub.add_parser("compare", parents=[common], help="table of losses x seeds")
    sw = sub.add_parser("sweep", parents=[common], help="alpha+/alpha- grid")
    sw.add_argument("--with-baseline", action="store_true", help="add a CE row per seed")
    return p


def _single(values: Optional[list[float]], flag: str) -> Optional[float]:
    if values is None:
        return None
    if len(values) != 1:
        raise ConfigError(f"{flag} takes a single value for this command")
    return values[0]


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seeds:
        cfg = replace(cfg, seeds=args.seeds)
    if args.out:
        cfg.output_dir = str(args.out)
    loss = cfg.loss
    if args.command in ("train", "eval") and args.losses:
        if len(args.losses) != 1:
            raise ConfigError("--loss takes a single value for this command")
        loss = parse_loss(args.losses[0], loss)
    if args.command != "sweep":
        a_pos = _single(args.alpha_pos, "--alpha-pos")
        a_neg = _single(args.alpha_neg, "--alpha-neg")
        d = loss.to_dict()
        if a_pos is not None or a_neg is not None:
            d["alpha_unified"] = None
        if a_pos is not None:
            d["alpha_pos"] = a_pos
        if a_neg is not None:
            d["alpha_neg"] = a_neg
        loss = LossConfig.from_dict(d)
    cfg.loss = loss
    return cfg


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_generate(cfg: ExperimentConfig, args) -> None:
    out = Path(cfg.output_dir)
    if isinstance(cfg.dataset, str):
        raise ConfigError("generate needs a dataset spec, not a path")
    for seed in cfg.seeds:
        spec = replace(cfg.dataset, seed=seed)
        train_set, test_set, groups = generate(spec)
        save_dataset(out / f"data_seed{seed}", spec, train_set, test_set, groups)
        log.info("seed %d: %d train / %d test samples", seed, len(train_set), len(test_set))
    _write(out / "manifest.json", manifest(cfg, "generate"))


def cmd_train(cfg: ExperimentConfig, args) -> None:
    out = Path(cfg.output_dir)
    modes = TELEMETRY_MODES[args.telemetry_mode]
    rows = []
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        with (out / f"telemetry_seed{seed}.jsonl").open("w") as fh:
            res = run_one(cfg, seed, stream=fh, modes=modes)
        save_checkpoint(out / f"checkpoint_seed{seed}.json", res.model_spec, cfg.optim, res.loss, res.state)
        _write(out / f"report_seed{seed}.json", res.report.to_json())
        rows.append([seed] + res.report.row())
        log.info("seed %d: mAP %.4f", seed, res.report.map)
    _write(out / "train_summary.csv", _table(["seed", *TABLE_COLUMNS], rows))
    _write(out / "manifest.json", manifest(cfg, "train"))


def cmd_eval(cfg: ExperimentConfig, args) -> None:
    out = Path(cfg.output_dir)
    spec, _, _, state = load_checkpoint(args.checkpoint)
    if args.dataset:
        _, test_set, groups = load_dataset(args.dataset)
    else:
        _, test_set, groups = dataset_for_seed(cfg, state.seed)
    if test_set.feature_dim != spec.feature_dim or test_set.num_classes != spec.num_classes:
        raise DataError("checkpoint and dataset dimensions differ")
    report = evaluate(Model(spec, state.params), test_set, groups)
    stem = args.checkpoint.stem
    _write(out / f"eval_{stem}.json", report.to_json())
    _write(out / f"eval_{stem}.csv", report.to_csv())
    _write(out / "manifest.json", manifest(cfg, "eval", {"checkpoint": str(args.checkpoint)}))


def _table(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([format_cell(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _mean_rows(results, key) -> list[list]:
    """Per-key means over seeds, one row per distinct key, in first-seen order."""
    order, buckets = [], {}
    for r in results:
        k = key(r)
        if k not in buckets:
            order.append(k)
            buckets[k] = []
        buckets[k].append(r.report.row())
    rows = []
    for k in order:
        with warnings.catch_warnings():
            # a group with no classes is NaN for every seed; keep it NaN quietly
            warnings.simplefilter("ignore", RuntimeWarning)
            m = np.nanmean(np.asarray(buckets[k], dtype=np.float64), axis=0)
        rows.append([*k, "mean", *[float(v) for v in m]])
    return rows


def _loss_key(r) -> tuple:
    if r.loss.kind is LossKind.GRAD_LIBRA:
        return (r.loss.kind.value, r.loss.alpha_pos, r.loss.alpha_neg)
    return (r.loss.kind.value, "-", "-")


def cmd_compare(cfg: ExperimentConfig, args) -> None:
    names = args.losses or ["ce", "grad_libra"]
    losses = [parse_loss(n, cfg.loss) for n in names]
    results = run_grid(cfg, losses)
    rows = [[*_loss_key(r), r.seed, *r.report.row()] for r in results]
    rows += _mean_rows(results, _loss_key)
    header = ["loss", "alpha_pos", "alpha_neg", "seed", *TABLE_COLUMNS]
    out = Path(cfg.output_dir)
    _write(out / "compare.csv", _table(header, rows))
    _write(out / "manifest.json", manifest(cfg, "compare", {"losses": [loss_label(l) for l in losses]}))


def cmd_sweep(cfg: ExperimentConfig, args) -> None:
    pos_grid = args.alpha_pos or [cfg.loss.alpha_pos]
    neg_grid = args.alpha_neg or [cfg.loss.alpha_neg]
    base = replace(cfg.loss, kind=LossKind.GRAD_LIBRA, alpha_unified=None)
    losses = [LossConfig.from_dict({**base.to_dict(), "alpha_pos": a, "alpha_neg": b})
              for a in pos_grid for b in neg_grid]
    if args.with_baseline:
        losses = [LossConfig(kind=LossKind.CROSS_ENTROPY)] + losses
    results = run_grid(cfg, losses)
    rows = []
    for r in results:
        ce = r.loss.kind is LossKind.CROSS_ENTROPY
        rows.append(["-" if ce else r.loss.alpha_pos, "-" if ce else r.loss.alpha_neg, r.seed,
                     *r.report.row()])
    out = Path(cfg.output_dir)
    _write(out / "sweep.csv", _table(["alpha_pos", "alpha_neg", "seed", *TABLE_COLUMNS], rows))
    _write(out / "manifest.json", manifest(cfg, "sweep", {"alpha_pos_grid": pos_grid,
                                                          "alpha_neg_grid": neg_grid}))


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}; snapshot: {exc.snapshot}", file=sys.stderr)
        return EXIT_NUMERIC
    except GradLibraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
