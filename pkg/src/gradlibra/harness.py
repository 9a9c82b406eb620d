"""Experiment plumbing: resolved configs and paired (seed x loss) runs."""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Optional, Sequence, Union

import numpy as np

from . import __version__
from .data import ClassGroups, DatasetSpec, SampleBatch, generate, load_dataset
from .errors import ConfigError
from .losses import LossConfig, LossKind
from .metrics import EvalReport, evaluate
from .model import Arch, ModelSpec, OptimSpec, TrainState, train
from .telemetry import LedgerMode, NormSnapshot, TelemetryRecorder


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a run.

    ``dataset`` is either a :class:`DatasetSpec` (regenerated per seed with
    ``seed`` substituted) or a path to a directory written by ``generate``
    (fixed across seeds).
    """

    dataset: Union[DatasetSpec, str] = field(default_factory=DatasetSpec)
    model: dict = field(default_factory=lambda: {"arch": "linear", "prior_prob": 0.01})
    optim: OptimSpec = field(default_factory=OptimSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs"

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if any(int(s) < 0 for s in self.seeds):
            raise ConfigError("seeds must be unsigned")
        self.seeds = [int(s) for s in self.seeds]
        if isinstance(self.dataset, str) and not Path(self.dataset).exists():
            raise ConfigError(f"dataset path does not exist: {self.dataset}")
        bad = set(self.model) - {"arch", "hidden_dim", "prior_prob"}
        if bad:
            raise ConfigError(f"unknown model keys: {sorted(bad)} (dims come from the dataset)")

    def to_dict(self) -> dict:
        ds = self.dataset if isinstance(self.dataset, str) else self.dataset.to_dict()
        return {
            "dataset": ds,
            "model": dict(self.model),
            "optim": self.optim.to_dict(),
            "loss": self.loss.to_dict(),
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        ds = d.get("dataset")
        if isinstance(ds, dict):
            d["dataset"] = DatasetSpec.from_dict(ds)
        elif ds is not None and not isinstance(ds, str):
            raise ConfigError("dataset must be a spec object or a path")
        if "optim" in d:
            d["optim"] = OptimSpec.from_dict(d["optim"])
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


def dataset_for_seed(cfg: ExperimentConfig, seed: int):
    if isinstance(cfg.dataset, str):
        return load_dataset(cfg.dataset)
    return generate(replace(cfg.dataset, seed=seed))


def model_spec_for(cfg: ExperimentConfig, train_set: SampleBatch, seed: int) -> ModelSpec:
    return ModelSpec(
        feature_dim=train_set.feature_dim,
        num_classes=train_set.num_classes,
        arch=Arch(cfg.model.get("arch", "linear")),
        hidden_dim=int(cfg.model.get("hidden_dim", 0)),
        init_seed=seed,
        prior_prob=cfg.model.get("prior_prob"),
    )


@dataclass
class RunResult:
    seed: int
    loss: LossConfig
    report: EvalReport
    ratios: dict[str, list[float]]
    final_norms: NormSnapshot
    groups: ClassGroups
    state: Optional[TrainState] = None
    model_spec: Optional[ModelSpec] = None


def run_one(cfg: ExperimentConfig, seed: int, loss: Optional[LossConfig] = None,
            stream: Optional[IO[str]] = None, modes=(LedgerMode.RAW_CE, LedgerMode.ACTIVE_LOSS),
            data=None) -> RunResult:
    """Train and evaluate one (seed, loss) pair.

    Data and initialization depend only on ``seed``, never on the loss, so
    runs sharing a seed are paired.
    """
    loss = loss or cfg.loss
    train_set, test_set, groups = data if data is not None else dataset_for_seed(cfg, seed)
    spec = model_spec_for(cfg, train_set, seed)
    rec = TelemetryRecorder(train_set.num_classes, modes, stream=stream)
    model, state = train(train_set, spec, cfg.optim, loss, hooks=[rec], seed=seed)
    report = evaluate(model, test_set, groups)
    ratios = {m.value: led.ratio().tolist() for m, led in rec.ledgers.items()}
    norms = rec.epoch_norms[-1] if rec.epoch_norms else NormSnapshot(np.ones(spec.num_classes), True)
    return RunResult(seed, loss, report, ratios, norms, groups, state, spec)


def _run_job(args):
    cfg, seed, loss = args
    return run_one(cfg, seed, loss)


def worker_count() -> int:
    try:
        n = int(os.environ.get("GRADLIBRA_THREADS", "1"))
    except ValueError:
        raise ConfigError("GRADLIBRA_THREADS must be an integer") from None
    return max(1, n)


def run_grid(cfg: ExperimentConfig, losses: Sequence[LossConfig],
             seeds: Optional[Iterable[int]] = None) -> list[RunResult]:
    """Run every (seed, loss) pair; results come back in (seed, loss) order."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    jobs = [(cfg, s, l) for s in seeds for l in losses]
    workers = min(worker_count(), len(jobs))
    if workers <= 1:
        out = []
        for s in seeds:
            data = dataset_for_seed(cfg, s)
            out.extend(run_one(cfg, s, l, data=data) for l in losses)
        return out
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_job, jobs))


def parse_loss(name: str, base: LossConfig) -> LossConfig:
    """``ce``, ``focal``, ``focal_star`` or ``grad_libra[:a_pos,a_neg]``."""
    kind, _, params = name.partition(":")
    d = base.to_dict()
    d["kind"] = LossKind.parse(kind).value
    d["alpha_unified"] = None
    if params:
        try:
            a_pos, a_neg = (float(v) for v in params.split(","))
        except ValueError:
            raise ConfigError(f"expected NAME:alpha_pos,alpha_neg, got {name!r}") from None
        d["alpha_pos"], d["alpha_neg"] = a_pos, a_neg
    return LossConfig.from_dict(d)


def loss_label(loss: LossConfig) -> str:
    if loss.kind is LossKind.GRAD_LIBRA:
        return f"grad_libra:{loss.alpha_pos:g},{loss.alpha_neg:g}"
    return loss.kind.value


def manifest(cfg: ExperimentConfig, command: str, extra: Optional[dict] = None) -> str:
    doc = {"tool": "gradlibra", "version": __version__, "command": command, "config": cfg.to_dict()}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
