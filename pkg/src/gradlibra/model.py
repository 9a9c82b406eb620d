"""Multi-binary classifier heads and the SGD training loop.

Parameters live in one flat float64 vector; ``Layout`` maps names to slices
so the optimizer, checkpoints and finite-difference checks can all work on
the flat form while forward/backward use shaped views.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import SampleBatch
from .errors import ConfigError, DataError, DimensionError, NumericError
from .losses import LossConfig, LossOutput, compute_loss

CHECKPOINT_VERSION = 1


class Arch(str, enum.Enum):
    LINEAR = "linear"
    MLP1 = "mlp1"


@dataclass
class ModelSpec:
    feature_dim: int
    num_classes: int
    arch: Arch = Arch.LINEAR
    hidden_dim: int = 0
    init_seed: int = 0
    prior_prob: Optional[float] = None

    def __post_init__(self) -> None:
        if self.prior_prob is not None and not 0 < self.prior_prob < 1:
            raise ConfigError("prior_prob must lie in (0, 1)")
        self.arch = Arch(str(getattr(self.arch, "value", self.arch)).lower())
        if self.feature_dim < 1 or self.num_classes < 1:
            raise ConfigError("feature_dim and num_classes must be positive")
        if self.arch is Arch.MLP1 and self.hidden_dim < 1:
            raise ConfigError("mlp1 needs hidden_dim >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimSpec:
    lr: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 12
    batch_size: int = 32
    lr_decay_epochs: list[int] = field(default_factory=lambda: [8, 11])
    lr_decay_factor: float = 0.1
    warmup_ratio: float = 0.001
    warmup_iters: int = 500

    def __post_init__(self) -> None:
        self.lr_decay_epochs = [int(e) for e in self.lr_decay_epochs]
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        e = self.lr_decay_epochs
        if any(a >= b for a, b in zip(e, e[1:])) or any(x < 0 for x in e):
            raise ConfigError("lr_decay_epochs must be strictly increasing")
        if self.epochs and e and e[-1] >= self.epochs:
            raise ConfigError("lr_decay_epochs must be < epochs")
        if not 0 < self.warmup_ratio <= 1 or self.warmup_iters < 0:
            raise ConfigError("warmup_ratio must lie in (0, 1] and warmup_iters >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown optim keys: {sorted(unknown)}")
        return cls(**d)


def learning_rate(optim: OptimSpec, iteration: int, epoch: int) -> float:
    """Step-decayed rate for ``epoch``, linearly warmed up over the first iterations."""
    k = sum(1 for e in optim.lr_decay_epochs if epoch >= e)
    lr = optim.lr * optim.lr_decay_factor**k
    if iteration < optim.warmup_iters:
        frac = iteration / optim.warmup_iters
        lr *= optim.warmup_ratio + (1.0 - optim.warmup_ratio) * frac
    return lr


class Layout:
    """Ordered (name, shape) table over a flat parameter vector."""

    def __init__(self, entries: Sequence[tuple[str, tuple[int, ...]]]):
        self.entries = list(entries)
        self.slices: dict[str, slice] = {}
        self.shapes: dict[str, tuple[int, ...]] = {}
        off = 0
        for name, shape in self.entries:
            n = int(np.prod(shape))
            self.slices[name] = slice(off, off + n)
            self.shapes[name] = shape
            off += n
        self.size = off
        self._mask: Optional[np.ndarray] = None

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        return flat[self.slices[name]].reshape(self.shapes[name])

    def weight_mask(self) -> np.ndarray:
        """1 on weight matrices, 0 on biases (weight decay skips biases)."""
        if self._mask is None:
            mask = np.zeros(self.size)
            for name, _ in self.entries:
                if name.startswith("W"):
                    mask[self.slices[name]] = 1.0
            self._mask = mask
        return self._mask


def model_layout(spec: ModelSpec) -> Layout:
    D, C = spec.feature_dim, spec.num_classes
    if spec.arch is Arch.LINEAR:
        return Layout([("W", (C, D)), ("b", (C,))])
    H = spec.hidden_dim
    return Layout([("W1", (H, D)), ("b1", (H,)), ("W2", (C, H)), ("b2", (C,))])


def init_params(spec: ModelSpec) -> np.ndarray:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) from ``init_seed``.

    Biases start at zero, except the output bias when ``prior_prob`` is set:
    it becomes ``log(pi / (1 - pi))`` so every class initially predicts ``pi``.
    """
    layout = model_layout(spec)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.init_seed)))
    flat = np.zeros(layout.size)
    for name, shape in layout.entries:
        if name.startswith("W"):
            bound = 1.0 / math.sqrt(shape[1])
            flat[layout.slices[name]] = rng.uniform(-bound, bound, size=int(np.prod(shape)))
    if spec.prior_prob is not None:
        pi = spec.prior_prob
        out_bias = layout.entries[-1][0]
        flat[layout.slices[out_bias]] = math.log(pi / (1.0 - pi))
    return flat


class Model:
    """A linear or one-hidden-layer head producing one logit per class."""

    def __init__(self, spec: ModelSpec, params: Optional[np.ndarray] = None):
        self.spec = spec
        self.layout = model_layout(spec)
        if params is None:
            params = init_params(spec)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.layout.size,):
            raise DimensionError(f"expected {self.layout.size} parameters, got {params.shape}")
        self.params = params

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.feature_dim:
            raise DimensionError(f"features must be (N, {self.spec.feature_dim}), got {x.shape}")
        return x

    def forward(self, x, params: Optional[np.ndarray] = None) -> np.ndarray:
        return self._forward(self._check(x), self.params if params is None else params)[0]

    def _forward(self, x, params):
        v = lambda name: self.layout.view(params, name)  # noqa: E731
        if self.spec.arch is Arch.LINEAR:
            return x @ v("W").T + v("b"), None
        pre = x @ v("W1").T + v("b1")
        h = np.maximum(pre, 0.0)
        return h @ v("W2").T + v("b2"), (pre, h)

    def backward(self, x, grad_logits: np.ndarray, params: Optional[np.ndarray] = None) -> np.ndarray:
        """Flat gradient of the loss given its gradient w.r.t. the logits."""
        x = self._check(x)
        params = self.params if params is None else params
        grad = np.zeros_like(params)
        gv = lambda name: self.layout.view(grad, name)  # noqa: E731
        if self.spec.arch is Arch.LINEAR:
            gv("W")[...] = grad_logits.T @ x
            gv("b")[...] = grad_logits.sum(axis=0)
            return grad
        _, (pre, h) = self._forward(x, params)
        gv("W2")[...] = grad_logits.T @ h
        gv("b2")[...] = grad_logits.sum(axis=0)
        dh = grad_logits @ self.layout.view(params, "W2")
        dpre = dh * (pre > 0)
        gv("W1")[...] = dpre.T @ x
        gv("b1")[...] = dpre.sum(axis=0)
        return grad

    def classifier_weights(self, params: Optional[np.ndarray] = None) -> np.ndarray:
        """Last layer weight matrix, one row per class."""
        params = self.params if params is None else params
        name = "W" if self.spec.arch is Arch.LINEAR else "W2"
        return self.layout.view(params, name)


@dataclass
class TrainState:
    params: np.ndarray
    momentum_buffers: np.ndarray
    iteration: int = 0
    epoch: int = 0
    seed: int = 0

    def copy(self) -> "TrainState":
        return replace(self, params=self.params.copy(), momentum_buffers=self.momentum_buffers.copy())


def init_state(spec: ModelSpec, seed: int = 0) -> TrainState:
    p = init_params(spec)
    return TrainState(p, np.zeros_like(p), 0, 0, seed)


def loss_and_grad(model: Model, params: np.ndarray, batch: SampleBatch, loss_cfg: LossConfig):
    z = model.forward(batch.features, params)
    out = compute_loss(z, batch.labels, loss_cfg)
    return out, model.backward(batch.features, out.grad_logits, params)


def backward_step(model: Model, state: TrainState, batch: SampleBatch, loss_cfg: LossConfig,
                  optim: OptimSpec) -> tuple[TrainState, LossOutput]:
    """One SGD-with-momentum update; returns a new state, input state is untouched."""
    if state.params.shape != (model.layout.size,):
        raise DimensionError("state does not match the model layout")
    def fail(loss, grad_finite):
        return NumericError(
            f"non-finite loss at iteration {state.iteration}",
            {
                "iteration": state.iteration,
                "epoch": state.epoch,
                "loss": loss,
                "param_norm": float(np.linalg.norm(state.params)),
                "grad_finite": grad_finite,
                "sample_ids": batch.sample_ids.tolist(),
            },
        )

    if not np.all(np.isfinite(model.forward(batch.features, state.params))):
        raise fail(None, False)
    out, grad = loss_and_grad(model, state.params, batch, loss_cfg)
    if not (np.isfinite(out.total) and np.all(np.isfinite(grad))):
        raise fail(out.total, bool(np.all(np.isfinite(grad))))
    lr = learning_rate(optim, state.iteration, state.epoch)
    decay = optim.weight_decay * model.layout.weight_mask() * state.params
    v = optim.momentum * state.momentum_buffers + grad + decay
    params = state.params - lr * v
    new = replace(state, params=params, momentum_buffers=v, iteration=state.iteration + 1)
    return new, out


@dataclass
class IterationInfo:
    iteration: int  # 1-based count of completed updates
    epoch: int
    lr: float
    probs: np.ndarray
    labels: np.ndarray
    loss: LossOutput


@dataclass
class EpochInfo:
    epoch: int  # 1-based count of completed epochs
    model: Model
    state: TrainState


class TrainHook:
    """Receives callbacks from :func:`train`; override what you need."""

    def on_iteration(self, info: IterationInfo) -> None:
        pass

    def on_epoch(self, info: EpochInfo) -> None:
        pass


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    ss = np.random.SeedSequence(seed, spawn_key=(epoch,))
    return np.random.Generator(np.random.PCG64(ss)).permutation(n)


def train(dataset: SampleBatch, model_spec: ModelSpec, optim: OptimSpec, loss_cfg: LossConfig,
          hooks: Sequence[TrainHook] = (), seed: int = 0,
          state: Optional[TrainState] = None) -> tuple[Model, TrainState]:
    """Run ``optim.epochs`` epochs of minibatch SGD over ``dataset``.

    The shuffle order of epoch ``e`` is a permutation drawn from
    ``SeedSequence(seed, spawn_key=(e,))``; the final partial batch is kept.
    """
    if dataset.feature_dim != model_spec.feature_dim or dataset.num_classes != model_spec.num_classes:
        raise DimensionError("dataset dims do not match the model spec")
    if len(dataset) == 0 and optim.epochs > 0:
        raise DataError("cannot train on an empty dataset")
    model = Model(model_spec)
    if state is None:
        state = init_state(model_spec, seed)
    model.params = state.params
    n, bs = len(dataset), optim.batch_size

    for epoch in range(state.epoch, optim.epochs):
        state = replace(state, epoch=epoch)
        perm = epoch_permutation(state.seed, epoch, n)
        for start in range(0, n, bs):
            idx = perm[start : start + bs]
            batch = SampleBatch(dataset.features[idx], dataset.labels[idx], dataset.sample_ids[idx])
            lr = learning_rate(optim, state.iteration, epoch)
            state, out = backward_step(model, state, batch, loss_cfg, optim)
            if hooks:
                info = IterationInfo(state.iteration, epoch, lr, out.probs, batch.labels, out)
                for h in hooks:
                    h.on_iteration(info)
        state = replace(state, epoch=epoch + 1)
        model.params = state.params
        for h in hooks:
            h.on_epoch(EpochInfo(epoch + 1, model, state))
    model.params = state.params
    return model, state


def save_checkpoint(path, model_spec: ModelSpec, optim: OptimSpec, loss_cfg: LossConfig,
                    state: TrainState) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "model": model_spec.to_dict(),
        "optim": optim.to_dict(),
        "loss": loss_cfg.to_dict(),
        "iteration": state.iteration,
        "epoch": state.epoch,
        "seed": state.seed,
        "params": [float(v) for v in state.params],
        "momentum_buffers": [float(v) for v in state.momentum_buffers],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[ModelSpec, OptimSpec, LossConfig, TrainState]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such checkpoint: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt checkpoint {path}: {exc}") from None
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {doc.get('version')!r}")
    spec = ModelSpec.from_dict(doc["model"])
    state = TrainState(
        np.asarray(doc["params"], dtype=np.float64),
        np.asarray(doc["momentum_buffers"], dtype=np.float64),
        int(doc["iteration"]),
        int(doc["epoch"]),
        int(doc["seed"]),
    )
    return spec, OptimSpec.from_dict(doc["optim"]), LossConfig.from_dict(doc["loss"]), state

