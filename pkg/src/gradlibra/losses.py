"""Multi-binary classification losses with analytic gradients w.r.t. logits.

Every loss here treats a ``(N, C)`` logit matrix as ``C`` independent sigmoid
classifiers. A label row with a single 1 marks a positive for that class; an
all-zero row is a background sample that is negative for every class.

Reduction convention: per-element losses are summed over classes and averaged
over samples, so ``grad_logits`` already carries the ``1/N`` factor.

The Grad-Libra loss re-weights each binary cross-entropy term by a hardness
weight ``G = F(g)`` where ``g = |p - y|`` is the magnitude of the plain BCE
gradient and ``F(g) = g - alpha * sin(g)``. Positive and negative terms get
their own ``alpha``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, DimensionError, InputValidationError

__all__ = [
    "LossKind",
    "LossConfig",
    "HardnessWeights",
    "LossOutput",
    "sigmoid",
    "grad_norm",
    "hardness_weight",
    "hardness",
    "grad_libra_forward",
    "grad_libra_backward",
    "grad_libra_unified",
    "ce_forward_backward",
    "focal_forward_backward",
    "compute_loss",
]

DEFAULT_EPS = 1e-12


class LossKind(str, enum.Enum):
    GRAD_LIBRA = "grad_libra"
    CROSS_ENTROPY = "ce"
    FOCAL = "focal"
    FOCAL_STAR = "focal_star"

    @classmethod
    def parse(cls, name: str) -> "LossKind":
        key = name.strip().lower().replace("-", "_")
        aliases = {
            "gradlibra": cls.GRAD_LIBRA,
            "gl": cls.GRAD_LIBRA,
            "crossentropy": cls.CROSS_ENTROPY,
            "cross_entropy": cls.CROSS_ENTROPY,
            "bce": cls.CROSS_ENTROPY,
            "focalstar": cls.FOCAL_STAR,
            "focal*": cls.FOCAL_STAR,
        }
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown loss kind {name!r}") from None


def _check_alpha(name: str, value: float) -> None:
    if not (0.0 < value <= 1.0) or not np.isfinite(value):
        raise ConfigError(f"{name} must lie in (0, 1], got {value!r}")


@dataclass
class LossConfig:
    """Loss selector plus its hyper-parameters.

    ``alpha_unified``, when given, overrides both ``alpha_pos`` and
    ``alpha_neg`` (single-alpha form of the loss).
    """

    kind: LossKind = LossKind.GRAD_LIBRA
    alpha_pos: float = 0.8
    alpha_neg: float = 0.8
    alpha_unified: Optional[float] = None
    differentiate_weight: bool = False
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    prob_clamp_eps: float = DEFAULT_EPS

    def __post_init__(self) -> None:
        if not isinstance(self.kind, LossKind):
            self.kind = LossKind.parse(str(self.kind))
        if self.alpha_unified is not None:
            _check_alpha("alpha_unified", self.alpha_unified)
            self.alpha_pos = self.alpha_neg = float(self.alpha_unified)
        _check_alpha("alpha_pos", self.alpha_pos)
        _check_alpha("alpha_neg", self.alpha_neg)
        if not self.focal_gamma >= 0:
            raise ConfigError(f"focal_gamma must be >= 0, got {self.focal_gamma!r}")
        if not 0.0 < self.focal_alpha < 1.0:
            raise ConfigError(f"focal_alpha must lie in (0, 1), got {self.focal_alpha!r}")
        if not 0.0 < self.prob_clamp_eps < 0.5:
            raise ConfigError(f"prob_clamp_eps must lie in (0, 0.5), got {self.prob_clamp_eps!r}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "alpha_pos": self.alpha_pos,
            "alpha_neg": self.alpha_neg,
            "alpha_unified": self.alpha_unified,
            "differentiate_weight": self.differentiate_weight,
            "focal_gamma": self.focal_gamma,
            "focal_alpha": self.focal_alpha,
            "prob_clamp_eps": self.prob_clamp_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class HardnessWeights:
    g: np.ndarray
    G: np.ndarray


@dataclass
class LossOutput:
    """Result of a loss evaluation.

    ``per_class_pos`` and ``per_class_neg`` are the per-class shares of
    ``total`` coming from positive and negative terms, so that
    ``total == per_class_pos.sum() + per_class_neg.sum()``.
    """

    total: float
    per_class_pos: np.ndarray
    per_class_neg: np.ndarray
    grad_logits: np.ndarray
    elementwise: np.ndarray
    probs: np.ndarray


ArrayLike = Union[np.ndarray, float]


def _as_logits(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InputValidationError("logits contain NaN or Inf")
    return z


def _check_pair(a: np.ndarray, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if a.shape != y.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs labels {y.shape}")
    return y


def sigmoid(z, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Elementwise logistic function, clamped to ``[eps, 1 - eps]``."""
    if not 0.0 < eps < 0.5:
        raise ConfigError(f"eps must lie in (0, 0.5), got {eps!r}")
    z = _as_logits(z)
    # exp of a non-positive argument only, so nothing overflows
    e = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(p, eps, 1.0 - eps)


def grad_norm(p, y) -> np.ndarray:
    """Magnitude of the BCE gradient w.r.t. each logit: ``|p - y|``."""
    p = np.asarray(p, dtype=np.float64)
    y = _check_pair(p, y)
    return np.abs(p - y)


def hardness_weight(g, alpha: float) -> np.ndarray:
    """``F(g) = g - alpha * sin(g)``; maps [0, 1] into [0, g]."""
    _check_alpha("alpha", alpha)
    g = np.asarray(g, dtype=np.float64)
    return g - alpha * np.sin(g)


def hardness(p, y, alpha_pos: float, alpha_neg: float) -> HardnessWeights:
    """Gradient norms and their hardness weights, with per-sign alphas."""
    g = grad_norm(p, y)
    pos = np.asarray(y) == 1
    G = np.where(pos, hardness_weight(g, alpha_pos), hardness_weight(g, alpha_neg))
    return HardnessWeights(g=g, G=G)


def _weighted_bce(z, y, eps, w_pos, w_neg, dw_pos=None, dw_neg=None) -> LossOutput:
    """Shared core: ``w_pos * -log p`` at positives, ``w_neg * -log(1-p)`` at negatives.

    ``dw_pos``/``dw_neg`` are the derivatives of the weights w.r.t. the logit;
    leave them as ``None`` to treat the weights as constants.
    """
    z = _as_logits(z)
    y = _check_pair(z, y)
    p = sigmoid(z, eps)
    pos = y == 1
    n = z.shape[0] if z.ndim == 2 else 1
    scale = 1.0 / n if n > 0 else 0.0

    nll_pos = -np.log(p)
    nll_neg = -np.log1p(-p)
    elem = np.where(pos, w_pos * nll_pos, w_neg * nll_neg)
    grad = np.where(pos, w_pos * (p - 1.0), w_neg * p)
    if dw_pos is not None:
        grad = grad + np.where(pos, dw_pos * nll_pos, dw_neg * nll_neg)

    elem = elem * scale
    grad = grad * scale
    if elem.ndim == 2:
        per_pos = np.where(pos, elem, 0.0).sum(axis=0)
        per_neg = np.where(pos, 0.0, elem).sum(axis=0)
    else:
        per_pos = np.atleast_1d(np.where(pos, elem, 0.0))
        per_neg = np.atleast_1d(np.where(pos, 0.0, elem))
    total = float(per_pos.sum() + per_neg.sum())
    return LossOutput(total, per_pos, per_neg, grad, elem, p)


def grad_libra_forward(z, y, cfg: LossConfig, weights: Optional[ArrayLike] = None) -> LossOutput:
    """Evaluate the decoupled Grad-Libra loss and its gradient.

    Parameters
    ----------
    z, y : array, shape (N, C)
        Logits and multi-hot labels.
    cfg : LossConfig
        Supplies ``alpha_pos``, ``alpha_neg``, the clamp ``eps`` and whether
        gradients flow through the hardness weights.
    weights : array or float, optional
        Overrides the hardness weights with a constant (e.g. ``1.0`` gives
        plain BCE). Overridden weights are never differentiated.
    """
    z = _as_logits(z)
    y = _check_pair(z, y)
    eps = cfg.prob_clamp_eps
    if weights is not None:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), z.shape)
        return _weighted_bce(z, y, eps, w, w)

    p = sigmoid(z, eps)
    q = 1.0 - p
    a_pos, a_neg = cfg.alpha_pos, cfg.alpha_neg
    w_pos = q - a_pos * np.sin(q)
    w_neg = p - a_neg * np.sin(p)
    if not cfg.differentiate_weight:
        return _weighted_bce(z, y, eps, w_pos, w_neg)
    dp = p * q
    dw_pos = -(1.0 - a_pos * np.cos(q)) * dp
    dw_neg = (1.0 - a_neg * np.cos(p)) * dp
    return _weighted_bce(z, y, eps, w_pos, w_neg, dw_pos, dw_neg)


def grad_libra_backward(z, y, cfg: LossConfig) -> np.ndarray:
    return grad_libra_forward(z, y, cfg).grad_logits


def grad_libra_unified(z, y, alpha: float, eps: float = DEFAULT_EPS) -> float:
    """Single-alpha form: ``mean_n sum_i F(|p - y|) * -log(p_hat)``.

    Forward value only; used to cross-check the decoupled evaluation.
    """
    z = _as_logits(z)
    p = sigmoid(z, eps)
    y = _check_pair(p, y)
    G = hardness_weight(grad_norm(p, y), alpha)
    p_hat = np.where(y == 1, p, 1.0 - p)
    n = z.shape[0] if z.ndim == 2 else 1
    return float(np.sum(-G * np.log(p_hat)) / n) if n else 0.0


def ce_forward_backward(z, y, cfg: Optional[LossConfig] = None) -> LossOutput:
    eps = cfg.prob_clamp_eps if cfg is not None else DEFAULT_EPS
    return _weighted_bce(z, y, eps, 1.0, 1.0)


def focal_forward_backward(z, y, cfg: LossConfig) -> LossOutput:
    """Sigmoid focal loss; ``FocalStar`` adds the alpha-balancing factor.

    The modulating factor ``(1 - p_t) ** gamma`` is differentiated.
    """
    z = _as_logits(z)
    y = _check_pair(z, y)
    p = sigmoid(z, cfg.prob_clamp_eps)
    pos = y == 1
    gamma = cfg.focal_gamma
    if cfg.kind == LossKind.FOCAL_STAR:
        w = np.where(pos, cfg.focal_alpha, 1.0 - cfg.focal_alpha)
    else:
        w = np.ones_like(p)
    pt = np.where(pos, p, 1.0 - p)
    sign = np.where(pos, 1.0, -1.0)
    one_m = 1.0 - pt
    log_pt = np.log(pt)
    mod = one_m**gamma
    n = z.shape[0] if z.ndim == 2 else 1
    scale = 1.0 / n if n > 0 else 0.0

    elem = -w * mod * log_pt * scale
    grad = w * sign * (gamma * mod * pt * log_pt - mod * one_m) * scale
    if elem.ndim == 2:
        per_pos = np.where(pos, elem, 0.0).sum(axis=0)
        per_neg = np.where(pos, 0.0, elem).sum(axis=0)
    else:
        per_pos = np.atleast_1d(np.where(pos, elem, 0.0))
        per_neg = np.atleast_1d(np.where(pos, 0.0, elem))
    return LossOutput(float(per_pos.sum() + per_neg.sum()), per_pos, per_neg, grad, elem, p)


def compute_loss(z, y, cfg: LossConfig) -> LossOutput:
    """Dispatch on ``cfg.kind``."""
    if cfg.kind == LossKind.GRAD_LIBRA:
        return grad_libra_forward(z, y, cfg)
    if cfg.kind == LossKind.CROSS_ENTROPY:
        return ce_forward_backward(z, y, cfg)
    if cfg.kind in (LossKind.FOCAL, LossKind.FOCAL_STAR):
        return focal_forward_backward(z, y, cfg)
    raise ConfigError(f"unsupported loss kind {cfg.kind!r}")
