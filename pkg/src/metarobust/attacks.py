"""Bounded adversarial example generation: FGSM, PGD, and a margin-loss PGD
standing in for optimization-based attacks.

Attack power ``epsilon`` is given in pixel units of a 0-255 scale and divided
by 255 internally, so ``epsilon=2`` means an infinity-ball of radius 2/255 in
model input space. Perturbations are constants with respect to the attacked
model's parameters: gradient never flows through attack construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, clamp, grad, mean, neg, softmax_cross_entropy, sub, take, tensor
from .data import Episode
from .models import ModelSpec, ParamSet, as_model_batch, forward

__all__ = [
    "AttackConfig",
    "AdvBatch",
    "attack_loss",
    "margin_loss_values",
    "fgsm",
    "pgd",
    "cw_margin_pgd",
    "run_attack",
    "clean_accuracy",
    "robust_accuracy",
]

FAMILIES = ("fgsm", "pgd", "cw_margin_pgd")


@dataclass(frozen=True)
class AttackConfig:
    family: str = "fgsm"
    epsilon: float = 2.0          # pixel units on a 0-255 scale
    steps: int = 1
    step_size: float | None = None  # same units; defaults to epsilon (fgsm) or epsilon/4
    loss: str = "cross_entropy"   # "cross_entropy" | "margin"
    random_start: bool = False
    label: str | None = None      # metrics column name; defaults to family

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.family == "fgsm":
            object.__setattr__(self, "steps", 1)
        elif self.steps < 1:
            raise ValueError(f"{self.family} requires steps >= 1")
        if self.family == "cw_margin_pgd":
            object.__setattr__(self, "loss", "margin")
        if self.loss not in ("cross_entropy", "margin"):
            raise ValueError(f"unknown attack loss {self.loss!r}")

    @property
    def eps01(self) -> float:
        return self.epsilon / 255.0

    @property
    def step01(self) -> float:
        if self.step_size is not None:
            return self.step_size / 255.0
        if self.family == "fgsm":
            return self.eps01
        return self.eps01 / 4.0

    @property
    def key(self) -> str:
        return self.label or self.family


@dataclass
class AdvBatch:
    x_adv: np.ndarray
    delta: np.ndarray

    def check(self, eps01: float):
        assert np.all(np.abs(self.delta) <= eps01 + 1e-9)
        assert self.x_adv.min() >= 0.0 and self.x_adv.max() <= 1.0


def attack_loss(logits: Tensor, labels: np.ndarray, kind: str) -> Tensor:
    """Scalar objective the attacker ascends."""
    if kind == "cross_entropy":
        return softmax_cross_entropy(logits, labels)
    if kind == "margin":
        # ascend the negated CW margin max(z_y - max_{j!=y} z_j, 0); samples
        # already past the margin contribute no gradient
        bsz, n = logits.shape
        labels = np.asarray(labels, dtype=np.intp)
        z_true = take(logits, (np.arange(bsz) * n + labels).reshape(bsz, 1))
        masked = logits.data.copy()
        masked[np.arange(bsz), labels] = -np.inf
        runner_up = np.argmax(masked, axis=1)
        z_other = take(logits, (np.arange(bsz) * n + runner_up).reshape(bsz, 1))
        hinge = clamp(sub(z_true, z_other), lo=0.0)
        return neg(mean(hinge))
    raise ValueError(f"unknown attack loss {kind!r}")


def margin_loss_values(spec: ModelSpec, params: ParamSet, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample CW margin loss max(z_y - max_{j!=y} z_j, -kappa) with kappa=0."""
    logits = forward(spec, params.detached(), tensor(x)).data
    bsz = logits.shape[0]
    z_true = logits[np.arange(bsz), y]
    masked = logits.copy()
    masked[np.arange(bsz), y] = -np.inf
    return np.maximum(z_true - masked.max(axis=1), -0.0)


def _input_grad(spec: ModelSpec, params: ParamSet, x: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    xt = tensor(x, track=True)
    loss = attack_loss(forward(spec, params, xt), y, kind)
    return grad(loss, [xt])[0].data


def fgsm(spec: ModelSpec, params: ParamSet, x: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> AdvBatch:
    """Single sign-gradient ascent step of size epsilon, clipped to [0, 1]."""
    if cfg.family != "fgsm":
        raise ValueError(f"fgsm called with family {cfg.family!r}")
    x = np.asarray(x, dtype=np.float64)
    params = params.detached()
    g = _input_grad(spec, params, x, y, cfg.loss)
    x_adv = np.clip(x + cfg.eps01 * np.sign(g), 0.0, 1.0)
    return AdvBatch(x_adv=x_adv, delta=x_adv - x)


def pgd(
    spec: ModelSpec,
    params: ParamSet,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
) -> AdvBatch:
    """Iterated sign-gradient ascent projected onto the epsilon-ball and
    [0, 1] after every step; optional uniform random start inside the ball."""
    if cfg.family not in ("pgd", "cw_margin_pgd"):
        raise ValueError(f"pgd called with family {cfg.family!r}")
    x = np.asarray(x, dtype=np.float64)
    params = params.detached()
    eps, step = cfg.eps01, cfg.step01
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start requires an rng")
        xt = np.clip(x + rng.uniform(-eps, eps, size=x.shape), 0.0, 1.0)
    else:
        xt = x.copy()
    for _ in range(cfg.steps):
        g = _input_grad(spec, params, xt, y, cfg.loss)
        xt = xt + step * np.sign(g)
        xt = x + np.clip(xt - x, -eps, eps)
        xt = np.clip(xt, 0.0, 1.0)
    return AdvBatch(x_adv=xt, delta=xt - x)


def cw_margin_pgd(
    spec: ModelSpec,
    params: ParamSet,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
) -> AdvBatch:
    if cfg.family != "cw_margin_pgd":
        raise ValueError(f"cw_margin_pgd called with family {cfg.family!r}")
    return pgd(spec, params, x, y, cfg, rng)


def run_attack(
    spec: ModelSpec,
    params: ParamSet,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
) -> AdvBatch:
    if cfg.family == "fgsm":
        return fgsm(spec, params, x, y, cfg)
    return pgd(spec, params, x, y, cfg, rng)


def _accuracy(spec: ModelSpec, params: ParamSet, x: np.ndarray, y: np.ndarray) -> float:
    logits = forward(spec, params.detached(), tensor(x)).data
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


def clean_accuracy(spec: ModelSpec, params: ParamSet, episode: Episode) -> float:
    x = as_model_batch(spec, episode.query_x)
    return _accuracy(spec, params, x, episode.query_y)


def robust_accuracy(
    spec: ModelSpec,
    params: ParamSet,
    episode: Episode,
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
) -> float:
    """Accuracy on attacked query samples; epsilon 0 reproduces clean accuracy
    exactly (the attack degenerates to the identity)."""
    x = as_model_batch(spec, episode.query_x)
    adv = run_attack(spec, params, x, episode.query_y, cfg, rng)
    return _accuracy(spec, params, adv.x_adv, episode.query_y)
