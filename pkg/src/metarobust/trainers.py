"""Bi-level meta-training with declarative loss pathways.

A *pathway* names how one inner fine-tune feeds the meta-loss: which variant
of the support set (clean or adversarial) drives the inner loop, and which
weighted loss terms on the query set (clean and/or adversarial) are emitted
for the outer update. The published robust meta-learning recipes are just
pathway tables:

    maml      clean support -> 1.0 * clean query
    aq        clean support -> 1.0 * adversarial query
    adml      adversarial support -> 1.0 * clean query
              clean support       -> 1.0 * adversarial query
    r-maml    clean support -> w_clean * clean query + w_adv * adversarial query
    its-maml  the r-maml pathway, trained with more support shots than the
              meta-test task will provide

Query-side adversarial examples are regenerated every meta-step against the
fine-tuned parameters. Query terms with weight exactly 0 are skipped outright,
so degenerate configurations collapse bit-exactly onto their simpler preset.
The outer update is plain gradient descent.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor, add, grad, scale, softmax_cross_entropy, sub, tensor
from .attacks import AttackConfig, clean_accuracy, robust_accuracy, run_attack
from .data import Dataset, TaskSpec, sample_episode
from .models import ModelSpec, ParamSet, as_model_batch, forward, init_params, save_params

__all__ = [
    "Pathway",
    "TrainerConfig",
    "MetricsRecord",
    "TrainingDiverged",
    "preset_pathways",
    "PRESET_NAMES",
    "finetune_on_loss",
    "inner_finetune",
    "meta_step",
    "train",
    "meta_test",
    "metrics_to_csv",
    "metrics_to_jsonl",
]

PRESET_NAMES = ("maml", "aq", "adml", "r-maml", "its-maml")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Pathway:
    support: str                      # "clean" | "adversarial"
    query_terms: tuple                # ((variant, weight), ...)

    def __post_init__(self):
        if self.support not in ("clean", "adversarial"):
            raise ValueError(f"unknown support variant {self.support!r}")
        terms = tuple((str(v), float(w)) for v, w in self.query_terms)
        object.__setattr__(self, "query_terms", terms)
        if not terms:
            raise ValueError("a pathway needs at least one query term")
        for v, w in terms:
            if v not in ("clean", "adversarial"):
                raise ValueError(f"unknown query variant {v!r}")
            if w < 0:
                raise ValueError("query term weights must be non-negative")


def preset_pathways(name: str, w_clean: float = 1.0, w_adv: float = 1.0) -> tuple:
    if name == "maml":
        return (Pathway("clean", (("clean", 1.0),)),)
    if name == "aq":
        return (Pathway("clean", (("adversarial", 1.0),)),)
    if name == "adml":
        return (
            Pathway("adversarial", (("clean", 1.0),)),
            Pathway("clean", (("adversarial", 1.0),)),
        )
    if name in ("r-maml", "its-maml"):
        return (Pathway("clean", (("clean", w_clean), ("adversarial", w_adv))),)
    raise ValueError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}")


@dataclass
class TrainerConfig:
    name: str
    model: ModelSpec
    task: TaskSpec
    pathways: tuple
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    inner_steps: int = 5
    inner_steps_test: int = 10
    attack: AttackConfig = field(default_factory=AttackConfig)
    second_order: bool = True
    epochs: int = 12
    episodes_per_epoch: int = 100
    seed: int = 0
    eval_attacks: tuple = ()
    eval_episodes: int = 0            # 0 disables periodic evaluation
    eval_every: int = 1

    def __post_init__(self):
        if self.inner_lr <= 0 or self.outer_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.inner_steps < 0 or self.inner_steps_test < 0:
            raise ValueError("fine-tune step counts must be >= 0")
        self.pathways = tuple(self.pathways)
        if not self.pathways:
            raise ValueError("at least one pathway is required")

    @property
    def weight_ratio(self) -> str:
        weights = {}
        for pw in self.pathways:
            for v, w in pw.query_terms:
                weights[v] = weights.get(v, 0.0) + w
        wc, wa = weights.get("clean", 0.0), weights.get("adversarial", 0.0)
        return f"{wc:g}:{wa:g}"


@dataclass
class MetricsRecord:
    trainer: str
    k_train: int
    weight_ratio: str
    epoch: int = 0
    step: int = 0
    meta_loss: float | None = None
    wall_clock: float = 0.0
    clean_acc: float | None = None
    clean_ci: float | None = None
    robust_acc: dict = field(default_factory=dict)
    robust_ci: dict = field(default_factory=dict)

    def __post_init__(self):
        for v in [self.clean_acc, *self.robust_acc.values()]:
            if v is not None and not (0.0 <= v <= 1.0):
                raise ValueError(f"accuracy {v} outside [0, 1]")


# -- inner loop ---------------------------------------------------------------


def finetune_on_loss(loss_fn, params: ParamSet, lr: float, steps: int, track: bool) -> ParamSet:
    """Gradient-descend ``loss_fn(params)`` for ``steps`` steps.

    With ``track`` the updates stay inside the gradient graph (gradients are
    created with ``create_graph``), so the result is differentiable with
    respect to the starting parameters. Without it the loop runs on plain
    values. ``steps=0`` returns the input unchanged.
    """
    if steps == 0:
        return params
    cur = params
    if track:
        for _ in range(steps):
            gs = grad(loss_fn(cur), cur.values, create_graph=True)
            cur = ParamSet(
                [(n, sub(p, scale(g, lr))) for (n, p), g in zip(cur.items(), gs)]
            )
        return cur
    for _ in range(steps):
        leaves = cur.tracked()
        gs = grad(loss_fn(leaves), leaves.values)
        cur = ParamSet(
            [(n, Tensor(p.data - lr * g.data)) for (n, p), g in zip(cur.items(), gs)]
        )
    return cur


def inner_finetune(
    spec: ModelSpec,
    params: ParamSet,
    support_x: np.ndarray,
    support_y: np.ndarray,
    lr: float,
    steps: int,
    track: bool,
) -> ParamSet:
    """Fine-tune on one support set with cross-entropy."""
    sx = tensor(support_x)

    def loss_fn(ps):
        return softmax_cross_entropy(forward(spec, ps, sx), support_y)

    return finetune_on_loss(loss_fn, params, lr, steps, track)


# -- outer loop ---------------------------------------------------------------


def _pathway_terms(cfg: TrainerConfig, theta: ParamSet, sx, sy, qx, qy, track: bool):
    """Fine-tune per pathway and yield (weight, query-loss tensor, theta').

    With ``track`` the terms are differentiable back to ``theta``; without it
    the fine-tuned parameters are re-rooted as fresh leaves so first-order
    callers can differentiate the terms with respect to theta' alone.
    """
    for pw in cfg.pathways:
        if pw.support == "adversarial":
            support_in = run_attack(cfg.model, theta, sx, sy, cfg.attack).x_adv
        else:
            support_in = sx
        theta_p = inner_finetune(
            cfg.model, theta, support_in, sy, cfg.inner_lr, cfg.inner_steps, track
        )
        if not track:
            theta_p = theta_p.tracked()
        for variant, weight in pw.query_terms:
            if weight == 0.0:
                continue  # exact preset collapse: no loss term, no attack
            if variant == "adversarial":
                q_in = run_attack(cfg.model, theta_p, qx, qy, cfg.attack).x_adv
            else:
                q_in = qx
            term = softmax_cross_entropy(forward(cfg.model, theta_p, tensor(q_in)), qy)
            yield weight, term, theta_p


def meta_step(cfg: TrainerConfig, params: ParamSet, episodes) -> tuple[ParamSet, MetricsRecord]:
    """One outer update over a batch of tasks.

    Meta-loss is the task average of the weighted query-term losses; the
    outer step is plain gradient descent on it. Adversarial query batches are
    generated against each task's fine-tuned parameters.
    """
    t0 = time.perf_counter()
    n_tasks = len(episodes)
    if n_tasks < 1:
        raise ValueError("meta_step needs at least one episode")
    expect_support = cfg.task.n_way * cfg.task.k_train

    batches = []
    for ep in episodes:
        if len(ep.support_y) != expect_support:
            raise ValueError(
                f"training episode has {len(ep.support_y)} support samples, expected {expect_support}"
            )
        batches.append(
            (as_model_batch(cfg.model, ep.support_x), ep.support_y,
             as_model_batch(cfg.model, ep.query_x), ep.query_y)
        )

    if cfg.second_order:
        theta = params.tracked()
        total = None
        for sx, sy, qx, qy in batches:
            for weight, term, _ in _pathway_terms(cfg, theta, sx, sy, qx, qy, track=True):
                piece = scale(term, weight)
                total = piece if total is None else add(total, piece)
        meta_loss = scale(total, 1.0 / n_tasks)
        gs = grad(meta_loss, theta.values)
        grad_data = {n: g.data for n, g in zip(theta.names, gs)}
        loss_val = meta_loss.item()
    else:
        # first-order rule: gradients w.r.t. the fine-tuned parameters are
        # applied directly to the initialization
        grad_data = {n: np.zeros_like(p.data) for n, p in params.items()}
        loss_val = 0.0
        base = params.detached()
        for sx, sy, qx, qy in batches:
            for weight, term, theta_p in _pathway_terms(
                cfg, base, sx, sy, qx, qy, track=False
            ):
                piece = scale(term, weight)
                loss_val += piece.item()
                for n, g in zip(theta_p.names, grad(piece, theta_p.values)):
                    grad_data[n] = grad_data[n] + g.data
        for n in grad_data:
            grad_data[n] = grad_data[n] / n_tasks
        loss_val /= n_tasks

    new_params = ParamSet(
        [(n, Tensor(p.data - cfg.outer_lr * grad_data[n])) for n, p in params.items()]
    )
    record = MetricsRecord(
        trainer=cfg.name,
        k_train=cfg.task.k_train,
        weight_ratio=cfg.weight_ratio,
        meta_loss=loss_val,
        wall_clock=time.perf_counter() - t0,
    )
    return new_params, record


def train(cfg: TrainerConfig, dataset: Dataset, out_dir=None) -> tuple[ParamSet, list]:
    """Full meta-training loop: per-meta-step loss records, optional periodic
    meta-test evaluation, per-epoch checkpoints when ``out_dir`` is given."""
    seq = np.random.SeedSequence(cfg.seed)
    rng_episodes, rng_eval = (np.random.default_rng(s) for s in seq.spawn(2))
    params = init_params(cfg.model, cfg.seed)
    records: list[MetricsRecord] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        for _ in range(cfg.episodes_per_epoch):
            episodes = [
                sample_episode(dataset, cfg.task, rng_episodes, role="train")
                for _ in range(cfg.task.tasks_per_batch)
            ]
            params, rec = meta_step(cfg, params, episodes)
            step += 1
            rec.epoch, rec.step = epoch, step
            if not np.isfinite(rec.meta_loss):
                raise TrainingDiverged(
                    f"non-finite meta-loss at epoch {epoch}, step {step}"
                )
            records.append(rec)
        if cfg.eval_episodes and epoch % cfg.eval_every == 0:
            ev = meta_test(
                cfg.model, params, dataset, cfg.task,
                inner_lr=cfg.inner_lr, inner_steps=cfg.inner_steps_test,
                attacks=cfg.eval_attacks, episodes=cfg.eval_episodes,
                rng=rng_eval, trainer_name=cfg.name, k_train=cfg.task.k_train,
                weight_ratio=cfg.weight_ratio,
            )
            ev.epoch, ev.step = epoch, step
            records.append(ev)
        if out_dir is not None:
            save_params(params, out_dir / f"epoch_{epoch:03d}.params")
            metrics_to_csv(records, out_dir / "metrics.csv")
            metrics_to_jsonl(records, out_dir / "metrics.jsonl")
    return params, records


def meta_test(
    spec: ModelSpec,
    params: ParamSet,
    dataset: Dataset,
    task: TaskSpec,
    inner_lr: float = 0.01,
    inner_steps: int = 10,
    attacks: tuple = (),
    episodes: int = 100,
    rng: np.random.Generator | None = None,
    trainer_name: str = "",
    k_train: int | None = None,
    weight_ratio: str = "",
) -> MetricsRecord:
    """Meta-test protocol: fine-tune on a clean K-shot support set (no graph
    tracking), then measure clean and per-attack robust accuracy on the query
    set. Reports means and 95% confidence intervals over episodes."""
    if rng is None:
        rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    expect_support = task.n_way * task.k_test
    clean_scores = []
    robust_scores = {a.key: [] for a in attacks}
    for _ in range(int(episodes)):
        ep = sample_episode(dataset, task, rng, role="test")
        if len(ep.support_y) != expect_support:
            raise ValueError(
                f"test episode has {len(ep.support_y)} support samples, expected {expect_support}"
            )
        theta_p = inner_finetune(
            spec, params, as_model_batch(spec, ep.support_x), ep.support_y,
            inner_lr, inner_steps, track=False,
        )
        clean_scores.append(clean_accuracy(spec, theta_p, ep))
        for a in attacks:
            robust_scores[a.key].append(robust_accuracy(spec, theta_p, ep, a, rng))

    def ci95(vals):
        vals = np.asarray(vals)
        if vals.size < 2:
            return 0.0
        return float(1.96 * vals.std(ddof=1) / np.sqrt(vals.size))

    return MetricsRecord(
        trainer=trainer_name,
        k_train=k_train if k_train is not None else task.k_train,
        weight_ratio=weight_ratio,
        wall_clock=time.perf_counter() - t0,
        clean_acc=float(np.mean(clean_scores)),
        clean_ci=ci95(clean_scores),
        robust_acc={k: float(np.mean(v)) for k, v in robust_scores.items()},
        robust_ci={k: ci95(v) for k, v in robust_scores.items()},
    )


# -- metrics persistence ----------------------------------------------------


def _attack_keys(records) -> list:
    keys = []
    for r in records:
        for k in r.robust_acc:
            if k not in keys:
                keys.append(k)
    return keys


def metrics_to_csv(records, path):
    keys = _attack_keys(records)
    cols = [
        "epoch", "step", "trainer", "k_train", "weight_ratio",
        "meta_loss", "wall_clock", "clean_acc", "clean_ci",
    ] + [f"robust_{k}" for k in keys] + [f"robust_{k}_ci" for k in keys]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in records:
            row = [
                r.epoch, r.step, r.trainer, r.k_train, r.weight_ratio,
                r.meta_loss, r.wall_clock, r.clean_acc, r.clean_ci,
            ]
            row += [r.robust_acc.get(k) for k in keys]
            row += [r.robust_ci.get(k) for k in keys]
            writer.writerow(["" if v is None else v for v in row])


def metrics_to_jsonl(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({
                "epoch": r.epoch, "step": r.step, "trainer": r.trainer,
                "k_train": r.k_train, "weight_ratio": r.weight_ratio,
                "meta_loss": r.meta_loss, "wall_clock": r.wall_clock,
                "clean_acc": r.clean_acc, "clean_ci": r.clean_ci,
                "robust_acc": r.robust_acc, "robust_ci": r.robust_ci,
            }) + "\n")
