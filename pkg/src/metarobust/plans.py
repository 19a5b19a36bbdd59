"""Experiment plans: strict config validation, sweep execution, aggregation,
and plot-data emission.

A plan is a JSON file with four blocks: ``dataset``, ``trainer``, ``sweep``,
and bookkeeping (``plan_id``, ``seeds``, ``output_dir``). Validation fills
every omitted key with its default and rejects unknown keys outright, so the
normalized echo written next to the results is a complete, auditable record
of what ran.

``run_plan`` executes one training + evaluation per (sweep value, seed) cell
into its own directory, tracks completion in a manifest keyed by a hash of
the normalized config and package version, and skips completed cells on
re-runs. A changed hash invalidates everything: results from different
configs never mix. Cell failures are recorded and the plan continues.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackConfig
from .data import Dataset, TaskSpec, load_idx_dataset, synth_gaussian_dataset
from .intrinsic_dim import collect_clean_features, collect_noise_features, estimate_id
from .models import ModelSpec
from .trainers import TrainerConfig, meta_test, preset_pathways, train

__all__ = [
    "ConfigError",
    "ExperimentPlan",
    "normalize_plan",
    "validate_config",
    "build_dataset",
    "build_trainer_config",
    "run_plan",
    "emit_plot_data",
    "FIGURES",
]

FIGURES = ("shot_sweep", "tradeoff", "finetune_steps", "id_table")
SWEEP_AXES = ("none", "k_train", "weight_ratio", "inner_steps", "epsilon")

# trainer presets beyond the pathway tables: shot-count bundles for the
# standard 1-shot and 5-shot protocols
PRESET_SHOTS = {
    "its-maml-1shot": {"preset": "its-maml", "k_test": 1, "k_train": 2},
    "its-maml-5shot": {"preset": "its-maml", "k_test": 5, "k_train": 6},
}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _default_plan() -> dict:
    return {
        "plan_id": "plan",
        "dataset": {
            "kind": "synthetic",
            "classes": 20,
            "per_class": 40,
            "dim": 32,
            "spread": 0.1,
            "mean_radius": 0.25,
            "fragile_dims": 0,
            "fragile_radius": 0.0,
            "directions": "gaussian",
            "seed": 1234,
            "train_fraction": 0.5,
            "path": None,
        },
        "trainer": {
            "preset": "maml",
            "n_way": 5,
            "k_test": 1,
            "k_train": 1,
            "queries": 15,
            "tasks_per_batch": 4,
            "inner_lr": 0.01,
            "outer_lr": 0.001,
            "inner_steps": 5,
            "inner_steps_test": 10,
            "w_clean": 1.0,
            "w_adv": 1.0,
            "second_order": True,
            "epochs": 12,
            "episodes_per_epoch": 100,
            "eval_episodes": 200,
            "id_samples": 1000,
            "model": {"arch": "mlp", "hidden": [64, 64], "channels": None},
            "attack": {
                "family": "fgsm",
                "epsilon": 2.0,
                "steps": 1,
                "step_size": None,
                "loss": "cross_entropy",
                "random_start": False,
            },
            "eval_attacks": [
                {
                    "family": "pgd",
                    "epsilon": 2.0,
                    "steps": 10,
                    "step_size": None,
                    "loss": "cross_entropy",
                    "random_start": True,
                }
            ],
        },
        "sweep": {"axis": "none", "values": []},
        "seeds": [0],
        "output_dir": "runs/plan",
    }


_SCALARS = {
    "plan_id": str,
    "dataset.kind": str,
    "dataset.classes": int,
    "dataset.per_class": int,
    "dataset.dim": int,
    "dataset.spread": float,
    "dataset.fragile_dims": int,
    "dataset.fragile_radius": float,
    "dataset.directions": str,
    "dataset.seed": int,
    "dataset.train_fraction": float,
    "trainer.preset": str,
    "trainer.n_way": int,
    "trainer.k_test": int,
    "trainer.k_train": int,
    "trainer.queries": int,
    "trainer.tasks_per_batch": int,
    "trainer.inner_lr": float,
    "trainer.outer_lr": float,
    "trainer.inner_steps": int,
    "trainer.inner_steps_test": int,
    "trainer.w_clean": float,
    "trainer.w_adv": float,
    "trainer.second_order": bool,
    "trainer.epochs": int,
    "trainer.episodes_per_epoch": int,
    "trainer.eval_episodes": int,
    "trainer.id_samples": int,
    "trainer.model.arch": str,
    "output_dir": str,
}


def _merge(defaults, user, path, errors):
    """Recursive merge with unknown-key rejection and scalar coercion."""
    out = {}
    for key, dval in defaults.items():
        here = f"{path}.{key}" if path else key
        if user is None or key not in user:
            out[key] = dval
            continue
        uval = user[key]
        if isinstance(dval, dict):
            if not isinstance(uval, dict):
                errors.append(f"{here}: expected a mapping")
                out[key] = dval
            else:
                out[key] = _merge(dval, uval, here, errors)
        else:
            out[key] = uval
    if isinstance(user, dict):
        for key in user:
            if key not in defaults:
                here = f"{path}.{key}" if path else key
                errors.append(f"{here}: unknown key")
    return out


def _coerce_scalars(plan, errors):
    for dotted, typ in _SCALARS.items():
        node, *parts = dotted.split(".")
        cur, parent, last = plan, None, node
        for p in [node, *parts]:
            parent, last = cur, p
            cur = cur[p] if isinstance(cur, dict) and p in cur else None
        val = parent.get(last) if isinstance(parent, dict) else None
        if val is None:
            continue
        if typ is bool:
            if not isinstance(val, bool):
                errors.append(f"{dotted}: expected a boolean")
            continue
        if typ is float and isinstance(val, (int, float)) and not isinstance(val, bool):
            parent[last] = float(val)
        elif typ is int and isinstance(val, int) and not isinstance(val, bool):
            parent[last] = int(val)
        elif typ is str and isinstance(val, str):
            continue
        else:
            errors.append(f"{dotted}: expected {typ.__name__}")


def _check_attack(cfg: dict, path: str, errors) -> None:
    if cfg.get("family") not in ("fgsm", "pgd", "cw_margin_pgd"):
        errors.append(f"{path}.family: unknown attack family {cfg.get('family')!r}")
    eps = cfg.get("epsilon")
    if not isinstance(eps, (int, float)) or isinstance(eps, bool) or eps < 0:
        errors.append(f"{path}.epsilon: must be a non-negative number")
    steps = cfg.get("steps")
    if not isinstance(steps, int) or steps < 1:
        errors.append(f"{path}.steps: must be a positive integer")
    if cfg.get("loss") not in ("cross_entropy", "margin"):
        errors.append(f"{path}.loss: unknown loss {cfg.get('loss')!r}")
    if not isinstance(cfg.get("random_start"), bool):
        errors.append(f"{path}.random_start: expected a boolean")
    ss = cfg.get("step_size")
    if ss is not None and (not isinstance(ss, (int, float)) or isinstance(ss, bool) or ss <= 0):
        errors.append(f"{path}.step_size: must be positive when given")


def _parse_ratio(value, path, errors):
    if isinstance(value, str) and value.count(":") == 1:
        try:
            wc, wa = (float(v) for v in value.split(":"))
            return [wc, wa]
        except ValueError:
            pass
    if isinstance(value, (list, tuple)) and len(value) == 2:
        try:
            return [float(value[0]), float(value[1])]
        except (TypeError, ValueError):
            pass
    errors.append(f"{path}: expected 'wc:wa' or a [wc, wa] pair, got {value!r}")
    return None


def normalize_plan(raw: dict | None) -> tuple[dict, list]:
    """Fill defaults, reject unknown keys, validate values. Returns the fully
    expanded plan and a list of error strings (empty when valid)."""
    errors: list[str] = []
    raw = dict(raw or {})

    preset = raw.get("trainer", {}).get("preset") if isinstance(raw.get("trainer"), dict) else None
    defaults = _default_plan()
    if isinstance(preset, str) and preset in PRESET_SHOTS:
        bundle = PRESET_SHOTS[preset]
        defaults["trainer"]["preset"] = bundle["preset"]
        defaults["trainer"]["k_test"] = bundle["k_test"]
        defaults["trainer"]["k_train"] = bundle["k_train"]
        raw = json.loads(json.dumps(raw))
        raw["trainer"].pop("preset")

    plan = _merge(defaults, raw, "", errors)
    _coerce_scalars(plan, errors)

    tr = plan["trainer"]
    if tr["preset"] not in ("maml", "aq", "adml", "r-maml", "its-maml"):
        errors.append(f"trainer.preset: unknown preset {tr['preset']!r}")
    for key in ("inner_lr", "outer_lr"):
        if isinstance(tr[key], float) and tr[key] <= 0:
            errors.append(f"trainer.{key}: must be positive")
    for key in ("n_way", "k_test", "k_train", "queries", "tasks_per_batch",
                "epochs", "episodes_per_epoch"):
        if isinstance(tr[key], int) and tr[key] < 1:
            errors.append(f"trainer.{key}: must be >= 1")
    if tr["model"]["arch"] not in ("mlp", "conv4"):
        errors.append(f"trainer.model.arch: unknown architecture {tr['model']['arch']!r}")
    if not isinstance(tr["model"]["hidden"], list) or not tr["model"]["hidden"]:
        errors.append("trainer.model.hidden: expected a non-empty list of widths")
    _check_attack(tr["attack"], "trainer.attack", errors)
    if not isinstance(tr["eval_attacks"], list):
        errors.append("trainer.eval_attacks: expected a list")
    else:
        attack_defaults = _default_plan()["trainer"]["attack"]
        normd = []
        for i, a in enumerate(tr["eval_attacks"]):
            sub_errors: list[str] = []
            merged = _merge(attack_defaults, a if isinstance(a, dict) else None,
                            f"trainer.eval_attacks[{i}]", sub_errors)
            _check_attack(merged, f"trainer.eval_attacks[{i}]", sub_errors)
            errors.extend(sub_errors)
            normd.append(merged)
        tr["eval_attacks"] = normd

    ds = plan["dataset"]
    if ds["kind"] not in ("synthetic", "idx"):
        errors.append(f"dataset.kind: unknown kind {ds['kind']!r}")
    if ds["kind"] == "idx" and not ds.get("path"):
        errors.append("dataset.path: required for idx datasets")
    if isinstance(ds.get("spread"), float) and ds["spread"] <= 0:
        errors.append("dataset.spread: must be positive")
    if isinstance(ds.get("train_fraction"), float) and not 0 < ds["train_fraction"] < 1:
        errors.append("dataset.train_fraction: must lie in (0, 1)")
    if ds.get("directions") not in ("gaussian", "sign"):
        errors.append(f"dataset.directions: unknown kind {ds.get('directions')!r}")
    if isinstance(ds.get("fragile_dims"), int) and ds["fragile_dims"] < 0:
        errors.append("dataset.fragile_dims: must be >= 0")
    if isinstance(ds.get("fragile_radius"), float) and ds["fragile_radius"] < 0:
        errors.append("dataset.fragile_radius: must be >= 0")
    # mean_radius: a single length, or a per-coordinate amplitude profile
    mr = ds.get("mean_radius")
    if isinstance(mr, (int, float)) and not isinstance(mr, bool):
        ds["mean_radius"] = float(mr)
    elif isinstance(mr, list) and mr and all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in mr
    ):
        ds["mean_radius"] = [float(v) for v in mr]
    else:
        errors.append("dataset.mean_radius: expected a number or a list of numbers")

    sweep = plan["sweep"]
    axis = sweep.get("axis")
    if axis not in SWEEP_AXES:
        errors.append(f"sweep.axis: unknown axis {axis!r}, expected one of {SWEEP_AXES}")
    values = sweep.get("values")
    if not isinstance(values, list):
        errors.append("sweep.values: expected a list")
        values = []
    if axis == "none" and values:
        errors.append("sweep.values: must be empty when axis is 'none'")
    if axis in ("k_train", "inner_steps"):
        bad = [v for v in values if not isinstance(v, int) or isinstance(v, bool) or v < 1]
        if bad or not values:
            errors.append(f"sweep.values: {axis} sweep needs positive integers")
    if axis == "epsilon":
        bad = [v for v in values if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0]
        if bad or not values:
            errors.append("sweep.values: epsilon sweep needs non-negative numbers")
        else:
            sweep["values"] = [float(v) for v in values]
    if axis == "weight_ratio":
        if not values:
            errors.append("sweep.values: weight_ratio sweep needs at least one ratio")
        parsed = [_parse_ratio(v, f"sweep.values[{i}]", errors) for i, v in enumerate(values)]
        if all(p is not None for p in parsed):
            sweep["values"] = parsed

    if not isinstance(plan["seeds"], list) or not plan["seeds"] or not all(
        isinstance(s, int) and not isinstance(s, bool) for s in plan["seeds"]
    ):
        errors.append("seeds: expected a non-empty list of integers")

    return plan, errors


@dataclass
class ExperimentPlan:
    plan: dict

    @property
    def plan_id(self):
        return self.plan["plan_id"]

    @property
    def output_dir(self) -> Path:
        return Path(self.plan["output_dir"])

    @property
    def sweep_axis(self):
        return self.plan["sweep"]["axis"]

    def sweep_values(self):
        if self.sweep_axis == "none":
            return [None]
        return list(self.plan["sweep"]["values"])

    def cells(self):
        out = []
        for value in self.sweep_values():
            for seed in self.plan["seeds"]:
                out.append((value, int(seed)))
        return out

    def cell_id(self, value, seed) -> str:
        if value is None:
            tag = "base"
        elif self.sweep_axis == "weight_ratio":
            tag = f"w={value[0]:g}-{value[1]:g}"
        else:
            tag = f"{self.sweep_axis}={value:g}"
        return f"{tag}_seed={seed}"

    def config_hash(self) -> str:
        canon = json.dumps(self.plan, sort_keys=True) + f"|{__version__}"
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def validate_config(source) -> ExperimentPlan:
    """Parse and normalize a plan from a JSON file path, JSON text, or dict.
    An empty file yields the fully-defaulted plan. Raises ConfigError with
    every violation listed."""
    if isinstance(source, dict):
        raw = source
    else:
        text = Path(source).read_text() if Path(str(source)).exists() else str(source)
        text = text.strip()
        if not text:
            raw = {}
        else:
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError([f"invalid JSON: {e}"]) from None
        if not isinstance(raw, dict):
            raise ConfigError(["top level: expected a JSON object"])
    plan, errors = normalize_plan(raw)
    if errors:
        raise ConfigError(errors)
    return ExperimentPlan(plan)


# -- building runtime objects ---------------------------------------------------


def build_dataset(ds_cfg: dict) -> Dataset:
    if ds_cfg["kind"] == "idx":
        return load_idx_dataset(ds_cfg["path"], train_fraction=ds_cfg["train_fraction"])
    return synth_gaussian_dataset(
        classes=ds_cfg["classes"],
        per_class=ds_cfg["per_class"],
        dim=ds_cfg["dim"],
        spread=ds_cfg["spread"],
        seed=ds_cfg["seed"],
        train_fraction=ds_cfg["train_fraction"],
        mean_radius=ds_cfg["mean_radius"],
        fragile_dims=ds_cfg["fragile_dims"],
        fragile_radius=ds_cfg["fragile_radius"],
        directions=ds_cfg["directions"],
    )


def _attack_from(cfg: dict, epsilon_override=None) -> AttackConfig:
    return AttackConfig(
        family=cfg["family"],
        epsilon=float(cfg["epsilon"] if epsilon_override is None else epsilon_override),
        steps=cfg["steps"],
        step_size=cfg["step_size"],
        loss=cfg["loss"],
        random_start=cfg["random_start"],
    )


def _model_spec(tr: dict, dataset: Dataset) -> ModelSpec:
    sample = dataset.sample_shape
    if tr["model"]["arch"] == "mlp":
        return ModelSpec("mlp", (int(np.prod(sample)),), tr["n_way"], tuple(tr["model"]["hidden"]))
    if len(sample) != 3:
        raise ValueError("conv4 requires image-shaped samples (H, W, C)")
    h, w, c = sample
    return ModelSpec("conv4", (c, h, w), tr["n_way"], tuple(tr["model"]["hidden"]))


def build_trainer_config(plan: dict, dataset: Dataset, sweep_value=None, seed: int = 0) -> TrainerConfig:
    tr = json.loads(json.dumps(plan["trainer"]))  # deep copy
    axis = plan["sweep"]["axis"]
    if sweep_value is not None:
        if axis == "k_train":
            tr["k_train"] = int(sweep_value)
        elif axis == "inner_steps":
            tr["inner_steps"] = int(sweep_value)
        elif axis == "weight_ratio":
            tr["w_clean"], tr["w_adv"] = float(sweep_value[0]), float(sweep_value[1])
        elif axis == "epsilon":
            tr["attack"]["epsilon"] = float(sweep_value)
            for a in tr["eval_attacks"]:
                a["epsilon"] = float(sweep_value)
    task = TaskSpec(
        n_way=tr["n_way"], k_test=tr["k_test"], k_train=tr["k_train"],
        queries=tr["queries"], tasks_per_batch=tr["tasks_per_batch"],
    )
    return TrainerConfig(
        name=tr["preset"],
        model=_model_spec(tr, dataset),
        task=task,
        pathways=preset_pathways(tr["preset"], tr["w_clean"], tr["w_adv"]),
        inner_lr=tr["inner_lr"],
        outer_lr=tr["outer_lr"],
        inner_steps=tr["inner_steps"],
        inner_steps_test=tr["inner_steps_test"],
        attack=_attack_from(tr["attack"]),
        second_order=tr["second_order"],
        epochs=tr["epochs"],
        episodes_per_epoch=tr["episodes_per_epoch"],
        seed=seed,
        eval_attacks=tuple(_attack_from(a) for a in tr["eval_attacks"]),
    )


# -- plan execution ---------------------------------------------------------------


def _run_cell(plan_dict: dict, value, seed: int, cell_dir_str: str) -> dict:
    """Train, meta-test, and probe intrinsic dimension for one cell.
    Top-level so a process pool can execute it."""
    cell_dir = Path(cell_dir_str)
    cell_dir.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(plan_dict["dataset"])
    cfg = build_trainer_config(plan_dict, dataset, value, seed)
    params, _records = train(cfg, dataset, out_dir=cell_dir)

    rec = meta_test(
        cfg.model, params, dataset, cfg.task,
        inner_lr=cfg.inner_lr, inner_steps=cfg.inner_steps_test,
        attacks=cfg.eval_attacks, episodes=plan_dict["trainer"]["eval_episodes"],
        rng=np.random.default_rng(seed + 7_000_000), trainer_name=cfg.name,
        k_train=cfg.task.k_train, weight_ratio=cfg.weight_ratio,
    )

    id_rng = np.random.default_rng(seed + 9_000_000)
    n_id = plan_dict["trainer"]["id_samples"]
    clean_fm = collect_clean_features(cfg.model, params, dataset, n_id, id_rng)
    clean_est = estimate_id(clean_fm)
    noise_fm = collect_noise_features(cfg.model, params, dataset, cfg.attack, n_id, id_rng)
    noise_est = estimate_id(noise_fm)
    with open(cell_dir / "id_table.csv", "w") as fh:
        fh.write("source,d_hat,target,degenerate\n")
        fh.write(f"clean_features,{clean_est.d_hat},{clean_est.target},{clean_est.degenerate}\n")
        fh.write(f"noise,{noise_est.d_hat},{noise_est.target},{noise_est.degenerate}\n")

    summary = {
        "sweep_value": value,
        "seed": seed,
        "trainer": cfg.name,
        "k_train": cfg.task.k_train,
        "weight_ratio": cfg.weight_ratio,
        "clean_acc": rec.clean_acc,
        "clean_ci": rec.clean_ci,
        "robust_acc": rec.robust_acc,
        "robust_ci": rec.robust_ci,
        "id_clean": clean_est.d_hat,
        "id_noise": noise_est.d_hat,
    }
    (cell_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _ci95(vals):
    vals = np.asarray(vals, dtype=np.float64)
    if vals.size < 2:
        return 0.0
    return float(1.96 * vals.std(ddof=1) / np.sqrt(vals.size))


def _aggregate(plan: ExperimentPlan, manifest: dict) -> dict:
    rows = []
    for value in plan.sweep_values():
        cell_summaries = []
        for seed in plan.plan["seeds"]:
            cid = plan.cell_id(value, seed)
            if manifest["cells"].get(cid, {}).get("status") != "done":
                continue
            cell_summaries.append(
                json.loads((plan.output_dir / "cells" / cid / "summary.json").read_text())
            )
        if not cell_summaries:
            continue
        row = {
            "sweep_value": value,
            "n_seeds": len(cell_summaries),
            "clean_acc_mean": float(np.mean([c["clean_acc"] for c in cell_summaries])),
            "clean_acc_ci": _ci95([c["clean_acc"] for c in cell_summaries]),
            "id_clean_mean": float(np.mean([c["id_clean"] for c in cell_summaries])),
            "id_clean_ci": _ci95([c["id_clean"] for c in cell_summaries]),
            "id_noise_mean": float(np.mean([c["id_noise"] for c in cell_summaries])),
            "id_noise_ci": _ci95([c["id_noise"] for c in cell_summaries]),
            "robust": {},
        }
        for key in cell_summaries[0]["robust_acc"]:
            vals = [c["robust_acc"][key] for c in cell_summaries]
            row["robust"][key] = {"mean": float(np.mean(vals)), "ci": _ci95(vals)}
        rows.append(row)
    return {"plan_id": plan.plan_id, "axis": plan.sweep_axis, "rows": rows}


def run_plan(plan: ExperimentPlan, workers: int = 1, log=print) -> dict:
    """Execute every pending cell; idempotent under re-runs. Returns counts of
    trained / skipped / failed cells."""
    out = plan.output_dir
    (out / "cells").mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(json.dumps(plan.plan, indent=2))

    manifest_path = out / "manifest.json"
    want_hash = plan.config_hash()
    manifest = {"hash": want_hash, "cells": {}}
    if manifest_path.exists():
        old = json.loads(manifest_path.read_text())
        if old.get("hash") == want_hash:
            manifest = old
        else:
            log(f"config hash changed ({old.get('hash')} -> {want_hash}); re-running all cells")

    pending = []
    skipped = 0
    for value, seed in plan.cells():
        cid = plan.cell_id(value, seed)
        if manifest["cells"].get(cid, {}).get("status") == "done":
            skipped += 1
            continue
        pending.append((value, seed, cid))

    stats = {"trained": 0, "skipped": skipped, "errors": []}

    def record(cid, status, error=None):
        manifest["cells"][cid] = {"status": status}
        if error:
            manifest["cells"][cid]["error"] = error
        manifest_path.write_text(json.dumps(manifest, indent=2))

    if workers <= 1:
        for value, seed, cid in pending:
            log(f"cell {cid}: training")
            try:
                _run_cell(plan.plan, value, seed, str(out / "cells" / cid))
                record(cid, "done")
                stats["trained"] += 1
            except Exception as e:  # noqa: BLE001 - cell isolation is the point
                record(cid, "error", f"{type(e).__name__}: {e}")
                stats["errors"].append(cid)
                log(f"cell {cid}: failed: {e}")
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(_run_cell, plan.plan, value, seed, str(out / "cells" / cid)): cid
                for value, seed, cid in pending
            }
            for fut, cid in futures.items():
                try:
                    fut.result()
                    record(cid, "done")
                    stats["trained"] += 1
                except Exception as e:  # noqa: BLE001
                    record(cid, "error", f"{type(e).__name__}: {e}")
                    stats["errors"].append(cid)
                    log(f"cell {cid}: failed: {e}")

    (out / "summary.json").write_text(json.dumps(_aggregate(plan, manifest), indent=2))
    return stats


# -- plot data ---------------------------------------------------------------------


def _load_done_cells(artifact_dir: Path):
    plan = ExperimentPlan(json.loads((artifact_dir / "plan.json").read_text()))
    manifest = json.loads((artifact_dir / "manifest.json").read_text())
    cells, missing = {}, []
    for value, seed in plan.cells():
        cid = plan.cell_id(value, seed)
        if manifest["cells"].get(cid, {}).get("status") == "done":
            cells[cid] = json.loads(
                (artifact_dir / "cells" / cid / "summary.json").read_text()
            )
        else:
            missing.append(cid)
    return plan, cells, missing


def _value_key(plan: ExperimentPlan, value):
    if value is None:
        return "base"
    if plan.sweep_axis == "weight_ratio":
        return f"{value[0]:g}:{value[1]:g}"
    return value


def emit_plot_data(artifact_dir, figure: str) -> Path:
    """Write one tidy CSV (x, series, mean, ci_low, ci_high) for the given
    figure id. Requires every plan cell to be complete."""
    artifact_dir = Path(artifact_dir)
    if figure not in FIGURES:
        raise ValueError(f"unknown figure {figure!r}, expected one of {FIGURES}")
    plan, cells, missing = _load_done_cells(artifact_dir)
    if missing:
        raise ValueError(f"plan has incomplete cells: {', '.join(missing)}")

    axis = plan.sweep_axis
    if figure == "shot_sweep" and axis != "k_train":
        raise ValueError("shot_sweep needs a k_train sweep")
    if figure == "finetune_steps" and axis != "inner_steps":
        raise ValueError("finetune_steps needs an inner_steps sweep")
    if figure == "tradeoff" and axis not in ("k_train", "weight_ratio"):
        raise ValueError("tradeoff needs a k_train or weight_ratio sweep")

    values = plan.sweep_values()
    if axis in ("k_train", "inner_steps", "epsilon"):
        values = sorted(values)

    rows = []
    for value in values:
        group = [
            cells[plan.cell_id(value, seed)]
            for seed in plan.plan["seeds"]
        ]
        x = _value_key(plan, value)
        series = {}
        if figure == "id_table":
            series["clean_id"] = [c["id_clean"] for c in group]
            series["noise_id"] = [c["id_noise"] for c in group]
        else:
            series["clean"] = [c["clean_acc"] for c in group]
            for key in group[0]["robust_acc"]:
                series[f"robust_{key}"] = [c["robust_acc"][key] for c in group]
        for name, vals in series.items():
            m, ci = float(np.mean(vals)), _ci95(vals)
            rows.append((x, name, m, m - ci, m + ci))

    out = artifact_dir / "plots"
    out.mkdir(exist_ok=True)
    path = out / f"{figure}.csv"
    with open(path, "w") as fh:
        fh.write("x,series,mean,ci_low,ci_high\n")
        for x, name, m, lo, hi in rows:
            fh.write(f"{x},{name},{m},{lo},{hi}\n")
    return path
