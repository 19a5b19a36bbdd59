import numpy as np
import pytest

import metarobust.trainers as trainers_mod
from metarobust.attacks import AttackConfig
from metarobust.autodiff import grad, mul, scale, sub, tensor
from metarobust.data import TaskSpec, sample_episode, synth_gaussian_dataset
from metarobust.models import ModelSpec, ParamSet, as_model_batch, forward, init_params
from metarobust.autodiff import softmax_cross_entropy
from metarobust.trainers import (
    MetricsRecord,
    Pathway,
    TrainerConfig,
    TrainingDiverged,
    finetune_on_loss,
    inner_finetune,
    meta_step,
    meta_test,
    metrics_to_csv,
    metrics_to_jsonl,
    preset_pathways,
    train,
)

MLP = ModelSpec("mlp", (10,), 5, (16,))


def make_dataset(seed=0):
    return synth_gaussian_dataset(classes=14, per_class=24, dim=10, spread=0.1, seed=seed)


def make_cfg(preset="maml", w_clean=1.0, w_adv=1.0, k_train=1, k_test=1, **kw):
    defaults = dict(
        name=preset,
        model=MLP,
        task=TaskSpec(n_way=5, k_test=k_test, k_train=k_train, queries=4, tasks_per_batch=2),
        pathways=preset_pathways(preset, w_clean, w_adv),
        inner_lr=0.05,
        outer_lr=0.01,
        inner_steps=2,
        inner_steps_test=3,
        attack=AttackConfig("fgsm", epsilon=8.0),
        epochs=1,
        episodes_per_epoch=5,
        seed=0,
    )
    defaults.update(kw)
    return TrainerConfig(**defaults)


# -- presets -------------------------------------------------------------------


def test_preset_pathway_tables():
    assert preset_pathways("maml") == (Pathway("clean", (("clean", 1.0),)),)
    assert preset_pathways("aq") == (Pathway("clean", (("adversarial", 1.0),)),)
    assert preset_pathways("adml") == (
        Pathway("adversarial", (("clean", 1.0),)),
        Pathway("clean", (("adversarial", 1.0),)),
    )
    assert preset_pathways("r-maml", 1.0, 0.2) == (
        Pathway("clean", (("clean", 1.0), ("adversarial", 0.2))),
    )
    assert preset_pathways("its-maml") == preset_pathways("r-maml")
    with pytest.raises(ValueError):
        preset_pathways("fancy")


def test_pathway_validation():
    with pytest.raises(ValueError):
        Pathway("noisy", (("clean", 1.0),))
    with pytest.raises(ValueError):
        Pathway("clean", ())
    with pytest.raises(ValueError):
        Pathway("clean", (("clean", -0.5),))


# -- inner loop ----------------------------------------------------------------


def test_finetune_zero_steps_is_identity():
    ps = init_params(MLP, 0)
    out = finetune_on_loss(lambda p: None, ps, 0.1, 0, track=False)
    assert out is ps


def test_finetune_scalar_quadratic_hand_iteration():
    # L(t) = t^2, lr 0.1: 1 -> 0.8 -> 0.64
    start = ParamSet([("t", tensor([1.0]))])

    def loss(ps):
        t = ps["t"]
        return mul(t, t)

    for track in (False, True):
        src = start.tracked() if track else start
        out = finetune_on_loss(loss, src, 0.1, 2, track=track)
        assert out["t"].data[0] == pytest.approx(0.64, abs=1e-15)


def test_finetune_tracked_derivative_matches_hand_value():
    # d theta'/d theta for two steps on t^2 is (1 - 2*lr)^2 = 0.64
    theta = ParamSet([("t", tensor([1.0], track=True))])

    def loss(ps):
        t = ps["t"]
        return mul(t, t)

    out = finetune_on_loss(loss, theta, 0.1, 2, track=True)
    (g,) = grad(out["t"], theta.values)
    assert g.data[0] == pytest.approx(0.64, abs=1e-12)


def test_inner_finetune_runs_on_episode():
    ds = make_dataset()
    task = TaskSpec(n_way=5, k_test=1, k_train=2, queries=3)
    ep = sample_episode(ds, task, np.random.default_rng(0), role="train")
    ps = init_params(MLP, 0)
    sx = as_model_batch(MLP, ep.support_x)
    before = softmax_cross_entropy(forward(MLP, ps, tensor(sx)), ep.support_y).item()
    out = inner_finetune(MLP, ps, sx, ep.support_y, 0.1, 5, track=False)
    after = softmax_cross_entropy(forward(MLP, out, tensor(sx)), ep.support_y).item()
    assert after < before


# -- meta step ------------------------------------------------------------------


def test_maml_with_zero_inner_steps_is_plain_supervised_step():
    ds = make_dataset()
    cfg = make_cfg("maml", inner_steps=0)
    cfg.task = TaskSpec(n_way=5, k_test=1, k_train=1, queries=4, tasks_per_batch=1)
    ep = sample_episode(ds, cfg.task, np.random.default_rng(3), role="train")
    params = init_params(MLP, 0)
    stepped, rec = meta_step(cfg, params, [ep])

    leaves = params.tracked()
    qx = tensor(as_model_batch(MLP, ep.query_x))
    loss = scale(scale(softmax_cross_entropy(forward(MLP, leaves, qx), ep.query_y), 1.0), 1.0)
    gs = grad(loss, leaves.values)
    for (name, got), g, (  _, base) in zip(stepped.items(), gs, params.items()):
        assert np.array_equal(got.data, base.data - cfg.outer_lr * g.data), name
    assert rec.meta_loss == pytest.approx(loss.item())


def test_adml_runs_two_finetunes_per_task(monkeypatch):
    calls = {"n": 0}
    real = trainers_mod.inner_finetune

    def counting(*args, **kw):
        calls["n"] += 1
        return real(*args, **kw)

    monkeypatch.setattr(trainers_mod, "inner_finetune", counting)
    ds = make_dataset()
    cfg = make_cfg("adml")
    rng = np.random.default_rng(0)
    episodes = [sample_episode(ds, cfg.task, rng, role="train") for _ in range(2)]
    meta_step(cfg, init_params(MLP, 0), episodes)
    assert calls["n"] == 2 * len(episodes)


def test_meta_step_asserts_train_shot_count():
    ds = make_dataset()
    cfg = make_cfg("maml", k_train=2)
    test_ep = sample_episode(ds, cfg.task, np.random.default_rng(0), role="test")
    with pytest.raises(ValueError, match="support samples"):
        meta_step(cfg, init_params(MLP, 0), [test_ep])


def test_first_order_changes_trajectory_not_api():
    ds = make_dataset()
    a = train(make_cfg("maml", second_order=True), ds)[0]
    b = train(make_cfg("maml", second_order=False), ds)[0]
    assert a.names == b.names
    assert not a.data_equal(b)


def test_second_order_meta_gradient_matches_analytic_scalar_toy():
    # support loss t^3 (hessian 6t), query loss (t-2)^2, one inner step:
    # meta-grad = (1 - alpha*6t) * 2*(t' - 2)
    alpha, t0 = 0.05, 0.7
    theta = ParamSet([("t", tensor([t0], track=True))])

    def support_loss(ps):
        t = ps["t"]
        return mul(mul(t, t), t)

    theta_p = finetune_on_loss(support_loss, theta, alpha, 1, track=True)
    q = sub(theta_p["t"], tensor([2.0]))
    (g,) = grad(mul(q, q), theta.values)
    tp = t0 - alpha * 3 * t0 ** 2
    want = (1 - alpha * 6 * t0) * 2 * (tp - 2
)
    assert g.data[0] == pytest.approx(want, abs=1e-6)


def test_query_weight_scaling_invariance_power_of_two():
    ds = make_dataset()
    base = make_cfg("r-maml", w_clean=1.0, w_adv=0.5, episodes_per_epoch=4)
    scaled = make_cfg("r-maml", w_clean=2.0, w_adv=1.0, episodes_per_epoch=4,
                      outer_lr=base.outer_lr / 2.0)
    pa, ra = train(base, ds)
    pb, rb = train(scaled, ds)
    # factor of two commutes exactly with float rounding
    assert pa.data_equal(pb)
    assert [r.meta_loss * 2 for r in ra] == [r.meta_loss for r in rb]


# -- preset collapse ------------------------------------------------------------


def test_its_maml_with_zero_adv_weight_collapses_to_maml():
    ds = make_dataset()
    its = make_cfg("its-maml", w_clean=1.0, w_adv=0.0, k_train=1, episodes_per_epoch=10)
    maml = make_cfg("maml", k_train=1, episodes_per_epoch=10)
    p_its, r_its = train(its, ds)
    p_maml, r_maml = train(maml, ds)
    assert p_its.data_equal(p_maml)
    assert [r.meta_loss for r in r_its] == [r.meta_loss for r in r_maml]


def test_its_maml_with_zero_clean_weight_collapses_to_aq():
    ds = make_dataset()
    its = make_cfg("its-maml", w_clean=0.0, w_adv=1.0, k_train=1, episodes_per_epoch=10)
    aq = make_cfg("aq", k_train=1, episodes_per_epoch=10)
    p_its, r_its = train(its, ds)
    p_aq, r_aq = train(aq, ds)
    assert p_its.data_equal(p_aq)
    assert [r.meta_loss for r in r_its] == [r.meta_loss for r in r_aq]


# -- train / meta-test ----------------------------------------------------------


def test_train_deterministic_given_seed(tmp_path):
    ds = make_dataset()
    cfg = make_cfg("r-maml", episodes_per_epoch=6, eval_episodes=10,
                   eval_attacks=(AttackConfig("fgsm", epsilon=8.0),))
    pa, ra = train(cfg, ds, out_dir=tmp_path / "a")
    pb, rb = train(cfg, ds, out_dir=tmp_path / "b")
    assert pa.data_equal(pb)
    assert [r.meta_loss for r in ra] == [r.meta_loss for r in rb]
    evals_a = [r for r in ra if r.clean_acc is not None]
    evals_b = [r for r in rb if r.clean_acc is not None]
    assert evals_a and all(
        x.clean_acc == y.clean_acc and x.robust_acc == y.robust_acc
        for x, y in zip(evals_a, evals_b)
    )
    assert (tmp_path / "a" / "epoch_001.params").exists()
    assert (tmp_path / "a" / "metrics.csv").exists()


def test_train_losses_finite_and_logged():
    ds = make_dataset()
    cfg = make_cfg("maml", episodes_per_epoch=8)
    _, records = train(cfg, ds)
    assert len(records) == 8
    assert all(np.isfinite(r.meta_loss) for r in records)
    assert [r.step for r in records] == list(range(1, 9))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_aborts_on_divergence_with_diagnostic():
    ds = make_dataset()
    cfg = make_cfg("maml", inner_lr=1e200, outer_lr=1e200, episodes_per_epoch=3)
    with pytest.raises(TrainingDiverged, match=r"epoch 1, step \d"):
        train(cfg, ds)


def test_maml_learns_separable_synthetic_data():
    # sanity-run threshold from a pilot: easy blobs reach >0.9 clean accuracy
    # with this budget
    ds = synth_gaussian_dataset(classes=14, per_class=24, dim=10, spread=0.03,
                                seed=1, mean_radius=0.4)
    cfg = make_cfg("maml", inner_lr=1.0, outer_lr=0.3, inner_steps=3,
                   episodes_per_epoch=800, epochs=1,
                   task=TaskSpec(n_way=5, k_test=1, k_train=1, queries=4,
                                 tasks_per_batch=4))
    params, _ = train(cfg, ds)
    rec = meta_test(MLP, params, ds, cfg.task, inner_lr=1.0, inner_steps=6,
                    episodes=60, rng=np.random.default_rng(0))
    assert rec.clean_acc > 0.9


def test_meta_test_uses_k_test_and_reports_attacks():
    ds = make_dataset()
    params = init_params(MLP, 0)
    task = TaskSpec(n_way=5, k_test=1, k_train=3, queries=4)
    attacks = (
        AttackConfig("fgsm", epsilon=0.0, label="eps0"),
        AttackConfig("pgd", epsilon=8.0, steps=3, random_start=True),
    )
    rec = meta_test(MLP, params, ds, task, inner_steps=1, attacks=attacks,
                    episodes=20, rng=np.random.default_rng(0))
    assert rec.robust_acc["eps0"] == rec.clean_acc
    assert set(rec.robust_acc) == {"eps0", "pgd"}
    assert rec.clean_ci >= 0.0


def test_untrained_meta_test_is_chance_level():
    ds = make_dataset()
    params = init_params(MLP, 99)
    task = TaskSpec(n_way=5, k_test=1, k_train=1, queries=8)
    rec = meta_test(MLP, params, ds, task, inner_steps=0, episodes=100,
                    rng=np.random.default_rng(1))
    # 95% CI is 1.96 se; a 3-sigma band is wider by 3/1.96
    assert abs(rec.clean_acc - 0.2) <= rec.clean_ci * 3 / 1.96 + 1e-9


def test_meta_test_ci_scales_with_episode_count():
    ds = make_dataset()
    params = init_params(MLP, 5)
    task = TaskSpec(n_way=5, k_test=1, k_train=1, queries=6)
    small = meta_test(MLP, params, ds, task, inner_steps=0, episodes=150,
                      rng=np.random.default_rng(2))
    big = meta_test(MLP, params, ds, task, inner_steps=0, episodes=600,
                    rng=np.random.default_rng(3))
    ratio = big.clean_ci / small.clean_ci
    assert 0.4 <= ratio <= 0.6


# -- metrics records -------------------------------------------------------------


def test_metrics_record_rejects_bad_accuracy():
    with pytest.raises(ValueError):
        MetricsRecord("x", 1, "1:1", clean_acc=1.5)


def test_metrics_writers(tmp_path):
    records = [
        MetricsRecord("maml", 1, "1:0", epoch=1, step=1, meta_loss=0.5, wall_clock=0.1),
        MetricsRecord("maml", 1, "1:0", epoch=1, step=2, clean_acc=0.4, clean_ci=0.02,
                      robust_acc={"pgd": 0.3}, robust_ci={"pgd": 0.05}),
    ]
    csv_path = tmp_path / "m.csv"
    jsonl_path = tmp_path / "m.jsonl"
    metrics_to_csv(records, csv_path)
    metrics_to_jsonl(records, jsonl_path)
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0].split(",")[:3] == ["epoch", "step", "trainer"]
    assert "robust_pgd" in lines[0]
    assert len(lines) == 3
    import json
    rows = [json.loads(l) for l in jsonl_path.read_text().splitlines()]
    assert rows[1]["robust_acc"] == {"pgd": 0.3}
