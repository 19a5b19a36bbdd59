import numpy as np
import pytest

from metarobust.attacks import (
    AttackConfig,
    clean_accuracy,
    cw_margin_pgd,
    fgsm,
    margin_loss_values,
    pgd,
    robust_accuracy,
    run_attack,
)
from metarobust.autodiff import softmax_cross_entropy, tensor
from metarobust.data import Dataset, TaskSpec, sample_episode, synth_gaussian_dataset
from metarobust.models import ModelSpec, ParamSet, Tensor, forward, init_params

SPEC = ModelSpec("mlp", (8,), 5, (12,))
rng = np.random.default_rng(7)


def random_problem(seed, batch=6):
    r = np.random.default_rng(seed)
    params = init_params(SPEC, seed).map_data(
        lambda n, d: d if n.endswith("weight") else r.normal(scale=0.1, size=d.shape)
    )
    x = r.uniform(size=(batch, 8))
    y = r.integers(0, 5, size=batch)
    return params, x, y


def ce_value(params, x, y):
    return softmax_cross_entropy(forward(SPEC, params, tensor(x)), y).item()


MU = np.array([[0.9, 0.1, 0.1, 0.1], [0.1, 0.9, 0.1, 0.1]])


def separable_problem(spread=1e-3):
    """Two far-apart clusters; the matching wide-margin classifier depends on
    how an episode remaps labels, so it is built per episode."""
    r = np.random.default_rng(0)
    spec = ModelSpec("mlp", (4,), 2, (4,))
    images = np.clip(np.repeat(MU, 20, axis=0) + spread * r.normal(size=(40, 4)), 0, 1)
    labels = np.repeat([0, 1], 20)
    return spec, Dataset(images, labels, (), (0, 1))


def separable_params(class_map):
    head = np.zeros((4, 2))
    for orig, ep_label in class_map.items():
        head[:, ep_label] = MU[orig] - MU[1 - orig]
    return ParamSet([
        ("fc0.weight", Tensor(np.eye(4))),
        ("fc0.bias", Tensor(np.zeros(4))),
        ("head.weight", Tensor(head)),
        ("head.bias", Tensor(np.zeros(2))),
    ])


def test_fgsm_zero_epsilon_is_identity_bitwise():
    params, x, y = random_problem(0)
    adv = fgsm(SPEC, params, x, y, AttackConfig("fgsm", epsilon=0.0))
    assert np.array_equal(adv.x_adv, x)
    assert np.array_equal(adv.delta, np.zeros_like(x))


def test_fgsm_delta_has_sign_structure():
    params, x, y = random_problem(1)
    cfg = AttackConfig("fgsm", epsilon=2.0)
    adv = fgsm(SPEC, params, x, y, cfg)
    # before clipping each coordinate moves by exactly +-eps/255 or 0; after
    # clipping magnitudes can only shrink
    assert np.all(np.abs(adv.delta) <= cfg.eps01 + 1e-12)
    interior = (x > cfg.eps01) & (x < 1 - cfg.eps01)
    vals = np.unique(np.round(np.abs(adv.delta[interior]) / cfg.eps01, 12))
    assert set(vals).issubset({0.0, 1.0})


def test_fgsm_increases_loss_on_most_batches():
    cfg = AttackConfig("fgsm", epsilon=4.0)
    wins = 0
    for seed in range(100):
        params, x, y = random_problem(seed)
        adv = fgsm(SPEC, params, x, y, cfg)
        wins += ce_value(params, adv.x_adv, y) >= ce_value(params, x, y)
    assert wins >= 95


def test_pgd_ball_and_clip_invariants():
    cfg = AttackConfig("pgd", epsilon=8.0, steps=10, random_start=True)
    r = np.random.default_rng(0)
    for seed in range(20):
        params, x, y = random_problem(seed)
        adv = pgd(SPEC, params, x, y, cfg, r)
        assert np.all(np.abs(adv.delta) <= cfg.eps01 + 1e-9)
        assert adv.x_adv.min() >= 0.0 and adv.x_adv.max() <= 1.0


def test_pgd_single_full_step_equals_fgsm_bitwise():
    params, x, y = random_problem(3)
    eps = 2.0
    a = fgsm(SPEC, params, x, y, AttackConfig("fgsm", epsilon=eps))
    b = pgd(SPEC, params, x, y,
            AttackConfig("pgd", epsilon=eps, steps=1, step_size=eps, random_start=False))
    assert np.array_equal(a.x_adv, b.x_adv)
    assert np.array_equal(a.delta, b.delta)


def test_pgd_more_steps_do_not_weaken_attack():
    one = AttackConfig("pgd", epsilon=8.0, steps=1, random_start=False)
    ten = AttackConfig("pgd", epsilon=8.0, steps=10, random_start=False)
    wins = 0
    for seed in range(50):
        params, x, y = random_problem(seed)
        l1 = ce_value(params, pgd(SPEC, params, x, y, one).x_adv, y)
        l10 = ce_value(params, pgd(SPEC, params, x, y, ten).x_adv, y)
        wins += l10 >= l1 - 1e-12
    assert wins >= 45


def test_pgd_deterministic_without_random_start():
    params, x, y = random_problem(4)
    cfg = AttackConfig("pgd", epsilon=4.0, steps=5, random_start=False)
    a = pgd(SPEC, params, x, y, cfg)
    b = pgd(SPEC, params, x, y, cfg)
    assert np.array_equal(a.x_adv, b.x_adv)


def test_pgd_random_start_requires_rng():
    params, x, y = random_problem(5)
    with pytest.raises(ValueError, match="rng"):
        pgd(SPEC, params, x, y, AttackConfig("pgd", epsilon=4.0, steps=2, random_start=True))


def test_cw_margin_pgd_identity_at_zero_and_invariants():
    params, x, y = random_problem(6)
    cfg0 = AttackConfig("cw_margin_pgd", epsilon=0.0, steps=5)
    adv0 = cw_margin_pgd(SPEC, params, x, y, cfg0)
    assert np.array_equal(adv0.x_adv, x)
    cfg = AttackConfig("cw_margin_pgd", epsilon=8.0, steps=10)
    adv = cw_margin_pgd(SPEC, params, x, y, cfg)
    assert np.all(np.abs(adv.delta) <= cfg.eps01 + 1e-9)
    assert adv.x_adv.min() >= 0.0 and adv.x_adv.max() <= 1.0


def test_margin_loss_nonpositive_when_already_misclassified():
    params, x, y = random_problem(8, batch=40)
    logits = forward(SPEC, params, tensor(x)).data
    wrong = np.argmax(logits, axis=1) != y
    assert wrong.any()
    vals = margin_loss_values(SPEC, params, x, y)
    assert np.all(vals[wrong] <= 0.0)


def test_attack_config_validation():
    cfg = AttackConfig("fgsm", epsilon=2.0, steps=7)
    assert cfg.steps == 1  # fgsm is single-step by definition
    assert AttackConfig("pgd", epsilon=4.0, steps=8).step01 == pytest.approx(1.0 / 255.0)
    assert AttackConfig("cw_margin_pgd", epsilon=1.0, steps=3).loss == "margin"
    with pytest.raises(ValueError):
        AttackConfig("fgsm", epsilon=-1.0)
    with pytest.raises(ValueError):
        AttackConfig("pgd", epsilon=1.0, steps=0)
    with pytest.raises(ValueError):
        AttackConfig("warp", epsilon=1.0)


def test_robust_accuracy_zero_epsilon_equals_clean_bitwise():
    ds = synth_gaussian_dataset(classes=12, per_class=20, dim=8, spread=0.1, seed=0)
    spec = TaskSpec(n_way=5, k_test=1, k_train=1, queries=6)
    params = init_params(SPEC, 1)
    r = np.random.default_rng(3)
    for fam, steps in (("fgsm", 1), ("pgd", 5), ("cw_margin_pgd", 5)):
        ep = sample_episode(ds, spec, r, role="test")
        cfg = AttackConfig(fam, epsilon=0.0, steps=steps, random_start=(fam == "pgd"))
        assert robust_accuracy(SPEC, params, ep, cfg, r) == clean_accuracy(SPEC, params, ep)


def test_untrained_model_is_chance_level():
    ds = synth_gaussian_dataset(classes=12, per_class=30, dim=8, spread=0.1, seed=1)
    spec = TaskSpec(n_way=5, k_test=1, k_train=1, queries=10)
    r = np.random.default_rng(11)
    scores = []
    for seed in range(60):
        params = init_params(SPEC, 1000 + seed)
        ep = sample_episode(ds, spec, r, role="test")
        scores.append(clean_accuracy(SPEC, params, ep))
    m = np.mean(scores)
    se = np.std(scores, ddof=1) / np.sqrt(len(scores))
    assert abs(m - 0.2) <= 3 * se + 1e-9


def test_separable_task_survives_tiny_epsilon():
    spec, ds = separable_problem()
    task = TaskSpec(n_way=2, k_test=1, k_train=1, queries=10)
    r = np.random.default_rng(2)
    ep = sample_episode(ds, task, r, role="test")
    params = separable_params(ep.class_map)
    assert clean_accuracy(spec, params, ep) == 1.0
    for fam in ("fgsm", "pgd", "cw_margin_pgd"):
        cfg = AttackConfig(fam, epsilon=1.0, steps=5)
        assert robust_accuracy(spec, params, ep, cfg, r) == 1.0


def test_robust_accuracy_monotone_in_epsilon_statistically():
    # widen the clusters so moderate budgets actually flip samples
    spec, ds = separable_problem(spread=0.12)
    task = TaskSpec(n_way=2, k_test=1, k_train=1, queries=12)
    r = np.random.default_rng(9)
    episodes = [sample_episode(ds, task, r, role="test") for _ in range(30)]
    means = []
    for eps in (0.0, 1.0, 2.0, 4.0, 8.0):
        cfg = AttackConfig("pgd", epsilon=eps, steps=5, random_start=False)
        means.append(np.mean([
            robust_accuracy(spec, separable_params(ep.class_map), ep, cfg)
            for ep in episodes
        ]))
    for lo, hi in zip(means[1:], means[:-1]):
        assert lo <= hi + 0.005, means


def test_run_attack_dispatch():
    params, x, y = random_problem(10)
    for fam in ("fgsm", "pgd", "cw_margin_pgd"):
        cfg = AttackConfig(fam, epsilon=2.0, steps=2)
        adv = run_attack(SPEC, params, x, y, cfg)
        assert adv.x_adv.shape == x.shape
    with pytest.raises(ValueError):
        fgsm(SPEC, params, x, y, AttackConfig("pgd", epsilon=1.0))
