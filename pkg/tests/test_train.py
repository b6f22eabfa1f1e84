import numpy as np
import pytest

from sitfuse.evaluation import EvalConfig
from sitfuse.gridworld import EnvBundle, GenParams, generate_environment
from sitfuse.losses import AffinityMatrix
from sitfuse.train import (
    ImitationDataset,
    TrainConfig,
    TrainingDiverged,
    build_dataset,
    curve_to_csv,
    lr_at,
    make_suite,
    rank_branches,
    train_policy,
    verify_labels,
)

DESK_EVAL = EvalConfig(episodes_per_task=8, max_steps=39, goal_radius=1,
                       d_min=3, d_max=12, seed=3)


@pytest.fixture(scope="module")
def dataset(small_suite, bank_and_cfg):
    bank, cfg = bank_and_cfg
    return build_dataset(small_suite, bank, cfg, per_env=128, seed=5,
                         goal_radius=1)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

def test_dataset_row_count_and_labels(dataset, small_suite):
    assert dataset.size == 4 * 128
    assert verify_labels(dataset, small_suite, goal_radius=1) == dataset.size
    assert set(dataset.labels) <= set(range(9))
    assert dataset.raw.shape == (dataset.size, dataset.bank_cfg.raw_dim)
    for spec in dataset.bank:
        assert dataset.reps[spec.name].shape == (dataset.size, spec.dim)


def test_dataset_deterministic(small_suite, bank_and_cfg):
    bank, cfg = bank_and_cfg
    a = build_dataset(small_suite[:2], bank, cfg, per_env=32, seed=9, goal_radius=1)
    b = build_dataset(small_suite[:2], bank, cfg, per_env=32, seed=9, goal_radius=1)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.raw, b.raw)
    for name in a.reps:
        assert np.array_equal(a.reps[name], b.reps[name])


def test_dataset_rejects_env_missing_class(small_suite, bank_and_cfg):
    bank, cfg = bank_and_cfg
    broken_map = generate_environment(55, GenParams())
    broken_map.objects[:] = [o for o in broken_map.objects if o.cls != "bed"]
    broken = EnvBundle.create("broken_000", broken_map)
    with pytest.warns(UserWarning, match="broken_000"):
        ds = build_dataset([small_suite[0], broken], bank, cfg, per_env=16,
                           seed=1, goal_radius=1)
    assert ds.env_ids == [small_suite[0].env_id]
    with pytest.raises(ValueError):
        with pytest.warns(UserWarning):
            build_dataset([broken], bank, cfg, per_env=16, seed=1)


def test_split_ids_disjoint():
    train_envs, test_envs = make_suite(GenParams(), 3, 2, seed=0)
    train_ids = {e.env_id for e in train_envs}
    test_ids = {e.env_id for e in test_envs}
    assert not train_ids & test_ids
    assert len(train_ids) == 3 and len(test_ids) == 2


def test_make_suite_deterministic():
    a_train, a_test = make_suite(GenParams(), 2, 1, seed=4)
    b_train, b_test = make_suite(GenParams(), 2, 1, seed=4)
    for x, y in zip(a_train + a_test, b_train + b_test):
        assert np.array_equal(x.gmap.cells, y.gmap.cells)
        assert x.gmap.objects == y.gmap.objects


# ---------------------------------------------------------------------------
# schedule and config validation
# ---------------------------------------------------------------------------

def test_lr_schedule_exact():
    cfg = TrainConfig(iterations=2000, decay_milestones=(1000, 1600),
                      base_lr=1e-3, decay_factor=0.1)
    assert lr_at(cfg, 0) == 1e-3
    assert lr_at(cfg, 999) == 1e-3
    assert lr_at(cfg, 1000) == pytest.approx(1e-4)
    assert lr_at(cfg, 1599) == pytest.approx(1e-4)
    assert lr_at(cfg, 1600) == pytest.approx(1e-5)
    assert lr_at(cfg, 1999) == pytest.approx(1e-5)


def test_config_validation(dataset):
    with pytest.raises(ValueError):
        TrainConfig(iterations=0).validate(dataset.size)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=dataset.size + 1).validate(dataset.size)
    with pytest.raises(ValueError):
        TrainConfig(scheme="blackbox", lam_aff=0.1).validate(dataset.size)
    with pytest.raises(ValueError):
        train_policy(dataset, TrainConfig(scheme="action_fusion", lam_aff=0.1,
                                          iterations=1, batch_size=8))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def smoothed(vals, k=3):
    return float(np.mean(vals[:k])), float(np.mean(vals[-k:]))


@pytest.mark.parametrize("scheme", ["blackbox", "concat", "feature_fusion",
                                    "action_fusion"])
def test_short_training_reduces_loss(dataset, scheme):
    cfg = TrainConfig(scheme=scheme, iterations=200, batch_size=64, seed=2,
                      decay_milestones=(), log_every=10)
    policy, curve = train_policy(dataset, cfg)
    first, last = smoothed([row["ce_fused"] for row in curve])
    assert last < first


@pytest.mark.parametrize("scheme", ["blackbox", "concat", "feature_fusion",
                                    "action_fusion"])
def test_fixed_batch_loss_decreases_in_50_iterations(dataset, scheme):
    # dataset trimmed to exactly one batch, so every iteration sees the same rows
    idx = np.arange(64)
    fixed = ImitationDataset(
        dataset.split, dataset.env_ids, dataset.row_env[idx], dataset.nodes[idx],
        dataset.targets[idx], dataset.labels[idx],
        {k: v[idx] for k, v in dataset.reps.items()}, dataset.raw[idx],
        dataset.bank, dataset.bank_cfg)
    cfg = TrainConfig(scheme=scheme, iterations=50, batch_size=64, seed=6,
                      decay_milestones=(), log_every=1)
    _, curve = train_policy(fixed, cfg)
    assert curve[-1]["total"] < curve[0]["total"]


def test_training_with_raw_only_gate(dataset):
    cfg = TrainConfig(scheme="action_fusion", iterations=40, batch_size=32,
                      seed=8, gate_input="raw_only", log_every=10)
    policy, curve = train_policy(dataset, cfg)
    assert policy.gate_net.in_dim == dataset.bank_cfg.raw_dim
    assert np.isfinite(curve[-1]["total"])


def test_training_deterministic_checkpoints(dataset, tmp_path):
    cfg = TrainConfig(scheme="action_fusion", iterations=60, batch_size=32,
                      seed=11, decay_milestones=(30,), log_every=20)
    train_policy(dataset, cfg, checkpoint_stem=tmp_path / "a")
    train_policy(dataset, cfg, checkpoint_stem=tmp_path / "b")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()


def test_training_curve_columns_and_csv(dataset, tmp_path):
    cfg = TrainConfig(scheme="feature_fusion", iterations=40, batch_size=32,
                      seed=1, lam_lbl=0.1, log_every=10)
    _, curve = train_policy(dataset, cfg)
    assert curve[0]["iteration"] == 0
    assert curve[-1]["iteration"] == 39
    curve_to_csv(curve, tmp_path / "curve.csv")
    text = (tmp_path / "curve.csv").read_text().splitlines()
    assert text[0] == "iteration,ce_fused,ce_branch_mean,lbl,affinity,total,lr"
    assert len(text) == len(curve) + 1


def test_training_with_affinity_regularizer(dataset):
    names = tuple(s.name for s in dataset.bank)
    n = len(names)
    f = AffinityMatrix(names, np.eye(n))
    cfg = TrainConfig(scheme="action_fusion", iterations=30, batch_size=32,
                      seed=3, lam_aff=0.1, log_every=10)
    _, curve = train_policy(dataset, cfg, affinity=f)
    assert all(np.isfinite(row["total"]) for row in curve)
    assert curve[-1]["affinity"] > 0


def test_divergence_detected(dataset):
    poisoned = ImitationDataset(
        dataset.split, dataset.env_ids, dataset.row_env, dataset.nodes,
        dataset.targets, dataset.labels,
        {k: v.copy() for k, v in dataset.reps.items()},
        dataset.raw.copy(), dataset.bank, dataset.bank_cfg)
    poisoned.raw[...] = np.nan
    cfg = TrainConfig(scheme="blackbox", iterations=5, batch_size=16, seed=0)
    with pytest.raises(TrainingDiverged):
        train_policy(poisoned, cfg)


# ---------------------------------------------------------------------------
# branch ranking
# ---------------------------------------------------------------------------

def test_rank_branches_structure(dataset, small_suite):
    cfg = TrainConfig(scheme="action_fusion", iterations=120, batch_size=64,
                      seed=4, decay_milestones=(), log_every=40)
    policy, _ = train_policy(dataset, cfg)
    ranked = rank_branches(policy, small_suite[:2], DESK_EVAL)
    assert sorted(i for i, _ in ranked) == list(range(policy.n))
    rates = [r for _, r in ranked]
    assert rates == sorted(rates, reverse=True)
    # equal-rate branches are ordered by index
    for (i1, r1), (i2, r2) in zip(ranked, ranked[1:]):
        if r1 == r2:
            assert i1 < i2
