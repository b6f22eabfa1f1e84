import numpy as np
import pytest

from sitfuse.evaluation import (
    EvalConfig,
    EvalReport,
    OracleActor,
    PolicyActor,
    RandomActor,
    SchemeError,
    draw_start_sets,
    evaluate,
    gate_analytics,
    openness_band,
    oracle_factory,
    policy_factory,
    random_factory,
    robustness_drop,
    rollout,
    sample_gate_states,
)
from sitfuse.fusion import FusionPolicy
from sitfuse.gridworld import OBJECT_CLASSES, instance_distances
from sitfuse.percept import BankConfig, ExtractorSpec

DESK = EvalConfig(episodes_per_task=8, max_steps=39, goal_radius=1,
                  d_min=3, d_max=12, seed=7)


@pytest.fixture(scope="module")
def untrained_policy(bank_and_cfg):
    bank, cfg = bank_and_cfg
    return FusionPolicy.create("action_fusion", bank, cfg, seed=0)


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------

def test_rollout_stop_inside_radius(small_suite):
    env = small_suite[0]
    cfg = DESK
    d = env.distances("chair", cfg.goal_radius)
    node = int(np.flatnonzero(d == 0)[0])
    actor = OracleActor(env, "chair", cfg.goal_radius)
    result = rollout(actor, env, node, "chair", cfg, np.random.default_rng(0))
    assert result.success and result.steps == 0


def test_rollout_oracle_takes_exactly_d_steps(small_suite):
    env = small_suite[1]
    cfg = DESK
    d = env.distances("table", cfg.goal_radius)
    starts = draw_start_sets([env], cfg)["table"][:4]
    for _, node in starts:
        actor = OracleActor(env, "table", cfg.goal_radius)
        result = rollout(actor, env, node, "table", cfg, np.random.default_rng(0))
        assert result.success
        assert result.steps == d[node]
        # success re-verified against raw instance distances
        inst = instance_distances(env.graph, "table")
        assert inst[result.trajectory[-1]] <= cfg.goal_radius


def any_start(suite, cfg):
    """First (env, class, node) with an eligible start in the suite."""
    from sitfuse.evaluation import eligible_starts
    for env in suite:
        for cls in OBJECT_CLASSES:
            pool = eligible_starts(env, cls, cfg)
            if pool:
                return env, cls, pool[0]
    raise AssertionError("suite has no eligible start at all")


def test_rollout_records_gates(small_suite, untrained_policy):
    env, cls, node = any_start(small_suite, DESK)
    actor = PolicyActor(untrained_policy)
    result = rollout(actor, env, node, cls, DESK, np.random.default_rng(1))
    assert result.gates is not None and len(result.gates) > 0
    for g in result.gates:
        assert abs(g.sum() - 1.0) < 1e-9


def test_rollout_respects_step_budget(small_suite, untrained_policy):
    env = small_suite[2]
    cfg = EvalConfig(episodes_per_task=4, max_steps=5, goal_radius=1,
                     d_min=3, d_max=12, seed=3)
    starts = draw_start_sets([env], cfg)["door"]
    actor = PolicyActor(untrained_policy)
    result = rollout(actor, env, starts[0][1], "door", cfg,
                     np.random.default_rng(2))
    assert result.steps <= 5


def test_mask_invalid_prevents_collisions(small_suite, untrained_policy):
    cfg = EvalConfig(episodes_per_task=4, max_steps=20, goal_radius=1,
                     d_min=3, d_max=12, seed=4, mask_invalid=True)
    env, cls, node = any_start(small_suite, cfg)
    actor = PolicyActor(untrained_policy)
    result = rollout(actor, env, node, cls, cfg, np.random.default_rng(3))
    for a, b in zip(result.trajectory, result.trajectory[1:]):
        assert a != b  # a collision would leave the position unchanged


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def test_oracle_evaluates_to_one(small_suite):
    report, episodes = evaluate(oracle_factory(DESK), small_suite, DESK,
                                name="oracle")
    assert report.average == 1.0
    assert all(report.per_task[c] == 1.0 for c in OBJECT_CLASSES)
    assert report.episodes == 4 * DESK.episodes_per_task
    assert len(episodes) == report.episodes


def test_evaluate_deterministic(small_suite, untrained_policy):
    r1, e1 = evaluate(untrained_policy, small_suite, DESK)
    r2, e2 = evaluate(untrained_policy, small_suite, DESK)
    assert r1.to_json() == r2.to_json()
    assert [(e.start, e.steps, e.success) for e in e1] == \
           [(e.start, e.steps, e.success) for e in e2]


def test_start_sets_frozen_per_seed(small_suite):
    a = draw_start_sets(small_suite, DESK)
    b = draw_start_sets(small_suite, DESK)
    assert a == b
    other = draw_start_sets(small_suite, EvalConfig(
        episodes_per_task=8, goal_radius=1, d_min=3, d_max=12, seed=8))
    assert a != other


def test_average_is_mean_of_task_rates(small_suite, untrained_policy):
    report, _ = evaluate(untrained_policy, small_suite, DESK)
    assert abs(report.average
               - np.mean([report.per_task[c] for c in OBJECT_CLASSES])) < 1e-12


def test_report_json_roundtrip(small_suite):
    report, _ = evaluate(random_factory(), small_suite, DESK, name="random")
    doc = report.to_json()
    back = EvalReport.from_json(doc)
    assert back.to_json() == doc


# ---------------------------------------------------------------------------
# robustness drops
# ---------------------------------------------------------------------------

def test_drop_zero_identical_to_plain_eval(small_suite, untrained_policy):
    plain, plain_eps = evaluate(untrained_policy, small_suite, DESK)
    for mode in ("renormalize", "zero_noise"):
        rows = robustness_drop(untrained_policy, small_suite, [0], mode, DESK)
        assert rows[0]["average"] == plain.average
        _, eps = evaluate(policy_factory(untrained_policy, 0, mode),
                          small_suite, DESK)
        assert [(e.start, e.steps, e.success) for e in eps] == \
               [(e.start, e.steps, e.success) for e in plain_eps]


def test_dropped_gates_renormalize(small_suite, untrained_policy):
    env, cls, node = any_start(small_suite, DESK)
    actor = PolicyActor(untrained_policy, drop_k=4, drop_mode="renormalize",
                        drop_rng=np.random.default_rng(5))
    result = rollout(actor, env, node, cls, DESK, np.random.default_rng(6))
    for g in result.gates:
        assert abs(g.sum() - 1.0) < 1e-9
        assert (g == 0.0).sum() >= 4


def test_drop_validation(small_suite, untrained_policy, bank_and_cfg):
    bank, cfg = bank_and_cfg
    n = untrained_policy.n
    with pytest.raises(ValueError):
        robustness_drop(untrained_policy, small_suite, [n], "renormalize", DESK)
    with pytest.raises(ValueError):
        robustness_drop(untrained_policy, small_suite, [1], "bogus", DESK)
    concat = FusionPolicy.create("concat", bank, cfg, seed=1)
    with pytest.raises(SchemeError):
        robustness_drop(concat, small_suite, [1], "renormalize", DESK)


def test_zero_noise_mode_applies_to_concat(small_suite, bank_and_cfg):
    bank, cfg = bank_and_cfg
    concat = FusionPolicy.create("concat", bank, cfg, seed=2)
    rows = robustness_drop(concat, small_suite, [0, 4], "zero_noise", DESK)
    assert [r["k"] for r in rows] == [0, 4]
    assert rows[0]["remaining"] == len(bank)


# ---------------------------------------------------------------------------
# gate analytics
# ---------------------------------------------------------------------------

def test_openness_band_edges():
    assert openness_band(1) == "1"
    assert openness_band(3) == "3"
    assert openness_band(4) == "4+"
    assert openness_band(9) == "4+"


def test_gate_analytics_shares_sum_to_one(small_suite, untrained_policy):
    analytics = gate_analytics(untrained_policy, small_suite, samples=200, seed=0)
    assert analytics.samples == 200
    for band, shares in analytics.bands.items():
        assert abs(sum(shares.values()) - 1.0) < 1e-9
    assert sum(analytics.band_counts.values()) == 200
    for spec_name, ext in analytics.extremes.items():
        assert len(ext["top"]) == 4 and len(ext["bottom"]) == 4
        top_w = [s["weight"] for s in ext["top"]]
        bot_w = [s["weight"] for s in ext["bottom"]]
        assert min(top_w) >= max(bot_w)


def test_gate_analytics_single_domain_bank(small_suite):
    cfg = BankConfig(n=6, noise_sigma=0.0)
    bank = [ExtractorSpec("ray_depth", "3d", 8),
            ExtractorSpec("obstacle_patch", "3d", 25),
            ExtractorSpec("openness", "3d", 1)]
    policy = FusionPolicy.create("action_fusion", bank, cfg, seed=3)
    analytics = gate_analytics(policy, small_suite, samples=100, seed=1)
    for shares in analytics.bands.values():
        assert shares["3d"] == 1.0


def test_gate_analytics_rejects_gateless(small_suite, bank_and_cfg):
    bank, cfg = bank_and_cfg
    box = FusionPolicy.create("blackbox", bank, cfg)
    with pytest.raises(SchemeError):
        sample_gate_states(box, small_suite, 10, 0)


def test_random_actor_uniformish():
    rng = np.random.default_rng(0)
    actor = RandomActor(rng)
    actions = [int(actor.act(None, None)[0]) for _ in range(900)]
    counts = np.bincount(actions, minlength=9)
    assert counts.min() > 50  # all nine actions occur


def test_success_reverified_against_instance_distances(small_suite,
                                                       untrained_policy):
    _, episodes = evaluate(untrained_policy, small_suite, DESK)
    by_id = {env.env_id: env for env in small_suite}
    for ep in episodes:
        assert ep.steps <= DESK.max_steps
        if ep.success:
            inst = instance_distances(by_id[ep.env_id].graph, ep.target)
            assert inst[ep.trajectory[-1]] <= DESK.goal_radius


def test_thread_cap_keeps_results_deterministic(small_suite, untrained_policy,
                                                monkeypatch):
    base, base_eps = evaluate(untrained_policy, small_suite, DESK)
    monkeypatch.setenv("SITFUSE_THREADS", "4")
    threaded, threaded_eps = evaluate(untrained_policy, small_suite, DESK)
    assert threaded.to_json() == base.to_json()
    assert [(e.start, e.steps, e.success) for e in threaded_eps] == \
           [(e.start, e.steps, e.success) for e in base_eps]
