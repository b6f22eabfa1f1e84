"""Rollout evaluation, robustness-to-drop experiments, and gate analytics.

Episodes succeed iff the final position is within the goal radius of a
target-class instance, whether termination came from Stop or from the step
budget. Start sets are frozen per seed and shared across every policy being
compared. Observation noise and drop subsets come from separate per-episode
streams, so a drop count of zero reproduces the plain evaluation bit for bit.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .fusion import (
    GATED_SCHEMES,
    FusionPolicy,
    SchemeError,
    action_distribution,
    branch_predict,
    gate,
    majority_vote,
    seed_seq,
    top_k_vote,
    uniform_mix,
)
from .gridworld import (
    NUM_ACTIONS,
    OBJECT_CLASSES,
    UNREACHABLE,
    Action,
    AgentState,
    EnvBundle,
    step,
)
from .gridworld import nodes_in_rooms_with_instance
from .numcore import worker_count
from .percept import (
    ObservationContext,
    PerceptCache,
    RepresentationSet,
    extract,
    openness,
)

DROP_MODES = ("renormalize", "zero_noise")
OPENNESS_BANDS = ("1", "2", "3", "4+")


@dataclass(frozen=True)
class EvalConfig:
    episodes_per_task: int = 64
    max_steps: int = 39
    goal_radius: int = 3
    d_min: int = 6
    d_max: int = 32
    seed: int = 0
    mask_invalid: bool = False

    def digest(self, env_ids) -> str:
        doc = json.dumps({"cfg": vars(self) | {}, "envs": list(env_ids)},
                         sort_keys=True, default=str)
        return hashlib.sha256(doc.encode()).hexdigest()[:12]


@dataclass
class EpisodeResult:
    env_id: str
    start: int
    target: str
    steps: int
    success: bool
    gates: list[np.ndarray] | None
    trajectory: list[int]


@dataclass
class EvalReport:
    name: str
    per_task: dict[str, float]
    average: float
    episodes: int
    config_digest: str
    seed: int

    def to_json(self) -> dict:
        return {"format": "sitfuse-report-v1", "name": self.name,
                "per_task": {k: float(v) for k, v in sorted(self.per_task.items())},
                "average": float(self.average), "episodes": self.episodes,
                "config_digest": self.config_digest, "seed": self.seed}

    @classmethod
    def from_json(cls, doc: dict) -> "EvalReport":
        return cls(doc["name"], dict(doc["per_task"]), doc["average"],
                   doc["episodes"], doc["config_digest"], doc["seed"])


# ---------------------------------------------------------------------------
# Actors
# ---------------------------------------------------------------------------

class PolicyActor:
    """Greedy fusion-policy actor with optional per-step representation drops."""

    def __init__(self, policy: FusionPolicy, drop_k: int = 0,
                 drop_mode: str | None = None,
                 drop_rng: np.random.Generator | None = None):
        if drop_k:
            if drop_mode not in DROP_MODES:
                raise ValueError(f"unknown drop mode {drop_mode!r}")
            if not 0 <= drop_k < policy.n:
                raise ValueError(f"drop count must lie in [0, {policy.n - 1}]")
            if drop_mode == "renormalize" and policy.scheme not in GATED_SCHEMES:
                raise SchemeError("renormalize drops need a gated scheme")
            if drop_rng is None:
                raise ValueError("dropping needs its own RNG stream")
        self.policy = policy
        self.bank = policy.bank
        self.bank_cfg = policy.bank_cfg
        self.needs_reps = True
        self.drop_k = drop_k
        self.drop_mode = drop_mode
        self.drop_rng = drop_rng

    def act(self, reps: RepresentationSet, state: AgentState,
            valid_mask: np.ndarray | None = None):
        renorm = None
        if self.drop_k:
            dropped = self.drop_rng.choice(self.policy.n, size=self.drop_k,
                                           replace=False)
            if self.drop_mode == "renormalize":
                renorm = set(int(i) for i in dropped)
            else:
                vectors = [v.copy() for v in reps.vectors]
                for i in dropped:
                    vectors[int(i)][...] = 0.0
                reps = RepresentationSet(reps.names, vectors, reps.raw_obs)
        probs, gates = action_distribution(self.policy, reps, renorm_drop=renorm)
        if valid_mask is not None:
            probs = np.where(valid_mask, probs, -1.0)
        return Action(int(np.argmax(probs))), gates


class OracleActor:
    """Plays the shortest-path supervision; perfect by construction."""

    needs_reps = False
    bank = None
    bank_cfg = None

    def __init__(self, bundle: EnvBundle, target: str, goal_radius: int):
        self.graph = bundle.graph
        self.distances = bundle.distances(target, goal_radius)

    def act(self, reps, state: AgentState, valid_mask=None):
        from .gridworld import optimal_action
        return optimal_action(self.graph, self.distances, state.position), None


class RandomActor:
    needs_reps = False
    bank = None
    bank_cfg = None

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def act(self, reps, state, valid_mask=None):
        return Action(int(self.rng.integers(0, NUM_ACTIONS))), None


class _BranchCandidatesActor:
    needs_reps = True

    def __init__(self, policy: FusionPolicy):
        if policy.scheme != "action_fusion":
            raise SchemeError("branch decision rules need action_fusion")
        self.policy = policy
        self.bank = policy.bank
        self.bank_cfg = policy.bank_cfg

    def candidates(self, reps: RepresentationSet) -> np.ndarray:
        return np.stack([branch_predict(self.policy, i, reps.vectors[i])
                         for i in range(self.policy.n)])


class MajorityVoteActor(_BranchCandidatesActor):
    def act(self, reps, state, valid_mask=None):
        return majority_vote(self.candidates(reps)), None


class UniformMixActor(_BranchCandidatesActor):
    def act(self, reps, state, valid_mask=None):
        return Action(int(np.argmax(uniform_mix(self.candidates(reps))))), None


class TopKActor(_BranchCandidatesActor):
    def __init__(self, policy: FusionPolicy, branch_rank, k: int):
        super().__init__(policy)
        self.rank = list(branch_rank)
        self.k = int(k)

    def act(self, reps, state, valid_mask=None):
        return top_k_vote(self.candidates(reps), self.rank, self.k), None


class BranchActor(_BranchCandidatesActor):
    """Executes a single branch's action candidate directly."""

    def __init__(self, policy: FusionPolicy, index: int):
        super().__init__(policy)
        self.index = int(index)

    def act(self, reps, state, valid_mask=None):
        probs = branch_predict(self.policy, self.index, reps.vectors[self.index])
        return Action(int(np.argmax(probs))), None


def policy_factory(policy: FusionPolicy, drop_k: int = 0,
                   drop_mode: str | None = None):
    def factory(bundle, target, aux_rng):
        return PolicyActor(policy, drop_k, drop_mode,
                           aux_rng if drop_k else None)
    return factory


def oracle_factory(cfg: EvalConfig):
    def factory(bundle, target, aux_rng):
        return OracleActor(bundle, target, cfg.goal_radius)
    return factory


def random_factory():
    def factory(bundle, target, aux_rng):
        return RandomActor(aux_rng)
    return factory


def actor_factory_for(policy_or_factory, cfg: EvalConfig):
    if isinstance(policy_or_factory, FusionPolicy):
        return policy_factory(policy_or_factory)
    return policy_or_factory


# ---------------------------------------------------------------------------
# Rollouts and evaluation
# ---------------------------------------------------------------------------

def rollout(actor, bundle: EnvBundle, start: int, target: str, cfg: EvalConfig,
            obs_rng: np.random.Generator,
            pcache: PerceptCache | None = None) -> EpisodeResult:
    """Greedy episode until Stop or the step budget; success by final position."""
    graph = bundle.graph
    distances = bundle.distances(target, cfg.goal_radius)
    if distances[start] == UNREACHABLE:
        raise ValueError(f"start node {start} cannot reach any {target!r}")
    if pcache is None and actor.needs_reps:
        pcache = PerceptCache.build(bundle.gmap)
    state = AgentState(start, 0, target)
    trajectory = [start]
    gates: list[np.ndarray] | None = [] if actor.needs_reps else None
    while not state.done and state.steps_taken < cfg.max_steps:
        reps = None
        if actor.needs_reps:
            ctx = ObservationContext(bundle.gmap, graph, pcache, state.position,
                                     target, obs_rng)
            reps = extract(ctx, actor.bank, actor.bank_cfg)
        valid_mask = None
        if cfg.mask_invalid:
            valid_mask = np.ones(NUM_ACTIONS, dtype=bool)
            valid_mask[:8] = bundle.graph.neighbours[state.position] >= 0
        action, g = actor.act(reps, state, valid_mask)
        if gates is not None and g is not None:
            gates.append(np.asarray(g, dtype=np.float64))
        state = step(graph, state, action)
        if action != Action.STOP:
            trajectory.append(state.position)
    return EpisodeResult(bundle.env_id, start, target, state.steps_taken,
                         bool(distances[state.position] == 0), gates, trajectory)


def eligible_starts(bundle: EnvBundle, target: str, cfg: EvalConfig) -> list[int]:
    distances = bundle.distances(target, cfg.goal_radius)
    return [n for n in nodes_in_rooms_with_instance(bundle.graph, bundle.gmap, target)
            if cfg.d_min <= distances[n] <= cfg.d_max]


def draw_start_sets(envs: list[EnvBundle], cfg: EvalConfig
                    ) -> dict[str, list[tuple[int, int]]]:
    """Frozen per-seed start set: (env index, node) pairs per task."""
    rng = np.random.default_rng(seed_seq(cfg.seed, "starts"))
    out: dict[str, list[tuple[int, int]]] = {}
    for cls in OBJECT_CLASSES:
        pool = [(ei, n) for ei, env in enumerate(envs)
                for n in eligible_starts(env, cls, cfg)]
        if not pool:
            raise ValueError(f"no eligible start for task {cls!r} in the given envs")
        idx = rng.choice(len(pool), size=cfg.episodes_per_task,
                         replace=len(pool) < cfg.episodes_per_task)
        out[cls] = [pool[int(i)] for i in idx]
    return out


def evaluate(policy_or_factory, envs: list[EnvBundle], cfg: EvalConfig,
             name: str = "policy") -> tuple[EvalReport, list[EpisodeResult]]:
    """Success rate per task over the frozen start set (plus the episodes)."""
    factory = actor_factory_for(policy_or_factory, cfg)
    starts = draw_start_sets(envs, cfg)
    caches: dict[str, PerceptCache] = {}

    def run_one(task_i: int, cls: str, ep_i: int, env_i: int, node: int):
        bundle = envs[env_i]
        if bundle.env_id not in caches:
            caches[bundle.env_id] = PerceptCache.build(bundle.gmap)
        obs_rng = np.random.default_rng(seed_seq(cfg.seed, "obs", task_i, ep_i))
        aux_rng = np.random.default_rng(seed_seq(cfg.seed, "aux", task_i, ep_i))
        actor = factory(bundle, cls, aux_rng)
        return rollout(actor, bundle, node, cls, cfg, obs_rng,
                       caches[bundle.env_id])

    jobs = [(ti, cls, ei, env_i, node)
            for ti, cls in enumerate(OBJECT_CLASSES)
            for ei, (env_i, node) in enumerate(starts[cls])]
    # pre-build caches serially so threads only read them
    for _, _, _, env_i, _ in jobs:
        bundle = envs[env_i]
        if bundle.env_id not in caches:
            caches[bundle.env_id] = PerceptCache.build(bundle.gmap)
    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            episodes = list(pool.map(lambda j: run_one(*j), jobs))
    else:
        episodes = [run_one(*j) for j in jobs]
    per_task = {}
    for cls in OBJECT_CLASSES:
        rates = [e.success for e in episodes if e.target == cls]
        per_task[cls] = float(np.mean(rates))
    average = float(np.mean([per_task[c] for c in OBJECT_CLASSES]))
    report = EvalReport(name, per_task, average,
                        len(episodes), cfg.digest([e.env_id for e in envs]),
                        cfg.seed)
    return report, episodes


def robustness_drop(policy: FusionPolicy, envs: list[EnvBundle], ks, mode: str,
                    cfg: EvalConfig, name: str = "policy") -> list[dict]:
    """Success-vs-k curve with k representations dropped anew at every step."""
    if mode not in DROP_MODES:
        raise ValueError(f"unknown drop mode {mode!r}")
    if isinstance(ks, int):
        ks = [ks]
    rows = []
    for k in ks:
        if not 0 <= k < policy.n:
            raise ValueError(f"drop count {k} must lie in [0, {policy.n - 1}]")
        if k and mode == "renormalize" and policy.scheme not in GATED_SCHEMES:
            raise SchemeError("renormalize drops need a gated scheme")
        report, _ = evaluate(policy_factory(policy, k, mode), envs, cfg,
                             name=f"{name}[{mode} k={k}]")
        rows.append({"mode": mode, "k": int(k), "remaining": policy.n - int(k),
                     "average": report.average,
                     **{f"task_{c}": report.per_task[c] for c in OBJECT_CLASSES}})
    return rows


# ---------------------------------------------------------------------------
# Gate analytics
# ---------------------------------------------------------------------------

@dataclass
class GateAnalytics:
    bands: dict[str, dict[str, float]]          # openness band -> domain share
    band_counts: dict[str, int]
    extremes: dict[str, dict[str, list]]        # branch -> top/bottom states
    samples: int = 0
    domain_of: dict[str, str] = field(default_factory=dict)


def openness_band(value: int) -> str:
    return str(value) if value < 4 else "4+"


def sample_gate_states(policy: FusionPolicy, envs: list[EnvBundle],
                       samples: int, seed: int):
    """Uniform (env, node, task) samples with gate weights and openness."""
    if policy.scheme not in GATED_SCHEMES:
        raise SchemeError("gate analytics needs a gated scheme")
    rng = np.random.default_rng(seed_seq(seed, "analytics"))
    caches = {env.env_id: PerceptCache.build(env.gmap) for env in envs}
    weights = np.zeros((samples, policy.n))
    opens = np.zeros(samples, dtype=np.int64)
    meta = []
    for i in range(samples):
        env = envs[int(rng.integers(0, len(envs)))]
        node = int(rng.integers(0, env.graph.num_nodes))
        cls = OBJECT_CLASSES[int(rng.integers(0, len(OBJECT_CLASSES)))]
        ctx = ObservationContext(env.gmap, env.graph, caches[env.env_id],
                                 node, cls, rng)
        reps = extract(ctx, policy.bank, policy.bank_cfg)
        weights[i] = gate(policy, reps).weights
        opens[i] = openness(caches[env.env_id], env.graph.xy(node))
        meta.append((env.env_id, node, cls))
    return weights, opens, meta


def gate_analytics(policy: FusionPolicy, envs: list[EnvBundle], samples: int,
                   seed: int, extreme_count: int = 4) -> GateAnalytics:
    """Per-openness-band share of the dominating domain, plus the states where
    each branch is most and least trusted."""
    weights, opens, meta = sample_gate_states(policy, envs, samples, seed)
    domain_of = {s.name: s.domain for s in policy.bank}
    domains = sorted(set(domain_of.values()))
    by_domain = np.zeros((samples, len(domains)))
    for j, spec in enumerate(policy.bank):
        by_domain[:, domains.index(spec.domain)] += weights[:, j]
    top_domain = by_domain.argmax(axis=1)

    bands: dict[str, dict[str, float]] = {}
    band_counts: dict[str, int] = {}
    band_labels = np.array([openness_band(int(o)) for o in opens])
    for band in OPENNESS_BANDS:
        mask = band_labels == band
        count = int(mask.sum())
        if count == 0:
            continue
        band_counts[band] = count
        bands[band] = {d: float((top_domain[mask] == i).mean())
                       for i, d in enumerate(domains)}

    extremes: dict[str, dict[str, list]] = {}
    for j, spec in enumerate(policy.bank):
        order = np.argsort(weights[:, j], kind="stable")
        pick = lambda idx: [{"env": meta[int(i)][0], "node": meta[int(i)][1],
                             "target": meta[int(i)][2],
                             "weight": float(weights[int(i), j]),
                             "openness": int(opens[int(i)])} for i in idx]
        extremes[spec.name] = {"top": pick(order[::-1][:extreme_count]),
                               "bottom": pick(order[:extreme_count])}
    return GateAnalytics(bands, band_counts, extremes, samples, domain_of)
