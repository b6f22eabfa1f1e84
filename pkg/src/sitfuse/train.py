"""Imitation learning on shortest-path-optimal actions.

Dataset rows sample (node, target class) pairs uniformly over each
environment's reachable states; labels come from the shortest-path oracle.
One ADAM loop trains every sub-net jointly; the stop-gradient boundary in
the composite loss keeps branch learning independent of the gate.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .evaluation import BranchActor, EvalConfig, evaluate
from .fusion import FusionPolicy, save_policy, seed_seq
from .gridworld import OBJECT_CLASSES, UNREACHABLE, EnvBundle, optimal_action
from .numcore import worker_count
from .losses import AffinityMatrix, total_loss
from .numcore import AdamState, adam_step
from .percept import BankConfig, ExtractorSpec, ObservationContext, PerceptCache, extract

CURVE_COLUMNS = ("iteration", "ce_fused", "ce_branch_mean", "lbl", "affinity",
                 "total", "lr")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during optimization."""


@dataclass(frozen=True)
class TrainConfig:
    scheme: str = "action_fusion"
    iterations: int = 2000
    batch_size: int = 128
    base_lr: float = 1e-3
    decay_milestones: tuple[int, ...] = (1000, 1600)
    decay_factor: float = 0.1
    lam_lbl: float = 0.0
    lam_aff: float = 0.0
    seed: int = 0
    joint_backprop: bool = False
    lbl_variant: str = "batch_mean"
    gate_input: str = "concat"
    log_every: int = 25

    def validate(self, dataset_size: int) -> None:
        if self.iterations <= 0:
            raise ValueError("iterations must be > 0")
        if not 1 <= self.batch_size <= dataset_size:
            raise ValueError(
                f"batch size {self.batch_size} must be in [1, {dataset_size}]")
        if self.scheme in ("blackbox", "concat") and (self.lam_lbl or self.lam_aff):
            raise ValueError(
                f"scheme {self.scheme!r} has no gate; regularizers must be 0")


def lr_at(config: TrainConfig, iteration: int) -> float:
    passed = sum(1 for m in config.decay_milestones if iteration >= m)
    return config.base_lr * config.decay_factor ** passed


@dataclass(eq=False)
class ImitationDataset:
    split: str
    env_ids: list[str]                  # unique environment ids used
    row_env: np.ndarray                 # per-row index into env_ids
    nodes: np.ndarray
    targets: np.ndarray                 # per-row class index
    labels: np.ndarray                  # per-row optimal Action value
    reps: dict[str, np.ndarray]
    raw: np.ndarray
    bank: list[ExtractorSpec] = field(default_factory=list)
    bank_cfg: BankConfig = field(default_factory=BankConfig)

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    def batch(self, idx: np.ndarray):
        reps = {name: arr[idx] for name, arr in self.reps.items()}
        return reps, self.raw[idx], self.labels[idx]


def build_dataset(envs: list[EnvBundle], bank: list[ExtractorSpec],
                  bank_cfg: BankConfig, per_env: int, seed: int,
                  goal_radius: int = 3, split: str = "train") -> ImitationDataset:
    """Sample `per_env` supervised rows from each environment.

    Environments missing any object class are rejected (with a warning
    naming them); building fails only if no environment survives.
    """
    usable: list[EnvBundle] = []
    rejected: list[str] = []
    for env in envs:
        classes = {o.cls for o in env.gmap.objects}
        if classes >= set(OBJECT_CLASSES):
            usable.append(env)
        else:
            rejected.append(env.env_id)
    if rejected:
        warnings.warn(f"rejected environments missing classes: {rejected}")
    if not usable:
        raise ValueError("no environment contains all object classes")

    def rows_for(ei_env):
        ei, env = ei_env
        rng = np.random.default_rng(seed_seq(seed, "dataset", env.env_id))
        cache = PerceptCache.build(env.gmap)
        pairs = []
        for ci, cls in enumerate(OBJECT_CLASSES):
            distances = env.distances(cls, goal_radius)
            finite = np.flatnonzero(distances != UNREACHABLE)
            pairs.extend((int(n), ci) for n in finite)
        draw = rng.integers(0, len(pairs), size=per_env)
        out = []
        for pick in draw:
            node, ci = pairs[int(pick)]
            cls = OBJECT_CLASSES[ci]
            distances = env.distances(cls, goal_radius)
            label = optimal_action(env.graph, distances, node)
            ctx = ObservationContext(env.gmap, env.graph, cache, node, cls, rng)
            out.append((ei, node, ci, int(label), extract(ctx, bank, bank_cfg)))
        return out

    # per-env sampling is independent and seeded per env id, so a thread pool
    # changes nothing but wall time
    workers = worker_count()
    jobs = list(enumerate(usable))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_env_rows = list(pool.map(rows_for, jobs))
    else:
        per_env_rows = [rows_for(job) for job in jobs]

    rows_env, rows_node, rows_target, rows_label = [], [], [], []
    rep_cols: dict[str, list[np.ndarray]] = {s.name: [] for s in bank}
    raw_rows: list[np.ndarray] = []
    for env_rows in per_env_rows:
        for ei, node, ci, label, reps in env_rows:
            for spec, vec in zip(bank, reps.vectors):
                rep_cols[spec.name].append(vec)
            raw_rows.append(reps.raw_obs)
            rows_env.append(ei)
            rows_node.append(node)
            rows_target.append(ci)
            rows_label.append(label)
    return ImitationDataset(
        split, [e.env_id for e in usable], np.array(rows_env), np.array(rows_node),
        np.array(rows_target), np.array(rows_label),
        {name: np.stack(col) for name, col in rep_cols.items()},
        np.stack(raw_rows), list(bank), bank_cfg)


def verify_labels(dataset: ImitationDataset, envs: list[EnvBundle],
                  goal_radius: int = 3) -> int:
    """Recompute every label with the oracle; returns rows checked."""
    by_id = {e.env_id: e for e in envs}
    for i in range(dataset.size):
        env = by_id[dataset.env_ids[int(dataset.row_env[i])]]
        cls = OBJECT_CLASSES[int(dataset.targets[i])]
        d = env.distances(cls, goal_radius)
        want = optimal_action(env.graph, d, int(dataset.nodes[i]))
        if int(want) != int(dataset.labels[i]):
            raise AssertionError(f"row {i}: label {dataset.labels[i]} != oracle {int(want)}")
    return dataset.size


def train_policy(dataset: ImitationDataset, config: TrainConfig,
                 affinity: AffinityMatrix | None = None,
                 checkpoint_stem=None, extra_manifest: dict | None = None
                 ) -> tuple[FusionPolicy, list[dict]]:
    """Minibatch ADAM on the composite loss; deterministic given the seed."""
    config.validate(dataset.size)
    if config.lam_aff and affinity is None:
        raise ValueError("lam_aff > 0 needs an affinity matrix")
    policy = FusionPolicy.create(config.scheme, dataset.bank, dataset.bank_cfg,
                                 seed=config.seed, lam_lbl=config.lam_lbl,
                                 lam_aff=config.lam_aff,
                                 gate_input=config.gate_input)
    adam = AdamState.create(policy.parameters(), base_lr=config.base_lr)
    rng = np.random.default_rng(seed_seq(config.seed, "shuffle"))
    curve: list[dict] = []
    for it in range(config.iterations):
        idx = rng.choice(dataset.size, size=config.batch_size, replace=False)
        reps, raw, labels = dataset.batch(idx)
        out = total_loss(policy, reps, raw, labels, affinity=affinity,
                         joint=config.joint_backprop,
                         lbl_variant=config.lbl_variant)
        if not np.isfinite(out.total):
            raise TrainingDiverged(
                f"non-finite loss {out.total} at iteration {it} "
                f"(scheme={config.scheme}, seed={config.seed})")
        lr = lr_at(config, it)
        adam_step(policy.parameters(), policy.gradients(), adam, lr)
        if it % config.log_every == 0 or it == config.iterations - 1:
            curve.append({
                "iteration": it,
                "ce_fused": out.ce_fused,
                "ce_branch_mean": float(np.mean(out.ce_branches)) if out.ce_branches else 0.0,
                "lbl": out.lbl,
                "affinity": out.affinity,
                "total": out.total,
                "lr": lr,
            })
    if checkpoint_stem is not None:
        extra = {"iteration": config.iterations}
        if extra_manifest:
            extra.update(extra_manifest)
        save_policy(policy, checkpoint_stem, extra)
    return policy, curve


def rank_branches(policy: FusionPolicy, envs: list[EnvBundle],
                  cfg: EvalConfig) -> list[tuple[int, float]]:
    """Branches ordered by their solo success rate (desc, index tie-break)."""
    if policy.scheme != "action_fusion":
        raise ValueError("branch ranking needs a trained action_fusion policy")
    scores = []
    for i in range(policy.n):
        def factory(bundle, target, aux_rng, _i=i):
            return BranchActor(policy, _i)
        report, _ = evaluate(factory, envs, cfg, name=f"branch_{i}")
        scores.append((i, report.average))
    return sorted(scores, key=lambda pair: (-pair[1], pair[0]))


def curve_to_csv(curve: list[dict], path) -> None:
    lines = [",".join(CURVE_COLUMNS)]
    for row in curve:
        lines.append(",".join(repr(float(row[c])) if c != "iteration"
                              else str(int(row[c])) for c in CURVE_COLUMNS))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def make_suite(gen_params, n_train: int, n_test: int, seed: int
               ) -> tuple[list[EnvBundle], list[EnvBundle]]:
    """Deterministic train/test environment suites with disjoint ids."""
    from .gridworld import generate_environment

    def build(split: str, count: int, offset: int) -> list[EnvBundle]:
        out = []
        for i in range(count):
            env_seed = int(np.random.SeedSequence(
                [seed, offset + i]).generate_state(1)[0])
            gmap = generate_environment(env_seed, gen_params)
            out.append(EnvBundle.create(f"{split}_{i:03d}", gmap))
        return out

    return build("train", n_train, 0), build("test", n_test, 10_000)
