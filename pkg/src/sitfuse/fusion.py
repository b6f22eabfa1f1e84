"""Policy family over a representation bank.

Schemes:
- blackbox: one dense net on the raw local observation.
- concat: one head on the unweighted concatenation of all representations.
- feature_fusion: gate scales each representation block, shared head decides.
- action_fusion: per-representation action predictors whose distributions
  are mixed by the gate weights.

Plus ungated decision rules over the action-fusion branches: majority vote,
uniform mixing, and top-k restricted voting. Candidates are combined as
probability distributions, post-softmax.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .gridworld import NUM_ACTIONS, Action
from .numcore import DenseNet, load_checkpoint, save_checkpoint, softmax
from .percept import BankConfig, ExtractorSpec, RepresentationSet

SCHEMES = ("blackbox", "concat", "feature_fusion", "action_fusion")
GATED_SCHEMES = ("feature_fusion", "action_fusion")
GATE_INPUTS = ("concat", "raw_only")


class SchemeError(ValueError):
    """An operation was called on a scheme that does not support it."""


def seed_seq(*parts) -> np.random.SeedSequence:
    """Stable SeedSequence from mixed int/str parts."""
    ints = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return np.random.SeedSequence(ints)


@dataclass
class GateOutput:
    scores: np.ndarray   # pre-softmax, shape (n,) or (b, n)
    weights: np.ndarray  # softmax of scores


@dataclass(eq=False)
class FusionPolicy:
    scheme: str
    bank: list[ExtractorSpec]
    bank_cfg: BankConfig
    gate_input: str
    lam_lbl: float
    lam_aff: float
    seed: int
    branches: list[DenseNet] | None = None
    gate_net: DenseNet | None = None
    head: DenseNet | None = None
    box: DenseNet | None = None

    @classmethod
    def create(cls, scheme: str, bank: list[ExtractorSpec], bank_cfg: BankConfig,
               seed: int = 0, lam_lbl: float = 0.0, lam_aff: float = 0.0,
               gate_input: str = "concat", hidden_branch: int = 32,
               hidden_gate: int = 64, hidden_head: int = 64,
               hidden_box: tuple[int, ...] = (128, 64)) -> "FusionPolicy":
        if scheme not in SCHEMES:
            raise SchemeError(f"unknown scheme {scheme!r}")
        if gate_input not in GATE_INPUTS:
            raise ValueError(f"unknown gate input mode {gate_input!r}")
        if scheme not in GATED_SCHEMES and (lam_lbl != 0.0 or lam_aff != 0.0):
            raise SchemeError(
                f"scheme {scheme!r} has no gate; regularizer weights must be 0")
        policy = cls(scheme, list(bank), bank_cfg, gate_input,
                     float(lam_lbl), float(lam_aff), int(seed))
        n = len(bank)
        dims = [s.dim for s in bank]
        total = sum(dims)
        raw = bank_cfg.raw_dim
        gate_dim = total + raw if gate_input == "concat" else raw
        if scheme == "action_fusion":
            policy.branches = [
                DenseNet([d, hidden_branch, NUM_ACTIONS], ["relu", "identity"],
                         seed=seed_seq(seed, "branch", i))
                for i, d in enumerate(dims)
            ]
            policy.gate_net = DenseNet([gate_dim, hidden_gate, n],
                                       ["relu", "identity"],
                                       seed=seed_seq(seed, "gate"))
        elif scheme == "feature_fusion":
            policy.gate_net = DenseNet([gate_dim, hidden_gate, n],
                                       ["relu", "identity"],
                                       seed=seed_seq(seed, "gate"))
            policy.head = DenseNet([total, hidden_head, NUM_ACTIONS],
                                   ["relu", "identity"], seed=seed_seq(seed, "head"))
        elif scheme == "concat":
            policy.head = DenseNet([total, hidden_head, NUM_ACTIONS],
                                   ["relu", "identity"], seed=seed_seq(seed, "head"))
        else:  # blackbox
            sizes = [raw, *hidden_box, NUM_ACTIONS]
            acts = ["relu"] * len(hidden_box) + ["identity"]
            policy.box = DenseNet(sizes, acts, seed=seed_seq(seed, "box"))
        return policy

    @property
    def n(self) -> int:
        return len(self.bank)

    def nets(self) -> dict[str, DenseNet]:
        out: dict[str, DenseNet] = {}
        if self.branches is not None:
            for i, net in enumerate(self.branches):
                out[f"branch_{i:02d}"] = net
        if self.gate_net is not None:
            out["gate"] = self.gate_net
        if self.head is not None:
            out["head"] = self.head
        if self.box is not None:
            out["box"] = self.box
        return out

    def parameters(self) -> list[np.ndarray]:
        return [p for net in self.nets().values() for p in net.parameters()]

    def gradients(self) -> list[np.ndarray]:
        return [g for net in self.nets().values() for g in net.gradients()]

    def zero_grad(self) -> None:
        for net in self.nets().values():
            net.zero_grad()


def gate_input_vector(policy: FusionPolicy, reps: RepresentationSet) -> np.ndarray:
    if policy.gate_input == "raw_only":
        return reps.raw_obs
    return np.concatenate([*reps.vectors, reps.raw_obs])


def gate(policy: FusionPolicy, reps: RepresentationSet) -> GateOutput:
    """Gate scores and softmax weights for the given observation."""
    if policy.scheme not in GATED_SCHEMES:
        raise SchemeError(f"scheme {policy.scheme!r} has no gate")
    scores = policy.gate_net.forward(gate_input_vector(policy, reps))
    return GateOutput(scores, softmax(scores))


def branch_predict(policy: FusionPolicy, i: int, rep_i: np.ndarray) -> np.ndarray:
    """Action distribution of branch i from its representation alone."""
    if policy.scheme != "action_fusion":
        raise SchemeError("branches exist only for action_fusion")
    if not 0 <= i < policy.n:
        raise IndexError(f"branch index {i} out of range")
    return softmax(policy.branches[i].forward(rep_i))


def fuse_actions(weights: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Convex combination of candidate distributions: sum_i g_i * c_i."""
    w = np.asarray(weights, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    if w.shape[0] != c.shape[0]:
        raise ValueError("gate length and candidate count differ")
    return w @ c


def fuse_features(weights: np.ndarray, reps: RepresentationSet) -> np.ndarray:
    """Concatenation of the per-representation blocks scaled by the gate."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape[0] != len(reps.vectors):
        raise ValueError("gate length and representation count differ")
    return np.concatenate([w[i] * v for i, v in enumerate(reps.vectors)])


def concat_predict(policy: FusionPolicy, reps: RepresentationSet) -> np.ndarray:
    if policy.scheme != "concat":
        raise SchemeError("concat_predict needs scheme 'concat'")
    return softmax(policy.head.forward(np.concatenate(reps.vectors)))


def blackbox_predict(policy: FusionPolicy, raw_obs: np.ndarray) -> np.ndarray:
    if policy.scheme != "blackbox":
        raise SchemeError("blackbox_predict needs scheme 'blackbox'")
    return softmax(policy.box.forward(raw_obs))


def _renormalized_weights(weights: np.ndarray, dropped) -> np.ndarray:
    out = weights.copy()
    out[list(dropped)] = 0.0
    total = out.sum()
    if total <= 0.0:
        # all surviving mass vanished numerically; fall back to uniform survivors
        keep = [i for i in range(len(out)) if i not in set(dropped)]
        out[keep] = 1.0 / len(keep)
        return out
    return out / total


def action_distribution(policy: FusionPolicy, reps: RepresentationSet,
                        renorm_drop=None) -> tuple[np.ndarray, np.ndarray | None]:
    """The scheme's 9-way action distribution plus effective gate weights.

    renorm_drop: indices whose gate weight is zeroed, survivors renormalized
    (feature_fusion additionally zeroes those representation blocks).
    """
    if renorm_drop is not None and policy.scheme not in GATED_SCHEMES:
        raise SchemeError("gate renormalization needs a gated scheme")
    if policy.scheme == "blackbox":
        return blackbox_predict(policy, reps.raw_obs), None
    if policy.scheme == "concat":
        return concat_predict(policy, reps), None
    g = gate(policy, reps).weights
    if renorm_drop is not None:
        g = _renormalized_weights(g, renorm_drop)
    if policy.scheme == "action_fusion":
        cands = np.stack([
            branch_predict(policy, i, reps.vectors[i]) if g[i] > 0.0
            else np.full(NUM_ACTIONS, 1.0 / NUM_ACTIONS)
            for i in range(policy.n)
        ])
        return fuse_actions(g, cands), g
    fused = fuse_features(g, reps)
    return softmax(policy.head.forward(fused)), g


def majority_vote(candidates: np.ndarray) -> Action:
    """Plurality over per-candidate argmax actions; ties break by the
    higher summed probability, then by fixed action order."""
    c = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if c.shape[0] < 1:
        raise ValueError("need at least one candidate")
    votes = c.argmax(axis=1)
    counts = np.bincount(votes, minlength=c.shape[1])
    tied = np.flatnonzero(counts == counts.max())
    if len(tied) == 1:
        return Action(int(tied[0]))
    sums = c[:, tied].sum(axis=0)
    return Action(int(tied[int(np.argmax(sums))]))


def uniform_mix(candidates: np.ndarray) -> np.ndarray:
    """Equal-weight mixture of the candidate distributions."""
    return np.asarray(candidates, dtype=np.float64).mean(axis=0)


def top_k_vote(candidates: np.ndarray, branch_rank, k: int) -> Action:
    """Majority vote restricted to the k best-ranked branches."""
    c = np.asarray(candidates, dtype=np.float64)
    if branch_rank is None:
        raise ValueError("top_k_vote needs a branch ranking")
    rank = list(branch_rank)
    if sorted(rank) != list(range(c.shape[0])):
        raise ValueError("branch_rank must be a permutation of branch indices")
    if not 1 <= k <= c.shape[0]:
        raise ValueError(f"k must be in [1, {c.shape[0]}]")
    return majority_vote(c[rank[:k]])


def act(policy: FusionPolicy, reps: RepresentationSet,
        renorm_drop=None) -> Action:
    """Greedy action: argmax of the scheme's distribution (first on ties)."""
    probs, _ = action_distribution(policy, reps, renorm_drop)
    return Action(int(np.argmax(probs)))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_policy(policy: FusionPolicy, stem, extra: dict | None = None) -> None:
    manifest = {
        "scheme": policy.scheme,
        "gate_input": policy.gate_input,
        "lam_lbl": policy.lam_lbl,
        "lam_aff": policy.lam_aff,
        "seed": policy.seed,
        "bank": [{"name": s.name, "domain": s.domain, "dim": s.dim,
                  "noise_sigma": s.noise_sigma, "clone_of": s.clone_of}
                 for s in policy.bank],
        "bank_cfg": {
            "n": policy.bank_cfg.n,
            "noise_sigma": policy.bank_cfg.noise_sigma,
            "window": policy.bank_cfg.window,
            "ray_cap": policy.bank_cfg.ray_cap,
            "vis_radius": policy.bank_cfg.vis_radius,
            "proj_dim": policy.bank_cfg.proj_dim,
            "noise_overrides": dict(policy.bank_cfg.noise_overrides),
        },
    }
    if extra:
        manifest.update(extra)
    save_checkpoint(stem, manifest, policy.nets())


def load_policy(stem) -> tuple[FusionPolicy, dict]:
    doc, nets = load_checkpoint(stem)
    bank = [ExtractorSpec(**s) for s in doc["bank"]]
    bank_cfg = BankConfig(**doc["bank_cfg"])
    policy = FusionPolicy(doc["scheme"], bank, bank_cfg, doc["gate_input"],
                          doc["lam_lbl"], doc["lam_aff"], doc["seed"])
    try:
        if policy.scheme == "action_fusion":
            policy.branches = [nets[f"branch_{i:02d}"] for i in range(len(bank))]
            policy.gate_net = nets["gate"]
        elif policy.scheme == "feature_fusion":
            policy.gate_net = nets["gate"]
            policy.head = nets["head"]
        elif policy.scheme == "concat":
            policy.head = nets["head"]
        else:
            policy.box = nets["box"]
    except KeyError as exc:
        raise ValueError(f"checkpoint is missing net {exc} for {policy.scheme}")
    return policy, doc
