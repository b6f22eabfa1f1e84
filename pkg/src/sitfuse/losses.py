"""Training objectives and regularizers for fusion policies.

- imitation cross-entropy on fused and per-branch action distributions,
- a load-balancing penalty: the coefficient of variation of gate weights,
- a bilinear affinity penalty g^T F g discouraging co-selection of
  redundant representations,
- empirical estimation of the pairwise affinity matrix F by
  cross-representation linear predictability.

The fused cross-entropy does not back-propagate into branch nets by
default; branches learn from their own cross-entropy only. Pass
joint=True to remove that boundary.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fusion import GATED_SCHEMES, FusionPolicy, SchemeError
from .numcore import (
    cross_entropy,
    grad_check,
    softmax,
    softmax_backward,
    softmax_cross_entropy,
)
from .percept import ExtractorSpec

LBL_VARIANTS = ("batch_mean", "per_example")


@dataclass(eq=False)
class AffinityMatrix:
    """Symmetric n x n matrix with unit diagonal and entries in [0, 1]."""

    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        n = len(self.names)
        if v.shape != (n, n):
            raise ValueError(f"affinity shape {v.shape} does not match {n} names")
        if not np.all(np.isfinite(v)):
            raise ValueError("affinity entries must be finite")
        if not np.allclose(v, v.T, atol=1e-12):
            raise ValueError("affinity matrix must be symmetric")
        if not np.allclose(np.diag(v), 1.0, atol=1e-12):
            raise ValueError("affinity diagonal must be 1")
        if v.min() < -1e-12 or v.max() > 1.0 + 1e-12:
            raise ValueError("affinity entries must lie in [0, 1]")
        self.values = v

    @property
    def n(self) -> int:
        return len(self.names)

    def to_json(self) -> dict:
        return {"format": "sitfuse-affinity-v1", "names": list(self.names),
                "values": [float(x) for x in self.values.ravel()]}

    @classmethod
    def from_json(cls, doc: dict) -> "AffinityMatrix":
        names = tuple(doc["names"])
        n = len(names)
        values = np.array(doc["values"], dtype=np.float64).reshape(n, n)
        return cls(names, values)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "AffinityMatrix":
        return cls.from_json(json.loads(Path(path).read_text()))


def affinity_loss(g: np.ndarray, affinity: AffinityMatrix | np.ndarray
                  ) -> tuple[float, np.ndarray]:
    """Bilinear penalty g^T F g with gradient (F + F^T) g."""
    f = affinity.values if isinstance(affinity, AffinityMatrix) else np.asarray(affinity)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (f.shape[0],):
        raise ValueError(f"gate length {g.shape} does not match affinity {f.shape}")
    return float(g @ f @ g), (f + f.T) @ g


def load_balance_loss(gates: np.ndarray, variant: str = "batch_mean"
                      ) -> tuple[float, np.ndarray]:
    """Coefficient of variation (population std / mean) of gate weights.

    batch_mean: CV of the per-branch mean weight across the batch (default).
    per_example: mean over the batch of each row's own CV.
    Returns (loss, dloss/dgates). The gradient is the full partial, so it
    stays exact even before the simplex constraint is applied.
    """
    if variant not in LBL_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    g = np.atleast_2d(np.asarray(gates, dtype=np.float64))
    b, n = g.shape
    if b < 1:
        raise ValueError("need at least one gate vector")
    grad = np.zeros_like(g)
    if variant == "batch_mean":
        m = g.mean(axis=0)
        mu = m.mean()
        sigma = float(np.sqrt(((m - mu) ** 2).mean()))
        loss = sigma / mu
        if sigma > 1e-12:
            dm = (m - mu) / (n * sigma * mu) - sigma / (n * mu * mu)
            grad[...] = dm / b
    else:
        mu = g.mean(axis=1, keepdims=True)
        sigma = np.sqrt(((g - mu) ** 2).mean(axis=1, keepdims=True))
        loss = float((sigma / mu).mean())
        live = (sigma > 1e-12).ravel()
        grad[live] = ((g[live] - mu[live]) / (n * sigma[live] * mu[live])
                      - sigma[live] / (n * mu[live] ** 2)) / b
    return float(loss), grad if np.asarray(gates).ndim == 2 else grad[0]


def estimate_affinity(bank: list[ExtractorSpec],
                      rep_arrays: dict[str, np.ndarray],
                      env_ids, ridge: float = 1e-3) -> AffinityMatrix:
    """Pairwise affinity by ridge-regression predictability between banks.

    For each ordered pair (i, j) a linear map from representation i to j is
    fit on the sample; the raw affinity is the explained-variance ratio
    clipped to [0, 1]. The result is symmetrized and given a unit diagonal.
    Degenerate (constant) representations get zero off-diagonal affinity.
    """
    if len(set(env_ids)) < 5:
        raise ValueError("affinity estimation needs states from >= 5 environments")
    names = [s.name for s in bank]
    mats = []
    for name in names:
        if name not in rep_arrays:
            raise ValueError(f"missing representation array for {name!r}")
        mats.append(np.asarray(rep_arrays[name], dtype=np.float64))
    n_samples = mats[0].shape[0]
    centred = [m - m.mean(axis=0) for m in mats]
    total_var = [float((c ** 2).sum()) for c in centred]
    degenerate = [tv < 1e-9 for tv in total_var]
    for name, bad in zip(names, degenerate):
        if bad:
            warnings.warn(f"representation {name!r} is constant over the sample; "
                          "its affinities are set to 0")
    n = len(names)
    raw = np.zeros((n, n))
    alpha = ridge * max(n_samples, 1)
    for i in range(n):
        if degenerate[i]:
            continue
        x = centred[i]
        gram = x.T @ x + alpha * np.eye(x.shape[1])
        solve = np.linalg.solve
        for j in range(n):
            if i == j or degenerate[j]:
                continue
            y = centred[j]
            w = solve(gram, x.T @ y)
            resid = y - x @ w
            raw[i, j] = min(max(1.0 - float((resid ** 2).sum()) / total_var[j], 0.0), 1.0)
    values = (raw + raw.T) / 2.0
    np.fill_diagonal(values, 1.0)
    return AffinityMatrix(tuple(names), values)


@dataclass
class LossBreakdown:
    """total = ce_fused + sum(ce_branches) + lam_lbl*lbl + lam_aff*affinity."""

    ce_fused: float
    ce_branches: list[float] = field(default_factory=list)
    lbl: float = 0.0
    affinity: float = 0.0
    lam_lbl: float = 0.0
    lam_aff: float = 0.0

    @property
    def total(self) -> float:
        return (self.ce_fused + sum(self.ce_branches)
                + self.lam_lbl * self.lbl + self.lam_aff * self.affinity)


def _gate_obs_matrix(policy: FusionPolicy, rep_mats: list[np.ndarray],
                     raw: np.ndarray) -> np.ndarray:
    if policy.gate_input == "raw_only":
        return raw
    return np.concatenate([*rep_mats, raw], axis=1)


def total_loss(policy: FusionPolicy, rep_arrays: dict[str, np.ndarray],
               raw: np.ndarray, labels: np.ndarray,
               affinity: AffinityMatrix | None = None,
               lam_lbl: float | None = None, lam_aff: float | None = None,
               joint: bool = False,
               lbl_variant: str = "batch_mean") -> LossBreakdown:
    """Composite imitation loss; gradients accumulate into the policy's nets.

    Branch cross-entropies update only their own branch. The fused
    cross-entropy and both regularizers update only the gate (action_fusion,
    unless joint=True) or the gate and head (feature_fusion).
    """
    lam_lbl = policy.lam_lbl if lam_lbl is None else float(lam_lbl)
    lam_aff = policy.lam_aff if lam_aff is None else float(lam_aff)
    if policy.scheme not in GATED_SCHEMES and (lam_lbl != 0.0 or lam_aff != 0.0):
        raise SchemeError(
            f"scheme {policy.scheme!r} has no gate; regularizer weights must be 0")
    if lam_aff != 0.0 and affinity is None:
        raise ValueError("lam_aff > 0 needs an affinity matrix")
    if affinity is not None and tuple(affinity.names) != tuple(s.name for s in policy.bank):
        raise ValueError("affinity names do not match the policy bank")

    labels = np.asarray(labels, dtype=np.int64)
    b = labels.shape[0]
    if b < 1:
        raise ValueError("empty batch")
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    policy.zero_grad()

    if policy.scheme == "blackbox":
        logits, cache = policy.box.forward(raw, want_cache=True)
        ce, dlogits, _ = softmax_cross_entropy(logits, labels)
        policy.box.backward(cache, dlogits)
        return LossBreakdown(ce)

    rep_mats = [np.atleast_2d(np.asarray(rep_arrays[s.name], dtype=np.float64))
                for s in policy.bank]

    if policy.scheme == "concat":
        logits, cache = policy.head.forward(np.concatenate(rep_mats, axis=1),
                                            want_cache=True)
        ce, dlogits, _ = softmax_cross_entropy(logits, labels)
        policy.head.backward(cache, dlogits)
        return LossBreakdown(ce)

    obs = _gate_obs_matrix(policy, rep_mats, raw)
    scores, gate_cache = policy.gate_net.forward(obs, want_cache=True)
    gates = softmax(scores)

    d_gates = np.zeros_like(gates)
    lbl_val = 0.0
    aff_val = 0.0
    if lam_lbl != 0.0:
        lbl_val, d_lbl = load_balance_loss(gates, lbl_variant)
        d_gates += lam_lbl * d_lbl
    if lam_aff != 0.0:
        f = affinity.values
        aff_val = float(np.einsum("bi,ij,bj->", gates, f, gates) / b)
        d_gates += lam_aff * (gates @ (f + f.T)) / b

    if policy.scheme == "action_fusion":
        branch_probs = []
        branch_caches = []
        ce_branches = []
        for net, mat in zip(policy.branches, rep_mats):
            logits, cache = net.forward(mat, want_cache=True)
            ce_i, dlogits_i, probs_i = softmax_cross_entropy(logits, labels)
            net.backward(cache, dlogits_i)
            branch_probs.append(np.atleast_2d(probs_i))
            branch_caches.append(cache)
            ce_branches.append(ce_i)
        stacked = np.stack(branch_probs, axis=1)          # (b, n, 9)
        fused = np.einsum("bn,bna->ba", gates, stacked)
        ce_fused, d_fused = cross_entropy(fused, labels)
        d_gates += np.einsum("ba,bna->bn", d_fused, stacked)
        if joint:
            for i, (net, cache) in enumerate(zip(policy.branches, branch_caches)):
                d_probs_i = gates[:, i:i + 1] * d_fused
                d_logits_i = softmax_backward(stacked[:, i, :], d_probs_i)
                net.backward(cache, d_logits_i)
        policy.gate_net.backward(gate_cache, softmax_backward(gates, d_gates))
        return LossBreakdown(ce_fused, ce_branches, lbl_val, aff_val,
                             lam_lbl, lam_aff)

    # feature_fusion: gate-scaled blocks through the shared head
    dims = [s.dim for s in policy.bank]
    fused_vec = np.concatenate(
        [gates[:, i:i + 1] * rep_mats[i] for i in range(policy.n)], axis=1)
    logits, head_cache = policy.head.forward(fused_vec, want_cache=True)
    ce_fused, dlogits, _ = softmax_cross_entropy(logits, labels)
    d_fused_vec = policy.head.backward(head_cache, dlogits)
    offset = 0
    for i, d in enumerate(dims):
        block = d_fused_vec[:, offset:offset + d]
        d_gates[:, i] += (block * rep_mats[i]).sum(axis=1)
        offset += d
    policy.gate_net.backward(gate_cache, softmax_backward(gates, d_gates))
    return LossBreakdown(ce_fused, [], lbl_val, aff_val, lam_lbl, lam_aff)


def policy_grad_check(policy: FusionPolicy, rep_arrays: dict[str, np.ndarray],
                      raw: np.ndarray, labels: np.ndarray,
                      affinity: AffinityMatrix | None = None,
                      joint: bool = False, lbl_variant: str = "batch_mean",
                      h: float = 1e-5) -> float:
    """Finite-difference check of total_loss's gradients.

    With the detached action_fusion boundary the composite loss is not one
    differentiable function, so each parameter block is checked against the
    objective it actually trains on: branches against the sum of their own
    cross-entropies, the gate against the full total (whose branch terms are
    constant in the gate parameters). All other configurations check every
    parameter against the total directly.
    """
    kwargs = dict(affinity=affinity, joint=joint, lbl_variant=lbl_variant)
    if policy.scheme == "action_fusion" and not joint:
        def branch_fn():
            out = total_loss(policy, rep_arrays, raw, labels, **kwargs)
            grads = [g for net in policy.branches for g in net.gradients()]
            return sum(out.ce_branches), grads

        branch_params = [p for net in policy.branches for p in net.parameters()]
        worst = grad_check(branch_fn, branch_params, h)

        def gate_fn():
            out = total_loss(policy, rep_arrays, raw, labels, **kwargs)
            return out.total, policy.gate_net.gradients()

        return max(worst, grad_check(gate_fn, policy.gate_net.parameters(), h))

    def fn():
        out = total_loss(policy, rep_arrays, raw, labels, **kwargs)
        return out.total, policy.gradients()

    return grad_check(fn, policy.parameters(), h)
