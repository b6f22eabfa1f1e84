"""Dense neural-network kernel: explicit forward/backward, softmax,
cross-entropy, the ADAM optimizer, and finite-difference gradient checking.

Everything operates on float64 numpy arrays. Inputs may be a single vector
(d,) or a batch (b, d); outputs match. Gradients accumulate into each net's
grad buffers and are zeroed explicitly between batches.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


def worker_count() -> int:
    """Worker cap for parallel sections, from SITFUSE_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("SITFUSE_THREADS", "1")))
    except ValueError:
        return 1

ACTIVATIONS = ("relu", "identity")


class DenseNet:
    """Fully connected layers with relu/identity activations.

    Weights start Glorot-uniform (+-sqrt(6/(fan_in+fan_out))), biases zero,
    drawn from a dedicated generator so construction is seed-deterministic.
    """

    def __init__(self, sizes: Sequence[int], activations: Sequence[str],
                 seed: int = 0):
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        for act in activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        rng = np.random.default_rng(seed)
        self.sizes = tuple(int(s) for s in sizes)
        self.activations = tuple(activations)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.grad_weights = [np.zeros_like(w) for w in self.weights]
        self.grad_biases = [np.zeros_like(b) for b in self.biases]

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def gradients(self) -> list[np.ndarray]:
        out = []
        for gw, gb in zip(self.grad_weights, self.grad_biases):
            out.extend((gw, gb))
        return out

    def zero_grad(self) -> None:
        for g in self.grad_weights:
            g[...] = 0.0
        for g in self.grad_biases:
            g[...] = 0.0

    def forward(self, x: np.ndarray, want_cache: bool = False):
        """Forward pass; with want_cache the per-layer inputs and
        pre-activations needed by backward are returned too."""
        squeeze = x.ndim == 1
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if h.shape[1] != self.in_dim:
            raise ValueError(f"input dim {h.shape[1]} != {self.in_dim}")
        inputs, preacts = [], []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            inputs.append(h)
            z = h @ w + b
            preacts.append(z)
            h = np.maximum(z, 0.0) if act == "relu" else z
        out = h[0] if squeeze else h
        if not want_cache:
            return out
        return out, (inputs, preacts, squeeze)

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient w.r.t. input."""
        inputs, preacts, squeeze = cache
        g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
        for i in reversed(range(len(self.weights))):
            if self.activations[i] == "relu":
                g = g * (preacts[i] > 0)
            self.grad_weights[i] += inputs[i].T @ g
            self.grad_biases[i] += g.sum(axis=0)
            g = g @ self.weights[i].T
        return g[0] if squeeze else g


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis; shift-invariant by construction."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Jacobian-vector product of softmax: dL/dlogits from dL/dprobs."""
    inner = (grad_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def cross_entropy(probs: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of the labels under `probs`.

    probs: (b, k) or (k,) distributions; labels: int or (b,) ints.
    Returns (loss, dloss/dprobs). Probabilities are clamped at 1e-12 before
    the log; a clamped entry gets zero gradient.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    b = p.shape[0]
    picked = p[np.arange(b), y]
    clamped = np.maximum(picked, 1e-12)
    loss = float(-np.log(clamped).mean())
    grad = np.zeros_like(p)
    live = picked >= 1e-12
    grad[np.arange(b)[live], y[live]] = -1.0 / (clamped[live] * b)
    if np.asarray(probs).ndim == 1:
        grad = grad[0]
    return loss, grad


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray, np.ndarray]:
    """Fused softmax + cross-entropy; returns (loss, dloss/dlogits, probs)."""
    p = softmax(logits)
    p2 = np.atleast_2d(p)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    b = p2.shape[0]
    loss = float(-np.log(np.maximum(p2[np.arange(b), y], 1e-12)).mean())
    grad = p2.copy()
    grad[np.arange(b), y] -= 1.0
    grad /= b
    if np.asarray(logits).ndim == 1:
        grad = grad[0]
    return loss, grad, p


@dataclass
class AdamState:
    """First/second-moment accumulators matching a parameter list."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    base_lr: float = 1e-3

    @classmethod
    def create(cls, params: list[np.ndarray], base_lr: float = 1e-3,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls([np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params],
                   0, beta1, beta2, eps, base_lr)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray],
              state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected ADAM update, in place."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter/gradient/state lengths differ")
    if lr is None:
        lr = state.base_lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError("parameter and gradient shapes differ")
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def grad_check(loss_and_grads: Callable[[], tuple[float, list[np.ndarray]]],
               params: list[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    `loss_and_grads` must recompute the loss and a gradient list matching
    `params` at the parameters' current values.
    """
    _, analytic = loss_and_grads()
    analytic = [g.copy() for g in analytic]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat_p = p.ravel()
        flat_g = g.ravel()
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            up, _ = loss_and_grads()
            flat_p[i] = orig - h
            down, _ = loss_and_grads()
            flat_p[i] = orig
            fd = (up - down) / (2 * h)
            denom = max(abs(fd) + abs(flat_g[i]), 1e-5)
            worst = max(worst, abs(fd - flat_g[i]) / denom)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + little-endian float64 parameter blob
# ---------------------------------------------------------------------------

def net_manifest(net: DenseNet) -> dict:
    return {"sizes": list(net.sizes), "activations": list(net.activations),
            "param_count": int(sum(p.size for p in net.parameters()))}


def net_from_manifest(doc: dict) -> DenseNet:
    net = DenseNet(doc["sizes"], doc["activations"], seed=0)
    return net


def save_checkpoint(stem: str | Path, manifest: dict,
                    nets: dict[str, DenseNet]) -> None:
    """Write <stem>.json and <stem>.bin; net order in the manifest fixes the
    blob layout."""
    stem = Path(stem)
    blob = []
    net_docs = []
    for name, net in nets.items():
        doc = net_manifest(net)
        doc["name"] = name
        net_docs.append(doc)
        for p in net.parameters():
            blob.append(np.ascontiguousarray(p, dtype="<f8"))
    doc = dict(manifest)
    doc["format"] = "sitfuse-ckpt-v1"
    doc["nets"] = net_docs
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    stem.with_suffix(".bin").write_bytes(b"".join(a.tobytes() for a in blob))


def load_checkpoint(stem: str | Path) -> tuple[dict, dict[str, DenseNet]]:
    stem = Path(stem)
    doc = json.loads(stem.with_suffix(".json").read_text())
    raw = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    nets: dict[str, DenseNet] = {}
    offset = 0
    for net_doc in doc["nets"]:
        net = net_from_manifest(net_doc)
        for p in net.parameters():
            chunk = raw[offset:offset + p.size]
            if chunk.size != p.size:
                raise ValueError("parameter blob shorter than manifest claims")
            p[...] = chunk.reshape(p.shape)
            offset += p.size
        nets[net_doc["name"]] = net
    if offset != raw.size:
        raise ValueError("parameter blob longer than manifest claims")
    return doc, nets
