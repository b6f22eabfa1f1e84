import numpy as np
import pytest

from sitfuse.numcore import (
    AdamState,
    DenseNet,
    adam_step,
    cross_entropy,
    grad_check,
    load_checkpoint,
    net_manifest,
    save_checkpoint,
    softmax,
    softmax_backward,
    softmax_cross_entropy,
)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_identity_layer_passthrough():
    net = DenseNet([3, 3], ["identity"], seed=0)
    net.weights[0][...] = np.eye(3)
    net.biases[0][...] = 0.0
    x = np.array([0.5, -2.0, 3.0])
    assert np.array_equal(net.forward(x), x)


def test_relu_clamps_negatives():
    net = DenseNet([2, 2], ["relu"], seed=0)
    net.weights[0][...] = np.eye(2)
    assert np.array_equal(net.forward(np.array([-1.0, 2.0])), [0.0, 2.0])


def test_two_layer_forward_matches_hand_arithmetic():
    net = DenseNet([2, 2, 2], ["relu", "identity"], seed=0)
    net.weights[0][...] = [[1.0, -1.0], [0.5, 2.0]]
    net.biases[0][...] = [0.0, 1.0]
    net.weights[1][...] = [[2.0, 0.0], [1.0, 1.0]]
    net.biases[1][...] = [-1.0, 0.5]
    x = np.array([1.0, 2.0])
    # z1 = [1*1+2*0.5, 1*-1+2*2] + [0,1] = [2, 4]; relu -> [2, 4]
    # z2 = [2*2+4*1, 2*0+4*1] + [-1, 0.5] = [7, 4.5]
    assert np.allclose(net.forward(x), [7.0, 4.5])


def test_forward_batch_and_dim_check():
    net = DenseNet([3, 4], ["identity"], seed=1)
    out = net.forward(np.zeros((5, 3)))
    assert out.shape == (5, 4)
    with pytest.raises(ValueError):
        net.forward(np.zeros(2))


def test_init_deterministic_and_bounded():
    a = DenseNet([10, 7], ["relu"], seed=3)
    b = DenseNet([10, 7], ["relu"], seed=3)
    assert np.array_equal(a.weights[0], b.weights[0])
    bound = np.sqrt(6.0 / 17)
    assert np.abs(a.weights[0]).max() <= bound
    assert not a.biases[0].any()


# ---------------------------------------------------------------------------
# softmax / cross-entropy
# ---------------------------------------------------------------------------

def test_softmax_uniform():
    assert np.allclose(softmax(np.zeros(3)), np.full(3, 1 / 3), atol=1e-12)


def test_softmax_analytic_case():
    out = softmax(np.array([np.log(2.0), 0.0, 0.0]))
    assert np.allclose(out, [0.5, 0.25, 0.25], atol=1e-12)


def test_softmax_no_overflow_and_shift_invariance():
    out = softmax(np.array([1000.0, 0.0]))
    assert np.allclose(out, [1.0, 0.0])
    z = np.array([0.3, -1.2, 4.0])
    assert np.allclose(softmax(z), softmax(z + 123.4), atol=1e-9)
    assert abs(softmax(z).sum() - 1.0) < 1e-9


def test_cross_entropy_values():
    loss, _ = cross_entropy(np.array([0.0, 1.0, 0.0]), 1)
    assert loss == 0.0
    loss, _ = cross_entropy(np.full(9, 1 / 9), 4)
    assert abs(loss - np.log(9)) < 1e-9


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    p = softmax(rng.normal(size=9))
    label = 3
    _, grad = cross_entropy(p, label)
    h = 1e-7
    for i in range(9):
        q = p.copy()
        q[i] += h
        up, _ = cross_entropy(q, label)
        q[i] -= 2 * h
        down, _ = cross_entropy(q, label)
        fd = (up - down) / (2 * h)
        assert abs(fd - grad[i]) / max(abs(fd) + abs(grad[i]), 1e-4) < 1e-4


def test_fused_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(4, 9))
    y = np.array([0, 3, 8, 1])
    loss, grad, probs = softmax_cross_entropy(z, y)
    assert np.allclose(grad.sum(axis=1), 0.0, atol=1e-12)
    expect = probs.copy()
    expect[np.arange(4), y] -= 1
    assert np.allclose(grad, expect / 4)


# ---------------------------------------------------------------------------
# backward via finite differences
# ---------------------------------------------------------------------------

def net_loss(net, x, y):
    def fn():
        net.zero_grad()
        out, cache = net.forward(x, want_cache=True)
        loss, dlogits, _ = softmax_cross_entropy(out, y)
        net.backward(cache, dlogits)
        return loss, net.gradients()
    return fn


def test_linear_layer_grad_check():
    rng = np.random.default_rng(2)
    net = DenseNet([4, 3], ["identity"], seed=2)
    x = rng.normal(size=(6, 4))
    y = rng.integers(0, 3, size=6)
    err = grad_check(net_loss(net, x, y), net.parameters())
    assert err < 1e-6


def test_two_layer_relu_grad_check():
    rng = np.random.default_rng(3)
    net = DenseNet([5, 8, 4], ["relu", "identity"], seed=3)
    x = rng.normal(size=(7, 5))
    y = rng.integers(0, 4, size=7)
    err = grad_check(net_loss(net, x, y), net.parameters())
    assert err < 1e-5


def test_grad_check_catches_corrupted_gradient():
    rng = np.random.default_rng(4)
    net = DenseNet([3, 3], ["identity"], seed=4)
    x = rng.normal(size=(5, 3))
    y = rng.integers(0, 3, size=5)

    def corrupted():
        net.zero_grad()
        out, cache = net.forward(x, want_cache=True)
        loss, dlogits, _ = softmax_cross_entropy(out, y)
        net.backward(cache, dlogits)
        grads = net.gradients()
        grads[0] = grads[0] * 1.5 + 0.05
        return loss, grads

    assert grad_check(corrupted, net.parameters()) > 1e-2


def test_backward_input_gradient():
    rng = np.random.default_rng(5)
    net = DenseNet([4, 6, 3], ["relu", "identity"], seed=5)
    x = rng.normal(size=4)
    y = 2
    out, cache = net.forward(x, want_cache=True)
    loss, dlogits, _ = softmax_cross_entropy(out, y)
    dx = net.backward(cache, dlogits)
    h = 1e-6
    for i in range(4):
        xp = x.copy(); xp[i] += h
        xm = x.copy(); xm[i] -= h
        up, _, _ = softmax_cross_entropy(net.forward(xp), y)
        down, _, _ = softmax_cross_entropy(net.forward(xm), y)
        fd = (up - down) / (2 * h)
        assert abs(fd - dx[i]) < 1e-6 + 1e-4 * abs(fd)


def test_softmax_backward_jvp():
    rng = np.random.default_rng(6)
    z = rng.normal(size=5)
    probs = softmax(z)
    dp = rng.normal(size=5)
    dz = softmax_backward(probs, dp)
    h = 1e-7
    for i in range(5):
        zp = z.copy(); zp[i] += h
        zm = z.copy(); zm[i] -= h
        fd = (softmax(zp) - softmax(zm)) / (2 * h) @ dp
        assert abs(fd - dz[i]) < 1e-6


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------

def test_adam_first_step_magnitude():
    p = [np.array([1.0])]
    g = [np.array([0.5])]
    state = AdamState.create(p, base_lr=1e-3)
    adam_step(p, g, state)
    delta = abs(p[0][0] - 1.0)
    assert abs(delta - 1e-3) <= 1e-3 * 1e-6
    assert p[0][0] < 1.0  # moved against the gradient sign


def test_adam_zero_gradient_no_change():
    p = [np.ones((2, 2))]
    state = AdamState.create(p)
    adam_step(p, [np.zeros((2, 2))], state)
    assert np.array_equal(p[0], np.ones((2, 2)))


def test_adam_quadratic_matches_independent_recurrence():
    p = [np.array([1.0])]
    state = AdamState.create(p, base_lr=0.1)
    seen = [1.0]
    for _ in range(10):
        adam_step(p, [np.array([2.0 * p[0][0]])], state)
        seen.append(float(p[0][0]))

    # independent scalar recurrence
    x, m, v = 1.0, 0.0, 0.0
    expect = [x]
    for t in range(1, 11):
        g = 2 * x
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        expect.append(x)

    assert np.allclose(seen, expect, atol=1e-12)
    assert all(abs(seen[i + 1]) < abs(seen[i]) for i in range(10))


def test_adam_shape_mismatch_rejected():
    p = [np.zeros(3)]
    state = AdamState.create(p)
    with pytest.raises(ValueError):
        adam_step(p, [np.zeros(4)], state)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    net_a = DenseNet([4, 5, 3], ["relu", "identity"], seed=7)
    net_b = DenseNet([2, 2], ["identity"], seed=8)
    stem = tmp_path / "ckpt"
    save_checkpoint(stem, {"seed": 7, "iteration": 42}, {"a": net_a, "b": net_b})
    doc, nets = load_checkpoint(stem)
    assert doc["seed"] == 7 and doc["iteration"] == 42
    assert doc["format"] == "sitfuse-ckpt-v1"
    for orig, loaded in ((net_a, nets["a"]), (net_b, nets["b"])):
        for p, q in zip(orig.parameters(), loaded.parameters()):
            assert np.array_equal(p, q)


def test_checkpoint_bytes_deterministic(tmp_path):
    net = DenseNet([3, 3], ["identity"], seed=9)
    save_checkpoint(tmp_path / "x", {"seed": 1}, {"n": net})
    save_checkpoint(tmp_path / "y", {"seed": 1}, {"n": net})
    assert (tmp_path / "x.bin").read_bytes() == (tmp_path / "y.bin").read_bytes()
    assert (tmp_path / "x.json").read_text() == (tmp_path / "y.json").read_text()


def test_checkpoint_blob_length_validated(tmp_path):
    net = DenseNet([3, 3], ["identity"], seed=9)
    save_checkpoint(tmp_path / "x", {}, {"n": net})
    blob = (tmp_path / "x.bin").read_bytes()
    (tmp_path / "x.bin").write_bytes(blob[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")


def test_net_manifest_counts():
    net = DenseNet([4, 5, 3], ["relu", "identity"], seed=0)
    doc = net_manifest(net)
    assert doc["param_count"] == 4 * 5 + 5 + 5 * 3 + 3
