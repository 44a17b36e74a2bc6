"""The hand-written differentiation kernel, checked against closed forms
and central finite differences."""

import math
import pickle

import numpy as np
import pytest

from auvnode.constraints import default_constraint_spec
from auvnode.models import BlackboxModel, GrayboxModel, GrayboxParams
from auvnode.ndiff import (
    AdamWState,
    DivergedRollout,
    Mlp,
    SpectralBounds,
    SpectralProjectionError,
    adamw_step,
    bptt_trajectory_grad,
    clip_gradients,
    mlp_forward,
    project_spectrum,
)


def test_mlp_single_layer_is_affine(rng):
    net = Mlp.init((3, 2), rng)
    x = rng.normal(size=3)
    # no hidden layer means no tanh anywhere
    assert np.allclose(net.forward(x), net.weights[0] @ x + net.biases[0], rtol=0, atol=0)


def test_mlp_two_layer_closed_form(rng):
    net = Mlp.init((2, 3, 1), rng)
    x = rng.normal(size=2)
    h = np.tanh(net.weights[0] @ x + net.biases[0])
    want = net.weights[1] @ h + net.biases[1]
    assert np.allclose(net.forward(x), want, rtol=1e-15, atol=0)


def test_mlp_forward_cached_matches_forward(rng):
    net = Mlp.init((5, 7, 7, 4), rng)
    for _ in range(10):
        x = rng.normal(size=5)
        y, acts = net.forward_cached(x)
        assert np.array_equal(y, net.forward(x))
        assert len(acts) == 3  # input plus two hidden activations


def _fd_param(f, arr, i, h=1e-6):
    flat = arr.ravel()
    old = flat[i]
    flat[i] = old + h
    up = f()
    flat[i] = old - h
    dn = f()
    flat[i] = old
    return (up - dn) / (2.0 * h)


def test_mlp_backward_matches_fd():
    rng = np.random.default_rng(7)
    net = Mlp.init((4, 8, 3), rng)
    for trial in range(5):
        x = rng.normal(size=4)
        v = rng.normal(size=3)

        def scalar():
            return float(v @ net.forward(x))

        _, acts = net.forward_cached(x)
        grads, dx = net.backward(acts, v)
        arrays = net.arrays()
        for arr, g in zip(arrays, grads):
            for i in rng.choice(arr.size, size=min(6, arr.size), replace=False):
                fd = _fd_param(scalar, arr, int(i))
                assert g.ravel()[int(i)] == pytest.approx(fd, rel=1e-6, abs=1e-9)
        for i in range(4):
            fd = _fd_param(scalar, x, i)
            assert dx[i] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_mlp_decay_mask_and_arrays(rng):
    net = Mlp.init((3, 5, 2), rng)
    assert net.decay_mask() == [True, False, True, False]
    arrs = net.arrays()
    assert arrs[0] is net.weights[0] and arrs[1] is net.biases[0]
    assert arrs[2] is net.weights[1] and arrs[3] is net.biases[1]


def test_mlp_forward_concat_helper(rng):
    net = Mlp.init((11, 6, 8), rng)
    z = rng.normal(size=8)
    u = rng.normal(size=3)
    assert np.array_equal(mlp_forward(net, z, u), net.forward(np.concatenate([z, u])))


def test_project_spectrum_clamps_and_preserves(rng):
    net = Mlp.init((4, 6, 4), rng)
    net.weights[0] *= 10.0  # push sigma_max well above 1
    bounds = SpectralBounds(0.5, 1.0)
    project_spectrum(net, bounds)
    for w in net.weights:
        s = np.linalg.svd(w, compute_uv=False)
        assert s.max() <= bounds.sigma_max + 1e-9
        assert s.min() >= bounds.sigma_min - 1e-9
    # a matrix already inside the band is not rebuilt
    before = [w.copy() for w in net.weights]
    project_spectrum(net, bounds)
    for b, w in zip(before, net.weights):
        assert np.array_equal(b, w)


def test_project_spectrum_rejects_nonfinite(rng):
    net = Mlp.init((3, 3), rng)
    net.weights[0][0, 0] = math.nan
    with pytest.raises(SpectralProjectionError):
        project_spectrum(net, SpectralBounds(0.0, 1.0))


def test_spectral_bound_implies_contraction(rng):
    """sigma_max <= 1 with tanh activations caps the Lipschitz factor."""
    net = Mlp.init((6, 16, 16, 6), rng)
    project_spectrum(net, SpectralBounds(0.5, 1.0))
    for _ in range(200):
        a = rng.normal(scale=2.0, size=6)
        b = rng.normal(scale=2.0, size=6)
        num = np.linalg.norm(net.forward(a) - net.forward(b))
        den = np.linalg.norm(a - b)
        assert num <= den * (1.0 + 1e-9)


def test_spectral_bounds_validation():
    with pytest.raises(ValueError):
        SpectralBounds(-0.1, 1.0)
    with pytest.raises(ValueError):
        SpectralBounds(0.7, 0.5)


def test_adamw_first_step_closed_form():
    p0 = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -0.1, 0.0])
    p = p0.copy()
    st = AdamWState.for_arrays([p], lr=0.01, weight_decay=0.1)
    adamw_step([p], [g], st)
    # bias correction makes m_hat = g and v_hat = g^2 on step one
    want = p0 - 0.01 * 0.1 * p0 - 0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p, want, rtol=0, atol=1e-15)
    assert st.step == 1


def test_adamw_decay_mask_skips_biases():
    w = np.array([1.0])
    b = np.array([1.0])
    st = AdamWState.for_arrays([w, b], lr=0.0, weight_decay=0.5,
                               decay_mask=[True, False])
    # lr 0 isolates the decay term... which also scales with lr, so nothing moves
    adamw_step([w, b], [np.zeros(1), np.zeros(1)], st)
    assert w[0] == 1.0 and b[0] == 1.0
    st2 = AdamWState.for_arrays([w, b], lr=0.1, weight_decay=0.5,
                                decay_mask=[True, False])
    adamw_step([w, b], [np.zeros(1), np.zeros(1)], st2)
    assert w[0] == pytest.approx(1.0 - 0.1 * 0.5)
    assert b[0] == 1.0


def test_adamw_lr_scale_per_coordinate():
    p0 = np.array([1.0, 1.0, 1.0, 1.0])
    g = np.array([1.0, 1.0, 1.0, 1.0])
    scale = np.array([1.0, 0.5, 2.0, 0.01])
    p = p0.copy()
    st = AdamWState.for_arrays([p], lr=0.01, lr_scale=[scale])
    adamw_step([p], [g], st)
    step1 = 0.01 * scale * g / (np.abs(g) + 1e-8)
    assert np.allclose(p, p0 - step1, rtol=0, atol=1e-15)


def test_adamw_validation():
    a = np.zeros(2)
    with pytest.raises(ValueError):
        AdamWState.for_arrays([a], lr=0.1, decay_mask=[True, False])
    with pytest.raises(ValueError):
        AdamWState.for_arrays([a], lr=0.1, lr_scale=[None, None])
    st = AdamWState.for_arrays([a], lr=0.1)
    with pytest.raises(ValueError):
        adamw_step([a, a], [a, a], st)


def test_clip_gradients():
    g1 = np.array([3.0, 0.0])
    g2 = np.array([0.0, 4.0])
    norm = clip_gradients([g1, g2], 10.0)
    assert norm == pytest.approx(5.0)
    assert g1[0] == 3.0 and g2[1] == 4.0  # under the cap: untouched
    norm = clip_gradients([g1, g2], 1.0)
    assert norm == pytest.approx(5.0)
    total = math.sqrt(float(g1 @ g1 + g2 @ g2))
    assert total == pytest.approx(1.0, rel=1e-12)


def _fd_bptt(model, z0, u, y, delta, spec, pen_w, arr, i, h=1e-6):
    flat = arr.ravel()
    old = flat[i]

    def loss():
        return bptt_trajectory_grad(model, z0, u, y, delta, spec, pen_w, 1e9).loss

    flat[i] = old + h
    up = loss()
    flat[i] = old - h
    dn = loss()
    flat[i] = old
    return (up - dn) / (2.0 * h)


def test_bptt_gradients_match_fd_blackbox():
    rng = np.random.default_rng(11)
    model = BlackboxModel(Mlp.init((11, 6, 8), rng))
    z0 = rng.normal(scale=0.3, size=8)
    z0[0] = 1.8  # outside the pitch box so the penalty term is active
    z0[5:] = (0.5, 0.2, -0.2)  # lagged commands well inside their boxes
    u = rng.uniform(-0.5, 0.5, size=(12, 3))
    y = rng.normal(scale=0.3, size=(13, 8))
    spec = default_constraint_spec()
    res = bptt_trajectory_grad(model, z0, u, y, 0.01, spec, 0.7, 1e9)
    assert res.penalty > 0.0
    assert res.loss == pytest.approx(res.mse + res.penalty, rel=1e-15)
    for arr, g in zip(model.trainable_arrays(), res.grads):
        for i in rng.choice(arr.size, size=min(5, arr.size), replace=False):
            fd = _fd_bptt(model, z0, u, y, 0.01, spec, 0.7, arr, int(i))
            assert g.ravel()[int(i)] == pytest.approx(fd, rel=2e-5, abs=1e-10)


def test_bptt_gradients_match_fd_graybox(truth):
    rng = np.random.default_rng(13)
    model = GrayboxModel(GrayboxParams(truth.mu * 1.3, truth.k_delay))
    z0 = np.array([0.1, 0.2, 1.0, 0.05, -0.05, 0.5, 0.1, -0.1])
    u = rng.uniform(0.0, 1.0, size=(15, 3))
    u[:, 1:] -= 0.5
    y = rng.normal(scale=0.2, size=(16, 8))
    y[:, 2] += 1.0
    spec = default_constraint_spec()
    res = bptt_trajectory_grad(model, z0, u, y, 0.01, spec, 0.0, 1e9)
    g = res.grads[0]
    for i in range(8):
        fd = _fd_bptt(model, z0, u, y, 0.01, spec, 0.0, model.graybox.mu, i)
        assert g[i] == pytest.approx(fd, rel=2e-6, abs=1e-10)


def test_bptt_loss_definition(truth):
    """Loss equals the hand-computed mean of squared errors over the
    rollout prefix (horizon state excluded)."""
    model = GrayboxModel(GrayboxParams(truth.mu, truth.k_delay))
    z0 = np.array([0.0, 0.0, 1.0, 0.0, 0.0, 0.3, 0.0, 0.0])
    n = 6
    u = np.tile(np.array([0.4, 0.1, -0.1]), (n, 1))
    y = np.zeros((n + 1, 8))
    res = bptt_trajectory_grad(model, z0, u, y, 0.01, None, 0.0, 1e9)
    z = z0.copy()
    total = 0.0
    for k in range(n):
        total += float(z @ z)  # y is zero, psi stays tiny: no wrap effect
        z = z + 0.01 * model.rhs(z, u[k])
    assert res.loss == pytest.approx(total / n, rel=1e-12)
    assert res.penalty == 0.0


def test_bptt_divergence_detection(truth):
    model = GrayboxModel(GrayboxParams(truth.mu, truth.k_delay))
    z0 = np.array([0.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    u = np.tile(np.array([1.0, 0.0, 0.0]), (50, 1))
    y = np.zeros((51, 8))
    with pytest.raises(DivergedRollout) as exc_info:
        bptt_trajectory_grad(model, z0, u, y, 0.01, None, 0.0,
                             divergence_threshold=1e-3)
    assert exc_info.value.step >= 1


def test_diverged_rollout_pickles():
    e = DivergedRollout(17, "non-finite state")
    e2 = pickle.loads(pickle.dumps(e))
    assert e2.step == 17
    assert e2.reason == "non-finite state"
    assert "step 17" in str(e2)


def test_mlp_shape_validation(rng):
    with pytest.raises(ValueError):
        Mlp((3,), [], [])
    w = [np.zeros((2, 3))]
    b = [np.zeros(3)]  # wrong bias length
    with pytest.raises(ValueError):
        Mlp((3, 2), w, b)
