import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parc import autodiff as ad
from parc import fdops
from parc.errors import ShapeError, ValidationError
from parc.model import IntegratorSpec, psi_step


def naive_conv(x, w, b):
    """Nested-loop cross-correlation with edge replication."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((n, o, h, wd))
    for bn in range(n):
        for oc in range(o):
            for i in range(h):
                for j in range(wd):
                    acc = b[oc]
                    for ic in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                ii = min(max(i + a - ph, 0), h - 1)
                                jj = min(max(j + bb - pw, 0), wd - 1)
                                acc += w[oc, ic, a, bb] * x[bn, ic, ii, jj]
                    out[bn, oc, i, j] = acc
    return out


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 1, 5, 6))
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(np.ones((1, 1, 1, 1))), ad.Tensor(np.zeros(1)))
    assert np.array_equal(out.value, x)


def test_conv_box_filter_keeps_constants():
    x = np.full((1, 1, 6, 6), 2.5)
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(np.full((1, 1, 3, 3), 1 / 9)), ad.Tensor(np.zeros(1)))
    assert np.allclose(out.value, 2.5, atol=1e-14, rtol=0)


def test_conv_matches_nested_loop_reference():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b))
    assert np.max(np.abs(out.value - naive_conv(x, w, b))) <= 1e-12


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_preserves_shape_for_odd_kernels(k):
    x = ad.Tensor(np.zeros((1, 2, 7, 9)))
    out = ad.conv2d(x, ad.Tensor(np.zeros((4, 2, k, k))), ad.Tensor(np.zeros(4)))
    assert out.shape == (1, 4, 7, 9)


def test_conv_layer_validation():
    with pytest.raises(ValidationError):
        ad.ConvLayer(np.zeros((1, 1, 2, 2)), np.zeros(1))
    with pytest.raises(ShapeError):
        ad.ConvLayer(np.zeros((2, 1, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        ad.conv2d(ad.Tensor(np.zeros((1, 3, 5, 5))), ad.Tensor(np.zeros((1, 2, 3, 3))))


def test_activations():
    assert ad.tanh(ad.Tensor(0.0)).value == 0.0
    assert ad.relu(ad.Tensor(-1.0)).value == 0.0
    assert ad.relu(ad.Tensor(2.0)).value == 2.0
    x = np.random.default_rng(2).normal(size=20)
    p = ad.parameter(x, "x")
    g = ad.backward(ad.total(ad.tanh(p)))["x"]
    assert np.max(np.abs(g - (1 - np.tanh(x) ** 2))) <= 1e-12


def test_backward_simple_losses():
    p = np.random.default_rng(3).normal(size=(3, 4))
    assert np.all(ad.backward(ad.total(ad.parameter(p, "p")))["p"] == 1.0)
    t = ad.parameter(p, "p")
    g = ad.backward(ad.scale(ad.total(t * t), 0.5))["p"]
    assert np.array_equal(g, p)


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        ad.backward(ad.parameter(np.zeros(3), "p"))


def test_backward_leaves_parameters_untouched():
    p = np.arange(4.0)
    t = ad.parameter(p, "p")
    ad.backward(ad.total(t * t))
    assert np.array_equal(t.value, np.arange(4.0))


def _two_layer_net(rng):
    params = {
        "w1": rng.normal(size=(3, 2, 3, 3)) * 0.4, "b1": rng.normal(size=3) * 0.1,
        "w2": rng.normal(size=(1, 3, 3, 3)) * 0.4, "b2": rng.normal(size=1) * 0.1,
    }
    x = ad.Tensor(rng.normal(size=(1, 2, 5, 5)))
    target = rng.normal(size=(1, 1, 5, 5))

    def forward(t):
        h = ad.tanh(ad.conv2d(x, t["w1"], t["b1"]))
        y = ad.conv2d(h, t["w2"], t["b2"])
        return ad.l1_mean(y - ad.Tensor(target))
    return forward, params


def test_grad_check_conv_tanh_stack():
    forward, params = _two_layer_net(np.random.default_rng(4))
    rep = ad.grad_check(forward, params)
    assert rep.passed, rep.lines()


def test_grad_check_linear_model_is_exact():
    rng = np.random.default_rng(5)
    a = rng.normal(size=6)
    # central differences are exact on linear maps for any h; a larger h limits round-off
    rep = ad.grad_check(lambda t: ad.total(t["w"] * ad.Tensor(a)), {"w": rng.normal(size=6)},
                        tolerance=1e-10, h=1e-2)
    assert rep.passed, rep.lines()


def test_grad_check_flags_a_wrong_adjoint():
    def bad_square(t):
        # forward t^2 with a backward that is off by 0.1%
        return ad._make(t.value ** 2, (t,), lambda g: (g * 2.002 * t.value,))
    rng = np.random.default_rng(12)
    rep = ad.grad_check(lambda t: ad.total(bad_square(t["w"])), {"w": rng.normal(size=5)})
    assert not rep.passed and rep.max_error == pytest.approx(1e-3, rel=0.01)


@pytest.mark.parametrize("scheme", ["heun", "rk4"])
def test_grad_check_through_integrator_step(scheme):
    rng = np.random.default_rng(6)
    dx = 0.2
    u0 = ad.Tensor(rng.normal(size=(1, 2, 6, 6)) * 0.5)
    target = rng.normal(size=(1, 2, 6, 6)) * 0.1
    params = {"w": rng.normal(size=(2, 2, 3, 3)) * 0.3, "b": rng.normal(size=2) * 0.1,
              "k": np.array([0.3])}
    spec = IntegratorSpec(scheme, 0.05)

    def forward(t):
        def f(state):
            u = state[0]
            ux, uy = ad.channels(u, 0, 1), ad.channels(u, 1, 2)
            r = ad.tanh(ad.conv2d(u, t["w"], t["b"]))
            return [r - ad.advect(ux, uy, u, dx) + t["k"] * ad.laplacian(u, dx)]
        psi, _ = psi_step(f, [u0], spec)
        return ad.l1_mean(psi[0] - ad.Tensor(target))
    rep = ad.grad_check(forward, params)
    assert rep.passed, rep.lines()


@pytest.mark.parametrize("op", ["grad_x", "grad_y", "laplacian"])
@pytest.mark.parametrize("boundary", ["replicate", "one_sided2"])
def test_stencil_nodes_match_fdops_and_adjoint(op, boundary):
    rng = np.random.default_rng(7)
    f = rng.normal(size=(1, 1, 6, 7))
    ref = {"grad_x": fdops.ddx, "grad_y": fdops.ddy, "laplacian": fdops.laplacian_array}[op]
    out = getattr(ad, op)(ad.Tensor(f), 0.3, boundary)
    assert np.allclose(out.value, ref(f, 0.3, boundary), atol=1e-12, rtol=0)
    w = rng.normal(size=f.shape)
    rep = ad.grad_check(lambda t: ad.total(getattr(ad, op)(t["f"], 0.3, boundary) * ad.Tensor(w)),
                        {"f": f})
    assert rep.passed, rep.lines()


def test_backward_is_deterministic():
    forward, params = _two_layer_net(np.random.default_rng(8))
    g1 = ad.backward(forward({k: ad.parameter(v, k) for k, v in params.items()}))
    g2 = ad.backward(forward({k: ad.parameter(v, k) for k, v in params.items()}))
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(-3, 3), st.floats(-3, 3))
def test_gradient_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(2, 3))
    c1, c2 = rng.normal(size=(2, 2, 3))

    def grad(loss_fn):
        t = ad.parameter(p, "p")
        return ad.backward(loss_fn(t))["p"]
    l1 = lambda t: ad.total(ad.tanh(t) * ad.Tensor(c1))  # noqa: E731
    l2 = lambda t: ad.total(t * t * ad.Tensor(c2))  # noqa: E731
    both = grad(lambda t: ad.scale(l1(t), a) + ad.scale(l2(t), b))
    sep = a * grad(l1) + b * grad(l2)
    mag = np.abs(a * grad(l1)) + np.abs(b * grad(l2))
    assert np.all(np.abs(both - sep) <= 8 * np.spacing(mag) + 1e-300)


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    new, st_ = ad.adam_step(p, {"w": np.zeros(2)}, ad.AdamState(lr=0.1))
    assert np.array_equal(new["w"], p["w"])
    assert st_.step == 1


def test_adam_first_step_closed_form():
    g = np.array([0.3, -4.0, 1e-9])
    lr, eps = 1e-3, 1e-8
    new, _ = ad.adam_step({"w": np.zeros(3)}, {"w": g}, ad.AdamState(lr=lr))
    # bias-corrected first step: m_hat = g, v_hat = g^2
    assert np.allclose(new["w"], -lr * g / (np.abs(g) + eps), rtol=1e-12, atol=0)


def test_adam_two_opposite_steps_closed_form():
    g, lr, b1, b2, eps = 0.5, 1e-2, 0.9, 0.999, 1e-8
    p, s = {"w": np.array([0.0])}, ad.AdamState(lr=lr)
    p, s = ad.adam_step(p, {"w": np.array([g])}, s)
    p, s = ad.adam_step(p, {"w": np.array([-g])}, s)
    step1 = -lr * g / (g + eps)
    m2 = b1 * (1 - b1) * g - (1 - b1) * g
    v2 = b2 * (1 - b2) * g * g + (1 - b2) * g * g
    step2 = -lr * (m2 / (1 - b1 ** 2)) / (np.sqrt(v2 / (1 - b2 ** 2)) + eps)
    assert p["w"][0] == pytest.approx(step1 + step2, rel=1e-12)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, ad.AdamState())


def test_frozen_inputs_build_no_graph():
    a = ad.Tensor(np.ones(3))
    out = ad.tanh(a * a)
    assert out.parents == () and not out.requires_grad
