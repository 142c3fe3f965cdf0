import numpy as np
import pytest

from axialreid import attention as att
from axialreid import gradcheck as gc
from axialreid.tensor import Rng

SEEDS = range(5)


@pytest.mark.parametrize("seed", SEEDS)
def test_nonlocal_3d_matches_finite_differences(seed):
    res = gc.check_nonlocal(seed)
    assert res.passed, f"{res.op} seed {seed}: {res.worst_param} err {res.worst_rel_err:.2e}"


@pytest.mark.parametrize("seed", SEEDS)
def test_axial_matches_finite_differences(seed):
    res = gc.check_axial(seed)
    assert res.passed, f"{res.op} seed {seed}: {res.worst_param} err {res.worst_rel_err:.2e}"


@pytest.mark.parametrize("seed", SEEDS)
def test_axial_ps_matches_finite_differences(seed):
    res = gc.check_axial_ps(seed)
    assert res.passed, f"{res.op} seed {seed}: {res.worst_param} err {res.worst_rel_err:.2e}"


@pytest.mark.parametrize("seed", SEEDS)
def test_cfaa_matches_finite_differences(seed):
    res = gc.check_cfaa(seed)
    assert res.passed, f"{res.op} seed {seed}: {res.worst_param} err {res.worst_rel_err:.2e}"


@pytest.mark.parametrize("seed", SEEDS)
def test_triplet_matches_finite_differences(seed):
    res = gc.check_triplet(seed)
    assert res.passed, f"seed {seed}: err {res.worst_rel_err:.2e}"


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_matches_finite_differences(seed):
    res = gc.check_cross_entropy(seed)
    assert res.passed, f"seed {seed}: err {res.worst_rel_err:.2e}"


def test_fd_on_2x3x4x2_input_all_parameters():
    # the canonical finite-difference case: 2-channel 3x4x2 volume, step 1e-5
    rng = Rng(42)
    cfg = att.AttentionConfig(c_in=2, c_qk=2, c_out=2, encoding="relative", axis_lengths=(3, 4, 2))
    params = att.init_axial_layer(cfg, 2, 4, rng.child(0))
    x = rng.child(1).normal((2, 3, 4, 2))
    g = rng.child(2).normal((2, 3, 4, 2))

    def loss():
        return float(np.sum(g * att.axial_ps_forward(x, params, "H", cfg)))

    _, cache = att.axial_ps_forward(x, params, "H", cfg, want_cache=True)
    d_x, grads = att.axial_ps_backward(g, params, cache)
    for name, analytic in [("x", d_x), *grads.named("p")]:
        target = x if name == "x" else dict(params.named("p"))[name]
        err = gc.rel_error(analytic, gc.fd_gradient(loss, target, step=1e-5))
        assert err < 1e-4, f"{name}: {err:.2e}"


def test_zero_upstream_gives_zero_bundle():
    rng = Rng(0)
    cfg = att.AttentionConfig(c_in=4, c_qk=4, c_out=4, heads=2, scales=2,
                              encoding="relative", axis_lengths=(2, 4, 2))
    params = att.init_cfaa_params(cfg, rng.child(0))
    x = rng.child(1).normal((4, 2, 4, 2))
    _, cache = att.cfaa_forward(x, params, cfg, want_cache=True)
    d_x, grads = att.cfaa_backward(np.zeros_like(x), params, cfg, cache)
    assert not d_x.any()
    for _, g in grads.named():
        assert not g.any()


def test_frozen_zero_projection_passes_upstream_through():
    # residual path only: with w_o = 0 the input gradient equals the upstream
    # gradient plus the (zero-projected) attention branch contribution of 0
    rng = Rng(1)
    cfg = att.AttentionConfig(c_in=4, c_qk=2, c_out=4, axis_lengths=(2, 2, 2))
    params = att.init_cfaa_params(cfg, rng.child(0))
    params.w_o = np.zeros_like(params.w_o)
    x = rng.child(1).normal((4, 2, 2, 2))
    g = rng.child(2).normal(x.shape)
    _, cache = att.cfaa_forward(x, params, cfg, want_cache=True)
    d_x, _ = att.cfaa_backward(g, params, cfg, cache)
    np.testing.assert_array_equal(d_x, g)


def test_upstream_shape_mismatch_rejected():
    rng = Rng(2)
    cfg = att.AttentionConfig(c_in=3, c_qk=2, c_out=3, axis_lengths=(2, 2, 2))
    params = att.init_nonlocal_params(cfg, rng.child(0))
    x = rng.child(1).normal((3, 2, 2, 2))
    _, cache = att.nonlocal_3d_forward(x, params, cfg, want_cache=True)
    with pytest.raises(Exception, match="shape"):
        att.nonlocal_3d_backward(np.zeros((3, 2, 2, 3)), params, cache)


def test_fault_injection_is_caught():
    assert not gc.check_cfaa(0, perturb=True).passed
    assert not gc.check_triplet(0, perturb=True).passed


def test_run_gradient_checks_all_pass():
    results = gc.run_gradient_checks(seeds=range(2))
    assert all(r.passed for r in results)
