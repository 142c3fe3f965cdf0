"""Central finite-difference verification of the analytic backward passes.

The scalar probe loss is sum(g * f(x, params)) for a fixed random upstream g,
so the analytic gradient of the probe is exactly what backward(g) returns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as att
from . import aggregation as agg
from .tensor import Rng

FD_STEP = 1e-5
REL_TOL = 1e-4


@dataclass
class CheckResult:
    op: str
    seed: int
    worst_param: str
    worst_rel_err: float

    @property
    def passed(self) -> bool:
        return self.worst_rel_err < REL_TOL


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst elementwise |a - n| / max(|a|, |n|, 1e-3)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def fd_gradient(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of scalar f at x, elementwise."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * step)
    return g


def _check_op(name: str, seed: int, tensors: dict[str, np.ndarray], forward, analytic: dict[str, np.ndarray], perturb: bool) -> CheckResult:
    """Compare analytic gradients against finite differences for every tensor."""
    worst_name, worst = "", 0.0
    for pname, arr in tensors.items():
        a = analytic[pname]
        if perturb:
            a = a + 1e-2 * (np.abs(a).max() + 1.0)
        num = fd_gradient(forward, arr)
        err = rel_error(a, num)
        if err > worst:
            worst_name, worst = pname, err
    return CheckResult(op=name, seed=seed, worst_param=worst_name, worst_rel_err=worst)


def check_nonlocal(seed: int, perturb: bool = False) -> CheckResult:
    rng = Rng(seed)
    cfg = att.AttentionConfig(c_in=3, c_qk=2, c_out=3, axis_lengths=(2, 2, 2))
    params = att.init_nonlocal_params(cfg, rng.child(0))
    x = rng.child(1).normal((cfg.c_in, *cfg.axis_lengths))
    g = rng.child(2).normal(x.shape)

    def loss():
        return float(np.sum(g * att.nonlocal_3d_forward(x, params, cfg)))

    _, cache = att.nonlocal_3d_forward(x, params, cfg, want_cache=True)
    d_x, grads = att.nonlocal_3d_backward(g, params, cache)
    tensors = dict(x=x, w_q=params.w_q, w_k=params.w_k, w_v=params.w_v, w_o=params.w_o)
    analytic = dict(x=d_x, w_q=grads.w_q, w_k=grads.w_k, w_v=grads.w_v, w_o=grads.w_o)
    return _check_op("nonlocal_3d", seed, tensors, loss, analytic, perturb)


def _axial_case(seed: int, encoding: str, perturb: bool) -> CheckResult:
    rng = Rng(seed)
    cfg = att.AttentionConfig(c_in=4, c_qk=4, c_out=4, heads=2, encoding=encoding, axis_lengths=(2, 3, 2))
    axis = ("H", "W", "T")[seed % 3]
    axis_len = dict(T=2, H=3, W=2)[axis]
    params = att.init_axial_layer(cfg, cfg.c_in, axis_len, rng.child(0))
    x = rng.child(1).normal((cfg.c_in, *cfg.axis_lengths))
    g = rng.child(2).normal((cfg.c_out, *cfg.axis_lengths))
    fwd = att.axial_ps_forward if encoding == "relative" else att.axial_forward

    def loss():
        return float(np.sum(g * fwd(x, params, axis, cfg)))

    _, cache = fwd(x, params, axis, cfg, want_cache=True)
    d_x, grads = att.axial_backward(g, params, cache)
    tensors = dict(x=x, w_q=params.w_q, w_k=params.w_k, w_v=params.w_v)
    analytic = dict(x=d_x, w_q=grads.w_q, w_k=grads.w_k, w_v=grads.w_v)
    if encoding == "relative":
        tensors.update(r_q=params.r_q, r_k=params.r_k, r_v=params.r_v)
        analytic.update(r_q=grads.r_q, r_k=grads.r_k, r_v=grads.r_v)
    return _check_op(f"axial[{encoding}]", seed, tensors, loss, analytic, perturb)


def check_axial(seed: int, perturb: bool = False) -> CheckResult:
    return _axial_case(seed, "sinusoidal" if seed % 2 else "none", perturb)


def check_axial_ps(seed: int, perturb: bool = False) -> CheckResult:
    return _axial_case(seed, "relative", perturb)


def check_cfaa(seed: int, perturb: bool = False) -> CheckResult:
    rng = Rng(seed)
    cfg = att.AttentionConfig(c_in=4, c_qk=4, c_out=4, heads=1, scales=2, encoding="relative", axis_lengths=(2, 4, 2))
    params = att.init_cfaa_params(cfg, rng.child(0))
    x = rng.child(1).normal((cfg.c_in, *cfg.axis_lengths))
    g = rng.child(2).normal(x.shape)

    def loss():
        return float(np.sum(g * att.cfaa_forward(x, params, cfg)))

    _, cache = att.cfaa_forward(x, params, cfg, want_cache=True)
    d_x, grads = att.cfaa_backward(g, params, cfg, cache)
    tensors, analytic = dict(x=x), dict(x=d_x)
    for (name, p), (_, gr) in zip(params.named(), grads.named()):
        tensors[name] = p
        analytic[name] = gr
    return _check_op("cfaa", seed, tensors, loss, analytic, perturb)


def check_triplet(seed: int, perturb: bool = False) -> CheckResult:
    rng = Rng(seed)
    feats = rng.child(0).normal((8, 5))
    labels = np.repeat(np.arange(4), 2)

    def loss():
        return agg.batch_hard_triplet(feats, labels, margin=0.3)[0]

    _, grad = agg.batch_hard_triplet(feats, labels, margin=0.3)
    if perturb:
        grad = grad + 1e-2
    num = fd_gradient(loss, feats)
    return CheckResult("triplet", seed, "features", rel_error(grad, num))


def check_cross_entropy(seed: int, perturb: bool = False) -> CheckResult:
    rng = Rng(seed)
    logits = rng.child(0).normal((6, 5))
    labels = rng.child(1).integers(0, 5, (6,))

    def loss():
        return agg.cross_entropy(logits, labels)[0]

    _, grad = agg.cross_entropy(logits, labels)
    if perturb:
        grad = grad + 1e-2
    num = fd_gradient(loss, logits)
    return CheckResult("cross_entropy", seed, "logits", rel_error(grad, num))


ALL_CHECKS = {
    "nonlocal_3d": check_nonlocal,
    "axial": check_axial,
    "axial_ps": check_axial_ps,
    "cfaa": check_cfaa,
    "triplet": check_triplet,
    "cross_entropy": check_cross_entropy,
}


def run_gradient_checks(seeds=range(5), ops=None, perturb: bool = False) -> list[CheckResult]:
    """Run every registered check on every seed; returns all results."""
    results = []
    for name in ops or ALL_CHECKS:
        for seed in seeds:
            results.append(ALL_CHECKS[name](int(seed), perturb=perturb))
    return results
