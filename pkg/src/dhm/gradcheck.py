"""Finite-difference gradient verification.

Provides the central-difference oracle used across the test suite plus a
named registry of checks covering every autodiff primitive, the scan kernel,
and an end-to-end micro reconstruction model. The CLI `gradcheck` subcommand
runs the same registry.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FD_STEP = 1e-5
PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3
ABS_FLOOR = 1e-8
# deep compositions have parameters whose true gradients sit below the
# oracle's own roundoff noise eps*|f|/(2h); their comparison floor must sit
# above that noise (widening h instead would trade it for truncation error
# at the strongly curved coordinates)
DEEP_FLOOR = 1e-6


def fd_gradient(f, t: Tensor, h=FD_STEP) -> np.ndarray:
    """Central-difference d f() / d t, perturbing t.data in place."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = float(ad.eval_forward(f()))
        flat[i] = keep - h
        fm = float(ad.eval_forward(f()))
        flat[i] = keep
        gflat[i] = (fp - fm) / (2 * h)
    return g


def fd_gradient_sampled(f, t: Tensor, idx, h=FD_STEP):
    """Central differences at selected flat indices only."""
    flat = t.data.reshape(-1)
    out = np.zeros(len(idx))
    for n, i in enumerate(idx):
        keep = flat[i]
        flat[i] = keep + h
        fp = float(ad.eval_forward(f()))
        flat[i] = keep - h
        fm = float(ad.eval_forward(f()))
        flat[i] = keep
        out[n] = (fp - fm) / (2 * h)
    return out


def max_rel_error(analytic, numeric, floor=ABS_FLOOR) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def check_gradients(f, inputs, h=FD_STEP, floor=ABS_FLOOR) -> float:
    """Max elementwise relative error of backprop vs central differences.

    ``f`` rebuilds a scalar-output graph from ``inputs`` on each call.
    """
    ad.zero_grad(inputs)
    out = f()
    out.backward()
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = fd_gradient(f, t, h)
        worst = max(worst, max_rel_error(analytic, numeric, floor))
    return worst


def check_gradients_sampled(f, inputs, per_tensor=3, rng=None, h=FD_STEP,
                            floor=DEEP_FLOOR) -> float:
    """Like check_gradients but probes a random subset of coordinates.

    Used for models whose full finite-difference sweep would be quadratic in
    the parameter count; every tensor still gets probed.
    """
    rng = rng or np.random.default_rng(0)
    ad.zero_grad(inputs)
    out = f()
    out.backward()
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        n = t.data.size
        k = min(per_tensor, n)
        idx = rng.choice(n, size=k, replace=False)
        analytic = (t.grad if t.grad is not None
                    else np.zeros_like(t.data)).reshape(-1)[idx]
        numeric = fd_gradient_sampled(f, t, idx, h)
        worst = max(worst, max_rel_error(analytic, numeric, floor))
    return worst


# ---------------------------------------------------------------------------
# primitive registry

def _rt(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _weighted(out, rng):
    # fixed random weighting makes the loss scalar while exercising all outputs
    w = Tensor(rng.standard_normal(out.shape))
    return ad.tsum(ad.mul(out, w))


def _case_add(rng):
    a, b = _rt(rng, 3, 4), _rt(rng, 4)
    return lambda: _weighted(ad.add(a, b), np.random.default_rng(1)), [a, b]


def _case_sub(rng):
    a, b = _rt(rng, 3, 4), _rt(rng, 3, 1)
    return lambda: _weighted(ad.sub(a, b), np.random.default_rng(1)), [a, b]


def _case_mul(rng):
    a, b = _rt(rng, 2, 3, 4), _rt(rng, 3, 4)
    return lambda: _weighted(ad.mul(a, b), np.random.default_rng(1)), [a, b]


def _case_div(rng):
    a, b = _rt(rng, 3, 4), _rt(rng, 3, 4)
    b.data = b.data + np.sign(b.data) * 1.5  # keep denominators away from 0
    return lambda: _weighted(ad.div(a, b), np.random.default_rng(1)), [a, b]


def _case_matmul(rng):
    a, b = _rt(rng, 2, 3, 4), _rt(rng, 4, 5)
    return lambda: _weighted(ad.matmul(a, b), np.random.default_rng(1)), [a, b]


def _unary_case(op, positive=False):
    def build(rng):
        a = _rt(rng, 3, 5)
        if positive:
            a.data = np.abs(a.data) + 0.5
        return lambda: _weighted(op(a), np.random.default_rng(1)), [a]
    return build


def _case_reshape(rng):
    a = _rt(rng, 3, 4)
    return lambda: _weighted(ad.reshape(a, (2, 6)), np.random.default_rng(1)), [a]


def _case_permute(rng):
    a = _rt(rng, 2, 3, 4)
    return lambda: _weighted(ad.permute(a, (2, 0, 1)), np.random.default_rng(1)), [a]


def _case_concat(rng):
    a, b = _rt(rng, 2, 3), _rt(rng, 2, 2)
    return (lambda: _weighted(ad.concat([a, b], axis=1), np.random.default_rng(1)),
            [a, b])


def _case_slice(rng):
    a = _rt(rng, 4, 5)
    return (lambda: _weighted(ad.slice_nd(a, (slice(1, 3), slice(0, 4))),
                              np.random.default_rng(1)), [a])


def _case_pad(rng):
    a = _rt(rng, 3, 3)
    return (lambda: _weighted(ad.pad(a, ((1, 2), (0, 1))),
                              np.random.default_rng(1)), [a])


def _case_broadcast(rng):
    a = _rt(rng, 1, 4)
    return (lambda: _weighted(ad.broadcast_to(a, (3, 4)),
                              np.random.default_rng(1)), [a])


def _case_permute_rows(rng):
    a = _rt(rng, 6, 2)
    perm = rng.permutation(6)
    return (lambda: _weighted(ad.permute_rows(a, perm),
                              np.random.default_rng(1)), [a])


def _case_sum(rng):
    a = _rt(rng, 3, 4, 2)
    return lambda: _weighted(ad.tsum(a, axis=(0, 2)), np.random.default_rng(1)), [a]


def _case_mean(rng):
    a = _rt(rng, 3, 4)
    return lambda: _weighted(ad.tmean(a, axis=1, keepdims=True),
                             np.random.default_rng(1)), [a]


def _case_layernorm(rng):
    a = _rt(rng, 4, 6)
    g = Tensor(1.0 + 0.1 * rng.standard_normal(6), requires_grad=True)
    b = Tensor(0.1 * rng.standard_normal(6), requires_grad=True)
    return (lambda: _weighted(ad.layernorm(a, g, b), np.random.default_rng(1)),
            [a, g, b])


def _case_avg_pool2d(rng):
    a = _rt(rng, 4, 4, 3)
    return lambda: _weighted(ad.avg_pool2d(a, 2), np.random.default_rng(1)), [a]


def _case_conv2d(rng):
    x = _rt(rng, 5, 5, 2)
    w = _rt(rng, 3, 3, 2, 3)
    b = _rt(rng, 3)
    return (lambda: _weighted(ad.conv2d(x, w, b, stride=2, padding=1),
                              np.random.default_rng(1)), [x, w, b])


def _case_depthwise_conv2d(rng):
    x = _rt(rng, 5, 5, 3)
    w = _rt(rng, 3, 3, 3)
    b = _rt(rng, 3)
    return (lambda: _weighted(ad.depthwise_conv2d(x, w, b, padding=1),
                              np.random.default_rng(1)), [x, w, b])


def _case_transposed_conv2d(rng):
    x = _rt(rng, 3, 3, 2)
    w = _rt(rng, 2, 2, 2, 3)
    b = _rt(rng, 3)
    return (lambda: _weighted(ad.transposed_conv2d(x, w, b, stride=2),
                              np.random.default_rng(1)), [x, w, b])


PRIMITIVE_CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "div": _case_div,
    "matmul": _case_matmul,
    "exp": _unary_case(ad.exp),
    "expm1": _unary_case(ad.expm1),
    "sqrt": _unary_case(ad.sqrt, positive=True),
    "softplus": _unary_case(ad.softplus),
    "sigmoid": _unary_case(ad.sigmoid),
    "silu": _unary_case(ad.silu),
    "gelu": _unary_case(ad.gelu),
    "reshape": _case_reshape,
    "permute": _case_permute,
    "concat": _case_concat,
    "slice": _case_slice,
    "pad": _case_pad,
    "broadcast": _case_broadcast,
    "permute_rows": _case_permute_rows,
    "sum": _case_sum,
    "mean": _case_mean,
    "layernorm": _case_layernorm,
    "avg_pool2d": _case_avg_pool2d,
    "conv2d": _case_conv2d,
    "depthwise_conv2d": _case_depthwise_conv2d,
    "transposed_conv2d": _case_transposed_conv2d,
}


def run_primitive_checks(names=None, seed=0):
    """Gradcheck each named primitive; returns {name: max relative error}."""
    names = list(PRIMITIVE_CASES) if names is None else list(names)
    errors = {}
    for name in names:
        rng = np.random.default_rng(seed + hash(name) % 1000)
        f, inputs = PRIMITIVE_CASES[name](rng)
        errors[name] = check_gradients(f, inputs)
    return errors


def check_scan_kernel(seed=0, mode="par"):
    """Gradcheck the selective-scan kernel end to end (params and input)."""
    from . import ssm

    rng = np.random.default_rng(seed)
    g_, l_, d_, ds_ = 2, 6, 3, 2
    params = ssm.SsmParams.create(d_, ds_, rng, dtype=np.float64)
    s = Tensor(rng.standard_normal((g_, l_, d_)), requires_grad=True)
    weight = np.random.default_rng(1).standard_normal((g_, l_, d_))

    def f():
        b, c, delta = ssm.generate_params(s, params)
        abar, bbar = ssm.discretize_zoh(params.a_tensor(), b, delta)
        y = ssm.selective_scan(s, abar, bbar, c, params.nu, mode=mode)
        return ad.tsum(ad.mul(y, Tensor(weight)))

    inputs = [s] + params.tensors()
    return check_gradients(f, inputs)


def check_micro_model(seed=0, per_tensor=3):
    """Gradcheck loss -> full unfolded model on a micro configuration."""
    from . import cassi, unfolding

    rng = np.random.default_rng(seed)
    h_, w_, bands = 8, 8, 2
    model = unfolding.UnfoldingModel.create(
        bands=bands, base_channels=4, state_dim=4, window=2, stages=2,
        dtype=np.float64, rng=rng)
    mask = (rng.random((h_, w_)) > 0.5).astype(np.float64)
    op = cassi.SensingOperator(mask, bands=bands, shift_step=2)
    cube = rng.random((h_, w_, bands))
    xs = cassi.shift_bands(cube, 2)
    y = op.forward(xs)
    target = Tensor(xs)

    def f():
        z = model.reconstruct(op, y)
        return unfolding.charbonnier_loss(z, target)

    return check_gradients_sampled(f, model.params(), per_tensor=per_tensor,
                                   rng=np.random.default_rng(seed + 1))


def run_full_suite(seed=0):
    """Primitive + scan-kernel + micro-model checks.

    Returns (report rows, ok flag); each row is (section, name, error, tol).
    """
    rows = []
    ok = True
    for name, err in run_primitive_checks(seed=seed).items():
        rows.append(("primitive", name, err, PRIMITIVE_TOL))
        ok = ok and err <= PRIMITIVE_TOL
    for mode in ("seq", "par"):
        err = check_scan_kernel(seed=seed, mode=mode)
        rows.append(("scan", f"selective_scan_{mode}", err, PRIMITIVE_TOL))
        ok = ok and err <= PRIMITIVE_TOL
    err = check_micro_model(seed=seed)
    rows.append(("end-to-end", "micro_model", err, END_TO_END_TOL))
    ok = ok and err <= END_TO_END_TOL
    return rows, ok
