"""Selective state-space scan kernel.

Sequences are (G, L, D): G independent groups (1 for a whole image, one per
window for local scans), L positions, D channels. Each position k updates a
(D, D_s) hidden state

    h_k = Abar_k * h_{k-1} + Bbar_k * s_k,      y_k = sum_Ds(C_k * h_k) + nu * s_k

with everything elementwise and the input broadcast over the state axis.
The recurrence is evaluated either by a direct sequential loop or by a
work-efficient (Blelloch) prefix scan over the associative composition
(a1, b1) o (a2, b2) = (a2*a1, a2*b1 + b2); both variants back-propagate via
a reversed scan of the adjoint recurrence rather than graph replay.
"""

from __future__ import annotations

import functools
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class SsmError(Exception):
    pass


def get_default_threads():
    try:
        return max(1, int(os.environ.get("DHM_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# learnable per-direction parameters

@dataclass
class SsmParams:
    """State-space parameters for one scan direction.

    The state matrix is stored as log_a with A = -exp(log_a), which keeps
    A < 0 (hence |Abar| < 1 for any positive timescale). e_bias is the
    per-channel timescale offset, nu the per-channel skip scale.
    """

    log_a: Tensor      # (D, D_s)
    e_bias: Tensor     # (D,)
    nu: Tensor         # (D,)
    w_b: Tensor        # (D, D_s)
    w_c: Tensor        # (D, D_s)
    w_delta: Tensor    # (D, D)

    @classmethod
    def create(cls, d, d_state, rng, dtype=np.float32, proj_std=0.02):
        def tn(*shape):
            v = rng.standard_normal(shape) * proj_std
            while np.any(np.abs(v) > 2 * proj_std):
                bad = np.abs(v) > 2 * proj_std
                v[bad] = rng.standard_normal(bad.sum()) * proj_std
            return Tensor(v.astype(dtype), requires_grad=True)

        # A in [-1, -1e-2]
        log_a = rng.uniform(np.log(1e-2), 0.0, size=(d, d_state))
        return cls(
            log_a=Tensor(log_a.astype(dtype), requires_grad=True),
            e_bias=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
            nu=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
            w_b=tn(d, d_state),
            w_c=tn(d, d_state),
            w_delta=tn(d, d),
        )

    def a_tensor(self) -> Tensor:
        return ad.neg(ad.exp(self.log_a))

    def tensors(self):
        return [self.log_a, self.e_bias, self.nu, self.w_b, self.w_c,
                self.w_delta]

    def named(self, prefix):
        names = ["log_a", "e_bias", "nu", "w_b", "w_c", "w_delta"]
        return [(f"{prefix}.{n}", t) for n, t in zip(names, self.tensors())]


def generate_params(s: Tensor, p: SsmParams):
    """Input-dependent (B, C, Delta) from a (G, L, D) sequence."""
    g_, l_, d_ = s.shape
    if p.w_delta.shape[0] != d_:
        raise ShapeError(f"sequence channels {d_} do not match parameter "
                         f"channels {p.w_delta.shape[0]}")
    flat = ad.reshape(s, (g_ * l_, d_))
    ds_ = p.w_b.shape[1]
    b = ad.reshape(ad.matmul(flat, p.w_b), (g_, l_, ds_))
    c = ad.reshape(ad.matmul(flat, p.w_c), (g_, l_, ds_))
    delta = ad.softplus(ad.add(p.e_bias,
                               ad.reshape(ad.matmul(flat, p.w_delta),
                                          (g_, l_, d_))))
    return b, c, delta


def discretize_zoh(a: Tensor, b: Tensor, delta: Tensor):
    """Zero-order-hold discretization of (A, B) under timescale Delta.

    Abar = exp(Delta*A); Bbar = (expm1(Delta*A) / A) * B, the cancellation-
    free form of (Delta*A)^-1 (exp(Delta*A) - I) * Delta*B.
    """
    if np.any(a.data >= 0):
        raise SsmError("state matrix A must be strictly negative")
    if np.any(delta.data <= 0):
        raise SsmError("timescale Delta must be strictly positive")
    g_, l_, d_ = delta.shape
    ds_ = a.shape[1]
    da = ad.mul(ad.reshape(delta, (g_, l_, d_, 1)), a)
    abar = ad.exp(da)
    bbar = ad.mul(ad.div(ad.expm1(da), a), ad.reshape(b, (g_, l_, 1, ds_)))
    return abar, bbar


# ---------------------------------------------------------------------------
# recurrence kernels on (L, M) buffers

def _seq_kernel(a, b):
    h = np.empty_like(b)
    h[0] = b[0]
    for k in range(1, a.shape[0]):
        np.multiply(a[k], h[k - 1], out=h[k])
        h[k] += b[k]
    return h


def _blelloch_inplace(a, b):
    """In-place exclusive scan of the affine composition over axis 0."""
    n = a.shape[0]
    step = 2
    while step <= n:
        half = step // 2
        left_a = a[half - 1::step]
        left_b = b[half - 1::step]
        right_a = a[step - 1::step]
        right_b = b[step - 1::step]
        right_b += right_a * left_b
        right_a *= left_a
        step *= 2
    a[n - 1] = 1.0
    b[n - 1] = 0.0
    step = n
    while step >= 2:
        half = step // 2
        left_a = a[half - 1::step]
        left_b = b[half - 1::step]
        right_a = a[step - 1::step]
        right_b = b[step - 1::step]
        ta = left_a.copy()
        tb = left_b.copy()
        left_a[:] = right_a
        left_b[:] = right_b
        right_b *= ta
        right_b += tb
        right_a *= ta
        step //= 2


def _par_kernel(a, b, threads=1):
    """Blelloch scan of h_k = a_k h_{k-1} + b_k; parallel over columns."""
    n, m = a.shape
    npad = 1 << max(1, (n - 1).bit_length()) if n > 1 else 1
    aw = np.ones((npad, m), dtype=a.dtype)
    bw = np.zeros((npad, m), dtype=b.dtype)
    aw[:n] = a
    bw[:n] = b
    if threads > 1 and m >= threads:
        bounds = np.linspace(0, m, threads + 1, dtype=int)
        with ThreadPoolExecutor(max_workers=threads) as ex:
            futs = [ex.submit(_blelloch_inplace, aw[:, lo:hi], bw[:, lo:hi])
                    for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
            for f in futs:
                f.result()
    else:
        _blelloch_inplace(aw, bw)
    # bw now holds exclusive prefixes; apply element k to get inclusive h_k
    h = aw[:n]
    np.multiply(a, bw[:n], out=h)
    h += b
    return h.copy() if npad != n else h


def _recurrence_kernel(a, b, mode, threads=1):
    if mode == "seq":
        return _seq_kernel(a, b)
    if mode == "par":
        return _par_kernel(a, b, threads)
    raise SsmError(f"unknown scan mode {mode!r}")


def _scan_axis1(a_glds, b_glds, mode, threads):
    """Run the recurrence along axis 1 of (G, L, D, Ds) arrays."""
    g_, l_, d_, ds_ = a_glds.shape
    to_lm = lambda x: np.ascontiguousarray(
        x.transpose(1, 0, 2, 3).reshape(l_, g_ * d_ * ds_))
    h = _recurrence_kernel(to_lm(a_glds), to_lm(b_glds), mode, threads)
    return np.ascontiguousarray(
        h.reshape(l_, g_, d_, ds_).transpose(1, 0, 2, 3))


def linear_recurrence(a: Tensor, b: Tensor, mode="par", threads=None) -> Tensor:
    """Differentiable h_k = a_k * h_{k-1} + b_k over axis 1 of (G, L, D, Ds).

    The backward pass runs the same kernel on the reversed adjoint
    recurrence lambda_k = g_k + a_{k+1} * lambda_{k+1}.
    """
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape or a.data.ndim != 4:
        raise ShapeError(f"linear_recurrence expects matching (G, L, D, Ds) "
                         f"arrays, got {a.shape} and {b.shape}")
    threads = get_default_threads() if threads is None else threads
    h = _scan_axis1(a.data, b.data, mode, threads)

    def bwd(g):
        ashift = np.concatenate([a.data[:, 1:], np.ones_like(a.data[:, :1])],
                                axis=1)
        lam = _scan_axis1(ashift[:, ::-1], np.ascontiguousarray(g[:, ::-1]),
                          mode, threads)[:, ::-1]
        if b.requires_grad:
            b.accumulate_grad(np.ascontiguousarray(lam), fresh=True)
        if a.requires_grad:
            hprev = np.concatenate(
                [np.zeros_like(h[:, :1]), h[:, :-1]], axis=1)
            a.accumulate_grad(lam * hprev, fresh=True)
    out = ad._node(h, (a, b), "linear_recurrence", bwd)
    return out


def selective_scan(s, abar, bbar, c, nu, mode="par", threads=None) -> Tensor:
    """Full readout: scan the state recurrence, contract with C, add skip."""
    s, abar, bbar, c, nu = map(ad.as_tensor, (s, abar, bbar, c, nu))
    g_, l_, d_ = s.shape
    ds_ = c.shape[-1]
    if abar.shape != (g_, l_, d_, ds_) or bbar.shape != (g_, l_, d_, ds_):
        raise ShapeError(f"scan parameter shapes {abar.shape}/{bbar.shape} do "
                         f"not match sequence {s.shape} with state {ds_}")
    if c.shape != (g_, l_, ds_):
        raise ShapeError(f"C shape {c.shape} != {(g_, l_, ds_)}")
    b_in = ad.mul(bbar, ad.reshape(s, (g_, l_, d_, 1)))
    h = linear_recurrence(abar, b_in, mode=mode, threads=threads)
    y = ad.tsum(ad.mul(h, ad.reshape(c, (g_, l_, 1, ds_))), axis=3)
    return ad.add(y, ad.mul(nu, s))


def selective_scan_seq(s, abar, bbar, c, nu, threads=None) -> Tensor:
    return selective_scan(s, abar, bbar, c, nu, mode="seq", threads=threads)


def selective_scan_par(s, abar, bbar, c, nu, threads=None) -> Tensor:
    return selective_scan(s, abar, bbar, c, nu, mode="par", threads=threads)


def scan_four_directions(seqs, params, mode="par", threads=None):
    """Parameter generation, discretization, and scan for four directional
    sequences, batched into single stacked operations.

    Equivalent to running generate_params / discretize_zoh / selective_scan
    per direction; stacking along a leading axis amortizes kernel overhead
    across the directions. Returns the four (G, L, D) outputs.
    """
    if len(seqs) != 4 or len(params) != 4:
        raise ShapeError("expected four sequences and four parameter sets")
    g_, l_, d_ = seqs[0].shape
    ds_ = params[0].w_b.shape[1]
    gl = g_ * l_
    s4 = ad.concat([ad.reshape(s, (1, gl, d_)) for s in seqs], axis=0)
    wb = ad.concat([ad.reshape(p.w_b, (1, d_, ds_)) for p in params], axis=0)
    wc = ad.concat([ad.reshape(p.w_c, (1, d_, ds_)) for p in params], axis=0)
    wd = ad.concat([ad.reshape(p.w_delta, (1, d_, d_)) for p in params],
                   axis=0)
    eb = ad.concat([ad.reshape(p.e_bias, (1, 1, d_)) for p in params], axis=0)
    la = ad.concat([ad.reshape(p.log_a, (1, 1, d_, ds_)) for p in params],
                   axis=0)
    nu = ad.concat([ad.reshape(p.nu, (1, 1, 1, d_)) for p in params], axis=0)

    b = ad.matmul(s4, wb)
    c = ad.matmul(s4, wc)
    delta = ad.softplus(ad.add(eb, ad.matmul(s4, wd)))
    if np.any(delta.data <= 0):
        raise SsmError("timescale Delta must be strictly positive")
    a = ad.neg(ad.exp(la))
    da = ad.mul(ad.reshape(delta, (4, gl, d_, 1)), a)
    abar = ad.exp(da)
    bbar = ad.mul(ad.div(ad.expm1(da), a), ad.reshape(b, (4, gl, 1, ds_)))
    b_in = ad.mul(bbar, ad.reshape(s4, (4, gl, d_, 1)))
    h = linear_recurrence(ad.reshape(abar, (4 * g_, l_, d_, ds_)),
                          ad.reshape(b_in, (4 * g_, l_, d_, ds_)),
                          mode=mode, threads=threads)
    y = ad.tsum(ad.mul(h, ad.reshape(c, (4 * g_, l_, 1, ds_))), axis=3)
    y = ad.add(ad.reshape(y, (4, g_, l_, d_)),
               ad.mul(nu, ad.reshape(s4, (4, g_, l_, d_))))
    return [ad.reshape(y[u], (g_, l_, d_)) for u in range(4)]


# ---------------------------------------------------------------------------
# four-direction 2-D traversal

@functools.lru_cache(maxsize=128)
def _path_indices(h, w, mode, n):
    """Index vectors mapping sequence position (g*L + l) -> flat pixel.

    Paths: 1 row-major from the top-left; 2 row-major over the horizontally
    flipped image (top-right start); 3 the reverse of 1 (bottom-right);
    4 the reverse of 2 (bottom-left). Local mode applies the same four
    orders inside each non-overlapping n-by-n window.
    """
    if mode == "global":
        wh, ww = h, w
    elif mode == "local":
        if n is None or h % n or w % n:
            raise SsmError(f"window {n} does not divide extents {(h, w)}")
        wh = ww = n
    else:
        raise SsmError(f"unknown scan mode {mode!r}")
    pix = np.arange(h * w, dtype=np.intp).reshape(h, w)
    win = (pix.reshape(h // wh, wh, w // ww, ww)
              .transpose(0, 2, 1, 3)
              .reshape(-1, wh, ww))
    p1 = win.reshape(-1, wh * ww)
    p2 = win[:, :, ::-1].reshape(-1, wh * ww)
    p3 = p1[:, ::-1]
    p4 = p2[:, ::-1]
    out = []
    for p in (p1, p2, p3, p4):
        idx = np.ascontiguousarray(p.reshape(-1))
        out.append((idx, np.argsort(idx)))
    return tuple(out)


def scan_geometry(h, w, mode, n=None):
    """(G, L) for the given traversal mode."""
    if mode == "global":
        return 1, h * w
    _path_indices(h, w, mode, n)  # validates divisibility
    return (h * w) // (n * n), n * n


def cross_scan(f: Tensor, mode="global", n=None):
    """Unfold an (H, W, D) feature into four (G, L, D) directional sequences."""
    f = ad.as_tensor(f)
    if f.data.ndim != 3:
        raise ShapeError(f"cross_scan expects (H, W, D), got {f.shape}")
    h, w, d = f.shape
    g_, l_ = scan_geometry(h, w, mode, n)
    flat = ad.reshape(f, (h * w, d))
    out = []
    for idx, inv in _path_indices(h, w, mode, n):
        out.append(ad.reshape(ad.permute_rows(flat, idx, inv), (g_, l_, d)))
    return out


def cross_merge(ys, h, w, mode="global", n=None) -> Tensor:
    """Scatter four directional sequences back to (H, W, D) and sum them."""
    paths = _path_indices(h, w, mode, n)
    if len(ys) != 4:
        raise ShapeError(f"cross_merge expects 4 sequences, got {len(ys)}")
    d = ys[0].shape[-1]
    backs = []
    for y, (idx, inv) in zip(ys, paths):
        if y.shape != ys[0].shape:
            raise ShapeError(f"mismatched sequence shapes {y.shape} vs "
                             f"{ys[0].shape}")
        backs.append(ad.permute_rows(ad.reshape(y, (h * w, d)), inv, idx))
    # pairwise sum keeps the identity round-trip bit-exact (2x and 4x are
    # exact in IEEE arithmetic, a running sum's 3x is not)
    total = ad.add(ad.add(backs[0], backs[1]), ad.add(backs[2], backs[3]))
    return ad.reshape(total, (h, w, d))


# ---------------------------------------------------------------------------
# benchmarking

def bench_scan(l_values, g=1, d=4, d_state=4, threads=1, dtype=np.float32,
               repeats=3, seed=0):
    """Time both kernels; returns rows of benchmark fields per (mode, L)."""
    rng = np.random.default_rng(seed)
    rows = []
    for l_ in l_values:
        m = g * d * d_state
        a = rng.uniform(0.5, 0.99, size=(l_, m)).astype(dtype)
        b = rng.standard_normal((l_, m)).astype(dtype)
        for mode in ("seq", "par"):
            t = threads if mode == "par" else 1
            best = np.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                _recurrence_kernel(a, b, mode, t)
                best = min(best, time.perf_counter() - t0)
            rows.append({
                "mode": mode, "G": g, "L": l_, "D": d, "Ds": d_state,
                "threads": t, "seconds": best,
                "ns_per_element": best / (l_ * m) * 1e9,
            })
    return rows


def fit_loglog_slope(rows, mode):
    pts = [(r["L"], r["seconds"]) for r in rows if r["mode"] == mode]
    ls = np.log([p[0] for p in pts])
    ts = np.log([p[1] for p in pts])
    return float(np.polyfit(ls, ts, 1)[0])
