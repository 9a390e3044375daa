import numpy as np
import pytest

import dhm.autodiff as ad
from dhm import gradcheck, network
from dhm.autodiff import Tensor
from dhm.network import (Denoiser, DhmConfig, DualBlock, GateBlock,
                         GatedFeedForward, NetworkError, light_config)


def desk_config(**kw):
    base = dict(base_channels=8, window=2, enc_depth=2, bottleneck_depth=1,
                state_dim=8, dtype="float64", scan_impl="auto")
    base.update(kw)
    return DhmConfig(**base)


def _zero_params(module):
    for p in module.params():
        p.data[:] = 0.0


# --------------------------------------------------------------------------
# independent straight-line reference for the gated scan block (global mode)

def _ref_paths(h, w):
    pix = np.arange(h * w).reshape(h, w)
    p1 = pix.reshape(-1)
    p2 = pix[:, ::-1].reshape(-1)
    return [p1, p2, p1[::-1], p2[::-1]]


def _ref_gate_block(block, f):
    kh = block.dw.w.data.shape[0]
    pad = (kh - 1) // 2
    h, w, d = f.shape
    fp = np.pad(f, ((pad, pad), (pad, pad), (0, 0)))
    conv = np.zeros_like(f)
    for i in range(kh):
        for j in range(kh):
            conv += fp[i:i + h, j:j + w] * block.dw.w.data[i, j]
    conv += block.dw.b.data

    def dense(x, layer):
        return x @ layer.w.data + layer.b.data

    def silu(x):
        return x / (1.0 + np.exp(-x))

    upper = silu(dense(conv, block.proj_up))
    lower = silu(dense(f, block.proj_low))

    merged = np.zeros((h * w, d))
    flat = upper.reshape(h * w, d)
    for u, idx in enumerate(_ref_paths(h, w)):
        p = block._dir_params(u)
        s = flat[idx]                                  # (L, D)
        b = s @ p.w_b.data
        c = s @ p.w_c.data
        delta = np.log1p(np.exp(p.e_bias.data + s @ p.w_delta.data))
        a = -np.exp(p.log_a.data)                      # (D, Ds)
        y = np.zeros_like(s)
        hstate = np.zeros_like(a)
        for k in range(h * w):
            da = delta[k][:, None] * a
            abar = np.exp(da)
            bbar = np.expm1(da) / a * b[k][None, :]
            hstate = abar * hstate + bbar * s[k][:, None]
            y[k] = hstate @ c[k] + p.nu.data * s[k]
        out = np.zeros_like(merged)
        out[idx] = y
        merged += out
    merged = merged.reshape(h, w, d)

    mu = merged.mean(axis=-1, keepdims=True)
    var = merged.var(axis=-1, keepdims=True)
    normed = ((merged - mu) / np.sqrt(var + 1e-5) * block.norm.gamma.data
              + block.norm.beta.data)
    return dense(normed * lower, block.proj_out)


class TestGateBlock:
    def test_output_shape_preserved(self):
        rng = np.random.default_rng(0)
        block = GateBlock(4, 3, "global", 2, rng, dtype=np.float64)
        f = Tensor(rng.standard_normal((5, 6, 4)))
        assert block(f).shape == (5, 6, 4)

    def test_zeroed_scan_gives_bias_only_map(self):
        rng = np.random.default_rng(1)
        block = GateBlock(4, 3, "global", 2, rng, dtype=np.float64)
        for p in block.dirs[0].tensors():
            p.data[:] = 0.0
        for p in block.dirs[1:]:
            for t in p.tensors():
                t.data[:] = 0.0
        block.dirs[0].e_bias.data[:] = 0.0  # delta = softplus(0) stays valid
        block.proj_out.b.data[:] = 0.7
        f = Tensor(rng.standard_normal((4, 4, 4)))
        out = block(f)
        np.testing.assert_allclose(out.data, 0.7, rtol=0, atol=1e-12)

    def test_matches_straight_line_reference(self):
        rng = np.random.default_rng(2)
        block = GateBlock(4, 3, "global", 2, rng, scan_impl="seq",
                          dtype=np.float64)
        fv = rng.standard_normal((4, 4, 4))
        out = block(Tensor(fv))
        ref = _ref_gate_block(block, fv)
        assert gradcheck.max_rel_error(out.data, ref) <= 1e-10

    def test_local_single_window_equals_global(self):
        rng = np.random.default_rng(3)
        gblock = GateBlock(3, 4, "global", 8, rng, dtype=np.float64)
        lblock = GateBlock(3, 4, "local", 8, np.random.default_rng(99),
                           dtype=np.float64)
        src = dict(gblock.named_params())
        for name, t in lblock.named_params():
            t.data[:] = src[name].data
        f = Tensor(rng.standard_normal((8, 8, 3)))
        assert np.array_equal(gblock(f).data, lblock(f).data)

    def test_local_windows_are_independent_pre_gate(self):
        rng = np.random.default_rng(4)
        block = GateBlock(3, 4, "local", 2, rng, dtype=np.float64)
        upper = rng.standard_normal((4, 4, 3))
        base = block.scan_stage(Tensor(upper)).data
        perturbed = upper.copy()
        perturbed[0:2, 0:2] = 0.0  # zero out window (0, 0)
        out = block.scan_stage(Tensor(perturbed)).data
        np.testing.assert_array_equal(out[0:2, 2:4], base[0:2, 2:4])
        np.testing.assert_array_equal(out[2:4, :], base[2:4, :])
        assert not np.array_equal(out[0:2, 0:2], base[0:2, 0:2])


class TestGatedFeedForward:
    def test_zero_gate_weights_bias_only(self):
        rng = np.random.default_rng(5)
        ffn = GatedFeedForward(4, rng, dtype=np.float64)
        ffn.proj_gate.w.data[:] = 0.0   # gelu(0) = 0 annihilates the value path
        ffn.proj_out.b.data[:] = -1.3
        f = Tensor(rng.standard_normal((3, 3, 4)))
        np.testing.assert_allclose(ffn(f).data, -1.3, rtol=0, atol=1e-15)

    def test_shape_preserved(self):
        rng = np.random.default_rng(6)
        ffn = GatedFeedForward(5, rng, dtype=np.float64)
        f = Tensor(rng.standard_normal((4, 6, 5)))
        assert ffn(f).shape == (4, 6, 5)

    def test_matches_reference(self):
        rng = np.random.default_rng(7)
        ffn = GatedFeedForward(4, rng, dtype=np.float64)
        fv = rng.standard_normal((4, 4, 4))
        from scipy.special import erf
        gate = fv @ ffn.proj_gate.w.data + ffn.proj_gate.b.data
        gate = 0.5 * gate * (1 + erf(gate / np.sqrt(2.0)))
        val = fv @ ffn.proj_val.w.data + ffn.proj_val.b.data
        h, w, c = val.shape
        vp = np.pad(val, ((1, 1), (1, 1), (0, 0)))
        conv = np.zeros_like(val)
        for i in range(3):
            for j in range(3):
                conv += vp[i:i + h, j:j + w] * ffn.dw.w.data[i, j]
        conv += ffn.dw.b.data
        ref = (gate * conv) @ ffn.proj_out.w.data + ffn.proj_out.b.data
        assert gradcheck.max_rel_error(ffn(Tensor(fv)).data, ref) <= 1e-10


class TestDualBlock:
    def test_residual_skeleton(self):
        rng = np.random.default_rng(8)
        block = DualBlock(4, 4, desk_config(base_channels=4), rng)
        for gb in (block.block_a, block.block_b):
            gb.proj_out.w.data[:] = 0.0
            gb.proj_out.b.data[:] = 0.0
        block.ffn.proj_out.w.data[:] = 0.0
        block.ffn.proj_out.b.data[:] = 0.0
        f = rng.standard_normal((4, 4, 4))
        np.testing.assert_array_equal(block(Tensor(f)).data, f)

    def test_order_flag_swaps_sub_blocks(self):
        rng = np.random.default_rng(9)
        b1 = DualBlock(4, 4, desk_config(base_channels=4,
                                         block_order="gs_ls"), rng)
        b2 = DualBlock(4, 4, desk_config(base_channels=4,
                                         block_order="ls_gs"), rng)
        assert b1.block_a.mode == "global" and b1.block_b.mode == "local"
        assert b2.block_a.mode == "local" and b2.block_b.mode == "global"

    def test_light_variant_drops_second_block(self):
        rng = np.random.default_rng(10)
        block = DualBlock(4, 4, light_config(desk_config(base_channels=4)), rng)
        assert block.block_b is None
        f = rng.standard_normal((4, 4, 4))
        assert block(Tensor(f)).shape == (4, 4, 4)


class TestDenoiser:
    def test_zero_final_conv_is_identity_on_input(self):
        rng = np.random.default_rng(11)
        den = Denoiser(4, desk_config(), rng)
        den.out_conv.w.data[:] = 0.0
        den.out_conv.b.data[:] = 0.0
        x = rng.random((8, 10, 4))
        out = den.denoise(Tensor(x), 0.5)
        np.testing.assert_array_equal(out.data, x)

    def test_all_weights_zero_is_identity(self):
        rng = np.random.default_rng(12)
        den = Denoiser(4, desk_config(), rng)
        _zero_params(den)
        x = rng.random((8, 10, 4))
        np.testing.assert_array_equal(den.denoise(Tensor(x), 1.0).data, x)

    def test_output_shape_desk_scale(self):
        rng = np.random.default_rng(13)
        den = Denoiser(4, desk_config(dtype="float32"), rng)
        x = rng.random((32, 38, 4)).astype(np.float32)  # W* = 32 + 2*3
        out = den.denoise(Tensor(x), 0.1)
        assert out.shape == (32, 38, 4)

    def test_rejects_nonpositive_rho(self):
        rng = np.random.default_rng(14)
        den = Denoiser(2, desk_config(base_channels=4), rng)
        with pytest.raises(NetworkError):
            den.denoise(Tensor(np.zeros((8, 8, 2))), 0.0)

    def test_rejects_wrong_band_count(self):
        rng = np.random.default_rng(15)
        den = Denoiser(2, desk_config(base_channels=4), rng)
        with pytest.raises(ad.ShapeError):
            den.denoise(Tensor(np.zeros((8, 8, 3))), 1.0)

    def test_gradcheck_micro_denoiser(self):
        rng = np.random.default_rng(16)
        den = Denoiser(2, desk_config(base_channels=4, state_dim=4), rng)
        x = Tensor(rng.random((8, 8, 2)))
        weight = Tensor(rng.standard_normal((8, 8, 2)))

        def f():
            return ad.tsum(ad.mul(den.denoise(x, 0.3), weight))

        err = gradcheck.check_gradients_sampled(
            f, den.params(), per_tensor=2, rng=np.random.default_rng(1))
        assert err <= 1e-3, f"denoiser gradcheck rel err {err:.2e}"


class TestVariants:
    def test_light_param_count_smaller(self):
        rng = np.random.default_rng(17)
        cfg = desk_config()
        full = Denoiser(4, cfg, rng)
        light = Denoiser(4, light_config(cfg), np.random.default_rng(17))
        assert light.param_count() < full.param_count()

    def test_reference_scale_parameter_ratio(self):
        # at reference dims (C=28, window 8, state dim tracking channels) the
        # light/full parameter ratio should sit near 0.66/0.92 = 0.7174
        cfg = DhmConfig(base_channels=28, window=8, enc_depth=2,
                        bottleneck_depth=1, state_dim=None)
        full = Denoiser(28, cfg, np.random.default_rng(0))
        light = Denoiser(28, light_config(cfg), np.random.default_rng(0))
        ratio = light.param_count() / full.param_count()
        target = 0.66 / 0.92
        assert abs(ratio - target) <= 0.15 * target, f"ratio {ratio:.4f}"

    def test_shared_direction_params_reduce_count(self):
        rng = np.random.default_rng(18)
        cfg = desk_config()
        solo = Denoiser(4, cfg, rng)
        shared = Denoiser(4, desk_config(share_scan_params=True),
                          np.random.default_rng(18))
        assert shared.param_count() < solo.param_count()


def test_config_validation():
    with pytest.raises(NetworkError):
        DhmConfig(base_channels=0)
    with pytest.raises(NetworkError):
        DhmConfig(variant="tiny")
    with pytest.raises(NetworkError):
        DhmConfig(block_order="sideways")
