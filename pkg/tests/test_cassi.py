import numpy as np
import pytest

from dhm import cassi
from dhm.cassi import (CassiError, FileFormatError, SensingOperator,
                       add_noise, random_mask, shift_bands, shifted_width,
                       unshift_bands)


def _random_op(rng, h=4, w=5, bands=3, step=2, kind="binary"):
    return SensingOperator(random_mask(h, w, rng, kind), bands, step)


class TestShift:
    def test_zero_step_is_identity(self):
        rng = np.random.default_rng(0)
        cube = rng.random((3, 4, 2))
        out = shift_bands(cube, 0)
        assert out.shape == (3, 4, 2)
        np.testing.assert_array_equal(out, cube)

    def test_paper_scale_width(self):
        assert shifted_width(256, 28, 2) == 310

    def test_unit_voxel_translation(self):
        cube = np.zeros((5, 6, 4))
        cube[2, 1, 3] = 1.0
        out = shift_bands(cube, 2)
        assert out.shape == (5, 6 + 2 * 3, 4)
        assert out[2, 1 + 6, 3] == 1.0
        assert out.sum() == 1.0

    def test_round_trip_exact(self):
        rng = np.random.default_rng(1)
        cube = rng.random((4, 7, 3))
        back = unshift_bands(shift_bands(cube, 2), 7, 2)
        np.testing.assert_array_equal(back, cube)

    def test_negative_step_rejected(self):
        with pytest.raises(CassiError):
            shift_bands(np.zeros((2, 2, 2)), -1)


class TestProjection:
    def test_single_band_ones_mask_identity(self):
        rng = np.random.default_rng(2)
        op = SensingOperator(np.ones((3, 4)), bands=1, shift_step=0)
        x = rng.random((3, 4, 1))
        np.testing.assert_array_equal(op.forward(x), x[:, :, 0])
        y = rng.random((3, 4))
        np.testing.assert_array_equal(op.adjoint(y)[:, :, 0], y)

    def test_forward_of_zero_is_zero(self):
        op = _random_op(np.random.default_rng(3))
        assert op.forward(np.zeros(op.shifted_shape)).sum() == 0.0
        assert op.adjoint(np.zeros((op.height, op.shifted_cols))).sum() == 0.0

    def test_small_instance_matches_dense(self):
        op = SensingOperator(np.array([[1.0, 0.0], [0.0, 1.0]]),
                             bands=2, shift_step=1)
        rng = np.random.default_rng(4)
        x = rng.random(op.shifted_shape)
        dense = op.materialize_dense()
        np.testing.assert_allclose(op.forward(x).ravel(), dense @ x.ravel(),
                                   rtol=0, atol=1e-14)

    def test_adjoint_matches_dense_transpose(self):
        op = SensingOperator(np.random.default_rng(5).random((2, 2)),
                             bands=2, shift_step=1)
        y = np.random.default_rng(6).random((2, 3))
        dense = op.materialize_dense()
        np.testing.assert_allclose(op.adjoint(y).ravel(), dense.T @ y.ravel(),
                                   rtol=0, atol=1e-14)

    def test_dim_mismatch_raises(self):
        op = _random_op(np.random.default_rng(7))
        with pytest.raises(CassiError):
            op.forward(np.zeros((op.height, op.shifted_cols, op.bands + 1)))
        with pytest.raises(CassiError):
            op.adjoint(np.zeros((op.height, op.shifted_cols + 1)))

    def test_adjointness_identity(self):
        rng = np.random.default_rng(8)
        op = _random_op(rng, h=8, w=8, bands=4, step=2)
        for _ in range(100):
            x = rng.standard_normal(op.shifted_shape)
            y = rng.standard_normal((op.height, op.shifted_cols))
            fx = op.forward(x)
            defect = abs(np.vdot(fx, y) - np.vdot(x, op.adjoint(y)))
            assert defect <= 1e-12 * (np.linalg.norm(fx) * np.linalg.norm(y)
                                      + 1e-300)


class TestPsiDiag:
    def test_binary_mask_counts_bands(self):
        rng = np.random.default_rng(9)
        op = _random_op(rng, kind="binary")
        counts = np.sum(op.mask_stack > 0, axis=2)
        np.testing.assert_array_equal(op.psi, counts.astype(float))

    def test_zero_mask_gives_zero(self):
        op = SensingOperator(np.zeros((3, 3)), bands=2, shift_step=1)
        assert op.psi.sum() == 0.0

    def test_matches_dense_gram_diagonal(self):
        rng = np.random.default_rng(10)
        op = SensingOperator(rng.random((3, 3)), bands=2, shift_step=1)
        gram = op.materialize_dense() @ op.materialize_dense().T
        np.testing.assert_allclose(op.psi.ravel(), np.diag(gram),
                                   rtol=0, atol=1e-14)

    def test_gram_is_exactly_diagonal(self):
        rng = np.random.default_rng(11)
        op = SensingOperator(rng.random((3, 4)), bands=3, shift_step=2)
        gram = op.materialize_dense() @ op.materialize_dense().T
        off = gram - np.diag(np.diag(gram))
        assert np.max(np.abs(off)) <= 1e-14


class TestDense:
    def test_scalar_instance(self):
        op = SensingOperator(np.array([[0.5]]), bands=1, shift_step=0)
        np.testing.assert_array_equal(op.materialize_dense(), [[0.5]])

    def test_row_count_is_pixel_count(self):
        op = SensingOperator(np.ones((3, 4)), bands=2, shift_step=2)
        dense = op.materialize_dense()
        assert dense.shape[0] == op.height * op.shifted_cols
        assert dense.shape[1] == dense.shape[0] * op.bands

    def test_forward_consistency_50_random(self):
        rng = np.random.default_rng(12)
        op = _random_op(rng, h=3, w=4, bands=3, step=1, kind="gray")
        dense = op.materialize_dense()
        for _ in range(50):
            x = rng.standard_normal(op.shifted_shape)
            lhs = op.forward(x).ravel()
            rhs = dense @ x.ravel()
            assert np.linalg.norm(lhs - rhs) <= 1e-12 * (np.linalg.norm(rhs)
                                                         + 1e-300)

    def test_cap_enforced(self):
        op = SensingOperator(np.ones((16, 16)), bands=16, shift_step=2)
        assert np.prod(op.shifted_shape) > 4096
        with pytest.raises(CassiError):
            op.materialize_dense(cap=4096)


class TestNoise:
    def test_zero_sigma_identity(self):
        y = np.random.default_rng(13).random((5, 5))
        out, meta = add_noise(y, "gaussian", sigma=0.0)
        np.testing.assert_array_equal(out, y)
        assert meta["sigma"] == 0.0

    def test_gaussian_sample_std(self):
        rng = np.random.default_rng(14)
        out, _ = add_noise(np.zeros((100, 100)), "gaussian", rng=rng, sigma=0.1)
        assert 0.097 <= out.std() <= 0.103

    def test_shot_preserves_mean(self):
        rng = np.random.default_rng(15)
        y = np.full((100, 100), 0.5)
        out, meta = add_noise(y, "shot", rng=rng, bit_depth=11)
        assert abs(out.mean() - 0.5) <= 0.005
        assert meta["bit_depth"] == 11

    def test_negative_sigma_rejected(self):
        with pytest.raises(CassiError):
            add_noise(np.zeros((2, 2)), "gaussian", sigma=-0.1)


class TestFileFormats:
    def test_cube_round_trip(self, tmp_path):
        rng = np.random.default_rng(16)
        cube = rng.random((4, 5, 3)).astype(np.float32)
        path = tmp_path / "cube.hsc"
        cassi.write_cube(path, cube)
        back = cassi.read_cube(path)
        np.testing.assert_allclose(back, cube, rtol=0, atol=0)

    def test_cube_round_trip_float64(self, tmp_path):
        cube = np.random.default_rng(17).random((2, 3, 2))
        path = tmp_path / "cube64.hsc"
        cassi.write_cube(path, cube)
        assert cassi.read_cube(path).dtype == np.float64

    def test_mask_and_measurement_round_trip(self, tmp_path):
        rng = np.random.default_rng(18)
        mask = random_mask(3, 4, rng)
        cassi.write_mask(tmp_path / "m.msk", mask)
        np.testing.assert_array_equal(cassi.read_mask(tmp_path / "m.msk"), mask)
        y = rng.random((3, 6)).astype(np.float32)
        cassi.write_measurement(tmp_path / "y.mea", y)
        np.testing.assert_allclose(cassi.read_measurement(tmp_path / "y.mea"),
                                   y, rtol=0, atol=0)

    def test_bad_magic_reports_offset(self, tmp_path):
        path = tmp_path / "bad.hsc"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FileFormatError) as exc:
            cassi.read_cube(path)
        assert "offset" in str(exc.value)

    def test_truncated_file_reports_offset(self, tmp_path):
        rng = np.random.default_rng(19)
        path = tmp_path / "trunc.hsc"
        cassi.write_cube(path, rng.random((4, 4, 2)))
        data = path.read_bytes()
        path.write_bytes(data[:len(data) // 2])
        with pytest.raises(FileFormatError) as exc:
            cassi.read_cube(path)
        assert exc.value.offset > 0


def test_mask_value_range_enforced():
    with pytest.raises(CassiError):
        SensingOperator(np.full((2, 2), 1.5), bands=1, shift_step=0)


def test_gray_mask_supported():
    rng = np.random.default_rng(20)
    op = _random_op(rng, kind="gray")
    assert 0.0 <= op.mask.min() and op.mask.max() <= 1.0
