import math

import numpy as np
import pytest

import dhm.autodiff as ad
from dhm import cassi, gradcheck, unfolding
from dhm.autodiff import Tensor
from dhm.unfolding import (UnfoldingError, UnfoldingModel, charbonnier_loss,
                           data_projection, parse_train_config, train)


def micro_model(bands=2, stages=2, dtype=np.float64, seed=0, **kw):
    return UnfoldingModel.create(
        bands=bands, base_channels=4, state_dim=4, window=2, stages=stages,
        dtype=dtype, rng=np.random.default_rng(seed), **kw)


def micro_op(seed=0, h=8, w=8, bands=2, step=2):
    rng = np.random.default_rng(seed)
    mask = cassi.random_mask(h, w, rng)
    return cassi.SensingOperator(mask, bands, step)


class TestDataProjection:
    def test_consistent_measurement_is_fixed_point(self):
        rng = np.random.default_rng(0)
        op = micro_op(1)
        z = rng.random(op.shifted_shape)
        y = op.forward(z)
        x = data_projection(Tensor(z), op, Tensor(y), Tensor([0.5]))
        np.testing.assert_allclose(x.data, z, rtol=0, atol=1e-12)

    def test_matches_dense_solve_oracle(self):
        rng = np.random.default_rng(1)
        op = cassi.SensingOperator(rng.random((2, 2)), bands=2, shift_step=1)
        dense = op.materialize_dense()
        gram = dense.T @ dense
        for _ in range(50):
            eta = float(10 ** rng.uniform(-3, 3))
            z = rng.standard_normal(op.shifted_shape)
            y = rng.standard_normal((op.height, op.shifted_cols))
            x = data_projection(Tensor(z), op, Tensor(y), Tensor([eta]))
            expected = np.linalg.solve(
                gram + eta * np.eye(gram.shape[0]),
                dense.T @ y.ravel() + eta * z.ravel())
            err = np.linalg.norm(x.data.ravel() - expected)
            assert err <= 1e-10 * max(np.linalg.norm(expected), 1.0)

    def test_large_eta_returns_input(self):
        rng = np.random.default_rng(2)
        op = micro_op(3)
        z = rng.random(op.shifted_shape)
        y = rng.random((op.height, op.shifted_cols))
        x = data_projection(Tensor(z), op, Tensor(y), Tensor([1e8]))
        residual_pull = op.adjoint(y - op.forward(z))
        assert (np.linalg.norm(x.data - z)
                <= 1e-6 * np.linalg.norm(residual_pull))

    def test_first_order_optimality(self):
        rng = np.random.default_rng(3)
        op = micro_op(4)
        z = rng.random(op.shifted_shape)
        y = rng.random((op.height, op.shifted_cols))
        eta = 0.37
        x = data_projection(Tensor(z), op, Tensor(y), Tensor([eta])).data
        grad = op.adjoint(op.forward(x) - y) + eta * (x - z)
        scale = np.linalg.norm(op.adjoint(y)) + eta * np.linalg.norm(z)
        assert np.linalg.norm(grad) <= 1e-8 * scale

    def test_rejects_nonpositive_eta(self):
        op = micro_op(5)
        z = np.zeros(op.shifted_shape)
        y = np.zeros((op.height, op.shifted_cols))
        with pytest.raises(UnfoldingError):
            data_projection(Tensor(z), op, Tensor(y), Tensor([0.0]))


class TestInitBlock:
    def test_output_shape(self):
        model = micro_model()
        op = micro_op(6)
        y = np.zeros((op.height, op.shifted_cols))
        z = model.init_block(model.degradation_input(op, y))
        assert z.shape == op.shifted_shape

    def test_zero_weights_give_bias_plane(self):
        model = micro_model()
        for _, t in model.init_block.named_params():
            t.data[:] = 0.0
        model.init_block.conv2.b.data[:] = [0.25, -0.5]
        op = micro_op(7)
        y = np.random.default_rng(8).random((op.height, op.shifted_cols))
        z = model.init_block(model.degradation_input(op, y)).data
        np.testing.assert_allclose(z[:, :, 0], 0.25, rtol=0, atol=1e-12)
        np.testing.assert_allclose(z[:, :, 1], -0.5, rtol=0, atol=1e-12)

    def test_gradcheck_through_init(self):
        rng = np.random.default_rng(9)
        model = micro_model()
        op = micro_op(10, h=4, w=4)
        inp = model.degradation_input(op, rng.random((4, op.shifted_cols)))
        weight = Tensor(rng.standard_normal(op.shifted_shape))

        def f():
            return ad.tsum(ad.mul(model.init_block(inp), weight))

        err = gradcheck.check_gradients(f, model.init_block.params())
        assert err <= 1e-4


class TestParameterLearner:
    def test_outputs_respect_floor(self):
        model = micro_model()
        op = micro_op(11)
        rng = np.random.default_rng(12)
        _, eta, rho = model.stage_params(
            op, rng.random((op.height, op.shifted_cols)), 5)
        assert np.all(eta.data >= unfolding.PARAM_FLOOR)
        assert np.all(rho.data >= unfolding.PARAM_FLOOR)

    def test_zero_head_gives_softplus_zero_plus_floor(self):
        model = micro_model()
        model.learner.head.w.data[:] = 0.0
        model.learner.head.b.data[:] = 0.0
        op = micro_op(13)
        y = np.random.default_rng(14).random((op.height, op.shifted_cols))
        _, eta, rho = model.stage_params(op, y, 3)
        expected = math.log(2.0) + unfolding.PARAM_FLOOR
        np.testing.assert_allclose(eta.data, expected, rtol=1e-12)
        np.testing.assert_allclose(rho.data, expected, rtol=1e-12)

    def test_output_length_2t_for_nine_stages(self):
        model = micro_model(stages=9)
        op = micro_op(15)
        y = np.random.default_rng(16).random((op.height, op.shifted_cols))
        _, eta, rho = model.stage_params(op, y, 9)
        assert eta.data.shape == (9,) and rho.data.shape == (9,)

    def test_stages_receive_distinct_values(self):
        model = micro_model()
        op = micro_op(17)
        y = np.random.default_rng(18).random((op.height, op.shifted_cols))
        _, eta, _ = model.stage_params(op, y, 4)
        assert len(np.unique(eta.data)) > 1

    def test_fixed_parameters_when_not_learnable(self):
        model = micro_model(learnable_eta=False, learnable_rho=False,
                            fixed_eta=0.05, fixed_rho=2.0)
        assert model.learner is None
        op = micro_op(19)
        _, eta, rho = model.stage_params(
            op, np.zeros((op.height, op.shifted_cols)), 3)
        np.testing.assert_array_equal(eta.data, np.full(3, 0.05))
        np.testing.assert_array_equal(rho.data, np.full(3, 2.0))

    def test_single_family_learner(self):
        model = micro_model(learnable_eta=True, learnable_rho=False)
        op = micro_op(20)
        y = np.random.default_rng(21).random((op.height, op.shifted_cols))
        _, eta, rho = model.stage_params(op, y, 2)
        assert np.all(rho.data == model.fixed_rho)
        assert np.all(eta.data >= unfolding.PARAM_FLOOR)


class TestReconstruct:
    def test_single_stage_equals_projection_plus_denoise(self):
        model = micro_model()
        op = micro_op(22)
        rng = np.random.default_rng(23)
        y = op.forward(rng.random(op.shifted_shape))
        via_loop = model.reconstruct(op, y, stages=1).data

        inp, eta, rho = model.stage_params(op, y, 1)
        z0 = model.init_block(inp)
        x1 = data_projection(z0, op, Tensor(y.astype(z0.dtype)), eta[0:1])
        z1 = model.denoiser.denoise(x1, rho[0:1])
        np.testing.assert_array_equal(via_loop, z1.data)

    def test_parameter_count_invariant_in_stages(self):
        counts = {t: micro_model(stages=t).param_count() for t in (1, 3, 9)}
        assert counts[1] == counts[3] == counts[9]

    def test_identity_denoiser_fidelity_non_increasing(self):
        model = micro_model(stages=4)
        for _, t in model.denoiser.named_params():
            t.data[:] = 0.0
        op = micro_op(24)
        rng = np.random.default_rng(25)
        xs = rng.random(op.shifted_shape)
        y = op.forward(xs)
        _, trail = model.reconstruct(op, y, return_trail=True)
        fidelity = [np.linalg.norm(y - op.forward(st.z)) for st in trail]
        z0 = model.init_block(model.degradation_input(op, y)).data
        start = np.linalg.norm(y - op.forward(z0))
        prev = start
        for value in fidelity:
            assert value <= prev + 1e-9
            prev = value

    def test_trail_records_stages(self):
        model = micro_model(stages=3)
        op = micro_op(26)
        y = np.zeros((op.height, op.shifted_cols))
        _, trail = model.reconstruct(op, y, return_trail=True)
        assert [st.t for st in trail] == [1, 2, 3]
        assert all(st.eta > 0 and st.rho > 0 for st in trail)
        assert trail[0].x.shape == op.shifted_shape

    def test_reconstruct_cube_shape(self):
        model = micro_model()
        op = micro_op(27)
        y = np.zeros((op.height, op.shifted_cols))
        rec = model.reconstruct_cube(op, y)
        assert rec.shape == (op.height, op.width, op.bands)

    def test_invalid_stage_count(self):
        model = micro_model()
        op = micro_op(28)
        with pytest.raises(UnfoldingError):
            model.reconstruct(op, np.zeros((op.height, op.shifted_cols)),
                              stages=0)


class TestCharbonnier:
    def test_zero_at_equality(self):
        x = Tensor(np.random.default_rng(29).random((3, 3)))
        assert float(charbonnier_loss(x, x.detach()).data) == pytest.approx(
            0.0, abs=1e-12)

    def test_hand_evaluated_scalar_pair(self):
        loss = charbonnier_loss(Tensor([1.0]), Tensor([0.0]), eps=1e-3)
        expected = math.sqrt(1.0 + 1e-6) - 1e-3
        np.testing.assert_allclose(float(loss.data), expected, rtol=1e-14)
        assert f"{float(loss.data):.4f}" == "0.9990"

    def test_nonnegative(self):
        rng = np.random.default_rng(30)
        for _ in range(10):
            a = Tensor(rng.standard_normal((4, 5)))
            b = Tensor(rng.standard_normal((4, 5)))
            assert float(charbonnier_loss(a, b).data) >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            charbonnier_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))


class TestEndToEnd:
    def test_micro_model_gradcheck(self):
        err = gradcheck.check_micro_model(seed=0)
        assert err <= 1e-3, f"end-to-end gradcheck rel err {err:.2e}"

    def test_checkpoint_round_trip(self, tmp_path):
        model = micro_model(seed=4)
        op = micro_op(31)
        rng = np.random.default_rng(32)
        y = op.forward(rng.random(op.shifted_shape))
        before = model.reconstruct(op, y).data
        path = tmp_path / "weights.dhmw"
        model.save(path)
        restored = UnfoldingModel.load(path)
        after = restored.reconstruct(op, y).data
        np.testing.assert_array_equal(before, after)

    def test_checkpoint_rejects_shape_mismatch(self, tmp_path):
        model = micro_model(seed=5)
        path = tmp_path / "weights.dhmw"
        model.save(path)
        from dhm import checkpoint
        params, cfg = checkpoint.load_checkpoint(path)
        name = next(iter(params))
        params[name] = params[name][..., :1]
        checkpoint.save_checkpoint(path, list(params.items()), cfg)
        with pytest.raises(checkpoint.CheckpointError):
            UnfoldingModel.load(path)


class TestTraining:
    def test_config_parsing_defaults_and_overrides(self):
        cfg = parse_train_config("stages=3\nlr=5e-4\nvariant=light\n")
        assert cfg["stages"] == 3
        assert cfg["lr"] == 5e-4
        assert cfg["variant"] == "light"
        assert cfg["bands"] == 4  # default preserved

    def test_default_learning_rate(self):
        assert unfolding.TRAIN_DEFAULTS["lr"] == 1.0e-3

    def test_unknown_key_rejected(self):
        with pytest.raises(UnfoldingError):
            parse_train_config("warp_speed=9\n")

    def test_loss_decreases_on_toy_run(self):
        cfg = parse_train_config(
            "height=16\nwidth=16\nbands=2\nbase_channels=4\nstate_dim=4\n"
            "dataset_size=6\nval_size=2\nsteps=50\nseed=0\nstages=2\n")
        model, op, history = train(cfg)
        first = np.mean(history["loss"][:5])
        last = np.mean(history["loss"][-5:])
        assert last < first
        assert len(history["loss"]) == 50

    def test_crop_pipeline(self):
        cfg = parse_train_config(
            "height=16\nwidth=16\nbands=2\nbase_channels=4\nstate_dim=4\n"
            "dataset_size=4\nval_size=1\nsteps=3\ncrop=8\nseed=1\n")
        model, op, history = train(cfg)
        assert op.height == op.width == 8
        assert len(history["loss"]) == 3

    def test_learned_parameters_stay_positive_after_training(self):
        cfg = parse_train_config(
            "height=16\nwidth=16\nbands=2\nbase_channels=4\nstate_dim=4\n"
            "dataset_size=4\nval_size=1\nsteps=5\nseed=2\n")
        model, op, _ = train(cfg)
        y = op.forward(cassi.shift_bands(
            np.random.default_rng(0).random((16, 16, 2)), 2))
        _, eta, rho = model.stage_params(op, y, cfg["stages"])
        assert np.all(eta.data >= unfolding.PARAM_FLOOR)
        assert np.all(rho.data >= unfolding.PARAM_FLOOR)

    def test_empty_dataset_rejected(self):
        cfg = parse_train_config("dataset_size=0\n")
        with pytest.raises(UnfoldingError):
            train(cfg)
