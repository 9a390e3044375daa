"""Iterative reconstruction engine.

Alternates a closed-form data projection with denoiser calls for T stages:

    X_t = Z_{t-1} + Psi^T((y - Psi Z_{t-1}) / (eta_t + psi))
    Z_t = denoise(X_t, rho_t)

The projection exactly minimizes ||y - Psi X||^2 + eta ||X - Z_{t-1}||^2
thanks to the diagonal Gram of the sensing operator. Per-stage (eta, rho)
come from a small convolutional learner over the mask stack and measurement;
denoiser weights are shared across stages, so the parameter count does not
depend on T.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import cassi, checkpoint, metrics
from .autodiff import Adam, ShapeError, Tensor
from .network import (Conv, Dense, Denoiser, DhmConfig, Module, light_config)


class UnfoldingError(Exception):
    pass


PARAM_FLOOR = 1e-4


# ---------------------------------------------------------------------------
# sensing operator as differentiable ops (adjoint pair)

def project_t(op: cassi.SensingOperator, x: Tensor) -> Tensor:
    x = ad.as_tensor(x)
    y = op.forward(x.data)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(op.adjoint(g), fresh=True)
    return ad._node(y, (x,), "cassi_forward", bwd)


def adjoint_t(op: cassi.SensingOperator, y: Tensor) -> Tensor:
    y = ad.as_tensor(y)
    x = op.adjoint(y.data)

    def bwd(g):
        if y.requires_grad:
            y.accumulate_grad(op.forward(g), fresh=True)
    return ad._node(x, (y,), "cassi_adjoint", bwd)


def data_projection(z, op: cassi.SensingOperator, y, eta) -> Tensor:
    """Closed-form minimizer of the measurement-consistency subproblem."""
    z = ad.as_tensor(z)
    y = ad.as_tensor(y)
    eta = ad.as_tensor(eta)
    if np.any(eta.data <= 0):
        raise UnfoldingError(f"eta must be positive, got {float(eta.data.min())}")
    psi = Tensor(op.psi.astype(z.dtype))
    r = ad.sub(y, project_t(op, z))
    scaled = ad.div(r, ad.add(ad.reshape(eta, (1, 1)), psi))
    return ad.add(z, adjoint_t(op, scaled))


def charbonnier_loss(pred, target, eps=1e-3) -> Tensor:
    """Zero-anchored smooth L1: mean(sqrt(d^2 + eps^2)) - eps."""
    pred = ad.as_tensor(pred)
    target = ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    if eps <= 0:
        raise UnfoldingError(f"eps must be positive, got {eps}")
    d = ad.sub(pred, target)
    return ad.sub(ad.tmean(ad.sqrt(ad.add(ad.mul(d, d), eps * eps))), eps)


# ---------------------------------------------------------------------------
# learned components

class InitBlock(Module):
    """Convolution block producing the initial estimate from (mask stack, y)."""

    def __init__(self, bands, hidden, rng, dtype=np.float32):
        self.conv1 = Conv(3, bands + 1, hidden, rng, padding=1, dtype=dtype)
        self.conv2 = Conv(3, hidden, bands, rng, padding=1, dtype=dtype)

    def __call__(self, x):
        return self.conv2(ad.gelu(self.conv1(x)))


class DegradationBlock(Module):
    """Three convolutions with two interleaved GELUs; middle one strided."""

    def __init__(self, c_in, c_out, rng, dtype=np.float32):
        self.conv1 = Conv(3, c_in, c_out, rng, padding=1, dtype=dtype)
        self.conv2 = Conv(3, c_out, c_out, rng, stride=2, padding=1,
                          dtype=dtype)
        self.conv3 = Conv(3, c_out, c_out, rng, padding=1, dtype=dtype)

    def __call__(self, x):
        return self.conv3(ad.gelu(self.conv2(ad.gelu(self.conv1(x)))))


class ParameterLearner(Module):
    """Produces per-stage positive (eta, rho) from the degradation inputs.

    Two degradation-aware blocks feed a global average pool and a stack of
    three fully connected layers. The last layer is a stage head applied
    once per stage with the normalized stage index appended, so its weight
    count is independent of the stage count while still emitting 2T values.
    """

    def __init__(self, bands, channels, rng, learn_eta=True, learn_rho=True,
                 dtype=np.float32):
        if not (learn_eta or learn_rho):
            raise UnfoldingError("parameter learner with nothing to learn")
        self.learn_eta = learn_eta
        self.learn_rho = learn_rho
        self.dab1 = DegradationBlock(bands + 1, channels, rng, dtype=dtype)
        self.dab2 = DegradationBlock(channels, channels, rng, dtype=dtype)
        self.fc1 = Dense(channels, channels, rng, dtype=dtype)
        self.fc2 = Dense(channels, channels, rng, dtype=dtype)
        self.head = Dense(channels + 1, int(learn_eta) + int(learn_rho), rng,
                          dtype=dtype)

    def __call__(self, x, stages):
        f = self.dab2(self.dab1(x))
        pooled = ad.reshape(ad.tmean(f, axis=(0, 1)), (1, -1))
        trunk = ad.gelu(self.fc2(ad.gelu(self.fc1(pooled))))
        dt = trunk.dtype
        rows = []
        for t in range(1, stages + 1):
            marker = Tensor(np.full((1, 1), t / stages, dtype=dt))
            rows.append(self.head(ad.concat([trunk, marker], axis=1)))
        raw = ad.concat(rows, axis=0)                      # (T, outputs)
        out = ad.add(ad.softplus(raw), PARAM_FLOOR)
        cols = iter(range(out.shape[1]))
        take = lambda: ad.reshape(out[:, next(cols)], (stages,))
        eta = take() if self.learn_eta else None
        rho = take() if self.learn_rho else None
        return eta, rho


@dataclass
class StageState:
    """Inspection record of one unfolding stage."""

    x: np.ndarray
    z: np.ndarray
    eta: float
    rho: float
    t: int


class UnfoldingModel(Module):
    """Init block + parameter learner + shared denoiser, unrolled T stages."""

    def __init__(self, denoiser, init_block, learner, stages,
                 fixed_eta=1e-2, fixed_rho=1.0):
        if stages < 1:
            raise UnfoldingError(f"stage count must be >= 1, got {stages}")
        self.denoiser = denoiser
        self.init_block = init_block
        self.learner = learner
        self.stages = stages
        self.fixed_eta = float(fixed_eta)
        self.fixed_rho = float(fixed_rho)

    @classmethod
    def create(cls, bands, base_channels=8, state_dim=8, window=2, stages=2,
               enc_depth=2, bottleneck_depth=1, variant="full",
               block_order="gs_ls", share_scan_params=False, scan_impl="auto",
               learnable_eta=True, learnable_rho=True, fixed_eta=1e-2,
               fixed_rho=1.0, dtype=np.float32, rng=None):
        rng = rng or np.random.default_rng(0)
        dtype_name = "float64" if np.dtype(dtype) == np.float64 else "float32"
        config = DhmConfig(
            base_channels=base_channels, window=window, enc_depth=enc_depth,
            bottleneck_depth=bottleneck_depth, state_dim=state_dim,
            variant=variant, block_order=block_order,
            share_scan_params=share_scan_params, scan_impl=scan_impl,
            dtype=dtype_name)
        if variant == "light":
            config = light_config(config)
        den = Denoiser(bands, config, rng)
        init = InitBlock(bands, base_channels, rng, dtype=config.np_dtype)
        learner = None
        if learnable_eta or learnable_rho:
            learner = ParameterLearner(
                bands, base_channels, rng, learn_eta=learnable_eta,
                learn_rho=learnable_rho, dtype=config.np_dtype)
        return cls(den, init, learner, stages, fixed_eta, fixed_rho)

    # -- persistence ------------------------------------------------------

    def describe(self):
        cfg = self.denoiser.config
        return {
            "bands": self.denoiser.bands,
            "base_channels": cfg.base_channels,
            "state_dim": cfg.state_dim if cfg.state_dim else 0,
            "window": cfg.window,
            "enc_depth": cfg.enc_depth,
            "bottleneck_depth": cfg.bottleneck_depth,
            "variant": cfg.variant,
            "block_order": cfg.block_order,
            "share_scan_params": int(cfg.share_scan_params),
            "scan_impl": cfg.scan_impl,
            "dtype": cfg.dtype,
            "stages": self.stages,
            "learnable_eta": int(self.learner is not None
                                 and self.learner.learn_eta),
            "learnable_rho": int(self.learner is not None
                                 and self.learner.learn_rho),
            "fixed_eta": self.fixed_eta,
            "fixed_rho": self.fixed_rho,
        }

    def save(self, path):
        named = [(name, t.data) for name, t in self.named_params()]
        checkpoint.save_checkpoint(path, named, self.describe())

    @classmethod
    def load(cls, path):
        params, cfg = checkpoint.load_checkpoint(path)
        model = cls.create(
            bands=int(cfg["bands"]),
            base_channels=int(cfg["base_channels"]),
            state_dim=int(cfg["state_dim"]) or None,
            window=int(cfg["window"]),
            stages=int(cfg["stages"]),
            enc_depth=int(cfg["enc_depth"]),
            bottleneck_depth=int(cfg["bottleneck_depth"]),
            variant=cfg["variant"],
            block_order=cfg["block_order"],
            share_scan_params=bool(int(cfg["share_scan_params"])),
            scan_impl=cfg["scan_impl"],
            learnable_eta=bool(int(cfg["learnable_eta"])),
            learnable_rho=bool(int(cfg["learnable_rho"])),
            fixed_eta=float(cfg["fixed_eta"]),
            fixed_rho=float(cfg["fixed_rho"]),
            dtype=np.float64 if cfg["dtype"] == "float64" else np.float32,
        )
        have = dict(model.named_params())
        missing = [k for k in have if k not in params]
        if missing:
            raise checkpoint.CheckpointError(
                f"{path}: missing parameters {missing[:3]}...")
        for name, arr in params.items():
            if name not in have:
                raise checkpoint.CheckpointError(
                    f"{path}: unexpected parameter {name!r}")
            if have[name].data.shape != arr.shape:
                raise checkpoint.CheckpointError(
                    f"{path}: shape mismatch for {name!r}")
            have[name].data = arr.astype(have[name].data.dtype)
        return model

    # -- inference --------------------------------------------------------

    def degradation_input(self, op, y):
        dt = self.denoiser.config.np_dtype
        stack = op.mask_stack.astype(dt)
        plane = np.asarray(y, dtype=dt)[:, :, None]
        return Tensor(np.concatenate([stack, plane], axis=2))

    def stage_params(self, op, y, stages):
        inp = self.degradation_input(op, y)
        eta = rho = None
        if self.learner is not None:
            eta, rho = self.learner(inp, stages)
        dt = self.denoiser.config.np_dtype
        if eta is None:
            eta = Tensor(np.full(stages, self.fixed_eta, dtype=dt))
        if rho is None:
            rho = Tensor(np.full(stages, self.fixed_rho, dtype=dt))
        return inp, eta, rho

    def reconstruct(self, op, y, stages=None, return_trail=False):
        """Run the unfolded iteration; returns the final shifted-volume estimate."""
        stages = self.stages if stages is None else stages
        if stages < 1:
            raise UnfoldingError(f"stage count must be >= 1, got {stages}")
        dt = self.denoiser.config.np_dtype
        y_t = Tensor(np.asarray(y, dtype=dt))
        inp, eta, rho = self.stage_params(op, y, stages)
        z = self.init_block(inp)
        trail = []
        for t in range(1, stages + 1):
            eta_t = eta[t - 1:t]
            rho_t = rho[t - 1:t]
            x = data_projection(z, op, y_t, eta_t)
            z = self.denoiser.denoise(x, rho_t)
            if return_trail:
                trail.append(StageState(
                    x=x.data.copy(), z=z.data.copy(),
                    eta=float(eta_t.data[0]), rho=float(rho_t.data[0]), t=t))
        if return_trail:
            return z, trail
        return z

    def reconstruct_cube(self, op, y, stages=None):
        """Reconstruct and undo the dispersion shift: returns (H, W, bands)."""
        z = self.reconstruct(op, y, stages=stages)
        return cassi.unshift_bands(z.data, op.width, op.shift_step)


# ---------------------------------------------------------------------------
# training

TRAIN_DEFAULTS = {
    "stages": 2,
    "height": 32,
    "width": 32,
    "bands": 4,
    "shift_step": 2,
    "base_channels": 8,
    "state_dim": 8,
    "window": 2,
    "enc_depth": 2,
    "bottleneck_depth": 1,
    "variant": "full",
    "block_order": "gs_ls",
    "share_scan_params": 0,
    "scan_impl": "auto",
    "learnable_eta": 1,
    "learnable_rho": 1,
    "fixed_eta": 1e-2,
    "fixed_rho": 1.0,
    "lr": 1e-3,
    "steps": 500,
    "lr_halve_at": 0.6,
    "crop": 0,
    "dataset_size": 64,
    "val_size": 16,
    "noise": "none",
    "noise_sigma": 0.0,
    "noise_bit_depth": 11,
    "mask_kind": "binary",
    "seed": 0,
    "val_every": 0,
    "dtype": "float32",
    "charbonnier_eps": 1e-3,
}

_INT_KEYS = {"stages", "height", "width", "bands", "shift_step",
             "base_channels", "state_dim", "window", "enc_depth",
             "bottleneck_depth", "share_scan_params", "learnable_eta",
             "learnable_rho", "steps", "crop", "dataset_size", "val_size",
             "noise_bit_depth", "seed", "val_every"}
_FLOAT_KEYS = {"fixed_eta", "fixed_rho", "lr", "lr_halve_at", "noise_sigma",
               "charbonnier_eps"}


def parse_train_config(text):
    """Parse "key=value" lines into a full config; unknown keys rejected."""
    cfg = dict(TRAIN_DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep:
            raise UnfoldingError(f"line {lineno}: expected key=value, got "
                                 f"{line!r}")
        if key not in cfg:
            raise UnfoldingError(f"line {lineno}: unknown config key {key!r}")
        if key in _INT_KEYS:
            cfg[key] = int(val)
        elif key in _FLOAT_KEYS:
            cfg[key] = float(val)
        else:
            cfg[key] = val
    return cfg


def format_train_config(cfg):
    return "\n".join(f"{k}={cfg[k]}" for k in TRAIN_DEFAULTS) + "\n"


def build_model(cfg, rng=None):
    return UnfoldingModel.create(
        bands=cfg["bands"], base_channels=cfg["base_channels"],
        state_dim=cfg["state_dim"] or None, window=cfg["window"],
        stages=cfg["stages"], enc_depth=cfg["enc_depth"],
        bottleneck_depth=cfg["bottleneck_depth"], variant=cfg["variant"],
        block_order=cfg["block_order"],
        share_scan_params=bool(cfg["share_scan_params"]),
        scan_impl=cfg["scan_impl"],
        learnable_eta=bool(cfg["learnable_eta"]),
        learnable_rho=bool(cfg["learnable_rho"]),
        fixed_eta=cfg["fixed_eta"], fixed_rho=cfg["fixed_rho"],
        dtype=np.float64 if cfg["dtype"] == "float64" else np.float32,
        rng=rng)


def _apply_noise(y, cfg, rng):
    if cfg["noise"] == "none":
        return y
    if cfg["noise"] == "gaussian":
        return cassi.add_noise(y, "gaussian", rng=rng,
                               sigma=cfg["noise_sigma"])[0]
    if cfg["noise"] == "shot":
        return cassi.add_noise(y, "shot", rng=rng,
                               bit_depth=cfg["noise_bit_depth"])[0]
    raise UnfoldingError(f"unknown noise model {cfg['noise']!r}")


def synth_split(cfg):
    """Training and held-out scenes for the synthetic pipeline."""
    cubes = metrics.synth_dataset(cfg["dataset_size"] + cfg["val_size"],
                                  cfg["height"], cfg["width"], cfg["bands"],
                                  seed=cfg["seed"])
    return cubes[:cfg["dataset_size"]], cubes[cfg["dataset_size"]:]


def make_operator(cfg, rng=None):
    rng = rng or np.random.default_rng(cfg["seed"] + 1)
    side = cfg["crop"] if cfg["crop"] else None
    h = side or cfg["height"]
    w = side or cfg["width"]
    mask = cassi.random_mask(h, w, rng, kind=cfg["mask_kind"])
    return cassi.SensingOperator(mask, cfg["bands"], cfg["shift_step"])


def train(cfg, log=None):
    """Optimize all weights on synthetic scenes; returns (model, history).

    Deterministic for a fixed seed in single-threaded mode. The learning
    rate is constant and halved once at the configured fraction of steps.
    """
    if cfg["dataset_size"] < 1:
        raise UnfoldingError("training needs a non-empty dataset")
    rng = np.random.default_rng(cfg["seed"])
    train_cubes, val_cubes = synth_split(cfg)
    op = make_operator(cfg, np.random.default_rng(cfg["seed"] + 1))
    model = build_model(cfg, rng=np.random.default_rng(cfg["seed"] + 2))
    params = model.params()
    opt = Adam(params, lr=cfg["lr"])
    halve_step = int(cfg["steps"] * cfg["lr_halve_at"]) \
        if 0 < cfg["lr_halve_at"] < 1 else None

    crop = cfg["crop"]
    history = {"loss": [], "val_psnr": []}
    for step in range(cfg["steps"]):
        if halve_step is not None and step == halve_step:
            opt.lr *= 0.5
        cube = train_cubes[int(rng.integers(len(train_cubes)))]
        if crop:
            r0 = int(rng.integers(cfg["height"] - crop + 1))
            c0 = int(rng.integers(cfg["width"] - crop + 1))
            cube = cube[r0:r0 + crop, c0:c0 + crop]
        xs = cassi.shift_bands(cube, cfg["shift_step"])
        y = _apply_noise(op.forward(xs), cfg, rng)
        z = model.reconstruct(op, y)
        loss = charbonnier_loss(
            z, Tensor(xs.astype(z.dtype)), eps=cfg["charbonnier_eps"])
        ad.zero_grad(params)
        loss.backward()
        opt.step()
        history["loss"].append(float(loss.data))
        if cfg["val_every"] and (step + 1) % cfg["val_every"] == 0:
            report = evaluate_model(model, op, val_cubes, cfg)
            history["val_psnr"].append((step + 1, report.psnr_avg))
            if log:
                log(f"step {step + 1}: loss={float(loss.data):.5f} "
                    f"val_psnr={report.psnr_avg:.2f} dB")
        elif log and (step + 1) % 50 == 0:
            log(f"step {step + 1}: loss={float(loss.data):.5f}")
    return model, op, history


def evaluate_model(model, op, cubes, cfg=None, fingerprint=""):
    """Measure reconstruction quality over held-out scenes."""
    cfg = cfg or dict(TRAIN_DEFAULTS)
    report = metrics.EvalReport(config_fingerprint=fingerprint)
    noise_rng = np.random.default_rng(cfg["seed"] + 3)
    with metrics.Stopwatch() as sw:
        for cube in cubes:
            if cube.shape[:2] != (op.height, op.width):
                cube = cube[:op.height, :op.width]
            xs = cassi.shift_bands(cube, op.shift_step)
            y = _apply_noise(op.forward(xs), cfg, noise_rng)
            rec = model.reconstruct_cube(op, y)
            report.scene_psnr.append(metrics.psnr(cube, rec))
            report.scene_ssim.append(metrics.ssim(cube, rec))
    report.runtime_s = sw.seconds
    return report


def baseline_report(op, cubes, cfg=None):
    """Quality of the Gram-normalized adjoint estimate on the same scenes."""
    cfg = cfg or dict(TRAIN_DEFAULTS)
    report = metrics.EvalReport(config_fingerprint="adjoint-baseline")
    noise_rng = np.random.default_rng(cfg["seed"] + 3)
    with metrics.Stopwatch() as sw:
        for cube in cubes:
            if cube.shape[:2] != (op.height, op.width):
                cube = cube[:op.height, :op.width]
            xs = cassi.shift_bands(cube, op.shift_step)
            y = _apply_noise(op.forward(xs), cfg, noise_rng)
            est = cassi.normalized_adjoint_init(op, y)
            rec = cassi.unshift_bands(est, op.width, op.shift_step)
            report.scene_psnr.append(metrics.psnr(cube, rec))
            report.scene_ssim.append(metrics.ssim(cube, rec))
    report.runtime_s = sw.seconds
    return report
