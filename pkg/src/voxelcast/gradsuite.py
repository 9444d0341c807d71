"""Reusable finite-difference gradient suite over every differentiable kernel.

Each check wraps a kernel in a scalar loss (a fixed random projection of
the output, accumulated in float64), runs the hand-written backward, and
compares against central differences.  Inputs are float64 so the check
isolates the gradient math from float32 forward noise; parameters stay
float32, matching how they are trained.  Targets for the loss-level checks
keep residuals away from the smooth-L1 kink, where finite differences are
meaningless.
"""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .encoder import EncoderConfig, EncoderModel


def _proj_loss(y: np.ndarray, R: np.ndarray) -> float:
    return float((y.astype(np.float64) * R).sum())


def check_affine(seed: int, h=1e-3):
    rng = nc.make_rng(seed)
    x = rng.standard_normal((5, 4))
    W = nc.Param.of(rng.standard_normal((4, 3)), "W")
    b = nc.Param.of(rng.standard_normal(3), "b")
    R = rng.standard_normal((5, 3))

    def loss():
        y = nc.affine(x, W, b)
        nc.affine_backward(R.astype(y.dtype), x, W, b)
        return _proj_loss(y, R)

    return nc.grad_check(loss, [W, b], h=h, rng=nc.make_rng(seed + 1))


def check_tanh(seed: int, h=1e-3):
    rng = nc.make_rng(seed)
    W = nc.Param.of(rng.standard_normal((6, 4)), "W")
    b = nc.Param.of(rng.standard_normal(4), "b")
    x = rng.standard_normal((3, 6))
    R = rng.standard_normal((3, 4))

    def loss():
        y = nc.tanh_act(nc.affine(x, W, b))
        nc.affine_backward(nc.tanh_backward(R.astype(y.dtype), y), x, W, b)
        return _proj_loss(y, R)

    return nc.grad_check(loss, [W, b], h=h, rng=nc.make_rng(seed + 1))


def check_softmax(seed: int, h=1e-3):
    rng = nc.make_rng(seed)
    W = nc.Param.of(rng.standard_normal((5, 4)), "W")
    b = nc.Param.of(rng.standard_normal(4), "b")
    x = rng.standard_normal((6, 5))
    R = rng.standard_normal((6, 4))

    def loss():
        y = nc.softmax_rows(nc.affine(x, W, b))
        nc.affine_backward(nc.softmax_backward(R.astype(y.dtype), y), x, W, b)
        return _proj_loss(y, R)

    return nc.grad_check(loss, [W, b], h=h, rng=nc.make_rng(seed + 1))


def check_layernorm(seed: int, h=1e-3):
    rng = nc.make_rng(seed)
    gamma = nc.Param.of(1.0 + 0.2 * rng.standard_normal(6), "gamma")
    beta = nc.Param.of(0.2 * rng.standard_normal(6), "beta")
    Wp = nc.Param.of(rng.standard_normal((3, 6)), "W")
    x = rng.standard_normal((4, 3))
    R = rng.standard_normal((4, 6))
    bz = nc.Param.of(np.zeros(6), "b0")

    def loss():
        z = nc.affine(x, Wp, bz)
        y, cache = nc.layernorm(z, gamma, beta)
        dz = nc.layernorm_backward(R.astype(y.dtype), cache, gamma, beta)
        nc.affine_backward(dz, x, Wp, bz)
        return _proj_loss(y, R)

    return nc.grad_check(loss, [gamma, beta, Wp, bz], h=h, rng=nc.make_rng(seed + 1))


def check_conv(seed: int, h=1e-3):
    rng = nc.make_rng(seed)
    K = nc.Param.of(0.3 * rng.standard_normal((3, 2, 5, 5)), "K")
    b = nc.Param.of(0.1 * rng.standard_normal(3), "b")
    x = rng.standard_normal((2, 6, 6, 2))
    R = rng.standard_normal((2, 6, 6, 3))

    def loss():
        y, xp = nc.conv2d_batch(x, K, b)
        nc.conv2d_batch_backward(R.astype(y.dtype), xp, K, b, need_dx=False)
        return _proj_loss(y, R)

    return nc.grad_check(loss, [K, b], h=h, rng=nc.make_rng(seed + 1))


def check_bilinear(seed: int, h=1e-3):
    """Gradient into both the grid values and the sample positions.

    Positions are parameters here; the cell index is piecewise structure,
    so boundary-straddling coordinates are detected and skipped.
    """
    rng = nc.make_rng(seed)
    Mp = nc.Param.of(rng.standard_normal((3, 6, 6)), "M")
    Up = nc.Param.of(rng.uniform(-0.85, 0.85, (5, 2)), "u")
    R = rng.standard_normal((5, 3))
    last = {}

    def loss():
        y, cache = nc.bilinear_sample(Mp.value.astype(np.float64), Up.value.astype(np.float64))
        dM, du = nc.bilinear_sample_backward(R.astype(y.dtype), cache, Mp.value.shape)
        Mp.grad += dM.astype(nc.F32)
        Up.grad += du.astype(nc.F32)
        last["sig"] = (cache[0].tobytes(), cache[1].tobytes())
        return _proj_loss(y, R)

    return nc.grad_check(loss, [Mp, Up], h=h, rng=nc.make_rng(seed + 1),
                         signature_fn=lambda: last["sig"])


def check_pools(seed: int, h=1e-3):
    rng = nc.make_rng(seed)
    Mp = nc.Param.of(rng.standard_normal((2, 4, 4, 3)), "M")
    R = rng.standard_normal((2, 6))
    last = {}

    def loss():
        y, cache = nc.global_pools_batch(Mp.value.astype(np.float64))
        dM = nc.global_pools_batch_backward(R.astype(y.dtype), cache)
        Mp.grad += dM.astype(nc.F32)
        last["sig"] = cache[0].tobytes()
        return _proj_loss(y, R)

    return nc.grad_check(loss, [Mp], h=h, rng=nc.make_rng(seed + 1),
                         signature_fn=lambda: last["sig"])


def check_smooth_l1(seed: int, h=1e-3):
    rng = nc.make_rng(seed)
    theta = nc.Param.of(rng.standard_normal(8), "theta")
    # residuals kept away from the |d|=beta kink
    target = theta.value.astype(np.float64) + np.where(rng.standard_normal(8) > 0, 0.3, -0.3)

    def loss():
        val, grad = nc.smooth_l1(theta.value.astype(np.float64), target, 0.01)
        theta.grad += grad
        return val

    return nc.grad_check(loss, [theta], h=h, rng=nc.make_rng(seed + 1))


def check_neg_entropy(seed: int, h=1e-3):
    rng = nc.make_rng(seed)
    Z = nc.Param.of(rng.standard_normal((4, 5)), "logits")

    def loss():
        eta = nc.softmax_rows(Z.value.astype(np.float64))
        val, grad = nc.neg_entropy(eta)
        Z.grad += nc.softmax_backward(grad.astype(np.float64), eta).astype(nc.F32)
        return val

    return nc.grad_check(loss, [Z], h=h, rng=nc.make_rng(seed + 1))


def _encoder_instance(seed: int, randomize: bool):
    cfg = EncoderConfig(
        n_layers=2, d_in=6, n_voxels=5, d_model=4, grid=5, pe_freqs=3,
        hidden=8, jitter_sigma=0.0, init_seed=seed,
    )
    model = EncoderModel(cfg)
    rng = nc.make_rng(seed + 100)
    if randomize:
        for name in ("mapper.mlp.2.W", "mapper.mlp.2.b", "selector.mlp.2.W",
                     "selector.mlp.2.b", "head.W", "head.b"):
            p = model.params[name]
            p.value[...] = (0.3 * rng.standard_normal(p.value.shape)).astype(nc.F32)
    feats = rng.standard_normal((2, 2, 6, 5, 5))
    coords = rng.uniform(-0.9, 0.9, (5, 3))
    feats_cl = EncoderModel.to_channels_last(feats)
    yhat0, _ = model.forward_batch(feats_cl, coords, None, training=False)
    offset = rng.uniform(0.1, 0.5, yhat0.shape) * np.where(rng.standard_normal(yhat0.shape) > 0, 1, -1)
    y = yhat0 + offset
    return model, feats_cl, coords, y


def encoder_loss_fn(model, feats_cl, coords, y, lambda_ent=3e-5):
    """Training loss closure; also exposes a piecewise-structure signature.

    The signature captures bilinear cell indices and pool argmax positions,
    letting grad_check skip finite differences that straddle those
    boundaries.
    """
    last = {}

    def loss():
        yhat, trace = model.forward_batch(feats_cl, coords, None, training=False)
        l, dy = nc.smooth_l1(yhat, y, 0.01)
        le, de = nc.neg_entropy(trace["eta"])
        model.backward(trace, dy, lambda_ent * de)
        x0, y0 = trace["corners"]
        pool = trace["pool"][2]
        sig = (x0.tobytes(), y0.tobytes(), pool[0].tobytes() if pool is not None else b"")
        last["sig"] = sig
        return l + lambda_ent * le

    return loss, (lambda: last["sig"])


def check_encoder_random_init(seed: int, h=1e-3):
    """End-to-end loss at actual random init (zeroed final layers), h=1e-3."""
    model, feats_cl, coords, y = _encoder_instance(seed, randomize=False)
    loss, sig = encoder_loss_fn(model, feats_cl, coords, y)
    return nc.grad_check(loss, model.trainable_params(), h=h, max_coords=6,
                         rng=nc.make_rng(seed + 1), signature_fn=sig)


def check_encoder_active(seed: int, h=2.5e-4):
    """End-to-end loss with every path active (randomized output layers).

    Uses a smaller step because the layernorm curvature on small channel
    counts makes the h^2 truncation visible at h=1e-3.
    """
    model, feats_cl, coords, y = _encoder_instance(seed, randomize=True)
    loss, sig = encoder_loss_fn(model, feats_cl, coords, y)
    return nc.grad_check(loss, model.trainable_params(), h=h, max_coords=6,
                         rng=nc.make_rng(seed + 1), signature_fn=sig)


KERNEL_CHECKS = [
    ("affine", check_affine),
    ("tanh", check_tanh),
    ("softmax", check_softmax),
    ("layernorm", check_layernorm),
    ("conv2d_5x5_same", check_conv),
    ("bilinear_sample", check_bilinear),
    ("global_pools", check_pools),
    ("smooth_l1", check_smooth_l1),
    ("neg_entropy", check_neg_entropy),
    ("encoder_random_init", check_encoder_random_init),
    ("encoder_active_paths", check_encoder_active),
]


def run_gradient_suite(seed: int = 0, instances: int = 5):
    """Run every check on `instances` random instances; returns (name, report) pairs."""
    out = []
    for name, fn in KERNEL_CHECKS:
        for inst in range(instances):
            rep = fn(seed + 37 * inst)
            out.append((f"{name}[{inst}]", rep))
    return out
