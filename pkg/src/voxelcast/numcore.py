"""float32 tensor kernels with hand-derived backward passes.

All dense math in this package flows through the functions here: affine
layers, activations, channel layer-norm, 5x5 same-padding convolution,
bilinear grid sampling, global pooling, the loss heads, and the AdaBelief
optimizer.  There is deliberately no autodiff tape: the model topology is
fixed, every forward has a matching hand-written backward, and `grad_check`
verifies each pairing with central finite differences.

Conventions
-----------
* arrays are float32 C-order; loss values accumulate in float64
* forward functions return ``(y, cache)`` when the backward needs saved
  state; backwards take ``dy`` plus the cache, accumulate parameter
  gradients in place, and return the input gradient
* reductions use a fixed left-to-right order so repeated runs on the same
  machine are bit-identical
* randomness comes from PCG64 generators only (normal variates via
  numpy's ziggurat implementation); `derive_seed` gives stable child
  seeds through SeedSequence mixing
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

F32 = np.float32


class ContractViolation(ValueError):
    """An operation was called with inputs that break its contract."""


class NumericError(ArithmeticError):
    """A non-finite value reached a checked boundary (loss, grads, ...)."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seed gives an identical stream."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(*parts: int) -> int:
    """Stable 64-bit child seed mixed from integer parts."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    return int(ss.generate_state(1, np.uint64)[0])


def as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=F32)


def require(cond: bool, msg: str) -> None:
    if not cond:
        raise ContractViolation(msg)


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class Param:
    """A trainable array plus its gradient and AdaBelief state."""

    value: np.ndarray
    grad: np.ndarray
    opt_m: np.ndarray
    opt_s: np.ndarray
    step_count: int = 0
    name: str = ""

    @classmethod
    def of(cls, value, name: str = "") -> "Param":
        v = as_f32(value)
        return cls(
            value=v,
            grad=np.zeros_like(v),
            opt_m=np.zeros_like(v),
            opt_s=np.zeros_like(v),
            step_count=0,
            name=name,
        )

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def clone(self) -> "Param":
        return Param(
            value=self.value.copy(),
            grad=self.grad.copy(),
            opt_m=self.opt_m.copy(),
            opt_s=self.opt_s.copy(),
            step_count=self.step_count,
            name=self.name,
        )


# ---------------------------------------------------------------------------
# Affine / activations


def affine(x: np.ndarray, W: Param, b: Param) -> np.ndarray:
    """y = x @ W + b over the last axis."""
    require(x.shape[-1] == W.value.shape[0], f"affine: x has {x.shape[-1]} features, W expects {W.value.shape[0]}")
    require(W.value.shape[1] == b.value.shape[0], "affine: W/b output dims differ")
    return x @ W.value + b.value


def affine_backward(dy: np.ndarray, x: np.ndarray, W: Param, b: Param) -> np.ndarray:
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    W.grad += x2.T @ dy2
    b.grad += dy2.sum(axis=0)
    return dy @ W.value.T


def tanh_act(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * (1.0 - y * y)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def layernorm(x: np.ndarray, gamma: Param, beta: Param, eps: float = 1e-5):
    """Normalize the trailing (channel) axis per position: (x-mu)/sqrt(var+eps)*gamma+beta.

    Returns (y, cache) where cache feeds `layernorm_backward`.
    """
    require(x.shape[-1] == gamma.value.shape[0] == beta.value.shape[0], "layernorm: channel dims differ")
    mu = x.mean(axis=-1, keepdims=True)
    xmu = x - mu
    var = np.mean(xmu * xmu, axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + F32(eps))
    xhat = xmu * ivar
    y = xhat * gamma.value + beta.value
    return y, (xhat, ivar)


def layernorm_backward(dy: np.ndarray, cache, gamma: Param, beta: Param) -> np.ndarray:
    xhat, ivar = cache
    lead = tuple(range(dy.ndim - 1))
    gamma.grad += (dy * xhat).sum(axis=lead)
    beta.grad += dy.sum(axis=lead)
    dxhat = dy * gamma.value
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return ivar * (dxhat - m1 - xhat * m2)


# ---------------------------------------------------------------------------
# 5x5 same-padding convolution (cross-correlation, zero pad)
#
# The batched kernels run channels-last and decompose the convolution into
# 25 shifted matmuls over the channel axis: far less copy traffic than
# im2col on the small grids this model uses.


def _pad2(x: np.ndarray) -> np.ndarray:
    s, g, h, c = x.shape
    xp = np.zeros((s, g + 4, h + 4, c), dtype=x.dtype)
    xp[:, 2:-2, 2:-2, :] = x
    return xp


def conv2d_batch(x: np.ndarray, K: Param, b: Param | None):
    """Zero-padded 'same' 5x5 convolution: x [S,G,H,C] -> (y [S,G,H,O], xp).

    The padded input xp is returned for reuse by the backward pass.
    """
    s, g, h, c = x.shape
    o = K.value.shape[0]
    require(K.value.shape[1:] == (c, 5, 5), f"conv2d: kernel {K.value.shape} does not fit input {x.shape}")
    xp = _pad2(x)
    k2 = np.ascontiguousarray(K.value.transpose(2, 3, 1, 0))  # [5,5,C,O]
    y = np.zeros((s, g, h, o), dtype=np.result_type(x.dtype, F32))
    for a in range(5):
        for bb in range(5):
            y += xp[:, a : a + g, bb : bb + h, :] @ k2[a, bb]
    if b is not None:
        y += b.value
    return y, xp


def conv2d_batch_backward(
    dy: np.ndarray, xp: np.ndarray, K: Param, b: Param | None, need_dx: bool = True
) -> np.ndarray | None:
    """Backward of `conv2d_batch` given the cached padded input."""
    s, g, h, o = dy.shape
    c = K.value.shape[1]
    dyf = dy.reshape(-1, o)
    dk2 = np.empty((5, 5, c, o), dtype=F32)
    for a in range(5):
        for bb in range(5):
            sl = np.ascontiguousarray(xp[:, a : a + g, bb : bb + h, :]).reshape(-1, c)
            dk2[a, bb] = sl.T @ dyf
    K.grad += dk2.transpose(3, 2, 0, 1)
    if b is not None:
        b.grad += dyf.sum(axis=0)
    if not need_dx:
        return None
    # adjoint of same-padding cross-correlation: same shifted-matmul loop on
    # the padded dy with the spatially flipped, in/out-swapped kernel
    # (pre-transposed contiguous, which matmul handles much faster)
    k2t = np.ascontiguousarray(K.value.transpose(2, 3, 0, 1)[::-1, ::-1])
    dyp = _pad2(dy)
    dx = np.zeros((s, g, h, c), dtype=dy.dtype)
    for a in range(5):
        for bb in range(5):
            dx += dyp[:, a : a + g, bb : bb + h, :] @ k2t[a, bb]
    return dx


def conv2d_5x5_same(x: np.ndarray, K: Param, b: Param) -> np.ndarray:
    """Channel-first single-grid wrapper: [Cin,G,H] -> [Cout,G,H]."""
    require(x.ndim == 3, "conv2d_5x5_same expects [Cin,G,H]")
    y, _ = conv2d_batch(np.ascontiguousarray(x.transpose(1, 2, 0))[None], K, b)
    return np.ascontiguousarray(y[0].transpose(2, 0, 1))


def conv2d_5x5_same_backward(dy: np.ndarray, x: np.ndarray, K: Param, b: Param) -> np.ndarray:
    xp = _pad2(np.ascontiguousarray(x.transpose(1, 2, 0))[None])
    dycl = np.ascontiguousarray(dy.transpose(1, 2, 0))[None]
    dx = conv2d_batch_backward(dycl, xp, K, b)
    return np.ascontiguousarray(dx[0].transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# Bilinear grid sampling (align-corners)


def corner_weights(u: np.ndarray, grid: int):
    """Map [-1,1]^2 coords to corner indices and fractions, align-corners.

    u[...,0] is the column (x) axis, u[...,1] the row (y) axis; u=(-1,-1)
    lands on node (0,0), u=(1,1) on (G-1,G-1).  Returns (x0, y0, fx, fy)
    with x0,y0 int64 in [0,G-2] and fx,fy in [0,1].  Dtype follows u, so a
    float64 pass stays float64 end to end.
    """
    t = (u + 1.0) * ((grid - 1) / 2.0)
    i0 = np.clip(np.floor(t), 0, grid - 2).astype(np.int64)
    f = t - i0.astype(t.dtype)
    return i0[..., 0], i0[..., 1], f[..., 0], f[..., 1]


def bilinear_sample(M: np.ndarray, u: np.ndarray):
    """Sample per-channel values of M [D,G,G] at positions u [N,2].

    Returns (y [N,D], cache).  Exact at grid nodes: the blend reduces to a
    single corner with weight one.
    """
    d, g, g2 = M.shape
    require(g == g2, "bilinear_sample: grid must be square")
    x0, y0, fx, fy = corner_weights(u, g)
    c00 = M[:, y0, x0].T
    c01 = M[:, y0, x0 + 1].T
    c10 = M[:, y0 + 1, x0].T
    c11 = M[:, y0 + 1, x0 + 1].T
    wx0 = (1.0 - fx)[:, None]
    wx1 = fx[:, None]
    wy0 = (1.0 - fy)[:, None]
    wy1 = fy[:, None]
    y = wy0 * (wx0 * c00 + wx1 * c01) + wy1 * (wx0 * c10 + wx1 * c11)
    cache = (x0, y0, fx, fy, c00, c01, c10, c11, g)
    return y, cache


def bilinear_sample_backward(dy: np.ndarray, cache, M_shape):
    """Backward of `bilinear_sample`: returns (dM, du)."""
    x0, y0, fx, fy, c00, c01, c10, c11, g = cache
    wx0 = (1.0 - fx)[:, None]
    wx1 = fx[:, None]
    wy0 = (1.0 - fy)[:, None]
    wy1 = fy[:, None]
    dM = np.zeros(M_shape, dtype=dy.dtype)
    np.add.at(dM.transpose(1, 2, 0), (y0, x0), dy * (wy0 * wx0))
    np.add.at(dM.transpose(1, 2, 0), (y0, x0 + 1), dy * (wy0 * wx1))
    np.add.at(dM.transpose(1, 2, 0), (y0 + 1, x0), dy * (wy1 * wx0))
    np.add.at(dM.transpose(1, 2, 0), (y0 + 1, x0 + 1), dy * (wy1 * wx1))
    dfx = (dy * (wy0 * (c01 - c00) + wy1 * (c11 - c10))).sum(axis=1)
    dfy = (dy * (wx0 * (c10 - c00) + wx1 * (c11 - c01))).sum(axis=1)
    scale = F32((g - 1) / 2.0)
    du = np.stack([dfx * scale, dfy * scale], axis=1)
    return dM, du


# ---------------------------------------------------------------------------
# Global pooling


def global_pools_batch(M: np.ndarray):
    """Spatial mean and max per channel: [S,G,H,D] -> ([S,2D], cache).

    Output is the per-channel spatial mean followed by the spatial max.
    """
    s, g, h, d = M.shape
    flat = M.reshape(s, g * h, d)
    avg = flat.mean(axis=1)
    amax = flat.argmax(axis=1)  # first max in row-major spatial order
    mx = np.take_along_axis(flat, amax[:, None, :], axis=1)[:, 0, :]
    return np.concatenate([avg, mx], axis=1), (amax, (s, g, h, d))


def global_pools_batch_backward(dy: np.ndarray, cache) -> np.ndarray:
    amax, (s, g, h, d) = cache
    dM = np.empty((s, g * h, d), dtype=dy.dtype)
    dM[...] = (dy[:, :d] / (g * h))[:, None, :]
    # max half routes gradient only to the (first, row-major) argmax
    flat_pos = (np.arange(s)[:, None] * (g * h) + amax) * d + np.arange(d)
    np.add.at(dM.reshape(-1), flat_pos.reshape(-1), dy[:, d:].reshape(-1))
    return dM.reshape(s, g, h, d)


def global_pools(M: np.ndarray):
    """Channel-first single-grid wrapper: [D,G,H] -> ([2D], cache)."""
    y, cache = global_pools_batch(np.ascontiguousarray(M.transpose(1, 2, 0))[None])
    return y[0], cache


def global_pools_backward(dy: np.ndarray, cache) -> np.ndarray:
    dM = global_pools_batch_backward(dy[None], cache)[0]
    return np.ascontiguousarray(dM.transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# Losses (values in float64, gradients in float32)


def smooth_l1(pred: np.ndarray, target: np.ndarray, beta: float):
    """Mean smooth-L1: 0.5 d^2/beta for |d|<beta else |d|-0.5 beta.

    Returns (loss: float, grad wrt pred: float32 array).
    """
    require(pred.shape == target.shape, f"smooth_l1: shape {pred.shape} vs {target.shape}")
    require(beta > 0, "smooth_l1: beta must be positive")
    d = pred.astype(np.float64) - target.astype(np.float64)
    ad = np.abs(d)
    quad = ad < beta
    per = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    n = max(per.size, 1)
    loss = float(per.sum() / n)
    grad = np.where(quad, d / beta, np.sign(d)) / n
    return loss, grad.astype(F32)


def neg_entropy(eta: np.ndarray):
    """Mean over rows of sum_l eta*ln(eta); 0*ln(0) := 0.

    Value lies in [-ln L, 0].  Returns (loss: float, grad: float32 [N,L]).
    """
    require(eta.ndim == 2, "neg_entropy expects [N,L]")
    require(np.all(eta >= -1e-6), "neg_entropy: negative probabilities")
    rs = eta.sum(axis=1)
    require(bool(np.all(np.abs(rs - 1.0) < 1e-3)), "neg_entropy: rows must sum to 1")
    e = eta.astype(np.float64)
    pos = e > 0
    term = np.where(pos, e * np.log(np.where(pos, e, 1.0)), 0.0)
    n = eta.shape[0]
    loss = float(term.sum(axis=1).mean())
    grad = np.where(pos, np.log(np.where(pos, e, 1.0)) + 1.0, 0.0) / n
    return loss, grad.astype(F32)


# ---------------------------------------------------------------------------
# AdaBelief


def adabelief_step(
    params: list[Param],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One AdaBelief update over `params`; zeroes gradients afterwards.

    m tracks the gradient, s the belief (g-m)^2 with eps added inside the
    update; both are bias-corrected.  Weight decay is decoupled and applied
    to the value before the gradient step.
    """
    if not params:
        return
    steps = {p.step_count for p in params}
    require(len(steps) == 1, "adabelief_step: inconsistent step counts")
    t = params[0].step_count + 1
    bc1 = F32(1.0 - beta1**t)
    bc2 = F32(1.0 - beta2**t)
    b1 = F32(beta1)
    b2 = F32(beta2)
    lr32 = F32(lr)
    eps32 = F32(eps)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter '{p.name or '<unnamed>'}'")
        g = p.grad
        if weight_decay:
            p.value *= F32(1.0 - lr * weight_decay)
        p.opt_m *= b1
        p.opt_m += (F32(1.0) - b1) * g
        diff = g - p.opt_m
        p.opt_s *= b2
        p.opt_s += (F32(1.0) - b2) * diff * diff + eps32
        mhat = p.opt_m / bc1
        shat = p.opt_s / bc2
        p.value -= lr32 * mhat / (np.sqrt(shat) + eps32)
        p.step_count = t
        p.grad[...] = 0


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


@dataclass
class GradCheckEntry:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    loss: float
    worst: list[GradCheckEntry] = field(default_factory=list)
    skipped: int = 0  # coordinates straddling a piecewise boundary

    def summary(self) -> str:
        head = "PASS" if self.passed else "FAIL"
        lines = [f"[{head}] grad check: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e})"]
        for e in self.worst[:5]:
            lines.append(
                f"  {e.param}[{e.index}]: analytic {e.analytic:.6e} numeric {e.numeric:.6e} rel {e.rel_err:.3e}"
            )
        return "\n".join(lines)


def grad_check(
    loss_and_grad,
    params: list[Param],
    h: float = 1e-3,
    tol: float = 1e-3,
    max_coords: int = 16,
    rng: np.random.Generator | None = None,
    denom_floor: float = 1e-4,
    signature_fn=None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    `loss_and_grad` is a deterministic closure that accumulates gradients
    into `params` and returns the scalar loss.  A random subsample of up to
    `max_coords` coordinates is perturbed per parameter; the relative error
    uses max(|analytic|, |numeric|, denom_floor) as denominator so that
    coordinates with negligible gradient do not dominate the report.

    The loss is piecewise smooth (max-pool argmax, bilinear cell indices);
    a central difference straddling a piece boundary measures nothing.
    `signature_fn`, when given, returns a hashable snapshot of that
    discrete structure after each evaluation, and coordinates whose +h/-h
    signatures differ are skipped (counted in the report).

    Parameter values are restored bit-exactly; gradients are left zeroed.
    """
    require(h > 0, "grad_check: h must be positive")
    rng = rng or make_rng(0)
    for p in params:
        p.zero_grad()
    loss0 = float(loss_and_grad())
    analytic = [p.grad.copy() for p in params]
    entries: list[GradCheckEntry] = []
    skipped = 0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        n = flat.size
        if n == 0:
            continue
        coords = rng.choice(n, size=min(max_coords, n), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + F32(h)
            vp = float(flat[c])
            for q in params:
                q.zero_grad()
            lp = float(loss_and_grad())
            sig_p = signature_fn() if signature_fn else None
            flat[c] = orig - F32(h)
            vm = float(flat[c])
            for q in params:
                q.zero_grad()
            lm = float(loss_and_grad())
            sig_m = signature_fn() if signature_fn else None
            flat[c] = orig
            if signature_fn and sig_p != sig_m:
                skipped += 1
                continue
            numeric = (lp - lm) / (vp - vm)
            a = float(ga.reshape(-1)[c])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
            entries.append(GradCheckEntry(p.name or "<param>", int(c), a, numeric, rel))
    for q in params:
        q.zero_grad()
    entries.sort(key=lambda e: e.rel_err, reverse=True)
    max_rel = entries[0].rel_err if entries else 0.0
    return GradCheckReport(
        max_rel_err=max_rel, tol=tol, passed=max_rel <= tol, loss=loss0, worst=entries[:10],
        skipped=skipped,
    )
