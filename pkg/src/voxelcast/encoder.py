"""The trainable voxel-wise encoding model.

Pipeline per image: a convolutional adapter refines each layer's feature
grid (three residual 5x5 conv + channel layer-norm blocks, then a final
5x5 conv down to ``d_model`` channels, weights shared across layers).  The
TopyNeck then picks one feature vector per voxel: the retina mapper sends
the voxel's 3D coordinate to a 2D grid position (tanh MLP over a sinusoidal
positional encoding, with optional Gaussian jitter during training), the
layer selector produces softmax weights over layers, and a pooled branch
adds an MLP of the global average/max pooled grid to every sampled vector.
A per-voxel linear head (no weight sharing) maps the mixed vector to the
predicted response.

Forward passes record a trace; `backward` consumes it and accumulates
gradients into every non-frozen parameter.  Freezing the mapper keeps
every voxel at the grid center when the model is freshly initialized
(final layers start at zero), and freezing the selector keeps uniform
layer weights - those are the FrozenRM / FrozenLS ablations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import data as dataio
from .numcore import (
    F32,
    Param,
    affine,
    affine_backward,
    conv2d_batch,
    conv2d_batch_backward,
    corner_weights,
    derive_seed,
    global_pools_batch,
    global_pools_batch_backward,
    layernorm,
    layernorm_backward,
    make_rng,
    require,
    softmax_backward,
    softmax_rows,
    tanh_act,
    tanh_backward,
)

CLAMP = 1.0 - 1e-6  # keeps u strictly inside (-1,1) even after f32 rounding


@dataclass
class EncoderConfig:
    n_layers: int
    d_in: int
    n_voxels: int
    d_model: int = 24
    grid: int = 8
    pe_freqs: int = 6
    hidden: int = 128
    conv_channels: int | None = None  # residual blocks keep width; must equal d_in
    jitter_sigma: float = 0.02
    freeze_mapper: bool = False
    freeze_selector: bool = False
    use_global_pool: bool = True
    init_seed: int = 0

    def __post_init__(self):
        if self.conv_channels is None:
            self.conv_channels = self.d_in
        require(
            self.conv_channels == self.d_in,
            "conv_channels must equal d_in: the residual blocks preserve width",
        )
        require(self.jitter_sigma >= 0, "jitter_sigma must be >= 0")

    @property
    def pe_dim(self) -> int:
        return 6 * self.pe_freqs


def positional_encode(p: np.ndarray, n_freqs: int) -> np.ndarray:
    """Sinusoidal encoding: per axis a and j<F emit sin(2^j pi p_a), cos(2^j pi p_a).

    Output is [N, 6F], axis-major then frequency, (sin, cos) interleaved.
    Note the endpoints -1 and +1 alias (all frequencies are multiples of
    pi), so encodings are injective on [-1, 1) per axis.
    """
    require(p.ndim == 2 and p.shape[1] == 3, "positional_encode expects [N,3]")
    freqs = ((2.0 ** np.arange(n_freqs)) * np.pi).astype(p.dtype)
    args = p[:, :, None] * freqs
    out = np.empty((p.shape[0], 3, n_freqs, 2), dtype=p.dtype)
    out[..., 0] = np.sin(args)
    out[..., 1] = np.cos(args)
    return out.reshape(p.shape[0], 6 * n_freqs)


# ---------------------------------------------------------------------------
# Model


class EncoderModel:
    """Parameter container plus hand-differentiated forward/backward."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        self.params: dict[str, Param] = {}
        self._build()

    # -- construction -------------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> Param:
        p = Param.of(value, name=name)
        self.params[name] = p
        return p

    def _build(self):
        cfg = self.config
        rng = make_rng(derive_seed(cfg.init_seed, 77))
        c, d = cfg.d_in, cfg.d_model

        def affine_pair(prefix, fan_in, fan_out, zero=False):
            if zero:
                w = np.zeros((fan_in, fan_out), dtype=F32)
            else:
                lim = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(F32)
            self._add(f"{prefix}.W", w)
            self._add(f"{prefix}.b", np.zeros(fan_out, dtype=F32))

        def conv_pair(prefix, cin, cout):
            lim = 1.0 / np.sqrt(cin * 25)
            self._add(f"{prefix}.K", rng.uniform(-lim, lim, size=(cout, cin, 5, 5)).astype(F32))
            self._add(f"{prefix}.b", np.zeros(cout, dtype=F32))

        for blk in range(3):
            conv_pair(f"adapter.block{blk}.conv", c, c)
            self._add(f"adapter.block{blk}.ln.gamma", np.ones(c, dtype=F32))
            self._add(f"adapter.block{blk}.ln.beta", np.zeros(c, dtype=F32))
        conv_pair("adapter.final", c, d)

        pe = cfg.pe_dim
        affine_pair("mapper.mlp.0", pe, cfg.hidden)
        affine_pair("mapper.mlp.1", cfg.hidden, cfg.hidden)
        affine_pair("mapper.mlp.2", cfg.hidden, 2, zero=True)
        affine_pair("selector.mlp.0", pe, cfg.hidden)
        affine_pair("selector.mlp.1", cfg.hidden, cfg.hidden)
        affine_pair("selector.mlp.2", cfg.hidden, cfg.n_layers, zero=True)
        affine_pair("pooled.mlp.0", 2 * d, cfg.hidden)
        affine_pair("pooled.mlp.1", cfg.hidden, d)

        self._add("head.W", np.zeros((cfg.n_voxels, d), dtype=F32))
        self._add("head.b", np.zeros(cfg.n_voxels, dtype=F32))

    # -- parameter access ----------------------------------------------------

    def param_names(self) -> list[str]:
        return list(self.params)

    def trainable_params(self) -> list[Param]:
        out = []
        for name, p in self.params.items():
            if self.config.freeze_mapper and name.startswith("mapper."):
                continue
            if self.config.freeze_selector and name.startswith("selector."):
                continue
            if not self.config.use_global_pool and name.startswith("pooled."):
                continue
            out.append(p)
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        dataio.expect_arrays(values, self.param_names())
        for name, p in self.params.items():
            arr = np.asarray(values[name], dtype=F32)
            require(arr.shape == p.value.shape, f"{name}: shape {arr.shape} vs {p.value.shape}")
            p.value[...] = arr

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def adapter_param_count(self) -> int:
        return sum(p.value.size for n, p in self.params.items() if n.startswith("adapter."))

    def head_param_count(self) -> int:
        return sum(p.value.size for n, p in self.params.items() if n.startswith("head."))

    # -- TopyNeck pieces -----------------------------------------------------

    def retina_map(self, coords: np.ndarray, training: bool = False, rng=None):
        """u' per voxel; deterministic tanh map plus training-time jitter.

        Returns (u_prime, cache).  Jitter draws N(0, sigma^2) per coordinate
        and the result is clamped just inside (-1,1); gradients pass through
        the jitter and stop at clamped coordinates.
        """
        pe = positional_encode(coords, self.config.pe_freqs)
        h1 = tanh_act(affine(pe, self.params["mapper.mlp.0.W"], self.params["mapper.mlp.0.b"]))
        h2 = tanh_act(affine(h1, self.params["mapper.mlp.1.W"], self.params["mapper.mlp.1.b"]))
        u = tanh_act(affine(h2, self.params["mapper.mlp.2.W"], self.params["mapper.mlp.2.b"]))
        if training and self.config.jitter_sigma > 0:
            require(rng is not None, "training-mode retina_map needs an rng for jitter")
            raw = u + self.config.jitter_sigma * rng.standard_normal(u.shape, dtype=F32)
        else:
            raw = u
        u_prime = np.clip(raw, -CLAMP, CLAMP)
        pass_mask = (np.abs(raw) < CLAMP).astype(u.dtype)
        return u_prime, (pe, h1, h2, u, pass_mask)

    def layer_select(self, coords: np.ndarray):
        """Softmax layer weights per voxel; deterministic."""
        pe = positional_encode(coords, self.config.pe_freqs)
        g1 = tanh_act(affine(pe, self.params["selector.mlp.0.W"], self.params["selector.mlp.0.b"]))
        g2 = tanh_act(affine(g1, self.params["selector.mlp.1.W"], self.params["selector.mlp.1.b"]))
        eta = softmax_rows(affine(g2, self.params["selector.mlp.2.W"], self.params["selector.mlp.2.b"]))
        return eta, (pe, g1, g2)

    def adapter_forward(self, feats_cl: np.ndarray):
        """Channels-last [S, G, G, C] -> ([S, G, G, D], cache); shared over layers."""
        x = feats_cl
        blocks = []
        for blk in range(3):
            K = self.params[f"adapter.block{blk}.conv.K"]
            b = self.params[f"adapter.block{blk}.conv.b"]
            gamma = self.params[f"adapter.block{blk}.ln.gamma"]
            beta = self.params[f"adapter.block{blk}.ln.beta"]
            z, xp = conv2d_batch(x, K, b)
            h, ln_cache = layernorm(z, gamma, beta)
            blocks.append((xp, ln_cache))
            x = h + x
        M, xp_final = conv2d_batch(x, self.params["adapter.final.K"], self.params["adapter.final.b"])
        return M, (blocks, xp_final)

    def adapter_backward(self, dM: np.ndarray, cache) -> None:
        blocks, xp_final = cache
        dx = conv2d_batch_backward(
            dM, xp_final, self.params["adapter.final.K"], self.params["adapter.final.b"]
        )
        for blk in range(2, -1, -1):
            xp, ln_cache = blocks[blk]
            gamma = self.params[f"adapter.block{blk}.ln.gamma"]
            beta = self.params[f"adapter.block{blk}.ln.beta"]
            K = self.params[f"adapter.block{blk}.conv.K"]
            b = self.params[f"adapter.block{blk}.conv.b"]
            dz = layernorm_backward(dx, ln_cache, gamma, beta)
            dconv = conv2d_batch_backward(dz, xp, K, b, need_dx=blk > 0)
            if blk > 0:
                dx = dx + dconv

    # -- full forward / backward ---------------------------------------------

    @staticmethod
    def to_channels_last(grids: np.ndarray) -> np.ndarray:
        """Store layout [.., L, C, G, G] -> hot-path layout [.., L, G, G, C]."""
        return np.ascontiguousarray(np.moveaxis(grids, -3, -1))

    def forward_batch(
        self,
        feats_cl: np.ndarray,
        coords: np.ndarray,
        idx: np.ndarray | None = None,
        training: bool = False,
        rng=None,
    ):
        """Predict responses for a batch of images over voxel subsets.

        feats_cl: channels-last [B, L, G, G, C] (see `to_channels_last`);
        coords: [N, 3]; idx: [B, n] voxel indices per image (None = all
        voxels for every image).  Returns (yhat [B, n], trace).
        """
        cfg = self.config
        require(feats_cl.ndim == 5, "feats must be [B,L,G,G,C]")
        B, L, G, G2, C = feats_cl.shape
        require(
            (L, C, G, G) == (cfg.n_layers, cfg.d_in, cfg.grid, cfg.grid) and G == G2,
            f"feats shape {feats_cl.shape} does not match config",
        )
        N = coords.shape[0]
        require(N == cfg.n_voxels, f"coords rows {N} != configured n_voxels {cfg.n_voxels}")
        if idx is None:
            idx = np.broadcast_to(np.arange(N, dtype=np.int64), (B, N))
        else:
            idx = np.asarray(idx, dtype=np.int64)
            require(idx.ndim == 2 and idx.shape[0] == B, "idx must be [B, n]")
            if idx.size and (idx.min() < 0 or idx.max() >= N):
                raise IndexError("voxel index out of range")

        M, adapter_cache = self.adapter_forward(feats_cl.reshape(B * L, G, G, C))
        D = cfg.d_model
        M5 = M.reshape(B, L, G, G, D)

        if cfg.use_global_pool:
            v, pool_cache = global_pools_batch(M)
            a0 = affine(v, self.params["pooled.mlp.0.W"], self.params["pooled.mlp.0.b"])
            t0 = tanh_act(a0)
            q = affine(t0, self.params["pooled.mlp.1.W"], self.params["pooled.mlp.1.b"])
            q3 = q.reshape(B, L, D)
        else:
            v = t0 = pool_cache = None
            q3 = np.zeros((B, L, D), dtype=F32)

        u_prime, mapper_cache = self.retina_map(coords, training=training, rng=rng)
        eta, selector_cache = self.layer_select(coords)

        x0, y0, fx, fy = corner_weights(u_prime, G)
        bi = np.arange(B)[:, None, None]
        li = np.arange(L)[None, :, None]
        yy = y0[idx][:, None, :]
        xx = x0[idx][:, None, :]
        c00 = M5[bi, li, yy, xx]
        c01 = M5[bi, li, yy, xx + 1]
        c10 = M5[bi, li, yy + 1, xx]
        c11 = M5[bi, li, yy + 1, xx + 1]
        fxs = fx[idx][:, None, :, None]
        fys = fy[idx][:, None, :, None]
        samp = (1 - fys) * ((1 - fxs) * c00 + fxs * c01) + fys * ((1 - fxs) * c10 + fxs * c11)
        dcx = (1 - fys) * (c01 - c00) + fys * (c11 - c10)
        dcy = (1 - fxs) * (c10 - c00) + fxs * (c11 - c01)

        m = samp + q3[:, :, None, :]
        eta_sel = eta[idx]
        mstar = np.einsum("blnd,bnl->bnd", m, eta_sel, optimize=True)

        w_sel = self.params["head.W"].value[idx]
        yhat = np.einsum("bnd,bnd->bn", mstar, w_sel, optimize=True) + self.params["head.b"].value[idx]

        trace = {
            "B": B, "L": L, "G": G, "N": N,
            "idx": idx,
            "adapter_cache": adapter_cache,
            "pool": (v, t0, pool_cache),
            "mapper_cache": mapper_cache,
            "selector_cache": selector_cache,
            "eta": eta,
            "eta_sel": eta_sel,
            "corners": (x0, y0),
            "dcx": dcx, "dcy": dcy,
            "fx": fx, "fy": fy,
            "m": m,
            "mstar": mstar,
            "u_prime": u_prime,
        }
        return yhat, trace

    def backward(self, trace: dict, dyhat: np.ndarray, deta_extra: np.ndarray | None = None) -> None:
        """Accumulate gradients for a recorded forward pass.

        dyhat is [B, n] (zeros for voxels outside the loss masks);
        deta_extra is an optional [N, L] gradient applied directly to the
        selector output (the entropy regularizer enters here).
        """
        cfg = self.config
        B, L, G, N = trace["B"], trace["L"], trace["G"], trace["N"]
        D = cfg.d_model
        idx = trace["idx"]
        flat_idx = idx.reshape(-1)
        m = trace["m"]
        mstar = trace["mstar"]
        eta = trace["eta"]
        eta_sel = trace["eta_sel"]

        # heads
        contrib_w = (dyhat[:, :, None] * mstar).reshape(-1, D)
        _scatter_rows(self.params["head.W"].grad, flat_idx, contrib_w, N)
        self.params["head.b"].grad += np.bincount(
            flat_idx, weights=dyhat.reshape(-1).astype(np.float64), minlength=N
        ).astype(F32)
        dmstar = dyhat[:, :, None] * self.params["head.W"].value[idx]

        # mixing over layers
        deta_sel = np.einsum("bnd,blnd->bnl", dmstar, m, optimize=True)
        dm = np.einsum("bnl,bnd->blnd", eta_sel, dmstar, optimize=True)

        deta = np.zeros((N, L), dtype=F32)
        _scatter_rows(deta, flat_idx, deta_sel.reshape(-1, L), N)
        if deta_extra is not None:
            deta = deta + deta_extra
        dzeta = softmax_backward(deta, eta)
        if not cfg.freeze_selector:
            pe, g1, g2 = trace["selector_cache"]
            dg2 = tanh_backward(
                affine_backward(dzeta, g2, self.params["selector.mlp.2.W"], self.params["selector.mlp.2.b"]),
                g2,
            )
            dg1 = tanh_backward(
                affine_backward(dg2, g1, self.params["selector.mlp.1.W"], self.params["selector.mlp.1.b"]),
                g1,
            )
            affine_backward(dg1, pe, self.params["selector.mlp.0.W"], self.params["selector.mlp.0.b"])

        # pooled branch
        dM = np.zeros((B * L, G, G, D), dtype=F32)
        if cfg.use_global_pool:
            v, t0, pool_cache = trace["pool"]
            dq = dm.sum(axis=2).reshape(B * L, D)
            dt0 = affine_backward(dq, t0, self.params["pooled.mlp.1.W"], self.params["pooled.mlp.1.b"])
            da0 = tanh_backward(dt0, t0)
            dv = affine_backward(da0, v, self.params["pooled.mlp.0.W"], self.params["pooled.mlp.0.b"])
            dM += global_pools_batch_backward(dv, pool_cache)

        # bilinear sampling: scatter corner gradients and collect du'
        x0, y0 = trace["corners"]
        fx, fy = trace["fx"], trace["fy"]
        fxs = fx[idx][:, None, :, None]
        fys = fy[idx][:, None, :, None]
        dsamp = dm
        cell00 = (y0 * G + x0)[idx][:, None, :]  # [B, 1, n]
        base = (np.arange(B)[:, None, None] * L + np.arange(L)[None, :, None]) * (G * G)
        buf = np.zeros((B * L * G * G, D), dtype=F32)
        for cell_off, w in (
            (0, (1 - fys) * (1 - fxs)),
            (1, (1 - fys) * fxs),
            (G, fys * (1 - fxs)),
            (G + 1, fys * fxs),
        ):
            keys = (base + cell00 + cell_off).reshape(-1)
            _scatter_rows(buf, keys, (dsamp * w).reshape(-1, D), B * L * G * G)
        dM += buf.reshape(B * L, G, G, D)

        dfx_c = np.einsum("blnd,blnd->bln", dsamp, trace["dcx"], optimize=True)
        dfy_c = np.einsum("blnd,blnd->bln", dsamp, trace["dcy"], optimize=True)
        scale = F32((G - 1) / 2.0)
        dfx_v = np.bincount(
            np.broadcast_to(idx[:, None, :], dfx_c.shape).reshape(-1),
            weights=dfx_c.reshape(-1).astype(np.float64),
            minlength=N,
        )
        dfy_v = np.bincount(
            np.broadcast_to(idx[:, None, :], dfy_c.shape).reshape(-1),
            weights=dfy_c.reshape(-1).astype(np.float64),
            minlength=N,
        )
        du_prime = np.stack([dfx_v, dfy_v], axis=1).astype(F32) * scale

        if not cfg.freeze_mapper:
            pe, h1, h2, u, pass_mask = trace["mapper_cache"]
            du = du_prime * pass_mask
            dzu = tanh_backward(du, u)
            dh2 = tanh_backward(
                affine_backward(dzu, h2, self.params["mapper.mlp.2.W"], self.params["mapper.mlp.2.b"]),
                h2,
            )
            dh1 = tanh_backward(
                affine_backward(dh2, h1, self.params["mapper.mlp.1.W"], self.params["mapper.mlp.1.b"]),
                h1,
            )
            affine_backward(dh1, pe, self.params["mapper.mlp.0.W"], self.params["mapper.mlp.0.b"])

        self.adapter_backward(dM, trace["adapter_cache"])

    # -- inference ------------------------------------------------------------

    def predict(
        self,
        feats: np.ndarray,
        coords: np.ndarray,
        voxel_idx: np.ndarray | None = None,
        chunk: int = 64,
    ) -> np.ndarray:
        """Deterministic inference over many images -> [n_images, n_voxels].

        feats is in store layout [n, L, C, G, G].
        """
        n = feats.shape[0]
        sel = None if voxel_idx is None else np.asarray(voxel_idx, dtype=np.int64)
        outs = []
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            batch = self.to_channels_last(feats[lo:hi])
            if sel is None:
                yhat, _ = self.forward_batch(batch, coords, None, training=False)
            else:
                idx = np.broadcast_to(sel, (hi - lo, sel.size))
                yhat, _ = self.forward_batch(batch, coords, idx, training=False)
            outs.append(yhat)
        return np.concatenate(outs, axis=0)

    def mstar_features(self, feats: np.ndarray, coords: np.ndarray, chunk: int = 64) -> np.ndarray:
        """Inference-time mixed feature vectors m*: [n_images, N, D]."""
        n = feats.shape[0]
        outs = []
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            _, trace = self.forward_batch(self.to_channels_last(feats[lo:hi]), coords, None, training=False)
            outs.append(trace["mstar"])
        return np.concatenate(outs, axis=0)


def _scatter_rows(grad2d, flat_idx, values2d, n_rows):
    """Row-indexed scatter-add via per-column bincount (fast for small D)."""
    for col in range(values2d.shape[1]):
        grad2d[:, col] += np.bincount(
            flat_idx, weights=values2d[:, col].astype(np.float64), minlength=n_rows
        ).astype(F32)


# ---------------------------------------------------------------------------
# Spec-level convenience wrappers


def voxel_features(M: np.ndarray, u_prime: np.ndarray, eta: np.ndarray, model: EncoderModel) -> np.ndarray:
    """m*_i = sum_l eta_il (sample(M_l, u'_i) + q_l) for one image's grids.

    M is [L, D, G, G] (already adapted); the pooled branch contribution q_l
    is computed from M itself.  Reference composition used by tests; the
    batched forward implements the same arithmetic.
    """
    from .numcore import bilinear_sample, global_pools

    L, D, G, _ = M.shape
    cfg = model.config
    n = u_prime.shape[0]
    require(eta.shape == (n, L), "voxel_features: eta must be [N,L]")
    if cfg.use_global_pool:
        pooled = np.stack([global_pools(M[layer])[0] for layer in range(L)])
        t0 = tanh_act(affine(pooled, model.params["pooled.mlp.0.W"], model.params["pooled.mlp.0.b"]))
        q = affine(t0, model.params["pooled.mlp.1.W"], model.params["pooled.mlp.1.b"])
    else:
        q = np.zeros((L, D), dtype=F32)
    out = np.zeros((n, D), dtype=F32)
    for layer in range(L):
        samp, _ = bilinear_sample(M[layer], u_prime)
        out += eta[:, layer : layer + 1] * (samp + q[layer])
    return out


def forward(
    model: EncoderModel,
    feats: np.ndarray,
    coords: np.ndarray,
    voxel_idx: np.ndarray | None = None,
    training: bool = False,
    rng=None,
) -> np.ndarray:
    """Single-image forward: feats [L,C,G,G] -> predictions over the subset."""
    require(feats.ndim == 4, "forward expects a single image [L,C,G,G]")
    idx = None
    if voxel_idx is not None:
        idx = np.asarray(voxel_idx, dtype=np.int64)[None, :]
    feats_cl = EncoderModel.to_channels_last(feats[None])
    yhat, _ = model.forward_batch(feats_cl, coords, idx, training=training, rng=rng)
    return yhat[0]


# ---------------------------------------------------------------------------
# Checkpoint I/O


def save_model(model: EncoderModel, path: str | Path, include_optimizer: bool = False, extra_meta: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {n: p.value for n, p in model.params.items()}
    if include_optimizer:
        for n, p in model.params.items():
            arrays[f"{n}.opt_m"] = p.opt_m
            arrays[f"{n}.opt_s"] = p.opt_s
    meta = {
        "kind": "encoder",
        "config": asdict(model.config),
        "step_counts": {n: p.step_count for n, p in model.params.items()} if include_optimizer else None,
    }
    if extra_meta:
        meta.update(extra_meta)
    dataio.save_checkpoint(arrays, meta, path)


def load_model(path: str | Path) -> tuple[EncoderModel, dict]:
    arrays, meta = dataio.load_checkpoint(path)
    require(meta.get("kind") == "encoder", f"{path}: not an encoder checkpoint")
    cfg = EncoderConfig(**meta["config"])
    model = EncoderModel(cfg)
    dataio.expect_arrays(arrays, model.param_names(), str(path))
    model.load_values({n: arrays[n] for n in model.param_names()})
    steps = meta.get("step_counts")
    for n, p in model.params.items():
        if f"{n}.opt_m" in arrays:
            p.opt_m[...] = arrays[f"{n}.opt_m"]
            p.opt_s[...] = arrays[f"{n}.opt_s"]
            if steps:
                p.step_count = int(steps[n])
    return model, meta
