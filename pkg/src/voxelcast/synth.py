"""Synthetic-brain generator with planted, verifiable ground truth.

Every mechanism the toolkit learns has a planted counterpart here: each
voxel gets a true 2D grid position ``u*``, a true layer-preference
distribution ``eta*``, and a true linear readout weight ``w*``.  Feature
grids are band-limited random cosine fields, so bilinear samples vary
smoothly in position and planted positions are identifiable by gradient
descent.  Voxel 3D coordinates embed (u*, layer depth) smoothly, so a
coordinate-conditioned MLP faces a solvable recovery problem.

Responses are ``w* . sum_l eta*_l sample(M_l, u*)``, normalized to unit
variance per voxel, plus Gaussian noise of variance 1/snr per repetition.
All generation is bit-deterministic given the spec seed; per-image seeds
are derived, so image order and chunking never matter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as dataio
from .numcore import F32, corner_weights, derive_seed, make_rng, require


@dataclass
class GroupSpec:
    """A homogeneous voxel group: one SNR level, one preference style."""

    name: str
    n_voxels: int
    snr: float
    layer_mode: str = "one_hot"  # "one_hot" | "mixture"


@dataclass
class SynthSpec:
    n_images: int
    n_layers: int
    n_channels: int
    grid: int = 8
    groups: list[GroupSpec] = field(default_factory=lambda: [GroupSpec("all", 64, 4.0)])
    n_reps: int = 1
    seed: int = 0
    position_mode: str = "spread"  # "spread": u* ~ U[-0.9,0.9]^2; "center": u* = 0
    field_max_freq: float = 1.1  # band limit, cycles per half extent
    layer_corr: float = 0.0  # variance fraction shared across layers
    weight_spread: float = 0.08  # intra-family deviation of w*

    def validate(self) -> None:
        require(self.grid >= 2, "grid must be >= 2")
        require(self.n_layers >= 1, "need at least one layer")
        require(self.n_images >= 1, "need at least one image")
        require(0.0 <= self.layer_corr < 1.0, "layer_corr must be in [0,1)")
        require(self.position_mode in ("spread", "center"), f"unknown position_mode {self.position_mode!r}")
        for g in self.groups:
            require(g.snr >= 0 or np.isinf(g.snr), f"group {g.name}: snr must be >= 0")
            require(g.layer_mode in ("one_hot", "mixture"), f"group {g.name}: bad layer_mode")
            if g.layer_mode == "mixture":
                require(self.n_layers >= 2, "mixture preferences need >= 2 layers")

    @property
    def n_voxels(self) -> int:
        return sum(g.n_voxels for g in self.groups)


@dataclass
class GroundTruth:
    u_star: np.ndarray  # [N,2] planted grid positions in [-1,1]^2
    eta_star: np.ndarray  # [N,L] planted layer distributions, rows sum to 1
    w_star: np.ndarray  # [N,D_in] planted readout weights
    snr: np.ndarray  # [N]
    group: np.ndarray  # [N] int group index
    group_names: list[str]
    n_reps: int = 1

    def to_dict(self) -> dict:
        return {
            "u_star": self.u_star.tolist(),
            "eta_star": self.eta_star.tolist(),
            "w_star": self.w_star.tolist(),
            "snr": [float(s) for s in self.snr],
            "group": self.group.tolist(),
            "group_names": list(self.group_names),
            "n_reps": int(self.n_reps),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            u_star=np.array(d["u_star"], dtype=F32),
            eta_star=np.array(d["eta_star"], dtype=F32),
            w_star=np.array(d["w_star"], dtype=F32),
            snr=np.array(d["snr"], dtype=np.float64),
            group=np.array(d["group"], dtype=np.int64),
            group_names=list(d["group_names"]),
            n_reps=int(d.get("n_reps", 1)),
        )


# ---------------------------------------------------------------------------
# Feature grids

_N_COSINES = 8


def _cosine_field(rng, n_fields: int, grid: int, max_freq: float) -> np.ndarray:
    """Sum of 8 random low-frequency 2D cosines per field -> [n_fields,G,G].

    Wave vectors have isotropic directions with magnitudes spread uniformly
    up to `max_freq` (cycles per half extent).  The slow components give the
    field long-range autocorrelation (position gradients point home from far
    away), the faster ones sharpen the optimum so positions are identifiable.
    """
    ax = np.linspace(-1.0, 1.0, grid)
    X = ax[None, :]
    Y = ax[:, None]
    mag = rng.uniform(0.1 * max_freq, max_freq, size=(n_fields, _N_COSINES))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=(n_fields, _N_COSINES))
    k = np.stack([mag * np.cos(theta), mag * np.sin(theta)], axis=-1)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(n_fields, _N_COSINES))
    amp = rng.standard_normal((n_fields, _N_COSINES)) * np.sqrt(2.0 / _N_COSINES)
    arg = (
        k[:, :, 0, None, None] * X[None, None]
        + k[:, :, 1, None, None] * Y[None, None]
    ) * np.pi + phase[:, :, None, None]
    return np.einsum("fk,fkxy->fxy", amp, np.cos(arg)).astype(F32)


def gen_feature_grids(spec: SynthSpec) -> dataio.FeatureStore:
    """Band-limited smooth random fields, deterministic per image seed."""
    spec.validate()
    L, D, G = spec.n_layers, spec.n_channels, spec.grid
    rho = spec.layer_corr
    grids = np.empty((spec.n_images, L, D, G, G), dtype=F32)
    for i in range(spec.n_images):
        rng = make_rng(derive_seed(spec.seed, 11, i))
        per_layer = _cosine_field(rng, L * D, G, spec.field_max_freq).reshape(L, D, G, G)
        if rho > 0:
            shared = _cosine_field(rng, D, G, spec.field_max_freq)
            per_layer = np.sqrt(1.0 - rho, dtype=F32) * per_layer + np.sqrt(rho, dtype=F32) * shared[None]
        grids[i] = per_layer
    ids = [f"img{i:05d}" for i in range(spec.n_images)]
    return dataio.FeatureStore(image_ids=ids, grids=grids)


# ---------------------------------------------------------------------------
# Brain geometry

# depth anchors: layer l sits at t=(l+0.5)/L on the unit depth axis; the z
# coordinate is 2t-1 before per-subject normalization


def gen_brain(spec: SynthSpec) -> tuple[dataio.VoxelTable, GroundTruth]:
    """Plant (u*, eta*, w*) per voxel and embed them in 3D coordinates.

    x,y are u* itself (identity embedding, trivially injective); z encodes
    layer preference: one-hot voxels sit near their layer's depth anchor,
    mixture voxels at the midpoint between the two preferred layers.
    """
    spec.validate()
    rng = make_rng(derive_seed(spec.seed, 22))
    L = spec.n_layers
    n = spec.n_voxels
    d_in = spec.n_channels

    # orthonormal family centers, one per group
    basis = np.linalg.qr(rng.standard_normal((d_in, max(len(spec.groups), 1))))[0]

    u_parts, eta_parts, w_parts, snr_parts, grp_parts = [], [], [], [], []
    for gi, grp in enumerate(spec.groups):
        m = grp.n_voxels
        if spec.position_mode == "spread":
            u = rng.uniform(-0.9, 0.9, size=(m, 2))
        else:
            u = np.zeros((m, 2))
        eta = np.zeros((m, L))
        if grp.layer_mode == "one_hot":
            layer = np.arange(m) % L
            rng.shuffle(layer)
            eta[np.arange(m), layer] = 1.0
        else:
            pair = np.arange(m) % (L - 1)
            rng.shuffle(pair)
            eta[np.arange(m), pair] = 0.5
            eta[np.arange(m), pair + 1] = 0.5
        w = basis[:, gi][None, :] + spec.weight_spread * rng.standard_normal((m, d_in))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        u_parts.append(u)
        eta_parts.append(eta)
        w_parts.append(w)
        snr_parts.append(np.full(m, grp.snr))
        grp_parts.append(np.full(m, gi, dtype=np.int64))

    u_star = np.concatenate(u_parts).astype(F32)
    eta_star = np.concatenate(eta_parts).astype(F32)
    w_star = np.concatenate(w_parts).astype(F32)
    snr = np.concatenate(snr_parts)
    group = np.concatenate(grp_parts)
    z = 2.0 * np.concatenate([t_part for t_part in _collect_depths(spec, eta_star, group)]) - 1.0

    raw = np.column_stack([u_star[:, 0], u_star[:, 1], z])
    subject_ids = ["synth01"] * n
    coords = dataio.normalize_coords(raw, subject_ids)
    table = dataio.VoxelTable(
        ids=[f"v{i:05d}" for i in range(n)],
        subject_ids=subject_ids,
        modalities=["synthetic"] * n,
        coords=coords,
        rois=[spec.groups[g].name for g in group],
    )
    table.validate()
    gt = GroundTruth(
        u_star=u_star,
        eta_star=eta_star,
        w_star=w_star,
        snr=snr,
        group=group,
        group_names=[g.name for g in spec.groups],
        n_reps=spec.n_reps,
    )
    return table, gt


def _collect_depths(spec: SynthSpec, eta_star: np.ndarray, group: np.ndarray):
    """Recompute each voxel's depth t from its planted preference.

    Mixture rows sit at the weighted anchor mean, one-hot rows at their
    layer anchor; a small deterministic jitter keeps coordinates distinct.
    """
    L = spec.n_layers
    band = 1.0 / L
    anchors = (np.arange(L) + 0.5) * band
    rng = make_rng(derive_seed(spec.seed, 33))
    t = eta_star @ anchors
    jitter = rng.uniform(-0.08, 0.08, size=t.shape) * band
    yield t + jitter


# ---------------------------------------------------------------------------
# Responses


def clean_signal(store: dataio.FeatureStore, gt: GroundTruth, chunk: int = 128) -> np.ndarray:
    """Planted composition w* . sum_l eta*_l sample(M_l, u*), float64 [n,N]."""
    n, L, D, G, _ = store.grids.shape
    N = gt.u_star.shape[0]
    x0, y0, fx, fy = corner_weights(gt.u_star, G)
    wx0, wx1 = (1.0 - fx)[None, None, :, None], fx[None, None, :, None]
    wy0, wy1 = (1.0 - fy)[None, None, :, None], fy[None, None, :, None]
    out = np.empty((n, N), dtype=np.float64)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        M = store.grids[lo:hi]  # [B,L,D,G,G]
        c00 = M[:, :, :, y0, x0].transpose(0, 1, 3, 2)
        c01 = M[:, :, :, y0, x0 + 1].transpose(0, 1, 3, 2)
        c10 = M[:, :, :, y0 + 1, x0].transpose(0, 1, 3, 2)
        c11 = M[:, :, :, y0 + 1, x0 + 1].transpose(0, 1, 3, 2)
        samp = wy0 * (wx0 * c00 + wx1 * c01) + wy1 * (wx0 * c10 + wx1 * c11)
        mixed = np.einsum("blnd,nl->bnd", samp, gt.eta_star, optimize=True)
        out[lo:hi] = np.einsum("bnd,nd->bn", mixed, gt.w_star, optimize=True)
    return out


def gen_responses(store: dataio.FeatureStore, gt: GroundTruth, spec: SynthSpec) -> dataio.ResponseSet:
    """Unit-variance clean signal plus per-repetition noise of variance 1/snr.

    Voxels with zero signal variance (w*=0) or snr<=0 produce pure noise;
    snr=inf produces the clean signal exactly.  Repetitions are averaged
    through `data.repetition_average`, recording the repetition count.
    """
    spec.validate()
    sig = clean_signal(store, gt)
    mu = sig.mean(axis=0, keepdims=True)
    sd = sig.std(axis=0, keepdims=True)
    ok = sd[0] > 0
    norm = np.where(ok[None, :], (sig - mu) / np.where(sd > 0, sd, 1.0), 0.0)

    sigma = np.empty(gt.snr.shape)
    finite = np.isfinite(gt.snr) & (gt.snr > 0)
    sigma[finite] = 1.0 / np.sqrt(gt.snr[finite])
    sigma[np.isinf(gt.snr)] = 0.0
    sigma[gt.snr <= 0] = 1.0
    signal_on = np.isfinite(gt.snr) & (gt.snr > 0) | np.isinf(gt.snr)

    rng = make_rng(derive_seed(spec.seed, 44))
    n, N = norm.shape
    raw: dict[str, list[np.ndarray]] = {}
    noise = rng.standard_normal((spec.n_reps, n, N))
    base = np.where(signal_on[None, :], norm, 0.0)
    for i, im in enumerate(store.image_ids):
        raw[im] = [
            (base[i] + sigma * noise[r, i]).astype(F32) for r in range(spec.n_reps)
        ]
    return dataio.repetition_average(raw, store.image_ids)


def oracle_ceiling(snr: float, n_reps: int = 1) -> float:
    """Max attainable Pearson r against a repetition-averaged response.

    With per-repetition snr s0 and R repetitions the averaged response has
    effective snr s = R*s0, and the best predictor (the clean signal)
    reaches r = sqrt(s/(1+s)).
    """
    require(n_reps >= 1, "n_reps must be >= 1")
    if np.isinf(snr):
        return 1.0
    require(snr >= 0, "snr must be >= 0")
    s = float(n_reps) * float(snr)
    return float(np.sqrt(s / (1.0 + s)))


def ceiling_per_voxel(gt: GroundTruth) -> np.ndarray:
    return np.array([oracle_ceiling(s, gt.n_reps) for s in gt.snr])


# ---------------------------------------------------------------------------
# Bundle assembly


def make_bundle(
    spec: SynthSpec,
    out_dir: str | Path | None = None,
    ratio=(90, 6, 4),
) -> dataio.Bundle:
    """Generate a complete dataset bundle; optionally persist it."""
    store = gen_feature_grids(spec)
    table, gt = gen_brain(spec)
    responses = gen_responses(store, gt, spec)
    split = dataio.split_dataset(store.image_ids, ratio=ratio, seed=derive_seed(spec.seed, 55))
    rep_counts = [spec.n_reps] * spec.n_images
    bundle = dataio.Bundle(
        store=store,
        voxels=table,
        responses=responses,
        split=split,
        rep_counts=rep_counts,
        ground_truth=gt.to_dict(),
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dataio.write_feature_store(store, out, rep_counts=rep_counts)
        dataio.write_voxel_table(table, out)
        dataio.write_responses(responses, out)
        dataio.write_split(split, out)
        (out / "ground_truth.json").write_text(json.dumps(gt.to_dict()))
    return bundle
