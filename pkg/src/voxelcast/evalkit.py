"""Scoring, noise normalization, PCA linear probing, and report emission."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import require

# fixed 10-color palette for layer coloring (SVG reports)
PALETTE = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
    "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac",
]


def pearson_per_voxel(pred: np.ndarray, target: np.ndarray):
    """Column-wise Pearson r in float64.

    Returns (r [N], degenerate [N]); zero-variance columns on either side
    get r=0 and a raised degeneracy flag.
    """
    require(pred.shape == target.shape, f"pearson: shapes {pred.shape} vs {target.shape}")
    require(pred.ndim == 2, "pearson expects [images, voxels]")
    if pred.shape[0] < 2:
        raise ValueError("pearson needs at least 2 images")
    x = pred.astype(np.float64)
    y = target.astype(np.float64)
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    sx = np.sqrt((x * x).sum(axis=0))
    sy = np.sqrt((y * y).sum(axis=0))
    degenerate = (sx == 0) | (sy == 0)
    denom = np.where(degenerate, 1.0, sx * sy)
    r = (x * y).sum(axis=0) / denom
    r[degenerate] = 0.0
    return r, degenerate


def noise_normalized(r: np.ndarray, ceiling: np.ndarray, min_ceiling: float = 0.05):
    """r / ceiling clipped to [-1, 1.5]; tiny ceilings are excluded.

    Returns (normalized [N] with NaN where excluded, excluded [N] bool).
    """
    r = np.asarray(r, dtype=np.float64)
    ceiling = np.asarray(ceiling, dtype=np.float64)
    require(r.shape == ceiling.shape, "noise_normalized: shape mismatch")
    excluded = ceiling < min_ceiling
    out = np.full(r.shape, np.nan)
    ok = ~excluded
    out[ok] = np.clip(r[ok] / ceiling[ok], -1.0, 1.5)
    return out, excluded


# ---------------------------------------------------------------------------
# PCA + ridge probing


@dataclass
class PCABasis:
    mean: np.ndarray  # [d]
    components: np.ndarray  # [c, d], rows ordered by singular value desc
    singular_values: np.ndarray  # [c]


def pca_fit(X: np.ndarray, n_components: int) -> PCABasis:
    """Centered SVD; sign convention: each component's largest-|loading| is positive."""
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    require(n >= 2, "pca_fit needs at least 2 rows")
    require(1 <= n_components <= min(n, d), f"n_components {n_components} exceeds min{(n, d)}")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:n_components]
    for i in range(comps.shape[0]):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return PCABasis(mean=mean, components=comps, singular_values=s[:n_components])


def pca_transform(basis: PCABasis, X: np.ndarray) -> np.ndarray:
    return (np.asarray(X, dtype=np.float64) - basis.mean) @ basis.components.T


def ridge_fit(Z: np.ndarray, Y: np.ndarray, ridge: float | None):
    """Closed-form ridge for all voxels at once (float64, centered).

    Returns (W [c,N], y_mean [N], z_mean [c]).  ridge=None uses the default
    1e-3 * trace(Z'Z)/c; an explicitly singular unridged system falls back
    to 1e-6 with a warning.
    """
    Z = np.asarray(Z, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    c = Z.shape[1]
    z_mean = Z.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Zc = Z - z_mean
    Yc = Y - y_mean
    A = Zc.T @ Zc
    if ridge is None:
        ridge = 1e-3 * np.trace(A) / c
    if ridge <= 0:
        if np.linalg.matrix_rank(A) < c:
            warnings.warn("singular probe system without ridge; using minimum ridge 1e-6")
            ridge = 1e-6
        else:
            ridge = 0.0
    W = np.linalg.solve(A + ridge * np.eye(c), Zc.T @ Yc)
    return W, y_mean, z_mean


@dataclass
class ScoreReport:
    voxel_ids: list[str]
    r: np.ndarray
    degenerate: np.ndarray
    roi_labels: list[str]
    r_normalized: np.ndarray | None = None
    excluded: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def mean_r(self) -> float:
        return float(self.r.mean())

    def roi_table(self) -> dict[str, dict[str, float]]:
        out = {}
        for roi in sorted(set(self.roi_labels)):
            mask = np.array([lab == roi for lab in self.roi_labels])
            vals = self.r[mask]
            row = {"n": int(mask.sum()), "mean_r": float(vals.mean()), "median_r": float(np.median(vals))}
            if self.r_normalized is not None:
                nn = self.r_normalized[mask]
                nn = nn[np.isfinite(nn)]
                row["median_r_normalized"] = float(np.median(nn)) if nn.size else float("nan")
            out[roi] = row
        return out

    def summary(self) -> dict:
        out = {
            "n_voxels": len(self.voxel_ids),
            "mean_r": self.mean_r,
            "median_r": float(np.median(self.r)),
            "per_roi": self.roi_table(),
        }
        if self.r_normalized is not None:
            nn = self.r_normalized[np.isfinite(self.r_normalized)]
            out["median_r_normalized"] = float(np.median(nn)) if nn.size else float("nan")
        out.update(self.meta)
        return out


def linear_probe(
    features: np.ndarray,
    responses: np.ndarray,
    train_idx: np.ndarray,
    test_idx: np.ndarray,
    n_components: int = 64,
    ridge: float | None = None,
    voxel_ids: list[str] | None = None,
    roi_labels: list[str] | None = None,
) -> ScoreReport:
    """Frozen-feature probe: PCA on train, per-voxel ridge, Pearson r on test."""
    n_components = min(n_components, len(train_idx) - 1, features.shape[1])
    basis = pca_fit(features[train_idx], n_components)
    z_train = pca_transform(basis, features[train_idx])
    z_test = pca_transform(basis, features[test_idx])
    W, y_mean, z_mean = ridge_fit(z_train, responses[train_idx], ridge)
    pred = (z_test - z_mean) @ W + y_mean
    r, degenerate = pearson_per_voxel(pred, responses[test_idx].astype(np.float64))
    n_vox = responses.shape[1]
    return ScoreReport(
        voxel_ids=voxel_ids or [f"v{i:05d}" for i in range(n_vox)],
        r=r,
        degenerate=degenerate,
        roi_labels=roi_labels or ["all"] * n_vox,
        meta={"n_components": int(n_components)},
    )


# ---------------------------------------------------------------------------
# Model scoring and reports


def score_model(model, bundle, split: str = "test", ceilings: np.ndarray | None = None, roi_labels=None) -> ScoreReport:
    """Pearson r per voxel of model predictions on a bundle split."""
    ids = getattr(bundle.split, split)
    idx = bundle.image_indices(ids)
    pred = model.predict(bundle.store.grids[idx], bundle.voxels.coords)
    r, degenerate = pearson_per_voxel(pred, bundle.responses.values[idx])
    labels = roi_labels if roi_labels is not None else [roi or "all" for roi in bundle.voxels.rois]
    r_norm = excluded = None
    if ceilings is not None:
        r_norm, excluded = noise_normalized(r, ceilings)
    return ScoreReport(
        voxel_ids=list(bundle.voxels.ids),
        r=r,
        degenerate=degenerate,
        roi_labels=list(labels),
        r_normalized=r_norm,
        excluded=excluded,
        meta={"split": split, "n_images": len(ids)},
    )


def write_scores_csv(report: ScoreReport, path: str | Path) -> None:
    lines = ["voxel_id,roi,r,r_normalized,flags"]
    for i, vid in enumerate(report.voxel_ids):
        rn = ""
        if report.r_normalized is not None and np.isfinite(report.r_normalized[i]):
            rn = f"{report.r_normalized[i]:.6f}"
        flags = []
        if report.degenerate[i]:
            flags.append("degenerate")
        if report.excluded is not None and report.excluded[i]:
            flags.append("low_ceiling")
        lines.append(f"{vid},{report.roi_labels[i]},{report.r[i]:.6f},{rn},{'|'.join(flags)}")
    Path(path).write_text("\n".join(lines) + "\n")


def retinamap_svg(u: np.ndarray, eta: np.ndarray, path: str | Path, size: int = 512, radius: int = 2) -> None:
    """Scatter of mapped positions colored by argmax layer weight."""
    arg = eta.argmax(axis=1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for i in range(u.shape[0]):
        cx = (float(u[i, 0]) + 1.0) / 2.0 * size
        cy = (1.0 - (float(u[i, 1]) + 1.0) / 2.0) * size
        color = PALETTE[int(arg[i]) % len(PALETTE)]
        parts.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="{radius}" fill="{color}"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def layerselector_csv(coords: np.ndarray, eta: np.ndarray, path: str | Path, n_bins: int = 10) -> None:
    """Mean layer weights per depth (z coordinate) bin."""
    L = eta.shape[1]
    edges = np.linspace(-1.0, 1.0, n_bins + 1)
    lines = ["bin_lo,bin_hi,count," + ",".join(f"eta_{l}" for l in range(L))]
    z = coords[:, 2]
    for b in range(n_bins):
        lo, hi = edges[b], edges[b + 1]
        mask = (z >= lo) & (z < hi) if b < n_bins - 1 else (z >= lo) & (z <= hi)
        if mask.any():
            means = eta[mask].mean(axis=0)
        else:
            means = np.zeros(L)
        lines.append(
            f"{lo:.3f},{hi:.3f},{int(mask.sum())}," + ",".join(f"{m:.6f}" for m in means)
        )
    Path(path).write_text("\n".join(lines) + "\n")


def emit_reports(model, bundle, out_dir: str | Path, ceilings: np.ndarray | None = None) -> dict:
    """Score on the test split and write CSV/JSON/SVG artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = score_model(model, bundle, split="test", ceilings=ceilings)
    write_scores_csv(report, out / "scores.csv")
    (out / "scores.json").write_text(json.dumps(report.summary(), indent=1, sort_keys=True))
    u, _ = model.retina_map(bundle.voxels.coords, training=False)
    eta, _ = model.layer_select(bundle.voxels.coords)
    retinamap_svg(u, eta, out / "retinamap.svg")
    layerselector_csv(bundle.voxels.coords, eta, out / "layerselector.csv")
    return report.summary()
