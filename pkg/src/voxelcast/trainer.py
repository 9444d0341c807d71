"""Single-model training: composite loss, minibatching, early stopping, soup.

An epoch is a configurable fraction of the training images (default 10%);
the model validates at every epoch boundary and early-stops after
`patience` non-improving validations, where improvement means the mean
validation Pearson r over the conditioning voxel set rises by more than a
1e-5 tie tolerance.  The top-k snapshots by validation score feed the
greedy model soup.  Minibatches mix all subjects (images are drawn from
the pooled shuffled list) and each datapoint samples up to `voxel_cap`
voxels without replacement.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Bundle
from .encoder import EncoderModel
from .evalkit import pearson_per_voxel
from .numcore import (
    F32,
    NumericError,
    adabelief_step,
    derive_seed,
    make_rng,
    neg_entropy,
    require,
    smooth_l1,
)

TIE_TOL = 1e-5


@dataclass
class TrainConfig:
    lr: float = 0.003
    batch: int = 128
    wd: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    beta_smoothl1: float = 0.01
    lambda_ent: float = 0.00003
    lambda_dk: float = 1.0
    patience: int = 20
    epoch_fraction: float = 0.1
    voxel_cap: int = 512  # sampled voxels per datapoint (large-scale runs use 8000)
    soup_top_k: int = 10
    max_epochs: int = 400
    seed: int = 0

    def validate(self):
        require(self.lr > 0 and self.batch >= 1, "lr/batch must be positive")
        require(0 < self.epoch_fraction <= 1.0, "epoch_fraction must be in (0,1]")
        require(self.patience >= 1 and self.voxel_cap >= 1, "patience/voxel_cap must be >= 1")
        require(self.max_epochs >= 1, "max_epochs must be >= 1")


@dataclass
class LossTerms:
    gt_loss: float = 0.0
    dk_loss: float = 0.0
    ent_loss: float = 0.0
    total: float = 0.0


@dataclass
class StageRole:
    """What supervises a run: masks, teacher, and the conditioning set.

    gt_voxels / dk_voxels are boolean [N] masks (None means all / none);
    teacher is [n_images, N] aligned to the feature-store image order and
    only read on train/val images; conditioning indexes the voxels whose
    validation r drives checkpointing and early stopping.
    """

    name: str = "all"
    gt_voxels: np.ndarray | None = None
    dk_voxels: np.ndarray | None = None
    teacher: np.ndarray | None = None
    conditioning: np.ndarray | None = None
    roi_names: list[str] | None = None
    roi_labels: np.ndarray | None = None


def compute_loss(
    yhat: np.ndarray,
    y: np.ndarray,
    eta: np.ndarray,
    teacher_yhat: np.ndarray | None,
    gt_mask: np.ndarray,
    dk_mask: np.ndarray,
    config: TrainConfig,
    selector_frozen: bool = False,
):
    """Composite loss and its gradients.

    Returns (LossTerms, dyhat [B,n], deta [N,L] or None).  The ground-truth
    and dark-knowledge terms are smooth-L1 means over their masked entries;
    the entropy regularizer runs over all selector rows (skipped when the
    selector is frozen, where it would be a constant).
    """
    require(yhat.shape == y.shape == gt_mask.shape == dk_mask.shape, "compute_loss: shape mismatch")
    terms = LossTerms()
    dyhat = np.zeros(yhat.shape, dtype=F32)
    if gt_mask.any():
        l, g = smooth_l1(yhat[gt_mask], y[gt_mask], config.beta_smoothl1)
        terms.gt_loss = l
        dyhat[gt_mask] += g
    if dk_mask.any():
        if teacher_yhat is None:
            raise ValueError("dark-knowledge mask set but no teacher predictions given")
        l, g = smooth_l1(yhat[dk_mask], teacher_yhat[dk_mask], config.beta_smoothl1)
        terms.dk_loss = l
        dyhat[dk_mask] += F32(config.lambda_dk) * g
    deta = None
    if not selector_frozen and config.lambda_ent != 0.0:
        le, ge = neg_entropy(eta)
        terms.ent_loss = le
        deta = F32(config.lambda_ent) * ge
    terms.total = terms.gt_loss + config.lambda_dk * terms.dk_loss + config.lambda_ent * terms.ent_loss
    return terms, dyhat, deta


# ---------------------------------------------------------------------------
# Checkpoint pool and soup


@dataclass
class PoolEntry:
    score: float
    step: int
    values: dict[str, np.ndarray]


class CheckpointPool:
    """Up to `capacity` snapshots, kept sorted best-first by score."""

    def __init__(self, capacity: int):
        require(capacity >= 1, "pool capacity must be >= 1")
        self.capacity = capacity
        self.entries: list[PoolEntry] = []

    def insert(self, score: float, step: int, values: dict[str, np.ndarray]) -> None:
        self.entries.append(PoolEntry(score=score, step=step, values=values))
        # stable: earlier snapshots win ties
        self.entries.sort(key=lambda e: -e.score)
        del self.entries[self.capacity :]

    @property
    def best(self) -> PoolEntry:
        return self.entries[0]

    def __len__(self) -> int:
        return len(self.entries)


def greedy_soup(pool: CheckpointPool, val_fn) -> tuple[dict[str, np.ndarray], float]:
    """Greedy parameter averaging over pool snapshots, best first.

    A candidate joins the soup only if the validation score of the uniform
    average over accepted members does not decrease, so the final soup
    scores at least as well as the best single snapshot under `val_fn`.
    """
    require(len(pool) >= 1, "greedy_soup needs a non-empty pool")
    accepted = [pool.entries[0].values]
    current = {k: v.copy() for k, v in accepted[0].items()}
    current_val = float(val_fn(current))
    for entry in pool.entries[1:]:
        k = len(accepted)
        tentative = {
            name: (current[name] * k + entry.values[name]) / F32(k + 1) for name in current
        }
        v = float(val_fn(tentative))
        if v >= current_val:
            accepted.append(entry.values)
            current = tentative
            current_val = v
    return current, current_val


# ---------------------------------------------------------------------------
# Fit


@dataclass
class TrainResult:
    model: EncoderModel
    pool: CheckpointPool
    log: list[dict] = field(default_factory=list)
    best_val_r: float = float("-inf")
    steps: int = 0
    epochs: int = 0
    stopped_early: bool = False


def validation_score(model: EncoderModel, bundle: Bundle, role: StageRole | None = None, split: str = "val"):
    """Mean Pearson r over the conditioning voxels plus per-voxel r."""
    ids = getattr(bundle.split, split)
    idx = bundle.image_indices(ids)
    pred = model.predict(bundle.store.grids[idx], bundle.voxels.coords)
    r, _ = pearson_per_voxel(pred, bundle.responses.values[idx])
    cond = role.conditioning if role is not None and role.conditioning is not None else None
    mean_r = float(r[cond].mean()) if cond is not None else float(r.mean())
    return mean_r, r


def make_val_fn(model: EncoderModel, bundle: Bundle, role: StageRole | None = None):
    """Pure validation closure over snapshot dicts (used by the soup)."""

    def val_fn(values: dict[str, np.ndarray]) -> float:
        saved = model.snapshot()
        model.load_values(values)
        try:
            mean_r, _ = validation_score(model, bundle, role)
        finally:
            model.load_values(saved)
        return mean_r

    return val_fn


def sample_voxel_subsets(rng, n_voxels: int, cap: int, batch: int) -> np.ndarray | None:
    """Per-datapoint voxel subsample without replacement; None if cap covers all."""
    n_sub = min(cap, n_voxels)
    if n_sub >= n_voxels:
        return None
    rows = np.broadcast_to(np.arange(n_voxels, dtype=np.int64), (batch, n_voxels))
    return rng.permuted(rows, axis=1)[:, :n_sub]


def fit(
    model: EncoderModel,
    bundle: Bundle,
    config: TrainConfig,
    role: StageRole | None = None,
    log_path: str | Path | None = None,
    verbose: bool = False,
) -> TrainResult:
    """Train until early stopping or the epoch cap; restores the best weights.

    The returned result's model is `model` itself with the best-validation
    snapshot loaded; the pool holds the top-k snapshots for souping.
    """
    config.validate()
    role = role or StageRole()
    n_vox = bundle.voxels.n_voxels
    require(model.config.n_voxels == n_vox, "model/bundle voxel counts differ")
    require(len(bundle.split.val) >= 2, "validation split needs at least 2 images")

    train_idx = bundle.image_indices(bundle.split.train)
    n_train = len(train_idx)
    coords = bundle.voxels.coords
    responses = bundle.responses.values
    # one-time layout conversion for the hot path
    feats_cl = EncoderModel.to_channels_last(bundle.store.grids)

    gt_vox = role.gt_voxels if role.gt_voxels is not None else np.ones(n_vox, dtype=bool)
    dk_vox = role.dk_voxels if role.dk_voxels is not None else np.zeros(n_vox, dtype=bool)
    if dk_vox.any() and role.teacher is None:
        raise ValueError(f"stage '{role.name}': dark-knowledge voxels given without a teacher")

    rng = make_rng(derive_seed(config.seed, 101))
    epoch_images = max(1, int(round(config.epoch_fraction * n_train)))
    pool = CheckpointPool(config.soup_top_k)
    log: list[dict] = []
    result = TrainResult(model=model, pool=pool, log=log)

    best_r = float("-inf")
    best_values: dict[str, np.ndarray] | None = None
    bad_validations = 0
    order = rng.permutation(n_train)
    cursor = 0
    images_seen = 0
    step = 0
    epoch = 0
    last_terms = LossTerms()
    params = model.trainable_params()
    selector_frozen = model.config.freeze_selector

    log_file = open(log_path, "w") if log_path is not None else None
    try:
        while epoch < config.max_epochs:
            if cursor >= n_train:
                order = rng.permutation(n_train)
                cursor = 0
            take = min(config.batch, n_train - cursor)
            imgs = train_idx[order[cursor : cursor + take]]
            cursor += take

            idx = sample_voxel_subsets(rng, n_vox, config.voxel_cap, take)
            yhat, trace = model.forward_batch(feats_cl[imgs], coords, idx, training=True, rng=rng)
            sel = trace["idx"]
            y = responses[imgs[:, None], sel]
            gt_mask = gt_vox[sel]
            dk_mask = dk_vox[sel]
            teacher = role.teacher[imgs[:, None], sel] if role.teacher is not None else None
            terms, dyhat, deta = compute_loss(
                yhat, y, trace["eta"], teacher, gt_mask, dk_mask, config, selector_frozen
            )
            if not np.isfinite(terms.total):
                raise NumericError(
                    f"non-finite loss at step {step}: gt={terms.gt_loss} dk={terms.dk_loss} ent={terms.ent_loss}"
                )
            model.backward(trace, dyhat, deta)
            adabelief_step(params, config.lr, config.beta1, config.beta2, 1e-8, config.wd)
            last_terms = terms
            step += 1
            images_seen += take

            if images_seen >= (epoch + 1) * epoch_images:
                epoch = images_seen // epoch_images
                val_r, per_voxel = validation_score(model, bundle, role)
                pool.insert(val_r, step, model.snapshot())
                record = {
                    "step": step,
                    "epoch": epoch,
                    "val_r": val_r,
                    "gt_loss": last_terms.gt_loss,
                    "dk_loss": last_terms.dk_loss,
                    "ent_loss": last_terms.ent_loss,
                    "total_loss": last_terms.total,
                }
                if role.roi_labels is not None:
                    names = role.roi_names or [str(k) for k in range(int(role.roi_labels.max()) + 1)]
                    record["roi_r"] = {
                        names[k]: float(per_voxel[role.roi_labels == k].mean())
                        for k in range(len(names))
                    }
                log.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
                if verbose:
                    print(f"epoch {epoch} step {step} val_r {val_r:.4f} loss {terms.total:.4f}")
                if val_r > best_r + TIE_TOL:
                    best_r = val_r
                    best_values = model.snapshot()
                    bad_validations = 0
                else:
                    bad_validations += 1
                    if bad_validations >= config.patience:
                        result.stopped_early = True
                        break
    finally:
        if log_file is not None:
            log_file.close()

    if best_values is not None:
        model.load_values(best_values)
    result.best_val_r = best_r
    result.steps = step
    result.epochs = epoch
    return result


def fit_summary(result: TrainResult) -> dict:
    return {
        "best_val_r": result.best_val_r,
        "steps": result.steps,
        "epochs": result.epochs,
        "stopped_early": result.stopped_early,
        "pool_scores": [e.score for e in result.pool.entries],
    }
