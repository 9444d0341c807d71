"""All-for-One recipe: staged distillation across an ROI parcellation.

Stage 1 trains one model per ROI on its own voxels only and caches each
model's train+val predictions as teachers.  Stage 2 trains one all-voxel
model per target ROI: ground-truth loss on the target, dark-knowledge loss
against the stage-1 teachers on every other voxel, with checkpointing and
early stopping conditioned on the target ROI alone; helper heads are
discarded and only the target predictions are cached.  Stage 3 trains a
single all-ROI model from fresh initialization with both losses on every
voxel against the stage-2 teacher composite.

Variants: NaiveMix (one all-ROI model, ground truth only), NoDK (stage-2
helpers use raw ground truth instead of teacher predictions), randROI
(same recipe on a size-matched random partition), and extra stage-2
iterations that bootstrap from the previous iteration's teachers.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as dataio
from .data import Bundle
from .encoder import EncoderConfig, EncoderModel, save_model
from .evalkit import pearson_per_voxel
from .numcore import F32, derive_seed, require
from .trainer import CheckpointPool, StageRole, TrainConfig, fit, greedy_soup, make_val_fn
from .veroi import Parcellation


@dataclass
class RecipePlan:
    parcellation: Parcellation
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: dict = field(default_factory=dict)  # EncoderConfig overrides (d_model, pe_freqs, ...)
    naive_mix: bool = False
    no_dk: bool = False
    rand_roi: bool = False
    s2_iters: int = 1
    use_soup: bool = True
    fresh_stage3: bool = True  # stage 3 starts from fresh init (no warm start)
    workers: int = 1
    seed: int = 0
    out_dir: str | None = None

    def validate(self, bundle: Bundle) -> None:
        require(self.s2_iters >= 1, "s2_iters must be >= 1")
        require(self.workers >= 1, "workers must be >= 1")
        n = bundle.voxels.n_voxels
        require(
            self.parcellation.labels.size == n,
            f"parcellation covers {self.parcellation.labels.size} voxels, bundle has {n}",
        )


@dataclass
class StageArtifacts:
    stage: str
    # per-ROI best snapshots (stage 1/2) or the single final snapshot (stage 3)
    snapshots: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)
    voxel_index: dict[int, np.ndarray] = field(default_factory=dict)
    # teacher predictions [n_images, N]; valid on train+val rows, NaN elsewhere
    teacher: np.ndarray | None = None
    val_r: dict[int, float] = field(default_factory=dict)
    test_r: dict[int, float] = field(default_factory=dict)
    configs: dict[int, EncoderConfig] = field(default_factory=dict)


def _encoder_config(bundle: Bundle, n_voxels: int, overrides: dict, seed: int) -> EncoderConfig:
    base = dict(
        n_layers=bundle.store.n_layers,
        d_in=bundle.store.n_channels,
        n_voxels=n_voxels,
        grid=bundle.store.grid,
        init_seed=seed,
    )
    base.update(overrides)
    base["n_voxels"] = n_voxels
    base["init_seed"] = seed
    return EncoderConfig(**base)


def _subset_bundle(bundle: Bundle, voxel_idx: np.ndarray) -> Bundle:
    return Bundle(
        store=bundle.store,
        voxels=bundle.voxels.subset(voxel_idx),
        responses=dataio.ResponseSet(
            values=np.ascontiguousarray(bundle.responses.values[:, voxel_idx]),
            rep_counts=list(bundle.responses.rep_counts),
        ),
        split=bundle.split,
        rep_counts=list(bundle.rep_counts),
        ground_truth=bundle.ground_truth,
    )


def _soup_or_best(model, bundle, role, pool: CheckpointPool, use_soup: bool):
    if use_soup and len(pool) > 1:
        values, score = greedy_soup(pool, make_val_fn(model, bundle, role))
        model.load_values(values)
        return score
    model.load_values(pool.best.values)
    return pool.best.score


def _cache_rows(bundle: Bundle) -> np.ndarray:
    """Image indices eligible for teacher caching (train+val, never test)."""
    return bundle.image_indices(bundle.split.train + bundle.split.val)


def _test_mean_r(model, bundle, voxel_subset=None) -> float:
    idx = bundle.image_indices(bundle.split.test)
    pred = model.predict(bundle.store.grids[idx], bundle.voxels.coords)
    r, _ = pearson_per_voxel(pred, bundle.responses.values[idx])
    if voxel_subset is not None:
        r = r[voxel_subset]
    return float(r.mean())


def _run_roi_jobs(jobs, workers: int):
    """Run per-ROI jobs, finishing siblings before failing the recipe."""
    results: dict[int, object] = {}
    errors: dict[int, Exception] = {}

    def wrap(roi, fn):
        try:
            results[roi] = fn()
        except Exception as exc:  # noqa: BLE001 - collected and re-raised below
            errors[roi] = exc

    if workers <= 1:
        for roi, fn in jobs:
            wrap(roi, fn)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(wrap, roi, fn) for roi, fn in jobs]
            for f in futs:
                f.result()
    if errors:
        detail = "; ".join(f"roi {k}: {type(v).__name__}: {v}" for k, v in sorted(errors.items()))
        raise RuntimeError(f"{len(errors)} ROI job(s) failed: {detail}") from next(iter(errors.values()))
    return results


def run_naive_mix(plan: RecipePlan, bundle: Bundle) -> StageArtifacts:
    """One all-ROI model trained with ground truth only."""
    plan.validate(bundle)
    n = bundle.voxels.n_voxels
    cfg = _encoder_config(bundle, n, plan.encoder, derive_seed(plan.seed, 0, 0))
    model = EncoderModel(cfg)
    tc = replace(plan.train, seed=derive_seed(plan.seed, 0, 1))
    role = StageRole(name="naive_mix", roi_labels=plan.parcellation.labels,
                     roi_names=[str(k) for k in range(plan.parcellation.n_rois)])
    result = fit(model, bundle, tc, role)
    score = _soup_or_best(model, bundle, role, result.pool, plan.use_soup)
    art = StageArtifacts(stage="naive_mix")
    art.snapshots[0] = model.snapshot()
    art.voxel_index[0] = np.arange(n)
    art.val_r[0] = score
    art.test_r[0] = _test_mean_r(model, bundle)
    art.configs[0] = cfg
    return art


def run_stage1(plan: RecipePlan, bundle: Bundle) -> StageArtifacts:
    """Per-ROI models on their own voxels; teachers cached for every voxel."""
    plan.validate(bundle)
    parc = plan.parcellation
    n = bundle.voxels.n_voxels
    n_images = bundle.store.n_images
    teacher = np.full((n_images, n), np.nan, dtype=F32)
    cache_rows = _cache_rows(bundle)
    art = StageArtifacts(stage="s1", teacher=teacher)

    def job(roi: int):
        vox = parc.members(roi)
        sub = _subset_bundle(bundle, vox)
        cfg = _encoder_config(bundle, vox.size, plan.encoder, derive_seed(plan.seed, 1, roi))
        model = EncoderModel(cfg)
        tc = replace(plan.train, seed=derive_seed(plan.seed, 1, roi, 7))
        role = StageRole(name=f"s1_roi{roi}")
        result = fit(model, sub, tc, role)
        score = _soup_or_best(model, sub, role, result.pool, plan.use_soup)
        preds = model.predict(bundle.store.grids[cache_rows], sub.voxels.coords)
        return model, cfg, vox, score, preds, _test_mean_r(model, sub)

    jobs = [(roi, (lambda r=roi: job(r))) for roi in range(parc.n_rois)]
    results = _run_roi_jobs(jobs, plan.workers)
    for roi, (model, cfg, vox, score, preds, test_r) in sorted(results.items()):
        art.snapshots[roi] = model.snapshot()
        art.voxel_index[roi] = vox
        art.val_r[roi] = score
        art.test_r[roi] = test_r
        art.configs[roi] = cfg
        teacher[cache_rows[:, None], vox[None, :]] = preds
    require(not np.isnan(teacher[cache_rows]).any(), "stage-1 teacher cache has uncovered voxels")
    return art


def run_stage2(plan: RecipePlan, bundle: Bundle, prev: StageArtifacts) -> StageArtifacts:
    """Per-target-ROI all-voxel models with dark-knowledge helpers.

    Ground truth supervises the target ROI; all other voxels regress onto
    the previous stage's cached teacher predictions (or onto ground truth
    for the NoDK variant).  Validation metric, checkpoint pool, and early
    stopping all condition on the target ROI only.  Only target-ROI rows
    of the head are kept and cached.
    """
    plan.validate(bundle)
    parc = plan.parcellation
    n = bundle.voxels.n_voxels
    n_images = bundle.store.n_images
    cache_rows = _cache_rows(bundle)
    if plan.no_dk:
        helper_targets = bundle.responses.values.astype(F32)
    else:
        require(prev.teacher is not None, "stage 2 requires a teacher cache")
        helper_targets = prev.teacher
    teacher = np.full((n_images, n), np.nan, dtype=F32)
    art = StageArtifacts(stage="s2", teacher=teacher)

    def job(roi: int):
        vox = parc.members(roi)
        gt_mask = np.zeros(n, dtype=bool)
        gt_mask[vox] = True
        cfg = _encoder_config(bundle, n, plan.encoder, derive_seed(plan.seed, 2, roi))
        model = EncoderModel(cfg)
        tc = replace(plan.train, seed=derive_seed(plan.seed, 2, roi, 7))
        role = StageRole(
            name=f"s2_roi{roi}",
            gt_voxels=gt_mask,
            dk_voxels=~gt_mask,
            teacher=helper_targets,
            conditioning=vox,
        )
        result = fit(model, bundle, tc, role)
        score = _soup_or_best(model, bundle, role, result.pool, plan.use_soup)
        preds = model.predict(bundle.store.grids[cache_rows], bundle.voxels.coords, voxel_idx=vox)
        return model, cfg, vox, score, preds, _test_mean_r(model, bundle, vox)

    jobs = [(roi, (lambda r=roi: job(r))) for roi in range(parc.n_rois)]
    results = _run_roi_jobs(jobs, plan.workers)
    for roi, (model, cfg, vox, score, preds, test_r) in sorted(results.items()):
        snap = model.snapshot()
        # discard helper heads: keep only the target ROI's rows
        snap["head.W"] = snap["head.W"][vox].copy()
        snap["head.b"] = snap["head.b"][vox].copy()
        art.snapshots[roi] = snap
        art.voxel_index[roi] = vox
        art.val_r[roi] = score
        art.test_r[roi] = test_r
        art.configs[roi] = cfg
        teacher[cache_rows[:, None], vox[None, :]] = preds
    require(not np.isnan(teacher[cache_rows]).any(), "stage-2 teacher cache has uncovered voxels")
    return art


def run_stage3(plan: RecipePlan, bundle: Bundle, prev: StageArtifacts) -> StageArtifacts:
    """Single all-ROI model: ground truth plus dark knowledge on every voxel."""
    plan.validate(bundle)
    require(prev.teacher is not None, "stage 3 requires the stage-2 teacher cache")
    n = bundle.voxels.n_voxels
    cfg = _encoder_config(bundle, n, plan.encoder, derive_seed(plan.seed, 3, 0))
    model = EncoderModel(cfg)
    tc = replace(plan.train, seed=derive_seed(plan.seed, 3, 1))
    role = StageRole(
        name="s3",
        gt_voxels=np.ones(n, dtype=bool),
        dk_voxels=np.ones(n, dtype=bool),
        teacher=prev.teacher,
        roi_labels=plan.parcellation.labels,
        roi_names=[str(k) for k in range(plan.parcellation.n_rois)],
    )
    result = fit(model, bundle, tc, role)
    score = _soup_or_best(model, bundle, role, result.pool, plan.use_soup)
    art = StageArtifacts(stage="s3")
    art.snapshots[0] = model.snapshot()
    art.voxel_index[0] = np.arange(n)
    art.val_r[0] = score
    art.test_r[0] = _test_mean_r(model, bundle)
    art.configs[0] = cfg
    return art


@dataclass
class RecipeResult:
    parcellation: Parcellation
    naive: StageArtifacts | None
    s1: StageArtifacts | None
    s2: list[StageArtifacts]
    s3: StageArtifacts | None

    def summary(self) -> dict:
        out: dict = {"n_rois": self.parcellation.n_rois}
        if self.naive is not None:
            out["naive_mix_test_r"] = self.naive.test_r[0]
        if self.s1 is not None:
            out["s1_test_r"] = _mean(self.s1.test_r)
        for i, art in enumerate(self.s2):
            key = "s2_test_r" if i == 0 else f"s2+{i}_test_r"
            out[key] = _mean(art.test_r)
        if self.s3 is not None:
            out["s3_test_r"] = self.s3.test_r[0]
        return out


def _mean(d: dict[int, float]) -> float:
    return float(np.mean(list(d.values())))


def run_recipe(plan: RecipePlan, bundle: Bundle) -> RecipeResult:
    """Run the requested variant of the full recipe, optionally persisting."""
    plan.validate(bundle)
    from .veroi import make_rand_roi

    if plan.rand_roi:
        plan = replace(plan, parcellation=make_rand_roi(plan.parcellation, derive_seed(plan.seed, 9)))
    if plan.naive_mix:
        naive = run_naive_mix(plan, bundle)
        result = RecipeResult(plan.parcellation, naive, None, [], None)
    else:
        s1 = run_stage1(plan, bundle)
        s2_list = []
        prev = s1
        for _it in range(plan.s2_iters):
            s2 = run_stage2(plan, bundle, prev)
            s2_list.append(s2)
            prev = s2
        s3 = run_stage3(plan, bundle, prev)
        result = RecipeResult(plan.parcellation, None, s1, s2_list, s3)
    if plan.out_dir is not None:
        write_recipe_outputs(plan, bundle, result, Path(plan.out_dir))
    return result


def write_recipe_outputs(plan: RecipePlan, bundle: Bundle, result: RecipeResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cache_ids = bundle.split.train + bundle.split.val
    cache_rows = _cache_rows(bundle)

    def dump_stage(art: StageArtifacts, name: str):
        stage_dir = out / name
        stage_dir.mkdir(exist_ok=True)
        for roi, snap in art.snapshots.items():
            cfg = art.configs[roi]
            model = EncoderModel(cfg)
            if snap["head.W"].shape[0] != cfg.n_voxels:
                # stage-2 snapshots keep only target heads
                cfg2 = replace(cfg, n_voxels=snap["head.W"].shape[0])
                model = EncoderModel(cfg2)
            model.load_values(snap)
            vox = art.voxel_index[roi]
            save_model(
                model,
                stage_dir / f"model_roi{roi}.vxc1",
                extra_meta={"stage": name, "roi": int(roi),
                            "voxel_ids": [bundle.voxels.ids[i] for i in vox]},
            )
        if art.teacher is not None:
            for roi, vox in art.voxel_index.items():
                block = art.teacher[cache_rows[:, None], vox[None, :]]
                block.astype("<f4").tofile(stage_dir / f"teacher_roi{roi}.bin")
                sidecar = {
                    "image_ids": cache_ids,
                    "voxel_ids": [bundle.voxels.ids[i] for i in vox],
                    "shape": [len(cache_ids), int(vox.size)],
                }
                (stage_dir / f"teacher_roi{roi}.json").write_text(json.dumps(sidecar))
        scores = {str(k): {"val_r": art.val_r[k], "test_r": art.test_r[k]} for k in art.snapshots}
        (stage_dir / "scores.json").write_text(json.dumps(scores, indent=1, sort_keys=True))

    if result.naive is not None:
        dump_stage(result.naive, "naive")
    if result.s1 is not None:
        dump_stage(result.s1, "stage1")
    for i, art in enumerate(result.s2):
        dump_stage(art, "stage2" if i == 0 else f"stage2_iter{i + 1}")
    if result.s3 is not None:
        dump_stage(result.s3, "stage3")
    (out / "recipe_summary.json").write_text(json.dumps(result.summary(), indent=1, sort_keys=True))
