"""Recipe mechanics at tiny scale; ordering claims live in the acceptance suite."""

import numpy as np
import pytest
from dataclasses import replace

from voxelcast import data as dataio
from voxelcast.afo import (
    RecipePlan,
    run_naive_mix,
    run_recipe,
    run_stage1,
    run_stage2,
    run_stage3,
    write_recipe_outputs,
)
from voxelcast.encoder import load_model
from voxelcast.synth import GroundTruth, GroupSpec, SynthSpec, make_bundle
from voxelcast.trainer import TrainConfig
from voxelcast.veroi import Parcellation, from_groups


def tiny_bundle(n_rois=2, seed=3):
    groups = [GroupSpec(f"roi{k}", 6, 2.0, "one_hot") for k in range(n_rois)]
    spec = SynthSpec(n_images=50, n_layers=2, n_channels=4, grid=6, groups=groups, seed=seed)
    bundle = make_bundle(spec, ratio=(70, 15, 15))
    gt = GroundTruth.from_dict(bundle.ground_truth)
    return bundle, from_groups(gt.group, bundle.voxels.ids)


def tiny_plan(parc, **kw):
    base = dict(
        parcellation=parc,
        train=TrainConfig(batch=16, epoch_fraction=1.0, patience=2, max_epochs=4,
                          voxel_cap=512, soup_top_k=3, seed=0),
        encoder=dict(d_model=5, pe_freqs=3, hidden=8, init_seed=0),
        seed=5,
    )
    base.update(kw)
    return RecipePlan(**base)


class TestStage1:
    def test_one_checkpoint_per_roi_and_full_teacher_coverage(self):
        bundle, parc = tiny_bundle(n_rois=3)
        art = run_stage1(tiny_plan(parc), bundle)
        assert len(art.snapshots) == 3
        rows = bundle.image_indices(bundle.split.train + bundle.split.val)
        assert not np.isnan(art.teacher[rows]).any()
        test_rows = bundle.image_indices(bundle.split.test)
        assert np.isnan(art.teacher[test_rows]).all()  # test never cached

    def test_single_roi_recipe_is_naive_mix_shaped(self):
        bundle, _ = tiny_bundle(n_rois=1)
        parc = Parcellation(labels=np.zeros(bundle.voxels.n_voxels, dtype=np.int64),
                            voxel_ids=bundle.voxels.ids, n_rois=1)
        art = run_stage1(tiny_plan(parc), bundle)
        naive = run_naive_mix(tiny_plan(parc), bundle)
        assert len(art.snapshots) == 1
        # same head shape: every voxel has a head row in both
        assert art.snapshots[0]["head.W"].shape == naive.snapshots[0]["head.W"].shape

    def test_failed_roi_job_finishes_siblings_then_raises(self, monkeypatch):
        bundle, parc = tiny_bundle(n_rois=3)
        plan = tiny_plan(parc)
        import voxelcast.afo as afomod

        calls = []
        orig_fit = afomod.fit

        def flaky_fit(model, sub, tc, role, **kw):
            calls.append(role.name)
            if role.name == "s1_roi1":
                raise ValueError("boom")
            return orig_fit(model, sub, tc, role, **kw)

        monkeypatch.setattr(afomod, "fit", flaky_fit)
        with pytest.raises(RuntimeError, match="roi 1.*boom"):
            run_stage1(plan, bundle)
        assert len(calls) == 3  # siblings still ran


class TestStage2:
    def test_requires_teacher(self):
        bundle, parc = tiny_bundle()
        art = run_stage1(tiny_plan(parc), bundle)
        art.teacher = None
        with pytest.raises(Exception, match="teacher"):
            run_stage2(tiny_plan(parc), bundle, art)

    def test_helper_heads_discarded(self):
        bundle, parc = tiny_bundle()
        plan = tiny_plan(parc)
        s1 = run_stage1(plan, bundle)
        s2 = run_stage2(plan, bundle, s1)
        for roi, snap in s2.snapshots.items():
            assert snap["head.W"].shape[0] == parc.members(roi).size

    def test_no_dk_uses_ground_truth(self):
        bundle, parc = tiny_bundle()
        plan = tiny_plan(parc, no_dk=True)
        s1 = run_stage1(plan, bundle)
        s1.teacher = None  # NoDK must not touch it
        s2 = run_stage2(plan, bundle, s1)
        assert len(s2.snapshots) == parc.n_rois


class TestStage3:
    def test_full_recipe_param_accounting(self):
        # stage models: r adapters + heads covering every voxel once (r*b + n*d);
        # stage 3: one adapter + all heads (b + n*d)
        bundle, parc = tiny_bundle(n_rois=2)
        plan = tiny_plan(parc)
        result = run_recipe(plan, bundle)
        d = 5

        def adapter_count(snap):
            return sum(v.size for k, v in snap.items() if k.startswith("adapter."))

        b = adapter_count(result.s3.snapshots[0])
        n = bundle.voxels.n_voxels
        s1_adapters = sum(adapter_count(s) for s in result.s1.snapshots.values())
        s1_head_rows = sum(s["head.W"].shape[0] for s in result.s1.snapshots.values())
        assert s1_adapters == parc.n_rois * b
        assert s1_head_rows == n
        s2_head_rows = sum(s["head.W"].shape[0] for s in result.s2[0].snapshots.values())
        assert s2_head_rows == n
        assert result.s3.snapshots[0]["head.W"].shape == (n, d)

    def test_stage3_checkpoint_loadable(self, tmp_path):
        bundle, parc = tiny_bundle()
        plan = tiny_plan(parc, out_dir=str(tmp_path))
        result = run_recipe(plan, bundle)
        model, meta = load_model(tmp_path / "stage3" / "model_roi0.vxc1")
        pred = model.predict(bundle.store.grids[:4], bundle.voxels.coords)
        assert pred.shape == (4, bundle.voxels.n_voxels)
        assert meta["stage"] == "stage3"

    def test_recipe_deterministic(self):
        bundle, parc = tiny_bundle()

        def run():
            res = run_recipe(tiny_plan(parc), bundle)
            return res.s3.snapshots[0]["head.W"].tobytes(), res.summary()

        w1, s1 = run()
        w2, s2 = run()
        assert w1 == w2
        assert s1 == s2

    def test_s2_extra_iteration(self):
        bundle, parc = tiny_bundle()
        result = run_recipe(tiny_plan(parc, s2_iters=2), bundle)
        assert len(result.s2) == 2
        assert "s2+1_test_r" in result.summary()


class TestOutputs:
    def test_teacher_cache_files_and_sidecars(self, tmp_path):
        bundle, parc = tiny_bundle()
        plan = tiny_plan(parc, out_dir=str(tmp_path))
        run_recipe(plan, bundle)
        import json

        for roi in range(parc.n_rois):
            bin_path = tmp_path / "stage1" / f"teacher_roi{roi}.bin"
            sc_path = tmp_path / "stage1" / f"teacher_roi{roi}.json"
            assert bin_path.exists() and sc_path.exists()
            sidecar = json.loads(sc_path.read_text())
            data = np.fromfile(bin_path, dtype="<f4")
            assert data.size == sidecar["shape"][0] * sidecar["shape"][1]
            assert sidecar["image_ids"] == bundle.split.train + bundle.split.val

    def test_workers_parallel_matches_serial(self):
        bundle, parc = tiny_bundle(n_rois=3)
        serial = run_stage1(tiny_plan(parc, workers=1), bundle)
        parallel = run_stage1(tiny_plan(parc, workers=3), bundle)
        for roi in serial.snapshots:
            assert serial.snapshots[roi]["head.W"].tobytes() == parallel.snapshots[roi]["head.W"].tobytes()
        assert serial.val_r == parallel.val_r
