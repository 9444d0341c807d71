"""Command-line surface: synth, train, afo, veroi, eval, probe, decode, report, gradcheck.

Every run directory gets a ``config.resolved.json`` (the fully resolved
settings) and a ``run_manifest.json`` with FNV-64 checksums of the input
files, so stale intermediate reuse is detectable.  Exit codes: 1 usage,
2 data validation, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import typing
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import afo as afomod
from . import data as dataio
from . import decode as decodemod
from . import evalkit
from . import synth as synthmod
from . import trainer as trainermod
from . import veroi as veroimod
from .data import DataFormatError, load_bundle, load_checkpoint
from .encoder import EncoderConfig, EncoderModel, load_model, save_model
from .numcore import ContractViolation, NumericError
from .synth import GroundTruth, SynthSpec
from .trainer import StageRole, TrainConfig, fit, greedy_soup, make_val_fn


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)

    def exit(self, status=0, message=None):
        if status == 0:
            raise SystemExit(0)
        raise UsageError(message or "usage error")


# ---------------------------------------------------------------------------
# config plumbing


def fnv1a64(data: bytes) -> str:
    """64-bit FNV-1a over raw bytes (hex)."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


def dataclass_from_dict(cls, d: dict, path: str = "config"):
    """Build a dataclass from JSON, rejecting unknown keys recursively."""
    if not isinstance(d, dict):
        raise DataFormatError(f"{path}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise DataFormatError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in d.items():
        hint = hints.get(key)
        origin = typing.get_origin(hint)
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            kwargs[key] = dataclass_from_dict(hint, value, f"{path}.{key}")
        elif origin is list and typing.get_args(hint) and dataclasses.is_dataclass(typing.get_args(hint)[0]):
            inner = typing.get_args(hint)[0]
            kwargs[key] = [
                dataclass_from_dict(inner, v, f"{path}.{key}[{i}]") for i, v in enumerate(value)
            ]
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


def load_json_config(cls, path: str | None, base=None, path_label: str = "config"):
    if path is None:
        return base if base is not None else cls()
    payload = json.loads(Path(path).read_text())
    if base is not None:
        merged = asdict(base)
        hints = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - hints
        if unknown:
            raise DataFormatError(f"{path_label}: unknown keys {sorted(unknown)}")
        merged.update(payload)
        payload = merged
    return dataclass_from_dict(cls, payload, path_label)


def write_run_metadata(out_dir: Path, command: str, resolved: dict, inputs: list[str | Path]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(json.dumps(resolved, indent=1, sort_keys=True))
    checks = {}
    for p in inputs:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.iterdir()):
                if f.is_file():
                    checks[str(f)] = fnv1a64(f.read_bytes())
        elif p.is_file():
            checks[str(p)] = fnv1a64(p.read_bytes())
    manifest = {"command": command, "inputs": checks}
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _load_parcellation(path: str | None, bundle) -> veroimod.Parcellation:
    if path is not None:
        return veroimod.Parcellation.load(path, bundle.voxels.ids)
    rois = [r or "all" for r in bundle.voxels.rois]
    names = sorted(set(rois))
    index = {name: i for i, name in enumerate(names)}
    labels = np.array([index[r] for r in rois], dtype=np.int64)
    return veroimod.Parcellation(labels=labels, voxel_ids=list(bundle.voxels.ids), n_rois=len(names))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = load_json_config(SynthSpec, args.spec, path_label="synth spec")
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    synthmod.make_bundle(spec, out_dir=out)
    write_run_metadata(out, "synth", asdict(spec), [args.spec])
    print(f"wrote synthetic bundle to {out}", file=sys.stderr)
    return 0


def _encoder_from_args(args, bundle, n_voxels: int) -> EncoderConfig:
    overrides = {}
    if args.encoder_config:
        overrides = json.loads(Path(args.encoder_config).read_text())
    cfg_kwargs = dict(
        n_layers=bundle.store.n_layers,
        d_in=bundle.store.n_channels,
        n_voxels=n_voxels,
        grid=bundle.store.grid,
        init_seed=args.seed,
    )
    allowed = {f.name for f in dataclasses.fields(EncoderConfig)}
    unknown = set(overrides) - allowed
    if unknown:
        raise DataFormatError(f"encoder config: unknown keys {sorted(unknown)}")
    cfg_kwargs.update(overrides)
    cfg_kwargs["n_voxels"] = n_voxels
    if getattr(args, "frozen_rm", False):
        cfg_kwargs["freeze_mapper"] = True
    if getattr(args, "frozen_ls", False):
        cfg_kwargs["freeze_selector"] = True
    if getattr(args, "no_global_pool", False):
        cfg_kwargs["use_global_pool"] = False
    return EncoderConfig(**cfg_kwargs)


def cmd_train(args) -> int:
    bundle = load_bundle(args.data)
    tc = load_json_config(TrainConfig, args.config, base=TrainConfig(seed=args.seed), path_label="train config")
    if args.no_reg_ls:
        tc = replace(tc, lambda_ent=0.0)
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)

    voxel_subset = None
    if args.roi is not None:
        parc = _load_parcellation(args.parcellation, bundle)
        if not 0 <= args.roi < parc.n_rois:
            raise DataFormatError(f"--roi {args.roi} out of range (parcellation has {parc.n_rois})")
        voxel_subset = parc.members(args.roi)
        bundle = afomod._subset_bundle(bundle, voxel_subset)

    cfg = _encoder_from_args(args, bundle, bundle.voxels.n_voxels)
    model = EncoderModel(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    role = StageRole(name="train")
    result = fit(model, bundle, tc, role, log_path=out / "train_log.jsonl")
    if not args.no_soup and len(result.pool) > 1:
        values, soup_r = greedy_soup(result.pool, make_val_fn(model, bundle, role))
        model.load_values(values)
    save_model(model, out / "model.vxc1")
    gt = GroundTruth.from_dict(bundle.ground_truth) if bundle.ground_truth else None
    ceilings = synthmod.ceiling_per_voxel(gt) if gt is not None else None
    if voxel_subset is not None and ceilings is not None:
        ceilings = ceilings[voxel_subset]
    report = evalkit.score_model(model, bundle, ceilings=ceilings)
    evalkit.write_scores_csv(report, out / "scores.csv")
    (out / "scores.json").write_text(json.dumps(report.summary(), indent=1, sort_keys=True))
    resolved = {"train": asdict(tc), "encoder": asdict(cfg), "roi": args.roi, "soup": not args.no_soup}
    write_run_metadata(out, "train", resolved, [args.data] + ([args.config] if args.config else []))
    print(f"test mean r {report.mean_r:.4f}; artifacts in {out}", file=sys.stderr)
    return 0


def cmd_afo_run(args) -> int:
    bundle = load_bundle(args.data)
    plan_payload = json.loads(Path(args.plan).read_text()) if args.plan else {}
    known = {"parcellation", "train", "encoder", "seed", "s2_iters", "use_soup", "workers",
             "naive_mix", "no_dk", "rand_roi", "fresh_stage3"}
    unknown = set(plan_payload) - known
    if unknown:
        raise DataFormatError(f"plan: unknown keys {sorted(unknown)}")
    parc_path = plan_payload.get("parcellation")
    parc = _load_parcellation(parc_path, bundle)
    train_cfg = dataclass_from_dict(TrainConfig, plan_payload.get("train", {}), "plan.train")
    plan = afomod.RecipePlan(
        parcellation=parc,
        train=train_cfg,
        encoder=plan_payload.get("encoder", {}),
        naive_mix=bool(plan_payload.get("naive_mix", False)) or args.naive_mix,
        no_dk=bool(plan_payload.get("no_dk", False)) or args.no_dk,
        rand_roi=bool(plan_payload.get("rand_roi", False)) or args.rand_roi,
        s2_iters=args.s2_iters if args.s2_iters is not None else int(plan_payload.get("s2_iters", 1)),
        use_soup=bool(plan_payload.get("use_soup", True)),
        workers=args.threads or int(plan_payload.get("workers", 1)),
        seed=args.seed if args.seed is not None else int(plan_payload.get("seed", 0)),
        out_dir=args.out,
    )
    result = afomod.run_recipe(plan, bundle)
    resolved = {
        "train": asdict(plan.train), "encoder": plan.encoder, "seed": plan.seed,
        "naive_mix": plan.naive_mix, "no_dk": plan.no_dk, "rand_roi": plan.rand_roi,
        "s2_iters": plan.s2_iters, "workers": plan.workers, "n_rois": parc.n_rois,
    }
    write_run_metadata(Path(args.out), "afo run", resolved,
                       [args.data] + ([args.plan] if args.plan else []))
    print(json.dumps(result.summary(), indent=1, sort_keys=True), file=sys.stderr)
    return 0


def cmd_veroi(args) -> int:
    bundle = load_bundle(args.data)
    weights = []
    for mp in args.models:
        arrays, _meta = load_checkpoint(mp)
        if "head.W" not in arrays:
            raise DataFormatError(f"{mp}: checkpoint has no head.W")
        weights.append(arrays["head.W"])
    parc, dendro = veroimod.build_veroi(
        weights, bundle.voxels.ids, threshold=args.threshold,
        kmeans_k=args.kmeans_k, seed=args.seed or 0,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    parc.save(out / "parcellation.json")
    dendro.save(out / "dendrogram.json")
    veroimod.sizes_csv(parc, out / "sizes.csv")
    resolved = {"threshold": args.threshold, "kmeans_k": args.kmeans_k, "models": list(args.models),
                "seed": args.seed or 0, "n_rois": parc.n_rois}
    write_run_metadata(out, "veroi", resolved, list(args.models) + [args.data])
    print(f"{parc.n_rois} ROIs -> {out}", file=sys.stderr)
    return 0


def _ceilings_for(bundle):
    if bundle.ground_truth is None:
        return None
    return synthmod.ceiling_per_voxel(GroundTruth.from_dict(bundle.ground_truth))


def cmd_eval(args) -> int:
    bundle = load_bundle(args.data)
    model, _meta = load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evalkit.score_model(model, bundle, split=args.split, ceilings=_ceilings_for(bundle))
    evalkit.write_scores_csv(report, out / "scores.csv")
    (out / "scores.json").write_text(json.dumps(report.summary(), indent=1, sort_keys=True))
    write_run_metadata(out, "eval", {"split": args.split, "model": args.model}, [args.model, args.data])
    print(f"{args.split} mean r {report.mean_r:.4f}", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    bundle = load_bundle(args.data)
    model, _meta = load_model(args.model)
    out = Path(args.out)
    summary = evalkit.emit_reports(model, bundle, out, ceilings=_ceilings_for(bundle))
    write_run_metadata(out, "report", {"model": args.model}, [args.model, args.data])
    print(json.dumps({"mean_r": summary["mean_r"]}), file=sys.stderr)
    return 0


def cmd_probe(args) -> int:
    bundle = load_bundle(args.data)
    train_idx = bundle.image_indices(bundle.split.train)
    test_idx = bundle.image_indices(bundle.split.test)
    if args.model:
        model, _meta = load_model(args.model)
        feats = model.mstar_features(bundle.store.grids, bundle.voxels.coords)
        features = feats.reshape(feats.shape[0], -1)
        source = "model_mstar"
    else:
        features = bundle.store.grids.reshape(bundle.store.n_images, -1)
        source = "raw_grids"
    report = evalkit.linear_probe(
        features, bundle.responses.values, train_idx, test_idx,
        n_components=args.components, ridge=args.ridge,
        voxel_ids=bundle.voxels.ids, roi_labels=[r or "all" for r in bundle.voxels.rois],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evalkit.write_scores_csv(report, out / "probe_scores.csv")
    summary = report.summary()
    summary["feature_source"] = source
    (out / "probe_scores.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    write_run_metadata(out, "probe", {"components": args.components, "ridge": args.ridge,
                                      "source": source}, [args.data])
    print(f"probe mean r {report.mean_r:.4f} ({source})", file=sys.stderr)
    return 0


def cmd_decode(args) -> int:
    bundle = load_bundle(args.candidates)
    model, _meta = load_model(args.model)
    cand_ids = getattr(bundle.split, args.candidate_split) if args.candidate_split else bundle.store.image_ids
    cand_idx = bundle.image_indices(cand_ids)
    if args.queries:
        raw = np.fromfile(args.queries, dtype="<f4")
        n_vox = bundle.voxels.n_voxels
        if raw.size % n_vox:
            raise DataFormatError(f"{args.queries}: size {raw.size} not divisible by {n_vox} voxels")
        queries = raw.reshape(-1, n_vox)
        true_ids = None
    else:
        queries = bundle.responses.values[cand_idx]
        true_ids = list(cand_ids)
    subset = None
    if args.roi is not None:
        parc = _load_parcellation(args.parcellation, bundle)
        subset = parc.members(args.roi)
    results = decodemod.decode_queries(
        model, bundle.store.grids[cand_idx], bundle.voxels.coords,
        list(cand_ids), queries, true_ids=true_ids, voxel_subset=subset,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = [
        {
            "ranked": r.candidate_ids[: args.top_k],
            "scores": [float(s) for s in r.scores[: args.top_k]],
            "true_rank": r.true_rank,
        }
        for r in results
    ]
    (out / "decode_results.json").write_text(json.dumps(payload))
    lines = ["metric,value"]
    if true_ids is not None:
        summary = decodemod.retrieval_metrics(results)
        for k, v in summary.to_dict().items():
            if not isinstance(v, dict):
                lines.append(f"{k},{v}")
        (out / "decode_summary.csv").write_text("\n".join(lines) + "\n")
        print(f"top1 {summary.top1:.3f} top5 {summary.top5:.3f} mrr {summary.mrr:.3f}", file=sys.stderr)
    write_run_metadata(out, "decode", {"roi": args.roi, "n_candidates": len(cand_ids)},
                       [args.model, args.candidates])
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_gradient_suite

    reports = run_gradient_suite(seed=args.seed, instances=args.instances)
    failed = [name for name, rep in reports if not rep.passed]
    for name, rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        print(f"[{status}] {name}: max rel err {rep.max_rel_err:.3e}")
    if failed:
        print(f"gradient suite FAILED: {', '.join(failed)}", file=sys.stderr)
        raise NumericError(f"gradient checks failed: {failed}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="voxelcast", description=__doc__)
    p.add_argument("--threads", type=int, default=None, help="worker cap for ROI jobs")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic bundle")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="train a single encoding model")
    tp.add_argument("--data", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--config", default=None, help="TrainConfig JSON")
    tp.add_argument("--encoder-config", default=None, help="EncoderConfig overrides JSON")
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("--roi", type=int, default=None, help="train on a single ROI")
    tp.add_argument("--parcellation", default=None)
    tp.add_argument("--frozen-rm", action="store_true", help="freeze the retina mapper at center")
    tp.add_argument("--frozen-ls", action="store_true", help="freeze the layer selector at uniform")
    tp.add_argument("--no-reg-ls", action="store_true", help="disable the entropy regularizer")
    tp.add_argument("--no-global-pool", action="store_true", help="drop the pooled branch")
    tp.add_argument("--no-soup", action="store_true", help="skip greedy soup")
    tp.set_defaults(func=cmd_train)

    ap = sub.add_parser("afo", help="All-for-One recipe")
    asub = ap.add_subparsers(dest="afo_command", required=True)
    arp = asub.add_parser("run", help="run the staged recipe")
    arp.add_argument("--data", required=True)
    arp.add_argument("--plan", default=None, help="RecipePlan JSON")
    arp.add_argument("--out", required=True)
    arp.add_argument("--seed", type=int, default=None)
    arp.add_argument("--naive-mix", action="store_true")
    arp.add_argument("--no-dk", action="store_true")
    arp.add_argument("--rand-roi", action="store_true")
    arp.add_argument("--s2-iters", type=int, default=None)
    arp.set_defaults(func=cmd_afo_run)

    vp = sub.add_parser("veroi", help="build a parcellation from model head weights")
    vp.add_argument("--models", nargs="+", required=True)
    vp.add_argument("--data", required=True)
    vp.add_argument("--threshold", type=float, required=True)
    vp.add_argument("--kmeans-k", type=int, default=None)
    vp.add_argument("--seed", type=int, default=0)
    vp.add_argument("--out", required=True)
    vp.set_defaults(func=cmd_veroi)

    ep = sub.add_parser("eval", help="score a model on a bundle split")
    ep.add_argument("--model", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--split", default="test", choices=["train", "val", "test"])
    ep.add_argument("--out", required=True)
    ep.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="emit score CSVs and diagram files")
    rp.add_argument("--model", required=True)
    rp.add_argument("--data", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)

    pp = sub.add_parser("probe", help="PCA + ridge linear probing")
    pp.add_argument("--data", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--model", default=None, help="probe this model's mixed features instead of raw grids")
    pp.add_argument("--components", type=int, default=64)
    pp.add_argument("--ridge", type=float, default=None)
    pp.set_defaults(func=cmd_probe)

    dp = sub.add_parser("decode", help="candidate-image retrieval from responses")
    dp.add_argument("--model", required=True)
    dp.add_argument("--candidates", required=True, help="bundle dir supplying candidate images")
    dp.add_argument("--queries", default=None, help="raw f32 [n_queries x n_voxels] file")
    dp.add_argument("--candidate-split", default="test", choices=["train", "val", "test", ""])
    dp.add_argument("--roi", type=int, default=None)
    dp.add_argument("--parcellation", default=None)
    dp.add_argument("--top-k", type=int, default=10)
    dp.add_argument("--out", required=True)
    dp.set_defaults(func=cmd_decode)

    gp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--instances", type=int, default=5)
    gp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    except (DataFormatError, ContractViolation, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
