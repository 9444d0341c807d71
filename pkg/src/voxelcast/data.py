"""On-disk formats and dataset plumbing.

A dataset bundle is a directory holding:

* ``manifest.json``  image ids, layer/channel/grid dims, repetition counts
* ``features.bin``   float32 LE, layout [image][layer][channel][row][col]
* ``responses.bin``  float32 LE, [image][voxel], repetition-averaged
* ``voxels.json``    per-voxel id, subject, modality, 3D coords, optional ROI
* ``split.json``     train/val/test image-id lists plus the split seed
* ``ground_truth.json``  (synthetic bundles only, written by the generator)

Checkpoints use the VXC1 container: magic ``VXC1``, u32 LE header length,
UTF-8 JSON header naming every array (name, shape, offset), then the
concatenated float32 LE payload.  Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import F32, make_rng

MODALITIES = ("fMRI", "EEG", "MEG", "synthetic")


class DataFormatError(ValueError):
    """A file failed structural validation (size, magic, ids, alignment)."""


# ---------------------------------------------------------------------------
# Feature store


@dataclass
class FeatureStore:
    image_ids: list[str]
    grids: np.ndarray  # [n_images, L, D_in, G, G] float32

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    @property
    def n_layers(self) -> int:
        return self.grids.shape[1]

    @property
    def n_channels(self) -> int:
        return self.grids.shape[2]

    @property
    def grid(self) -> int:
        return self.grids.shape[3]

    def index_of(self, image_id: str) -> int:
        try:
            return self._index[image_id]
        except AttributeError:
            self._index = {im: i for i, im in enumerate(self.image_ids)}
            return self._index[image_id]


def write_feature_store(store: FeatureStore, out_dir: str | Path, rep_counts=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n, L, d_in, g, g2 = store.grids.shape
    if g != g2:
        raise DataFormatError("feature grids must be square")
    if len(set(store.image_ids)) != len(store.image_ids):
        raise DataFormatError("duplicate image ids")
    if len(store.image_ids) != n:
        raise DataFormatError("image id count does not match grid count")
    manifest = {
        "format": "voxelcast-bundle-v1",
        "image_ids": list(store.image_ids),
        "n_layers": int(L),
        "n_channels": int(d_in),
        "grid": int(g),
    }
    if rep_counts is not None:
        manifest["rep_counts"] = [int(r) for r in rep_counts]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    np.ascontiguousarray(store.grids, dtype="<f4").tofile(out / "features.bin")


def read_feature_store(bundle_dir: str | Path) -> FeatureStore:
    out = Path(bundle_dir)
    manifest = _read_manifest(out)
    ids = manifest["image_ids"]
    n, L, d_in, g = len(ids), manifest["n_layers"], manifest["n_channels"], manifest["grid"]
    raw = np.fromfile(out / "features.bin", dtype="<f4")
    expect = n * L * d_in * g * g
    if raw.size != expect:
        raise DataFormatError(
            f"features.bin holds {raw.size} floats, manifest implies {expect}"
        )
    return FeatureStore(image_ids=list(ids), grids=raw.reshape(n, L, d_in, g, g))


def _read_manifest(bundle_dir: Path) -> dict:
    path = bundle_dir / "manifest.json"
    if not path.exists():
        raise DataFormatError(f"missing manifest.json in {bundle_dir}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "voxelcast-bundle-v1":
        raise DataFormatError(f"unknown bundle format {manifest.get('format')!r}")
    ids = manifest["image_ids"]
    if len(set(ids)) != len(ids):
        raise DataFormatError("duplicate image ids in manifest")
    return manifest


# ---------------------------------------------------------------------------
# Voxel table


@dataclass
class VoxelTable:
    ids: list[str]
    subject_ids: list[str]
    modalities: list[str]
    coords: np.ndarray  # [N,3] float32, normalized per subject to [-1,1]^3
    rois: list[str | None]

    @property
    def n_voxels(self) -> int:
        return len(self.ids)

    def validate(self) -> None:
        n = len(self.ids)
        if len(set(self.ids)) != n:
            raise DataFormatError("duplicate voxel ids")
        if self.coords.shape != (n, 3):
            raise DataFormatError(f"coords shape {self.coords.shape}, expected ({n}, 3)")
        if not np.all(np.isfinite(self.coords)):
            raise DataFormatError("non-finite voxel coordinates")
        if np.any(np.abs(self.coords) > 1.0 + 1e-5):
            raise DataFormatError("voxel coordinates outside [-1,1]^3; normalize first")
        for m in self.modalities:
            if m not in MODALITIES:
                raise DataFormatError(f"unknown modality {m!r}")

    def subset(self, idx: np.ndarray) -> "VoxelTable":
        idx = np.asarray(idx)
        return VoxelTable(
            ids=[self.ids[i] for i in idx],
            subject_ids=[self.subject_ids[i] for i in idx],
            modalities=[self.modalities[i] for i in idx],
            coords=self.coords[idx].copy(),
            rois=[self.rois[i] for i in idx],
        )


def normalize_coords(coords: np.ndarray, subject_ids: list[str]) -> np.ndarray:
    """Map each subject's bounding box onto [-1,1]^3; idempotent.

    Axes with zero extent collapse to 0.
    """
    coords = np.asarray(coords, dtype=np.float64)
    out = np.zeros_like(coords)
    for subj in sorted(set(subject_ids)):
        rows = np.array([i for i, s in enumerate(subject_ids) if s == subj])
        block = coords[rows]
        lo = block.min(axis=0)
        hi = block.max(axis=0)
        span = hi - lo
        scaled = np.zeros_like(block)
        for a in range(3):
            if span[a] > 0:
                scaled[:, a] = (block[:, a] - lo[a]) / span[a] * 2.0 - 1.0
        out[rows] = scaled
    return out.astype(F32)


def write_voxel_table(table: VoxelTable, bundle_dir: str | Path) -> None:
    table.validate()
    records = [
        {
            "id": table.ids[i],
            "subject_id": table.subject_ids[i],
            "modality": table.modalities[i],
            "coords": [float(c) for c in table.coords[i]],
            "roi": table.rois[i],
        }
        for i in range(table.n_voxels)
    ]
    (Path(bundle_dir) / "voxels.json").write_text(json.dumps(records, indent=0))


def read_voxel_table(bundle_dir: str | Path) -> VoxelTable:
    path = Path(bundle_dir) / "voxels.json"
    if not path.exists():
        raise DataFormatError(f"missing voxels.json in {bundle_dir}")
    records = json.loads(path.read_text())
    table = VoxelTable(
        ids=[r["id"] for r in records],
        subject_ids=[r["subject_id"] for r in records],
        modalities=[r["modality"] for r in records],
        coords=np.array([r["coords"] for r in records], dtype=F32).reshape(-1, 3),
        rois=[r.get("roi") for r in records],
    )
    table.validate()
    return table


# ---------------------------------------------------------------------------
# Responses


@dataclass
class ResponseSet:
    values: np.ndarray  # [n_images, n_voxels] float32, repetition-averaged
    rep_counts: list[int]

    @property
    def n_images(self) -> int:
        return self.values.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.values.shape[1]

    def validate(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise DataFormatError("non-finite responses after repetition averaging")
        if len(self.rep_counts) != self.n_images:
            raise DataFormatError("rep_counts length does not match image count")


def repetition_average(raw: dict[str, list[np.ndarray]], image_ids: list[str]) -> ResponseSet:
    """Arithmetic mean over repetitions, per image, in float64 accumulation."""
    rows = []
    counts = []
    for im in image_ids:
        reps = raw[im]
        if not reps:
            raise DataFormatError(f"image {im!r} has no repetitions")
        sizes = {np.asarray(r).shape for r in reps}
        if len(sizes) != 1:
            raise DataFormatError(f"ragged voxel counts across repetitions of {im!r}")
        acc = np.zeros(np.asarray(reps[0]).shape, dtype=np.float64)
        for r in reps:
            acc += np.asarray(r, dtype=np.float64)
        rows.append((acc / len(reps)).astype(F32))
        counts.append(len(reps))
    rs = ResponseSet(values=np.stack(rows), rep_counts=counts)
    rs.validate()
    return rs


def write_responses(responses: ResponseSet, bundle_dir: str | Path) -> None:
    responses.validate()
    np.ascontiguousarray(responses.values, dtype="<f4").tofile(Path(bundle_dir) / "responses.bin")


def read_responses(bundle_dir: str | Path, n_images: int, n_voxels: int, rep_counts) -> ResponseSet:
    raw = np.fromfile(Path(bundle_dir) / "responses.bin", dtype="<f4")
    if raw.size != n_images * n_voxels:
        raise DataFormatError(
            f"responses.bin holds {raw.size} floats, expected {n_images * n_voxels}"
        )
    rs = ResponseSet(values=raw.reshape(n_images, n_voxels), rep_counts=list(rep_counts))
    rs.validate()
    return rs


# ---------------------------------------------------------------------------
# Splits


@dataclass
class SplitSpec:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int

    def validate(self, all_ids: list[str]) -> None:
        union = self.train + self.val + self.test
        if len(union) != len(set(union)):
            raise DataFormatError("split lists overlap")
        if set(union) != set(all_ids):
            raise DataFormatError("split does not cover the image set")


def split_dataset(image_ids: list[str], ratio=(90, 6, 4), seed: int = 0) -> SplitSpec:
    """Deterministic shuffle then contiguous train/val/test slices.

    Val and test sizes are round(n * ratio); leftover images go to train.
    """
    n = len(image_ids)
    if n < 3:
        raise DataFormatError(f"need at least 3 images to split, got {n}")
    total = float(sum(ratio))
    n_val = int(np.floor(n * ratio[1] / total + 0.5))
    n_test = int(np.floor(n * ratio[2] / total + 0.5))
    n_train = n - n_val - n_test
    if n_train <= 0:
        raise DataFormatError("split ratio leaves no training images")
    order = make_rng(seed).permutation(n)
    shuffled = [image_ids[i] for i in order]
    return SplitSpec(
        train=shuffled[:n_train],
        val=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
        seed=int(seed),
    )


def write_split(split: SplitSpec, bundle_dir: str | Path) -> None:
    payload = {"train": split.train, "val": split.val, "test": split.test, "seed": split.seed}
    (Path(bundle_dir) / "split.json").write_text(json.dumps(payload, indent=0))


def read_split(bundle_dir: str | Path) -> SplitSpec:
    path = Path(bundle_dir) / "split.json"
    if not path.exists():
        raise DataFormatError(f"missing split.json in {bundle_dir}")
    d = json.loads(path.read_text())
    return SplitSpec(train=d["train"], val=d["val"], test=d["test"], seed=int(d["seed"]))


# ---------------------------------------------------------------------------
# Bundle


@dataclass
class Bundle:
    store: FeatureStore
    voxels: VoxelTable
    responses: ResponseSet
    split: SplitSpec
    rep_counts: list[int] = field(default_factory=list)
    ground_truth: dict | None = None

    def image_indices(self, ids: list[str]) -> np.ndarray:
        return np.array([self.store.index_of(i) for i in ids], dtype=np.int64)


def load_bundle(bundle_dir: str | Path) -> Bundle:
    """Load and cross-validate a full bundle directory."""
    out = Path(bundle_dir)
    store = read_feature_store(out)
    manifest = _read_manifest(out)
    voxels = read_voxel_table(out)
    rep_counts = manifest.get("rep_counts", [1] * store.n_images)
    responses = read_responses(out, store.n_images, voxels.n_voxels, rep_counts)
    split = read_split(out)
    split.validate(store.image_ids)
    gt_path = out / "ground_truth.json"
    gt = json.loads(gt_path.read_text()) if gt_path.exists() else None
    return Bundle(
        store=store,
        voxels=voxels,
        responses=responses,
        split=split,
        rep_counts=list(rep_counts),
        ground_truth=gt,
    )


# ---------------------------------------------------------------------------
# VXC1 checkpoints

_MAGIC = b"VXC1"


def save_checkpoint(arrays: dict[str, np.ndarray], meta: dict, path: str | Path) -> None:
    """Write named float32 arrays plus a JSON meta block, bit-stable."""
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}, expected {_MAGIC!r}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    payload = raw[8 + hlen :]
    arrays = {}
    for e in header["arrays"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = e["offset"]
        end = start + count * 4
        if end > len(payload):
            raise DataFormatError(f"{path}: payload truncated for array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
    return arrays, header["meta"]


def expect_arrays(arrays: dict[str, np.ndarray], names: list[str], path: str = "") -> None:
    missing = [n for n in names if n not in arrays]
    if missing:
        raise DataFormatError(f"checkpoint {path} is missing arrays: {', '.join(missing)}")
