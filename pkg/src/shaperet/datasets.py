"""Synthetic benchmark generation and persistence.

A dataset is a directory of SPCD clouds and per-view VFEA descriptor files
described by a line-delimited JSON manifest. Shape families play the role of
classes; variants within a family differ by stratified-with-jitter parameter
draws, so each family contains hard near-duplicates. Splits are either
shape-centered (disjoint shape ids) or image-centered (shapes shared, view
sets disjoint).
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError
from .geometry import (ColorRule, PointCloud, ShapeSpec, ViewFeature, gen_shape,
                       load_cloud, normalize, project_views, quantize_cloud, save_cloud)
from .rng import derive_rng

VFEA_MAGIC = b"VFEA"
VFEA_VERSION = 1
_VFEA_HEADER = struct.Struct("<4sII")

MANIFEST_NAME = "manifest.jsonl"
TRAIN_MANIFEST_NAME = "train_manifest.jsonl"
TEST_MANIFEST_NAME = "test_manifest.jsonl"


@dataclass(frozen=True)
class DatasetRecipe:
    """Generation settings for one synthetic benchmark.

    ``n_points`` sizes the stored clouds (the shape modality); ``view_points``
    sizes the separate dense surface sample that views are rendered from, so
    view descriptors carry render-like fidelity rather than the sparse
    cloud's sampling noise.
    """

    families: tuple[str, ...] = ("box", "cylinder", "torus", "superellipsoid")
    per_family: int = 16
    n_points: int = 1024
    view_points: int = 32768
    n_views: int = 12
    grid: int = 16
    seed: int = 0
    name: str = "synthetic"

    def validate(self) -> None:
        if len(self.families) < 1 or self.per_family < 1:
            raise ParameterError("recipe needs at least one family and one variant")
        if self.n_points < 1 or self.n_views < 1 or self.grid < 1:
            raise ParameterError("n_points, n_views, and grid must be >= 1")
        if self.view_points < 1:
            raise ParameterError("view_points must be >= 1")


@dataclass
class ShapeRecord:
    shape_id: str
    class_id: str
    spec: ShapeSpec
    cloud_path: str
    view_indices: list[int]
    view_paths: list[str]


@dataclass
class DatasetManifest:
    name: str
    seed: int
    n_points: int
    n_views: int
    grid: int
    split: str = "full"
    shapes: list[ShapeRecord] = field(default_factory=list)

    @property
    def feat_dim(self) -> int:
        return self.grid * self.grid

    def shape_map(self) -> dict[str, ShapeRecord]:
        return {rec.shape_id: rec for rec in self.shapes}


# ---------------------------------------------------------------------------
# Family parameter ladders
# ---------------------------------------------------------------------------


def _stratified(lo: float, hi: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """One value per cell of an equal partition, jittered within the middle
    half of its cell so neighboring variants stay distinct but close."""
    cells = np.arange(count) + 0.25 + 0.5 * rng.random(count)
    return lo + (hi - lo) * cells / count


def _stratified_log(lo: float, hi: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """Stratified on a log scale: uniform relative gaps between variants.

    Used for families whose variants differ in a single aspect ratio, where
    discriminability tracks relative rather than absolute differences.
    """
    return np.exp(_stratified(np.log(lo), np.log(hi), count, rng))


def family_specs(family: str, count: int, seed: int) -> list[ShapeSpec]:
    """Parameter ladder for ``count`` variants of one family."""
    rng = derive_rng("family_specs", family, count, seed)
    gray = ColorRule()
    specs: list[ShapeSpec] = []
    if family == "sphere":
        radii = _stratified(0.6, 1.4, count, rng)
        specs = [ShapeSpec("sphere", {"radius": float(r)}, gray) for r in radii]
    elif family == "box":
        hy = _stratified_log(0.32, 0.95, count, rng)
        hz = _stratified_log(0.10, 0.45, count, rng)[rng.permutation(count)]
        specs = [ShapeSpec("box", {"hx": 1.0, "hy": float(a), "hz": float(b)}, gray)
                 for a, b in zip(hy, hz)]
    elif family == "cylinder":
        radii = _stratified_log(0.20, 1.05, count, rng)
        specs = [ShapeSpec("cylinder", {"radius": float(r), "height": 2.0}, gray)
                 for r in radii]
    elif family == "torus":
        tubes = _stratified_log(0.09, 0.58, count, rng)
        specs = [ShapeSpec("torus", {"ring_radius": 1.0, "tube_radius": float(t)}, gray)
                 for t in tubes]
    elif family == "superellipsoid":
        widths = _stratified_log(0.32, 0.95, count, rng)
        exponents = _stratified_log(1.8, 5.5, count, rng)[rng.permutation(count)]
        specs = [ShapeSpec("superellipsoid",
                           {"a": 1.0, "b": float(w), "c": 0.55, "exponent": float(e)}, gray)
                 for w, e in zip(widths, exponents)]
    else:
        raise ParameterError(f"unknown family {family!r}")
    return specs


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def gen_dataset(recipe: DatasetRecipe, out_dir: str | Path) -> DatasetManifest:
    """Generate clouds and view features on disk and return the manifest.

    Clouds are normalized and stored as SPCD (f32); view features are computed
    from the stored precision so recomputing them from the files is exact.
    """
    recipe.validate()
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    (out / "views").mkdir(parents=True, exist_ok=True)

    manifest = DatasetManifest(name=recipe.name, seed=recipe.seed,
                               n_points=recipe.n_points, n_views=recipe.n_views,
                               grid=recipe.grid)
    for family in recipe.families:
        specs = family_specs(family, recipe.per_family, recipe.seed)
        for i, spec in enumerate(specs):
            shape_id = f"{family}_{i:03d}"
            shape_seed = derive_rng("shape_seed", recipe.seed, shape_id).integers(0, 2**63)
            cloud = gen_shape(spec, recipe.n_points, int(shape_seed),
                              shape_id=shape_id, class_id=family)
            cloud = quantize_cloud(normalize(cloud))
            cloud_rel = f"clouds/{shape_id}.spcd"
            try:
                save_cloud(cloud, out / cloud_rel)
            except OSError as exc:
                raise FormatError(f"failed to write {out / cloud_rel}: {exc}") from exc
            render_seed = derive_rng("render_seed", recipe.seed, shape_id).integers(0, 2**63)
            render = quantize_cloud(normalize(gen_shape(
                spec, recipe.view_points, int(render_seed),
                shape_id=shape_id, class_id=family)))
            views = project_views(render, n_views=recipe.n_views, grid=recipe.grid)
            view_paths = []
            for vf in views:
                rel = f"views/{shape_id}_v{vf.view_index:02d}.vfeat"
                save_view(vf, out / rel)
                view_paths.append(rel)
            manifest.shapes.append(ShapeRecord(
                shape_id=shape_id, class_id=family, spec=spec,
                cloud_path=cloud_rel,
                view_indices=[vf.view_index for vf in views],
                view_paths=view_paths,
            ))
    save_manifest(manifest, out / MANIFEST_NAME)
    return manifest


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def split(manifest: DatasetManifest, mode: str, fraction: float,
          seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    """Partition the dataset for training and testing.

    shape_centered: disjoint shape ids, stratified by class. image_centered:
    every shape appears on both sides with disjoint view sets.
    """
    if not (0.0 < fraction < 1.0):
        raise ParameterError(f"fraction must be in (0, 1), got {fraction}")
    if mode == "shape_centered":
        return _split_by_shape(manifest, fraction, seed)
    if mode == "image_centered":
        return _split_by_view(manifest, fraction, seed)
    raise ParameterError(f"unknown split mode {mode!r}")


def _split_by_shape(manifest: DatasetManifest, fraction: float,
                    seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    by_class: dict[str, list[ShapeRecord]] = {}
    for rec in manifest.shapes:
        by_class.setdefault(rec.class_id, []).append(rec)
    train: list[ShapeRecord] = []
    test: list[ShapeRecord] = []
    for class_id in sorted(by_class):
        records = by_class[class_id]
        order = derive_rng("split_shape", manifest.seed, seed, class_id).permutation(len(records))
        n_train = int(round(fraction * len(records)))
        for pos, idx in enumerate(order):
            (train if pos < n_train else test).append(records[idx])
    if not train or not test:
        raise ParameterError(f"fraction {fraction} leaves an empty split side")
    train_sorted = sorted(train, key=lambda r: r.shape_id)
    test_sorted = sorted(test, key=lambda r: r.shape_id)
    return (
        replace(manifest, split="shape_centered_train", shapes=train_sorted),
        replace(manifest, split="shape_centered_test", shapes=test_sorted),
    )


def _split_by_view(manifest: DatasetManifest, fraction: float,
                   seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    train: list[ShapeRecord] = []
    test: list[ShapeRecord] = []
    for rec in manifest.shapes:
        n_views = len(rec.view_indices)
        n_train = int(round(fraction * n_views))
        if n_train < 1 or n_train >= n_views:
            raise ParameterError(
                f"fraction {fraction} leaves an empty view side for {rec.shape_id}")
        order = derive_rng("split_view", manifest.seed, seed, rec.shape_id).permutation(n_views)
        train_pos = sorted(order[:n_train].tolist())
        test_pos = sorted(order[n_train:].tolist())
        train.append(replace(
            rec,
            view_indices=[rec.view_indices[p] for p in train_pos],
            view_paths=[rec.view_paths[p] for p in train_pos],
        ))
        test.append(replace(
            rec,
            view_indices=[rec.view_indices[p] for p in test_pos],
            view_paths=[rec.view_paths[p] for p in test_pos],
        ))
    return (
        replace(manifest, split="image_centered_train", shapes=train),
        replace(manifest, split="image_centered_test", shapes=test),
    )


# ---------------------------------------------------------------------------
# Manifest persistence (line-delimited JSON)
# ---------------------------------------------------------------------------


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    records = [{
        "type": "dataset", "name": manifest.name, "seed": manifest.seed,
        "n_points": manifest.n_points, "n_views": manifest.n_views,
        "grid": manifest.grid, "split": manifest.split,
    }]
    for rec in manifest.shapes:
        records.append({
            "type": "shape",
            "shape_id": rec.shape_id,
            "class_id": rec.class_id,
            "family": rec.spec.family,
            "params": rec.spec.params,
            "color_rule": {"kind": rec.spec.color_rule.kind,
                           "base": list(rec.spec.color_rule.base),
                           "tip": list(rec.spec.color_rule.tip)},
            "cloud": rec.cloud_path,
            "view_indices": rec.view_indices,
            "views": rec.view_paths,
        })
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(json.dumps(r, sort_keys=True) for r in records) + "\n")
    os.replace(tmp, path)


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    try:
        head = json.loads(lines[0])
        if head.get("type") != "dataset":
            raise FormatError(f"{path}: first record must be the dataset header")
        manifest = DatasetManifest(
            name=head["name"], seed=head["seed"], n_points=head["n_points"],
            n_views=head["n_views"], grid=head["grid"], split=head.get("split", "full"),
        )
        for line in lines[1:]:
            rec = json.loads(line)
            if rec.get("type") != "shape":
                raise FormatError(f"{path}: unexpected record type {rec.get('type')!r}")
            color = rec.get("color_rule", {})
            spec = ShapeSpec(
                family=rec["family"],
                params={k: float(v) for k, v in rec["params"].items()},
                color_rule=ColorRule(
                    kind=color.get("kind", "constant"),
                    base=tuple(color.get("base", (0.5, 0.5, 0.5))),
                    tip=tuple(color.get("tip", (0.5, 0.5, 0.5))),
                ),
            )
            manifest.shapes.append(ShapeRecord(
                shape_id=rec["shape_id"], class_id=rec["class_id"], spec=spec,
                cloud_path=rec["cloud"], view_indices=list(rec["view_indices"]),
                view_paths=list(rec["views"]),
            ))
    except (KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed manifest record: {exc}") from exc
    return manifest


# ---------------------------------------------------------------------------
# View feature persistence (VFEA v1)
# ---------------------------------------------------------------------------


def save_view(view: ViewFeature, path: str | Path) -> None:
    data = view.descriptor.astype("<f4")
    header = _VFEA_HEADER.pack(VFEA_MAGIC, VFEA_VERSION, data.size)
    Path(path).write_bytes(header + data.tobytes())


def load_view(path: str | Path, view_index: int = 0) -> ViewFeature:
    raw = Path(path).read_bytes()
    if len(raw) < _VFEA_HEADER.size:
        raise FormatError(f"{path}: truncated VFEA header")
    magic, version, dim = _VFEA_HEADER.unpack_from(raw)
    if magic != VFEA_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VFEA_VERSION:
        raise FormatError(f"{path}: unsupported VFEA version {version}")
    if len(raw) != _VFEA_HEADER.size + 4 * dim:
        raise FormatError(f"{path}: payload size mismatch")
    descriptor = np.frombuffer(raw, dtype="<f4", offset=_VFEA_HEADER.size).astype(np.float64)
    return ViewFeature(view_index=view_index, descriptor=descriptor)


def load_dataset_cloud(base_dir: str | Path, rec: ShapeRecord) -> PointCloud:
    return load_cloud(Path(base_dir) / rec.cloud_path,
                      shape_id=rec.shape_id, class_id=rec.class_id)


def load_dataset_views(base_dir: str | Path, rec: ShapeRecord) -> list[ViewFeature]:
    return [load_view(Path(base_dir) / rel, view_index=idx)
            for idx, rel in zip(rec.view_indices, rec.view_paths)]
