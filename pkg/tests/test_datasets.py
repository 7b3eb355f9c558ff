"""Dataset generation, manifests, splits, and view-feature persistence."""

import numpy as np
import pytest

from shaperet.datasets import (DatasetRecipe, MANIFEST_NAME, gen_dataset,
                               load_dataset_cloud, load_dataset_views,
                               load_manifest, load_view, save_manifest,
                               save_view, split)
from shaperet.errors import FormatError, ParameterError
from shaperet.geometry import ViewFeature

SMALL_RECIPE = DatasetRecipe(families=("box", "torus"), per_family=4,
                             n_points=128, view_points=512, n_views=6,
                             grid=8, seed=3, name="small")


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    manifest = gen_dataset(SMALL_RECIPE, root)
    return root, manifest


# -----------------------------------------------------------------------------
# generation
# -----------------------------------------------------------------------------


def test_gen_dataset_counts(small_dataset):
    root, manifest = small_dataset
    assert len(manifest.shapes) == 8
    assert len(list((root / "clouds").glob("*.spcd"))) == 8
    assert len(list((root / "views").glob("*.vfeat"))) == 8 * 6
    assert sum(len(r.view_indices) for r in manifest.shapes) == 48


def test_gen_dataset_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    gen_dataset(SMALL_RECIPE, a)
    gen_dataset(SMALL_RECIPE, b)
    for rel in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_generated_clouds_are_normalized(small_dataset):
    root, manifest = small_dataset
    for rec in manifest.shapes[:3]:
        cloud = load_dataset_cloud(root, rec)
        assert np.linalg.norm(cloud.xyz.mean(axis=0)) < 1e-6
        assert abs(np.linalg.norm(cloud.xyz, axis=1).max() - 1.0) < 1e-6
        assert cloud.shape_id == rec.shape_id


def test_generated_views_validate(small_dataset):
    root, manifest = small_dataset
    views = load_dataset_views(root, manifest.shapes[0])
    assert [v.view_index for v in views] == list(range(6))
    for v in views:
        v.validate()


def test_recipe_validation():
    with pytest.raises(ParameterError):
        DatasetRecipe(per_family=0).validate()
    with pytest.raises(ParameterError):
        DatasetRecipe(families=()).validate()
    with pytest.raises(ParameterError):
        DatasetRecipe(view_points=0).validate()


def test_family_parameters_are_near_duplicates(small_dataset):
    _, manifest = small_dataset
    tubes = sorted(rec.spec.params["tube_radius"] for rec in manifest.shapes
                   if rec.class_id == "torus")
    gaps = np.diff(tubes)
    assert np.all(gaps > 0)  # distinct variants
    assert np.max(gaps) < 0.2  # but close together


# -----------------------------------------------------------------------------
# manifests
# -----------------------------------------------------------------------------


def test_manifest_round_trip(small_dataset, tmp_path):
    root, manifest = small_dataset
    path = tmp_path / "copy.jsonl"
    save_manifest(manifest, path)
    loaded = load_manifest(path)
    assert loaded == manifest


def test_manifest_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("not json\n")
    with pytest.raises(FormatError):
        load_manifest(bad)
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(FormatError):
        load_manifest(empty)
    wrong_head = tmp_path / "wrong.jsonl"
    wrong_head.write_text('{"type": "shape"}\n')
    with pytest.raises(FormatError):
        load_manifest(wrong_head)


# -----------------------------------------------------------------------------
# splits
# -----------------------------------------------------------------------------


def test_shape_centered_split_disjoint(small_dataset):
    _, manifest = small_dataset
    train, test = split(manifest, "shape_centered", 0.75, seed=1)
    train_ids = {r.shape_id for r in train.shapes}
    test_ids = {r.shape_id for r in test.shapes}
    assert len(train_ids & test_ids) == 0
    assert len(train_ids) == 6 and len(test_ids) == 2
    # stratified: each family contributes per the global fraction (+- 1)
    for fam in ("box", "torus"):
        n_train = sum(1 for r in train.shapes if r.class_id == fam)
        assert abs(n_train - 3) <= 1


def test_image_centered_split_disjoint_views(small_dataset):
    _, manifest = small_dataset
    train, test = split(manifest, "image_centered", 0.5, seed=2)
    assert {r.shape_id for r in train.shapes} == {r.shape_id for r in test.shapes}
    train_map = {r.shape_id: set(r.view_indices) for r in train.shapes}
    for rec in test.shapes:
        assert len(train_map[rec.shape_id] & set(rec.view_indices)) == 0
        assert len(rec.view_indices) == 3
    for rec in train.shapes:
        assert len(rec.view_indices) == 3


def test_split_validation(small_dataset):
    _, manifest = small_dataset
    with pytest.raises(ParameterError):
        split(manifest, "image_centered", 0.01, seed=0)
    with pytest.raises(ParameterError):
        split(manifest, "shape_centered", 1.5, seed=0)
    with pytest.raises(ParameterError):
        split(manifest, "by_vibes", 0.5, seed=0)


def test_split_deterministic(small_dataset):
    _, manifest = small_dataset
    a_train, a_test = split(manifest, "image_centered", 0.5, seed=9)
    b_train, b_test = split(manifest, "image_centered", 0.5, seed=9)
    assert a_train == b_train and a_test == b_test
    c_train, _ = split(manifest, "image_centered", 0.5, seed=10)
    assert c_train != a_train


# -----------------------------------------------------------------------------
# vfeat files
# -----------------------------------------------------------------------------


def test_vfea_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    d = rng.uniform(size=64).astype(np.float32).astype(np.float64)
    d /= d.sum()
    d = d.astype(np.float32).astype(np.float64)
    view = ViewFeature(view_index=2, descriptor=d)
    path = tmp_path / "v.vfeat"
    save_view(view, path)
    assert path.stat().st_size == 12 + 64 * 4
    loaded = load_view(path, view_index=2)
    assert np.array_equal(loaded.descriptor, view.descriptor.astype("<f4").astype(np.float64))


def test_vfea_corruption(tmp_path):
    view = ViewFeature(0, np.full(16, 1 / 16))
    path = tmp_path / "v.vfeat"
    save_view(view, path)
    bad = tmp_path / "bad.vfeat"
    bad.write_bytes(b"ZZZZ" + path.read_bytes()[4:])
    with pytest.raises(FormatError):
        load_view(bad)
    short = tmp_path / "short.vfeat"
    short.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_view(short)
