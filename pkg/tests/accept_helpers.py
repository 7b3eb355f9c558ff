"""Shared machinery for the acceptance suite: the standard toy protocols."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from shaperet import datasets, index as index_mod, metrics, trainer
from shaperet.encoders import (EncoderParams, image_forward, init_params,
                               params_fingerprint, serialize_params, shape_forward)
from shaperet.metrics import EvalReport

HIDDEN = 128
EMBED = 64


@dataclass
class ToyData:
    root: Path
    manifest: datasets.DatasetManifest
    train_manifest: datasets.DatasetManifest
    test_manifest: datasets.DatasetManifest

    @property
    def feat_dim(self) -> int:
        return self.manifest.feat_dim


def make_toy_dataset(root: Path, seed: int = 11,
                     families: tuple[str, ...] | None = None,
                     split_seed: int | None = None) -> ToyData:
    """Default 64-shape dataset with the image-centered 50/50 split."""
    recipe = datasets.DatasetRecipe(seed=seed)
    if families is not None:
        recipe = datasets.DatasetRecipe(seed=seed, families=families)
    manifest = datasets.gen_dataset(recipe, root)
    train_m, test_m = datasets.split(
        manifest, "image_centered", 0.5,
        seed if split_seed is None else split_seed)
    datasets.save_manifest(train_m, root / datasets.TRAIN_MANIFEST_NAME)
    datasets.save_manifest(test_m, root / datasets.TEST_MANIFEST_NAME)
    return ToyData(root=Path(root), manifest=manifest,
                   train_manifest=train_m, test_manifest=test_m)


def standard_train(data: ToyData, seed: int, loss: str = "info_nce",
                   epochs: int = 200, mode: str = "pre_align",
                   initial_params: EncoderParams | None = None,
                   use_cache: bool = True) -> trainer.TrainResult:
    """The standard toy training run: batch 32, default optimizer settings."""
    tuples = trainer.load_tuples(data.train_manifest, data.root)
    config = trainer.TrainConfig(
        epochs=epochs, batch_size=32, seed=seed, loss=loss, mode=mode,
        use_cache=use_cache)
    if initial_params is None:
        initial_params = init_params(data.feat_dim, HIDDEN, EMBED, seed=seed)
    return trainer.train(config, tuples, initial_params)


def build_shape_index(params: EncoderParams, data: ToyData) -> index_mod.ShapeIndex:
    tuples = trainer.load_tuples(data.manifest, data.root)
    emb = shape_forward(params, [t.cloud for t in tuples]).emb
    return index_mod.build_index(
        [(t.shape_id, t.class_id, emb[i]) for i, t in enumerate(tuples)],
        fingerprint=params_fingerprint(params))


def eval_held_out(params: EncoderParams, data: ToyData,
                  manifest: datasets.DatasetManifest | None = None) -> EvalReport:
    """Encode held-out views with f_I and evaluate against the full index."""
    idx = build_shape_index(params, data)
    queries = []
    source = manifest if manifest is not None else data.test_manifest
    for t in trainer.load_tuples(source, data.root):
        emb = image_forward(params, np.stack([v.descriptor for v in t.views])).emb
        for row in emb:
            queries.append((row, t.shape_id, t.class_id))
    return metrics.evaluate(idx, queries, k=10)


def checkpoint_bytes(params: EncoderParams) -> bytes:
    return serialize_params(params)
