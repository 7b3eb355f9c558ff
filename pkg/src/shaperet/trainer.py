"""Batch construction, the optimization loop, and frozen-branch caching.

Training pairs each augmented cloud with one randomly selected view of the
same shape. Two modes: ``pre_align`` trains both branches jointly for a short
warm-up, then freezes the image branch for the rest of the run; ``fine_tune``
keeps the image branch frozen from the first step (weights stay bitwise
constant). While the image branch is frozen its embeddings can be served from
an offline cache; cached and freshly encoded values are the same pure
function of the weights, so loss trajectories are identical either way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import FingerprintError, NumericError, ParameterError
from .geometry import AugmentConfig, PointCloud, ViewFeature, augment
from .losses import (TAU_MAX, TAU_MIN, TAU_INIT, BetaSchedule, anneal_beta, hcl,
                     info_nce)
from .encoders import (EncoderParams, Gradients, ImageForward, ShapeForward,
                       backward, image_fingerprint, image_forward, shape_forward)
from .datasets import DatasetManifest, load_dataset_cloud, load_dataset_views
from .rng import derive_rng

DECAYED_NDIM = 2  # decoupled weight decay applies to weight matrices only

_SHAPE_KEYS = ("w1", "b1", "w2", "b2", "w3", "b3")
_IMAGE_KEYS = ("a1", "c1", "a2", "c2")


# ---------------------------------------------------------------------------
# Training data
# ---------------------------------------------------------------------------


@dataclass
class TrainTuple:
    """One shape with its M >= 1 views."""

    shape_id: str
    class_id: str
    cloud: PointCloud
    views: list[ViewFeature]

    def __post_init__(self) -> None:
        if len(self.views) < 1:
            raise ParameterError(f"tuple {self.shape_id} has no views")


def load_tuples(manifest: DatasetManifest, base_dir: str | Path) -> list[TrainTuple]:
    """Materialize training tuples from a dataset manifest."""
    tuples = []
    for rec in manifest.shapes:
        tuples.append(TrainTuple(
            shape_id=rec.shape_id,
            class_id=rec.class_id,
            cloud=load_dataset_cloud(base_dir, rec),
            views=load_dataset_views(base_dir, rec),
        ))
    return tuples


@dataclass
class BatchData:
    clouds: list[PointCloud]
    view_descriptors: np.ndarray      # (N, F)
    view_keys: list[tuple[str, int]]  # (shape_id, view_index) per row
    shape_ids: list[str]
    class_ids: list[str]


def make_batch(tuples: Sequence[TrainTuple], batch_size: int,
               augment_cfg: AugmentConfig, epoch: int, step: int,
               seed: int) -> BatchData:
    """Deterministic batch: distinct shapes, augmented clouds, one view each.

    Shapes follow a per-epoch permutation derived from (seed, epoch); step s
    takes the s-th slice (the final slice of an epoch may be short). Augment
    seeds derive from (seed, epoch, step, shape_id); the view is uniform over
    the tuple's views.
    """
    n = len(tuples)
    if n < batch_size:
        raise ParameterError(f"dataset size {n} smaller than batch size {batch_size}")
    if batch_size < 1:
        raise ParameterError("batch_size must be >= 1")
    order = derive_rng("epoch_order", seed, epoch).permutation(n)
    lo = step * batch_size
    if lo >= n:
        raise ParameterError(f"step {step} out of range for epoch of {n} tuples")
    picked = order[lo:lo + batch_size]

    clouds = []
    descriptors = []
    keys = []
    for idx in picked:
        t = tuples[int(idx)]
        aug_seed = derive_rng("augment_seed", seed, epoch, step, t.shape_id).integers(0, 2**63)
        clouds.append(augment(t.cloud, augment_cfg, int(aug_seed)))
        v = int(derive_rng("view_pick", seed, epoch, step, t.shape_id).integers(len(t.views)))
        view = t.views[v]
        descriptors.append(view.descriptor)
        keys.append((t.shape_id, view.view_index))
    return BatchData(
        clouds=clouds,
        view_descriptors=np.stack(descriptors),
        view_keys=keys,
        shape_ids=[tuples[int(i)].shape_id for i in picked],
        class_ids=[tuples[int(i)].class_id for i in picked],
    )


# ---------------------------------------------------------------------------
# Frozen-branch embedding cache
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingCache:
    """Offline image embeddings, valid only for one frozen weight fingerprint."""

    entries: dict[tuple[str, int], np.ndarray]
    fingerprint: bytes

    def lookup(self, shape_id: str, view_index: int, current_fingerprint: bytes) -> np.ndarray:
        if current_fingerprint != self.fingerprint:
            raise FingerprintError(
                "embedding cache is stale: image-branch weights changed since precompute")
        try:
            return self.entries[(shape_id, view_index)]
        except KeyError as exc:
            raise ParameterError(f"cache is missing view {(shape_id, view_index)}") from exc

    def __len__(self) -> int:
        return len(self.entries)


def precompute_image_embeddings(params: EncoderParams,
                                tuples: Sequence[TrainTuple]) -> EmbeddingCache:
    """Encode every (shape, view) once; requires a frozen image branch."""
    if params.image_trainable:
        raise ParameterError("precompute requires a frozen image branch")
    entries: dict[tuple[str, int], np.ndarray] = {}
    for t in tuples:
        descriptors = np.stack([v.descriptor for v in t.views])
        emb = image_forward(params, descriptors).emb
        for view, row in zip(t.views, emb):
            entries[(t.shape_id, view.view_index)] = row
    return EmbeddingCache(entries=entries, fingerprint=image_fingerprint(params))


def batch_image_embeddings(params: EncoderParams, batch: BatchData,
                           cache: EmbeddingCache | None,
                           frozen_fingerprint: bytes | None,
                           ) -> tuple[np.ndarray, ImageForward | None]:
    """Image embeddings for a batch, via cache when available."""
    if cache is not None:
        if frozen_fingerprint is None:
            raise ParameterError("cache lookups need the frozen-branch fingerprint")
        rows = [cache.lookup(sid, vi, frozen_fingerprint) for sid, vi in batch.view_keys]
        return np.stack(rows), None
    fwd = image_forward(params, batch.view_descriptors)
    return fwd.emb, fwd


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Per-array moment buffers; entries appear lazily per parameter name."""

    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TrainConfig:
    """Settings for one optimization run."""

    epochs: int
    batch_size: int
    learning_rate: float = 5e-4
    optimizer: str = "adaptive_moments"   # or "sgd_momentum"
    loss: str = "info_nce"                # or "hcl"
    beta_schedule: BetaSchedule | None = None
    seed: int = 0
    mode: str = "pre_align"               # or "fine_tune"
    warmup_epochs: int = 10
    tau_init: float = TAU_INIT
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    use_cache: bool = True

    def validate(self) -> None:
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.learning_rate < 0.0:
            raise ParameterError("learning_rate must be >= 0")
        if self.optimizer not in ("sgd_momentum", "adaptive_moments"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("info_nce", "hcl"):
            raise ParameterError(f"unknown loss {self.loss!r}")
        if self.mode not in ("pre_align", "fine_tune"):
            raise ParameterError(f"unknown mode {self.mode!r}")
        if self.loss == "hcl" and self.batch_size < 2:
            raise ParameterError("hcl needs batch_size >= 2")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        self.augment.validate()

    def resolved_schedule(self) -> BetaSchedule | None:
        if self.loss != "hcl":
            return None
        if self.beta_schedule is not None:
            return self.beta_schedule
        return BetaSchedule(total_epochs=self.epochs)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: OptimizerState, config: TrainConfig,
                   ) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One deterministic update over the arrays named in ``grads``.

    sgd_momentum: v <- mu v - lr g; w <- w + v. adaptive_moments: Adam moments
    with bias correction plus decoupled weight decay, applied to matrices
    (ndim >= 2) only.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ParameterError(f"gradient shape mismatch for {name}")
    new_params = {name: arr.copy() for name, arr in params.items()}
    new_state = OptimizerState(
        t=state.t + 1,
        m={k: arr.copy() for k, arr in state.m.items()},
        v={k: arr.copy() for k, arr in state.v.items()},
    )
    lr = config.learning_rate
    if config.optimizer == "sgd_momentum":
        for name, g in grads.items():
            vel = new_state.m.get(name)
            if vel is None:
                vel = np.zeros_like(params[name])
            vel = config.momentum * vel - lr * g
            new_state.m[name] = vel
            new_params[name] = params[name] + vel
    else:
        b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
        t = new_state.t
        for name, g in grads.items():
            m = new_state.m.get(name)
            v = new_state.v.get(name)
            if m is None:
                m = np.zeros_like(params[name])
                v = np.zeros_like(params[name])
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            new_state.m[name] = m
            new_state.v[name] = v
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            update = m_hat / (np.sqrt(v_hat) + eps)
            if config.weight_decay > 0.0 and params[name].ndim >= DECAYED_NDIM:
                update = update + config.weight_decay * params[name]
            new_params[name] = params[name] - lr * update
    return new_params, new_state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    final_params: EncoderParams
    final_log_tau: float
    step_records: list[dict]
    epoch_records: list[dict]


def train(config: TrainConfig, dataset: Sequence[TrainTuple],
          initial_params: EncoderParams,
          eval_hook: Callable[[EncoderParams, int], dict] | None = None) -> TrainResult:
    """Run the optimization loop and return final weights plus logs.

    Steps per epoch = ceil(len(dataset) / batch_size). The temperature is
    learnable (stored as log, clamped after each step) and re-initialized at
    the start of the run. In fine_tune mode the image branch is never
    touched; in pre_align mode it freezes after the warm-up epochs.
    """
    config.validate()
    if len(dataset) == 0:
        raise ParameterError("dataset must be non-empty")
    if len(dataset) < config.batch_size:
        raise ParameterError("dataset smaller than batch size")
    tail = len(dataset) % config.batch_size
    if config.loss == "hcl" and tail == 1:
        raise ParameterError(
            "hcl cannot train on a trailing 1-shape batch; adjust batch_size")

    params = initial_params.copy()
    if config.mode == "fine_tune":
        params.image_trainable = False
    log_tau = float(np.log(np.clip(config.tau_init, TAU_MIN, TAU_MAX)))
    schedule = config.resolved_schedule()

    cache = None
    frozen_fp = image_fingerprint(params) if not params.image_trainable else None
    if config.mode == "fine_tune" and config.use_cache:
        cache = precompute_image_embeddings(params, dataset)

    opt_state = OptimizerState()
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    step_records: list[dict] = []
    epoch_records: list[dict] = []

    for epoch in range(config.epochs):
        if (config.mode == "pre_align" and params.image_trainable
                and epoch >= config.warmup_epochs):
            params.image_trainable = False
            frozen_fp = image_fingerprint(params)
            if config.use_cache:
                cache = precompute_image_embeddings(params, dataset)
        beta = anneal_beta(epoch, schedule) if schedule is not None else 0.0

        epoch_losses = []
        for step in range(steps_per_epoch):
            batch = make_batch(dataset, config.batch_size, config.augment,
                               epoch, step, config.seed)
            shape_fwd = shape_forward(params, batch.clouds)
            image_emb, image_fwd = batch_image_embeddings(params, batch, cache, frozen_fp)

            tau = float(np.exp(log_tau))
            if config.loss == "hcl":
                out = hcl(shape_fwd.emb, image_emb, tau, beta)
            else:
                out = info_nce(shape_fwd.emb, image_emb, tau)
            if not np.isfinite(out.loss):
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}")

            grads = backward(
                params, shape_fwd, image_fwd,
                out.d_shape if params.shape_trainable else None,
                out.d_image if (image_fwd is not None and params.image_trainable) else None,
            )
            trainable = _trainable_keys(params)
            param_dict = {k: getattr(params, k) for k in trainable}
            grad_dict = {k: getattr(grads, k) for k in trainable}
            param_dict["log_tau"] = np.asarray(log_tau)
            grad_dict["log_tau"] = np.asarray(out.d_log_tau)

            param_dict, opt_state = optimizer_step(param_dict, grad_dict, opt_state, config)
            for k in trainable:
                setattr(params, k, param_dict[k])
            log_tau = float(np.clip(param_dict["log_tau"], np.log(TAU_MIN), np.log(TAU_MAX)))

            step_records.append({"epoch": epoch, "step": step, "loss": out.loss,
                                 "beta": beta, "tau": tau})
            epoch_losses.append(out.loss)

        record = {"epoch": epoch, "mean_loss": float(np.mean(epoch_losses)),
                  "beta": beta, "tau": float(np.exp(log_tau))}
        if eval_hook is not None:
            record.update(eval_hook(params, epoch))
        epoch_records.append(record)

    return TrainResult(final_params=params, final_log_tau=log_tau,
                       step_records=step_records, epoch_records=epoch_records)


def _trainable_keys(params: EncoderParams) -> list[str]:
    keys: list[str] = []
    if params.shape_trainable:
        keys += list(_SHAPE_KEYS)
    if params.image_trainable:
        keys += list(_IMAGE_KEYS)
    return keys
