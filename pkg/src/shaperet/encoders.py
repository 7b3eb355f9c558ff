"""Dual encoders with hand-written gradients.

The shape branch is a per-point MLP (6 -> H -> H) followed by
coordinate-wise max pooling over points, per-sample standardization of the
pooled vector, and a linear projection to D; the image branch maps a view
descriptor (F -> H -> D, tanh after the first layer). Both outputs are
l2-normalized.

Three per-point details matter for telling near-duplicate shapes apart,
which is the regime this retrieval stack trains in. The first layer uses a
sine activation at a fixed frequency gain, so small coordinate changes move
features by O(gain * delta) instead of vanishing inside a saturating
nonlinearity. The second layer uses softplus, whose unbounded output keeps
the pooled maxima sensitive to geometry (and, like sine, stays smooth so
finite-difference gradient checks remain meaningful). Finally, pooled
vectors of all shapes share a large common component, so they are
standardized per sample (mean removed, unit variance) before projection;
a pure, deterministic per-sample operation that exposes the contrast
between similar shapes to the projection layer.

Backward passes are exact analytic gradients, including through the
standardization, the l2-normalization Jacobian, and the max-pool routing
(ties go to the lowest point index).
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, NumericError, ParameterError
from .geometry import PointCloud, ViewFeature
from .rng import derive_rng

NORM_EPS = 1e-12
SINE_GAIN = 8.0  # frequency gain of the per-point sine layer

ENCK_MAGIC = b"ENCK"
ENCK_VERSION = 1
_ENCK_HEADER = struct.Struct("<4sIIIIBBHI")

_ARRAY_FIELDS = ("w1", "b1", "w2", "b2", "w3", "b3", "a1", "c1", "a2", "c2")
_SHAPE_FIELDS = ("w1", "b1", "w2", "b2", "w3", "b3")
_IMAGE_FIELDS = ("a1", "c1", "a2", "c2")


@dataclass
class EncoderParams:
    """Weights of both branches plus per-branch trainable flags."""

    w1: np.ndarray  # (6, H)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H, H)
    b2: np.ndarray  # (H,)
    w3: np.ndarray  # (H, D)
    b3: np.ndarray  # (D,)
    a1: np.ndarray  # (F, H)
    c1: np.ndarray  # (H,)
    a2: np.ndarray  # (H, D)
    c2: np.ndarray  # (D,)
    shape_trainable: bool = True
    image_trainable: bool = True

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.w3.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.a1.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _ARRAY_FIELDS}

    def copy(self) -> "EncoderParams":
        kwargs = {name: getattr(self, name).copy() for name in _ARRAY_FIELDS}
        return EncoderParams(**kwargs, shape_trainable=self.shape_trainable,
                             image_trainable=self.image_trainable)


@dataclass
class Gradients:
    """d(loss)/d(weight), mirroring EncoderParams; frozen branches are zero."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    a1: np.ndarray
    c1: np.ndarray
    a2: np.ndarray
    c2: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def init_params(feat_dim: int, hidden_dim: int = 128, embed_dim: int = 64,
                seed: int = 0) -> EncoderParams:
    """Glorot-uniform weights, zero biases, seeded deterministically."""
    rng = derive_rng("init_params", feat_dim, hidden_dim, embed_dim, seed)

    def glorot(fan_in: int, fan_out: int) -> np.ndarray:
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_in, fan_out))

    return EncoderParams(
        w1=glorot(6, hidden_dim), b1=np.zeros(hidden_dim),
        w2=glorot(hidden_dim, hidden_dim), b2=np.zeros(hidden_dim),
        w3=glorot(hidden_dim, embed_dim), b3=np.zeros(embed_dim),
        a1=glorot(feat_dim, hidden_dim), c1=np.zeros(hidden_dim),
        a2=glorot(hidden_dim, embed_dim), c2=np.zeros(embed_dim),
    )


def _check_finite(arr: np.ndarray, layer: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {layer}")


def _l2_rows(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(u, axis=1)
    r = np.maximum(norms, NORM_EPS)
    return u / r[:, None], r


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _softplus_grad_from_output(h: np.ndarray) -> np.ndarray:
    # h = log(1 + e^z) implies sigmoid(z) = 1 - e^-h.
    return 1.0 - np.exp(-h)


LN_EPS = 1e-8


def _standardize_rows(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row standardization: (p - mean) / sqrt(var + eps)."""
    centered = p - p.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(np.mean(centered**2, axis=1, keepdims=True) + LN_EPS)
    return centered * inv, inv


def _standardize_backward(normed: np.ndarray, inv: np.ndarray,
                          d_out: np.ndarray) -> np.ndarray:
    d_center = d_out.mean(axis=1, keepdims=True)
    d_scale = np.mean(d_out * normed, axis=1, keepdims=True)
    return inv * (d_out - d_center - normed * d_scale)


# ---------------------------------------------------------------------------
# Shape branch
# ---------------------------------------------------------------------------


@dataclass
class ShapeForward:
    """Cached intermediates of a batched shape-branch forward pass."""

    x: np.ndarray          # (T, 6) concatenated point features
    offsets: np.ndarray    # (B,) segment start rows
    lengths: np.ndarray    # (B,) segment lengths
    h1: np.ndarray         # (T, H) sine features
    cos1: np.ndarray       # (T, H) cosines of the first-layer pre-activations
    h2: np.ndarray         # (T, H)
    pooled: np.ndarray     # (B, H)
    normed: np.ndarray     # (B, H) standardized pooled features
    inv: np.ndarray        # (B, 1) inverse standard deviations
    u: np.ndarray          # (B, D) pre-normalization embedding
    r: np.ndarray          # (B,) clamped norms
    emb: np.ndarray        # (B, D) unit embeddings

    def pool_argmax(self) -> np.ndarray:
        """(B, H) global row index feeding each pooled value.

        Ties resolve to the lowest point index within the segment.
        """
        arg = np.empty(self.pooled.shape, dtype=np.int64)
        for b, (off, length) in enumerate(zip(self.offsets, self.lengths)):
            arg[b] = off + np.argmax(self.h2[off:off + length], axis=0)
        return arg


def shape_forward(params: EncoderParams, clouds: Sequence[PointCloud]) -> ShapeForward:
    """Encode a batch of clouds; clouds may have different point counts."""
    if len(clouds) == 0:
        raise ParameterError("shape_forward needs at least one cloud")
    feats = [c.features() for c in clouds]
    lengths = np.array([f.shape[0] for f in feats], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    x = np.concatenate(feats, axis=0)

    z1 = x @ params.w1
    z1 *= SINE_GAIN
    z1 += params.b1
    _check_finite(z1, "shape branch layer 1")
    h1 = np.sin(z1)
    cos1 = np.cos(z1)
    z2 = h1 @ params.w2
    z2 += params.b2
    _check_finite(z2, "shape branch layer 2")
    h2 = _softplus(z2)

    pooled = np.maximum.reduceat(h2, offsets, axis=0)
    normed, inv = _standardize_rows(pooled)
    u = normed @ params.w3 + params.b3
    _check_finite(u, "shape branch projection")
    emb, r = _l2_rows(u)
    return ShapeForward(x=x, offsets=offsets, lengths=lengths, h1=h1, cos1=cos1,
                        h2=h2, pooled=pooled, normed=normed, inv=inv, u=u, r=r,
                        emb=emb)


def shape_backward(params: EncoderParams, fwd: ShapeForward,
                   d_emb: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the shape-branch weights given d(loss)/d(embedding)."""
    if d_emb.shape != fwd.emb.shape:
        raise ParameterError(
            f"upstream gradient shape {d_emb.shape} does not match recorded batch {fwd.emb.shape}")
    du = _l2_backward(fwd.u, fwd.r, d_emb)
    d_w3 = fwd.normed.T @ du
    d_b3 = du.sum(axis=0)
    d_normed = du @ params.w3.T
    d_pooled = _standardize_backward(fwd.normed, fwd.inv, d_normed)

    arg = fwd.pool_argmax()
    d_h2 = np.zeros_like(fwd.h2)
    cols = np.broadcast_to(np.arange(fwd.h2.shape[1]), arg.shape)
    # (row, col) targets are unique: one argmax per segment per dim.
    d_h2[arg, cols] = d_pooled

    d_z2 = d_h2
    d_z2 *= _softplus_grad_from_output(fwd.h2)
    d_w2 = fwd.h1.T @ d_z2
    d_b2 = d_z2.sum(axis=0)
    d_h1 = d_z2 @ params.w2.T
    d_z1 = d_h1
    d_z1 *= fwd.cos1
    d_w1 = SINE_GAIN * (fwd.x.T @ d_z1)
    d_b1 = d_z1.sum(axis=0)
    return {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2, "w3": d_w3, "b3": d_b3}


def _l2_backward(u: np.ndarray, r: np.ndarray, d_emb: np.ndarray) -> np.ndarray:
    clamped = r <= NORM_EPS
    du = (d_emb - (u / r[:, None]) * np.sum((u / r[:, None]) * d_emb, axis=1, keepdims=True))
    du /= r[:, None]
    if np.any(clamped):
        # Below the epsilon the normalizer is a constant divisor.
        du[clamped] = d_emb[clamped] / NORM_EPS
    return du


# ---------------------------------------------------------------------------
# Image branch
# ---------------------------------------------------------------------------


@dataclass
class ImageForward:
    """Cached intermediates of a batched image-branch forward pass."""

    v: np.ndarray    # (B, F) input-scaled descriptors
    g1: np.ndarray   # (B, H)
    u: np.ndarray    # (B, D)
    r: np.ndarray    # (B,)
    emb: np.ndarray  # (B, D)


def image_forward(params: EncoderParams, descriptors: np.ndarray) -> ImageForward:
    """Encode a (B, F) batch of view descriptors.

    Descriptors are L1-normalized, so raw entries scale like 1/F; the branch
    rescales them by F to keep first-layer activations and gradients O(1).
    """
    v = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    if v.shape[1] != params.feat_dim:
        raise ParameterError(
            f"descriptor dimension {v.shape[1]} != encoder feat_dim {params.feat_dim}")
    v = v * float(params.feat_dim)
    # einsum reduces each row independently of the batch size, so a view's
    # embedding is bitwise identical whether encoded alone, in a training
    # batch, or during cache precompute (BLAS gemm blocks rows differently).
    z1 = np.einsum("bf,fh->bh", v, params.a1) + params.c1
    _check_finite(z1, "image branch layer 1")
    g1 = np.tanh(z1)
    u = np.einsum("bh,hd->bd", g1, params.a2) + params.c2
    _check_finite(u, "image branch projection")
    emb, r = _l2_rows(u)
    return ImageForward(v=v, g1=g1, u=u, r=r, emb=emb)


def image_backward(params: EncoderParams, fwd: ImageForward,
                   d_emb: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the image-branch weights given d(loss)/d(embedding)."""
    if d_emb.shape != fwd.emb.shape:
        raise ParameterError(
            f"upstream gradient shape {d_emb.shape} does not match recorded batch {fwd.emb.shape}")
    du = _l2_backward(fwd.u, fwd.r, d_emb)
    d_a2 = fwd.g1.T @ du
    d_c2 = du.sum(axis=0)
    d_g1 = du @ params.a2.T
    d_z1 = d_g1 * (1.0 - fwd.g1**2)
    d_a1 = fwd.v.T @ d_z1
    d_c1 = d_z1.sum(axis=0)
    return {"a1": d_a1, "c1": d_c1, "a2": d_a2, "c2": d_c2}


# ---------------------------------------------------------------------------
# Public single-item API and combined backward
# ---------------------------------------------------------------------------


def encode_shape(params: EncoderParams, cloud: PointCloud) -> np.ndarray:
    """Unit-norm embedding of one cloud; invariant to point order."""
    return shape_forward(params, [cloud]).emb[0]


def encode_image(params: EncoderParams, view: ViewFeature | np.ndarray) -> np.ndarray:
    """Unit-norm embedding of one view descriptor."""
    descriptor = view.descriptor if isinstance(view, ViewFeature) else view
    return image_forward(params, descriptor[None, :]).emb[0]


def backward(params: EncoderParams,
             shape_fwd: ShapeForward | None,
             image_fwd: ImageForward | None,
             d_shape_emb: np.ndarray | None,
             d_image_emb: np.ndarray | None) -> Gradients:
    """Combine branch backward passes into one Gradients record.

    Frozen branches (trainable flag False) receive exact zeros. Passing a
    gradient without its matching recorded forward is a usage error.
    """
    grads = {name: np.zeros_like(getattr(params, name)) for name in _ARRAY_FIELDS}
    if d_shape_emb is not None:
        if shape_fwd is None:
            raise ParameterError("shape gradient supplied without a recorded shape forward")
        if params.shape_trainable:
            grads.update(shape_backward(params, shape_fwd, d_shape_emb))
    if d_image_emb is not None:
        if image_fwd is None:
            raise ParameterError("image gradient supplied without a recorded image forward")
        if params.image_trainable:
            grads.update(image_backward(params, image_fwd, d_image_emb))
    return Gradients(**grads)


# ---------------------------------------------------------------------------
# ENCK v1 persistence and fingerprints
# ---------------------------------------------------------------------------


def serialize_params(params: EncoderParams) -> bytes:
    header = _ENCK_HEADER.pack(
        ENCK_MAGIC, ENCK_VERSION,
        params.embed_dim, params.hidden_dim, params.feat_dim,
        int(params.shape_trainable), int(params.image_trainable), 0,
        len(_ARRAY_FIELDS),
    )
    chunks = [header]
    for name in _ARRAY_FIELDS:
        arr = np.ascontiguousarray(getattr(params, name), dtype="<f8")
        dims = arr.shape
        chunks.append(struct.pack(f"<I{len(dims)}I", len(dims), *dims))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def deserialize_params(raw: bytes, source: str = "<bytes>") -> EncoderParams:
    if len(raw) < _ENCK_HEADER.size:
        raise FormatError(f"{source}: truncated ENCK header")
    magic, version, embed_dim, hidden_dim, feat_dim, sh_tr, im_tr, _, n_arrays = (
        _ENCK_HEADER.unpack_from(raw))
    if magic != ENCK_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != ENCK_VERSION:
        raise FormatError(f"{source}: unsupported ENCK version {version}")
    if n_arrays != len(_ARRAY_FIELDS):
        raise FormatError(f"{source}: expected {len(_ARRAY_FIELDS)} arrays, got {n_arrays}")
    pos = _ENCK_HEADER.size
    arrays: dict[str, np.ndarray] = {}
    for name in _ARRAY_FIELDS:
        try:
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            count = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += count * 8
        except (struct.error, ValueError) as exc:
            raise FormatError(f"{source}: truncated array block for {name}") from exc
        arrays[name] = arr.astype(np.float64)
    if pos != len(raw):
        raise FormatError(f"{source}: {len(raw) - pos} trailing bytes")
    params = EncoderParams(**arrays, shape_trainable=bool(sh_tr), image_trainable=bool(im_tr))
    if (params.embed_dim, params.hidden_dim, params.feat_dim) != (embed_dim, hidden_dim, feat_dim):
        raise FormatError(f"{source}: header dims disagree with array shapes")
    return params


def save_params(params: EncoderParams, path: str | Path) -> None:
    """Atomically write an ENCK v1 checkpoint (round-trips bitwise)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(serialize_params(params))
    os.replace(tmp, path)


def load_params(path: str | Path) -> EncoderParams:
    return deserialize_params(Path(path).read_bytes(), source=str(path))


def params_fingerprint(params: EncoderParams) -> bytes:
    """32-byte digest of the full checkpoint serialization."""
    return hashlib.sha256(serialize_params(params)).digest()


def image_fingerprint(params: EncoderParams) -> bytes:
    """32-byte digest of the image-branch weights only."""
    h = hashlib.sha256()
    for name in _IMAGE_FIELDS:
        arr = np.ascontiguousarray(getattr(params, name), dtype="<f8")
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.digest()
