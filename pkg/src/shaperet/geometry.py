"""Synthetic shape generation, point-cloud normalization/augmentation, and
orthographic view features.

Clouds carry positions plus RGB color (P x 6 when flattened). View features
stand in for rendered images: each view is an L1-normalized occupancy
histogram of the cloud projected orthographically from a ring of cameras at
fixed elevation.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError
from .rng import derive_rng

FAMILIES = ("sphere", "box", "cylinder", "torus", "superellipsoid")

DEFAULT_COLOR = (0.5, 0.5, 0.5)

SPCD_MAGIC = b"SPCD"
SPCD_VERSION = 1
_SPCD_HEADER = struct.Struct("<4sIII")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ColorRule:
    """How to color generated points.

    ``constant`` paints every point ``base``; ``axis_gradient`` interpolates
    from ``base`` (bottom) to ``tip`` (top) along z.
    """

    kind: str = "constant"
    base: tuple[float, float, float] = DEFAULT_COLOR
    tip: tuple[float, float, float] = DEFAULT_COLOR

    def validate(self) -> None:
        if self.kind not in ("constant", "axis_gradient"):
            raise ParameterError(f"unknown color rule kind: {self.kind!r}")
        for channel in (*self.base, *self.tip):
            if not (0.0 <= channel <= 1.0):
                raise ParameterError(f"color channel {channel} outside [0, 1]")


@dataclass(frozen=True)
class ShapeSpec:
    """Parametric surface family plus its parameters and coloring."""

    family: str
    params: dict[str, float] = field(default_factory=dict)
    color_rule: ColorRule = field(default_factory=ColorRule)

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ParameterError(f"unknown shape family: {self.family!r}")
        self.color_rule.validate()
        p = self.params
        try:
            if self.family == "sphere":
                _require_positive(p["radius"], "radius")
            elif self.family == "box":
                for name in ("hx", "hy", "hz"):
                    _require_positive(p[name], name)
            elif self.family == "cylinder":
                _require_positive(p["radius"], "radius")
                _require_positive(p["height"], "height")
            elif self.family == "torus":
                _require_positive(p["ring_radius"], "ring_radius")
                _require_positive(p["tube_radius"], "tube_radius")
                if p["tube_radius"] > p["ring_radius"]:
                    raise ParameterError("torus tube_radius must not exceed ring_radius")
            elif self.family == "superellipsoid":
                for name in ("a", "b", "c"):
                    _require_positive(p[name], name)
                if p["exponent"] < 1.0:
                    raise ParameterError("superellipsoid exponent must be >= 1")
        except KeyError as exc:
            raise ParameterError(f"{self.family} spec missing parameter {exc}") from exc


def _require_positive(value: float, name: str) -> None:
    if not (value > 0.0 and math.isfinite(value)):
        raise ParameterError(f"{name} must be positive and finite, got {value}")


@dataclass(frozen=True)
class AugmentConfig:
    """Point-cloud augmentation magnitudes, applied in a fixed order:
    dropout, scale, shift, jitter, rotation."""

    dropout_rate: float = 0.1
    scale_range: tuple[float, float] = (0.9, 1.1)
    shift_max: float = 0.05
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    rotation: str = "yaw_only"

    def validate(self) -> None:
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ParameterError(f"dropout_rate {self.dropout_rate} outside [0, 1)")
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi):
            raise ParameterError(f"scale_range {self.scale_range} must satisfy 0 < lo <= hi")
        if self.shift_max < 0.0:
            raise ParameterError("shift_max must be >= 0")
        if self.jitter_sigma < 0.0 or self.jitter_clip < 0.0:
            raise ParameterError("jitter parameters must be >= 0")
        if self.rotation not in ("none", "yaw_only", "full_so3"):
            raise ParameterError(f"unknown rotation mode: {self.rotation!r}")


IDENTITY_AUGMENT = AugmentConfig(
    dropout_rate=0.0, scale_range=(1.0, 1.0), shift_max=0.0,
    jitter_sigma=0.0, jitter_clip=0.0, rotation="none",
)


@dataclass
class PointCloud:
    """P surface samples with positions ``xyz`` (P, 3) and colors ``rgb`` (P, 3)."""

    xyz: np.ndarray
    rgb: np.ndarray
    shape_id: str = ""
    class_id: str = ""

    def __post_init__(self) -> None:
        self.xyz = np.asarray(self.xyz, dtype=np.float64)
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.xyz.ndim != 2 or self.xyz.shape[1] != 3:
            raise ParameterError(f"xyz must be (P, 3), got {self.xyz.shape}")
        if self.rgb.shape != self.xyz.shape:
            raise ParameterError("rgb must match xyz shape")
        if self.n_points < 1:
            raise ParameterError("point cloud must contain at least one point")

    @property
    def n_points(self) -> int:
        return self.xyz.shape[0]

    def features(self) -> np.ndarray:
        """Concatenated (P, 6) position+color matrix consumed by the encoder."""
        return np.concatenate([self.xyz, self.rgb], axis=1)

    def validate(self) -> None:
        if not np.all(np.isfinite(self.xyz)):
            raise ParameterError("cloud contains non-finite coordinates")
        if np.any(self.rgb < 0.0) or np.any(self.rgb > 1.0):
            raise ParameterError("cloud colors outside [0, 1]")


@dataclass(frozen=True)
class ViewFeature:
    """One orthographic view: the flattened, L1-normalized occupancy grid."""

    view_index: int
    descriptor: np.ndarray

    def validate(self) -> None:
        d = self.descriptor
        if d.ndim != 1 or d.size < 1:
            raise ParameterError("descriptor must be a non-empty vector")
        if np.any(d < 0.0):
            raise ParameterError("descriptor entries must be non-negative")
        if abs(float(d.sum()) - 1.0) > 1e-6:
            raise ParameterError("descriptor must sum to 1")


# ---------------------------------------------------------------------------
# Shape generation
# ---------------------------------------------------------------------------


def gen_shape(spec: ShapeSpec, n_points: int, seed: int,
              shape_id: str = "", class_id: str = "") -> PointCloud:
    """Sample ``n_points`` surface points of the parametric family in ``spec``.

    Deterministic for a fixed (spec, n_points, seed).
    """
    if n_points < 1:
        raise ParameterError(f"n_points must be >= 1, got {n_points}")
    spec.validate()
    rng = derive_rng("gen_shape", spec.family, seed)
    sampler = _SAMPLERS[spec.family]
    xyz = sampler(spec.params, n_points, rng)
    rgb = _apply_color_rule(spec.color_rule, xyz)
    return PointCloud(xyz=xyz, rgb=rgb, shape_id=shape_id, class_id=class_id)


def _apply_color_rule(rule: ColorRule, xyz: np.ndarray) -> np.ndarray:
    n = xyz.shape[0]
    if rule.kind == "constant":
        return np.tile(np.asarray(rule.base, dtype=np.float64), (n, 1))
    z = xyz[:, 2]
    zmin, zmax = float(z.min()), float(z.max())
    span = zmax - zmin
    t = np.zeros(n) if span < 1e-12 else (z - zmin) / span
    base = np.asarray(rule.base, dtype=np.float64)
    tip = np.asarray(rule.tip, dtype=np.float64)
    return base[None, :] + t[:, None] * (tip - base)[None, :]


def _unit_directions(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    # Resample the (measure-zero) degenerate draws instead of dividing by ~0.
    bad = norms[:, 0] < 1e-12
    while np.any(bad):
        v[bad] = rng.normal(size=(int(bad.sum()), 3))
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        bad = norms[:, 0] < 1e-12
    return v / norms


def _sample_sphere(params: dict[str, float], n: int, rng: np.random.Generator) -> np.ndarray:
    return params["radius"] * _unit_directions(n, rng)


def _sample_box(params: dict[str, float], n: int, rng: np.random.Generator) -> np.ndarray:
    hx, hy, hz = params["hx"], params["hy"], params["hz"]
    # Two faces per axis; pick faces with probability proportional to area.
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=n)
    v = rng.uniform(-1.0, 1.0, size=n)
    xyz = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    half = np.array([hx, hy, hz])
    for ax in range(3):
        m = axis == ax
        other = [o for o in range(3) if o != ax]
        xyz[m, ax] = sign[m] * half[ax]
        xyz[m, other[0]] = u[m] * half[other[0]]
        xyz[m, other[1]] = v[m] * half[other[1]]
    return xyz


def _sample_cylinder(params: dict[str, float], n: int, rng: np.random.Generator) -> np.ndarray:
    r, h = params["radius"], params["height"]
    lateral = 2.0 * math.pi * r * h
    cap = math.pi * r * r
    total = lateral + 2.0 * cap
    which = rng.uniform(0.0, total, size=n)
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    xyz = np.empty((n, 3))
    on_side = which < lateral
    xyz[on_side, 0] = r * np.cos(theta[on_side])
    xyz[on_side, 1] = r * np.sin(theta[on_side])
    xyz[on_side, 2] = rng.uniform(-h / 2.0, h / 2.0, size=int(on_side.sum()))
    on_cap = ~on_side
    rad = r * np.sqrt(rng.uniform(0.0, 1.0, size=int(on_cap.sum())))
    xyz[on_cap, 0] = rad * np.cos(theta[on_cap])
    xyz[on_cap, 1] = rad * np.sin(theta[on_cap])
    xyz[on_cap, 2] = np.where(which[on_cap] < lateral + cap, h / 2.0, -h / 2.0)
    return xyz


def _sample_torus(params: dict[str, float], n: int, rng: np.random.Generator) -> np.ndarray:
    big_r, tube_r = params["ring_radius"], params["tube_radius"]
    u = rng.uniform(0.0, 2.0 * math.pi, size=n)
    # Rejection sampling in the tube angle keeps the surface density uniform.
    v = np.empty(n)
    remaining = np.arange(n)
    while remaining.size:
        cand = rng.uniform(0.0, 2.0 * math.pi, size=remaining.size)
        accept = rng.uniform(0.0, 1.0, size=remaining.size) <= (
            (big_r + tube_r * np.cos(cand)) / (big_r + tube_r)
        )
        v[remaining[accept]] = cand[accept]
        remaining = remaining[~accept]
    ring = big_r + tube_r * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), tube_r * np.sin(v)], axis=1)


def _sample_superellipsoid(params: dict[str, float], n: int, rng: np.random.Generator) -> np.ndarray:
    a, b, c, p = params["a"], params["b"], params["c"], params["exponent"]
    d = _unit_directions(n, rng)
    # Radial projection of unit directions onto |x/a|^p + |y/b|^p + |z/c|^p = 1.
    scaled = np.abs(d / np.array([a, b, c]))
    t = np.sum(scaled**p, axis=1) ** (-1.0 / p)
    return d * t[:, None]


_SAMPLERS = {
    "sphere": _sample_sphere,
    "box": _sample_box,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
    "superellipsoid": _sample_superellipsoid,
}


# ---------------------------------------------------------------------------
# Normalization and augmentation
# ---------------------------------------------------------------------------


def normalize(cloud: PointCloud) -> PointCloud:
    """Center the cloud at its centroid and scale the max point norm to 1.

    Scaling is skipped (positions become all-zero) when every point coincides
    with the centroid. Colors are untouched.
    """
    xyz = cloud.xyz - cloud.xyz.mean(axis=0)
    max_norm = float(np.linalg.norm(xyz, axis=1).max())
    if max_norm >= 1e-9:
        xyz = xyz / max_norm
    else:
        xyz = np.zeros_like(xyz)
    return replace(cloud, xyz=xyz, rgb=cloud.rgb.copy())


def augment(cloud: PointCloud, cfg: AugmentConfig, seed: int) -> PointCloud:
    """Apply dropout, scale, shift, jitter, and rotation, in that order.

    Each stage draws from an RNG derived from ``seed`` only when active, so an
    all-identity config returns the input bit-for-bit. At least one point
    always survives dropout.
    """
    cfg.validate()
    rng = derive_rng("augment", seed)
    xyz = cloud.xyz
    rgb = cloud.rgb

    if cfg.dropout_rate > 0.0:
        keep = rng.random(xyz.shape[0]) >= cfg.dropout_rate
        if not keep.any():
            keep[0] = True
        xyz = xyz[keep]
        rgb = rgb[keep]

    lo, hi = cfg.scale_range
    if lo != 1.0 or hi != 1.0:
        xyz = xyz * rng.uniform(lo, hi)

    if cfg.shift_max > 0.0:
        xyz = xyz + rng.uniform(-cfg.shift_max, cfg.shift_max, size=3)

    if cfg.jitter_sigma > 0.0:
        noise = rng.normal(0.0, cfg.jitter_sigma, size=xyz.shape)
        if cfg.jitter_clip > 0.0:
            noise = np.clip(noise, -cfg.jitter_clip, cfg.jitter_clip)
        xyz = xyz + noise

    if cfg.rotation == "yaw_only":
        xyz = xyz @ _yaw_matrix(rng.uniform(0.0, 2.0 * math.pi)).T
    elif cfg.rotation == "full_so3":
        xyz = xyz @ _random_rotation(rng).T

    return replace(cloud, xyz=np.ascontiguousarray(xyz), rgb=np.ascontiguousarray(rgb))


def _yaw_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    # Uniform over SO(3) via a normalized random quaternion.
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


# ---------------------------------------------------------------------------
# View features
# ---------------------------------------------------------------------------


def project_views(cloud: PointCloud, n_views: int = 12, grid: int = 16,
                  elevation_deg: float = 30.0) -> list[ViewFeature]:
    """Project the cloud onto ``n_views`` camera planes on an elevation ring.

    View v looks at the origin from azimuth v * (360 / n_views) degrees at the
    fixed elevation. Points are orthographically projected onto the in-plane
    axes, binned into a grid x grid histogram over [-1, 1]^2, flattened
    row-major, and L1-normalized.
    """
    if n_views < 1:
        raise ParameterError(f"n_views must be >= 1, got {n_views}")
    if grid < 1:
        raise ParameterError(f"grid must be >= 1, got {grid}")
    el = math.radians(elevation_deg)
    xyz = cloud.xyz
    n_pts = xyz.shape[0]
    views = []
    for v in range(n_views):
        az = 2.0 * math.pi * v / n_views
        # In-plane basis co-rotating with azimuth: e1 horizontal, e2 tilted up.
        e1 = np.array([-math.sin(az), math.cos(az), 0.0])
        e2 = np.array([-math.sin(el) * math.cos(az), -math.sin(el) * math.sin(az), math.cos(el)])
        p1 = xyz @ e1
        p2 = xyz @ e2
        ix = np.clip(((p1 + 1.0) * 0.5 * grid).astype(np.int64), 0, grid - 1)
        iy = np.clip(((p2 + 1.0) * 0.5 * grid).astype(np.int64), 0, grid - 1)
        hist = np.bincount(ix * grid + iy, minlength=grid * grid).astype(np.float64)
        views.append(ViewFeature(view_index=v, descriptor=hist / n_pts))
    return views


# ---------------------------------------------------------------------------
# SPCD v1 persistence
# ---------------------------------------------------------------------------


def save_cloud(cloud: PointCloud, path: str | Path) -> None:
    """Write the cloud as SPCD v1: 16-byte header then P*6 little-endian f32."""
    data = cloud.features().astype("<f4")
    header = _SPCD_HEADER.pack(SPCD_MAGIC, SPCD_VERSION, cloud.n_points, 6)
    Path(path).write_bytes(header + data.tobytes())


def load_cloud(path: str | Path, shape_id: str = "", class_id: str = "") -> PointCloud:
    """Read an SPCD v1 file; ids come from the sidecar manifest, not the file."""
    raw = Path(path).read_bytes()
    if len(raw) < _SPCD_HEADER.size:
        raise FormatError(f"{path}: truncated SPCD header")
    magic, version, n_points, n_channels = _SPCD_HEADER.unpack_from(raw)
    if magic != SPCD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != SPCD_VERSION:
        raise FormatError(f"{path}: unsupported SPCD version {version}")
    if n_channels != 6:
        raise FormatError(f"{path}: expected 6 channels, got {n_channels}")
    expected = _SPCD_HEADER.size + n_points * n_channels * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: payload size {len(raw)} != expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_SPCD_HEADER.size).reshape(n_points, 6)
    data = data.astype(np.float64)
    return PointCloud(xyz=data[:, :3], rgb=data[:, 3:], shape_id=shape_id, class_id=class_id)


def quantize_cloud(cloud: PointCloud) -> PointCloud:
    """Round coordinates/colors through f32, matching SPCD save/load exactly."""
    return replace(
        cloud,
        xyz=cloud.xyz.astype(np.float32).astype(np.float64),
        rgb=cloud.rgb.astype(np.float32).astype(np.float64),
    )
