"""Shared helpers: finite-difference gradient checking and random fixtures."""

from __future__ import annotations

from typing import Callable

import numpy as np

from shaperet.geometry import PointCloud


def random_unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    m = rng.normal(size=(n, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def random_cloud(rng: np.random.Generator, n_points: int, shape_id: str = "",
                 class_id: str = "") -> PointCloud:
    xyz = rng.normal(size=(n_points, 3))
    xyz -= xyz.mean(axis=0)
    xyz /= np.linalg.norm(xyz, axis=1).max()
    rgb = rng.uniform(size=(n_points, 3))
    return PointCloud(xyz=xyz, rgb=rgb, shape_id=shape_id, class_id=class_id)


def central_diff(f: Callable[[], float], arr: np.ndarray, idx: tuple, h: float) -> float:
    """Two-sided finite difference of a scalar function w.r.t. one array entry."""
    old = arr[idx]
    arr[idx] = old + h
    plus = f()
    arr[idx] = old - h
    minus = f()
    arr[idx] = old
    return (plus - minus) / (2.0 * h)


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_grad_entries(f: Callable[[], float], arr: np.ndarray,
                       analytic: np.ndarray, rng: np.random.Generator,
                       n_checks: int, h: float = 1e-4,
                       guard: Callable[[], object] | None = None,
                       floor: float = 1e-6) -> tuple[float, int]:
    """FD-check ``n_checks`` random entries of one array.

    ``guard``, when given, is evaluated at both perturbed points; if the two
    guard values differ (e.g. a max-pool argmax flipped between them), the
    function is not differentiable across that step and the entry is skipped
    rather than compared against an invalid chord.

    Returns (max relative error, number of skipped entries).
    """
    worst = 0.0
    skipped = 0
    for _ in range(n_checks):
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        old = arr[idx]
        arr[idx] = old + h
        plus = f()
        guard_plus = guard() if guard is not None else None
        arr[idx] = old - h
        minus = f()
        guard_minus = guard() if guard is not None else None
        arr[idx] = old
        if guard is not None and not np.array_equal(guard_plus, guard_minus):
            skipped += 1
            continue
        numeric = (plus - minus) / (2.0 * h)
        worst = max(worst, rel_err(numeric, float(analytic[idx]), floor))
    return worst, skipped
