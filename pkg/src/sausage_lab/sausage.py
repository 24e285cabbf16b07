"""Wiener sausage volume of a recorded path, treating the path as the polyline
through its recorded positions.

Point location: a point is covered iff its distance to some segment is at most
``rho``. The nearest vertex settles most points (within ``rho`` means covered,
beyond ``rho + l_max/2`` means not); only a thin band needs exact
point-to-segment distances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .constants import unit_ball_volume
from .rng import derive_rng

_SLAB_CELLS = 1 << 21
_BAND_CHUNK = 1 << 14


@dataclass(frozen=True)
class SausageEstimate:
    volume: float
    stderr: float
    method: str
    resolution: float


def _vertices(path) -> np.ndarray:
    pos = getattr(path, "positions", path)
    pos = np.asarray(pos, dtype=float)
    if pos.ndim == 1:
        pos = pos[None, :]
    if len(pos) == 0:
        raise ValueError("empty path")
    if not np.all(np.isfinite(pos)):
        raise ValueError("path has nonfinite positions")
    return pos


def _refine(pos: np.ndarray, max_len: float) -> np.ndarray:
    """Insert points on segments longer than max_len; the polyline is unchanged."""
    if len(pos) < 2:
        return pos
    seg = np.diff(pos, axis=0)
    lens = np.sqrt(np.einsum("ij,ij->i", seg, seg))
    parts = np.maximum(1, np.ceil(lens / max_len).astype(np.int64))
    if parts.max() == 1:
        return pos
    owner = np.repeat(np.arange(len(seg)), parts)
    first = np.cumsum(parts) - parts
    frac = (np.arange(len(owner)) - first[owner]) / parts[owner]
    return np.vstack([pos[owner] + frac[:, None] * seg[owner], pos[-1:]])


class _Cover:
    """Membership oracle for the sausage of radius rho around a polyline."""

    def __init__(self, pos: np.ndarray, rho: float):
        self.rho = rho
        self.pos = _refine(pos, rho / 4)
        self.tree = cKDTree(self.pos)
        if len(self.pos) > 1:
            seg = np.diff(self.pos, axis=0)
            self.half = 0.5 * float(np.sqrt(np.einsum("ij,ij->i", seg, seg)).max())
        else:
            self.half = 0.0

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        rho = self.rho
        reach = rho + self.half
        dist, _ = self.tree.query(pts, k=1, distance_upper_bound=reach * (1 + 1e-12) + 1e-300)
        inside = dist <= rho
        band = np.flatnonzero((dist > rho) & np.isfinite(dist))
        for lo in range(0, len(band), _BAND_CHUNK):
            idx = band[lo : lo + _BAND_CHUNK]
            inside[idx] = self._segment_test(pts[idx], reach)
        return inside

    def _segment_test(self, pts: np.ndarray, reach: float) -> np.ndarray:
        lists = self.tree.query_ball_point(pts, reach * (1 + 1e-12))
        counts = np.fromiter((len(v) for v in lists), dtype=np.int64, count=len(lists))
        q = np.repeat(np.arange(len(pts)), counts)
        v = np.concatenate([np.asarray(l, dtype=np.int64) for l in lists]) if len(q) else np.zeros(0, np.int64)
        n = len(self.pos)
        hit = np.zeros(len(pts), dtype=bool)
        # both segments adjacent to each candidate vertex
        for a, b in ((v - 1, v), (v, v + 1)):
            ok = (a >= 0) & (b < n)
            qa, a, b = q[ok], a[ok], b[ok]
            p0 = self.pos[a]
            seg = self.pos[b] - p0
            rel = pts[qa] - p0
            ss = np.einsum("ij,ij->i", seg, seg)
            s = np.clip(np.einsum("ij,ij->i", rel, seg) / np.where(ss > 0, ss, 1.0), 0.0, 1.0)
            diff = rel - s[:, None] * seg
            close = np.einsum("ij,ij->i", diff, diff) <= self.rho * self.rho
            hit[qa[close]] = True
        return hit


def sausage_volume_grid(path, rho_C: float, h: float | None = None) -> SausageEstimate:
    """Volume of cells (spacing h) whose centers lie within rho_C of the
    polyline; default ``h = rho_C / 16``.

    Cells are processed in slabs along the first axis; the result does not
    depend on the slab partition.
    """
    if not rho_C > 0:
        raise ValueError("rho_C must be positive")
    h = rho_C / 16 if h is None else h
    if not (0 < h <= rho_C / 4 * (1 + 1e-12)):
        raise ValueError(f"grid spacing h = {h} must lie in (0, rho_C/4]")
    pos = _vertices(path)
    d = pos.shape[1]
    cover = _Cover(pos, rho_C)
    lo = pos.min(axis=0) - rho_C
    n = np.ceil((pos.max(axis=0) + rho_C - lo) / h).astype(np.int64)
    axes = [lo[i] + h * (np.arange(n[i]) + 0.5) for i in range(d)]
    per_row = int(np.prod(n[1:]))
    rows = max(1, _SLAB_CELLS // max(per_row, 1))
    tail = np.stack(np.meshgrid(*axes[1:], indexing="ij"), axis=-1).reshape(-1, d - 1) if d > 1 else None
    count = 0
    for r0 in range(0, int(n[0]), rows):
        x0 = axes[0][r0 : r0 + rows]
        if d == 1:
            pts = x0[:, None]
        else:
            pts = np.column_stack([np.repeat(x0, per_row), np.tile(tail, (len(x0), 1))])
        count += int(np.count_nonzero(cover(pts)))
    return SausageEstimate(volume=count * h**d, stderr=0.0, method="grid", resolution=h)


def sausage_volume_mc(path, rho_C: float, n_samples: int = 100_000, seed=0) -> SausageEstimate:
    """Hit-or-miss volume over the rho_C-padded bounding box of the path."""
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    if not (rho_C > 0 and math.isfinite(rho_C)):
        raise ValueError("degenerate bounding box: rho_C must be positive and finite")
    pos = _vertices(path)
    lo = pos.min(axis=0) - rho_C
    hi = pos.max(axis=0) + rho_C
    box = float(np.prod(hi - lo))
    if not (box > 0 and math.isfinite(box)):
        raise ValueError("degenerate bounding box")
    rng = derive_rng(seed, "hit-or-miss")
    pts = lo + (hi - lo) * rng.random((n_samples, pos.shape[1]))
    frac = float(np.mean(_Cover(pos, rho_C)(pts)))
    return SausageEstimate(
        volume=box * frac,
        stderr=box * math.sqrt(frac * (1 - frac) / n_samples),
        method="hit_or_miss",
        resolution=float(n_samples),
    )


def ballistic_lower_bound(path, rho_C: float, direction) -> float:
    """Extent of the path along ``direction`` times the cross-section
    ``omega_{d-1} rho_C^{d-1}``; never exceeds the sausage volume."""
    u = np.asarray(direction, dtype=float)
    norm = float(np.linalg.norm(u))
    if not norm > 0:
        raise ValueError("direction must be nonzero")
    proj = _vertices(path) @ (u / norm)
    d = len(u)
    return float(proj.max() - proj.min()) * unit_ball_volume(d - 1) * rho_C ** (d - 1)
