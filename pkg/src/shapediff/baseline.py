"""Naive 2D -> 3D extrapolations from a segmentation mask: cylinder and ellipsoid fits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .voxgrid import VoxelGrid


class DegenerateMask(ValueError):
    pass


class ExtentExceedsGrid(ValueError):
    pass


@dataclass(frozen=True)
class EllipseFit:
    centroid: tuple[float, float]  # (row, col)
    major_axis: float  # full lengths, pixels
    minor_axis: float
    orientation: float  # radians from the column axis towards the row axis, in (-pi/2, pi/2]

    @property
    def third_axis(self) -> float:
        return 0.5 * (self.major_axis + self.minor_axis)


def fit_ellipse(mask) -> EllipseFit:
    """Moments-equivalent ellipse: full axis lengths are 4 * sqrt(covariance eigenvalue)."""
    pts = np.argwhere(np.asarray(mask) > 0.5).astype(np.float64)
    if len(pts) < 3:
        raise DegenerateMask(f"need >= 3 foreground pixels, got {len(pts)}")
    c = pts.mean(axis=0)
    cov = np.cov((pts - c).T, bias=True)
    evals, evecs = np.linalg.eigh(cov)
    if evals[0] <= 1e-12:
        raise DegenerateMask("foreground pixels are collinear")
    major = 4.0 * np.sqrt(evals[1])
    minor = 4.0 * np.sqrt(evals[0])
    v_row, v_col = evecs[:, 1]
    theta = np.arctan2(v_row, v_col)
    if theta <= -np.pi / 2:
        theta += np.pi
    elif theta > np.pi / 2:
        theta -= np.pi
    return EllipseFit((float(c[0]), float(c[1])), float(major), float(minor), float(theta))


def extrude(mask, n_slices: int, depth: int) -> VoxelGrid:
    """Stack `mask` over `n_slices` depth slices that include the central slice depth // 2."""
    m = (np.asarray(mask) > 0.5).astype(np.float64)
    if n_slices > depth:
        raise ExtentExceedsGrid(f"extent {n_slices} exceeds grid depth {depth}")
    out = np.zeros((depth,) + m.shape)
    start = depth // 2 - n_slices // 2
    out[start:start + n_slices] = m
    return VoxelGrid(out, binary=True)


def cylinder_fit(mask, depth: int) -> VoxelGrid:
    """Raw mask extruded over round((major + minor) / 2) slices."""
    fit = fit_ellipse(mask)
    n = max(1, int(round(fit.third_axis)))
    return extrude(mask, n, depth)


def ellipsoid_fit(mask, depth: int) -> VoxelGrid:
    """Voxelized ellipsoid: fitted in-plane semi-axes and (a + b) / 2 along depth,
    centred on the fitted centroid and the central slice."""
    m = np.asarray(mask)
    fit = fit_ellipse(m)
    a, b = fit.major_axis / 2, fit.minor_axis / 2
    c = 0.5 * (a + b)
    if 2 * c > depth:
        raise ExtentExceedsGrid(f"depth axis {2 * c:.2f} exceeds grid depth {depth}")
    H, W = m.shape
    z, y, x = np.meshgrid(
        np.arange(depth) - depth // 2, np.arange(H) - fit.centroid[0], np.arange(W) - fit.centroid[1],
        indexing="ij",
    )
    ct, st = np.cos(fit.orientation), np.sin(fit.orientation)
    u = x * ct + y * st  # along the major axis
    w = -x * st + y * ct
    inside = (u / a) ** 2 + (w / b) ** 2 + (z / c) ** 2 <= 1.0
    return VoxelGrid(inside.astype(np.float64), binary=True)


def baseline_fit(mask, depth: int, kind: str) -> VoxelGrid:
    if kind == "cylinder":
        return cylinder_fit(mask, depth)
    if kind == "ellipsoid":
        return ellipsoid_fit(mask, depth)
    raise ValueError(f"unknown baseline {kind!r}")
