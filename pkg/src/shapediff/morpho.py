"""Surface extraction and morphometrics: volume, area, roughness, angle-deficit curvature,
convexity, and the named feature vector fed to the classifier."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse
from scipy.spatial import ConvexHull
from skimage import measure

from .voxgrid import Prior2D, VoxelGrid


class EmptySurface(ValueError):
    pass


class OpenMesh(ValueError):
    pass


class EmptyForeground(ValueError):
    pass


@dataclass
class SurfaceMesh:
    vertices: np.ndarray  # (V, 3) float, voxel units, (depth, height, width) order
    triangles: np.ndarray  # (F, 3) int, counter-clockwise seen from outside

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges and how many triangles use each."""
        f = self.triangles
        e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def is_closed(self) -> bool:
        if len(self.triangles) == 0:
            return False
        _, counts = self.edges()
        return bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        e, _ = self.edges()
        used = np.unique(self.triangles)
        return int(len(used) - len(e) + len(self.triangles))

    def translated(self, offset) -> "SurfaceMesh":
        return SurfaceMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.triangles.copy())

    def scaled(self, c: float) -> "SurfaceMesh":
        return SurfaceMesh(self.vertices * c, self.triangles.copy())


def unit_cube_mesh() -> SurfaceMesh:
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=np.float64)
    # vertex index = 4x + 2y + z; each face wound outward
    f = [
        [0, 1, 3], [0, 3, 2],  # x = 0
        [4, 6, 7], [4, 7, 5],  # x = 1
        [0, 4, 5], [0, 5, 1],  # y = 0
        [2, 3, 7], [2, 7, 6],  # y = 1
        [0, 2, 6], [0, 6, 4],  # z = 0
        [1, 5, 7], [1, 7, 3],  # z = 1
    ]
    return SurfaceMesh(v, np.array(f))


def icosphere(radius: float = 1.0, subdivisions: int = 3, centre=(0.0, 0.0, 0.0)) -> SurfaceMesh:
    """Geodesic sphere: icosahedron with each face split in four `subdivisions` times,
    vertices projected onto the sphere."""
    g = (1.0 + 5**0.5) / 2.0
    v = [[-1, g, 0], [1, g, 0], [-1, -g, 0], [1, -g, 0], [0, -1, g], [0, 1, g],
         [0, -1, -g], [0, 1, -g], [g, 0, -1], [g, 0, 1], [-g, 0, -1], [-g, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return SurfaceMesh(np.array(verts) * radius + np.asarray(centre, dtype=np.float64), np.array(faces))


def _require_closed(mesh: SurfaceMesh) -> None:
    if not mesh.is_closed():
        raise OpenMesh("mesh has boundary or non-manifold edges")


# ---------------------------------------------------------------------------
# extraction


def marching_cubes(grid, iso: float = 0.5) -> SurfaceMesh:
    """Isosurface of `grid` at `iso`, values above `iso` treated as inside.

    One layer of the grid minimum is padded around the volume so the surface closes.
    Vertex coordinates are in the unpadded voxel index frame.
    """
    v = grid.values if isinstance(grid, VoxelGrid) else np.asarray(grid, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if not lo < iso < hi:
        raise EmptySurface(f"iso {iso} not strictly inside value range [{lo}, {hi}]")
    padded = np.pad(v, 1, mode="constant", constant_values=lo)
    verts, faces, _, _ = measure.marching_cubes(padded, level=iso, method="lewiner")
    verts = verts.astype(np.float64) - 1.0
    faces = faces[:, ::-1]  # outward winding for the inside-is-high convention
    return SurfaceMesh(verts, faces)


def metric_mesh(grid, smooth_sigma: float | None = 1.0) -> SurfaceMesh:
    """Mesh used for measurements: binarize, pad, optionally Gaussian-smooth, iso 0.5.

    Falls back to the binary field when smoothing leaves nothing above the iso level.
    """
    v = grid.values if isinstance(grid, VoxelGrid) else np.asarray(grid)
    b = np.pad((v > 0.5).astype(np.float64), 2)
    if not b.any():
        raise EmptySurface("grid has no foreground")
    if smooth_sigma:
        sm = ndimage.gaussian_filter(b, smooth_sigma, mode="constant")
        # objects thinner than the blur never reach iso 0.5; mesh those unsmoothed
        if sm.max() > 0.5:
            b = sm
    mesh = marching_cubes(b, 0.5)
    mesh.vertices -= 2.0
    return mesh


# ---------------------------------------------------------------------------
# volume and area


def mesh_volume(mesh: SurfaceMesh) -> float:
    """Signed tetrahedron sum; positive for outward orientation."""
    _require_closed(mesh)
    a, b, c = (mesh.vertices[mesh.triangles[:, i]] for i in range(3))
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def voxel_volume(grid) -> float:
    v = grid.values if isinstance(grid, VoxelGrid) else np.asarray(grid)
    return float(np.count_nonzero(v > 0.5))


def triangle_areas(mesh: SurfaceMesh) -> np.ndarray:
    a, b, c = (mesh.vertices[mesh.triangles[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def surface_area(mesh: SurfaceMesh) -> float:
    return float(triangle_areas(mesh).sum())


# ---------------------------------------------------------------------------
# smoothing and roughness


def _adjacency(mesh: SurfaceMesh) -> sparse.csr_matrix:
    e, _ = mesh.edges()
    n = len(mesh.vertices)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


def laplacian_smooth(mesh: SurfaceMesh, iterations: int, lam: float = 0.5) -> SurfaceMesh:
    """Uniform Laplacian smoothing: v <- v + lam * (mean(neighbours) - v)."""
    adj = _adjacency(mesh)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    deg[deg == 0] = 1.0
    v = mesh.vertices.copy()
    for _ in range(iterations):
        v = v + lam * (adj @ v / deg[:, None] - v)
    return SurfaceMesh(v, mesh.triangles.copy())


def vertex_normals(mesh: SurfaceMesh) -> np.ndarray:
    """Area-weighted unit normals (outward for outward-wound meshes)."""
    p = [mesh.vertices[mesh.triangles[:, i]] for i in range(3)]
    fn = np.cross(p[1] - p[0], p[2] - p[0])
    n = np.zeros_like(mesh.vertices)
    for i in range(3):
        np.add.at(n, mesh.triangles[:, i], fn)
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)


def surface_roughness(mesh: SurfaceMesh, k: int = 10, lam: float = 0.5) -> float:
    """RMS displacement of vertices under k Laplacian smoothing iterations, measured along
    the original vertex normal.

    The tangential part is dropped: on marching-cubes meshes it is vertex drift over an
    irregular triangulation and says nothing about the surface itself.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    _require_closed(mesh)
    smoothed = laplacian_smooth(mesh, k, lam)
    used = np.unique(mesh.triangles)
    d = smoothed.vertices[used] - mesh.vertices[used]
    dn = np.einsum("ij,ij->i", d, vertex_normals(mesh)[used])
    return float(np.sqrt(np.mean(dn**2)))


# ---------------------------------------------------------------------------
# curvature


def corner_angles(mesh: SurfaceMesh) -> np.ndarray:
    """(F, 3) interior angle at each triangle corner."""
    p = [mesh.vertices[mesh.triangles[:, i]] for i in range(3)]
    out = np.empty((len(mesh.triangles), 3))
    for i in range(3):
        u = p[(i + 1) % 3] - p[i]
        w = p[(i + 2) % 3] - p[i]
        # atan2 form stays accurate for very thin triangles
        out[:, i] = np.arctan2(np.linalg.norm(np.cross(u, w), axis=1), np.einsum("ij,ij->i", u, w))
    return out


def angle_deficits(mesh: SurfaceMesh) -> np.ndarray:
    """2*pi minus the incident corner angles, per vertex referenced by the mesh."""
    _require_closed(mesh)
    sums = np.zeros(len(mesh.vertices))
    np.add.at(sums, mesh.triangles.ravel(), corner_angles(mesh).ravel())
    used = np.unique(mesh.triangles)
    return 2.0 * np.pi - sums[used]


def curvature_stats(mesh: SurfaceMesh) -> tuple[float, float]:
    """(sum of |deficit|, mean deficit)."""
    d = angle_deficits(mesh)
    return float(np.abs(d).sum()), float(d.mean())


# ---------------------------------------------------------------------------
# convexity and shape descriptors


def convex_hull_volume(grid) -> float:
    """Volume of the hull of all foreground voxel corner points (voxels are unit cubes)."""
    v = grid.values if isinstance(grid, VoxelGrid) else np.asarray(grid)
    fg = np.argwhere(v > 0.5)
    if len(fg) == 0:
        raise EmptyForeground("grid has no foreground")
    corners = (fg[:, None, :] + np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])[None])
    pts = np.unique(corners.reshape(-1, 3), axis=0).astype(np.float64)
    return float(ConvexHull(pts).volume)


def convexity(grid) -> float:
    return voxel_volume(grid) / convex_hull_volume(grid)


def sphericity(volume: float, area: float) -> float:
    return float(np.pi ** (1 / 3) * (6.0 * volume) ** (2 / 3) / area)


def pca_axes(grid) -> np.ndarray:
    """Full axis lengths 4*sqrt(eigenvalue) of the voxel-coordinate covariance, descending."""
    v = grid.values if isinstance(grid, VoxelGrid) else np.asarray(grid)
    pts = np.argwhere(v > 0.5).astype(np.float64)
    if len(pts) < 2:
        return np.zeros(3)
    ev = np.linalg.eigvalsh(np.cov(pts.T))[::-1]
    return 4.0 * np.sqrt(np.clip(ev, 0.0, None))


def prior_features(prior: Prior2D) -> dict[str, float]:
    mask = prior.mask > 0.5
    area = float(mask.sum())
    if area == 0:
        return dict(prior_area=0.0, prior_perimeter=0.0, prior_eccentricity=0.0, prior_solidity=0.0,
                    prior_intensity_mean=0.0, prior_intensity_std=0.0)
    props = measure.regionprops(mask.astype(np.int32))[0]
    vals = prior.fluorescence[mask]
    return dict(
        prior_area=area,
        prior_perimeter=float(measure.perimeter(mask)),
        prior_eccentricity=float(props.eccentricity),
        prior_solidity=float(props.solidity),
        prior_intensity_mean=float(vals.mean()),
        prior_intensity_std=float(vals.std()),
    )


FEATURE_NAMES = (
    "voxel_volume",
    "mesh_volume",
    "surface_area",
    "roughness_k5",
    "roughness_k10",
    "roughness_k20",
    "deficit_total_abs",
    "deficit_mean",
    "deficit_std",
    "convexity",
    "sphericity",
    "bbox_extent_0",
    "bbox_extent_1",
    "bbox_extent_2",
    "pca_axis_major",
    "pca_axis_middle",
    "pca_axis_minor",
    "pca_ratio_major_middle",
    "pca_ratio_major_minor",
    "surface_dist_min",
    "surface_dist_max",
    "surface_dist_mean",
    "surface_dist_std",
) + tuple(f"radial_hist_{i}" for i in range(8)) + (
    "prior_area",
    "prior_perimeter",
    "prior_eccentricity",
    "prior_solidity",
    "prior_intensity_mean",
    "prior_intensity_std",
)


@dataclass
class FeatureVector:
    values: np.ndarray
    names: tuple[str, ...] = FEATURE_NAMES

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.values) != len(self.names):
            raise ValueError("feature values and names differ in length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite feature value")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))


def extract_features(grid, prior: Prior2D, smooth_sigma: float | None = 1.0) -> FeatureVector:
    v = grid.values if isinstance(grid, VoxelGrid) else np.asarray(grid)
    fg = v > 0.5
    if not fg.any():
        raise EmptyForeground("grid has no foreground")
    mesh = metric_mesh(v, smooth_sigma)
    f: dict[str, float] = {}
    f["voxel_volume"] = voxel_volume(v)
    f["mesh_volume"] = mesh_volume(mesh)
    f["surface_area"] = surface_area(mesh)
    for k in (5, 10, 20):
        f[f"roughness_k{k}"] = surface_roughness(mesh, k)
    d = angle_deficits(mesh)
    f["deficit_total_abs"] = float(np.abs(d).sum())
    f["deficit_mean"] = float(d.mean())
    f["deficit_std"] = float(d.std())
    f["convexity"] = convexity(v)
    f["sphericity"] = sphericity(f["mesh_volume"], f["surface_area"])
    idx = np.argwhere(fg)
    ext = idx.max(axis=0) - idx.min(axis=0) + 1
    for i in range(3):
        f[f"bbox_extent_{i}"] = float(ext[i])
    axes = pca_axes(v)
    f["pca_axis_major"], f["pca_axis_middle"], f["pca_axis_minor"] = (float(a) for a in axes)
    f["pca_ratio_major_middle"] = float(axes[0] / max(axes[1], 1e-9))
    f["pca_ratio_major_minor"] = float(axes[0] / max(axes[2], 1e-9))
    centroid = idx.mean(axis=0)
    used = np.unique(mesh.triangles)
    r = np.linalg.norm(mesh.vertices[used] - centroid, axis=1)
    f["surface_dist_min"] = float(r.min())
    f["surface_dist_max"] = float(r.max())
    f["surface_dist_mean"] = float(r.mean())
    f["surface_dist_std"] = float(r.std())
    hist, _ = np.histogram(r / r.max(), bins=8, range=(0.0, 1.0))
    for i, h in enumerate(hist / len(r)):
        f[f"radial_hist_{i}"] = float(h)
    f.update(prior_features(prior))
    return FeatureVector(np.array([f[n] for n in FEATURE_NAMES]))


def shape_metrics(grid, smooth_sigma: float | None = 1.0) -> dict[str, float]:
    """The four evaluation metrics; an empty grid scores zero on all of them."""
    v = grid.values if isinstance(grid, VoxelGrid) else np.asarray(grid)
    if not (v > 0.5).any():
        return dict(volume=0.0, surface_area=0.0, roughness=0.0, curvature=0.0)
    mesh = metric_mesh(v, smooth_sigma)
    total_abs, _ = curvature_stats(mesh)
    return dict(
        volume=voxel_volume(v),
        surface_area=surface_area(mesh),
        roughness=surface_roughness(mesh, 10),
        curvature=total_abs,
    )


# ---------------------------------------------------------------------------
# export


def write_obj(mesh: SurfaceMesh, path) -> None:
    with open(path, "w") as fh:
        for p in mesh.vertices:
            fh.write(f"v {p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")
        for t in mesh.triangles + 1:
            fh.write(f"f {t[0]} {t[1]} {t[2]}\n")


def write_features_csv(rows: list[tuple[str, str, FeatureVector]], path) -> None:
    """rows: (sample id, class label, features)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "class", *FEATURE_NAMES])
        for sid, label, fv in rows:
            w.writerow([sid, label, *(repr(float(x)) for x in fv.values)])


def read_features_csv(path) -> list[tuple[str, str, FeatureVector]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[2:]) != FEATURE_NAMES:
            raise ValueError("feature CSV header does not match the registry")
        return [(r[0], r[1], FeatureVector(np.array([float(x) for x in r[2:]]))) for r in reader if r]
