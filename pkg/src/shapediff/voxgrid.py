"""Voxel/image containers, the VOX3 file format, manifests and synthetic cell shapes."""
from __future__ import annotations

import csv
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VOX3"
HEADER_SIZE = 20  # magic(4) + dtype tag(1) + reserved(3) + 3 x u32 dims
MAX_DIM = 1024
DTYPE_TAGS = {"u8": 0, "f32": 1}

SYNTH_CLASSES = ("ball", "biconcave", "spiky", "elongated")
PAPER_CLASSES = ("SDE", "cluster", "multilobate", "keratocyte", "knizocyte", "acanthocyte")
MANIFEST_HEADER = ["id", "voxel_path", "prior_path", "class", "fold"]


class VoxelFormatError(ValueError):
    pass


class BadMagic(VoxelFormatError):
    pass


class TruncatedFile(VoxelFormatError):
    pass


class DimOverflow(VoxelFormatError):
    pass


class IoFailure(OSError):
    pass


class EmptySlice(ValueError):
    pass


class SizeOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class VoxelGrid:
    """Dense (depth, height, width) scalar field."""

    values: np.ndarray
    binary: bool = False

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"voxel grid must be 3D, got shape {v.shape}")
        if min(v.shape) < 1:
            raise ValueError(f"empty dimension in {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("voxel grid contains non-finite values")
        if self.binary and not np.all((v == 0) | (v == 1)):
            raise ValueError("binary grid holds values outside {0, 1}")
        object.__setattr__(self, "values", v)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.values.shape)

    @classmethod
    def from_mask(cls, mask) -> "VoxelGrid":
        return cls((np.asarray(mask) > 0.5).astype(np.float64), binary=True)


@dataclass(frozen=True)
class Prior2D:
    """Two-channel 2D conditioning image: fluorescence intensity and segmentation mask."""

    fluorescence: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.fluorescence, dtype=np.float64)
        m = np.asarray(self.mask, dtype=np.float64)
        if f.ndim != 2 or f.shape != m.shape:
            raise ValueError(f"prior channels must be 2D and share dims, got {f.shape} and {m.shape}")
        if np.any(f < 0) or np.any(f > 1) or not np.all(np.isfinite(f)):
            raise ValueError("fluorescence must lie in [0, 1]")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask must be binary")
        object.__setattr__(self, "fluorescence", f)
        object.__setattr__(self, "mask", m)

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(int(s) for s in self.mask.shape)

    def to_array(self) -> np.ndarray:
        return np.stack([self.fluorescence, self.mask])

    @classmethod
    def from_array(cls, arr) -> "Prior2D":
        arr = np.asarray(arr)
        return cls(fluorescence=arr[0], mask=arr[1])


@dataclass
class Sample:
    id: str
    prior: Prior2D
    target: VoxelGrid | None = None
    class_label: str = ""
    fold: int = -1

    def __post_init__(self):
        if self.target is not None and self.target.dims[1:] != self.prior.dims:
            raise ValueError(
                f"target in-plane dims {self.target.dims[1:]} differ from prior dims {self.prior.dims}"
            )


@dataclass
class ManifestRecord:
    id: str
    voxel_path: str
    prior_path: str
    class_label: str
    fold: int


@dataclass
class Manifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids are not unique")
        if len(self.records) >= 5:
            folds = {r.fold for r in self.records}
            if not set(range(5)) <= folds:
                raise ValueError(f"manifest with >= 5 records must use folds 0..4, got {sorted(folds)}")

    def __len__(self):
        return len(self.records)


# ---------------------------------------------------------------------------
# VOX3 I/O


def encode_voxel_bytes(grid: VoxelGrid, dtype: str = "u8") -> bytes:
    if dtype not in DTYPE_TAGS:
        raise ValueError(f"unknown dtype {dtype!r}")
    v = grid.values
    header = MAGIC + bytes([DTYPE_TAGS[dtype], 0, 0, 0]) + struct.pack("<3I", *grid.dims)
    if dtype == "u8":
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("u8 payload requires a binary grid")
        payload = v.astype(np.uint8).tobytes(order="C")
    else:
        payload = v.astype("<f4").tobytes(order="C")
    return header + payload


def decode_voxel_bytes(data: bytes) -> VoxelGrid:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {data[:4]!r}")
    if len(data) < HEADER_SIZE:
        raise TruncatedFile(f"header needs {HEADER_SIZE} bytes, file has {len(data)}")
    tag = data[4]
    dims = struct.unpack("<3I", data[8:20])
    if any(d > MAX_DIM for d in dims):
        raise DimOverflow(f"dims {dims} exceed {MAX_DIM}")
    if tag not in (0, 1):
        raise VoxelFormatError(f"unknown dtype tag {tag}")
    n = dims[0] * dims[1] * dims[2]
    width = 1 if tag == 0 else 4
    payload = data[HEADER_SIZE:]
    if len(payload) < n * width:
        raise TruncatedFile(f"payload needs {n * width} bytes, file has {len(payload)}")
    if tag == 0:
        raw = np.frombuffer(payload, dtype=np.uint8, count=n)
        values = (raw > 0).astype(np.float64)
        return VoxelGrid(values.reshape(dims), binary=True)
    raw = np.frombuffer(payload, dtype="<f4", count=n)
    return VoxelGrid(raw.astype(np.float64).reshape(dims))


def write_voxel_file(grid: VoxelGrid, path, dtype: str = "u8") -> None:
    data = encode_voxel_bytes(grid, dtype)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_voxel_file(path) -> VoxelGrid:
    return decode_voxel_bytes(Path(path).read_bytes())


def write_prior_file(prior: Prior2D, path) -> None:
    """Priors are stored as a 2-deep f32 VOX3 volume: [fluorescence, mask]."""
    write_voxel_file(VoxelGrid(prior.to_array()), path, dtype="f32")


def read_prior_file(path) -> Prior2D:
    grid = read_voxel_file(path)
    if grid.dims[0] != 2:
        raise VoxelFormatError(f"prior file must have depth 2, got {grid.dims}")
    return Prior2D.from_array(grid.values)


def write_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            w.writerow([r.id, r.voxel_path, r.prior_path, r.class_label, r.fold])


def read_manifest(path) -> Manifest:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise VoxelFormatError(f"bad manifest header {header}")
        records = [ManifestRecord(row[0], row[1], row[2], row[3], int(row[4])) for row in reader if row]
    return Manifest(records)


def load_samples(manifest_path) -> list[Sample]:
    """Load every manifest record; paths are resolved relative to the manifest."""
    base = Path(manifest_path).parent
    out = []
    for r in read_manifest(manifest_path).records:
        target = read_voxel_file(base / r.voxel_path) if r.voxel_path else None
        prior = read_prior_file(base / r.prior_path)
        out.append(Sample(r.id, prior, target, r.class_label, r.fold))
    return out


# ---------------------------------------------------------------------------
# priors and synthetic shapes


def extract_prior(grid: VoxelGrid, intensity: np.ndarray | None = None) -> Prior2D:
    """Central depth slice (index depth // 2) as mask; fluorescence from `intensity` if given."""
    d = grid.dims[0] // 2
    mask = (grid.values[d] > 0.5).astype(np.float64)
    if not mask.any():
        raise EmptySlice(f"central slice {d} has no foreground")
    fluo = mask.copy() if intensity is None else np.clip(np.asarray(intensity)[d], 0.0, 1.0)
    return Prior2D(fluorescence=fluo, mask=mask)


def _grid_coords(size: int):
    c = (size - 1) / 2.0
    ax = np.arange(size, dtype=np.float64) - c
    return np.meshgrid(ax, ax, ax, indexing="ij")


def _largest_component(mask: np.ndarray) -> np.ndarray:
    from scipy import ndimage

    lab, n = ndimage.label(mask)  # default structure is 6-connectivity
    if n <= 1:
        return mask
    sizes = np.bincount(lab.ravel())[1:]
    return lab == (np.argmax(sizes) + 1)


def synth_field(cls: str, size: int, seed: int) -> tuple[np.ndarray, dict]:
    """Implicit function (positive inside) for a synthetic cell class and its drawn parameters."""
    if cls not in SYNTH_CLASSES:
        raise ValueError(f"unknown synthetic class {cls!r}")
    if not 16 <= size <= 64:
        raise SizeOutOfRange(f"size {size} outside [16, 64]")
    rng = np.random.default_rng([seed, SYNTH_CLASSES.index(cls), size])
    z, y, x = _grid_coords(size)
    # sub-voxel centre jitter, so cells do not all sit on the same lattice-symmetric point
    shift = rng.uniform(-0.5, 0.5, size=3)
    z, y, x = z - shift[0], y - shift[1], x - shift[2]
    params: dict = {"centre_shift": shift}
    if cls == "ball":
        r = rng.uniform(0.2, 0.35) * size
        params["radius"] = r
        f = r - np.sqrt(z**2 + y**2 + x**2)
    elif cls == "biconcave":
        # Evans-Fung discocyte profile, axis along depth
        r = rng.uniform(0.3, 0.4) * size
        c0, c2, c4 = 0.207 * rng.uniform(1.1, 1.4), 2.003, -1.123
        params.update(radius=r, c0=c0)
        rho = np.sqrt(y**2 + x**2) / r
        inside = np.clip(1.0 - rho**2, 0.0, None)
        half = r * np.sqrt(inside) * (c0 + c2 * rho**2 + c4 * rho**4)
        f = np.where(rho < 1.0, half - np.abs(z), (1.0 - rho) * r - np.abs(z))
    elif cls == "spiky":
        r = rng.uniform(0.2, 0.28) * size
        k = int(rng.integers(6, 13))
        dirs = rng.standard_normal((k, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        height = rng.uniform(0.3, 0.45) * r
        width = 0.35
        params.update(radius=r, n_bumps=k, bump_height=height)
        rad = np.sqrt(z**2 + y**2 + x**2)
        safe = np.maximum(rad, 1e-9)
        unit = np.stack([z, y, x]) / safe
        cosang = np.tensordot(dirs, unit, axes=(1, 0))
        bumps = height * np.exp(-(1.0 - cosang) / (width**2 / 2)).sum(axis=0)
        f = r + bumps - rad
    else:
        ratio = rng.uniform(1.8, 2.6)
        vol_r = rng.uniform(0.18, 0.23) * size
        b = vol_r / ratio ** (1 / 3)
        a = b * ratio
        params.update(semi_major=a, semi_minor=b, ratio=a / b)
        # long axis kept in the imaging plane so the central slice carries the elongation
        ang = rng.uniform(0, np.pi)
        rot = np.array([[1, 0, 0], [0, np.cos(ang), -np.sin(ang)], [0, np.sin(ang), np.cos(ang)]])
        pts = np.stack([z, y, x]).reshape(3, -1)
        loc = rot.T @ pts
        q = (loc[0] / b) ** 2 + (loc[1] / a) ** 2 + (loc[2] / b) ** 2
        f = (1.0 - np.sqrt(q)).reshape(z.shape) * b
    return f, params


def synth_shape(cls: str, size: int, seed: int, sample_id: str | None = None) -> Sample:
    """Deterministic synthetic cell of the given class; the target is a single 6-connected blob."""
    f, _ = synth_field(cls, size, seed)
    mask = _largest_component(f > 0)
    target = VoxelGrid(mask.astype(np.float64), binary=True)
    prior = extract_prior(target)
    return Sample(sample_id or f"{cls}_{size}_{seed}", prior, target, cls)


def paired_ball(cls: str, size: int, seed: int) -> VoxelGrid:
    """Smooth counterpart of synth_shape(cls, size, seed): a ball of equal voxel volume
    around the same centre."""
    f, params = synth_field(cls, size, seed)
    vol = _largest_component(f > 0).sum()
    r = (3.0 * vol / (4.0 * np.pi)) ** (1 / 3)
    z, y, x = _grid_coords(size)
    sz, sy, sx = params["centre_shift"]
    inside = (z - sz) ** 2 + (y - sy) ** 2 + (x - sx) ** 2 <= r * r
    return VoxelGrid(inside.astype(np.float64), binary=True)


def is_single_component(mask: np.ndarray) -> bool:
    """6-connected flood fill from the first foreground voxel covers all foreground."""
    mask = np.asarray(mask) > 0.5
    total = int(mask.sum())
    if total == 0:
        return False
    start = tuple(int(i) for i in np.argwhere(mask)[0])
    seen = np.zeros_like(mask)
    seen[start] = True
    queue = deque([start])
    count = 0
    offsets = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))
    while queue:
        p = queue.popleft()
        count += 1
        for o in offsets:
            q = (p[0] + o[0], p[1] + o[1], p[2] + o[2])
            if all(0 <= q[i] < mask.shape[i] for i in range(3)) and mask[q] and not seen[q]:
                seen[q] = True
                queue.append(q)
    return count == total
