"""Procedural six-task scenes and their on-disk container.

Each sample is a deterministic function of one 64-bit seed: a handful of
simple solids with analytic height fields, composited front-most-wins into
a camera-facing 2.5-D scene.  Depth, normals, and shading are exact (no
rasterizer), edges come from a Sobel pass over the emitted image, and
keypoints are Gaussian splats at silhouette corners.  Everything is stored
float32 (labels uint16) so files round-trip bitwise.

File layout: magic "MTDS", u32 version 1, u32 count, u32 H, u32 W, then per
sample the fields rgb f32[H,W,3], S u16[H,W], D f32[H,W], N f32[H,W,3],
K f32[H,W], E f32[H,W], R f32[H,W], row major, little endian, unpadded.
A sibling "<path>.manifest" lists one seed per line.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError, FormatError
from .tensor import Tensor

CLASS_NAMES = ("background", "sphere", "box", "cylinder", "cone",
               "torus-disc", "pyramid", "wedge")
NUM_CLASSES = len(CLASS_NAMES)

ALBEDO = np.array([
    [0.35, 0.35, 0.38],   # background
    [0.90, 0.25, 0.20],   # sphere
    [0.20, 0.55, 0.90],   # box
    [0.95, 0.80, 0.25],   # cylinder
    [0.30, 0.80, 0.40],   # cone
    [0.75, 0.35, 0.85],   # torus-disc
    [0.95, 0.55, 0.15],   # pyramid
    [0.55, 0.85, 0.90],   # wedge
])

SPLAT_SIGMA = 1.5  # px
NOISE_STD = 0.02
LUMA = (0.299, 0.587, 0.114)

MAGIC = b"MTDS"
VERSION = 1
HEADER = struct.Struct("<4sIIII")


@dataclass
class TaskBundle:
    """One scene's image and its six aligned targets."""

    rgb: np.ndarray   # f32 [H,W,3] in [0,1]
    S: np.ndarray     # u16 [H,W] labels in [0,8)
    D: np.ndarray     # f32 [H,W] in [0,1], 1 = far background
    N: np.ndarray     # f32 [H,W,3] unit normals
    K: np.ndarray     # f32 [H,W] keypoint heat
    E: np.ndarray     # f32 [H,W] edge strength
    R: np.ndarray     # f32 [H,W] Lambertian shading

    @property
    def size(self) -> int:
        return self.rgb.shape[0]

    def target(self, task: str):
        """Loss-ready target array shaped like the matching head output."""
        if task == "S":
            return self.S.astype(np.int64)
        if task == "N":
            return self.N
        if task in ("D", "K", "E", "R"):
            return getattr(self, task)[..., None]
        raise DataError(f"unknown task id {task!r}")

    FIELDS = ("rgb", "S", "D", "N", "K", "E", "R")


def sobel_edges(gray) -> np.ndarray:
    """Gradient magnitude with the 3x3 Sobel pair, replicate-padded borders,
    scaled by the per-image max (a flat image stays all zero)."""
    g = gray.data if isinstance(gray, Tensor) else np.asarray(gray)
    g = g.astype(np.float64)
    if g.ndim != 2 or g.shape[0] < 3 or g.shape[1] < 3:
        raise DimensionError(f"sobel_edges needs a [H>=3, W>=3] map, got {g.shape}")
    p = np.pad(g, 1, mode="edge")
    # sum each kernel side with identical association so a flat image
    # cancels to exactly zero
    right = p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]
    left = p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2]
    bottom = p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]
    top = p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:]
    mag = np.hypot(right - left, bottom - top)
    peak = mag.max()
    return mag / peak if peak > 0 else mag


def _shape_field(cls: int, dx, dy, r: float):
    """Footprint mask, height profile in [0,1], and its x/y derivatives."""
    zeros = np.zeros_like(dx)
    if cls == 1:    # sphere: hemispherical cap, rim clipped to keep slopes finite
        rho2 = dx * dx + dy * dy
        mask = rho2 <= (0.999 * r) ** 2
        p = np.sqrt(np.maximum(1.0 - rho2 / r ** 2, 0.0))
        safe = np.where(mask, np.maximum(p, 1e-9), 1.0)
        return mask, p, -dx / (r ** 2 * safe), -dy / (r ** 2 * safe)
    if cls == 2:    # box: flat plateau
        mask = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        return mask, np.ones_like(dx), zeros, zeros
    if cls == 3:    # cylinder lying along x: half-pipe profile across y
        b = 0.7 * r
        mask = (np.abs(dx) <= r) & (np.abs(dy) <= 0.999 * b)
        p = np.sqrt(np.maximum(1.0 - (dy / b) ** 2, 0.0))
        safe = np.where(mask, np.maximum(p, 1e-9), 1.0)
        return mask, p, zeros, -dy / (b ** 2 * safe)
    if cls == 4:    # cone
        rho = np.sqrt(dx * dx + dy * dy)
        mask = rho <= r
        p = np.maximum(1.0 - rho / r, 0.0)
        safe = np.where(rho > 1e-9, rho, 1.0)
        px = np.where(rho > 1e-9, -dx / (r * safe), 0.0)
        py = np.where(rho > 1e-9, -dy / (r * safe), 0.0)
        return mask, p, px, py
    if cls == 5:    # torus-disc: tube cross-section around a ring
        ring, tube = 0.65 * r, 0.35 * r
        rho = np.sqrt(dx * dx + dy * dy)
        off = rho - ring
        mask = np.abs(off) <= 0.999 * tube
        p = np.sqrt(np.maximum(1.0 - (off / tube) ** 2, 0.0))
        safe_p = np.where(mask, np.maximum(p, 1e-9), 1.0)
        safe_rho = np.maximum(rho, 1e-9)
        common = -off / (tube ** 2 * safe_p * safe_rho)
        return mask, p, common * dx, common * dy
    if cls == 6:    # pyramid
        ax, ay = np.abs(dx), np.abs(dy)
        mask = (ax <= r) & (ay <= r)
        p = np.maximum(1.0 - np.maximum(ax, ay) / r, 0.0)
        px = np.where(ax >= ay, -np.sign(dx) / r, 0.0)
        py = np.where(ax < ay, -np.sign(dy) / r, 0.0)
        return mask, p, px, py
    if cls == 7:    # wedge: linear ramp along x
        mask = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        p = (dx + r) / (2.0 * r)
        return mask, p, np.full_like(dx, 1.0 / (2.0 * r)), zeros
    raise DataError(f"no height field for class {cls}")


def _corners(cls: int, cx: float, cy: float, r: float):
    """Silhouette corner points (scene units) that receive keypoint splats."""
    if cls in (2, 6, 7):
        d = ((-r, -r), (-r, r), (r, -r), (r, r))
    elif cls == 3:
        b = 0.7 * r
        d = ((-b, -r), (-b, r), (b, -r), (b, r))  # (dy, dx) rectangle corners
    elif cls == 5:
        outer = 0.65 * r + 0.35 * r
        d = ((-outer, 0.0), (outer, 0.0), (0.0, -outer), (0.0, outer))
    else:
        d = ((-r, 0.0), (r, 0.0), (0.0, -r), (0.0, r))
    return [(cy + dy, cx + dx) for dy, dx in d]


def _light_from_seed(rng) -> np.ndarray:
    az = rng.uniform(0.0, 2.0 * np.pi)
    z = rng.uniform(0.35, 0.9)
    s = np.sqrt(1.0 - z * z)
    return np.array([s * np.cos(az), s * np.sin(az), z])


def generate_sample(seed: int, size: int) -> TaskBundle:
    """Deterministic scene for ``seed``; same seed gives a bitwise-equal bundle."""
    if size < 3:
        raise DataError(f"image size must be >= 3, got {size}")
    rng = np.random.default_rng(seed)
    light = _light_from_seed(rng)
    count = int(rng.integers(3, 9))

    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    height = np.zeros((size, size))
    labels = np.zeros((size, size), dtype=np.int64)
    slope_x = np.zeros((size, size))
    slope_y = np.zeros((size, size))
    corners = []

    for _ in range(count):
        cls = int(rng.integers(1, NUM_CLASSES))
        cx = rng.uniform(0.18, 0.82)
        cy = rng.uniform(0.18, 0.82)
        r = rng.uniform(0.08, 0.22)
        z0 = rng.uniform(0.10, 0.55)
        amp = rng.uniform(0.20, 0.40)
        mask, p, px, py = _shape_field(cls, xx - cx, yy - cy, r)
        u = np.where(mask, z0 + amp * p, 0.0)
        front = u > height
        height = np.where(front, u, height)
        labels = np.where(front, cls, labels)
        slope_x = np.where(front, amp * px, slope_x)
        slope_y = np.where(front, amp * py, slope_y)
        corners.extend(_corners(cls, cx, cy, r))

    depth = 1.0 - height
    nx, ny, nz = -slope_x, -slope_y, np.ones_like(height)
    norm = np.sqrt(nx * nx + ny * ny + nz * nz)
    normals = np.stack([nx / norm, ny / norm, nz / norm], axis=-1)

    shading = np.maximum(normals @ light, 0.0)

    heat = np.zeros((size, size))
    py_grid = yy * size - 0.5
    px_grid = xx * size - 0.5
    for cy, cx in corners:
        d2 = (py_grid - (cy * size - 0.5)) ** 2 + (px_grid - (cx * size - 0.5)) ** 2
        heat = np.maximum(heat, np.exp(-d2 / (2.0 * SPLAT_SIGMA ** 2)))

    rgb = ALBEDO[labels] * shading[..., None]
    rgb = rgb + rng.normal(0.0, NOISE_STD, rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0).astype(np.float32)

    gray = LUMA[0] * rgb[..., 0] + LUMA[1] * rgb[..., 1] + LUMA[2] * rgb[..., 2]
    edges = sobel_edges(gray)

    return TaskBundle(rgb=rgb,
                      S=labels.astype(np.uint16),
                      D=depth.astype(np.float32),
                      N=normals.astype(np.float32),
                      K=heat.astype(np.float32),
                      E=edges.astype(np.float32),
                      R=shading.astype(np.float32))


def scene_light(seed: int) -> np.ndarray:
    """The light direction ``generate_sample(seed, ...)`` shaded with."""
    return _light_from_seed(np.random.default_rng(seed))


def generate_dataset(count: int, size: int, base_seed: int = 0,
                     workers: int = 1) -> list:
    """Samples for seeds base_seed..base_seed+count-1, in index order.

    Generation is pure per seed, so any worker count yields identical data.
    """
    seeds = [base_seed + i for i in range(count)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(lambda s: generate_sample(s, size), seeds))
    return [generate_sample(s, size) for s in seeds]


# ------------------------------------------------------------------ storage

_SAMPLE_DTYPES = {"rgb": "<f4", "S": "<u2", "D": "<f4", "N": "<f4",
                  "K": "<f4", "E": "<f4", "R": "<f4"}


def _field_shape(name: str, h: int, w: int):
    return (h, w, 3) if name in ("rgb", "N") else (h, w)


def _sample_nbytes(h: int, w: int) -> int:
    total = 0
    for name, dt in _SAMPLE_DTYPES.items():
        total += int(np.prod(_field_shape(name, h, w))) * np.dtype(dt).itemsize
    return total


def dataset_bytes(samples) -> bytes:
    """The exact byte stream ``write_dataset`` produces for these samples."""
    samples = list(samples)
    if not samples:
        raise DataError("refusing to serialize an empty dataset")
    h, w = samples[0].S.shape
    parts = [HEADER.pack(MAGIC, VERSION, len(samples), h, w)]
    for i, s in enumerate(samples):
        if s.S.shape != (h, w):
            raise DataError(f"sample {i} is {s.S.shape}, expected {(h, w)}")
        for name in TaskBundle.FIELDS:
            arr = np.ascontiguousarray(getattr(s, name), dtype=_SAMPLE_DTYPES[name])
            parts.append(arr.tobytes())
    return b"".join(parts)


def write_dataset(samples, path, seeds=None) -> None:
    """Serialize samples; optionally write the seed manifest alongside."""
    samples = list(samples)
    blob = dataset_bytes(samples)
    with open(path, "wb") as f:
        f.write(blob)
    if seeds is not None:
        if len(seeds) != len(samples):
            raise DataError(f"{len(seeds)} seeds for {len(samples)} samples")
        with open(f"{path}.manifest", "w") as f:
            f.write("".join(f"{s}\n" for s in seeds))


def read_dataset(path) -> list:
    """Parse a dataset file; malformed input raises with the byte offset."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < HEADER.size:
        raise FormatError(f"header truncated: file is {len(blob)} bytes at offset 0, "
                          f"need {HEADER.size}")
    magic, version, count, h, w = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    if h < 1 or w < 1:
        raise FormatError(f"degenerate image size {h}x{w} at offset 12")
    expected = HEADER.size + count * _sample_nbytes(h, w)
    if len(blob) != expected:
        raise FormatError(f"file is {len(blob)} bytes, expected {expected}; "
                          f"data ends at offset {min(len(blob), expected)}")

    samples = []
    off = HEADER.size
    for _ in range(count):
        fields = {}
        for name in TaskBundle.FIELDS:
            shape = _field_shape(name, h, w)
            dt = np.dtype(_SAMPLE_DTYPES[name])
            n = int(np.prod(shape)) * dt.itemsize
            fields[name] = np.frombuffer(blob, dt, count=int(np.prod(shape)),
                                         offset=off).reshape(shape).copy()
            off += n
        samples.append(TaskBundle(**fields))
    return samples


def read_manifest(path) -> list:
    with open(f"{path}.manifest") as f:
        return [int(line) for line in f if line.strip()]
