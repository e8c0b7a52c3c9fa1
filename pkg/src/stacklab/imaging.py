"""Orthographic foreground masks and displacement heat-maps.

The camera looks along -y at the x-z plane.  Pixel (row, col) has its
center at x = x0 + (col + 0.5) * s and z = z1 - (row + 0.5) * s, so row 0
is the top of the image.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Rect2, cuboid_corners

ARCHIVE_RES = 256
TRAIN_RES = 64
FRAME_MARGIN = 0.1


@dataclass(frozen=True)
class Camera:
    frame: Rect2  # (x, z) extent of the image plane
    resolution: tuple  # (width, height)

    @property
    def pixel_size(self) -> tuple:
        w, h = self.resolution
        return ((self.frame.max[0] - self.frame.min[0]) / w,
                (self.frame.max[1] - self.frame.min[1]) / h)

    def pixel_centers(self):
        w, h = self.resolution
        sx, sz = self.pixel_size
        xs = self.frame.min[0] + (np.arange(w) + 0.5) * sx
        zs = self.frame.max[1] - (np.arange(h) + 0.5) * sz
        return xs, zs

    def world_to_pixel(self, x, z):
        """Continuous (col, row) coordinates of a world point."""
        sx, sz = self.pixel_size
        return (x - self.frame.min[0]) / sx, (self.frame.max[1] - z) / sz

    def pixel_to_world(self, col, row):
        """World (x, z) of a continuous pixel coordinate (pixel corners at integers)."""
        sx, sz = self.pixel_size
        return self.frame.min[0] + col * sx, self.frame.max[1] - row * sz


@dataclass(frozen=True)
class Mask:
    bits: np.ndarray  # (height, width) uint8 in {0, 1}

    def __post_init__(self):
        b = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if b.ndim != 2:
            raise ValueError("mask must be 2-D")
        object.__setattr__(self, "bits", b)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def __eq__(self, other):
        return isinstance(other, Mask) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes())


def projected_aabb(scene_blocks) -> Rect2:
    pts = np.concatenate([cuboid_corners(c, p) for c, p in scene_blocks])
    return Rect2((pts[:, 0].min(), pts[:, 2].min()), (pts[:, 0].max(), pts[:, 2].max()))


def _blocks(scene):
    return scene.blocks if hasattr(scene, "blocks") else list(scene)


def frame_camera(scene, resolution=(ARCHIVE_RES, ARCHIVE_RES), margin_fraction: float = FRAME_MARGIN) -> Camera:
    """Square frame centered on the tower's x-z bounding box, inflated on every side."""
    blocks = _blocks(scene)
    if not blocks:
        raise ValueError("cannot frame an empty scene")
    box = projected_aabb(blocks)
    w, h = resolution
    extent = max(box.max[0] - box.min[0], box.max[1] - box.min[1]) * (1.0 + 2.0 * margin_fraction)
    half_x = 0.5 * extent * max(1.0, w / h)
    half_z = 0.5 * extent * max(1.0, h / w)
    cx, cz = box.center
    return Camera(Rect2((cx - half_x, cz - half_z), (cx + half_x, cz + half_z)), (int(w), int(h)))


def convex_hull_2d(points) -> np.ndarray:
    """Counter-clockwise hull (monotone chain), collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float))))
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _silhouette(shape, pose, camera: Camera):
    """Boolean region of pixels whose centers fall inside the block's projection."""
    corners = cuboid_corners(shape, pose)
    cx, cz = camera.frame.center
    # work relative to the frame center so rigid translations cancel exactly
    hull = convex_hull_2d(np.stack([corners[:, 0] - cx, corners[:, 2] - cz], axis=1))
    xs, zs = camera.pixel_centers()
    xs = xs - cx
    zs = zs - cz
    w, h = camera.resolution
    out = np.zeros((h, w), dtype=bool)
    if len(hull) < 3:
        return out
    cols = np.nonzero((xs >= hull[:, 0].min()) & (xs <= hull[:, 0].max()))[0]
    rows = np.nonzero((zs >= hull[:, 1].min()) & (zs <= hull[:, 1].max()))[0]
    if cols.size == 0 or rows.size == 0:
        return out
    gx, gz = np.meshgrid(xs[cols], zs[rows])
    inside = np.ones(gx.shape, dtype=bool)
    for k in range(len(hull)):
        ax, az = hull[k]
        bx, bz = hull[(k + 1) % len(hull)]
        inside &= (bx - ax) * (gz - az) - (bz - az) * (gx - ax) >= 0.0
    out[np.ix_(rows, cols)] = inside
    return out


def render_mask(scene, camera: Camera) -> Mask:
    bits = np.zeros((camera.resolution[1], camera.resolution[0]), dtype=bool)
    for shape, pose in _blocks(scene):
        bits |= _silhouette(shape, pose, camera)
    return Mask(bits.astype(np.uint8))


def render_heatmap(scene, camera: Camera, per_block_scalars) -> np.ndarray:
    """Each block's silhouette filled with its scalar (max where blocks overlap), scaled to [0, 1]."""
    blocks = _blocks(scene)
    vals = np.asarray(per_block_scalars, dtype=float)
    if vals.shape != (len(blocks),):
        raise ValueError("need exactly one scalar per block")
    vals = np.where(np.isfinite(vals), vals, np.nanmax(np.where(np.isfinite(vals), vals, 0.0), initial=0.0) + 1.0)
    img = np.zeros((camera.resolution[1], camera.resolution[0]))
    for (shape, pose), v in zip(blocks, vals):
        region = _silhouette(shape, pose, camera)
        img[region] = np.maximum(img[region], v)
    top = img.max()
    return img / top if top > 0 else img


def downsample_majority(mask: Mask, factor: int = 4) -> Mask:
    """Block-wise majority vote; a tie (half the votes) counts as foreground."""
    h, w = mask.bits.shape
    if h % factor or w % factor:
        raise ValueError("mask size must be divisible by the factor")
    votes = mask.bits.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3), dtype=np.int32)
    return Mask((2 * votes >= factor * factor).astype(np.uint8))


def upsample_nearest(mask: Mask, factor: int = 4) -> Mask:
    return Mask(np.repeat(np.repeat(mask.bits, factor, axis=0), factor, axis=1))


def training_mask(scene, resolution: int = TRAIN_RES, archive: int = ARCHIVE_RES) -> Mask:
    """Archive-resolution render reduced to the training resolution."""
    cam = frame_camera(scene, (archive, archive))
    return downsample_majority(render_mask(scene, cam), archive // resolution)


# -- PBM/PGM files ---------------------------------------------------------

def write_mask_pgm(path, mask: Mask) -> None:
    """Binary P4 file; bit 1 (black in most viewers) marks foreground, rows padded to bytes."""
    packed = np.packbits(mask.bits.astype(bool), axis=1)
    Path(path).write_bytes(f"P4\n{mask.width} {mask.height}\n".encode("ascii") + packed.tobytes())


def _read_header(data: bytes, fields: int):
    tokens, pos = [], 0
    while len(tokens) < fields:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    return tokens, pos + 1


def read_mask_pgm(path) -> Mask:
    data = Path(path).read_bytes()
    (magic, w, h), pos = _read_header(data, 3)
    if magic != "P4":
        raise ValueError(f"{path}: expected P4, found {magic}")
    w, h = int(w), int(h)
    row_bytes = (w + 7) // 8
    raw = np.frombuffer(data, dtype=np.uint8, count=row_bytes * h, offset=pos).reshape(h, row_bytes)
    return Mask(np.unpackbits(raw, axis=1)[:, :w])


def write_gray_pgm(path, image) -> None:
    """8-bit P5 file of an image in [0, 1]."""
    img = np.clip(np.rint(np.asarray(image, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_gray_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _read_header(data, 4)
    if magic != "P5":
        raise ValueError(f"{path}: expected P5, found {magic}")
    w, h, maxval = int(w), int(h), int(maxval)
    img = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return img.astype(float) / maxval
