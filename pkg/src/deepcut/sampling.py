"""Volumes, bounding-box/halo geometry, patch extraction and class-balanced
patch sampling with augmentation.

Arrays are indexed ``[z, y, x]`` (x fastest in memory). Boxes are per-slice
inclusive rectangles ``(x0, y0, x1, y1)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKGROUND, FOREGROUND, UNLABELED = 0, 1, 2


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)  # (sx, sy, sz) in mm

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be 3D with non-empty axes, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite intensities")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def spacing_zyx(self) -> np.ndarray:
        return np.array(self.spacing[::-1], dtype=np.float64)


class Box(NamedTuple):
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)

    def contains(self, other: "Box") -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and self.x1 >= other.x1 and self.y1 >= other.y1)


def rasterize(boxes: dict[int, Box], shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for z, b in boxes.items():
        mask[z, b.y0:b.y1 + 1, b.x0:b.x1 + 1] = True
    return mask


@dataclass
class RegionSet:
    """Box region B, halo outer boxes, and the current target regions.

    ``fg`` and ``bg`` are voxel masks that partition (a subset of) B; the halo
    H is every voxel inside the outer boxes but outside B.
    """
    shape: tuple[int, int, int]
    boxes: dict[int, Box]
    halo_boxes: dict[int, Box] = field(default_factory=dict)
    fg: np.ndarray | None = None
    bg: np.ndarray | None = None

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.fg is None:
            self.fg = self.box_mask.copy()
        if self.bg is None:
            self.bg = np.zeros(self.shape, dtype=bool)

    @property
    def box_mask(self) -> np.ndarray:
        return rasterize(self.boxes, self.shape)

    @property
    def halo_mask(self) -> np.ndarray:
        return rasterize(self.halo_boxes, self.shape) & ~self.box_mask

    @property
    def domain_mask(self) -> np.ndarray:
        return self.box_mask | self.halo_mask

    def with_targets(self, fg, bg=None) -> "RegionSet":
        """Copy with new target masks; ``bg`` defaults to ``B \\ fg``."""
        box = self.box_mask
        fg = np.asarray(fg, dtype=bool) & box
        bg = box & ~fg if bg is None else np.asarray(bg, dtype=bool) & box & ~fg
        return RegionSet(self.shape, dict(self.boxes), dict(self.halo_boxes), fg, bg)

    def check(self):
        box = self.box_mask
        if np.any(self.fg & ~box) or np.any(self.bg & ~box):
            raise ValueError("target regions must lie inside the bounding boxes")
        if np.any(self.fg & self.bg):
            raise ValueError("foreground and background targets overlap")
        for z, b in self.boxes.items():
            if z in self.halo_boxes and not self.halo_boxes[z].contains(b):
                raise ValueError(f"halo box of slice {z} does not contain its bounding box")


def bbox_from_mask(mask, margin: int = 5) -> dict[int, Box]:
    """Per-slice tight foreground extent grown by ``margin`` and clamped to the slice."""
    mask = np.asarray(mask) == FOREGROUND
    if not mask.any():
        raise ValueError("mask has no foreground voxels")
    _, ny, nx = mask.shape
    boxes = {}
    for z in np.flatnonzero(mask.any(axis=(1, 2))):
        ys, xs = np.nonzero(mask[z])
        boxes[int(z)] = Box(max(int(xs.min()) - margin, 0), max(int(ys.min()) - margin, 0),
                            min(int(xs.max()) + margin, nx - 1), min(int(ys.max()) + margin, ny - 1))
    return boxes


def halo_from_bbox(boxes: dict[int, Box], shape, extent: int = 20) -> RegionSet:
    """Grow every box by ``extent`` (clamped); the ring outside B is the halo.

    Targets start at the naive assignment: all of B foreground.
    """
    _, ny, nx = shape
    halo = {z: Box(max(b.x0 - extent, 0), max(b.y0 - extent, 0),
                   min(b.x1 + extent, nx - 1), min(b.y1 + extent, ny - 1))
            for z, b in boxes.items()}
    return RegionSet(tuple(shape), dict(boxes), halo)


def normalize(volume: Volume, boxes) -> Volume:
    """Shift and scale the whole volume to zero mean, unit std inside B.

    ``boxes`` may be a RegionSet, a dict of boxes, or a boolean mask.
    """
    if isinstance(boxes, RegionSet):
        mask = boxes.box_mask
    elif isinstance(boxes, dict):
        mask = rasterize(boxes, volume.shape)
    else:
        mask = np.asarray(boxes, dtype=bool)
    values = volume.data[mask].astype(np.float64)
    if values.size == 0:
        raise ValueError("bounding box region is empty")
    mean, std = values.mean(), values.std()
    if not std > 0:
        raise ValueError("zero intensity variance inside the bounding box")
    return Volume(((volume.data - mean) / std).astype(np.float32), volume.spacing)


class PatchSample(NamedTuple):
    patch: np.ndarray
    target: int
    index: tuple[int, int, int]


def _padded(volume_data, size):
    pz, py, px = size
    return np.pad(volume_data, ((pz // 2, pz // 2), (py // 2, py // 2), (px // 2, px // 2)))


def extract_patch(volume: Volume, center, size=(3, 33, 33)) -> np.ndarray:
    """Window of shape ``size`` (pz, py, px) centred at ``center`` (z, y, x).

    Positions outside the volume are 0, the intensity mean after normalisation.
    """
    if any(s % 2 == 0 for s in size):
        raise ValueError("patch dimensions must be odd")
    if not all(0 <= c < n for c, n in zip(center, volume.shape)):
        raise ValueError(f"center {center} outside volume {volume.shape}")
    z, y, x = center
    padded = _padded(volume.data, size)
    return padded[z:z + size[0], y:y + size[1], x:x + size[2]].copy()


def extract_patches(volume: Volume, centers, size=(3, 33, 33)) -> np.ndarray:
    """Vectorised :func:`extract_patch` for an ``(n, 3)`` array of centres."""
    centers = np.asarray(centers, dtype=np.intp).reshape(-1, 3)
    view = sliding_window_view(_padded(volume.data, size), size)
    return view[centers[:, 0], centers[:, 1], centers[:, 2]]


def augment(sample: PatchSample, sigma: float, rng, flip: bool = True) -> PatchSample:
    """Add one N(0, sigma^2) offset to the patch and randomly flip it in-plane."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    patch = sample.patch + np.float32(rng.normal(0.0, sigma) if sigma > 0 else 0.0)
    if flip:
        if rng.random() < 0.5:
            patch = patch[:, ::-1, :]
        if rng.random() < 0.5:
            patch = patch[:, :, ::-1]
    return PatchSample(np.ascontiguousarray(patch, dtype=np.float32), sample.target, sample.index)


def augment_batch(patches: np.ndarray, sigma: float, rng, flip: bool = True) -> np.ndarray:
    """Batched augmentation: per-patch offsets and independent y/x flips."""
    n = len(patches)
    out = patches.astype(np.float32, copy=True)
    if sigma > 0:
        out += rng.normal(0.0, sigma, n).astype(np.float32)[:, None, None, None]
    if flip:
        flip_y = rng.random(n) < 0.5
        flip_x = rng.random(n) < 0.5
        out[flip_y] = out[flip_y][:, :, ::-1, :]
        out[flip_x] = out[flip_x][:, :, :, ::-1]
    return out


def class_regions(regions: RegionSet) -> tuple[np.ndarray, np.ndarray]:
    """Voxel masks that feed the two classes: R_FG, and R_BG plus the halo."""
    return regions.fg, regions.bg | regions.halo_mask


def sample_balanced(volume: Volume, regions: RegionSet, k: int, rng,
                    size=(3, 33, 33)) -> list[PatchSample]:
    """``k // 2`` foreground and ``k - k // 2`` background samples, drawn
    uniformly with replacement from R_FG and R_BG plus the halo."""
    return PatchSampler([volume], [regions], size, sigma=0.0, flip=False).samples(k, rng)


class PatchSampler:
    """Class-balanced patch source over a whole training database.

    Centres of each class are pooled across all images and drawn uniformly
    with replacement; ``sample`` returns the ``(patches, targets)`` pair the
    trainer consumes.
    """

    def __init__(self, volumes, regions, size=(3, 33, 33), sigma: float = 0.1, flip: bool = True):
        self.volumes = list(volumes)
        self.size = tuple(size)
        self.sigma = sigma
        self.flip = flip
        self._views = [sliding_window_view(_padded(v.data, self.size), self.size) for v in self.volumes]
        fg_idx, bg_idx = [], []
        for i, r in enumerate(regions):
            fg, bg = class_regions(r)
            for store, mask in ((fg_idx, fg), (bg_idx, bg)):
                zyx = np.argwhere(mask)
                store.append(np.column_stack([np.full(len(zyx), i), zyx]))
        self.fg = np.concatenate(fg_idx) if fg_idx else np.zeros((0, 4), np.intp)
        self.bg = np.concatenate(bg_idx) if bg_idx else np.zeros((0, 4), np.intp)
        if len(self.fg) == 0 or len(self.bg) == 0:
            raise ValueError(f"empty class region (foreground {len(self.fg)}, background "
                             f"{len(self.bg)} voxels); the target update degenerated")

    def draw(self, k: int, rng) -> tuple[np.ndarray, np.ndarray]:
        """Sampled ``(image, z, y, x)`` centres and their targets, foreground first."""
        n_fg = k // 2
        fg = self.fg[rng.integers(0, len(self.fg), n_fg)]
        bg = self.bg[rng.integers(0, len(self.bg), k - n_fg)]
        centers = np.concatenate([fg, bg])
        targets = np.concatenate([np.ones(n_fg, np.int64), np.zeros(k - n_fg, np.int64)])
        return centers, targets

    def gather(self, centers) -> np.ndarray:
        out = np.empty((len(centers),) + self.size, dtype=np.float32)
        for i, view in enumerate(self._views):
            sel = centers[:, 0] == i
            if sel.any():
                c = centers[sel]
                out[sel] = view[c[:, 1], c[:, 2], c[:, 3]]
        return out

    def sample(self, k: int, rng) -> tuple[np.ndarray, np.ndarray]:
        centers, targets = self.draw(k, rng)
        patches = augment_batch(self.gather(centers), self.sigma, rng, self.flip)
        return patches, targets

    def samples(self, k: int, rng) -> list[PatchSample]:
        centers, targets = self.draw(k, rng)
        patches = self.gather(centers)
        if self.sigma > 0 or self.flip:
            patches = augment_batch(patches, self.sigma, rng, self.flip)
        return [PatchSample(p, int(t), tuple(int(v) for v in c[1:]))
                for p, t, c in zip(patches, targets, centers)]
