"""Synthetic phantom corpora with known ground truth.

Each subject is a thick-slice volume holding one object (ellipsoid, a
two-lobed lung-like shape, or a perturbed blob) over a noisy background,
multiplied by a smooth intensity ramp that mimics residual bias. Boxes and
halos are built from the ground truth the same way annotations are.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sampling import RegionSet, Volume, bbox_from_mask, halo_from_bbox

FAMILIES = ("ellipsoid", "two_lobe", "blob")


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (80, 80, 7)  # (nx, ny, nz)
    spacing: tuple[float, float, float] = (1.0, 1.0, 2.0)
    family: str = "ellipsoid"
    background_mean: float = 0.0
    contrast: float = 2.0
    noise_sigma: float = 0.1
    ramp_amplitude: float = 0.1
    clutter: float = 0.0
    radius_xy: tuple[float, float] = (10.0, 14.0)
    radius_z: tuple[float, float] = (2.2, 2.8)
    n_subjects: int = 20
    rng_seed: int = 0
    box_margin: int = 5
    halo_extent: int = 20

    @property
    def object_mean(self) -> float:
        return self.background_mean + self.contrast

    def validate(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}")
        nx, ny, nz = self.dims
        need = 2 * (self.radius_xy[1] + self.box_margin + self.halo_extent) + 1
        if min(nx, ny) < need:
            raise ValueError(f"in-plane size {nx}x{ny} cannot hold the object plus box and halo "
                             f"({need:.0f} voxels needed)")
        if nz < 2 * self.radius_z[1] + 1:
            raise ValueError(f"{nz} slices cannot hold an object of z-radius {self.radius_z[1]}")
        if self.n_subjects < 1:
            raise ValueError("need at least one subject")


EASY = PhantomSpec()
LUNG_LIKE = PhantomSpec(family="two_lobe", contrast=1.0, noise_sigma=0.3, clutter=0.5)


@dataclass
class Subject:
    ident: str
    volume: Volume
    truth: np.ndarray
    regions: RegionSet


def _grid(dims):
    nx, ny, nz = dims
    return np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")


def _shape_mask(spec: PhantomSpec, rng) -> np.ndarray:
    nx, ny, nz = spec.dims
    z, y, x = _grid(spec.dims)
    rmax = spec.radius_xy[1]
    slack = (min(nx, ny) - 1) / 2 - (rmax + spec.box_margin + spec.halo_extent)
    cx = (nx - 1) / 2 + rng.uniform(-slack, slack)
    cy = (ny - 1) / 2 + rng.uniform(-slack, slack)
    cz = (nz - 1) / 2
    rx, ry = rng.uniform(*spec.radius_xy, size=2)
    rz = rng.uniform(*spec.radius_z)
    if spec.family == "ellipsoid":
        r = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2
        return r <= 1.0
    if spec.family == "two_lobe":
        gap = rx * 0.15
        lx = rx * 0.45
        left = ((x - (cx - gap - lx)) / lx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2
        right = ((x - (cx + gap + lx)) / lx) ** 2 + ((y - cy) / (0.85 * ry)) ** 2 + ((z - cz) / rz) ** 2
        return (left <= 1.0) | (right <= 1.0)
    # perturbed blob: radius modulated by a few low-order harmonics of the angle
    theta = np.arctan2((y - cy) / ry, (x - cx) / rx)
    mod = 1.0
    for order in (2, 3, 5):
        mod = mod + rng.uniform(0.0, 0.12) * np.cos(order * theta + rng.uniform(0, 2 * np.pi))
    r = np.sqrt(((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2) / mod
    return r ** 2 + ((z - cz) / rz) ** 2 <= 1.0 / 1.2


def _smooth_field(dims, rng) -> np.ndarray:
    """Low-frequency field in [-1, 1]: a random plane plus one slow cosine."""
    nx, ny, nz = dims
    z, y, x = _grid(dims)
    u, v = x / max(nx - 1, 1) - 0.5, y / max(ny - 1, 1) - 0.5
    a, b = rng.normal(size=2)
    f = a * u + b * v + 0.5 * np.cos(2 * np.pi * (u * rng.uniform(0.3, 1) + v * rng.uniform(0.3, 1))
                                     + rng.uniform(0, 2 * np.pi))
    return f / max(np.abs(f).max(), 1e-12)


def make_subject(spec: PhantomSpec, rng, ident: str = "s000") -> Subject:
    mask = _shape_mask(spec, rng)
    if not mask.any():
        raise ValueError("shape rasterised to an empty mask")
    img = np.where(mask, spec.object_mean, spec.background_mean).astype(np.float64)
    if spec.clutter:
        img = img + np.where(mask, 0.0, spec.clutter * _smooth_field(spec.dims, rng))
    if spec.noise_sigma:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    if spec.ramp_amplitude:
        img = img * (1.0 + spec.ramp_amplitude * _smooth_field(spec.dims, rng))
    truth = mask.astype(np.uint8)
    boxes = bbox_from_mask(truth, spec.box_margin)
    regions = halo_from_bbox(boxes, truth.shape, spec.halo_extent)
    return Subject(ident, Volume(img.astype(np.float32), spec.spacing), truth, regions)


def generate_corpus(spec: PhantomSpec) -> list[Subject]:
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    return [make_subject(spec, rng, f"s{i:03d}") for i in range(spec.n_subjects)]
