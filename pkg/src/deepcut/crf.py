"""Fully connected binary CRF with a Potts pairwise term.

The pairwise weight between voxels i and j is

    g(i, j) = w1 * exp(-|p_i - p_j|^2 / (2 ta^2) - |I_i - I_j|^2 / (2 tb^2))
            + w2 * exp(-|p_i - p_j|^2 / (2 tg^2))

and it is paid whenever the two labels differ. Marginals are found with
simultaneous mean-field updates. Messages are summed exactly over all pairs
for small domains; larger grid domains keep only pairs within
``3 * max(ta, tg)`` of each other.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .sampling import UNLABELED, Volume


@dataclass(frozen=True)
class CrfParams:
    omega1: float = 5.0
    omega2: float = 5.0
    theta_alpha: float = 10.0
    theta_beta: float = 20.0
    theta_gamma: float = 1.0
    iterations: int = 5

    def __post_init__(self):
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ValueError("kernel bandwidths must be positive")
        if self.omega1 < 0 or self.omega2 < 0:
            raise ValueError("kernel weights must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")

    def scaled(self, factor: float) -> "CrfParams":
        return replace(self, omega1=self.omega1 * factor, omega2=self.omega2 * factor)

    @property
    def radius(self) -> float:
        return 3.0 * max(self.theta_alpha, self.theta_gamma)


PRESETS = {
    "brain": CrfParams(5.0, 5.0, 10.0, 20.0, 1.0, 5),
    "lungs": CrfParams(5.0, 5.0, 10.0, 0.1, 0.1, 5),
}

PROB_FLOOR = 1e-6
EXACT_VOXEL_BUDGET = 20_000


@dataclass
class Features:
    """Integer grid coordinates ``(z, y, x)``, physical spacing and intensities."""
    coords: np.ndarray
    intensities: np.ndarray
    spacing_zyx: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.intensities = np.asarray(self.intensities, dtype=np.float64).reshape(-1)
        if len(self.coords) != len(self.intensities):
            raise ValueError("one intensity per coordinate is required")
        self.spacing_zyx = tuple(float(s) for s in self.spacing_zyx)

    def __len__(self):
        return len(self.coords)

    @property
    def positions(self) -> np.ndarray:
        return self.coords * np.asarray(self.spacing_zyx)

    @classmethod
    def from_volume(cls, volume: Volume, mask) -> "Features":
        coords = np.argwhere(mask)
        return cls(coords, volume.data[mask], tuple(volume.spacing_zyx))


def unary_from_probs(probs, floor: float = PROB_FLOOR) -> np.ndarray:
    """Negative log-probabilities, with probabilities clamped below at ``floor``."""
    probs = np.asarray(probs, dtype=np.float64)
    return -np.log(np.maximum(probs, floor))


def kernel(pi, pj, ii, ij, params: CrfParams) -> float:
    """Pairwise weight for two feature points (positions, intensities)."""
    d2 = float(np.sum((np.asarray(pi, float) - np.asarray(pj, float)) ** 2))
    di2 = float(np.sum((np.asarray(ii, float) - np.asarray(ij, float)) ** 2))
    return (params.omega1 * np.exp(-d2 / (2 * params.theta_alpha ** 2) - di2 / (2 * params.theta_beta ** 2))
            + params.omega2 * np.exp(-d2 / (2 * params.theta_gamma ** 2)))


def kernel_matrix(features: Features, params: CrfParams, rows=None) -> np.ndarray:
    """Dense ``g(i, j)`` for the given rows against all points; diagonal kept."""
    pos = features.positions
    inten = features.intensities
    rows = slice(None) if rows is None else rows
    d2 = ((pos[rows, None, :] - pos[None, :, :]) ** 2).sum(-1)
    di2 = (inten[rows, None] - inten[None, :]) ** 2
    return (params.omega1 * np.exp(-d2 / (2 * params.theta_alpha ** 2) - di2 / (2 * params.theta_beta ** 2))
            + params.omega2 * np.exp(-d2 / (2 * params.theta_gamma ** 2)))


def energy(labels, unaries, features: Features, params: CrfParams) -> float:
    """Unary sum plus ``g(i, j)`` over every unordered pair with differing labels."""
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    unaries = np.asarray(unaries, dtype=np.float64)
    total = float(unaries[np.arange(len(labels)), labels].sum())
    fg = np.flatnonzero(labels == 1)
    bg = np.flatnonzero(labels == 0)
    if len(fg) and len(bg):
        pos, inten = features.positions, features.intensities
        for start in range(0, len(fg), 1024):
            rows = fg[start:start + 1024]
            d2 = ((pos[rows, None, :] - pos[None, bg, :]) ** 2).sum(-1)
            di2 = (inten[rows, None] - inten[None, bg]) ** 2
            g = (params.omega1 * np.exp(-d2 / (2 * params.theta_alpha ** 2) - di2 / (2 * params.theta_beta ** 2))
                 + params.omega2 * np.exp(-d2 / (2 * params.theta_gamma ** 2)))
            total += float(g.sum())
    return total


def _softmax_neg(u):
    z = -u
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class _ExactMessages:
    """All-pairs sums ``sum_{j != i} g(i, j) q_j``, kernel cached when it fits."""

    def __init__(self, features: Features, params: CrfParams, cache_limit: int = 16_000_000,
                 chunk: int = 512):
        self.features, self.params, self.chunk = features, params, chunk
        n = len(features)
        self.matrix = None
        if n * n <= cache_limit:
            self.matrix = kernel_matrix(features, params)
            np.fill_diagonal(self.matrix, 0.0)
        self.totals = self(np.ones(n))

    def __call__(self, q):
        if self.matrix is not None:
            return self.matrix @ q
        n = len(q)
        out = np.empty(n)
        for start in range(0, n, self.chunk):
            rows = np.arange(start, min(start + self.chunk, n))
            g = kernel_matrix(self.features, self.params, rows)
            g[np.arange(len(rows)), rows] = 0.0
            out[rows] = g @ q
        return out


class _GridMessages:
    """Neighbourhood-truncated sums over a regular grid, via shifted arrays.

    Weights and sums are float32.
    """

    def __init__(self, features: Features, params: CrfParams):
        coords = features.coords
        lo = coords.min(axis=0)
        shape = tuple(int(v) for v in coords.max(axis=0) - lo + 1)
        sp = features.spacing_zyx
        reach = [min(int(np.floor(params.radius / s + 1e-9)), n - 1) for s, n in zip(sp, shape)]
        self.idx = tuple((coords - lo + np.asarray(reach)).T)
        self.padded_shape = tuple(n + 2 * r for n, r in zip(shape, reach))
        self.inner = tuple(slice(r, r + n) for r, n in zip(reach, shape))
        inside = np.zeros(self.padded_shape, dtype=bool)
        inside[self.idx] = True
        intensity = np.zeros(self.padded_shape, dtype=np.float32)
        intensity[self.idx] = features.intensities
        centre_int = intensity[self.inner]
        centre_in = inside[self.inner]
        r2 = params.radius ** 2 + 1e-9
        beta = np.float32(-0.5 / params.theta_beta ** 2)
        self.offsets, self.weights = [], []
        # g is symmetric, so only offsets in the positive half-space are
        # stored; each weight array serves both directions of the pair
        for off in itertools.product(*(range(-r, r + 1) for r in reach)):
            d2 = sum((o * s) ** 2 for o, s in zip(off, sp))
            if d2 > r2 or off <= (0, 0, 0):
                continue
            sl = tuple(slice(r + o, r + o + n) for r, o, n in zip(reach, off, shape))
            appearance = np.float32(params.omega1 * np.exp(-d2 / (2 * params.theta_alpha ** 2)))
            smooth = np.float32(params.omega2 * np.exp(-d2 / (2 * params.theta_gamma ** 2)))
            w = np.subtract(centre_int, intensity[sl])
            np.square(w, out=w)
            w *= beta
            np.exp(w, out=w)
            w *= appearance
            w += smooth
            w *= inside[sl] & centre_in
            self.offsets.append(sl)
            self.weights.append(w)
        self.totals = self(np.ones(len(coords)))

    def __call__(self, q):
        grid = np.zeros(self.padded_shape, dtype=np.float32)
        grid[self.idx] = q
        full = np.zeros(self.padded_shape, dtype=np.float32)
        acc = full[self.inner]
        tmp = np.empty(acc.shape, dtype=np.float32)
        centre = grid[self.inner]
        for sl, w in zip(self.offsets, self.weights):
            np.multiply(w, grid[sl], out=tmp)
            acc += tmp
            np.multiply(w, centre, out=tmp)
            full[sl] += tmp
        return full[self.idx].astype(np.float64)


def message_operator(features: Features, params: CrfParams, exact_budget: int = EXACT_VOXEL_BUDGET):
    if len(features) <= exact_budget:
        return _ExactMessages(features, params)
    return _GridMessages(features, params)


def mean_field_infer(unaries, features: Features, params: CrfParams,
                     exact_budget: int = EXACT_VOXEL_BUDGET, return_history: bool = False):
    """Mean-field marginals ``Q`` of shape ``(n, 2)``.

    Q starts at ``softmax(-unaries)``; every iteration updates all voxels at
    once from the previous Q. With ``return_history`` the list of Q after
    initialisation and after each iteration is returned as well.
    """
    unaries = np.asarray(unaries, dtype=np.float64)
    if unaries.ndim != 2 or unaries.shape[1] != 2 or len(unaries) != len(features):
        raise ValueError("unaries must be (n, 2) with one row per feature point")
    if len(unaries) == 0:
        raise ValueError("empty inference domain")
    q = _softmax_neg(unaries)
    history = [q]
    if params.iterations and (params.omega1 > 0 or params.omega2 > 0):
        messages = message_operator(features, params, exact_budget)
        for _ in range(params.iterations):
            s1 = messages(q[:, 1])
            s0 = messages.totals - s1
            # Potts: label l pays for the neighbours' mass on the other label
            q = _softmax_neg(unaries + np.column_stack([s1, s0]))
            history.append(q)
    else:
        history += [q] * params.iterations
    return (q, history) if return_history else q


def map_labeling(marginals) -> np.ndarray:
    """Per-voxel argmax; exact ties go to background."""
    q = np.asarray(marginals)
    return (q[:, 1] > q[:, 0]).astype(np.uint8)


def regularize(volume: Volume, probs_fg, domain, params: CrfParams, pinned=None,
               exact_budget: int = EXACT_VOXEL_BUDGET, unaries=None):
    """CRF over the voxels of ``domain`` in a volume.

    ``probs_fg`` holds P(foreground) for the domain voxels (in ``argwhere``
    order) unless ``unaries`` are given directly. Voxels in ``pinned`` get the
    most confident background unary. Returns a full-size label map (2 outside
    the domain) and the marginals.
    """
    domain = np.asarray(domain, dtype=bool)
    feats = Features.from_volume(volume, domain)
    if unaries is None:
        p1 = np.asarray(probs_fg, dtype=np.float64).reshape(-1)
        unaries = unary_from_probs(np.column_stack([1.0 - p1, p1]))
    else:
        unaries = np.array(unaries, dtype=np.float64)
    if pinned is not None:
        pin = np.asarray(pinned, dtype=bool)[domain]
        unaries[pin] = unary_from_probs([[1.0, 0.0]])[0]
    q = mean_field_infer(unaries, feats, params, exact_budget)
    labels = np.full(domain.shape, UNLABELED, dtype=np.uint8)
    labels[domain] = map_labeling(q)
    return labels, q

