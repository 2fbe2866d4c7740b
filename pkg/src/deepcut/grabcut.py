"""Per-image GrabCut-style baseline on scalar intensities.

Foreground and background appearance are 1D Gaussian mixtures refitted to
the current labelling; the label update runs the dense CRF with the kernel
weights multiplied by ``gamma``. The result doubles as the pre-segmentation
that initialises the DC_PS variant.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .crf import CrfParams, regularize
from .sampling import FOREGROUND, RegionSet, Volume

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
_LOG_2PI = np.log(2 * np.pi)


@dataclass
class Gmm1D:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    loglik_history: list[float] = field(default_factory=list)
    prune_steps: list[int] = field(default_factory=list)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def component_logpdf(self, x) -> np.ndarray:
        """``(n, k)`` log of weighted component densities."""
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        const = np.log(self.weights) - 0.5 * (_LOG_2PI + np.log(self.variances))
        # built as (k, n) so reductions over components run along rows
        out = (x - self.means[:, None]) ** 2
        out *= (-0.5 / self.variances)[:, None]
        out += const[:, None]
        return out.T

    def loglik(self, x) -> np.ndarray:
        return _logsumexp(self.component_logpdf(x))


def _logsumexp(a):
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def gmm_nll(model: Gmm1D, intensity) -> np.ndarray | float:
    """``-log sum_k pi_k N(x; mu_k, var_k)``, elementwise."""
    out = -model.loglik(intensity)
    return float(out[0]) if np.ndim(intensity) == 0 else out.reshape(np.shape(intensity))


def _kmeanspp(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min((x[:, None] - np.asarray(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0:
            break
        centers.append(x[rng.choice(len(x), p=d2 / total)])
    return np.asarray(centers)


def _m_step(x, resp, floor):
    nk = resp.sum(axis=0)
    means = resp.T @ x / nk
    var = (resp * (x[:, None] - means) ** 2).sum(axis=0) / nk
    return nk / len(x), means, np.maximum(var, floor), var <= floor


def gmm_fit(intensities, n_components: int = 5, rng=None, init_labels=None,
            max_iter: int = 100, tol: float = 1e-6, variance_floor: float = VARIANCE_FLOOR,
            prune_after: int = 3) -> Gmm1D:
    """EM for a 1D Gaussian mixture.

    Seeding is k-means++ followed by a hard nearest-centre assignment unless
    ``init_labels`` (component index per sample) is given. Components that
    sit on the variance floor for ``prune_after`` consecutive steps, or lose
    all responsibility, are dropped and the weights renormalised. The mean
    log-likelihood after every step is kept in ``loglik_history``.
    """
    x = np.asarray(intensities, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("cannot fit a mixture to no samples")
    rng = np.random.default_rng(0) if rng is None else rng
    n_distinct = len(np.unique(x))
    k = max(1, min(n_components, n_distinct))
    if init_labels is None:
        centers = _kmeanspp(x, k, rng)
        labels = np.argmin((x[:, None] - centers[None, :]) ** 2, axis=1)
    else:
        labels = np.asarray(init_labels, dtype=np.int64).reshape(-1)
    used = np.unique(labels)
    resp = (labels[:, None] == used[None, :]).astype(np.float64)
    weights, means, variances, at_floor = _m_step(x, resp, variance_floor)
    model = Gmm1D(weights, means, variances)
    floor_count = at_floor.astype(int)
    prev = float(model.loglik(x).mean())
    model.loglik_history.append(prev)
    for step in range(1, max_iter + 1):
        logp = model.component_logpdf(x)
        resp = np.exp(logp - _logsumexp(logp)[:, None])
        weights, means, variances, at_floor = _m_step(x, resp, variance_floor)
        floor_count = np.where(at_floor, floor_count + 1, 0)
        keep = (weights > 0) & np.isfinite(means)
        if len(weights) > 1:
            keep &= floor_count < prune_after
            if not keep.any():
                keep[np.argmax(weights)] = True
        if not keep.all():
            weights, means, variances = weights[keep], means[keep], variances[keep]
            weights = weights / weights.sum()
            floor_count = floor_count[keep]
            model.prune_steps.append(step)
        model.weights, model.means, model.variances = weights, means, variances
        cur = float(model.loglik(x).mean())
        model.loglik_history.append(cur)
        pruned_now = bool(model.prune_steps) and model.prune_steps[-1] == step
        # a component on the floor is not settled until it is pruned or leaves it
        pending = len(weights) > 1 and bool(floor_count.any())
        if abs(cur - prev) < tol and not pruned_now and not pending:
            break
        prev = cur
    return model


@dataclass
class GrabCutConfig:
    gamma: float = 2.5
    n_components: int = 5
    max_iters: int = 10
    change_threshold: float = 1e-3  # fraction of box voxels changing label


GRABCUT_PRESETS = {"brain": GrabCutConfig(gamma=2.5), "lungs": GrabCutConfig(gamma=1.0)}


@dataclass
class GrabCutResult:
    labels: np.ndarray
    iterations: int
    degenerate: bool
    fg_model: Gmm1D | None
    bg_model: Gmm1D | None

    def as_preseg(self, regions: RegionSet) -> RegionSet:
        """Region set with R_FG/R_BG taken from this segmentation."""
        return regions.with_targets(self.labels == FOREGROUND)


def grabcut_segment(volume: Volume, regions: RegionSet, crf_params: CrfParams,
                    config: GrabCutConfig | None = None, rng=None,
                    exact_budget: int | None = None) -> GrabCutResult:
    """Iterate GMM fitting and CRF relabelling inside B; H stays background."""
    config = config or GrabCutConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    box, halo = regions.box_mask, regions.halo_mask
    domain = box | halo
    params = crf_params.scaled(config.gamma)
    kwargs = {} if exact_budget is None else {"exact_budget": exact_budget}
    values = volume.data[domain].astype(np.float64)
    fg = box.copy()
    labels = np.where(domain, 0, 2).astype(np.uint8)
    labels[fg] = 1
    n_box = int(box.sum())
    fg_model = bg_model = None
    iteration = 0
    degenerate = False
    for iteration in range(1, config.max_iters + 1):
        fg_d = fg[domain]
        fg_model = gmm_fit(values[fg_d], config.n_components, rng)
        bg_model = gmm_fit(values[~fg_d], config.n_components, rng)
        unaries = np.column_stack([gmm_nll(bg_model, values), gmm_nll(fg_model, values)])
        new_labels, _ = regularize(volume, None, domain, params, pinned=halo, unaries=unaries, **kwargs)
        new_fg = (new_labels == 1) & box
        if not new_fg.any():
            log.warning("grabcut foreground collapsed at iteration %d; keeping previous labelling",
                        iteration)
            degenerate = True
            break
        changed = int(np.count_nonzero(new_fg[box] != fg[box]))
        fg = new_fg
        labels = np.where(domain, 0, 2).astype(np.uint8)
        labels[fg] = 1
        if changed < config.change_threshold * n_box:
            break
    return GrabCutResult(labels, iteration, degenerate, fg_model, bg_model)
