"""Training variants: naive box training, DeepCut from boxes or from a
GrabCut pre-segmentation, and the fully supervised upper bound.

All variants share preprocessing, network topology and CRF settings; they
differ only in where the training targets come from and whether those
targets are refreshed between training rounds.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .crf import CrfParams, regularize
from .grabcut import GrabCutConfig, grabcut_segment
from .sampling import UNLABELED, PatchSampler, RegionSet, Volume, extract_patches, normalize

log = logging.getLogger(__name__)

VARIANTS = ("naive", "dc_bb", "dc_ps", "fully_supervised")


@dataclass
class Case:
    """One image of the training database; ``truth`` is optional."""
    ident: str
    volume: Volume
    regions: RegionSet
    truth: np.ndarray | None = None


@dataclass
class ExperimentConfig:
    variant: str = "dc_bb"
    total_epochs: int = 500
    epochs_per_iteration: int = 50
    train: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    topology: nn.Topology = field(default_factory=nn.Topology)
    crf: CrfParams = field(default_factory=CrfParams)
    grabcut: GrabCutConfig = field(default_factory=GrabCutConfig)
    augment_sigma: float = 0.1
    rng_seed: int = 0
    inference_stride: int = 1
    crf_on_box_only: bool = False
    pin_halo: bool = True
    exact_budget: int = 20_000

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant in ("dc_bb", "dc_ps"):
            if self.epochs_per_iteration < 1 or self.total_epochs % self.epochs_per_iteration:
                raise ValueError("total_epochs must be a multiple of epochs_per_iteration")

    @property
    def n_iterations(self) -> int:
        return self.total_epochs // self.epochs_per_iteration

    def train_config(self) -> nn.TrainConfig:
        return replace(self.train, rng_seed=self.rng_seed)


@dataclass
class IterationRecord:
    iteration: int
    dice: list[float]
    mean_loss: float
    relabel_fraction: float
    degenerate: list[str] = field(default_factory=list)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice)) if self.dice else float("nan")


@dataclass
class RunResult:
    params: nn.NetParams
    labels: list[np.ndarray]
    records: list[IterationRecord] = field(default_factory=list)
    regions: list[RegionSet] = field(default_factory=list)


def dice(a, b) -> float:
    """Overlap of the label-1 sets; 1.0 when both are empty."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"label maps differ in shape: {a.shape} vs {b.shape}")
    a, b = a == 1, b == 1
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / denom


def prepare(cases) -> list[Case]:
    """Normalise every volume to zero mean and unit std inside its boxes."""
    return [replace(c, volume=normalize(c.volume, c.regions)) for c in cases]


def _sampler(cases, regions, config: ExperimentConfig) -> PatchSampler:
    return PatchSampler([c.volume for c in cases], regions, config.topology.patch_shape,
                        sigma=config.augment_sigma)


def predict_probs(params: nn.NetParams, volume: Volume, mask, stride: int = 1) -> np.ndarray:
    """P(foreground) for every voxel of ``mask`` in ``argwhere`` order.

    With ``stride > 1`` only an in-plane lattice is classified and each voxel
    takes the value of its nearest lattice point.
    """
    coords = np.argwhere(mask)
    size = params.topology.patch_shape
    if stride <= 1:
        return nn.predict(params, extract_patches(volume, coords, size))[:, 1].astype(np.float64)
    _, ny, nx = volume.shape
    snapped = coords.copy()
    snapped[:, 1] = np.minimum(np.round(coords[:, 1] / stride).astype(int) * stride, ny - 1)
    snapped[:, 2] = np.minimum(np.round(coords[:, 2] / stride).astype(int) * stride, nx - 1)
    lattice, inverse = np.unique(snapped, axis=0, return_inverse=True)
    probs = nn.predict(params, extract_patches(volume, lattice, size))[:, 1]
    return probs[inverse.reshape(-1)].astype(np.float64)


def segment(params: nn.NetParams, case: Case, config: ExperimentConfig,
            classify_halo: bool = False, crf: CrfParams | None = None):
    """Classify B (optionally B and H), then regularise with the CRF.

    Halo voxels without a classifier output get the background unary when
    ``pin_halo`` is set. Returns the full-size label map and the marginals.
    """
    box, halo = case.regions.box_mask, case.regions.halo_mask
    classified = box | halo if classify_halo else box
    domain = box if config.crf_on_box_only else box | halo
    classified &= domain
    p_fg = np.zeros(case.volume.shape)
    p_fg[classified] = predict_probs(params, case.volume, classified, config.inference_stride)
    pinned = (domain & ~classified) if config.pin_halo else None
    if not config.pin_halo and np.any(domain & ~classified):
        extra = domain & ~classified
        p_fg[extra] = predict_probs(params, case.volume, extra, config.inference_stride)
    return regularize(case.volume, p_fg[domain], domain, crf or config.crf, pinned=pinned,
                      exact_budget=config.exact_budget)


def labels_from_regions(regions: RegionSet) -> np.ndarray:
    out = np.full(regions.shape, UNLABELED, dtype=np.uint8)
    out[regions.domain_mask] = 0
    out[regions.fg] = 1
    return out


def target_update(params: nn.NetParams, case: Case, config: ExperimentConfig):
    """New R_FG = CRF foreground inside B, R_BG = the rest of B; H unchanged.

    Returns ``(regions, degenerate, relabel_fraction)``; an empty foreground
    keeps the previous regions and flags the update as degenerate.
    """
    labels, _ = segment(params, case, config)
    box = case.regions.box_mask
    fg = (labels == 1) & box
    if not fg.any():
        log.warning("%s: target update produced an empty foreground; rolled back", case.ident)
        return case.regions, True, 0.0
    new = case.regions.with_targets(fg)
    changed = np.count_nonzero(new.fg[box] != case.regions.fg[box])
    return new, False, changed / max(int(box.sum()), 1)


def _mean_loss(params: nn.NetParams, epochs: int) -> float:
    tail = params.history[-epochs:] if epochs else []
    return float(np.mean([loss for _, loss in tail])) if tail else float("nan")


def _dice_list(cases, regions) -> list[float]:
    return [dice(r.fg.astype(np.uint8), c.truth) for c, r in zip(cases, regions) if c.truth is not None]


def _initial_params(config: ExperimentConfig, params=None) -> nn.NetParams:
    return params if params is not None else nn.build_network(config.topology, seed=config.rng_seed)


def run_naive(cases, config: ExperimentConfig, params=None, normalized: bool = False) -> RunResult:
    """Train once with B as foreground and H as background, then segment
    B and H with one CRF pass."""
    cases = list(cases) if normalized else prepare(cases)
    regions = [c.regions.with_targets(c.regions.box_mask) for c in cases]
    params = nn.train(_initial_params(config, params), _sampler(cases, regions, config),
                      config.train_config(), config.total_epochs)
    labels = [segment(params, replace(c, regions=r), config, classify_halo=True)[0]
              for c, r in zip(cases, regions)]
    return RunResult(params, labels, regions=regions)


def presegment(cases, config: ExperimentConfig, normalized: bool = False) -> list[RegionSet]:
    """GrabCut inside every box; the result becomes the initial R_FG/R_BG."""
    cases = list(cases) if normalized else prepare(cases)
    out = []
    for i, c in enumerate(cases):
        rng = np.random.default_rng([config.rng_seed, i])
        res = grabcut_segment(c.volume, c.regions, config.crf, config.grabcut, rng,
                              exact_budget=config.exact_budget)
        out.append(res.as_preseg(c.regions))
    return out


def run_deepcut(cases, config: ExperimentConfig, init: str = "bbox", params=None,
                initial_regions=None, normalized: bool = False) -> RunResult:
    """Alternate warm-started training with CRF-regularised target updates.

    ``init="bbox"`` starts from R_FG = B; ``init="preseg"`` starts from a
    GrabCut segmentation (or from ``initial_regions`` when supplied).
    """
    cases = list(cases) if normalized else prepare(cases)
    n_iter = config.total_epochs // config.epochs_per_iteration
    if n_iter < 1 or config.total_epochs % config.epochs_per_iteration:
        raise ValueError("total_epochs must be a positive multiple of epochs_per_iteration")
    if initial_regions is not None:
        regions = list(initial_regions)
    elif init == "preseg":
        regions = presegment(cases, config, normalized=True)
    elif init == "bbox":
        regions = [c.regions.with_targets(c.regions.box_mask) for c in cases]
    else:
        raise ValueError(f"unknown initialisation {init!r}")
    params = _initial_params(config, params)
    records = [IterationRecord(0, _dice_list(cases, regions), float("nan"), 0.0)]
    tcfg = config.train_config()
    for it in range(1, n_iter + 1):
        params = nn.train(params, _sampler(cases, regions, config), tcfg, config.epochs_per_iteration)
        updated, flags, fractions = [], [], []
        for c, r in zip(cases, regions):
            new, degenerate, frac = target_update(params, replace(c, regions=r), config)
            updated.append(new)
            fractions.append(frac)
            if degenerate:
                flags.append(c.ident)
        regions = updated
        records.append(IterationRecord(it, _dice_list(cases, regions),
                                       _mean_loss(params, config.epochs_per_iteration),
                                       float(np.mean(fractions)), flags))
    labels = [labels_from_regions(r) for r in regions]
    return RunResult(params, labels, records, regions)


def run_fully_supervised(cases, config: ExperimentConfig, params=None,
                         normalized: bool = False) -> RunResult:
    """Targets from ground truth (inside B) plus H as background; predict into B."""
    cases = list(cases) if normalized else prepare(cases)
    if any(c.truth is None for c in cases):
        raise ValueError("full supervision needs ground truth for every case")
    regions = [c.regions.with_targets(c.truth == 1) for c in cases]
    params = nn.train(_initial_params(config, params), _sampler(cases, regions, config),
                      config.train_config(), config.total_epochs)
    labels = [segment(params, replace(c, regions=r), config)[0] for c, r in zip(cases, regions)]
    return RunResult(params, labels, regions=regions)


def run_variant(cases, config: ExperimentConfig, normalized: bool = False) -> RunResult:
    config.validate()
    if config.variant == "naive":
        return run_naive(cases, config, normalized=normalized)
    if config.variant == "dc_bb":
        return run_deepcut(cases, config, "bbox", normalized=normalized)
    if config.variant == "dc_ps":
        return run_deepcut(cases, config, "preseg", normalized=normalized)
    return run_fully_supervised(cases, config, normalized=normalized)
