"""Experiment configuration files and named presets.

Files are INI-style ``key = value`` lines under ``[section]`` headers. The
published parameter names are used verbatim as keys (``N_Epochs``,
``N_Mini-batch``, ``theta_alpha`` and so on); everything else is an
implementation knob with a lower-case name.
"""
from __future__ import annotations

import configparser
from dataclasses import replace

from .crf import CrfParams
from .driver import VARIANTS, ExperimentConfig
from .grabcut import GrabCutConfig
from .nn import Topology, TrainConfig

# desk-scale phantom setting: a small net, short schedule and CRF bandwidths
# sized for ~80 voxel wide images with unit-variance intensities
PHANTOM_TOPOLOGY = Topology((3, 15, 15), (6, 12), (3, 3), 32)
PHANTOM_CRF = CrfParams(1.0, 1.0, 3.0, 0.5, 1.0, 5)

PRESETS = {
    "brain": ExperimentConfig(
        total_epochs=500, epochs_per_iteration=50, train=TrainConfig(epochs=500),
        crf=CrfParams(5.0, 5.0, 10.0, 20.0, 1.0, 5), grabcut=GrabCutConfig(gamma=2.5)),
    "lungs": ExperimentConfig(
        total_epochs=250, epochs_per_iteration=50, train=TrainConfig(epochs=250),
        crf=CrfParams(5.0, 5.0, 10.0, 0.1, 0.1, 5), grabcut=GrabCutConfig(gamma=1.0)),
    "phantom": ExperimentConfig(
        total_epochs=50, epochs_per_iteration=10,
        train=TrainConfig(epochs=50, patches_per_epoch=10_000, minibatch_size=500, chunk_size=500),
        topology=PHANTOM_TOPOLOGY, crf=PHANTOM_CRF, grabcut=GrabCutConfig(gamma=1.0)),
}


def preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace("x", " ").replace(",", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case sensitive
    return cp


def crf_from_mapping(values, base: CrfParams | None = None) -> CrfParams:
    base = base or CrfParams()
    keys = {"omega_1": "omega1", "omega_2": "omega2", "theta_alpha": "theta_alpha",
            "theta_beta": "theta_beta", "theta_gamma": "theta_gamma"}
    kw = {attr: float(values[k]) for k, attr in keys.items() if k in values}
    if "N_Iterations" in values:
        kw["iterations"] = int(values["N_Iterations"])
    unknown = set(values) - set(keys) - {"N_Iterations"}
    if unknown:
        raise ValueError(f"unknown CRF keys: {sorted(unknown)}")
    return replace(base, **kw)


def apply_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Overlay the settings in ``text`` on ``base`` (defaults when omitted)."""
    cp = _parser()
    cp.read_string(text)
    cfg = base or ExperimentConfig()
    known = {"network", "crf", "grabcut", "experiment"}
    extra = set(cp.sections()) - known
    if extra:
        raise ValueError(f"unknown sections: {sorted(extra)}")

    if cp.has_section("network"):
        s = dict(cp["network"])
        topo, train, exp = {}, {}, {}
        if "patch_size" in s:
            px, py, pz = _ints(s.pop("patch_size"))
            topo["patch_shape"] = (pz, py, px)
        for key, attr in (("conv_filters", "conv_filters"), ("kernel_sizes", "kernel_sizes")):
            if key in s:
                topo[attr] = _ints(s.pop(key))
        if "dense_units" in s:
            topo["dense_units"] = int(s.pop("dense_units"))
        if "learning_rate" in s:
            train["learning_rate"] = float(s.pop("learning_rate"))
        if "N_Epochs" in s:
            exp["total_epochs"] = train["epochs"] = int(s.pop("N_Epochs"))
        if "N_Epochs_per_DeepCut_iteration" in s:
            exp["epochs_per_iteration"] = int(s.pop("N_Epochs_per_DeepCut_iteration"))
        if "N_Batch" in s:
            train["patches_per_epoch"] = int(float(s.pop("N_Batch")))
        if "N_Mini-batch" in s:
            train["minibatch_size"] = int(float(s.pop("N_Mini-batch")))
        for key, cast in (("dropout_rate", float), ("chunk_size", int), ("adagrad_epsilon", float)):
            if key in s:
                train[key] = cast(s.pop(key))
        if s:
            raise ValueError(f"unknown [network] keys: {sorted(s)}")
        cfg = replace(cfg, topology=replace(cfg.topology, **topo), train=replace(cfg.train, **train),
                      **exp)

    if cp.has_section("crf"):
        cfg = replace(cfg, crf=crf_from_mapping(dict(cp["crf"]), cfg.crf))

    if cp.has_section("grabcut"):
        s = dict(cp["grabcut"])
        kw = {}
        for key, cast in (("gamma", float), ("n_components", int), ("max_iters", int),
                          ("change_threshold", float)):
            if key in s:
                kw[key] = cast(s.pop(key))
        if s:
            raise ValueError(f"unknown [grabcut] keys: {sorted(s)}")
        cfg = replace(cfg, grabcut=replace(cfg.grabcut, **kw))

    if cp.has_section("experiment"):
        s = dict(cp["experiment"])
        kw = {}
        if "variant" in s:
            kw["variant"] = normalize_variant(s.pop("variant"))
        for key, cast in (("augment_sigma", float), ("rng_seed", int), ("inference_stride", int),
                          ("exact_budget", int), ("crf_on_box_only", _bool), ("pin_halo", _bool)):
            if key in s:
                kw[key] = cast(s.pop(key))
        if s:
            raise ValueError(f"unknown [experiment] keys: {sorted(s)}")
        cfg = replace(cfg, **kw)
    return cfg


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    with open(path) as fh:
        return apply_text(fh.read(), base)


def dump_config(cfg: ExperimentConfig) -> str:
    t, n, c, g = cfg.topology, cfg.train, cfg.crf, cfg.grabcut
    pz, py, px = t.patch_shape
    lines = [
        "[network]",
        f"patch_size = {px} x {py} x {pz}",
        f"learning_rate = {n.learning_rate!r}",
        f"N_Epochs = {cfg.total_epochs}",
        f"N_Epochs_per_DeepCut_iteration = {cfg.epochs_per_iteration}",
        f"N_Batch = {n.patches_per_epoch}",
        f"N_Mini-batch = {n.minibatch_size}",
        f"conv_filters = {' '.join(map(str, t.conv_filters))}",
        f"kernel_sizes = {' '.join(map(str, t.kernel_sizes))}",
        f"dense_units = {t.dense_units}",
        f"dropout_rate = {n.dropout_rate!r}",
        f"chunk_size = {n.chunk_size}",
        "",
        "[crf]",
        f"omega_1 = {c.omega1!r}",
        f"omega_2 = {c.omega2!r}",
        f"theta_alpha = {c.theta_alpha!r}",
        f"theta_beta = {c.theta_beta!r}",
        f"theta_gamma = {c.theta_gamma!r}",
        f"N_Iterations = {c.iterations}",
        "",
        "[grabcut]",
        f"gamma = {g.gamma!r}",
        f"n_components = {g.n_components}",
        f"max_iters = {g.max_iters}",
        f"change_threshold = {g.change_threshold!r}",
        "",
        "[experiment]",
        f"variant = {cfg.variant}",
        f"augment_sigma = {cfg.augment_sigma!r}",
        f"rng_seed = {cfg.rng_seed}",
        f"inference_stride = {cfg.inference_stride}",
        f"exact_budget = {cfg.exact_budget}",
        f"crf_on_box_only = {str(cfg.crf_on_box_only).lower()}",
        f"pin_halo = {str(cfg.pin_halo).lower()}",
    ]
    return "\n".join(lines) + "\n"


_VARIANT_ALIASES = {"dc-bb": "dc_bb", "dc-ps": "dc_ps", "fs": "fully_supervised",
                    "fully-supervised": "fully_supervised"}


def normalize_variant(name: str) -> str:
    name = _VARIANT_ALIASES.get(name.strip().lower(), name.strip().lower())
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}")
    return name


def phantom_from_text(text: str):
    """PhantomSpec from a ``[phantom]`` section; ``preset`` picks the starting point."""
    from .phantom import EASY, LUNG_LIKE, PhantomSpec

    cp = _parser()
    cp.read_string(text)
    s = dict(cp["phantom"]) if cp.has_section("phantom") else {}
    base = {"easy": EASY, "lungs": LUNG_LIKE}[s.pop("preset", "easy")]
    kw = {}
    for key in ("dims", "spacing", "radius_xy", "radius_z"):
        if key in s:
            cast = int if key == "dims" else float
            kw[key] = tuple(cast(v) for v in s.pop(key).replace(",", " ").split())
    for key in ("background_mean", "contrast", "noise_sigma", "ramp_amplitude", "clutter"):
        if key in s:
            kw[key] = float(s.pop(key))
    for key in ("n_subjects", "rng_seed", "box_margin", "halo_extent"):
        if key in s:
            kw[key] = int(s.pop(key))
    if "family" in s:
        kw["family"] = s.pop("family")
    if s:
        raise ValueError(f"unknown [phantom] keys: {sorted(s)}")
    spec = replace(base, **kw)
    spec.validate()
    return spec
