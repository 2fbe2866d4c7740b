"""Cross-validated comparison of the segmentation variants on a corpus,
Dice bookkeeping and the text report."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import driver
from .crf import CrfParams, regularize
from .driver import Case, ExperimentConfig, dice, prepare
from .grabcut import grabcut_segment

log = logging.getLogger(__name__)

# column order mirrors the published comparison tables
VARIANT_ORDER = ("bb", "gc", "naive", "dc_bb", "dc_ps", "fully_supervised")
VARIANT_TITLES = {"bb": "BB", "gc": "GC", "naive": "CNN_naive", "dc_bb": "DC_BB",
                  "dc_ps": "DC_PS", "fully_supervised": "CNN_FS"}


def kfold_split(n_subjects: int, k: int, seed: int = 0) -> np.ndarray:
    """Fold index per subject; a seeded random partition with sizes differing by at most one."""
    if k < 1 or n_subjects < k:
        raise ValueError(f"cannot split {n_subjects} subjects into {k} folds")
    order = np.random.default_rng(seed).permutation(n_subjects)
    folds = np.empty(n_subjects, dtype=np.int64)
    folds[order] = np.arange(n_subjects) % k
    return folds


@dataclass
class MetricsTable:
    rows: list[tuple[str, str, float, int]] = field(default_factory=list)

    def add(self, subject: str, variant: str, value: float, fold: int):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"Dice {value} outside [0, 1]")
        self.rows.append((subject, variant, float(value), int(fold)))

    def variants(self) -> list[str]:
        seen = {r[1] for r in self.rows}
        known = [v for v in VARIANT_ORDER if v in seen]
        return known + sorted(seen - set(known))

    def values(self, variant: str) -> np.ndarray:
        return np.array([r[2] for r in self.rows if r[1] == variant])

    def aggregate(self) -> dict[str, tuple[float, float]]:
        """Mean and population std of Dice per variant, recomputed from the rows."""
        out = {}
        for v in self.variants():
            vals = self.values(v)
            out[v] = (float(vals.mean()), float(vals.std()))
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject", "variant", "dice", "fold"])
            for subject, variant, value, fold in self.rows:
                w.writerow([subject, variant, repr(value), fold])

    @classmethod
    def from_csv(cls, path) -> "MetricsTable":
        table = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                table.add(row["subject"], row["variant"], float(row["dice"]), int(row["fold"]))
        return table

    def report(self) -> str:
        """Markdown table of mean/std Dice in percent, then variants ranked by mean."""
        agg = self.aggregate()
        names = self.variants()
        head = "| | " + " | ".join(VARIANT_TITLES.get(v, v) for v in names) + " |"
        rule = "|---|" + "---|" * len(names)
        mean = "| mean | " + " | ".join(f"{100 * agg[v][0]:.1f}" for v in names) + " |"
        std = "| std. | " + " | ".join(f"{100 * agg[v][1]:.1f}" for v in names) + " |"
        ranked = sorted(names, key=lambda v: -agg[v][0])
        lines = ["All measurements are reported as DSC [%].", "", head, rule, mean, std, "",
                 "Ranking by mean DSC:"]
        lines += [f"{i + 1}. {VARIANT_TITLES.get(v, v)} ({100 * agg[v][0]:.1f})"
                  for i, v in enumerate(ranked)]
        return "\n".join(lines) + "\n"


def evaluate_variant(variant: str, train_cases, test_cases, config: ExperimentConfig,
                     transductive: bool = False) -> tuple[list[np.ndarray], driver.RunResult | None]:
    """Label maps for ``test_cases``.

    Learning variants train on ``train_cases``; in transductive mode the test
    cases are the training cases and the driver's own labelling is returned.
    """
    if variant == "bb":
        return [c.regions.box_mask.astype(np.uint8) for c in test_cases], None
    if variant == "gc":
        out = []
        for i, c in enumerate(test_cases):
            rng = np.random.default_rng([config.rng_seed, i])
            out.append(grabcut_segment(c.volume, c.regions, config.crf, config.grabcut, rng,
                                       exact_budget=config.exact_budget).labels)
        return out, None
    result = driver.run_variant(train_cases, replace(config, variant=variant), normalized=True)
    if transductive:
        return result.labels, result
    classify_halo = variant == "naive"
    labels = [driver.segment(result.params, c, config, classify_halo=classify_halo)[0]
              for c in test_cases]
    return labels, result


def run_experiment(cases, variants, folds: int, config: ExperimentConfig, split_seed: int = 0,
                   csv_path=None, results: dict | None = None) -> MetricsTable:
    """Cross-validate every variant over the same fold assignment.

    ``folds == 1`` evaluates each variant on the database it was trained on
    (the weakly supervised setting, where the goal is labelling the database
    itself). The CSV, when requested, is rewritten after every fold so a
    failure leaves the finished folds on disk. Driver results are collected
    into ``results`` keyed by ``(variant, fold)`` when a dict is passed.
    """
    cases = prepare(cases)
    table = MetricsTable()
    if folds == 1:
        assignment = np.zeros(len(cases), dtype=np.int64)
    else:
        assignment = kfold_split(len(cases), folds, split_seed)
    for fold in range(folds):
        test = [c for c, f in zip(cases, assignment) if f == fold]
        train = test if folds == 1 else [c for c, f in zip(cases, assignment) if f != fold]
        for variant in variants:
            labels, result = evaluate_variant(variant, train, test, config, transductive=folds == 1)
            if results is not None:
                results[(variant, fold)] = result
            for c, lab in zip(test, labels):
                table.add(c.ident, variant, dice(lab, c.truth), fold)
            log.info("fold %d %s: mean Dice %.4f", fold, variant, table.values(variant).mean())
        if csv_path is not None:
            table.to_csv(csv_path)
    return table


def tune_crf(cases, prob_maps, n_trials: int = 20, seed: int = 0, ranges=None,
             base: CrfParams | None = None) -> tuple[CrfParams, float]:
    """Random search over CRF parameters on held-out cases with ground truth.

    ``prob_maps`` are full-size P(foreground) arrays (e.g. from a trained
    network). Every trial draws each parameter log-uniformly from its range
    and is scored by mean Dice of the regularised labelling inside B.
    """
    ranges = ranges or {"omega1": (0.1, 5.0), "omega2": (0.1, 5.0), "theta_alpha": (1.0, 10.0),
                        "theta_beta": (0.1, 20.0), "theta_gamma": (0.5, 3.0)}
    base = base or CrfParams()
    rng = np.random.default_rng(seed)
    best, best_score = base, -1.0
    for _ in range(n_trials):
        draw = {k: float(np.exp(rng.uniform(np.log(lo), np.log(hi)))) for k, (lo, hi) in ranges.items()}
        params = replace(base, **draw)
        scores = []
        for c, p in zip(cases, prob_maps):
            domain = c.regions.domain_mask
            labels, _ = regularize(c.volume, p[domain], domain, params, pinned=c.regions.halo_mask)
            labels[~c.regions.box_mask] = 0
            scores.append(dice(labels, c.truth))
        score = float(np.mean(scores))
        if score > best_score:
            best, best_score = params, score
    return best, best_score


def cases_from_subjects(subjects) -> list[Case]:
    return [Case(s.ident, s.volume, s.regions, s.truth) for s in subjects]


def write_iterations(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "mean_dice", "mean_loss", "relabel_fraction", "degenerate"])
        for r in records:
            w.writerow([r.iteration, repr(r.mean_dice), repr(r.mean_loss), repr(r.relabel_fraction),
                        ";".join(r.degenerate)])


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
