"""Command line front end: ``deepcut {gen,run,crf,grabcut,eval,report,experiment}``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import driver, harness, io, nn
from .crf import regularize
from .grabcut import grabcut_segment
from .phantom import generate_corpus
from .sampling import normalize

log = logging.getLogger("deepcut")

RUN_VARIANTS = ("naive", "dc-bb", "dc-ps", "fs", "bb", "gc")


def _load_experiment(args) -> driver.ExperimentConfig:
    cfg = cfgmod.preset(args.preset)
    if args.config:
        cfg = cfgmod.load_config(args.config, cfg)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, rng_seed=args.seed)
    return cfg


def cmd_gen(args):
    text = Path(args.spec).read_text() if args.spec else ""
    if args.preset:
        text = f"[phantom]\npreset = {args.preset}\n" + text.replace("[phantom]", "", 1)
    spec = cfgmod.phantom_from_text(text)
    subjects = generate_corpus(spec)
    io.write_corpus(args.out, subjects)
    print(f"wrote {len(subjects)} subjects to {args.out}")


def cmd_run(args):
    cfg = _load_experiment(args)
    cases = io.read_corpus(args.corpus)
    out = harness.ensure_dir(args.out)
    labels_dir = harness.ensure_dir(out / "labels")
    (out / "config.ini").write_text(cfgmod.dump_config(cfg))
    if args.variant in ("bb", "gc"):
        labels, _ = harness.evaluate_variant(args.variant, [], driver.prepare(cases), cfg)
        result = None
    else:
        cfg = replace(cfg, variant=cfgmod.normalize_variant(args.variant))
        result = driver.run_variant(cases, cfg)
        labels = result.labels
    for c, lab in zip(cases, labels):
        io.write_labels(labels_dir / f"{c.ident}.hdr", lab, c.volume.spacing)
    if result is not None:
        nn.save_params(result.params, out / "params.dcnn")
        nn.write_training_log(result.params, out / "training_log.csv")
        harness.write_iterations(result.records, out / "iterations.csv")
        if result.regions and cfg.variant in ("dc_bb", "dc_ps"):
            for c, r in zip(cases, result.regions):
                io.write_regions(labels_dir / f"{c.ident}_regions.csv", r, with_targets=True)
    scores = [driver.dice(lab, c.truth) for c, lab in zip(cases, labels) if c.truth is not None]
    if scores:
        print(f"{args.variant}: mean Dice {np.mean(scores):.4f} over {len(scores)} subjects")


def cmd_crf(args):
    volume = io.read_volume(args.volume)
    probs, _ = io.read_array(args.probs)
    if probs.ndim != 4 or probs.shape[0] != 2 or probs.shape[1:] != volume.shape:
        raise SystemExit("probability field must have 2 channels matching the volume")
    regions = io.read_regions(args.regions, volume.shape)
    base = cfgmod.preset(args.preset).crf
    params = cfgmod.crf_from_mapping(io.read_keyvalue(args.params), base) if args.params else base
    domain = regions.box_mask if args.box_only else regions.domain_mask
    pinned = None if args.box_only or args.no_pin else regions.halo_mask
    p = probs.astype(np.float64)
    p_fg = p[1] / np.maximum(p[0] + p[1], 1e-12)
    labels, q = regularize(volume, p_fg[domain], domain, params, pinned=pinned)
    marg = np.zeros((2, *volume.shape), dtype=np.float32)
    marg[:, domain] = q.T
    out = Path(args.out)
    io.write_labels(out.with_name(out.name + "_labels.hdr"), labels, volume.spacing)
    io.write_array(out.with_name(out.name + "_marginals.hdr"), marg, volume.spacing)


def cmd_grabcut(args):
    volume = io.read_volume(args.volume)
    regions = io.read_regions(args.regions, volume.shape)
    cfg = cfgmod.preset(args.preset)
    crf = cfgmod.crf_from_mapping(io.read_keyvalue(args.params), cfg.crf) if args.params else cfg.crf
    gc = cfg.grabcut if args.gamma is None else replace(cfg.grabcut, gamma=args.gamma)
    res = grabcut_segment(normalize(volume, regions), regions, crf, gc, np.random.default_rng(args.seed))
    if args.as_preseg:
        io.write_regions(args.out, res.as_preseg(regions), with_targets=True)
    else:
        io.write_labels(args.out, res.labels, volume.spacing)
    print(f"grabcut finished after {res.iterations} iterations"
          + (" (foreground collapsed)" if res.degenerate else ""))


def cmd_eval(args):
    cases = io.read_corpus(args.corpus)
    table = harness.MetricsTable.from_csv(args.out) if args.append and Path(args.out).exists() \
        else harness.MetricsTable()
    for c in cases:
        if c.truth is None:
            raise SystemExit(f"{c.ident}: no ground truth in the corpus")
        lab = io.read_labels(Path(args.labels) / f"{c.ident}.hdr")
        table.add(c.ident, args.variant, driver.dice(lab, c.truth), args.fold)
    table.to_csv(args.out)
    mean, std = table.aggregate()[args.variant]
    print(f"{args.variant}: {100 * mean:.1f} +/- {100 * std:.1f}")


def cmd_report(args):
    text = harness.MetricsTable.from_csv(args.csv).report()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_experiment(args):
    cfg = _load_experiment(args)
    cases = io.read_corpus(args.corpus)
    out = harness.ensure_dir(args.out)
    (out / "config.ini").write_text(cfgmod.dump_config(cfg))
    variants = [v if v in ("bb", "gc") else cfgmod.normalize_variant(v) for v in args.variants]
    results = {}
    table = harness.run_experiment(cases, variants, args.folds, cfg, split_seed=args.split_seed,
                                   csv_path=out / "metrics.csv", results=results)
    for (variant, fold), res in results.items():
        if res is not None and res.records:
            harness.write_iterations(res.records, out / f"iterations_{variant}_fold{fold}.csv")
    text = table.report()
    (out / "report.md").write_text(text)
    sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepcut", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic phantom corpus")
    g.add_argument("--spec", help="phantom spec file ([phantom] section)")
    g.add_argument("--preset", choices=("easy", "lungs"))
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    def experiment_args(sp):
        sp.add_argument("--corpus", required=True)
        sp.add_argument("--preset", default="phantom", choices=sorted(cfgmod.PRESETS))
        sp.add_argument("--config", help="INI file overriding the preset")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True)

    r = sub.add_parser("run", help="train one variant on a corpus and label it")
    r.add_argument("--variant", required=True, choices=RUN_VARIANTS)
    experiment_args(r)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("crf", help="regularise a probability field with the dense CRF")
    c.add_argument("--probs", required=True, help="2-channel volume (P background, P foreground)")
    c.add_argument("--volume", required=True)
    c.add_argument("--regions", required=True)
    c.add_argument("--params", help="key=value CRF parameters")
    c.add_argument("--preset", default="phantom", choices=sorted(cfgmod.PRESETS))
    c.add_argument("--box-only", action="store_true", help="restrict inference to B")
    c.add_argument("--no-pin", action="store_true", help="do not pin halo voxels to background")
    c.add_argument("--out", required=True, help="output prefix")
    c.set_defaults(func=cmd_crf)

    gc = sub.add_parser("grabcut", help="GrabCut baseline inside the boxes")
    gc.add_argument("--volume", required=True)
    gc.add_argument("--regions", required=True)
    gc.add_argument("--params", help="key=value CRF parameters")
    gc.add_argument("--preset", default="phantom", choices=sorted(cfgmod.PRESETS))
    gc.add_argument("--gamma", type=float)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--as-preseg", action="store_true",
                    help="write a region CSV whose targets hold the segmentation")
    gc.add_argument("--out", required=True)
    gc.set_defaults(func=cmd_grabcut)

    e = sub.add_parser("eval", help="Dice of a labelling directory against corpus ground truth")
    e.add_argument("--labels", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--variant", required=True)
    e.add_argument("--fold", type=int, default=0)
    e.add_argument("--append", action="store_true", help="add rows to an existing CSV")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="summary table from a metrics CSV")
    rp.add_argument("--csv", required=True)
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)

    x = sub.add_parser("experiment", help="cross-validated comparison of several variants")
    x.add_argument("--variants", nargs="+", default=["bb", "gc", "naive", "dc-bb", "dc-ps", "fs"])
    x.add_argument("--folds", type=int, default=1, help="1 evaluates on the training database")
    x.add_argument("--split-seed", type=int, default=0)
    experiment_args(x)
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
