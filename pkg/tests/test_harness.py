from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepcut import cli, config, driver, harness, io, nn
from deepcut.crf import CrfParams
from deepcut.driver import Case, ExperimentConfig, dice
from deepcut.phantom import EASY, LUNG_LIKE, PhantomSpec, generate_corpus
from deepcut.sampling import Box, Volume, halo_from_bbox


def small_config(**kw):
    base = ExperimentConfig(
        total_epochs=2, epochs_per_iteration=1,
        train=nn.TrainConfig(patches_per_epoch=400, minibatch_size=100, chunk_size=100),
        topology=nn.Topology((3, 9, 9), (4, 6), (3, 3), 8), crf=config.PHANTOM_CRF,
        grabcut=config.PRESETS["phantom"].grabcut)
    return replace(base, **kw)


@pytest.fixture(scope="module")
def corpus():
    spec = PhantomSpec(n_subjects=4, rng_seed=3)
    return harness.cases_from_subjects(generate_corpus(spec))


# Dice --------------------------------------------------------------------------------------

masks = st.lists(st.integers(0, 1), min_size=12, max_size=12).map(
    lambda v: np.array(v, dtype=np.uint8).reshape(1, 3, 4))


@settings(max_examples=100, deadline=None)
@given(masks, masks)
def test_dice_symmetric_and_bounded(a, b):
    d = dice(a, b)
    assert d == dice(b, a) and 0.0 <= d <= 1.0
    assert (d == 1.0) == np.array_equal(a == 1, b == 1)


def test_dice_cases():
    a = np.zeros((1, 2, 4), np.uint8)
    b = np.zeros((1, 2, 4), np.uint8)
    assert dice(a, b) == 1.0
    a[0, 0, :4] = 1
    assert dice(a, a) == 1.0
    b[0, 1, :4] = 1
    assert dice(a, b) == 0.0
    b[:] = 0
    b[0, 0, 2:] = 1
    b[0, 1, :2] = 1
    assert dice(a, b) == 0.5
    # label 2 (unlabelled) never counts as foreground
    assert dice(np.full((1, 1, 2), 2), np.zeros((1, 1, 2))) == 1.0
    with pytest.raises(ValueError):
        dice(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


# folds and tables ---------------------------------------------------------------------------

def test_kfold():
    f = harness.kfold_split(10, 5, seed=1)
    assert sorted(np.bincount(f).tolist()) == [2] * 5
    assert np.array_equal(f, harness.kfold_split(10, 5, seed=1))
    g = harness.kfold_split(11, 3, seed=0)
    counts = np.bincount(g)
    assert counts.sum() == 11 and counts.max() - counts.min() <= 1
    with pytest.raises(ValueError):
        harness.kfold_split(2, 3)


def test_metrics_table_round_trip(tmp_path):
    t = harness.MetricsTable()
    t.add("a", "dc_bb", 0.5, 0)
    t.add("b", "dc_bb", 0.7, 1)
    t.add("a", "naive", 0.25, 0)
    with pytest.raises(ValueError):
        t.add("c", "naive", 1.5, 0)
    agg = t.aggregate()
    assert agg["dc_bb"] == pytest.approx((0.6, 0.1))
    t.to_csv(tmp_path / "m.csv")
    back = harness.MetricsTable.from_csv(tmp_path / "m.csv")
    assert back.rows == t.rows and back.aggregate() == agg
    rep = t.report()
    assert "| mean | 25.0 | 60.0 |" in rep
    assert rep.index("1. DC_BB") < rep.index("2. CNN_naive")


def test_aggregate_follows_rows():
    t = harness.MetricsTable()
    t.add("a", "bb", 0.4, 0)
    assert t.aggregate()["bb"][0] == pytest.approx(0.4)
    t.add("b", "bb", 0.8, 0)
    assert t.aggregate()["bb"][0] == pytest.approx(0.6)


# phantoms -----------------------------------------------------------------------------------

def test_phantom_corpus_geometry():
    subjects = generate_corpus(replace(EASY, n_subjects=5))
    for s in subjects:
        s.regions.check()
        assert not np.any((s.truth == 1) & ~s.regions.box_mask)
        assert not np.any(s.truth[s.regions.halo_mask])
        assert s.volume.shape == (7, 80, 80)
    bb = np.mean([dice(s.regions.box_mask.astype(np.uint8), s.truth) for s in subjects])
    assert 0.4 <= bb <= 0.8


def test_phantom_deterministic_and_lungs_preset():
    a = generate_corpus(replace(LUNG_LIKE, n_subjects=2))
    b = generate_corpus(replace(LUNG_LIKE, n_subjects=2))
    assert all(np.array_equal(x.volume.data, y.volume.data) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        generate_corpus(replace(EASY, dims=(40, 40, 7)))


# driver --------------------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(variant="magic").validate()
    with pytest.raises(ValueError):
        ExperimentConfig(total_epochs=10, epochs_per_iteration=3).validate()


def test_predict_stride(corpus):
    case = driver.prepare(corpus[:1])[0]
    params = nn.build_network(small_config().topology, seed=0)
    mask = case.regions.box_mask
    full = driver.predict_probs(params, case.volume, mask, 1)
    coarse = driver.predict_probs(params, case.volume, mask, 2)
    assert full.shape == coarse.shape
    on_lattice = np.all(np.argwhere(mask)[:, 1:] % 2 == 0, axis=1)
    np.testing.assert_array_equal(full[on_lattice], coarse[on_lattice])


def test_deepcut_records_and_regions(corpus):
    res = driver.run_deepcut(corpus[:2], small_config(variant="dc_bb"))
    assert [r.iteration for r in res.records] == [0, 1, 2]
    assert np.isnan(res.records[0].mean_loss) and not np.isnan(res.records[1].mean_loss)
    bb = np.mean([dice(c.regions.box_mask.astype(np.uint8), c.truth) for c in corpus[:2]])
    assert res.records[0].mean_dice == pytest.approx(bb)
    for r, lab in zip(res.regions, res.labels):
        r.check()
        assert np.array_equal(lab == 1, r.fg)


def test_target_update_rolls_back_empty(corpus):
    case = driver.prepare(corpus[:1])[0]
    params = nn.build_network(small_config().topology, seed=0)
    params.biases[-1][:] = [50.0, -50.0]  # always background
    cfg = small_config(pin_halo=True)
    regions, degenerate, frac = driver.target_update(params, case, cfg)
    assert degenerate and regions is case.regions and frac == 0.0


def test_fully_supervised_needs_truth(corpus):
    with pytest.raises(ValueError):
        driver.run_fully_supervised([replace(corpus[0], truth=None)], small_config())


def test_run_experiment_smoke(tmp_path, corpus):
    cfg = small_config(total_epochs=0)
    table = harness.run_experiment(corpus[:2], ["naive"], 1, cfg, csv_path=tmp_path / "m.csv")
    assert len(table.rows) == 2 and (tmp_path / "m.csv").exists()
    assert "CNN_naive" in table.report()


def test_run_experiment_repeatable(corpus):
    cfg = small_config(total_epochs=1)
    table = harness.run_experiment(corpus[:2], ["naive", "naive"], 1, cfg)
    vals = table.values("naive")
    assert np.array_equal(vals[:2], vals[2:])


def test_run_experiment_cross_validated(corpus):
    cfg = small_config(total_epochs=1)
    table = harness.run_experiment(corpus, ["bb", "fully_supervised"], 2, cfg, split_seed=4)
    folds = {(r[0], r[1]): r[3] for r in table.rows}
    assert len(table.rows) == 8
    assert {folds[(c.ident, "bb")] for c in corpus} == {0, 1}


def test_tune_crf(corpus):
    cases = driver.prepare(corpus[:2])
    probs = [np.where(c.truth == 1, 0.8, 0.3).astype(float) for c in cases]
    best, score = harness.tune_crf(cases, probs, n_trials=3, seed=0)
    assert 0 <= score <= 1 and isinstance(best, CrfParams)


# files ----------------------------------------------------------------------------------------

def test_volume_container_round_trip(tmp_path, rng):
    v = Volume(rng.normal(size=(3, 5, 4)), (0.5, 0.7, 2.0))
    io.write_volume(tmp_path / "v.hdr", v)
    header = io.read_header(tmp_path / "v.hdr")
    assert header["dims"] == "4 5 3" and header["byte_order"] == "little"
    back = io.read_volume(tmp_path / "v")
    assert np.array_equal(back.data, v.data) and back.spacing == v.spacing
    raw = np.fromfile(tmp_path / "v.raw", "<f4")
    assert raw[1] == v.data[0, 0, 1]  # x fastest


def test_label_and_region_round_trip(tmp_path):
    shape = (2, 20, 20)
    r = halo_from_bbox({0: Box(3, 4, 10, 12), 1: Box(5, 5, 9, 9)}, shape, 4)
    fg = np.zeros(shape, bool)
    fg[0, 6:9, 5:8] = True
    r = r.with_targets(fg)
    io.write_regions(tmp_path / "r.csv", r)
    plain = io.read_regions(tmp_path / "r.csv", shape)
    assert plain.boxes == r.boxes and plain.halo_boxes == r.halo_boxes
    assert np.array_equal(plain.fg, r.box_mask)
    io.write_regions(tmp_path / "t.csv", r, with_targets=True)
    back = io.read_regions(tmp_path / "t.csv", shape)
    assert np.array_equal(back.fg, r.fg) and np.array_equal(back.bg, r.bg)
    lab = np.random.default_rng(0).integers(0, 3, shape).astype(np.uint8)
    io.write_labels(tmp_path / "l.hdr", lab)
    assert np.array_equal(io.read_labels(tmp_path / "l.hdr"), lab)


def test_bad_region_kind(tmp_path):
    (tmp_path / "r.csv").write_text("slice_index,x0,y0,x1,y1,kind\n0,1,1,2,2,Q\n")
    with pytest.raises(ValueError):
        io.read_regions(tmp_path / "r.csv", (1, 5, 5))


def test_config_round_trip():
    for name in config.PRESETS:
        cfg = config.preset(name)
        assert config.apply_text(config.dump_config(cfg)) == cfg


def test_config_table_keys():
    text = """
[network]
patch_size = 33 x 33 x 3
learning_rate = 0.015
N_Epochs = 250
N_Epochs_per_DeepCut_iteration = 50
N_Batch = 100000
N_Mini-batch = 5000
[crf]
omega_1 = 5.0
omega_2 = 5.0
theta_alpha = 10.0
theta_beta = 0.1
theta_gamma = 0.1
N_Iterations = 5
[grabcut]
gamma = 1.0
"""
    cfg = config.apply_text(text)
    assert cfg.topology.patch_shape == (3, 33, 33)
    assert cfg.total_epochs == 250 and cfg.train.minibatch_size == 5000
    assert cfg.crf == CrfParams(5.0, 5.0, 10.0, 0.1, 0.1, 5) and cfg.grabcut.gamma == 1.0
    with pytest.raises(ValueError):
        config.apply_text("[crf]\nomega_3 = 1\n")
    with pytest.raises(ValueError):
        config.preset("liver")


def test_variant_aliases():
    assert config.normalize_variant("dc-bb") == "dc_bb"
    assert config.normalize_variant("fs") == "fully_supervised"
    with pytest.raises(ValueError):
        config.normalize_variant("dc")


def test_cli_end_to_end(tmp_path, capsys):
    (tmp_path / "ph.ini").write_text("[phantom]\nn_subjects = 2\nrng_seed = 5\n")
    (tmp_path / "run.ini").write_text(
        "[network]\npatch_size = 9 x 9 x 3\nconv_filters = 4 6\nkernel_sizes = 3 3\ndense_units = 8\n"
        "N_Epochs = 2\nN_Epochs_per_DeepCut_iteration = 1\nN_Batch = 200\nN_Mini-batch = 100\n")
    corpus, out = tmp_path / "corpus", tmp_path / "out"
    assert cli.main(["gen", "--spec", str(tmp_path / "ph.ini"), "--out", str(corpus)]) == 0
    cli.main(["run", "--variant", "dc-bb", "--corpus", str(corpus), "--config", str(tmp_path / "run.ini"),
              "--out", str(out)])
    for name in ("params.dcnn", "iterations.csv", "training_log.csv", "config.ini", "labels/s000.hdr"):
        assert (out / name).exists(), name
    assert len((out / "iterations.csv").read_text().splitlines()) == 4
    cli.main(["eval", "--labels", str(out / "labels"), "--corpus", str(corpus), "--variant", "dc_bb",
              "--out", str(tmp_path / "m.csv")])
    cli.main(["report", "--csv", str(tmp_path / "m.csv"), "--out", str(tmp_path / "r.md")])
    assert "DC_BB" in (tmp_path / "r.md").read_text()
    cli.main(["grabcut", "--volume", str(corpus / "s000.hdr"), "--regions", str(corpus / "s000_regions.csv"),
              "--as-preseg", "--out", str(tmp_path / "pre.csv")])
    cases = io.read_corpus(corpus)
    pre = io.read_regions(tmp_path / "pre.csv", cases[0].volume.shape)
    assert dice(pre.fg.astype(np.uint8), cases[0].truth) > 0.9
    probs = np.stack([1.0 - cases[0].truth, cases[0].truth]).astype(np.float32)
    io.write_array(tmp_path / "p.hdr", probs)
    (tmp_path / "crf.txt").write_text("omega_1 = 1\nomega_2 = 1\n")
    cli.main(["crf", "--probs", str(tmp_path / "p.hdr"), "--volume", str(corpus / "s000.hdr"),
              "--regions", str(corpus / "s000_regions.csv"), "--params", str(tmp_path / "crf.txt"),
              "--out", str(tmp_path / "c")])
    assert dice(io.read_labels(tmp_path / "c_labels.hdr"), cases[0].truth) > 0.95
    marg, _ = io.read_array(tmp_path / "c_marginals.hdr")
    assert marg.shape == (2, *cases[0].volume.shape)
