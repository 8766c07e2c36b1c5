"""Acceptance suite: one test per criterion, each at its stated tolerance.

The terminal summary lists a PASS/FAIL line per criterion (see conftest).
"""

import json
import time

import numpy as np
import pytest

import gradsuite
from conftest import OVERFIT_EPOCHS
from fakes import write_scan_directory
from ildcnn import data, metrics, model, nn, optim
from ildcnn.cli import main
from oracles import recount
from test_model import TABLE_PARAMS, TABLE_ROWS

TRIALS = 500


@pytest.mark.criterion("1 parameter-count identity")
def test_c1_parameter_counts():
    t0 = time.perf_counter()
    net = model.build()
    counts = net.parameter_counts()
    elapsed = time.perf_counter() - t0
    assert counts == TABLE_PARAMS
    assert net.num_params == sum(TABLE_PARAMS) == 1_406_117
    assert elapsed < 1.0


@pytest.mark.criterion("2 shape identity")
def test_c2_shapes():
    net = model.build()
    x = np.random.default_rng(0).uniform(size=(3, 32, 32, 3)).astype(np.float32)
    assert net.trace_shapes(x) == TABLE_ROWS
    assert net.forward(x).shape == (3, 5)


@pytest.mark.criterion("3 gradient suite (layers < 1e-4, end-to-end < 1e-3, >= 20 trials, < 2 min)")
def test_c3_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for name in gradsuite.LAYER_TRIALS:
        errs = gradsuite.run_layer(name, trials=20)
        assert len(errs) >= 20
        worst[name] = max(errs)
    e2e, redrawn = gradsuite.end_to_end(trials=20)
    elapsed = time.perf_counter() - t0
    print(f"worst layer errors {worst}; end-to-end max {max(e2e):.2e}, {redrawn} kink probes redrawn; {elapsed:.1f}s")
    for name, err in worst.items():
        assert err < 1e-4, name
    assert len(e2e) >= 20 and max(e2e) < 1e-3
    # kink redraws must stay rare or the check would be hollow
    assert redrawn <= 0.1 * 20 * 10
    assert elapsed < 120


@pytest.mark.criterion("4 analytic loss values")
def test_c4_loss_values():
    t = optim.one_hot([0, 1, 2, 3, 4], 5)
    assert abs(optim.cross_entropy(np.full((5, 5), 0.2), t) - np.log(5)) < 1e-9
    assert abs(optim.cross_entropy(t.copy(), t)) < 1e-9
    assert abs(optim.mse_loss(np.full((5, 5), 0.2), t) - 0.16) < 1e-9


@pytest.mark.criterion("5 metrics vs brute-force recount on 1000 random vectors")
def test_c5_metrics_oracle():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        k = int(rng.integers(2, 8))
        n = int(rng.integers(1, 300))
        t, p = rng.integers(0, k, n), rng.integers(0, k, n)
        cm = metrics.confusion(t, p, k)
        want = recount(t, p, k)
        for c in range(k):
            assert cm.counts[c].tolist() == [int(((t == c) & (p == j)).sum()) for j in range(k)]
        got = metrics.class_metrics(cm)
        for g, w in zip(got, want):
            assert (g.tp, g.tn, g.fp, g.fn) == (w["tp"], w["tn"], w["fp"], w["fn"])
            for key in ("accuracy", "precision", "recall", "f1"):
                assert abs(getattr(g, key) - w[key]) <= 1e-12
        assert abs(metrics.f_avg(got) - np.mean([w["f1"] for w in want])) <= 1e-12


def _random_store(rng, n_sources, variants):
    """Cheap dataset with ``variants`` entries per source cell."""
    prov, labels = [], []
    for s in range(n_sources):
        lab = int(rng.integers(0, 5))
        for v in range(variants):
            prov.append(data.Provenance(f"scan{s % 7}", str(s), s % 16, s // 16, "original" if v == 0 else f"t{v}"))
            labels.append(lab)
    images = np.zeros((len(prov), 32, 32, 3), np.float32)
    return data.PatchDataset(images, labels, prov)


@pytest.mark.criterion("6 pipeline laws on 500 randomized trials each")
def test_c6_pipeline_laws():
    rng = np.random.default_rng(6)
    # k-fold partition and stratification
    for _ in range(TRIALS):
        k = int(rng.integers(2, 8))
        labels = rng.integers(0, 5, int(rng.integers(k, 400)))
        f = data.kfold(labels, k, stratified=True, seed=int(rng.integers(2**31)))
        assert sorted(np.concatenate([f.test_indices(i) for i in range(k)]).tolist()) == list(range(labels.size))
        for c in range(5):
            per = [int(((f.folds == i) & (labels == c)).sum()) for i in range(k)]
            assert max(per) - min(per) <= 1
    # split disjointness by provenance
    for _ in range(TRIALS):
        ds = _random_store(rng, int(rng.integers(40, 120)), int(rng.integers(1, 4)))
        per = min(ds.class_counts()) // int(rng.integers(2, 5) * 3) + 1
        try:
            tr, te = data.stratified_split(ds, per, seed=int(rng.integers(2**31)))
        except data.DataError:
            continue
        assert not {p.source_key for p in tr.provenance} & {p.source_key for p in te.provenance}
        assert te.class_counts() == [per] * 5
    # augmentation label/shape preservation and flip involution
    for _ in range(TRIALS):
        patch = data.Patch(rng.uniform(size=(32, 32, 3)).astype(np.float32), int(rng.integers(0, 5)),
                           data.Provenance("s", "0", 0, 0))
        name = data.TRANSFORMS[int(rng.integers(len(data.TRANSFORMS)))]
        out = data.augment(patch, name, int(rng.integers(2**31)))
        assert out.label == patch.label and out.pixels.shape == patch.pixels.shape
        assert 0.0 <= out.pixels.min() and out.pixels.max() <= 1.0
        back = data.augment(data.augment(patch, "horizontal_flip"), "horizontal_flip")
        assert back.pixels.tobytes() == patch.pixels.tobytes()


DESK_EPOCHS = 6


@pytest.mark.criterion("7 desk-scale learning (>= 90% test accuracy, <= 30 epochs, < 15 min; overfit 100%)")
def test_c7_desk_scale_learning(overfit_run):
    t0 = time.perf_counter()
    full = data.synthesize_dataset(500, seed=7)
    train, test = data.stratified_split(full, 100, seed=7)
    assert (len(train), len(test)) == (2000, 500)
    val = data.synthesize_dataset(20, seed=8)
    cfg = optim.TrainingConfig(learning_rate=1e-3, epochs=DESK_EPOCHS, seed=0)
    net, _ = optim.fit(model.build(seed=0), train, val, cfg)
    acc = float((net.predict(test.images) == test.labels).mean())
    elapsed = time.perf_counter() - t0
    print(f"desk-scale test accuracy {acc:.4f} after {DESK_EPOCHS} epochs in {elapsed:.0f}s")
    assert DESK_EPOCHS <= 30
    assert acc >= 0.90
    assert elapsed < 15 * 60

    onet, ods, recs = overfit_run
    assert len(ods) == 100 and OVERFIT_EPOCHS <= 200
    assert max(r.train_accuracy for r in recs) == 1.0
    assert (onet.predict(ods.images) == ods.labels).mean() == 1.0


@pytest.mark.criterion("8 determinism and persistence")
def test_c8_determinism(tmp_path):
    ds = data.synthesize_dataset(20, seed=3)
    cfg = optim.TrainingConfig(learning_rate=1e-3, epochs=1, seed=5)
    a, _ = optim.fit(model.build(seed=2), ds, config=cfg)
    b, _ = optim.fit(model.build(seed=2), ds, config=cfg)
    assert model.checkpoint_bytes(a) == model.checkpoint_bytes(b)
    model.save(a, tmp_path / "a.ckpt")
    back = model.load(tmp_path / "a.ckpt")
    x = data.synthesize_dataset(4, seed=9).images
    assert back.forward(x, nn.INFER).tobytes() == a.forward(x, nn.INFER).tobytes()
    np.testing.assert_array_equal(back.predict(x), a.predict(x))


def _check_tune_row(row):
    cm = metrics.ConfusionMatrix(np.array(row["confusion_matrix"]))
    assert abs(row["accuracy"] - cm.micro_accuracy) <= 1e-12
    assert abs(row["f_avg"] - metrics.f_avg(metrics.class_metrics(cm))) <= 1e-12


@pytest.mark.criterion("9 full protocol on a scan directory (structural)")
def test_c9_protocol_structure(tmp_path):
    scans = write_scan_directory(tmp_path / "scans", scans=4, slices_per_scan=2)
    store = tmp_path / "store"
    assert main(["extract", "-q", "-s", f"dataset_dir={scans}", "-s", f"out={store}"]) == 0
    common = ["-q", "-s", f"data={store}", "-s", "epochs=1", "-s", "learning_rate=0.001",
              "-s", "test_per_class=5", "-s", "augment_factor=1"]
    names = list(data.CLASS_NAMES)

    assert main(["train", *common, "-s", f"out={tmp_path / 'train'}"]) == 0
    rep = json.loads((tmp_path / "train" / "report.json").read_text())
    metrics.validate_report(rep, names)
    assert [c["support"] for c in rep["classes"]] == [5] * 5

    assert main(["crossval", *common, "-s", f"out={tmp_path / 'cv'}"]) == 0
    cv = json.loads((tmp_path / "cv" / "crossval.json").read_text())
    metrics.validate_report(cv["pooled"], names)
    assert all(c["support"] > 0 for c in cv["pooled"]["classes"])
    assert len(cv["fold_confusion_matrices"]) == 5
    for i in range(5):
        fold = json.loads((tmp_path / "cv" / f"fold_{i + 1}.json").read_text())
        metrics.validate_report(fold, names)
        assert fold["confusion_matrix"] == cv["fold_confusion_matrices"][i]
    for key, v in cv["mean_summary"].items():
        assert abs(v - np.mean([s[key] for s in cv["fold_summaries"]])) <= 1e-12

    assert main(["tune", *common, "-s", "augment=false", "-s", f"out={tmp_path / 'tune'}"]) == 0
    rows = json.loads((tmp_path / "tune" / "tune.json").read_text())["rows"]
    assert len(rows) == 6 and {r["blocks"] for r in rows} == {3, 4, 5}
    for row in rows:
        assert np.array(row["confusion_matrix"]).shape == (5, 5)
        assert np.array(row["confusion_matrix"]).sum(axis=1).tolist() == [5] * 5
        _check_tune_row(row)
