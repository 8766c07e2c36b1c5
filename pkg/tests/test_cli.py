import json
import subprocess
import sys

import numpy as np
import pytest

from ildcnn import data, metrics, model, optim
from ildcnn.cli import main, read_patch_file
from ildcnn.config import SCHEMA, RunConfig
from ildcnn.errors import ConfigError, DataError
from fakes import write_scan_directory

FAST = ["-q", "-s", "epochs=2", "-s", "learning_rate=0.001", "-s", "test_per_class=5"]


@pytest.fixture(scope="module")
def store(tmp_path_factory):
    out = tmp_path_factory.mktemp("store")
    assert main(["synthesize", "-q", "-s", f"out={out}", "-s", "n_per_class=20"]) == 0
    return out


def run(*argv):
    return main(list(argv))


# -- config -------------------------------------------------------------------------


def test_defaults_follow_reference_values():
    cfg = RunConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.epochs, cfg.k) == (1e-5, 32, 50, 5)
    assert (cfg.patch_size, cfg.coverage) == (32, 0.8)
    assert cfg.dropout == (0.25, 0.40, 0.40)


def test_config_file_and_override(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# experiment\nepochs = 7\nloss = mean_squared_error\n\nseed=3\n")
    cfg = RunConfig.load(p, ["epochs=9"])
    assert (cfg.epochs, cfg.loss, cfg.seed) == (9, optim.MSE, 3)
    assert RunConfig.load(None, []).epochs == 50
    back = RunConfig.load(None, [])
    assert back.dump() == RunConfig().dump()


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="no_such"):
        RunConfig.load(None, ["no_such=1"])
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["epochs=many"])
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["epochs"])
    (tmp_path / "bad.cfg").write_text("just words\n")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "bad.cfg", [])


def test_config_command(capsys):
    assert run("config", "-s", "seed=4") == 0
    assert "seed = 4" in capsys.readouterr().out
    assert run("config", "--keys") == 0
    text = capsys.readouterr().out
    for key in SCHEMA:
        assert key in text


def test_exit_codes(tmp_path, capsys):
    assert run("train", "-q", "-s", "bogus=1") == 1
    capsys.readouterr()
    assert run("train", "-q", "-s", f"data={tmp_path / 'missing'}", "-s", f"out={tmp_path}") == 2
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1 and "missing" in err
    assert run("train", "-q", "-s", "learning_rate=-1", "-s", f"data={tmp_path}") == 1
    with pytest.raises(SystemExit) as e:
        run("frobnicate")
    assert e.value.code == 1


# -- train / evaluate ---------------------------------------------------------------


def test_quickstart_emits_artifacts(store, tmp_path, capsys):
    out = tmp_path / "run"
    assert run("train", *FAST, "-s", f"data={store}", "-s", f"out={out}") == 0
    for name in ("model.ckpt", "curves.csv", "report.json", "report.txt", "config.txt"):
        assert (out / name).is_file(), name
    rep = json.loads((out / "report.json").read_text())
    metrics.validate_report(rep, data.CLASS_NAMES)
    assert rep["total"] == 25
    assert len((out / "curves.csv").read_text().splitlines()) == 3
    assert "Total Average" in capsys.readouterr().out


def test_train_is_reproducible(store, tmp_path):
    args = [*FAST, "-s", f"data={store}", "-s", "augment=false", "-s", "seed=3"]
    assert run("train", *args, "-s", f"out={tmp_path / 'a'}") == 0
    assert run("train", *args, "-s", f"out={tmp_path / 'b'}") == 0
    for name in ("model.ckpt", "report.json", "curves.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    assert run("train", *args, "-s", "seed=4", "-s", f"out={tmp_path / 'c'}") == 0
    assert (tmp_path / "a" / "model.ckpt").read_bytes() != (tmp_path / "c" / "model.ckpt").read_bytes()


def test_train_bn_order_flag(store, tmp_path):
    out = tmp_path / "bn"
    argv = [*FAST, "-s", "epochs=1", "-s", "augment=false", "-s", "bn_before_activation=true"]
    assert run("train", *argv, "-s", f"data={store}", "-s", f"out={out}") == 0
    net = model.load(out / "model.ckpt")
    assert [l.kind for l in net.layers][:3] == ["Conv2D", "BN", "ReLU"]


def test_evaluate(store, tmp_path):
    net = model.build(seed=0)
    model.save(net, tmp_path / "m.ckpt")
    assert run("evaluate", "-q", "-s", f"checkpoint={tmp_path / 'm.ckpt'}", "-s", f"data={store}",
               "-s", f"out={tmp_path}") == 0
    rep = json.loads((tmp_path / "evaluation.json").read_text())
    metrics.validate_report(rep, data.CLASS_NAMES)
    assert rep["total"] == 100
    assert run("evaluate", "-q", "-s", f"checkpoint={tmp_path / 'nope.ckpt'}", "-s", f"data={store}") == 2


# -- predict --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def overfit_files(overfit_run, tmp_path_factory):
    net, ds, _ = overfit_run
    d = tmp_path_factory.mktemp("predict")
    model.save(net, d / "model.ckpt")
    files = []
    for i in range(len(ds)):
        f = d / f"p{i:03d}.npy"
        np.save(f, ds.images[i])
        files.append(str(f))
    return d / "model.ckpt", files, ds.labels


def parse_predictions(text):
    rows = [line.split("\t") for line in text.strip().splitlines()]
    return [(name, cls, [float(v) for v in probs.split(",")]) for name, cls, probs in rows]


def test_predict_reproduces_training_labels(overfit_files, capsys):
    ckpt, files, labels = overfit_files
    assert run("predict", "-q", "-s", f"checkpoint={ckpt}", *files) == 0
    rows = parse_predictions(capsys.readouterr().out)
    assert [r[0] for r in rows] == files
    got = np.array([data.CLASS_NAMES.index(c) for _, c, _ in rows])
    assert (got == labels).mean() >= 0.99
    for _, _, probs in rows:
        # five values each rounded to 3 decimals
        assert abs(sum(probs) - 1.0) <= 5 * 0.0005 + 1e-9
        assert f"{sum(probs):.2f}" == "1.00"


def test_predict_continues_past_bad_file(overfit_files, tmp_path, capsys):
    ckpt, files, _ = overfit_files
    bad = tmp_path / "bad.npy"
    bad.write_bytes(b"not an array")
    wrong = tmp_path / "wrong.npy"
    np.save(wrong, np.zeros((8, 8, 3)))
    assert run("predict", "-q", "-s", f"checkpoint={ckpt}", str(bad), files[0], str(wrong), files[1]) == 2
    cap = capsys.readouterr()
    assert [r[0] for r in parse_predictions(cap.out)] == files[:2]
    assert len(cap.err.strip().splitlines()) == 2


def test_predict_png(overfit_files, tmp_path, capsys):
    from PIL import Image

    ckpt, files, _ = overfit_files
    arr = np.load(files[0])
    Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(tmp_path / "p.png")
    np.testing.assert_allclose(read_patch_file(tmp_path / "p.png"), arr, atol=0.5 / 255 + 1e-6)
    assert run("predict", "-q", "-s", f"checkpoint={ckpt}", str(tmp_path / "p.png")) == 0
    assert len(parse_predictions(capsys.readouterr().out)) == 1
    with pytest.raises(DataError):
        read_patch_file(tmp_path / "p.txt")


def test_predict_needs_files(overfit_files):
    ckpt, _, _ = overfit_files
    assert run("predict", "-q", "-s", f"checkpoint={ckpt}") == 1
    assert run("predict", "-q", "b.npy") == 1


# -- extract / crossval / tune -------------------------------------------------------


def test_extract_scan_directory(tmp_path, capsys):
    src = write_scan_directory(tmp_path / "scans", scans=2, slices_per_scan=1)
    out = tmp_path / "store"
    assert run("extract", "-q", "-s", f"dataset_dir={src}", "-s", f"out={out}") == 0
    ds = data.load_dataset(out)
    assert ds.class_counts() == [10] * 5
    assert {p.scan for p in ds.provenance} == {"scan00", "scan01"}
    printed = capsys.readouterr().out
    assert "50 patches" in printed and "Fibrosis" in printed
    assert run("extract", "-q", "-s", f"out={out}") == 1
    assert run("extract", "-q", "-s", f"dataset_dir={tmp_path / 'none'}", "-s", f"out={out}") == 2


def test_crossval(store, tmp_path):
    out = tmp_path / "cv"
    argv = [*FAST, "-s", "epochs=1", "-s", "augment_factor=1", "-s", "k=3"]
    assert run("crossval", *argv, "-s", f"data={store}", "-s", f"out={out}") == 0
    summary = json.loads((out / "crossval.json").read_text())
    assert summary["k"] == 3 and sum(summary["fold_sizes"]) == 100
    metrics.validate_report(summary["pooled"], data.CLASS_NAMES)
    assert summary["pooled"]["total"] == 100
    for f in range(1, 4):
        metrics.validate_report(json.loads((out / f"fold_{f}.json").read_text()), data.CLASS_NAMES)
        assert (out / f"fold_{f}_curves.csv").is_file()
    assert "mean over 3 folds" in (out / "crossval.txt").read_text()


def test_tune(store, tmp_path):
    out = tmp_path / "tune"
    argv = [*FAST, "-s", "epochs=1", "-s", "augment=false"]
    assert run("tune", *argv, "-s", f"data={store}", "-s", f"out={out}") == 0
    rows = json.loads((out / "tune.json").read_text())["rows"]
    assert [(r["blocks"], r["loss"]) for r in rows] == [
        (b, loss) for b in (3, 4, 5) for loss in (optim.CROSS_ENTROPY, optim.MSE)
    ]
    assert [tuple(r["filters"]) for r in rows[::2]] == [(16, 32, 64), (32, 64, 32, 128), (32, 64, 32, 64, 128)]
    text = (out / "tune.txt").read_text()
    assert "F_avg" in text and len([l for l in text.splitlines() if optim.MSE in l]) == 3


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ildcnn", "config"], capture_output=True, text=True)
    assert proc.returncode == 0 and "learning_rate = " in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "ildcnn", "train", "-q", "-s", "x=1"], capture_output=True, text=True)
    assert proc.returncode == 1 and proc.stderr.count("\n") == 1


def test_numeric_failure_exit_code(tmp_path, capsys):
    ds = data.synthesize_dataset(10, seed=0)
    ds.images[:] = np.nan
    data.save_dataset(ds, tmp_path / "nan")
    argv = [*FAST, "-s", "epochs=1", "-s", "augment=false", "-s", "test_per_class=2"]
    assert run("train", *argv, "-s", f"data={tmp_path / 'nan'}", "-s", f"out={tmp_path / 'o'}") == 3
    assert "numeric" in capsys.readouterr().err
