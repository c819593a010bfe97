import json

import numpy as np
import pytest

from cvm_cervix.checkpoint import load_checkpoint, model_from_checkpoint
from cvm_cervix.cli import main
from cvm_cervix.data import ImageBuffer, Preprocessor, Sample, load_image, save_image
from cvm_cervix.functional import softmax_np
from cvm_cervix.tensor import Tensor


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    data = base / "data"
    assert main(["synth", "--out", str(data), "--classes", "3", "--per-class", "10", "--seed", "1"]) == 0
    out = base / "run"
    code = main(["train", "--data", str(data), "--out", str(out), "--epochs", "2", "--batch-size", "8",
                 "--lr", "1e-3", "--seed", "0"])
    assert code == 0
    return data, out


def test_synth_layout(run):
    data, _ = run
    assert sorted(p.name for p in data.iterdir()) == ["class_0", "class_1", "class_2"]
    assert len(list((data / "class_0").glob("*.png"))) == 10


def test_train_artifacts(run):
    _, out = run
    for name in ("config.json", "split.tsv", "train.log", "best.cvmx", "final.cvmx"):
        assert (out / name).is_file(), name
    log = (out / "train.log").read_text().splitlines()
    assert log[0] == "# train_samples=18 val_samples=6"
    assert len(log) == 3
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["preset"] == "desk" and cfg["epochs"] == 2 and cfg["model_config"]["num_classes"] == 3
    assert len((out / "split.tsv").read_text().splitlines()) == 30


def test_eval_writes_confusion_and_metrics(run, capsys):
    data, out = run
    assert main(["eval", str(out / "best.cvmx"), "--data", str(data), "--split", "test", "--out", str(out)]) == 0
    rows = (out / "confusion_test.csv").read_text().splitlines()
    counts = np.array([[int(v) for v in r.split(",")[1:]] for r in rows[1:]])
    assert counts.sum(axis=1).tolist() == [2, 2, 2]
    summary = json.loads((out / "metrics_test.json").read_text())
    assert summary["samples"] == 6 and summary["precision"] == "fp32"
    assert "accuracy" in capsys.readouterr().out


def test_eval_with_manifest_matches_resplit(run):
    data, out = run
    main(["eval", str(out / "best.cvmx"), "--data", str(data), "--split", "val", "--out", str(out / "a")])
    main(["eval", str(out / "best.cvmx"), "--data", str(data), "--split", "val", "--out", str(out / "b"),
          "--manifest", str(out / "split.tsv")])
    assert (out / "a" / "confusion_val.csv").read_text() == (out / "b" / "confusion_val.csv").read_text()


def test_eval_class_count_mismatch(run, tmp_path, capsys):
    _, out = run
    other = tmp_path / "two"
    main(["synth", "--out", str(other), "--classes", "2", "--per-class", "5"])
    assert main(["eval", str(out / "best.cvmx"), "--data", str(other), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "3 classes" in err and "2" in err


def test_quantize_then_eval(run, tmp_path, capsys):
    data, out = run
    half = tmp_path / "half.cvmx"
    assert main(["quantize", str(out / "best.cvmx"), str(half)]) == 0
    text = capsys.readouterr().out
    assert "ratio 0.500" in text and "saturated values 0" in text
    assert load_checkpoint(half).precision == "fp16"
    assert main(["quantize", str(half), str(tmp_path / "again.cvmx")]) == 0
    assert "no-op" in capsys.readouterr().out
    assert main(["eval", str(half), "--data", str(data), "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "metrics_test.json").read_text())["precision"] == "fp16"


def test_predict_lines_in_order(run, tmp_path, capsys):
    data, out = run
    paths = [str(data / "class_2" / "img_000.png"), str(data / "class_0" / "img_003.png")]
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"nope")
    assert main(["predict", str(out / "best.cvmx"), paths[0], str(bad), paths[1]]) == 0
    captured = capsys.readouterr()
    lines = captured.out.splitlines()
    assert [ln.split("\t")[0] for ln in lines] == paths
    assert str(bad) in captured.err

    ckpt = load_checkpoint(out / "best.cvmx")
    model = model_from_checkpoint(ckpt)
    x = Preprocessor(32)(Sample(load_image(paths[0]), 0))
    probs = softmax_np(model(Tensor(x[None])).data.astype(np.float64))[0]
    _, name, conf = lines[0].split("\t")
    assert name == ckpt.meta["class_names"][int(np.argmax(probs))]
    assert 0 < float(conf) <= 1 and abs(float(conf) - probs.max()) < 1e-6


def test_predict_all_failed(run, tmp_path):
    _, out = run
    (tmp_path / "bad.png").write_bytes(b"nope")
    assert main(["predict", str(out / "best.cvmx"), str(tmp_path / "bad.png")]) == 5


def test_features_export(run, tmp_path, capsys):
    data, out = run
    assert main(["features", str(out / "best.cvmx"), "--data", str(data), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "features_test.csv").read_text().splitlines()
    assert len(lines) == 7 and len(lines[0].split(",")) == 162


def test_split_manifest_with_augment(run, tmp_path, capsys):
    data, _ = run
    assert main(["split-manifest", "--data", str(data), "--out", str(tmp_path), "--augment4x"]) == 0
    report = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
    assert report == {"classes": "3", "train": "72", "train_original": "18", "val": "6", "test": "6", "total": "30"}


def test_augment4x_log_header(run, tmp_path):
    data, _ = run
    out = tmp_path / "aug"
    assert main(["train", "--data", str(data), "--out", str(out), "--epochs", "1", "--max-steps", "1",
                 "--augment4x"]) == 0
    assert (out / "train.log").read_text().splitlines()[0] == "# train_samples=72 val_samples=6"


def test_missing_data_root_exit_code(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path)]) == 3
    assert str(missing) in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "learning_rate": 0.1}))
    assert main(["split-manifest", "--config", str(cfg), "--data", str(tmp_path)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_flags_override_file(run, tmp_path):
    data, _ = run
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 5, "batch_size": 4, "max_steps": 1, "model": {"hidden_dim": 24}}))
    out = tmp_path / "o"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out), "--epochs", "1"]) == 0
    eff = json.loads((out / "config.json").read_text())
    assert eff["epochs"] == 1 and eff["batch_size"] == 4 and eff["model_config"]["hidden_dim"] == 24


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_abort_exit_code(run, tmp_path, capsys):
    data, _ = run
    assert main(["train", "--data", str(data), "--out", str(tmp_path), "--lr", "1e30", "--epochs", "3"]) == 4
    assert "non-finite loss" in capsys.readouterr().err


def test_single_image_dataset_dir(tmp_path):
    root = tmp_path / "d"
    (root / "a").mkdir(parents=True)
    save_image(ImageBuffer(np.zeros((4, 4, 3), np.uint8)), root / "a" / "x.png")
    assert main(["train", "--data", str(root), "--out", str(tmp_path / "o")]) == 3
