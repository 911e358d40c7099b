
from nullhead import training
from nullhead.cli import main
from nullhead.errors import DegenerateBatchError
from nullhead.data import load_csv

SMALL = ["--set", "blobs_classes=3", "--set", "blobs_dim=6", "--set", "blobs_per_class=40",
         "--feature-dim", "8", "--batch-size", "30", "--epochs", "2"]


def test_gen_blobs_csv(tmp_path, capsys):
    out = tmp_path / "b.csv"
    assert main(["gen-blobs", "--classes", "3", "--dim", "4", "--per-class", "5", "--out", str(out)]) == 0
    ds = load_csv(out)
    assert ds.inputs.shape == (4, 15) and ds.num_classes == 3
    assert out.read_text().splitlines()[0] == "label,f0,f1,f2,f3"


def test_train_eval_inspect(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", *SMALL, "--out", str(run), "--seed", "3"]) == 0
    cfg = run / "config.txt"
    assert "seed=3" in cfg.read_text()
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(run / "model.ckpt"), "--config", str(cfg),
                 "--out", str(tmp_path / "ev")]) == 0
    assert "top-5 error             0.0000" in capsys.readouterr().out
    header = (tmp_path / "ev.csv").read_text().splitlines()[1].split(",")
    assert "head_params" in header and "inference_seconds_per_batch" in header
    assert main(["inspect-checkpoint", str(run / "model.ckpt")]) == 0
    assert "head nullspace classifier" in capsys.readouterr().out


def test_train_from_config_file(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("blobs_classes=3\nblobs_dim=6\nblobs_per_class=40\nfeature_dim=8\nbatch_size=30\nepochs=1\n")
    assert main(["train", "--config", str(cfg), "--head", "softmax", "--out", str(tmp_path / "r")]) == 0
    assert "head=softmax" in (tmp_path / "r" / "metrics.csv").read_text()


def test_exit_codes(tmp_path, capsys):
    assert main(["train", "--epochs", "0"]) == 2
    assert main(["train", "--head", "svm"]) == 2
    assert main(["train", "--set", "dataset=csv", "--set", f"data_path={tmp_path}/none.csv"]) == 3
    assert main(["inspect-checkpoint", str(tmp_path / "missing.ckpt")]) == 3
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT")
    assert main(["inspect-checkpoint", str(bad)]) == 3
    assert main(["train", *SMALL, "--feature-dim", "1"]) == 2


def test_numerical_failure_exit_code(tmp_path, monkeypatch, capsys):
    def broken(*args, **kwargs):
        raise DegenerateBatchError("all features in the batch are identical (rank 0)")

    monkeypatch.setattr(training, "head_loss", broken)
    assert main(["train", *SMALL, "--out", str(tmp_path / "d")]) == 4
    assert "epoch 1 batch 0" in capsys.readouterr().err
