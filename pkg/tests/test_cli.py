import hashlib
import json

import numpy as np
import pytest

from transop.cli import main
from transop.data import Volume, read_volume, write_volume
from transop.tensor import Tensor


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--n", "100", "--seed", "3", "--out", str(root / "data")]) == 0
    assert main(
        ["train", "--preset", "tiny", "--data", str(root / "data"), "--out", str(root / "run"), "--epochs", "2"]
    ) == 0
    return root


class TestSynth:
    def test_twice_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(["synth", "--n", "30", "--seed", "7", "--out", str(tmp_path / name)]) == 0
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_split_counts(self, workspace):
        split = json.loads((workspace / "data" / "split.json").read_text())
        assert [len(split[k]) for k in ("train", "val", "test")] == [70, 15, 15]

    def test_too_few(self, tmp_path, capsys):
        assert main(["synth", "--n", "5", "--out", str(tmp_path / "x")]) != 0
        assert capsys.readouterr().err.startswith("error:")

    def test_run_dir_append_only(self, workspace, capsys):
        assert main(["synth", "--n", "30", "--out", str(workspace / "data")]) != 0
        assert "append-only" in capsys.readouterr().err


class TestPreprocess:
    def test_output_dims(self, workspace, tmp_path):
        src = workspace / "data" / "volumes" / "P0000.svl"
        assert main(["preprocess", "--in", str(src), "--out", str(tmp_path / "p")]) == 0
        assert read_volume(tmp_path / "p" / "P0000.svl").dims == (32, 192, 128)

    def test_idempotent(self, workspace, tmp_path):
        src = workspace / "data" / "volumes" / "P0001.svl"
        args = ["--target", "8,24,16", "--skip-skull-strip"]
        assert main(["preprocess", "--in", str(src), "--out", str(tmp_path / "once"), *args]) == 0
        once = tmp_path / "once" / "P0001.svl"
        assert main(["preprocess", "--in", str(once), "--out", str(tmp_path / "twice"), *args]) == 0
        a, b = read_volume(once).voxels, read_volume(tmp_path / "twice" / "P0001.svl").voxels
        assert np.abs(a - b).max() <= 1e-10

    def test_corrupt_file_named(self, tmp_path, capsys):
        write_volume(tmp_path / "good.svl", Volume(np.zeros((2, 2, 2))))
        (tmp_path / "bad.svl").write_bytes((tmp_path / "good.svl").read_bytes()[:-5])
        assert main(["preprocess", "--in", str(tmp_path / "bad.svl"), "--out", str(tmp_path / "o")]) != 0
        err = capsys.readouterr().err
        assert err.startswith("error:") and "bad.svl" in err


class TestTrain:
    def test_artifacts(self, workspace):
        names = {p.name for p in (workspace / "run").iterdir()}
        assert {"checkpoint.zip", "history.csv", "config.json", "manifest.json"} <= names
        manifest = json.loads((workspace / "run" / "manifest.json").read_text())
        assert manifest["command"] == "train" and manifest["seeds"] == {"seed": 0}

    def test_same_seed_same_history(self, workspace, tmp_path):
        args = ["train", "--preset", "tiny", "--data", str(workspace / "data"), "--epochs", "2"]
        assert main([*args, "--out", str(tmp_path / "again")]) == 0
        assert (tmp_path / "again" / "history.csv").read_bytes() == (workspace / "run" / "history.csv").read_bytes()

    def test_missing_config_key(self, workspace, tmp_path, capsys):
        cfg = json.loads((workspace / "run" / "config.json").read_text())
        del cfg["train"]["weight_decay"]
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        code = main(["train", "--config", str(tmp_path / "c.json"), "--data", str(workspace / "data"), "--out", str(tmp_path / "r")])
        assert code != 0
        assert "train.weight_decay" in capsys.readouterr().err


class TestEvalPredict:
    def test_eval(self, workspace, capsys):
        ckpt = workspace / "run" / "checkpoint.zip"
        out = workspace / "eval"
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(workspace / "data"), "--out", str(out), "--resamples", "200"]) == 0
        rows = [ln.split(",") for ln in (out / "report.csv").read_text().splitlines()]
        assert rows[0] == ["metric", "value", "ci_lo", "ci_hi"]
        for name, v, lo, hi in rows[1:4]:
            assert float(lo) <= float(v) <= float(hi)
        assert len((out / "predictions.csv").read_text().splitlines()) == 16
        assert "AUC" in capsys.readouterr().out

    def test_missing_split(self, workspace, tmp_path, capsys):
        ckpt = workspace / "run" / "checkpoint.zip"
        code = main(["eval", "--checkpoint", str(ckpt), "--data", str(workspace / "data"), "--split", "holdout", "--out", str(tmp_path / "e")])
        assert code != 0
        assert "holdout" in capsys.readouterr().err

    def test_predict_deterministic(self, workspace, capsys):
        args = [
            "predict",
            "--checkpoint", str(workspace / "run" / "checkpoint.zip"),
            "--volume", str(workspace / "data" / "volumes" / "P0004.svl"),
            "--clinical", str(workspace / "data" / "clinical.csv"),
        ]
        outs = []
        for _ in range(2):
            assert main(args) == 0
            outs.append(capsys.readouterr().out)
        assert outs[0] == outs[1]
        assert "p_bad=" in outs[0] and "label=" in outs[0]


class TestGradcheck:
    def test_passes_and_lists_components(self, capsys):
        assert main(["gradcheck"]) == 0
        lines = capsys.readouterr().out.splitlines()[:-1]
        names = [ln.split()[0] for ln in lines]
        assert len(names) == len(set(names))
        for layer in ("linear", "layer_norm", "mhsa", "mlp_block", "dropout", "patch_embed", "conv_stem"):
            assert names.count(layer) == 1

    def test_broken_gelu_gradient_fails(self, monkeypatch, capsys):
        original = Tensor.gelu

        def wrong_gelu(self):
            out = original(self)
            return Tensor._from_op(out.data, (self,), lambda g: (g,), "gelu")

        monkeypatch.setattr(Tensor, "gelu", wrong_gelu)
        assert main(["gradcheck"]) != 0
        captured = capsys.readouterr()
        assert "FAIL" in captured.out
        assert captured.err.startswith("error:")


def test_init_config_round_trips(capsys, tmp_path):
    from transop.train import RunConfig

    assert main(["init-config", "--preset", "tiny"]) == 0
    (tmp_path / "c.json").write_text(capsys.readouterr().out)
    assert RunConfig.load(tmp_path / "c.json").model.embed_dim == 32
