import json
import subprocess
import sys

import numpy as np
import pytest

from moespnet import formats
from moespnet.cli import main
from moespnet.config import ModelConfig, RunConfig, TrainConfig
from moespnet.metrics import ConfusionMatrix, all_metrics

SMALL = ModelConfig(backbone_widths=(4, 4, 8, 8, 8), dilations=(1, 2), expert_width=8, gate_hidden=8)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate-data", "--out", str(root / "data"), "--train", "6", "--val", "2", "--seed", "1"]) == 0
    cfg = RunConfig(model="moe-spnet", model_config=SMALL, train=TrainConfig(max_iter=3, stage2_iter=2))
    (root / "run.json").write_text(json.dumps(cfg.to_dict()))
    return root


def run_json(capsys, argv):
    code = main(argv)
    out = capsys.readouterr().out
    return code, json.loads(out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def trained(workspace):
    for kind in ("moe-spnet", "fcn-ahfa"):
        assert main(["train", "--config", str(workspace / "run.json"), "--model", kind,
                     "--data", str(workspace / "data"), "--out", str(workspace / kind)]) == 0
    return workspace


def test_train_outputs(trained):
    for stage in ("stage1", "stage2"):
        d = trained / "moe-spnet" / stage
        assert (d / "manifest.json").exists() and (d / "stage.json").exists()
        assert (d / "loss.csv").read_text().splitlines()[0] == "iter,lr,loss"


def test_eval_matches_metrics_module(trained, capsys, tmp_path):
    ckpt = trained / "fcn-ahfa" / "stage2"
    code, m = run_json(capsys, ["eval", "--checkpoint", str(ckpt), "--data", str(trained / "data"),
                                "--out", str(tmp_path / "m.json")])
    assert code == 0 and json.loads((tmp_path / "m.json").read_text()) == m
    from moespnet.data import load_split
    from moespnet.train import load_model
    from moespnet.tensor import Tensor
    model, _, _ = load_model(ckpt)
    val = load_split(trained / "data", "val")
    cm = ConfusionMatrix(5).accumulate(model.predict(Tensor(val.images)), val.labels[:, 0])
    assert m == json.loads(json.dumps(all_metrics(cm)))


def test_infer_writes_labels_and_probs(trained, capsys, tmp_path):
    code, out = run_json(capsys, ["infer", "--checkpoint", str(trained / "moe-spnet" / "stage2"),
                                  "--image", str(trained / "data" / "val" / "0.sptn"),
                                  "--out", str(tmp_path), "--probs"])
    assert code == 0
    lab, ignore = formats.read_splb(tmp_path / "0.splb")
    probs = formats.read_sptn(tmp_path / "0_probs.sptn")
    assert lab.shape == (64, 64) and ignore == 255
    assert probs.shape == (1, 5, 64, 64)
    assert np.array_equal(probs[0].argmax(0), lab)
    np.testing.assert_allclose(probs.sum(1), 1, atol=1e-5)


def test_infer_is_deterministic(trained, tmp_path):
    args = ["infer", "--checkpoint", str(trained / "fcn-ahfa" / "stage2"),
            "--image", str(trained / "data" / "val" / "1.sptn")]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "1.splb").read_bytes() == (tmp_path / "b" / "1.splb").read_bytes()


@pytest.mark.parametrize("kind,names", [("moe-spnet", ["gate_expert0", "gate_expert1"]),
                                        ("fcn-ahfa", ["ahfa_w8", "ahfa_w16", "ahfa_w32"])])
def test_dump_gates(trained, tmp_path, kind, names):
    assert main(["dump-gates", "--checkpoint", str(trained / kind / "stage2"),
                 "--image", str(trained / "data" / "val" / "0.sptn"), "--out", str(tmp_path)]) == 0
    for n in names:
        px = formats.read_pgm(tmp_path / f"{n}.pgm")
        assert px.dtype == np.uint8 and px.shape[0] == px.shape[1]


def test_dump_gates_on_baseline_is_an_error(trained, capsys):
    assert main(["dump-gates", "--checkpoint", str(trained / "fcn-ahfa" / "stage1"),
                 "--image", str(trained / "data" / "val" / "0.sptn"), "--out", str(trained / "x")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ValueError:")


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--op", "relu,conv2d_dilated"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [l.split()[0] for l in lines] == ["PASS", "PASS"]


@pytest.mark.parametrize("argv,code", [
    (["train", "--data", "/nonexistent", "--out", "/tmp/x"], 2),
    (["train", "--out", "/tmp/x"], 2),
    (["eval", "--checkpoint", "/nonexistent"], 1),
    (["gradcheck", "--op", "no_such_op"], 1),
])
def test_errors_are_one_line(capsys, argv, code):
    assert main(argv) == code
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ")


def test_stage2_without_stage1(workspace, capsys, tmp_path):
    code = main(["train", "--config", str(workspace / "run.json"), "--data", str(workspace / "data"),
                 "--out", str(tmp_path), "--stage", "2"])
    assert code == 2
    assert "UsageError" in capsys.readouterr().err


def test_unknown_config_key(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": "moe-spnet", "train": {"lr": 1}}))
    assert main(["train", "--config", str(bad), "--data", str(workspace / "data"), "--out", str(tmp_path)]) == 1
    assert "unknown key" in capsys.readouterr().err


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "moespnet", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gradcheck" in r.stdout
