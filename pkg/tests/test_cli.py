import json

import numpy as np
import pytest
from PIL import Image

from pbnet import cli
from pbnet.config import tiny_preset
from pbnet.network import PBNet, count_macs, count_parameters, load_checkpoint


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Phantom dataset, 2-fold manifest and a one-epoch checkpoint shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["phantoms", "--count", "6", "--size", "64", "--out", str(root / "data")]) == 0
    assert cli.main(["split", "--root", str(root / "data"), "--layout", "generic", "--k", "2",
                     "--size", "64", "64", "--out", str(root / "split")]) == 0
    assert cli.main(["train", "--preset", "tiny", "--set", "train.epochs=1", "--fold", "0",
                     "--manifest", str(root / "split" / "manifest.json"), "--out", str(root / "train")]) == 0
    return root


def test_train_outputs(workspace):
    files = {p.name for p in (workspace / "train").iterdir()}
    assert {"best.pt", "last.pt", "log.jsonl", "config.yaml", "metrics.csv", "summary.json"} <= files
    _, cfg, meta = load_checkpoint(workspace / "train" / "best.pt")
    assert cfg.train.epochs == 1 and meta["fold"] == 0
    assert set(meta["extra"]["normalization"]) == {"mean", "std"}


def test_scan(workspace, capsys, tmp_path):
    code, out, _ = run(capsys, "scan", "--root", workspace / "data", "--layout", "generic", "--out", tmp_path / "s")
    assert code == 0 and json.loads(out)["records"] == 6
    report = json.loads((tmp_path / "s" / "scan.json").read_text())
    assert len(report["records"]) == 6 and report["issues"] == []


def test_manifest_contents(workspace):
    m = json.loads((workspace / "split" / "manifest.json").read_text())
    assert m["k"] == 2 and len(m["records"]) == 6
    assert sorted(r["fold"] for r in m["records"]) == [0, 0, 0, 1, 1, 1]
    assert len(m["normalization"]["mean"]) == 3


def test_refuses_non_empty_out(workspace, capsys):
    code, _, err = run(capsys, "scan", "--root", workspace / "data", "--layout", "generic", "--out", workspace / "train")
    assert code == 2
    assert json.loads(err)["error"] == "ConfigError"


def test_overwrite_idempotent(workspace, capsys, tmp_path):
    args = ["split", "--root", workspace / "data", "--layout", "generic", "--k", "2", "--size", "64", "64",
            "--out", tmp_path / "sp", "--overwrite"]
    assert run(capsys, *args)[0] == 0
    first = (tmp_path / "sp" / "manifest.json").read_bytes()
    assert run(capsys, *args)[0] == 0
    assert (tmp_path / "sp" / "manifest.json").read_bytes() == first


def test_exit_codes(workspace, capsys, tmp_path):
    code, _, err = run(capsys, "scan", "--root", tmp_path / "missing", "--out", tmp_path / "o")
    assert code == 3 and json.loads(err)["error"] == "DataError"
    code, _, _ = run(capsys, "info", "--set", "bgm.enabled=false")
    assert code == 2
    code, _, _ = run(capsys, "info", "--set", "nonsense.key=1")
    assert code == 2


def test_info_matches_counters(capsys):
    code, out, _ = run(capsys, "info", "--preset", "tiny")
    info = json.loads(out)
    model = PBNet.from_config(tiny_preset())
    assert code == 0
    assert info["params"] == count_parameters(model)
    assert info["macs"] == count_macs(model, (64, 64))


def test_eval(workspace, capsys, tmp_path):
    code, out, _ = run(capsys, "eval", "--checkpoint", workspace / "train" / "best.pt",
                       "--manifest", workspace / "split" / "manifest.json", "--fold", "0", "--out", tmp_path / "e")
    assert code == 0 and json.loads(out)["images"] == 3
    assert (tmp_path / "e" / "metrics.csv").read_text().startswith("id,fold,dice,jac,sen,spe,hd,hd95")


def test_infer_directory_and_padding(workspace, capsys, tmp_path):
    inp = tmp_path / "imgs"
    masks = tmp_path / "masks"
    inp.mkdir()
    masks.mkdir()
    src = sorted((workspace / "data" / "images").iterdir())
    for p in src:
        Image.open(p).save(inp / p.name)
    odd = np.asarray(Image.open(src[0]))[:50, :60]
    Image.fromarray(odd).save(inp / "odd.png")
    Image.fromarray(np.zeros((50, 60), np.uint8)).save(masks / "odd.png")
    code, _, _ = run(capsys, "infer", "--checkpoint", workspace / "train" / "best.pt", "--input", inp,
                     "--masks", masks, "--out", tmp_path / "o")
    assert code == 0
    names = {p.name for p in (tmp_path / "o").iterdir()}
    assert {f"{p.stem}_pred.png" for p in src} | {"odd_pred.png", "odd_prob.png", "odd_overlay.png"} <= names
    meta = json.loads((tmp_path / "o" / "inference.json").read_text())
    assert meta["odd"]["padded"] == [14, 4] and meta["phantom_0000"]["padded"] == [0, 0]
    assert np.asarray(Image.open(tmp_path / "o" / "odd_pred.png")).shape == (50, 60)


def test_visualize(workspace, capsys, tmp_path):
    img = workspace / "data" / "images" / "phantom_0000.png"
    mask = workspace / "data" / "masks" / "phantom_0000.png"
    code, _, _ = run(capsys, "visualize", "--checkpoint", workspace / "train" / "best.pt", "--image", img,
                     "--mask", mask, "--out", tmp_path / "v")
    assert code == 0
    names = {p.name for p in (tmp_path / "v").iterdir()}
    for l in (1, 2, 3):
        assert {f"phantom_0000_ms_l{l}.png", f"phantom_0000_boundary_l{l}.png", f"phantom_0000_tb_l{l}.png",
                f"phantom_0000_mc_l{l}.json", f"phantom_0000_p_l{l}.png"} <= names


def test_cv_and_ablate(workspace, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, out, _ = run(capsys, "cv", "--preset", "tiny", "--set", "train.epochs=1",
                       "--manifest", workspace / "split" / "manifest.json", "--out", "cv")
    assert code == 0 and json.loads(out)["folds"] == 2
    assert (tmp_path / "cv" / "fold_1" / "best.pt").exists()
    code, out, _ = run(capsys, "ablate", "--preset", "tiny", "--set", "train.epochs=1", "--set",
                       "train.steps_per_epoch=1", "--phantoms", "4", "--rows", "baseline,full", "--out", "abl")
    assert code == 0
    table = (tmp_path / "abl" / "ablation.tsv").read_text().splitlines()
    assert len(table) == 3 and table[0].startswith("name\tmgpm")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["abl", "cv"]
