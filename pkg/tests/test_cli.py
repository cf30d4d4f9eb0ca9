import json

import numpy as np
import pytest

from htd import data as dio
from htd.cli import main
from htd.detection import read_scores

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")


TINY_SCENE = (
    "height = 16\n"
    "width = 16\n"
    "bands = 40\n"
    "endmembers = 3\n"
    "target_count = 12\n"
)

TINY_TRAIN = (
    "epochs = 1\n"
    "batch = 64\n"
    "patch = 3\n"
    "group_length = 8\n"
    "embed_size = 4\n"
    "state_size = 4\n"
    "feature_size = 8\n"
)


@pytest.fixture()
def scene_dir(tmp_path):
    spec = tmp_path / "scene.cfg"
    spec.write_text(TINY_SCENE)
    out = tmp_path / "scene"
    assert main(["synth", "--spec", str(spec), "--out", str(out)]) == 0
    return out


def test_synth_outputs_and_manifest(scene_dir):
    cube = dio.read_cube(scene_dir / "cube.hsb")
    mask = dio.read_mask(scene_dir / "mask.hsm", cube)
    target = dio.read_spectrum(scene_dir / "target.txt", cube)
    assert cube.values.shape == (16, 16, 40)
    assert mask.sum() == 12
    assert target.shape == (40,)
    manifest = json.loads((scene_dir / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 7
    assert set(manifest["outputs"]) == {"cube.hsb", "mask.hsm", "target.txt"}
    for digest in manifest["outputs"].values():
        assert len(digest) == 64


def test_synth_seed_override(tmp_path):
    for seed in (1, 2):
        assert main(["synth", "--out", str(tmp_path / str(seed)), "--seed", str(seed)]) == 0
    a = (tmp_path / "1" / "cube.hsb").read_bytes()
    b = (tmp_path / "2" / "cube.hsb").read_bytes()
    assert a != b
    manifest = json.loads((tmp_path / "1" / "manifest.json").read_text())
    assert manifest["seed"] == 1


def test_synth_bad_spec_key_is_usage_error(tmp_path):
    spec = tmp_path / "bad.cfg"
    spec.write_text("depth = 3\n")
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 2


def test_full_pipeline(scene_dir, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text(TINY_TRAIN)
    run = tmp_path / "run"
    rc = main([
        "train", "--cube", str(scene_dir / "cube.hsb"),
        "--config", str(cfg), "--out", str(run), "--quiet",
    ])
    assert rc == 0
    assert (run / "model.ckpt").exists()
    assert (run / "loss.csv").read_text().startswith("epoch,mean_loss,lr")

    det = tmp_path / "det"
    rc = main([
        "detect", "--cube", str(scene_dir / "cube.hsb"),
        "--target", str(scene_dir / "target.txt"),
        "--ckpt", str(run / "model.ckpt"), "--out", str(det),
    ])
    assert rc == 0
    scores = read_scores(det / "scores.htds")
    assert scores.shape == (16, 16)
    assert ((scores > 0) & (scores <= 1)).all()

    ev = tmp_path / "eval"
    rc = main([
        "eval", "--scores", str(det / "scores.htds"),
        "--mask", str(scene_dir / "mask.hsm"), "--out", str(ev),
    ])
    assert rc == 0
    header, row = (ev / "auc.csv").read_text().splitlines()
    assert header == "auc_pf_pd,auc_tau_pd,auc_tau_pf,auc_oa,auc_snpr"
    vals = [float(v) for v in row.split(",")]
    assert all(np.isfinite(vals[:4]))
    manifest = json.loads((ev / "manifest.json").read_text())
    assert set(manifest["outputs"]) == {"roc.csv", "auc.csv", "separability.csv"}


def test_detect_raw_flag(scene_dir, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text(TINY_TRAIN)
    run = tmp_path / "run"
    main(["train", "--cube", str(scene_dir / "cube.hsb"), "--config", str(cfg),
          "--out", str(run), "--quiet"])
    det = tmp_path / "det"
    rc = main([
        "detect", "--cube", str(scene_dir / "cube.hsb"),
        "--target", str(scene_dir / "target.txt"),
        "--ckpt", str(run / "model.ckpt"), "--out", str(det), "--raw",
    ])
    assert rc == 0
    raw = read_scores(det / "scores_raw.htds")
    assert (np.abs(raw) <= 1.0).all()


def test_train_bad_config_is_usage_error(scene_dir, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("patch = 4\n")
    rc = main(["train", "--cube", str(scene_dir / "cube.hsb"),
               "--config", str(cfg), "--out", str(tmp_path / "o"), "--quiet"])
    assert rc == 2


def test_corrupt_cube_is_usage_error(tmp_path):
    bad = tmp_path / "bad.hsb"
    bad.write_bytes(b"WHAT" + bytes(16))
    rc = main(["train", "--cube", str(bad), "--out", str(tmp_path / "o"), "--quiet"])
    assert rc == 2


def test_missing_cube_is_runtime_error(tmp_path):
    rc = main(["train", "--cube", str(tmp_path / "nope.hsb"),
               "--out", str(tmp_path / "o"), "--quiet"])
    assert rc == 1


def test_eval_extent_mismatch_is_usage_error(scene_dir, tmp_path):
    from htd.detection import write_scores

    path = tmp_path / "s.htds"
    write_scores(path, np.zeros((4, 4)))
    rc = main(["eval", "--scores", str(path),
               "--mask", str(scene_dir / "mask.hsm"), "--out", str(tmp_path / "o")])
    assert rc == 2


def test_detect_negative_delta_is_usage_error(scene_dir, tmp_path):
    rc = main([
        "detect", "--cube", str(scene_dir / "cube.hsb"),
        "--target", str(scene_dir / "target.txt"),
        "--ckpt", str(scene_dir / "cube.hsb"),  # never reached
        "--out", str(tmp_path / "o"), "--delta", "-1",
    ])
    assert rc == 2


def test_verify_scan_and_metrics_suites(capsys):
    assert main(["verify", "--suite", "scan"]) == 0
    assert main(["verify", "--suite", "metrics"]) == 0
    out = capsys.readouterr().out
    assert "scan: PASS" in out
    assert "metrics: PASS" in out
