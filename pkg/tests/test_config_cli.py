import json

import numpy as np
import pytest

from semfuse import fileio
from semfuse.cli import PALETTE, VOID_COLOUR, colourise, main
from semfuse.config import ConfigError, RunConfig
from semfuse.scene import VOID_ID

TINY = """\
seed = 3
image_width = 40
image_height = 30
n_frames = 3
grid_dims = 32
layers = 1
hidden = 4
kernel = 3
scales = 0
epochs = 1
"""


def test_config_round_trip():
    cfg = RunConfig.from_text(TINY)
    assert cfg.seed == 3 and cfg.train_config().scales == (0,)
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_config_rejects_unknown_and_duplicate_keys():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_text("colour = red\n")
    with pytest.raises(ConfigError, match="duplicate"):
        RunConfig.from_text("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("seed = one\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("n_frames = 0\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("scales = 1,2\n")  # four layers by default


def test_config_comments_and_seed_override():
    cfg = RunConfig.from_text("# header\nseed = 4  # trailing\n\n")
    assert cfg.seed == 4 and cfg.with_seed(None) is cfg and cfg.with_seed(9).seed == 9


def test_palette_distinct():
    assert len({tuple(c) for c in PALETTE}) == len(PALETTE) == 5
    img = colourise(np.array([[0, 4, VOID_ID]], np.uint8))
    assert img[0, 0].tolist() == PALETTE[0].tolist() and img[0, 2].tolist() == VOID_COLOUR.tolist()


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["bogus"]) == 1
    assert main(["generate"]) == 1  # --out missing
    bad = tmp_path / "bad.txt"
    bad.write_text("nope = 1\n")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    zero = tmp_path / "zero.txt"
    zero.write_text("n_frames = 0\n")
    assert main(["generate", "--config", str(zero), "--out", str(tmp_path / "o")]) == 1


def test_runtime_errors_exit_2(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text(TINY)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "t"), str(tmp_path / "missing")]) == 2


@pytest.fixture(scope="module")
def workflow(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "c.txt"
    cfg.write_text(TINY)
    c = ["--config", str(cfg)]
    assert main(["generate", *c, "--out", str(root / "a")]) == 0
    assert main(["generate", *c, "--out", str(root / "b")]) == 0
    assert main(["train", *c, "--out", str(root / "w"), str(root / "a")]) == 0
    assert main(["run", *c, "--out", str(root / "r"), str(root / "b"), "--weights", str(root / "w" / "weights.bin")]) == 0
    return root, c


def test_generate_is_deterministic(workflow, tmp_path):
    root, c = workflow
    assert main(["generate", *c, "--out", str(tmp_path / "a2")]) == 0
    for f in sorted((root / "a").iterdir()):
        if f.name != "versions.json":
            assert (tmp_path / "a2" / f.name).read_bytes() == f.read_bytes(), f.name
    assert fileio.list_frames(root / "a") == [0, 1, 2]


def test_seed_changes_dataset(workflow, tmp_path):
    root, c = workflow
    assert main(["generate", *c, "--seed", "4", "--out", str(tmp_path / "s4")]) == 0
    assert (tmp_path / "s4" / "scene.obj").read_bytes() != (root / "a" / "scene.obj").read_bytes()


def test_run_outputs(workflow):
    root, _ = workflow
    r = root / "r"
    for name in ("tsdf.vol", "labels.lvol", "ground_truth.lvol", "metrics.json", "config.txt", "versions.json"):
        assert (r / name).exists(), name
    m = json.loads((r / "metrics.json").read_text())
    assert m["frames_processed"] == 3 and m["tracking_lost_at"] is None
    assert 0 <= m["voxel"]["accuracy"] <= 1
    assert RunConfig.load(r / "config.txt") == RunConfig.from_text(TINY)


def test_eval_identity(workflow):
    root, c = workflow
    lab = root / "r" / "labels.lvol"
    assert main(["eval", *c, "--out", str(root / "e"), str(lab), str(lab)]) == 0
    m = json.loads((root / "e" / "metrics.json").read_text())
    assert m["accuracy"] == 1.0
    assert main(["eval", *c, "--out", str(root / "e2"), str(root / "r" / "views"), str(root / "b")]) == 0
    assert (root / "e2" / "images" / "frame_00000.pred.png").exists()


def test_resume_from_layer_reproduces(workflow, tmp_path):
    root, _ = workflow
    cfg = tmp_path / "c2.txt"
    cfg.write_text(TINY.replace("layers = 1", "layers = 2").replace("scales = 0", "scales = 1,0"))
    c = ["--config", str(cfg)]
    assert main(["train", *c, "--out", str(tmp_path / "full"), str(root / "a")]) == 0
    full = tmp_path / "full" / "weights.bin"
    assert main(["train", *c, "--out", str(tmp_path / "res"), str(root / "a"),
                 "--resume-from-layer", "2", "--weights", str(full)]) == 0
    assert (tmp_path / "res" / "weights.bin").read_bytes() == full.read_bytes()
    assert main(["train", *c, "--out", str(tmp_path / "x"), str(root / "a"), "--resume-from-layer", "2"]) == 1
