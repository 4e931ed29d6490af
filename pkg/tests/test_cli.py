import json

import numpy as np
import pytest

from neumat.cli import main
from neumat.dataset import file_sha256


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def tiny_dataset_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.nmds"
    rc = run_cli("gen-data", "--out", str(path), "--seed", "7",
                 "--resolution", "16", "--levels", "3",
                 "--samples-level0", "4096")
    assert rc == 0
    return path


@pytest.fixture(scope="module")
def tiny_checkpoint(tiny_dataset_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = run_cli("train", "--dataset", str(tiny_dataset_path),
                 "--out", str(out), "--iterations", "20",
                 "--tiles-per-batch", "2", "--tile-h", "8", "--tile-w", "8",
                 "--checkpoint-period", "10", "--seed", "3",
                 "--pyramid-channels", "4", "--hidden-width", "16")
    assert rc == 0
    return out / "ckpt_000020.nmat"


def test_gen_data_deterministic(tmp_path):
    p1 = tmp_path / "a.nmds"
    p2 = tmp_path / "b.nmds"
    for p in (p1, p2):
        rc = run_cli("gen-data", "--out", str(p), "--seed", "7",
                     "--resolution", "16", "--levels", "2",
                     "--samples-level0", "1024")
        assert rc == 0
    assert file_sha256(p1) == file_sha256(p2)


def test_help_exits_zero():
    for argv in (["--help"], ["render", "--help"], ["gen-data", "--help"]):
        with pytest.raises(SystemExit) as info:
            run_cli(*argv)
        assert info.value.code == 0


def test_unknown_flag_exits_one():
    with pytest.raises(SystemExit) as info:
        run_cli("render", "--no-such-flag")
    assert info.value.code == 1


def test_missing_subcommand_exits_one():
    with pytest.raises(SystemExit) as info:
        run_cli()
    assert info.value.code == 1


def test_train_writes_manifest_and_checkpoint(tiny_checkpoint):
    assert tiny_checkpoint.exists()
    manifest = json.loads((tiny_checkpoint.parent / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["dataset_sha256"]
    assert manifest["git_describe"]
    assert manifest["arguments"]["seed"] == 3


def test_render_writes_images(tiny_checkpoint, tmp_path):
    prefix = tmp_path / "img"
    rc = run_cli("render", "--checkpoint", str(tiny_checkpoint),
                 "--out-prefix", str(prefix), "--width", "24", "--height", "24")
    assert rc == 0
    assert (tmp_path / "img.pfm").exists()
    assert (tmp_path / "img.png").exists()
    from neumat.imgio import read_pfm, tonemap
    from PIL import Image

    hdr = read_pfm(tmp_path / "img.pfm")
    png = np.asarray(Image.open(tmp_path / "img.png"))
    np.testing.assert_array_equal(png, tonemap(hdr))


def test_eval_writes_report(tiny_checkpoint, tiny_dataset_path, tmp_path, capsys):
    out = tmp_path / "rep"
    rc = run_cli("eval", "--checkpoint", str(tiny_checkpoint),
                 "--dataset", str(tiny_dataset_path), "--out", str(out))
    assert rc == 0
    report = json.loads((out / "report.json").read_text())
    assert report["overall_mse_x1000"] >= 0
    assert len(report["per_level_mse_x1000"]) == 3


def test_eval_mismatched_pair_exits_two(tiny_checkpoint, tmp_path, capsys):
    other = tmp_path / "other.nmds"
    assert run_cli("gen-data", "--out", str(other), "--seed", "1",
                   "--resolution", "32", "--levels", "2",
                   "--samples-level0", "2048") == 0
    rc = run_cli("eval", "--checkpoint", str(tiny_checkpoint),
                 "--dataset", str(other), "--out", str(tmp_path / "r"))
    assert rc == 2
    err = capsys.readouterr().err
    assert "16" in err and "32" in err  # explicit shape diagnostic


def test_resume_via_cli(tiny_checkpoint, tiny_dataset_path, tmp_path):
    halfway = tiny_checkpoint.parent / "ckpt_000010.nmat"
    rc = run_cli("resume", "--checkpoint", str(halfway),
                 "--dataset", str(tiny_dataset_path),
                 "--out", str(tmp_path / "resumed"), "--iterations", "20",
                 "--tiles-per-batch", "2", "--tile-h", "8", "--tile-w", "8",
                 "--checkpoint-period", "10", "--seed", "3",
                 "--pyramid-channels", "4", "--hidden-width", "16")
    assert rc == 0
    resumed = (tmp_path / "resumed" / "ckpt_000020.nmat").read_bytes()
    direct = tiny_checkpoint.read_bytes()
    assert resumed == direct


def test_config_file_with_cli_override(tiny_dataset_path, tmp_path):
    cfgfile = tmp_path / "t.cfg"
    cfgfile.write_text("iterations=500\nseed=3\ntile_h=8\ntile_w=8\n"
                       "tiles_per_batch=2\ncheckpoint_period=10\n"
                       "pyramid_channels=4\nhidden_width=16\n")
    rc = run_cli("train", "--dataset", str(tiny_dataset_path),
                 "--out", str(tmp_path / "o"), "--config", str(cfgfile),
                 "--iterations", "10")
    assert rc == 0
    # CLI --iterations 10 beat the file's 500
    assert (tmp_path / "o" / "ckpt_000010.nmat").exists()
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["arguments"]["iterations"] == 10
    assert manifest["arguments"]["seed"] == 3


def test_bad_config_file_exits_two(tiny_dataset_path, tmp_path, capsys):
    cfgfile = tmp_path / "bad.cfg"
    cfgfile.write_text("volume=11\n")
    rc = run_cli("train", "--dataset", str(tiny_dataset_path),
                 "--out", str(tmp_path / "o2"), "--config", str(cfgfile))
    assert rc == 2
    assert "unknown key" in capsys.readouterr().err


def test_ablate_smoke(tiny_dataset_path, tmp_path):
    rc = run_cli("ablate", "--dataset", str(tiny_dataset_path),
                 "--out", str(tmp_path / "abl"), "--iterations", "15",
                 "--tiles-per-batch", "2", "--tile-h", "8", "--tile-w", "8",
                 "--checkpoint-period", "15", "--seed", "2",
                 "--pyramid-channels", "4", "--hidden-width", "16")
    assert rc == 0
    report = json.loads((tmp_path / "abl" / "ablation_report.json").read_text())
    assert len(report["mse_x1000"]) == 4
    assert (tmp_path / "abl" / "ablation_strip.png").exists()
