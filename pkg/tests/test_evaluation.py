import json

import numpy as np
import pytest

from neumat.dataset import GenConfig, generate_dataset
from neumat.evaluation import (ABLATION_COLUMNS, EvalError, ablation_config,
                               ablation_suite, check_compatible,
                               compute_error_report)
from neumat.heightfield import bumps_material
from neumat.model import ModelConfig, NeuralMaterial
from neumat.training import TrainConfig


@pytest.fixture(scope="module")
def tiny_ds():
    cfg = GenConfig(resolution=16, levels=3, samples_level0=4096, seed=3)
    return generate_dataset(bumps_material(16, seed=0), cfg)


def tiny_material(base_resolution=16, **kw):
    cfg = ModelConfig(base_resolution=base_resolution, pyramid_channels=4,
                      offset_channels=4, hidden_width=16, offset_hidden=8,
                      u_frequencies=3, dir_frequencies=2, **kw)
    return NeuralMaterial(cfg, seed=4)


def zero_output_material():
    mat = tiny_material()
    mat.decoder.weights[-1].data[:] = 0
    mat.decoder.biases[-1].data[:] = 0
    return mat


def test_zero_model_mse_equals_mean_power(tiny_ds, tmp_path):
    report = compute_error_report(zero_output_material(), tiny_ds)
    for level in range(tiny_ds.level_count):
        expect = float((tiny_ds.slices[level].radiance.astype(np.float64) ** 2).mean())
        np.testing.assert_allclose(report.per_level_mse_x1000[level],
                                   expect * 1e3, rtol=1e-5)


def test_overall_equals_weighted_per_level(tiny_ds):
    report = compute_error_report(tiny_material(), tiny_ds)
    weights = np.array(report.per_level_counts, dtype=np.float64)
    weighted = (np.array(report.per_level_mse_x1000) * weights).sum() / weights.sum()
    np.testing.assert_allclose(report.overall_mse_x1000, weighted, rtol=1e-12)


def test_report_json_stable_and_files(tiny_ds, tmp_path):
    out = tmp_path / "rep"
    report = compute_error_report(tiny_material(), tiny_ds, out_dir=str(out))
    payload = json.loads(report.to_json())
    assert list(payload) == sorted(payload)
    assert (out / "report.json").exists()
    for level in range(tiny_ds.level_count):
        assert (out / f"diff_level{level}.png").exists()
    assert report.queries_per_second > 0
    assert "l1" in report.loss_terms and "gradient" in report.loss_terms


def test_incompatible_checkpoint_rejected(tiny_ds):
    with pytest.raises(EvalError, match="32"):
        check_compatible(tiny_material(base_resolution=32), tiny_ds)


def test_ablation_config_stacks_switches():
    base = TrainConfig(seed=9)
    cols = [ablation_config(base, k, f"o{k}", 100) for k in range(4)]
    assert [(c.encoding_on, c.gradient_loss_on, c.remap_on) for c in cols] == \
        [(False, False, False), (True, False, False), (True, True, False),
         (True, True, True)]
    # column 0 hashes identically to an explicitly built pure baseline
    pure = TrainConfig(seed=9, encoding_on=False, gradient_loss_on=False,
                       remap_on=False, out_dir="elsewhere", iterations=100)
    assert cols[0].semantic_hash("d") == pure.semantic_hash("d")
    # shared seed across all columns
    assert len({c.seed for c in cols}) == 1


def test_ablation_suite_smoke(tiny_ds, tmp_path):
    base = TrainConfig(out_dir=str(tmp_path), seed=2, tiles_per_batch=2,
                       tile_h=8, tile_w=8, checkpoint_period=30,
                       pyramid_channels=4, hidden_width=16)
    report = ablation_suite(tiny_ds, base, out_dir=str(tmp_path / "abl"),
                            iterations=30)
    assert report.columns == list(ABLATION_COLUMNS)
    assert len(report.mse_x1000) == 4
    assert not report.partial
    strip_path = tmp_path / "abl" / "ablation_strip.png"
    assert strip_path.exists()
    from PIL import Image

    strip = np.asarray(Image.open(strip_path))
    r = tiny_ds.level_resolution(0)
    assert strip.shape == (r, 5 * r + 4 * 4, 3)  # 4 configs + reference
    assert (tmp_path / "abl" / "ablation_report.json").exists()
