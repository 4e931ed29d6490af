"""Session fixtures shared by the acceptance suite: the desk-scale
glossy-bump dataset and the trained ablation columns.  These are
expensive (minutes), built once per session, and reused by several
criteria."""
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from neumat.dataset import GenConfig, generate_dataset
from neumat.evaluation import ablation_suite
from neumat.heightfield import bumps_material
from neumat.training import TrainConfig

# the desk-scale experiment: a glossy bumpy material with strong parallax,
# hard self-shadowing and clamped specular peaks
DESK_SEED = 1
DESK_MATERIAL = dict(bumps_per_side=4, roughness=0.10, specular_weight=0.5,
                     height_scale=0.18, radiance_clamp=4.0)
DESK_GEN = dict(resolution=64, levels=6, samples_level0=1 << 17, seed=0,
                roughness=0.10, specular_weight=0.5, height_scale=0.18,
                radiance_clamp=4.0)
DESK_ITERATIONS = 5000


def desk_train_config(out_dir, **kw):
    defaults = dict(out_dir=str(out_dir), iterations=DESK_ITERATIONS,
                    seed=DESK_SEED, tiles_per_batch=16, tile_h=16, tile_w=16,
                    lr=3e-3, checkpoint_period=1000)
    defaults.update(kw)
    return TrainConfig(**defaults)


@pytest.fixture(scope="session")
def desk_material():
    return bumps_material(64, seed=0, **DESK_MATERIAL)


@pytest.fixture(scope="session")
def desk_dataset(desk_material):
    return generate_dataset(desk_material, GenConfig(**DESK_GEN))


@pytest.fixture(scope="session")
def desk_ablation(desk_dataset, tmp_path_factory):
    """The four cumulative ablation columns trained at the desk budget
    with a shared seed; feeds the headline-ratio, monotonicity and
    level-of-detail criteria."""
    out = tmp_path_factory.mktemp("ablation")
    base = desk_train_config(out)
    report = ablation_suite(desk_dataset, base, out_dir=str(out),
                            iterations=DESK_ITERATIONS)
    return report, out


@pytest.fixture(scope="session")
def tiny_session_dataset():
    cfg = GenConfig(resolution=16, levels=3, samples_level0=8192, seed=3)
    return generate_dataset(bumps_material(16, seed=0), cfg)
