import numpy as np
import pytest

from neumat import dataset as dsm
from neumat.dataset import (Dataset, DatasetFormatError, GenConfig, LevelSlice,
                            footprint_radiance, generate_dataset, generate_level,
                            load_dataset, save_dataset)
from neumat.heightfield import (bumps_material, radiance_ceiling, shade_reference,
                                woven_material)


def small_config(**kw):
    defaults = dict(resolution=16, levels=3, samples_level0=1024, seed=3)
    defaults.update(kw)
    return GenConfig(**defaults)


@pytest.fixture(scope="module")
def small_dataset():
    cfg = small_config()
    mat = bumps_material(cfg.resolution, seed=cfg.material_seed)
    return generate_dataset(mat, cfg), mat, cfg


def test_level0_equals_direct_oracle_calls(small_dataset):
    ds, mat, _ = small_dataset
    q = ds.slices[0].queries
    rad = shade_reference(mat, q[:, 0:2].astype(np.float64),
                          q[:, 2:4].astype(np.float64),
                          q[:, 4:6].astype(np.float64))
    np.testing.assert_array_equal(rad, ds.slices[0].radiance)


def test_counts_round_up_to_whole_groups(small_dataset):
    ds, _, cfg = small_dataset
    for lvl in range(ds.level_count):
        texels = ds.level_resolution(lvl) ** 2
        assert ds.counts[lvl] % texels == 0
        assert ds.counts[lvl] >= max(1, cfg.samples_level0 >> lvl)


def test_group_structure(small_dataset):
    ds, _, _ = small_dataset
    q, img = ds.group(1, 2)
    r1 = ds.level_resolution(1)
    assert q.shape == (r1 * r1, 7)
    assert img.shape == (r1, r1, 3)
    # one light/view pair per group
    assert np.all(q[:, 2:6] == q[0, 2:6])
    # uv rows form a contiguous grid with spacing 1/R_l (mod 1)
    dx = np.diff(q[:r1, 0].astype(np.float64)) % 1.0
    np.testing.assert_allclose(dx, 1.0 / r1, atol=1e-6)


def test_generation_deterministic(small_dataset, tmp_path):
    ds, mat, cfg = small_dataset
    again = generate_dataset(bumps_material(cfg.resolution, seed=cfg.material_seed), cfg)
    p1, p2 = tmp_path / "a.nmds", tmp_path / "b.nmds"
    save_dataset(ds, p1)
    save_dataset(again, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_energy_bounded(small_dataset):
    ds, mat, _ = small_dataset
    ceiling = radiance_ceiling(mat)
    for sl in ds.slices:
        assert sl.radiance.max() <= ceiling


def test_coarsest_footprint_nearly_u_independent():
    # footprint = whole texture: radiance barely depends on u
    mat = woven_material(16)
    rng = np.random.default_rng(7)
    level = 4  # 2^4 = 16 texel footprint at R=16
    wi = np.array([0.2, 0.1])
    wo = np.array([-0.1, 0.3])
    vals = np.array([footprint_radiance(mat, u, wi, wo, level, rng)
                     for u in rng.random((12, 2))])
    lum = vals.mean(axis=1)
    assert lum.std() < 0.05 * lum.mean()


def test_prefiltering_contract_between_adjacent_levels():
    # level l+1 radiance == mean of level-l radiance over the covering
    # footprint, within Monte-Carlo tolerance (3 sigma)
    mat = bumps_material(32, seed=1)
    wi = np.array([0.3, -0.2])
    wo = np.array([0.1, 0.25])
    u = np.array([0.4375, 0.5625])
    level = 2
    side = (1 << level) / mat.resolution  # footprint side of level l at u

    def coarse_estimate(rng):
        return footprint_radiance(mat, u, wi, wo, level + 1, rng).mean()

    def fine_estimate(rng):
        quarters = [u + np.array([sx, sy]) * side
                    for sx in (-0.5, 0.5) for sy in (-0.5, 0.5)]
        return np.mean([footprint_radiance(mat, q, wi, wo, level, rng).mean()
                        for q in quarters])

    rngs = [np.random.default_rng(s) for s in range(16)]
    coarse = np.array([coarse_estimate(r) for r in rngs[:8]])
    fine = np.array([fine_estimate(r) for r in rngs[8:]])
    se = np.sqrt(coarse.var(ddof=1) / 8 + fine.var(ddof=1) / 8)
    assert abs(coarse.mean() - fine.mean()) <= 3 * se + 1e-4


def test_save_load_roundtrip(small_dataset, tmp_path):
    ds, _, _ = small_dataset
    path = tmp_path / "ds.nmds"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.base_resolution == ds.base_resolution
    assert back.config_hash == ds.config_hash
    assert back.level_count == ds.level_count
    for a, b in zip(ds.slices, back.slices):
        np.testing.assert_array_equal(a.queries, b.queries)
        np.testing.assert_array_equal(a.radiance, b.radiance)
    # second save is byte-identical
    path2 = tmp_path / "ds2.nmds"
    save_dataset(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_truncated_file_rejected_with_lengths(small_dataset, tmp_path):
    ds, _, _ = small_dataset
    path = tmp_path / "ds.nmds"
    save_dataset(ds, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-17])
    with pytest.raises(DatasetFormatError, match=r"expected \d+ bytes, found \d+"):
        load_dataset(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.nmds"
    path.write_bytes(b"JUNK!" + b"\x00" * 64)
    with pytest.raises(DatasetFormatError, match="magic"):
        load_dataset(path)


def test_version_mismatch_rejected(small_dataset, tmp_path):
    ds, _, _ = small_dataset
    path = tmp_path / "ds.nmds"
    save_dataset(ds, path)
    blob = bytearray(path.read_bytes())
    blob[5] = 99  # version field follows the 5-byte magic
    path.write_bytes(bytes(blob))
    with pytest.raises(DatasetFormatError, match="version 99"):
        load_dataset(path)


def test_validate_rejects_mismatched_lengths():
    q = np.zeros((4, 7), dtype=np.float32)
    r = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(DatasetFormatError, match="not matched"):
        Dataset(2, [LevelSlice(q, r)]).validate()


def test_validate_rejects_negative_radiance():
    q = np.zeros((4, 7), dtype=np.float32)
    r = np.full((4, 3), -1.0, dtype=np.float32)
    with pytest.raises(DatasetFormatError, match="finite and >= 0"):
        Dataset(2, [LevelSlice(q, r)]).validate()


def test_validate_rejects_too_many_levels():
    slices = []
    for lvl in range(3):
        n = max(1, (4 >> lvl)) ** 2
        q = np.zeros((n, 7), dtype=np.float32)
        q[:, 6] = lvl
        slices.append(LevelSlice(q, np.zeros((n, 3), dtype=np.float32)))
    Dataset(4, slices).validate()  # 3 levels fits a 4-texel pyramid
    with pytest.raises(DatasetFormatError, match="deeper"):
        too_deep = slices + [LevelSlice(np.full((1, 7), 3, dtype=np.float32),
                                        np.zeros((1, 3), dtype=np.float32))]
        Dataset(4, too_deep).validate()


def test_generate_level_rejects_below_pyramid(small_dataset):
    _, mat, _ = small_dataset
    with pytest.raises(ValueError, match="below"):
        generate_level(mat, 99, 4, seed=0)
