import numpy as np
import pytest

from neumat.heightfield import HeightfieldMaterial
from neumat.imgio import montage, read_pfm, tonemap, write_pfm, write_png
from neumat.model import ModelConfig, NeuralMaterial
from neumat.render import (SceneConfig, SceneError, build_query_buffer,
                           lod_from_footprint, render, render_reference)


def fronto_parallel_scene(distance=1.0, size=64):
    # camera straight above the quad centre; fov chosen so the unit quad
    # exactly fills the frame at the given distance
    fov = np.degrees(2 * np.arctan(0.5 / distance))
    return SceneConfig(geometry="quad", cam_pos=(0.5, 0.5, distance),
                       look_at=(0.5, 0.5, 0.0), fov_deg=fov,
                       width=size, height=size)


def tiny_material(**kw):
    cfg = ModelConfig(base_resolution=16, pyramid_channels=4, offset_channels=4,
                      hidden_width=16, offset_hidden=8, u_frequencies=3,
                      dir_frequencies=2, **kw)
    return NeuralMaterial(cfg, seed=4)


def test_fronto_parallel_lod_zero():
    # 64 pixels across 64 texels: footprint ~1 texel -> lod ~0
    scene = fronto_parallel_scene(size=64)
    buf = build_query_buffer(scene)
    assert buf.hit.mean() > 0.9
    lod = lod_from_footprint(buf.footprint_uv, base_resolution=64, num_levels=7)
    assert np.all(lod[buf.hit] <= 0.1)


def test_doubling_distance_raises_lod_by_one():
    scene1 = fronto_parallel_scene(distance=1.0, size=64)
    # keep the same fov, move the camera back 2x: half the quad per pixel
    scene2 = SceneConfig(geometry="quad", cam_pos=(0.5, 0.5, 2.0),
                         look_at=(0.5, 0.5, 0.0), fov_deg=scene1.fov_deg,
                         width=64, height=64, uv_tiling=4.0)
    scene1 = SceneConfig(**{**scene1.__dict__, "uv_tiling": 4.0})
    b1 = build_query_buffer(scene1)
    b2 = build_query_buffer(scene2)
    l1 = lod_from_footprint(b1.footprint_uv, 64, 7)
    l2 = lod_from_footprint(b2.footprint_uv, 64, 7)
    both = b1.hit & b2.hit & (l1 > 0.5) & (l1 < 5.5)  # away from clamps
    assert both.sum() > 100
    np.testing.assert_allclose(l2[both] - l1[both], 1.0, atol=0.1)


def test_sphere_buffer_reasonable():
    scene = SceneConfig(geometry="sphere", cam_pos=(0.5, -1.2, 0.6),
                        look_at=(0.5, 0.5, 0.0), width=48, height=48)
    buf = build_query_buffer(scene)
    assert 0.1 < buf.hit.mean() < 0.9
    assert np.all(buf.uv[buf.hit] >= 0) and np.all(buf.uv[buf.hit] < 1)
    norms = np.linalg.norm(buf.omega_o[buf.hit], axis=-1)
    assert np.all(norms <= 1.0 + 1e-6)


def test_scene_validation():
    with pytest.raises(SceneError, match="geometry"):
        SceneConfig(geometry="torus").validate()
    with pytest.raises(SceneError, match="extent"):
        SceneConfig(width=8).validate()
    with pytest.raises(SceneError, match="spp"):
        SceneConfig(spp=3).validate()
    with pytest.raises(SceneError, match="above"):
        SceneConfig(cam_pos=(0.5, 0.5, -1.0)).validate()
    with pytest.raises(SceneError, match="inside"):
        SceneConfig(geometry="sphere", cam_pos=(0.5, 0.5, 0.0)).validate()


def test_render_deterministic_and_masked():
    mat = tiny_material()
    scene = SceneConfig(width=32, height=32, cam_pos=(0.5, -0.8, 0.9),
                        background=0.25)
    a = render(mat, scene)
    b = render(mat, scene)
    np.testing.assert_array_equal(a.hdr, b.hdr)
    assert a.hdr.shape == (32, 32, 3)
    # miss pixels carry the background value
    assert np.all(a.hdr[~a.hit] == np.float32(0.25))
    assert np.all(np.isfinite(a.hdr))


def test_render_spp4_deterministic():
    mat = tiny_material()
    scene = SceneConfig(width=32, height=32, spp=4)
    a = render(mat, scene)
    b = render(mat, scene)
    np.testing.assert_array_equal(a.hdr, b.hdr)


def test_render_inception_tiles():
    mat = tiny_material(decoder_kind="inception")
    scene = SceneConfig(width=16, height=16)
    out = render(mat, scene)
    assert out.hdr.shape == (16, 16, 3)
    assert np.all(np.isfinite(out.hdr))


def test_render_reference_flat_lambertian():
    r = 16
    flat = HeightfieldMaterial(np.zeros((r, r)), np.full((r, r, 3), 0.6),
                               roughness=0.5, specular_weight=0.0,
                               height_scale=0.02)
    scene = SceneConfig(geometry="quad", cam_pos=(0.5, 0.5, 1.0),
                        look_at=(0.5, 0.5, 0.0), fov_deg=30.0,
                        light_dir=(0.0, 0.0, 1.0), width=24, height=24)
    out = render_reference(flat, scene)
    vals = out.hdr[out.hit]
    np.testing.assert_allclose(vals, 0.6 / np.pi, rtol=1e-4)


# ---------------------------------------------------------------------------
# image io


def test_pfm_roundtrip(tmp_path):
    img = np.random.default_rng(0).random((9, 13, 3)).astype(np.float32)
    path = tmp_path / "x.pfm"
    write_pfm(path, img)
    back = read_pfm(path)
    np.testing.assert_array_equal(img, back)
    header = path.read_bytes()[:32]
    assert header.startswith(b"PF\n13 9\n-1.0\n")


def test_tonemap_matches_pinned_formula():
    hdr = np.array([[-0.5, 0.0, 0.03, 0.5, 1.0, 9.0]])
    out = tonemap(hdr)
    expect = np.round(np.clip(np.clip(hdr, 0, None) ** (1 / 2.2), 0, 1) * 255)
    np.testing.assert_array_equal(out, expect.astype(np.uint8))


def test_png_writer(tmp_path):
    img = tonemap(np.random.default_rng(1).random((8, 8, 3)))
    path = tmp_path / "x.png"
    write_png(path, img)
    from PIL import Image

    back = np.asarray(Image.open(path))
    np.testing.assert_array_equal(back, img)


def test_montage_panel_layout():
    panels = [np.full((10, 10, 3), i * 40, dtype=np.uint8) for i in range(5)]
    strip = montage(panels, gap=4)
    assert strip.shape == (10, 5 * 10 + 4 * 4, 3)
    np.testing.assert_array_equal(strip[:, :10], panels[0])
    np.testing.assert_array_equal(strip[:, -10:], panels[4])
