"""Scene rendering under direct illumination: pixel rays intersect a
flat quad or a uv sphere, per-pixel tangent-frame light/view directions
and a footprint-derived level-of-detail feed batched material queries.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .heightfield import HeightfieldMaterial, shade_reference
from .model import NeuralMaterial, QueryBatch

_JITTER_4 = np.array([[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])


class SceneError(ValueError):
    pass


@dataclass
class SceneConfig:
    geometry: str = "quad"            # "quad" or "sphere"
    cam_pos: tuple = (0.5, -0.7, 1.0)
    look_at: tuple = (0.5, 0.5, 0.0)
    fov_deg: float = 40.0
    light_dir: tuple = (-0.4, 0.25, 0.85)   # toward the light
    light_intensity: float = 1.0
    width: int = 128
    height: int = 128
    spp: int = 1                      # 1 or 4 (deterministic jitter)
    uv_tiling: float = 1.0
    background: float = 0.0

    def validate(self):
        if self.geometry not in ("quad", "sphere"):
            raise SceneError(f"geometry must be quad or sphere, got {self.geometry!r}")
        if self.width < 16 or self.height < 16:
            raise SceneError("image extent must be at least 16")
        if self.spp not in (1, 4):
            raise SceneError("spp must be 1 or 4 (deterministic jitter)")
        cam = np.asarray(self.cam_pos, dtype=np.float64)
        if self.geometry == "quad" and cam[2] <= 0:
            raise SceneError("camera must be above the quad (z > 0)")
        if self.geometry == "sphere":
            if np.linalg.norm(cam - _SPHERE_CENTER) <= _SPHERE_RADIUS:
                raise SceneError("camera is inside the sphere")
        return self


_SPHERE_CENTER = np.array([0.5, 0.5, 0.0])
_SPHERE_RADIUS = 0.35


@dataclass
class QueryBuffer:
    """Per-pixel material query inputs for one scene."""
    uv: np.ndarray          # (H,W,2)
    omega_i: np.ndarray     # (H,W,2) tangent-frame disk coords
    omega_o: np.ndarray     # (H,W,2)
    lit: np.ndarray         # (H,W) light above local horizon
    hit: np.ndarray         # (H,W) geometry hit
    footprint_uv: np.ndarray  # (H,W) uv extent per pixel


def _camera_rays(scene: SceneConfig, jitter: np.ndarray):
    h, w = scene.height, scene.width
    cam = np.asarray(scene.cam_pos, dtype=np.float64)
    look = np.asarray(scene.look_at, dtype=np.float64)
    fwd = look - cam
    fwd /= np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    upv = np.cross(right, fwd)
    tan = np.tan(np.radians(scene.fov_deg) / 2.0)
    aspect = w / h
    xs = ((np.arange(w) + jitter[0]) / w * 2.0 - 1.0) * tan * aspect
    ys = (1.0 - (np.arange(h) + jitter[1]) / h * 2.0) * tan
    d = (fwd[None, None] + xs[None, :, None] * right[None, None] +
         ys[:, None, None] * upv[None, None])
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return cam, d


def _intersect(scene: SceneConfig, cam, dirs):
    """Returns (hit mask, positions, normals, tangents, bitangents, uv)."""
    h, w = dirs.shape[:2]
    if scene.geometry == "quad":
        dz = dirs[..., 2]
        t = np.where(np.abs(dz) > 1e-9, -cam[2] / np.where(np.abs(dz) > 1e-9, dz, 1.0),
                     -1.0)
        pos = cam[None, None] + t[..., None] * dirs
        hit = (t > 1e-6) & (pos[..., 0] >= 0) & (pos[..., 0] <= 1) & \
            (pos[..., 1] >= 0) & (pos[..., 1] <= 1)
        nrm = np.broadcast_to(np.array([0.0, 0.0, 1.0]), pos.shape)
        tan = np.broadcast_to(np.array([1.0, 0.0, 0.0]), pos.shape)
        bit = np.broadcast_to(np.array([0.0, 1.0, 0.0]), pos.shape)
        uv = np.mod(pos[..., :2] * scene.uv_tiling, 1.0)
        return hit, pos, nrm, tan, bit, uv

    oc = cam - _SPHERE_CENTER
    b = np.einsum("hwc,c->hw", dirs, oc)
    c = oc @ oc - _SPHERE_RADIUS ** 2
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    t = np.where(disc >= 0, -b - root, -1.0)
    t = np.where(t > 1e-6, t, np.where(disc >= 0, -b + root, -1.0))
    hit = t > 1e-6
    pos = cam[None, None] + t[..., None] * dirs
    n = pos - _SPHERE_CENTER
    n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
    phi = np.arctan2(n[..., 1], n[..., 0])
    theta = np.arccos(np.clip(n[..., 2], -1.0, 1.0))
    uv = np.mod(np.stack([(phi / (2 * np.pi) + 0.5), theta / np.pi], axis=-1)
                * scene.uv_tiling, 1.0)
    # tangent along +phi, bitangent along +theta
    tan = np.stack([-np.sin(phi), np.cos(phi), np.zeros_like(phi)], axis=-1)
    ct, st = np.cos(theta), np.sin(theta)
    bit = np.stack([ct * np.cos(phi), ct * np.sin(phi), -st], axis=-1)
    return hit, pos, n, tan, bit, uv


def _wrapped_diff(a, b):
    return (a - b + 0.5) % 1.0 - 0.5


def build_query_buffer(scene: SceneConfig, jitter=(0.5, 0.5)) -> QueryBuffer:
    scene.validate()
    cam, dirs = _camera_rays(scene, np.asarray(jitter, dtype=np.float64))
    hit, pos, nrm, tan, bit, uv = _intersect(scene, cam, dirs)

    to_cam = -dirs
    wo = np.stack([np.einsum("hwc,hwc->hw", to_cam, tan),
                   np.einsum("hwc,hwc->hw", to_cam, bit)], axis=-1)
    wo_z = np.einsum("hwc,hwc->hw", to_cam, nrm)
    hit = hit & (wo_z > 1e-6)

    light = np.asarray(scene.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    wi = np.stack([np.einsum("hwc,c->hw", tan, light),
                   np.einsum("hwc,c->hw", bit, light)], axis=-1)
    wi_z = np.einsum("hwc,c->hw", nrm, light)
    lit = wi_z > 1e-6

    # uv footprint from neighbouring-pixel differentials (wrap-aware)
    dux = np.abs(_wrapped_diff(np.roll(uv, -1, axis=1), uv)).max(axis=-1)
    duy = np.abs(_wrapped_diff(np.roll(uv, -1, axis=0), uv)).max(axis=-1)
    dux[:, -1] = dux[:, -2] if uv.shape[1] > 1 else 0
    duy[-1, :] = duy[-2, :] if uv.shape[0] > 1 else 0
    foot = np.maximum(dux, duy)
    # differentials across a hit/miss edge are meaningless; copy inward
    fp = np.where(hit, foot, 0.0)

    # disk projections can graze 1.0 by rounding
    for warr, z in ((wo, wo_z), (wi, wi_z)):
        norm = np.linalg.norm(warr, axis=-1)
        over = norm > 0.999999
        warr[over] /= (norm[over] / 0.999999)[..., None]
    return QueryBuffer(uv=uv, omega_i=wi, omega_o=wo, lit=lit, hit=hit,
                       footprint_uv=fp)


def lod_from_footprint(footprint_uv: np.ndarray, base_resolution: int,
                       num_levels: int) -> np.ndarray:
    texels = footprint_uv * base_resolution
    return np.clip(np.log2(np.maximum(texels, 1.0)), 0.0, num_levels - 1)


@dataclass
class RenderResult:
    hdr: np.ndarray
    hit: np.ndarray
    lod: np.ndarray
    queries_evaluated: int = 0


def _render_buffers(scene: SceneConfig, shade_fn) -> RenderResult:
    """Average shade_fn(QueryBuffer, lit_and_hit) over the jitter set."""
    offsets = [_JITTER_4[i] for i in range(4)] if scene.spp == 4 else [(0.5, 0.5)]
    h, w = scene.height, scene.width
    acc = np.zeros((h, w, 3), dtype=np.float64)
    hit_any = np.zeros((h, w), dtype=bool)
    lod_buf = np.zeros((h, w), dtype=np.float32)
    n_queries = 0
    for off in offsets:
        buf = build_query_buffer(scene, jitter=off)
        img, lod = shade_fn(buf)
        frame = np.where(buf.hit[..., None], img, scene.background)
        acc += frame
        hit_any |= buf.hit
        lod_buf = np.maximum(lod_buf, lod)
        n_queries += int(buf.hit.sum())
    hdr = (acc / len(offsets)).astype(np.float32)
    return RenderResult(hdr=hdr, hit=hit_any, lod=lod_buf,
                        queries_evaluated=n_queries)


def render(material: NeuralMaterial, scene: SceneConfig) -> RenderResult:
    """Render the neural material; lod follows the per-pixel uv footprint
    (so it grows with camera distance)."""
    cfg = material.config

    def shade(buf: QueryBuffer):
        h, w = buf.hit.shape
        lod = lod_from_footprint(buf.footprint_uv, cfg.base_resolution,
                                 cfg.num_levels).astype(np.float32)
        active = buf.hit & buf.lit
        img = np.zeros((h, w, 3), dtype=np.float32)
        if np.any(active):
            sel = np.nonzero(active.ravel())[0]
            qb = QueryBatch(buf.uv.reshape(-1, 2)[sel],
                            buf.omega_i.reshape(-1, 2)[sel],
                            buf.omega_o.reshape(-1, 2)[sel],
                            lod.reshape(-1)[sel])
            if cfg.decoder_kind == "mlp":
                out = material.evaluate_chunked(qb)
            else:
                out = _evaluate_tiled(material, buf, lod, active)
                out = out[sel]
            img.reshape(-1, 3)[sel] = out * scene.light_intensity
        return np.clip(img, 0.0, None), lod

    return _render_buffers(scene, shade)


def _evaluate_tiled(material, buf, lod, active):
    """Inception decoder: evaluate the full pixel grid as one image tile
    (misses get dummy queries, discarded by the caller)."""
    h, w = buf.hit.shape
    uv = np.where(active[..., None], buf.uv, 0.5).reshape(-1, 2)
    wi = np.where(active[..., None], buf.omega_i, 0.0).reshape(-1, 2)
    wo = np.where(active[..., None], buf.omega_o, 0.0).reshape(-1, 2)
    qb = QueryBatch(uv, wi, wo, lod.reshape(-1))
    return material.evaluate(qb, tile_shape=(h, w)).data


def render_reference(mat: HeightfieldMaterial, scene: SceneConfig) -> RenderResult:
    """Ground-truth render via the ray-marched shading oracle (finest
    scale; use spp=4 to approximate pixel-footprint prefiltering)."""

    def shade(buf: QueryBuffer):
        h, w = buf.hit.shape
        active = buf.hit & buf.lit
        img = np.zeros((h, w, 3), dtype=np.float32)
        if np.any(active):
            sel = np.nonzero(active.ravel())[0]
            out = shade_reference(mat, buf.uv.reshape(-1, 2)[sel],
                                  buf.omega_i.reshape(-1, 2)[sel],
                                  buf.omega_o.reshape(-1, 2)[sel])
            img.reshape(-1, 3)[sel] = out * scene.light_intensity
        return img, np.zeros((h, w), dtype=np.float32)

    return _render_buffers(scene, shade)
