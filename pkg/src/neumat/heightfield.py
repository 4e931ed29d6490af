"""Procedural heightfield materials and the analytic shading oracle.

Reference radiance is produced by ray-marching the camera ray down onto
the displaced surface (parallax), marching a shadow ray toward the light
(hard shadows), then shading with Lambertian diffuse plus a normalized
Beckmann specular lobe under a unit-intensity distant light.  Direct
illumination only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# march parameters: step of 1/(4R) in uv units, with 8 bisection
# iterations once a crossing is bracketed
STEPS_PER_TEXEL = 4
REFINE_ITERS = 8
MIN_DIR_Z = 0.08      # rays closer to grazing than this get a capped budget
MIN_COS_O = 0.05      # specular denominator clamp ("no fireballs")
_EPS = 1e-6


@dataclass
class ShadeStats:
    """Counters for rays the march could not resolve."""
    camera_misses: int = 0
    shadow_unresolved: int = 0

    def add(self, other: "ShadeStats"):
        self.camera_misses += other.camera_misses
        self.shadow_unresolved += other.shadow_unresolved


@dataclass
class HeightfieldMaterial:
    """Toroidal heightfield with per-texel albedo and a single glossy lobe.

    heightmap: (R,R) in [0,1]; surface height is height_scale * heightmap
    in uv units.  albedo: (R,R,3) in [0,1].  roughness is the Beckmann
    alpha in (0,1].  radiance_clamp bounds the returned radiance (an
    exposure/firefly clamp; inf disables it).
    """
    heightmap: np.ndarray
    albedo: np.ndarray
    roughness: float = 0.3
    specular_weight: float = 0.5
    height_scale: float = 0.1
    radiance_clamp: float = np.inf
    name: str = "custom"
    _grad: tuple | None = field(default=None, repr=False, compare=False)
    _hflat: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.heightmap = np.ascontiguousarray(self.heightmap, dtype=np.float32)
        self.albedo = np.ascontiguousarray(self.albedo, dtype=np.float32)
        r = self.heightmap.shape[0]
        if self.heightmap.shape != (r, r):
            raise ValueError(f"heightmap must be square, got {self.heightmap.shape}")
        if self.albedo.shape != (r, r, 3):
            raise ValueError(f"albedo must be ({r},{r},3), got {self.albedo.shape}")
        if not np.all(np.isfinite(self.heightmap)):
            raise ValueError("heightmap contains non-finite values")
        if not (0.0 < self.roughness <= 1.0):
            raise ValueError(f"roughness must be in (0,1], got {self.roughness}")
        if self.radiance_clamp <= 0:
            raise ValueError("radiance_clamp must be positive")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo values must lie in [0,1]")

    @property
    def resolution(self) -> int:
        return self.heightmap.shape[0]

    def gradients(self):
        """Central-difference height gradients per uv unit (cached)."""
        if self._grad is None:
            h = self.heightmap.astype(np.float64)
            r = self.resolution
            gx = (np.roll(h, -1, axis=1) - np.roll(h, 1, axis=1)) * (r / 2.0)
            gy = (np.roll(h, -1, axis=0) - np.roll(h, 1, axis=0)) * (r / 2.0)
            self._grad = (gx, gy)
        return self._grad


def radiance_ceiling(mat: HeightfieldMaterial) -> float:
    """Upper bound on any radiance the oracle can return."""
    d_max = 1.0 / (np.pi * mat.roughness ** 2)
    lobe = float(mat.albedo.max()) / np.pi + \
        mat.specular_weight * d_max / (4.0 * MIN_COS_O)
    return min(lobe, mat.radiance_clamp)


# ---------------------------------------------------------------------------
# presets

def bumps_material(resolution=64, bumps_per_side=3, roughness=0.15,
                   specular_weight=0.6, height_scale=0.10, seed=0,
                   radiance_clamp=np.inf, name="bumps") -> HeightfieldMaterial:
    """Grid of smooth glossy bumps: strong parallax, sharp highlights and
    hard self-shadowing."""
    rng = np.random.default_rng(seed)
    r = resolution
    yy, xx = np.meshgrid(np.arange(r) / r, np.arange(r) / r, indexing="ij")
    height = np.zeros((r, r))
    tint = np.zeros((r, r, 3))
    base = np.array([0.55, 0.45, 0.40])
    for by in range(bumps_per_side):
        for bx in range(bumps_per_side):
            cx = (bx + 0.5) / bumps_per_side + (rng.random() - 0.5) * 0.3 / bumps_per_side
            cy = (by + 0.5) / bumps_per_side + (rng.random() - 0.5) * 0.3 / bumps_per_side
            sigma = (0.35 + 0.25 * rng.random()) / bumps_per_side
            amp = 0.6 + 0.4 * rng.random()
            # toroidal distance so bumps wrap cleanly
            dx = np.abs(xx - cx)
            dx = np.minimum(dx, 1.0 - dx)
            dy = np.abs(yy - cy)
            dy = np.minimum(dy, 1.0 - dy)
            g = amp * np.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))
            height += g
            tint += g[..., None] * (rng.random(3) * 0.5 - 0.25)
    height -= height.min()
    height /= max(height.max(), 1e-9)
    albedo = np.clip(base[None, None] + tint, 0.05, 0.95)
    return HeightfieldMaterial(height, albedo, roughness, specular_weight,
                               height_scale, radiance_clamp, name=name)


def woven_material(resolution=64, threads=4, roughness=0.35,
                   specular_weight=0.3, height_scale=0.06, seed=0,
                   radiance_clamp=np.inf, name="woven") -> HeightfieldMaterial:
    """Crossing sinusoidal ridges approximating a plain weave."""
    r = resolution
    yy, xx = np.meshgrid(np.arange(r) / r, np.arange(r) / r, indexing="ij")
    warp = 0.5 + 0.5 * np.sin(2 * np.pi * threads * xx)
    weft = 0.5 + 0.5 * np.sin(2 * np.pi * threads * yy + np.pi / 2)
    over = 0.5 + 0.5 * np.sin(2 * np.pi * threads * (xx + yy))
    height = np.where(over > 0.5, warp, weft)
    height = (height - height.min()) / max(np.ptp(height), 1e-9)
    albedo = np.stack([0.2 + 0.5 * warp, 0.25 + 0.4 * weft,
                       np.full((r, r), 0.35)], axis=-1)
    return HeightfieldMaterial(height, np.clip(albedo, 0, 1), roughness,
                               specular_weight, height_scale, radiance_clamp,
                               name=name)


def material_from_image(path, roughness=0.3, specular_weight=0.4,
                        height_scale=0.08) -> HeightfieldMaterial:
    """Grayscale image as a heightfield; image colors as albedo."""
    from PIL import Image

    img = Image.open(path)
    size = min(img.size)
    img = img.resize((size, size)).convert("RGB")
    rgb = np.asarray(img, dtype=np.float32) / 255.0
    height = rgb.mean(axis=-1)
    height = (height - height.min()) / max(np.ptp(height), 1e-9)
    return HeightfieldMaterial(height, rgb, roughness, specular_weight,
                               height_scale, name="image")


MATERIAL_PRESETS = {"bumps": bumps_material, "woven": woven_material}


def make_material(kind: str, resolution: int = 64, seed: int = 0,
                  **overrides) -> HeightfieldMaterial:
    if kind not in MATERIAL_PRESETS:
        raise ValueError(f"unknown material preset {kind!r}; "
                         f"choose from {sorted(MATERIAL_PRESETS)}")
    return MATERIAL_PRESETS[kind](resolution=resolution, seed=seed, **overrides)


# ---------------------------------------------------------------------------
# geometry helpers

def lift_to_hemisphere(w: np.ndarray) -> np.ndarray:
    """(N,2) disk coordinates -> (N,3) unit directions with z >= 0."""
    w = np.asarray(w, dtype=np.float64)
    z2 = 1.0 - w[:, 0] ** 2 - w[:, 1] ** 2
    z = np.sqrt(np.clip(z2, 0.0, None))
    return np.stack([w[:, 0], w[:, 1], z], axis=-1)


def sample_disk(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform samples on the unit disk (= cosine-weighted hemisphere
    directions, projected)."""
    r = np.sqrt(rng.random(n))
    theta = 2 * np.pi * rng.random(n)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)


def _bilinear_wrap(grid: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample an (R,R) or (R,R,C) grid at uv in [0,1)^2, texel centers at
    (i+0.5)/R, wrap-around addressing."""
    r = grid.shape[0]
    x = uv[:, 0] * r - 0.5
    y = uv[:, 1] * r - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    ix0 = (x0.astype(np.int64)) % r
    iy0 = (y0.astype(np.int64)) % r
    ix1 = (ix0 + 1) % r
    iy1 = (iy0 + 1) % r
    if grid.ndim == 2:
        w00 = (1 - fx) * (1 - fy)
        return (grid[iy0, ix0] * w00 + grid[iy0, ix1] * (fx * (1 - fy)) +
                grid[iy1, ix0] * ((1 - fx) * fy) + grid[iy1, ix1] * (fx * fy))
    fx = fx[:, None]
    fy = fy[:, None]
    return (grid[iy0, ix0] * (1 - fx) * (1 - fy) + grid[iy0, ix1] * fx * (1 - fy) +
            grid[iy1, ix0] * (1 - fx) * fy + grid[iy1, ix1] * fx * fy)


def _height_at(mat: HeightfieldMaterial, ux: np.ndarray, uy: np.ndarray) -> np.ndarray:
    """Hot-path bilinear surface height with wrap; height_scale folded in."""
    if mat._hflat is None:
        mat._hflat = (mat.height_scale *
                      mat.heightmap.astype(np.float64)).ravel()
    r = mat.resolution
    flat = mat._hflat
    x = ux * r - 0.5
    y = uy * r - 0.5
    x0f = np.floor(x)
    y0f = np.floor(y)
    fx = x - x0f
    fy = y - y0f
    if r & (r - 1) == 0:
        m = r - 1
        ix0 = x0f.astype(np.int64) & m
        iy0 = y0f.astype(np.int64) & m
        ix1 = (ix0 + 1) & m
        iy1 = (iy0 + 1) & m
    else:
        ix0 = x0f.astype(np.int64) % r
        iy0 = y0f.astype(np.int64) % r
        ix1 = (ix0 + 1) % r
        iy1 = (iy0 + 1) % r
    row0 = iy0 * r
    row1 = iy1 * r
    h00 = flat[row0 + ix0]
    h01 = flat[row0 + ix1]
    h10 = flat[row1 + ix0]
    h11 = flat[row1 + ix1]
    top = h00 + fx * (h01 - h00)
    bot = h10 + fx * (h11 - h10)
    return top + fy * (bot - top)


def surface_height(mat: HeightfieldMaterial, uv: np.ndarray) -> np.ndarray:
    """Continuous surface height (uv units) at arbitrary uv."""
    return _height_at(mat, uv[:, 0], uv[:, 1])


def surface_normal(mat: HeightfieldMaterial, uv: np.ndarray) -> np.ndarray:
    gx, gy = mat.gradients()
    dzdx = mat.height_scale * _bilinear_wrap(gx, uv)
    dzdy = mat.height_scale * _bilinear_wrap(gy, uv)
    n = np.stack([-dzdx, -dzdy, np.ones_like(dzdx)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# marching

def _march(mat, start_xy, start_z, d3, dt, t_max, escape_z=None):
    """Fixed-step march of pos(t) = (start + t*d) against the surface.

    Returns (hit, t_lo, t_hi, escaped): hit rays have the first crossing
    bracketed in (t_lo, t_hi]; escaped rays rose above escape_z first.
    Rays that exhaust t_max are neither hit nor escaped.
    """
    n = start_xy.shape[0]
    hit = np.zeros(n, dtype=bool)
    escaped = np.zeros(n, dtype=bool)
    t_lo = np.zeros(n)
    t_hi = np.zeros(n)

    f0 = start_z - _height_at(mat, start_xy[:, 0], start_xy[:, 1])
    imm = f0 <= 0.0
    hit |= imm
    ai = np.nonzero(~imm)[0]
    # compacted per-active-ray state, advanced incrementally
    px = start_xy[ai, 0].astype(np.float64)
    py = start_xy[ai, 1].astype(np.float64)
    z = start_z[ai].astype(np.float64)
    dx = d3[ai, 0].copy()
    dy = d3[ai, 1].copy()
    dz = d3[ai, 2].copy()
    tm = t_max[ai].copy()
    t = 0.0
    while ai.size:
        t += dt
        px += dt * dx
        py += dt * dy
        z += dt * dz
        f = z - _height_at(mat, px, py)
        crossed = f <= 0.0
        alive = ~crossed
        if crossed.any():
            cidx = ai[crossed]
            hit[cidx] = True
            t_lo[cidx] = t - dt
            t_hi[cidx] = t
        if escape_z is not None:
            esc = alive & (z > escape_z)
            if esc.any():
                escaped[ai[esc]] = True
                alive &= ~esc
        alive &= t < tm
        if not alive.all():
            ai = ai[alive]
            px = px[alive]
            py = py[alive]
            z = z[alive]
            dx = dx[alive]
            dy = dy[alive]
            dz = dz[alive]
            tm = tm[alive]
    return hit, t_lo, t_hi, escaped


def _refine(mat, start_xy, start_z, d3, t_lo, t_hi, iters=REFINE_ITERS):
    """Bisect the bracketed crossing; returns the refined hit parameter."""
    lo = t_lo.copy()
    hi = t_hi.copy()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        px = start_xy[:, 0] + mid * d3[:, 0]
        py = start_xy[:, 1] + mid * d3[:, 1]
        z = start_z + mid * d3[:, 2]
        below = z - _height_at(mat, px, py) <= 0.0
        hi = np.where(below, mid, hi)
        lo = np.where(below, lo, mid)
    return 0.5 * (lo + hi)


def shade_reference(mat: HeightfieldMaterial, u, omega_i, omega_o,
                    stats: ShadeStats | None = None,
                    step_scale: float = 1.0) -> np.ndarray:
    """Direct-illumination radiance for batched 7D-query components.

    u: (N,2) in [0,1)^2 where the view ray crosses the top reference
    plane; omega_i / omega_o: (N,2) disk-projected light/view directions.
    step_scale < 1 marches with proportionally smaller steps (the dense
    oracle used to validate the default uses step_scale = 0.25).
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1, 2)
    n = u.shape[0]
    wi3 = lift_to_hemisphere(np.asarray(omega_i, dtype=np.float64).reshape(-1, 2))
    wo3 = lift_to_hemisphere(np.asarray(omega_o, dtype=np.float64).reshape(-1, 2))
    if stats is None:
        stats = ShadeStats()

    r = mat.resolution
    dt = step_scale / (STEPS_PER_TEXEL * r)
    z_top = mat.height_scale
    out = np.zeros((n, 3))

    viewable = wo3[:, 2] > _EPS
    # camera ray: starts on the top plane at uv = u, marches along -omega_o
    d_cam = -wo3
    budget = z_top / np.maximum(wo3[:, 2], MIN_DIR_Z) + 2 * dt
    start_z = np.full(n, z_top)
    hit, t_lo, t_hi, _ = _march(mat, u, start_z, d_cam, dt,
                                np.where(viewable, budget, 0.0))
    hit &= viewable
    stats.camera_misses += int(np.count_nonzero(~hit))
    if not np.any(hit):
        return out.astype(np.float32)

    hidx = np.nonzero(hit)[0]
    t_ref = _refine(mat, u[hidx], start_z[hidx], d_cam[hidx],
                    t_lo[hidx], t_hi[hidx])
    p_xy = np.mod(u[hidx] + t_ref[:, None] * d_cam[hidx, :2], 1.0)
    p_z = start_z[hidx] + t_ref * d_cam[hidx, 2]

    nrm = surface_normal(mat, p_xy)
    wi_h = wi3[hidx]
    wo_h = wo3[hidx]
    cos_i = np.maximum(np.einsum("ij,ij->i", nrm, wi_h), 0.0)
    cos_o = np.einsum("ij,ij->i", nrm, wo_h)

    # shadow ray: lift slightly above the surface, march toward the light
    lit = wi_h[:, 2] > _EPS
    z_bias = 0.25 * dt
    s_budget = (z_top + z_bias - p_z) / np.maximum(wi_h[:, 2], MIN_DIR_Z) + 2 * dt
    s_hit, _, _, s_escaped = _march(mat, p_xy, p_z + z_bias + wi_h[:, 2] * dt,
                                    wi_h, dt,
                                    np.where(lit, s_budget, 0.0),
                                    escape_z=z_top)
    stats.shadow_unresolved += int(np.count_nonzero(lit & ~s_hit & ~s_escaped))
    visible = lit & ~s_hit & s_escaped

    albedo = _bilinear_wrap(mat.albedo.astype(np.float64), p_xy)
    diffuse = albedo / np.pi * cos_i[:, None]

    half = wi_h + wo_h
    half /= np.maximum(np.linalg.norm(half, axis=-1, keepdims=True), _EPS)
    cos_h = np.clip(np.einsum("ij,ij->i", nrm, half), _EPS, 1.0)
    alpha2 = mat.roughness ** 2
    tan2 = (1.0 - cos_h ** 2) / cos_h ** 2
    d_beck = np.exp(-tan2 / alpha2) / (np.pi * alpha2 * cos_h ** 4)
    dot_oh = np.maximum(np.einsum("ij,ij->i", wo_h, half), _EPS)
    g_term = np.minimum(1.0, np.minimum(2 * cos_h * np.maximum(cos_o, 0) / dot_oh,
                                        2 * cos_h * cos_i / dot_oh))
    spec = mat.specular_weight * d_beck * g_term / (4.0 * np.maximum(cos_o, MIN_COS_O))
    spec = np.where((cos_o > 0) & (cos_i > 0), spec, 0.0)

    radiance = visible[:, None] * (diffuse + spec[:, None])
    if np.isfinite(mat.radiance_clamp):
        radiance = np.minimum(radiance, mat.radiance_clamp)
    out[hidx] = radiance
    return out.astype(np.float32)
