"""Reference query datasets: generation from a heightfield oracle, the
level-of-detail prefiltering scheme, and the binary file format.

Each level of a dataset is a list of "view groups": one light/view
direction pair shared by a full grid of uv queries (so contiguous image
tiles can be cut out for training).  The grid origin of every group is
uniformly jittered, which makes the marginal distribution of stored uv
positions uniform over the texture.

Level l radiance prefilters the finest level: every level-l texel is the
mean of 2^l x 2^l jittered sub-queries shaded at level 0 across its
footprint.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .heightfield import HeightfieldMaterial, ShadeStats, sample_disk, shade_reference

log = logging.getLogger(__name__)

MAGIC = b"NMDS1"
FORMAT_VERSION = 1

# shade this many rays per oracle call: batches several view groups
# together so the march stays wide
_SHADE_CHUNK = 1 << 17


class DatasetFormatError(ValueError):
    """Dataset file rejected: bad magic, version, truncation, or shape."""


@dataclass
class LevelSlice:
    """All queries of one pyramid level, group-major.

    queries: (N,7) float32 rows [u.x, u.y, wi.x, wi.y, wo.x, wo.y, lod];
    radiance: (N,3) float32.  N is a whole number of view groups: one
    light/view pair shared by a contiguous E x E uv grid (E <= R >> level;
    smaller groups trade texels per view for many more views).
    """
    queries: np.ndarray
    radiance: np.ndarray


@dataclass
class Dataset:
    base_resolution: int
    slices: list[LevelSlice]
    config_hash: str = ""
    _extents: list | None = field(default=None, repr=False, compare=False)

    @property
    def level_count(self) -> int:
        return len(self.slices)

    @property
    def counts(self) -> list[int]:
        return [s.queries.shape[0] for s in self.slices]

    def level_resolution(self, level: int) -> int:
        return self.base_resolution >> level

    def group_extent(self, level: int) -> int:
        """Side of the uv grid covered by one view group at this level
        (inferred from the stored stream: the run length of one shared
        direction pair)."""
        if self._extents is None:
            self._extents = [None] * self.level_count
        if self._extents[level] is None:
            sl = self.slices[level]
            dirs = sl.queries[:, 2:6]
            n = dirs.shape[0]
            run = n
            if n > 1:
                changes = np.nonzero(np.any(dirs[1:] != dirs[:-1], axis=1))[0]
                if changes.size:
                    run = int(changes[0]) + 1
            extent = int(round(np.sqrt(run)))
            if extent * extent != run:
                raise DatasetFormatError(
                    f"level {level}: view-group run of {run} queries is not "
                    "a square grid")
            self._extents[level] = extent
        return self._extents[level]

    def group_count(self, level: int) -> int:
        texels = self.group_extent(level) ** 2
        return self.slices[level].queries.shape[0] // texels

    def group(self, level: int, g: int):
        """Queries and the (E, E, 3) radiance image of one view group."""
        e = self.group_extent(level)
        texels = e * e
        sl = self.slices[level]
        q = sl.queries[g * texels:(g + 1) * texels]
        img = sl.radiance[g * texels:(g + 1) * texels].reshape(e, e, 3)
        return q, img

    def validate(self):
        if self.base_resolution < 2 or self.level_count < 1:
            raise DatasetFormatError("dataset needs a resolution >= 2 and >= 1 level")
        if self.level_count > int(np.log2(self.base_resolution)) + 1:
            raise DatasetFormatError(
                f"{self.level_count} levels is deeper than a resolution-"
                f"{self.base_resolution} pyramid allows")
        for lvl, sl in enumerate(self.slices):
            n = sl.queries.shape[0]
            if sl.queries.shape != (n, 7) or sl.radiance.shape != (n, 3):
                raise DatasetFormatError(
                    f"level {lvl}: queries {sl.queries.shape} / radiance "
                    f"{sl.radiance.shape} are not matched (N,7)/(N,3) arrays")
            extent = self.group_extent(lvl)
            if extent > self.level_resolution(lvl):
                raise DatasetFormatError(
                    f"level {lvl}: group extent {extent} exceeds the level "
                    f"resolution {self.level_resolution(lvl)}")
            texels = extent * extent
            if n % texels:
                raise DatasetFormatError(
                    f"level {lvl}: {n} queries is not a whole number of "
                    f"{texels}-query view groups")
            if not np.all(np.isfinite(sl.radiance)) or np.any(sl.radiance < 0):
                raise DatasetFormatError(f"level {lvl}: radiance must be finite and >= 0")
            if np.any(sl.queries[:, 6] != lvl):
                raise DatasetFormatError(f"level {lvl}: lod column disagrees with level")
            dirs = sl.queries[:, 2:6].reshape(n // texels, texels, 4)
            if n and np.any(dirs != dirs[:, :1]):
                raise DatasetFormatError(
                    f"level {lvl}: directions vary within a view group")
        return self


# ---------------------------------------------------------------------------
# generation

@dataclass
class GenConfig:
    resolution: int = 64
    levels: int = 6
    samples_level0: int = 1 << 20   # tapers by half per level
    seed: int = 0
    material: str = "bumps"
    material_seed: int = 0
    # view groups cover min(group_extent, level resolution) texels per
    # side; None = full level coverage.  Smaller groups spend the same
    # query budget on many more light/view pairs.
    group_extent: int | None = None
    roughness: float | None = None        # None: preset default
    specular_weight: float | None = None
    height_scale: float | None = None
    radiance_clamp: float | None = None
    image: str | None = None              # heightfield from an image file

    def material_overrides(self) -> dict:
        out = {}
        for key in ("roughness", "specular_weight", "height_scale",
                    "radiance_clamp"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        return out


def config_hash_for(mat: HeightfieldMaterial, cfg: GenConfig) -> str:
    h = hashlib.sha256()
    h.update(struct.pack("<3q", cfg.resolution, cfg.levels, cfg.samples_level0))
    h.update(struct.pack("<2q", cfg.seed, cfg.group_extent or 0))
    h.update(mat.name.encode())
    h.update(struct.pack("<4d", mat.roughness, mat.specular_weight,
                         mat.height_scale, mat.radiance_clamp))
    h.update(np.ascontiguousarray(mat.heightmap).tobytes())
    h.update(np.ascontiguousarray(mat.albedo).tobytes())
    return h.hexdigest()[:16]


def _group_rng(seed: int, level: int, group: int) -> np.random.Generator:
    # per-group streams: parallel and serial generation agree bit for bit
    return np.random.default_rng(np.random.SeedSequence([seed, level, group]))


def footprint_radiance(mat: HeightfieldMaterial, u_center, omega_i, omega_o,
                       level: int, rng: np.random.Generator,
                       stats: ShadeStats | None = None) -> np.ndarray:
    """Prefiltered radiance of one level-`level` query: the mean of
    2^level x 2^level stratified-jittered level-0 sub-queries over the
    footprint square of side 2^level / R centered at u_center."""
    f = 1 << level
    r = mat.resolution
    if f == 1:
        return shade_reference(mat, np.asarray(u_center).reshape(1, 2),
                               np.asarray(omega_i).reshape(1, 2),
                               np.asarray(omega_o).reshape(1, 2), stats=stats)[0]
    ax, ay = np.meshgrid(np.arange(f), np.arange(f), indexing="xy")
    jit = rng.random((f, f, 2))
    ux = np.asarray(u_center)[0] - f / (2 * r) + (ax + jit[..., 0]) / r
    uy = np.asarray(u_center)[1] - f / (2 * r) + (ay + jit[..., 1]) / r
    u = np.mod(np.stack([ux.ravel(), uy.ravel()], axis=-1), 1.0)
    wi = np.tile(np.asarray(omega_i).reshape(1, 2), (f * f, 1))
    wo = np.tile(np.asarray(omega_o).reshape(1, 2), (f * f, 1))
    rad = shade_reference(mat, u, wi, wo, stats=stats)
    return rad.mean(axis=0)


def _group_queries(level: int, r_level: int, extent: int, anchor: np.ndarray,
                   offset: np.ndarray, wi: np.ndarray, wo: np.ndarray) -> np.ndarray:
    """(E^2, 7) query rows of one view group: a contiguous extent x extent
    uv grid anchored at a random texel, shifted by a sub-texel offset."""
    jj, ii = np.meshgrid(np.arange(extent), np.arange(extent), indexing="xy")
    ux = np.mod((anchor[0] + jj.ravel() + offset[0]) / r_level, 1.0)
    uy = np.mod((anchor[1] + ii.ravel() + offset[1]) / r_level, 1.0)
    n = extent * extent
    q = np.empty((n, 7), dtype=np.float32)
    q[:, 0] = ux
    q[:, 1] = uy
    q[:, 2:4] = wi
    q[:, 4:6] = wo
    q[:, 6] = level
    return q


def _group_shade_inputs(mat, level, r_level, extent, anchor, offset, rng,
                        group_queries):
    """Level-0 sub-query positions covering one view group (E^2 * 4^level
    rays).

    At level 0 the stored (float32-quantized) queries are shaded exactly,
    so stored radiance equals a direct oracle call on the stored rows.
    """
    if level == 0:
        u = group_queries[:, 0:2].astype(np.float64)
        wi_t = group_queries[:, 2:4].astype(np.float64)
        wo_t = group_queries[:, 4:6].astype(np.float64)
        return u, wi_t, wo_t
    f = 1 << level
    r = mat.resolution
    # footprint of group texel j spans [u_j - 1/(2 R_l), u_j + 1/(2 R_l));
    # one jittered sub-query per level-0 cell inside it
    base_x = (anchor[0] + np.arange(extent) + offset[0]) / r_level - 0.5 / r_level
    base_y = (anchor[1] + np.arange(extent) + offset[1]) / r_level - 0.5 / r_level
    sub = np.arange(f)
    jit = rng.random((extent * f, extent * f, 2))
    ux = (base_x[:, None] + sub[None, :] / r).reshape(-1)   # (E*f,)
    uy = (base_y[:, None] + sub[None, :] / r).reshape(-1)
    uxg, uyg = np.meshgrid(ux, uy, indexing="xy")
    u = np.stack([uxg + jit[..., 0] / r, uyg + jit[..., 1] / r], axis=-1)
    u = np.mod(u.reshape(-1, 2), 1.0)
    n = (extent * f) ** 2
    wi_t = np.tile(group_queries[0, 2:4].astype(np.float64), (n, 1))
    wo_t = np.tile(group_queries[0, 4:6].astype(np.float64), (n, 1))
    return u, wi_t, wo_t


def generate_level(mat: HeightfieldMaterial, level: int, n_samples: int,
                   seed: int, group_extent: int | None = None,
                   stats: ShadeStats | None = None) -> LevelSlice:
    """One dataset level; n_samples rounds up to whole view groups."""
    r = mat.resolution
    r_level = r >> level
    if r_level < 1:
        raise ValueError(f"level {level} below 1x1 for resolution {r}")
    extent = r_level if group_extent is None else min(group_extent, r_level)
    texels = extent * extent
    n_groups = max(1, -(-n_samples // texels))
    f = 1 << level

    queries = np.empty((n_groups * texels, 7), dtype=np.float32)
    radiance = np.empty((n_groups * texels, 3), dtype=np.float32)

    # batch groups so a shade call marches many rays at once
    rays_per_group = texels * f * f
    groups_per_chunk = max(1, _SHADE_CHUNK // rays_per_group)
    for g0 in range(0, n_groups, groups_per_chunk):
        gs = range(g0, min(g0 + groups_per_chunk, n_groups))
        us, wis, wos = [], [], []
        for g in gs:
            rng = _group_rng(seed, level, g)
            anchor = rng.integers(0, r_level, size=2)
            offset = rng.random(2)
            wi = sample_disk(rng, 1)[0]
            wo = sample_disk(rng, 1)[0]
            gq = _group_queries(level, r_level, extent, anchor, offset, wi, wo)
            queries[g * texels:(g + 1) * texels] = gq
            u, wi_t, wo_t = _group_shade_inputs(mat, level, r_level, extent,
                                                anchor, offset, rng, gq)
            us.append(u)
            wis.append(wi_t)
            wos.append(wo_t)
        rad = shade_reference(mat, np.concatenate(us), np.concatenate(wis),
                              np.concatenate(wos), stats=stats)
        rad = rad.reshape(len(gs), extent * f, extent * f, 3)
        if level > 0:
            rad = rad.reshape(len(gs), extent, f, extent, f, 3).mean(axis=(2, 4))
        radiance[gs[0] * texels:(gs[-1] + 1) * texels] = \
            rad.reshape(len(gs) * texels, 3)
    return LevelSlice(queries, radiance)


def generate_dataset(mat: HeightfieldMaterial, cfg: GenConfig) -> Dataset:
    if mat.resolution != cfg.resolution:
        raise ValueError(
            f"material resolution {mat.resolution} != configured {cfg.resolution}")
    if cfg.resolution & (cfg.resolution - 1):
        raise ValueError(f"resolution must be a power of two, got {cfg.resolution}")
    stats = ShadeStats()
    slices = []
    for level in range(cfg.levels):
        n = max(1, cfg.samples_level0 >> level)
        slices.append(generate_level(mat, level, n, cfg.seed,
                                     group_extent=cfg.group_extent,
                                     stats=stats))
        r_level = cfg.resolution >> level
        extent = r_level if cfg.group_extent is None else min(cfg.group_extent,
                                                              r_level)
        log.info("level %d: %d queries (%d view groups of %dx%d)", level,
                 slices[-1].queries.shape[0],
                 slices[-1].queries.shape[0] // extent ** 2, extent, extent)
    if stats.camera_misses or stats.shadow_unresolved:
        log.info("march budget: %d camera misses, %d unresolved shadow rays",
                 stats.camera_misses, stats.shadow_unresolved)
    ds = Dataset(cfg.resolution, slices, config_hash_for(mat, cfg))
    return ds.validate()


# ---------------------------------------------------------------------------
# file format

def save_dataset(ds: Dataset, path) -> None:
    ds.validate()
    hash_bytes = ds.config_hash.encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, ds.base_resolution,
                             ds.level_count))
        fh.write(struct.pack("<I", len(hash_bytes)))
        fh.write(hash_bytes)
        fh.write(struct.pack(f"<{ds.level_count}Q", *ds.counts))
        for sl in ds.slices:
            fh.write(np.ascontiguousarray(sl.queries, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(sl.radiance, dtype="<f4").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != MAGIC:
        raise DatasetFormatError(
            f"not a dataset file: magic {blob[:5]!r}, expected {MAGIC!r}")
    off = 5
    version, resolution, level_count = struct.unpack_from("<III", blob, off)
    off += 12
    if version != FORMAT_VERSION:
        raise DatasetFormatError(
            f"unsupported dataset format version {version}, expected {FORMAT_VERSION}")
    (hash_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config_hash = blob[off:off + hash_len].decode()
    off += hash_len
    counts = struct.unpack_from(f"<{level_count}Q", blob, off)
    off += 8 * level_count
    expected = off + sum(n * 10 * 4 for n in counts)
    if len(blob) != expected:
        raise DatasetFormatError(
            f"truncated or padded dataset file: expected {expected} bytes, "
            f"found {len(blob)}")
    slices = []
    for n in counts:
        q = np.frombuffer(blob, dtype="<f4", count=n * 7, offset=off).reshape(n, 7)
        off += n * 7 * 4
        r = np.frombuffer(blob, dtype="<f4", count=n * 3, offset=off).reshape(n, 3)
        off += n * 3 * 4
        slices.append(LevelSlice(q.copy(), r.copy()))
    return Dataset(resolution, slices, config_hash).validate()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
