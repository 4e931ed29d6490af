"""The neural material: Fourier input encoding, a learnable latent
texture pyramid with continuous level-of-detail sampling, a neural uv
offset that compensates parallax, and an MLP (or, optionally, a heavier
inception-style convolutional) decoder mapping latent features plus
encoded query directions to RGB radiance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, record

# inception block widths: four parallel paths concatenated back to 256
INCEPTION_WIDTH = 256
INCEPTION_PATHS = (64, 128, 32, 32)   # 1x1 / 3x3 / 5x5 / pool+1x1
INCEPTION_REDUCE_3 = 96
INCEPTION_REDUCE_5 = 16
INCEPTION_MODULES = 6


class EvaluationError(RuntimeError):
    """A stage of material evaluation produced non-finite values."""


# ---------------------------------------------------------------------------
# queries

@dataclass
class QueryBatch:
    """Batched 7D queries: uv position, disk-projected incoming/outgoing
    directions, and a continuous pyramid-level coordinate."""
    u: np.ndarray
    omega_i: np.ndarray
    omega_o: np.ndarray
    lod: np.ndarray

    def __post_init__(self):
        self.u = np.ascontiguousarray(self.u, dtype=np.float32).reshape(-1, 2)
        n = self.u.shape[0]
        self.omega_i = np.ascontiguousarray(self.omega_i, dtype=np.float32).reshape(n, 2)
        self.omega_o = np.ascontiguousarray(self.omega_o, dtype=np.float32).reshape(n, 2)
        self.lod = np.ascontiguousarray(self.lod, dtype=np.float32).reshape(n)

    def __len__(self):
        return self.u.shape[0]

    def validate(self, num_levels: int | None = None):
        for name, w in (("omega_i", self.omega_i), ("omega_o", self.omega_o)):
            r2 = (w.astype(np.float64) ** 2).sum(axis=1)
            if np.any(r2 > 1.0 + 1e-5):
                raise ValueError(f"{name} leaves the unit disk (max |w|^2 = {r2.max():.4f})")
        if np.any(self.lod < 0):
            raise ValueError("lod must be >= 0")
        if num_levels is not None and np.any(self.lod > num_levels - 1):
            raise ValueError(f"lod exceeds pyramid top level {num_levels - 1}")
        return self

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> "QueryBatch":
        rows = np.asarray(rows)
        return cls(rows[:, 0:2], rows[:, 2:4], rows[:, 4:6], rows[:, 6])

    def rows(self) -> np.ndarray:
        out = np.empty((len(self), 7), dtype=np.float32)
        out[:, 0:2] = self.u
        out[:, 2:4] = self.omega_i
        out[:, 4:6] = self.omega_o
        out[:, 6] = self.lod
        return out

    def slice(self, sel) -> "QueryBatch":
        return QueryBatch(self.u[sel], self.omega_i[sel], self.omega_o[sel],
                          self.lod[sel])


# ---------------------------------------------------------------------------
# Fourier feature encoding

def encoded_width(dims: int, frequencies: int) -> int:
    return dims * 2 * frequencies if frequencies > 0 else dims


def fourier_encode_np(x: np.ndarray, frequencies: int) -> np.ndarray:
    """(N,D) -> (N, D*2*frequencies), per component ordered
    (sin 2^0 pi p, cos 2^0 pi p, ..., sin 2^(L-1) pi p, cos 2^(L-1) pi p)."""
    if frequencies < 1:
        raise ValueError(f"need at least one frequency, got {frequencies}")
    x = np.asarray(x)
    n, d = x.shape
    freqs = (2.0 ** np.arange(frequencies)) * np.pi
    ang = x[:, :, None].astype(np.float64) * freqs
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
    return out.reshape(n, d * 2 * frequencies).astype(x.dtype)


def fourier_encode(x: Tensor, frequencies: int) -> Tensor:
    """Differentiable Fourier features of a (N,D) tensor."""
    if frequencies < 1:
        raise ValueError(f"need at least one frequency, got {frequencies}")
    xd = x.data
    n, d = xd.shape
    freqs = ((2.0 ** np.arange(frequencies)) * np.pi).astype(xd.dtype)
    ang = xd[:, :, None] * freqs
    s = np.sin(ang)
    c = np.cos(ang)
    out = np.stack([s, c], axis=-1).reshape(n, d * 2 * frequencies)

    def bwd(g):
        gp = g.reshape(n, d, frequencies, 2)
        dx = ((gp[..., 0] * c - gp[..., 1] * s) * freqs).sum(axis=2)
        return (dx.astype(xd.dtype),)

    return record(out, (x,), bwd)


def encode_or_raw(x: Tensor, frequencies: int) -> Tensor:
    """Fourier features, or the raw components when encoding is disabled
    (frequencies == 0)."""
    return fourier_encode(x, frequencies) if frequencies > 0 else x


def encode_or_raw_np(x: np.ndarray, frequencies: int) -> np.ndarray:
    return fourier_encode_np(x, frequencies) if frequencies > 0 else np.asarray(x)


# ---------------------------------------------------------------------------
# differentiable texture sampling

def _bilinear_fwd(tex: np.ndarray, uv: np.ndarray):
    """Bilinear sample of (C,R,R) at (M,2) uv; texel centers (i+0.5)/R,
    wrap addressing.  Returns values (M,C) and the backward cache."""
    c, r, _ = tex.shape
    x = uv[:, 0] * r - 0.5
    y = uv[:, 1] * r - 0.5
    x0f = np.floor(x)
    y0f = np.floor(y)
    fx = (x - x0f).astype(tex.dtype)
    fy = (y - y0f).astype(tex.dtype)
    ix0 = x0f.astype(np.int64) % r
    iy0 = y0f.astype(np.int64) % r
    ix1 = (ix0 + 1) % r
    iy1 = (iy0 + 1) % r
    flat = tex.reshape(c, r * r)
    t00 = flat[:, iy0 * r + ix0].T
    t01 = flat[:, iy0 * r + ix1].T
    t10 = flat[:, iy1 * r + ix0].T
    t11 = flat[:, iy1 * r + ix1].T
    fxc = fx[:, None]
    fyc = fy[:, None]
    top = t00 + fxc * (t01 - t00)
    bot = t10 + fxc * (t11 - t10)
    vals = top + fyc * (bot - top)
    cache = (r, ix0, ix1, iy0, iy1, fx, fy, t00, t01, t10, t11)
    return vals, cache


def _bilinear_bwd(tex_shape, cache, gvals):
    """Gradients of a bilinear sample w.r.t. the texture and uv."""
    c, r, _ = tex_shape
    (_, ix0, ix1, iy0, iy1, fx, fy, t00, t01, t10, t11) = cache
    fxc = fx[:, None]
    fyc = fy[:, None]
    w00 = (1 - fxc) * (1 - fyc)
    w01 = fxc * (1 - fyc)
    w10 = (1 - fxc) * fyc
    w11 = fxc * fyc

    chan = (np.arange(c, dtype=np.int64) * (r * r))[:, None]
    dflat = np.zeros(c * r * r, dtype=np.float64)
    for w, iy, ix in ((w00, iy0, ix0), (w01, iy0, ix1),
                      (w10, iy1, ix0), (w11, iy1, ix1)):
        lin = (chan + (iy * r + ix)[None, :]).ravel()
        dflat += np.bincount(lin, weights=(gvals * w).T.ravel().astype(np.float64),
                             minlength=c * r * r)
    dtex = dflat.reshape(tex_shape)

    ddx = (1 - fyc) * (t01 - t00) + fyc * (t11 - t10)
    ddy = (1 - fxc) * (t10 - t00) + fxc * (t11 - t01)
    duv = np.stack([r * (gvals * ddx).sum(axis=1),
                    r * (gvals * ddy).sum(axis=1)], axis=-1)
    return dtex, duv


def texture_sample(tex: Tensor, u: Tensor) -> Tensor:
    """Differentiable bilinear sample of a single latent texture."""
    vals, cache = _bilinear_fwd(tex.data, u.data)

    def bwd(g):
        dtex, duv = _bilinear_bwd(tex.data.shape, cache, g)
        return (dtex.astype(tex.data.dtype), duv.astype(u.data.dtype))

    return record(vals, (tex, u), bwd)


def pyramid_sample(levels: list[Tensor], u: Tensor, lod, stats: dict | None = None) -> Tensor:
    """Continuous-LoD sample of a texture pyramid at (N,2) uv.

    Bilinear within the two levels bracketing lod, then a linear blend by
    frac(lod).  Differentiable w.r.t. texel values, uv, and lod.
    Out-of-range lod clamps (counted in stats).
    """
    n_levels = len(levels)
    lod_t = lod if isinstance(lod, Tensor) else Tensor(np.asarray(lod, dtype=u.data.dtype))
    lod_d = lod_t.data.astype(np.float64)
    clamped = np.clip(lod_d, 0.0, n_levels - 1)
    if stats is not None:
        stats["lod_clamped"] = stats.get("lod_clamped", 0) + \
            int(np.count_nonzero(clamped != lod_d))
    l_floor = np.floor(clamped).astype(np.int64)
    l_floor = np.minimum(l_floor, n_levels - 1)
    l_ceil = np.minimum(l_floor + 1, n_levels - 1)
    frac = (clamped - l_floor).astype(u.data.dtype)

    n = u.data.shape[0]
    c = levels[0].data.shape[0]
    s0 = np.empty((n, c), dtype=u.data.dtype)
    s1 = np.empty((n, c), dtype=u.data.dtype)
    sides = []  # (which, level_index, selection, cache)
    for which, lidx, store in (("floor", l_floor, s0), ("ceil", l_ceil, s1)):
        for lv in np.unique(lidx):
            sel = np.nonzero(lidx == lv)[0]
            vals, cache = _bilinear_fwd(levels[lv].data, u.data[sel])
            store[sel] = vals
            sides.append((which, int(lv), sel, cache))
    out = s0 + frac[:, None] * (s1 - s0)

    def bwd(g):
        g0 = g * (1.0 - frac[:, None])
        g1 = g * frac[:, None]
        dlevels: list[np.ndarray | None] = [None] * n_levels
        du = np.zeros((n, 2), dtype=np.float64)
        for which, lv, sel, cache in sides:
            gs = (g0 if which == "floor" else g1)[sel]
            dtex, duv = _bilinear_bwd(levels[lv].data.shape, cache, gs)
            if dlevels[lv] is None:
                dlevels[lv] = dtex
            else:
                dlevels[lv] += dtex
            du[sel] += duv
        dlod = None
        if lod_t.requires_grad:
            dlod = ((s1 - s0) * g).sum(axis=1).astype(lod_t.data.dtype)
        dlevels_cast = tuple(
            None if d is None else d.astype(levels[i].data.dtype)
            for i, d in enumerate(dlevels))
        return (du.astype(u.data.dtype), dlod) + dlevels_cast

    return record(out, (u, lod_t) + tuple(levels), bwd)


def wrap01(x: Tensor) -> Tensor:
    """x mod 1 with identity gradient (the wrap is piecewise constant)."""
    return record(np.mod(x.data, 1.0), (x,), lambda g: (g,))


# ---------------------------------------------------------------------------
# configuration

@dataclass
class ModelConfig:
    base_resolution: int = 64
    pyramid_channels: int = 8
    offset_channels: int = 8
    hidden_width: int = 64
    offset_hidden: int = 32
    u_frequencies: int = 10
    dir_frequencies: int = 4
    encoding: bool = True
    decoder_kind: str = "mlp"

    def __post_init__(self):
        r = self.base_resolution
        if r < 1 or r & (r - 1):
            raise ValueError(f"base_resolution must be a power of two, got {r}")
        if self.decoder_kind not in ("mlp", "inception"):
            raise ValueError(f"decoder_kind must be mlp or inception, got "
                             f"{self.decoder_kind!r}")

    @property
    def num_levels(self) -> int:
        # halving down to 1x1
        return int(np.log2(self.base_resolution)) + 1

    @property
    def u_enc(self) -> int:
        return self.u_frequencies if self.encoding else 0

    @property
    def dir_enc(self) -> int:
        return self.dir_frequencies if self.encoding else 0

    @property
    def decoder_input_width(self) -> int:
        return (self.pyramid_channels + encoded_width(2, self.u_enc) +
                2 * encoded_width(2, self.dir_enc))

    @property
    def offset_input_width(self) -> int:
        return self.offset_channels + encoded_width(2, self.dir_enc)

    def to_dict(self) -> dict:
        return {
            "base_resolution": self.base_resolution,
            "pyramid_channels": self.pyramid_channels,
            "offset_channels": self.offset_channels,
            "hidden_width": self.hidden_width,
            "offset_hidden": self.offset_hidden,
            "u_frequencies": self.u_frequencies,
            "dir_frequencies": self.dir_frequencies,
            "encoding": self.encoding,
            "decoder_kind": self.decoder_kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _kaiming_uniform(rng, fan_in, shape, dtype):
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# nominal variances of the decoder-input blocks: latent texels start at
# U(-0.5, 0.5), sin/cos features average 1/2, raw disk coords 1/4
_VAR_LATENT = 1.0 / 12.0
_VAR_ENCODED = 0.5
_VAR_RAW_UV = 1.0 / 12.0
_VAR_RAW_DIR = 0.25


def _block_kaiming(rng, blocks, fan_out, dtype):
    """First-layer init with fan-in scaling normalized by each input
    block's nominal variance, so every input dim contributes equally to
    the pre-activation variance.  Plain Kaiming assumes unit input
    variance; here latent texels (var 1/12) sit next to sin/cos features
    (var 1/2) and would otherwise be drowned out.
    """
    din = sum(d for d, _ in blocks)
    rows = []
    for dims, var in blocks:
        bound = np.sqrt(3.0 * 2.0 / (din * var))
        rows.append(rng.uniform(-bound, bound, size=(dims, fan_out)))
    return np.concatenate(rows, axis=0).astype(dtype)


# ---------------------------------------------------------------------------
# decoders

class MlpDecoder:
    """Four affine layers, relu between hidden layers, linear output."""

    def __init__(self, in_width, hidden, rng, dtype, input_blocks=None):
        widths = [in_width, hidden, hidden, hidden, 3]
        self.weights = []
        self.biases = []
        for i in range(4):
            if i == 0 and input_blocks is not None:
                w = _block_kaiming(rng, input_blocks, widths[1], dtype)
            else:
                w = _kaiming_uniform(rng, widths[i], (widths[i], widths[i + 1]),
                                     dtype)
            b = np.zeros(widths[i + 1], dtype=dtype)
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(b, requires_grad=True))

    def parameters(self, prefix="decoder"):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.{i}.weight"] = w
            out[f"{prefix}.{i}.bias"] = b
        return out

    def forward(self, x: Tensor) -> Tensor:
        for i in range(3):
            x = ad.relu(ad.affine(x, self.weights[i], self.biases[i]))
        return ad.affine(x, self.weights[3], self.biases[3])


class _Conv:
    def __init__(self, rng, c_in, c_out, k, dtype):
        fan_in = c_in * k * k
        self.k = Tensor(_kaiming_uniform(rng, fan_in, (c_out, c_in, k, k), dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.pad = (k - 1) // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.k, padding=self.pad, bias=self.b)

    def params(self, name):
        return {f"{name}.weight": self.k, f"{name}.bias": self.b}


class InceptionModule:
    """Four parallel paths over (N,256,h,w), concatenated to 256 channels:
    1x1; 1x1-reduce then 3x3; 1x1-reduce then 5x5; 3x3 maxpool then 1x1.
    Same-padding everywhere, so spatial extent is preserved."""

    path_channels = INCEPTION_PATHS

    def __init__(self, rng, dtype):
        w = INCEPTION_WIDTH
        self.p1 = _Conv(rng, w, INCEPTION_PATHS[0], 1, dtype)
        self.p2_reduce = _Conv(rng, w, INCEPTION_REDUCE_3, 1, dtype)
        self.p2 = _Conv(rng, INCEPTION_REDUCE_3, INCEPTION_PATHS[1], 3, dtype)
        self.p3_reduce = _Conv(rng, w, INCEPTION_REDUCE_5, 1, dtype)
        self.p3 = _Conv(rng, INCEPTION_REDUCE_5, INCEPTION_PATHS[2], 5, dtype)
        self.p4 = _Conv(rng, w, INCEPTION_PATHS[3], 1, dtype)

    def forward(self, x: Tensor) -> Tensor:
        a = ad.relu(self.p1(x))
        b = ad.relu(self.p2(ad.relu(self.p2_reduce(x))))
        c = ad.relu(self.p3(ad.relu(self.p3_reduce(x))))
        d = ad.relu(self.p4(ad.maxpool2d(x, window=3, stride=1, padding=1)))
        return ad.concat([a, b, c, d], axis=1)

    def params(self, name):
        out = {}
        out.update(self.p1.params(f"{name}.p1"))
        out.update(self.p2_reduce.params(f"{name}.p2_reduce"))
        out.update(self.p2.params(f"{name}.p2"))
        out.update(self.p3_reduce.params(f"{name}.p3_reduce"))
        out.update(self.p3.params(f"{name}.p3"))
        out.update(self.p4.params(f"{name}.p4"))
        return out


class InceptionDecoder:
    """Entry 1x1 conv to 256 channels, six inception modules, exit 1x1
    conv to RGB; the 1x1 convolutions at both ends act as per-texel
    fully-connected layers."""

    def __init__(self, in_width, rng, dtype, input_blocks=None):
        self.entry = _Conv(rng, in_width, INCEPTION_WIDTH, 1, dtype)
        if input_blocks is not None:
            w = _block_kaiming(rng, input_blocks, INCEPTION_WIDTH, dtype)
            self.entry.k.data = w.T.reshape(INCEPTION_WIDTH, in_width, 1, 1).copy()
        self.modules = [InceptionModule(rng, dtype) for _ in range(INCEPTION_MODULES)]
        self.exit = _Conv(rng, INCEPTION_WIDTH, 3, 1, dtype)

    def parameters(self, prefix="decoder"):
        out = {}
        out.update(self.entry.params(f"{prefix}.entry"))
        for i, m in enumerate(self.modules):
            out.update(m.params(f"{prefix}.inception.{i}"))
        out.update(self.exit.params(f"{prefix}.exit"))
        return out

    def forward_tiles(self, x: Tensor) -> Tensor:
        """(T, F, h, w) feature tiles -> (T, 3, h, w) radiance tiles."""
        x = ad.relu(self.entry(x))
        for m in self.modules:
            x = m.forward(x)
        return self.exit(x)


# ---------------------------------------------------------------------------
# the material

def _check_stage(t: Tensor, stage: str):
    if not np.all(np.isfinite(t.data)):
        raise EvaluationError(f"non-finite values out of stage {stage!r}")


class NeuralMaterial:
    """Learnable material state: texture pyramid, offset module and
    decoder weights.  Evaluation is pure (no mutation), so concurrent
    readers are safe; training owns the weights exclusively."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6d6174]))
        c = config.pyramid_channels
        self.pyramid: list[Tensor] = []
        for lv in range(config.num_levels):
            r = max(1, config.base_resolution >> lv)
            self.pyramid.append(Tensor(
                rng.uniform(-0.5, 0.5, size=(c, r, r)).astype(self.dtype),
                requires_grad=True))
        self.offset_texture = Tensor(
            rng.uniform(-0.5, 0.5, size=(config.offset_channels,
                                         config.base_resolution,
                                         config.base_resolution)).astype(self.dtype),
            requires_grad=True)

        var_dir = _VAR_ENCODED if config.dir_enc else _VAR_RAW_DIR
        offset_blocks = [(config.offset_channels, _VAR_LATENT),
                         (encoded_width(2, config.dir_enc), var_dir)]
        widths = [config.offset_input_width, config.offset_hidden,
                  config.offset_hidden, 2]
        self.offset_weights = []
        self.offset_biases = []
        for i in range(3):
            if i == 2:
                # zero-initialized final layer: the offset starts as the
                # identity warp
                w = np.zeros((widths[i], widths[i + 1]), dtype=self.dtype)
            elif i == 0:
                w = _block_kaiming(rng, offset_blocks, widths[1], self.dtype)
            else:
                w = _kaiming_uniform(rng, widths[i], (widths[i], widths[i + 1]),
                                     self.dtype)
            self.offset_weights.append(Tensor(w, requires_grad=True))
            self.offset_biases.append(Tensor(np.zeros(widths[i + 1], dtype=self.dtype),
                                             requires_grad=True))

        decoder_blocks = [
            (config.pyramid_channels, _VAR_LATENT),
            (encoded_width(2, config.u_enc),
             _VAR_ENCODED if config.u_enc else _VAR_RAW_UV),
            (encoded_width(2, config.dir_enc), var_dir),
            (encoded_width(2, config.dir_enc), var_dir),
        ]
        if config.decoder_kind == "mlp":
            self.decoder = MlpDecoder(config.decoder_input_width,
                                      config.hidden_width, rng, self.dtype,
                                      input_blocks=decoder_blocks)
        else:
            self.decoder = InceptionDecoder(config.decoder_input_width, rng,
                                            self.dtype,
                                            input_blocks=decoder_blocks)
        self.sample_stats: dict = {}

    # -- parameters ----------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, lv in enumerate(self.pyramid):
            out[f"pyramid.{i}"] = lv
        out["offset.texture"] = self.offset_texture
        for i, (w, b) in enumerate(zip(self.offset_weights, self.offset_biases)):
            out[f"offset.mlp.{i}.weight"] = w
            out[f"offset.mlp.{i}.bias"] = b
        out.update(self.decoder.parameters())
        return out

    def state_entries(self) -> dict[str, np.ndarray]:
        return {name: np.asarray(p.data, dtype=np.float32)
                for name, p in self.parameters().items()}

    def load_state_entries(self, entries: dict[str, np.ndarray]):
        params = self.parameters()
        for name, p in params.items():
            if name not in entries:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            arr = entries[name]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise ValueError(
                    f"parameter {name!r} has shape {tuple(arr.shape)} in the "
                    f"checkpoint, architecture expects {tuple(p.data.shape)}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name!r} contains non-finite values")
            p.data = arr.astype(self.dtype).copy()
        return self

    # -- evaluation ----------------------------------------------------------
    def neural_offset(self, u: Tensor, omega_o_enc: Tensor) -> Tensor:
        """Corrected uv: u plus the predicted displacement, wrapped."""
        feat = texture_sample(self.offset_texture, u)
        x = ad.concat([feat, omega_o_enc], axis=1)
        for i in range(2):
            x = ad.relu(ad.affine(x, self.offset_weights[i], self.offset_biases[i]))
        disp = ad.affine(x, self.offset_weights[2], self.offset_biases[2])
        return wrap01(ad.add(u, disp))

    def evaluate(self, q: QueryBatch, tile_shape: tuple[int, int] | None = None) -> Tensor:
        """RGB radiance for a query batch, (N,3).

        For the inception decoder the batch must be spatially coherent:
        tile_shape = (h, w) with N a multiple of h*w; queries are laid
        out row-major within each tile.
        """
        cfg = self.config
        u = Tensor(q.u.astype(self.dtype))
        wi_enc = Tensor(encode_or_raw_np(q.omega_i.astype(self.dtype), cfg.dir_enc))
        wo_enc = Tensor(encode_or_raw_np(q.omega_o.astype(self.dtype), cfg.dir_enc))

        u2 = self.neural_offset(u, wo_enc)
        _check_stage(u2, "neural-offset")

        feat = pyramid_sample(self.pyramid, u2, q.lod.astype(self.dtype),
                              stats=self.sample_stats)
        _check_stage(feat, "pyramid-sample")

        dec_in = ad.concat([feat, encode_or_raw(u2, cfg.u_enc), wi_enc, wo_enc],
                           axis=1)
        if cfg.decoder_kind == "mlp":
            rgb = self.decoder.forward(dec_in)
        else:
            if tile_shape is None:
                raise ValueError("inception decoder needs tile_shape=(h,w) to "
                                 "arrange the batch as image tiles")
            h, w = tile_shape
            n = len(q)
            if n % (h * w):
                raise ValueError(f"batch of {n} queries is not a whole number "
                                 f"of {h}x{w} tiles")
            tiles = ad.transpose(ad.reshape(dec_in, (n // (h * w), h, w, -1)),
                                 (0, 3, 1, 2))
            out_tiles = self.decoder.forward_tiles(tiles)
            rgb = ad.reshape(ad.transpose(out_tiles, (0, 2, 3, 1)), (n, 3))
        _check_stage(rgb, "decoder")
        return rgb

    def evaluate_chunked(self, q: QueryBatch, chunk: int = 1 << 14) -> np.ndarray:
        """Inference-only batched evaluation in fixed-size chunks (keeps
        per-query cost flat and memory bounded).  MLP decoder only."""
        if self.config.decoder_kind != "mlp":
            raise ValueError("chunked evaluation supports the mlp decoder; "
                             "evaluate inception tiles explicitly")
        out = np.empty((len(q), 3), dtype=np.float32)
        for lo in range(0, len(q), chunk):
            sel = slice(lo, min(lo + chunk, len(q)))
            out[sel] = self.evaluate(q.slice(sel)).data
        return out
