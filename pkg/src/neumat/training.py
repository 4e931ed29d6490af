"""Training loop: spatially coherent tile batches, the combined
objective with ablation switches, Adam, periodic checkpoints, and
bit-reproducible resume.

Batches are built from the dataset's view groups: each tile picks a
level (proportional to per-level sample mass), a view group at that
level, and a contiguous uv window into the group's image, wrapping
toroidally when the window exceeds the level extent.  All queries of a
tile share one light/view pair, so the reference tile is a coherent
image and the Sobel-based gradient loss is meaningful.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tape, Tensor
from .checkpoint_io import CheckpointData, load_checkpoint, save_checkpoint
from .dataset import Dataset, load_dataset
from .model import EvaluationError, ModelConfig, NeuralMaterial, QueryBatch
from .optim import Adam

log = logging.getLogger(__name__)

VALIDATION_MODULUS = 20   # 1 in 20 view groups held out (5%)


class ConfigError(ValueError):
    """Bad training configuration or config file."""


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss; the last good checkpoint survives."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    dataset: str = ""
    out_dir: str = "run"
    iterations: int | None = None      # default 30000, 80000 with inception
    tiles_per_batch: int = 4
    tile_h: int = 32
    tile_w: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    encoding_on: bool = True
    gradient_loss_on: bool = True
    remap_on: bool = True
    decoder_kind: str = "mlp"
    gradient_loss_weight: float = 1.0
    checkpoint_period: int = 1000
    workers: int = 1
    pyramid_channels: int = 8
    hidden_width: int = 64

    def resolved_iterations(self) -> int:
        if self.iterations is not None:
            return self.iterations
        return 80000 if self.decoder_kind == "inception" else 30000

    def validate(self):
        if self.resolved_iterations() <= 0:
            raise ConfigError("iterations must be > 0")
        if self.gradient_loss_on and (self.tile_h < 3 or self.tile_w < 3):
            raise ConfigError("gradient loss needs tiles of at least 3x3 "
                              f"(got {self.tile_h}x{self.tile_w})")
        if self.tiles_per_batch < 1:
            raise ConfigError("tiles_per_batch must be >= 1")
        if self.decoder_kind not in ("mlp", "inception"):
            raise ConfigError(f"decoder_kind must be mlp or inception, "
                              f"got {self.decoder_kind!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self

    def model_config(self, base_resolution: int) -> ModelConfig:
        return ModelConfig(base_resolution=base_resolution,
                           pyramid_channels=self.pyramid_channels,
                           hidden_width=self.hidden_width,
                           encoding=self.encoding_on,
                           decoder_kind=self.decoder_kind)

    def semantic_fields(self) -> dict:
        """Everything that affects the training trajectory.  Paths, the
        stopping iteration and the checkpoint cadence do not: resuming to
        a later target must hash identically."""
        skip = {"out_dir", "dataset", "iterations", "checkpoint_period"}
        return {f.name: getattr(self, f.name) for f in fields(self)
                if f.name not in skip}

    def semantic_hash(self, dataset_hash: str) -> str:
        parts = [f"{k}={self.semantic_fields()[k]!r}"
                 for k in sorted(self.semantic_fields())]
        parts.append(f"dataset_hash={dataset_hash}")
        return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# config file

_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def _coerce_field(name: str, kind, raw: str):
    if kind == "bool":
        word = raw.strip().lower()
        if word not in _BOOL_WORDS:
            raise ConfigError(f"key {name}: {raw!r} is not a boolean")
        return _BOOL_WORDS[word]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"key {name}: {exc}") from exc
    return raw


_FIELD_KINDS = {
    "dataset": "str", "out_dir": "str", "iterations": "int",
    "tiles_per_batch": "int", "tile_h": "int", "tile_w": "int",
    "lr": "float", "beta1": "float", "beta2": "float", "eps": "float",
    "seed": "int", "encoding_on": "bool", "gradient_loss_on": "bool",
    "remap_on": "bool", "decoder_kind": "str",
    "gradient_loss_weight": "float", "checkpoint_period": "int",
    "workers": "int", "pyramid_channels": "int", "hidden_width": "int",
}


def parse_config_file(path) -> dict:
    """key=value lines; blank lines and #-comments allowed; unknown keys
    rejected."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, "
                                  f"got {stripped!r}")
            key, _, value = stripped.partition("=")
            key = key.strip()
            if key not in _FIELD_KINDS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = _coerce_field(key, _FIELD_KINDS[key], value.strip())
    return out


def build_config(file_values: dict | None = None, cli_values: dict | None = None) -> TrainConfig:
    """Merge config file and CLI flag values; CLI wins."""
    merged: dict = {}
    merged.update(file_values or {})
    merged.update({k: v for k, v in (cli_values or {}).items() if v is not None})
    unknown = set(merged) - set(_FIELD_KINDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**merged).validate()


# ---------------------------------------------------------------------------
# validation split & batches

def is_heldout_group(level: int, group: int) -> bool:
    digest = hashlib.sha1(f"{level}:{group}".encode()).digest()
    return int.from_bytes(digest[:4], "little") % VALIDATION_MODULUS == 0


def split_groups(ds: Dataset):
    """(train, heldout) lists of group indices per level."""
    train, held = [], []
    for level in range(ds.level_count):
        n = ds.group_count(level)
        h = [g for g in range(n) if is_heldout_group(level, g)]
        t = [g for g in range(n) if not is_heldout_group(level, g)]
        if not t:  # never let a level go untrained
            t, h = h, []
        train.append(t)
        held.append(h)
    return train, held


def make_batch(ds: Dataset, rng: np.random.Generator, cfg: TrainConfig,
               train_groups: list[list[int]]):
    """A batch of spatially coherent tiles.

    Returns (QueryBatch, reference tiles (T,3,h,w)).  Each tile: one
    level (sampled proportional to per-level training mass), one view
    group, one contiguous h x w uv window into the group.  Windows wrap
    toroidally only when the group covers the whole level; a group too
    small for the tile resamples the level.
    """
    h, w = cfg.tile_h, cfg.tile_w
    mass = np.array([len(g) * ds.group_extent(lv) ** 2
                     for lv, g in enumerate(train_groups)], dtype=np.float64)
    probs = mass / mass.sum()
    queries = []
    refs = np.empty((cfg.tiles_per_batch, h, w, 3), dtype=np.float32)
    for t in range(cfg.tiles_per_batch):
        for _attempt in range(64):
            level = int(rng.choice(len(probs), p=probs))
            extent = ds.group_extent(level)
            full_cover = extent == ds.level_resolution(level)
            if full_cover or (extent >= h and extent >= w):
                break
        else:
            raise ConfigError(
                f"no level admits a {h}x{w} tile: view groups are smaller "
                "and do not cover their levels; use a smaller tile")
        group = train_groups[level][int(rng.integers(len(train_groups[level])))]
        q, img = ds.group(level, group)
        if full_cover:
            oy = int(rng.integers(extent))
            ox = int(rng.integers(extent))
            iy = (oy + np.arange(h)[:, None]) % extent
            ix = (ox + np.arange(w)[None, :]) % extent
        else:
            oy = int(rng.integers(extent - h + 1))
            ox = int(rng.integers(extent - w + 1))
            iy = oy + np.arange(h)[:, None]
            ix = ox + np.arange(w)[None, :]
        flat = (iy * extent + ix).ravel()
        queries.append(q[flat])
        refs[t] = img.reshape(extent * extent, 3)[flat].reshape(h, w, 3)
    qb = QueryBatch.from_rows(np.concatenate(queries, axis=0))
    return qb, np.ascontiguousarray(refs.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# evaluation helpers (shared with the reporting module)

def predict_slice(mat: NeuralMaterial, rows: np.ndarray,
                  tile_shape: tuple[int, int] | None = None) -> np.ndarray:
    qb = QueryBatch.from_rows(rows)
    if mat.config.decoder_kind == "mlp":
        return mat.evaluate_chunked(qb)
    return mat.evaluate(qb, tile_shape=tile_shape).data


def dataset_mse(mat: NeuralMaterial, ds: Dataset,
                groups_per_level: list[list[int]] | None = None,
                max_queries_per_level: int | None = None):
    """(overall_mse, per_level_mse, per_level_counts) over the dataset
    (optionally restricted to given view groups)."""
    per_level = []
    counts = []
    sse_total = 0.0
    n_total = 0
    for level in range(ds.level_count):
        extent = ds.group_extent(level)
        groups = (groups_per_level[level] if groups_per_level is not None
                  else list(range(ds.group_count(level))))
        if max_queries_per_level is not None:
            cap = max(1, max_queries_per_level // (extent * extent))
            groups = groups[:cap]
        sse = 0.0
        n = 0
        for g in groups:
            q, img = ds.group(level, g)
            pred = predict_slice(mat, q, tile_shape=(extent, extent))
            diff = pred.astype(np.float64) - img.reshape(-1, 3).astype(np.float64)
            sse += float((diff * diff).sum())
            n += diff.size
        per_level.append(sse / n if n else float("nan"))
        counts.append(n // 3)
        sse_total += sse
        n_total += n
    overall = sse_total / n_total if n_total else float("nan")
    return overall, per_level, counts


# ---------------------------------------------------------------------------
# the loop

@dataclass
class TrainResult:
    checkpoint_path: str
    config: TrainConfig
    material: NeuralMaterial
    history: dict = field(default_factory=dict)
    grad_first_nonzero: dict = field(default_factory=dict)
    validation: list = field(default_factory=list)   # (iteration, mse)


def _loss_on_tiles(mat, cfg, qb, refs, stats):
    pred = mat.evaluate(qb, tile_shape=(cfg.tile_h, cfg.tile_w))
    t = refs.shape[0]
    tiles = ad.transpose(ad.reshape(pred, (t, cfg.tile_h, cfg.tile_w, 3)),
                         (0, 3, 1, 2))
    return losses.combined_loss(
        tiles, Tensor(refs), gradient_on=cfg.gradient_loss_on,
        remap_on=cfg.remap_on, gradient_weight=cfg.gradient_loss_weight,
        stats=stats)


def _train_step(mat, cfg, params, qb, refs, stats):
    """Forward/backward; fills param grads; returns per-term floats."""
    n_tiles = refs.shape[0]
    if cfg.workers == 1 or n_tiles < 2:
        with Tape():
            total, terms = _loss_on_tiles(mat, cfg, qb, refs, stats)
            ad.backward(total)
        return terms

    # data-parallel shards: independent tapes, then a fixed-order reduction
    bounds = np.linspace(0, n_tiles, min(cfg.workers, n_tiles) + 1).astype(int)
    shards = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    tile_q = cfg.tile_h * cfg.tile_w

    def run(shard):
        lo, hi = shard
        sink: dict = {}
        with Tape():
            total, terms = _loss_on_tiles(
                mat, cfg, qb.slice(slice(lo * tile_q, hi * tile_q)),
                refs[lo:hi], stats)
            ad.backward(total, grad_sink=sink)
        return (hi - lo) / n_tiles, terms, sink

    with ThreadPoolExecutor(max_workers=len(shards)) as pool:
        results = list(pool.map(run, shards))

    terms = {"l1": 0.0, "gradient": 0.0, "total": 0.0}
    by_id = {id(p): p for p in params.values()}
    for weight, shard_terms, sink in results:   # fixed shard order
        for key in terms:
            terms[key] += weight * shard_terms[key]
        for tid, g in sink.items():
            p = by_id[tid]
            if p.grad is None:
                p.grad = weight * g
            else:
                p.grad += weight * g
    return terms


def _write_checkpoint(path, mat, opt, cfg, cfg_hash, iteration, rng):
    entries = dict(mat.state_entries())
    entries.update(opt.state_entries())
    save_checkpoint(path, arch=mat.config.to_dict(), iteration=iteration,
                    config_hash=cfg_hash, rng_state=rng.bit_generator.state,
                    entries=entries)


def _run_loop(mat, opt, rng, cfg, ds, start_iteration) -> TrainResult:
    total_iters = cfg.resolved_iterations()
    cfg_hash = cfg.semantic_hash(ds.config_hash)
    os.makedirs(cfg.out_dir, exist_ok=True)
    train_groups, held_groups = split_groups(ds)
    params = mat.parameters()
    history = {"iteration": [], "total": [], "l1": [], "gradient": []}
    validation = []
    grad_first = {}
    stats: dict = {}
    last_ckpt = None

    for it in range(start_iteration + 1, total_iters + 1):
        qb, refs = make_batch(ds, rng, cfg, train_groups)
        try:
            terms = _train_step(mat, cfg, params, qb, refs, stats)
        except (EvaluationError, ad.NonFiniteError) as exc:
            raise TrainingAborted(
                f"evaluation blew up at iteration {it} ({exc}); last good "
                f"checkpoint: {last_ckpt}", checkpoint_path=last_ckpt) from exc
        if not np.isfinite(terms["total"]):
            raise TrainingAborted(
                f"non-finite loss at iteration {it}; last good checkpoint: "
                f"{last_ckpt}", checkpoint_path=last_ckpt)
        if it - start_iteration <= 100:
            for name, p in params.items():
                if name not in grad_first and p.grad is not None and \
                        np.any(p.grad):
                    grad_first[name] = it
        opt.step()

        history["iteration"].append(it)
        history["total"].append(terms["total"])
        history["l1"].append(terms["l1"])
        history["gradient"].append(terms["gradient"])

        if it % cfg.checkpoint_period == 0 or it == total_iters:
            # tiny datasets may hold nothing out at some level: fall back
            # to the first training group there so the metric stays defined
            val_groups = [held if held else train[:1]
                          for held, train in zip(held_groups, train_groups)]
            cap = 1 << (10 if cfg.decoder_kind == "inception" else 14)
            val_mse, _, _ = dataset_mse(mat, ds, val_groups,
                                        max_queries_per_level=cap)
            validation.append((it, val_mse))
            path = os.path.join(cfg.out_dir, f"ckpt_{it:06d}.nmat")
            _write_checkpoint(path, mat, opt, cfg, cfg_hash, it, rng)
            last_ckpt = path
            log.info("iter %d/%d loss %.5f (l1 %.5f, grad %.5f) val mse %.6f",
                     it, total_iters, terms["total"], terms["l1"],
                     terms["gradient"], val_mse)

    _write_history_csv(os.path.join(cfg.out_dir, "train_log.csv"),
                       history, validation)
    if stats:
        log.info("sampling stats: %s", stats)
    return TrainResult(checkpoint_path=last_ckpt, config=cfg, material=mat,
                       history=history, grad_first_nonzero=grad_first,
                       validation=validation)


def _write_history_csv(path, history, validation):
    val_by_iter = dict(validation)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "total", "l1", "gradient", "val_mse"])
        for i, it in enumerate(history["iteration"]):
            writer.writerow([it, history["total"][i], history["l1"][i],
                             history["gradient"][i],
                             val_by_iter.get(it, "")])


def train(cfg: TrainConfig, ds: Dataset | None = None) -> TrainResult:
    cfg.validate()
    if ds is None:
        ds = load_dataset(cfg.dataset)
    log.info("training: %d iterations, decoder %s, switches enc=%s grad=%s "
             "remap=%s, batch %dx%dx%d (defaults for unstated knobs: Adam, "
             "lr %.1e)", cfg.resolved_iterations(), cfg.decoder_kind,
             cfg.encoding_on, cfg.gradient_loss_on, cfg.remap_on,
             cfg.tiles_per_batch, cfg.tile_h, cfg.tile_w, cfg.lr)
    mat = NeuralMaterial(cfg.model_config(ds.base_resolution), seed=cfg.seed)
    opt = Adam(mat.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
               eps=cfg.eps)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7261696e]))
    return _run_loop(mat, opt, rng, cfg, ds, start_iteration=0)


def resume(checkpoint_path, cfg: TrainConfig, ds: Dataset | None = None) -> TrainResult:
    """Continue training from a checkpoint; in single-threaded mode the
    continuation is bit-identical to an uninterrupted run."""
    cfg.validate()
    if ds is None:
        ds = load_dataset(cfg.dataset)
    ck = load_checkpoint(checkpoint_path)
    cfg_hash = cfg.semantic_hash(ds.config_hash)
    if ck.config_hash != cfg_hash:
        raise ConfigError(
            f"checkpoint was written with config hash {ck.config_hash}, "
            f"resume config hashes to {cfg_hash}; resume needs the identical "
            "configuration (including seed) and dataset")
    arch = ModelConfig.from_dict(ck.arch)
    expected = cfg.model_config(ds.base_resolution)
    if arch.to_dict() != expected.to_dict():
        raise ConfigError(f"checkpoint architecture {arch.to_dict()} does not "
                          f"match configured {expected.to_dict()}")
    if ck.iteration >= cfg.resolved_iterations():
        raise ConfigError(f"checkpoint is already at iteration {ck.iteration}, "
                          f"target is {cfg.resolved_iterations()}")

    mat = NeuralMaterial(arch, seed=cfg.seed)
    model_entries = {k: v for k, v in ck.entries.items()
                     if not k.startswith("adam.")}
    mat.load_state_entries(model_entries)
    opt = Adam(mat.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
               eps=cfg.eps)
    opt.load_state_entries(ck.entries, t=ck.iteration)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7261696e]))
    if ck.rng_state is None:
        raise ConfigError("checkpoint carries no RNG state; cannot resume")
    rng.bit_generator.state = ck.rng_state
    return _run_loop(mat, opt, rng, cfg, ds, start_iteration=ck.iteration)
