"""Error reports against reference datasets and the cumulative-ablation
experiment harness (baseline, +encoding, +gradient loss, +remapping)."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .autodiff import Tensor
from .dataset import Dataset, load_dataset
from .imgio import heatmap_u8, montage, tonemap, write_png
from .model import NeuralMaterial, QueryBatch
from .training import (TrainConfig, TrainingAborted, dataset_mse, predict_slice,
                       split_groups, train)

log = logging.getLogger(__name__)


class EvalError(ValueError):
    """Checkpoint and dataset cannot be evaluated against each other."""


@dataclass
class ErrorReport:
    overall_mse_x1000: float
    per_level_mse_x1000: list
    per_level_counts: list
    loss_terms: dict
    runtime_seconds: float
    queries_per_second: float
    heatmap_scale: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)


def check_compatible(mat: NeuralMaterial, ds: Dataset):
    if mat.config.base_resolution != ds.base_resolution:
        raise EvalError(
            f"checkpoint expects a {mat.config.base_resolution}-texel "
            f"pyramid, dataset was generated at {ds.base_resolution}")
    if ds.level_count > mat.config.num_levels:
        raise EvalError(
            f"dataset has {ds.level_count} levels, the model pyramid only "
            f"{mat.config.num_levels}")


def compute_error_report(mat: NeuralMaterial, ds: Dataset,
                         out_dir: str | None = None) -> ErrorReport:
    """Per-level and overall MSE (x1000), per-term loss values on a probe
    group, runtime stats; optionally difference heatmaps per level."""
    check_compatible(mat, ds)
    t0 = time.perf_counter()
    overall, per_level, counts = dataset_mse(mat, ds)
    elapsed = time.perf_counter() - t0
    total_queries = sum(counts)

    # loss terms on the first level-0 group, arranged as one tile
    q, img = ds.group(0, 0)
    r = ds.group_extent(0)
    pred = predict_slice(mat, q, tile_shape=(r, r))
    pred_t = Tensor(pred.reshape(1, r, r, 3).transpose(0, 3, 1, 2))
    ref_t = Tensor(img.reshape(1, r, r, 3).transpose(0, 3, 1, 2))
    _, terms = losses.combined_loss(pred_t, ref_t)

    heat_scale = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for level in range(ds.level_count):
            rl = ds.group_extent(level)
            ql, iml = ds.group(level, 0)
            pl = predict_slice(mat, ql, tile_shape=(rl, rl))
            diff = np.abs(pl.reshape(rl, rl, 3) - iml).mean(axis=-1)
            vmax = float(diff.max()) if diff.size else 0.0
            heat_scale.append(vmax)
            write_png(os.path.join(out_dir, f"diff_level{level}.png"),
                      np.stack([heatmap_u8(diff, vmax or 1.0)] * 3, axis=-1))

    report = ErrorReport(
        overall_mse_x1000=overall * 1e3,
        per_level_mse_x1000=[m * 1e3 for m in per_level],
        per_level_counts=counts,
        loss_terms=terms,
        runtime_seconds=elapsed,
        queries_per_second=total_queries / elapsed if elapsed > 0 else 0.0,
        heatmap_scale=heat_scale,
    )
    if out_dir is not None:
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            fh.write(report.to_json())
    return report


# ---------------------------------------------------------------------------
# ablation suite

ABLATION_COLUMNS = ("baseline", "encoding", "gradient-loss", "remapping")


def ablation_config(base: TrainConfig, column: int, out_dir: str,
                    iterations: int | None) -> TrainConfig:
    """Cumulative switch stack for column k of the ablation strip."""
    return dataclasses.replace(
        base,
        encoding_on=column >= 1,
        gradient_loss_on=column >= 2,
        remap_on=column >= 3,
        out_dir=out_dir,
        iterations=iterations if iterations is not None else base.iterations,
    )


@dataclass
class AblationReport:
    columns: list
    mse_x1000: list
    probe_mse_x1000: list
    config_hashes: list
    iterations: int
    seed: int
    probe_group: int
    partial: bool = False
    aborted_columns: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)


def _probe_group_index(ds: Dataset) -> int:
    _, held = split_groups(ds)
    return held[0][0] if held[0] else 0


def ablation_suite(ds: Dataset, base_config: TrainConfig, out_dir: str,
                   iterations: int | None = None) -> AblationReport:
    """Train the four cumulative configurations with a shared seed, render
    a fixed probe view group for each, emit a five-panel strip (four
    configurations plus the reference) and an MSE-per-column report."""
    os.makedirs(out_dir, exist_ok=True)
    probe_g = _probe_group_index(ds)
    q, ref_img = ds.group(0, probe_g)
    r = ds.group_extent(0)

    panels = []
    mses = []
    probe_mses = []
    hashes = []
    aborted = []
    results = []
    for col, name in enumerate(ABLATION_COLUMNS):
        cfg = ablation_config(base_config, col,
                              os.path.join(out_dir, f"col{col}_{name}"),
                              iterations)
        hashes.append(cfg.semantic_hash(ds.config_hash))
        log.info("ablation column %d (%s): training %d iterations",
                 col, name, cfg.resolved_iterations())
        try:
            res = train(cfg, ds)
        except TrainingAborted as exc:
            log.warning("column %s aborted: %s", name, exc)
            aborted.append(name)
            panels.append(np.zeros((r, r, 3), dtype=np.uint8))
            mses.append(float("nan"))
            probe_mses.append(float("nan"))
            results.append(None)
            continue
        results.append(res)
        overall, _, _ = dataset_mse(res.material, ds)
        mses.append(overall * 1e3)
        pred = predict_slice(res.material, q, tile_shape=(r, r)).reshape(r, r, 3)
        probe_mses.append(float(((pred - ref_img) ** 2).mean()) * 1e3)
        panels.append(tonemap(pred))

    panels.append(tonemap(ref_img))  # reference panel
    strip = montage(panels)
    write_png(os.path.join(out_dir, "ablation_strip.png"), strip)

    report = AblationReport(
        columns=list(ABLATION_COLUMNS), mse_x1000=mses,
        probe_mse_x1000=probe_mses, config_hashes=hashes,
        iterations=(iterations if iterations is not None
                    else base_config.resolved_iterations()),
        seed=base_config.seed, probe_group=probe_g,
        partial=bool(aborted), aborted_columns=aborted)
    with open(os.path.join(out_dir, "ablation_report.json"), "w") as fh:
        fh.write(report.to_json())
    return report
