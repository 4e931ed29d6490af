"""Training objective: L1 on raw radiance plus a Sobel gradient term,
optionally computed on 4th-root remapped images to boost the weight of
low-luminance detail."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SOBEL_KX = np.array([[1.0, 0.0, -1.0],
                     [2.0, 0.0, -2.0],
                     [1.0, 0.0, -1.0]])
SOBEL_KY = SOBEL_KX.T.copy()


def _sobel_kernel(k: np.ndarray, dtype) -> Tensor:
    return Tensor(k.reshape(1, 1, 3, 3).astype(dtype))


def sobel(tiles: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel horizontal/vertical Sobel responses of (N,C,h,w) tiles.

    Zero padding keeps the spatial extent; needs h, w >= 3.
    """
    if tiles.data.ndim != 4:
        raise ad.ShapeError(f"sobel expects (N,C,h,w) tiles, got {tiles.shape}")
    n, c, h, w = tiles.shape
    if h < 3 or w < 3:
        raise ad.ShapeError(f"sobel needs tiles of at least 3x3, got {h}x{w}")
    flat = ad.reshape(tiles, (n * c, 1, h, w))
    gx = ad.conv2d(flat, _sobel_kernel(SOBEL_KX, tiles.dtype), padding=1)
    gy = ad.conv2d(flat, _sobel_kernel(SOBEL_KY, tiles.dtype), padding=1)
    return ad.reshape(gx, (n, c, h, w)), ad.reshape(gy, (n, c, h, w))


def gradient_loss(pred: Tensor, ref: Tensor) -> Tensor:
    """Mean over texels/channels of squared Sobel-response differences."""
    if pred.shape != ref.shape:
        raise ad.ShapeError(
            f"gradient_loss: shapes {pred.shape} and {ref.shape} differ")
    pgx, pgy = sobel(pred)
    rgx, rgy = sobel(ref)
    return ad.mean_all(ad.square(ad.sub(rgx, pgx))) + \
        ad.mean_all(ad.square(ad.sub(rgy, pgy)))


# the 4th-root derivative 0.25*x^(-3/4) is unbounded at 0+; radiance with
# hard-shadow zeros would spike the optimizer's moment estimates, so the
# backward pass caps it at its value here (forward stays exact)
REMAP_DERIVATIVE_FLOOR = 1e-3


def remap(image: Tensor, stats: dict | None = None) -> Tensor:
    """4th-root value remapping; negatives clamp to 0 first (so do their
    gradients, and the derivative above 0 is capped, see
    REMAP_DERIVATIVE_FLOOR)."""
    if stats is not None:
        stats["remap_clamped"] = stats.get("remap_clamped", 0) + \
            int(np.count_nonzero(image.data < 0))
    x = image.data
    out = np.maximum(x, 0.0) ** 0.25

    def bwd(g):
        pos = x > 0
        safe = np.maximum(x, REMAP_DERIVATIVE_FLOOR)
        d = np.where(pos, 0.25 * safe ** np.float64(-0.75), 0.0)
        return (g * d.astype(x.dtype),)

    return ad.record(out, (image,), bwd)


def l1_loss(pred: Tensor, ref: Tensor) -> Tensor:
    return ad.mean_all(ad.abs_(ad.sub(ref, pred)))


def combined_loss(pred: Tensor, ref: Tensor, *,
                  gradient_on: bool = True, remap_on: bool = True,
                  gradient_weight: float = 1.0,
                  stats: dict | None = None) -> tuple[Tensor, dict]:
    """Full objective on (N,C,h,w) tiles: L1 on raw radiance plus the
    gradient term on (optionally remapped) images.

    Returns the scalar loss and a dict of per-term float values.
    """
    if pred.shape != ref.shape:
        raise ad.ShapeError(
            f"combined_loss: shapes {pred.shape} and {ref.shape} differ")
    l1 = l1_loss(pred, ref)
    terms = {"l1": l1.item()}
    total = l1
    if gradient_on:
        if remap_on:
            gterm = gradient_loss(remap(pred, stats), remap(ref, stats))
        else:
            gterm = gradient_loss(pred, ref)
        terms["gradient"] = gterm.item()
        if gradient_weight != 1.0:
            gterm = ad.mul(gterm, float(gradient_weight))
        total = ad.add(total, gterm)
    else:
        terms["gradient"] = 0.0
    terms["total"] = total.item()
    return total, terms
