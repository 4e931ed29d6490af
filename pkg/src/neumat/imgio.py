"""HDR/preview image output: binary PFM, tone-mapped PNG previews,
difference heatmaps and side-by-side montages."""
from __future__ import annotations

import numpy as np
from PIL import Image


def write_pfm(path, image: np.ndarray) -> None:
    """Color PFM, binary, little-endian (scale -1.0), rows bottom-up."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H,W,3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(img[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"PF":
            raise ValueError("not a color PFM file")
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        data = np.frombuffer(fh.read(w * h * 3 * 4),
                             dtype="<f4" if scale < 0 else ">f4")
    return data.reshape(h, w, 3)[::-1].copy()


def tonemap(hdr: np.ndarray, gamma: float = 2.2) -> np.ndarray:
    """Preview transform: clamp(hdr^(1/gamma)) * 255, rounded, uint8."""
    lin = np.clip(np.asarray(hdr, dtype=np.float64), 0.0, None)
    mapped = np.clip(lin ** (1.0 / gamma), 0.0, 1.0) * 255.0
    return np.round(mapped).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise ValueError("write_png expects uint8 (tonemap first)")
    Image.fromarray(arr).save(path)


def heatmap_u8(values: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Grayscale heatmap of non-negative values, scaled to [0, vmax]."""
    v = np.asarray(values, dtype=np.float64)
    top = float(v.max()) if vmax is None else vmax
    if top <= 0:
        top = 1.0
    return np.round(np.clip(v / top, 0, 1) * 255).astype(np.uint8)


def montage(images: list[np.ndarray], gap: int = 4, background: int = 32) -> np.ndarray:
    """Horizontal uint8 strip with thin gaps between panels."""
    if not images:
        raise ValueError("montage of zero panels")
    h = max(im.shape[0] for im in images)
    widths = [im.shape[1] for im in images]
    total = sum(widths) + gap * (len(images) - 1)
    out = np.full((h, total, 3), background, dtype=np.uint8)
    x = 0
    for im in images:
        if im.ndim == 2:
            im = np.stack([im] * 3, axis=-1)
        out[: im.shape[0], x:x + im.shape[1]] = im
        x += im.shape[1] + gap
    return out
