"""Independent oracles shared by the test suite: central finite
differences and brute-force nested-loop reference implementations.
These deliberately avoid the library's own vectorized code paths."""
import numpy as np


def finite_diff(f, arrays, h=1e-3):
    """Central finite differences of a scalar function of float64 arrays.

    ``f(*arrays) -> float`` is re-evaluated with each element nudged by
    +-h; arrays are perturbed in place and restored.
    """
    grads = []
    for a in arrays:
        assert a.dtype == np.float64, "finite_diff wants float64 inputs"
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f(*arrays)
            flat[j] = orig - h
            fm = f(*arrays)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, abs_floor=1e-6):
    """Worst elementwise relative error, with an absolute floor so
    near-zero gradients compare absolutely."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), abs_floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def conv2d_brute(x, k, padding):
    """Cross-correlation by quadruple loop. x: (C,H,W) or (N,C,H,W)."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    ho = h + 2 * padding - kh + 1
    wo = w + 2 * padding - kw + 1
    xp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    out = np.zeros((n, c_out, ho, wo), dtype=np.float64)
    for b in range(n):
        for co in range(c_out):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ci in range(c_in):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += xp[b, ci, y + dy, xx + dx] * k[co, ci, dy, dx]
                    out[b, co, y, xx] = acc
    return out[0] if squeeze else out


def maxpool2d_brute(x, window=3, padding=1):
    """Sliding-window max by loop, -inf padding, stride 1."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    n, c, h, w = x.shape
    ho = h + 2 * padding - window + 1
    wo = w + 2 * padding - window + 1
    xp = np.full((n, c, h + 2 * padding, w + 2 * padding), -np.inf, dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    out = np.zeros((n, c, ho, wo), dtype=np.float64)
    for b in range(n):
        for ci in range(c):
            for y in range(ho):
                for xx in range(wo):
                    out[b, ci, y, xx] = xp[b, ci, y:y + window, xx:xx + window].max()
    return out[0] if squeeze else out


def sobel_brute(img):
    """Sobel responses of one (h,w) channel via conv2d_brute, zero pad 1."""
    kx = np.array([[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]])
    ky = kx.T.copy()
    k = np.stack([kx, ky])[:, None]  # (2,1,3,3)
    out = conv2d_brute(img[None].astype(np.float64), k, padding=1)
    return out[0], out[1]


def gradient_loss_brute(pred, ref):
    """Mean over tiles/channels/texels of squared Sobel differences.
    pred/ref: (N,C,h,w)."""
    total = 0.0
    count = 0
    for b in range(pred.shape[0]):
        for c in range(pred.shape[1]):
            pgx, pgy = sobel_brute(pred[b, c])
            rgx, rgy = sobel_brute(ref[b, c])
            total += np.sum((rgx - pgx) ** 2) + np.sum((rgy - pgy) ** 2)
            count += pgx.size
    return total / count
