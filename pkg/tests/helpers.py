"""Small shared fixtures for tests that need a whole model."""
import numpy as np

from hart.tracker import HART, ModelConfig


def tiny_config(**kw) -> ModelConfig:
    base = dict(image_hw=(24, 24), glimpse_hw=(12, 12), lstm_units=6, app_dim=5, fuse_dim=8,
                decoder_hidden=8, dropout=0.0, zoneout=0.0)
    return ModelConfig(**{**base, **kw})


def tiny_model(**kw) -> HART:
    return HART(tiny_config(**kw))


def tiny_batch(T=3, seed=0, B=2, size=24):
    rng = np.random.default_rng(seed)
    frames = rng.uniform(size=(B, T, size, size, 3))
    boxes = np.stack([np.c_[rng.uniform(4, 8, (T, 2)), rng.uniform(6, 10, (T, 2))] for _ in range(B)])
    return frames, boxes


def swap_param(model, name, tensor):
    """Rebind the attribute at dotted path ``name`` (list indices allowed)."""
    obj = model
    parts = name.split(".")
    for part in parts[:-1]:
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    setattr(obj, parts[-1], tensor)


def raster_iou(a, b, res=1e-3):
    """Pixel-count IoU on a fine sample grid.

    Rectangles are products of intervals, so each region's pixel count is the
    product of per-axis sample counts; this keeps fine grids affordable.
    """
    lo = np.minimum(a[:2], b[:2])
    hi = np.maximum(np.add(a[:2], a[2:]), np.add(b[:2], b[2:]))
    grids = [np.arange(lo[k] + res / 2, hi[k], res) for k in range(2)]

    def count(x0, y0, x1, y1):
        nx = np.count_nonzero((grids[0] >= x0) & (grids[0] < x1))
        ny = np.count_nonzero((grids[1] >= y0) & (grids[1] < y1))
        return nx * ny

    ca = count(a[0], a[1], a[0] + a[2], a[1] + a[3])
    cb = count(b[0], b[1], b[0] + b[2], b[1] + b[3])
    ci = count(max(a[0], b[0]), max(a[1], b[1]), min(a[0] + a[2], b[0] + b[2]), min(a[1] + a[3], b[1] + b[3]))
    return ci / (ca + cb - ci)


def glimpse_oracle(image, att, gh, gw, sigma):
    """Explicit double sum over pixels with independently built Gaussian rows."""
    H, W, C = image.shape

    def rows(center, span, length, n):
        stride = span / (n - 1)
        s = max(np.polynomial.polynomial.polyval(stride, sigma.coefficients), sigma.sigma_min)
        m = np.empty((n, length))
        for r in range(n):
            mu = center - span / 2 + r * stride
            for i in range(length):
                m[r, i] = np.exp(-(i - mu) ** 2 / (2 * s * s))
            m[r] /= m[r].sum()
        return m

    ay, ax = rows(att[1], att[3], H, gh), rows(att[0], att[2], W, gw)
    out = np.zeros((gh, gw, C))
    for u in range(gh):
        for v in range(gw):
            for i in range(H):
                for j in range(W):
                    out[u, v] += ay[u, i] * image[i, j] * ax[v, j]
    return out
