"""Fidelity and texture metrics: PSNR, SSIM, neighborhood filters, GLCM.

Texture numbers are reported as percentages of the noise-free original,
so the original's texture row is exactly 100.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FIDELITY_KEYS = ("psnr", "ssim")
FIRST_ORDER_KEYS = ("rangefilt", "stdfilt", "entropyfilt")
GLCM_KEYS = ("contrast", "correlation", "energy", "homogeneity")
TEXTURE_KEYS = FIRST_ORDER_KEYS + GLCM_KEYS


@dataclass(frozen=True)
class GlcmConfig:
    levels: int = 64
    # distance-1 offsets at 0, 45, 90, 135 degrees, (dy, dx)
    offsets: tuple = ((0, 1), (-1, 1), (-1, 0), (-1, -1))
    symmetric: bool = True

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("need at least 2 gray levels")
        if not self.offsets:
            raise ValueError("need at least one offset")


@dataclass(frozen=True)
class NeighborhoodConfig:
    range_window: int = 3
    std_window: int = 3
    entropy_window: int = 9
    entropy_bins: int = 256

    def __post_init__(self):
        for w in (self.range_window, self.std_window, self.entropy_window):
            if w % 2 == 0:
                raise ValueError("window sides must be odd")


def psnr(a, b, data_range=1.0):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(data_range ** 2 / mse)


def _gaussian_kernel(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img, kernel):
    """2-D correlation, valid region only."""
    kh, kw = kernel.shape
    view = np.lib.stride_tricks.sliding_window_view(img, (kh, kw))
    return np.einsum("ijkl,kl->ij", view, kernel)


def ssim(a, b, data_range=1.0, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean local SSIM with a Gaussian window over valid positions."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than {window}x{window} window")
    kern = _gaussian_kernel(window, sigma)
    mu_a = _filter_valid(a, kern)
    mu_b = _filter_valid(b, kern)
    var_a = _filter_valid(a * a, kern) - mu_a ** 2
    var_b = _filter_valid(b * b, kern) - mu_b ** 2
    cov = _filter_valid(a * b, kern) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _windows(img, w):
    pad = w // 2
    padded = np.pad(img, pad, mode="edge")
    return np.lib.stride_tricks.sliding_window_view(padded, (w, w))


def neighborhood_texture(image, kind, config: NeighborhoodConfig = NeighborhoodConfig(),
                         value_range=None):
    """Per-pixel window statistic (range / std / entropy) and its mean.

    Entropy is Shannon entropy in bits of the windowed histogram, binned
    over `value_range` (defaults to the image's own min..max).
    """
    image = np.asarray(image, float)
    if kind == "range":
        win = _windows(image, config.range_window)
        out = win.max(axis=(2, 3)) - win.min(axis=(2, 3))
    elif kind == "std":
        win = _windows(image, config.std_window)
        out = win.std(axis=(2, 3), ddof=1)
    elif kind == "entropy":
        if value_range is None:
            value_range = (image.min(), image.max())
        lo, hi = value_range
        nbins = config.entropy_bins
        if hi <= lo:
            q = np.zeros(image.shape, dtype=np.int64)
        else:
            q = np.clip(((image - lo) / (hi - lo) * nbins).astype(np.int64),
                        0, nbins - 1)
        win = _windows(q, config.entropy_window)
        h, w = win.shape[:2]
        n = config.entropy_window ** 2
        flat = win.reshape(h * w, n)
        counts = np.zeros((h * w, nbins), dtype=np.int64)
        np.add.at(counts, (np.repeat(np.arange(h * w), n), flat.reshape(-1)), 1)
        p = counts / n
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = -np.where(p > 0, p * np.log2(p), 0.0).sum(axis=1)
        out = ent.reshape(h, w)
    else:
        raise ValueError(f"unknown neighborhood filter kind: {kind!r}")
    return out, float(out.mean())


def quantize(image, levels, value_range):
    lo, hi = value_range
    if hi <= lo:
        raise ValueError("degenerate quantization range (max <= min)")
    q = (np.asarray(image, float) - lo) / (hi - lo) * levels
    return np.clip(q.astype(np.int64), 0, levels - 1)


def glcm_compute(image, config: GlcmConfig = GlcmConfig(), value_range=None):
    """Normalized gray-level co-occurrence matrix, averaged over offsets."""
    image = np.asarray(image, float)
    if value_range is None:
        value_range = (image.min(), image.max())
    q = quantize(image, config.levels, value_range)
    h, w = q.shape
    total = np.zeros((config.levels, config.levels), dtype=np.float64)
    for dy, dx in config.offsets:
        ys = slice(max(0, -dy), min(h, h - dy))
        xs = slice(max(0, -dx), min(w, w - dx))
        ys2 = slice(max(0, dy), min(h, h + dy))
        xs2 = slice(max(0, dx), min(w, w + dx))
        a = q[ys, xs].ravel()
        b = q[ys2, xs2].ravel()
        m = np.zeros_like(total)
        np.add.at(m, (a, b), 1.0)
        if config.symmetric:
            m = m + m.T
        total += m / m.sum()
    total /= len(config.offsets)
    return total


def glcm_features(matrix):
    """Haralick-style features of a normalized co-occurrence matrix."""
    p = np.asarray(matrix, float)
    n = p.shape[0]
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    contrast = float((p * (i - j) ** 2).sum())
    energy = float((p ** 2).sum())
    homogeneity = float((p / (1.0 + np.abs(i - j))).sum())
    mu_i = float((p * i).sum())
    mu_j = float((p * j).sum())
    var_i = float((p * (i - mu_i) ** 2).sum())
    var_j = float((p * (j - mu_j) ** 2).sum())
    if var_i <= 0 or var_j <= 0:
        correlation = float("nan")
    else:
        correlation = float((p * (i - mu_i) * (j - mu_j)).sum()
                            / np.sqrt(var_i * var_j))
    return {"contrast": contrast, "correlation": correlation,
            "energy": energy, "homogeneity": homogeneity}


def evaluate_image(method_img, original, glcm_config=GlcmConfig(),
                   nbhd_config=NeighborhoodConfig()):
    """All metrics of one image against its noise-free original.

    Quantization / data ranges are anchored to the original so methods are
    comparable.
    """
    rng = (float(original.min()), float(original.max()))
    data_range = rng[1] - rng[0]
    out = {"psnr": psnr(method_img, original, data_range),
           "ssim": ssim(method_img, original, data_range)}
    for kind, key in (("range", "rangefilt"), ("std", "stdfilt"),
                      ("entropy", "entropyfilt")):
        _, out[key] = neighborhood_texture(method_img, kind, nbhd_config,
                                           value_range=rng)
    out.update(glcm_features(glcm_compute(method_img, glcm_config,
                                          value_range=rng)))
    return out


def aggregate(per_image):
    """Mean of each metric over the evaluation set."""
    keys = per_image[0].keys()
    return {k: float(np.mean([m[k] for m in per_image])) for k in keys}


def relative_report(method_values, original_values):
    """Texture metrics as percentages of the original; fidelity stays absolute."""
    out = {}
    for k in FIDELITY_KEYS:
        if k in method_values:
            out[k] = method_values[k]
    for k in TEXTURE_KEYS:
        if k not in method_values:
            continue
        ref = original_values[k]
        if ref == 0 or not np.isfinite(ref):
            out[k + "_pct"] = float("nan")
        else:
            out[k + "_pct"] = 100.0 * method_values[k] / ref
    return out
