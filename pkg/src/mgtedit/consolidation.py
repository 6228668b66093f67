"""Attention consolidation and the smoothing toolbox.

Attention maps from a range of layers are averaged into one text->image
relevance map, then optionally sharpened. Two families of smoothers exist:
four filters (gaussian, bilateral, morphological, adaptive), each followed by
peak preservation so strong attention survives, and four interpolators (rbf,
cubic, linear, nearest) that upsample by an odd factor and block-average back
down. All of them use symmetric border reflection and keep constant maps
fixed.

Maps are plain 2D float64 arrays, finite and non-negative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RBFInterpolator

from .model import AttentionRecord

FILTER_METHODS = ("gaussian", "bilateral", "morphological", "adaptive")
INTERP_METHODS = ("rbf", "cubic", "linear", "nearest")

PEAK_ALPHA = 0.7
PEAK_PERCENTILE = 90.0
RBF_SIZE_LIMIT = 64  # dense-solve cost grows cubically with H*W


@dataclass(frozen=True)
class SmoothSpec:
    """Smoothing method selection.

    ``strength`` scales the filter kernels; for interpolator methods it is
    the odd integer upsampling factor k.
    """

    method: str
    strength: float = 1.0

    def __post_init__(self):
        if self.method in FILTER_METHODS:
            if not (self.strength > 0):
                raise ValueError("filter strength must be positive")
        elif self.method in INTERP_METHODS:
            k = self.strength
            if k != int(k) or int(k) < 1 or int(k) % 2 == 0:
                raise ValueError("interpolation factor must be an odd positive integer")
        else:
            raise ValueError(f"unknown smoothing method: {self.method!r}")

    @property
    def factor(self) -> int:
        return int(self.strength)


def check_map(amap: np.ndarray) -> np.ndarray:
    amap = np.asarray(amap, dtype=np.float64)
    if amap.ndim != 2 or amap.size == 0:
        raise ValueError("attention map must be a non-empty 2D array")
    if not np.isfinite(amap).all() or amap.min() < 0:
        raise ValueError("attention map values must be finite and non-negative")
    return amap


def stack_layers(records: list[AttentionRecord], layers, rows,
                 grid_shape: tuple[int, int]) -> np.ndarray:
    """Mean text->iterate attention over chosen layers, all heads, chosen rows."""
    layer_set = sorted(set(int(l) for l in layers))
    row_list = sorted(set(int(m) for m in rows))
    if not layer_set or not row_list:
        raise ValueError("layer and row sets must be non-empty")
    selected = [r for r in records if r.layer in layer_set]
    present = {r.layer for r in selected}
    missing = [l for l in layer_set if l not in present]
    if missing:
        raise ValueError(f"no attention records for layers {missing}")
    h, w = grid_shape
    slabs = []
    for r in selected:
        if r.n_image != h * w:
            raise ValueError("record image size does not match grid shape")
        if row_list[0] < 0 or row_list[-1] >= r.text_len:
            raise ValueError("text row index out of range")
        slabs.append(r.text_to_iterate()[row_list, :])
    return np.stack(slabs).mean(axis=(0, 1)).reshape(h, w)


# --- shared helpers --------------------------------------------------------

def _pad(amap: np.ndarray, radius: int) -> np.ndarray:
    return np.pad(amap, radius, mode="symmetric")


def _gauss_kernel1d(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _box_mean(amap: np.ndarray, radius: int) -> np.ndarray:
    h, w = amap.shape
    padded = _pad(amap, radius)
    acc = np.zeros_like(amap)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            acc += padded[dy:dy + h, dx:dx + w]
    return acc / (2 * radius + 1) ** 2


def _gaussian_raw(amap: np.ndarray, sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    k = _gauss_kernel1d(sigma, radius)
    h, w = amap.shape
    padded = _pad(amap, radius)
    rows = np.zeros((h + 2 * radius, w))
    for dx in range(2 * radius + 1):
        rows += k[dx] * padded[:, dx:dx + w]
    out = np.zeros((h, w))
    for dy in range(2 * radius + 1):
        out += k[dy] * rows[dy:dy + h, :]
    return out


def percentile_linear(values: np.ndarray, q: float) -> float:
    """Linear-interpolated percentile of the flattened values."""
    return float(np.percentile(values, q))


def peak_preserve(original: np.ndarray, smoothed: np.ndarray) -> np.ndarray:
    """Blend original values back in above its 90th percentile."""
    original = check_map(original)
    smoothed = np.asarray(smoothed, dtype=np.float64)
    if original.shape != smoothed.shape:
        raise ValueError("peak_preserve shapes must match")
    p90 = percentile_linear(original, PEAK_PERCENTILE)
    high = original > p90
    out = smoothed.copy()
    out[high] = PEAK_ALPHA * original[high] + (1.0 - PEAK_ALPHA) * smoothed[high]
    return out


# --- filters ---------------------------------------------------------------

def gaussian_smooth(amap: np.ndarray, strength: float) -> np.ndarray:
    amap = check_map(amap)
    return peak_preserve(amap, _gaussian_raw(amap, 2.0 * strength))


def _bilateral_raw(amap: np.ndarray, sigma_s: float, sigma_r: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma_s)
    h, w = amap.shape
    padded = _pad(amap, radius)
    num = np.zeros((h, w))
    den = np.zeros((h, w))
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = padded[dy + radius:dy + radius + h, dx + radius:dx + radius + w]
            ws = math.exp(-(dx * dx + dy * dy) / (2.0 * sigma_s * sigma_s))
            wr = np.exp(-((shifted - amap) ** 2) / (2.0 * sigma_r * sigma_r))
            num += ws * wr * shifted
            den += ws * wr
    return num / den


def bilateral_smooth(amap: np.ndarray, strength: float) -> np.ndarray:
    amap = check_map(amap)
    value_range = float(amap.max() - amap.min())
    sigma_r = strength * value_range if value_range > 0 else 1.0
    return peak_preserve(amap, _bilateral_raw(amap, 2.0 * strength, sigma_r))


def _morph(amap: np.ndarray, radius: int, op) -> np.ndarray:
    h, w = amap.shape
    padded = _pad(amap, radius)
    out = None
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx * dx + dy * dy > radius * radius:
                continue
            win = padded[dy + radius:dy + radius + h, dx + radius:dx + radius + w]
            out = win.copy() if out is None else op(out, win)
    return out


def morph_close(amap: np.ndarray, radius: int) -> np.ndarray:
    """Grayscale closing: dilation then erosion with a disk element."""
    return _morph(_morph(amap, radius, np.maximum), radius, np.minimum)


def morphological_smooth(amap: np.ndarray, strength: float) -> np.ndarray:
    amap = check_map(amap)
    radius = max(3, math.floor(strength * 5.0))
    opened = _morph(_morph(amap, radius, np.minimum), radius, np.maximum)
    return peak_preserve(amap, morph_close(opened, radius))


def adaptive_smooth(amap: np.ndarray, strength: float) -> np.ndarray:
    amap = check_map(amap)
    m = _box_mean(amap, 1)
    m2 = _box_mean(amap * amap, 1)
    var = np.maximum(m2 - m * m, 0.0)
    vmin, vmax = float(var.min()), float(var.max())
    if vmax > vmin:
        weight = 1.0 - 0.7 * (var - vmin) / (vmax - vmin)
    else:
        weight = np.ones_like(amap)
    blended = weight * _gaussian_raw(amap, 2.0 * strength) + (1.0 - weight) * amap
    return peak_preserve(amap, blended)


# --- interpolators ---------------------------------------------------------

def _source_coords(n_out: int, k: int, n_src: int) -> np.ndarray:
    # Pixel-center mapping, clamped so border samples stay inside the grid.
    r = np.arange(n_out, dtype=np.float64)
    return np.clip((r + 0.5) / k - 0.5, 0.0, n_src - 1.0)


def _natural_spline_eval(values: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """1D natural cubic spline through values at 0..n-1, sampled at coords.

    Solves the standard tridiagonal system for second derivatives with
    zero-curvature ends; n = 1 degenerates to a constant.
    """
    n = values.shape[-1]
    if n == 1:
        return np.repeat(values[..., :1], len(coords), axis=-1)
    lead = values.shape[:-1]
    v = values.reshape(-1, n)
    m = np.zeros_like(v)  # second derivatives; natural ends stay zero
    if n > 2:
        sub = np.ones(n - 3)
        diag = np.full(n - 2, 4.0)
        rhs = 6.0 * (v[:, :-2] - 2.0 * v[:, 1:-1] + v[:, 2:])
        # Thomas elimination on the constant tridiagonal system.
        cp = np.zeros(n - 2)
        dp = np.zeros((v.shape[0], n - 2))
        cp[0] = sub[0] / diag[0] if n > 3 else 0.0
        dp[:, 0] = rhs[:, 0] / diag[0]
        for i in range(1, n - 2):
            denom = diag[i] - (sub[i - 1] if i - 1 < len(sub) else 0.0) * cp[i - 1]
            cp[i] = (sub[i] / denom) if i < n - 3 else 0.0
            dp[:, i] = (rhs[:, i] - sub[i - 1] * dp[:, i - 1]) / denom
        m[:, n - 2] = dp[:, n - 3]
        for i in range(n - 4, -1, -1):
            m[:, i + 1] = dp[:, i] - cp[i] * m[:, i + 2]
    idx = np.clip(np.floor(coords).astype(int), 0, n - 2)
    t = coords - idx
    a = v[:, idx]
    b = v[:, idx + 1]
    ma = m[:, idx]
    mb = m[:, idx + 1]
    out = (a * (1 - t) + b * t
           + ((1 - t) ** 3 - (1 - t)) * ma / 6.0
           + (t ** 3 - t) * mb / 6.0)
    return out.reshape(*lead, len(coords))


def _upsample(amap: np.ndarray, method: str, k: int) -> np.ndarray:
    h, w = amap.shape
    ys = _source_coords(h * k, k, h)
    xs = _source_coords(w * k, k, w)
    if method == "nearest":
        yi = np.floor(ys + 0.5).astype(int)
        xi = np.floor(xs + 0.5).astype(int)
        return amap[np.ix_(yi, xi)]
    if method == "linear":
        y0 = np.clip(np.floor(ys).astype(int), 0, h - 2) if h > 1 else np.zeros(len(ys), int)
        x0 = np.clip(np.floor(xs).astype(int), 0, w - 2) if w > 1 else np.zeros(len(xs), int)
        ty = (ys - y0)[:, None] if h > 1 else np.zeros((len(ys), 1))
        tx = (xs - x0)[None, :] if w > 1 else np.zeros((1, len(xs)))
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        tl = amap[np.ix_(y0, x0)]
        tr = amap[np.ix_(y0, x1)]
        bl = amap[np.ix_(y1, x0)]
        br = amap[np.ix_(y1, x1)]
        top = tl * (1 - tx) + tr * tx
        bot = bl * (1 - tx) + br * tx
        return top * (1 - ty) + bot * ty
    if method == "cubic":
        rows = _natural_spline_eval(amap, xs)
        return _natural_spline_eval(rows.T, ys).T
    if method == "rbf":
        if max(h, w) > RBF_SIZE_LIMIT:
            raise ValueError("rbf size limit")
        if h < 2 or w < 2:
            raise ValueError("rbf needs at least a 2x2 map")
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
        centers = np.stack([yy.reshape(-1), xx.reshape(-1)], axis=1)
        interp = RBFInterpolator(centers, amap.reshape(-1),
                                 kernel="thin_plate_spline")
        oy, ox = np.meshgrid(ys, xs, indexing="ij")
        pts = np.stack([oy.reshape(-1), ox.reshape(-1)], axis=1)
        return interp(pts).reshape(h * k, w * k)
    raise ValueError(f"unknown interpolation method: {method!r}")


def _block_mean(amap: np.ndarray, k: int) -> np.ndarray:
    h, w = amap.shape
    return amap.reshape(h // k, k, w // k, k).mean(axis=(1, 3))


def interpolate_smooth(amap: np.ndarray, method: str, k: int) -> np.ndarray:
    """Upsample by the named interpolant, then k x k block-average back."""
    amap = check_map(amap)
    if k != int(k) or int(k) < 1 or int(k) % 2 == 0:
        raise ValueError("interpolation factor must be an odd positive integer")
    k = int(k)
    if k == 1 and method == "nearest":
        return amap.copy()
    if method not in INTERP_METHODS:
        raise ValueError(f"unknown interpolation method: {method!r}")
    return _block_mean(_upsample(amap, method, k), k)


def apply_smoothing(amap: np.ndarray, spec: SmoothSpec) -> np.ndarray:
    """Dispatch a map through the method named by the spec."""
    if spec.method == "gaussian":
        return gaussian_smooth(amap, spec.strength)
    if spec.method == "bilateral":
        return bilateral_smooth(amap, spec.strength)
    if spec.method == "morphological":
        return morphological_smooth(amap, spec.strength)
    if spec.method == "adaptive":
        return adaptive_smooth(amap, spec.strength)
    return interpolate_smooth(amap, spec.method, spec.factor)
