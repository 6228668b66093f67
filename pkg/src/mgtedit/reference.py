"""Slow reference implementations of every smoothing method.

These are deliberately written as plain scalar loops with manual index
reflection, independent of the vectorized kernels in consolidation, so the
two can check each other. The filter benchmark runs these before timing the
fast path; the test suite compares both on random maps.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.interpolate import CubicSpline


def reflect_index(i: int, n: int) -> int:
    """Half-sample symmetric reflection of an index into [0, n)."""
    while i < 0 or i >= n:
        if i < 0:
            i = -1 - i
        else:
            i = 2 * n - 1 - i
    return i


def _at(amap, y, x):
    return amap[reflect_index(y, amap.shape[0]), reflect_index(x, amap.shape[1])]


def ref_percentile(values, q: float) -> float:
    """Linear-interpolated percentile from explicitly sorted values."""
    flat = sorted(float(v) for v in np.asarray(values).reshape(-1))
    pos = q / 100.0 * (len(flat) - 1)
    lo = int(math.floor(pos))
    if lo >= len(flat) - 1:
        return flat[-1]
    frac = pos - lo
    return flat[lo] + frac * (flat[lo + 1] - flat[lo])


def ref_peak_preserve(original, smoothed) -> np.ndarray:
    p90 = ref_percentile(original, 90.0)
    out = np.array(smoothed, dtype=np.float64, copy=True)
    h, w = out.shape
    for y in range(h):
        for x in range(w):
            if original[y, x] > p90:
                out[y, x] = 0.7 * original[y, x] + 0.3 * smoothed[y, x]
    return out


def ref_gaussian_raw(amap, strength: float) -> np.ndarray:
    sigma = 2.0 * strength
    radius = math.ceil(3.0 * sigma)
    kernel = np.empty((2 * radius + 1, 2 * radius + 1))
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            kernel[dy + radius, dx + radius] = math.exp(
                -(dx * dx + dy * dy) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    h, w = amap.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    acc += kernel[dy + radius, dx + radius] * _at(amap, y + dy, x + dx)
            out[y, x] = acc
    return out


def ref_gaussian(amap, strength: float) -> np.ndarray:
    return ref_peak_preserve(amap, ref_gaussian_raw(amap, strength))


def ref_bilateral(amap, strength: float) -> np.ndarray:
    sigma_s = 2.0 * strength
    rng = float(np.max(amap) - np.min(amap))
    sigma_r = strength * rng if rng > 0 else 1.0
    radius = math.ceil(3.0 * sigma_s)
    h, w = amap.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            num = 0.0
            den = 0.0
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    v = _at(amap, y + dy, x + dx)
                    ws = math.exp(-(dx * dx + dy * dy) / (2.0 * sigma_s * sigma_s))
                    wr = math.exp(-((v - amap[y, x]) ** 2) / (2.0 * sigma_r * sigma_r))
                    num += ws * wr * v
                    den += ws * wr
            out[y, x] = num / den
    return ref_peak_preserve(amap, out)


def _ref_morph_pass(amap, radius: int, take_max: bool) -> np.ndarray:
    h, w = amap.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            best = None
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    if dx * dx + dy * dy > radius * radius:
                        continue
                    v = _at(amap, y + dy, x + dx)
                    if best is None or (v > best if take_max else v < best):
                        best = v
            out[y, x] = best
    return out


def ref_morphological(amap, strength: float) -> np.ndarray:
    radius = max(3, math.floor(strength * 5.0))
    opened = _ref_morph_pass(_ref_morph_pass(amap, radius, False), radius, True)
    closed = _ref_morph_pass(_ref_morph_pass(opened, radius, True), radius, False)
    return ref_peak_preserve(amap, closed)


def ref_adaptive(amap, strength: float) -> np.ndarray:
    h, w = amap.shape
    var = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            s = 0.0
            s2 = 0.0
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    v = _at(amap, y + dy, x + dx)
                    s += v
                    s2 += v * v
            m = s / 9.0
            var[y, x] = max(s2 / 9.0 - m * m, 0.0)
    vmin, vmax = float(var.min()), float(var.max())
    smooth = ref_gaussian_raw(amap, strength)
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            if vmax > vmin:
                wt = 1.0 - 0.7 * (var[y, x] - vmin) / (vmax - vmin)
            else:
                wt = 1.0
            out[y, x] = wt * smooth[y, x] + (1.0 - wt) * amap[y, x]
    return ref_peak_preserve(amap, out)


def _ref_coords(n_out: int, k: int, n_src: int) -> list[float]:
    out = []
    for r in range(n_out):
        c = (r + 0.5) / k - 0.5
        out.append(min(max(c, 0.0), float(n_src - 1)))
    return out


def _ref_block_mean(big, k: int) -> np.ndarray:
    h, w = big.shape
    out = np.zeros((h // k, w // k))
    for y in range(h // k):
        for x in range(w // k):
            s = 0.0
            for dy in range(k):
                for dx in range(k):
                    s += big[y * k + dy, x * k + dx]
            out[y, x] = s / (k * k)
    return out


def _ref_tps_upsample(amap, k: int) -> np.ndarray:
    h, w = amap.shape
    n = h * w
    centers = [(float(y), float(x)) for y in range(h) for x in range(w)]

    def phi(r):
        return 0.0 if r == 0.0 else r * r * math.log(r)

    a = np.zeros((n + 3, n + 3))
    rhs = np.zeros(n + 3)
    for i, (yi, xi) in enumerate(centers):
        rhs[i] = amap[int(yi), int(xi)]
        for j, (yj, xj) in enumerate(centers):
            a[i, j] = phi(math.hypot(yi - yj, xi - xj))
        a[i, n] = 1.0
        a[i, n + 1] = yi
        a[i, n + 2] = xi
        a[n, i] = 1.0
        a[n + 1, i] = yi
        a[n + 2, i] = xi
    coef = np.linalg.solve(a, rhs)
    ys = _ref_coords(h * k, k, h)
    xs = _ref_coords(w * k, k, w)
    big = np.zeros((h * k, w * k))
    for oy, yv in enumerate(ys):
        for ox, xv in enumerate(xs):
            val = coef[n] + coef[n + 1] * yv + coef[n + 2] * xv
            for i, (yi, xi) in enumerate(centers):
                val += coef[i] * phi(math.hypot(yv - yi, xv - xi))
            big[oy, ox] = val
    return big


def ref_interpolate(amap, method: str, k: int) -> np.ndarray:
    amap = np.asarray(amap, dtype=np.float64)
    h, w = amap.shape
    ys = _ref_coords(h * k, k, h)
    xs = _ref_coords(w * k, k, w)
    big = np.zeros((h * k, w * k))
    if method == "nearest":
        for oy, yv in enumerate(ys):
            for ox, xv in enumerate(xs):
                big[oy, ox] = amap[int(math.floor(yv + 0.5)), int(math.floor(xv + 0.5))]
    elif method == "linear":
        for oy, yv in enumerate(ys):
            for ox, xv in enumerate(xs):
                y0 = min(int(math.floor(yv)), h - 2) if h > 1 else 0
                x0 = min(int(math.floor(xv)), w - 2) if w > 1 else 0
                ty = yv - y0 if h > 1 else 0.0
                tx = xv - x0 if w > 1 else 0.0
                y1 = min(y0 + 1, h - 1)
                x1 = min(x0 + 1, w - 1)
                big[oy, ox] = (amap[y0, x0] * (1 - ty) * (1 - tx)
                               + amap[y0, x1] * (1 - ty) * tx
                               + amap[y1, x0] * ty * (1 - tx)
                               + amap[y1, x1] * ty * tx)
    elif method == "cubic":
        rows = np.zeros((h, w * k))
        for y in range(h):
            if w == 1:
                rows[y, :] = amap[y, 0]
            else:
                rows[y, :] = CubicSpline(np.arange(w), amap[y], bc_type="natural")(xs)
        for ox in range(w * k):
            if h == 1:
                big[:, ox] = rows[0, ox]
            else:
                big[:, ox] = CubicSpline(np.arange(h), rows[:, ox], bc_type="natural")(ys)
    elif method == "rbf":
        big = _ref_tps_upsample(amap, k)
    else:
        raise ValueError(f"unknown interpolation method: {method!r}")
    return _ref_block_mean(big, k)


def ref_smooth(amap, method: str, strength: float) -> np.ndarray:
    """Dispatcher mirroring consolidation.apply_smoothing."""
    amap = np.asarray(amap, dtype=np.float64)
    if method == "gaussian":
        return ref_gaussian(amap, strength)
    if method == "bilateral":
        return ref_bilateral(amap, strength)
    if method == "morphological":
        return ref_morphological(amap, strength)
    if method == "adaptive":
        return ref_adaptive(amap, strength)
    return ref_interpolate(amap, method, int(strength))
