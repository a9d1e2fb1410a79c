"""Image array helpers: bilinear resize, PNG I/O, heat-map overlays."""

from pathlib import Path

import numpy as np
from PIL import Image


def _axis_weights(n_in, n_out):
    # half-pixel centers, edges clamped
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(arr, out_h, out_w):
    """Bilinear resize of an (H, W) or (H, W, C) float array."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    r0, r1, fr = _axis_weights(h, out_h)
    c0, c1, fc = _axis_weights(w, out_w)
    extra = (1,) * (arr.ndim - 2)
    fr = fr.reshape((-1, 1) + extra)
    rows = arr[r0] * (1.0 - fr) + arr[r1] * fr
    fc = fc.reshape((1, -1) + extra)
    return rows[:, c0] * (1.0 - fc) + rows[:, c1] * fc


def read_rgb(path):
    """Decode an image file into float64 RGB in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_mask(path, mask):
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), mode="L").save(
        Path(path), format="PNG"
    )


def write_rgb(path, rgb):
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(rgb * 255.0).astype(np.uint8), mode="RGB").save(Path(path), format="PNG")


def to_unit_range(values):
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def heat_colors(values):
    """Map [0, 1] values to a blue-red ramp, returns (H, W, 3)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    r = np.clip(1.5 * v - 0.25, 0.0, 1.0)
    g = np.clip(1.0 - 2.0 * np.abs(v - 0.5), 0.0, 1.0)
    b = np.clip(1.25 - 1.5 * v, 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def heat_overlay(rgb, values, alpha=0.5):
    rgb = np.asarray(rgb, dtype=np.float64)
    heat = heat_colors(values)
    if heat.shape[:2] != rgb.shape[:2]:
        heat = resize_bilinear(heat, *rgb.shape[:2])
    return (1.0 - alpha) * rgb + alpha * heat


def mask_overlay(rgb, mask, color=(1.0, 0.2, 0.2), alpha=0.45):
    rgb = np.asarray(rgb, dtype=np.float64).copy()
    m = np.asarray(mask, dtype=bool)
    rgb[m] = (1.0 - alpha) * rgb[m] + alpha * np.asarray(color)
    return rgb


def compose_panel(tiles, gap=2):
    """Tiles (H, W, 3) in [0, 1], resized to the first tile's height, side by side on white."""
    h = tiles[0].shape[0]
    cols = []
    for i, t in enumerate(tiles):
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 2:
            t = np.repeat(t[..., None], 3, axis=-1)
        if t.shape[0] != h:
            t = resize_bilinear(t, h, max(1, round(t.shape[1] * h / t.shape[0])))
        if i:
            cols.append(np.ones((h, gap, 3)))
        cols.append(np.clip(t, 0.0, 1.0))
    return np.concatenate(cols, axis=1)
