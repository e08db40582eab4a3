"""Image and factor error metrics plus the per-channel albedo scale correction."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
MASK_THRESHOLD = 0.5


def _mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask)
    return m >= MASK_THRESHOLD if m.dtype != bool else m


def psnr(pred, gt, mask=None, cap=PSNR_CAP):
    """PSNR in dB for images in [0, 1], optionally over a ``(H, W)`` mask."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"psnr: shape mismatch {pred.shape} vs {gt.shape}")
    m = _mask(mask, pred.shape[:2])
    diff = (pred - gt)[m]
    if diff.size == 0:
        raise ValueError("psnr: empty mask")
    mse = float(np.mean(diff * diff))
    if mse <= 10.0 ** (-cap / 10.0):
        return cap
    return float(-10.0 * np.log10(mse))


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, win):
    out = correlate1d(img, win, axis=0, mode="constant")
    out = correlate1d(out, win, axis=1, mode="constant")
    r = len(win) // 2
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(pred, gt, size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean single-scale SSIM over the fully covered window positions, averaged over channels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("ssim: shape mismatch")
    if pred.shape[0] < size or pred.shape[1] < size:
        raise ValueError(f"ssim: images must be at least {size}x{size}")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    win = gaussian_window(size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for c in range(pred.shape[2]):
        x, y = pred[..., c], gt[..., c]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.clip(np.mean(vals), -1.0, 1.0))


def normal_angle(pred, gt, mask=None):
    """Mean angle in degrees between normal maps ``(..., 3)`` over the mask."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = _mask(mask, pred.shape[:-1])
    p = pred[m]
    g = gt[m]
    p = p / np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-12)
    g = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
    cos = np.clip(np.sum(p * g, axis=-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def albedo_scale_correct(pred, gt, mask=None):
    """Per-channel least-squares scale ``s`` minimizing ``|s * pred - gt|^2``; returns ``(s * pred, s)``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = _mask(mask, pred.shape[:-1])
    p, g = pred[m], gt[m]
    den = np.sum(p * p, axis=0)
    s = np.where(den > 0, np.sum(p * g, axis=0) / np.where(den > 0, den, 1.0), 1.0)
    return pred * s, s


def total_variation(normals, mask=None):
    """Mean angle (degrees) between horizontally and vertically adjacent masked normals."""
    n = np.asarray(normals, dtype=np.float64)
    n = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
    m = _mask(mask, n.shape[:-1])
    angles = []
    for a, b, ma, mb in ((n[:, 1:], n[:, :-1], m[:, 1:], m[:, :-1]), (n[1:], n[:-1], m[1:], m[:-1])):
        both = ma & mb
        cos = np.clip(np.sum(a[both] * b[both], axis=-1), -1.0, 1.0)
        angles.append(np.degrees(np.arccos(cos)))
    allv = np.concatenate(angles)
    return float(allv.mean()) if allv.size else 0.0


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # dicts: view, metric, value

    def add(self, view, metric, value):
        self.rows.append({"view": view, "metric": metric, "value": float(value)})

    def aggregate(self):
        out = {}
        for r in self.rows:
            out.setdefault(r["metric"], []).append(r["value"])
        return {k: float(np.mean(v)) for k, v in out.items()}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=("view", "metric", "value"), lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({**r, "value": f"{r['value']:.6f}"})
        for k, v in self.aggregate().items():
            w.writerow({"view": "mean", "metric": k, "value": f"{v:.6f}"})
        return buf.getvalue()

    def summary(self):
        return "\n".join(f"{k:>24s}: {v:.4f}" for k, v in self.aggregate().items())
