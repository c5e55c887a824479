"""Per-frame MSE / MAE, SSIM and CSI for predicted clips.

Inputs are ``(N, T, P, H, W)`` arrays in [0, 1]. MSE and MAE follow the
per-frame-sum convention on a 0-255 pixel scale: each frame contributes the
sum over its pixels, and frames are then averaged over samples.
"""
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError

PIXEL_SCALE = 255.0


def _check(pred, truth):
    if pred.shape != truth.shape:
        raise ShapeError("prediction vs ground truth", truth.shape, pred.shape)


def _as_clips(a):
    a = np.asarray(a, dtype=np.float64)
    while a.ndim < 5:
        a = a[None]
    return a


def frame_mse(pred, truth, scale=PIXEL_SCALE):
    """Returns ``(per_frame, mean)``; ``per_frame[t]`` averages over samples."""
    _check(pred, truth)
    d = (_as_clips(pred) - _as_clips(truth)) * scale
    per = (d * d).sum(axis=(2, 3, 4)).mean(axis=0)
    return per, float(per.mean())


def frame_mae(pred, truth, scale=PIXEL_SCALE):
    _check(pred, truth)
    d = np.abs(_as_clips(pred) - _as_clips(truth)) * scale
    per = d.sum(axis=(2, 3, 4)).mean(axis=0)
    return per, float(per.mean())


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter(img, g):
    # separable 'valid' Gaussian filtering over the last two axes
    w = len(g)
    a = sliding_window_view(img, w, axis=-2) @ g
    return sliding_window_view(a, w, axis=-1) @ g


def ssim_map(pred, truth, window=11, k1=0.01, k2=0.03, data_range=1.0, sigma=1.5):
    """Local SSIM over the last two axes ('valid' window positions only)."""
    _check(pred, truth)
    h, w = pred.shape[-2:]
    if h < window or w < window:
        raise ConfigError(f"frame {h}x{w} smaller than the {window}x{window} SSIM window")
    g = gaussian_window(window, sigma)
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx, my = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mx * mx
    syy = _filter(y * y, g) - my * my
    sxy = _filter(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(pred, truth, window=11, k1=0.01, k2=0.03, data_range=1.0):
    """Mean local SSIM with a Gaussian (sigma 1.5) window."""
    return float(ssim_map(pred, truth, window, k1, k2, data_range).mean())


def ssim_per_frame(pred, truth, window=11):
    """``(per_frame, mean)`` for clips, per-frame values averaged over samples
    and channels."""
    m = ssim_map(_as_clips(pred), _as_clips(truth), window)
    per = m.mean(axis=(2, 3, 4)).mean(axis=0)
    return per, float(per.mean())


def csi_from_counts(hits, misses, false_alarms):
    denom = hits + misses + false_alarms
    if denom == 0:
        return float("nan")
    return hits / denom


def confusion(pred, truth, threshold):
    """Hits, misses and false alarms over the last two axes."""
    p = np.asarray(pred) >= threshold
    t = np.asarray(truth) >= threshold
    hits = np.sum(p & t, axis=(-2, -1))
    misses = np.sum(~p & t, axis=(-2, -1))
    false_alarms = np.sum(p & ~t, axis=(-2, -1))
    return hits, misses, false_alarms


def csi(pred, truth, threshold):
    """Critical success index, averaged over frames that have at least one
    event in prediction or truth; NaN when none do."""
    _check(pred, truth)
    hits, misses, fa = (np.ravel(a) for a in confusion(pred, truth, threshold))
    denom = hits + misses + fa
    valid = denom > 0
    if not np.any(valid):
        return float("nan")
    return float(np.mean(hits[valid] / denom[valid]))


def csi_per_frame(pred, truth, threshold):
    _check(pred, truth)
    hits, misses, fa = confusion(_as_clips(pred), _as_clips(truth), threshold)
    # (N, T, P) -> pool channels
    hits, misses, fa = hits.sum(axis=2), misses.sum(axis=2), fa.sum(axis=2)
    denom = hits + misses + fa
    per = np.full(denom.shape[1], np.nan)
    for t in range(denom.shape[1]):
        ok = denom[:, t] > 0
        if ok.any():
            per[t] = np.mean(hits[ok, t] / denom[ok, t])
    valid = denom > 0
    overall = float(np.mean(hits[valid] / denom[valid])) if valid.any() else float("nan")
    return per, overall


@dataclass
class EvalReport:
    mse: float
    mae: float
    ssim: float
    mse_per_frame: list
    mae_per_frame: list
    ssim_per_frame: list
    frames: int
    csi: float = None
    csi_per_frame: list = field(default_factory=list)
    csi_threshold: float = None

    def as_fields(self):
        out = {"frames": self.frames, "mse": self.mse, "mae": self.mae, "ssim": self.ssim}
        if self.csi_threshold is not None:
            out["csi"] = self.csi
            out["csi_threshold"] = self.csi_threshold
        return out

    def kv_lines(self):
        lines = [" ".join(f"{k}={v!r}" for k, v in self.as_fields().items())]
        for t in range(len(self.mse_per_frame)):
            rec = {"frame": t + 1, "mse": self.mse_per_frame[t], "mae": self.mae_per_frame[t],
                   "ssim": self.ssim_per_frame[t]}
            if self.csi_threshold is not None:
                rec["csi"] = self.csi_per_frame[t]
            lines.append(" ".join(f"{k}={v!r}" for k, v in rec.items()))
        return lines

    def table(self):
        cols = ["frame", "MSE", "MAE", "SSIM"] + (["CSI"] if self.csi_threshold is not None else [])
        rows = [" ".join(f"{c:>10}" for c in cols)]
        for t in range(len(self.mse_per_frame)):
            vals = [self.mse_per_frame[t], self.mae_per_frame[t], self.ssim_per_frame[t]]
            if self.csi_threshold is not None:
                vals.append(self.csi_per_frame[t])
            rows.append(f"{t + 1:>10} " + " ".join(f"{v:>10.4f}" for v in vals))
        avg = [self.mse, self.mae, self.ssim] + ([self.csi] if self.csi_threshold is not None else [])
        rows.append(f"{'mean':>10} " + " ".join(f"{v:>10.4f}" for v in avg))
        return "\n".join(rows)

    def csv(self):
        head = "frame,mse,mae,ssim" + (",csi" if self.csi_threshold is not None else "")
        lines = [head]
        for t in range(len(self.mse_per_frame)):
            vals = [self.mse_per_frame[t], self.mae_per_frame[t], self.ssim_per_frame[t]]
            if self.csi_threshold is not None:
                vals.append(self.csi_per_frame[t])
            lines.append(f"{t + 1}," + ",".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"


def evaluate(pred, truth, csi_threshold=None, ssim_window=11):
    """Full report for predicted clips against ground truth, both
    ``(N, T, P, H, W)``."""
    _check(pred, truth)
    mse_pf, mse = frame_mse(pred, truth)
    mae_pf, mae = frame_mae(pred, truth)
    window = min(ssim_window, *pred.shape[-2:])
    if window % 2 == 0:
        window -= 1
    ssim_pf, ssim_mean = ssim_per_frame(pred, truth, window)
    report = EvalReport(mse, mae, ssim_mean, mse_pf.tolist(), mae_pf.tolist(), ssim_pf.tolist(),
                        int(pred.shape[0] * pred.shape[1]))
    if csi_threshold is not None:
        csi_pf, csi_mean = csi_per_frame(pred, truth, csi_threshold)
        report.csi, report.csi_per_frame, report.csi_threshold = csi_mean, csi_pf.tolist(), csi_threshold
    return report
