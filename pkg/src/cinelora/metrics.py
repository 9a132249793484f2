"""Desk-scale clip metrics: a perceptual proxy, temporal stability, and style distance.

Clips are float arrays (F, C, H, W) in [-1, 1].
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .data import STYLE_LIBRARY, StyleSpec, render_styled, to_model_space

PYRAMID_LEVELS = 3
GRID = 4
_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _check_pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 4:
        raise ValueError(f"expected (frames, channels, height, width), got {a.shape}")
    return a, b


def _blur_down(x: np.ndarray) -> np.ndarray:
    """Separable 5-tap binomial blur (reflect padding), then keep every second pixel."""
    pad = [(0, 0)] * (x.ndim - 2) + [(2, 2), (2, 2)]
    xp = np.pad(x, pad, mode="reflect")
    h, w = x.shape[-2:]
    rows = sum(_BINOMIAL[i] * xp[..., i:i + h, :] for i in range(5))
    both = sum(_BINOMIAL[i] * rows[..., :, i:i + w] for i in range(5))
    return both[..., ::2, ::2]


def _cell_stats(x: np.ndarray) -> np.ndarray:
    """Per-frame features: (mean, std) per channel over a GRID x GRID cell layout."""
    h, w = x.shape[-2:]
    ys = np.linspace(0, h, GRID + 1).round().astype(int)
    xs = np.linspace(0, w, GRID + 1).round().astype(int)
    feats = []
    for i in range(GRID):
        for j in range(GRID):
            cell = x[..., ys[i]:max(ys[i + 1], ys[i] + 1), xs[j]:max(xs[j + 1], xs[j] + 1)]
            feats.append(cell.mean(axis=(-2, -1)))
            feats.append(cell.std(axis=(-2, -1)))
    return np.concatenate(feats, axis=-1)  # (F, 2*C*GRID*GRID)


def proxy_per_frame(a, b) -> np.ndarray:
    a, b = _check_pair(a, b)
    total = np.zeros(a.shape[0])
    for level in range(PYRAMID_LEVELS):
        if level:
            a, b = _blur_down(a), _blur_down(b)
        diff = _cell_stats(a) - _cell_stats(b)
        total += np.sqrt((diff * diff).sum(axis=-1))
    return total / PYRAMID_LEVELS


def perceptual_proxy(a, b) -> float:
    """Multi-scale patch-statistic distance averaged over frames; 0 iff all statistics agree."""
    return float(proxy_per_frame(a, b).mean())


def temporal_stability(clip) -> float:
    """Mean over adjacent frame pairs of the element-averaged squared difference."""
    clip = np.asarray(clip, dtype=np.float64)
    if clip.shape[0] < 2:
        raise ValueError("temporal_stability needs at least 2 frames")
    d = clip[1:] - clip[:-1]
    return float((d * d).reshape(d.shape[0], -1).mean(axis=1).mean())


# -- style ------------------------------------------------------------------------------
HIST_BINS = 8
CALIBRATION_SEEDS = (101, 202, 303, 404, 505, 606)
CALIBRATION_FRAMES = 33


def _exact_mean_std(v: np.ndarray) -> tuple[float, float]:
    # fsum is correctly rounded, so the result does not depend on memory layout
    n = v.size
    m = math.fsum(v.ravel().tolist()) / n
    d = v.ravel() - m
    return m, math.sqrt(math.fsum((d * d).tolist()) / n)


def tone_statistics(clip) -> np.ndarray:
    """Per-channel mean and std plus an 8-bin luminance histogram, on [0, 1] pixel values."""
    x = (np.asarray(clip, dtype=np.float64) + 1.0) / 2.0
    ms = [_exact_mean_std(x[:, c]) for c in range(x.shape[1])]
    means = np.array([m for m, _ in ms])
    stds = np.array([s for _, s in ms])
    lum = 0.299 * x[:, 0] + 0.587 * x[:, 1] + 0.114 * x[:, 2]
    hist, _ = np.histogram(np.clip(lum, 0.0, 1.0), bins=HIST_BINS, range=(0.0, 1.0))
    return np.concatenate([means, stds, hist / lum.size])


@functools.lru_cache(maxsize=32)
def reference_statistics(style: StyleSpec, size: tuple[int, int] = (16, 16)) -> np.ndarray:
    """Tone statistics of the style applied to the generator's canonical calibration scenes."""
    clips = [to_model_space(render_styled(s, CALIBRATION_FRAMES, style, size)) for s in CALIBRATION_SEEDS]
    return tone_statistics(np.concatenate(clips))


def style_distance(clip, style_ref: StyleSpec | str) -> float:
    if isinstance(style_ref, str):
        style_ref = STYLE_LIBRARY[style_ref]
    clip = np.asarray(clip)
    ref = reference_statistics(style_ref, tuple(clip.shape[-2:]))
    d = tone_statistics(clip) - ref
    return float(np.sqrt((d * d).sum()))


@dataclass
class MetricReport:
    perceptual_proxy: float | None = None
    temporal_stability: float | None = None
    style_distance: float | None = None
    frames: int = 0
    per_frame: dict = field(default_factory=dict)

    def to_json(self, config_digest: str) -> dict:
        return {"perceptual_proxy": self.perceptual_proxy, "temporal_stability": self.temporal_stability,
                "style_distance": self.style_distance, "frames": self.frames, "config_digest": config_digest,
                "per_frame": self.per_frame}


def evaluate(clip_a, clip_b=None, style: str | None = None) -> MetricReport:
    clip_a = np.asarray(clip_a)
    rep = MetricReport(frames=int(clip_a.shape[0]))
    if clip_a.shape[0] >= 2:
        rep.temporal_stability = temporal_stability(clip_a)
        d = clip_a[1:].astype(np.float64) - clip_a[:-1]
        rep.per_frame["temporal_stability"] = (d * d).reshape(d.shape[0], -1).mean(axis=1).tolist()
    if clip_b is not None:
        per = proxy_per_frame(clip_a, clip_b)
        rep.perceptual_proxy = float(per.mean())
        rep.per_frame["perceptual_proxy"] = per.tolist()
    if style is not None:
        rep.style_distance = style_distance(clip_a, style)
    return rep
