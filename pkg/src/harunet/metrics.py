"""Image quality metrics (PSNR, SSIM, GMSD), analytic MAC counts and report tables.

SSIM uses an 11x11 Gaussian window (sigma 1.5) evaluated at valid
positions only; GMSD uses 2x2 block-mean downsampling, 3x3 Prewitt
gradients with replicated borders and ``C = 0.0026`` for unit peak
(scaled by ``L**2``). These are conventions; absolute values depend on them.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

SSIM_WIN = 11
SSIM_SIGMA = 1.5
GMSD_C = 0.0026


def _pair(ref, test):
    a = np.asarray(ref, dtype=np.float64)
    b = np.asarray(test, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(ref, test) -> float:
    a, b = _pair(ref, test)
    return float(np.mean((a - b) ** 2))


def psnr(ref, test, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the images are identical."""
    if not peak > 0:
        raise ValueError("peak must be positive")
    err = mse(ref, test)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    r = len(g) // 2
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim_map(ref, test, peak: float = 1.0, win: int = SSIM_WIN, sigma: float = SSIM_SIGMA):
    a, b = _pair(ref, test)
    if a.ndim != 2 or min(a.shape) < win:
        raise ValueError(f"SSIM needs 2D images of at least {win}x{win}, got {a.shape}")
    g = gaussian_window(win, sigma)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    s_aa = _filter_valid(a * a, g) - mu_a * mu_a
    s_bb = _filter_valid(b * b, g) - mu_b * mu_b
    s_ab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return num / den


def ssim(ref, test, peak: float = 1.0, win: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> float:
    """Mean structural similarity over all valid window positions."""
    return float(np.mean(ssim_map(ref, test, peak, win, sigma)))


PREWITT_X = np.array([[1.0, 0.0, -1.0]] * 3) / 3.0
PREWITT_Y = PREWITT_X.T


def _downsample2(img):
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    x = img[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def gradient_magnitude(img):
    gx = ndimage.correlate(img, PREWITT_X, mode="nearest")
    gy = ndimage.correlate(img, PREWITT_Y, mode="nearest")
    return np.sqrt(gx * gx + gy * gy)


def gms_map(ref, test, peak: float = 1.0, c: float = GMSD_C):
    a, b = _pair(ref, test)
    if a.ndim != 2 or min(a.shape) < 2:
        raise ValueError(f"GMSD needs 2D images of at least 2x2, got {a.shape}")
    ga = gradient_magnitude(_downsample2(a))
    gb = gradient_magnitude(_downsample2(b))
    cc = c * peak * peak
    return (2 * ga * gb + cc) / (ga * ga + gb * gb + cc)


def gmsd(ref, test, peak: float = 1.0, c: float = GMSD_C) -> float:
    """Gradient magnitude similarity deviation (population std of the similarity map)."""
    m = gms_map(ref, test, peak, c)
    return float(np.sqrt(np.mean((m - m.mean()) ** 2)))


# ---------------------------------------------------------------- reports

@dataclass
class ImageScores:
    name: str
    psnr_db: float
    ssim: float
    gmsd: float

    @property
    def psnr_infinite(self) -> bool:
        return math.isinf(self.psnr_db)


@dataclass
class MetricsReport:
    model: str
    images: list = field(default_factory=list)
    gmacs: Optional[float] = None
    minutes_per_scan: Optional[float] = None

    def add(self, name, ref, test, peak: float = 1.0) -> ImageScores:
        s = ImageScores(name, psnr(ref, test, peak), ssim(ref, test, peak), gmsd(ref, test, peak))
        self.images.append(s)
        return s

    @property
    def count(self) -> int:
        return len(self.images)

    def _mean(self, attr):
        vals = [getattr(s, attr) for s in self.images]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def psnr_db(self) -> float:
        return self._mean("psnr_db")

    @property
    def ssim(self) -> float:
        return self._mean("ssim")

    @property
    def gmsd(self) -> float:
        return self._mean("gmsd")


def evaluate_pairs(model: str, pairs, peak: float = 1.0) -> MetricsReport:
    """``pairs`` yields ``(name, ref, test)``."""
    rep = MetricsReport(model)
    for name, ref, test in pairs:
        rep.add(name, ref, test, peak)
    return rep


def _cell(v, fmt):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return format(v, fmt)


def render_report(reports: Sequence[MetricsReport], macs: Optional[dict] = None) -> str:
    """Plain-text table, one row per model, sorted by PSNR (best first).

    ``macs`` optionally maps model name to GMACs per patch and overrides
    ``report.gmacs``.
    """
    macs = macs or {}
    cols = ["Model", "PSNR", "SSIM", "GMSD", "GMACs/patch", "time/scan"]
    rows = []
    for r in sorted(reports, key=lambda r: (-r.psnr_db if not math.isnan(r.psnr_db) else math.inf)):
        g = macs.get(r.model, r.gmacs)
        rows.append([r.model, _cell(r.psnr_db, ".2f"), _cell(r.ssim, ".4f"), _cell(r.gmsd, ".4f"),
                     _cell(g, ".3f"),
                     "-" if r.minutes_per_scan is None else f"{r.minutes_per_scan:.3f} min"])
    widths = [max(len(c), *(len(row[i]) for row in rows)) if rows else len(c)
              for i, c in enumerate(cols)]
    fmt = lambda vals: " | ".join(v.ljust(w) for v, w in zip(vals, widths)).rstrip()
    lines = [fmt(cols), "-+-".join("-" * w for w in widths)]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- MACs

def conv_macs(k: int, c_in: int, c_out: int, h_out: int, w_out: int) -> int:
    return k * k * c_in * c_out * h_out * w_out


def conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv_transpose_macs(k: int, c_in: int, c_out: int, h_in: int, w_in: int) -> int:
    return k * k * c_in * c_out * h_in * w_in


def linear_macs(d_in: int, d_out: int, tokens: int) -> int:
    return d_in * d_out * tokens


def window_attention_macs(dim: int, h: int, w: int, window: int) -> dict:
    """qkv projection, score and weighted-sum matmuls, output projection."""
    tokens = h * w
    t = window * window
    n_win = tokens // t
    return OrderedDict([
        ("qkv", linear_macs(dim, 3 * dim, tokens)),
        ("", 2 * n_win * t * t * dim),
        ("proj", linear_macs(dim, dim, tokens)),
    ])


@dataclass
class MacBreakdown:
    per_layer: "OrderedDict[str, int]"

    @property
    def total(self) -> int:
        return sum(self.per_layer.values())

    @property
    def total_gmacs(self) -> float:
        return self.total / 1e9


def count_macs(cfg, input_dims: Sequence[int] = (1, 1, 256, 256)) -> MacBreakdown:
    """Analytic MACs of a HARU-Net forward pass, keyed by layer path.

    Normalization, activations, softmax, bias and elementwise products count 0.
    """
    n, c, h, w = (int(d) for d in input_dims)
    if c != 1:
        raise ValueError("HARU-Net takes single-channel input")
    m = cfg.size_multiple
    if h % m or w % m:
        raise ValueError(f"input {h}x{w} not divisible by {m}")
    out: "OrderedDict[str, int]" = OrderedDict()

    def put(path, v):
        out[path] = out.get(path, 0) + n * v

    def res_block(path, c_in, c_out, hh, ww):
        put(f"{path}.conv1", conv_macs(3, c_in, c_out, hh, ww))
        put(f"{path}.conv2", conv_macs(3, c_out, c_out, hh, ww))
        put(f"{path}.proj", conv_macs(1, c_in, c_out, hh, ww))

    def hab(path, dim, hh, ww, shift):
        win = cfg.window_size
        for k, v in window_attention_macs(dim, hh, ww, win).items():
            put(f"{path}.attn" + (f".{k}" if k else ""), v)
        hidden = int(round(dim * cfg.mlp_ratio))
        put(f"{path}.mlp.fc1", linear_macs(dim, hidden, hh * ww))
        put(f"{path}.mlp.fc2", linear_macs(hidden, dim, hh * ww))
        red = dim // cfg.se_reduction
        put(f"{path}.ca.fc1", linear_macs(dim, red, 1))
        put(f"{path}.ca.fc2", linear_macs(red, dim, 1))

    widths = cfg.widths
    # execution order: encoder, bottleneck, decoder
    c_prev, hh, ww = 1, h, w
    for i, wd in enumerate(widths):
        res_block(f"encoders.{i}", c_prev, wd, hh, ww)
        h2, w2 = conv_out(hh, 4, 2, 1), conv_out(ww, 4, 2, 1)
        put(f"downs.{i}", conv_macs(4, wd, wd, h2, w2))
        c_prev, hh, ww = wd, h2, w2
    cb = cfg.bottleneck_channels
    put("bottleneck.conv", conv_macs(3, c_prev, cb, hh, ww))
    if not cfg.ablate_attention:
        for j in range(cfg.rhag_depth):
            hab(f"bottleneck.rhag.blocks.{j}", cb, hh, ww, j % 2)
    put("bottleneck.proj", conv_macs(1, c_prev, cb, hh, ww))
    c_prev = cb
    for i, wd in enumerate(reversed(widths)):
        put(f"ups.{i}", conv_transpose_macs(4, c_prev, wd, hh, ww))
        hh, ww = hh * 2, ww * 2
        if not cfg.ablate_attention:
            hab(f"skips.{i}", wd, hh, ww, 0)
        res_block(f"decoders.{i}", 2 * wd, wd, hh, ww)
        c_prev = wd
    put("head", conv_macs(1, widths[0], 1, hh, ww))
    return MacBreakdown(out)
