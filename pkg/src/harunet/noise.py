"""Image-domain CBCT noise: additive quantum plus electronic Gaussian terms.

The recorded image is ``clean + psi_q + psi_e`` with independent
``psi_q ~ N(0, sigma_q^2)`` and ``psi_e ~ N(0, sigma_e^2)`` per pixel.
Random numbers come from numpy's Philox counter-based generator keyed by
the seed and an optional substream path, so any slice can be regenerated
on its own.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .volume_io import Slice

RNG_NAME = "numpy.Philox4x64"


@dataclass(frozen=True)
class NoiseParams:
    sigma_q: float = 0.04
    sigma_e: float = 0.02
    seed: int = 0
    clip: bool = True

    def __post_init__(self):
        if not (self.sigma_q >= 0 and self.sigma_e >= 0):
            raise ValueError("noise standard deviations must be non-negative")
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must fit in 64 bits")

    def header(self) -> dict:
        return {"sigma_q": float(self.sigma_q), "sigma_e": float(self.sigma_e),
                "clip": bool(self.clip)}


def noise_generator(seed: int, stream: Sequence[int] = ()) -> np.random.Generator:
    """Independent Philox substream for ``(seed, *stream)``."""
    ss = np.random.SeedSequence([int(seed), *(int(s) for s in stream)])
    return np.random.Generator(np.random.Philox(ss))


def add_noise(clean, p: NoiseParams, stream: Sequence[int] = ()):
    """Return ``clean`` corrupted with quantum and electronic noise.

    Accepts a :class:`Slice` or a bare 2D array and returns the same kind.
    The two noise terms are drawn separately (quantum first) in float64.
    """
    pixels = clean.pixels if isinstance(clean, Slice) else np.asarray(clean)
    rng = noise_generator(p.seed, stream)
    base = pixels.astype(np.float64)
    psi_q = rng.normal(0.0, 1.0, size=base.shape) * p.sigma_q
    psi_e = rng.normal(0.0, 1.0, size=base.shape) * p.sigma_e
    out = base + psi_q + psi_e
    if p.clip:
        np.clip(out, 0.0, 1.0, out=out)
    out = out.astype(pixels.dtype if pixels.dtype.kind == "f" else np.float32)
    if isinstance(clean, Slice):
        return Slice(out, clean.plane, clean.index, clean.source_id)
    return out


def measure_residual_stats(noisy, clean) -> tuple[float, float]:
    """Sample mean and unbiased sample variance of ``noisy - clean``."""
    a = noisy.pixels if isinstance(noisy, Slice) else np.asarray(noisy)
    b = clean.pixels if isinstance(clean, Slice) else np.asarray(clean)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    if d.size < 2:
        return float(d.mean()), 0.0
    return float(d.mean()), float(d.var(ddof=1))


def lag1_autocorrelation(residual: np.ndarray, axis: int = -1) -> float:
    """Lag-1 autocorrelation of a residual field along ``axis``."""
    r = np.asarray(residual, dtype=np.float64)
    r = r - r.mean()
    a = np.moveaxis(r, axis, -1)
    num = np.sum(a[..., 1:] * a[..., :-1])
    den = np.sum(r * r)
    return float(num / den) if den > 0 else 0.0


def randomized_params(p: NoiseParams, rng: np.random.Generator, spread: float = 0.5) -> NoiseParams:
    """Per-slice noise levels drawn uniformly in ``[1-spread, 1+spread]`` times the base."""
    fq, fe = rng.uniform(1.0 - spread, 1.0 + spread, size=2)
    return NoiseParams(p.sigma_q * fq, p.sigma_e * fe, p.seed, p.clip)
