"""HARU-Net: residual U-Net with hybrid attention blocks on the skips and a
residual hybrid attention group at the bottleneck.

All blocks take and return N x C x H x W tensors. ``ablate_attention``
builds the plain residual U-Net (no skip HABs, no RHAG).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
from torch import nn

from . import nn_core
from .nn_core import (Conv2d, ConvTranspose2d, Layer, LayerNorm, Linear, ParameterStore,
                      ShapeError, leaky_relu, record_macs, softmax_lastdim)


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 64
    stages: int = 4
    window_size: int = 8
    num_heads: Optional[tuple] = None
    rhag_depth: int = 6
    mlp_ratio: float = 2.0
    se_reduction: int = 16
    cab_weight: float = 0.01
    leaky_slope: float = 0.01
    ablate_attention: bool = False
    global_residual: bool = False

    def __post_init__(self):
        if self.base_channels < 1 or self.stages < 1 or self.window_size < 1:
            raise ValueError("base_channels, stages and window_size must be positive")
        if self.rhag_depth < 1:
            raise ValueError("rhag_depth must be >= 1")
        if self.num_heads is not None:
            heads = tuple(int(h) for h in self.num_heads)
            if len(heads) != self.stages + 1:
                raise ValueError(f"num_heads needs {self.stages + 1} entries (stages + bottleneck)")
            object.__setattr__(self, "num_heads", heads)
        if not self.ablate_attention:
            for ch in self.widths + (self.bottleneck_channels,):
                h = self.heads_for(ch)
                if ch % h:
                    raise ValueError(f"{ch} channels not divisible by {h} heads")
                if self.se_reduction > ch:
                    raise ValueError(f"se_reduction {self.se_reduction} exceeds {ch} channels")

    @property
    def widths(self) -> tuple:
        return tuple(self.base_channels * 2 ** i for i in range(self.stages))

    @property
    def bottleneck_channels(self) -> int:
        return 2 * self.widths[-1]

    def heads_for(self, channels: int) -> int:
        sites = self.widths + (self.bottleneck_channels,)
        if self.num_heads is not None:
            return self.num_heads[sites.index(channels)]
        return max(1, channels // 32)

    @property
    def size_multiple(self) -> int:
        return 2 ** self.stages * self.window_size

    # flat key/value text

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                v = "auto"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "NetworkConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        vals = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = (s.strip() for s in line.partition("="))
            if not sep or key not in kinds:
                raise ValueError(f"unknown or malformed config line: {raw!r}")
            vals[key] = _parse_field(key, val)
        vals.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**vals)

    @classmethod
    def load(cls, path, **overrides) -> "NetworkConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def _parse_field(key: str, val: str):
    if key in ("ablate_attention", "global_residual"):
        if val.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"{key}: expected a boolean, got {val!r}")
        return val.lower() in ("true", "1")
    if key == "num_heads":
        return None if val == "auto" else tuple(int(x) for x in val.split(","))
    if key in ("mlp_ratio", "cab_weight", "leaky_slope"):
        return float(val)
    return int(val)


def tiny_config(**kw) -> NetworkConfig:
    """Desk-scale config used for tests and quick training runs."""
    base = dict(base_channels=8, window_size=4, se_reduction=4)
    base.update(kw)
    return NetworkConfig(**base)


# ---------------------------------------------------------------- blocks

class ResidualConvBlock(nn.Module):
    """Two (3x3 conv + LeakyReLU) units plus a 1x1 projection skip."""

    def __init__(self, c_in, c_out, slope=0.01, *, gen, dtype=torch.float32):
        super().__init__()
        self.c_in, self.slope = c_in, slope
        self.conv1 = Conv2d(c_in, c_out, 3, 1, 1, gen=gen, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, 1, 1, gen=gen, dtype=dtype)
        self.proj = Conv2d(c_in, c_out, 1, gen=gen, dtype=dtype)

    def forward(self, x):
        if x.shape[1] != self.c_in:
            raise ShapeError(f"residual block expects {self.c_in} channels, got {x.shape[1]}")
        h = leaky_relu(self.conv1(x), self.slope)
        h = leaky_relu(self.conv2(h), self.slope)
        return h + self.proj(x)


def window_partition(x, w):
    """(B, H, W, C) -> (B * nW, w*w, C)."""
    b, h, wd, c = x.shape
    x = x.reshape(b, h // w, w, wd // w, w, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, w * w, c)


def window_reverse(win, w, h, wd):
    c = win.shape[-1]
    x = win.reshape(-1, h // w, wd // w, w, w, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, h, wd, c)


def relative_position_index(w: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(w), torch.arange(w), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    rel[:, :, 0] += w - 1
    rel[:, :, 1] += w - 1
    return rel[:, :, 0] * (2 * w - 1) + rel[:, :, 1]


def shift_mask(h: int, wd: int, w: int, s: int) -> torch.Tensor:
    """(nW, w*w, w*w) additive mask, -inf-like between regions split by the roll."""
    img = torch.zeros(1, h, wd, 1)
    cnt = 0
    for hs in (slice(0, -w), slice(-w, -s), slice(-s, None)):
        for ws in (slice(0, -w), slice(-w, -s), slice(-s, None)):
            img[:, hs, ws, :] = cnt
            cnt += 1
    win = window_partition(img, w).squeeze(-1)
    diff = win[:, None, :] - win[:, :, None]
    return torch.where(diff != 0, torch.tensor(-100.0), torch.tensor(0.0))


class WindowAttention(Layer):
    """Multi-head self-attention inside non-overlapping (optionally shifted) windows."""

    def __init__(self, dim, window, heads, shift=0, *, gen, dtype=torch.float32):
        super().__init__()
        if dim % heads:
            raise ValueError(f"{dim} channels not divisible by {heads} heads")
        self.dim, self.window, self.heads, self.shift = dim, window, heads, shift
        self.scale = (dim // heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, gen=gen, dtype=dtype)
        self.proj = Linear(dim, dim, gen=gen, dtype=dtype)
        self.rel_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads, dtype=dtype))
        self.register_buffer("rel_index", relative_position_index(window), persistent=False)

    def forward(self, x):
        b, c, h, wd = x.shape
        w = self.window
        if h % w or wd % w:
            raise ShapeError(f"feature map {h}x{wd} not divisible by window {w}")
        if c != self.dim:
            raise ShapeError(f"attention expects {self.dim} channels, got {c}")
        s = self.shift if min(h, wd) > w else 0
        t = x.permute(0, 2, 3, 1)
        if s:
            t = torch.roll(t, shifts=(-s, -s), dims=(1, 2))
        win = window_partition(t, w)
        n, tok, _ = win.shape
        hd = c // self.heads
        qkv = self.qkv(win).reshape(n, tok, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.rel_bias[self.rel_index.reshape(-1)].reshape(tok, tok, self.heads)
        scores = scores + bias.permute(2, 0, 1).unsqueeze(0)
        if s:
            mask = shift_mask(h, wd, w, s).to(scores.dtype)
            nw = mask.shape[0]
            scores = scores.reshape(n // nw, nw, self.heads, tok, tok) + mask[None, :, None]
            scores = scores.reshape(n, self.heads, tok, tok)
        attn = softmax_lastdim(scores)
        out = (attn @ v).transpose(1, 2).reshape(n, tok, c)
        record_macs(self, 2 * n * tok * tok * c)
        out = self.proj(out)
        t = window_reverse(out, w, h, wd)
        if s:
            t = torch.roll(t, shifts=(s, s), dims=(1, 2))
        return t.permute(0, 3, 1, 2)


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation gate: x * sigmoid(W2 relu(W1 gap(x)))."""

    def __init__(self, dim, reduction, *, gen, dtype=torch.float32):
        super().__init__()
        if reduction > dim or reduction < 1:
            raise ValueError(f"reduction {reduction} invalid for {dim} channels")
        self.fc1 = Linear(dim, dim // reduction, gen=gen, dtype=dtype)
        self.fc2 = Linear(dim // reduction, dim, gen=gen, dtype=dtype)

    def gates(self, x):
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(nn_core.global_avg_pool(x)))))

    def forward(self, x):
        return x * self.gates(x)[:, :, None, None]


class MLP(nn.Module):
    def __init__(self, dim, ratio, *, gen, dtype=torch.float32):
        super().__init__()
        hidden = int(round(dim * ratio))
        self.fc1 = Linear(dim, hidden, gen=gen, dtype=dtype)
        self.fc2 = Linear(hidden, dim, gen=gen, dtype=dtype)

    def forward(self, x):
        return nn_core.mlp(x, self.fc1, self.fc2)


def _to_tokens(x):
    return x.permute(0, 2, 3, 1)


def _to_maps(t):
    return t.permute(0, 3, 1, 2)


class HAB(nn.Module):
    """Hybrid attention block.

    u = LN(x); y = x + WSA(u) + alpha * CA(u); z = y + MLP(LN(y))
    """

    def __init__(self, dim, window, heads, shift=0, mlp_ratio=2.0, reduction=16,
                 cab_weight=0.01, channel_attention=True, *, gen, dtype=torch.float32):
        super().__init__()
        self.cab_weight = cab_weight
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = WindowAttention(dim, window, heads, shift, gen=gen, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = MLP(dim, mlp_ratio, gen=gen, dtype=dtype)
        self.ca = ChannelAttention(dim, reduction, gen=gen, dtype=dtype) if channel_attention else None

    def forward(self, x):
        u = _to_maps(self.norm1(_to_tokens(x)))
        y = x + self.attn(u)
        if self.ca is not None:
            y = y + self.cab_weight * self.ca(u)
        t = _to_tokens(y)
        return _to_maps(t + self.mlp(self.norm2(t)))

    def zero_output_projections(self):
        with torch.no_grad():
            for lin in (self.attn.proj, self.mlp.fc2):
                lin.weight.zero_()
                lin.bias.zero_()


class RHAG(nn.Module):
    """``depth`` HABs in series, alternating unshifted and half-window shifts, plus a residual."""

    def __init__(self, dim, window, heads, depth=6, mlp_ratio=2.0, reduction=16,
                 cab_weight=0.01, *, gen, dtype=torch.float32):
        super().__init__()
        if depth < 1:
            raise ValueError("RHAG depth must be >= 1")
        self.blocks = nn.ModuleList(
            HAB(dim, window, heads, 0 if i % 2 == 0 else window // 2, mlp_ratio, reduction,
                cab_weight, gen=gen, dtype=dtype)
            for i in range(depth))

    def forward(self, x):
        h = x
        for blk in self.blocks:
            h = blk(h)
        return x + h


class Bottleneck(nn.Module):
    def __init__(self, cfg: NetworkConfig, *, gen, dtype):
        super().__init__()
        c_in, c_out = cfg.widths[-1], cfg.bottleneck_channels
        self.slope = cfg.leaky_slope
        self.conv = Conv2d(c_in, c_out, 3, 1, 1, gen=gen, dtype=dtype)
        self.proj = Conv2d(c_in, c_out, 1, gen=gen, dtype=dtype)
        self.rhag = None
        if not cfg.ablate_attention:
            self.rhag = RHAG(c_out, cfg.window_size, cfg.heads_for(c_out), cfg.rhag_depth,
                             cfg.mlp_ratio, cfg.se_reduction, cfg.cab_weight, gen=gen, dtype=dtype)

    def forward(self, x):
        h = leaky_relu(self.conv(x), self.slope)
        if self.rhag is not None:
            h = self.rhag(h)
        return h + self.proj(x)


class HaruNet(nn.Module):
    """Single-channel image-to-image denoiser.

    Parameters are drawn from a torch generator seeded with ``seed`` in
    construction order, so equal (config, seed, dtype) give identical weights.
    """

    def __init__(self, cfg: NetworkConfig = NetworkConfig(), seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.config = cfg
        gen = torch.Generator().manual_seed(int(seed))
        widths = cfg.widths
        slope = cfg.leaky_slope
        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        c_prev = 1
        for w in widths:
            self.encoders.append(ResidualConvBlock(c_prev, w, slope, gen=gen, dtype=dtype))
            self.downs.append(Conv2d(w, w, 4, 2, 1, gen=gen, dtype=dtype))
            c_prev = w
        self.bottleneck = Bottleneck(cfg, gen=gen, dtype=dtype)
        self.ups = nn.ModuleList()
        self.skips = nn.ModuleList()
        self.decoders = nn.ModuleList()
        c_prev = cfg.bottleneck_channels
        for w in reversed(widths):
            self.ups.append(ConvTranspose2d(c_prev, w, 4, 2, 1, gen=gen, dtype=dtype))
            if not cfg.ablate_attention:
                self.skips.append(HAB(w, cfg.window_size, cfg.heads_for(w), 0, cfg.mlp_ratio,
                                      cfg.se_reduction, cfg.cab_weight, gen=gen, dtype=dtype))
            self.decoders.append(ResidualConvBlock(2 * w, w, slope, gen=gen, dtype=dtype))
            c_prev = w
        self.head = Conv2d(widths[0], 1, 1, gen=gen, dtype=dtype)
        nn_core.assign_paths(self)
        self.params = ParameterStore(self)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected N x 1 x H x W input, got {tuple(x.shape)}")
        m = self.config.size_multiple
        if x.shape[2] % m or x.shape[3] % m:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} not divisible by {m}")
        feats = []
        h = x
        for enc, down in zip(self.encoders, self.downs):
            h = enc(h)
            feats.append(h)
            h = down(h)
        h = self.bottleneck(h)
        for i, (up, dec) in enumerate(zip(self.ups, self.decoders)):
            skip = feats[-1 - i]
            if not self.config.ablate_attention:
                skip = self.skips[i](skip)
            h = dec(torch.cat([up(h), skip], dim=1))
        out = self.head(h)
        if self.config.global_residual:
            out = out + x
        return out

    def attention_blocks(self):
        return [m for m in self.modules() if isinstance(m, HAB)]

    def zero_attention_outputs(self):
        for blk in self.attention_blocks():
            blk.zero_output_projections()

    def denoise_array(self, img) -> "torch.Tensor":
        """Run on an (N, H, W) or (H, W) float array without recording gradients."""
        t = torch.as_tensor(img, dtype=next(self.parameters()).dtype)
        squeeze = t.dim() == 2
        t = t.reshape(-1, 1, *t.shape[-2:])
        with torch.no_grad():
            y = self(t)
        y = y[:, 0]
        return y[0] if squeeze else y
