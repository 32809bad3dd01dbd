"""Miniature hierarchical shifted-window Transformer and a plain ViT variant.

Both backbones map images ``[b, 3, s, s]`` to pooled features ``[b, D]`` and
share the forward signature ``model(images, drop_path_rate, training, rng)``.
Token grids are channels-last, ``[b, H, W, C]``.
"""
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import LayerNorm, Linear, Module, Parameter, make_norm, trunc_normal
from .tensor import Tensor

MASK_VALUE = -1e9


@dataclass
class BackboneConfig:
    variant: str = "swin_lite"
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 48
    depths: list = field(default_factory=lambda: [2, 2])
    num_heads: list = field(default_factory=lambda: [3, 6])
    window_size: int = 4
    mlp_ratio: float = 4.0
    norm_before_mlp: str = "layer_norm"
    drop_path_rate: float = 0.0

    def validate(self):
        if self.variant not in ("swin_lite", "vit_lite"):
            raise ConfigError(f"variant must be swin_lite or vit_lite, got {self.variant!r}")
        if self.norm_before_mlp not in ("layer_norm", "batch_norm"):
            raise ConfigError(f"norm_before_mlp must be layer_norm or batch_norm, got {self.norm_before_mlp!r}")
        for name in ("image_size", "patch_size", "embed_dim", "window_size"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if len(self.depths) != len(self.num_heads) or not self.depths:
            raise ConfigError("depths and num_heads must be non-empty and of equal length")
        if any(d <= 0 for d in self.depths) or any(h <= 0 for h in self.num_heads):
            raise ConfigError("depths and num_heads entries must be positive")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        check_drop_rate(self.drop_path_rate)
        grid = self.image_size // self.patch_size
        if self.variant == "swin_lite":
            if grid % self.window_size:
                raise ConfigError(f"token grid {grid} not divisible by window_size {self.window_size}")
            for i, heads in enumerate(self.num_heads):
                if (self.embed_dim * 2 ** i) % heads:
                    raise ConfigError(f"stage {i} width {self.embed_dim * 2 ** i} not divisible by {heads} heads")
                if i < len(self.depths) - 1 and (grid >> i) % 2:
                    raise ConfigError(f"stage {i} grid {grid >> i} cannot be merged (odd extent)")
        elif self.embed_dim % self.num_heads[0]:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads[0]} heads")
        return self


def check_drop_rate(rate):
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"drop path rate must lie in [0, 1), got {rate}")


# --------------------------------------------------------------------------
# building blocks

class PatchEmbed(Module):
    def __init__(self, patch_size, embed_dim, rng, in_chans=3, dtype=np.float64):
        self.patch_size = patch_size
        self.proj = Linear(in_chans * patch_size * patch_size, embed_dim, rng, dtype=dtype)
        self.norm = LayerNorm(embed_dim, dtype=dtype)

    def __call__(self, images):
        return patch_embed(images, self)


def patch_embed(images, embed):
    """Split into non-overlapping patches and project each one."""
    b, c, h, w = images.shape
    p = embed.patch_size
    if h % p or w % p:
        raise ConfigError(f"image extent {h}x{w} not divisible by patch size {p}")
    x = images.reshape(b, c, h // p, p, w // p, p)
    x = x.transpose(0, 2, 4, 1, 3, 5).reshape(b, h // p, w // p, c * p * p)
    return embed.norm(embed.proj(x))


def window_partition(x, window):
    """[B, H, W, C] -> [B * nW, window*window, C]"""
    b, h, w, c = x.shape
    x = x.reshape(b, h // window, window, w // window, window, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def window_reverse(windows, window, h, w):
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // window) * (w // window))
    x = windows.reshape(b, h // window, w // window, window, window, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


def relative_position_index(window):
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return (rel[0] * (2 * window - 1) + rel[1]).reshape(-1)


def shift_region_ids(h, w, window, shift):
    """Region label of every token of the cyclically shifted grid."""
    ids = np.zeros((h, w), dtype=np.int64)
    bands = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    label = 0
    for hs in bands:
        for ws in bands:
            ids[hs, ws] = label
            label += 1
    return ids


def shift_attention_mask(h, w, window, shift, dtype=np.float64):
    """Additive mask ``[nW, N, N]``; MASK_VALUE between tokens of different regions."""
    ids = shift_region_ids(h, w, window, shift)
    ids = ids.reshape(h // window, window, w // window, window).transpose(0, 2, 1, 3)
    ids = ids.reshape(-1, window * window)
    different = ids[:, :, None] != ids[:, None, :]
    return np.where(different, MASK_VALUE, 0.0).astype(dtype)


class WindowAttention(Module):
    def __init__(self, dim, num_heads, window, rng, rel_bias=True, dtype=np.float64):
        self.num_heads = num_heads
        self.window = window
        self.scale = float((dim // num_heads) ** -0.5)
        self.qkv = Linear(dim, 3 * dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)
        if rel_bias:
            self.rel_bias_table = Parameter(trunc_normal(rng, ((2 * window - 1) ** 2, num_heads), dtype=dtype))
            self.rel_index = relative_position_index(window)
        else:
            self.rel_bias_table = None

    def relative_bias(self):
        n = self.window * self.window
        bias = T.gather(self.rel_bias_table, self.rel_index).reshape(n, n, self.num_heads)
        return bias.transpose(2, 0, 1)

    def __call__(self, windows, mask=None, return_attention=False):
        bw, n, c = windows.shape
        heads = self.num_heads
        qkv = self.qkv(windows).reshape(bw, n, 3, heads, c // heads).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = T.matmul(q * self.scale, k.transpose(0, 1, 3, 2))
        if self.rel_bias_table is not None:
            logits = logits + self.relative_bias()
        if mask is not None:
            nw = mask.shape[0]
            logits = logits.reshape(bw // nw, nw, heads, n, n) + Tensor(mask[:, None])
            logits = logits.reshape(bw, heads, n, n)
        attn = T.softmax(logits, axis=-1)
        out = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(bw, n, c)
        out = self.proj(out)
        return (out, attn) if return_attention else out


def window_attention(grid, attn, shift=0, return_attention=False):
    """Self-attention inside (optionally cyclically shifted) windows.

    ``grid`` is ``[B, H, W, C]``; the window size and head count come from
    ``attn``.  With ``shift > 0`` the grid is rolled by ``-shift`` on both
    axes, attention pairs that straddle pre-shift regions are masked, and the
    roll is undone afterwards.
    """
    b, h, w, c = grid.shape
    window = attn.window
    if h % window or w % window:
        raise ConfigError(f"grid {h}x{w} not divisible by window {window}")
    if not 0 <= shift < window:
        raise ConfigError(f"shift must lie in [0, {window}), got {shift}")
    x = grid
    mask = None
    if shift:
        x = T.roll(x, (-shift, -shift), (1, 2))
        mask = shift_attention_mask(h, w, window, shift, dtype=grid.dtype)
    result = attn(window_partition(x, window), mask, return_attention)
    windows, probs = result if return_attention else (result, None)
    x = window_reverse(windows, window, h, w)
    if shift:
        x = T.roll(x, (shift, shift), (1, 2))
    return (x, probs) if return_attention else x


class PatchMerging(Module):
    def __init__(self, dim, rng, dtype=np.float64):
        self.norm = LayerNorm(4 * dim, dtype=dtype)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False, dtype=dtype)

    def __call__(self, grid):
        return patch_merging(grid, self)


def patch_merging(grid, merge):
    """[B, H, W, C] -> [B, H/2, W/2, 2C] via 2x2 concatenation, norm and projection."""
    b, h, w, c = grid.shape
    if h % 2 or w % 2:
        raise ConfigError(f"patch merging needs even extents, got {h}x{w}")
    x = grid.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 4, 2, 5)
    x = x.reshape(b, h // 2, w // 2, 4 * c)
    return merge.reduction(merge.norm(x))


def drop_path(x, rate, training, rng=None):
    """Per-sample stochastic depth on a residual branch."""
    check_drop_rate(rate)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("drop_path needs an rng in training mode")
    keep = rng.random(x.shape[0]) < 1.0 - rate
    factor = (keep / (1.0 - rate)).astype(x.dtype)
    return x * Tensor(factor.reshape((-1,) + (1,) * (x.ndim - 1)))


class Mlp(Module):
    def __init__(self, dim, hidden, rng, dtype=np.float64):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """norm -> (shifted) window attention -> residual; norm -> MLP -> residual."""

    def __init__(self, dim, num_heads, window, shift, mlp_ratio, norm_before_mlp, rng,
                 rel_bias=True, dtype=np.float64):
        self.window = window
        self.shift = shift
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = WindowAttention(dim, num_heads, window, rng, rel_bias=rel_bias, dtype=dtype)
        self.norm2 = make_norm(norm_before_mlp, dim, dtype=dtype)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng, dtype=dtype)

    def __call__(self, x, h, w, drop_rate, training, rng):
        b, n, c = x.shape
        y = self.norm1(x).reshape(b, h, w, c)
        y = window_attention(y, self.attn, self.shift).reshape(b, n, c)
        x = x + drop_path(y, drop_rate, training, rng)
        y = self.mlp(self.norm2(x, training))
        return x + drop_path(y, drop_rate, training, rng)


def _as_input(images, dtype):
    if isinstance(images, Tensor):
        return images if images.dtype == dtype else Tensor(images.data.astype(dtype))
    return Tensor(np.asarray(images, dtype=dtype))


def block_drop_rates(total_rate, depth):
    """Stochastic-depth rates rising linearly from 0 to ``total_rate``."""
    if depth == 1:
        return [0.0]
    return [float(r) for r in np.linspace(0.0, total_rate, depth)]


class SwinLite(Module):
    def __init__(self, cfg, rng, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.embed_dim, rng, dtype=dtype)
        grid = cfg.image_size // cfg.patch_size
        self.blocks = []
        self.merges = []
        self.stage_of_block = []
        self.grids = []
        for i, (depth, heads) in enumerate(zip(cfg.depths, cfg.num_heads)):
            dim = cfg.embed_dim * 2 ** i
            window = min(cfg.window_size, grid)
            for j in range(depth):
                shift = window // 2 if (j % 2 == 1 and grid > window) else 0
                self.blocks.append(TransformerBlock(dim, heads, window, shift, cfg.mlp_ratio,
                                                   cfg.norm_before_mlp, rng, dtype=dtype))
                self.stage_of_block.append(i)
            self.grids.append(grid)
            if i < len(cfg.depths) - 1:
                self.merges.append(PatchMerging(dim, rng, dtype=dtype))
                grid //= 2
        self.num_features = cfg.embed_dim * 2 ** (len(cfg.depths) - 1)
        self.norm = LayerNorm(self.num_features, dtype=dtype)

    def __call__(self, images, drop_path_rate=None, training=False, rng=None):
        rate = self.cfg.drop_path_rate if drop_path_rate is None else drop_path_rate
        check_drop_rate(rate)
        rates = block_drop_rates(rate, len(self.blocks))
        x = patch_embed(_as_input(images, self.dtype), self.patch_embed)
        b, h, w, c = x.shape
        x = x.reshape(b, h * w, c)
        stage = 0
        for block, block_stage, r in zip(self.blocks, self.stage_of_block, rates):
            if block_stage != stage:
                x = patch_merging(x.reshape(b, h, w, x.shape[-1]), self.merges[stage])
                h, w = h // 2, w // 2
                x = x.reshape(b, h * w, x.shape[-1])
                stage = block_stage
            x = block(x, h, w, r, training, rng)
        return self.norm(x).mean(axis=1)


class ViTLite(Module):
    """Global-attention encoder with mean pooling; depth = sum(cfg.depths)."""

    def __init__(self, cfg, rng, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.embed_dim, rng, dtype=dtype)
        self.grid = cfg.image_size // cfg.patch_size
        self.pos_embed = Parameter(trunc_normal(rng, (self.grid * self.grid, cfg.embed_dim), dtype=dtype))
        self.blocks = [
            TransformerBlock(cfg.embed_dim, cfg.num_heads[0], self.grid, 0, cfg.mlp_ratio,
                             cfg.norm_before_mlp, rng, rel_bias=False, dtype=dtype)
            for _ in range(sum(cfg.depths))
        ]
        self.num_features = cfg.embed_dim
        self.norm = LayerNorm(cfg.embed_dim, dtype=dtype)

    def __call__(self, images, drop_path_rate=None, training=False, rng=None):
        rate = self.cfg.drop_path_rate if drop_path_rate is None else drop_path_rate
        check_drop_rate(rate)
        rates = block_drop_rates(rate, len(self.blocks))
        x = patch_embed(_as_input(images, self.dtype), self.patch_embed)
        b, h, w, c = x.shape
        x = x.reshape(b, h * w, c) + self.pos_embed
        for block, r in zip(self.blocks, rates):
            x = block(x, h, w, r, training, rng)
        return self.norm(x).mean(axis=1)


def build_backbone(cfg, rng, dtype=np.float64):
    cfg.validate()
    if cfg.variant == "swin_lite":
        return SwinLite(cfg, rng, dtype=dtype)
    return ViTLite(cfg, rng, dtype=dtype)
