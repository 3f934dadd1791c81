"""Hierarchical windowed-attention encoder producing one feature vector per slice.

Token grids are carried as 4-D tensors ``(batch, rows, cols, channels)``;
the batch axis holds independent slices, so a whole volume can be encoded
in one pass while each slice is still processed on its own.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ConfigError, DimensionError, Tensor


class InputError(ValueError):
    pass


@dataclass
class EncoderConfig:
    input_size: tuple[int, int] = (32, 32)
    patch_size: int = 4
    embed_dim: int = 16
    depths: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    heads: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    window: int = 4
    mlp_ratio: float = 2.0
    ln_eps: float = 1e-5
    # pixels are standardized as (x - pixel_mean) / pixel_std before zero padding
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.depths = [int(d) for d in self.depths]
        self.heads = [int(h) for h in self.heads]
        self.validate()

    @classmethod
    def full_scale(cls):
        return cls(input_size=(224, 224), patch_size=4, embed_dim=128,
                   depths=[2, 2, 18, 2], heads=[4, 8, 16, 32], window=7, mlp_ratio=4.0)

    @property
    def num_stages(self):
        return len(self.depths)

    @property
    def feature_dim(self):
        return self.embed_dim * 2 ** (self.num_stages - 1)

    def stage_dim(self, stage):
        return self.embed_dim * 2 ** stage

    def validate(self):
        if len(self.depths) != len(self.heads) or not self.depths:
            raise ConfigError(f"depths {self.depths} and heads {self.heads} must be equal-length and non-empty")
        if min(self.input_size) <= 0 or self.patch_size <= 0 or self.window <= 0 or self.embed_dim <= 0:
            raise ConfigError("input_size, patch_size, window and embed_dim must be positive")
        if not self.pixel_std > 0:
            raise ConfigError(f"pixel_std must be positive, got {self.pixel_std}")
        for s, (d, h) in enumerate(zip(self.depths, self.heads)):
            if d <= 0 or d % 2:
                raise ConfigError(f"stage {s}: depth {d} must be a positive even number of units")
            if self.stage_dim(s) % h:
                raise ConfigError(f"stage {s}: {self.stage_dim(s)} channels not divisible by {h} heads")
        grid_shape(self)

    def to_dict(self):
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d


def stage_window(window, rows, cols):
    """Window side used at a stage; shrinks to the grid when the grid is smaller."""
    return min(window, rows, cols)


def _grid_ok(side, cfg):
    if side % (2 ** (cfg.num_stages - 1)):
        return False
    for s in range(cfg.num_stages):
        g = side >> s
        if g % min(cfg.window, g):
            return False
    return True


def _grid_side(pixels, cfg):
    g = -(-pixels // cfg.patch_size)
    limit = g * 8 * cfg.window + 64
    while not _grid_ok(g, cfg):
        g += 1
        if g > limit:
            raise ConfigError(f"no compatible token grid for {pixels} pixels")
    return g


def grid_shape(cfg):
    """Stage-1 token grid ``(rows, cols)`` after zero padding."""
    return _grid_side(cfg.input_size[0], cfg), _grid_side(cfg.input_size[1], cfg)


def stage_grids(cfg):
    r, c = grid_shape(cfg)
    return [(r >> s, c >> s) for s in range(cfg.num_stages)]


# ----------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------


def init_encoder_params(store, cfg, rng, prefix="enc"):
    p = cfg.patch_size
    store.add(f"{prefix}.embed.w", nx.xavier_uniform(rng, p * p, cfg.embed_dim))
    store.add(f"{prefix}.embed.b", np.zeros(cfg.embed_dim))
    for s in range(cfg.num_stages):
        d = cfg.stage_dim(s)
        hidden = int(round(d * cfg.mlp_ratio))
        for u in range(cfg.depths[s]):
            k = f"{prefix}.s{s}.u{u}"
            store.add(f"{k}.ln1.g", np.ones(d))
            store.add(f"{k}.ln1.b", np.zeros(d))
            for w in ("wq", "wk", "wv", "wo"):
                store.add(f"{k}.attn.{w}", nx.xavier_uniform(rng, d, d))
            store.add(f"{k}.ln2.g", np.ones(d))
            store.add(f"{k}.ln2.b", np.zeros(d))
            store.add(f"{k}.mlp.w1", nx.xavier_uniform(rng, d, hidden))
            store.add(f"{k}.mlp.b1", np.zeros(hidden))
            store.add(f"{k}.mlp.w2", nx.xavier_uniform(rng, hidden, d))
            store.add(f"{k}.mlp.b2", np.zeros(d))
        if s + 1 < cfg.num_stages:
            store.add(f"{prefix}.merge{s}.w", nx.xavier_uniform(rng, 4 * d, 2 * d))
    return store


# ----------------------------------------------------------------------
# building blocks
# ----------------------------------------------------------------------


def pad_images(images, cfg):
    """Zero-pad a ``(n, H, W)`` stack on the bottom/right to the patch grid."""
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    if images.ndim != 3 or images.size == 0 or 0 in images.shape:
        raise InputError(f"expected non-empty (n, H, W) images, got shape {images.shape}")
    rows, cols = _grid_side(images.shape[1], cfg), _grid_side(images.shape[2], cfg)
    ph, pw = rows * cfg.patch_size, cols * cfg.patch_size
    out = np.zeros((images.shape[0], ph, pw), dtype=nx.default_dtype())
    out[:, :images.shape[1], :images.shape[2]] = images
    return out


def patch_embed(images, cfg, store, prefix="enc"):
    """Standardize pixels, split into non-overlapping patches, project each to ``embed_dim``."""
    images = (np.asarray(images, dtype=np.float64) - cfg.pixel_mean) / cfg.pixel_std
    padded = pad_images(images, cfg)
    n, h, w = padded.shape
    p = cfg.patch_size
    rows, cols = h // p, w // p
    patches = padded.reshape(n, rows, p, cols, p).transpose(0, 1, 3, 2, 4).reshape(n, rows, cols, p * p)
    return nx.matmul(Tensor(patches), store[f"{prefix}.embed.w"]) + store[f"{prefix}.embed.b"]


def window_partition(x, window, shift=0):
    """``(B, R, C, D)`` grid to ``(B * nW, window * window, D)`` windows.

    With ``shift > 0`` the grid is first rolled by ``-shift`` on both axes.
    """
    b, r, c, d = x.shape
    if r % window or c % window:
        raise ConfigError(f"window {window} does not divide grid {r}x{c}")
    if not 0 <= shift < window:
        raise ConfigError(f"shift {shift} outside [0, {window})")
    if shift:
        x = nx.roll(x, (-shift, -shift), (1, 2))
    x = x.reshape(b, r // window, window, c // window, window, d)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b * (r // window) * (c // window), window * window, d)


def window_reverse(windows, window, rows, cols, shift=0):
    """Inverse of :func:`window_partition`."""
    d = windows.shape[-1]
    b = windows.shape[0] // ((rows // window) * (cols // window))
    x = windows.reshape(b, rows // window, cols // window, window, window, d)
    x = x.transpose(0, 1, 3, 2, 4, 5).reshape(b, rows, cols, d)
    if shift:
        x = nx.roll(x, (shift, shift), (1, 2))
    return x


def attention(q, k, v):
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes."""
    q, k, v = nx.as_tensor(q), nx.as_tensor(k), nx.as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    scores = nx.matmul(q, nx.transpose(k)) * (1.0 / math.sqrt(q.shape[-1]))
    return nx.matmul(nx.softmax(scores, axis=-1), v)


def msa(x, wq, wk, wv, wo, heads):
    """Multi-head self-attention over ``(..., n, d_model)`` tokens.

    ``wq``/``wk``/``wv`` are ``d_model x d_model``; head ``i`` uses column
    block ``i`` of each, so they hold the per-head projections side by side.
    """
    d_model = x.shape[-1]
    if d_model % heads:
        raise ConfigError(f"d_model {d_model} not divisible by {heads} heads")
    dh = d_model // heads
    lead = x.shape[:-2]
    n = x.shape[-2]

    def split(t):
        t = t.reshape(*lead, n, heads, dh)
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return t.transpose(*axes)

    q, k, v = split(x @ wq), split(x @ wk), split(x @ wv)
    out = attention(q, k, v)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    out = out.transpose(*axes).reshape(*lead, n, d_model)
    return out @ wo


def encoder_unit(x, store, key, heads, window, shift, eps=1e-5):
    """LN -> (S)W-MSA -> residual, LN -> GELU MLP -> residual."""
    b, r, c, d = x.shape
    h = nx.layer_norm(x, store[f"{key}.ln1.g"], store[f"{key}.ln1.b"], eps)
    win = window_partition(h, window, shift)
    win = msa(win, store[f"{key}.attn.wq"], store[f"{key}.attn.wk"],
              store[f"{key}.attn.wv"], store[f"{key}.attn.wo"], heads)
    x = x + window_reverse(win, window, r, c, shift)
    h = nx.layer_norm(x, store[f"{key}.ln2.g"], store[f"{key}.ln2.b"], eps)
    h = nx.gelu(h @ store[f"{key}.mlp.w1"] + store[f"{key}.mlp.b1"])
    h = h @ store[f"{key}.mlp.w2"] + store[f"{key}.mlp.b2"]
    return x + h


def block_shifts(window, rows, cols):
    """(window, shift) used by a block on a ``rows x cols`` grid.

    The shifted unit moves by half a window; grids no larger than one
    window get no shift since rolling would only permute a single window.
    """
    w = stage_window(window, rows, cols)
    return w, (w // 2 if min(rows, cols) > w else 0)


def swin_block(x, store, unit_keys, heads, window, eps=1e-5):
    """A W-MSA unit followed by an SW-MSA unit shifted by half a window."""
    _, r, c, _ = x.shape
    w, shift = block_shifts(window, r, c)
    x = encoder_unit(x, store, unit_keys[0], heads, w, 0, eps)
    return encoder_unit(x, store, unit_keys[1], heads, w, shift, eps)


def patch_merge(x, weight):
    """Concatenate each 2x2 neighbourhood (4C) and project to 2C."""
    b, r, c, d = x.shape
    if r % 2 or c % 2:
        raise ConfigError(f"patch merging needs even extents, got {r}x{c}")
    x = x.reshape(b, r // 2, 2, c // 2, 2, d).transpose(0, 1, 3, 4, 2, 5)
    return x.reshape(b, r // 2, c // 2, 4 * d) @ weight


def _unit_keys(prefix, stage, depth):
    # two units per block: u(2j) unshifted, u(2j+1) shifted
    return [(f"{prefix}.s{stage}.u{2 * j}", f"{prefix}.s{stage}.u{2 * j + 1}") for j in range(depth // 2)]


def encode_slices(images, cfg, store, prefix="enc"):
    """Encode a stack of slices ``(n, H, W)`` to features ``(n, feature_dim)``."""
    x = patch_embed(images, cfg, store, prefix)
    for s in range(cfg.num_stages):
        for keys in _unit_keys(prefix, s, cfg.depths[s]):
            x = swin_block(x, store, keys, cfg.heads[s], cfg.window, cfg.ln_eps)
        if s + 1 < cfg.num_stages:
            x = patch_merge(x, store[f"{prefix}.merge{s}.w"])
    b, r, c, d = x.shape
    return x.reshape(b, r * c, d).mean(axis=1)


def encode_slice(image, cfg, store, prefix="enc"):
    """Feature vector for a single ``(H, W)`` image."""
    return encode_slices(np.asarray(image)[None], cfg, store, prefix)[0]
