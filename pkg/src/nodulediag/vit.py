"""Small Vision Transformer encoder over grayscale patches.

The encoder maps a batch of square images to class-token features and can
expose the per-layer, per-head attention matrices that drive the visual
explanation. Position embeddings are learned on the full-resolution patch
grid and bilinearly resampled when a smaller view (local crop) comes in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import LinearLayer
from .tensor import (
    ParameterError,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    gelu,
    layer_norm,
    matmul,
    mul,
    no_grad,
    reshape,
    softmax,
    take,
    transpose,
)


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ParameterError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads != 0:
            raise ParameterError("embed_dim must be divisible by num_heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size, "patch_size": self.patch_size,
            "embed_dim": self.embed_dim, "depth": self.depth,
            "num_heads": self.num_heads, "mlp_ratio": self.mlp_ratio,
        }

    @classmethod
    def paper_scale(cls) -> "ViTConfig":
        return cls(image_size=224, patch_size=16, embed_dim=384, depth=12, num_heads=6)


def bilinear_resize_matrix(src: int, dst: int) -> np.ndarray:
    """(dst^2, src^2) matrix resampling a flattened square grid, half-pixel centers."""
    weights = np.zeros((dst * dst, src * src))
    coords = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    coords = np.clip(coords, 0.0, src - 1.0)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = coords - lo
    for r in range(dst):
        for c in range(dst):
            for wy, y in ((1 - frac[r], lo[r]), (frac[r], hi[r])):
                for wx, x in ((1 - frac[c], lo[c]), (frac[c], hi[c])):
                    weights[r * dst + c, y * src + x] += wy * wx
    return weights


class ViTEncoder:
    def __init__(self, cfg: ViTConfig, rng: np.random.Generator | None = None,
                 params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        if params is not None:
            self.params = params
        else:
            if rng is None:
                raise ParameterError("need either an rng or explicit parameters")
            self.params = self._init_params(rng)
        self._resize_cache: dict[int, np.ndarray] = {}

    def _init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        c = self.cfg
        std = 0.02

        def norm(*shape):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        def ones(*shape):
            return Tensor(np.ones(shape), requires_grad=True)

        p: dict[str, Tensor] = {}
        p["patch_embed.weight"] = norm(c.embed_dim, c.patch_size * c.patch_size)
        p["patch_embed.bias"] = zeros(c.embed_dim)
        p["cls_token"] = norm(c.embed_dim)
        p["pos_embed"] = norm(1 + c.num_patches, c.embed_dim)
        for i in range(c.depth):
            pre = f"blocks.{i}."
            p[pre + "ln1.gain"] = ones(c.embed_dim)
            p[pre + "ln1.bias"] = zeros(c.embed_dim)
            for name in ("q", "k", "v", "out"):
                p[pre + f"attn.{name}.weight"] = norm(c.embed_dim, c.embed_dim)
                p[pre + f"attn.{name}.bias"] = zeros(c.embed_dim)
            p[pre + "ln2.gain"] = ones(c.embed_dim)
            p[pre + "ln2.bias"] = zeros(c.embed_dim)
            p[pre + "mlp.fc1.weight"] = norm(c.mlp_hidden, c.embed_dim)
            p[pre + "mlp.fc1.bias"] = zeros(c.mlp_hidden)
            p[pre + "mlp.fc2.weight"] = norm(c.embed_dim, c.mlp_hidden)
            p[pre + "mlp.fc2.bias"] = zeros(c.embed_dim)
        p["norm.gain"] = ones(c.embed_dim)
        p["norm.bias"] = zeros(c.embed_dim)
        return p

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            t.data = np.array(arrays[k], dtype=np.float64)

    # -- forward pieces --------------------------------------------------

    def _pos_for_grid(self, grid: int) -> Tensor:
        pos = self.params["pos_embed"]
        if grid == self.cfg.grid:
            return pos
        if grid not in self._resize_cache:
            self._resize_cache[grid] = bilinear_resize_matrix(self.cfg.grid, grid)
        r = Tensor(self._resize_cache[grid])
        patch_pos = matmul(r, take(pos, slice(1, None)))
        return concat([take(pos, slice(0, 1)), patch_pos], axis=0)

    def patchify(self, images) -> Tensor:
        """(B, H, W) images -> (B, 1+P, d) token sequence with positions added."""
        images = as_tensor(images)
        b, h, w = images.shape
        ps = self.cfg.patch_size
        if h != w:
            raise ParameterError(f"images must be square, got {h}x{w}")
        if h % ps != 0:
            raise ParameterError(f"image size {h} not divisible by patch size {ps}")
        grid = h // ps
        x = reshape(images, (b, grid, ps, grid, ps))
        x = transpose(x, (0, 1, 3, 2, 4))
        x = reshape(x, (b, grid * grid, ps * ps))
        tokens = add(matmul(x, transpose(self.params["patch_embed.weight"], (1, 0))),
                     self.params["patch_embed.bias"])
        cls = broadcast_to(reshape(self.params["cls_token"], (1, 1, -1)),
                           (b, 1, self.cfg.embed_dim))
        tokens = concat([cls, tokens], axis=1)
        return add(tokens, self._pos_for_grid(grid))

    def _block(self, x: Tensor, i: int, collect: list | None) -> Tensor:
        p = self.params
        pre = f"blocks.{i}."
        b, t, d = x.shape
        nh, hd = self.cfg.num_heads, self.cfg.head_dim

        h = layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])

        def proj(name):
            out = add(matmul(h, transpose(p[pre + f"attn.{name}.weight"], (1, 0))),
                      p[pre + f"attn.{name}.bias"])
            return transpose(reshape(out, (b, t, nh, hd)), (0, 2, 1, 3))

        q, k, v = proj("q"), proj("k"), proj("v")
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        attn = softmax(scores, temperature=1.0)
        if collect is not None:
            collect.append(attn.data.copy())
        ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
        ctx = add(matmul(ctx, transpose(p[pre + "attn.out.weight"], (1, 0))),
                  p[pre + "attn.out.bias"])
        x = add(x, ctx)

        h2 = layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
        h2 = gelu(add(matmul(h2, transpose(p[pre + "mlp.fc1.weight"], (1, 0))),
                      p[pre + "mlp.fc1.bias"]))
        h2 = add(matmul(h2, transpose(p[pre + "mlp.fc2.weight"], (1, 0))),
                 p[pre + "mlp.fc2.bias"])
        return add(x, h2)

    def forward_tokens(self, images, collect_attention: bool = False):
        """Returns (final-normed tokens (B,1+P,d), per-layer attention arrays)."""
        x = self.patchify(images)
        records: list[np.ndarray] | None = [] if collect_attention else None
        for i in range(self.cfg.depth):
            x = self._block(x, i, records)
        x = layer_norm(x, self.params["norm.gain"], self.params["norm.bias"])
        return x, (records or [])

    def encode(self, images) -> Tensor:
        """Class-token embedding after the final layer norm, shape (B, d)."""
        tokens, _ = self.forward_tokens(images)
        return take(tokens, (slice(None), 0))

    def encode_arrays(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Tape-free batched encode for inference and feature extraction."""
        feats = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                feats.append(self.encode(images[i:i + batch_size]).data)
        return np.concatenate(feats, axis=0) if feats else np.zeros((0, self.cfg.embed_dim))

    def attention_records(self, images) -> list[np.ndarray]:
        """Per-layer (B, heads, T, T) row-stochastic attention, tape-free."""
        with no_grad():
            _, records = self.forward_tokens(images, collect_attention=True)
        return records


def attention_map(encoder: ViTEncoder, image: np.ndarray, layer: int | str = "last") -> np.ndarray:
    """Head-averaged class-token attention over the patch grid, summing to 1.

    `layer` is a 0-based block index, "last", or "mean" to average the map
    across every block.
    """
    records = encoder.attention_records(image[None, :, :])
    depth = len(records)
    if layer == "last":
        picks = [depth - 1]
    elif layer == "mean":
        picks = list(range(depth))
    elif isinstance(layer, int) and -depth <= layer < depth:
        picks = [layer % depth]
    else:
        raise ParameterError(f"invalid attention layer {layer!r} for depth {depth}")
    maps = []
    for idx in picks:
        per_head = records[idx][0]          # (heads, T, T)
        fused = per_head.mean(axis=0)       # plain average over heads
        row = fused[0, 1:]                  # class-token row over patch positions
        maps.append(row / row.sum())
    grid_map = np.mean(maps, axis=0)
    grid_map = grid_map / grid_map.sum()
    side = int(math.isqrt(grid_map.size))
    return grid_map.reshape(side, side)


def upsample_nearest(grid_map: np.ndarray, out_size: int) -> np.ndarray:
    """Nearest-neighbor upsample of an attention grid for overlay export only."""
    reps = out_size // grid_map.shape[0]
    out = np.repeat(np.repeat(grid_map, reps, axis=0), reps, axis=1)
    if out.shape[0] != out_size:
        idx = (np.arange(out_size) * grid_map.shape[0] // out_size).clip(0, grid_map.shape[0] - 1)
        out = grid_map[np.ix_(idx, idx)]
    return out
