"""3D patch embedding plus a small ViT-style encoder over voxel volumes.

The volume is cut into non-overlapping 3D patches (z-major grid order), each
patch is linearly embedded, factorized learned positional embeddings are added
for the three grid axes, and a stack of pre-norm transformer blocks produces
one token per patch. There is no class token: every token is spatial, because
the projector consumes the full grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, InputValidationError
from .volume import Volume3D


@dataclass
class EncoderConfig:
    input_shape: tuple[int, int, int]
    patch_shape: tuple[int, int, int]
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    preset: str = "toy"

    def __post_init__(self):
        for dim, p in zip(self.input_shape, self.patch_shape):
            if dim % p != 0:
                raise ConfigError(
                    f"input shape {self.input_shape} not divisible by patches {self.patch_shape}"
                )
        if self.embed_dim % self.heads != 0:
            raise ConfigError("embed_dim must be divisible by heads")

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(d // p for d, p in zip(self.input_shape, self.patch_shape))

    @property
    def token_count(self) -> int:
        gz, gy, gx = self.grid
        return gz * gy * gx

    @property
    def patch_voxels(self) -> int:
        pz, py, px = self.patch_shape
        return pz * py * px

    @classmethod
    def paper(cls, embed_dim: int = 768, depth: int = 4, heads: int = 8) -> "EncoderConfig":
        # 32x256x256 volume cut on an 8x16x16 patch grid -> 2048 tokens
        return cls((32, 256, 256), (4, 16, 16), embed_dim, depth, heads, preset="paper")

    @classmethod
    def toy(cls, embed_dim: int = 64, depth: int = 2, heads: int = 4) -> "EncoderConfig":
        # 16x64x64 volume, 4x8x8 patches -> 256 tokens
        return cls((16, 64, 64), (4, 8, 8), embed_dim, depth, heads, preset="toy")


@dataclass
class VisualTokens:
    """The n x d token matrix produced by the encoder."""

    tokens: torch.Tensor
    source_shape: tuple[int, int, int]

    def __post_init__(self):
        if not torch.isfinite(self.tokens).all():
            raise InputValidationError("visual tokens contain NaN or Inf")

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def d(self) -> int:
        return self.tokens.shape[1]


def patchify(voxels: np.ndarray | Volume3D, cfg: EncoderConfig) -> np.ndarray:
    """Cut a volume into flat patches; row ``i`` is patch ``i`` in z-major
    grid order and contains exactly the voxels of its block."""
    if isinstance(voxels, Volume3D):
        voxels = voxels.voxels
    if tuple(voxels.shape) != tuple(cfg.input_shape):
        raise ConfigError(
            f"volume shape {voxels.shape} does not match encoder input {cfg.input_shape}"
        )
    (gz, gy, gx), (pz, py, px) = cfg.grid, cfg.patch_shape
    blocks = voxels.reshape(gz, pz, gy, py, gx, px)
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5)  # grid axes first, z-major
    return np.ascontiguousarray(blocks.reshape(cfg.token_count, cfg.patch_voxels))


class TransformerBlock(nn.Module):
    """Pre-norm attention + MLP block, GELU activations, no dropout."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, causal: bool = False):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.causal = causal

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        mask = None
        if self.causal:
            L = x.shape[1]
            mask = torch.triu(
                torch.full((L, L), float("-inf"), dtype=x.dtype, device=x.device), diagonal=1
            )
        attn_out, _ = self.attn(h, h, h, attn_mask=mask, need_weights=False)
        x = x + attn_out
        return x + self.mlp(self.ln2(x))


class VolumeEncoder(nn.Module):
    """CLIP-style 3D ViT over a normalized volume; outputs n x d tokens."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_voxels, cfg.embed_dim)
        gz, gy, gx = cfg.grid
        self.pos_z = nn.Parameter(torch.zeros(gz, cfg.embed_dim))
        self.pos_y = nn.Parameter(torch.zeros(gy, cfg.embed_dim))
        self.pos_x = nn.Parameter(torch.zeros(gx, cfg.embed_dim))
        for p in (self.pos_z, self.pos_y, self.pos_x):
            nn.init.trunc_normal_(p, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.heads) for _ in range(cfg.depth)
        )
        self.ln_f = nn.LayerNorm(cfg.embed_dim)

    def positional(self) -> torch.Tensor:
        gz, gy, gx = self.cfg.grid
        pos = (
            self.pos_z[:, None, None, :]
            + self.pos_y[None, :, None, :]
            + self.pos_x[None, None, :, :]
        )
        return pos.reshape(gz * gy * gx, self.cfg.embed_dim)

    def forward(self, voxels: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(voxels).all():
            raise InputValidationError("encoder input contains NaN or Inf")
        if tuple(voxels.shape) != tuple(self.cfg.input_shape):
            raise ConfigError(
                f"volume shape {tuple(voxels.shape)} != encoder input {self.cfg.input_shape}"
            )
        (gz, gy, gx), (pz, py, px) = self.cfg.grid, self.cfg.patch_shape
        patches = (
            voxels.reshape(gz, pz, gy, py, gx, px)
            .permute(0, 2, 4, 1, 3, 5)
            .reshape(self.cfg.token_count, self.cfg.patch_voxels)
        )
        x = self.patch_embed(patches) + self.positional()
        x = x.unsqueeze(0)
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x).squeeze(0)


def encode_volume(v: Volume3D, encoder: VolumeEncoder) -> VisualTokens:
    """Encode a normalized volume into visual tokens."""
    if v.intensity_unit != "normalized":
        raise InputValidationError("encode_volume expects a normalized volume")
    dtype = next(encoder.parameters()).dtype
    voxels = torch.from_numpy(np.ascontiguousarray(v.voxels)).to(dtype)
    tokens = encoder(voxels)
    return VisualTokens(tokens=tokens, source_shape=v.shape)


def contrastive_alignment_loss(
    image_vecs: torch.Tensor, text_vecs: torch.Tensor, temperature: float = 0.07
) -> torch.Tensor:
    """Symmetric InfoNCE over a batch of paired image/text vectors.

    Stage-0 pre-alignment utility; not part of the staged training schedule.
    """
    img = nn.functional.normalize(image_vecs, dim=-1)
    txt = nn.functional.normalize(text_vecs, dim=-1)
    logits = img @ txt.T / temperature
    targets = torch.arange(logits.shape[0], device=logits.device)
    loss_i = nn.functional.cross_entropy(logits, targets)
    loss_t = nn.functional.cross_entropy(logits.T, targets)
    return 0.5 * (loss_i + loss_t)
