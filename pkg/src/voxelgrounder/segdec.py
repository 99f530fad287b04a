"""Promptable slice-wise mask decoder with a cross-slice memory bank.

Decoding proceeds slice by slice. A small convolutional trunk embeds each
slice; sparse prompt embeddings (points, box corners, and an optional semantic
embedding projected from the language model's segmentation-token hidden state)
interact with the slice features through two-way attention; a FIFO memory bank
of previously decoded slices conditions the current slice via cross-attention,
which is what holds masks together across depth.

When geometric prompts exist, decoding anchors at the prompted slice and
propagates forward then backward from it. With only a semantic embedding,
every slice receives the embedding and the sweep runs front to back. Nothing
in this module reads or writes language-model state: the text-to-mask path is
one-way by construction.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import (
    ConfigError,
    EmptyPromptError,
    InputValidationError,
    ShapeMismatchError,
)
from .volume import MaskVolume, Volume3D

POSITIVE = "pos"
NEGATIVE = "neg"


@dataclass
class PromptPoint:
    z: int
    y: float
    x: float
    polarity: str = POSITIVE

    def __post_init__(self):
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise InputValidationError(f"unknown point polarity {self.polarity!r}")


@dataclass
class PromptBox:
    z: int
    y_min: float
    x_min: float
    y_max: float
    x_max: float

    def __post_init__(self):
        if self.y_max <= self.y_min or self.x_max <= self.x_min:
            raise InputValidationError("box must have positive area")


@dataclass
class PromptSet:
    """Points, boxes, and/or one semantic embedding."""

    points: list[PromptPoint] = field(default_factory=list)
    boxes: list[PromptBox] = field(default_factory=list)
    seg_embedding: torch.Tensor | None = None

    def is_empty(self) -> bool:
        return not self.points and not self.boxes and self.seg_embedding is None

    def has_geometric(self) -> bool:
        return bool(self.points or self.boxes)

    def anchor_slice(self) -> int | None:
        if self.points:
            return int(self.points[0].z)
        if self.boxes:
            return int(self.boxes[0].z)
        return None

    def validate(self, shape: tuple[int, int, int]):
        zdim, ydim, xdim = shape
        if self.is_empty():
            raise EmptyPromptError("prompt set has no points, boxes, or semantic embedding")
        for p in self.points:
            if not (0 <= p.z < zdim and 0 <= p.y <= ydim - 1 and 0 <= p.x <= xdim - 1):
                raise InputValidationError(
                    f"point ({p.z}, {p.y}, {p.x}) outside volume bounds {shape}"
                )
        for b in self.boxes:
            if not 0 <= b.z < zdim:
                raise InputValidationError(f"box slice {b.z} outside volume depth {zdim}")
            if b.y_min < 0 or b.x_min < 0 or b.y_max > ydim - 1 or b.x_max > xdim - 1:
                raise InputValidationError(
                    f"box ({b.y_min}, {b.x_min})-({b.y_max}, {b.x_max}) outside slice bounds"
                )


@dataclass
class MemoryEntry:
    z: int
    features: torch.Tensor  # (d, mem_hw, mem_hw)
    summary: torch.Tensor  # (d,)


class MemoryBank:
    """FIFO store of encoded past-slice results, capacity-bounded."""

    def __init__(self, capacity: int = 4):
        if capacity < 1:
            raise ConfigError("memory capacity must be >= 1")
        self.capacity = capacity
        self.entries: deque[MemoryEntry] = deque()

    def add(self, entry: MemoryEntry):
        self.entries.append(entry)
        while len(self.entries) > self.capacity:
            self.entries.popleft()

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


@dataclass
class SliceMaskLogits:
    z: int
    logits: torch.Tensor  # (Y, X)


@dataclass
class SegDecoderConfig:
    d_model: int = 64
    n_heads: int = 4
    trunk_channels: int = 16
    feature_stride: int = 4
    two_way_layers: int = 2
    memory_capacity: int = 4
    mem_hw: int = 8
    z_window: int = 8
    mask_threshold: float = 0.0

    def __post_init__(self):
        if self.d_model % 4 != 0:
            raise ConfigError("d_model must be divisible by 4 for 2D position encoding")
        if self.feature_stride != 4:
            raise ConfigError("trunk is built for stride 4")


def position_encoding_2d(coords: torch.Tensor, dim: int) -> torch.Tensor:
    """Sine-cosine encoding of normalized (y, x) coords; shape (..., dim)."""
    quarter = dim // 4
    freqs = torch.exp(
        torch.arange(quarter, dtype=coords.dtype, device=coords.device)
        * (-math.log(10000.0) / max(quarter - 1, 1))
    )
    out = []
    for axis in range(2):
        angles = coords[..., axis : axis + 1] * freqs * math.pi * 2
        out.extend([torch.sin(angles), torch.cos(angles)])
    return torch.cat(out, dim=-1)


def _grid_encoding(h: int, w: int, dim: int, dtype, device) -> torch.Tensor:
    ys = torch.linspace(0, 1, h, dtype=dtype, device=device)
    xs = torch.linspace(0, 1, w, dtype=dtype, device=device)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    coords = torch.stack([yy, xx], dim=-1)
    return position_encoding_2d(coords, dim).reshape(h * w, dim)


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = next(g for g in (4, 2, 1) if channels % g == 0)
    return nn.GroupNorm(groups, channels)


class SliceTrunk(nn.Module):
    """Small conv encoder over one slice; output stride 4.

    Each conv is followed by GroupNorm: without it the features can collapse
    to near-constant maps under aggressive learning rates, which strands the
    mask head in an all-background solution.
    """

    def __init__(self, cfg: SegDecoderConfig):
        super().__init__()
        c, d = cfg.trunk_channels, cfg.d_model
        self.net = nn.Sequential(
            nn.Conv2d(1, c, 3, padding=1),
            _group_norm(c),
            nn.GELU(),
            nn.Conv2d(c, d, 3, stride=2, padding=1),
            _group_norm(d),
            nn.GELU(),
            nn.Conv2d(d, d, 3, stride=2, padding=1),
            _group_norm(d),
            nn.GELU(),
            nn.Conv2d(d, d, 3, padding=1),
        )

    def forward(self, slice_2d: torch.Tensor) -> torch.Tensor:
        return self.net(slice_2d[None, None])[0]  # (d, Y/4, X/4)


class PromptEncoder(nn.Module):
    """Sparse prompt embeddings: one per point, two per box, one semantic.

    Order is fixed: points, then box corners, then the semantic embedding.
    """

    def __init__(self, cfg: SegDecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.polarity = nn.Embedding(2, cfg.d_model)
        self.corners = nn.Embedding(2, cfg.d_model)

    def forward(self, prompts: PromptSet, slice_shape: tuple[int, int]) -> torch.Tensor:
        if prompts.is_empty():
            raise EmptyPromptError("cannot encode an empty prompt set")
        ydim, xdim = slice_shape
        dtype = self.polarity.weight.dtype
        device = self.polarity.weight.device

        def pe(y, x):
            coords = torch.tensor(
                [y / max(ydim - 1, 1), x / max(xdim - 1, 1)], dtype=dtype, device=device
            )
            return position_encoding_2d(coords, self.cfg.d_model)

        embeddings = []
        for p in prompts.points:
            idx = 0 if p.polarity == POSITIVE else 1
            embeddings.append(pe(p.y, p.x) + self.polarity.weight[idx])
        for b in prompts.boxes:
            embeddings.append(pe(b.y_min, b.x_min) + self.corners.weight[0])
            embeddings.append(pe(b.y_max, b.x_max) + self.corners.weight[1])
        if prompts.seg_embedding is not None:
            if prompts.seg_embedding.shape != (self.cfg.d_model,):
                raise ShapeMismatchError(
                    f"semantic embedding must have dim {self.cfg.d_model}, "
                    f"got {tuple(prompts.seg_embedding.shape)}"
                )
            embeddings.append(prompts.seg_embedding.to(dtype))
        return torch.stack(embeddings, dim=0)


class TwoWayBlock(nn.Module):
    """Query self-attention, query->image and image->query cross-attention."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_q2i = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.cross_i2q = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, queries: torch.Tensor, image: torch.Tensor, image_pe: torch.Tensor):
        q = queries[None]
        img = image[None]
        pe = image_pe[None]
        attn, _ = self.self_attn(q, q, q, need_weights=False)
        q = self.norm1(q + attn)
        attn, _ = self.cross_q2i(q, img + pe, img, need_weights=False)
        q = self.norm2(q + attn)
        q = self.norm3(q + self.mlp(q))
        attn, _ = self.cross_i2q(img + pe, q, q, need_weights=False)
        img = self.norm4(img + attn)
        return q[0], img[0]


class SemanticPromptProjector(nn.Module):
    """Two-layer map from an LM hidden state to the prompt embedding width."""

    def __init__(self, lm_dim: int, prompt_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(lm_dim, lm_dim), nn.GELU(), nn.Linear(lm_dim, prompt_dim))

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.net(hidden)


class SegDecoder(nn.Module):
    """Trunk, prompt encoder, memory-conditioned two-way mask decoder."""

    def __init__(self, cfg: SegDecoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.trunk = SliceTrunk(cfg)
        self.prompt_encoder = PromptEncoder(cfg)
        self.mask_token = nn.Parameter(torch.zeros(d))
        nn.init.normal_(self.mask_token, std=0.02)
        self.blocks = nn.ModuleList(
            TwoWayBlock(d, cfg.n_heads) for _ in range(cfg.two_way_layers)
        )
        self.memory_attn = nn.MultiheadAttention(d, cfg.n_heads, batch_first=True)
        self.memory_norm = nn.LayerNorm(d)
        self.z_offset = nn.Embedding(2 * cfg.z_window + 1, d)
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(d, d // 2, 2, stride=2),
            _group_norm(d // 2),
            nn.GELU(),
            nn.ConvTranspose2d(d // 2, d // 4, 2, stride=2),
            _group_norm(d // 4),
            nn.GELU(),
        )
        self.hyper = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d // 4))
        # Direct hypernetwork path from the semantic embedding to the mask
        # head. Routing the embedding only through attention lets the decoder
        # satisfy the training set by memorizing one mask per volume and
        # ignoring the prompt; adding its projection into the dot-product
        # embedding gives the class signal a gradient path every step.
        self.semantic_hyper = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d // 4))
        self.memory_encoder = nn.Sequential(
            nn.Conv2d(d + 1, d, 3, padding=1), nn.GELU(), nn.Conv2d(d, d, 3, padding=1)
        )
        self.summary_proj = nn.Linear(d, d)

    # -- memory --------------------------------------------------------

    def _memory_tokens(self, memory: MemoryBank, z: int) -> torch.Tensor | None:
        if len(memory) == 0:
            return None
        w = self.cfg.z_window
        chunks = []
        for entry in memory:
            offset = max(-w, min(w, entry.z - z)) + w
            offset_emb = self.z_offset.weight[offset]
            feats = entry.features.reshape(self.cfg.d_model, -1).T  # (hw, d)
            chunks.append(feats + offset_emb)
            chunks.append((entry.summary + offset_emb)[None])
        return torch.cat(chunks, dim=0)

    def encode_memory(self, features: torch.Tensor, logits: torch.Tensor, z: int) -> MemoryEntry:
        """Summarize a decoded slice for the bank."""
        prob = torch.sigmoid(logits)[None, None]
        prob_small = nn.functional.adaptive_avg_pool2d(prob, features.shape[-2:])
        fused = self.memory_encoder(torch.cat([features[None], prob_small], dim=1))[0]
        pooled = nn.functional.adaptive_avg_pool2d(
            fused[None], (self.cfg.mem_hw, self.cfg.mem_hw)
        )[0]
        summary = self.summary_proj(fused.mean(dim=(1, 2)))
        return MemoryEntry(z=z, features=pooled, summary=summary)

    # -- decoding ------------------------------------------------------

    def compute_features(self, slice_2d: torch.Tensor) -> torch.Tensor:
        return self.trunk(slice_2d)

    def decode_slice(
        self,
        features: torch.Tensor,
        sparse_embeddings: torch.Tensor | None,
        memory: MemoryBank,
        z: int = 0,
        semantic: torch.Tensor | None = None,
    ) -> SliceMaskLogits:
        """Decode one slice given its trunk features.

        ``sparse_embeddings`` may be None (propagation-only slices); the
        learned mask token is always present as a query. ``semantic`` is the
        raw semantic embedding, which additionally conditions the mask head
        directly. An empty memory bank is valid and simply skips memory
        conditioning.
        """
        d, h, w = features.shape
        if d != self.cfg.d_model:
            raise ShapeMismatchError(f"features have {d} channels, expected {self.cfg.d_model}")
        img = features.reshape(d, h * w).T  # (hw, d)
        img_pe = _grid_encoding(h, w, d, features.dtype, features.device)

        mem_tokens = self._memory_tokens(memory, z)
        if mem_tokens is not None:
            attended, _ = self.memory_attn(
                (img + img_pe)[None], mem_tokens[None], mem_tokens[None], need_weights=False
            )
            img = self.memory_norm(img + attended[0])

        queries = self.mask_token[None]
        if sparse_embeddings is not None and sparse_embeddings.shape[0] > 0:
            if sparse_embeddings.shape[1] != d:
                raise ShapeMismatchError(
                    f"sparse embeddings dim {sparse_embeddings.shape[1]} != {d}"
                )
            queries = torch.cat([queries, sparse_embeddings], dim=0)
        for block in self.blocks:
            queries, img = block(queries, img, img_pe)

        mask_embedding = self.hyper(queries[0])  # (d/4,)
        if semantic is not None:
            if semantic.shape != (d,):
                raise ShapeMismatchError(
                    f"semantic embedding must have dim {d}, got {tuple(semantic.shape)}"
                )
            mask_embedding = mask_embedding + self.semantic_hyper(semantic.to(features.dtype))
        pixel_embeddings = self.upscale(img.T.reshape(1, d, h, w))[0]  # (d/4, Y, X)
        logits = torch.einsum("c,chw->hw", mask_embedding, pixel_embeddings)
        return SliceMaskLogits(z=z, logits=logits)


def assemble_mask(slice_logits: list[SliceMaskLogits], threshold: float = 0.0) -> MaskVolume:
    """Stack per-slice logits and binarize: voxel = 1 where logit > threshold."""
    if not slice_logits:
        raise ShapeMismatchError("no slice logits to assemble")
    zs = sorted(s.z for s in slice_logits)
    if zs != list(range(len(slice_logits))):
        missing = sorted(set(range(len(slice_logits))) - set(zs))
        raise ShapeMismatchError(f"slice logits do not cover every slice; missing {missing}")
    ordered = sorted(slice_logits, key=lambda s: s.z)
    stack = torch.stack([s.logits for s in ordered], dim=0)
    labels = (stack > threshold).to(torch.uint8).cpu().numpy()
    return MaskVolume(
        shape=tuple(labels.shape), labels=labels, class_names={1: "target"} if labels.any() else {}
    )


def propagate_volume(
    volume: Volume3D,
    prompts: PromptSet,
    decoder: SegDecoder,
) -> tuple[MaskVolume, list[SliceMaskLogits]]:
    """Decode a full volume slice by slice.

    Geometric prompts anchor decoding at their slice; the sweep runs forward
    from the anchor to the top, then restarts at the anchor and runs backward,
    each decoded slice feeding the memory bank. A semantic-only prompt set
    sweeps front to back with the embedding applied to every slice.
    """
    prompts.validate(volume.shape)
    zdim, ydim, xdim = volume.shape
    dtype = next(decoder.parameters()).dtype
    device = next(decoder.parameters()).device
    vox = torch.from_numpy(volume.voxels).to(dtype=dtype, device=device)

    features = [decoder.compute_features(vox[z]) for z in range(zdim)]

    semantic_only = PromptSet(seg_embedding=prompts.seg_embedding)
    full_sparse = decoder.prompt_encoder(prompts, (ydim, xdim))
    if prompts.seg_embedding is not None:
        sweep_sparse = decoder.prompt_encoder(semantic_only, (ydim, xdim))
    else:
        sweep_sparse = None

    results: dict[int, SliceMaskLogits] = {}
    semantic = prompts.seg_embedding

    def run_leg(order: list[int], bank: MemoryBank, anchor: int | None):
        for z in order:
            sparse = full_sparse if z == anchor else sweep_sparse
            out = decoder.decode_slice(features[z], sparse, bank, z=z, semantic=semantic)
            results[z] = out
            bank.add(decoder.encode_memory(features[z], out.logits, z))

    if prompts.has_geometric():
        anchor = prompts.anchor_slice()
        bank = MemoryBank(decoder.cfg.memory_capacity)
        anchor_out = decoder.decode_slice(
            features[anchor], full_sparse, bank, z=anchor, semantic=semantic
        )
        results[anchor] = anchor_out
        anchor_entry = decoder.encode_memory(features[anchor], anchor_out.logits, anchor)
        bank.add(anchor_entry)
        run_leg(list(range(anchor + 1, zdim)), bank, anchor=None)
        bank = MemoryBank(decoder.cfg.memory_capacity)
        bank.add(anchor_entry)
        run_leg(list(range(anchor - 1, -1, -1)), bank, anchor=None)
    else:
        bank = MemoryBank(decoder.cfg.memory_capacity)
        run_leg(list(range(zdim)), bank, anchor=None)

    ordered = [results[z] for z in range(zdim)]
    mask = assemble_mask(ordered, threshold=decoder.cfg.mask_threshold)
    return mask, ordered
