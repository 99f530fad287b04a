"""Decoder-only language model with LoRA adapters and segmentation-token
hidden-state extraction.

The backbone is a small causal transformer. LoRA deltas sit on the query, key,
and value projections of every layer; with the B factor at its zero init the
adapted model is exactly the base model. Projected visual tokens are injected
as embeddings over a contiguous span right after BOS. When the model emits the
segmentation trigger token, the final-layer hidden state at that position is
recorded so it can be routed to the mask decoder as a semantic prompt.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import AbsentSegError, ConfigError, ContextOverflowError, ShapeMismatchError
from .textproc import Vocabulary


@dataclass
class LoRAConfig:
    rank: int = 8
    alpha: float = 16.0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("LoRA rank must be >= 1")


@dataclass
class LMConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    mlp_ratio: float = 4.0
    max_seq: int = 256
    lora: LoRAConfig = field(default_factory=LoRAConfig)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")


class LoRALinear(nn.Module):
    """Linear layer with an additive low-rank delta ``(alpha/r) * B @ A``.

    ``lora_B`` starts at zero, so a fresh adapter is an exact identity on top
    of the base weight.
    """

    def __init__(self, in_features: int, out_features: int, cfg: LoRAConfig):
        super().__init__()
        self.base = nn.Linear(in_features, out_features)
        self.scale = cfg.alpha / cfg.rank
        self.lora_A = nn.Parameter(torch.empty(cfg.rank, in_features))
        self.lora_B = nn.Parameter(torch.zeros(out_features, cfg.rank))
        nn.init.normal_(self.lora_A, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.d_model // cfg.n_heads
        self.q = LoRALinear(cfg.d_model, cfg.d_model, cfg.lora)
        self.k = LoRALinear(cfg.d_model, cfg.d_model, cfg.lora)
        self.v = LoRALinear(cfg.d_model, cfg.d_model, cfg.lora)
        self.out = nn.Linear(cfg.d_model, cfg.d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        L, d = x.shape
        def split(t):
            return t.view(L, self.n_heads, self.head_dim).transpose(0, 1)
        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        attended = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        return self.out(attended.transpose(0, 1).reshape(L, d))


class DecoderBlock(nn.Module):
    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        hidden = int(cfg.d_model * cfg.mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.d_model, hidden), nn.GELU(), nn.Linear(hidden, cfg.d_model)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


@dataclass
class MultimodalSequence:
    """Token ids with an embedded visual span and a supervision mask.

    Layout: ``[BOS][visual span][prompt tokens][answer tokens][EOS]``; the
    answer and EOS are present only for teacher-forced training, and only
    those positions carry loss.
    """

    ids: torch.Tensor
    visual_span: tuple[int, int]
    loss_mask: torch.Tensor
    visual_embeddings: torch.Tensor

    def __post_init__(self):
        if self.visual_span[1] != self.visual_embeddings.shape[0]:
            raise ShapeMismatchError(
                f"visual span {self.visual_span[1]} != embeddings {self.visual_embeddings.shape[0]}"
            )
        if bool(self.loss_mask[: self.visual_span[0] + self.visual_span[1]].any()):
            raise ShapeMismatchError("loss mask must be false over BOS and visual positions")

    def __len__(self) -> int:
        return int(self.ids.shape[0])


@dataclass
class GenerationOutput:
    text: str
    ids: list[int]
    seg_states: list[tuple[int, torch.Tensor]]


@dataclass
class DecodeConfig:
    max_len: int = 32
    temperature: float = 0.0
    seed: int = 0

    @classmethod
    def from_json(cls, path: str | Path) -> "DecodeConfig":
        raw = json.loads(Path(path).read_text())
        return cls(**raw)


def assemble_multimodal_sequence(
    t_v: torch.Tensor,
    prompt_ids: list[int],
    vocab: Vocabulary,
    answer_ids: list[int] | None = None,
    max_seq: int | None = None,
) -> MultimodalSequence:
    """Lay out ids and the loss mask around a visual span.

    Training mode (``answer_ids`` given) appends the answer and EOS and marks
    exactly those positions for loss. Inference mode stops after the prompt.
    """
    if t_v is None or t_v.ndim != 2:
        raise ShapeMismatchError("assembly requires a 2D visual token matrix")
    n_hat = t_v.shape[0]
    ids = [vocab.bos_id] + [vocab.image_id] * n_hat + list(prompt_ids)
    mask = [False] * len(ids)
    if answer_ids is not None:
        ids.extend(list(answer_ids) + [vocab.eos_id])
        mask.extend([True] * (len(answer_ids) + 1))
    if max_seq is not None and len(ids) > max_seq:
        raise ContextOverflowError(f"sequence length {len(ids)} exceeds max context {max_seq}")
    return MultimodalSequence(
        ids=torch.tensor(ids, dtype=torch.long),
        visual_span=(1, n_hat),
        loss_mask=torch.tensor(mask, dtype=torch.bool),
        visual_embeddings=t_v,
    )


class TransformerLM(nn.Module):
    """Small causal LM over the multimodal sequence."""

    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos = nn.Parameter(torch.zeros(cfg.max_seq, cfg.d_model))
        nn.init.trunc_normal_(self.pos, std=0.02)
        nn.init.normal_(self.embed.weight, std=0.02)
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)

    def forward_teacher_forced(self, seq: MultimodalSequence):
        """Returns per-position logits and final-layer hidden states."""
        L = len(seq)
        if L > self.cfg.max_seq:
            raise ContextOverflowError(f"sequence length {L} exceeds max context {self.cfg.max_seq}")
        x = self.embed(seq.ids)
        start, n_vis = seq.visual_span
        x = torch.cat(
            [x[:start], seq.visual_embeddings.to(x.dtype), x[start + n_vis :]], dim=0
        )
        x = x + self.pos[:L]
        for block in self.blocks:
            x = block(x)
        hidden = self.ln_f(x)
        return self.head(hidden), hidden

    @torch.no_grad()
    def generate(
        self,
        t_v: torch.Tensor,
        prompt_ids: list[int],
        vocab: Vocabulary,
        decode: DecodeConfig | None = None,
    ) -> GenerationOutput:
        """Autoregressive decoding; greedy unless a temperature is set.

        Every emitted segmentation token records its final-layer hidden state
        (taken from one teacher-forced pass over the finished sequence, which
        matches the per-step states exactly under causal masking).
        """
        decode = decode or DecodeConfig()
        was_training = self.training
        self.eval()
        try:
            seq = assemble_multimodal_sequence(t_v, prompt_ids, vocab, max_seq=self.cfg.max_seq)
            prompt_len = len(seq)
            ids = seq.ids.tolist()
            rng = torch.Generator().manual_seed(decode.seed)
            for _ in range(decode.max_len):
                if len(ids) >= self.cfg.max_seq:
                    break
                current = MultimodalSequence(
                    ids=torch.tensor(ids, dtype=torch.long),
                    visual_span=seq.visual_span,
                    loss_mask=torch.zeros(len(ids), dtype=torch.bool),
                    visual_embeddings=seq.visual_embeddings,
                )
                logits, _ = self.forward_teacher_forced(current)
                step_logits = logits[-1]
                if decode.temperature > 0:
                    probs = torch.softmax(step_logits / decode.temperature, dim=-1)
                    next_id = int(torch.multinomial(probs, 1, generator=rng))
                else:
                    next_id = int(step_logits.argmax())
                ids.append(next_id)
                if next_id == vocab.eos_id:
                    break
            final = MultimodalSequence(
                ids=torch.tensor(ids, dtype=torch.long),
                visual_span=seq.visual_span,
                loss_mask=torch.zeros(len(ids), dtype=torch.bool),
                visual_embeddings=seq.visual_embeddings,
            )
            _, hidden = self.forward_teacher_forced(final)
            seg_states = [
                (pos, hidden[pos].clone())
                for pos in range(prompt_len, len(ids))
                if ids[pos] == vocab.seg_id
            ]
            generated = ids[prompt_len:]
            return GenerationOutput(text=vocab.decode(generated), ids=ids, seg_states=seg_states)
        finally:
            self.train(was_training)


def extract_seg_hidden_state(out: GenerationOutput, k: int = 0) -> torch.Tensor:
    """The recorded hidden state of the k-th generated segmentation token."""
    if k >= len(out.seg_states):
        raise AbsentSegError(
            f"requested seg state {k} but only {len(out.seg_states)} were generated"
        )
    return out.seg_states[k][1]


def seg_positions(seq: MultimodalSequence, seg_id: int) -> list[int]:
    """Positions of the segmentation token inside the supervised answer span."""
    return [
        i
        for i in range(len(seq))
        if bool(seq.loss_mask[i]) and int(seq.ids[i]) == seg_id
    ]
