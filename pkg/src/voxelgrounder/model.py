"""Full model assembly: volume encoder, token projector, LM, mask decoder.

The pieces compose one-way. Voxels become visual tokens, the projector
compresses them into the LM embedding space, the LM reads them next to the
instruction and writes text. If that text contains the segmentation trigger
token, its hidden state is projected into the mask decoder's prompt space and
drives slice-wise mask decoding. The mask decoder never feeds anything back
into the LM.

Parameters are partitioned into named groups — ``projector``,
``vision_encoder``, ``lora``, ``seg_decoder``, ``lm_base`` — which is what the
staged training schedule freezes and unfreezes. The ``lora`` group holds the
adapter factors plus the token embedding and output head (the declared
trainable text-side parameters); ``lm_base`` is never trained.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn as nn

from .encoder import EncoderConfig, VolumeEncoder, encode_volume
from .errors import ConfigError
from .phantoms import PALETTE
from .lm import (
    DecodeConfig,
    GenerationOutput,
    LMConfig,
    LoRALinear,
    TransformerLM,
    extract_seg_hidden_state,
)
from .projector import MixerConfig, build_projector, project_tokens
from .segdec import (
    PromptBox,
    PromptPoint,
    PromptSet,
    SegDecoder,
    SegDecoderConfig,
    SemanticPromptProjector,
    SliceMaskLogits,
    propagate_volume,
)
from .textproc import Vocabulary
from .volume import MaskVolume, Volume3D, normalize_volume

PARAMETER_GROUPS = ("projector", "vision_encoder", "lora", "seg_decoder", "lm_base")


@dataclass
class SegmentationResult:
    text: str
    mask: MaskVolume
    slice_logits: list[SliceMaskLogits]


class VoxelGrounder(nn.Module):
    """The unified text-and-mask model."""

    def __init__(
        self,
        vocab: Vocabulary,
        encoder_cfg: EncoderConfig,
        mixer_cfg: MixerConfig,
        lm_cfg: LMConfig,
        seg_cfg: SegDecoderConfig,
        projector_kind: str = "mixer",
    ):
        super().__init__()
        if mixer_cfg.n != encoder_cfg.token_count:
            raise ConfigError(
                f"projector expects {mixer_cfg.n} tokens but encoder emits "
                f"{encoder_cfg.token_count}"
            )
        if mixer_cfg.d != encoder_cfg.embed_dim:
            raise ConfigError(
                f"projector input width {mixer_cfg.d} != encoder width {encoder_cfg.embed_dim}"
            )
        if mixer_cfg.d_hat != lm_cfg.d_model:
            raise ConfigError(
                f"projector output width {mixer_cfg.d_hat} != LM width {lm_cfg.d_model}"
            )
        if lm_cfg.vocab_size != len(vocab):
            lm_cfg = replace(lm_cfg, vocab_size=len(vocab))
        self.vocab = vocab
        self.encoder_cfg = encoder_cfg
        self.encoder = VolumeEncoder(encoder_cfg)
        self.projector = build_projector(projector_kind, mixer_cfg)
        self.lm = TransformerLM(lm_cfg)
        self.seg_decoder = SegDecoder(seg_cfg)
        self.prompt_projector = SemanticPromptProjector(lm_cfg.d_model, seg_cfg.d_model)
        # The text loss never forces the trigger token's hidden state to keep
        # the target class: the token only has to predict end-of-answer, which
        # is class-independent, so instruction-derived prompt embeddings can
        # collapse to one point per volume and the mask decoder then cannot
        # tell apart classes that share a scan. This linear readout is trained
        # to name the class from the prompt embedding, keeping the embedding
        # class-separable where the decoder consumes it.
        self.semantic_classifier = nn.Linear(seg_cfg.d_model, len(PALETTE))

    # -- parameter bookkeeping ----------------------------------------

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Disjoint named parameter groups covering every parameter."""
        lora: list[nn.Parameter] = []
        for module in self.lm.modules():
            if isinstance(module, LoRALinear):
                lora.extend([module.lora_A, module.lora_B])
        lora.extend([self.lm.embed.weight, self.lm.head.weight])
        lora_ids = {id(p) for p in lora}
        lm_base = [p for p in self.lm.parameters() if id(p) not in lora_ids]
        return {
            "projector": list(self.projector.parameters()),
            "vision_encoder": list(self.encoder.parameters()),
            "lora": lora,
            "seg_decoder": list(self.seg_decoder.parameters())
            + list(self.prompt_projector.parameters())
            + list(self.semantic_classifier.parameters()),
            "lm_base": lm_base,
        }

    # -- pipelines -----------------------------------------------------

    def visual_tokens(self, volume: Volume3D) -> torch.Tensor:
        """Projected visual tokens ready for LM injection."""
        v = normalize_volume(volume)
        tokens = encode_volume(v, self.encoder)
        return project_tokens(tokens, self.projector)

    @torch.no_grad()
    def answer(
        self,
        volume: Volume3D,
        prompt_text: str,
        decode: DecodeConfig | None = None,
    ) -> GenerationOutput:
        """Generate a text reply to an instruction about a volume."""
        t_v = self.visual_tokens(volume)
        prompt_ids = self.vocab.encode(prompt_text)
        return self.lm.generate(t_v, prompt_ids, self.vocab, decode)

    def semantic_prompt(self, seg_hidden: torch.Tensor) -> torch.Tensor:
        return self.prompt_projector(seg_hidden)

    @torch.no_grad()
    def segment(
        self,
        volume: Volume3D,
        instruction: str,
        points: list[PromptPoint] | None = None,
        boxes: list[PromptBox] | None = None,
        decode: DecodeConfig | None = None,
    ) -> SegmentationResult:
        """Generate text, ground its segmentation token into a volumetric mask.

        Raises an absent-token error when the reply contains no segmentation
        token, since there is then no semantic prompt to decode from.
        """
        out = self.answer(volume, instruction, decode)
        hidden = extract_seg_hidden_state(out)
        prompts = PromptSet(
            points=list(points or []),
            boxes=list(boxes or []),
            seg_embedding=self.semantic_prompt(hidden),
        )
        mask, slice_logits = propagate_volume(normalize_volume(volume), prompts, self.seg_decoder)
        return SegmentationResult(text=out.text, mask=mask, slice_logits=slice_logits)
