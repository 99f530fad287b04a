"""Unified 3D vision-language model with promptable volumetric segmentation.

A small CT-like volume goes in together with an instruction and optional
geometric prompts; text comes out, and when the reply contains the
segmentation trigger token its hidden state drives a slice-wise promptable
mask decoder with cross-slice memory, producing a volumetric mask.
"""

from .config import Config, LossWeights, StageConfig, load_config
from .encoder import EncoderConfig, VolumeEncoder, encode_volume
from .errors import VoxelGrounderError
from .lm import DecodeConfig, LMConfig, LoRAConfig, TransformerLM
from .metrics import MetricReport, accuracy_mc, bleu1, cider, dice_coefficient, rouge_l
from .model import SegmentationResult, VoxelGrounder
from .phantoms import CorpusRecord, PhantomSpec, generate_phantom, make_corpus
from .projector import MixerConfig, TokenProjector
from .segdec import (
    MemoryBank,
    PromptBox,
    PromptPoint,
    PromptSet,
    SegDecoder,
    SegDecoderConfig,
)
from .textproc import Vocabulary
from .training import (
    build_model,
    build_vocabulary,
    load_checkpoint,
    run_stage,
    save_checkpoint,
)
from .volume import MaskVolume, Volume3D, normalize_volume

__version__ = "0.1.0"

__all__ = [
    "Config",
    "CorpusRecord",
    "DecodeConfig",
    "EncoderConfig",
    "LMConfig",
    "LoRAConfig",
    "LossWeights",
    "MaskVolume",
    "MemoryBank",
    "MetricReport",
    "MixerConfig",
    "PhantomSpec",
    "PromptBox",
    "PromptPoint",
    "PromptSet",
    "SegDecoder",
    "SegDecoderConfig",
    "SegmentationResult",
    "StageConfig",
    "TokenProjector",
    "TransformerLM",
    "Vocabulary",
    "VolumeEncoder",
    "Volume3D",
    "VoxelGrounder",
    "VoxelGrounderError",
    "accuracy_mc",
    "bleu1",
    "build_model",
    "build_vocabulary",
    "cider",
    "dice_coefficient",
    "encode_volume",
    "generate_phantom",
    "load_checkpoint",
    "load_config",
    "make_corpus",
    "normalize_volume",
    "rouge_l",
    "run_stage",
    "save_checkpoint",
    "__version__",
]
