"""Single configuration tree covering data, model, training, and serving.

One JSON file configures every module. The configuration has a stable
fingerprint (hash of its canonical JSON form) that checkpoints embed, so a
checkpoint can refuse to load under a different architecture. The file path
comes from ``--config`` on the CLI or the ``VOXELGROUNDER_CONFIG`` environment
variable.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigError
from .interaction import SEG_TASKS, TASKS, InteractionProtocolConfig
from .lm import DecodeConfig, LMConfig, LoRAConfig
from .projector import MixerConfig
from .segdec import SegDecoderConfig

ENV_VAR = "VOXELGROUNDER_CONFIG"

#: Which parameter groups each stage trains. Fixed by the training schedule:
#: stage 1 aligns only the projector, stage 2 adds the vision encoder and the
#: LoRA-adapted text side, stage 3 additionally unfreezes the mask decoder.
STAGE_TRAINABLES: dict[int, tuple[str, ...]] = {
    1: ("projector",),
    2: ("projector", "vision_encoder", "lora"),
    3: ("projector", "vision_encoder", "lora", "seg_decoder"),
}

_TEXT_MIX = [("report", 0.5), ("vqa_short", 1 / 6), ("vqa_long", 1 / 6), ("vqa_choice", 1 / 6)]
_JOINT_MIX = [(task, p / 2) for task, p in _TEXT_MIX] + [
    ("semantic_seg", 0.25),
    ("referring_seg", 0.25),
]


@dataclass
class LossWeights:
    """Joint-objective weighting: λ_text·L_text + λ_mask·(L_CE + λ_dice·L_Dice).

    Segmentation samples additionally add λ_class times a cross-entropy that
    asks a linear readout to name the target class from the prompt embedding,
    which keeps embeddings for different classes in the same scan apart.
    """

    lambda_text: float = 0.5
    lambda_mask: float = 2.0
    lambda_dice: float = 1.0
    lambda_class: float = 1.0
    dice_eps: float = 1.0

    def __post_init__(self):
        if min(self.lambda_text, self.lambda_mask, self.lambda_dice, self.lambda_class) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.dice_eps <= 0:
            raise ConfigError("dice smoothing must be > 0")


@dataclass
class StageConfig:
    """One stage of the progressive schedule."""

    stage: int
    steps: int = 200
    lr: float = 1e-4
    lr_overrides: dict[str, float] = field(default_factory=dict)  # per parameter group
    warmup_steps: int = 0  # linear lr ramp before the cosine decay
    grad_clip: float = 0.0  # max gradient norm per parameter group; 0 disables clipping
    weight_decay: float = 0.0
    grad_accum: int = 1
    task_mix: list[tuple[str, float]] = field(default_factory=list)
    geometric_prob: float = 0.5  # chance a stage-3 seg sample also gets points/box

    def __post_init__(self):
        if self.stage not in STAGE_TRAINABLES:
            raise ConfigError(f"stage must be 1, 2, or 3, got {self.stage}")
        if self.warmup_steps < 0 or self.warmup_steps >= max(self.steps, 1):
            raise ConfigError(
                f"warmup_steps must be in [0, steps), got {self.warmup_steps} of {self.steps}"
            )
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")
        for group in self.lr_overrides:
            if group not in STAGE_TRAINABLES[self.stage]:
                raise ConfigError(
                    f"lr override for {group!r}, which stage {self.stage} does not train"
                )
        if not self.task_mix:
            self.task_mix = {1: [("report", 1.0)], 2: list(_TEXT_MIX), 3: list(_JOINT_MIX)}[
                self.stage
            ]
        self.task_mix = [(str(t), float(p)) for t, p in self.task_mix]
        for task, p in self.task_mix:
            if task not in TASKS:
                raise ConfigError(f"unknown task {task!r} in task mix")
            if p < 0:
                raise ConfigError("task probabilities must be >= 0")
            if self.stage < 3 and task in SEG_TASKS:
                raise ConfigError(f"stage {self.stage} cannot train segmentation task {task!r}")
        total = sum(p for _, p in self.task_mix)
        if abs(total - 1.0) > 1e-6:
            raise ConfigError(f"task mix probabilities sum to {total}, expected 1")

    @property
    def trainable_groups(self) -> tuple[str, ...]:
        return STAGE_TRAINABLES[self.stage]


@dataclass
class DataConfig:
    n_train: int = 8
    n_eval: int = 4
    difficulty: str = "mixed"  # large_organ | small_structure | mixed
    shape: tuple[int, int, int] = (16, 64, 64)
    noise_sigma: float = 15.0
    seed: int = 1000
    eval_seed: int = 9000
    dir: str = "data"

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.difficulty not in ("large_organ", "small_structure", "mixed"):
            raise ConfigError(f"unknown difficulty {self.difficulty!r}")


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    volume_store: str = "volumes"


@dataclass
class Config:
    seed: int = 0
    window: tuple[float, float] = (-1000.0, 1000.0)
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig.toy)
    mixer: MixerConfig = field(default_factory=MixerConfig.toy)
    lm: LMConfig = field(default_factory=lambda: LMConfig(vocab_size=0))
    segdec: SegDecoderConfig = field(default_factory=SegDecoderConfig)
    interaction: InteractionProtocolConfig = field(default_factory=InteractionProtocolConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    stages: list[StageConfig] = field(default_factory=lambda: [
        StageConfig(stage=1),
        StageConfig(stage=2, steps=300),
        StageConfig(stage=3, steps=600, lr=5e-5),
    ])
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    checkpoint_dir: str = "checkpoints"
    service: ServiceConfig = field(default_factory=ServiceConfig)

    def __post_init__(self):
        self.window = (float(self.window[0]), float(self.window[1]))
        seen = set()
        for s in self.stages:
            if s.stage in seen:
                raise ConfigError(f"duplicate stage {s.stage} in schedule")
            seen.add(s.stage)
        if self.encoder.input_shape != self.data.shape:
            raise ConfigError(
                f"encoder input shape {self.encoder.input_shape} != data shape {self.data.shape}"
            )

    def stage(self, n: int) -> StageConfig:
        for s in self.stages:
            if s.stage == n:
                return s
        raise ConfigError(f"no stage {n} in the configured schedule")

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path: str | Path | None = None) -> str:
        payload = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(payload)
        return payload

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        data = dict(data)

        def sub(key, builder):
            if key in data and isinstance(data[key], dict):
                data[key] = builder(data[key])

        sub("data", lambda d: DataConfig(**d))
        sub("encoder", lambda d: EncoderConfig(**{**d, "input_shape": tuple(d["input_shape"]),
                                                  "patch_shape": tuple(d["patch_shape"])}))
        sub("mixer", lambda d: MixerConfig(**d))
        sub("lm", lambda d: LMConfig(**{**d, "lora": LoRAConfig(**d["lora"])})
            if "lora" in d and isinstance(d["lora"], dict) else LMConfig(**d))
        sub("segdec", lambda d: SegDecoderConfig(**d))
        sub("interaction", lambda d: InteractionProtocolConfig(**d))
        sub("weights", lambda d: LossWeights(**d))
        sub("decode", lambda d: DecodeConfig(**d))
        sub("service", lambda d: ServiceConfig(**d))
        if "stages" in data:
            data["stages"] = [
                StageConfig(**{**s, "task_mix": [tuple(t) for t in s.get("task_mix", [])]})
                if isinstance(s, dict) else s
                for s in data["stages"]
            ]
        if "window" in data:
            data["window"] = tuple(data["window"])
        return cls(**data)

    @classmethod
    def from_json(cls, raw: str) -> "Config":
        return cls.from_dict(json.loads(raw))

    def fingerprint(self) -> str:
        """Stable hash of the architecture-relevant configuration.

        Covers the window and every module shape, but not training schedule,
        data, or service settings — checkpoints stay loadable across those.
        The vocabulary travels inside the checkpoint itself, so ``vocab_size``
        is excluded too.
        """
        arch = {
            "window": self.window,
            "encoder": dataclasses.asdict(self.encoder),
            "mixer": dataclasses.asdict(self.mixer),
            "lm": {k: v for k, v in dataclasses.asdict(self.lm).items() if k != "vocab_size"},
            "segdec": dataclasses.asdict(self.segdec),
        }
        canon = json.dumps(arch, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def load_config(path: str | Path | None = None) -> Config:
    """Load from an explicit path, else ``$VOXELGROUNDER_CONFIG``, else defaults."""
    if path is None:
        path = os.environ.get(ENV_VAR)
    if path is None:
        return Config()
    text = Path(path).read_text()
    return Config.from_json(text)
