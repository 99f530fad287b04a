"""Losses, the three-stage schedule, the optimization loop, checkpoints.

Stage 1 aligns the projector alone; stage 2 unfreezes the vision encoder and
the LoRA-adapted text side; stage 3 adds the mask decoder and switches from
the pure language-modeling loss to the joint objective

    L_joint = λ_text · L_text + λ_mask · (L_CE + λ_dice · L_Dice)
            + λ_class · L_class,

where L_class is a cross-entropy asking a linear readout to name the target
class from the prompt embedding (zero for text-only samples).

Freezing is enforced mechanically: parameters outside the stage's declared
groups never enter the optimizer and have ``requires_grad`` off, so a frozen
group is bit-identical before and after a stage. Stage order is enforced
through checkpoint metadata — you cannot run stage 3 from anything but a
stage-2 checkpoint.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import Config, LossWeights, StageConfig
from .errors import (
    CheckpointCompatibilityError,
    CheckpointIntegrityError,
    ScheduleError,
    ShapeMismatchError,
    UndefinedLossError,
)
from .interaction import (
    SEG_TASKS,
    InteractionProtocolConfig,
    TemplateBank,
    label_for_class,
    load_template_bank,
    render_instruction,
    sample_box_prompt,
    sample_point_prompts,
)
from .lm import MultimodalSequence, assemble_multimodal_sequence, seg_positions
from .model import VoxelGrounder
from .phantoms import PALETTE, CorpusRecord
from .segdec import PromptSet, propagate_volume
from .textproc import Vocabulary
from .volume import MaskVolume, normalize_volume

__all__ = [
    "LossWeights",
    "StageConfig",
    "TrainLog",
    "TrainSample",
    "build_model",
    "build_vocabulary",
    "loss_text",
    "loss_mask_composite",
    "loss_joint",
    "make_sample",
    "training_step",
    "run_stage",
    "save_checkpoint",
    "load_checkpoint",
    "load_checkpoint_vocab",
    "moving_average",
]

_CHECKPOINT_MODULES = ("encoder", "projector", "lm", "seg_decoder", "prompt_projector")


# --- losses ----------------------------------------------------------------


def loss_text(logits: torch.Tensor, seq: MultimodalSequence) -> torch.Tensor:
    """Mean next-token cross-entropy over the supervised answer span."""
    targets = seq.ids[1:]
    mask = seq.loss_mask[1:]
    if not bool(mask.any()):
        raise UndefinedLossError("no supervised positions in sequence")
    return F.cross_entropy(logits[:-1][mask], targets[mask])


def loss_mask_composite(
    logits: torch.Tensor,
    gt: MaskVolume | np.ndarray | torch.Tensor,
    w: LossWeights,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Voxel-wise binary cross-entropy and smoothed Dice loss."""
    if isinstance(gt, MaskVolume):
        gt = gt.labels > 0
    if isinstance(gt, np.ndarray):
        gt = torch.from_numpy(np.ascontiguousarray(gt))
    target = gt.to(dtype=logits.dtype)
    if target.shape != logits.shape:
        raise ShapeMismatchError(
            f"mask logits {tuple(logits.shape)} vs ground truth {tuple(target.shape)}"
        )
    l_ce = F.binary_cross_entropy_with_logits(logits, target)
    p = torch.sigmoid(logits)
    eps = w.dice_eps
    l_dice = 1.0 - (2.0 * (p * target).sum() + eps) / (p.sum() + target.sum() + eps)
    return l_ce, l_dice


def loss_joint(
    l_text: torch.Tensor | float,
    l_ce: torch.Tensor | float,
    l_dice: torch.Tensor | float,
    w: LossWeights,
) -> torch.Tensor | float:
    return w.lambda_text * l_text + w.lambda_mask * (l_ce + w.lambda_dice * l_dice)


# --- sample construction ---------------------------------------------------


@dataclass
class TrainSample:
    record: CorpusRecord
    task: str
    prompt_text: str
    target_text: str
    class_name: str | None = None
    geometric: PromptSet | None = None  # points/boxes only; embedding added later


def make_sample(
    record: CorpusRecord,
    task: str,
    bank: TemplateBank,
    interaction: InteractionProtocolConfig,
    rng: np.random.Generator,
    geometric_prob: float = 0.0,
    class_name: str | None = None,
) -> TrainSample:
    """Render one training sample, optionally with simulated clicks.

    For segmentation tasks the target class is drawn uniformly from the
    record's present classes unless ``class_name`` pins it.
    """
    geometric = None
    if task not in SEG_TASKS:
        class_name = None
    elif class_name is None:
        names = [record.masks.class_names[k] for k in sorted(record.masks.class_names)]
        class_name = names[int(rng.integers(len(names)))]
    if task in SEG_TASKS:
        if geometric_prob > 0 and rng.random() < geometric_prob:
            label = label_for_class(record.masks, class_name)
            if rng.random() < 0.5:
                pts = sample_point_prompts(record.masks, label, interaction, rng)
                geometric = PromptSet(points=pts)
            else:
                box = sample_box_prompt(record.masks, label, interaction, rng)
                geometric = PromptSet(boxes=[box])
    prompt, target = render_instruction(task, record, class_name=class_name, bank=bank, rng=rng)
    return TrainSample(
        record=record,
        task=task,
        prompt_text=prompt,
        target_text=target,
        class_name=class_name,
        geometric=geometric,
    )


def training_step(
    model: VoxelGrounder,
    sample: TrainSample,
    weights: LossWeights,
    stage: int,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Forward pass and loss for one sample under a stage's objective."""
    vocab = model.vocab
    t_v = model.visual_tokens(sample.record.volume)
    seq = assemble_multimodal_sequence(
        t_v,
        vocab.encode(sample.prompt_text),
        vocab,
        answer_ids=vocab.encode(sample.target_text),
        max_seq=model.lm.cfg.max_seq,
    )
    logits, hidden = model.lm.forward_teacher_forced(seq)
    l_text = loss_text(logits, seq)

    if stage < 3 or sample.task not in SEG_TASKS:
        loss = l_text if stage < 3 else weights.lambda_text * l_text
        return loss, {"loss": float(loss.detach()), "text": float(l_text.detach())}

    pos = seg_positions(seq, vocab.seg_id)[0]
    embedding = model.semantic_prompt(hidden[pos])
    base = sample.geometric or PromptSet()
    prompts = PromptSet(points=base.points, boxes=base.boxes, seg_embedding=embedding)
    volume = normalize_volume(sample.record.volume)
    _, slice_logits = propagate_volume(volume, prompts, model.seg_decoder)
    logits3d = torch.stack([s.logits for s in slice_logits], dim=0)
    label = label_for_class(sample.record.masks, sample.class_name)
    l_ce, l_dice = loss_mask_composite(logits3d, sample.record.masks.binary(label), weights)
    class_index = torch.tensor([list(PALETTE).index(sample.class_name)])
    l_class = F.cross_entropy(model.semantic_classifier(embedding).unsqueeze(0), class_index)
    loss = loss_joint(l_text, l_ce, l_dice, weights) + weights.lambda_class * l_class
    return loss, {
        "loss": float(loss.detach()),
        "text": float(l_text.detach()),
        "ce": float(l_ce.detach()),
        "dice": float(l_dice.detach()),
        "class": float(l_class.detach()),
    }


# --- stage runner ----------------------------------------------------------


@dataclass
class TrainLog:
    stage: int
    steps: list[dict] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]

    def to_json(self, path: str | Path | None = None) -> str:
        payload = json.dumps({"stage": self.stage, "steps": self.steps}, indent=2)
        if path is not None:
            Path(path).write_text(payload)
        return payload


def moving_average(values: list[float], window: int) -> list[float]:
    if window < 1 or window > len(values):
        return []
    sums = np.convolve(values, np.ones(window), mode="valid")
    return (sums / window).tolist()


def _apply_freeze(
    model: VoxelGrounder, trainable: tuple[str, ...]
) -> dict[str, list[torch.nn.Parameter]]:
    params: dict[str, list[torch.nn.Parameter]] = {}
    for name, group in model.parameter_groups().items():
        on = name in trainable
        for p in group:
            p.requires_grad_(on)
        if on:
            params[name] = list(group)
    return params


def lr_schedule_factor(step: int, total: int, warmup: int) -> float:
    """Multiplier applied to every group's base lr at ``step``.

    Linear ramp from ``1/warmup`` to 1 over the first ``warmup`` steps, then
    cosine decay to 0 over the remainder. With ``warmup == 0`` this is plain
    cosine annealing.
    """
    if warmup > 0 and step < warmup:
        return (step + 1) / warmup
    span = max(1, total - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


def run_stage(
    model: VoxelGrounder,
    stage_cfg: StageConfig,
    corpus: list[CorpusRecord],
    weights: LossWeights,
    interaction: InteractionProtocolConfig,
    bank: TemplateBank | None = None,
    seed: int = 0,
    prior_stage: int | None = None,
    log_hook=None,
) -> TrainLog:
    """Optimize one stage's trainable groups over the task mix.

    ``prior_stage`` is the stage recorded in the checkpoint this run resumed
    from (None for a fresh model); stages 2 and 3 refuse to run unless the
    preceding stage completed.
    """
    if stage_cfg.stage > 1 and prior_stage != stage_cfg.stage - 1:
        raise ScheduleError(
            f"stage {stage_cfg.stage} requires a stage-{stage_cfg.stage - 1} checkpoint, "
            f"got {prior_stage!r}"
        )
    if not corpus:
        raise ScheduleError("cannot train on an empty corpus")

    bank = bank if bank is not None else load_template_bank()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    grouped = _apply_freeze(model, stage_cfg.trainable_groups)
    optimizer = torch.optim.AdamW(
        [
            {"params": params, "lr": stage_cfg.lr_overrides.get(name, stage_cfg.lr)}
            for name, params in grouped.items()
        ],
        lr=stage_cfg.lr,
        weight_decay=stage_cfg.weight_decay,
    )
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda s: lr_schedule_factor(s, stage_cfg.steps, stage_cfg.warmup_steps)
    )

    tasks = [t for t, _ in stage_cfg.task_mix]
    probs = np.array([p for _, p in stage_cfg.task_mix])
    probs = probs / probs.sum()

    # Segmentation draws are class-balanced: pick the target class uniformly
    # over the corpus-wide class list, then a volume containing it. Without
    # this, classes present in few volumes get starved of mask supervision.
    by_class: dict[str, list[CorpusRecord]] = {}
    for r in corpus:
        for name in r.masks.class_names.values():
            by_class.setdefault(name, []).append(r)
    seg_classes = sorted(by_class)

    log = TrainLog(stage=stage_cfg.stage)
    model.train()
    optimizer.zero_grad()
    for step in range(stage_cfg.steps):
        task = tasks[int(rng.choice(len(tasks), p=probs))]
        if task in SEG_TASKS and seg_classes:
            cls = seg_classes[int(rng.integers(len(seg_classes)))]
            pool = by_class[cls]
            record = pool[int(rng.integers(len(pool)))]
        else:
            cls = None
            record = corpus[int(rng.integers(len(corpus)))]
        sample = make_sample(
            record,
            task,
            bank,
            interaction,
            rng,
            geometric_prob=stage_cfg.geometric_prob,
            class_name=cls,
        )
        loss, parts = training_step(model, sample, weights, stage_cfg.stage)
        (loss / stage_cfg.grad_accum).backward()
        if (step + 1) % stage_cfg.grad_accum == 0:
            if stage_cfg.grad_clip > 0:
                # per group, so a gradient spike in one module (typically the
                # mask decoder early in stage 3) cannot scale down the others
                for params in grouped.values():
                    torch.nn.utils.clip_grad_norm_(params, stage_cfg.grad_clip)
            optimizer.step()
            optimizer.zero_grad()
        scheduler.step()
        entry = {"step": step, "task": task, **parts}
        log.steps.append(entry)
        if log_hook is not None:
            log_hook(entry)
    model.eval()
    return log


# --- model building and checkpoints ---------------------------------------


def build_vocabulary(corpus: list[CorpusRecord], bank: TemplateBank | None = None) -> Vocabulary:
    """Vocabulary over everything the model may read or write."""
    bank = bank if bank is not None else load_template_bank()
    texts = []
    for r in corpus:
        texts.append(r.report)
        for q in r.qa_items:
            texts.append(q.question)
            texts.append(q.answer)
            if q.options:
                texts.extend(q.options)
        for phrases in r.referring_phrases.values():
            texts.extend(phrases)
    for pool in bank.templates.values():
        for t in pool:
            texts.append(re.sub(r"\{[a-z_]+\}", " ", t.prompt))
            texts.append(re.sub(r"\{[a-z_]+\}", " ", t.answer))
    texts.extend(PALETTE)
    return Vocabulary.build(texts)


def build_model(cfg: Config, vocab: Vocabulary) -> VoxelGrounder:
    """Construct the model deterministically from the config seed."""
    torch.manual_seed(cfg.seed)
    lm_cfg = replace(cfg.lm, vocab_size=len(vocab))
    model = VoxelGrounder(vocab, cfg.encoder, cfg.mixer, lm_cfg, cfg.segdec)
    model.eval()
    return model


def _module_map(model: VoxelGrounder) -> dict[str, torch.nn.Module]:
    return {
        "encoder": model.encoder,
        "projector": model.projector,
        "lm": model.lm,
        "seg_decoder": model.seg_decoder,
        "prompt_projector": model.prompt_projector,
        "semantic_classifier": model.semantic_classifier,
    }


def save_checkpoint(
    model: VoxelGrounder,
    path: str | Path,
    fingerprint: str,
    stage: int,
    step: int = 0,
) -> Path:
    """Write per-module payloads plus integrity and compatibility metadata."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    digests = {}
    for name, module in _module_map(model).items():
        buf = io.BytesIO()
        torch.save(module.state_dict(), buf)
        data = buf.getvalue()
        (path / f"{name}.pt").write_bytes(data)
        digests[name] = hashlib.sha256(data).hexdigest()
    model.vocab.save(path / "vocab.json")
    meta = {
        "fingerprint": fingerprint,
        "stage": int(stage),
        "step": int(step),
        "sha256": digests,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_checkpoint_vocab(path: str | Path) -> Vocabulary:
    return Vocabulary.load(Path(path) / "vocab.json")


def read_checkpoint_meta(path: str | Path) -> dict:
    meta_path = Path(path) / "meta.json"
    if not meta_path.exists():
        raise CheckpointIntegrityError(f"no checkpoint metadata at {meta_path}")
    return json.loads(meta_path.read_text())


def load_checkpoint(
    model: VoxelGrounder,
    path: str | Path,
    expected_fingerprint: str | None = None,
) -> dict:
    """Restore module payloads after verifying digests and the fingerprint."""
    path = Path(path)
    meta = read_checkpoint_meta(path)
    if expected_fingerprint is not None and meta["fingerprint"] != expected_fingerprint:
        raise CheckpointCompatibilityError(
            f"checkpoint fingerprint {meta['fingerprint']} does not match "
            f"configured architecture {expected_fingerprint}"
        )
    modules = _module_map(model)
    for name in _CHECKPOINT_MODULES:
        payload_path = path / f"{name}.pt"
        if not payload_path.exists():
            raise CheckpointIntegrityError(f"missing checkpoint payload {payload_path.name}")
        data = payload_path.read_bytes()
        digest = hashlib.sha256(data).hexdigest()
        if digest != meta["sha256"].get(name):
            raise CheckpointIntegrityError(f"payload {payload_path.name} is corrupted")
        state = torch.load(io.BytesIO(data), weights_only=True)
        modules[name].load_state_dict(state)
    model.eval()
    return meta
