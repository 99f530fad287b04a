"""Simulated user interaction and the instruction-template bank.

Two halves live here. Geometric prompt synthesis imitates how a user would
click or draw on a slice: positive points are sampled inside the target
region, boxes are the tight bounding box with a little jitter on every edge
to mimic imperfect drawing. Instruction rendering turns a corpus record into
(prompt text, target text) pairs for each task; the templates live in an
editable JSON file so wording can change without touching code.

Everything is seeded and pure: the same seed always produces the same points,
box, and rendered strings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import EmptyTargetError, InputValidationError, TemplateError
from .phantoms import PALETTE, CorpusRecord
from .segdec import PromptBox, PromptPoint
from .volume import MaskVolume

TASKS = ("report", "vqa_short", "vqa_long", "vqa_choice", "semantic_seg", "referring_seg")
SEG_TASKS = ("semantic_seg", "referring_seg")
TEXT_TASKS = ("report", "vqa_short", "vqa_long", "vqa_choice")

SEG_TOKEN = "[SEG]"


@dataclass
class InteractionProtocolConfig:
    """How simulated clicks and boxes are drawn."""

    n_points: int = 3
    jitter_frac: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 1:
            raise InputValidationError("n_points must be >= 1")
        if not 0.0 <= self.jitter_frac < 0.5:
            raise InputValidationError("jitter_frac must be in [0, 0.5)")


def _rng(cfg: InteractionProtocolConfig, rng: np.random.Generator | None) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng(cfg.seed)


def label_for_class(mask: MaskVolume, class_name: str) -> int:
    """Integer label of a named class; raises if the class is absent."""
    for label, name in mask.class_names.items():
        if name == class_name:
            return label
    raise EmptyTargetError(f"class {class_name!r} not present in mask")


def _containing_slices(binary: np.ndarray) -> np.ndarray:
    zs = np.unique(np.nonzero(binary)[0])
    if zs.size == 0:
        raise EmptyTargetError("target class has no voxels")
    return zs


def sample_point_prompts(
    mask: MaskVolume,
    label: int,
    cfg: InteractionProtocolConfig,
    rng: np.random.Generator | None = None,
) -> list[PromptPoint]:
    """Positive points inside the target, all on one uniformly chosen slice.

    Points are drawn uniformly without replacement from the target pixels of
    that slice; if the slice holds fewer pixels than ``n_points``, every pixel
    is used.
    """
    gen = _rng(cfg, rng)
    binary = mask.binary(label)
    zs = _containing_slices(binary)
    z = int(zs[int(gen.integers(zs.size))])
    ys, xs = np.nonzero(binary[z])
    count = min(cfg.n_points, ys.size)
    picks = gen.choice(ys.size, size=count, replace=False)
    return [PromptPoint(z=z, y=float(ys[i]), x=float(xs[i])) for i in picks]


def sample_box_prompt(
    mask: MaskVolume,
    label: int,
    cfg: InteractionProtocolConfig,
    rng: np.random.Generator | None = None,
) -> PromptBox:
    """Tight box of the target on one slice, each edge independently jittered.

    Edge perturbations are uniform(-jitter_frac, +jitter_frac) times that
    edge's side length, clamped to the slice, order preserved. A degenerate
    one-pixel region still yields a box at least one pixel wide.
    """
    gen = _rng(cfg, rng)
    binary = mask.binary(label)
    zs = _containing_slices(binary)
    z = int(zs[int(gen.integers(zs.size))])
    ys, xs = np.nonzero(binary[z])
    y_min, y_max = float(ys.min()), float(ys.max())
    x_min, x_max = float(xs.min()), float(xs.max())
    h, w = y_max - y_min, x_max - x_min

    jit = gen.uniform(-cfg.jitter_frac, cfg.jitter_frac, size=4)
    y_min += jit[0] * h
    y_max += jit[1] * h
    x_min += jit[2] * w
    x_max += jit[3] * w

    ydim, xdim = binary.shape[1], binary.shape[2]
    y_min, y_max = max(0.0, y_min), min(float(ydim - 1), y_max)
    x_min, x_max = max(0.0, x_min), min(float(xdim - 1), x_max)

    def widen(lo, hi, limit):
        if hi - lo >= 1.0:
            return lo, hi
        center = (lo + hi) / 2
        lo, hi = center - 0.5, center + 0.5
        if lo < 0.0:
            lo, hi = 0.0, 1.0
        if hi > limit:
            lo, hi = limit - 1.0, limit
        return lo, hi

    y_min, y_max = widen(y_min, y_max, float(ydim - 1))
    x_min, x_max = widen(x_min, x_max, float(xdim - 1))
    return PromptBox(z=z, y_min=y_min, x_min=x_min, y_max=y_max, x_max=x_max)


# --- instruction templates -------------------------------------------------


@dataclass
class InstructionTemplate:
    task: str
    prompt: str
    answer: str

    def __post_init__(self):
        if self.task not in TASKS:
            raise TemplateError(f"unknown task {self.task!r}")
        if self.task in SEG_TASKS:
            if self.answer.count(SEG_TOKEN) != 1:
                raise TemplateError(
                    f"segmentation answer template must contain exactly one {SEG_TOKEN}"
                )
            if not self.answer.endswith(SEG_TOKEN):
                raise TemplateError(f"segmentation answer template must end with {SEG_TOKEN}")


@dataclass
class TemplateBank:
    templates: dict[str, list[InstructionTemplate]] = field(default_factory=dict)

    def __post_init__(self):
        for task in TASKS:
            if not self.templates.get(task):
                raise TemplateError(f"template bank has no templates for task {task!r}")
        for name in PALETTE:
            for t in self.templates["referring_seg"]:
                if name.lower() in t.prompt.lower() or name.lower() in t.answer.lower():
                    raise TemplateError(
                        f"referring template contains the class name {name!r}: {t.prompt!r}"
                    )

    def pick(self, task: str, rng: np.random.Generator) -> InstructionTemplate:
        pool = self.templates[task]
        return pool[int(rng.integers(len(pool)))]


def load_template_bank(path: str | Path | None = None) -> TemplateBank:
    """Load templates from JSON; defaults to the bank shipped in the package."""
    if path is None:
        raw = resources.files("voxelgrounder.data").joinpath("templates.json").read_text()
    else:
        raw = Path(path).read_text()
    data = json.loads(raw)
    templates = {
        task: [InstructionTemplate(task=task, prompt=e["prompt"], answer=e["answer"]) for e in entries]
        for task, entries in data.items()
    }
    return TemplateBank(templates=templates)


def render_instruction(
    task: str,
    record: CorpusRecord,
    class_name: str | None = None,
    bank: TemplateBank | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[str, str]:
    """Render one (prompt text, target text) pair for a task.

    Segmentation tasks need ``class_name``; the referring variant draws one of
    the record's free-form descriptions for that class, which by corpus
    construction never contain the class name itself.
    """
    if task not in TASKS:
        raise TemplateError(f"unknown task {task!r}")
    bank = bank if bank is not None else load_template_bank()
    gen = rng if rng is not None else np.random.default_rng(0)
    template = bank.pick(task, gen)

    if task == "report":
        return template.prompt, template.answer.format(report=record.report)

    if task in ("vqa_short", "vqa_long", "vqa_choice"):
        kind = task.removeprefix("vqa_")
        items = [q for q in record.qa_items if q.kind == kind]
        if not items:
            raise TemplateError(f"record {record.volume_id} has no {kind!r} QA item")
        item = items[int(gen.integers(len(items)))]
        options = ", ".join(item.options) if item.options else ""
        prompt = template.prompt.format(question=item.question, options=options)
        return prompt, template.answer.format(answer=item.answer)

    if class_name is None:
        raise TemplateError(f"task {task!r} requires a class_name")

    if task == "semantic_seg":
        # the answer names the class right before the segmentation token, so
        # the token's causal context carries the class even when the
        # instruction is hundreds of visual tokens away
        return (
            template.prompt.format(class_name=class_name),
            template.answer.format(class_name=class_name),
        )

    phrases = record.referring_phrases.get(class_name, [])
    if not phrases:
        raise TemplateError(f"no referring phrase for class {class_name!r}")
    description = phrases[int(gen.integers(len(phrases)))]
    return template.prompt.format(description=description), template.answer
