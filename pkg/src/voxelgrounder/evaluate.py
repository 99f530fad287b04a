"""Corpus evaluation: report quality, QA accuracy, segmentation Dice.

Everything here drives the trained model in inference mode and reduces the
outputs with :mod:`voxelgrounder.metrics`. Evaluation is deterministic: the
prompt wording and any simulated clicks for a given example derive from a
per-example seed, so two runs of the same evaluation agree bit-for-bit.
"""

from __future__ import annotations

import numpy as np

from .errors import AbsentSegError, InputValidationError
from .interaction import (
    InteractionProtocolConfig,
    TemplateBank,
    label_for_class,
    load_template_bank,
    render_instruction,
    sample_box_prompt,
    sample_point_prompts,
)
from .lm import DecodeConfig
from .metrics import MetricReport, accuracy_mc, bleu1, cider, dice_coefficient, rouge_l
from .model import VoxelGrounder
from .phantoms import CorpusRecord

SEG_MODES = ("semantic", "referring", "points", "bbox")


def _example_rng(seed: int, *parts: int) -> np.random.Generator:
    return np.random.default_rng([seed, *parts])


def evaluate_reports(
    model: VoxelGrounder,
    records: list[CorpusRecord],
    bank: TemplateBank | None = None,
    decode: DecodeConfig | None = None,
    seed: int = 0,
) -> MetricReport:
    """Generate a report per record; score BLEU-1, ROUGE-L, and consensus."""
    bank = bank if bank is not None else load_template_bank()
    candidates, references = [], []
    for i, record in enumerate(records):
        prompt, _ = render_instruction("report", record, bank=bank, rng=_example_rng(seed, i))
        out = model.answer(record.volume, prompt, decode)
        candidates.append(out.text)
        references.append([record.report])

    report = MetricReport()
    report.add("bleu1", [bleu1(c, r) for c, r in zip(candidates, references)])
    report.add("rouge_l", [rouge_l(c, r[0]) for c, r in zip(candidates, references)])
    if len(candidates) >= 2:
        report.add("cider", cider(candidates, references))
    return report


def evaluate_qa(
    model: VoxelGrounder,
    records: list[CorpusRecord],
    bank: TemplateBank | None = None,
    decode: DecodeConfig | None = None,
    seed: int = 0,
    kinds: tuple[str, ...] = ("short", "choice"),
) -> MetricReport:
    """Exact-match accuracy over QA items, split by question kind."""
    bank = bank if bank is not None else load_template_bank()
    by_kind: dict[str, tuple[list[str], list[str]]] = {k: ([], []) for k in kinds}
    for i, record in enumerate(records):
        for kind in kinds:
            task = f"vqa_{kind}"
            if not any(q.kind == kind for q in record.qa_items):
                continue
            rng = _example_rng(seed, i, kinds.index(kind))
            prompt, target = render_instruction(task, record, bank=bank, rng=rng)
            out = model.answer(record.volume, prompt, decode)
            by_kind[kind][0].append(out.text)
            by_kind[kind][1].append(target)

    report = MetricReport()
    all_preds, all_gold = [], []
    for kind, (preds, gold) in by_kind.items():
        if not preds:
            continue
        per_example = [accuracy_mc([p], [g]) for p, g in zip(preds, gold)]
        report.add(f"accuracy_{kind}", per_example, aggregate=accuracy_mc(preds, gold))
        all_preds.extend(preds)
        all_gold.extend(gold)
    if all_preds:
        per_example = [accuracy_mc([p], [g]) for p, g in zip(all_preds, all_gold)]
        report.add("accuracy", per_example, aggregate=accuracy_mc(all_preds, all_gold))
    return report


def evaluate_segmentation(
    model: VoxelGrounder,
    records: list[CorpusRecord],
    mode: str,
    interaction: InteractionProtocolConfig | None = None,
    bank: TemplateBank | None = None,
    decode: DecodeConfig | None = None,
    prompt_seed: int = 0,
) -> MetricReport:
    """Per-class Dice for one prompting mode.

    ``semantic`` and ``referring`` are text-only; ``points`` and ``bbox`` add
    simulated clicks on top of the semantic instruction. A generation that
    never emits the segmentation token counts as an empty mask.
    """
    if mode not in SEG_MODES:
        raise InputValidationError(f"unknown segmentation mode {mode!r}")
    bank = bank if bank is not None else load_template_bank()
    interaction = interaction if interaction is not None else InteractionProtocolConfig()

    dices: list[float] = []
    per_class: dict[str, list[float]] = {}
    absent = 0
    for i, record in enumerate(records):
        for label in record.masks.present_classes():
            class_name = record.masks.class_names[label]
            rng = _example_rng(prompt_seed, i, label)
            task = "referring_seg" if mode == "referring" else "semantic_seg"
            instruction, _ = render_instruction(
                task, record, class_name=class_name, bank=bank, rng=rng
            )
            points, boxes = None, None
            if mode == "points":
                points = sample_point_prompts(record.masks, label, interaction, rng)
            elif mode == "bbox":
                boxes = [sample_box_prompt(record.masks, label, interaction, rng)]

            gt = record.masks.binary(label)
            try:
                result = model.segment(
                    record.volume, instruction, points=points, boxes=boxes, decode=decode
                )
                d = dice_coefficient(result.mask.labels, gt)
            except AbsentSegError:
                absent += 1
                d = dice_coefficient(np.zeros_like(gt), gt)
            dices.append(d)
            per_class.setdefault(class_name, []).append(d)

    report = MetricReport()
    report.add("dice", dices)
    for name, values in sorted(per_class.items()):
        report.add(f"dice_{name}", values)
    report.counts["absent_seg_token"] = absent
    return report
