"""Scratch: held-out bbox-vs-referring + tube continuity on a saved model (not shipped).

Usage: python3 exp_heldout.py TAG [DM] [TC]
"""
import sys
from dataclasses import replace

import numpy as np
import torch

torch.set_num_threads(1)

from voxelgrounder import Config, make_corpus
from voxelgrounder.evaluate import evaluate_segmentation
from voxelgrounder.interaction import label_for_class, load_template_bank, render_instruction
from voxelgrounder.training import build_model, build_vocabulary

tag = sys.argv[1]
dm = int(sys.argv[2]) if len(sys.argv) > 2 else 96
tc = int(sys.argv[3]) if len(sys.argv) > 3 else 24

corpus = make_corpus(8, "mixed", seed=100)
cfg = Config()
if dm != 64:
    cfg.segdec = replace(cfg.segdec, d_model=dm, trunk_channels=tc)
bank = load_template_bank()
vocab = build_vocabulary(corpus, bank)
model = build_model(cfg, vocab)
model.load_state_dict(torch.load(f"/tmp/exp_model_{tag}.pt"))
model.eval()


def cents(m):
    return {z: np.argwhere(m[z]).mean(0) for z in range(m.shape[0]) if m[z].any()}


for r in corpus:
    if "vessel" not in r.masks.class_names.values():
        continue
    label = label_for_class(r.masks, "vessel")
    truth = r.masks.binary(label)
    instr, _ = render_instruction(
        "semantic_seg", r, class_name="vessel", bank=bank, rng=np.random.default_rng(0)
    )
    res = model.segment(r.volume, instr, decode=cfg.decode)
    pred = res.mask.labels > 0
    tcents, pcents = cents(truth), cents(pred)
    ts = [float(np.linalg.norm(tcents[z + 1] - tcents[z])) for z in tcents if z + 1 in tcents]
    js = [
        float(np.linalg.norm(pcents[z + 1] - pcents[z]))
        for z in pcents
        if z + 1 in pcents and z in tcents and z + 1 in tcents
    ]
    print(
        f"[{tag}] vessel: true shift max {max(ts):.3f} mean {np.mean(ts):.3f}; "
        f"pred jump max {max(js) if js else -1:.3f}; bound2x {2 * max(ts):.3f}; "
        f"pairs {len(js)}; pred slices {len(pcents)}/{len(tcents)}",
        flush=True,
    )

small = make_corpus(16, "small_structure", seed=7000)
large = make_corpus(16, "large_organ", seed=7100)


def mean_dice(recs, mode):
    vals = [
        evaluate_segmentation(
            model, recs, mode, interaction=cfg.interaction, bank=bank,
            decode=cfg.decode, prompt_seed=s,
        ).aggregate["dice"]
        for s in (0, 1, 2)
    ]
    return float(np.mean(vals)), [round(v, 3) for v in vals]


for name, recs in (("small", small), ("large", large)):
    b, bv = mean_dice(recs, "bbox")
    ref, rv = mean_dice(recs, "referring")
    print(f"[{tag}] {name}: bbox {b:.3f} {bv} referring {ref:.3f} {rv} gap {b - ref:.3f}", flush=True)
