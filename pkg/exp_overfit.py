"""Scratch experiment: overfit feasibility + hyperparameter check (not shipped).

Usage: python3 exp_overfit.py TAG LR3 S3 DEC_LR GEOM [SEGMIX]
  DEC_LR 0 -> no seg_decoder lr override.
"""
import sys
import time

import numpy as np
import torch

torch.set_num_threads(1)

from voxelgrounder import Config, make_corpus
from voxelgrounder.config import StageConfig
from voxelgrounder.evaluate import evaluate_qa, evaluate_segmentation
from voxelgrounder.interaction import load_template_bank
from voxelgrounder.training import build_model, build_vocabulary, run_stage

t_start = time.time()
tag = sys.argv[1]
lr3 = float(sys.argv[2])
s3 = int(sys.argv[3])
dec_lr = float(sys.argv[4])
geom = float(sys.argv[5])
segmix = float(sys.argv[6]) if len(sys.argv) > 6 else 0.75
dm = int(sys.argv[7]) if len(sys.argv) > 7 else 64
tc = int(sys.argv[8]) if len(sys.argv) > 8 else 16
warm = int(sys.argv[9]) if len(sys.argv) > 9 else 0
clip = float(sys.argv[10]) if len(sys.argv) > 10 else 0.0

text_share = 1.0 - segmix
MIX = [
    ("report", text_share * 0.32),
    ("vqa_short", text_share * 0.28),
    ("vqa_long", text_share * 0.12),
    ("vqa_choice", text_share * 0.28),
    ("semantic_seg", segmix * 0.53),
    ("referring_seg", segmix * 0.47),
]

corpus = make_corpus(8, "mixed", seed=100)
cfg = Config()
if dm != 64 or tc != 16:
    from dataclasses import replace as _rep
    cfg.segdec = _rep(cfg.segdec, d_model=dm, trunk_channels=tc)
bank = load_template_bank()
vocab = build_vocabulary(corpus, bank)
model = build_model(cfg, vocab)

overrides = {"seg_decoder": dec_lr} if dec_lr > 0 else {}
stages = [
    StageConfig(stage=1, steps=150, lr=3e-4),
    StageConfig(stage=2, steps=400, lr=3e-4),
    StageConfig(stage=3, steps=s3, lr=lr3, task_mix=MIX, lr_overrides=overrides,
                geometric_prob=geom, warmup_steps=warm, grad_clip=clip),
]
prior = None
for sc in stages:
    t0 = time.time()
    log = run_stage(model, sc, corpus, cfg.weights, cfg.interaction, bank,
                    seed=cfg.seed + sc.stage, prior_stage=prior)
    losses = log.losses()
    print(f"[{tag}] stage {sc.stage}: {sc.steps} steps in {time.time()-t0:.0f}s; "
          f"loss {losses[0]:.3f} -> {np.mean(losses[-20:]):.3f}", flush=True)
    if sc.stage == 3:
        parts = [e for e in log.steps if "dice" in e]
        q = max(1, len(parts) // 4)
        for i in range(0, len(parts), q):
            chunk = parts[i : i + q]
            print(f"[{tag}]   seg {i}..{i+len(chunk)}: "
                  f"ce {np.mean([p['ce'] for p in chunk]):.3f} "
                  f"dice {np.mean([p['dice'] for p in chunk]):.3f}", flush=True)
    prior = sc.stage

torch.save(model.state_dict(), f"/tmp/exp_model_{tag}.pt")

t0 = time.time()
qa = evaluate_qa(model, corpus, bank, decode=cfg.decode)
print(f"[{tag}] QA:", {k: round(v, 2) for k, v in qa.aggregate.items()}, flush=True)

t0 = time.time()
seg = evaluate_segmentation(model, corpus, "semantic", cfg.interaction, bank, decode=cfg.decode)
print(f"[{tag}] semantic dice:", {k: round(v, 3) for k, v in seg.aggregate.items()},
      "absent:", seg.counts.get("absent_seg_token"), flush=True)
print(f"[{tag}] total {time.time()-t_start:.0f}s")
