"""End-to-end guarantees of the grounding pipeline, checked at full fidelity.

Each test here verifies one externally observable contract of the package:

* exact token economics of the full-scale encoder/projector presets,
* numeric agreement of the mixer projector with a straight-line float64 oracle,
* finite-difference validation of the gradient pathways, including the LoRA
  adapters reached only through the segmentation-token hidden state,
* bit-exact freezing of the parts each training stage must not touch,
* the joint-loss composition under the default weighting,
* full three-stage training that overfits a small phantom corpus (Dice and
  exact-match QA on the training items),
* box prompts beating text-only referring prompts on held-out volumes,
* the statistical contract of the click/box simulator over 10,000 draws,
* golden metric values to four decimals, and
* the effect of the slice-memory bank on decoding, including centroid
  continuity on tubular structures.

The trained model used by the slow tests comes from one module-scoped fixture
that runs the default schedule end to end; expect the first slow test to take
several minutes on one CPU core.
"""

import hashlib
import json
import math
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from scipy.special import erf

from voxelgrounder.config import (
    Config,
    DataConfig,
    LossWeights,
    StageConfig,
)
from voxelgrounder.encoder import EncoderConfig, VolumeEncoder
from voxelgrounder.evaluate import evaluate_qa, evaluate_segmentation
from voxelgrounder.interaction import (
    InteractionProtocolConfig,
    label_for_class,
    load_template_bank,
    render_instruction,
    sample_box_prompt,
    sample_point_prompts,
)
from voxelgrounder.lm import LMConfig, assemble_multimodal_sequence, seg_positions
from voxelgrounder.metrics import accuracy_mc, bleu1, cider, dice_coefficient, rouge_l
from voxelgrounder.phantoms import make_corpus
from voxelgrounder.projector import MixerConfig, TokenProjector
from voxelgrounder.segdec import (
    MemoryBank,
    PromptBox,
    PromptPoint,
    PromptSet,
    SegDecoder,
    SegDecoderConfig,
    propagate_volume,
)
from voxelgrounder.training import (
    build_model,
    build_vocabulary,
    loss_joint,
    loss_mask_composite,
    run_stage,
)
from voxelgrounder.volume import MaskVolume, Volume3D, normalize_volume

GOLDEN_PATH = Path(__file__).parent / "data" / "metric_golden.json"


# --- shared trained model --------------------------------------------------


@pytest.fixture(scope="module")
def overfit():
    """Train the default three-stage schedule once; shared by the slow tests."""
    cfg = Config()
    corpus = make_corpus(
        cfg.data.n_train,
        cfg.data.difficulty,
        cfg.data.seed,
        shape=cfg.data.shape,
        noise_sigma=cfg.data.noise_sigma,
    )
    bank = load_template_bank()
    vocab = build_vocabulary(corpus, bank)
    model = build_model(cfg, vocab)
    t0 = time.monotonic()
    prior = None
    for stage_cfg in cfg.stages:
        run_stage(
            model,
            stage_cfg,
            corpus,
            cfg.weights,
            cfg.interaction,
            bank,
            seed=cfg.seed + stage_cfg.stage,
            prior_stage=prior,
        )
        prior = stage_cfg.stage
    elapsed = time.monotonic() - t0
    return SimpleNamespace(cfg=cfg, corpus=corpus, bank=bank, model=model, elapsed=elapsed)


# --- 1. token economics of the full-scale presets --------------------------


def test_full_scale_preset_token_economics():
    enc_cfg = EncoderConfig.paper()
    assert enc_cfg.input_shape == (32, 256, 256)
    assert enc_cfg.grid == (8, 16, 16)
    assert enc_cfg.token_count == 2048

    torch.manual_seed(0)
    encoder = VolumeEncoder(enc_cfg)
    voxels = torch.rand(enc_cfg.input_shape)
    with torch.no_grad():
        tokens = encoder(voxels)
    assert tokens.shape == (2048, enc_cfg.embed_dim)

    mix_cfg = MixerConfig.paper(d=enc_cfg.embed_dim)
    assert (mix_cfg.n, mix_cfg.n_hat, mix_cfg.d_hat) == (2048, 512, 2048)
    projector = TokenProjector(mix_cfg)
    with torch.no_grad():
        projected = projector(tokens)
    assert projected.shape == (512, 2048)

    n_params = sum(p.numel() for p in projector.parameters())
    assert abs(n_params / 7.09e6 - 1.0) < 0.02


# --- 2. projector oracle ---------------------------------------------------


def test_projector_matches_straightline_float64_oracle():
    cfg = MixerConfig(n=4, n_hat=2, d=3, d_hat=5)
    proj = TokenProjector(cfg).double()
    rng = np.random.default_rng(7)
    with torch.no_grad():
        for p in proj.parameters():
            p.copy_(torch.from_numpy(rng.uniform(-1.0, 1.0, tuple(p.shape))))

    x = rng.uniform(-1.0, 1.0, (4, 3))
    with torch.no_grad():
        got = proj(torch.from_numpy(x)).numpy()

    w = {name: p.detach().numpy() for name, p in proj.named_parameters()}

    def layer_norm(m, gamma, beta, eps=1e-5):
        mu = m.mean(axis=-1, keepdims=True)
        var = m.var(axis=-1, keepdims=True)
        return (m - mu) / np.sqrt(var + eps) * gamma + beta

    def gelu(v):
        return 0.5 * v * (1.0 + erf(v / math.sqrt(2.0)))

    h = layer_norm(x.T, w["norm_tokens.weight"], w["norm_tokens.bias"])
    h = gelu(h @ w["w1.weight"].T + w["w1.bias"])
    h = (h @ w["w2.weight"].T + w["w2.bias"]).T
    h = layer_norm(h, w["norm_channels.weight"], w["norm_channels.bias"])
    h = gelu(h @ w["w3.weight"].T + w["w3.bias"])
    want = h @ w["w4.weight"].T + w["w4.bias"]

    assert got.shape == (2, 5)
    np.testing.assert_allclose(got, want, rtol=0.0, atol=1e-6)


# --- 3. finite-difference gradient suite -----------------------------------


def _fd_check(module, loss_fn, picks_per_tensor=4, h=1e-6, tol=1e-4, only=None):
    """Central-difference check of the largest analytic gradients.

    Verifies, for each (selected) parameter tensor, the entries with the
    biggest |grad|; tiny gradients drown in finite-difference round-off and
    carry no information about the correctness of the pathway.
    """
    for p in module.parameters():
        p.grad = None
    loss_fn().backward()
    checked = 0
    for name, p in module.named_parameters():
        if only is not None and not only(name):
            continue
        assert p.grad is not None, f"no gradient reached {name}"
        flat, gflat = p.data.view(-1), p.grad.view(-1)
        k = min(picks_per_tensor, flat.numel())
        for i in torch.argsort(gflat.abs(), descending=True)[:k].tolist():
            analytic = float(gflat[i])
            if abs(analytic) < 1e-8:
                continue
            old = float(flat[i])
            with torch.no_grad():
                flat[i] = old + h
                up = float(loss_fn())
                flat[i] = old - h
                down = float(loss_fn())
                flat[i] = old
            fd = (up - down) / (2.0 * h)
            rel = abs(fd - analytic) / max(abs(fd), abs(analytic))
            assert rel < tol, f"{name}[{i}]: fd {fd:.3e} vs analytic {analytic:.3e}"
            checked += 1
    assert checked > 0


def test_gradient_suite_fd_vs_analytic_float64():
    t0 = time.monotonic()
    torch.manual_seed(0)

    # (a) the projector weights under a random linear functional of its output
    proj = TokenProjector(MixerConfig(n=6, n_hat=3, d=4, d_hat=5)).double()
    x = torch.randn(6, 4, dtype=torch.float64)
    probe = torch.randn(3, 5, dtype=torch.float64)
    _fd_check(proj, lambda: (proj(x) * probe).sum())

    # (b) the mask-decoder weights through a two-slice decode that exercises
    # the trunk, prompt encoder, two-way attention, and the memory pathway
    dec_cfg = SegDecoderConfig(
        d_model=8, n_heads=2, trunk_channels=4, two_way_layers=1, mem_hw=2, z_window=2
    )
    dec = SegDecoder(dec_cfg).double()
    s0, s1 = torch.rand(8, 8, dtype=torch.float64), torch.rand(8, 8, dtype=torch.float64)
    probe0 = torch.randn(8, 8, dtype=torch.float64)
    probe1 = torch.randn(8, 8, dtype=torch.float64)
    prompts = PromptSet(
        points=[PromptPoint(z=0, y=3.0, x=4.0)],
        boxes=[PromptBox(z=0, y_min=1.0, x_min=1.0, y_max=6.0, x_max=6.0)],
        seg_embedding=torch.randn(8, dtype=torch.float64),
    )

    def decoder_loss():
        feats0, feats1 = dec.compute_features(s0), dec.compute_features(s1)
        sparse = dec.prompt_encoder(prompts, (8, 8))
        bank = MemoryBank(2)
        out0 = dec.decode_slice(feats0, sparse, bank, z=0, semantic=prompts.seg_embedding)
        bank.add(dec.encode_memory(feats0, out0.logits, 0))
        out1 = dec.decode_slice(feats1, None, bank, z=1, semantic=prompts.seg_embedding)
        return (out0.logits * probe0).sum() + (out1.logits * probe1).sum()

    _fd_check(dec, decoder_loss, picks_per_tensor=3)

    # (c) a LoRA adapter, reached only through the segmentation-token hidden
    # state under the mask loss (no text supervision in the loss at all)
    cfg = Config(
        data=DataConfig(shape=(4, 16, 16)),
        encoder=EncoderConfig((4, 16, 16), (2, 4, 4), embed_dim=12, depth=1, heads=2),
        mixer=MixerConfig(n=32, n_hat=8, d=12, d_hat=16),
        lm=LMConfig(vocab_size=0, d_model=16, n_layers=1, n_heads=2, max_seq=64),
        segdec=SegDecoderConfig(
            d_model=8, n_heads=2, trunk_channels=4, two_way_layers=1, mem_hw=2, z_window=2
        ),
    )
    vocab = build_vocabulary([])
    model = build_model(cfg, vocab).double()

    rng = np.random.default_rng(21)
    with torch.no_grad():
        for name, p in model.lm.named_parameters():
            if "lora_B" in name:
                p.copy_(torch.from_numpy(0.1 * rng.standard_normal(tuple(p.shape))))

    vol = Volume3D(
        shape=(4, 16, 16),
        spacing=(1.0, 1.0, 1.0),
        voxels=rng.random((4, 16, 16), dtype=np.float32),
        intensity_unit="normalized",
    )
    labels = np.zeros((4, 16, 16), dtype=np.int64)
    labels[1:3, 4:10, 5:12] = 1
    gt = MaskVolume(shape=(4, 16, 16), labels=labels, class_names={1: "liver"}).binary(1)
    prompt_ids = vocab.encode("segment the liver .")
    answer_ids = vocab.encode("[SEG]")
    weights = LossWeights()

    def mask_loss():
        t_v = model.visual_tokens(vol)
        seq = assemble_multimodal_sequence(
            t_v, prompt_ids, vocab, answer_ids=answer_ids, max_seq=model.lm.cfg.max_seq
        )
        _, hidden = model.lm.forward_teacher_forced(seq)
        pos = seg_positions(seq, vocab.seg_id)[0]
        embedding = model.semantic_prompt(hidden[pos])
        _, slice_logits = propagate_volume(
            vol, PromptSet(seg_embedding=embedding), model.seg_decoder
        )
        logits3d = torch.stack([s.logits for s in slice_logits], dim=0)
        l_ce, l_dice = loss_mask_composite(logits3d, gt, weights)
        return l_ce + weights.lambda_dice * l_dice

    _fd_check(
        model.lm,
        mask_loss,
        picks_per_tensor=3,
        only=lambda name: "blocks.0.attn.q" in name and "lora" in name,
    )

    assert time.monotonic() - t0 < 300.0


# --- 4. stage freeze audit -------------------------------------------------


def _group_hashes(model) -> dict[str, str]:
    digests = {}
    for name, params in model.parameter_groups().items():
        h = hashlib.sha256()
        for p in params:
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        digests[name] = h.hexdigest()
    return digests


def test_freeze_audit_is_bit_exact_over_50_step_runs():
    cfg = Config()
    corpus = make_corpus(4, "mixed", seed=600)
    bank = load_template_bank()
    model = build_model(cfg, build_vocabulary(corpus, bank))

    def fifty_steps(stage, prior):
        stage_cfg = StageConfig(stage=stage, steps=50, lr=1e-3)
        run_stage(
            model, stage_cfg, corpus, cfg.weights, cfg.interaction, bank,
            seed=7, prior_stage=prior,
        )

    before = _group_hashes(model)
    fifty_steps(1, None)
    after1 = _group_hashes(model)
    for frozen in ("vision_encoder", "lm_base", "lora", "seg_decoder"):
        assert after1[frozen] == before[frozen], f"stage 1 modified {frozen}"
    assert after1["projector"] != before["projector"]

    fifty_steps(2, prior=1)
    after2 = _group_hashes(model)
    assert after2["seg_decoder"] == after1["seg_decoder"], "stage 2 modified seg_decoder"
    assert after2["lm_base"] == after1["lm_base"], "stage 2 modified the base LM"
    assert after2["lora"] != after1["lora"]

    fifty_steps(3, prior=2)
    after3 = _group_hashes(model)
    assert after3["lm_base"] == after2["lm_base"], "stage 3 modified the base LM"
    assert after3["seg_decoder"] != after2["seg_decoder"]


# --- 5. joint loss composition ---------------------------------------------


def test_joint_loss_composition_under_default_weights():
    w = LossWeights()
    assert (w.lambda_text, w.lambda_mask, w.lambda_dice) == (0.5, 2.0, 1.0)
    rng = np.random.default_rng(11)
    for _ in range(100):
        l_text, l_ce, l_dice = rng.uniform(0.0, 5.0, size=3)
        expected = 0.5 * l_text + 2.0 * (l_ce + 1.0 * l_dice)
        assert abs(loss_joint(l_text, l_ce, l_dice, w) - expected) < 1e-6

    parts = torch.tensor([0.3, 1.2, 0.7], dtype=torch.float64)
    joint = loss_joint(parts[0], parts[1], parts[2], w)
    assert abs(float(joint) - (0.5 * 0.3 + 2.0 * (1.2 + 0.7))) < 1e-6


# --- 6. overfit grounding --------------------------------------------------


def test_overfit_reaches_dice_and_exact_qa_on_training_corpus(overfit):
    assert sum(s.steps for s in overfit.cfg.stages if s.stage == 3) <= 1500
    assert overfit.elapsed < 1800.0, f"training took {overfit.elapsed:.0f}s"

    qa = evaluate_qa(overfit.model, overfit.corpus, overfit.bank, decode=overfit.cfg.decode)
    assert qa.aggregate["accuracy"] == 100.0, qa.aggregate

    seg = evaluate_segmentation(
        overfit.model, overfit.corpus, "semantic",
        bank=overfit.bank, decode=overfit.cfg.decode,
    )
    assert seg.aggregate["dice"] >= 0.90, seg.aggregate


# --- 7. interactive prompting beats text-only referring --------------------


def test_box_prompts_beat_referring_text_on_held_out_volumes(overfit):
    small = make_corpus(16, "small_structure", seed=7000)
    large = make_corpus(16, "large_organ", seed=7100)

    def mean_dice(records, mode):
        values = [
            evaluate_segmentation(
                overfit.model, records, mode,
                interaction=overfit.cfg.interaction,
                bank=overfit.bank, decode=overfit.cfg.decode,
                prompt_seed=seed,
            ).aggregate["dice"]
            for seed in (0, 1, 2)
        ]
        return float(np.mean(values))

    bbox_small = mean_dice(small, "bbox")
    ref_small = mean_dice(small, "referring")
    bbox_large = mean_dice(large, "bbox")
    ref_large = mean_dice(large, "referring")

    assert bbox_small >= ref_small, (bbox_small, ref_small)
    small_gap = bbox_small - ref_small
    large_gap = bbox_large - ref_large
    assert large_gap < small_gap, (large_gap, small_gap)


# --- 8. prompt simulator audit ---------------------------------------------


def test_prompt_simulator_contract_over_ten_thousand_draws():
    labels = np.zeros((8, 64, 64), dtype=np.int64)
    labels[2:6, 20:36, 24:44] = 1
    mask = MaskVolume(shape=(8, 64, 64), labels=labels, class_names={1: "region"})
    binary = labels > 0
    cfg = InteractionProtocolConfig()
    assert cfg.jitter_frac == 0.05

    y0, y1, x0, x1 = 20.0, 35.0, 24.0, 43.0  # tight per-slice box of the region
    height, width = y1 - y0, x1 - x0

    rng = np.random.default_rng(0)
    for _ in range(10_000):
        points = sample_point_prompts(mask, 1, cfg, rng)
        assert len(points) == cfg.n_points
        for p in points:
            assert binary[p.z, int(p.y), int(p.x)], "point fell outside the region"

    rng = np.random.default_rng(1)
    tol = 1e-9
    for _ in range(10_000):
        box = sample_box_prompt(mask, 1, cfg, rng)
        assert 2 <= box.z <= 5
        assert box.y_min < box.y_max and box.x_min < box.x_max
        assert abs(box.y_min - y0) <= cfg.jitter_frac * height + tol
        assert abs(box.y_max - y1) <= cfg.jitter_frac * height + tol
        assert abs(box.x_min - x0) <= cfg.jitter_frac * width + tol
        assert abs(box.x_max - x1) <= cfg.jitter_frac * width + tol

    # identical seeds must reproduce identical draws
    first = [sample_box_prompt(mask, 1, cfg, np.random.default_rng(42)) for _ in range(3)]
    second = [sample_box_prompt(mask, 1, cfg, np.random.default_rng(42)) for _ in range(3)]
    assert first == second


# --- 9. metric golden file -------------------------------------------------


def test_metric_values_match_golden_file_to_four_decimals():
    cases = json.loads(GOLDEN_PATH.read_text())
    assert len(cases) >= 10
    for case in cases:
        metric = case["metric"]
        if metric == "bleu1":
            got = bleu1(case["candidate"], case["references"])
        elif metric == "rouge_l":
            got = rouge_l(case["candidate"], case["reference"])
        elif metric == "cider":
            got = cider(case["candidates"], case["references"])[case["index"]]
        elif metric == "dice":
            got = dice_coefficient(np.array(case["pred"]), np.array(case["gt"]))
        elif metric == "accuracy_mc":
            got = accuracy_mc(case["predictions"], case["gold"])
        else:
            raise AssertionError(f"unknown metric {metric!r} in golden file")
        assert round(got, 4) == round(case["expected"], 4), case["id"]


# --- 10. the memory bank matters -------------------------------------------


def test_memory_conditioning_changes_slice_logits():
    torch.manual_seed(3)
    dec = SegDecoder(SegDecoderConfig())
    embedding = torch.randn(dec.cfg.d_model)
    s0, s1 = torch.rand(32, 32), torch.rand(32, 32)
    with torch.no_grad():
        feats0, feats1 = dec.compute_features(s0), dec.compute_features(s1)
        sparse = dec.prompt_encoder(PromptSet(seg_embedding=embedding), (32, 32))
        empty = dec.decode_slice(feats1, sparse, MemoryBank(4), z=1).logits
        bank = MemoryBank(4)
        prior = dec.decode_slice(feats0, sparse, bank, z=0)
        bank.add(dec.encode_memory(feats0, prior.logits, 0))
        conditioned = dec.decode_slice(feats1, sparse, bank, z=1).logits
    assert float((conditioned - empty).abs().max()) > 1e-3


def _slice_centroids(volume_mask: np.ndarray) -> dict[int, np.ndarray]:
    out = {}
    for z in range(volume_mask.shape[0]):
        coords = np.argwhere(volume_mask[z])
        if coords.size:
            out[z] = coords.mean(axis=0)
    return out


def test_tube_centroid_trajectory_is_continuous_on_overfit_model(overfit):
    tube_records = [
        r for r in overfit.corpus if "vessel" in r.masks.class_names.values()
    ]
    assert tube_records, "training corpus holds no tubular structures"

    checked_pairs = 0
    for record in tube_records:
        label = label_for_class(record.masks, "vessel")
        truth = record.masks.binary(label)
        instruction, _ = render_instruction(
            "semantic_seg", record, class_name="vessel",
            bank=overfit.bank, rng=np.random.default_rng(0),
        )
        result = overfit.model.segment(
            record.volume, instruction, decode=overfit.cfg.decode
        )
        pred = result.mask.labels > 0

        true_c = _slice_centroids(truth)
        pred_c = _slice_centroids(pred)
        true_shifts = [
            float(np.linalg.norm(true_c[z + 1] - true_c[z]))
            for z in true_c
            if z + 1 in true_c
        ]
        # the tube drifts laterally slice to slice; twice its largest true
        # per-slice shift bounds any admissible predicted jump
        bound = 2.0 * max(true_shifts)
        for z in pred_c:
            if z + 1 not in pred_c or z not in true_c or z + 1 not in true_c:
                continue
            jump = float(np.linalg.norm(pred_c[z + 1] - pred_c[z]))
            assert jump <= bound, f"slice {z}->{z + 1}: jump {jump:.2f} > bound {bound:.2f}"
            checked_pairs += 1
    assert checked_pairs > 0
