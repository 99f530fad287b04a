"""Command-line entry points: gen-data, train, eval, serve.

Every subcommand takes ``--config`` (JSON path, falling back to the
``VOXELGROUNDER_CONFIG`` environment variable, then to built-in toy defaults)
and ``--seed``. Training writes one checkpoint directory per stage and
refuses to run a stage whose predecessor has not completed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .archive import load_corpus, save_corpus
from .config import Config, load_config
from .errors import ScheduleError, VoxelGrounderError
from .evaluate import (
    SEG_MODES,
    evaluate_qa,
    evaluate_reports,
    evaluate_segmentation,
)
from .phantoms import PhantomSpec, Structure, generate_phantom, make_corpus
from .training import (
    build_model,
    build_vocabulary,
    load_checkpoint,
    load_checkpoint_vocab,
    run_stage,
    save_checkpoint,
)


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", default=None, help="path to a JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")


def _load(args) -> Config:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _specs_from_file(path: Path) -> list[PhantomSpec]:
    data = json.loads(path.read_text())
    specs = []
    for entry in data["phantoms"]:
        structures = [
            Structure(
                kind=s["kind"],
                center=tuple(s["center"]),
                size=tuple(s["size"]) if isinstance(s["size"], list) else float(s["size"]),
                intensity=float(s["intensity"]),
                class_name=s["class_name"],
                drift=tuple(s.get("drift", (0.0, 0.0))),
            )
            for s in entry["structures"]
        ]
        specs.append(
            PhantomSpec(
                seed=int(entry["seed"]),
                structures=structures,
                noise_sigma=float(entry.get("noise_sigma", 15.0)),
                difficulty=entry.get("difficulty", "large_organ"),
                shape=tuple(entry.get("shape", (16, 64, 64))),
            )
        )
    return specs


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    out = Path(args.out or cfg.data.dir)
    if args.spec_file:
        records = [generate_phantom(s) for s in _specs_from_file(Path(args.spec_file))]
        save_corpus(records, out)
        print(f"wrote {len(records)} phantoms from spec file to {out}")
        return 0
    train = make_corpus(
        cfg.data.n_train, cfg.data.difficulty, cfg.data.seed, cfg.data.shape, cfg.data.noise_sigma
    )
    evalset = make_corpus(
        cfg.data.n_eval, cfg.data.difficulty, cfg.data.eval_seed, cfg.data.shape,
        cfg.data.noise_sigma,
    )
    save_corpus(train, out / "train")
    save_corpus(evalset, out / "eval")
    print(f"wrote {len(train)} train + {len(evalset)} eval phantoms to {out}")
    return 0


def _stage_dir(cfg: Config, stage: int) -> Path:
    return Path(cfg.checkpoint_dir) / f"stage{stage}"


def _load_model_for_inference(cfg: Config, checkpoint: str | None):
    path = Path(checkpoint) if checkpoint else None
    if path is None:
        for stage in (3, 2, 1):
            candidate = _stage_dir(cfg, stage)
            if (candidate / "meta.json").exists():
                path = candidate
                break
    if path is None:
        raise ScheduleError("no checkpoint found; run training first or pass --checkpoint")
    vocab = load_checkpoint_vocab(path)
    model = build_model(cfg, vocab)
    meta = load_checkpoint(model, path, expected_fingerprint=cfg.fingerprint())
    return model, meta


def cmd_train(args) -> int:
    cfg = _load(args)
    data_dir = Path(args.data or cfg.data.dir) / "train"
    corpus = load_corpus(data_dir)
    stage_cfg = cfg.stage(args.stage)
    if args.steps is not None:
        stage_cfg.steps = args.steps

    if args.stage == 1:
        vocab = build_vocabulary(corpus)
        model = build_model(cfg, vocab)
        prior = None
    else:
        prior_dir = _stage_dir(cfg, args.stage - 1)
        if not (prior_dir / "meta.json").exists():
            raise ScheduleError(
                f"stage {args.stage} requires a completed stage-{args.stage - 1} checkpoint "
                f"at {prior_dir}"
            )
        vocab = load_checkpoint_vocab(prior_dir)
        model = build_model(cfg, vocab)
        meta = load_checkpoint(model, prior_dir, expected_fingerprint=cfg.fingerprint())
        prior = int(meta["stage"])

    def progress(entry):
        if entry["step"] % 25 == 0:
            print(f"stage {args.stage} step {entry['step']}: loss {entry['loss']:.4f}")

    log = run_stage(
        model, stage_cfg, corpus, cfg.weights, cfg.interaction,
        seed=cfg.seed + args.stage, prior_stage=prior, log_hook=progress,
    )
    out = _stage_dir(cfg, args.stage)
    save_checkpoint(model, out, cfg.fingerprint(), stage=args.stage, step=stage_cfg.steps)
    log.to_json(out / "train_log.json")
    print(f"stage {args.stage} done ({stage_cfg.steps} steps); checkpoint at {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    model, _ = _load_model_for_inference(cfg, args.checkpoint)
    records = load_corpus(Path(args.data or cfg.data.dir) / args.split)
    if args.task == "report":
        report = evaluate_reports(model, records, decode=cfg.decode, seed=cfg.seed)
    elif args.task == "vqa":
        report = evaluate_qa(model, records, decode=cfg.decode, seed=cfg.seed)
    else:
        report = evaluate_segmentation(
            model, records, args.mode, interaction=cfg.interaction,
            decode=cfg.decode, prompt_seed=cfg.seed,
        )
    out = Path(args.out or f"metrics_{args.task}_{args.mode or 'text'}.json")
    report.to_json(out)
    print(f"wrote {out}")
    for name, value in sorted(report.aggregate.items()):
        print(f"  {name}: {value:.4f}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    cfg = _load(args)
    model, _ = _load_model_for_inference(cfg, args.checkpoint)
    app = create_app(
        model,
        fingerprint=cfg.fingerprint(),
        store_dir=args.store or cfg.service.volume_store,
        decode=cfg.decode,
        window=cfg.window,
    )
    if args.data:
        for record in load_corpus(Path(args.data)):
            app.state.store.add_record(record)
    uvicorn.run(app, host=cfg.service.host, port=args.port or cfg.service.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxelgrounder")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom corpus")
    _add_common(p)
    p.add_argument("--out", default=None, help="output directory (default: config data dir)")
    p.add_argument("--spec-file", default=None, help="JSON file of explicit phantom specs")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    _add_common(p)
    p.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--data", default=None, help="corpus root (expects a train/ subdirectory)")
    p.add_argument("--steps", type=int, default=None, help="override the configured step count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, writing a metric report")
    _add_common(p)
    p.add_argument("--task", required=True, choices=("report", "vqa", "seg"))
    p.add_argument("--mode", default=None, choices=SEG_MODES,
                   help="prompting mode (seg task only)")
    p.add_argument("--data", default=None)
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", default=None, help="metric report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="start the HTTP service")
    _add_common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--store", default=None, help="volume store directory")
    p.add_argument("--data", default=None, help="preload a corpus directory into the store")
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval" and args.task == "seg" and args.mode is None:
        parser.error("eval --task seg requires --mode")
    try:
        return args.func(args)
    except VoxelGrounderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
