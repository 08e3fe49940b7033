"""Command-line surface: generate, train, tune, refine-targets, eval, ablate."""

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import evaluate, flowio, sprites, trainer
from .config import ConfigError, ExperimentConfig
from .nets import build_aux_provider, build_model
from .tuner import select_object_channel, sweep_num_channels


def _cmd_generate(args):
    with open(args.spec) as f:
        spec = json.load(f)
    seed = args.seed if args.seed is not None else spec.get("seed", 0)
    T = spec.get("T", 8)
    h = spec.get("h", 64)
    w = spec.get("w", 64)
    if "sprites" in spec:
        clips = [
            sprites.generate_clip(sprites.SpriteSpec(**s), T=T, h=h, w=w,
                                  seed=seed + i, name=f"custom_{i:03d}")
            for i, s in enumerate(spec["sprites"])
        ]
    else:
        clips = sprites.make_dataset(spec.get("kind", "rigid"),
                                     n_clips=spec.get("n_clips", 24),
                                     T=T, h=h, w=w, seed=seed,
                                     **spec.get("overrides", {}))
    flowio.save_dataset(clips, args.out)
    print(f"wrote {len(clips)} clips to {args.out}")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "data", None):
        cfg = cfg.replace(dataset=args.data)
    return cfg


def _clips_for(cfg_or_path):
    path = cfg_or_path.dataset if isinstance(cfg_or_path, ExperimentConfig) else cfg_or_path
    if not path:
        raise ConfigError("no dataset path configured")
    return flowio.load_dataset(path)


def _cmd_train(args):
    cfg = _load_config(args)
    clips = _clips_for(cfg)
    workdir = cfg.workdir or os.path.dirname(os.path.abspath(args.config))
    cfg = cfg.replace(workdir=workdir)

    state = None
    if args.resume:
        state = trainer.load_checkpoint(args.resume)
        state.config = state.config.replace(workdir=workdir)

    if args.stage in ("1", "all"):
        state = trainer.train_stage1(cfg, clips, resume=state)
        path = os.path.join(workdir, "stage1.pt")
        trainer.save_checkpoint(state, path)
        print(f"stage 1 done at iteration {state.iteration}; checkpoint: {path}")

    if args.stage in ("2", "all"):
        if state is None:
            raise ConfigError("stage 2 needs --resume with a stage-1 checkpoint")
        if state.object_channel is None:
            if args.stage != "all":
                raise ConfigError("object channel not set: run `motionseg tune` first")
            provider = build_aux_provider(cfg.aux_provider, cfg.aux_window)
            report = select_object_channel(state.model, clips, provider,
                                           first_frame_only=cfg.tuner_first_frame_only)
            state.object_channel = report.selected_channel
            print(f"tuned object channel: {state.object_channel}")
        targets = trainer.build_refinement_targets(
            state, clips, cache_dir=os.path.join(workdir, "refined_targets"))
        state = trainer.train_stage2(state, clips, targets)
        path = os.path.join(workdir, "stage2.pt")
        trainer.save_checkpoint(state, path)
        print(f"stage 2 done; checkpoint: {path}")


def _cmd_tune(args):
    state = trainer.load_checkpoint(args.ckpt)
    cfg = state.config
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    clips = _clips_for(args.data)
    provider = build_aux_provider(cfg.aux_provider, cfg.aux_window)

    if args.sweep_channels:
        candidates = [int(c) for c in args.sweep_channels.split(",")]

        def train_fn(C):
            sweep_cfg = cfg.replace(num_channels=C, workdir="")
            return trainer.train_stage1(sweep_cfg, clips).model

        rows, best = sweep_num_channels(candidates, train_fn, clips, provider,
                                        first_frame_only=args.first_frame_only)
        print(f"{'C':>3}  {'best-channel':>12}  {'alignment':>9}  status")
        for r in rows:
            score = "-" if r["score"] is None else f"{r['score']:.4f}"
            chan = "-" if r["channel"] is None else str(r["channel"])
            print(f"{r['num_channels']:>3}  {chan:>12}  {score:>9}  {r['status']}")
        print(f"recommended number of channels: {best}")
        if args.report:
            with open(args.report, "w") as f:
                json.dump({"rows": rows, "recommended": best}, f, indent=1, sort_keys=True)
        return

    report = select_object_channel(state.model, clips, provider,
                                   first_frame_only=args.first_frame_only)
    print(report.to_text())
    state.object_channel = report.selected_channel
    trainer.save_checkpoint(state, args.ckpt)
    print(f"object channel {report.selected_channel} written to {args.ckpt}")
    if args.report:
        report.save(args.report)


def _cmd_refine_targets(args):
    state = trainer.load_checkpoint(args.ckpt)
    clips = _clips_for(args.data)
    cache_dir = args.out or os.path.join(args.data, "refined_targets")
    use_constraint = state.config.semantic_constraint and not args.no_semantic_constraint
    targets = trainer.build_refinement_targets(state, clips, cache_dir=cache_dir,
                                               use_constraint=use_constraint)
    src = "cache" if targets.from_cache else "fresh pass"
    print(f"targets for {len(targets.maps)} clips ({src}) -> "
          f"{os.path.join(cache_dir, targets.cache_name())}")


def _cmd_eval(args):
    state = trainer.load_checkpoint(args.ckpt)
    cfg = state.config
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    trainer.setup_determinism(cfg)
    clips = _clips_for(args.data)
    if state.object_channel is None:
        raise ConfigError("object channel not set: run `motionseg tune` first")
    flags = {"post_crf": bool(args.post_crf), "residual": cfg.residual,
             "feature_merging": cfg.feature_merging,
             "semantic_constraint": cfg.semantic_constraint, "stage": state.stage}
    report = evaluate.evaluate_model(state.model, clips, state.object_channel,
                                     crf_params=cfg.crf, use_post_crf=args.post_crf,
                                     threshold=cfg.binarize_threshold,
                                     config_hash=cfg.hash(), flags=flags)
    print(report.to_text())
    if args.report:
        report.save(args.report)
    if args.strict:
        failures = evaluate.check_report_invariants(report, clips)
        if failures:
            print("strict-mode failures:", *failures, sep="\n  ", file=sys.stderr)
            sys.exit(1)


AXES = ("residual", "merging", "refinement", "constraint", "postcrf")


def _train_eval_once(cfg, clips, with_stage2=False, use_constraint=None,
                     use_post_crf=False):
    state = trainer.train_stage1(cfg, clips)
    provider = build_aux_provider(cfg.aux_provider, cfg.aux_window)
    report = select_object_channel(state.model, clips, provider,
                                   first_frame_only=cfg.tuner_first_frame_only)
    state.object_channel = report.selected_channel
    if with_stage2:
        targets = trainer.build_refinement_targets(state, clips,
                                                   use_constraint=use_constraint)
        state = trainer.train_stage2(state, clips, targets)
    ev = evaluate.evaluate_model(state.model, clips, state.object_channel,
                                 crf_params=cfg.crf, use_post_crf=use_post_crf,
                                 threshold=cfg.binarize_threshold)
    return state, ev.frame_avg


def run_ablation(cfg: ExperimentConfig, clips, axis: str, seeds=(0,)):
    """Train/evaluate the arms of one ablation axis; returns result rows."""
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; options: {AXES}")
    rows = []
    for seed in seeds:
        base = cfg.replace(seed=seed, workdir="")
        if axis == "residual":
            for variant in ("pixelwise", "scaling", "affine", "none"):
                _, j = _train_eval_once(base.replace(residual=variant), clips)
                rows.append({"arm": variant, "seed": seed, "jaccard": j})
        elif axis == "merging":
            for flag in (True, False):
                _, j = _train_eval_once(base.replace(feature_merging=flag), clips)
                rows.append({"arm": f"merging={flag}", "seed": seed, "jaccard": j})
        elif axis == "refinement":
            for stage2 in (False, True):
                _, j = _train_eval_once(base, clips, with_stage2=stage2)
                rows.append({"arm": "stage1+2" if stage2 else "stage1", "seed": seed,
                             "jaccard": j})
        elif axis == "constraint":
            for constraint in (False, True):
                _, j = _train_eval_once(base, clips, with_stage2=True,
                                        use_constraint=constraint)
                arm = "crf+constraint" if constraint else "crf-only"
                rows.append({"arm": arm, "seed": seed, "jaccard": j})
        else:  # postcrf: 2x2 table over stages and post-processing
            for stage2 in (False, True):
                for pc in (False, True):
                    _, j = _train_eval_once(base, clips, with_stage2=stage2,
                                            use_post_crf=pc)
                    arm = f"{'stage1+2' if stage2 else 'stage1'}/{'crf' if pc else 'plain'}"
                    rows.append({"arm": arm, "seed": seed, "jaccard": j})
    return rows


def _cmd_ablate(args):
    cfg = _load_config(args)
    clips = _clips_for(cfg)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = run_ablation(cfg, clips, args.axis, seeds=seeds)
    print(f"{'arm':<20} {'seed':>4}  J")
    for r in rows:
        print(f"{r['arm']:<20} {r['seed']:>4}  {r['jaccard']:.4f}")
    if args.report:
        with open(args.report, "w") as f:
            json.dump(rows, f, indent=1, sort_keys=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motionseg",
                                     description="motion-supervised video object segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic clip dataset")
    p.add_argument("--spec", required=True, help="JSON dataset spec")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("train", help="run training stages")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", choices=["1", "2", "all"], default="all")
    p.add_argument("--resume", default=None)
    p.add_argument("--data", default=None, help="override the config dataset path")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("tune", help="select the object channel / sweep channel counts")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sweep-channels", default=None, help="e.g. 2,3,4,5")
    p.add_argument("--first-frame-only", action="store_true")
    p.add_argument("--report", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_tune)

    p = sub.add_parser("refine-targets", help="build the frozen stage-2 supervision maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--no-semantic-constraint", action="store_true")
    p.add_argument("--out", default=None, help="cache directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_refine_targets)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--post-crf", action="store_true")
    p.add_argument("--report", default=None)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--seeds", default="0")
    p.add_argument("--report", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_ablate)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.fn(args)


if __name__ == "__main__":
    main()
