"""Two-stage training: motion-supervised discovery, then refinement
against frozen appearance targets. Handles seeding, the polynomial
learning-rate schedule, checkpointing, target caching and loss logs.
"""

import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from . import appearance
from .config import ConfigError, ExperimentConfig
from .flowio import area_downsample, downsample_flow
from .motion import direction_loss, motion_loss
from .nets import build_aux_provider, build_model

CHECKPOINT_FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; the batch is dumped first."""


@dataclass
class TrainState:
    config: ExperimentConfig
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    iteration: int = 0
    stage: str = "stage1"
    loss_history: list = field(default_factory=list)
    rng: np.random.Generator = None
    object_channel: Optional[int] = None


def setup_determinism(cfg: ExperimentConfig):
    torch.manual_seed(cfg.seed)
    if cfg.num_threads > 0:
        torch.set_num_threads(cfg.num_threads)
    if cfg.determinism:
        torch.use_deterministic_algorithms(True)


class PairBatcher:
    """Uniform sampling over all consecutive frame pairs of a clip set,
    with flow targets pre-computed at the mask resolution."""

    def __init__(self, clips, mask_hw, jitter=0.0):
        if not clips:
            raise ValueError("empty dataset")
        self.clips = clips
        self.jitter = jitter
        self.frames = [torch.as_tensor(c.frames, dtype=torch.float32) for c in clips]
        self.fwd = [
            torch.as_tensor(
                np.stack([downsample_flow(c.gt_flow[t], mask_hw)
                          for t in range(c.num_frames - 1)]))
            for c in clips
        ]
        self.has_backward = all(c.gt_flow_bwd is not None for c in clips)
        self.bwd = None
        if self.has_backward:
            self.bwd = [
                torch.as_tensor(
                    np.stack([downsample_flow(c.gt_flow_bwd[t], mask_hw)
                              for t in range(c.num_frames - 1)]))
                for c in clips
            ]
        self.pairs = [(i, t) for i, c in enumerate(clips) for t in range(c.num_frames - 1)]

    def sample(self, rng, batch_size):
        idx = rng.integers(0, len(self.pairs), size=batch_size)
        ft, ft1, fw, bw, keys = [], [], [], [], []
        for k in idx:
            i, t = self.pairs[k]
            a, b = self.frames[i][t], self.frames[i][t + 1]
            if self.jitter > 0.0:
                scale = 1.0 + rng.uniform(-self.jitter, self.jitter)
                shift = rng.uniform(-self.jitter, self.jitter) * 0.5
                a = (a * scale + shift).clamp(0.0, 1.0)
                b = (b * scale + shift).clamp(0.0, 1.0)
            ft.append(a)
            ft1.append(b)
            fw.append(self.fwd[i][t])
            if self.bwd is not None:
                bw.append(self.bwd[i][t])
            keys.append((i, t))
        return (torch.stack(ft), torch.stack(ft1), torch.stack(fw),
                torch.stack(bw) if bw else None, keys)


def poly_lr(cfg, iteration, total, base_lr):
    frac = min(iteration / max(total, 1), 1.0)
    return (base_lr - cfg.min_lr) * (1.0 - frac) ** cfg.lr_power + cfg.min_lr


def _set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def _write_loss_csv(path, history):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss"])
        for i, v in enumerate(history):
            writer.writerow([i, f"{v:.10f}"])


def _dump_diverged(workdir, stage, batch, iteration):
    if not workdir:
        return None
    os.makedirs(workdir, exist_ok=True)
    path = os.path.join(workdir, f"diverged_{stage}_iter{iteration}.npz")
    ft, ft1, fw, bw, keys = batch
    np.savez(path, frames_t=ft.numpy(), frames_t1=ft1.numpy(), flow_fwd=fw.numpy(),
             flow_bwd=bw.numpy() if bw is not None else np.zeros(0),
             pair_keys=np.array(keys), iteration=iteration)
    return path


def smoothed(history, window=50):
    h = np.asarray(history, dtype=np.float64)
    w = min(window, len(h))
    return h[:w].mean(), h[-w:].mean()


def train_stage1(cfg: ExperimentConfig, clips, snapshot_iters=(),
                 resume: TrainState = None) -> TrainState:
    """Motion-supervised training; returns the final state and writes a
    loss log plus optional snapshot checkpoints into cfg.workdir."""
    setup_determinism(cfg)
    if resume is None:
        model = build_model(cfg)
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                                     weight_decay=cfg.weight_decay)
        state = TrainState(config=cfg, model=model, optimizer=optimizer,
                           rng=np.random.default_rng(cfg.seed), stage="stage1")
    else:
        state = resume
    model = state.model
    model.train()

    h, w = clips[0].frames.shape[-2:]
    batcher = PairBatcher(clips, model.mask_resolution(h, w),
                          jitter=cfg.jitter_strength if cfg.photometric_jitter else 0.0)
    snapshot_iters = set(int(s) for s in snapshot_iters)

    while state.iteration < cfg.stage1_iters:
        _set_lr(state.optimizer, poly_lr(cfg, state.iteration, cfg.stage1_iters, cfg.lr))
        batch = batcher.sample(state.rng, cfg.batch_size)
        ft, ft1, fw, bw, _ = batch
        out = model.pair_forward(ft, ft1)
        loss, _ = direction_loss(out["masks_t"], out["stack_fwd"], fw,
                                 model.phi1, model.phi2, model.residual_variant)
        if bw is not None:
            loss_b, _ = direction_loss(out["masks_t1"], out["stack_bwd"], bw,
                                       model.phi1, model.phi2, model.residual_variant)
            loss = loss + loss_b
        if not torch.isfinite(loss):
            path = _dump_diverged(cfg.workdir, "stage1", batch, state.iteration)
            raise TrainingDiverged(
                f"non-finite stage-1 loss at iteration {state.iteration}"
                + (f"; offending batch dumped to {path}" if path else ""))
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
        state.loss_history.append(float(loss.item()))
        state.iteration += 1
        if state.iteration in snapshot_iters and cfg.workdir:
            save_checkpoint(state, os.path.join(cfg.workdir,
                                                f"snapshot_iter{state.iteration}.pt"))

    if cfg.workdir:
        os.makedirs(cfg.workdir, exist_ok=True)
        _write_loss_csv(os.path.join(cfg.workdir, "stage1_loss.csv"), state.loss_history)
    return state


def model_hash(model) -> str:
    sha = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        sha.update(name.encode())
        sha.update(tensor.numpy().tobytes())
    return sha.hexdigest()[:12]


@dataclass
class RefinementTargets:
    """Frozen per-frame supervision maps, keyed by clip name."""

    maps: dict  # name -> (T, H, W) float32
    checkpoint_hash: str
    params_hash: str
    object_channel: int
    from_cache: bool = False

    def hash(self) -> str:
        sha = hashlib.sha256()
        for name in sorted(self.maps):
            sha.update(name.encode())
            sha.update(np.ascontiguousarray(self.maps[name]).tobytes())
        return sha.hexdigest()[:12]

    def cache_name(self) -> str:
        return f"targets_{self.checkpoint_hash}_{self.params_hash}.npz"

    def save(self, cache_dir):
        os.makedirs(cache_dir, exist_ok=True)
        meta = {"checkpoint_hash": self.checkpoint_hash, "params_hash": self.params_hash,
                "object_channel": self.object_channel}
        np.savez(os.path.join(cache_dir, self.cache_name()),
                 _meta=json.dumps(meta), **self.maps)


def _refinement_params_hash(cfg: ExperimentConfig, use_constraint, object_channel) -> str:
    payload = json.dumps({
        "crf": cfg.crf.__dict__, "tau": cfg.semantic_tau, "dilation": cfg.dilation_size,
        "constraint": bool(use_constraint), "guard": [cfg.guard_width_frac, cfg.guard_height_frac],
        "aux": [cfg.aux_provider, cfg.aux_window], "object_channel": object_channel,
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def build_refinement_targets(state: TrainState, clips, cache_dir=None,
                             use_constraint=None) -> RefinementTargets:
    """One refinement pass over every frame; cached by (checkpoint, params)."""
    cfg = state.config
    if use_constraint is None:
        use_constraint = cfg.semantic_constraint
    if state.object_channel is None:
        raise ConfigError("object channel not set: run the channel tuner "
                          "(`motionseg tune`) before building refinement targets")
    c_o = state.object_channel
    ckpt_hash = model_hash(state.model)
    params_hash = _refinement_params_hash(cfg, use_constraint, c_o)

    if cache_dir:
        path = os.path.join(cache_dir, f"targets_{ckpt_hash}_{params_hash}.npz")
        if os.path.exists(path):
            data = np.load(path, allow_pickle=False)
            maps = {k: data[k] for k in data.files if k != "_meta"}
            return RefinementTargets(maps=maps, checkpoint_hash=ckpt_hash,
                                     params_hash=params_hash, object_channel=c_o,
                                     from_cache=True)

    provider = build_aux_provider(cfg.aux_provider, cfg.aux_window) if use_constraint else None
    if use_constraint and provider is None:
        raise ConfigError("semantic constraint enabled but aux_provider is 'none'")

    maps = {}
    for clip in clips:
        per_frame = []
        for t in range(clip.num_frames):
            frame = clip.frames[t]
            masks = state.model.predict_masks(frame)
            H, W = masks.shape[-2:]
            image_small = area_downsample(frame, (H, W))
            aux = provider.features_at(frame, (H, W)) if use_constraint else None
            target, _ = appearance.refine_mask(
                masks[c_o], image_small, aux_feats=aux, crf_params=cfg.crf,
                use_constraint=use_constraint, tau=cfg.semantic_tau,
                dilation_size=cfg.dilation_size, width_frac=cfg.guard_width_frac,
                height_frac=cfg.guard_height_frac)
            per_frame.append(target.astype(np.float32))
        maps[clip.name] = np.stack(per_frame)

    targets = RefinementTargets(maps=maps, checkpoint_hash=ckpt_hash,
                                params_hash=params_hash, object_channel=c_o)
    if cache_dir:
        targets.save(cache_dir)
    return targets


def train_stage2(state: TrainState, clips, targets: RefinementTargets) -> TrainState:
    """Optimize the weighted appearance + motion objective against the
    frozen targets. Target immutability is hash-checked every epoch."""
    cfg = state.config
    if state.object_channel is None:
        state.object_channel = targets.object_channel
    c_o = state.object_channel
    model = state.model
    model.train()

    h, w = clips[0].frames.shape[-2:]
    batcher = PairBatcher(clips, model.mask_resolution(h, w),
                          jitter=cfg.jitter_strength if cfg.photometric_jitter else 0.0)
    target_tensors = [torch.as_tensor(targets.maps[c.name]) for c in clips]
    frozen_hash = targets.hash()
    epoch_iters = max(1, len(batcher.pairs) // cfg.batch_size)

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.stage2_lr,
                                 weight_decay=cfg.weight_decay)
    state.optimizer = optimizer
    state.stage = "stage2"
    rng = np.random.default_rng(cfg.seed + 1000)
    history = []

    for it in range(cfg.stage2_iters):
        if it % epoch_iters == 0 and targets.hash() != frozen_hash:
            raise RuntimeError("refinement targets changed during stage 2")
        batch = batcher.sample(rng, cfg.batch_size)
        ft, ft1, fw, bw, keys = batch
        out = model.pair_forward(ft, ft1)
        l_motion, _ = direction_loss(out["masks_t"], out["stack_fwd"], fw,
                                     model.phi1, model.phi2, model.residual_variant)
        if bw is not None:
            lb, _ = direction_loss(out["masks_t1"], out["stack_bwd"], bw,
                                   model.phi1, model.phi2, model.residual_variant)
            l_motion = l_motion + lb
        tgt_t = torch.stack([target_tensors[i][t] for i, t in keys])
        tgt_t1 = torch.stack([target_tensors[i][t + 1] for i, t in keys])
        l_app = 0.5 * (appearance.appearance_loss(out["masks_t"][:, c_o], tgt_t)
                       + appearance.appearance_loss(out["masks_t1"][:, c_o], tgt_t1))
        loss = appearance.stage2_loss(l_app, l_motion, cfg.w_app, cfg.w_motion)
        if not torch.isfinite(loss):
            path = _dump_diverged(cfg.workdir, "stage2", batch, it)
            raise TrainingDiverged(
                f"non-finite stage-2 loss at iteration {it}"
                + (f"; offending batch dumped to {path}" if path else ""))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history.append(float(loss.item()))

    if targets.hash() != frozen_hash:
        raise RuntimeError("refinement targets changed during stage 2")
    state.loss_history = state.loss_history + history
    state.iteration += cfg.stage2_iters
    if cfg.workdir:
        os.makedirs(cfg.workdir, exist_ok=True)
        _write_loss_csv(os.path.join(cfg.workdir, "stage2_loss.csv"), history)
    return state


def save_checkpoint(state: TrainState, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save({
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "motionseg-checkpoint",
        "config": state.config.to_dict(),
        "config_hash": state.config.hash(),
        "stage": state.stage,
        "iteration": state.iteration,
        "model_state": state.model.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "loss_history": state.loss_history,
        "object_channel": state.object_channel,
        "numpy_rng": json.dumps(state.rng.bit_generator.state) if state.rng is not None else None,
        "torch_rng": torch.get_rng_state(),
    }, path)


def load_checkpoint(path) -> TrainState:
    data = torch.load(path, weights_only=False)
    if data.get("kind") != "motionseg-checkpoint":
        raise ValueError(f"{path} is not a motionseg checkpoint")
    if data["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {data['format_version']}")
    cfg = ExperimentConfig.from_dict(data["config"])
    model = build_model(cfg)
    model.load_state_dict(data["model_state"])
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                                 weight_decay=cfg.weight_decay)
    optimizer.load_state_dict(data["optimizer_state"])
    rng = None
    if data["numpy_rng"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(data["numpy_rng"])
    torch.set_rng_state(data["torch_rng"])
    return TrainState(config=cfg, model=model, optimizer=optimizer,
                      iteration=data["iteration"], stage=data["stage"],
                      loss_history=list(data["loss_history"]), rng=rng,
                      object_channel=data["object_channel"])
