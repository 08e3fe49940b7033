"""Jaccard evaluation at image resolution, binarization and the optional
CRF post-processing pass, plus report assembly."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .crf import CrfParams, crf_refine
from .flowio import bilinear_resize


def binarize(probs, object_channel, tie_foreground=True) -> np.ndarray:
    """Foreground where the object channel attains the per-pixel argmax.

    Ties go to the foreground by default (configurable).
    """
    probs = np.asarray(probs)
    top = probs.max(axis=0)
    if tie_foreground:
        return probs[object_channel] >= top
    return probs[object_channel] > top


def jaccard(pred, gt) -> float:
    """Intersection over union. Both masks empty counts as perfect
    agreement (1); exactly one empty counts as total miss (0)."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    union = (pred | gt).sum()
    if union == 0:
        return 1.0
    return float((pred & gt).sum() / union)


def post_crf(prob, image, params: CrfParams = None, enabled=True,
             threshold=0.5) -> np.ndarray:
    """Upsample the object-channel probability to image resolution, run one
    dense-CRF pass (skipped when disabled), and threshold."""
    image = np.asarray(image)
    h, w = image.shape[-2:]
    up = np.asarray(prob, dtype=np.float64)
    if up.shape != (h, w):
        up = bilinear_resize(up.astype(np.float32), (h, w)).astype(np.float64)
    up = np.clip(up, 0.0, 1.0)
    if enabled:
        up = crf_refine(up, image, params or CrfParams())
    return up >= threshold


@dataclass
class EvalReport:
    per_sequence: list  # (name, mean J) pairs
    frame_avg: float
    num_frames: int
    config_hash: str = ""
    flags: dict = field(default_factory=dict)

    def to_text(self) -> str:
        width = max([len(n) for n, _ in self.per_sequence] + [9])
        lines = [f"{'sequence':<{width}}  J"]
        for name, j in self.per_sequence:
            lines.append(f"{name:<{width}}  {j:.4f}")
        lines.append(f"{'Frame Avg':<{width}}  {self.frame_avg:.4f}")
        if self.config_hash:
            lines.append(f"config: {self.config_hash}  flags: {json.dumps(self.flags, sort_keys=True)}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")


def evaluate_model(model, clips, object_channel, crf_params: CrfParams = None,
                   use_post_crf=False, threshold=0.5, config_hash="",
                   flags=None) -> EvalReport:
    """Frame-by-frame Jaccard against ground truth at image resolution."""
    per_seq = []
    all_scores = []
    for clip in clips:
        if clip.gt_masks is None:
            raise ValueError(f"clip {clip.name} has no ground-truth masks")
        scores = []
        for t in range(clip.num_frames):
            frame = clip.frames[t]
            probs = model.predict_masks(frame)
            pred = post_crf(probs[object_channel], frame, crf_params,
                            enabled=use_post_crf, threshold=threshold)
            scores.append(jaccard(pred, clip.gt_masks[t]))
        per_seq.append((clip.name, float(np.mean(scores))))
        all_scores.extend(scores)
    return EvalReport(per_sequence=per_seq, frame_avg=float(np.mean(all_scores)),
                      num_frames=len(all_scores), config_hash=config_hash,
                      flags=dict(flags or {}))


def check_report_invariants(report: EvalReport, clips) -> list:
    """Structural checks used by --strict mode; returns failure strings."""
    failures = []
    lengths = {c.name: c.num_frames for c in clips}
    total = sum(lengths[name] for name, _ in report.per_sequence)
    if total != report.num_frames:
        failures.append(f"frame count mismatch: {total} != {report.num_frames}")
    weighted = sum(j * lengths[name] for name, j in report.per_sequence)
    if abs(weighted / max(total, 1) - report.frame_avg) > 1e-9:
        failures.append("frame average does not equal the mean over all frames")
    return failures
