"""Annotation-free channel and channel-count selection.

Scores each mask channel by the IoU between its (argmax-binarized)
prediction and its own semantic response from frozen features; the
channel with the highest mean IoU across frames is the object channel.
Channel indices are 0-based throughout.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .appearance import DEFAULT_TAU, GUARD_HEIGHT_FRAC, GUARD_WIDTH_FRAC, matches_background
from .motion import guided_pool
from .nets import cosine_map


@dataclass
class AlignmentReport:
    per_channel_mean_iou: list
    frames_used: list
    selected_channel: int
    num_channels: int

    def to_text(self) -> str:
        lines = ["channel  alignment-IoU"]
        for c, v in enumerate(self.per_channel_mean_iou):
            tag = "  <- selected" if c == self.selected_channel else ""
            lines.append(f"{c:>7d}  {v:.4f}{tag}")
        lines.append(f"frames used: {len(self.frames_used)}")
        return "\n".join(lines)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=1, sort_keys=True)


def semantic_response(soft_mask, aux_feats, tau=DEFAULT_TAU,
                      width_frac=GUARD_WIDTH_FRAC, height_frac=GUARD_HEIGHT_FRAC,
                      eps=1e-6):
    """Thresholded cosine map against the mask-pooled feature (no dilation).

    Returns (response bool (H, W), discarded) where discarded marks a
    response whose extent triggers the background-match rule or a mask
    that pooled to nothing.
    """
    soft_mask = np.asarray(soft_mask, dtype=np.float64)
    if soft_mask.sum() <= eps:
        return np.zeros(soft_mask.shape, dtype=bool), True
    query = guided_pool(np.asarray(aux_feats, dtype=np.float64), soft_mask)
    response = cosine_map(aux_feats, query) >= tau
    return response, matches_background(response, width_frac, height_frac)


def alignment_iou(mask, response) -> float:
    """Set IoU of two binary maps; an empty union scores 0."""
    mask = np.asarray(mask, dtype=bool)
    response = np.asarray(response, dtype=bool)
    union = (mask | response).sum()
    if union == 0:
        return 0.0
    return float((mask & response).sum() / union)


def select_object_channel(model, clips, aux_provider, first_frame_only=False,
                          tau=DEFAULT_TAU, width_frac=GUARD_WIDTH_FRAC,
                          height_frac=GUARD_HEIGHT_FRAC) -> AlignmentReport:
    """Mean alignment IoU per channel over the chosen frames; the argmax
    (ties to the lowest index) is the object channel."""
    if not clips:
        raise ValueError("no clips given to the channel tuner")
    if aux_provider is None:
        raise ValueError("channel tuning needs a frozen aux feature provider")
    sums = None
    frames_used = []
    for clip in clips:
        times = [0] if first_frame_only else range(clip.num_frames)
        for t in times:
            frame = clip.frames[t]
            masks = model.predict_masks(frame)
            C, H, W = masks.shape
            if sums is None:
                sums = np.zeros(C, dtype=np.float64)
            aux = aux_provider.features_at(frame, (H, W))
            hard = masks.argmax(axis=0)
            for c in range(C):
                response, discarded = semantic_response(masks[c], aux, tau=tau,
                                                        width_frac=width_frac,
                                                        height_frac=height_frac)
                if discarded:
                    continue  # frame scores 0 for this channel
                sums[c] += alignment_iou(hard == c, response)
            frames_used.append(f"{clip.name}:{t}")
    mean_iou = (sums / len(frames_used)).tolist()
    return AlignmentReport(per_channel_mean_iou=mean_iou, frames_used=frames_used,
                           selected_channel=int(np.argmax(mean_iou)),
                           num_channels=len(mean_iou))


def sweep_num_channels(candidates, train_fn, clips, aux_provider,
                       first_frame_only=False):
    """Train one model per channel-count candidate and score its best channel.

    ``train_fn(num_channels)`` must return a trained model. Failed runs are
    recorded with their error, never silently dropped. Returns (rows,
    recommended candidate).
    """
    rows = []
    for C in candidates:
        row = {"num_channels": int(C), "status": "ok", "score": None, "channel": None}
        try:
            model = train_fn(int(C))
            report = select_object_channel(model, clips, aux_provider,
                                           first_frame_only=first_frame_only)
            row["score"] = float(max(report.per_channel_mean_iou))
            row["channel"] = report.selected_channel
        except Exception as exc:  # noqa: BLE001 - failures are part of the report
            row["status"] = f"failed: {exc}"
        rows.append(row)
    scored = [r for r in rows if r["status"] == "ok"]
    if not scored:
        raise RuntimeError("every sweep candidate failed: " + json.dumps(rows))
    best = max(scored, key=lambda r: r["score"])
    return rows, best["num_channels"]
