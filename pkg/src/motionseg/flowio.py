"""Flow and image file I/O plus resolution alignment helpers.

Flow fields are numpy arrays of shape (2, H, W): channel 0 is dx
(columns, positive rightward), channel 1 is dy (rows, positive downward),
both in pixels at the field's own resolution.
"""

import json
import os

import cv2
import numpy as np
from PIL import Image

FLO_MAGIC = 202021.25


class FloFormatError(ValueError):
    """Raised for malformed .flo files (bad magic, truncated payload)."""


def save_flow_file(flow: np.ndarray, path) -> None:
    """Write a (2, H, W) flow field in Middlebury .flo layout."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"expected (2, H, W) flow, got {flow.shape}")
    _, h, w = flow.shape
    with open(path, "wb") as f:
        np.float32(FLO_MAGIC).tofile(f)
        np.int32(w).tofile(f)
        np.int32(h).tofile(f)
        # interleaved (dx, dy) per pixel, row-major
        np.ascontiguousarray(np.moveaxis(flow, 0, -1)).tofile(f)


def load_flow_file(path) -> np.ndarray:
    """Read a Middlebury .flo file into a (2, H, W) float32 array."""
    with open(path, "rb") as f:
        magic = np.fromfile(f, np.float32, count=1)
        if magic.size != 1 or magic[0] != FLO_MAGIC:
            raise FloFormatError(f"{path}: bad magic number {magic!r}")
        dims = np.fromfile(f, np.int32, count=2)
        if dims.size != 2 or (dims <= 0).any():
            raise FloFormatError(f"{path}: bad width/height {dims!r}")
        w, h = int(dims[0]), int(dims[1])
        data = np.fromfile(f, np.float32, count=2 * w * h)
    if data.size != 2 * w * h:
        raise FloFormatError(
            f"{path}: truncated payload, expected {2 * w * h} floats, got {data.size}"
        )
    return np.moveaxis(data.reshape(h, w, 2), -1, 0).copy()


def downsample_flow(flow: np.ndarray, target_hw) -> np.ndarray:
    """Area-average a flow field to (H, W) and rescale displacements.

    dx is multiplied by W/w and dy by H/h so values stay in pixels at the
    target resolution. Source dims must be integer multiples of the target.
    """
    flow = np.asarray(flow, dtype=np.float64)
    _, h, w = flow.shape
    H, W = target_hw
    if H > h or W > w:
        raise ValueError(f"target {H}x{W} exceeds source {h}x{w}")
    if h % H or w % W:
        raise ValueError(f"source {h}x{w} not an integer multiple of target {H}x{W}")
    fy, fx = h // H, w // W
    out = flow.reshape(2, H, fy, W, fx).mean(axis=(2, 4))
    out[0] *= W / w
    out[1] *= H / h
    return out.astype(np.float32)


def area_downsample(image: np.ndarray, target_hw) -> np.ndarray:
    """Area-average a (C, h, w) image to (C, H, W)."""
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape
    H, W = target_hw
    if h % H or w % W:
        raise ValueError(f"source {h}x{w} not an integer multiple of target {H}x{W}")
    fy, fx = h // H, w // W
    return image.reshape(c, H, fy, W, fx).mean(axis=(2, 4)).astype(np.float32)


def bilinear_resize(image: np.ndarray, target_hw) -> np.ndarray:
    """Bilinearly resize a (C, h, w) or (h, w) array (half-pixel centers)."""
    arr = np.asarray(image, dtype=np.float32)
    H, W = target_hw
    if arr.ndim == 2:
        return cv2.resize(arr, (W, H), interpolation=cv2.INTER_LINEAR)
    out = [cv2.resize(arr[i], (W, H), interpolation=cv2.INTER_LINEAR) for i in range(arr.shape[0])]
    return np.stack(out, axis=0)


def save_mask_png(mask: np.ndarray, path) -> None:
    """Write a binary mask as an 8-bit grayscale PNG with values 0/255."""
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def load_mask_png(path) -> np.ndarray:
    """Read an 8-bit grayscale mask PNG into a boolean array."""
    arr = np.asarray(Image.open(path).convert("L"))
    return arr >= 128


def save_frame_png(frame: np.ndarray, path) -> None:
    """Write a (3, h, w) float frame in [0, 1] as an 8-bit RGB PNG."""
    arr = np.asarray(frame)
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(np.moveaxis(u8, 0, -1), mode="RGB").save(path)


def load_frame_png(path) -> np.ndarray:
    """Read an RGB PNG into a (3, h, w) float32 frame in [0, 1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.moveaxis(arr, -1, 0).copy()


def save_clip_dir(clip, out_dir) -> None:
    """Persist a clip as numbered PNG frames, PNG masks and .flo flow files."""
    os.makedirs(out_dir, exist_ok=True)
    T = clip.frames.shape[0]
    for t in range(T):
        save_frame_png(clip.frames[t], os.path.join(out_dir, f"frame_{t:03d}.png"))
        save_mask_png(clip.gt_masks[t], os.path.join(out_dir, f"mask_{t:03d}.png"))
    for t in range(T - 1):
        save_flow_file(clip.gt_flow[t], os.path.join(out_dir, f"flow_fwd_{t:03d}.flo"))
        if clip.gt_flow_bwd is not None:
            save_flow_file(clip.gt_flow_bwd[t], os.path.join(out_dir, f"flow_bwd_{t:03d}.flo"))
    meta = {"name": clip.name, "num_frames": T}
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def load_clip_dir(clip_dir):
    """Load a clip saved by :func:`save_clip_dir`.

    Backward flow files are optional; ``gt_flow_bwd`` is None when absent.
    Masks are optional too (external data may not ship ground truth).
    """
    from .sprites import VideoClip  # local import to avoid a cycle

    frame_paths = sorted(
        f for f in os.listdir(clip_dir) if f.startswith("frame_") and f.endswith(".png")
    )
    if not frame_paths:
        raise FileNotFoundError(f"{clip_dir}: no frame PNGs found")
    frames = np.stack([load_frame_png(os.path.join(clip_dir, p)) for p in frame_paths])
    T = frames.shape[0]

    masks = None
    if os.path.exists(os.path.join(clip_dir, "mask_000.png")):
        masks = np.stack(
            [load_mask_png(os.path.join(clip_dir, f"mask_{t:03d}.png")) for t in range(T)]
        )

    fwd = np.stack(
        [load_flow_file(os.path.join(clip_dir, f"flow_fwd_{t:03d}.flo")) for t in range(T - 1)]
    )
    bwd = None
    if os.path.exists(os.path.join(clip_dir, "flow_bwd_000.flo")):
        bwd = np.stack(
            [load_flow_file(os.path.join(clip_dir, f"flow_bwd_{t:03d}.flo")) for t in range(T - 1)]
        )

    name = os.path.basename(os.path.normpath(clip_dir))
    meta_path = os.path.join(clip_dir, "meta.json")
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            name = json.load(f).get("name", name)
    return VideoClip(name=name, frames=frames, gt_flow=fwd, gt_flow_bwd=bwd, gt_masks=masks)


def save_dataset(clips, out_dir) -> None:
    """Save a list of clips as numbered subdirectories of ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    for i, clip in enumerate(clips):
        save_clip_dir(clip, os.path.join(out_dir, f"clip_{i:03d}"))


def load_dataset(data_dir):
    """Load every clip_* subdirectory of ``data_dir``, sorted by name."""
    sub = sorted(
        d for d in os.listdir(data_dir) if os.path.isdir(os.path.join(data_dir, d))
    )
    clips = [load_clip_dir(os.path.join(data_dir, d)) for d in sub]
    if not clips:
        raise FileNotFoundError(f"{data_dir}: no clip subdirectories found")
    return clips
