"""Synthetic sprite videos with exact analytic optical flow and masks.

Every moving region (sprite body, attached limb, confounder) moves by an
affine map per frame pair, so the displacement of each rendered pixel is
known in closed form. Flow arrays follow the (dx, dy) channel convention
of :mod:`motionseg.flowio`. Coordinates are pixel centers: pixel (row, col)
sits at (x, y) = (col + 0.5, row + 0.5).
"""

import colorsys
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SHAPE_KINDS = ("rect", "ellipse", "articulated-two-part", "deformable-blob")
TEXTURES = ("flat-color", "noise", "stripes")
CONFOUNDERS = ("none", "reflection", "shadow")


@dataclass
class SpriteSpec:
    """One scene: a sprite, an optional confounder, and their motion."""

    shape_kind: str = "rect"
    texture: str = "flat-color"
    trajectory: tuple = (2.0, 0.0)  # (dx, dy) per frame, or a (T-1, 2) array
    part_motion: Optional[float] = None  # limb rotation, radians/frame
    confounder: str = "none"
    size: tuple = (8.0, 6.0)  # body half-extent (rx, ry), pixels
    start: Optional[tuple] = None  # body center at t=0; None -> seeded draw
    color: Optional[tuple] = None  # RGB in [0,1]; None -> seeded draw
    color2: Optional[tuple] = None  # stripe counter-color
    bg_color: tuple = (0.05, 0.05, 0.08)
    camera_pan: tuple = (0.0, 0.0)  # background flow vector
    limb_length: float = 11.0
    limb_width: float = 2.5
    limb_angle0: float = 0.0
    blob_wobble: float = 0.15
    blob_pulse: float = 0.10
    stripe_period: float = 4.0
    horizon_gap: float = 3.0  # gap between sprite and reflection horizon

    def __post_init__(self):
        if self.shape_kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape_kind {self.shape_kind!r}")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}")
        if self.confounder not in CONFOUNDERS:
            raise ValueError(f"unknown confounder {self.confounder!r}")


@dataclass
class VideoClip:
    """Frames plus ground-truth flow (both directions) and sprite masks."""

    name: str
    frames: np.ndarray  # (T, 3, h, w) float32 in [0, 1]
    gt_flow: np.ndarray  # (T-1, 2, h, w) float32, frame t -> t+1
    gt_flow_bwd: Optional[np.ndarray]  # (T-1, 2, h, w), frame t+1 -> t
    gt_masks: Optional[np.ndarray]  # (T, h, w) bool, sprite pixels only

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def _rot(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s], [s, c]])


def _hash01(ix, iy, seed):
    # classic deterministic lattice hash; stable across platforms
    v = np.sin(ix * 12.9898 + iy * 78.233 + seed * 0.5453) * 43758.5453
    return v - np.floor(v)


def _hue_shift(color, shift, brightness=1.0, saturation=1.0):
    h, s, v = colorsys.rgb_to_hsv(*color)
    rgb = colorsys.hsv_to_rgb((h + shift) % 1.0, s * saturation, v)
    return tuple(min(1.0, c * brightness) for c in rgb)


def _quantize(c):
    return tuple(round(v * 255.0) / 255.0 for v in c)


class _Region:
    """A region with per-pair affine motion q -> A q + b (frame t to t+1)."""

    def __init__(self, membership, pair_map, color_fn):
        self.membership = membership  # (t, X, Y) -> bool array
        self.pair_map = pair_map  # t -> (A 2x2, b 2)
        self.color_fn = color_fn  # (t, X, Y) -> (3, h, w) array

    def forward_disp(self, t, X, Y):
        A, b = self.pair_map(t)
        dx = (A[0, 0] - 1.0) * X + A[0, 1] * Y + b[0]
        dy = A[1, 0] * X + (A[1, 1] - 1.0) * Y + b[1]
        return dx, dy

    def backward_disp(self, t, X, Y):
        A, b = self.pair_map(t)
        Ai = np.linalg.inv(A)
        bi = -Ai @ b
        dx = (Ai[0, 0] - 1.0) * X + Ai[0, 1] * Y + bi[0]
        dy = Ai[1, 0] * X + (Ai[1, 1] - 1.0) * Y + bi[1]
        return dx, dy


def _texture_color(spec, color, color2, seed):
    """Returns color(t, U, V) in region-local coordinates."""
    base = np.array(color).reshape(3, 1, 1)
    if spec.texture == "flat-color":
        return lambda t, U, V: np.broadcast_to(base, (3,) + U.shape).copy()
    if spec.texture == "noise":
        def noise(t, U, V):
            g = 0.55 + 0.45 * _hash01(np.floor(U), np.floor(V), seed)
            return base * g[None]
        return noise
    alt = np.array(color2).reshape(3, 1, 1)
    def stripes(t, U, V):
        band = np.floor(U / spec.stripe_period).astype(np.int64) % 2
        return np.where(band[None] == 0, base, alt)
    return stripes


class _Scene:
    """Regions in paint order (later entries own overlapping pixels)."""

    def __init__(self, spec, T, h, w, regions, sprite_count):
        self.spec = spec
        self.T = T
        self.h = h
        self.w = w
        self.regions = regions
        self.sprite_count = sprite_count  # trailing regions that form the sprite

    def ownership(self, t, X, Y):
        """Per-region exclusive masks, resolved back-to-front."""
        masks = [r.membership(t, X, Y) for r in self.regions]
        taken = np.zeros_like(masks[0])
        own = [None] * len(self.regions)
        for i in range(len(self.regions) - 1, -1, -1):
            own[i] = masks[i] & ~taken
            taken |= masks[i]
        return own

    def sprite_mask(self, t, X, Y):
        m = np.zeros((self.h, self.w), dtype=bool)
        for r in self.regions[-self.sprite_count:]:
            m |= r.membership(t, X, Y)
        return m


def _build_scene(spec: SpriteSpec, T: int, h: int, w: int, seed: int) -> _Scene:
    rng = np.random.default_rng(seed)

    traj = np.asarray(spec.trajectory, dtype=np.float64)
    if traj.ndim == 1:
        traj = np.tile(traj, (T - 1, 1))
    if traj.shape != (T - 1, 2):
        raise ValueError(f"trajectory must be (2,) or ({T - 1}, 2), got {traj.shape}")

    color = spec.color
    if color is None:
        hue = float(rng.uniform(0.0, 1.0))
        color = colorsys.hsv_to_rgb(hue, 0.85, 0.9)
    color = _quantize(color)
    color2 = _quantize(spec.color2 if spec.color2 is not None else _hue_shift(color, 0.18))
    bg = _quantize(spec.bg_color)

    rx, ry = spec.size
    # reach: extent of everything tied to the body center, per axis and sign
    if spec.shape_kind == "articulated-two-part":
        limb_reach = spec.limb_length + spec.limb_width
        reach_x = rx + limb_reach
        reach_y = max(ry, limb_reach)
    elif spec.shape_kind == "deformable-blob":
        r = max(rx, ry) * (1.0 + spec.blob_wobble) * (1.0 + spec.blob_pulse)
        reach_x = reach_y = r
    else:
        reach_x, reach_y = rx, ry
    below_reach = reach_y
    if spec.confounder == "reflection":
        below_reach = 2.0 * ry + 1.5 * spec.horizon_gap
    elif spec.confounder == "shadow":
        below_reach = ry * 1.85 + spec.horizon_gap

    cum = np.vstack([np.zeros(2), np.cumsum(traj, axis=0)])  # (T, 2) offsets
    start = spec.start
    if start is None:
        # pick a start such that every frame stays in bounds with margin 2
        lo = np.array([reach_x, reach_y]) + 2.0 - cum.min(axis=0)
        hi = np.array([w - reach_x, h - below_reach]) - 2.0 - cum.max(axis=0)
        if (hi <= lo).any():
            raise ValueError("trajectory takes sprite out of bounds for every start position")
        start = tuple(rng.uniform(lo, hi))
    start = np.asarray(start, dtype=np.float64)

    centers = start[None, :] + cum  # (T, 2) body center per frame
    margin = 0.5
    if (centers[:, 0] - reach_x < margin).any() or (centers[:, 0] + reach_x > w - margin).any() \
            or (centers[:, 1] - reach_y < margin).any() or (centers[:, 1] + below_reach > h - margin).any():
        raise ValueError(
            f"sprite leaves the {w}x{h} frame: centers span "
            f"x [{centers[:, 0].min():.1f}, {centers[:, 0].max():.1f}], "
            f"y [{centers[:, 1].min():.1f}, {centers[:, 1].max():.1f}] "
            f"with reach ({reach_x:.1f}, {reach_y:.1f}/{below_reach:.1f})"
        )

    translate = lambda t: (np.eye(2), traj[t].copy())
    tex = _texture_color(spec, color, color2, seed)

    regions = []
    sprite_count = 1

    # confounders are painted first so the sprite always owns shared pixels;
    # disjointness is still validated in generate_clip
    base_shape = "rect" if spec.shape_kind in ("rect", "articulated-two-part") else "ellipse"

    if spec.confounder == "reflection":
        y_h = float(start[1] + ry + spec.horizon_gap)
        k = 0.5  # vertical squash of the mirrored shape
        refl_color = _quantize(_hue_shift(color, 0.5, brightness=0.5))

        def refl_member(t, X, Y):
            # squashed mirror of the t=0 body across the horizon, shifted by
            # the shared trajectory (identical motion, half the area)
            Xs = X - cum[t, 0]
            Ys = y_h - (Y - cum[t, 1] - y_h) / k
            return _shape_test(base_shape, Xs - start[0], Ys - start[1], rx, ry)

        rc = np.array(refl_color).reshape(3, 1, 1)
        regions.append(_Region(refl_member, translate,
                               lambda t, X, Y: np.broadcast_to(rc, (3,) + X.shape).copy()))
    elif spec.confounder == "shadow":
        off = np.array([0.0, ry + spec.horizon_gap + 0.35 * ry])
        srx, sry = rx * 1.05, ry * 0.5
        shadow_color = _quantize(tuple(min(1.0, v * 0.5 + 0.04) for v in bg))

        def shadow_member(t, X, Y):
            cx, cy = centers[t] + off
            return ((X - cx) / srx) ** 2 + ((Y - cy) / sry) ** 2 <= 1.0

        sc = np.array(shadow_color).reshape(3, 1, 1)
        regions.append(_Region(shadow_member, translate,
                               lambda t, X, Y: np.broadcast_to(sc, (3,) + X.shape).copy()))

    if spec.shape_kind == "articulated-two-part":
        omega = spec.part_motion if spec.part_motion is not None else 0.0
        angles = spec.limb_angle0 + omega * np.arange(T)
        pivots = centers + np.array([rx, 0.0])[None, :]

        def limb_member(t, X, Y):
            R = _rot(-angles[t])
            Xl = X - pivots[t, 0]
            Yl = Y - pivots[t, 1]
            U = R[0, 0] * Xl + R[0, 1] * Yl
            V = R[1, 0] * Xl + R[1, 1] * Yl
            return (U >= 0.0) & (U <= spec.limb_length) & (np.abs(V) <= spec.limb_width)

        def limb_map(t):
            R = _rot(angles[t + 1] - angles[t])
            b = pivots[t + 1] - R @ pivots[t]
            return R, b

        def limb_color(t, X, Y):
            R = _rot(-angles[t])
            Xl = X - pivots[t, 0]
            Yl = Y - pivots[t, 1]
            U = R[0, 0] * Xl + R[0, 1] * Yl
            V = R[1, 0] * Xl + R[1, 1] * Yl
            return tex(t, U, V)

        regions.append(_Region(limb_member, limb_map, limb_color))
        sprite_count = 2

    if spec.shape_kind == "deformable-blob":
        k1, k2 = 2, 3
        psi1, psi2 = rng.uniform(0, 2 * math.pi, 2)
        phase = rng.uniform(0, 2 * math.pi, 2)
        amp = spec.blob_pulse
        scales = np.stack([1.0 + amp * np.sin(2 * math.pi * np.arange(T) / T + phase[0]),
                           1.0 + amp * np.sin(2 * math.pi * np.arange(T) / T + phase[1])], axis=1)

        def radius(phi):
            return 1.0 + spec.blob_wobble * (np.cos(k1 * phi + psi1) * 0.6
                                             + np.cos(k2 * phi + psi2) * 0.4)

        def blob_member(t, X, Y):
            U = (X - centers[t, 0]) / (rx * scales[t, 0])
            V = (Y - centers[t, 1]) / (ry * scales[t, 1])
            return np.hypot(U, V) <= radius(np.arctan2(V, U))

        def blob_map(t):
            S = np.diag(scales[t + 1] / scales[t])
            b = centers[t + 1] - S @ centers[t]
            return S, b

        def blob_color(t, X, Y):
            U = (X - centers[t, 0]) / scales[t, 0]
            V = (Y - centers[t, 1]) / scales[t, 1]
            return tex(t, U, V)

        regions.append(_Region(blob_member, blob_map, blob_color))
    else:
        def body_member(t, X, Y):
            return _shape_test(base_shape, X - centers[t, 0], Y - centers[t, 1], rx, ry)

        def body_color(t, X, Y):
            return tex(t, X - centers[t, 0], Y - centers[t, 1])

        regions.append(_Region(body_member, translate, body_color))

    scene = _Scene(spec, T, h, w, regions, sprite_count)
    scene.bg_color = bg
    scene.centers = centers
    return scene


def _shape_test(base, Xl, Yl, rx, ry):
    """Membership of body-local coordinates in a rect or ellipse."""
    if base == "rect":
        return (np.abs(Xl) <= rx) & (np.abs(Yl) <= ry)
    return (Xl / rx) ** 2 + (Yl / ry) ** 2 <= 1.0


def generate_clip(spec: SpriteSpec, T: int, h: int, w: int, seed: int = 0,
                  name: str = "clip") -> VideoClip:
    """Render a clip with exact analytic flow in both directions.

    Raises ValueError if T < 2, if the trajectory takes the sprite out of
    frame, or if a confounder overlaps the sprite in any frame.
    """
    if T < 2:
        raise ValueError("need at least two frames")
    scene = _build_scene(spec, T, h, w, seed)

    X, Y = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    pan = np.asarray(spec.camera_pan, dtype=np.float64)

    frames = np.empty((T, 3, h, w), dtype=np.float32)
    masks = np.empty((T, h, w), dtype=bool)
    fwd = np.zeros((T - 1, 2, h, w), dtype=np.float32)
    bwd = np.zeros((T - 1, 2, h, w), dtype=np.float32)

    bg = np.array(scene.bg_color).reshape(3, 1, 1)
    n_conf = len(scene.regions) - scene.sprite_count

    for t in range(T):
        own = scene.ownership(t, X, Y)
        if n_conf:
            sprite = scene.sprite_mask(t, X, Y)
            conf_raw = scene.regions[0].membership(t, X, Y)
            if (sprite & conf_raw).any():
                raise ValueError(f"confounder overlaps sprite at frame {t}")

        frame = np.broadcast_to(bg, (3, h, w)).copy()
        for r, m in zip(scene.regions, own):
            if m.any():
                frame[:, m] = r.color_fn(t, X, Y)[:, m]
        frames[t] = np.rint(np.clip(frame, 0.0, 1.0) * 255.0) / 255.0
        masks[t] = scene.sprite_mask(t, X, Y)

    for t in range(T - 1):
        fx = np.full((h, w), pan[0])
        fy = np.full((h, w), pan[1])
        for r, m in zip(scene.regions, scene.ownership(t, X, Y)):
            if m.any():
                dx, dy = r.forward_disp(t, X, Y)
                fx[m] = dx[m]
                fy[m] = dy[m]
        fwd[t, 0], fwd[t, 1] = fx, fy

        bx = np.full((h, w), -pan[0])
        by = np.full((h, w), -pan[1])
        for r, m in zip(scene.regions, scene.ownership(t + 1, X, Y)):
            if m.any():
                dx, dy = r.backward_disp(t, X, Y)
                bx[m] = dx[m]
                by[m] = dy[m]
        bwd[t, 0], bwd[t, 1] = bx, by

    return VideoClip(name=name, frames=frames, gt_flow=fwd, gt_flow_bwd=bwd, gt_masks=masks)


# ---------------------------------------------------------------------------
# dataset presets

DATASET_KINDS = ("rigid", "articulated", "reflection", "shadow", "blob", "mixed")


def _rand_traj(rng, lo=2.0, hi=4.0, horizontal=False, integer=True):
    mag = rng.uniform(lo, hi)
    ang = 0.0 if horizontal else rng.uniform(0, 2 * math.pi)
    d = np.array([mag * math.cos(ang), mag * math.sin(ang)])
    if horizontal and rng.random() < 0.5:
        d = -d
    if integer:
        d = np.rint(d)
        if not d.any():
            d[0] = max(1.0, round(lo))
    return tuple(d)


def make_dataset(kind: str, n_clips: int = 24, T: int = 8, h: int = 64, w: int = 64,
                 seed: int = 0, **overrides):
    """Generate a list of clips for one of the named scenario presets."""
    if kind not in DATASET_KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; options: {DATASET_KINDS}")
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n_clips):
        sub = kind
        if kind == "mixed":
            sub = ("rigid", "articulated", "reflection", "blob")[i % 4]
        spec = _preset_spec(sub, rng, **overrides)
        clip_seed = int(rng.integers(0, 2 ** 31 - 1))
        clips.append(generate_clip(spec, T, h, w, seed=clip_seed, name=f"{sub}_{i:03d}"))
    return clips


def _preset_spec(kind, rng, **overrides):
    common = dict(
        size=(float(rng.uniform(6.5, 9.0)), float(rng.uniform(5.0, 7.0))),
        color=colorsys.hsv_to_rgb(float(rng.uniform(0, 1)), 0.9, 0.9),
    )
    if kind == "rigid":
        spec = dict(shape_kind="rect" if rng.random() < 0.5 else "ellipse",
                    trajectory=_rand_traj(rng), **common)
    elif kind == "articulated":
        spec = dict(shape_kind="articulated-two-part",
                    trajectory=_rand_traj(rng, 1.0, 2.0),
                    part_motion=float(rng.uniform(0.14, 0.22)) * (1 if rng.random() < 0.5 else -1),
                    size=(float(rng.uniform(5.5, 6.5)), float(rng.uniform(4.5, 5.5))),
                    limb_length=float(rng.uniform(9.0, 11.0)),
                    limb_width=float(rng.uniform(2.2, 3.0)),
                    limb_angle0=float(rng.uniform(-0.5, 0.5)),
                    color=common["color"])
    elif kind == "reflection":
        spec = dict(shape_kind="rect" if rng.random() < 0.5 else "ellipse",
                    trajectory=_rand_traj(rng, 2.0, 3.5, horizontal=True),
                    confounder="reflection", **common)
    elif kind == "shadow":
        spec = dict(shape_kind="ellipse",
                    trajectory=_rand_traj(rng, 2.0, 3.5, horizontal=True),
                    confounder="shadow", **common)
    elif kind == "blob":
        spec = dict(shape_kind="deformable-blob",
                    trajectory=_rand_traj(rng, 1.5, 3.0),
                    size=(float(rng.uniform(7.0, 9.0)),) * 2,
                    color=common["color"])
    else:
        raise ValueError(kind)
    spec.update(overrides)
    return SpriteSpec(**spec)
