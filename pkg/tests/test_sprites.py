import math

import numpy as np
import pytest

from motionseg.sprites import SpriteSpec, generate_clip, make_dataset, _build_scene


def test_rect_translation_flow_matches_trajectory():
    spec = SpriteSpec(shape_kind="rect", trajectory=(3.0, 0.0), start=(20.0, 32.0),
                      color=(0.8, 0.2, 0.2))
    clip = generate_clip(spec, T=8, h=64, w=64, seed=1)
    for t in range(7):
        m = clip.gt_masks[t]
        assert np.all(clip.gt_flow[t, 0][m] == 3.0)
        assert np.all(clip.gt_flow[t, 1][m] == 0.0)
        assert np.all(clip.gt_flow[t, :, ~m] == 0.0)


def test_zero_trajectory_gives_static_clip():
    spec = SpriteSpec(trajectory=(0.0, 0.0), start=(32.0, 32.0), color=(0.1, 0.9, 0.3))
    clip = generate_clip(spec, T=5, h=48, w=48, seed=0)
    assert np.all(clip.gt_flow == 0.0)
    assert np.all(clip.gt_flow_bwd == 0.0)
    for t in range(1, 5):
        np.testing.assert_array_equal(clip.frames[t], clip.frames[0])


def _limb_pixels(scene, t, h, w):
    X, Y = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    own = scene.ownership(t, X, Y)
    return own[-2], X, Y  # limb is painted just below the body


def test_limb_rotation_flow_against_rendered_positions():
    # oracle: the analytic limb flow must agree with frame differencing of
    # rendered limb positions (centroid displacement) and map limb pixels
    # into the rendered limb region of the next frame
    omega = 0.1
    spec = SpriteSpec(shape_kind="articulated-two-part", trajectory=(2.0, 1.0),
                      part_motion=omega, start=(24.0, 32.0), size=(6.0, 5.0),
                      limb_length=10.0, limb_width=2.5, color=(0.9, 0.6, 0.1))
    T, h, w = 6, 64, 64
    clip = generate_clip(spec, T, h, w, seed=3)
    scene = _build_scene(spec, T, h, w, seed=3)
    for t in range(T - 1):
        limb_t, X, Y = _limb_pixels(scene, t, h, w)
        limb_t1, _, _ = _limb_pixels(scene, t + 1, h, w)
        assert limb_t.sum() > 20
        # centroid displacement of the rendered limb-owned region
        cx0, cy0 = X[limb_t].mean(), Y[limb_t].mean()
        cx1, cy1 = X[limb_t1].mean(), Y[limb_t1].mean()
        mean_flow = clip.gt_flow[t, :, limb_t].mean(axis=0)
        assert abs(mean_flow[0] - (cx1 - cx0)) < 0.2
        assert abs(mean_flow[1] - (cy1 - cy0)) < 0.2
        # flow formula check at explicit points: R(w)(q-p) - (q-p) + d
        piv = scene.centers[t] + np.array([spec.size[0], 0.0])
        d = np.array([2.0, 1.0])
        R = np.array([[math.cos(omega), -math.sin(omega)],
                      [math.sin(omega), math.cos(omega)]])
        qx, qy = X[limb_t], Y[limb_t]
        rel = np.stack([qx - piv[0], qy - piv[1]])
        expect = R @ rel - rel + d[:, None]
        np.testing.assert_allclose(clip.gt_flow[t, :, limb_t].T, expect, atol=1e-5)
        # every limb pixel lands inside the next frame's limb region
        # (checked in local coordinates with a float-epsilon margin)
        xn, yn = qx + expect[0], qy + expect[1]
        a1 = omega * (t + 1)
        piv1 = piv + d
        c, s = math.cos(-a1), math.sin(-a1)
        u1 = c * (xn - piv1[0]) - s * (yn - piv1[1])
        v1 = s * (xn - piv1[0]) + c * (yn - piv1[1])
        eps = 1e-9
        assert np.all((u1 >= -eps) & (u1 <= spec.limb_length + eps)
                      & (np.abs(v1) <= spec.limb_width + eps))


def test_warping_by_flow_reproduces_next_frame_on_sprite():
    # integer translation of a flat-color sprite: I_{t+1}[p + F_t[p]] == I_t[p]
    spec = SpriteSpec(shape_kind="ellipse", trajectory=(3.0, -2.0), start=(20.0, 40.0),
                      color=(0.2, 0.4, 0.9))
    clip = generate_clip(spec, T=6, h=64, w=64, seed=0)
    for t in range(5):
        m = clip.gt_masks[t]
        rows, cols = np.nonzero(m)
        dx = clip.gt_flow[t, 0, rows, cols].astype(int)
        dy = clip.gt_flow[t, 1, rows, cols].astype(int)
        np.testing.assert_array_equal(
            clip.frames[t + 1][:, rows + dy, cols + dx], clip.frames[t][:, rows, cols]
        )


def test_backward_flow_is_inverse_of_forward():
    spec = SpriteSpec(shape_kind="articulated-two-part", trajectory=(1.0, 1.0),
                      part_motion=0.15, start=(26.0, 30.0), size=(6.0, 5.0),
                      limb_length=9.0, color=(0.5, 0.8, 0.2))
    clip = generate_clip(spec, T=4, h=64, w=64, seed=2)
    # composing forward then backward displacement returns to the start point
    h, w = 64, 64
    X, Y = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    for t in range(3):
        m = clip.gt_masks[t]
        xs = X[m] + clip.gt_flow[t, 0][m]
        ys = Y[m] + clip.gt_flow[t, 1][m]
        # sample backward flow at the (non-grid) landing points via the scene
        scene = _build_scene(spec, 4, h, w, seed=2)
        for r, own in zip(scene.regions, scene.ownership(t, X, Y)):
            sel = own[m]
            if not sel.any():
                continue
            bx, by = r.backward_disp(t, xs[sel], ys[sel])
            np.testing.assert_allclose(xs[sel] + bx, X[m][sel], atol=1e-9)
            np.testing.assert_allclose(ys[sel] + by, Y[m][sel], atol=1e-9)


def test_generation_is_deterministic():
    spec = SpriteSpec(shape_kind="deformable-blob", texture="noise", trajectory=(2.0, 1.0))
    a = generate_clip(spec, T=6, h=48, w=48, seed=11)
    b = generate_clip(spec, T=6, h=48, w=48, seed=11)
    np.testing.assert_array_equal(a.frames, b.frames)
    np.testing.assert_array_equal(a.gt_flow, b.gt_flow)
    np.testing.assert_array_equal(a.gt_masks, b.gt_masks)
    c = generate_clip(spec, T=6, h=48, w=48, seed=12)
    assert not np.array_equal(a.frames, c.frames)


def test_nonzero_flow_pixels_equal_mask_for_translating_sprite():
    spec = SpriteSpec(shape_kind="rect", trajectory=(2.0, 2.0), start=(20.0, 20.0),
                      color=(0.9, 0.9, 0.1))
    clip = generate_clip(spec, T=5, h=64, w=64, seed=0)
    for t in range(4):
        moving = (clip.gt_flow[t] != 0).any(axis=0)
        np.testing.assert_array_equal(moving, clip.gt_masks[t])


def test_out_of_bounds_trajectory_rejected():
    spec = SpriteSpec(trajectory=(12.0, 0.0), start=(32.0, 32.0), color=(1.0, 0, 0))
    with pytest.raises(ValueError, match="leaves|out of bounds"):
        generate_clip(spec, T=8, h=64, w=64, seed=0)


def test_confounder_disjoint_and_excluded_from_mask():
    spec = SpriteSpec(shape_kind="rect", trajectory=(2.0, 0.0), start=(24.0, 18.0),
                      confounder="reflection", color=(0.8, 0.3, 0.3))
    clip = generate_clip(spec, T=8, h=64, w=64, seed=5)
    bg = np.array(_quantized_bg(spec)).reshape(3, 1, 1)
    for t in range(8):
        # some non-background pixels exist outside the sprite mask (the reflection)
        non_bg = (np.abs(clip.frames[t] - bg) > 1e-6).any(axis=0)
        assert (non_bg & ~clip.gt_masks[t]).sum() > 10
        # confounder pixels move with the same trajectory
        if t < 7:
            conf = non_bg & ~clip.gt_masks[t]
            assert np.all(clip.gt_flow[t, 0][conf] == 2.0)
            assert np.all(clip.gt_flow[t, 1][conf] == 0.0)


def _quantized_bg(spec):
    return tuple(round(v * 255) / 255 for v in spec.bg_color)


def test_camera_pan_sets_background_flow():
    spec = SpriteSpec(trajectory=(2.0, 0.0), start=(24.0, 32.0), camera_pan=(1.0, -1.0),
                      color=(0.2, 0.8, 0.8))
    clip = generate_clip(spec, T=3, h=64, w=64, seed=0)
    m = clip.gt_masks[0]
    assert np.all(clip.gt_flow[0, 0][~m] == 1.0)
    assert np.all(clip.gt_flow[0, 1][~m] == -1.0)
    assert np.all(clip.gt_flow[0, 0][m] == 2.0)


@pytest.mark.parametrize("kind", ["rigid", "articulated", "reflection", "shadow", "blob", "mixed"])
def test_dataset_presets_generate(kind):
    clips = make_dataset(kind, n_clips=4, T=4, h=64, w=64, seed=7)
    assert len(clips) == 4
    for c in clips:
        assert c.frames.shape == (4, 3, 64, 64)
        assert c.gt_masks.any()
        assert np.isfinite(c.gt_flow).all()
