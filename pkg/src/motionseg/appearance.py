"""Appearance supervision for the refinement stage: CRF-refined targets,
a semantic constraint from frozen features, and the stage-2 loss."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .crf import CrfParams, crf_refine
from .motion import guided_pool
from .nets import cosine_map

DEFAULT_TAU = 0.3
GUARD_WIDTH_FRAC = 0.8
GUARD_HEIGHT_FRAC = 0.9


@dataclass
class SemanticConstraintMask:
    binary: np.ndarray  # bool (H, W)
    discarded: bool = False  # True when the constraint was dropped (all-ones)


def semantic_constraint(refined, aux_feats, tau=DEFAULT_TAU, dilation_size=3,
                        eps=1e-6) -> SemanticConstraintMask:
    """Pixels whose frozen-feature cosine to the pooled foreground feature
    passes the threshold, dilated. A (near-)empty refined mask disables the
    constraint for the frame."""
    refined = np.asarray(refined, dtype=np.float64)
    if refined.sum() <= eps:
        return SemanticConstraintMask(np.ones(refined.shape, dtype=bool), discarded=True)
    query = guided_pool(np.asarray(aux_feats, dtype=np.float64), refined)
    binary = cosine_map(aux_feats, query) >= tau
    if dilation_size > 1:
        binary = ndimage.binary_dilation(
            binary, structure=np.ones((dilation_size, dilation_size), dtype=bool))
    return SemanticConstraintMask(binary)


def background_match_guard(mask: SemanticConstraintMask, width_frac=GUARD_WIDTH_FRAC,
                           height_frac=GUARD_HEIGHT_FRAC) -> SemanticConstraintMask:
    """Drop the constraint when its bounding box spans most of the frame
    (the match likely hit background). The box may be exactly at the
    fraction; only a strictly larger extent is discarded. An empty match
    is treated as failed and also dropped."""
    S = mask.binary
    H, W = S.shape
    rows = np.flatnonzero(S.any(axis=1))
    cols = np.flatnonzero(S.any(axis=0))
    if rows.size == 0:
        return SemanticConstraintMask(np.ones((H, W), dtype=bool), discarded=True)
    height = rows[-1] - rows[0] + 1
    width = cols[-1] - cols[0] + 1
    if width > width_frac * W or height > height_frac * H:
        return SemanticConstraintMask(np.ones((H, W), dtype=bool), discarded=True)
    return mask


def matches_background(binary, width_frac=GUARD_WIDTH_FRAC, height_frac=GUARD_HEIGHT_FRAC):
    """True when a response's bounding box triggers the discard rule."""
    guarded = background_match_guard(SemanticConstraintMask(np.asarray(binary, dtype=bool)),
                                     width_frac, height_frac)
    return guarded.discarded


def apply_constraint(crf_out, mask: SemanticConstraintMask) -> np.ndarray:
    """Elementwise product of the refined probabilities with the constraint."""
    return np.asarray(crf_out, dtype=np.float64) * mask.binary


def appearance_loss(pred, target):
    """Per-pixel mean squared error; accepts numpy arrays or torch tensors."""
    diff = pred - target
    return (diff * diff).mean()


def stage2_loss(l_app, l_motion, w_app=2.0, w_motion=0.1):
    """Weighted sum of the appearance and motion losses."""
    return w_app * l_app + w_motion * l_motion


def refine_mask(prob, image, aux_feats=None, crf_params: CrfParams = None,
                use_constraint=True, tau=DEFAULT_TAU, dilation_size=3,
                width_frac=GUARD_WIDTH_FRAC, height_frac=GUARD_HEIGHT_FRAC):
    """Build one frame's refinement target at prediction resolution.

    ``prob`` and ``image`` are (H, W) and (3, H, W); ``aux_feats`` must be
    aligned to the same grid when the constraint is enabled. The constraint
    is pooled from the CRF output, guarded, then multiplied in. Returns
    (target, constraint or None).
    """
    crf_out = crf_refine(prob, image, crf_params or CrfParams())
    if not use_constraint:
        return crf_out, None
    if aux_feats is None:
        raise ValueError("semantic constraint enabled but no aux features given")
    S = background_match_guard(
        semantic_constraint(crf_out, aux_feats, tau=tau, dilation_size=dilation_size),
        width_frac, height_frac)
    return apply_constraint(crf_out, S), S
