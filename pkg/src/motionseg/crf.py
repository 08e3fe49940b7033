"""Dense CRF mean-field inference for binary (figure/ground) refinement.

Pairwise terms use two Gaussian kernels truncated at a spatial radius:
an appearance kernel (spatial and color) and a smoothness kernel
(spatial only), with Potts label compatibility. Pairs are enumerated
exactly within the truncation radius; no lattice approximation.
"""

from dataclasses import dataclass, field

import numpy as np

# above this many (offset, pixel) products the per-offset color weights are
# recomputed each iteration instead of being held in memory
_PRECOMPUTE_LIMIT = 8_000_000


@dataclass
class CrfParams:
    appearance_weight: float = 4.0
    spatial_sigma: float = 8.0  # pixels, appearance kernel
    color_sigma: float = 0.1  # on [0,1] intensities
    smooth_weight: float = 1.0
    smooth_sigma: float = 1.0  # pixels
    iterations: int = 5
    truncation: float = 3.0  # kernel cutoff, in sigmas


def _half_offsets(sigma, truncation):
    """(dy, dx, spatial weight) for one representative of each {o, -o} pair."""
    r2max = (truncation * sigma) ** 2
    rad = int(np.floor(truncation * sigma))
    out = []
    for dy in range(0, rad + 1):
        for dx in range(-rad, rad + 1):
            if dy == 0 and dx <= 0:
                continue
            d2 = dy * dy + dx * dx
            if d2 <= r2max:
                out.append((dy, dx, float(np.exp(-d2 / (2.0 * sigma ** 2)))))
    return out


def _pair_slices(dy, dx, H, W):
    ys_i = slice(0, H - dy) if dy >= 0 else slice(-dy, H)
    ys_j = slice(dy, H) if dy >= 0 else slice(0, H + dy)
    xs_i = slice(0, W - dx) if dx >= 0 else slice(-dx, W)
    xs_j = slice(dx, W) if dx >= 0 else slice(0, W + dx)
    return (ys_i, xs_i), (ys_j, xs_j)


def _color_weight(image, si, sj, color_sigma):
    diff = image[(slice(None),) + si] - image[(slice(None),) + sj]
    return np.exp(-(diff * diff).sum(axis=0) / (2.0 * color_sigma ** 2))


class _Kernel:
    """One truncated Gaussian kernel bound to a specific image."""

    def __init__(self, image, sigma, truncation, color_sigma=None):
        H, W = image.shape[1:]
        self.shape = (H, W)
        self.entries = []
        n = 0
        offs = _half_offsets(sigma, truncation)
        precompute = color_sigma is None or len(offs) * H * W <= _PRECOMPUTE_LIMIT
        self.image = None if precompute else image
        self.color_sigma = color_sigma
        for dy, dx, ws in offs:
            if dy >= H or abs(dx) >= W:
                continue
            si, sj = _pair_slices(dy, dx, H, W)
            if color_sigma is None:
                w = ws
            elif precompute:
                w = ws * _color_weight(image, si, sj, color_sigma)
            else:
                w = None  # recomputed on the fly
                self.entries.append((si, sj, ws))
                continue
            self.entries.append((si, sj, w))

    def message(self, Q):
        """sum_j k(i, j) Q_j for each label channel, excluding j = i."""
        msg = np.zeros_like(Q)
        for si, sj, w in self.entries:
            if self.image is not None:
                w = w * _color_weight(self.image, si, sj, self.color_sigma)
            msg[(slice(None),) + si] += w * Q[(slice(None),) + sj]
            msg[(slice(None),) + sj] += w * Q[(slice(None),) + si]
        return msg


def mean_field(unary, image, params: CrfParams):
    """Run mean-field iterations; returns label marginals Q of shape (2, H, W)."""
    unary = np.asarray(unary, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if not np.isfinite(unary).all() or not np.isfinite(image).all():
        raise ValueError("non-finite values in CRF inputs")
    if unary.ndim != 3 or unary.shape[0] != 2 or unary.shape[1:] != image.shape[1:]:
        raise ValueError(f"unary {unary.shape} does not match image {image.shape}")

    appearance = _Kernel(image, params.spatial_sigma, params.truncation, params.color_sigma)
    smoothness = _Kernel(image, params.smooth_sigma, params.truncation)

    Q = _softmax2(-unary)
    for _ in range(params.iterations):
        pair = (params.appearance_weight * appearance.message(Q)
                + params.smooth_weight * smoothness.message(Q))
        # Potts compatibility: label l is penalized by the other label's mass
        energy = unary + pair[::-1]
        Q = _softmax2(-energy)
    return Q


def _softmax2(logits):
    m = logits.max(axis=0, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=0, keepdims=True)


def unary_from_prob(prob, eps=1e-8):
    """Two-label unary energies (-log p) from a foreground probability map."""
    p = np.clip(np.asarray(prob, dtype=np.float64), eps, 1.0 - eps)
    return np.stack([-np.log(1.0 - p), -np.log(p)])


def crf_refine(prob, image, params: CrfParams) -> np.ndarray:
    """Refine a foreground probability map against its image.

    ``prob`` is (H, W) in [0, 1]; ``image`` is (3, H, W) at the same
    resolution. Returns the refined foreground probabilities.
    """
    prob = np.asarray(prob, dtype=np.float64)
    if prob.min() < 0.0 or prob.max() > 1.0:
        raise ValueError("mask probabilities must lie in [0, 1]")
    Q = mean_field(unary_from_prob(prob), image, params)
    return Q[1]
