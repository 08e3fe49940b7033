"""Flow reconstruction from soft masks: guided pooling, per-channel
broadcast, bounded residual composition, and the L1 motion losses.

Functions accept torch tensors; ``guided_pool`` also works on numpy
arrays so analysis-side code can reuse it. Batched inputs carry a
leading B dimension; the unbatched forms match the array shapes used
in the documentation.
"""

import warnings

import torch
from torch import nn

POOL_EPS = 1e-6

RESIDUAL_VARIANTS = ("pixelwise", "scaling", "affine", "none")


def guided_pool(field, mask, eps=POOL_EPS):
    """Mask-weighted mean of a (K, H, W) field; zero vector if the mask
    claims (almost) no pixels."""
    K = field.shape[0]
    flat_f = field.reshape(K, -1)
    flat_m = mask.reshape(-1)
    total = flat_m.sum()
    if float(total) <= eps:
        return flat_f[:, 0] * 0
    return (flat_f * flat_m).sum(axis=-1) / total


class VectorMLP(nn.Module):
    """Two-layer MLP applied independently to each 2-d motion vector."""

    def __init__(self, hidden=64):
        super().__init__()
        self.fc1 = nn.Linear(2, hidden)
        self.fc2 = nn.Linear(hidden, 2)

    def forward(self, v):
        return self.fc2(torch.relu(self.fc1(v)))

    @torch.no_grad()
    def set_identity(self, scale=1.0):
        """Configure the MLP to compute v -> scale * v (relu(v) - relu(-v))."""
        h = self.fc1.out_features
        if h < 4:
            raise ValueError("need at least 4 hidden units for the identity map")
        self.fc1.weight.zero_()
        self.fc1.bias.zero_()
        self.fc2.weight.zero_()
        self.fc2.bias.zero_()
        for i in range(2):
            self.fc1.weight[i, i] = 1.0
            self.fc1.weight[2 + i, i] = -1.0
            self.fc2.weight[i, i] = scale
            self.fc2.weight[i, 2 + i] = -scale
        return self


def _batched(x, unbatched_rank):
    if x.dim() == unbatched_rank:
        return x.unsqueeze(0), True
    return x, False


def pool_channel_flows(flow, masks, phi1, phi2, eps=POOL_EPS):
    """Per-channel pooled flow vectors phi2(GuidedPool(phi1(flow), mask)).

    flow: (B, 2, H, W); masks: (B, C, H, W). Returns pooled vectors
    (B, C, 2) and a (B, C) bool flag marking degenerate channels, which
    pool to the zero vector.
    """
    flow, squeeze = _batched(flow, 3)
    masks, _ = _batched(masks, 3)
    B, _, H, W = flow.shape
    v = flow.permute(0, 2, 3, 1).reshape(B, H * W, 2)
    v = phi1(v) if phi1 is not None else v
    m = masks.reshape(B, masks.shape[1], -1)
    num = torch.einsum("bnk,bcn->bck", v, m)
    den = m.sum(-1)
    degenerate = den <= eps
    pooled = num / den.clamp_min(eps).unsqueeze(-1)
    pooled = phi2(pooled) if phi2 is not None else pooled
    pooled = torch.where(degenerate.unsqueeze(-1), torch.zeros_like(pooled), pooled)
    if squeeze:
        return pooled[0], degenerate[0]
    return pooled, degenerate


def broadcast_flows(pooled, masks):
    """Sum of per-channel constant flows weighted by the soft masks.

    pooled: (B, C, 2); masks: (B, C, H, W) -> (B, 2, H, W).
    """
    pooled, squeeze = _batched(pooled, 2)
    masks, _ = _batched(masks, 3)
    out = torch.einsum("bck,bchw->bkhw", pooled, masks)
    return out[0] if squeeze else out


def compose_residual(stack, masks):
    """Blend a per-channel flow stack (B, C, 2, H, W) with the masks."""
    stack, squeeze = _batched(stack, 4)
    masks, _ = _batched(masks, 3)
    out = torch.einsum("bckhw,bchw->bkhw", stack, masks)
    return out[0] if squeeze else out


def reconstruct_flow(masks, pooled, stack, variant="pixelwise"):
    """Compose the constant pathway with the extra pathway.

    Returns (piecewise, residual, total) with total = piecewise + residual
    holding exactly. For the scaling variant the stack carries per-pixel
    multipliers and the residual is piecewise * (blended multiplier - 1);
    for "none" the residual is zero.
    """
    if variant not in RESIDUAL_VARIANTS:
        raise ValueError(f"unknown residual variant {variant!r}")
    piecewise = broadcast_flows(pooled, masks)
    if variant == "none" or stack is None:
        residual = torch.zeros_like(piecewise)
    elif variant == "scaling":
        scale = compose_residual(stack, masks)
        residual = piecewise * (scale - 1.0)
    else:
        residual = compose_residual(stack, masks)
    return piecewise, residual, piecewise + residual


def motion_loss(total, target):
    """Mean over pixels of the per-pixel L1 norm |d dx| + |d dy|."""
    return (total - target).abs().sum(-3).mean()


def direction_loss(masks, stack, target_flow, phi1, phi2, variant="pixelwise"):
    """Stage-1 loss for one direction; returns (loss, (piecewise, residual, total))."""
    pooled, _ = pool_channel_flows(target_flow, masks, phi1, phi2)
    recon = reconstruct_flow(masks, pooled, stack, variant)
    return motion_loss(recon[2], target_flow), recon


def symmetric_motion_loss(model, frames_t, frames_t1, flow_fwd, flow_bwd=None):
    """Forward plus backward motion loss for a batch of frame pairs.

    Backbone features are computed once per frame and shared between the
    two directions. A missing backward flow falls back to forward-only
    with a warning.
    """
    out = model.pair_forward(frames_t, frames_t1)
    loss, _ = direction_loss(out["masks_t"], out["stack_fwd"], flow_fwd,
                             model.phi1, model.phi2, model.residual_variant)
    if flow_bwd is None:
        warnings.warn("backward flow unavailable; using forward-only motion loss")
        return loss
    loss_b, _ = direction_loss(out["masks_t1"], out["stack_bwd"], flow_bwd,
                               model.phi1, model.phi2, model.residual_variant)
    return loss + loss_b
