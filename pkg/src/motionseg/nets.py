"""Trainable networks and the frozen auxiliary feature provider.

The encoder is a small residual-style convnet: a strided stem, an early
block at stride 4 and two late blocks at stride 8. With feature merging
the segmentation input is the early block concatenated with the
upsampled late block (stride 4 overall); without it, the late block
alone (stride 8). Heads are three Conv-BN-ReLU layers plus a 1x1
projection, as in the reference design, with a configurable width.
"""

import cv2
import numpy as np
import torch
from scipy import ndimage
from torch import nn
from torch.nn import functional as F

from .motion import VectorMLP, guided_pool


def _conv_bn_relu(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class _ResBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                                      nn.BatchNorm2d(cout))

    def forward(self, x):
        out = self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))
        return F.relu(out + (self.skip(x) if self.skip is not None else x))


class Backbone(nn.Module):
    """Shared encoder; returns (merged-or-late, late) feature maps."""

    total_stride = 8  # inputs must be divisible by this

    def __init__(self, channels=(16, 32, 64, 64), merge=True):
        super().__init__()
        c0, c1, c2, c3 = channels
        self.stem = _conv_bn_relu(3, c0, stride=2)
        self.block1 = _ResBlock(c0, c1, stride=2)
        self.block2 = _ResBlock(c1, c2, stride=2)
        self.block3 = _ResBlock(c2, c3, stride=1)
        self.merge = merge
        self.early_channels = c1
        self.late_channels = c3
        self.out_channels = c1 + c3 if merge else c3
        self.stride = 4 if merge else 8

    def forward(self, x):
        if x.shape[-1] % self.total_stride or x.shape[-2] % self.total_stride:
            raise ValueError(
                f"input {tuple(x.shape[-2:])} not divisible by stride {self.total_stride}"
            )
        early = self.block1(self.stem(x))
        late = self.block3(self.block2(early))
        if not self.merge:
            return late, late
        up = F.interpolate(late, size=early.shape[-2:], mode="bilinear", align_corners=False)
        return torch.cat([early, up], dim=1), late


class SegHead(nn.Module):
    """Three Conv-BN-ReLU layers and a 1x1 projection to C channels,
    softmax-normalized across channels per pixel."""

    def __init__(self, cin, num_channels=4, hidden=64):
        super().__init__()
        self.body = nn.Sequential(
            _conv_bn_relu(cin, hidden),
            _conv_bn_relu(hidden, hidden),
            _conv_bn_relu(hidden, hidden),
        )
        self.proj = nn.Conv2d(hidden, num_channels, 1)

    def forward(self, feats):
        return torch.softmax(self.proj(self.body(feats)), dim=1)


class _PairHeadBase(nn.Module):
    """Trunk shared by the pixelwise and scaling pathway heads."""

    def __init__(self, cin, num_channels, hidden):
        super().__init__()
        self.num_channels = num_channels
        self.body = nn.Sequential(
            _conv_bn_relu(cin, hidden),
            _conv_bn_relu(hidden, hidden),
            _conv_bn_relu(hidden, hidden),
        )
        self.proj = nn.Conv2d(hidden, 2 * num_channels, 1)
        # start as the identity pathway: zero residual / unit scale
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def _raw(self, feats_t, feats_t1, out_hw):
        x = self.proj(self.body(torch.cat([feats_t, feats_t1], dim=1)))
        if x.shape[-2:] != tuple(out_hw):
            x = F.interpolate(x, size=tuple(out_hw), mode="bilinear", align_corners=False)
        B = x.shape[0]
        return x.reshape(B, self.num_channels, 2, *out_hw)


def _bounded(x, lam):
    # tanh saturates to exactly +-1 in float arithmetic; clamp a hair inside
    # the open interval so the bound stays strict for any finite input
    return (lam * torch.tanh(x)).clamp(-lam * (1 - 1e-6), lam * (1 - 1e-6))


class ResidualHead(_PairHeadBase):
    """Per-channel pixelwise flow corrections, bounded to (-lam, lam)."""

    def __init__(self, cin, num_channels=4, hidden=64, lam=10.0):
        super().__init__(cin, num_channels, hidden)
        self.lam = lam

    def forward(self, feats_t, feats_t1, out_hw):
        bounded = _bounded(self.proj(self.body(torch.cat([feats_t, feats_t1], 1))), self.lam)
        if bounded.shape[-2:] != tuple(out_hw):
            bounded = F.interpolate(bounded, size=tuple(out_hw), mode="bilinear",
                                    align_corners=False)
        B = bounded.shape[0]
        return bounded.reshape(B, self.num_channels, 2, *out_hw)


class ScalingHead(_PairHeadBase):
    """Per-channel pixelwise flow multipliers in (0, 2), unit at init."""

    def forward(self, feats_t, feats_t1, out_hw):
        return 1.0 + torch.tanh(self._raw(feats_t, feats_t1, out_hw))


class AffineResidualHead(nn.Module):
    """Six affine parameters per channel, evaluated on the mask grid and
    softly bounded to (-lam, lam)."""

    def __init__(self, cin, num_channels=4, hidden=64, lam=10.0):
        super().__init__()
        self.num_channels = num_channels
        self.lam = lam
        self.fc1 = nn.Linear(2 * cin, hidden)
        self.fc2 = nn.Linear(hidden, 6)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, feats_t, feats_t1, masks, out_hw):
        H, W = out_hw
        x = torch.cat([feats_t, feats_t1], dim=1)
        if x.shape[-2:] != (H, W):
            x = F.interpolate(x, size=(H, W), mode="bilinear", align_corners=False)
        B, K = x.shape[:2]
        flat_x = x.reshape(B, K, -1)
        flat_m = masks.reshape(B, self.num_channels, -1)
        den = flat_m.sum(-1).clamp_min(1e-6)
        pooled = torch.einsum("bkn,bcn->bck", flat_x, flat_m) / den.unsqueeze(-1)
        params = self.fc2(torch.relu(self.fc1(pooled)))  # (B, C, 6)
        dev = x.device
        ys = torch.linspace(-1.0, 1.0, H, device=dev, dtype=x.dtype)
        xs = torch.linspace(-1.0, 1.0, W, device=dev, dtype=x.dtype)
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        ones = torch.ones_like(gx)
        basis = torch.stack([ones, gx, gy])  # (3, H, W)
        field = torch.einsum("bckp,phw->bckhw",
                             params.reshape(B, self.num_channels, 2, 3), basis)
        return _bounded(field / self.lam, self.lam)


class SegmentationModel(nn.Module):
    """Backbone, segmentation head, optional extra-pathway head and the
    pre/post pooling vector MLPs, bundled for training."""

    def __init__(self, num_channels=4, lam=10.0, residual="pixelwise",
                 feature_merging=True, backbone_channels=(16, 32, 64, 64),
                 head_hidden=64, mlp_hidden=64):
        super().__init__()
        self.num_channels = num_channels
        self.lam = lam
        self.residual_variant = residual
        self.backbone = Backbone(backbone_channels, merge=feature_merging)
        self.seg_head = SegHead(self.backbone.out_channels, num_channels, head_hidden)
        cin = 2 * self.backbone.late_channels
        if residual == "pixelwise":
            self.pathway_head = ResidualHead(cin, num_channels, head_hidden, lam)
        elif residual == "scaling":
            self.pathway_head = ScalingHead(cin, num_channels, head_hidden)
        elif residual == "affine":
            self.pathway_head = AffineResidualHead(self.backbone.late_channels,
                                                   num_channels, head_hidden, lam)
        elif residual == "none":
            self.pathway_head = None
        else:
            raise ValueError(f"unknown residual variant {residual!r}")
        self.phi1 = VectorMLP(mlp_hidden)
        self.phi2 = VectorMLP(mlp_hidden)

    def features(self, frames):
        return self.backbone(frames)

    def forward_masks(self, frames):
        return self.seg_head(self.backbone(frames)[0])

    def mask_resolution(self, h, w):
        s = self.backbone.stride
        return h // s, w // s

    def _pathway_stacks(self, late_t, late_t1, masks_t, masks_t1, out_hw):
        if self.pathway_head is None:
            return None, None
        if self.residual_variant == "affine":
            return (self.pathway_head(late_t, late_t1, masks_t, out_hw),
                    self.pathway_head(late_t1, late_t, masks_t1, out_hw))
        return (self.pathway_head(late_t, late_t1, out_hw),
                self.pathway_head(late_t1, late_t, out_hw))

    def pair_forward(self, frames_t, frames_t1):
        """Shared-feature forward for a batch of frame pairs."""
        B = frames_t.shape[0]
        feats, late = self.backbone(torch.cat([frames_t, frames_t1], dim=0))
        masks = self.seg_head(feats)
        masks_t, masks_t1 = masks[:B], masks[B:]
        out_hw = masks.shape[-2:]
        stack_fwd, stack_bwd = self._pathway_stacks(late[:B], late[B:],
                                                    masks_t, masks_t1, out_hw)
        return {"masks_t": masks_t, "masks_t1": masks_t1,
                "stack_fwd": stack_fwd, "stack_bwd": stack_bwd}

    @torch.no_grad()
    def predict_masks(self, frame) -> np.ndarray:
        """Eval-mode soft masks (C, H, W) for a single (3, h, w) frame."""
        was_training = self.training
        self.eval()
        x = torch.as_tensor(np.asarray(frame, dtype=np.float32)).unsqueeze(0)
        out = self.forward_masks(x)[0].numpy()
        if was_training:
            self.train()
        return out


def build_model(cfg) -> SegmentationModel:
    """Construct a model from an ExperimentConfig-like object, seeded."""
    torch.manual_seed(cfg.seed)
    return SegmentationModel(
        num_channels=cfg.num_channels,
        lam=cfg.lam,
        residual=cfg.residual,
        feature_merging=cfg.feature_merging,
        backbone_channels=tuple(cfg.backbone_channels),
        head_hidden=cfg.head_hidden,
        mlp_hidden=cfg.mlp_hidden,
    )


class ColorStatsAuxFeatures:
    """Frozen feature provider: windowed Lab mean/variance, unit-normalized.

    Equal local windows produce equal features, so flat regions are
    uniform; regions with different hue or brightness separate under
    cosine similarity. Lightness is centered at mid-gray so that every
    channel is signed; raw L is positive everywhere and would dominate
    the cosine, collapsing the separation.
    """

    name = "color_stats"

    def __init__(self, window=5):
        self.window = window

    def features(self, frame) -> np.ndarray:
        """(6, h, w) unit-normalized features for a (3, h, w) frame in [0,1]."""
        rgb = np.moveaxis(np.asarray(frame, dtype=np.float32), 0, -1)
        lab = cv2.cvtColor(rgb, cv2.COLOR_RGB2Lab)
        lab = lab / np.array([100.0, 110.0, 110.0], dtype=np.float32)
        lab[..., 0] -= 0.5
        chans = []
        for i in range(3):
            m = ndimage.uniform_filter(lab[..., i], size=self.window, mode="nearest")
            m2 = ndimage.uniform_filter(lab[..., i] ** 2, size=self.window, mode="nearest")
            chans.append(m)
            chans.append(np.clip(m2 - m * m, 0.0, None))
        feats = np.stack(chans).astype(np.float64)
        return _unit_normalize(feats)

    def features_at(self, frame, target_hw) -> np.ndarray:
        """Features aligned (area-averaged) to (H, W), then re-normalized."""
        feats = self.features(frame)
        H, W = target_hw
        if feats.shape[1:] == (H, W):
            return feats
        down = np.stack([
            cv2.resize(feats[i].astype(np.float32), (W, H), interpolation=cv2.INTER_AREA)
            for i in range(feats.shape[0])
        ]).astype(np.float64)
        return _unit_normalize(down)


def _unit_normalize(feats, eps=1e-12):
    norm = np.sqrt((feats ** 2).sum(axis=0, keepdims=True))
    return feats / (norm + eps)


AUX_PROVIDERS = {"color_stats": ColorStatsAuxFeatures}


def build_aux_provider(name, window=5):
    """Look up a frozen feature provider by name; None disables it."""
    if name in (None, "none", ""):
        return None
    if name not in AUX_PROVIDERS:
        raise KeyError(f"unknown aux feature provider {name!r}; have {sorted(AUX_PROVIDERS)}")
    return AUX_PROVIDERS[name](window=window)


def cosine_map(feats, query, eps=1e-12) -> np.ndarray:
    """Per-pixel cosine similarity between (K, H, W) features and a K query."""
    q = np.asarray(query, dtype=np.float64)
    qn = np.sqrt((q ** 2).sum())
    fn = np.sqrt((np.asarray(feats, dtype=np.float64) ** 2).sum(axis=0))
    denom = fn * qn
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.tensordot(q, feats, axes=(0, 0)) / np.where(denom < eps, 1.0, denom)
    cos[denom < eps] = 0.0
    return cos
