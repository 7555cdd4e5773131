"""Shared network blocks: instance scorers, pair classifier, STN localizer,
hierarchical-latent mask generator, discriminator, and downstream models.

All models are CPU-friendly toy-scale networks; widths and depths are
constructor arguments so experiment configs can trade capacity for runtime.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F


def conv_block(in_ch: int, out_ch: int, norm: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(in_ch, out_ch, 3, padding=1)]
    if norm:
        layers.append(nn.BatchNorm2d(out_ch))
    layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class SmallConvScorer(nn.Module):
    """Stacked conv blocks with pooling where space allows, then GAP + linear.

    Works down to 4x4 inputs: pooling stops once either side would reach 1.
    """

    def __init__(self, in_ch: int = 1, width: int = 16, n_blocks: int = 4,
                 n_out: int = 1):
        super().__init__()
        chans = [in_ch] + [min(width * 2**k, width * 4) for k in range(n_blocks)]
        self.blocks = nn.ModuleList(
            conv_block(chans[k], chans[k + 1]) for k in range(n_blocks)
        )
        self.head = nn.Linear(chans[-1], n_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
            if min(x.shape[-2:]) >= 4:
                x = F.max_pool2d(x, 2)
        x = x.mean(dim=(-2, -1))
        return self.head(x)


class PairClassifier(nn.Module):
    """Scores a 2-channel label-pair map stack plus a constant pair-id encoding.

    The head is zero-initialized so an untrained model scores 0.5 everywhere.
    """

    def __init__(self, n_labels: int, width: int = 16, n_blocks: int = 4):
        super().__init__()
        self.n_labels = n_labels  # including background
        n_path = n_labels - 1
        self.scorer = SmallConvScorer(2 + 2 * n_path, width, n_blocks, n_out=1)
        nn.init.zeros_(self.scorer.head.weight)
        nn.init.zeros_(self.scorer.head.bias)

    def forward(self, maps: torch.Tensor, pair_ids: torch.Tensor) -> torch.Tensor:
        """maps: (B,2,H,W); pair_ids: (B,2) integer labels (i, j), 1-based."""
        b, _, h, w = maps.shape
        n_path = self.n_labels - 1
        onehot = torch.zeros(b, 2 * n_path, device=maps.device, dtype=maps.dtype)
        onehot[torch.arange(b), pair_ids[:, 0] - 1] = 1.0
        onehot[torch.arange(b), n_path + pair_ids[:, 1] - 1] = 1.0
        id_planes = onehot[:, :, None, None].expand(b, 2 * n_path, h, w)
        return self.scorer(torch.cat([maps, id_planes], dim=1)).squeeze(-1)


class StnLocalizer(nn.Module):
    """Predicts 6 unconstrained affine parameters from (mask one-hot, condition).

    The final layer is zero-initialized so the squashed transform starts at
    the exact identity.
    """

    def __init__(self, n_labels: int, n_classes: int = 2, width: int = 12):
        super().__init__()
        in_ch = n_labels + n_classes
        self.encoder = nn.Sequential(
            nn.Conv2d(in_ch, width, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width * 2, width * 2, 3, stride=2, padding=1), nn.ReLU(inplace=True),
        )
        self.fc = nn.Sequential(
            nn.Linear(width * 2, width * 2), nn.ReLU(inplace=True),
            nn.Linear(width * 2, 6),
        )
        nn.init.zeros_(self.fc[-1].weight)
        nn.init.zeros_(self.fc[-1].bias)

    def forward(self, mask_onehot: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b, _, h, w = mask_onehot.shape
        cond_planes = cond[:, :, None, None].expand(b, cond.shape[1], h, w)
        feats = self.encoder(torch.cat([mask_onehot, cond_planes], dim=1))
        return self.fc(feats.mean(dim=(-2, -1)))


class _LatentCore(nn.Module):
    """Conv encoder plus coarse-to-fine Gaussian heads for L spatial latents.

    Latent level l (1-based) lives at resolution r / 2^(l-1); heads are applied
    from the coarsest level upward, each conditioned on the upsampled sample
    from the level below (prior/posterior share this topology).
    """

    def __init__(self, in_ch: int, latent_levels: int, width: int, z_ch: int = 1):
        super().__init__()
        self.latent_levels = latent_levels
        self.z_ch = z_ch
        chans = [min(width * 2**k, width * 4) for k in range(latent_levels)]
        self.stem = conv_block(in_ch, width)
        self.downs = nn.ModuleList(
            conv_block(chans[k], chans[min(k + 1, latent_levels - 1)])
            for k in range(latent_levels - 1)
        )
        self.heads = nn.ModuleList()
        for k in range(latent_levels):
            extra = z_ch if k < latent_levels - 1 else 0
            self.heads.append(nn.Conv2d(chans[k] + extra, 2 * z_ch, 3, padding=1))

    def feature_pyramid(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = [self.stem(x)]
        for down in self.downs:
            feats.append(down(F.avg_pool2d(feats[-1], 2)))
        return feats

    def gaussians(
        self, x: torch.Tensor, samples: list[torch.Tensor] | None = None,
        sample: bool = True, generator: torch.Generator | None = None,
    ) -> tuple[list[torch.Tensor], list[torch.Tensor], list[torch.Tensor]]:
        """Returns per-level (mu, sigma, z), index 0 = level 1 (finest).

        `samples`: reuse these z values instead of drawing (posterior-guided
        decoding passes posterior samples through the prior for the KL).
        """
        feats = self.feature_pyramid(x)
        mus: list = [None] * self.latent_levels
        sigmas: list = [None] * self.latent_levels
        zs: list = [None] * self.latent_levels
        for k in range(self.latent_levels - 1, -1, -1):
            feat = feats[k]
            if k < self.latent_levels - 1:
                feat = torch.cat([feat, F.interpolate(zs[k + 1], scale_factor=2)], dim=1)
            params = self.heads[k](feat)
            mu, raw = params[:, : self.z_ch], params[:, self.z_ch :]
            sigma = F.softplus(raw) + 1e-5
            if samples is not None:
                z = samples[k]
            elif sample:
                noise = torch.empty_like(mu)
                noise.normal_(generator=generator)
                z = mu + sigma * noise
            else:
                z = mu
            mus[k], sigmas[k], zs[k] = mu, sigma, z
        return mus, sigmas, zs


class HierarchicalMaskGenerator(nn.Module):
    """U-Net over (image, mask one-hot, condition) with spatial latents injected
    on the decoder path at the L finest resolutions.

    resolution_levels counts the encoder scales (input downsampled by
    2^(resolution_levels-1) at the bottleneck); latent level l has spatial
    shape (r_x / 2^(l-1), r_y / 2^(l-1)).
    """

    def __init__(self, n_labels: int, n_classes: int = 2, resolution_levels: int = 6,
                 latent_levels: int = 4, width: int = 12, z_ch: int = 1):
        super().__init__()
        if latent_levels > resolution_levels:
            raise ValueError("latent levels cannot exceed resolution levels")
        self.n_labels = n_labels
        self.resolution_levels = resolution_levels
        self.latent_levels = latent_levels
        self.z_ch = z_ch

        trunk_in = 1 + n_labels + n_classes
        chans = [min(width * 2**k, width * 4) for k in range(resolution_levels)]
        self.enc = nn.ModuleList()
        for k in range(resolution_levels):
            self.enc.append(conv_block(trunk_in if k == 0 else chans[k - 1], chans[k]))
        self.dec = nn.ModuleList()
        for k in range(resolution_levels - 2, -1, -1):
            extra = z_ch if k < latent_levels else 0
            self.dec.append(conv_block(chans[k + 1] + chans[k] + extra, chans[k]))
        self.out_head = nn.Conv2d(chans[0], n_labels, 1)

        self.prior = _LatentCore(1 + n_classes, latent_levels, width, z_ch)
        self.posterior = _LatentCore(1 + n_classes + n_labels, latent_levels, width, z_ch)

    def check_dims(self, h: int, w: int) -> None:
        div = 2 ** (self.resolution_levels - 1)
        if h % div or w % div:
            raise ValueError(f"dims {h}x{w} not divisible by {div}")

    def trunk_logits(self, x: torch.Tensor, s_onehot: torch.Tensor,
                     cond: torch.Tensor, zs: list[torch.Tensor]) -> torch.Tensor:
        b, _, h, w = x.shape
        self.check_dims(h, w)
        cond_planes = cond[:, :, None, None].expand(b, cond.shape[1], h, w)
        feat = torch.cat([x, s_onehot, cond_planes], dim=1)
        skips = []
        for k, enc in enumerate(self.enc):
            feat = enc(feat if k == 0 else F.avg_pool2d(feat, 2))
            skips.append(feat)
        for i, dec in enumerate(self.dec):
            k = self.resolution_levels - 2 - i  # encoder scale being restored
            feat = F.interpolate(feat, scale_factor=2)
            parts = [feat, skips[k]]
            if k < self.latent_levels:
                parts.append(zs[k])
            feat = dec(torch.cat(parts, dim=1))
        return self.out_head(feat)


class Discriminator(nn.Module):
    """5-layer strided conv encoder over an (image, mask) channel stack with a
    real/fake head and an auxiliary class head."""

    def __init__(self, n_labels: int, n_classes: int = 2, width: int = 12):
        super().__init__()
        chans = [width, width * 2, width * 4, width * 4, width * 4]
        layers: list[nn.Module] = []
        in_ch = 1 + n_labels
        for c in chans:
            layers += [nn.Conv2d(in_ch, c, 3, stride=2, padding=1),
                       nn.BatchNorm2d(c), nn.LeakyReLU(0.2, inplace=True)]
            in_ch = c
        self.encoder = nn.Sequential(*layers)
        self.adv_head = nn.Linear(in_ch, 1)
        self.class_head = nn.Linear(in_ch, n_classes)

    def forward(self, pair: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feat = self.encoder(pair).mean(dim=(-2, -1))
        return self.adv_head(feat).squeeze(-1), self.class_head(feat)


class NestedUNet(nn.Module):
    """3-scale encoder-decoder with nested skip connections, capped well under
    0.5M parameters at the default width."""

    def __init__(self, in_ch: int = 1, n_labels: int = 4, width: int = 14):
        super().__init__()
        c0, c1, c2 = width, width * 2, width * 4
        self.x00 = conv_block(in_ch, c0)
        self.x10 = conv_block(c0, c1)
        self.x20 = conv_block(c1, c2)
        self.x01 = conv_block(c0 + c1, c0)
        self.x11 = conv_block(c1 + c2, c1)
        self.x02 = conv_block(c0 + c0 + c1, c0)
        self.head = nn.Conv2d(c0, n_labels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f00 = self.x00(x)
        f10 = self.x10(F.avg_pool2d(f00, 2))
        f20 = self.x20(F.avg_pool2d(f10, 2))
        up10 = F.interpolate(f10, scale_factor=2)
        f01 = self.x01(torch.cat([f00, up10], dim=1))
        up20 = F.interpolate(f20, scale_factor=2)
        f11 = self.x11(torch.cat([f10, up20], dim=1))
        up11 = F.interpolate(f11, scale_factor=2)
        f02 = self.x02(torch.cat([f00, f01, up11], dim=1))
        return self.head(f02)


class SmallClassifier(nn.Module):
    """Image-level binary classifier emitting a single infection logit.

    The head is zero-initialized so an untrained model scores 0.5 everywhere.
    """

    def __init__(self, width: int = 16, n_blocks: int = 4):
        super().__init__()
        self.scorer = SmallConvScorer(1, width, n_blocks, n_out=1)
        nn.init.zeros_(self.scorer.head.weight)
        nn.init.zeros_(self.scorer.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.scorer(x).squeeze(-1)


def count_parameters(model: nn.Module) -> int:
    return sum(int(np.prod(p.shape)) for p in model.parameters())
