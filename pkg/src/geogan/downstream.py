"""Consumers of the augmented data: pixel segmentation and image classification.

Both trainers are plain cross-entropy loops over (real + synthetic) samples
with equal weighting, step-level loss traces, and full seed determinism.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import ImageSample, LabelScheme
from .nets import NestedUNet, SmallClassifier

__all__ = [
    "DownstreamConfig",
    "train_segmenter",
    "segment",
    "train_classifier",
    "classify",
]


@dataclass(frozen=True)
class DownstreamConfig:
    epochs: int = 20
    batch: int = 8
    lr: float = 1e-3
    width: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


def _image_tensor(samples: list[ImageSample]) -> torch.Tensor:
    return torch.tensor(
        np.stack([s.image for s in samples]), dtype=torch.float32
    )[:, None]


def train_segmenter(
    samples: list[ImageSample], scheme: LabelScheme, config: DownstreamConfig,
) -> tuple[nn.Module, list[float]]:
    """Pixelwise cross-entropy over the samples' masks; absent labels warned."""
    if not samples:
        raise ValueError("segmenter training needs at least one sample")
    x = _image_tensor(samples)
    y = torch.tensor(np.stack([s.mask for s in samples]), dtype=torch.long)
    present = sorted(int(v) for v in torch.unique(y))
    if len(present) < 2:
        warnings.warn(f"single-label dataset (labels {present}); nothing to separate")

    torch.manual_seed(config.seed)
    net = NestedUNet(1, scheme.n, config.width)
    opt = torch.optim.Adam(net.parameters(), config.lr)
    order_rng = torch.Generator().manual_seed(config.seed + 1)

    trace: list[float] = []
    for _epoch in range(config.epochs):
        order = torch.randperm(len(samples), generator=order_rng)
        for start in range(0, len(samples), config.batch):
            idx = order[start : start + config.batch]
            loss = F.cross_entropy(net(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise RuntimeError(f"segmenter loss diverged at step {len(trace)}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.append(float(loss.detach()))
    net.eval()
    return net, trace


def segment(net: nn.Module, image: np.ndarray) -> np.ndarray:
    """Per-pixel argmax label map for one H×W image."""
    h, w = image.shape
    if h % 4 or w % 4:
        raise ValueError(f"image dims {h}x{w} must be divisible by 4")
    net.eval()
    with torch.no_grad():
        logits = net(torch.tensor(image, dtype=torch.float32)[None, None])
    return logits[0].argmax(dim=0).numpy().astype(np.int64)


def train_classifier(
    samples: list[ImageSample], config: DownstreamConfig,
) -> tuple[nn.Module, list[float]]:
    """Binary cross-entropy on class labels; model emits an infection logit."""
    labels = sorted({s.class_label for s in samples})
    if len(labels) < 2:
        raise ValueError(f"classifier training needs both classes, got {labels}")
    x = _image_tensor(samples)
    y = torch.tensor([float(s.class_label) for s in samples])

    torch.manual_seed(config.seed)
    net = SmallClassifier(config.width)
    opt = torch.optim.Adam(net.parameters(), config.lr)
    order_rng = torch.Generator().manual_seed(config.seed + 1)

    trace: list[float] = []
    for _epoch in range(config.epochs):
        order = torch.randperm(len(samples), generator=order_rng)
        for start in range(0, len(samples), config.batch):
            idx = order[start : start + config.batch]
            loss = F.binary_cross_entropy_with_logits(net(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise RuntimeError(f"classifier loss diverged at step {len(trace)}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.append(float(loss.detach()))
    net.eval()
    return net, trace


def classify(net: nn.Module, image: np.ndarray) -> float:
    """P(infected) for one H×W image."""
    h, w = image.shape
    if min(h, w) < 8:
        raise ValueError(f"image dims {h}x{w} too small to score")
    net.eval()
    with torch.no_grad():
        logit = net(torch.tensor(image, dtype=torch.float32)[None, None])
    return float(torch.sigmoid(logit)[0])
