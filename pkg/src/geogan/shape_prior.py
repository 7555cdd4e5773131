"""Pairwise inter-label geometry prior.

One convolutional classifier scores ordered label pairs presented as two
binary maps plus a constant pair-id encoding. Pretrained to separate true
arrangements from corrupted ones (a map under a wrong nominal label, or a
displaced map), it yields a per-mask shape score: the mean pair probability
over all n(n-1) ordered pathology-label pairs. The trained model is frozen;
scoring is pure. A soft-input path keeps the score differentiable with
respect to per-pixel label probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import LabelScheme
from .nets import PairClassifier

__all__ = [
    "PairMap",
    "ShapePriorConfig",
    "ordered_label_pairs",
    "extract_pair_maps",
    "pretrain_shape_prior",
    "pairwise_probability",
    "shape_score",
    "shape_score_soft",
    "score_pairs",
    "save_shape_prior",
    "load_shape_prior",
]


@dataclass(frozen=True)
class PairMap:
    """Binary maps of one ordered label pair, other labels as background."""

    map_i: np.ndarray
    map_j: np.ndarray
    i: int
    j: int

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError(f"pair labels must differ, got ({self.i}, {self.j})")
        if self.map_i.shape != self.map_j.shape:
            raise ValueError(
                f"pair maps differ in shape: {self.map_i.shape} vs {self.map_j.shape}"
            )
        for m in (self.map_i, self.map_j):
            if not np.isin(m, (0, 1)).all():
                raise ValueError("pair maps must be binary")


@dataclass(frozen=True)
class ShapePriorConfig:
    epochs: int = 30
    batch: int = 16
    lr: float = 1e-3
    width: int = 16
    n_blocks: int = 4
    shift_frac: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 < self.shift_frac <= 0.5:
            raise ValueError("shift_frac must lie in (0, 0.5]")


def ordered_label_pairs(scheme: LabelScheme) -> list[tuple[int, int]]:
    """All n(n-1) ordered pairs over the non-background labels."""
    labels = scheme.pathology_labels
    if len(labels) < 2:
        raise ValueError(
            f"pairwise geometry needs >= 2 non-background labels, got {len(labels)}"
        )
    return [(i, j) for i in labels for j in labels if i != j]


def extract_pair_maps(mask: np.ndarray, scheme: LabelScheme) -> list[PairMap]:
    """Every ordered pair as two binary maps; absent labels give empty maps."""
    planes = {k: (mask == k).astype(np.uint8) for k in scheme.pathology_labels}
    return [PairMap(planes[i], planes[j], i, j) for i, j in ordered_label_pairs(scheme)]


def _shift(plane: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate with zero fill (no wraparound)."""
    out = np.zeros_like(plane)
    h, w = plane.shape
    out[max(0, dy) : min(h, h + dy), max(0, dx) : min(w, w + dx)] = \
        plane[max(0, -dy) : min(h, h - dy), max(0, -dx) : min(w, w - dx)]
    return out


def _nonzero_shift(rng: np.random.Generator, extent: int, frac: float) -> int:
    lo = max(1, int(round(0.1 * extent)))
    hi = max(lo + 1, int(round(frac * extent)))
    return int(rng.integers(lo, hi)) * (1 if rng.integers(2) else -1)


def _training_records(
    masks: list[np.ndarray], scheme: LabelScheme, config: ShapePriorConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Positive pairs from real masks plus two corruptions per positive."""
    rng = np.random.default_rng(config.seed)
    maps, ids, targets = [], [], []
    for mask in masks:
        for pair in extract_pair_maps(mask, scheme):
            if not (pair.map_i.any() and pair.map_j.any()):
                continue
            maps.append(np.stack([pair.map_i, pair.map_j]))
            ids.append((pair.i, pair.j))
            targets.append(1.0)
            # corruption 1: map_j claimed to be label i (and vice versa)
            maps.append(np.stack([pair.map_j, pair.map_i]))
            ids.append((pair.i, pair.j))
            targets.append(0.0)
            # corruption 2: map_i displaced, breaking the arrangement
            h, w = pair.map_i.shape
            shifted = _shift(pair.map_i,
                             _nonzero_shift(rng, h, config.shift_frac),
                             _nonzero_shift(rng, w, config.shift_frac))
            maps.append(np.stack([shifted, pair.map_j]))
            ids.append((pair.i, pair.j))
            targets.append(0.0)
    if not targets:
        raise ValueError("no label pair with both maps non-empty in any mask")
    return (
        torch.tensor(np.stack(maps), dtype=torch.float32),
        torch.tensor(ids, dtype=torch.long),
        torch.tensor(targets, dtype=torch.float32),
    )


def pretrain_shape_prior(
    masks: list[np.ndarray], scheme: LabelScheme, config: ShapePriorConfig,
) -> tuple[PairClassifier, list[float]]:
    """Train the pair classifier on true-vs-corrupted arrangements, then freeze."""
    x, pair_ids, y = _training_records(masks, scheme, config)

    torch.manual_seed(config.seed)
    model = PairClassifier(scheme.n, config.width, config.n_blocks)
    opt = torch.optim.Adam(model.parameters(), config.lr)
    gen = torch.Generator().manual_seed(config.seed + 1)

    trace: list[float] = []
    for _epoch in range(config.epochs):
        order = torch.randperm(len(y), generator=gen)
        for start in range(0, len(y), config.batch):
            idx = order[start : start + config.batch]
            logits = model(x[idx], pair_ids[idx])
            loss = nn.functional.binary_cross_entropy_with_logits(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.append(float(loss.detach()))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, trace


def pairwise_probability(model: PairClassifier, pair: PairMap) -> float:
    """Probability that pair.map_i genuinely is label i given companion j."""
    model.eval()
    maps = torch.tensor(
        np.stack([pair.map_i, pair.map_j])[None], dtype=torch.float32
    )
    ids = torch.tensor([[pair.i, pair.j]], dtype=torch.long)
    with torch.no_grad():
        return float(torch.sigmoid(model(maps, ids))[0])


def score_pairs(
    model: PairClassifier, mask: np.ndarray, scheme: LabelScheme,
) -> list[tuple[int, int, float]]:
    """(i, j, probability) for every ordered pair of the mask."""
    return [
        (pair.i, pair.j, pairwise_probability(model, pair))
        for pair in extract_pair_maps(mask, scheme)
    ]


def shape_score(model: PairClassifier, mask: np.ndarray,
                scheme: LabelScheme) -> float:
    """Mean pairwise probability over all n(n-1) ordered pairs."""
    probs = [p for _, _, p in score_pairs(model, mask, scheme)]
    return float(np.mean(probs))


def shape_score_soft(
    model: PairClassifier, label_probs: torch.Tensor, scheme: LabelScheme,
) -> torch.Tensor:
    """Differentiable score on per-pixel label probabilities.

    label_probs: (B, n_labels, H, W), channel k = probability of label k.
    Returns (B,) scores; gradients flow to label_probs, not to the model.
    """
    if label_probs.shape[1] != scheme.n:
        raise ValueError(
            f"expected {scheme.n} label channels, got {label_probs.shape[1]}"
        )
    model.eval()
    pairs = ordered_label_pairs(scheme)
    b = label_probs.shape[0]
    stacks = torch.cat(
        [torch.stack([label_probs[:, i], label_probs[:, j]], dim=1)
         for i, j in pairs]
    )  # (P*B, 2, H, W), pair-major
    ids = torch.tensor(pairs, dtype=torch.long).repeat_interleave(b, dim=0)
    probs = torch.sigmoid(model(stacks, ids)).reshape(len(pairs), b)
    return probs.mean(dim=0)


# ------------------------------------------------------------- persistence
def save_shape_prior(model: PairClassifier, scheme: LabelScheme,
                     path: Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "state_dict": model.state_dict(),
            "scheme_digest": scheme.digest(),
            "n_labels": model.n_labels,
            "width": model.scorer.blocks[0][0].out_channels,
            "n_blocks": len(model.scorer.blocks),
        },
        path,
    )


def load_shape_prior(path: Path, scheme: LabelScheme) -> PairClassifier:
    blob = torch.load(path, weights_only=True)
    if blob["scheme_digest"] != scheme.digest():
        raise ValueError(
            f"checkpoint was trained under scheme {blob['scheme_digest']}, "
            f"current scheme is {scheme.digest()}"
        )
    model = PairClassifier(blob["n_labels"], blob["width"], blob["n_blocks"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
