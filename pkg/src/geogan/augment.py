"""Synthetic dataset production from a trained synthesis stack.

Each base (image, mask) yields new samples: the localizer proposes an affine
for the base and target condition, image and mask are warped, and the latent
decoder resamples the warped mask under prior-drawn latents. Every sample's
condition equals its base's class; the `balance` policy equalizes output
class counts by allocating draws across bases rather than by flipping
conditions, since the image intensities always come from the base. Samples
conditioned not-infected carry empty masks by construction.
"""

from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import Dataset, ImageSample, LabelScheme, save_dataset
from .gan import generate
from .nets import HierarchicalMaskGenerator, StnLocalizer
from .stn import AffineTransform, predict_affine, warp_image, warp_mask

__all__ = [
    "AugmentationPlan",
    "ProvenanceRow",
    "generate_samples",
    "augment_samples",
    "build_augmented_dataset",
]


@dataclass(frozen=True)
class AugmentationPlan:
    """How many draws per base and how conditions are allocated."""

    samples_per_base: int = 2
    policy: str = "preserve"
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_base < 1:
            raise ValueError("samples_per_base must be >= 1")
        if self.policy not in ("preserve", "balance"):
            raise ValueError(
                f"policy must be 'preserve' or 'balance', got {self.policy!r}"
            )


@dataclass(frozen=True)
class ProvenanceRow:
    """One output sample's origin; affine is empty for real rows."""

    sample_id: str
    origin: str  # "real" | "synthetic"
    base_id: str
    condition: int
    affine: tuple[float, ...]  # 6 row-major matrix entries, () for real


def _derived_generator(seed: int, *parts) -> torch.Generator:
    text = "/".join([str(seed), *map(str, parts)])
    value = int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")
    return torch.Generator().manual_seed(value % 2**63)


def generate_samples(
    generator: HierarchicalMaskGenerator,
    stn: StnLocalizer,
    scheme: LabelScheme,
    base: ImageSample,
    plan: AugmentationPlan,
    n_draws: int | None = None,
    use_sampling: bool = True,
) -> tuple[list[ImageSample], list[ProvenanceRow]]:
    """Draw `n_draws` (default samples_per_base) new samples from one base.

    Every draw keeps the base's condition; per-draw random streams derive
    from (plan.seed, base id, draw index), so bases are independent.
    """
    if n_draws is None:
        n_draws = plan.samples_per_base
    cond = base.class_label
    cond_onehot = np.zeros(2, dtype=np.float32)
    cond_onehot[cond] = 1.0

    # one affine per (base, condition): the localizer is deterministic, so
    # sample diversity comes from the latent draws
    affine = predict_affine(stn, base.mask, cond_onehot, scheme.n)
    x_w = warp_image(base.image, affine)
    s_w = warp_mask(base.mask, affine)

    out_samples: list[ImageSample] = []
    out_rows: list[ProvenanceRow] = []
    for k in range(n_draws):
        rng = _derived_generator(plan.seed, base.id, k)
        _, probs, _ = generate(
            generator,
            torch.tensor(x_w, dtype=torch.float32)[None, None],
            torch.tensor(s_w, dtype=torch.long)[None],
            torch.tensor([cond]),
            sampled_from="prior",
            use_sampling=use_sampling,
            rng=rng,
        )
        mask = probs[0].argmax(dim=0).numpy().astype(np.int64)
        if cond == 0:
            mask[:] = 0  # a not-infected sample must carry an empty mask
        sample = ImageSample(f"{base.id}-g{k}", x_w, mask, cond)
        sample.validate(scheme)
        out_samples.append(sample)
        out_rows.append(ProvenanceRow(
            sample.id, "synthetic", base.id, cond,
            tuple(float(v) for v in affine.matrix.reshape(-1)),
        ))
    return out_samples, out_rows


def _draws_per_base(bases: list[ImageSample], plan: AugmentationPlan) -> list[int]:
    """Allocate plan.samples_per_base * len(bases) draws across bases.

    preserve: uniform. balance: skew draws toward the class that leaves the
    final dataset (real + synthetic) closest to an even class split.
    """
    total = plan.samples_per_base * len(bases)
    if plan.policy == "preserve":
        return [plan.samples_per_base] * len(bases)

    infected = [k for k, b in enumerate(bases) if b.class_label == 1]
    clean = [k for k, b in enumerate(bases) if b.class_label == 0]
    if not infected or not clean:
        warnings.warn("single-class bases: balance policy degenerates to preserve")
        return [plan.samples_per_base] * len(bases)

    n1 = len(infected)
    n0 = len(clean)
    # choose synth_1 so n1 + synth_1 == n0 + (total - synth_1), clamped
    synth_1 = max(0, min(total, round((total + n0 - n1) / 2)))
    counts = [0] * len(bases)
    for j in range(synth_1):
        counts[infected[j % len(infected)]] += 1
    for j in range(total - synth_1):
        counts[clean[j % len(clean)]] += 1
    return counts


def augment_samples(
    generator: HierarchicalMaskGenerator,
    stn: StnLocalizer,
    scheme: LabelScheme,
    bases: list[ImageSample],
    plan: AugmentationPlan,
    use_sampling: bool = True,
) -> tuple[list[ImageSample], list[ProvenanceRow]]:
    """All real samples plus their synthetic draws, with total provenance."""
    rows = [
        ProvenanceRow(b.id, "real", "", b.class_label, ()) for b in bases
    ]
    out = list(bases)
    for base, n_draws in zip(bases, _draws_per_base(bases, plan)):
        if n_draws == 0:
            continue
        samples, prov = generate_samples(
            generator, stn, scheme, base, plan, n_draws, use_sampling
        )
        out.extend(samples)
        rows.extend(prov)
    return out, rows


def write_provenance(rows: list[ProvenanceRow], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "origin", "base_id", "condition",
                         "a00", "a01", "a02", "a10", "a11", "a12"])
        for r in rows:
            affine = [f"{v:.8f}" for v in r.affine] if r.affine else [""] * 6
            writer.writerow([r.sample_id, r.origin, r.base_id, r.condition, *affine])


def build_augmented_dataset(
    generator: HierarchicalMaskGenerator,
    stn: StnLocalizer,
    scheme: LabelScheme,
    bases: list[ImageSample],
    plan: AugmentationPlan,
    out_root: Path,
    use_sampling: bool = True,
) -> Dataset:
    """Write real + synthetic samples as a dataset tree plus provenance.csv."""
    out_root = Path(out_root)
    if not bases:
        warnings.warn("no base samples: writing an empty augmented dataset")
        dataset = Dataset(scheme=scheme, splits={"train": []})
        save_dataset(dataset, out_root)
        write_provenance([], out_root / "provenance.csv")
        return dataset
    samples, rows = augment_samples(
        generator, stn, scheme, bases, plan, use_sampling
    )
    dataset = Dataset(scheme=scheme, splits={"train": samples})
    save_dataset(dataset, out_root)
    write_provenance(rows, out_root / "provenance.csv")
    return dataset
