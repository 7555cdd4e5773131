"""Geometry-aware adversarial synthesis of (image, label map) pairs.

A localizer predicts a bounded affine transform from the source mask and the
target condition; the image is warped by that transform, and a U-Net with a
hierarchy of spatial Gaussian latents resamples the warped mask. A
discriminator with an auxiliary condition head judges (image, mask) stacks.
The generator objective combines the adversarial term with a condition
classification term, an inter-label arrangement penalty from a frozen pair
prior, and the KL of the latent posterior against the prior; the latent
hierarchy is trained as a conditional VAE with a mask reconstruction term.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import ImageSample, LabelScheme
from .nets import Discriminator, HierarchicalMaskGenerator, PairClassifier, StnLocalizer
from .shape_prior import shape_score_soft
from .stn import mask_onehot, predict_affine_batch, warp_image_batch, warp_mask_batch

__all__ = [
    "GeneratorConfig",
    "GaussianParams",
    "LatentHierarchy",
    "TrainState",
    "gaussian_kl",
    "prior_params",
    "posterior_params",
    "generate",
    "adversarial_loss",
    "classification_loss",
    "total_generator_loss",
    "train",
    "write_trace_csv",
    "save_gan",
    "load_gan",
]

N_CLASSES = 2  # binary condition: not-infected / infected


@dataclass(frozen=True)
class GeneratorConfig:
    """Synthesis hyperparameters; lambda1 weights the condition-classification
    term and lambda2 the arrangement term of the generator objective."""

    resolution_levels: int = 6
    latent_levels: int = 4
    lambda1: float = 0.92
    lambda2: float = 0.9
    kl_weight: float = 1.0
    recon_weight: float = 1.0
    lr: float = 1e-3
    batch: int = 16
    steps: int = 600
    width: int = 12
    disc_width: int = 12
    use_class_loss: bool = True
    use_shape_loss: bool = True
    use_sampling: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.latent_levels > self.resolution_levels:
            raise ValueError("latent_levels cannot exceed resolution_levels")
        if self.latent_levels < 1:
            raise ValueError("latent_levels must be >= 1")
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be >= 0")
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be >= 0")
        if self.kl_weight <= 0:
            raise ValueError("kl_weight must be > 0")
        if self.recon_weight < 0:
            raise ValueError("recon_weight must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch < 2:
            raise ValueError("batch must be >= 2")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    def digest(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class GaussianParams:
    """Diagonal Gaussian; sigma strictly positive elementwise."""

    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError(
                f"mu shape {tuple(self.mu.shape)} != sigma shape {tuple(self.sigma.shape)}"
            )
        if not bool((self.sigma > 0).all()):
            raise ValueError("sigma must be positive everywhere")


@dataclass(frozen=True)
class LatentHierarchy:
    """Per-level Gaussians and samples; level l lives at r / 2^(l-1).

    `levels[k]` holds level l = k + 1: a (GaussianParams, z) pair whose
    spatial shape must equal (h / 2^k, w / 2^k) for input dims (h, w).
    """

    levels: tuple[tuple[GaussianParams, torch.Tensor], ...]
    input_dims: tuple[int, int]

    def __post_init__(self):
        h, w = self.input_dims
        for k, (params, z) in enumerate(self.levels):
            want = (h // 2**k, w // 2**k)
            for name, t in (("params", params.mu), ("sample", z)):
                if tuple(t.shape[-2:]) != want:
                    raise ValueError(
                        f"latent level {k + 1} {name} must be {want} "
                        f"for input {h}x{w}, got {tuple(t.shape[-2:])}"
                    )


@dataclass
class TrainState:
    """Step counter and aligned per-term loss traces."""

    step: int = 0
    seed: int = 0
    traces: dict[str, list[float]] = field(
        default_factory=lambda: {
            k: [] for k in ("adv", "class", "shape", "kl", "total", "d_adv", "d_acc")
        }
    )

    def record(self, **terms: float) -> None:
        for key, value in terms.items():
            self.traces[key].append(float(value))
        self.step += 1

    def validate(self) -> None:
        for key, trace in self.traces.items():
            if len(trace) != self.step:
                raise ValueError(f"trace '{key}' has {len(trace)} entries at step {self.step}")


# ------------------------------------------------------------- latent algebra
def gaussian_kl(q: GaussianParams, p: GaussianParams) -> torch.Tensor:
    """Closed-form KL(q || p) of diagonal Gaussians, summed over all elements."""
    if q.mu.shape != p.mu.shape:
        raise ValueError(
            f"KL shapes differ: {tuple(q.mu.shape)} vs {tuple(p.mu.shape)}"
        )
    var_q = q.sigma**2
    var_p = p.sigma**2
    kl = 0.5 * (torch.log(var_p / var_q) + (var_q + (q.mu - p.mu) ** 2) / var_p - 1.0)
    return kl.sum()


def _cond_planes(cond_onehot: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b, c = cond_onehot.shape
    return cond_onehot[:, :, None, None].expand(b, c, h, w)


def _prior_input(x: torch.Tensor, cond_onehot: torch.Tensor) -> torch.Tensor:
    return torch.cat([x, _cond_planes(cond_onehot, *x.shape[-2:])], dim=1)


def _posterior_input(
    x: torch.Tensor, s_onehot: torch.Tensor, cond_onehot: torch.Tensor
) -> torch.Tensor:
    return torch.cat([_prior_input(x, cond_onehot), s_onehot], dim=1)


def _check_level(generator: HierarchicalMaskGenerator, level: int) -> None:
    if not 1 <= level <= generator.latent_levels:
        raise ValueError(
            f"level must lie in [1, {generator.latent_levels}], got {level}"
        )


def prior_params(
    generator: HierarchicalMaskGenerator, x: torch.Tensor,
    cond_onehot: torch.Tensor, level: int,
) -> GaussianParams:
    """Level-`level` prior Gaussian given (image, condition); deterministic."""
    _check_level(generator, level)
    generator.check_dims(*x.shape[-2:])
    with torch.no_grad():
        mus, sigmas, _ = generator.prior.gaussians(
            _prior_input(x, cond_onehot), sample=False
        )
    return GaussianParams(mus[level - 1], sigmas[level - 1])


def posterior_params(
    generator: HierarchicalMaskGenerator, x: torch.Tensor, s_onehot: torch.Tensor,
    cond_onehot: torch.Tensor, level: int,
) -> GaussianParams:
    """Level-`level` posterior Gaussian given (image, mask, condition)."""
    _check_level(generator, level)
    generator.check_dims(*x.shape[-2:])
    with torch.no_grad():
        mus, sigmas, _ = generator.posterior.gaussians(
            _posterior_input(x, s_onehot, cond_onehot), sample=False
        )
    return GaussianParams(mus[level - 1], sigmas[level - 1])


def _hierarchy(
    mus: list[torch.Tensor], sigmas: list[torch.Tensor], zs: list[torch.Tensor],
    dims: tuple[int, int],
) -> LatentHierarchy:
    return LatentHierarchy(
        tuple(
            (GaussianParams(mu, sigma), z) for mu, sigma, z in zip(mus, sigmas, zs)
        ),
        dims,
    )


def generate(
    generator: HierarchicalMaskGenerator,
    x_warped: torch.Tensor,
    s_warped: torch.Tensor,
    cond: torch.Tensor,
    sampled_from: str = "prior",
    use_sampling: bool = True,
    rng: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor, LatentHierarchy]:
    """Resample the warped mask under latents from the requested distribution.

    x_warped: (B,1,H,W); s_warped: (B,H,W) integer labels; cond: (B,) class
    indices. Returns (x', per-pixel label probabilities (B,n,H,W), hierarchy).
    The image passes through unchanged: geometry enters through the warp, and
    the latent decoder only resamples the mask. With use_sampling=False every
    z is its posterior/prior mean and the output is deterministic.
    """
    if sampled_from not in ("prior", "posterior"):
        raise ValueError(f"sampled_from must be 'prior' or 'posterior', got {sampled_from!r}")
    generator.eval()  # batch statistics must not depend on generation batching
    h, w = x_warped.shape[-2:]
    generator.check_dims(h, w)
    cond_onehot = F.one_hot(cond.long(), N_CLASSES).float()
    s_onehot = mask_onehot(s_warped, generator.n_labels)
    with torch.no_grad():
        if sampled_from == "prior":
            mus, sigmas, zs = generator.prior.gaussians(
                _prior_input(x_warped, cond_onehot), sample=use_sampling, generator=rng
            )
        else:
            mus, sigmas, zs = generator.posterior.gaussians(
                _posterior_input(x_warped, s_onehot, cond_onehot),
                sample=use_sampling, generator=rng,
            )
        logits = generator.trunk_logits(x_warped, s_onehot, cond_onehot, zs)
        probs = torch.softmax(logits, dim=1)
    return x_warped, probs, _hierarchy(mus, sigmas, zs, (h, w))


# -------------------------------------------------------------------- losses
def adversarial_loss(
    disc: Discriminator, real_pair: torch.Tensor, fake_pair: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(discriminator loss, nonsaturating generator loss), batch means."""
    if real_pair.shape[-2:] != fake_pair.shape[-2:]:
        raise ValueError("real and fake stacks must share spatial dims")
    real_logit, _ = disc(real_pair)
    fake_logit, _ = disc(fake_pair)
    ones = torch.ones_like(real_logit)
    zeros = torch.zeros_like(fake_logit)
    loss_d = F.binary_cross_entropy_with_logits(real_logit, ones) \
        + F.binary_cross_entropy_with_logits(fake_logit, zeros)
    loss_g = F.binary_cross_entropy_with_logits(fake_logit, torch.ones_like(fake_logit))
    return loss_d, loss_g


def classification_loss(class_logits: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
    """Negative log-probability of the target condition, batch mean."""
    return F.cross_entropy(class_logits, cond.long())


def total_generator_loss(adv, cls, shape_term, kl, config: GeneratorConfig):
    """Weighted sum of the generator terms; disabled terms contribute exactly 0."""
    total = adv + config.kl_weight * kl
    if config.use_class_loss:
        total = total + config.lambda1 * cls
    if config.use_shape_loss:
        total = total + config.lambda2 * shape_term
    return total


# ------------------------------------------------------------------ training
def _dataset_tensors(
    samples: list[ImageSample],
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    x = torch.tensor(np.stack([s.image for s in samples]), dtype=torch.float32)[:, None]
    s = torch.tensor(np.stack([s.mask for s in samples]), dtype=torch.long)
    c = torch.tensor([s.class_label for s in samples], dtype=torch.long)
    return x, s, c


def train(
    samples: list[ImageSample],
    shape_prior_model: PairClassifier,
    scheme: LabelScheme,
    config: GeneratorConfig,
    masks: dict[str, np.ndarray] | None = None,
) -> tuple[HierarchicalMaskGenerator, StnLocalizer, Discriminator, TrainState]:
    """Alternating adversarial training; one discriminator step per generator
    step, posterior-sampled latents with KL against the prior, and a mask
    reconstruction term. `masks` substitutes approximate maps for the samples'
    own masks (keyed by sample id). Aborts on non-finite loss.
    """
    if len({s.class_label for s in samples}) < 2:
        raise ValueError("training needs both conditions present")
    work = samples
    if masks is not None:
        missing = [s.id for s in samples if s.id not in masks]
        if missing:
            raise ValueError(f"no substitute mask for samples {missing[:5]}")
        work = [dataclasses.replace(s, mask=masks[s.id]) for s in samples]
    x_all, s_all, c_all = _dataset_tensors(work)
    n = len(work)

    shape_prior_model.eval()
    for p in shape_prior_model.parameters():
        p.requires_grad_(False)

    torch.manual_seed(config.seed)
    generator = HierarchicalMaskGenerator(
        scheme.n, N_CLASSES, config.resolution_levels, config.latent_levels,
        config.width,
    )
    stn = StnLocalizer(scheme.n, N_CLASSES)
    disc = Discriminator(scheme.n, N_CLASSES, config.disc_width)
    opt_g = torch.optim.Adam(
        list(generator.parameters()) + list(stn.parameters()), config.lr
    )
    opt_d = torch.optim.Adam(disc.parameters(), config.lr)
    batch_rng = torch.Generator().manual_seed(config.seed + 1)
    noise_rng = torch.Generator().manual_seed(config.seed + 2)

    state = TrainState(seed=config.seed)
    for _step in range(config.steps):
        idx = torch.randint(0, n, (config.batch,), generator=batch_rng)
        xb, sb, cb = x_all[idx], s_all[idx], c_all[idx]
        cond_onehot = F.one_hot(cb, N_CLASSES).float()

        affines = predict_affine_batch(stn, sb, cond_onehot, scheme.n)
        x_w = warp_image_batch(xb, affines)
        s_w = warp_mask_batch(sb, affines)
        s_w_onehot = mask_onehot(s_w, scheme.n)

        post_mus, post_sigmas, post_zs = generator.posterior.gaussians(
            _posterior_input(x_w, s_w_onehot, cond_onehot),
            sample=config.use_sampling, generator=noise_rng,
        )
        prior_mus, prior_sigmas, _ = generator.prior.gaussians(
            _prior_input(x_w, cond_onehot), samples=post_zs
        )
        logits = generator.trunk_logits(x_w, s_w_onehot, cond_onehot, post_zs)
        fake_pair = torch.cat([x_w, torch.softmax(logits, dim=1)], dim=1)
        real_pair = torch.cat([xb, mask_onehot(sb, scheme.n)], dim=1)

        # discriminator step: adversarial + condition head on real pairs
        loss_d_adv, _ = adversarial_loss(disc, real_pair, fake_pair.detach())
        _, class_logits_real = disc(real_pair)
        loss_d = loss_d_adv + classification_loss(class_logits_real, cb)
        if not torch.isfinite(loss_d):
            raise RuntimeError(f"discriminator loss diverged at step {state.step}")
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()

        # generator + localizer step
        adv_logit, class_logits_fake = disc(fake_pair)
        loss_g_adv = F.binary_cross_entropy_with_logits(
            adv_logit, torch.ones_like(adv_logit)
        )
        cls = (
            classification_loss(class_logits_fake, cb)
            if config.use_class_loss else torch.zeros(())
        )
        shape_term = (
            1.0 - shape_score_soft(
                shape_prior_model, torch.softmax(logits, dim=1), scheme
            ).mean()
            if config.use_shape_loss else torch.zeros(())
        )
        kl = sum(
            gaussian_kl(GaussianParams(mq, sq), GaussianParams(mp, sp))
            for mq, sq, mp, sp in zip(post_mus, post_sigmas, prior_mus, prior_sigmas)
        ) / config.batch
        recon = F.cross_entropy(logits, s_w)
        loss_g = total_generator_loss(loss_g_adv, cls, shape_term, kl, config) \
            + config.recon_weight * recon
        if not torch.isfinite(loss_g):
            raise RuntimeError(f"generator loss diverged at step {state.step}")
        opt_g.zero_grad()
        loss_g.backward()
        opt_g.step()

        with torch.no_grad():
            real_logit, _ = disc(real_pair)
            d_acc = 0.5 * (
                (torch.sigmoid(real_logit) > 0.5).float().mean()
                + (torch.sigmoid(adv_logit.detach()) < 0.5).float().mean()
            )
        state.record(
            adv=float(loss_g_adv.detach()), **{"class": float(cls.detach())},
            shape=float(shape_term.detach()),
            kl=float(kl.detach()), total=float(loss_g.detach()),
            d_adv=float(loss_d_adv.detach()), d_acc=float(d_acc),
        )

    generator.eval()
    stn.eval()
    disc.eval()
    state.validate()
    return generator, stn, disc, state


def write_trace_csv(state: TrainState, path: Path) -> None:
    """Loss trace as CSV with columns (step, adv, class, shape, kl, total)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "adv", "class", "shape", "kl", "total"])
        for k in range(state.step):
            writer.writerow([
                k,
                f"{state.traces['adv'][k]:.6f}",
                f"{state.traces['class'][k]:.6f}",
                f"{state.traces['shape'][k]:.6f}",
                f"{state.traces['kl'][k]:.6f}",
                f"{state.traces['total'][k]:.6f}",
            ])


# -------------------------------------------------------------- persistence
def save_gan(
    generator: HierarchicalMaskGenerator, stn: StnLocalizer, disc: Discriminator,
    scheme: LabelScheme, config: GeneratorConfig, out_dir: Path,
    state: TrainState | None = None, duration_s: float | None = None,
) -> None:
    """Three checkpoints plus a run manifest; every file carries the config hash."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp = {
        "config": dataclasses.asdict(config),
        "config_digest": config.digest(),
        "scheme_digest": scheme.digest(),
        "n_labels": scheme.n,
    }
    torch.save({"state_dict": generator.state_dict(), **stamp}, out_dir / "generator.pt")
    torch.save({"state_dict": stn.state_dict(), **stamp}, out_dir / "stn.pt")
    torch.save({"state_dict": disc.state_dict(), **stamp}, out_dir / "discriminator.pt")
    manifest = {
        "config": dataclasses.asdict(config),
        "config_digest": config.digest(),
        "scheme_digest": scheme.digest(),
        "steps_run": state.step if state is not None else None,
        "duration_s": duration_s,
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    if state is not None:
        write_trace_csv(state, out_dir / "trace.csv")


def load_gan(
    out_dir: Path, scheme: LabelScheme,
) -> tuple[HierarchicalMaskGenerator, StnLocalizer, Discriminator, GeneratorConfig]:
    """Rebuild the three models from checkpoints; digests must agree."""
    out_dir = Path(out_dir)
    blobs = {
        name: torch.load(out_dir / f"{name}.pt", weights_only=True)
        for name in ("generator", "stn", "discriminator")
    }
    digests = {blob["config_digest"] for blob in blobs.values()}
    if len(digests) != 1:
        raise ValueError(f"checkpoints disagree on config: {sorted(digests)}")
    for name, blob in blobs.items():
        if blob["scheme_digest"] != scheme.digest():
            raise ValueError(
                f"{name} checkpoint was trained under scheme "
                f"{blob['scheme_digest']}, current scheme is {scheme.digest()}"
            )
    config = GeneratorConfig(**blobs["generator"]["config"])
    generator = HierarchicalMaskGenerator(
        scheme.n, N_CLASSES, config.resolution_levels, config.latent_levels,
        config.width,
    )
    generator.load_state_dict(blobs["generator"]["state_dict"])
    stn = StnLocalizer(scheme.n, N_CLASSES)
    stn.load_state_dict(blobs["stn"]["state_dict"])
    disc = Discriminator(scheme.n, N_CLASSES, config.disc_width)
    disc.load_state_dict(blobs["discriminator"]["state_dict"])
    for model in (generator, stn, disc):
        model.eval()
    return generator, stn, disc, config
