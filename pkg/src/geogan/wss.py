"""Weakly supervised label-map extraction via dual-criterion instance selection.

Pipeline (per pathology label, one-vs-rest over binary image labels):
  1. train two instance scorers on image bags, one selecting by Max-Max
     (always the argmax instance) and one by Max-Min (argmax on infected
     bags, argmin on clean bags);
  2. distill an instance dataset from the two scorers' selections, keeping
     only instances whose thresholded prediction agrees with the bag label;
  3. retrain an instance classifier on that dataset under a weighted sum of
     the supervised retrain loss and an image-level constraint loss;
  4. relabel every grid cell of every training image with the retrained
     classifier, broadcasting cell decisions to pixels.
Per-label cell scores are merged into one map by highest score, and a pixel
segmenter is trained on the merged maps.

With binary image-level labels and co-occurring pathologies the per-label
runs receive identical supervision, so label identity in the merged maps is
only as good as symmetry breaking allows; the infection-region union is the
quantity these maps are built to get right.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import (
    GridSpec,
    ImageSample,
    InstanceBag,
    LabelScheme,
    cell_view,
    save_mask_png,
    split_into_instances,
)
from .nets import NestedUNet, SmallConvScorer

EPS = 1e-7


class SelectionCriterion(Enum):
    MAX_MAX = "max_max"
    MAX_MIN = "max_min"


@dataclass(frozen=True)
class ConstraintWeights:
    w1: float = 0.5
    w2: float = 0.5

    def __post_init__(self):
        if self.w1 <= 0 or self.w2 <= 0:
            raise ValueError("constraint weights must be positive")
        if self.w1 != self.w2:
            raise ValueError("constraint weights must be equal")


@dataclass
class InstanceRecord:
    crop: np.ndarray
    label: int
    source_id: str
    criterion: SelectionCriterion


@dataclass
class InstanceDataset:
    records: list[InstanceRecord] = field(default_factory=list)
    discarded_count: int = 0


@dataclass
class WssConfig:
    grid_n: int = 8
    epochs: int = 12
    retrain_epochs: int = 12
    batch_bags: int = 16
    lr: float = 1e-3
    width: int = 16
    n_blocks: int = 3
    threshold: float = 0.5
    weights: ConstraintWeights = field(default_factory=ConstraintWeights)
    seg_epochs: int = 30
    seg_batch: int = 8
    seg_lr: float = 1e-3
    seg_width: int = 16
    # per-label pipeline retries: reseed while the bag-constraint metric of
    # the retrained classifier stays above the bound (lowest metric wins)
    retrain_metric_bound: float = 0.32
    max_label_attempts: int = 5
    seed: int = 0


# ----------------------------------------------------------- selection core
def select_instance(scores, bag_label: int, criterion: SelectionCriterion) -> int:
    """Index of the score the criterion picks; ties go to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or len(scores) == 0:
        raise ValueError("scores must be a non-empty 1-D sequence")
    if criterion is SelectionCriterion.MAX_MAX or bag_label == 1:
        return int(np.argmax(scores))
    return int(np.argmin(scores))


def _select_batch(probs: torch.Tensor, labels: torch.Tensor,
                  criterion: SelectionCriterion) -> torch.Tensor:
    """Vectorized select_instance over a (B, n_instances) probability batch."""
    if criterion is SelectionCriterion.MAX_MAX:
        return probs.argmax(dim=1)
    return torch.where(labels == 1, probs.argmax(dim=1), probs.argmin(dim=1))


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(EPS, 1.0 - EPS)


def mil_loss(selected_scores, bag_labels) -> torch.Tensor:
    """Summed bag-level cross-entropy on the selected instances' scores."""
    p = torch.as_tensor(selected_scores, dtype=torch.float64) \
        if not torch.is_tensor(selected_scores) else selected_scores
    y = torch.as_tensor(bag_labels, dtype=p.dtype) \
        if not torch.is_tensor(bag_labels) else bag_labels.to(p.dtype)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {tuple(p.shape)} vs {tuple(y.shape)}")
    p = _clamp(p)
    return -(y * p.log() + (1 - y) * (1 - p).log()).sum()


def constraint_loss(selected_scores_per_criterion: dict, image_label: int) -> torch.Tensor:
    """Bag-level cross-entropy summed over both criteria's selected scores."""
    missing = {c for c in SelectionCriterion} - set(selected_scores_per_criterion)
    if missing:
        raise ValueError(f"missing criterion scores: {sorted(c.value for c in missing)}")
    total = None
    for criterion in SelectionCriterion:
        p = selected_scores_per_criterion[criterion]
        p = _clamp(p if torch.is_tensor(p) else torch.as_tensor(p, dtype=torch.float64))
        term = -(image_label * p.log() + (1 - image_label) * (1 - p).log())
        total = term if total is None else total + term
    return total


def retrain_total_loss(retrain, constraint, weights: ConstraintWeights):
    return weights.w1 * constraint + weights.w2 * retrain


# ------------------------------------------------------------- MIL training
def _bags_to_tensor(bags: list[InstanceBag]) -> tuple[torch.Tensor, torch.Tensor]:
    crops = torch.tensor(
        np.stack([np.stack(b.instances) for b in bags]), dtype=torch.float32
    )  # (B, n_inst, ch, cw)
    labels = torch.tensor([b.bag_label for b in bags], dtype=torch.long)
    return crops, labels


def _score_all(scorer: nn.Module, crops: torch.Tensor) -> torch.Tensor:
    """(B, n_inst, ch, cw) -> (B, n_inst) probabilities."""
    b, n, ch, cw = crops.shape
    logits = scorer(crops.reshape(b * n, 1, ch, cw)).reshape(b, n)
    return torch.sigmoid(logits)


def train_mil_classifier(
    bags: list[InstanceBag], criterion: SelectionCriterion, config: WssConfig,
    seed_offset: int = 0,
) -> tuple[nn.Module, list[float]]:
    """One instance scorer trained on bag labels through its selection rule."""
    if not bags:
        raise ValueError("no bags to train on")
    labels_present = {b.bag_label for b in bags}
    if labels_present != {0, 1}:
        raise ValueError(f"need both bag labels, got {sorted(labels_present)}")

    torch.manual_seed(config.seed + seed_offset)
    scorer = SmallConvScorer(1, config.width, config.n_blocks, 1)
    opt = torch.optim.Adam(scorer.parameters(), config.lr)
    crops, labels = _bags_to_tensor(bags)
    gen = torch.Generator().manual_seed(config.seed + seed_offset + 1)

    trace: list[float] = []
    for _epoch in range(config.epochs):
        order = torch.randperm(len(bags), generator=gen)
        for start in range(0, len(bags), config.batch_bags):
            idx = order[start : start + config.batch_bags]
            probs = _score_all(scorer, crops[idx])
            sel = _select_batch(probs.detach(), labels[idx], criterion)
            selected = probs.gather(1, sel[:, None]).squeeze(1)
            loss = mil_loss(selected, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.append(float(loss.detach()))
    scorer.eval()
    return scorer, trace


def build_instance_dataset(
    bags: list[InstanceBag], scorer_maxmax: nn.Module, scorer_maxmin: nn.Module,
    threshold: float = 0.5,
) -> InstanceDataset:
    """Distill selected instances whose prediction agrees with the bag label."""
    out = InstanceDataset()
    pairs = (
        (SelectionCriterion.MAX_MAX, scorer_maxmax),
        (SelectionCriterion.MAX_MIN, scorer_maxmin),
    )
    # batch statistics must not leak between crops of one bag
    scorer_maxmax.eval()
    scorer_maxmin.eval()
    with torch.no_grad():
        for bag in bags:
            crops = torch.tensor(np.stack(bag.instances), dtype=torch.float32)[:, None]
            for criterion, scorer in pairs:
                probs = torch.sigmoid(scorer(crops).squeeze(-1))
                idx = select_instance(probs.numpy(), bag.bag_label, criterion)
                pred = int(probs[idx] >= threshold)
                if pred != bag.bag_label:
                    out.discarded_count += 1
                    continue
                out.records.append(
                    InstanceRecord(bag.instances[idx], pred, bag.source_id, criterion)
                )
    return out


def _bag_constraint_metric(clf: nn.Module, bag_crops: torch.Tensor,
                           bag_labels: torch.Tensor) -> float:
    """Mean per-bag constraint loss under the classifier's own selections."""
    clf.eval()
    with torch.no_grad():
        probs = _score_all(clf, bag_crops).to(torch.float64)
    total = 0.0
    for row, y in zip(probs, bag_labels):
        per_crit = {
            c: row[_select_batch(row[None], y[None], c)[0]]
            for c in SelectionCriterion
        }
        total += float(constraint_loss(per_crit, int(y)))
    return total / len(bag_labels)


def retrain_and_relabel(
    instance_dataset: InstanceDataset, bags: list[InstanceBag],
    weights: ConstraintWeights, config: WssConfig, seed_offset: int = 0,
) -> tuple[nn.Module, np.ndarray, list[float]]:
    """Retrain an instance classifier and score every grid cell of every bag.

    Each batch is a set of bags: the constraint route scores those bags'
    selections under the current classifier, while the retrain route runs
    cross-entropy on the distilled records of the same bags, so both routes
    of the combined loss see every image.

    Returns (classifier, per-bag cell probabilities of shape (B, N, N), trace).
    """
    if not instance_dataset.records:
        raise ValueError("instance dataset is empty")
    rec_labels = {r.label for r in instance_dataset.records}
    if rec_labels != {0, 1}:
        raise ValueError(f"need both instance classes, got {sorted(rec_labels)}")

    torch.manual_seed(config.seed + 1000 + seed_offset)
    clf = SmallConvScorer(1, config.width, config.n_blocks, 1)
    opt = torch.optim.Adam(clf.parameters(), config.lr)
    gen = torch.Generator().manual_seed(config.seed + 1001 + seed_offset)

    rec_crops = torch.tensor(
        np.stack([r.crop for r in instance_dataset.records]), dtype=torch.float32
    )[:, None]
    rec_y = torch.tensor([r.label for r in instance_dataset.records], dtype=torch.float64)
    bag_crops, bag_labels = _bags_to_tensor(bags)
    records_of_bag: dict[str, list[int]] = {b.source_id: [] for b in bags}
    for r_i, record in enumerate(instance_dataset.records):
        records_of_bag.setdefault(record.source_id, []).append(r_i)
    rec_by_bag = [records_of_bag[b.source_id] for b in bags]

    batch = min(max(2, config.batch_bags // 2), len(bags))
    trace: list[float] = []
    best_metric, best_state = float("inf"), None
    for _epoch in range(config.retrain_epochs):
        clf.train()
        bag_order = torch.randperm(len(bags), generator=gen)
        for start in range(0, len(bags) - batch + 1, batch):
            bidx = bag_order[start : start + batch]
            bag_probs = _score_all(clf, bag_crops[bidx]).to(torch.float64)
            constraint = torch.zeros((), dtype=torch.float64)
            for row, y in zip(bag_probs, bag_labels[bidx]):
                per_crit = {
                    c: row[_select_batch(row[None].detach(), y[None], c)[0]]
                    for c in SelectionCriterion
                }
                constraint = constraint + constraint_loss(per_crit, int(y))

            ridx = [r_i for b_i in bidx.tolist() for r_i in rec_by_bag[b_i]]
            if ridx:
                probs = torch.sigmoid(clf(rec_crops[ridx]).squeeze(-1)).to(torch.float64)
                retrain = -(rec_y[ridx] * _clamp(probs).log()
                            + (1 - rec_y[ridx]) * _clamp(1 - probs).log()).sum()
            else:
                retrain = torch.zeros((), dtype=torch.float64)
            loss = retrain_total_loss(retrain, constraint, weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.append(float(loss.detach()))

        # keep the epoch whose bag-level constraint (weak labels only) is
        # lowest; guards against the self-selection runaway basin
        metric = _bag_constraint_metric(clf, bag_crops, bag_labels)
        if metric < best_metric:
            best_metric = metric
            best_state = {k: v.detach().clone() for k, v in clf.state_dict().items()}
    if best_state is not None:
        clf.load_state_dict(best_state)

    grid_n = int(round(len(bags[0].instances) ** 0.5))
    clf.eval()
    with torch.no_grad():
        cell_probs = np.stack([
            torch.sigmoid(clf(torch.tensor(np.stack(b.instances),
                                           dtype=torch.float32)[:, None]).squeeze(-1))
            .numpy().reshape(grid_n, grid_n)
            for b in bags
        ])
    return clf, cell_probs, trace


# ------------------------------------------------------------------ merging
def merge_label_scores(
    per_label_cells: dict[int, np.ndarray], threshold: float = 0.5
) -> np.ndarray:
    """Cell scores per label (each (B,N,N)) -> hard cell labels (B,N,N).

    A cell takes the best-scoring label when that score clears the threshold,
    otherwise background.
    """
    labels = sorted(per_label_cells)
    stack = np.stack([per_label_cells[k] for k in labels])  # (L,B,N,N)
    best = stack.argmax(axis=0)
    best_score = stack.max(axis=0)
    chosen = np.asarray(labels)[best]
    return np.where(best_score >= threshold, chosen, 0)


def cells_to_pixel_map(cells: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    """Broadcast an N×N cell-label matrix to all pixels of each cell."""
    n = cells.shape[0]
    h, w = dims
    ch, cw = GridSpec(n).cell_shape(h, w)
    return np.kron(cells, np.ones((ch, cw), dtype=np.int64)).astype(np.int64)


# -------------------------------------------------------------- segmentation
def train_wss_segmenter(
    images: list[np.ndarray], pixel_label_maps: list[np.ndarray], n_labels: int,
    config: WssConfig, seed_offset: int = 0,
) -> tuple[nn.Module, list[float]]:
    """Pixelwise cross-entropy on approximate maps; absent labels get weight 0."""
    if len(images) != len(pixel_label_maps):
        raise ValueError("images and maps must align")
    present = np.unique(np.stack(pixel_label_maps))
    class_weight = torch.zeros(n_labels)
    class_weight[present] = 1.0
    if len(present) < n_labels:
        absent = sorted(set(range(n_labels)) - set(present.tolist()))
        warnings.warn(f"labels absent from all maps get zero weight: {absent}")

    torch.manual_seed(config.seed + 2000 + seed_offset)
    net = NestedUNet(1, n_labels, config.seg_width)
    opt = torch.optim.Adam(net.parameters(), config.seg_lr)
    gen = torch.Generator().manual_seed(config.seed + 2001 + seed_offset)
    x = torch.tensor(np.stack(images), dtype=torch.float32)[:, None]
    y = torch.tensor(np.stack(pixel_label_maps), dtype=torch.long)

    trace: list[float] = []
    steps_per_epoch = max(1, len(images) // config.seg_batch)
    for _epoch in range(config.seg_epochs):
        for _step in range(steps_per_epoch):
            idx = torch.randint(0, len(images), (config.seg_batch,), generator=gen)
            loss = nn.functional.cross_entropy(net(x[idx]), y[idx], weight=class_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.append(float(loss.detach()))
    net.eval()
    return net, trace


def segment_with(net: nn.Module, image: np.ndarray) -> np.ndarray:
    net.eval()
    with torch.no_grad():
        logits = net(torch.tensor(image, dtype=torch.float32)[None, None])
    return logits.argmax(dim=1)[0].numpy().astype(np.int64)


# ------------------------------------------------------------- orchestrator
@dataclass
class WssResult:
    pixel_maps: dict[str, np.ndarray]
    segmenter: nn.Module
    discarded_counts: dict[int, int]
    mil_traces: dict[str, list[float]]
    retrain_traces: dict[int, list[float]]
    seg_trace: list[float]
    label_attempts: dict[int, int] = field(default_factory=dict)
    label_metrics: dict[int, float] = field(default_factory=dict)


def run_wss(samples: list[ImageSample], scheme: LabelScheme,
            config: WssConfig) -> WssResult:
    """Full weakly supervised pipeline on the training samples."""
    grid = GridSpec(config.grid_n)
    bags = [split_into_instances(s, grid) for s in samples]
    dims = samples[0].image.shape
    bag_crops, bag_labels = _bags_to_tensor(bags)

    per_label_cells: dict[int, np.ndarray] = {}
    discarded: dict[int, int] = {}
    mil_traces: dict[str, list[float]] = {}
    retrain_traces: dict[int, list[float]] = {}
    attempts: dict[int, int] = {}
    metrics: dict[int, float] = {}
    for k in scheme.pathology_labels:
        best = None
        for attempt in range(max(1, config.max_label_attempts)):
            off = 10 * k + 1000 * attempt
            mm, trace_mm = train_mil_classifier(
                bags, SelectionCriterion.MAX_MAX, config, seed_offset=off)
            mn, trace_mn = train_mil_classifier(
                bags, SelectionCriterion.MAX_MIN, config, seed_offset=off + 5)
            inst = build_instance_dataset(bags, mm, mn, config.threshold)
            clf, cells, rt = retrain_and_relabel(inst, bags, config.weights,
                                                 config, seed_offset=off)
            metric = _bag_constraint_metric(clf, bag_crops, bag_labels)
            cand = (metric, attempt, trace_mm, trace_mn, inst, cells, rt)
            if best is None or metric < best[0]:
                best = cand
            if metric <= config.retrain_metric_bound:
                break
        metric, attempt, trace_mm, trace_mn, inst, cells, rt = best
        mil_traces[f"label{k}_max_max"] = trace_mm
        mil_traces[f"label{k}_max_min"] = trace_mn
        discarded[k] = inst.discarded_count
        per_label_cells[k] = cells
        retrain_traces[k] = rt
        attempts[k] = attempt + 1
        metrics[k] = metric

    merged = merge_label_scores(per_label_cells, config.threshold)
    pixel_maps = {
        s.id: cells_to_pixel_map(merged[i], dims) for i, s in enumerate(samples)
    }
    segmenter, seg_trace = train_wss_segmenter(
        [s.image for s in samples], [pixel_maps[s.id] for s in samples],
        scheme.n, config,
    )
    return WssResult(pixel_maps, segmenter, discarded, mil_traces,
                     retrain_traces, seg_trace, attempts, metrics)


def save_wss_outputs(result: WssResult, scheme: LabelScheme, out_dir: Path,
                     config: WssConfig) -> None:
    """Maps in the mask PNG format plus a JSON sidecar per run."""
    out_dir = Path(out_dir)
    maps_dir = out_dir / "maps"
    maps_dir.mkdir(parents=True, exist_ok=True)
    for sid, pmap in result.pixel_maps.items():
        save_mask_png(pmap, maps_dir / f"{sid}.png", scheme.n)
    sidecar = {
        "discarded_count": sum(result.discarded_counts.values()),
        "discarded_per_label": {str(k): v for k, v in result.discarded_counts.items()},
        "loss_trace": {
            "mil": result.mil_traces,
            "retrain": {str(k): v for k, v in result.retrain_traces.items()},
            "segmenter": result.seg_trace,
        },
        "seed": config.seed,
        "grid_n": config.grid_n,
        "label_attempts": {str(k): v for k, v in result.label_attempts.items()},
        "constraint_metric": {str(k): v for k, v in result.label_metrics.items()},
    }
    (out_dir / "wss_run.json").write_text(json.dumps(sidecar, indent=2))
