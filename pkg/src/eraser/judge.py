"""Removal-quality discriminator.

A frozen copy of the remover's encoder (down + middle stages) scores the
7-channel stack [edited || source || mask]; rank-4 low-rank adapters and a
small convolutional head are the only trainable parts. Scores live in
[0, 1] and are trained with mean squared error against binary human labels.
"""

from __future__ import annotations

import copy
import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .diffusion import images_to_batch, masks_to_batch
from .errors import ConfigurationError
from .lora import adapter_parameters, attach_adapters, base_parameter_hash
from .scenes import Triplet
from .unet import RemovalUNet, sinusoidal_embedding

PROVENANCES = ("human", "synthetic-degradation", "baseline", "ground-truth-positive", "no-change", "low-score-negative")

ENRICH_STRATEGIES = ("blur", "noise", "downsample", "mixed", "no-change", "ground-truth-positive", "low-score-negative")


@dataclass
class Quadruple:
    """Human-feedback record: an edit plus its binary quality label."""

    edited: np.ndarray
    source: np.ndarray
    mask: np.ndarray
    label: int
    provenance: str = "human"

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.edited.shape != self.source.shape or self.edited.shape[:2] != self.mask.shape[:2]:
            raise ValueError("quadruple shapes disagree")


class QualityJudge(nn.Module):
    """Discriminator over (edited, source, mask); output in [0, 1]."""

    def __init__(self, backbone: RemovalUNet, rank: int = 4, head_channels: int | None = None):
        super().__init__()
        self.arch = backbone.descriptor()
        self.rank = rank
        enc = backbone.encoder_modules()
        self.encoder = copy.deepcopy(enc)
        self.time_mlp = copy.deepcopy(backbone.time_mlp)
        self.time_dim = backbone.time_dim
        for p in self.time_mlp.parameters():
            p.requires_grad_(False)
        attach_adapters(self.encoder, rank=rank)
        c2 = backbone.channels[2]
        hc = head_channels or c2
        self.head = nn.Sequential(
            nn.Conv2d(c2, hc, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hc, hc, 3, padding=1),
            nn.SiLU(),
        )
        self.fc = nn.Linear(4 * hc, 1)

    def forward(self, edited: torch.Tensor, source: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if edited.shape != source.shape or edited.shape[-2:] != mask.shape[-2:]:
            raise ValueError("edited/source/mask shapes disagree")
        x = torch.cat([edited, source, mask], dim=1)
        t0 = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
        temb = self.time_mlp(sinusoidal_embedding(t0, self.time_dim))
        h0 = self.encoder["enc0"](x, temb)
        h1 = self.encoder["enc1"](self.encoder["down1"](h0), temb)
        h2 = self.encoder["mid"](self.encoder["down2"](h1), temb)
        h = self.head(h2)
        # pooled statistics: plain means plus mask-weighted means of the
        # features and their second moments, so texture-energy evidence
        # inside the removal region reaches the score linearly
        down = mask
        while down.shape[-1] != h.shape[-1]:
            down = F.avg_pool2d(down, 2)
        w = down / (down.sum(dim=(2, 3), keepdim=True) + 1e-8)
        feats = torch.cat(
            [
                h.mean(dim=(2, 3)),
                (h * w).sum(dim=(2, 3)),
                (h * h).mean(dim=(2, 3)),
                (h * h * w).sum(dim=(2, 3)),
            ],
            dim=1,
        )
        return torch.sigmoid(self.fc(feats)).squeeze(1)

    def trainable_parameters(self):
        yield from adapter_parameters(self.encoder)
        yield from self.head.parameters()
        yield from self.fc.parameters()

    def backbone_hash(self) -> str:
        return base_parameter_hash(self.encoder)


def scores(judge: QualityJudge, edited: torch.Tensor, source: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    judge.eval()
    with torch.no_grad():
        return judge(edited, source, mask)


def score(judge: QualityJudge, edited: np.ndarray, source: np.ndarray, mask: np.ndarray) -> float:
    """Deterministic quality score for a single (edited, source, mask)."""
    e = images_to_batch([edited])
    s = images_to_batch([source])
    m = masks_to_batch([mask])
    return float(scores(judge, e, s, m)[0])


def _quadruple_tensors(data: Sequence[Quadruple]):
    e = images_to_batch([q.edited for q in data])
    s = images_to_batch([q.source for q in data])
    m = masks_to_batch([q.mask for q in data])
    y = torch.tensor([float(q.label) for q in data])
    return e, s, m, y


def eq2_loss(judge: QualityJudge, edited, source, mask, labels) -> torch.Tensor:
    """Mean squared error between scores and binary labels on one batch."""
    return ((judge(edited, source, mask) - labels) ** 2).mean()


@dataclass
class JudgeTrainConfig:
    steps: int = 400
    batch_size: int = 16
    learning_rate: float = 2e-3
    seed: int = 0
    val_fraction: float = 0.2
    selection_threshold: float = 0.9
    eval_every: int = 50

    def validate(self) -> "JudgeTrainConfig":
        if self.steps < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("invalid judge training config")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ValueError("val_fraction must lie in [0, 1)")
        return self


def train_judge(
    data: Sequence[Quadruple],
    cfg: JudgeTrainConfig,
    judge: QualityJudge | None = None,
    backbone: RemovalUNet | None = None,
) -> QualityJudge:
    """Fit adapters and head by MSE to the labels; backbone stays frozen.

    A fixed seed-derived 80/20 split provides validation; among periodic
    snapshots the one with the highest validation precision (at the
    selection threshold) is kept, falling back to the final state when
    precision is never defined.
    """
    if len(data) == 0:
        raise ValueError("judge training data must be nonempty")
    cfg.validate()
    labels = {q.label for q in data}
    if len(labels) < 2:
        warnings.warn("judge training data contains a single class; proceeding", stacklevel=2)
    if judge is None:
        if backbone is None:
            raise ConfigurationError("train_judge needs either a judge or a backbone remover")
        judge = QualityJudge(backbone, rank=4)

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    order = rng.permutation(len(data))
    n_val = int(len(data) * cfg.val_fraction)
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        train_idx = order
    train = [data[i] for i in train_idx]
    val = [data[i] for i in val_idx]

    e, s, m, y = _quadruple_tensors(train)
    opt = torch.optim.AdamW(judge.trainable_parameters(), lr=cfg.learning_rate)
    # precision on a handful of accepted samples is meaningless; require
    # minimal support before a snapshot can win the selection
    min_support = max(3, int(0.05 * len(val)))
    best_key = (-1.0, -1.0)
    best_state = None

    judge.train()
    for step in range(1, cfg.steps + 1):
        idx = torch.as_tensor(rng.choice(len(train), size=cfg.batch_size, replace=len(train) < cfg.batch_size))
        loss = eq2_loss(judge, e[idx], s[idx], m[idx], y[idx])
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite judge loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if val and (step % cfg.eval_every == 0 or step == cfg.steps):
            report = evaluate_judge(judge, val, threshold=cfg.selection_threshold)
            judge.train()
            if report.precision is not None and (report.tp + report.fp) >= min_support:
                key = (report.precision, report.recall or 0.0)
                if key > best_key:
                    best_key = key
                    best_state = {k: v.detach().clone() for k, v in judge.state_dict().items()}
    if best_state is not None:
        judge.load_state_dict(best_state)
    judge.eval()
    return judge


def auto_annotate(
    judge: QualityJudge,
    candidates: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
    threshold: float = 0.9,
) -> list[int]:
    """Indices of candidates whose score exceeds the threshold, in order."""
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    if not candidates:
        return []
    e = images_to_batch([c[0] for c in candidates])
    s = images_to_batch([c[1] for c in candidates])
    m = masks_to_batch([c[2] for c in candidates])
    sc = scores(judge, e, s, m)
    return [i for i, v in enumerate(sc.tolist()) if v > threshold]


@dataclass
class ConfusionReport:
    """Binary confusion counts with derived metrics; undefined cells are None."""

    tp: int
    fp: int
    fn: int
    tn: int
    threshold: float
    precision: float | None = field(init=False)
    recall: float | None = field(init=False)
    f1: float | None = field(init=False)
    accuracy: float | None = field(init=False)

    def __post_init__(self):
        self.precision = self.tp / (self.tp + self.fp) if (self.tp + self.fp) > 0 else None
        self.recall = self.tp / (self.tp + self.fn) if (self.tp + self.fn) > 0 else None
        if self.precision is not None and self.recall is not None and (self.precision + self.recall) > 0:
            self.f1 = 2 * self.precision * self.recall / (self.precision + self.recall)
        else:
            self.f1 = None
        total = self.tp + self.fp + self.fn + self.tn
        self.accuracy = (self.tp + self.tn) / total if total > 0 else None

    def to_json(self) -> str:
        return json.dumps(
            {
                "tp": self.tp,
                "fp": self.fp,
                "fn": self.fn,
                "tn": self.tn,
                "threshold": self.threshold,
                "precision": self.precision,
                "recall": self.recall,
                "f1": self.f1,
                "accuracy": self.accuracy,
            },
            sort_keys=True,
        )


def evaluate_judge(judge: QualityJudge, labeled: Sequence[Quadruple], threshold: float = 0.5) -> ConfusionReport:
    """Confusion metrics of thresholded scores against the stored labels."""
    if len(labeled) == 0:
        raise ValueError("labeled data must be nonempty")
    e, s, m, y = _quadruple_tensors(labeled)
    sc = scores(judge, e, s, m)
    pred = (sc > threshold).long()
    truth = y.long()
    tp = int(((pred == 1) & (truth == 1)).sum())
    fp = int(((pred == 1) & (truth == 0)).sum())
    fn = int(((pred == 0) & (truth == 1)).sum())
    tn = int(((pred == 0) & (truth == 0)).sum())
    return ConfusionReport(tp=tp, fp=fp, fn=fn, tn=tn, threshold=threshold)


def _degrade(edit: np.ndarray, mask: np.ndarray, strategy: str, rng: np.random.Generator) -> np.ndarray:
    """Apply a degradation inside the mask only; exact outside."""
    m3 = mask[:, :, None]
    out = edit.copy()
    if strategy in ("blur", "mixed"):
        sigma = rng.uniform(1.5, 3.0)
        blurred = np.stack([ndimage.gaussian_filter(out[:, :, c], sigma) for c in range(3)], axis=-1)
        out = np.where(m3 > 0, blurred, out)
    if strategy in ("downsample", "mixed"):
        f = int(rng.integers(3, 6))
        low = out[::f, ::f]
        up = np.repeat(np.repeat(low, f, axis=0), f, axis=1)[: out.shape[0], : out.shape[1]]
        out = np.where(m3 > 0, up, out)
    if strategy in ("noise", "mixed"):
        noise = rng.normal(0.0, rng.uniform(0.08, 0.2), size=out.shape)
        out = np.where(m3 > 0, np.clip(out + noise, 0.0, 1.0), out)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def enrich_training_set(
    base: Sequence[Quadruple],
    triplets: Sequence[Triplet],
    counts: dict[str, int],
    seed: int = 0,
    judge: QualityJudge | None = None,
    candidates: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]] | None = None,
    low_score_threshold: float = 0.35,
) -> list[Quadruple]:
    """Append synthesized samples to the human-feedback set.

    Degradation strategies damage the masked region of known-good edits and
    label them negative; "no-change" pairs the source with itself (negative);
    "ground-truth-positive" turns triplets into positives; "low-score-negative"
    keeps judge-scored candidates below the threshold as negatives.
    """
    unknown = set(counts) - set(ENRICH_STRATEGIES)
    if unknown:
        raise ConfigurationError(f"unknown enrichment strategies: {sorted(unknown)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    out = list(base)

    good_edits: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = [
        (q.edited, q.source, q.mask) for q in base if q.label == 1
    ]
    if not good_edits:
        good_edits = [(t.removed, t.source, t.mask) for t in triplets]

    for strategy in ("blur", "noise", "downsample", "mixed"):
        k = counts.get(strategy, 0)
        if k == 0:
            continue
        if not good_edits:
            raise ConfigurationError(f"{strategy} enrichment needs positive edits or triplets")
        for _ in range(k):
            edited, source, mask = good_edits[int(rng.integers(len(good_edits)))]
            out.append(
                Quadruple(
                    edited=_degrade(edited, mask, strategy, rng),
                    source=source,
                    mask=mask,
                    label=0,
                    provenance="synthetic-degradation",
                )
            )

    k = counts.get("no-change", 0)
    if k:
        if not triplets:
            raise ConfigurationError("no-change enrichment needs triplets")
        for _ in range(k):
            t = triplets[int(rng.integers(len(triplets)))]
            out.append(Quadruple(edited=t.source.copy(), source=t.source, mask=t.mask, label=0, provenance="no-change"))

    k = counts.get("ground-truth-positive", 0)
    if k:
        if not triplets:
            raise ConfigurationError("ground-truth-positive enrichment needs triplets")
        for _ in range(k):
            t = triplets[int(rng.integers(len(triplets)))]
            out.append(
                Quadruple(edited=t.removed, source=t.source, mask=t.mask, label=1, provenance="ground-truth-positive")
            )

    k = counts.get("low-score-negative", 0)
    if k:
        if judge is None or not candidates:
            raise ConfigurationError("low-score-negative enrichment needs a judge and candidates")
        e = images_to_batch([c[0] for c in candidates])
        s = images_to_batch([c[1] for c in candidates])
        m = masks_to_batch([c[2] for c in candidates])
        sc = scores(judge, e, s, m).tolist()
        low = [i for i, v in enumerate(sc) if v < low_score_threshold]
        for i in low[:k]:
            edited, source, mask = candidates[i]
            out.append(Quadruple(edited=edited, source=source, mask=mask, label=0, provenance="low-score-negative"))

    return out


def save_judge(path: str | Path, judge: QualityJudge) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": "eraser-judge-v1",
            "architecture": judge.arch,
            "rank": judge.rank,
            "state_dict": {k: v.cpu() for k, v in judge.state_dict().items()},
            "backbone_hash": judge.backbone_hash(),
        },
        path,
    )
    return path


def load_judge(path: str | Path) -> QualityJudge:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != "eraser-judge-v1":
        raise ValueError(f"{path} is not an eraser-judge-v1 file")
    backbone = RemovalUNet.from_descriptor(payload["architecture"])
    judge = QualityJudge(backbone, rank=payload["rank"])
    judge.load_state_dict(payload["state_dict"])
    judge.eval()
    return judge
