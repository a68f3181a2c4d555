"""scikit-learn flavored wrappers around the remover and the judge.

These give the two learnable models the familiar fit/predict surface
(plus get_params/set_params from BaseEstimator) so they compose with
model-selection tooling; the functional training APIs remain the ground
truth underneath.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .diffusion import batch_to_images, images_to_batch, masks_to_batch, sample
from .judge import JudgeTrainConfig, QualityJudge, Quadruple, scores as judge_scores, train_judge
from .metrics import composite_over_source
from .schedule import NoiseSchedule
from .scenes import TestPair, Triplet
from .train import TrainConfig, train_round
from .unet import RemovalUNet


def _as_pairs(X) -> list[tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for item in X:
        if isinstance(item, TestPair):
            pairs.append((item.source, item.mask))
        elif isinstance(item, Triplet):
            pairs.append((item.source, item.mask))
        else:
            source, mask = item
            pairs.append((np.asarray(source), np.asarray(mask)))
    return pairs


class RemovalDiffusion(BaseEstimator):
    """Triplet-supervised diffusion object remover.

    fit(X) trains the denoiser on a list of Triplet; predict(X) samples
    edited images for (source, mask) inputs. Set ``warm_start`` to keep
    training an already fitted model.
    """

    def __init__(
        self,
        channels=(32, 64, 128),
        timesteps=1000,
        train_steps=2000,
        batch_size=16,
        learning_rate=5e-5,
        sample_steps=50,
        seed=0,
        ema_decay=None,
        warm_start=False,
        composite=True,
    ):
        self.channels = channels
        self.timesteps = timesteps
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.sample_steps = sample_steps
        self.seed = seed
        self.ema_decay = ema_decay
        self.warm_start = warm_start
        self.composite = composite

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("this RemovalDiffusion instance is not fitted yet")

    def fit(self, X, y=None):
        if not X:
            raise ValueError("fit needs a nonempty list of Triplet")
        if not all(isinstance(t, Triplet) for t in X):
            raise TypeError("fit expects Triplet instances")
        if not (self.warm_start and hasattr(self, "net_")):
            torch.manual_seed(self.seed)
            self.net_ = RemovalUNet(channels=tuple(self.channels))
            self.sched_ = NoiseSchedule(T=self.timesteps)
        cfg = TrainConfig(
            steps=self.train_steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
            ema_decay=self.ema_decay,
        )
        self.report_ = train_round(list(X), self.net_, cfg, self.sched_)
        return self

    def predict(self, X, seed: int | None = None, batch_size: int = 32):
        """Edited images for a list of TestPair / (source, mask) items."""
        self._check_fitted()
        pairs = _as_pairs(X)
        base_seed = self.seed if seed is None else seed
        outputs: list[np.ndarray] = []
        for lo in range(0, len(pairs), batch_size):
            chunk = pairs[lo : lo + batch_size]
            src = images_to_batch([p[0] for p in chunk])
            msk = masks_to_batch([p[1] for p in chunk])
            out = sample(self.net_, src, msk, steps=self.sample_steps, sched=self.sched_, seed=base_seed + lo)
            outputs.extend(batch_to_images(out))
        if self.composite:
            outputs = [
                composite_over_source(o, p[0], p[1]) for o, p in zip(outputs, pairs)
            ]
        return outputs


class RemovalJudge(BaseEstimator):
    """Binary quality discriminator with a probability-like score in [0, 1]."""

    def __init__(
        self,
        backbone_channels=(32, 64, 128),
        rank=4,
        train_steps=400,
        batch_size=16,
        learning_rate=2e-3,
        threshold=0.5,
        seed=0,
        backbone=None,
    ):
        self.backbone_channels = backbone_channels
        self.rank = rank
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.threshold = threshold
        self.seed = seed
        self.backbone = backbone

    def _check_fitted(self):
        if not hasattr(self, "judge_"):
            raise NotFittedError("this RemovalJudge instance is not fitted yet")

    def fit(self, X, y=None):
        """X: list of Quadruple, or list of (edited, source, mask) with y labels."""
        if not X:
            raise ValueError("fit needs nonempty data")
        if isinstance(X[0], Quadruple):
            data = list(X)
        else:
            if y is None:
                raise ValueError("labels are required when X is not a list of Quadruple")
            data = [
                Quadruple(edited=e, source=s, mask=m, label=int(lbl))
                for (e, s, m), lbl in zip(X, y)
            ]
        backbone = self.backbone
        if isinstance(backbone, RemovalDiffusion):
            backbone = backbone.net_
        if backbone is None:
            torch.manual_seed(self.seed)
            backbone = RemovalUNet(channels=tuple(self.backbone_channels))
        torch.manual_seed(self.seed)
        judge = QualityJudge(backbone, rank=self.rank)
        cfg = JudgeTrainConfig(
            steps=self.train_steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
        )
        self.judge_ = train_judge(data, cfg, judge=judge)
        return self

    def score_samples(self, X) -> np.ndarray:
        """Quality scores in [0, 1] for (edited, source, mask) items or Quadruples."""
        self._check_fitted()
        if not X:
            return np.zeros(0)
        if isinstance(X[0], Quadruple):
            items = [(q.edited, q.source, q.mask) for q in X]
        else:
            items = list(X)
        e = images_to_batch([i[0] for i in items])
        s = images_to_batch([i[1] for i in items])
        m = masks_to_batch([i[2] for i in items])
        return judge_scores(self.judge_, e, s, m).numpy()

    def predict_proba(self, X) -> np.ndarray:
        p = self.score_samples(X)
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X) -> np.ndarray:
        return (self.score_samples(X) > self.threshold).astype(int)
