"""scikit-learn style wrappers around sampling and proposal generation."""
from __future__ import annotations

import copy

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_grid, check_paired
from .config import RunConfig
from .metrics import evaluate
from .micronet import TrainingSample, train
from .proposals import propose
from .scene_forge import SyntheticScene, sample_scene


class GridSampler(TransformerMixin, BaseEstimator):
    """Turns synthetic scenes into voxel grids. Stateless; ``fit`` only validates."""

    def __init__(self, target_longest: int = 48, strategy: str = "density", margin_fraction: float = 0.0,
                 use_room_volume: bool = True):
        self.target_longest = target_longest
        self.strategy = strategy
        self.margin_fraction = margin_fraction
        self.use_room_volume = use_room_volume

    def fit(self, X, y=None):
        if any(not isinstance(s, SyntheticScene) for s in X):
            raise TypeError("GridSampler expects SyntheticScene inputs")
        self.n_scenes_seen_ = len(X)
        return self

    def transform(self, X):
        return [sample_scene(s, self.target_longest, self.strategy, self.margin_fraction, self.use_room_volume)
                for s in X]


class RegionProposer(BaseEstimator):
    """Trains the micro proposal network on (grid, boxes) pairs and proposes boxes for new grids.

    ``predict`` returns one world-space ``(N, 7)`` array per grid, sorted by
    descending score; ``predict_scores`` gives the matching scores.
    """

    def __init__(self, head: str = "fcos", steps: int = 1500, seed: int = 0, config: RunConfig | None = None,
                 time_budget_s: float | None = None):
        self.head = head
        self.steps = steps
        self.seed = seed
        self.config = config
        self.time_budget_s = time_budget_s

    def _config(self) -> RunConfig:
        cfg = copy.deepcopy(self.config) if self.config is not None else RunConfig()
        cfg.train.steps = self.steps
        return cfg

    def fit(self, X, y):
        grids, boxes = check_paired(X, y)
        samples = [TrainingSample(g, b) for g, b in zip(grids, boxes)]
        self.checkpoint_, self.training_log_ = train(samples, self.head, self._config(), self.seed,
                                                     time_budget_s=self.time_budget_s)
        self.n_features_in_ = grids[0].channels
        return self

    def _propose(self, X):
        check_is_fitted(self, "checkpoint_")
        cfg = self._config()
        return [propose(check_grid(g), self.checkpoint_, cfg)[0] for g in X]

    def predict(self, X) -> list[np.ndarray]:
        return [ps.boxes for ps in self._propose(X)]

    def predict_scores(self, X) -> list[np.ndarray]:
        return [ps.scores for ps in self._propose(X)]

    def score(self, X, y, iou: float = 0.25) -> float:
        """GT-weighted recall at ``iou``."""
        grids, boxes = check_paired(X, y)
        report = evaluate([(str(i), p, b) for i, (p, b) in enumerate(zip(self.predict(grids), boxes))], (iou,))
        return report.recall[iou]
