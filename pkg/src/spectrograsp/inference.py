"""Single-frame inference: raw counts to class probabilities."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .classify.model import ClassifierModel, predict_proba
from .errors import CompatibilityError
from .nmf import NmfModel, nmf_transform_batch
from .spectra import CalibrationPair, PreprocessConfig, WavelengthGrid, preprocess_batch


@dataclass
class FramePipeline:
    """Bundles calibration, preprocessing, the NMF basis and a classifier.

    ``features`` maps raw counts (one frame or a stack) to NMF codes;
    ``proba`` and ``predict`` continue through the classifier.
    """

    calibration: CalibrationPair
    nmf: NmfModel
    classifier: ClassifierModel
    config: PreprocessConfig = field(default_factory=PreprocessConfig)
    grid: Optional[WavelengthGrid] = None

    def __post_init__(self):
        if self.grid is None:
            self.grid = WavelengthGrid.default(len(self.calibration))
        n_in = int(self.config.channel_mask(self.grid).sum())
        if n_in != self.nmf.n_channels:
            raise CompatibilityError(
                f"preprocessing yields {n_in} channels but the NMF basis has {self.nmf.n_channels}")
        if self.classifier.k_in != self.nmf.k:
            raise CompatibilityError(
                f"classifier expects {self.classifier.k_in} features but NMF has k={self.nmf.k}")

    @property
    def classes(self) -> list:
        return self.classifier.classes

    def features(self, counts) -> np.ndarray:
        counts = np.asarray(counts, dtype=float)
        single = counts.ndim == 1
        refl = preprocess_batch(np.atleast_2d(counts), self.calibration, self.grid, self.config)
        W = nmf_transform_batch(refl, self.nmf)
        return W[0] if single else W

    def proba(self, counts) -> np.ndarray:
        return predict_proba(self.classifier, self.features(counts))

    def predict(self, counts):
        p = np.atleast_2d(self.proba(counts))
        labels = np.array(self.classes, dtype=object)[np.argmax(p, axis=1)]
        return labels[0] if np.ndim(counts) == 1 else labels
