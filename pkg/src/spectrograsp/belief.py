"""Discrete Bayes filter over material classes with a confidence stopping rule.

The state (which material is in the gripper) never changes during an
episode, so there is no prediction step: each frame multiplies the belief
by the classifier's likelihood vector and renormalizes. Accumulation happens
in log space; callers only ever see linear probabilities.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateObservationError, DimensionError, DomainError, ParameterError, SpectroGraspError
from .inference import FramePipeline

BELIEF_FLOOR = 1e-300
NORM_TOL = 1e-9
DEFAULT_KAPPA = 0.95
DEFAULT_N_MAX = 65


@dataclass(frozen=True)
class Belief:
    probs: np.ndarray
    updates_applied: int = 0

    @property
    def n_classes(self) -> int:
        return self.probs.size

    @property
    def top(self) -> int:
        return int(np.argmax(self.probs))

    @property
    def top_prob(self) -> float:
        return float(self.probs.max())


@dataclass(frozen=True)
class DecisionPolicy:
    """``kappa`` above 1 can never be reached, so every decision is forced at ``n_max``."""

    kappa: float = DEFAULT_KAPPA
    n_max: int = DEFAULT_N_MAX

    def __post_init__(self):
        if not (np.isfinite(self.kappa) and self.kappa > 0):
            raise ParameterError(f"kappa must be a positive number, got {self.kappa}")
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise ParameterError(f"n_max must be an integer >= 1, got {self.n_max}")

    def check_classes(self, n_classes: int):
        if self.kappa <= 1.0 / n_classes:
            raise ParameterError(f"kappa {self.kappa} does not exceed the uniform prior 1/{n_classes}")


def init_belief(num_classes: int) -> Belief:
    if int(num_classes) != num_classes or num_classes < 2:
        raise ParameterError("a belief needs at least two classes")
    return Belief(np.full(int(num_classes), 1.0 / num_classes), 0)


def update(bel: Belief, likelihood) -> Belief:
    """Posterior ``eta * likelihood * bel``; raises if the likelihood carries no mass."""
    lik = np.asarray(likelihood, dtype=float)
    if lik.shape != bel.probs.shape:
        raise DimensionError(f"likelihood has shape {lik.shape}, belief has {bel.probs.shape}")
    if not np.all(np.isfinite(lik)) or np.any(lik < 0):
        raise DomainError("likelihood entries must be finite and nonnegative")
    if not np.any(lik > 0):
        raise DegenerateObservationError("likelihood vector is all zero")
    with np.errstate(divide="ignore"):
        log_post = np.log(np.maximum(bel.probs, BELIEF_FLOOR)) + np.log(lik)
    log_post -= logsumexp(log_post)
    probs = np.exp(log_post)
    total = probs.sum()
    assert abs(total - 1.0) <= NORM_TOL, f"belief sums to {total}"
    return Belief(probs, bel.updates_applied + 1)


def decide(bel: Belief, policy: DecisionPolicy) -> Optional[int]:
    """Class index once confident (or forced at ``n_max``), otherwise None."""
    if bel.top_prob >= policy.kappa or bel.updates_applied >= policy.n_max:
        return bel.top
    return None


@dataclass
class EpisodeTrace:
    records: list
    classes: list
    decision_index: Optional[int]
    label: str
    low_confidence: bool
    forced: bool
    episode_id: Optional[int] = None
    true_label: Optional[str] = None

    @property
    def decided(self) -> bool:
        return self.decision_index is not None

    @property
    def frames_used(self) -> int:
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def run_episode(frames: Iterable, pipeline: FramePipeline, policy: DecisionPolicy = DecisionPolicy(),
                episode_id: Optional[int] = None, true_label: Optional[str] = None) -> EpisodeTrace:
    """Filter a frame stream until the policy fires or the stream ends.

    ``frames`` yields RawFrame objects (or bare count vectors). With a
    trailing scan average configured, each frame's counts are averaged with
    up to ``scan_average - 1`` preceding frames.
    """
    classes = list(pipeline.classes)
    policy.check_classes(len(classes))
    bel = init_belief(len(classes))
    window = deque(maxlen=max(1, int(pipeline.config.scan_average)))
    records = []
    decision = None
    for i, frame in enumerate(frames):
        counts = np.asarray(getattr(frame, "counts", frame), dtype=float)
        distance = getattr(frame, "distance", None)
        try:
            window.append(counts)
            avg = window[0] if len(window) == 1 else np.mean(window, axis=0)
            bel = update(bel, pipeline.proba(avg))
        except SpectroGraspError as exc:
            raise type(exc)(f"frame {i}: {exc}") from exc
        decision = decide(bel, policy)
        rec = {
            "frame_index": i,
            "distance_cm": None if distance is None else float(distance),
            "belief": [float(p) for p in bel.probs],
            "top_class": classes[bel.top],
            "top_prob": bel.top_prob,
            "decided": decision is not None,
            "low_confidence": decision is not None and bel.top_prob < policy.kappa,
        }
        records.append(rec)
        if decision is not None:
            break
    if not records:
        raise ParameterError("frame stream is empty")
    forced = decision is not None and bel.top_prob < policy.kappa
    return EpisodeTrace(
        records=records,
        classes=classes,
        decision_index=records[-1]["frame_index"] if decision is not None else None,
        label=classes[bel.top],
        low_confidence=bel.top_prob < policy.kappa,
        forced=forced,
        episode_id=episode_id,
        true_label=true_label,
    )
