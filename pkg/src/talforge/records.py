"""Shared record types passed between pipeline stages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class FeatureSequence:
    """Snippet features for one video: a [T x D] float array plus metadata."""

    video_id: str
    duration_seconds: float
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.duration_seconds <= 0:
            raise ValueError(f"{self.video_id}: duration must be positive")
        if self.features.ndim != 2:
            raise ValueError(f"{self.video_id}: features must be [T x D]")
        if not np.isfinite(self.features).all():
            raise ValueError(f"{self.video_id}: features contain non-finite values")


@dataclass
class Proposal:
    """A scored temporal segment, in seconds."""

    t_start: float
    t_end: float
    score: float
    provenance: str = ""

    def validate(self, duration: float | None = None) -> "Proposal":
        if not self.t_start < self.t_end:
            raise ValueError(f"proposal start {self.t_start} must precede end {self.t_end}")
        if self.t_start < 0:
            raise ValueError(f"proposal start {self.t_start} is negative")
        if duration is not None and self.t_end > duration + 1e-9:
            raise ValueError(f"proposal end {self.t_end} exceeds duration {duration}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"proposal score {self.score} outside [0, 1]")
        return self


@dataclass
class Detection:
    """A proposal with an assigned class label."""

    proposal: Proposal
    label: str
    score: float


@dataclass
class VideoClassScores:
    """Video-level classifier output: class name -> score in [0, 1]."""

    video_id: str
    scores: dict[str, float]

    def __post_init__(self):
        if not self.scores:
            raise ValueError(f"{self.video_id}: class score map is empty")
        for name, s in self.scores.items():
            if not np.isfinite(s):
                raise ValueError(f"{self.video_id}: score for {name!r} is not finite")

    def top_k(self, k: int) -> list[tuple[str, float]]:
        ranked = sorted(self.scores.items(), key=lambda kv: (-kv[1], kv[0]))
        return ranked[:k]


@dataclass
class VideoAnnotation:
    """Ground truth for one video."""

    duration_seconds: float
    subset: str
    instances: list[tuple[str, float, float]] = field(default_factory=list)


@dataclass
class AnnotationSet:
    """Ground-truth segments per video."""

    videos: dict[str, VideoAnnotation] = field(default_factory=dict)

    def subset(self, name: str) -> "AnnotationSet":
        return AnnotationSet({vid: va for vid, va in self.videos.items()
                              if va.subset == name})

    def class_names(self) -> list[str]:
        names = {label for va in self.videos.values() for label, _, _ in va.instances}
        return sorted(names)

    def num_instances(self) -> int:
        return sum(len(va.instances) for va in self.videos.values())
