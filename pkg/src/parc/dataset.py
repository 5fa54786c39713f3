"""In-memory dataset: trajectories, per-trajectory PDE constants and channel statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .fields import Trajectory


@dataclass(frozen=True)
class ChannelStats:
    min: float
    max: float
    mean: float
    std: float

    @property
    def center(self):
        return 0.5 * (self.max + self.min)

    @property
    def half_range(self):
        """Scale mapping [min, max] onto [-1, 1]; 1.0 for constant channels."""
        h = 0.5 * (self.max - self.min)
        return h if h > 0 else 1.0


def compute_stats(trajectories, names=None):
    if not trajectories:
        raise ValidationError("no trajectories to compute statistics from")
    names = names or trajectories[0].channel_names
    data = np.concatenate([t.to_array() for t in trajectories], axis=0)
    stats = {}
    for c, name in enumerate(names):
        ch = data[:, c]
        stats[name] = ChannelStats(float(ch.min()), float(ch.max()), float(ch.mean()),
                                   float(ch.std()))
    return stats


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    split: str = "train"
    stats: dict = field(default_factory=dict)
    files: list = field(default_factory=list)

    def __post_init__(self):
        self.trajectories = list(self.trajectories)
        if self.trajectories and not self.stats:
            self.stats = compute_stats(self.trajectories)

    def __len__(self):
        return len(self.trajectories)

    @property
    def channel_names(self):
        return self.trajectories[0].channel_names

    @property
    def dt(self):
        return self.trajectories[0].dt

    def constants(self, k):
        return dict(self.trajectories[k].constants)

    def subset(self, indices):
        idx = list(indices)
        return Dataset([self.trajectories[i] for i in idx], self.split, dict(self.stats),
                       [self.files[i] for i in idx] if self.files else [])
