"""In-memory T x C x H x W gridded stack; NaN marks missing cells."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class GridStack:
    data: np.ndarray
    channels: tuple = ()

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ValueError("grid stack data must be 4D (T, C, H, W)")
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        if not self.channels:
            self.channels = tuple(f"c{i}" for i in range(self.data.shape[1]))
        self.channels = tuple(str(c) for c in self.channels)
        if len(self.channels) != self.data.shape[1]:
            raise ValueError("one channel name per channel required")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def mask(self) -> np.ndarray:
        return np.isfinite(self.data)

    def channel(self, name_or_index) -> np.ndarray:
        if isinstance(name_or_index, str):
            name_or_index = self.channels.index(name_or_index)
        return self.data[:, name_or_index]

    def select(self, channels: Sequence) -> "GridStack":
        idx = [self.channels.index(c) if isinstance(c, str) else int(c) for c in channels]
        return GridStack(self.data[:, idx], tuple(self.channels[i] for i in idx))
