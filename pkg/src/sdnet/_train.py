"""Seeding, batching and early stopping shared by the training loops."""

from __future__ import annotations

import copy
import math
import random

import numpy as np
import torch


def seed_everything(seed: int) -> torch.Generator:
    """Seed every RNG a training run touches; returns a generator for batch order."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def minibatches(n: int, batch_size: int, generator: torch.Generator | None = None, shuffle: bool = True):
    """Yield index tensors; a trailing batch of one sample is merged into the previous one
    because batch normalization cannot train on a single example."""
    order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
    starts = list(range(0, n, batch_size))
    if len(starts) > 1 and n - starts[-1] == 1:
        starts.pop()
    for i, s in enumerate(starts):
        e = starts[i + 1] if i + 1 < len(starts) else n
        yield order[s:e]


class EarlyStopping:
    """Track the best monitored value; `step` returns True when patience runs out."""

    def __init__(self, patience: int = 10, mode: str = "min"):
        self.patience = patience
        self.mode = mode
        self.best = math.inf if mode == "min" else -math.inf
        self.best_epoch = -1
        self.best_state = None
        self.bad_epochs = 0

    def improved(self, value: float) -> bool:
        return value < self.best if self.mode == "min" else value > self.best

    def step(self, value: float, epoch: int, state) -> bool:
        if self.improved(value):
            self.best = value
            self.best_epoch = epoch
            self.best_state = copy.deepcopy(state)
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.float()
    return torch.from_numpy(np.ascontiguousarray(np.asarray(x, dtype=np.float32)))
