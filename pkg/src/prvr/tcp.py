"""Temporal coherence prediction.

Positions of a sequence are split into g consecutive groups; a random 25%
subset of positions is shuffled, the shuffled sequence is re-encoded through
the branch encoder, and a linear classifier predicts each position's original
group label on both the intact and the shuffled sequence. Grouped labels keep
the task tractable compared to predicting a full permutation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn
import torch.nn.functional as F


@dataclass
class TcpConfig:
    g: int = 8
    shuffle_fraction: float = 0.25
    apply_to: tuple[str, ...] = ("video", "moment")

    def validate(self) -> None:
        if self.g < 1:
            raise ValueError("g must be >= 1")
        if not (0.0 <= self.shuffle_fraction <= 1.0):
            raise ValueError("shuffle_fraction must be in [0, 1]")
        unknown = set(self.apply_to) - {"video", "moment"}
        if unknown:
            raise ValueError(f"unknown TCP branches {sorted(unknown)}")


@dataclass
class GroupLabelTask:
    """Original/shuffled label targets for one sequence."""

    y_o: np.ndarray  # [T] labels in 1..g
    y_s: np.ndarray  # [T] labels permuted on shuffled_positions only
    shuffled_positions: np.ndarray  # sorted indices that were shuffled


def group_labels(T: int, g: int) -> np.ndarray:
    """1-based group labels over g consecutive near-equal segments (larger first)."""
    if g > T:
        raise ValueError(f"group count g={g} exceeds sequence length T={T}")
    base, extra = divmod(T, g)
    labels = np.empty(T, dtype=np.int64)
    start = 0
    for i in range(g):
        size = base + (1 if i < extra else 0)
        labels[start : start + size] = i + 1
        start += size
    return labels


def shuffle_subset(
    features: Tensor,
    y_o: np.ndarray,
    shuffle_fraction: float,
    rng: np.random.Generator,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Permute a random ``round(fraction * T)`` subset of positions.

    Features and labels move together; all other positions are untouched.
    Deterministic given the rng state.
    """
    T = features.shape[0]
    k = int(round(shuffle_fraction * T))
    if k == 0:
        return features, y_o.copy(), np.empty(0, dtype=np.int64)
    positions = np.sort(rng.choice(T, size=k, replace=False))
    perm = rng.permutation(k)
    shuffled = features.clone()
    shuffled[positions] = features[positions[perm]]
    y_s = y_o.copy()
    y_s[positions] = y_o[positions[perm]]
    return shuffled, y_s, positions


def tcp_loss(
    encoded: Tensor,
    encoded_shuffled: Tensor,
    y_o: Tensor,
    y_s: Tensor,
    classifier: nn.Module,
) -> Tensor:
    """Cross-entropy on group labels of the intact and shuffled sequences.

    Labels are 1-based; rows may be batched ([T, D] or [B, T, D] with labels
    of matching leading shape). The two CE terms are each averaged over
    positions.
    """
    logits_o = classifier(encoded)
    logits_s = classifier(encoded_shuffled)
    g = logits_o.shape[-1]
    ce_o = F.cross_entropy(logits_o.reshape(-1, g), y_o.reshape(-1) - 1)
    ce_s = F.cross_entropy(logits_s.reshape(-1, g), y_s.reshape(-1) - 1)
    return ce_o + ce_s


def group_accuracy(encoded: Tensor, y_o: Tensor, classifier: nn.Module) -> float:
    """Fraction of positions whose predicted group matches the true label."""
    with torch.no_grad():
        pred = classifier(encoded).argmax(dim=-1) + 1
        return float((pred == y_o).float().mean().item())
