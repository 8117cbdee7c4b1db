"""Inter-sample correlation mining: pseudo-positive moment-text pairs.

Within a mini-batch of n video-text pairs, the n*T_m moment features are
scored against the n sentence features. Similarities between a text and the
moments of its own paired video are masked to -1; surviving cells are kept
only when the moment and text are mutually each other's argmax and the
similarity clears the correlation threshold. Selection runs on detached
similarity values; gradients flow only through the loss on selected pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .losses import LossConfig, contrastive_pair_loss, cosine_matrix

MASKED_SIMILARITY = -1.0
DEFAULT_THRESHOLD = 0.4


@dataclass
class MiningInput:
    S: np.ndarray  # [n_m, n] moment-text similarities, already masked
    moment_owner: np.ndarray  # [n_m] batch index of each moment's source video
    threshold: float = DEFAULT_THRESHOLD


@dataclass
class PseudoPairSet:
    """Mined (moment_row, text_col, similarity) triples, sorted by moment_row."""

    pairs: list[tuple[int, int, float]] = field(default_factory=list)

    @property
    def n_c(self) -> int:
        return len(self.pairs)

    def moment_rows(self) -> list[int]:
        return [p[0] for p in self.pairs]

    def text_cols(self) -> list[int]:
        return [p[1] for p in self.pairs]


def mask_paired(S: np.ndarray, moment_owner: np.ndarray) -> np.ndarray:
    """Set each text's similarities to moments of its paired video to -1."""
    S = np.array(S, copy=True)
    n = S.shape[1]
    owned = moment_owner[:, None] == np.arange(n)[None, :]
    S[owned] = MASKED_SIMILARITY
    return S


def mine_pseudo_pairs(inp: MiningInput) -> PseudoPairSet:
    """Two-stage selection: mutual argmax, then the correlation threshold.

    Argmax ties break toward the smallest index. The mutual-argmax condition
    makes the selection injective in both coordinates.
    """
    S = np.asarray(inp.S)
    if S.ndim != 2 or S.shape[0] != inp.moment_owner.shape[0]:
        raise ValueError("similarity matrix and moment_owner shapes disagree")
    best_text = S.argmax(axis=1)  # first maximum on ties
    best_moment = S.argmax(axis=0)
    pairs = []
    for i, j in enumerate(best_text):
        if best_moment[j] == i and S[i, j] >= inp.threshold:
            pairs.append((int(i), int(j), float(S[i, j])))
    return PseudoPairSet(pairs)


def count_ownership_violations(pairs: PseudoPairSet, moment_owner: np.ndarray) -> int:
    """Selected pairs whose moment belongs to the text's own video (must be 0)."""
    return sum(1 for i, j, _ in pairs.pairs if int(moment_owner[i]) == j)


def ice_loss(
    moment_feats: Tensor, text_feats: Tensor, cfg: LossConfig
) -> dict[str, Tensor]:
    """Triplet + InfoNCE over the mined pseudo-pair mini-batch.

    Fewer than 2 pairs leave no in-batch negatives, so the loss is 0.
    """
    n_c = moment_feats.shape[0]
    if n_c < 2:
        zero = moment_feats.new_zeros(()) if n_c else torch.zeros(())
        return {"trip": zero, "nce": zero, "total": zero}
    S = cosine_matrix(moment_feats, text_feats)
    parts = contrastive_pair_loss(S, cfg, cfg.lambda2)
    return parts


def mine_batch(
    V_m: Tensor,
    q: Tensor,
    cfg: LossConfig,
    threshold: float = DEFAULT_THRESHOLD,
) -> tuple[dict[str, Tensor], PseudoPairSet, int]:
    """Full per-batch ICE step: score, mask, mine, and compute the loss.

    Returns the loss components, the mined pair set, and the count of
    ownership violations among selected pairs (structurally always 0).
    """
    n, T_m, D = V_m.shape
    moments = V_m.reshape(n * T_m, D)
    S = cosine_matrix(moments, q)
    moment_owner = np.repeat(np.arange(n), T_m)
    masked = mask_paired(S.detach().cpu().numpy(), moment_owner)
    pairs = mine_pseudo_pairs(MiningInput(masked, moment_owner, threshold))
    violations = count_ownership_violations(pairs, moment_owner)
    if pairs.n_c < 2:
        zero = V_m.new_zeros(())
        return {"trip": zero, "nce": zero, "total": zero}, pairs, violations
    sel_moments = moments[torch.as_tensor(pairs.moment_rows(), device=V_m.device)]
    sel_texts = q[torch.as_tensor(pairs.text_cols(), device=V_m.device)]
    return ice_loss(sel_moments, sel_texts, cfg), pairs, violations
