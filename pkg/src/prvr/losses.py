"""Cosine similarity, key-moment selection, and the contrastive objectives.

Similarity matrices follow one orientation everywhere: rows index the video
side (videos, moments, redundant features), columns index the text side. The
triplet and InfoNCE helpers operate on such a matrix whose diagonal holds the
positive pairs, so the base objective, pseudo-pair alignment, and redundancy
losses all share the same machinery.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

ZERO_NORM_EPS = 1e-12


@dataclass
class LossConfig:
    margin: float = 0.2
    temperature: float = 1.0 / 30.0
    lambda1: float = 0.02  # weight of the video-level InfoNCE term
    lambda2: float = 0.04  # weight of the moment-level InfoNCE term
    negative_policy: str = "hardest"  # "hardest" or "all"

    def validate(self) -> None:
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.negative_policy not in ("hardest", "all"):
            raise ValueError("negative_policy must be 'hardest' or 'all'")


def _checked_norms(x: Tensor, what: str) -> Tensor:
    norms = torch.linalg.vector_norm(x, dim=-1)
    if (norms < ZERO_NORM_EPS).any():
        raise ValueError(f"zero-norm {what} vector in cosine similarity")
    return norms


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors, clamped to [-1, 1]."""
    na = _checked_norms(a, "left")
    nb = _checked_norms(b, "right")
    return torch.clamp((a * b).sum(-1) / (na * nb), -1.0, 1.0)


def cosine_matrix(rows: Tensor, cols: Tensor) -> Tensor:
    """Pairwise cosine similarities: [num_rows, num_cols], clamped to [-1, 1]."""
    rn = rows / _checked_norms(rows, "row").unsqueeze(-1)
    cn = cols / _checked_norms(cols, "column").unsqueeze(-1)
    return torch.clamp(rn @ cn.T, -1.0, 1.0)


def key_moment(V_m: Tensor, q: Tensor) -> tuple[int, Tensor]:
    """Index and similarity of the moment closest to ``q`` (ties -> smallest index)."""
    sims = cosine_matrix(V_m, q.unsqueeze(0)).squeeze(1)
    k = int(torch.argmax(sims).item())  # torch.argmax returns the first maximum on ties
    return k, sims[k]


def moment_similarities(V_m: Tensor, q: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Moment-text similarities for a batch.

    Returns ``S_full`` of shape [n * T_m, n] (every moment vs every sentence,
    rows grouped by video), the moment-level pair matrix ``S_m`` of shape
    [n, n] with ``S_m[i, j] = max_t cos(m_{i,t}, q_j)``, and the [n, n] key
    indices realizing those maxima.
    """
    n, T_m, D = V_m.shape
    S_full = cosine_matrix(V_m.reshape(n * T_m, D), q)
    per_video = S_full.reshape(n, T_m, n)
    S_m, key_idx = per_video.max(dim=1)
    return S_full, S_m, key_idx


def triplet_scalar(s_pos: Tensor, s_neg: Tensor, margin: float) -> Tensor:
    """Hinge ``max(0, margin + s_neg - s_pos)``."""
    return torch.clamp(margin + s_neg - s_pos, min=0.0)


def _off_diagonal_mask(n: int, device, dtype=torch.bool) -> Tensor:
    return ~torch.eye(n, device=device, dtype=torch.bool)


def triplet_from_sim(
    S: Tensor,
    margin: float,
    policy: str = "hardest",
    extra_text_negatives: Tensor | None = None,
) -> Tensor:
    """Triplet ranking loss over a square pair-similarity matrix.

    Both retrieval directions are averaged. ``extra_text_negatives`` ([n, k])
    appends k extra negative similarities to each text anchor's candidate set
    (used for mined redundant features).
    """
    n = S.shape[0]
    if S.shape[0] != S.shape[1]:
        raise ValueError("triplet_from_sim expects a square matrix")
    if n < 2 and extra_text_negatives is None:
        return S.new_zeros(())
    pos = S.diagonal()
    off = _off_diagonal_mask(n, S.device)

    # Text anchors: negatives run over non-paired videos (matrix rows).
    text_negs = S.T.masked_fill(~off, float("-inf"))
    if extra_text_negatives is not None:
        text_negs = torch.cat([text_negs, extra_text_negatives], dim=1)
    # Video anchors: negatives run over non-paired texts (matrix columns).
    video_negs = S.masked_fill(~off, float("-inf"))

    losses = []
    for negs in (text_negs, video_negs):
        finite = torch.isfinite(negs)
        if policy == "hardest":
            hardest = negs.max(dim=1).values
            valid = finite.any(dim=1)
            hinge = triplet_scalar(pos[valid], hardest[valid], margin)
            losses.append(hinge.mean() if valid.any() else S.new_zeros(()))
        else:  # mean over all negatives
            hinge = triplet_scalar(pos.unsqueeze(1).expand_as(negs), negs, margin)
            hinge = torch.where(finite, hinge, torch.zeros_like(hinge))
            counts = finite.sum(dim=1).clamp(min=1)
            losses.append((hinge.sum(dim=1) / counts).mean())
    return 0.5 * (losses[0] + losses[1])


def infonce_from_sim(
    S: Tensor,
    temperature: float,
    extra_text_negatives: Tensor | None = None,
) -> Tensor:
    """Symmetric InfoNCE over a square pair-similarity matrix.

    Per direction the loss is the mean of ``-log softmax`` of the diagonal
    logit; the two directional means are averaged. ``extra_text_negatives``
    adds logits to the text-anchor denominators only.
    """
    n = S.shape[0]
    logits = S / temperature
    pos = logits.diagonal()

    text_logits = logits.T  # [text anchor, video candidates]
    if extra_text_negatives is not None:
        text_logits = torch.cat([text_logits, extra_text_negatives / temperature], dim=1)
    text_dir = (torch.logsumexp(text_logits, dim=1) - pos).mean()
    video_dir = (torch.logsumexp(logits, dim=1) - pos).mean()
    return 0.5 * (text_dir + video_dir)


def contrastive_pair_loss(
    S: Tensor,
    cfg: LossConfig,
    nce_weight: float,
    extra_text_negatives: Tensor | None = None,
) -> dict[str, Tensor]:
    """Triplet + weighted InfoNCE over one pair-similarity matrix."""
    trip = triplet_from_sim(S, cfg.margin, cfg.negative_policy, extra_text_negatives)
    nce = infonce_from_sim(S, cfg.temperature, extra_text_negatives)
    return {"trip": trip, "nce": nce, "total": trip + nce_weight * nce}


def base_loss(batch, cfg: LossConfig) -> dict[str, Tensor]:
    """Base objective: video-level and moment-level triplet + InfoNCE terms.

    Returns each component for logging alongside the total.
    """
    n = batch.size
    if n < 2:
        raise ValueError("base loss needs a batch of at least 2 pairs")
    S_v = cosine_matrix(batch.v, batch.q)
    _, S_m, _ = moment_similarities(batch.V_m, batch.q)
    video = contrastive_pair_loss(S_v, cfg, cfg.lambda1)
    moment = contrastive_pair_loss(S_m, cfg, cfg.lambda2)
    total = video["total"] + moment["total"]
    return {
        "trip_v": video["trip"],
        "trip_m": moment["trip"],
        "nce_v": video["nce"],
        "nce_m": moment["nce"],
        "base": total,
    }
