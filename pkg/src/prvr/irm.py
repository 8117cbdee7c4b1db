"""Intra-sample redundancy mining.

Redundant content is isolated by latent subtraction: the video-view feature
``r_v = FC(v - m_k)`` removes the key moment from the global video vector,
the query-view feature ``r_q = FC(v - q)`` removes the query. Both act as
hard negatives in the moment-level similarity learning (L_neg) and are
aligned with each other across the batch (L_red).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .losses import LossConfig, contrastive_pair_loss, cosine, cosine_matrix


@dataclass
class IrmConfig:
    use_neg_loss: bool = True
    use_red_loss: bool = True
    shared_head: bool = True  # one FC for both subtraction views
    stop_gradient: bool = False  # detach v, m_k, q before the head (ablation)


class RedundancyHead(nn.Module):
    """FC bridging video-moment and video-query differences."""

    def __init__(self, dim: int, shared: bool = True):
        super().__init__()
        self.video_view = nn.Linear(dim, dim)
        self.query_view = self.video_view if shared else nn.Linear(dim, dim)

    def forward(self, v: Tensor, m_k: Tensor, q: Tensor) -> tuple[Tensor, Tensor]:
        r_v = self.video_view(v - m_k)
        r_q = self.query_view(v - q)
        return r_v, r_q


def redundant_features(
    v: Tensor, m_k: Tensor, q: Tensor, head: RedundancyHead, stop_gradient: bool = False
) -> tuple[Tensor, Tensor]:
    """Video-view and query-view redundant features, one pair per sample."""
    if stop_gradient:
        v, m_k, q = v.detach(), m_k.detach(), q.detach()
    return head(v, m_k, q)


def neg_loss(
    S_m: Tensor, q: Tensor, r_v: Tensor, r_q: Tensor, cfg: LossConfig
) -> dict[str, Tensor]:
    """Moment-level loss rerun with redundant features as extra negatives.

    Each text anchor j gains the candidates cos(r_v_j, q_j) and cos(r_q_j, q_j):
    the triplet hinge takes its hardest negative over the augmented set, and
    InfoNCE gains the two extra logits in the text-anchor denominator. The
    video-anchor direction is unchanged (redundant features have no text side).
    """
    if S_m.shape[0] < 2:
        raise ValueError("neg loss needs a batch of at least 2 pairs")
    extras = torch.stack([cosine(r_v, q), cosine(r_q, q)], dim=1)
    parts = contrastive_pair_loss(S_m, cfg, cfg.lambda2, extra_text_negatives=extras)
    return parts


def red_loss(r_v: Tensor, r_q: Tensor, cfg: LossConfig) -> dict[str, Tensor]:
    """Align video-view and query-view redundant features across the batch."""
    if r_v.shape[0] < 2:
        zero = r_v.new_zeros(())
        return {"trip": zero, "nce": zero, "total": zero}
    S = cosine_matrix(r_v, r_q)
    return contrastive_pair_loss(S, cfg, cfg.lambda2)


def irm_loss(
    S_m: Tensor,
    q: Tensor,
    r_v: Tensor,
    r_q: Tensor,
    loss_cfg: LossConfig,
    irm_cfg: IrmConfig,
) -> dict[str, Tensor]:
    """Sum of the enabled L_neg and L_red components."""
    zero = r_v.new_zeros(())
    neg = neg_loss(S_m, q, r_v, r_q, loss_cfg)["total"] if irm_cfg.use_neg_loss else zero
    red = red_loss(r_v, r_q, loss_cfg)["total"] if irm_cfg.use_red_loss else zero
    return {"neg": neg, "red": red, "total": neg + red}
