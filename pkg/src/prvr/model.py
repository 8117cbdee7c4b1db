"""The full retrieval model: both encoder branches plus the auxiliary heads."""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .encoders import EncodedBatch, EncoderConfig, TextBranch, VideoBranches
from .irm import IrmConfig, RedundancyHead


class PrvrModel(nn.Module):
    """Dual-branch encoders with redundancy head and group classifiers.

    The redundancy head and the per-branch group classifiers only receive
    gradients when their modules are enabled in the training objective.
    """

    def __init__(
        self,
        enc_cfg: EncoderConfig,
        feature_dim_video: int,
        feature_dim_text: int,
        num_groups: int = 8,
        irm_cfg: IrmConfig | None = None,
    ):
        super().__init__()
        enc_cfg.validate()
        irm_cfg = irm_cfg or IrmConfig()
        self.enc_cfg = enc_cfg
        self.feature_dim_video = feature_dim_video
        self.feature_dim_text = feature_dim_text
        self.num_groups = num_groups
        self.text = TextBranch(feature_dim_text, enc_cfg)
        self.video = VideoBranches(feature_dim_video, enc_cfg)
        self.redundancy = RedundancyHead(enc_cfg.D, shared=irm_cfg.shared_head)
        self.video_group_cls = nn.Linear(enc_cfg.D, num_groups)
        self.moment_group_cls = nn.Linear(enc_cfg.D, num_groups)

    def encode_batch(
        self,
        words: Tensor,
        word_mask: Tensor | None,
        frames: Tensor,
        frame_mask: Tensor | None,
    ) -> EncodedBatch:
        Q, q = self.text(words, word_mask)
        V_f, v, V_m = self.video(frames, frame_mask)
        return EncodedBatch(
            q=q, v=v, V_m=V_m, Q=Q, V_f=V_f, word_mask=word_mask, frame_mask=frame_mask
        )

    def count_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def named_parameter_arrays(self) -> dict[str, Tensor]:
        return {name: p.detach() for name, p in self.named_parameters()}
