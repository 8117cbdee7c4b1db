"""Text and video branch encoders.

Both modalities share the same recipe: linear projection into a common
``D``-dimensional space, positional encoding, a standard pre-norm Transformer
layer, and (for the sequence-level vectors) additive attention pooling. The
video side runs two branches: a frame-level branch pooled into a global video
vector, and a moment branch that first condenses consecutive frames into
``T_m`` mean-pooled segments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

POSITION_MODES = ("sinusoidal", "learned", "none")


@dataclass
class EncoderConfig:
    D: int = 384
    T_m: int = 32
    num_layers: int = 1
    num_heads: int = 4
    ff_dim: int = 1024
    dropout: float = 0.2
    max_positions: int = 512
    # Learned tables for the text/video branches would push the model past
    # its parameter budget; the short moment table is learned and
    # zero-initialized so freshly built encoders keep pooling symmetry.
    text_positions: str = "sinusoidal"
    video_positions: str = "sinusoidal"
    moment_positions: str = "learned"
    moment_pos_after_condense: bool = True
    share_frame_projection: bool = True

    def validate(self) -> None:
        if self.D % self.num_heads != 0:
            raise ValueError(f"D={self.D} must be divisible by num_heads={self.num_heads}")
        if self.T_m < 1:
            raise ValueError("T_m must be >= 1")
        for name in ("text_positions", "video_positions", "moment_positions"):
            if getattr(self, name) not in POSITION_MODES:
                raise ValueError(f"{name} must be one of {POSITION_MODES}")


@dataclass
class EncodedBatch:
    """Per-batch encoder outputs; masks are boolean with True = valid."""

    q: Tensor  # [n, D] sentence vectors
    v: Tensor  # [n, D] video vectors
    V_m: Tensor  # [n, T_m, D] moment features
    Q: Tensor | None = None  # [n, N_max, D] word features
    V_f: Tensor | None = None  # [n, T_f_max, D] frame features
    word_mask: Tensor | None = None  # [n, N_max]
    frame_mask: Tensor | None = None  # [n, T_f_max]

    @property
    def size(self) -> int:
        return self.q.shape[0]


def condense_partition(length: int, num_segments: int) -> list[tuple[int, int]]:
    """Split ``range(length)`` into consecutive near-equal segments.

    Larger segments come first when the split is uneven. Requires
    ``length >= num_segments``; shorter sequences are padded by the caller.
    """
    if length < num_segments:
        raise ValueError(f"length {length} < num_segments {num_segments}")
    base, extra = divmod(length, num_segments)
    bounds, start = [], 0
    for i in range(num_segments):
        size = base + (1 if i < extra else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


def condense_frames(frames: Tensor, length: int, num_segments: int) -> Tensor:
    """Mean-pool ``frames[:length]`` into ``num_segments`` consecutive segments.

    When the sequence is shorter than ``num_segments``, trailing frames are
    duplicated so every segment is nonempty.
    """
    if length < 1:
        raise ValueError("cannot condense an empty sequence")
    valid = frames[:length]
    if length < num_segments:
        pad = valid[-1:].expand(num_segments - length, -1)
        valid = torch.cat([valid, pad], dim=0)
        length = num_segments
    segments = [
        valid[start:end].mean(dim=0) for start, end in condense_partition(length, num_segments)
    ]
    return torch.stack(segments, dim=0)


def sinusoidal_table(max_len: int, dim: int, dtype=torch.float32) -> Tensor:
    position = torch.arange(max_len, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(max_len, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: dim // 2])
    return table.to(dtype)


class PositionalEncoding(nn.Module):
    """Adds sinusoidal, learned (zero-initialized), or no position signal."""

    def __init__(self, mode: str, max_len: int, dim: int):
        super().__init__()
        if mode not in POSITION_MODES:
            raise ValueError(f"unknown positional mode {mode!r}")
        self.mode = mode
        self.max_len = max_len
        if mode == "learned":
            self.table = nn.Parameter(torch.zeros(max_len, dim))
        elif mode == "sinusoidal":
            self.register_buffer("table", sinusoidal_table(max_len, dim), persistent=False)

    def forward(self, x: Tensor) -> Tensor:
        length = x.shape[-2]
        if self.mode == "none":
            return x
        if length > self.max_len:
            raise ValueError(f"sequence length {length} exceeds max_positions {self.max_len}")
        return x + self.table[:length]


class AdditiveAttentionPool(nn.Module):
    """Softmax-weighted sum with scores ``w2 . tanh(W1 h)``."""

    def __init__(self, dim: int):
        super().__init__()
        self.score_proj = nn.Linear(dim, dim, bias=False)  # W1
        self.score_vec = nn.Linear(dim, 1, bias=False)  # w2

    def attention(self, h: Tensor, mask: Tensor | None = None) -> Tensor:
        scores = self.score_vec(torch.tanh(self.score_proj(h))).squeeze(-1)
        if mask is not None:
            if (~mask).all(dim=-1).any():
                raise ValueError("attention pooling over a fully masked sequence")
            scores = scores.masked_fill(~mask, float("-inf"))
        return torch.softmax(scores, dim=-1)

    def forward(self, h: Tensor, mask: Tensor | None = None) -> Tensor:
        squeeze = h.dim() == 2
        if squeeze:
            h = h.unsqueeze(0)
            mask = mask.unsqueeze(0) if mask is not None else None
        weights = self.attention(h, mask)
        pooled = torch.einsum("bl,bld->bd", weights, h)
        return pooled.squeeze(0) if squeeze else pooled


def _transformer_stack(cfg: EncoderConfig) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        d_model=cfg.D,
        nhead=cfg.num_heads,
        dim_feedforward=cfg.ff_dim,
        dropout=cfg.dropout,
        batch_first=True,
        norm_first=True,
    )
    return nn.TransformerEncoder(layer, num_layers=cfg.num_layers, enable_nested_tensor=False)


class TextBranch(nn.Module):
    """Word projection + Transformer + additive attention pooling."""

    def __init__(self, in_dim: int, cfg: EncoderConfig):
        super().__init__()
        self.proj = nn.Linear(in_dim, cfg.D)
        self.dropout = nn.Dropout(cfg.dropout)
        self.pos = PositionalEncoding(cfg.text_positions, cfg.max_positions, cfg.D)
        self.encoder = _transformer_stack(cfg)
        self.pool = AdditiveAttentionPool(cfg.D)

    def forward(self, words: Tensor, mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
        squeeze = words.dim() == 2
        if squeeze:
            words = words.unsqueeze(0)
            mask = mask.unsqueeze(0) if mask is not None else None
        if words.shape[1] < 1:
            raise ValueError("empty word sequence")
        h = self.pos(self.dropout(self.proj(words)))
        padding = ~mask if mask is not None else None
        encoded = self.encoder(h, src_key_padding_mask=padding)
        pooled = self.pool(encoded, mask)
        if squeeze:
            return encoded.squeeze(0), pooled.squeeze(0)
        return encoded, pooled


class VideoBranches(nn.Module):
    """Frame-level branch (global video vector) plus condensed moment branch."""

    def __init__(self, in_dim: int, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.frame_proj = nn.Linear(in_dim, cfg.D)
        self.moment_proj = (
            self.frame_proj if cfg.share_frame_projection else nn.Linear(in_dim, cfg.D)
        )
        self.dropout = nn.Dropout(cfg.dropout)
        self.frame_pos = PositionalEncoding(cfg.video_positions, cfg.max_positions, cfg.D)
        self.moment_pos = PositionalEncoding(cfg.moment_positions, cfg.T_m, cfg.D)
        self.frame_encoder = _transformer_stack(cfg)
        self.moment_encoder = _transformer_stack(cfg)
        self.pool = AdditiveAttentionPool(cfg.D)

    def encode_frames(self, frames: Tensor, mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Frame-level branch: (V_f, v)."""
        if frames.shape[1] < 1:
            raise ValueError("empty frame sequence")
        h = self.frame_pos(self.dropout(self.frame_proj(frames)))
        padding = ~mask if mask is not None else None
        encoded = self.frame_encoder(h, src_key_padding_mask=padding)
        return encoded, self.pool(encoded, mask)

    def moment_tokens(self, frames: Tensor, mask: Tensor | None = None) -> Tensor:
        """Condense raw frames to T_m segments and project: [n, T_m, D]."""
        lengths = (
            mask.sum(dim=1) if mask is not None else torch.full((frames.shape[0],), frames.shape[1])
        )
        if self.cfg.moment_pos_after_condense:
            condensed = torch.stack(
                [condense_frames(f, int(t), self.cfg.T_m) for f, t in zip(frames, lengths)]
            )
            return self.dropout(self.moment_proj(condensed))
        # Positions before condensation: project first, add frame positions,
        # then mean-pool segments (projection commutes with the mean).
        projected = self.frame_pos(self.moment_proj(frames))
        condensed = torch.stack(
            [condense_frames(f, int(t), self.cfg.T_m) for f, t in zip(projected, lengths)]
        )
        return self.dropout(condensed)

    def encode_moments(self, tokens: Tensor) -> Tensor:
        h = tokens
        if self.cfg.moment_pos_after_condense:
            h = self.moment_pos(h)
        return self.moment_encoder(h)

    def forward(self, frames: Tensor, mask: Tensor | None = None) -> tuple[Tensor, Tensor, Tensor]:
        squeeze = frames.dim() == 2
        if squeeze:
            frames = frames.unsqueeze(0)
            mask = mask.unsqueeze(0) if mask is not None else None
        V_f, v = self.encode_frames(frames, mask)
        V_m = self.encode_moments(self.moment_tokens(frames, mask))
        if squeeze:
            return V_f.squeeze(0), v.squeeze(0), V_m.squeeze(0)
        return V_f, v, V_m
