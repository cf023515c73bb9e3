"""Video handling: frame concatenation and parameter-free frame-aware attention (PFA).

Frame features are tensors of shape [n, m+1, d] (one video) or [B, n, m+1, d]
(a batch); row 0 of every frame is that frame's CLS token.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, DimensionError


@dataclass
class VideoFeatures:
    frames: Tensor  # [n, m+1, d] or [B, n, m+1, d]

    def __post_init__(self):
        if not isinstance(self.frames, Tensor):
            self.frames = Tensor(self.frames)
        if self.frames.ndim not in (3, 4):
            raise DimensionError(f"frames must be [n, m+1, d] or [B, n, m+1, d], got {self.frames.shape}")
        if self.frames.shape[-3] < 1:
            raise ValueError("video has no frames")

    @classmethod
    def from_list(cls, frame_seqs):
        """Stack a list of per-frame [m+1, d] sequences."""
        if not frame_seqs:
            raise ValueError("video has no frames")
        frames = [f if isinstance(f, Tensor) else Tensor(f) for f in frame_seqs]
        shapes = {f.shape for f in frames}
        if len(shapes) != 1:
            raise DimensionError(f"frames disagree in shape: {sorted(shapes)}")
        n = len(frames)
        return cls(T.concat([f.reshape(1, *f.shape) for f in frames], axis=0).reshape(n, *frames[0].shape))

    @property
    def n(self):
        return self.frames.shape[-3]

    @property
    def cls(self):
        return self.frames[..., 0, :]


def frame_concat(video: VideoFeatures):
    """Frame-major concatenation: [cls1, tok11..tok1m, cls2, ...]."""
    f = video.frames
    lead = f.shape[:-3]
    n, L, d = f.shape[-3:]
    return f.reshape(*lead, n * L, d)


def pfa_weights(frame_cls, text_cls, normalize=False, stop_grad=False):
    """Softmax over frames of <frame CLS, text CLS> dot products.

    ``frame_cls`` is [n, d] or [B, n, d]; ``text_cls`` is [d] or [B, d].
    """
    fc = frame_cls if isinstance(frame_cls, Tensor) else Tensor(np.asarray(frame_cls))
    tc = text_cls if isinstance(text_cls, Tensor) else Tensor(np.asarray(text_cls))
    if fc.shape[-1] != tc.shape[-1]:
        raise DimensionError(f"frame CLS dim {fc.shape[-1]} != text CLS dim {tc.shape[-1]}")
    if fc.shape[-2] < 1:
        raise ValueError("pfa_weights needs at least one frame")
    if stop_grad:
        fc, tc = fc.detach(), tc.detach()
    if normalize:
        fc, tc = T.l2_normalize(fc), T.l2_normalize(tc)
    tcb = tc.reshape(*tc.shape[:-1], 1, tc.shape[-1])
    scores = T.tsum(fc * tcb, axis=-1)
    return T.softmax(scores, axis=-1)


def pfa_apply(video: VideoFeatures, weights):
    """Scale each frame's patch tokens by its weight; CLS rows pass through unscaled."""
    f = video.frames
    w = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights), dtype=f.dtype)
    if w.shape[-1] != video.n:
        raise ValueError(f"{w.shape[-1]} frame weights for {video.n} frames")
    lead = f.shape[:-3]
    n, L, d = f.shape[-3:]
    ones = Tensor(np.ones((*lead, n, 1, 1), dtype=f.dtype))
    wt = w.reshape(*lead, n, 1, 1) * Tensor(np.ones((*lead, n, L - 1, 1), dtype=f.dtype))
    mult = T.concat([ones, wt], axis=-2)
    return (f * mult).reshape(*lead, n * L, d)


def video_visual_tokens(video: VideoFeatures, text_cls=None, use_pfa=False, normalize=False, stop_grad=False):
    """Visual tokens fed to every fusion layer; PFA weights computed once per pair."""
    if not use_pfa:
        return frame_concat(video)
    if text_cls is None:
        raise ValueError("PFA needs the paired text CLS")
    return pfa_apply(video, pfa_weights(video.cls, text_cls, normalize, stop_grad))
