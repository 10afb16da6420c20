"""Single-clip condensation.

Adjacent token merging, summarization/global token initialization by
adaptive pooling, the feature-space-to-model-space MLP projector, the
prefix-task attention mask, and the extraction of the condensed clip
representation from the tap layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .lm import AttentionMask, MiniLm, PackedSequence, Segment, build_causal_mask

MERGE_GROUP = 4  # consecutive tokens folded into one, channels stacked


def merge_adjacent_tokens(raw: np.ndarray, grid_window: bool = False) -> np.ndarray:
    """(T, N0, c) -> (T, N0/4, 4c): groups of 4 adjacent tokens, channels concatenated.

    A pure rearrangement, so the total value count is unchanged and
    `split_merged_tokens` is an exact inverse. By default "adjacent" means
    consecutive in token order; with `grid_window` the tokens are treated
    as a square row-major grid and merged in 2x2 windows.
    """
    raw = np.asarray(raw)
    if raw.ndim != 3:
        raise ValueError("raw frame features must have shape (T, N0, c)")
    t, n0, c = raw.shape
    if n0 % MERGE_GROUP != 0:
        raise ValueError(f"token count {n0} not divisible by {MERGE_GROUP}")
    if not grid_window:
        return raw.reshape(t, n0 // MERGE_GROUP, MERGE_GROUP * c)
    side = int(round(np.sqrt(n0)))
    if side * side != n0 or side % 2 != 0:
        raise ValueError(f"grid merge needs a square token grid with even side, got {n0}")
    g = raw.reshape(t, side // 2, 2, side // 2, 2, c)
    g = g.transpose(0, 1, 3, 2, 4, 5)  # (T, rows/2, cols/2, 2, 2, c)
    return g.reshape(t, n0 // MERGE_GROUP, MERGE_GROUP * c)


def split_merged_tokens(merged: np.ndarray, channels: int) -> np.ndarray:
    """Inverse of merge_adjacent_tokens given the original channel count."""
    merged = np.asarray(merged)
    t, n, big_c = merged.shape
    if big_c != MERGE_GROUP * channels:
        raise ValueError("merged channel count does not match")
    return merged.reshape(t, n * MERGE_GROUP, channels)


def init_summarization(features: np.ndarray, parts: int,
                       valid_frames: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Summarization tokens S (T, P, C) by per-frame adaptive pooling, plus
    the global token (1, C) as the mean over all tokens.

    `valid_frames` excludes right-padding from the global mean; the per-frame
    pooled rows still cover every frame.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3:
        raise ValueError("clip features must have shape (T, N, C)")
    t, n, _ = f.shape
    if not 1 <= parts < n:
        raise ValueError(f"summarization token count {parts} must satisfy 1 <= P < N={n}")
    bins = ag.pool_bins(n, parts)
    pooled = np.stack([[f[i, s:e].mean(axis=0) for s, e in bins] for i in range(t)])
    if valid_frames is None:
        valid_frames = t
    if not 1 <= valid_frames <= t:
        raise ValueError("valid_frames out of range")
    global_token = f[:valid_frames].reshape(-1, f.shape[-1]).mean(axis=0, keepdims=True)
    return pooled, global_token


@dataclass(frozen=True)
class PrefixMaskSpec:
    """Span lengths of the packed prefix-task sequence: features, summaries, text."""

    tn: int
    tp: int
    tt: int

    def __post_init__(self):
        if min(self.tn, self.tp, self.tt) < 0:
            raise ValueError("span lengths must be nonnegative")

    @property
    def total(self) -> int:
        return self.tn + self.tp + self.tt


def build_prefix_mask(spec: PrefixMaskSpec) -> AttentionMask:
    """Causal mask with the feature span hidden from every text row.

    Text rows keep causal access to the summarization span and earlier text,
    so generation must read clip content through the summaries.
    """
    total = spec.total
    m = np.tril(np.ones((total, total), dtype=np.uint8))
    text_start = spec.tn + spec.tp
    m[text_start:, :spec.tn] = 0
    return AttentionMask(m)


class MlpProjector:
    """Two affine layers with a GELU between; hidden width equals the output width."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 init_std: float = 0.02):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self._p = {
            "w1": ag.randn((in_dim, out_dim), rng, std=init_std, requires_grad=True),
            "b1": ag.zeros((out_dim,), requires_grad=True),
            "w2": ag.randn((out_dim, out_dim), rng, std=init_std, requires_grad=True),
            "b2": ag.zeros((out_dim,), requires_grad=True),
        }

    def params(self) -> dict[str, Tensor]:
        return self._p

    def set_trainable(self, trainable: bool) -> None:
        for t in self._p.values():
            t.requires_grad = trainable

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self._p.items():
            if k not in arrays:
                raise KeyError(f"missing parameter {k!r}")
            t.data = np.array(arrays[k], dtype=np.float64)

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else ag.tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"projector expects last dim {self.in_dim}, got {x.shape[-1]}")
        p = self._p
        h = ag.gelu(ag.add(ag.matmul(x, p["w1"]), p["b1"]))
        return ag.add(ag.matmul(h, p["w2"]), p["b2"])


def encode_clip(features: np.ndarray, summaries: np.ndarray,
                projector: MlpProjector, lm: MiniLm) -> Tensor:
    """Condense one clip: pack [project(F), project(S)] under the causal mask
    and return the tap-layer hidden states of the last T*P positions.
    """
    f = np.asarray(features, dtype=np.float64)
    s = np.asarray(summaries, dtype=np.float64)
    t, n, c = f.shape
    _, p, _ = s.shape
    f_flat = projector(f.reshape(t * n, c))
    s_flat = projector(s.reshape(t * p, c))
    seq = PackedSequence([
        Segment("clip-features", vectors=f_flat),
        Segment("summarization", vectors=s_flat),
    ])
    length = len(seq)
    res = lm.forward(seq, build_causal_mask(length))
    return ag.narrow(res.hidden_at_tap, 0, length - t * p, t * p)
