"""Question-conditioned memory selection.

The instruction indicator comes from running [final memory, question tokens]
through the streaming encoder and reading the tap-layer state at the last
position. Similarities against the per-clip indicators feed a differentiable
Gumbel top-V with straight-through gradients; selected memories are
reassembled in temporal order. A KL loss against pseudo temporal labels
warms the selection up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .lm import MiniLm, PackedSequence, Segment, build_causal_mask
from .streaming import MemoryBank

SIMILARITY_MODES = ("cosine", "dot")


def instruction_indicator(lm: MiniLm, bank: MemoryBank, question: list[int]) -> Tensor:
    """(1, D) tap-layer state at the final position of [H_K, question]."""
    if not bank.entries:
        raise ValueError("empty memory bank")
    if len(question) == 0:
        raise ValueError("empty question")
    seq = PackedSequence([
        Segment("memory", vectors=bank.last.h),
        Segment("text", tokens=np.asarray(question, dtype=np.int64)),
    ])
    length = len(seq)
    res = lm.forward(seq, build_causal_mask(length))
    return ag.narrow(res.hidden_at_tap, 0, length - 1, 1)


def similarity(query: Tensor, bank: MemoryBank, mode: str = "cosine") -> Tensor:
    """Length-K similarity vector between the instruction indicator and all
    clip indicators. Cosine by default; "dot" skips normalization (the
    numerically unstable ablation variant)."""
    if mode not in SIMILARITY_MODES:
        raise ValueError(f"unknown similarity mode {mode!r}")
    mat = bank.indicators()                      # (K, D)
    q = ag.reshape(query, (query.size, 1))        # (D, 1)
    dots = ag.reshape(ag.matmul(mat, q), (len(bank.entries),))
    if mode == "dot":
        return dots
    qn = float(np.linalg.norm(query.data))
    if qn == 0.0:
        raise ValueError("zero-norm instruction indicator")
    if np.any(np.linalg.norm(mat.data, axis=1) == 0.0):
        raise ValueError("zero-norm clip indicator")
    mat_norms = ag.sqrt(ag.tsum(ag.mul(mat, mat), axis=1))
    q_norm = ag.sqrt(ag.tsum(ag.mul(query, query)))
    return ag.div(dots, ag.mul(mat_norms, q_norm))


@dataclass
class SelectionResult:
    """Outcome of one top-V draw.

    `hard` is the multi-hot index with exactly V ones. In train mode `st`
    carries the straight-through weights: they evaluate to `hard` in the
    forward direction and route gradients to the softmax relaxation.
    """

    scores: np.ndarray
    hard: np.ndarray
    soft: np.ndarray
    st: Tensor | None
    tau: float
    seed: int | None
    mode: str

    @property
    def positions(self) -> list[int]:
        """0-based selected positions in ascending (temporal) order."""
        return [int(i) for i in np.flatnonzero(self.hard)]

    @property
    def indices(self) -> list[int]:
        """1-based selected clip indices in ascending order."""
        return [p + 1 for p in self.positions]


def _stable_top(values: np.ndarray, count: int) -> np.ndarray:
    # ties break toward the earlier clip: stable sort on the negated values
    return np.sort(np.argsort(-values, kind="stable")[:count])


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    e = np.exp(z)
    return e / e.sum()


def gumbel_topk(scores: Tensor, select: int, *, tau: float, mode: str,
                seed: int | None = None, noise: bool = True) -> SelectionResult:
    """Differentiable top-V selection over a length-K score vector.

    Train mode perturbs scores/tau with i.i.d. standard Gumbel noise from a
    generator seeded per call, takes the top V, and exposes straight-through
    weights. Inference mode is noiseless and deterministic.
    """
    k = scores.size
    if not 1 <= select <= k:
        raise ValueError(f"select count {select} out of range for {k} memories")
    if mode not in ("train", "inference"):
        raise ValueError(f"unknown selection mode {mode!r}")
    if tau <= 0:
        raise ValueError("tau must be positive")

    if mode == "inference":
        top = _stable_top(scores.data, select)
        hard = np.zeros(k)
        hard[top] = 1.0
        return SelectionResult(scores=scores.data.copy(), hard=hard,
                               soft=_softmax_np(scores.data / tau), st=None,
                               tau=tau, seed=seed, mode=mode)

    if noise:
        if seed is None:
            raise ValueError("train-mode selection needs an explicit seed")
        g = np.random.default_rng(seed).gumbel(size=k)
    else:
        g = np.zeros(k)
    z = ag.add(ag.mul(scores, ag.tensor(1.0 / tau)), ag.tensor(g))
    top = _stable_top(z.data, select)
    hard = np.zeros(k)
    hard[top] = 1.0
    soft = ag.softmax(z, axis=-1)
    # forward: hard; backward: d(st)/d(soft) = identity
    st = ag.add(soft, ag.tensor(hard - soft.data))
    return SelectionResult(scores=scores.data.copy(), hard=hard, soft=soft.data,
                           st=st, tau=tau, seed=seed, mode=mode)


def assemble(bank: MemoryBank, selection: SelectionResult, *,
             train: bool = False, grad_through_memories: bool = True) -> Tensor:
    """Concatenate the selected memories in temporal order: (V*T*P, D).

    In train mode each block is scaled by its straight-through weight so the
    score vector receives gradients; the forward values are unchanged since
    the weights evaluate to exactly 1.
    """
    if int(selection.hard.sum()) != len(selection.positions):
        raise ValueError("selection multi-hot is inconsistent")
    blocks = []
    for pos in selection.positions:
        if pos >= len(bank.entries):
            raise IndexError(f"selected position {pos} outside bank of {len(bank.entries)}")
        block = bank.entries[pos].h
        if not grad_through_memories:
            block = block.detach()
        if train:
            if selection.st is None:
                raise ValueError("train-mode assembly needs straight-through weights")
            weight = ag.narrow(selection.st, 0, pos, 1)
            block = ag.mul(block, weight)
        blocks.append(block)
    return ag.concat(blocks, axis=0)


def selection_kl_loss(scores: Tensor, gt_clips, tau: float) -> Tensor:
    """KL(uniform over ground-truth clips || softmax(scores / tau)).

    `gt_clips` holds 1-based clip indices. Differentiable through the scores.
    """
    gt = sorted(set(int(c) for c in gt_clips))
    k = scores.size
    if not gt:
        raise ValueError("empty ground-truth clip set")
    if gt[0] < 1 or gt[-1] > k:
        raise ValueError(f"ground-truth clips {gt} outside [1, {k}]")
    target = np.zeros(k)
    target[[c - 1 for c in gt]] = 1.0 / len(gt)
    pred = ag.softmax(ag.mul(scores, ag.tensor(1.0 / tau)), axis=-1)
    return ag.kl_divergence(pred, target)
