"""Memory-propagated streaming encoding over clip sequences.

A long feature stream is segmented into fixed-length clips; each clip is
encoded with the previous clip's condensed memory injected in front of it,
yielding one fixed-size memory plus a one-row clip indicator per clip.
Banks persist to a binary container so encoding and answering can run as
separate processes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import ContainerError, Tensor
from .clip_encoder import MlpProjector, init_summarization, merge_adjacent_tokens
from .lm import MiniLm, PackedSequence, Segment, build_causal_mask
from .tokenizer import Vocab

MAGIC_BANK = b"VSMB"
BANK_VERSION = 1

TIME_PROMPT_MODES = ("none", "clip", "memory", "clip+memory")


@dataclass
class VideoStream:
    """Raw per-frame feature rows plus timing metadata."""

    features: np.ndarray  # (frames, N0, c)
    rate: int             # frames per second
    duration: int         # seconds

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3:
            raise ValueError("stream features must have shape (frames, N0, c)")
        if self.rate < 1 or self.duration < 1:
            raise ValueError("rate and duration must be positive")
        if self.features.shape[0] != self.rate * self.duration:
            raise ValueError(
                f"frame count {self.features.shape[0]} != duration*rate "
                f"{self.duration * self.rate}")

    @property
    def frame_count(self) -> int:
        return self.features.shape[0]


@dataclass
class Clip:
    features: np.ndarray       # (T, N0, c), right-padded if partial
    span: tuple[int, int]      # [start, end) in whole seconds of real content
    index: int                 # 1-based clip number
    pad_frames: int = 0


def segment_video(stream: VideoStream, frames_per_clip: int) -> list[Clip]:
    """Consecutive non-overlapping clips of T frames; the final partial clip is
    right-padded by repeating its last frame, and the padded frames are flagged.
    """
    if frames_per_clip <= 0:
        raise ValueError("frames_per_clip must be positive")
    frames = stream.features
    total = frames.shape[0]
    count = -(-total // frames_per_clip)  # ceil
    clips: list[Clip] = []
    for k in range(count):
        lo = k * frames_per_clip
        hi = min(lo + frames_per_clip, total)
        chunk = frames[lo:hi]
        pad = frames_per_clip - (hi - lo)
        if pad:
            chunk = np.concatenate([chunk, np.repeat(chunk[-1:], pad, axis=0)], axis=0)
        span = (lo // stream.rate, -(-hi // stream.rate))
        clips.append(Clip(features=chunk, span=span, index=k + 1, pad_frames=pad))
    return clips


def format_time_prompt(hist: tuple[int, int] | None, clip: tuple[int, int],
                       vocab: Vocab) -> list[int]:
    """Token ids of the timestamp prompt.

    With history: "This contains a history of {s} to {e} seconds, and a clip
    sampled in {s} to {e} seconds."  Without: "This clip is sampled in {s} to
    {e} seconds."
    """
    if clip[0] < 0 or clip[1] < clip[0]:
        raise ValueError(f"bad clip span {clip}")
    if hist is None:
        text = f"This clip is sampled in {clip[0]} to {clip[1]} seconds."
    else:
        if hist[0] < 0 or hist[1] < hist[0]:
            raise ValueError(f"bad history span {hist}")
        text = (f"This contains a history of {hist[0]} to {hist[1]} seconds, "
                f"and a clip sampled in {clip[0]} to {clip[1]} seconds.")
    return vocab.encode(text)


def time_prompt_tokens(mode: str, hist: tuple[int, int] | None,
                       clip: tuple[int, int], vocab: Vocab) -> list[int]:
    """Prompt under one of the ablation modes: none, clip, memory, clip+memory."""
    if mode not in TIME_PROMPT_MODES:
        raise ValueError(f"unknown time prompt mode {mode!r}")
    if mode == "none":
        return []
    if mode == "clip":
        return format_time_prompt(None, clip, vocab)
    if mode == "memory":
        if hist is None:
            return []
        return vocab.encode(f"This contains a history of {hist[0]} to {hist[1]} seconds.")
    return format_time_prompt(hist, clip, vocab)


@dataclass
class MemoryEntry:
    """Condensed memory for one clip plus its selection indicator."""

    h: Tensor           # (T*P, D)
    indicator: Tensor   # (1, D)
    span: tuple[int, int]
    index: int          # 1-based

    def detached(self) -> "MemoryEntry":
        return MemoryEntry(self.h.detach(), self.indicator.detach(), self.span, self.index)


@dataclass
class MemoryBank:
    entries: list[MemoryEntry] = field(default_factory=list)
    frames_per_clip: int = 0
    summary_tokens: int = 0
    dim: int = 0
    fingerprint: str = ""

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def last(self) -> MemoryEntry:
        if not self.entries:
            raise ValueError("empty memory bank")
        return self.entries[-1]

    def indicators(self) -> Tensor:
        """All clip indicators stacked as one (K, D) tensor."""
        return ag.concat([e.indicator for e in self.entries], axis=0)

    def detached(self) -> "MemoryBank":
        return MemoryBank([e.detached() for e in self.entries], self.frames_per_clip,
                          self.summary_tokens, self.dim, self.fingerprint)


def encode_step(lm: MiniLm, projector: MlpProjector, prev: MemoryEntry | None,
                clip: Clip, vocab: Vocab, *, summary_tokens: int,
                time_prompt: str = "clip+memory") -> MemoryEntry:
    """One streaming iteration.

    Packs [time prompt, previous memory, projected clip features, projected
    summarization tokens, projected global token] under the causal mask and
    reads the new memory and indicator from the tap layer.
    """
    merged = merge_adjacent_tokens(clip.features)
    t, n, c = merged.shape
    valid = t - clip.pad_frames
    pooled, global_token = init_summarization(merged, summary_tokens, valid_frames=valid)

    hist = None if prev is None else (0, clip.span[0])
    prompt = time_prompt_tokens(time_prompt, hist, clip.span, vocab)

    segments: list[Segment] = []
    if prompt:
        segments.append(Segment("prompt", tokens=np.asarray(prompt, dtype=np.int64)))
    if prev is not None:
        if prev.h.shape[-1] != lm.cfg.dim:
            raise ValueError(
                f"memory dim {prev.h.shape[-1]} does not match model dim {lm.cfg.dim}")
        segments.append(Segment("memory", vectors=prev.h))
    segments.append(Segment("clip-features", vectors=projector(merged.reshape(t * n, c))))
    segments.append(Segment("summarization",
                            vectors=projector(pooled.reshape(t * summary_tokens, c))))
    segments.append(Segment("global", vectors=projector(global_token)))

    seq = PackedSequence(segments)
    length = len(seq)
    res = lm.forward(seq, build_causal_mask(length))
    tp = t * summary_tokens
    h = ag.narrow(res.hidden_at_tap, 0, length - tp - 1, tp)
    indicator = ag.narrow(res.hidden_at_tap, 0, length - 1, 1)
    return MemoryEntry(h=h, indicator=indicator, span=clip.span, index=clip.index)


def encode_video(lm: MiniLm, projector: MlpProjector, stream: VideoStream, *,
                 frames_per_clip: int, summary_tokens: int, vocab: Vocab,
                 time_prompt: str = "clip+memory", fingerprint: str = "",
                 propagate_memory: bool = True,
                 step_hook=None) -> MemoryBank:
    """Sequentially encode every clip, propagating memory between steps.

    `propagate_memory=False` encodes each clip independently (the history
    ablation). `step_hook(entry)` is called after each step, mainly for
    instrumentation.
    """
    clips = segment_video(stream, frames_per_clip)
    bank = MemoryBank(frames_per_clip=frames_per_clip, summary_tokens=summary_tokens,
                      dim=lm.cfg.dim, fingerprint=fingerprint)
    prev: MemoryEntry | None = None
    for clip in clips:
        entry = encode_step(lm, projector, prev if propagate_memory else None,
                            clip, vocab, summary_tokens=summary_tokens,
                            time_prompt=time_prompt)
        bank.entries.append(entry)
        prev = entry
        if step_hook is not None:
            step_hook(entry)
    return bank


# -- persistence ---------------------------------------------------------------
#
# Layout: magic "VSMB", version byte, u64 K/T/P/D, u16 fingerprint length plus
# UTF-8 fingerprint, then per entry: u64 index, u64 span start, u64 span end,
# T*P*D float64-LE memory values, D float64-LE indicator values.


def save_bank(path, bank: MemoryBank) -> None:
    k = len(bank.entries)
    tp = bank.frames_per_clip * bank.summary_tokens
    fp = bank.fingerprint.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC_BANK)
        fh.write(struct.pack("<B", BANK_VERSION))
        fh.write(struct.pack("<4Q", k, bank.frames_per_clip, bank.summary_tokens, bank.dim))
        fh.write(struct.pack("<H", len(fp)))
        fh.write(fp)
        for e in bank.entries:
            if e.h.shape != (tp, bank.dim):
                raise ValueError(f"entry {e.index} has shape {e.h.shape}, expected {(tp, bank.dim)}")
            fh.write(struct.pack("<3Q", e.index, e.span[0], e.span[1]))
            fh.write(np.ascontiguousarray(e.h.data, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(e.indicator.data, dtype="<f8").tobytes())


def load_bank(path) -> MemoryBank:
    blob = Path(path).read_bytes()
    if len(blob) < 5 or blob[:4] != MAGIC_BANK:
        raise ContainerError(f"{path}: bad magic, expected {MAGIC_BANK!r}")
    if blob[4] != BANK_VERSION:
        raise ContainerError(f"{path}: unsupported bank version {blob[4]}")
    pos = 5
    k, t, p, d = struct.unpack_from("<4Q", blob, pos)
    pos += 32
    (fplen,) = struct.unpack_from("<H", blob, pos)
    pos += 2
    fingerprint = blob[pos:pos + fplen].decode("utf-8")
    pos += fplen
    bank = MemoryBank(frames_per_clip=t, summary_tokens=p, dim=d, fingerprint=fingerprint)
    tp = t * p
    for _ in range(k):
        idx, s0, s1 = struct.unpack_from("<3Q", blob, pos)
        pos += 24
        h = np.frombuffer(blob, dtype="<f8", count=tp * d, offset=pos).reshape(tp, d)
        pos += 8 * tp * d
        ind = np.frombuffer(blob, dtype="<f8", count=d, offset=pos).reshape(1, d)
        pos += 8 * d
        bank.entries.append(MemoryEntry(
            h=ag.tensor(h.astype(np.float64)),
            indicator=ag.tensor(ind.astype(np.float64)),
            span=(int(s0), int(s1)), index=int(idx)))
    if pos != len(blob):
        raise ContainerError(f"{path}: trailing bytes in bank container")
    return bank
