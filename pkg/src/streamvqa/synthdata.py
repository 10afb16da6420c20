"""Deterministic synthetic long-video streams with planted, time-localized events.

Each video is Gaussian background noise; planted clips additionally carry a
fixed per-symbol direction (orthonormal in the merged channel space, so a
linear probe separates symbols perfectly and any failure implicates the
pipeline, not the data). QA pairs with exact grounding labels are derived
from the plan, and plans can be replayed against their QA for validation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import read_container, write_container
from .clip_encoder import MERGE_GROUP, merge_adjacent_tokens
from .streaming import VideoStream
from .tokenizer import Vocab

MAGIC_STREAM = b"VSDS"

QA_KINDS = ("what-at-time", "when-symbol", "global-count")


class SymbolBook:
    """Fixed orthonormal direction per symbol, in the merged channel space."""

    def __init__(self, seed: int, size: int, merged_channels: int):
        if size > merged_channels:
            raise ValueError(
                f"cannot fit {size} orthonormal symbol directions in {merged_channels} channels")
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.normal(size=(merged_channels, size)))
        self.directions = q.T.copy()  # (size, merged_channels), orthonormal rows
        self.size = size
        self.merged_channels = merged_channels


@dataclass
class EventPlan:
    """Which symbol is planted in which clip, plus the noise recipe."""

    seed: int
    clips: int
    frames_per_clip: int
    rate: int
    events: list[tuple[int, int, float]]  # (1-based clip index, symbol id, intensity)
    noise_sigma: float = 0.5

    def __post_init__(self):
        seen = set()
        for clip, sym, _ in self.events:
            if not 1 <= clip <= self.clips:
                raise ValueError(f"event clip {clip} outside [1, {self.clips}]")
            if clip in seen:
                raise ValueError(f"more than one event planted in clip {clip}")
            seen.add(clip)
            if sym < 0:
                raise ValueError("negative symbol id")

    @property
    def duration(self) -> int:
        return self.clips * self.frames_per_clip // self.rate

    def clip_span(self, clip_index: int) -> tuple[int, int]:
        t, r = self.frames_per_clip, self.rate
        return ((clip_index - 1) * t // r, clip_index * t // r)

    def symbol_at(self, clip_index: int) -> int | None:
        for clip, sym, _ in self.events:
            if clip == clip_index:
                return sym
        return None


@dataclass
class QASample:
    kind: str
    question: list[int]
    answer: list[int]
    grounding: list[int]          # 1-based clip indices, nonempty
    question_text: str
    answer_text: str
    span: tuple[int, int] | None = None  # the second span the question refers to
    labeled: bool = True          # eligible for selection warm-up supervision

    def __post_init__(self):
        if self.kind not in QA_KINDS:
            raise ValueError(f"unknown QA kind {self.kind!r}")
        if not self.grounding:
            raise ValueError("empty grounding set")
        if self.span is not None:
            self.span = (int(self.span[0]), int(self.span[1]))


@dataclass
class VideoRecord:
    video_id: int
    split: str
    stream: VideoStream
    plan: EventPlan
    qa: list[QASample] = field(default_factory=list)


def random_plan(rng: np.random.Generator, *, clips: int, frames_per_clip: int,
                rate: int, alphabet: int, events_min: int, events_max: int,
                intensity: float, noise_sigma: float) -> EventPlan:
    count = int(rng.integers(events_min, events_max + 1))
    count = min(count, clips)
    event_clips = sorted(int(c) + 1 for c in rng.choice(clips, size=count, replace=False))
    symbols = [int(s) for s in rng.integers(0, alphabet, size=count)]
    events = [(c, s, intensity) for c, s in zip(event_clips, symbols)]
    return EventPlan(seed=int(rng.integers(0, 2**31 - 1)), clips=clips,
                     frames_per_clip=frames_per_clip, rate=rate,
                     events=events, noise_sigma=noise_sigma)


def gen_video(plan: EventPlan, book: SymbolBook, *, frame_tokens: int,
              frame_channels: int) -> VideoStream:
    """Render the plan as a feature stream, fully determined by its seed."""
    if book.merged_channels != MERGE_GROUP * frame_channels:
        raise ValueError("symbol book channel count does not match frame channels")
    rng = np.random.default_rng(plan.seed)
    frames = plan.clips * plan.frames_per_clip
    feats = rng.normal(0.0, plan.noise_sigma, size=(frames, frame_tokens, frame_channels))
    for clip, sym, intensity in plan.events:
        if intensity == 0.0:
            continue
        # one merged-space direction, laid out over each group of 4 raw tokens
        pattern = book.directions[sym].reshape(MERGE_GROUP, frame_channels)
        addition = np.tile(pattern, (frame_tokens // MERGE_GROUP, 1)) * intensity
        lo = (clip - 1) * plan.frames_per_clip
        feats[lo:lo + plan.frames_per_clip] += addition
    return VideoStream(features=feats, rate=plan.rate,
                       duration=frames // plan.rate)


def probe_symbols(stream: VideoStream, plan: EventPlan, book: SymbolBook) -> list[int]:
    """Linear probe: argmax projection of each event clip's merged mean feature."""
    out = []
    for clip, _, _ in plan.events:
        lo = (clip - 1) * plan.frames_per_clip
        chunk = stream.features[lo:lo + plan.frames_per_clip]
        merged = merge_adjacent_tokens(chunk)
        mean = merged.reshape(-1, merged.shape[-1]).mean(axis=0)
        out.append(int(np.argmax(book.directions @ mean)))
    return out


# -- QA construction ------------------------------------------------------------


def what_at_time_question(span: tuple[int, int], vocab: Vocab,
                          options: list[str] | None = None) -> str:
    text = f"What appears from {span[0]} to {span[1]} seconds?"
    if options:
        text += " Options: " + " ".join(options)
    return text


def gen_qa(plan: EventPlan, vocab: Vocab, *, multi_choice: bool = False,
           rng: np.random.Generator | None = None) -> list[QASample]:
    """QA pairs derived from the plan.

    what-at-time asks the symbol planted in one clip (grounding: that clip);
    when-symbol asks for the time bucket of a symbol's first appearance
    (grounding: every clip carrying it); global-count asks how many distinct
    symbols appear in a span (grounding: every event clip in the span).
    """
    if not plan.events:
        raise ValueError("plan has no events")
    if multi_choice and rng is None:
        rng = np.random.default_rng(plan.seed + 1)
    samples: list[QASample] = []

    for clip, sym, _ in plan.events:
        span = plan.clip_span(clip)
        letter = vocab.symbols[sym]
        options = None
        if multi_choice:
            others = [s for s in range(vocab.alphabet_size) if s != sym]
            picks = rng.choice(others, size=min(2, len(others)), replace=False)
            opts = [letter] + [vocab.symbols[int(o)] for o in picks]
            options = [opts[i] for i in rng.permutation(len(opts))]
        text = what_at_time_question(span, vocab, options)
        samples.append(QASample(
            kind="what-at-time", question=vocab.encode(text),
            answer=[vocab.symbol_token(sym)], grounding=[clip],
            question_text=text, answer_text=letter, span=span))

    by_symbol: dict[int, list[int]] = {}
    for clip, sym, _ in plan.events:
        by_symbol.setdefault(sym, []).append(clip)
    for sym, clips in sorted(by_symbol.items()):
        letter = vocab.symbols[sym]
        text = f"When does {letter} appear?"
        first = min(clips)
        samples.append(QASample(
            kind="when-symbol", question=vocab.encode(text),
            answer=[vocab.bucket_token(first)], grounding=sorted(clips),
            question_text=text, answer_text=f"t{first}"))

    span = (0, plan.duration)
    count = len(by_symbol)
    text = f"How many distinct symbols appear from {span[0]} to {span[1]} seconds?"
    samples.append(QASample(
        kind="global-count", question=vocab.encode(text),
        answer=[vocab.count_token(count)], grounding=sorted(c for c, _, _ in plan.events),
        question_text=text, answer_text=f"cnt{count}", span=span))
    return samples


def validate_qa(plan: EventPlan, samples: list[QASample], vocab: Vocab) -> bool:
    """Replay every QA sample against the plan; True iff all are consistent."""
    for qa in samples:
        if not qa.grounding or min(qa.grounding) < 1 or max(qa.grounding) > plan.clips:
            return False
        if qa.kind == "what-at-time":
            clip = qa.grounding[0]
            sym = plan.symbol_at(clip)
            if sym is None or qa.answer != [vocab.symbol_token(sym)]:
                return False
            if qa.span != plan.clip_span(clip):
                return False
        elif qa.kind == "when-symbol":
            sym = plan.symbol_at(qa.grounding[0])
            if sym is None:
                return False
            all_clips = sorted(c for c, s, _ in plan.events if s == sym)
            if sorted(qa.grounding) != all_clips:
                return False
            if qa.answer != [vocab.bucket_token(min(all_clips))]:
                return False
        elif qa.kind == "global-count":
            lo, hi = qa.span
            in_span = [(c, s) for c, s, _ in plan.events
                       if lo <= plan.clip_span(c)[0] and plan.clip_span(c)[1] <= hi]
            if sorted(qa.grounding) != sorted(c for c, _ in in_span):
                return False
            if qa.answer != [vocab.count_token(len({s for _, s in in_span}))]:
                return False
    return True


def concat_videos(parts: list[tuple[VideoStream, EventPlan, list[QASample]]],
                  vocab: Vocab) -> tuple[VideoStream, EventPlan, list[QASample]]:
    """Concatenate streams in order, shifting QA grounding by the cumulative
    clip offset and re-basing every span mentioned in questions and answers.

    when-symbol questions are re-derived against the merged event list (and
    deduplicated): the same symbol may recur across parts, and its grounding
    must cover every merged occurrence to stay replay-consistent.
    """
    if not parts:
        raise ValueError("nothing to concatenate")
    rates = {s.rate for s, _, _ in parts}
    if len(rates) != 1:
        raise ValueError(f"frame rates differ: {sorted(rates)}")
    tpcs = {p.frames_per_clip for _, p, _ in parts}
    if len(tpcs) != 1:
        raise ValueError("frames_per_clip differs between parts")

    streams = [s.features for s, _, _ in parts]
    merged_stream = VideoStream(
        features=np.concatenate(streams, axis=0),
        rate=parts[0][0].rate,
        duration=sum(s.duration for s, _, _ in parts))

    events: list[tuple[int, int, float]] = []
    clip_offset = 0
    for _, plan, _ in parts:
        events.extend((c + clip_offset, sym, inten) for c, sym, inten in plan.events)
        clip_offset += plan.clips
    merged_plan = EventPlan(seed=parts[0][1].seed, clips=clip_offset,
                            frames_per_clip=parts[0][1].frames_per_clip,
                            rate=parts[0][1].rate, events=events,
                            noise_sigma=parts[0][1].noise_sigma)
    merged_clips_of: dict[int, list[int]] = {}
    for c, sym, _ in events:
        merged_clips_of.setdefault(sym, []).append(c)

    samples: list[QASample] = []
    seen_symbols: set[int] = set()
    clip_offset = 0
    sec_offset = 0
    for stream, plan, qa in parts:
        for s in qa:
            if s.kind == "when-symbol":
                sym = plan.symbol_at(s.grounding[0])
                if sym in seen_symbols:
                    continue
                seen_symbols.add(sym)
                clips = sorted(merged_clips_of[sym])
                first = min(clips)
                samples.append(QASample(
                    kind="when-symbol", question=list(s.question),
                    answer=[vocab.bucket_token(first)], grounding=clips,
                    question_text=s.question_text, answer_text=f"t{first}",
                    labeled=s.labeled))
            else:
                samples.append(_shift_qa(s, plan, clip_offset, sec_offset, vocab))
        clip_offset += plan.clips
        sec_offset += stream.duration
    return merged_stream, merged_plan, samples


def _shift_qa(qa: QASample, plan: EventPlan, clip_offset: int, sec_offset: int,
              vocab: Vocab) -> QASample:
    grounding = [c + clip_offset for c in qa.grounding]
    if qa.kind == "what-at-time":
        span = (qa.span[0] + sec_offset, qa.span[1] + sec_offset)
        text = what_at_time_question(span, vocab)
        return QASample(kind=qa.kind, question=vocab.encode(text), answer=list(qa.answer),
                        grounding=grounding, question_text=text,
                        answer_text=qa.answer_text, span=span, labeled=qa.labeled)
    if qa.kind == "when-symbol":
        first = min(grounding)
        return QASample(kind=qa.kind, question=list(qa.question),
                        answer=[vocab.bucket_token(first)], grounding=grounding,
                        question_text=qa.question_text, answer_text=f"t{first}",
                        labeled=qa.labeled)
    # global-count keeps its count but the span moves with the segment
    span = (qa.span[0] + sec_offset, qa.span[1] + sec_offset)
    text = f"How many distinct symbols appear from {span[0]} to {span[1]} seconds?"
    return QASample(kind=qa.kind, question=vocab.encode(text), answer=list(qa.answer),
                    grounding=grounding, question_text=text,
                    answer_text=qa.answer_text, span=span, labeled=qa.labeled)


# -- whole datasets --------------------------------------------------------------


@dataclass
class SynthDataset:
    train: list[VideoRecord]
    heldout: list[VideoRecord]
    meta: dict = field(default_factory=dict)

    def qa_count(self, split: str = "train") -> int:
        vids = self.train if split == "train" else self.heldout
        return sum(len(v.qa) for v in vids)


def build_dataset(*, seed: int, vocab: Vocab, book: SymbolBook, clips: int,
                  frames_per_clip: int, rate: int, frame_tokens: int,
                  frame_channels: int, events_min: int, events_max: int,
                  intensity: float, noise_sigma: float, train_qa_target: int,
                  heldout_videos: int, warmup_fraction: float,
                  multi_choice_fraction: float = 0.0) -> SynthDataset:
    """Generate train and held-out splits until the train split reaches the
    QA target. The first `warmup_fraction` of training videos are flagged as
    labeled: their QA carry pseudo temporal labels for the selection warm-up.
    """
    rng = np.random.default_rng(seed)
    train: list[VideoRecord] = []
    heldout: list[VideoRecord] = []

    def make_record(video_id: int, split: str) -> VideoRecord:
        plan = random_plan(rng, clips=clips, frames_per_clip=frames_per_clip,
                           rate=rate, alphabet=vocab.alphabet_size,
                           events_min=events_min, events_max=events_max,
                           intensity=intensity, noise_sigma=noise_sigma)
        stream = gen_video(plan, book, frame_tokens=frame_tokens,
                           frame_channels=frame_channels)
        mc = multi_choice_fraction > 0 and rng.random() < multi_choice_fraction
        qa = gen_qa(plan, vocab, multi_choice=mc,
                    rng=np.random.default_rng(plan.seed + 1))
        return VideoRecord(video_id=video_id, split=split, stream=stream,
                           plan=plan, qa=qa)

    vid = 0
    while sum(len(v.qa) for v in train) < train_qa_target:
        train.append(make_record(vid, "train"))
        vid += 1
    # trim the overshoot so the train split holds exactly the QA target
    excess = sum(len(v.qa) for v in train) - train_qa_target
    if excess > 0:
        keep = len(train[-1].qa) - excess
        train[-1].qa = train[-1].qa[:keep]
        if not train[-1].qa:
            train.pop()
    n_labeled = int(np.ceil(warmup_fraction * len(train)))
    for i, rec in enumerate(train):
        for qa in rec.qa:
            qa.labeled = i < n_labeled
    for _ in range(heldout_videos):
        heldout.append(make_record(vid, "heldout"))
        vid += 1
    meta = {"seed": seed, "clips": clips, "frames_per_clip": frames_per_clip,
            "rate": rate, "frame_tokens": frame_tokens,
            "frame_channels": frame_channels, "alphabet": vocab.alphabet_size}
    return SynthDataset(train=train, heldout=heldout, meta=meta)


def gen_clip_samples(*, seed: int, count: int, vocab: Vocab, book: SymbolBook,
                     frames_per_clip: int, rate: int, frame_tokens: int,
                     frame_channels: int, intensity: float, noise_sigma: float,
                     blank_fraction: float = 0.1) -> list[tuple[np.ndarray, list[int]]]:
    """Single-clip caption pairs for the first training stage.

    Returns (raw clip features, caption token ids); captions read
    "This clip shows X." or "This clip shows nothing."
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        blank = rng.random() < blank_fraction
        if blank:
            events: list[tuple[int, int, float]] = [(1, 0, 0.0)]
            caption = "This clip shows nothing."
        else:
            sym = int(rng.integers(0, vocab.alphabet_size))
            events = [(1, sym, intensity)]
            caption = f"This clip shows {vocab.symbols[sym]}."
        plan = EventPlan(seed=int(rng.integers(0, 2**31 - 1)), clips=1,
                         frames_per_clip=frames_per_clip, rate=rate,
                         events=events, noise_sigma=noise_sigma)
        stream = gen_video(plan, book, frame_tokens=frame_tokens,
                           frame_channels=frame_channels)
        ids = vocab.encode(caption) + [vocab.eos_id]
        out.append((stream.features, ids))
    return out


# -- persistence ------------------------------------------------------------------


def save_stream(path, stream: VideoStream) -> None:
    write_container(path, MAGIC_STREAM, {
        "features": stream.features,
        "rate": np.asarray(float(stream.rate)),
        "duration": np.asarray(float(stream.duration)),
    })


def load_stream(path) -> VideoStream:
    arrays = read_container(path, MAGIC_STREAM)
    for key in ("features", "rate", "duration"):
        if key not in arrays:
            raise ValueError(f"{path}: stream container missing {key!r}")
    return VideoStream(features=arrays["features"],
                       rate=int(arrays["rate"]), duration=int(arrays["duration"]))


def write_dataset(ds: SynthDataset, root) -> None:
    root = Path(root)
    (root / "streams").mkdir(parents=True, exist_ok=True)
    with open(root / "meta.json", "w") as fh:
        json.dump(ds.meta, fh, indent=2)
    with open(root / "videos.jsonl", "w") as vfh, open(root / "qa.jsonl", "w") as qfh:
        for rec in ds.train + ds.heldout:
            rel = f"streams/video_{rec.split}_{rec.video_id:04d}.vsds"
            save_stream(root / rel, rec.stream)
            vfh.write(json.dumps({
                "split": rec.split, "video_id": rec.video_id, "stream": rel,
                "seed": rec.plan.seed, "clips": rec.plan.clips,
                "frames_per_clip": rec.plan.frames_per_clip, "rate": rec.plan.rate,
                "noise_sigma": rec.plan.noise_sigma,
                "events": [[c, s, i] for c, s, i in rec.plan.events]}) + "\n")
            for qa in rec.qa:
                qfh.write(json.dumps({
                    "split": rec.split, "video_id": rec.video_id, "stream": rel,
                    "kind": qa.kind, "question": qa.question, "answer": qa.answer,
                    "grounding": qa.grounding, "question_text": qa.question_text,
                    "answer_text": qa.answer_text, "span": qa.span,
                    "labeled": qa.labeled}) + "\n")


def read_dataset(root) -> SynthDataset:
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    records: dict[tuple[str, int], VideoRecord] = {}
    with open(root / "videos.jsonl") as fh:
        for line in fh:
            row = json.loads(line)
            plan = EventPlan(seed=row["seed"], clips=row["clips"],
                             frames_per_clip=row["frames_per_clip"], rate=row["rate"],
                             events=[tuple(e) for e in row["events"]],
                             noise_sigma=row["noise_sigma"])
            stream = load_stream(root / row["stream"])
            records[(row["split"], row["video_id"])] = VideoRecord(
                video_id=row["video_id"], split=row["split"], stream=stream,
                plan=plan, qa=[])
    with open(root / "qa.jsonl") as fh:
        for line in fh:
            row = json.loads(line)
            rec = records[(row["split"], row["video_id"])]
            span = tuple(row["span"]) if row.get("span") else None
            rec.qa.append(QASample(
                kind=row["kind"], question=row["question"], answer=row["answer"],
                grounding=row["grounding"], question_text=row["question_text"],
                answer_text=row["answer_text"], span=span, labeled=row["labeled"]))
    train = [r for r in records.values() if r.split == "train"]
    heldout = [r for r in records.values() if r.split == "heldout"]
    train.sort(key=lambda r: r.video_id)
    heldout.sort(key=lambda r: r.video_id)
    return SynthDataset(train=train, heldout=heldout, meta=meta)
