"""The answering stage and the two-stage progressive training procedure.

One model object bundles the streaming encoder, its feature projector, and
a second small LM (the "reader") behind a memory-to-reader projector.
Stage 1 teaches single-clip condensation with the prefix mask; stage 2
trains streaming encoding, selection (KL warm-up, then weakly supervised
straight-through) and the reader jointly. Evaluation reports answer
accuracy and temporal grounding quality.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Adam, Tensor, load_checkpoint, save_checkpoint
from .clip_encoder import MlpProjector, PrefixMaskSpec, build_prefix_mask, \
    init_summarization, merge_adjacent_tokens
from .config import RunConfig, config_fingerprint
from .lm import LmConfig, MiniLm, PackedSequence, Segment, build_causal_mask
from .selector import SelectionResult, assemble, gumbel_topk, instruction_indicator, \
    selection_kl_loss, similarity
from .streaming import MemoryBank, VideoStream, encode_video
from .synthdata import QASample, SynthDataset, VideoRecord
from .tokenizer import Vocab


def derive_seed(*parts) -> int:
    """Stable 31-bit seed from arbitrary parts (unsalted, unlike hash())."""
    blob = "/".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "little") & 0x7FFFFFFF


class VideoQaModel:
    """Streaming encoder + projectors + reader, with flat named parameters."""

    def __init__(self, cfg: RunConfig, vocab: Vocab):
        self.cfg = cfg
        self.vocab = vocab
        rng = np.random.default_rng(cfg.seed_init)
        self.encoder = MiniLm(LmConfig(
            vocab_size=len(vocab), dim=cfg.enc_dim, n_layers=cfg.enc_layers,
            n_heads=cfg.enc_heads, mlp_ratio=cfg.enc_mlp_ratio,
            max_seq_len=cfg.enc_max_seq, tap_layer=cfg.tap_layer), rng)
        self.feat_proj = MlpProjector(cfg.merged_channels, cfg.enc_dim, rng)
        self.reader = MiniLm(LmConfig(
            vocab_size=len(vocab), dim=cfg.reader_dim, n_layers=cfg.reader_layers,
            n_heads=cfg.reader_heads, mlp_ratio=cfg.reader_mlp_ratio,
            max_seq_len=cfg.reader_max_seq, tap_layer=cfg.reader_layers), rng)
        self.reader_proj = MlpProjector(cfg.enc_dim, cfg.reader_dim, rng)
        self.clip_encode_calls = 0

    _GROUPS = ("encoder", "feat_proj", "reader", "reader_proj")

    def _group(self, name: str):
        return getattr(self, name)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for g in self._GROUPS:
            for k, t in self._group(g).params().items():
                out[f"{g}.{k}"] = t
        return out

    def save(self, path) -> None:
        save_checkpoint(path, self.params())

    @classmethod
    def load(cls, path, cfg: RunConfig, vocab: Vocab) -> "VideoQaModel":
        model = cls(cfg, vocab)
        arrays = load_checkpoint(path)
        for g in cls._GROUPS:
            prefix = g + "."
            sub = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            model._group(g).load_state(sub)
        return model

    def fingerprint(self) -> str:
        return config_fingerprint(self.cfg)

    def encode(self, stream: VideoStream, *, train: bool = False,
               propagate_memory: bool = True) -> MemoryBank:
        """Streaming-encode one video. Inference detaches the bank."""

        def count(_entry):
            self.clip_encode_calls += 1

        def run():
            return encode_video(
                self.encoder, self.feat_proj, stream,
                frames_per_clip=self.cfg.frames_per_clip,
                summary_tokens=self.cfg.summary_tokens, vocab=self.vocab,
                time_prompt=self.cfg.time_prompt, fingerprint=self.fingerprint(),
                propagate_memory=propagate_memory, step_hook=count)

        if train:
            return run()
        with ag.no_grad():
            return run().detached()


@dataclass
class AnswerResult:
    tokens: list[int]
    text: str
    selection: SelectionResult


def forced_selection(bank: MemoryBank, positions: list[int],
                     scores: np.ndarray | None = None) -> SelectionResult:
    """A SelectionResult pinned to explicit 0-based positions (ablations,
    and re-running the reader stage with a fixed choice)."""
    hard = np.zeros(len(bank.entries))
    hard[list(positions)] = 1.0
    s = scores if scores is not None else np.zeros(len(bank.entries))
    return SelectionResult(scores=s, hard=hard, soft=hard / max(hard.sum(), 1.0),
                           st=None, tau=1.0, seed=None, mode="inference")


def answer(model: VideoQaModel, bank: MemoryBank, question: list[int],
           *, force_positions: list[int] | None = None,
           rng: np.random.Generator | None = None) -> AnswerResult:
    """Select memories for the question and decode an answer from the reader.

    Runs zero clip-encoding passes: everything is read from the bank.
    `force_positions` skips indicator/similarity/top-V entirely.
    """
    cfg = model.cfg
    with ag.no_grad():
        if force_positions is not None:
            sel = forced_selection(bank, force_positions)
        else:
            ind = instruction_indicator(model.encoder, bank, question)
            s = similarity(ind, bank, cfg.similarity)
            sel = gumbel_topk(s, cfg.select_count, tau=cfg.tau_select,
                              mode="inference")
        memories = assemble(bank, sel)
        projected = model.reader_proj(memories)
        seq = PackedSequence([
            Segment("memory", vectors=projected),
            Segment("text", tokens=np.asarray(question, dtype=np.int64)),
        ])
        out = model.reader.generate(
            seq, max_new=3, mode=cfg.decoding, temperature=cfg.temperature,
            eos_id=model.vocab.eos_id, rng=rng)
    tokens = [t for t in out if t != model.vocab.eos_id]
    return AnswerResult(tokens=tokens, text=model.vocab.decode(tokens), selection=sel)


# -- stage 1: single-clip prefix task -------------------------------------------


def stage1_batch_loss(model: VideoQaModel, features: np.ndarray,
                      captions: np.ndarray) -> Tensor:
    """Prefix-task loss for a batch of clips with equal-length captions.

    features: (B, T, N0, c) raw; captions: (B, TT) token ids. The loss is
    next-token cross-entropy on caption targets only, under the modified mask.
    """
    cfg = model.cfg
    b, t, n0, c = features.shape
    merged = merge_adjacent_tokens(features.reshape(b * t, n0, c)).reshape(
        b, t * cfg.merged_tokens, cfg.merged_channels)
    pooled = np.stack([
        init_summarization(
            merge_adjacent_tokens(features[i]), cfg.summary_tokens)[0].reshape(
                t * cfg.summary_tokens, cfg.merged_channels)
        for i in range(b)])

    f_proj = model.feat_proj(merged)          # (B, T*N, D)
    s_proj = model.feat_proj(pooled)          # (B, T*P, D)
    cap_emb = ag.embedding(model.encoder.params()["tok_emb"], captions)
    x = ag.concat([f_proj, s_proj, cap_emb], axis=1)

    tn = t * cfg.merged_tokens
    tp = t * cfg.summary_tokens
    tt = captions.shape[1]
    mask = build_prefix_mask(PrefixMaskSpec(tn=tn, tp=tp, tt=tt))
    res = model.encoder.forward_embedded(x, mask)

    length = tn + tp + tt
    targets = np.zeros((b, length), dtype=np.int64)
    weights = np.zeros((b, length))
    # position i predicts the token at i+1; caption targets live at
    # positions tn+tp-1 .. length-2
    targets[:, tn + tp - 1:length - 1] = captions
    weights[:, tn + tp - 1:length - 1] = 1.0
    return ag.cross_entropy(res.logits, targets, weights)


def train_stage1(model: VideoQaModel, clip_samples, *, log=None) -> dict:
    """Alignment phase (projector only, encoder frozen), then the instruction
    phase (encoder + projector), both under the prefix mask."""
    cfg = model.cfg
    feats = np.stack([f for f, _ in clip_samples])
    caps = np.stack([np.asarray(ids, dtype=np.int64) for _, ids in clip_samples])
    n = feats.shape[0]
    bs = min(cfg.stage1_batch, n)
    history = {"align": [], "instruct": []}
    order_rng = np.random.default_rng(derive_seed(cfg.seed_init, "stage1-order"))

    proj_params = {f"feat_proj.{k}": v for k, v in model.feat_proj.params().items()}
    enc_params = {f"encoder.{k}": v for k, v in model.encoder.params().items()}

    phases = [
        ("align", cfg.epochs_align, cfg.lr_align, proj_params, False),
        ("instruct", cfg.epochs_stage1, cfg.lr_stage1, {**proj_params, **enc_params}, True),
    ]
    for name, epochs, lr, params, encoder_trainable in phases:
        if epochs <= 0:
            continue
        model.encoder.set_trainable(encoder_trainable)
        steps = epochs * ((n + bs - 1) // bs)
        opt = Adam(params, lr=lr, total_steps=steps)
        for epoch in range(epochs):
            order = order_rng.permutation(n)
            losses = []
            for lo in range(0, n, bs):
                idx = order[lo:lo + bs]
                loss = stage1_batch_loss(model, feats[idx], caps[idx])
                loss.backward()
                opt.step()
                opt.zero_grad()
                losses.append(loss.item())
            history[name].append(float(np.mean(losses)))
            if log:
                log(f"stage1/{name} epoch {epoch + 1}/{epochs} loss {history[name][-1]:.4f}")
    model.encoder.set_trainable(True)
    return history


# -- stage 2: streaming, selection and the reader --------------------------------


def reader_loss(model: VideoQaModel, bank: MemoryBank, qa: QASample, *,
                selection: SelectionResult, train_selection: bool) -> Tensor:
    """Teacher-forced next-token loss on the answer tokens plus the end token."""
    cfg = model.cfg
    memories = assemble(bank, selection, train=train_selection,
                        grad_through_memories=cfg.grad_through_memories)
    projected = model.reader_proj(memories)
    ans = list(qa.answer) + [model.vocab.eos_id]
    q = np.asarray(qa.question, dtype=np.int64)
    seq = PackedSequence([
        Segment("memory", vectors=projected),
        Segment("text", tokens=q),
        Segment("text", tokens=np.asarray(ans, dtype=np.int64)),
    ])
    x = model.reader.embed(seq)
    length = len(seq)
    res = model.reader.forward_embedded(x, build_causal_mask(length))
    mem_len = projected.shape[0]
    start = mem_len + len(q) - 1  # position predicting the first answer token
    targets = np.zeros((length,), dtype=np.int64)
    weights = np.zeros((length,))
    targets[start:start + len(ans)] = ans
    weights[start:start + len(ans)] = 1.0
    return ag.cross_entropy(res.logits, targets, weights)


def qa_step_loss(model: VideoQaModel, bank: MemoryBank, qa: QASample, *,
                 sel_seed: int, use_kl: bool) -> Tensor:
    """One QA sample's training loss against an (already encoded) bank."""
    cfg = model.cfg
    ind = instruction_indicator(model.encoder, bank, qa.question)
    s = similarity(ind, bank, cfg.similarity)
    sel = gumbel_topk(s, cfg.select_count, tau=cfg.tau_select, mode="train",
                      seed=sel_seed, noise=True)
    loss = reader_loss(model, bank, qa, selection=sel,
                       train_selection=cfg.grad_through_selection)
    if use_kl:
        loss = ag.add(loss, ag.mul(selection_kl_loss(s, qa.grounding, cfg.tau_select),
                                   ag.tensor(cfg.kl_weight)))
    return loss


def selection_hit_rate(model: VideoQaModel, videos: list[VideoRecord],
                       limit: int | None = None) -> float:
    """Fraction of QA whose ground truth intersects the inference top-V."""
    cfg = model.cfg
    hits = total = 0
    for rec in videos[:limit]:
        bank = model.encode(rec.stream)
        with ag.no_grad():
            for qa in rec.qa:
                ind = instruction_indicator(model.encoder, bank, qa.question)
                s = similarity(ind, bank, cfg.similarity)
                sel = gumbel_topk(s, cfg.select_count, tau=cfg.tau_select,
                                  mode="inference")
                hits += bool(set(sel.indices) & set(qa.grounding))
                total += 1
    return hits / max(total, 1)


def _phase_schedule(cfg: RunConfig, regime: str):
    """(name, qa filter, kl on labeled, epochs) per phase of the chosen regime."""
    lab = lambda qa: qa.labeled          # noqa: E731
    unlab = lambda qa: not qa.labeled    # noqa: E731
    every = lambda qa: True              # noqa: E731
    total = cfg.epochs_warmup + cfg.epochs_joint
    if regime == "none":
        return [("joint", every, False, total)]
    if regime == "warmup":
        return [("warmup", lab, True, cfg.epochs_warmup),
                ("joint", unlab, False, cfg.epochs_joint)]
    if regime == "mixed":
        return [("mixed", every, True, total)]
    if regime == "warmup+mixed":
        return [("warmup", lab, True, cfg.epochs_warmup),
                ("mixed", every, True, cfg.epochs_joint)]
    raise ValueError(f"unknown training regime {regime!r}")


def train_stage2(model: VideoQaModel, ds: SynthDataset, *, regime: str | None = None,
                 track_selection: bool = False, log=None) -> dict:
    """Streaming long-video training under one of the four supervision regimes.

    KL supervision, where a phase allows it, applies only to samples carrying
    the labeled flag. With `track_selection`, held-out top-V hit rate is
    recorded before training and after every epoch.
    """
    cfg = model.cfg
    regime = regime or cfg.regime
    phases = _phase_schedule(cfg, regime)
    videos = ds.train
    history: dict = {"phases": [], "selection_acc": []}
    probe = ds.heldout[:8]

    if track_selection and probe:
        history["selection_acc"].append(selection_hit_rate(model, probe))

    order_rng = np.random.default_rng(derive_seed(cfg.seed_gumbel, "stage2-order", regime))
    for phase_name, keep, kl_on, epochs in phases:
        if epochs <= 0:
            continue
        opt = Adam(model.params(), lr=cfg.lr_stage2, total_steps=epochs * len(videos))
        phase_losses = []
        for epoch in range(epochs):
            order = order_rng.permutation(len(videos))
            losses = []
            for vi in order:
                rec = videos[int(vi)]
                qa_list = [qa for qa in rec.qa if keep(qa)]
                if not qa_list:
                    continue
                bank = model.encode(rec.stream, train=True)
                terms = []
                for j, qa in enumerate(qa_list):
                    seed = derive_seed(cfg.seed_gumbel, phase_name, epoch,
                                       rec.video_id, j)
                    terms.append(qa_step_loss(model, bank, qa, sel_seed=seed,
                                              use_kl=kl_on and qa.labeled))
                loss = ag.mul(ag.concat([ag.reshape(t, (1,)) for t in terms]).sum(),
                              ag.tensor(1.0 / len(terms)))
                loss.backward()
                opt.step()
                opt.zero_grad()
                losses.append(loss.item())
            mean_loss = float(np.mean(losses)) if losses else 0.0
            phase_losses.append(mean_loss)
            if track_selection and probe:
                history["selection_acc"].append(selection_hit_rate(model, probe))
            if log:
                log(f"stage2/{phase_name} epoch {epoch + 1}/{epochs} loss {mean_loss:.4f}")
        history["phases"].append({"name": phase_name, "losses": phase_losses})
    return history


# -- evaluation -------------------------------------------------------------------


@dataclass
class EvalRecord:
    video_id: int
    kind: str
    grounding: list[int]
    indices: list[int]
    spans: list[tuple[int, int]]
    similarities: list[float]
    iop: float
    hit: bool
    correct: bool
    joint: bool
    early: bool
    answer_text: str
    expected_text: str


@dataclass
class EvalSummary:
    count: int = 0
    hit_rate: float = 0.0
    mean_iop: float = 0.0
    iop_at_05: float = 0.0
    answer_acc: float = 0.0
    joint_acc: float = 0.0
    by_kind: dict = field(default_factory=dict)


def _summarize(records: list[EvalRecord]) -> EvalSummary:
    if not records:
        return EvalSummary()
    s = EvalSummary(count=len(records))
    s.hit_rate = float(np.mean([r.hit for r in records]))
    s.mean_iop = float(np.mean([r.iop for r in records]))
    s.iop_at_05 = float(np.mean([r.iop >= 0.5 for r in records]))
    s.answer_acc = float(np.mean([r.correct for r in records]))
    s.joint_acc = float(np.mean([r.joint for r in records]))
    return s


def summarize_records(records: list[EvalRecord]) -> EvalSummary:
    summary = _summarize(records)
    for kind in sorted({r.kind for r in records}):
        summary.by_kind[kind] = _summarize([r for r in records if r.kind == kind])
    return summary


def eval_grounding(model: VideoQaModel, videos: list[VideoRecord], *,
                   force_last: bool = False, disable_memory: bool = False,
                   workers: int | None = None) -> tuple[EvalSummary, list[EvalRecord]]:
    """Answer every QA and score grounding: IoP = |selected & gt| / |selected|,
    hit = nonempty intersection, joint = correct answer and IoP >= 0.5.

    `force_last` always takes the final V memories (the selection ablation);
    `disable_memory` re-encodes without history propagation.
    """
    cfg = model.cfg
    workers = workers if workers is not None else cfg.eval_workers

    def eval_video(rec: VideoRecord) -> list[EvalRecord]:
        bank = model.encode(rec.stream, propagate_memory=not disable_memory)
        k = len(bank.entries)
        out = []
        for qa in rec.qa:
            force = list(range(k - cfg.select_count, k)) if force_last else None
            res = answer(model, bank, qa.question, force_positions=force)
            sel = res.selection
            chosen = set(sel.indices)
            gt = set(qa.grounding)
            iop = len(chosen & gt) / max(len(chosen), 1)
            correct = res.tokens == list(qa.answer)
            out.append(EvalRecord(
                video_id=rec.video_id, kind=qa.kind, grounding=sorted(gt),
                indices=sorted(chosen),
                spans=[bank.entries[p].span for p in sel.positions],
                similarities=[float(x) for x in sel.scores],
                iop=iop, hit=bool(chosen & gt), correct=correct,
                joint=correct and iop >= 0.5,
                early=max(gt) <= k // 2,
                answer_text=res.text, expected_text=qa.answer_text))
        return out

    records: list[EvalRecord] = []
    if workers <= 1:
        for rec in videos:
            records.extend(eval_video(rec))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for batch in pool.map(eval_video, videos):
                records.extend(batch)
    return summarize_records(records), records
