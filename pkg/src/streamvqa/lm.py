"""A small decoder-only transformer with arbitrary binary attention masks.

Pre-norm residual blocks, learned absolute positions, multi-head attention
and a GELU MLP. Sequences are packed from token segments (embedded through
the vocabulary table) and pre-computed vector segments (injected directly
after the embedding stage); both kinds share the positional scheme. The
hidden state of any block ("tap") can be read out alongside the final
logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    dim: int
    n_layers: int
    n_heads: int
    mlp_ratio: int = 4
    max_seq_len: int = 512
    tap_layer: int = 1

    def __post_init__(self):
        if self.dim % self.n_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if not 1 <= self.tap_layer <= self.n_layers:
            raise ValueError(f"tap_layer {self.tap_layer} outside [1, {self.n_layers}]")
        if self.vocab_size < 1 or self.max_seq_len < 1:
            raise ValueError("vocab_size and max_seq_len must be positive")


class AttentionMask:
    """L x L binary visibility matrix; M[i][j] = 1 iff i may attend to j.

    Never anticausal (j <= i whenever M[i][j] = 1) and the diagonal is all
    ones, so every row has at least one allowed key.
    """

    def __init__(self, matrix: np.ndarray):
        m = np.asarray(matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("attention mask must be square")
        if not (((m == 0) | (m == 1)).all()):
            raise ValueError("attention mask must be binary")
        if np.any(np.triu(m, k=1) != 0):
            raise ValueError("attention mask is anticausal")
        if np.any(np.diag(m) != 1):
            raise ValueError("attention mask diagonal must be all ones")
        self.matrix = m.astype(np.uint8)
        self.bool_matrix = self.matrix.astype(bool)

    @property
    def length(self) -> int:
        return self.matrix.shape[0]


@lru_cache(maxsize=512)
def build_causal_mask(length: int) -> AttentionMask:
    """Standard lower-triangular causal mask (cached; treat as immutable)."""
    if length < 1:
        raise ValueError("mask length must be >= 1")
    return AttentionMask(np.tril(np.ones((length, length), dtype=np.uint8)))


# Segment roles used across the pipeline.
ROLES = ("prompt", "memory", "clip-features", "summarization", "global", "text")


@dataclass
class Segment:
    """Either a run of token ids or a run of pre-computed model-space vectors."""

    role: str
    tokens: np.ndarray | None = None
    vectors: Tensor | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown segment role: {self.role!r}")
        if (self.tokens is None) == (self.vectors is None):
            raise ValueError("segment needs exactly one of tokens or vectors")
        if self.tokens is not None:
            self.tokens = np.asarray(self.tokens, dtype=np.int64)

    def __len__(self) -> int:
        if self.tokens is not None:
            return int(self.tokens.shape[0])
        return int(self.vectors.shape[0])


@dataclass
class PackedSequence:
    segments: list[Segment] = field(default_factory=list)

    @staticmethod
    def of_tokens(ids, role: str = "text") -> "PackedSequence":
        return PackedSequence([Segment(role, tokens=np.asarray(ids, dtype=np.int64))])

    def append_tokens(self, ids, role: str = "text") -> None:
        self.segments.append(Segment(role, tokens=np.asarray(ids, dtype=np.int64)))

    def append_vectors(self, vectors: Tensor, role: str) -> None:
        self.segments.append(Segment(role, vectors=vectors))

    def __len__(self) -> int:
        return sum(len(s) for s in self.segments)

    def span_of(self, role: str) -> tuple[int, int]:
        """(start, length) of the first run of segments with this role."""
        pos = 0
        for seg in self.segments:
            if seg.role == role:
                return pos, len(seg)
            pos += len(seg)
        raise KeyError(f"no segment with role {role!r}")


@dataclass
class ForwardResult:
    hidden_at_tap: Tensor  # (L, D) or (B, L, D)
    logits: Tensor         # (L, vocab) or (B, L, vocab)


class MiniLm:
    """Decoder-only transformer over packed sequences."""

    def __init__(self, cfg: LmConfig, rng: np.random.Generator, init_std: float = 0.02):
        self.cfg = cfg
        d, ratio = cfg.dim, cfg.mlp_ratio
        p: dict[str, Tensor] = {}

        def w(name, shape, std=init_std):
            p[name] = ag.randn(shape, rng, std=std, requires_grad=True)

        def z(name, shape):
            p[name] = ag.zeros(shape, requires_grad=True)

        def ones(name, shape):
            p[name] = ag.tensor(np.ones(shape), requires_grad=True)

        w("tok_emb", (cfg.vocab_size, d))
        w("pos_emb", (cfg.max_seq_len, d))
        for i in range(cfg.n_layers):
            pre = f"blocks.{i}."
            ones(pre + "ln1.g", (d,)); z(pre + "ln1.b", (d,))
            for nm in ("wq", "wk", "wv", "wo"):
                w(pre + nm, (d, d))
            for nm in ("bq", "bk", "bv", "bo"):
                z(pre + nm, (d,))
            ones(pre + "ln2.g", (d,)); z(pre + "ln2.b", (d,))
            w(pre + "w1", (d, ratio * d)); z(pre + "b1", (ratio * d,))
            w(pre + "w2", (ratio * d, d)); z(pre + "b2", (d,))
        ones("ln_f.g", (d,)); z("ln_f.b", (d,))
        w("head", (d, cfg.vocab_size))
        z("head_b", (cfg.vocab_size,))
        self._p = p

    def params(self) -> dict[str, Tensor]:
        return self._p

    def set_trainable(self, trainable: bool) -> None:
        for t in self._p.values():
            t.requires_grad = trainable

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self._p.items():
            if k not in arrays:
                raise KeyError(f"missing parameter {k!r}")
            if arrays[k].shape != t.shape:
                raise ValueError(f"shape mismatch for {k!r}: {arrays[k].shape} vs {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)

    # -- sequence assembly ---------------------------------------------------

    def embed(self, seq: PackedSequence) -> Tensor:
        """Token segments through the embedding table, vectors injected as-is.

        Positional embeddings are NOT added here; forward_embedded adds them,
        so token and injected positions share one scheme.
        """
        parts: list[Tensor] = []
        for seg in seq.segments:
            if len(seg) == 0:
                continue
            if seg.tokens is not None:
                parts.append(ag.embedding(self._p["tok_emb"], seg.tokens))
            else:
                if seg.vectors.shape[-1] != self.cfg.dim:
                    raise ValueError(
                        f"injected vectors have dim {seg.vectors.shape[-1]}, model dim {self.cfg.dim}")
                parts.append(seg.vectors)
        if not parts:
            raise ValueError("cannot embed an empty sequence")
        return ag.concat(parts, axis=0)

    # -- forward -------------------------------------------------------------

    def forward_embedded(self, x: Tensor, mask: AttentionMask) -> ForwardResult:
        """Run the blocks over an already-embedded (L, D) or (B, L, D) input."""
        single = x.ndim == 2
        if single:
            x = ag.reshape(x, (1,) + x.shape)
        b, length, d = x.shape
        cfg = self.cfg
        if length > cfg.max_seq_len:
            raise ValueError(f"sequence length {length} exceeds max {cfg.max_seq_len}")
        if mask.length != length:
            raise ValueError(f"mask length {mask.length} != sequence length {length}")

        pos = ag.narrow(self._p["pos_emb"], 0, 0, length)
        x = ag.add(x, pos)  # broadcasts over batch

        p = self._p
        heads = cfg.n_heads
        dh = d // heads
        scale = 1.0 / np.sqrt(dh)
        tap = None
        for i in range(cfg.n_layers):
            pre = f"blocks.{i}."
            h = ag.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = ag.add(ag.matmul(h, p[pre + "wq"]), p[pre + "bq"])
            k = ag.add(ag.matmul(h, p[pre + "wk"]), p[pre + "bk"])
            v = ag.add(ag.matmul(h, p[pre + "wv"]), p[pre + "bv"])
            q = ag.mul(q, ag.tensor(scale))  # scale q, not the L x L scores
            # (B, L, D) -> (B, H, L, dh)
            q = ag.transpose(ag.reshape(q, (b, length, heads, dh)), (0, 2, 1, 3))
            k = ag.transpose(ag.reshape(k, (b, length, heads, dh)), (0, 2, 1, 3))
            v = ag.transpose(ag.reshape(v, (b, length, heads, dh)), (0, 2, 1, 3))
            scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2)))
            probs = ag.masked_softmax(scores, mask.bool_matrix)
            ctx = ag.matmul(probs, v)
            ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (b, length, d))
            attn_out = ag.add(ag.matmul(ctx, p[pre + "wo"]), p[pre + "bo"])
            x = ag.add(x, attn_out)

            h2 = ag.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            m1 = ag.gelu(ag.add(ag.matmul(h2, p[pre + "w1"]), p[pre + "b1"]))
            m2 = ag.add(ag.matmul(m1, p[pre + "w2"]), p[pre + "b2"])
            x = ag.add(x, m2)

            if i + 1 == cfg.tap_layer:
                tap = x

        final = ag.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        logits = ag.add(ag.matmul(final, p["head"]), p["head_b"])
        if single:
            tap = ag.reshape(tap, tap.shape[1:])
            logits = ag.reshape(logits, logits.shape[1:])
        return ForwardResult(hidden_at_tap=tap, logits=logits)

    def forward(self, seq: PackedSequence, mask: AttentionMask) -> ForwardResult:
        return self.forward_embedded(self.embed(seq), mask)

    # -- decoding --------------------------------------------------------------

    def generate(self, seq: PackedSequence, *, max_new: int,
                 mode: str = "greedy", temperature: float = 1.0,
                 eos_id: int | None = None,
                 rng: np.random.Generator | None = None) -> list[int]:
        """Autoregressive continuation under the causal mask.

        Greedy decoding is deterministic; temperature decoding draws from
        softmax(logits / temperature) using the supplied generator.
        """
        if mode not in ("greedy", "temperature"):
            raise ValueError(f"unknown decoding mode: {mode!r}")
        if mode == "temperature" and rng is None:
            raise ValueError("temperature decoding needs an rng")
        work = PackedSequence(list(seq.segments))
        out: list[int] = []
        with ag.no_grad():
            for _ in range(max_new):
                mask = build_causal_mask(len(work))
                res = self.forward(work, mask)
                row = res.logits.data[-1]
                if mode == "greedy":
                    nxt = int(np.argmax(row))
                else:
                    z = (row - row.max()) / temperature
                    probs = np.exp(z) / np.exp(z).sum()
                    nxt = int(rng.choice(len(row), p=probs))
                out.append(nxt)
                if eos_id is not None and nxt == eos_id:
                    break
                work.append_tokens([nxt], role="text")
        return out
