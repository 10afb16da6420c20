"""Closed-vocabulary word tokenizer shared by the encoder and the reader.

Template words get dedicated ids, integers are rendered digit by digit,
and answers come from single-token closed sets: symbol letters, per-clip
time-bucket tokens ("t1".."tK") and count tokens ("cnt0".."cntN").
Detokenization is an exact inverse for every string the templates can
produce.
"""

from __future__ import annotations

import re
import string

_TEMPLATE_WORDS = [
    "This", "contains", "a", "history", "of", "to", "seconds", "and",
    "clip", "sampled", "in", "is", "shows", "nothing",
    "What", "appears", "from", "When", "does", "appear",
    "How", "many", "distinct", "symbols", "Options",
]
_PUNCT = [",", ".", "?", ":"]
_DIGITS = list(string.digits)

PAD = "<pad>"
EOS = "<eos>"

_TOKEN_RE = re.compile(r"[A-Za-z]+[0-9]*|[0-9]|[,.?:]")


class Vocab:
    """Fixed vocabulary over template words, digits, symbols and answer tokens."""

    def __init__(self, alphabet_size: int = 10, max_clips: int = 64):
        if not 1 <= alphabet_size <= 26:
            raise ValueError("alphabet_size must be in [1, 26]")
        if max_clips < 1:
            raise ValueError("max_clips must be >= 1")
        self.alphabet_size = alphabet_size
        self.max_clips = max_clips
        self.symbols = list(string.ascii_uppercase[:alphabet_size])
        buckets = [f"t{k}" for k in range(1, max_clips + 1)]
        counts = [f"cnt{n}" for n in range(alphabet_size + 1)]
        self._tokens = (
            [PAD, EOS] + _TEMPLATE_WORDS + _PUNCT + _DIGITS
            + self.symbols + buckets + counts
        )
        self._id = {tok: i for i, tok in enumerate(self._tokens)}
        if len(self._id) != len(self._tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def pad_id(self) -> int:
        return self._id[PAD]

    @property
    def eos_id(self) -> int:
        return self._id[EOS]

    def id_of(self, token: str) -> int:
        if token not in self._id:
            raise KeyError(f"unknown token: {token!r}")
        return self._id[token]

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def symbol_token(self, symbol_index: int) -> int:
        return self.id_of(self.symbols[symbol_index])

    def bucket_token(self, clip_index: int) -> int:
        """Time-bucket answer token for a 1-based clip index."""
        return self.id_of(f"t{clip_index}")

    def count_token(self, count: int) -> int:
        return self.id_of(f"cnt{count}")

    def number_tokens(self, value: int) -> list[int]:
        if value < 0:
            raise ValueError("negative numbers are not representable")
        return [self._id[d] for d in str(value)]

    def encode(self, text: str) -> list[int]:
        """Tokenize a template-shaped string. Unknown words raise KeyError."""
        ids: list[int] = []
        for piece in _TOKEN_RE.findall(text):
            if piece in self._id:
                ids.append(self._id[piece])
            elif piece.isdigit():
                ids.extend(self._id[d] for d in piece)
            else:
                raise KeyError(f"unknown token: {piece!r}")
        return ids

    def decode(self, ids) -> str:
        """Inverse of encode for template output: exact spacing rules."""
        out: list[str] = []
        prev: str | None = None
        for idx in ids:
            tok = self._tokens[int(idx)]
            if tok in (PAD, EOS):
                prev = tok
                continue
            if prev is None or tok in _PUNCT:
                out.append(tok)
            elif _is_digit(tok) and prev is not None and _is_digit(prev):
                out.append(tok)  # digits of one number stay glued
            else:
                out.append(" " + tok)
            prev = tok
        return "".join(out)


def _is_digit(tok: str) -> bool:
    return len(tok) == 1 and tok.isdigit()
