import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamvqa.tokenizer import Vocab


@pytest.fixture(scope="module")
def vocab():
    return Vocab(alphabet_size=10, max_clips=64)


def test_template_roundtrip_exact(vocab):
    prompts = [
        "This contains a history of 0 to 16 seconds, and a clip sampled in 16 to 32 seconds.",
        "This clip is sampled in 0 to 16 seconds.",
        "This contains a history of 0 to 112 seconds.",
        "What appears from 48 to 56 seconds?",
        "When does B appear?",
        "How many distinct symbols appear from 0 to 128 seconds?",
        "This clip shows J.",
        "This clip shows nothing.",
        "What appears from 0 to 8 seconds? Options: C A J",
    ]
    for text in prompts:
        assert vocab.decode(vocab.encode(text)) == text


@given(a=st.integers(0, 9999), b=st.integers(0, 9999))
@settings(max_examples=50, deadline=None)
def test_roundtrip_any_spans(a, b):
    vocab = Vocab(10, 64)
    text = f"This contains a history of {a} to {b} seconds, and a clip sampled in {b} to {b + 7} seconds."
    assert vocab.decode(vocab.encode(text)) == text


def test_numbers_render_digit_by_digit(vocab):
    ids = vocab.encode("128")
    assert [vocab.token_of(i) for i in ids] == ["1", "2", "8"]


def test_dedicated_answer_tokens(vocab):
    assert vocab.token_of(vocab.symbol_token(1)) == "B"
    assert vocab.token_of(vocab.bucket_token(13)) == "t13"
    assert vocab.token_of(vocab.count_token(4)) == "cnt4"
    # single tokens, not digit sequences
    assert len(vocab.encode("t13")) == 1
    assert len(vocab.encode("cnt4")) == 1


def test_unknown_token_raises(vocab):
    with pytest.raises(KeyError):
        vocab.encode("zebra")


def test_vocab_bounds():
    with pytest.raises(ValueError):
        Vocab(alphabet_size=0)
    with pytest.raises(ValueError):
        Vocab(alphabet_size=27)
    small = Vocab(alphabet_size=3, max_clips=4)
    assert small.symbols == ["A", "B", "C"]
    with pytest.raises(KeyError):
        small.bucket_token(5)
