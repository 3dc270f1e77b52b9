import random

import pytest

from xli.errors import ValidationError
from xli.tokenizer import (
    BYTE_BASE,
    EOT_ID,
    MIN_VOCAB,
    PAD_ID,
    TokenizerModel,
    pretokenize,
    train_tokenizer,
)

TOY_A = [f"kara toki runa mesu {i}" for i in range(40)]
TOY_B = [f"drev molk velt zust {i}" for i in range(40)]


def test_vocab_size_is_exact():
    tok = train_tokenizer(TOY_A, TOY_B, lines_per_language=10, vocab_size=300, seed=1)
    assert tok.vocab_size == 300
    assert len(tok.vocab()) == 300
    assert len(tok.merges) == 300 - MIN_VOCAB


def test_quota_exhaustion_rejected():
    with pytest.raises(ValidationError, match="exhausted"):
        train_tokenizer(TOY_A[:5], TOY_B, lines_per_language=10, vocab_size=300, seed=1)


def test_vocab_too_small_rejected():
    with pytest.raises(ValidationError, match="vocab_size"):
        train_tokenizer(TOY_A, TOY_B, lines_per_language=10, vocab_size=260, seed=1)


def test_balanced_sample_merges_cover_both_languages():
    # Language A is 40x larger, yet B words must still win merges because the
    # training sample draws equal line counts from each corpus.
    tok = train_tokenizer(TOY_A * 40, TOY_B, lines_per_language=40, vocab_size=320, seed=3)
    displays = [s for s, _ in tok.vocab()]
    assert any("drev" in d or "molk" in d for d in displays)
    assert any("kara" in d or "toki" in d for d in displays)


def test_training_is_deterministic(tmp_path):
    tok1 = train_tokenizer(TOY_A, TOY_B, lines_per_language=10, vocab_size=300, seed=9)
    tok2 = train_tokenizer(TOY_A, TOY_B, lines_per_language=10, vocab_size=300, seed=9)
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    tok1.save(p1)
    tok2.save(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_save_load_round_trip(tmp_path):
    tok = train_tokenizer(TOY_A, TOY_B, lines_per_language=10, vocab_size=300, seed=9)
    path = tmp_path / "tok.bin"
    tok.save(path)
    reloaded = TokenizerModel.load(path)
    assert reloaded.vocab_size == tok.vocab_size
    text = "kara drev 123 !?"
    assert reloaded.encode(text) == tok.encode(text)


def test_encode_empty_and_round_trips(tok):
    assert tok.encode("") == []
    assert tok.decode([]) == ""
    for text in ["kara", "kara toki", "  two  spaces ", "tabs\tand\nnewlines", "mixed 123 !?"]:
        assert tok.decode(tok.encode(text)) == text


def test_round_trip_fuzz_corpus(tok):
    rng = random.Random(4242)
    pools = [
        lambda: chr(rng.randrange(0x20, 0x7F)),
        lambda: chr(rng.randrange(0xA0, 0x2FF)),
        lambda: chr(rng.randrange(0x370, 0x3FF)),  # Greek block
        lambda: chr(rng.randrange(0x4E00, 0x4FFF)),  # CJK block
        lambda: chr(rng.randrange(0x1F600, 0x1F64F)),  # emoji block
        lambda: rng.choice(" \t\n"),
    ]
    for _ in range(1000):
        line = "".join(rng.choice(pools)() for _ in range(rng.randrange(0, 40)))
        assert tok.decode(tok.encode(line)) == line


def test_byte_fallback_for_unseen_character(tok):
    # A character absent from the training corpora encodes as its UTF-8 bytes.
    ch = "中"
    expected = [BYTE_BASE + b for b in ch.encode("utf-8")]
    assert tok.encode(ch) == expected
    assert tok.decode(expected) == ch


def test_decode_rejects_out_of_range(tok):
    with pytest.raises(ValidationError, match="out of range"):
        tok.decode([tok.vocab_size])
    with pytest.raises(ValidationError, match="out of range"):
        tok.decode([-1])


def test_specials_are_reserved_and_silent(tok):
    assert PAD_ID == 0 and EOT_ID == 1
    assert tok.decode([EOT_ID]) == ""
    assert tok.token_display(EOT_ID) == "<eot>"
    # Byte fallback means encode never emits specials.
    assert all(i >= BYTE_BASE for i in tok.encode("kara <eot> drev"))


def test_pretokenize_is_a_partition():
    for text in ["a  b", " lead", "trail ", "a\n\nb", "x", ""]:
        assert "".join(pretokenize(text)) == text


def test_word_boundary_marker_is_visible(tok):
    ids = tok.encode("kara toki")
    rendered = "".join(tok.token_display(i) for i in ids)
    assert "Ġ" in rendered  # space renders as a printable marker
    assert " " not in rendered
