"""Shared bilingual subword tokenizer: byte-level BPE with byte fallback.

The vocabulary is 4 reserved ids, 256 base byte tokens, and learned merges:

    0 <pad>   reserved for padding (unused in packed training)
    1 <eot>   document separator; also the scoring anchor and prime separator
    2 <bos>   reserved, unused
    3 <unk>   reserved, unused (byte fallback makes it unreachable)
    4..259    the 256 byte values
    260..V-1  merged tokens, in merge-rank order

Training samples the same number of lines from each language so the merge
table is balanced regardless of corpus size imbalance.  Segmentation is the
classic greedy lowest-rank merge; because the base alphabet covers every
byte, any UTF-8 string round-trips exactly.
"""

from __future__ import annotations

import random
import re
import struct
from collections import Counter
from pathlib import Path
from typing import Iterable

from .errors import ValidationError
from .hashing import file_sha256

SPECIAL_TOKENS = ("<pad>", "<eot>", "<bos>", "<unk>")
PAD_ID, EOT_ID, BOS_ID, UNK_ID = 0, 1, 2, 3
N_SPECIALS = len(SPECIAL_TOKENS)
BYTE_BASE = N_SPECIALS  # ids BYTE_BASE..BYTE_BASE+255 are raw bytes
MIN_VOCAB = BYTE_BASE + 256

MAGIC = b"XLITOK01"

# Words keep one leading space; runs of extra whitespace stand alone, so the
# concatenation of pretokens is exactly the input string.
_PRETOKEN_RE = re.compile(r" ?\w+| ?[^\w\s]+|\s+(?!\S)|\s+")


def _bytes_to_unicode() -> dict[int, str]:
    # Bijection from byte values to printable characters, so token strings
    # (including the word-boundary space) are visible in vocab listings.
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("¡"), ord("¬") + 1))
        + list(range(ord("®"), ord("ÿ") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


_BYTE_DISPLAY = _bytes_to_unicode()


def pretokenize(text: str) -> list[str]:
    return _PRETOKEN_RE.findall(text)


class TokenizerModel:
    """Immutable trained tokenizer; safe for concurrent encode/decode."""

    def __init__(self, merges: list[tuple[int, int]]):
        self.merges = list(merges)
        self.vocab_size = MIN_VOCAB + len(self.merges)
        # id -> byte string for byte and merged tokens
        self._token_bytes: list[bytes] = [b""] * BYTE_BASE + [bytes([b]) for b in range(256)]
        for left, right in self.merges:
            if not (BYTE_BASE <= left < len(self._token_bytes)) or not (
                BYTE_BASE <= right < len(self._token_bytes)
            ):
                raise ValidationError(f"merge ({left},{right}) references unknown id")
            self._token_bytes.append(self._token_bytes[left] + self._token_bytes[right])
        self._rank = {pair: i for i, pair in enumerate(self.merges)}
        self._cache: dict[str, tuple[int, ...]] = {}

    # -- encoding ---------------------------------------------------------

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for pretoken in pretokenize(text):
            cached = self._cache.get(pretoken)
            if cached is None:
                cached = tuple(self._bpe(pretoken.encode("utf-8")))
                if len(self._cache) < 1 << 16:
                    self._cache[pretoken] = cached
            ids.extend(cached)
        return ids

    def _bpe(self, raw: bytes) -> list[int]:
        parts = [BYTE_BASE + b for b in raw]
        while len(parts) > 1:
            best_rank = None
            for i in range(len(parts) - 1):
                r = self._rank.get((parts[i], parts[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank = r
            if best_rank is None:
                break
            left, right = self.merges[best_rank]
            parts = _merge_symbols(parts, left, right, MIN_VOCAB + best_rank)
        return parts

    def decode(self, ids: Iterable[int]) -> str:
        buf = bytearray()
        for tid in ids:
            if not 0 <= tid < self.vocab_size:
                raise ValidationError(f"token id {tid} out of range (vocab {self.vocab_size})")
            if tid < BYTE_BASE:
                continue  # specials carry no text
            buf.extend(self._token_bytes[tid])
        return buf.decode("utf-8", errors="replace")

    # -- introspection ----------------------------------------------------

    def token_display(self, tid: int) -> str:
        if tid < BYTE_BASE:
            return SPECIAL_TOKENS[tid]
        return "".join(_BYTE_DISPLAY[b] for b in self._token_bytes[tid])

    def vocab(self) -> list[tuple[str, int]]:
        return [(self.token_display(i), i) for i in range(self.vocab_size)]

    # -- serialization ----------------------------------------------------

    def save(self, path: str | Path) -> None:
        out = bytearray()
        out += MAGIC
        out += struct.pack("<II", self.vocab_size, len(self.merges))
        out += struct.pack("<IIII", PAD_ID, EOT_ID, BOS_ID, UNK_ID)
        for left, right in self.merges:
            out += struct.pack("<II", left, right)
        Path(path).write_bytes(bytes(out))

    @classmethod
    def load(cls, path: str | Path) -> "TokenizerModel":
        data = Path(path).read_bytes()
        if data[:8] != MAGIC:
            raise ValidationError(f"{path}: not a tokenizer model (bad magic)")
        vocab_size, n_merges = struct.unpack_from("<II", data, 8)
        offset = 8 + 8 + 16
        merges = []
        for i in range(n_merges):
            merges.append(struct.unpack_from("<II", data, offset + 8 * i))
        model = cls(merges)
        if model.vocab_size != vocab_size:
            raise ValidationError(f"{path}: header vocab {vocab_size} != derived {model.vocab_size}")
        return model

    @staticmethod
    def sha256(path: str | Path) -> str:
        return file_sha256(path)


def _merge_symbols(sym: list[int], left: int, right: int, new_id: int) -> list[int]:
    out = []
    i = 0
    n = len(sym)
    while i < n:
        if i + 1 < n and sym[i] == left and sym[i + 1] == right:
            out.append(new_id)
            i += 2
        else:
            out.append(sym[i])
            i += 1
    return out


def _read_lines(corpus: str | Path | Iterable[str]) -> list[str]:
    if isinstance(corpus, (str, Path)):
        with open(corpus, encoding="utf-8") as f:
            return [ln.rstrip("\n") for ln in f]
    return [ln.rstrip("\n") for ln in corpus]


def train_tokenizer(
    corpus_a: str | Path | Iterable[str],
    corpus_b: str | Path | Iterable[str],
    lines_per_language: int,
    vocab_size: int,
    seed: int,
) -> TokenizerModel:
    """Train a shared tokenizer on an equal line sample from both corpora.

    The sample holds exactly ``lines_per_language`` lines from each corpus,
    drawn without replacement under ``seed``; the resulting vocabulary size
    equals ``vocab_size`` exactly.
    """
    if vocab_size <= MIN_VOCAB:
        raise ValidationError(
            f"vocab_size must exceed {MIN_VOCAB} (256 bytes + {N_SPECIALS} specials), got {vocab_size}"
        )
    rng = random.Random(seed)
    sample: list[str] = []
    for name, corpus in (("corpus_a", corpus_a), ("corpus_b", corpus_b)):
        lines = _read_lines(corpus)
        if len(lines) < lines_per_language:
            raise ValidationError(
                f"{name} exhausted: {len(lines)} lines < quota {lines_per_language}"
            )
        sample.extend(rng.sample(lines, lines_per_language))

    word_freq: Counter[tuple[int, ...]] = Counter()
    for line in sample:
        for pretoken in pretokenize(line):
            word_freq[tuple(BYTE_BASE + b for b in pretoken.encode("utf-8"))] += 1

    token_bytes: list[bytes] = [b"" for _ in range(BYTE_BASE)] + [bytes([b]) for b in range(256)]
    words: list[list[int]] = [list(w) for w in word_freq]
    freqs: list[int] = [word_freq[tuple(w)] for w in words]

    pair_counts: Counter[tuple[int, int]] = Counter()
    pair_words: dict[tuple[int, int], set[int]] = {}
    for wi, w in enumerate(words):
        for pair in zip(w, w[1:]):
            pair_counts[pair] += freqs[wi]
            pair_words.setdefault(pair, set()).add(wi)

    n_merges = vocab_size - MIN_VOCAB
    merges: list[tuple[int, int]] = []
    for _ in range(n_merges):
        best = None
        best_key = None
        for pair, count in pair_counts.items():
            if count <= 0:
                continue
            # Highest count; ties broken by the smallest merged byte string.
            key = (-count, token_bytes[pair[0]] + token_bytes[pair[1]], token_bytes[pair[0]])
            if best_key is None or key < best_key:
                best, best_key = pair, key
        if best is None:
            raise ValidationError(
                f"corpus too small: ran out of merge pairs after {len(merges)} merges "
                f"(need {n_merges} for vocab {vocab_size})"
            )
        new_id = MIN_VOCAB + len(merges)
        merges.append(best)
        token_bytes.append(token_bytes[best[0]] + token_bytes[best[1]])

        for wi in sorted(pair_words.get(best, ())):
            w = words[wi]
            if len(w) < 2:
                continue
            merged = _merge_symbols(w, best[0], best[1], new_id)
            if merged == w:
                continue
            f = freqs[wi]
            for pair in zip(w, w[1:]):
                pair_counts[pair] -= f
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
            for pair in zip(merged, merged[1:]):
                pair_counts[pair] += f
                pair_words.setdefault(pair, set()).add(wi)
            words[wi] = merged
        pair_words.pop(best, None)

    return TokenizerModel(merges)
