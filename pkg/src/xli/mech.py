"""Mechanistic probes: layerwise vocabulary decoding of hidden states and
language-selective neuron detection with overlap analysis.

Hidden states are decoded through the model's final normalization and
unembedding at every layer, so decoded distributions are comparable across
depth and the last layer reproduces the true output logits exactly.
Neuron selectivity is estimated as mean absolute activation over a corpus
(the aggregation is a documented, swappable choice); attention "neurons"
are the d_hidden dimensions of the pre-projection attention output and FFN
neurons the d_ffn intermediate dimensions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import PackedCorpus
from .errors import ValidationError
from .hashing import bytes_sha256
from .model import ModelState, forward_batch, project_to_vocab
from .tensorfile import write_tensor_file

CLASS_NEUTRAL, CLASS_L1, CLASS_L2 = 0, 1, 2
_CLASS_NAMES = {CLASS_NEUTRAL: "neutral", CLASS_L1: "L1", CLASS_L2: "L2"}


@dataclass
class LangDictionary:
    """Per-token language class from relative corpus frequencies.

    A token is L1-class when its relative frequency in the L1 corpus is at
    least ``threshold`` times its L2 relative frequency (counting presence
    in only one corpus as that language), L2-class symmetrically, else
    neutral.
    """

    classes: np.ndarray  # int8 per token id
    counts_l1: np.ndarray
    counts_l2: np.ndarray
    threshold: float
    tokenizer_sha256: str = ""

    def class_name(self, token_id: int) -> str:
        return _CLASS_NAMES[int(self.classes[token_id])]


def _token_counts(corpus, vocab_size: int) -> np.ndarray:
    if isinstance(corpus, PackedCorpus):
        ids = corpus.sequences.ravel()
    else:
        ids = np.asarray(corpus).ravel()
    if ids.size == 0:
        raise ValidationError("empty corpus")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise ValidationError("token id out of range for vocab")
    return np.bincount(ids, minlength=vocab_size).astype(np.int64)


def build_lang_dictionary(
    l1_corpus,
    l2_corpus,
    vocab_size: int,
    threshold: float = 2.0,
    tokenizer_sha256: str = "",
) -> LangDictionary:
    if threshold <= 1.0:
        raise ValidationError(f"threshold must exceed 1, got {threshold}")
    c1 = _token_counts(l1_corpus, vocab_size)
    c2 = _token_counts(l2_corpus, vocab_size)
    r1 = c1 / c1.sum()
    r2 = c2 / c2.sum()
    classes = np.full(vocab_size, CLASS_NEUTRAL, dtype=np.int8)
    l1_mask = (r1 > 0) & (r1 >= threshold * r2)
    l2_mask = (r2 > 0) & (r2 >= threshold * r1)
    classes[l1_mask] = CLASS_L1
    classes[l2_mask] = CLASS_L2
    return LangDictionary(
        classes=classes,
        counts_l1=c1,
        counts_l2=c2,
        threshold=threshold,
        tokenizer_sha256=tokenizer_sha256,
    )


@dataclass
class LayerLanguageProfile:
    """Per-layer counts of dictionary classes among decoded top-k tokens.

    Layer 0 is the embedding output; the last layer equals the model's true
    output distribution.  ``ratios`` is L1/L2 per layer (0.0 when both
    counts are zero); layers with L2 count zero but L1 positive carry an
    infinite ratio and are listed in ``flagged_layers``.
    """

    k: int
    positions_scanned: int
    position_policy: str  # "all" or "last"
    l1_counts: list[int]
    l2_counts: list[int]
    neutral_counts: list[int]
    flagged_layers: list[int] = field(default_factory=list)

    @property
    def ratios(self) -> list[float]:
        out = []
        for l1, l2 in zip(self.l1_counts, self.l2_counts):
            if l2 == 0:
                out.append(0.0 if l1 == 0 else math.inf)
            else:
                out.append(l1 / l2)
        return out

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "positions_scanned": self.positions_scanned,
            "position_policy": self.position_policy,
            "layers": [
                {
                    "layer": i,
                    "l1": self.l1_counts[i],
                    "l2": self.l2_counts[i],
                    "neutral": self.neutral_counts[i],
                    "ratio": (None if math.isinf(r) else r),
                }
                for i, r in enumerate(self.ratios)
            ],
            "flagged_layers": self.flagged_layers,
        }


def logit_lens(
    state: ModelState,
    inputs: Sequence[Sequence[int]] | PackedCorpus,
    dictionary: LangDictionary,
    k: int = 10,
    positions: str = "all",
    tokenizer_sha256: str = "",
) -> LayerLanguageProfile:
    """Decode every residual-stream snapshot to the top-k vocabulary tokens
    and tally their dictionary classes per layer.

    ``positions`` selects whether all token positions are scanned or only
    the final position of each sequence; the profile records the choice.
    """
    if positions not in ("all", "last"):
        raise ValidationError(f"positions must be 'all' or 'last', got {positions!r}")
    if dictionary.tokenizer_sha256 and tokenizer_sha256 and dictionary.tokenizer_sha256 != tokenizer_sha256:
        raise ValidationError("tokenizer hash mismatch between dictionary and inputs")
    if isinstance(inputs, PackedCorpus):
        if (
            dictionary.tokenizer_sha256
            and inputs.tokenizer_sha256
            and dictionary.tokenizer_sha256 != inputs.tokenizer_sha256
        ):
            raise ValidationError("tokenizer hash mismatch between dictionary and corpus")
        sequences: list[Sequence[int]] = [row for row in inputs.sequences]
    else:
        sequences = list(inputs)
    if not sequences:
        raise ValidationError("no input sequences")
    if any(len(seq) == 0 for seq in sequences):
        raise ValidationError("empty input sequence")

    n_layers = state.config.n_layers + 1  # embedding output counts as layer 0
    l1 = np.zeros(n_layers, dtype=np.int64)
    l2 = np.zeros(n_layers, dtype=np.int64)
    neutral = np.zeros(n_layers, dtype=np.int64)
    scanned = 0
    classes = torch.from_numpy(dictionary.classes.astype(np.int64))
    for seq in sequences:
        row = np.asarray(seq, dtype=np.int64).reshape(1, -1)
        bt = forward_batch(state, row, trace=True)
        scanned += 1 if positions == "last" else row.shape[1]
        for layer, h in enumerate(bt.hidden_states):
            h_sel = h[:, -1:, :] if positions == "last" else h
            logits = project_to_vocab(state, h_sel)
            top = torch.topk(logits, k, dim=-1).indices.reshape(-1)
            tally = torch.bincount(classes[top], minlength=3)
            neutral[layer] += int(tally[CLASS_NEUTRAL])
            l1[layer] += int(tally[CLASS_L1])
            l2[layer] += int(tally[CLASS_L2])
    flagged = [i for i in range(n_layers) if l2[i] == 0 and l1[i] > 0]
    return LayerLanguageProfile(
        k=k,
        positions_scanned=scanned,
        position_policy=positions,
        l1_counts=l1.tolist(),
        l2_counts=l2.tolist(),
        neutral_counts=neutral.tolist(),
        flagged_layers=flagged,
    )


@dataclass
class NeuronSet:
    """Per-layer index sets of language-selective neurons."""

    language: str
    n_layers: int
    d_hidden: int
    d_ffn: int
    attention: list[list[int]]  # per layer, sorted indices over d_hidden
    ffn: list[list[int]]  # per layer, sorted indices over d_ffn
    corpus_sha256: str = ""

    def to_json(self) -> dict:
        return {
            "language": self.language,
            "n_layers": self.n_layers,
            "d_hidden": self.d_hidden,
            "d_ffn": self.d_ffn,
            "attention": self.attention,
            "ffn": self.ffn,
            "corpus_sha256": self.corpus_sha256,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NeuronSet":
        fields = {
            "language", "n_layers", "d_hidden", "d_ffn", "attention", "ffn", "corpus_sha256",
        }
        return cls(**{k: v for k, v in obj.items() if k in fields})

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        payload = {**(extra or {}), **self.to_json()}
        Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "NeuronSet":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _top_quantile(means: np.ndarray, quantile: float) -> list[int]:
    width = means.shape[0]
    n = math.ceil(quantile * width)
    # Highest mean first; ties broken toward the lower index.
    order = np.lexsort((np.arange(width), -means))
    return sorted(int(i) for i in order[:n])


def select_top_quantile(
    mean_abs_attn: Sequence[np.ndarray], mean_abs_ffn: Sequence[np.ndarray], quantile: float, language: str = "xx"
) -> NeuronSet:
    """Top-quantile index selection from precomputed per-neuron statistics."""
    if not 0 < quantile <= 1:
        raise ValidationError(f"quantile must be in (0, 1], got {quantile}")
    attention = [_top_quantile(np.asarray(m, dtype=np.float64), quantile) for m in mean_abs_attn]
    ffn = [_top_quantile(np.asarray(m, dtype=np.float64), quantile) for m in mean_abs_ffn]
    return NeuronSet(
        language=language,
        n_layers=len(attention),
        d_hidden=len(mean_abs_attn[0]),
        d_ffn=len(mean_abs_ffn[0]),
        attention=attention,
        ffn=ffn,
    )


def detect_language_neurons(
    state: ModelState,
    packed: PackedCorpus,
    quantile: float = 0.25,
    min_tokens: int = 1,
    batch_rows: int = 16,
) -> NeuronSet:
    """Neurons whose mean absolute activation over the corpus ranks in the
    top quantile of their layer and sublayer."""
    if packed.n_rows == 0 or packed.token_budget_used < max(min_tokens, 1):
        raise ValidationError(
            f"corpus has {packed.token_budget_used} tokens, need >= {max(min_tokens, 1)}"
        )
    cfg = state.config
    sum_attn = [np.zeros(cfg.d_hidden, dtype=np.float64) for _ in range(cfg.n_layers)]
    sum_ffn = [np.zeros(cfg.d_ffn, dtype=np.float64) for _ in range(cfg.n_layers)]
    n_tokens = 0
    for lo in range(0, packed.n_rows, batch_rows):
        rows = packed.sequences[lo : lo + batch_rows]
        bt = forward_batch(state, rows, trace=True)
        n_tokens += rows.size
        for layer in range(cfg.n_layers):
            sum_attn[layer] += bt.attn_activations[layer].abs().sum(dim=(0, 1)).double().numpy()
            sum_ffn[layer] += bt.ffn_activations[layer].abs().sum(dim=(0, 1)).double().numpy()
    ns = select_top_quantile(
        [s / n_tokens for s in sum_attn],
        [s / n_tokens for s in sum_ffn],
        quantile,
        language=packed.language_code,
    )
    ns.corpus_sha256 = bytes_sha256(np.ascontiguousarray(packed.sequences).tobytes())
    return ns


def dump_activations(
    state: ModelState,
    packed: PackedCorpus,
    path: str | Path,
    max_rows: int = 8,
) -> None:
    """Raw per-layer activation dump for external analysis.

    Uses the same tensor container as checkpoints: per layer, the attention
    pre-projection output [rows, seq, d_hidden] and the FFN intermediate
    [rows, seq, d_ffn].
    """
    rows = packed.sequences[:max_rows]
    if rows.shape[0] == 0:
        raise ValidationError("empty corpus")
    bt = forward_batch(state, rows, trace=True)
    tensors: dict[str, np.ndarray] = {"tokens": rows.astype(np.int32)}
    for layer in range(state.config.n_layers):
        tensors[f"attn.{layer}"] = bt.attn_activations[layer].numpy()
        tensors[f"ffn.{layer}"] = bt.ffn_activations[layer].numpy()
    meta = {
        "kind": "xli-activation-dump",
        "format_version": 1,
        "language": packed.language_code,
        "n_rows": int(rows.shape[0]),
        "seq_len": packed.seq_len,
        "corpus_sha256": bytes_sha256(np.ascontiguousarray(packed.sequences).tobytes()),
    }
    write_tensor_file(path, meta, tensors)


@dataclass
class OverlapReport:
    per_layer_attention: list[int]
    per_layer_ffn: list[int]
    total_attention: int
    total_ffn: int

    @property
    def total(self) -> int:
        return self.total_attention + self.total_ffn


def neuron_overlap(a: NeuronSet, b: NeuronSet) -> OverlapReport:
    """Exact per-layer intersection sizes between two neuron sets."""
    if (a.n_layers, a.d_hidden, a.d_ffn) != (b.n_layers, b.d_hidden, b.d_ffn):
        raise ValidationError(
            f"architecture mismatch: {(a.n_layers, a.d_hidden, a.d_ffn)} vs "
            f"{(b.n_layers, b.d_hidden, b.d_ffn)}"
        )
    attn = [len(set(x) & set(y)) for x, y in zip(a.attention, b.attention)]
    ffn = [len(set(x) & set(y)) for x, y in zip(a.ffn, b.ffn)]
    return OverlapReport(
        per_layer_attention=attn,
        per_layer_ffn=ffn,
        total_attention=sum(attn),
        total_ffn=sum(ffn),
    )


@dataclass
class CorrelationResult:
    slope: float
    intercept: float
    pearson_r: float
    points: list[tuple[float, float]]


def overlap_distance_correlation(points: Sequence[tuple[float, float]]) -> CorrelationResult:
    """Least-squares line and Pearson r over (distance, shared-count) points."""
    if len(points) < 3:
        raise ValidationError(f"need >= 3 points, got {len(points)}")
    x = np.asarray([p[0] for p in points], dtype=np.float64)
    y = np.asarray([p[1] for p in points], dtype=np.float64)
    sxx = float(((x - x.mean()) ** 2).sum())
    syy = float(((y - y.mean()) ** 2).sum())
    if sxx == 0.0 or syy == 0.0:
        raise ValidationError("degenerate variance: correlation undefined")
    sxy = float(((x - x.mean()) * (y - y.mean())).sum())
    slope = sxy / sxx
    return CorrelationResult(
        slope=slope,
        intercept=float(y.mean() - slope * x.mean()),
        pearson_r=sxy / math.sqrt(sxx * syy),
        points=[(float(a), float(b)) for a, b in points],
    )
