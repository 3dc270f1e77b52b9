"""Sequence packing and deterministic bilingual batch schedules.

A schedule fixes, for every training step, how many L1 and L2 rows fill the
batch.  Sequential-onset schedules keep batches monolingual until the onset
step (the age of exposure) and interleave both languages afterwards;
early-imbalanced schedules mix a constant ratio from step 0, calibrated so
cumulative per-language sequence counts match a chosen sequential run
exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)

MODE_SEQUENTIAL = "sequential-onset"
MODE_EARLY_IMBALANCED = "early-imbalanced"
MODE_MONOLINGUAL = "monolingual"

PACKED_DTYPE = np.dtype("<i4")


@dataclass
class PackedCorpus:
    """Fixed-length token rows for one language, shuffled under a recorded seed."""

    language_code: str
    sequences: np.ndarray  # [n_rows, seq_len] int32
    seed: int
    tokenizer_sha256: str = ""

    @property
    def n_rows(self) -> int:
        return int(self.sequences.shape[0])

    @property
    def seq_len(self) -> int:
        return int(self.sequences.shape[1])

    @property
    def token_budget_used(self) -> int:
        return int(self.sequences.size)


def pack(
    documents: Iterable[Sequence[int]],
    seq_len: int,
    budget_tokens: int,
    seed: int,
    eot_id: int,
    language_code: str = "xx",
    tokenizer_sha256: str = "",
) -> PackedCorpus:
    """Join tokenized documents with the end-of-text separator and cut rows.

    Emits ``budget_tokens // seq_len`` rows of exactly ``seq_len`` tokens,
    shuffled under ``seed``; the trailing partial row is dropped.
    """
    if seq_len <= 0:
        raise ValidationError(f"seq_len must be positive, got {seq_len}")
    n_rows = budget_tokens // seq_len
    rows = np.empty((n_rows, seq_len), dtype=PACKED_DTYPE)
    buf: list[int] = []
    filled = 0
    for doc in documents:
        if filled >= n_rows:
            break
        buf.extend(doc)
        buf.append(eot_id)
        while len(buf) >= seq_len and filled < n_rows:
            rows[filled] = buf[:seq_len]
            del buf[:seq_len]
            filled += 1
    if filled < n_rows:
        raise ValidationError(
            f"insufficient data: stream yielded {filled * seq_len + len(buf)} tokens, "
            f"budget {budget_tokens} needs {n_rows} rows of {seq_len}"
        )
    rng = np.random.default_rng(seed)
    rows = rows[rng.permutation(n_rows)]
    return PackedCorpus(
        language_code=language_code,
        sequences=rows,
        seed=seed,
        tokenizer_sha256=tokenizer_sha256,
    )


def save_packed(pc: PackedCorpus, path: str | Path) -> None:
    """Flat int32 little-endian payload plus a JSON sidecar."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(pc.sequences, dtype=PACKED_DTYPE).tobytes())
    sidecar = {
        "format_version": 1,
        "language_code": pc.language_code,
        "seq_len": pc.seq_len,
        "n_rows": pc.n_rows,
        "seed": pc.seed,
        "tokenizer_sha256": pc.tokenizer_sha256,
        "token_budget_used": pc.token_budget_used,
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_packed(path: str | Path) -> PackedCorpus:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
    raw = np.frombuffer(path.read_bytes(), dtype=PACKED_DTYPE)
    n_rows, seq_len = sidecar["n_rows"], sidecar["seq_len"]
    if raw.size != n_rows * seq_len:
        raise ValidationError(
            f"{path}: payload has {raw.size} tokens, sidecar says {n_rows}x{seq_len}"
        )
    return PackedCorpus(
        language_code=sidecar["language_code"],
        sequences=raw.reshape(n_rows, seq_len).copy(),
        seed=sidecar["seed"],
        tokenizer_sha256=sidecar.get("tokenizer_sha256", ""),
    )


@dataclass(frozen=True)
class BatchSchedule:
    """Per-step batch composition plan; composition sums to batch_size always."""

    total_steps: int
    batch_size: int
    onset_step: int  # age of exposure; for early-imbalanced, the matched onset
    mode: str
    n_l2_pre: int  # L2 rows per batch for steps < onset_step
    n_l2_post: int  # L2 rows per batch for steps >= onset_step

    def composition(self, step: int) -> tuple[int, int]:
        if not 0 <= step < self.total_steps:
            raise ValidationError(f"step {step} outside [0, {self.total_steps})")
        n_l2 = self.n_l2_pre if step < self.onset_step else self.n_l2_post
        return self.batch_size - n_l2, n_l2

    def cumulative(self, step: int) -> tuple[int, int]:
        """Total (L1, L2) rows consumed by steps [0, step)."""
        pre = min(step, self.onset_step)
        post = max(0, step - self.onset_step)
        cum_l2 = pre * self.n_l2_pre + post * self.n_l2_post
        return step * self.batch_size - cum_l2, cum_l2

    def to_dict(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "batch_size": self.batch_size,
            "onset_step": self.onset_step,
            "mode": self.mode,
            "n_l2_pre": self.n_l2_pre,
            "n_l2_post": self.n_l2_post,
        }


def _integral(x: float, what: str) -> int:
    if abs(x - round(x)) > 1e-9:
        raise ValidationError(f"non-integral composition: {what} = {x}")
    return int(round(x))


def make_schedule(
    total_steps: int,
    batch_size: int,
    onset_step: int,
    post_onset_l2_fraction: float = 0.5,
) -> BatchSchedule:
    """Monolingual L1 batches before the onset step, interleaved after."""
    if not 0 <= onset_step <= total_steps:
        raise ValidationError(f"onset_step {onset_step} outside [0, {total_steps}]")
    if not 0 < post_onset_l2_fraction <= 1:
        raise ValidationError(f"post_onset_l2_fraction {post_onset_l2_fraction} outside (0, 1]")
    k = _integral(post_onset_l2_fraction * batch_size, "post-onset L2 rows per batch")
    mode = MODE_MONOLINGUAL if onset_step == total_steps else MODE_SEQUENTIAL
    return BatchSchedule(
        total_steps=total_steps,
        batch_size=batch_size,
        onset_step=onset_step,
        mode=mode,
        n_l2_pre=0,
        n_l2_post=k,
    )


def make_early_imbalanced_schedule(
    total_steps: int,
    batch_size: int,
    matched_onset: int,
    post_onset_l2_fraction: float = 0.5,
) -> BatchSchedule:
    """Constant mixed composition whose cumulative L1/L2 row totals equal the
    sequential schedule with the given onset, exactly."""
    ref = make_schedule(total_steps, batch_size, matched_onset, post_onset_l2_fraction)
    _, l2_total = ref.cumulative(total_steps)
    n_l2 = _integral(l2_total / total_steps, "per-step L2 rows")
    return BatchSchedule(
        total_steps=total_steps,
        batch_size=batch_size,
        onset_step=matched_onset,
        mode=MODE_EARLY_IMBALANCED,
        n_l2_pre=n_l2,
        n_l2_post=n_l2,
    )


@lru_cache(maxsize=512)
def _epoch_order(seed: int, lang_tag: int, epoch: int, n_rows: int) -> np.ndarray:
    rng = np.random.default_rng([seed, lang_tag, epoch])
    perm = rng.permutation(n_rows)
    perm.setflags(write=False)
    return perm


def _select_rows(pc: PackedCorpus, start: int, n: int, seed: int, lang_tag: int) -> np.ndarray:
    if pc is None or pc.n_rows == 0:
        raise ValidationError(f"empty corpus for language slot {lang_tag} with {n} rows requested")
    if (start + n - 1) // pc.n_rows > start // pc.n_rows or start % pc.n_rows == 0:
        log.info(
            "corpus %s: entering epoch %d", pc.language_code, (start + n - 1) // pc.n_rows
        )
    idx = np.arange(start, start + n)
    epochs = idx // pc.n_rows
    pos = idx % pc.n_rows
    out = np.empty((n, pc.seq_len), dtype=PACKED_DTYPE)
    for i, (e, p) in enumerate(zip(epochs, pos)):
        out[i] = pc.sequences[_epoch_order(seed, lang_tag, int(e), pc.n_rows)[p]]
    return out


def next_batch(
    schedule: BatchSchedule,
    step: int,
    l1: PackedCorpus | None,
    l2: PackedCorpus | None,
    seed: int,
) -> np.ndarray:
    """Deterministic [batch_size, seq_len] batch for one step.

    Rows cycle through each corpus in a per-epoch shuffled order derived from
    (seed, language, epoch); the L1 stream is independent of the L2 stream,
    so changing the onset never perturbs earlier L1 batches.
    """
    n_l1, n_l2 = schedule.composition(step)
    cum_l1, cum_l2 = schedule.cumulative(step)
    parts = []
    if n_l1 > 0:
        parts.append(_select_rows(l1, cum_l1, n_l1, seed, lang_tag=0))
    if n_l2 > 0:
        parts.append(_select_rows(l2, cum_l2, n_l2, seed, lang_tag=1))
    return np.concatenate(parts, axis=0)
