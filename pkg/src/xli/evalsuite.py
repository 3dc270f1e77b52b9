"""Minimal-pair scoring with optional crosslinguistic primes, accuracy
aggregation, the relative-change influence metric, and learner-preference
surprisal gaps over FCE-style data.

A pair is correct when the acceptable sentence gets the higher mean
per-token log-probability; each sentence is scored over its own tokens
only, with any prime serving purely as conditioning context.  Note the
score is a causal log-likelihood even where the literature says
"pseudo-log-likelihood".
"""

from __future__ import annotations

import csv
import hashlib
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import SchemaError, ValidationError
from .model import ModelState, sequence_logprob
from .tokenizer import EOT_ID, TokenizerModel

PRIME_MODES = ("none", "aligned", "shuffled", "random")
SIGNIFICANT_DELTA = 0.02  # per-phenomenon primed-vs-unprimed improvement threshold
FCE_EXCLUDED_PHENOMENA = frozenset({"spelling", "punctuation"})


@dataclass
class MinimalPairRecord:
    id: str
    phenomenon: str
    s_acc: str
    s_unacc: str
    prime: str | None = None
    learner_l1: str | None = None


@dataclass
class PairVerdict:
    id: str
    phenomenon: str
    norm_logprob_acc: float
    norm_logprob_unacc: float
    correct: bool
    tie: bool
    prime_truncated: bool = False


@dataclass
class EvalReport:
    overall: float
    per_phenomenon: dict[str, float]
    n_pairs: int
    n_ties: int
    prime_mode: str
    seed: int
    verdicts: list[PairVerdict] = field(default_factory=list)
    improved_phenomena: list[str] | None = None  # vs a supplied unprimed baseline


@dataclass
class CliReport:
    acc_monolingual: float
    acc_bilingual: float
    cli_value: float
    per_phenomenon: dict[str, dict[str, float]]
    condition: dict


def _pair_rng(seed: int, pair_id: str) -> np.random.Generator:
    digest = hashlib.sha256(pair_id.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def select_random_prime_id(prime_pool: dict[str, str], pair_id: str, rng_seed: int) -> str:
    """Pool entry used in random mode: uniform over ids other than the pair's own."""
    candidates = sorted(k for k in prime_pool if k != pair_id)
    if not candidates:
        raise ValidationError(f"pair {pair_id}: prime pool has no other entries")
    rng = _pair_rng(rng_seed, pair_id)
    return candidates[int(rng.integers(len(candidates)))]


def _prime_ids(
    tok: TokenizerModel,
    pair: MinimalPairRecord,
    prime_mode: str,
    rng_seed: int,
    prime_pool: dict[str, str] | None,
) -> list[int]:
    if prime_mode == "aligned":
        if pair.prime is None:
            raise ValidationError(f"pair {pair.id}: aligned mode needs a prime")
        return tok.encode(pair.prime)
    if prime_mode == "shuffled":
        if pair.prime is None:
            raise ValidationError(f"pair {pair.id}: shuffled mode needs a prime")
        ids = tok.encode(pair.prime)
        rng = _pair_rng(rng_seed, pair.id)
        return [ids[i] for i in rng.permutation(len(ids))]
    if prime_mode == "random":
        if not prime_pool:
            raise ValidationError("random mode needs a prime pool")
        return tok.encode(prime_pool[select_random_prime_id(prime_pool, pair.id, rng_seed)])
    raise ValidationError(f"unknown prime mode {prime_mode!r}")


def _scored_sequence(
    state: ModelState, context: list[int], target: list[int]
) -> tuple[list[int], int, int, bool]:
    """Assemble [context..., eot, target...] under the context window.

    Overlong contexts are truncated from the left, keeping the tokens
    adjacent to the target; returns (tokens, start, end, truncated).
    """
    max_len = state.config.max_seq_len
    budget = max_len - 1 - len(target)
    if budget < 0:
        raise ValidationError(
            f"target of {len(target)} tokens does not fit the context window {max_len}"
        )
    truncated = len(context) > budget
    if truncated:
        context = context[len(context) - budget :]
    tokens = context + [EOT_ID] + target
    start = len(context) + 1
    return tokens, start, start + len(target), truncated


def _norm_logprob(state: ModelState, context: list[int], target: list[int]) -> tuple[float, bool]:
    tokens, start, end, truncated = _scored_sequence(state, context, target)
    total, n = sequence_logprob(state, tokens, (start, end))
    if n == 0:
        raise ValidationError("cannot score an empty sentence")
    return total / n, truncated


def score_pair(
    state: ModelState,
    tok: TokenizerModel,
    pair: MinimalPairRecord,
    prime_mode: str = "none",
    rng_seed: int = 0,
    prime_pool: dict[str, str] | None = None,
) -> PairVerdict:
    """Mean per-token log-probability of both sentences; prime tokens (any
    mode) only condition and never enter the normalization count."""
    if prime_mode not in PRIME_MODES:
        raise ValidationError(f"unknown prime mode {prime_mode!r}")
    context = [] if prime_mode == "none" else _prime_ids(tok, pair, prime_mode, rng_seed, prime_pool)
    acc, trunc_a = _norm_logprob(state, context, tok.encode(pair.s_acc))
    unacc, trunc_b = _norm_logprob(state, context, tok.encode(pair.s_unacc))
    tie = acc == unacc
    return PairVerdict(
        id=pair.id,
        phenomenon=pair.phenomenon,
        norm_logprob_acc=acc,
        norm_logprob_unacc=unacc,
        correct=acc > unacc,
        tie=tie,
        prime_truncated=trunc_a or trunc_b,
    )


def accuracy(
    state: ModelState,
    tok: TokenizerModel,
    dataset: Sequence[MinimalPairRecord],
    prime_mode: str = "none",
    seed: int = 0,
    prime_pool: dict[str, str] | None = None,
    baseline_per_phenomenon: dict[str, float] | None = None,
) -> EvalReport:
    """Overall and per-phenomenon fraction correct.

    When a baseline per-phenomenon table is supplied (an unprimed run),
    phenomena whose accuracy improves by more than +0.02 are listed.
    """
    if not dataset:
        raise ValidationError("dataset is empty")
    verdicts = [score_pair(state, tok, p, prime_mode, seed, prime_pool) for p in dataset]
    by_phen: dict[str, list[PairVerdict]] = defaultdict(list)
    for v in verdicts:
        by_phen[v.phenomenon].append(v)
    per_phenomenon = {
        phen: sum(v.correct for v in vs) / len(vs) for phen, vs in sorted(by_phen.items())
    }
    improved = None
    if baseline_per_phenomenon is not None:
        improved = [
            phen
            for phen, acc in per_phenomenon.items()
            if phen in baseline_per_phenomenon
            and acc - baseline_per_phenomenon[phen] > SIGNIFICANT_DELTA
        ]
    return EvalReport(
        overall=sum(v.correct for v in verdicts) / len(verdicts),
        per_phenomenon=per_phenomenon,
        n_pairs=len(verdicts),
        n_ties=sum(v.tie for v in verdicts),
        prime_mode=prime_mode,
        seed=seed,
        verdicts=verdicts,
        improved_phenomena=improved,
    )


def cli_effect(acc_mono: float, acc_bi: float) -> float:
    """Relative accuracy change (mono - bi)/mono; positive means the added
    language interfered, negative means it facilitated."""
    if not 0 < acc_mono <= 1:
        raise ValidationError(f"acc_mono must be in (0, 1], got {acc_mono}")
    if not 0 <= acc_bi <= 1:
        raise ValidationError(f"acc_bi must be in [0, 1], got {acc_bi}")
    return (acc_mono - acc_bi) / acc_mono


@dataclass
class FceReport:
    groups: list[str]
    sample_size: int
    n_seeds: int
    per_seed: list[dict[str, float]]  # one {group: delta} per seed
    per_seed_gaps: list[dict[str, float]]
    per_seed_sizes: list[dict[str, int]]  # undersampled count per group per seed
    mean: dict[str, float]
    flagged_seeds: list[int]  # seeds whose gap sum was <= 0 (reported raw)


def fce_delta_s(
    state: ModelState,
    tok: TokenizerModel,
    records: Sequence[MinimalPairRecord],
    n_seeds: int = 5,
    seed: int = 0,
    prime_mode: str = "none",
    prime_pool: dict[str, str] | None = None,
) -> FceReport:
    """Normalized surprisal gap per learner-L1 group.

    Every group is undersampled to the smallest group's size (per seed), the
    summed acceptable-vs-unacceptable gap is computed from length-normalized
    scores, and each group's share of the gap total is reported.  Shares sum
    to 1 whenever all gaps are positive; non-positive totals are reported
    raw and flagged.
    """
    groups: dict[str, list[MinimalPairRecord]] = defaultdict(list)
    for r in records:
        if not r.learner_l1:
            raise ValidationError(f"record {r.id}: learner_l1 required for group scoring")
        groups[r.learner_l1].append(r)
    if len(groups) < 2:
        raise ValidationError(f"need >= 2 learner groups, got {len(groups)}")
    for code, rs in groups.items():
        if not rs:
            raise ValidationError(f"group {code} is empty")
    group_names = sorted(groups)
    sample_size = min(len(groups[g]) for g in group_names)

    gap_cache: dict[str, float] = {}

    def pair_gap(r: MinimalPairRecord) -> float:
        if r.id not in gap_cache:
            v = score_pair(state, tok, r, prime_mode, seed, prime_pool)
            gap_cache[r.id] = v.norm_logprob_acc - v.norm_logprob_unacc
        return gap_cache[r.id]

    per_seed: list[dict[str, float]] = []
    per_seed_gaps: list[dict[str, float]] = []
    per_seed_sizes: list[dict[str, int]] = []
    flagged: list[int] = []
    for i in range(n_seeds):
        rng = np.random.default_rng([seed, i])
        gaps: dict[str, float] = {}
        sizes: dict[str, int] = {}
        for g in group_names:
            chosen = rng.choice(len(groups[g]), size=sample_size, replace=False)
            sizes[g] = len(chosen)
            gaps[g] = float(sum(pair_gap(groups[g][j]) for j in chosen))
        denom = sum(gaps.values())
        if denom <= 0:
            flagged.append(i)
        per_seed_gaps.append(gaps)
        per_seed_sizes.append(sizes)
        per_seed.append({g: gaps[g] / denom for g in group_names} if denom != 0 else dict(gaps))
    mean = {g: float(np.mean([s[g] for s in per_seed])) for g in group_names}
    return FceReport(
        groups=group_names,
        sample_size=sample_size,
        n_seeds=n_seeds,
        per_seed=per_seed,
        per_seed_gaps=per_seed_gaps,
        per_seed_sizes=per_seed_sizes,
        mean=mean,
        flagged_seeds=flagged,
    )


# -- data files -------------------------------------------------------------


def _jsonl_records(path: str | Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"invalid JSON: {e}", str(path), lineno) from e
            if not isinstance(obj, dict):
                raise SchemaError("record must be a JSON object", str(path), lineno)
            yield lineno, obj


def _required(obj: dict, key: str, path: str, lineno: int) -> str:
    val = obj.get(key)
    if not isinstance(val, str) or not val:
        raise SchemaError(f"missing or empty field {key!r}", path, lineno)
    return val


def load_blimp(path: str | Path) -> list[MinimalPairRecord]:
    """Minimal-pair JSON-lines: id, phenomenon, sentence_good, sentence_bad."""
    records = []
    seen: set[str] = set()
    for lineno, obj in _jsonl_records(path):
        rid = _required(obj, "id", str(path), lineno)
        if rid in seen:
            raise SchemaError(f"duplicate id {rid!r}", str(path), lineno)
        seen.add(rid)
        records.append(
            MinimalPairRecord(
                id=rid,
                phenomenon=_required(obj, "phenomenon", str(path), lineno),
                s_acc=_required(obj, "sentence_good", str(path), lineno),
                s_unacc=_required(obj, "sentence_bad", str(path), lineno),
                learner_l1=obj.get("learner_l1"),
            )
        )
    if not records:
        raise SchemaError("no records", str(path))
    return records


def load_fce_pairs(path: str | Path) -> tuple[list[MinimalPairRecord], dict[str, int]]:
    """Learner minimal pairs; spelling/punctuation records are skipped and
    counted, every kept record must carry learner_l1."""
    kept = []
    skipped: Counter[str] = Counter()
    seen: set[str] = set()
    for lineno, obj in _jsonl_records(path):
        phenomenon = _required(obj, "phenomenon", str(path), lineno)
        rid = _required(obj, "id", str(path), lineno)
        if rid in seen:
            raise SchemaError(f"duplicate id {rid!r}", str(path), lineno)
        seen.add(rid)
        if phenomenon in FCE_EXCLUDED_PHENOMENA:
            skipped[phenomenon] += 1
            continue
        kept.append(
            MinimalPairRecord(
                id=rid,
                phenomenon=phenomenon,
                s_acc=_required(obj, "sentence_good", str(path), lineno),
                s_unacc=_required(obj, "sentence_bad", str(path), lineno),
                learner_l1=_required(obj, "learner_l1", str(path), lineno),
            )
        )
    if not kept:
        raise SchemaError("no usable records after exclusions", str(path))
    return kept, dict(skipped)


def load_prime_file(path: str | Path) -> dict[str, str]:
    """Prime JSON-lines (id, prime_text, source_tag) keyed by pair id."""
    primes: dict[str, str] = {}
    for lineno, obj in _jsonl_records(path):
        rid = _required(obj, "id", str(path), lineno)
        if rid in primes:
            raise SchemaError(f"duplicate prime id {rid!r}", str(path), lineno)
        primes[rid] = _required(obj, "prime_text", str(path), lineno)
    if not primes:
        raise SchemaError("no primes", str(path))
    return primes


def attach_primes(records: Sequence[MinimalPairRecord], primes: dict[str, str]) -> None:
    """Bind primes to records in place; a prime id without a matching pair
    is a schema violation."""
    by_id = {r.id: r for r in records}
    unknown = sorted(set(primes) - set(by_id))
    if unknown:
        raise SchemaError(f"prime ids without matching pairs: {unknown[:5]}")
    for rid, text in primes.items():
        by_id[rid].prime = text


# -- report files ------------------------------------------------------------


def write_verdicts_csv(verdicts: Sequence[PairVerdict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["id", "phenomenon", "norm_logprob_acc", "norm_logprob_unacc", "correct", "tie", "prime_truncated"]
        )
        for v in verdicts:
            writer.writerow(
                [
                    v.id,
                    v.phenomenon,
                    f"{v.norm_logprob_acc:.10g}",
                    f"{v.norm_logprob_unacc:.10g}",
                    int(v.correct),
                    int(v.tie),
                    int(v.prime_truncated),
                ]
            )


def report_to_json(report: EvalReport) -> dict:
    return {
        "overall": report.overall,
        "per_phenomenon": report.per_phenomenon,
        "n_pairs": report.n_pairs,
        "n_ties": report.n_ties,
        "prime_mode": report.prime_mode,
        "seed": report.seed,
        "improved_phenomena": report.improved_phenomena,
    }
