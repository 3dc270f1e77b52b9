import json
from collections import Counter

import numpy as np
import pytest

from oracles import brute_force_norm_logprob
from xli import evalsuite as E
from xli import model as M
from xli.errors import SchemaError, ValidationError
from xli.evalsuite import MinimalPairRecord, PairVerdict
from xli.tokenizer import EOT_ID
from tests_paths import FCE_PATH, PAIRS_PATH, PRIMES_PATH


def _pair(i=0, prime=None, **kw):
    defaults = dict(
        id=f"p{i}",
        phenomenon="word_order",
        s_acc="drev velt molk",
        s_unacc="velt drev molk",
        prime=prime,
    )
    defaults.update(kw)
    return MinimalPairRecord(**defaults)


def test_degenerate_equal_pair_is_tie(golden_state, tok):
    pair = _pair(s_acc="drev velt", s_unacc="drev velt")
    v = E.score_pair(golden_state, tok, pair)
    assert v.tie and not v.correct
    assert v.norm_logprob_acc == v.norm_logprob_unacc


def test_score_matches_brute_force_recomputation(golden_state, tok):
    pair = _pair()
    v = E.score_pair(golden_state, tok, pair)
    for sentence, got in ((pair.s_acc, v.norm_logprob_acc), (pair.s_unacc, v.norm_logprob_unacc)):
        target = tok.encode(sentence)
        tokens = [EOT_ID] + target
        logits = M.forward(golden_state, tokens).logits.numpy()
        expected, n = brute_force_norm_logprob(logits, tokens, 1, len(tokens))
        assert n == len(target)
        assert abs(got - expected) <= 1e-6 * max(1.0, abs(expected))


def test_prime_is_context_only_and_counts_match(golden_state, tok):
    target = tok.encode("drev velt molk")
    prime = tok.encode("kara toki runa")
    none_tokens, s0, e0, t0 = E._scored_sequence(golden_state, [], target)
    aligned_tokens, s1, e1, t1 = E._scored_sequence(golden_state, prime, target)
    assert e0 - s0 == e1 - s1 == len(target)  # identical normalization counts
    assert not t0 and not t1
    assert none_tokens == [EOT_ID] + target
    assert aligned_tokens == prime + [EOT_ID] + target


def test_overlong_prime_truncated_from_left_and_flagged(golden_state, tok):
    max_len = golden_state.config.max_seq_len
    target = tok.encode("drev velt")
    long_prime = tok.encode(" ".join(["kara"] * (2 * max_len)))
    tokens, start, end, truncated = E._scored_sequence(golden_state, long_prime, target)
    assert truncated
    assert len(tokens) == max_len
    assert tokens[-len(target):] == target
    assert tokens[: start - 1] == long_prime[-(start - 1):]  # adjacent tokens kept


def test_overlong_target_rejected(golden_state, tok):
    target = list(range(4, 4 + golden_state.config.max_seq_len))
    with pytest.raises(ValidationError, match="does not fit"):
        E._scored_sequence(golden_state, [], target)


def test_aligned_mode_requires_prime(golden_state, tok):
    with pytest.raises(ValidationError, match="needs a prime"):
        E.score_pair(golden_state, tok, _pair(prime=None), prime_mode="aligned")


def test_shuffled_prime_is_a_permutation(golden_state, tok, primed_pairs):
    for pair in primed_pairs[:10]:
        aligned = E._prime_ids(tok, pair, "aligned", 0, None)
        shuffled = E._prime_ids(tok, pair, "shuffled", 0, None)
        assert Counter(shuffled) == Counter(aligned)
    # And deterministic for a fixed seed.
    one = E._prime_ids(tok, primed_pairs[0], "shuffled", 3, None)
    two = E._prime_ids(tok, primed_pairs[0], "shuffled", 3, None)
    assert one == two


def test_random_prime_never_selects_own_id(fixture_primes):
    for seed in range(5):
        for pair_id in fixture_primes:
            chosen = E.select_random_prime_id(fixture_primes, pair_id, seed)
            assert chosen != pair_id
            assert chosen in fixture_primes


def test_score_pair_deterministic(golden_state, tok, primed_pairs, fixture_primes):
    pair = primed_pairs[0]
    for mode in ("none", "aligned", "shuffled", "random"):
        a = E.score_pair(golden_state, tok, pair, mode, rng_seed=5, prime_pool=fixture_primes)
        b = E.score_pair(golden_state, tok, pair, mode, rng_seed=5, prime_pool=fixture_primes)
        assert (a.norm_logprob_acc, a.norm_logprob_unacc) == (b.norm_logprob_acc, b.norm_logprob_unacc)


def test_accuracy_counting(monkeypatch, golden_state, tok):
    outcomes = {"p0": True, "p1": True, "p2": True, "p3": False}

    def fake_score(state, tokz, pair, prime_mode="none", rng_seed=0, prime_pool=None):
        ok = outcomes[pair.id]
        return PairVerdict(
            id=pair.id,
            phenomenon=pair.phenomenon,
            norm_logprob_acc=-1.0 if ok else -2.0,
            norm_logprob_unacc=-2.0 if ok else -1.0,
            correct=ok,
            tie=False,
        )

    monkeypatch.setattr(E, "score_pair", fake_score)
    dataset = [_pair(i, phenomenon="a" if i < 2 else "b") for i in range(4)]
    report = E.accuracy(golden_state, tok, dataset)
    assert report.overall == 0.75
    assert report.per_phenomenon == {"a": 1.0, "b": 0.5}


def test_accuracy_all_correct_and_shuffle_invariance(golden_state, tok, fixture_pairs):
    subset = fixture_pairs[:12]
    report = E.accuracy(golden_state, tok, subset)
    shuffled = list(subset)
    np.random.default_rng(1).shuffle(shuffled)
    report2 = E.accuracy(golden_state, tok, shuffled)
    assert report.overall == report2.overall
    assert report.per_phenomenon == report2.per_phenomenon
    if all(v.correct for v in report.verdicts):
        assert report.overall == 1.0


def test_significant_improvement_threshold(monkeypatch, golden_state, tok):
    # 40 pairs per phenomenon with correctness assigned by index, so the
    # per-phenomenon fractions are exact by construction.
    dataset = []
    verdicts = {"a": 33, "b": 32, "c": 28}  # /40 = .825, .80, .70

    def exact_score(state, tokz, pair, prime_mode="none", rng_seed=0, prime_pool=None):
        idx = int(pair.id.split("-")[1])
        correct = idx < verdicts[pair.phenomenon]
        return PairVerdict(pair.id, pair.phenomenon, -1.0 if correct else -2.0,
                           -2.0 if correct else -1.0, correct, False)

    for phen in verdicts:
        for i in range(40):
            dataset.append(_pair(0, id=f"{phen}-{i}", phenomenon=phen))
    monkeypatch.setattr(E, "score_pair", exact_score)
    baseline = {"a": 0.80, "b": 0.80, "c": 0.70}
    report = E.accuracy(golden_state, tok, dataset, baseline_per_phenomenon=baseline)
    # a: +0.025 -> listed; b: exactly +0.02 -> not (> threshold); c: 0 -> not
    assert report.improved_phenomena == ["a"]


def test_cli_effect_formula():
    assert E.cli_effect(0.80, 0.72) == (0.80 - 0.72) / 0.80
    assert E.cli_effect(0.80, 0.72) == pytest.approx(0.10, abs=1e-15)
    assert E.cli_effect(0.80, 0.80) == 0.0
    assert E.cli_effect(0.75, 0.78) == pytest.approx(-0.04, abs=1e-15)


def test_cli_effect_validation():
    with pytest.raises(ValidationError):
        E.cli_effect(0.0, 0.5)
    with pytest.raises(ValidationError):
        E.cli_effect(0.8, 1.5)


def _fce_records(gaps: dict[str, float], per_group: int = 4):
    records = []
    for g, _ in gaps.items():
        for i in range(per_group):
            records.append(_pair(0, id=f"{g}-{i}", learner_l1=g))
    return records


def _patch_gaps(monkeypatch, gaps: dict[str, float]):
    def fake_score(state, tokz, pair, prime_mode="none", rng_seed=0, prime_pool=None):
        gap = gaps[pair.learner_l1]
        return PairVerdict(pair.id, pair.phenomenon, gap, 0.0, gap > 0, False)

    monkeypatch.setattr(E, "score_pair", fake_score)


def test_fce_equal_gaps_give_uniform_share(monkeypatch, golden_state, tok):
    gaps = {g: 1.7 for g in ("g1", "g2", "g3", "g4", "g5")}
    _patch_gaps(monkeypatch, gaps)
    report = E.fce_delta_s(golden_state, tok, _fce_records(gaps), n_seeds=5, seed=0)
    for per_seed in report.per_seed:
        for g in gaps:
            assert per_seed[g] == pytest.approx(0.2, abs=1e-12)
    assert report.flagged_seeds == []


def test_fce_share_formula(monkeypatch, golden_state, tok):
    gaps = {"g1": 2.0, "g2": 1.0, "g3": 1.0}
    _patch_gaps(monkeypatch, gaps)
    report = E.fce_delta_s(golden_state, tok, _fce_records(gaps), n_seeds=3, seed=1)
    assert report.mean["g1"] == pytest.approx(0.5, abs=1e-12)
    assert report.mean["g2"] == pytest.approx(0.25, abs=1e-12)
    assert report.mean["g3"] == pytest.approx(0.25, abs=1e-12)


def test_fce_nonpositive_denominator_flagged(monkeypatch, golden_state, tok):
    gaps = {"g1": -2.0, "g2": 1.0}
    _patch_gaps(monkeypatch, gaps)
    report = E.fce_delta_s(golden_state, tok, _fce_records(gaps), n_seeds=2, seed=0)
    assert report.flagged_seeds == [0, 1]


def test_fce_undersampling_and_normalization_on_real_model(golden_state, tok):
    records, skipped = E.load_fce_pairs(FCE_PATH)
    report = E.fce_delta_s(golden_state, tok, records, n_seeds=5, seed=3)
    assert skipped == {"spelling": 2, "punctuation": 1}
    sizes = {code: sum(r.learner_l1 == code for r in records) for code in report.groups}
    assert report.sample_size == min(sizes.values())
    for i, per_seed in enumerate(report.per_seed):
        if i not in report.flagged_seeds:
            assert sum(per_seed.values()) == pytest.approx(1.0, abs=1e-9)


def test_fce_requires_groups(golden_state, tok):
    with pytest.raises(ValidationError, match="learner_l1"):
        E.fce_delta_s(golden_state, tok, [_pair(0)], n_seeds=1)
    with pytest.raises(ValidationError, match=">= 2 learner groups"):
        E.fce_delta_s(golden_state, tok, [_pair(0, learner_l1="de")], n_seeds=1)


# -- loaders -----------------------------------------------------------------


def test_load_blimp_fixture():
    records = E.load_blimp(PAIRS_PATH)
    assert len(records) == 50
    assert all(r.s_acc != r.s_unacc for r in records)
    assert len({r.phenomenon for r in records}) == 5


def test_load_blimp_schema_error_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        '{"id": "a", "phenomenon": "x", "sentence_good": "g", "sentence_bad": "b"}\n'
        '{"id": "b", "phenomenon": "x", "sentence_good": "g"}\n'
    )
    with pytest.raises(SchemaError, match=r"bad\.jsonl:2.*sentence_bad"):
        E.load_blimp(path)


def test_load_blimp_duplicate_id(tmp_path):
    path = tmp_path / "dup.jsonl"
    row = '{"id": "a", "phenomenon": "x", "sentence_good": "g", "sentence_bad": "b"}\n'
    path.write_text(row + row)
    with pytest.raises(SchemaError, match="duplicate id"):
        E.load_blimp(path)


def test_load_prime_file_and_attach(fixture_pairs):
    primes = E.load_prime_file(PRIMES_PATH)
    assert set(primes) == {r.id for r in fixture_pairs}
    E.attach_primes(fixture_pairs, primes)
    assert all(r.prime for r in fixture_pairs)


def test_attach_primes_unknown_id_rejected(fixture_pairs):
    with pytest.raises(SchemaError, match="without matching pairs"):
        E.attach_primes(fixture_pairs, {"missing-id": "text"})


def test_fce_loader_rejects_duplicate_id(tmp_path):
    row = ('{"id": "a", "phenomenon": "word_order", "sentence_good": "g x", '
           '"sentence_bad": "x g", "learner_l1": "de"}\n')
    path = tmp_path / "dup.jsonl"
    path.write_text(row + row)
    with pytest.raises(SchemaError, match="duplicate id"):
        E.load_fce_pairs(path)


def test_fce_loader_excludes_and_counts(tmp_path):
    rows = [
        {"id": "a", "phenomenon": "word_order", "sentence_good": "g x", "sentence_bad": "x g",
         "learner_l1": "de"},
        {"id": "b", "phenomenon": "spelling", "sentence_good": "g", "sentence_bad": "q",
         "learner_l1": "de"},
    ]
    path = tmp_path / "fce.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    records, skipped = E.load_fce_pairs(path)
    assert [r.id for r in records] == ["a"]
    assert skipped == {"spelling": 1}


def test_verdict_csv_written(tmp_path, golden_state, tok, fixture_pairs):
    report = E.accuracy(golden_state, tok, fixture_pairs[:4])
    out = tmp_path / "verdicts.csv"
    E.write_verdicts_csv(report.verdicts, out)
    lines = out.read_text().splitlines()
    assert lines[0].startswith("id,phenomenon,")
    assert len(lines) == 5
