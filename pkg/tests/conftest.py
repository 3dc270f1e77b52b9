"""Shared fixtures: committed synthetic corpora, a small trained tokenizer,
packed corpora, the golden Tiny model used by scoring and mech tests, and
one canonical 200-step smoke training reused across suites."""

from __future__ import annotations

from pathlib import Path

import pytest
import torch

from xli import evalsuite, model
from xli.corpus import make_schedule, pack
from xli.tokenizer import EOT_ID, TokenizerModel, train_tokenizer
from xli.trainer import OptimizerConfig, train

DATA_DIR = Path(__file__).parent / "data"

GOLDEN_SEED = 2024
GOLDEN_MAX_SEQ = 64

SMOKE_OPT = OptimizerConfig(peak_lr=3e-3, warmup_steps=20, total_steps=200, batch_size=16, seed=123)
SMOKE_ONSET = 100
SMOKE_MODEL_SEED = 1

torch.use_deterministic_algorithms(True)


def smoke_model_state(tok: TokenizerModel) -> model.ModelState:
    cfg = model.preset("Tiny", vocab_size=tok.vocab_size, max_seq_len=32,
                       dropout=0.0, attention_dropout=0.0)
    return model.init(cfg, seed=SMOKE_MODEL_SEED)


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture(scope="session")
def corpus_aa() -> Path:
    return DATA_DIR / "corpus_aa.txt"


@pytest.fixture(scope="session")
def corpus_bb() -> Path:
    return DATA_DIR / "corpus_bb.txt"


@pytest.fixture(scope="session")
def tok(corpus_aa, corpus_bb) -> TokenizerModel:
    return train_tokenizer(corpus_aa, corpus_bb, lines_per_language=300, vocab_size=350, seed=11)


def _packed(tok: TokenizerModel, path: Path, budget: int, seed: int, lang: str):
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    return pack(
        (tok.encode(ln) for ln in lines),
        seq_len=32,
        budget_tokens=budget,
        seed=seed,
        eot_id=EOT_ID,
        language_code=lang,
        tokenizer_sha256="fixture-tok",
    )


@pytest.fixture(scope="session")
def packed_aa_train(tok, corpus_aa):
    return _packed(tok, corpus_aa, budget=3200, seed=5, lang="aa")


@pytest.fixture(scope="session")
def packed_bb_train(tok, corpus_bb):
    return _packed(tok, corpus_bb, budget=3200, seed=6, lang="bb")


@pytest.fixture(scope="session")
def packed_aa_eval(tok, corpus_aa):
    return _packed(tok, corpus_aa, budget=640, seed=7, lang="aa")


@pytest.fixture(scope="session")
def packed_bb_eval(tok, corpus_bb):
    return _packed(tok, corpus_bb, budget=640, seed=8, lang="bb")


@pytest.fixture(scope="session")
def golden_state(tok) -> model.ModelState:
    cfg = model.preset("Tiny", vocab_size=tok.vocab_size, max_seq_len=GOLDEN_MAX_SEQ)
    return model.init(cfg, seed=GOLDEN_SEED)


@pytest.fixture(scope="session")
def smoke_run(tok, packed_aa_train, packed_bb_train, packed_aa_eval, packed_bb_eval,
              tmp_path_factory):
    """One onset-100 bilingual training shared by trainer and acceptance tests."""
    out = tmp_path_factory.mktemp("smoke_run")
    schedule = make_schedule(SMOKE_OPT.total_steps, SMOKE_OPT.batch_size, SMOKE_ONSET)
    state, log = train(
        smoke_model_state(tok),
        schedule,
        packed_aa_train,
        packed_bb_train,
        SMOKE_OPT,
        eval_sets={"l1": packed_aa_eval, "l2": packed_bb_eval},
        eval_every=100,
        out_dir=out,
    )
    return state, log, out


@pytest.fixture
def fixture_pairs():
    return evalsuite.load_blimp(DATA_DIR / "pairs_fixture.jsonl")


@pytest.fixture(scope="session")
def fixture_primes():
    return evalsuite.load_prime_file(DATA_DIR / "primes_fixture.jsonl")


@pytest.fixture
def primed_pairs(fixture_pairs, fixture_primes):
    evalsuite.attach_primes(fixture_pairs, fixture_primes)
    return fixture_pairs
