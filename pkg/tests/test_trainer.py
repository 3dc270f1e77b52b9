import math

import numpy as np
import pytest
import torch

from conftest import SMOKE_ONSET, SMOKE_OPT as SMOKE_CFG, smoke_model_state
from xli import model as M
from xli.corpus import make_schedule
from xli.errors import TrainingDiverged, ValidationError
from xli.trainer import OptimizerConfig, TrainLog, evaluate_loss, lr_at, train


def _tiny_state(tok, seed=1):
    cfg = M.preset("Tiny", vocab_size=tok.vocab_size, max_seq_len=32,
                   dropout=0.0, attention_dropout=0.0)
    return M.init(cfg, seed=seed)


def test_lr_at_pinned_values():
    cfg = OptimizerConfig()  # peak 1e-4, warmup 5000, total 64000
    assert lr_at(cfg, 5000) == pytest.approx(1e-4, abs=0)
    assert lr_at(cfg, 0) == 0.0
    assert lr_at(cfg, 64000) == 0.0
    assert lr_at(cfg, 34500) == pytest.approx(5e-5, rel=1e-12)


def test_lr_at_piecewise_linear_and_peaked():
    cfg = OptimizerConfig()
    values = [lr_at(cfg, s) for s in range(0, 64001, 250)]
    assert max(values) == lr_at(cfg, 5000)
    # linear on each side: second differences vanish within segments
    ups = [lr_at(cfg, s) for s in range(0, 5001, 500)]
    downs = [lr_at(cfg, s) for s in range(5000, 64001, 1000)]
    for seg in (ups, downs):
        diffs = np.diff(seg)
        assert np.allclose(diffs, diffs[0], atol=1e-18)


def test_lr_at_out_of_range():
    cfg = OptimizerConfig()
    with pytest.raises(ValidationError):
        lr_at(cfg, -1)
    with pytest.raises(ValidationError):
        lr_at(cfg, 64001)


def test_lr_independent_of_onset():
    # The schedule is a function of the optimizer config alone; there is no
    # onset parameter to reset anything with.
    cfg = OptimizerConfig(total_steps=1000, warmup_steps=100)
    assert [lr_at(cfg, s) for s in (0, 100, 550, 1000)] == [
        0.0,
        cfg.peak_lr,
        pytest.approx(cfg.peak_lr * 0.5),
        0.0,
    ]


def test_optimizer_config_validation():
    with pytest.raises(ValidationError):
        OptimizerConfig(warmup_steps=200, total_steps=100).validate()


def test_smoke_training_loss_drops(smoke_run):
    _, log, _ = smoke_run
    first = log.steps[0]["loss"]
    last = np.mean([r["loss"] for r in log.steps[-10:]])
    assert last < first * 0.8


def test_l2_learns_after_onset(smoke_run):
    _, log, _ = smoke_run
    evals = {r["step"]: r for r in log.evals}
    assert set(evals) == {100, 200}
    assert evals[200]["loss_l2"] < evals[100]["loss_l2"]


def test_l1_not_forgotten_after_onset(smoke_run):
    _, log, _ = smoke_run
    evals = {r["step"]: r for r in log.evals}
    assert evals[200]["loss_l1"] <= 1.10 * evals[100]["loss_l1"]


def test_schedule_composition_logged(smoke_run):
    _, log, _ = smoke_run
    assert log.steps[0]["n_l1"] == 16 and log.steps[0]["n_l2"] == 0
    assert log.steps[100]["n_l1"] == 8 and log.steps[100]["n_l2"] == 8
    assert [r["step"] for r in log.steps] == list(range(200))


def test_checkpoints_written_at_onset_and_end(smoke_run):
    _, log, out = smoke_run
    tags = {c["tag"]: c for c in log.checkpoints}
    assert tags["onset"]["step"] == 100
    assert tags["final"]["step"] == 200
    assert (out / "step00000100.ckpt").exists()
    assert (out / "step00000200.ckpt").exists()
    assert (out / "train_log.jsonl").exists()


def test_rerun_is_bit_identical(smoke_run, tok, packed_aa_train, packed_bb_train,
                                packed_aa_eval, packed_bb_eval, tmp_path):
    _, _, out = smoke_run
    schedule = make_schedule(200, 16, onset_step=SMOKE_ONSET)
    train(
        smoke_model_state(tok),
        schedule,
        packed_aa_train,
        packed_bb_train,
        SMOKE_CFG,
        eval_sets={"l1": packed_aa_eval, "l2": packed_bb_eval},
        eval_every=100,
        out_dir=tmp_path,
    )
    assert (tmp_path / "step00000200.ckpt").read_bytes() == (out / "step00000200.ckpt").read_bytes()


def test_onset_invariance_vs_monolingual(smoke_run, tok, packed_aa_train, packed_bb_train, tmp_path):
    # Through the onset boundary, a bilingual run is bit-identical to a
    # monolingual run with the same seed: same L1 batches, same RNG draws.
    _, _, out = smoke_run
    mono = make_schedule(200, 16, onset_step=200)
    train(
        smoke_model_state(tok),
        mono,
        packed_aa_train,
        None,
        SMOKE_CFG,
        checkpoint_every=100,
        out_dir=tmp_path,
    )
    bi_onset = (out / "step00000100.ckpt").read_bytes()
    mono_100 = (tmp_path / "step00000100.ckpt").read_bytes()
    assert bi_onset == mono_100


def test_evaluate_loss_untrained_and_deterministic(tok, packed_bb_eval):
    state = _tiny_state(tok, seed=9)
    a = evaluate_loss(state, packed_bb_eval)
    b = evaluate_loss(state, packed_bb_eval)
    assert a == b
    assert abs(a - math.log(tok.vocab_size)) / math.log(tok.vocab_size) < 0.05


def test_evaluate_loss_after_memorization(tok, packed_bb_eval):
    from xli.corpus import PackedCorpus

    state = _tiny_state(tok, seed=2)
    tiny_set = PackedCorpus(language_code="bb", sequences=packed_bb_eval.sequences[:4].copy(), seed=0)
    schedule = make_schedule(300, 4, onset_step=300)
    cfg = OptimizerConfig(peak_lr=3e-3, warmup_steps=10, total_steps=300, batch_size=4, seed=1)
    train(state, schedule, tiny_set, None, cfg)
    assert evaluate_loss(state, tiny_set) < 0.5


def test_schedule_config_mismatch_rejected(tok, packed_aa_train):
    state = _tiny_state(tok)
    schedule = make_schedule(100, 16, onset_step=100)
    with pytest.raises(ValidationError, match="total_steps"):
        train(state, schedule, packed_aa_train, None, SMOKE_CFG)


def test_tokenizer_hash_mismatch_rejected(tok, packed_aa_train, packed_bb_train):
    state = _tiny_state(tok)
    schedule = make_schedule(200, 16, onset_step=100)
    bad = type(packed_bb_train)(
        language_code="bb",
        sequences=packed_bb_train.sequences,
        seed=0,
        tokenizer_sha256="different-tokenizer",
    )
    with pytest.raises(ValidationError, match="hash mismatch"):
        train(state, schedule, packed_aa_train, bad, SMOKE_CFG)


def test_divergence_aborts_with_diagnostic(tok, packed_aa_train):
    state = _tiny_state(tok)
    with torch.no_grad():
        state.module.wte.weight[0, 0] = float("nan")
    schedule = make_schedule(200, 16, onset_step=200)
    with pytest.raises(TrainingDiverged, match="step 0"):
        train(state, schedule, packed_aa_train, None, SMOKE_CFG)


def test_train_log_jsonl_round_trip(tmp_path):
    log = TrainLog(
        steps=[{"step": 0, "lr": 0.0, "loss": 5.0, "n_l1": 4, "n_l2": 0}],
        evals=[{"step": 1, "loss_l1": 4.5}],
        checkpoints=[{"step": 1, "path": "x.ckpt", "tag": "final"}],
    )
    path = tmp_path / "log.jsonl"
    log.write_jsonl(path)
    import json

    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert {l["type"] for l in lines} == {"step", "eval", "checkpoint"}
