"""Optimization loop over a batch schedule.

The learning rate warms up linearly from 0 and decays linearly to 0 over
the full step budget; it is a function of the step alone, so introducing
the second language mid-run changes only batch composition. Optimizer
moments likewise carry across the onset untouched.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .corpus import BatchSchedule, PackedCorpus, next_batch
from .errors import TrainingDiverged, ValidationError
from .model import ModelState, compute_loss, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    peak_lr: float = 1e-4
    warmup_steps: int = 5000
    total_steps: int = 64000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-6
    batch_size: int = 64
    seed: int = 123
    grad_clip: float | None = 1.0  # global-norm clip; None disables
    weight_decay: float = 0.0

    def validate(self) -> None:
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValidationError(
                f"warmup_steps {self.warmup_steps} must be in [0, total_steps {self.total_steps})"
            )
        if min(self.peak_lr, self.total_steps, self.batch_size) <= 0:
            raise ValidationError("peak_lr, total_steps, batch_size must be positive")


def lr_at(cfg: OptimizerConfig, step: int) -> float:
    """Linear 0 -> peak over [0, warmup], then linear peak -> 0 at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ValidationError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps if cfg.warmup_steps else cfg.peak_lr
    return cfg.peak_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    checkpoints: list[dict] = field(default_factory=list)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for record in self.steps:
                f.write(json.dumps({"type": "step", **record}, sort_keys=True) + "\n")
            for record in self.evals:
                f.write(json.dumps({"type": "eval", **record}, sort_keys=True) + "\n")
            for record in self.checkpoints:
                f.write(json.dumps({"type": "checkpoint", **record}, sort_keys=True) + "\n")


def evaluate_loss(state: ModelState, packed_eval: PackedCorpus, batch_rows: int = 64) -> float:
    """Mean token-level cross-entropy over the eval rows; dropout off."""
    if packed_eval.n_rows == 0:
        raise ValidationError("eval set is empty")
    total_nll = 0.0
    total_tokens = 0
    for lo in range(0, packed_eval.n_rows, batch_rows):
        rows = packed_eval.sequences[lo : lo + batch_rows]
        with torch.no_grad():
            loss = compute_loss(state, rows, train_mode=False)
        n = rows.shape[0] * (rows.shape[1] - 1)
        total_nll += float(loss.item()) * n
        total_tokens += n
    return total_nll / total_tokens


def _check_corpora(state: ModelState, corpora: list[PackedCorpus | None]) -> None:
    hashes = {c.tokenizer_sha256 for c in corpora if c is not None and c.tokenizer_sha256}
    if len(hashes) > 1:
        raise ValidationError(f"corpus/tokenizer hash mismatch across inputs: {sorted(hashes)}")
    for c in corpora:
        if c is not None and c.sequences.size and c.sequences.max() >= state.config.vocab_size:
            raise ValidationError(
                f"corpus {c.language_code!r} has token ids >= model vocab {state.config.vocab_size}"
            )


def train(
    state: ModelState,
    schedule: BatchSchedule,
    l1: PackedCorpus | None,
    l2: PackedCorpus | None,
    cfg: OptimizerConfig,
    eval_sets: dict[str, PackedCorpus] | None = None,
    eval_every: int = 0,
    checkpoint_every: int = 0,
    checkpoint_at_onset: bool = True,
    out_dir: str | Path | None = None,
) -> tuple[ModelState, TrainLog]:
    """Run Adam over the schedule; returns the trained state and its log.

    Deterministic for a fixed (state seed, cfg.seed, schedule, corpora):
    reruns produce bitwise-identical parameters.  Checkpoints are written
    under ``out_dir`` at onset boundaries, every ``checkpoint_every`` steps,
    and at the end.
    """
    cfg.validate()
    if schedule.total_steps != cfg.total_steps:
        raise ValidationError(
            f"schedule.total_steps {schedule.total_steps} != cfg.total_steps {cfg.total_steps}"
        )
    if schedule.batch_size != cfg.batch_size:
        raise ValidationError(
            f"schedule.batch_size {schedule.batch_size} != cfg.batch_size {cfg.batch_size}"
        )
    _check_corpora(state, [l1, l2] + list((eval_sets or {}).values()))

    torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)
    params = list(state.module.parameters())
    optimizer = torch.optim.Adam(
        params,
        lr=0.0,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    train_log = TrainLog()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    def _maybe_checkpoint(done_steps: int, tag: str) -> None:
        if out_path is None:
            return
        name = f"step{done_steps:08d}.ckpt"
        save_checkpoint(state, out_path / name, optimizer=optimizer)
        train_log.checkpoints.append({"step": done_steps, "path": name, "tag": tag})

    for step in range(schedule.total_steps):
        batch = next_batch(schedule, step, l1, l2, cfg.seed)
        n_l1, n_l2 = schedule.composition(step)
        lr = lr_at(cfg, step)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.zero_grad(set_to_none=True)
        loss = compute_loss(state, batch, train_mode=True)
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss {loss.item()} at step {step} (lr {lr:.3e}, n_l1 {n_l1}, n_l2 {n_l2})"
            )
        loss.backward()
        if cfg.grad_clip is not None:
            norm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            if float(norm) > cfg.grad_clip:
                log.debug("step %d: gradient norm %.3f clipped to %.1f", step, norm, cfg.grad_clip)
        optimizer.step()
        state.step = step + 1
        train_log.steps.append(
            {"step": step, "lr": lr, "loss": float(loss.item()), "n_l1": n_l1, "n_l2": n_l2}
        )
        if step % 50 == 0:
            log.info("step %d loss %.4f lr %.3e (%d L1 + %d L2)", step, loss.item(), lr, n_l1, n_l2)

        done = step + 1
        if eval_sets and eval_every and done % eval_every == 0:
            record = {"step": done}
            for name, packed in eval_sets.items():
                record[f"loss_{name}"] = evaluate_loss(state, packed)
            train_log.evals.append(record)
        if checkpoint_at_onset and done == schedule.onset_step and 0 < done < schedule.total_steps:
            _maybe_checkpoint(done, "onset")
        elif checkpoint_every and done % checkpoint_every == 0 and done < schedule.total_steps:
            _maybe_checkpoint(done, "periodic")

    _maybe_checkpoint(schedule.total_steps, "final")
    if out_path is not None:
        train_log.write_jsonl(out_path / "train_log.jsonl")
    return state, train_log
