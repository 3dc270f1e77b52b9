"""Experiment orchestration: declarative manifests, staged runs, reports.

A manifest binds tokenizer, packing, schedule, model, optimizer, and eval
plans into one reproducible run.  ``run`` executes the stages
tokenize -> pack -> train -> eval -> mech; each stage is stamped with a
content key derived from its manifest section and input artifact hashes,
so a rerun skips completed stages and recomputes only what changed or was
deleted.  Relative paths in a manifest resolve against the manifest's
directory.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable

import jsonschema

from . import evalsuite, mech, model, tokenizer, trainer, typology
from .corpus import (
    MODE_EARLY_IMBALANCED,
    MODE_MONOLINGUAL,
    MODE_SEQUENTIAL,
    BatchSchedule,
    load_packed,
    make_early_imbalanced_schedule,
    make_schedule,
    pack,
    save_packed,
)
from .errors import StageError, ValidationError
from .hashing import file_sha256, json_sha256
from .tensorfile import write_tensor_file

log = logging.getLogger(__name__)

STAGES = ("tokenize", "pack", "train", "eval", "mech")


def _load_schema() -> dict:
    with resources.files("xli").joinpath("manifest.schema.json").open("r", encoding="utf-8") as f:
        return json.load(f)


@dataclass
class ExperimentManifest:
    raw: dict
    base_dir: Path
    manifest_hash: str
    schedule: BatchSchedule
    composition: tuple[int, int]  # echoed post-onset (or constant) batch split
    optimizer: trainer.OptimizerConfig
    baseline: "ExperimentManifest | None" = None

    @property
    def experiment_id(self) -> str:
        return self.raw["experiment_id"]

    @property
    def l1(self) -> str:
        return self.raw["languages"]["l1"]

    @property
    def l2(self) -> str:
        return self.raw["languages"]["l2"]

    @property
    def monolingual(self) -> bool:
        return self.raw["schedule"]["mode"] == MODE_MONOLINGUAL

    def path(self, relative: str) -> Path:
        p = Path(relative)
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def out_dir(self) -> Path:
        return self.path(self.raw["output_dir"])

    def resolved_tokenizer_section(self) -> dict:
        sec = dict(self.raw["tokenizer"])
        sec["l1_corpus"] = str(self.path(sec["l1_corpus"]).resolve())
        sec["l2_corpus"] = str(self.path(sec["l2_corpus"]).resolve())
        return sec


def _build_schedule(raw: dict) -> tuple[BatchSchedule, tuple[int, int]]:
    sched = raw["schedule"]
    opt = raw["optimizer"]
    total, batch = opt["total_steps"], opt["batch_size"]
    fraction = sched.get("post_onset_l2_fraction", 0.5)
    mode = sched["mode"]
    if mode == MODE_SEQUENTIAL:
        if "onset_step" not in sched:
            raise ValidationError("sequential-onset schedule requires onset_step")
        schedule = make_schedule(total, batch, sched["onset_step"], fraction)
    elif mode == MODE_EARLY_IMBALANCED:
        if "matched_onset" not in sched:
            raise ValidationError("early-imbalanced schedule requires matched_onset")
        schedule = make_early_imbalanced_schedule(total, batch, sched["matched_onset"], fraction)
    else:
        schedule = make_schedule(total, batch, total, fraction)
    if schedule.onset_step > total:
        raise ValidationError(f"onset {schedule.onset_step} exceeds total_steps {total}")
    steps_probe = 0 if total == 0 else total - 1
    composition = schedule.composition(steps_probe)
    return schedule, composition


def _optimizer_config(raw: dict) -> trainer.OptimizerConfig:
    opt = dict(raw["optimizer"])
    defaults = trainer.OptimizerConfig()
    cfg = trainer.OptimizerConfig(
        peak_lr=opt.get("peak_lr", defaults.peak_lr),
        warmup_steps=opt.get("warmup_steps", defaults.warmup_steps),
        total_steps=opt["total_steps"],
        adam_beta1=opt.get("adam_beta1", defaults.adam_beta1),
        adam_beta2=opt.get("adam_beta2", defaults.adam_beta2),
        adam_eps=opt.get("adam_eps", defaults.adam_eps),
        batch_size=opt["batch_size"],
        seed=opt.get("seed", defaults.seed),
        grad_clip=opt.get("grad_clip", defaults.grad_clip),
        weight_decay=opt.get("weight_decay", defaults.weight_decay),
    )
    cfg.validate()
    return cfg


def validate_manifest(path: str | Path, _seen: frozenset = frozenset()) -> ExperimentManifest:
    """Parse, schema-check, and cross-validate a manifest file.

    Derived quantities (the batch composition implied by the schedule) are
    precomputed; the returned object carries a stable content hash.
    """
    path = Path(path)
    if str(path.resolve()) in _seen:
        raise ValidationError(f"baseline manifest cycle at {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"manifest not found: {path}")
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON: {e}")
    try:
        jsonschema.validate(raw, _load_schema())
    except jsonschema.ValidationError as e:
        raise ValidationError(f"{path}: {e.message} (at {'/'.join(map(str, e.absolute_path))})")

    base_dir = path.parent
    schedule, composition = _build_schedule(raw)
    manifest = ExperimentManifest(
        raw=raw,
        base_dir=base_dir,
        manifest_hash=json_sha256(raw),
        schedule=schedule,
        composition=composition,
        optimizer=_optimizer_config(raw),
    )

    required_files = [raw["tokenizer"]["l1_corpus"], raw["tokenizer"]["l2_corpus"]]
    corpus = raw["corpus"]
    required_files += [corpus["l1_train"], corpus["l1_eval"]]
    if not manifest.monolingual:
        for key in ("l2_train", "l2_eval"):
            if key not in corpus:
                raise ValidationError(f"bilingual schedule requires corpus.{key}")
        required_files += [corpus["l2_train"], corpus["l2_eval"]]
    for entry in raw.get("eval", {}).get("datasets", []):
        required_files.append(entry["path"])
        if entry.get("prime_file"):
            required_files.append(entry["prime_file"])
        modes = entry.get("prime_modes", ["none"])
        if any(m != "none" for m in modes) and not entry.get("prime_file"):
            raise ValidationError(f"dataset {entry['name']}: prime modes {modes} need a prime_file")
    if "fce" in raw.get("eval", {}):
        required_files.append(raw["eval"]["fce"]["path"])
    for rel in required_files:
        if not manifest.path(rel).exists():
            raise ValidationError(f"referenced file does not exist: {manifest.path(rel)}")

    if raw["corpus"]["seq_len"] > raw.get("model", {}).get("max_seq_len", raw["corpus"]["seq_len"]):
        raise ValidationError("corpus.seq_len exceeds model.max_seq_len")

    if raw.get("baseline_manifest"):
        baseline = validate_manifest(
            manifest.path(raw["baseline_manifest"]), _seen | {str(path.resolve())}
        )
        if baseline.resolved_tokenizer_section() != manifest.resolved_tokenizer_section():
            raise ValidationError(
                "baseline manifest must share an identical tokenizer section "
                "(inconsistent tokenizer hash would follow)"
            )
        manifest.baseline = baseline
    log.info(
        "manifest %s: mode %s, onset %d, composition %s",
        manifest.experiment_id,
        manifest.schedule.mode,
        manifest.schedule.onset_step,
        manifest.composition,
    )
    return manifest


# -- staged execution --------------------------------------------------------


def _stamp_path(out_dir: Path, stage: str) -> Path:
    return out_dir / f"{stage}.stamp.json"


def _stage_done(out_dir: Path, stage: str, key: str) -> bool:
    stamp = _stamp_path(out_dir, stage)
    if not stamp.exists():
        return False
    try:
        data = json.loads(stamp.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return False
    if data.get("key") != key:
        return False
    return all((out_dir / rel).exists() for rel in data.get("outputs", []))


def _write_stamp(out_dir: Path, stage: str, key: str, outputs: list[str]) -> None:
    _stamp_path(out_dir, stage).write_text(
        json.dumps({"stage": stage, "key": key, "outputs": sorted(outputs)}, indent=2, sort_keys=True)
        + "\n",
        encoding="utf-8",
    )


def _fresh_dir(path: Path) -> Path:
    # Stage outputs are rebuilt from scratch so stale files from an aborted
    # or reconfigured run never leak into the recorded output set.
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _run_stage(out_dir: Path, stage: str, key: str, action: Callable[[], list[str]]) -> dict:
    if _stage_done(out_dir, stage, key):
        log.info("stage %s: up to date, skipping", stage)
        outputs = json.loads(_stamp_path(out_dir, stage).read_text(encoding="utf-8"))["outputs"]
        return {"key": key, "outputs": outputs, "skipped": True}
    log.info("stage %s: running", stage)
    try:
        outputs = sorted(action())
    except ValidationError:
        raise
    except Exception as e:  # noqa: BLE001 - wrap with the stage name per contract
        raise StageError(stage, e) from e
    _write_stamp(out_dir, stage, key, outputs)
    return {"key": key, "outputs": outputs, "skipped": False}


def _encoded_lines(tok: tokenizer.TokenizerModel, path: Path) -> Iterable[list[int]]:
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line:
                yield tok.encode(line)


@dataclass
class RunResult:
    manifest_hash: str
    out_dir: Path
    stages: dict[str, dict] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)
    condition: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "manifest_hash": self.manifest_hash,
            "condition": self.condition,
            "stages": {
                name: {"key": st["key"], "outputs": st["outputs"]} for name, st in self.stages.items()
            },
            "metrics": self.metrics,
        }

    @property
    def result_hash(self) -> str:
        return json_sha256(self.to_json())


def run(manifest: ExperimentManifest) -> RunResult:
    """Execute all stages of a validated manifest; idempotent and resumable."""
    if manifest.baseline is not None:
        baseline_result = run(manifest.baseline)
    else:
        baseline_result = None

    out_dir = manifest.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = manifest.raw
    result = RunResult(
        manifest_hash=manifest.manifest_hash,
        out_dir=out_dir,
        condition={
            "experiment_id": manifest.experiment_id,
            "l1": manifest.l1,
            "l2": manifest.l2,
            "mode": manifest.schedule.mode,
            "onset": manifest.schedule.onset_step,
            "composition": list(manifest.composition),
            "model_preset": raw["model"]["preset"],
        },
    )

    # tokenize
    tok_sec = raw["tokenizer"]
    tok_path = out_dir / "tokenizer.bin"
    tok_key = json_sha256(
        {
            "section": tok_sec,
            "l1": file_sha256(manifest.path(tok_sec["l1_corpus"])),
            "l2": file_sha256(manifest.path(tok_sec["l2_corpus"])),
        }
    )

    def _tokenize() -> list[str]:
        tok = tokenizer.train_tokenizer(
            manifest.path(tok_sec["l1_corpus"]),
            manifest.path(tok_sec["l2_corpus"]),
            tok_sec["lines_per_language"],
            tok_sec["vocab_size"],
            tok_sec["seed"],
        )
        tok.save(tok_path)
        return ["tokenizer.bin"]

    result.stages["tokenize"] = _run_stage(out_dir, "tokenize", tok_key, _tokenize)
    tok = tokenizer.TokenizerModel.load(tok_path)
    tok_hash = file_sha256(tok_path)

    # pack
    cor = raw["corpus"]
    splits = [("l1_train", manifest.l1, cor["train_budget_tokens"])]
    splits.append(("l1_eval", manifest.l1, cor["eval_budget_tokens"]))
    if not manifest.monolingual:
        splits.append(("l2_train", manifest.l2, cor["train_budget_tokens"]))
        splits.append(("l2_eval", manifest.l2, cor["eval_budget_tokens"]))
    pack_key = json_sha256(
        {
            "section": cor,
            "tokenizer": tok_hash,
            "files": {name: file_sha256(manifest.path(cor[name])) for name, _, _ in splits},
        }
    )
    pack_dir = out_dir / "packed"

    def _pack() -> list[str]:
        _fresh_dir(pack_dir)
        outputs = []
        for name, lang, budget in splits:
            pc = pack(
                _encoded_lines(tok, manifest.path(cor[name])),
                cor["seq_len"],
                budget,
                cor["seed"],
                eot_id=tokenizer.EOT_ID,
                language_code=lang,
                tokenizer_sha256=tok_hash,
            )
            save_packed(pc, pack_dir / f"{name}.bin")
            outputs += [f"packed/{name}.bin", f"packed/{name}.bin.json"]
        return outputs

    result.stages["pack"] = _run_stage(out_dir, "pack", pack_key, _pack)
    packed = {name: load_packed(pack_dir / f"{name}.bin") for name, _, _ in splits}

    # train
    model_sec = raw.get("model", {})
    model_cfg = model.preset(
        model_sec["preset"],
        vocab_size=tok.vocab_size,
        max_seq_len=model_sec.get("max_seq_len", cor["seq_len"]),
        **{
            k: model_sec[k]
            for k in ("dropout", "attention_dropout")
            if k in model_sec
        },
    )
    train_dir = out_dir / "train"
    final_ckpt = train_dir / f"step{manifest.optimizer.total_steps:08d}.ckpt"
    train_key = json_sha256(
        {
            "schedule": manifest.schedule.to_dict(),
            "optimizer": raw["optimizer"],
            "model": model_sec,
            "model_seed": model_sec.get("seed", manifest.optimizer.seed),
            "packed": {name: file_sha256(pack_dir / f"{name}.bin") for name, _, _ in splits},
        }
    )

    def _train() -> list[str]:
        _fresh_dir(train_dir)
        state = model.init(model_cfg, model_sec.get("seed", manifest.optimizer.seed))
        eval_sets = {"l1": packed["l1_eval"]}
        if not manifest.monolingual:
            eval_sets["l2"] = packed["l2_eval"]
        trainer.train(
            state,
            manifest.schedule,
            packed["l1_train"],
            packed.get("l2_train"),
            manifest.optimizer,
            eval_sets=eval_sets,
            eval_every=raw.get("eval", {}).get("eval_every", 0),
            out_dir=train_dir,
        )
        outputs = [f"train/{p.name}" for p in sorted(train_dir.glob("*.ckpt"))]
        return outputs + ["train/train_log.jsonl"]

    result.stages["train"] = _run_stage(out_dir, "train", train_key, _train)

    # eval
    eval_sec = raw.get("eval", {})
    eval_dir = out_dir / "eval"
    if eval_sec.get("datasets") or eval_sec.get("fce"):
        eval_inputs = {e["name"]: file_sha256(manifest.path(e["path"])) for e in eval_sec.get("datasets", [])}
        for e in eval_sec.get("datasets", []):
            if e.get("prime_file"):
                eval_inputs[e["name"] + ":primes"] = file_sha256(manifest.path(e["prime_file"]))
        if "fce" in eval_sec:
            eval_inputs["fce"] = file_sha256(manifest.path(eval_sec["fce"]["path"]))
        eval_key = json_sha256(
            {
                "section": eval_sec,
                "ckpt": file_sha256(final_ckpt),
                "inputs": eval_inputs,
                "baseline": baseline_result.result_hash if baseline_result else None,
            }
        )

        def _eval() -> list[str]:
            _fresh_dir(eval_dir)
            state, _, _ = model.load_checkpoint(final_ckpt)
            outputs = []
            for entry in eval_sec.get("datasets", []):
                records = evalsuite.load_blimp(manifest.path(entry["path"]))
                primes = None
                if entry.get("prime_file"):
                    primes = evalsuite.load_prime_file(manifest.path(entry["prime_file"]))
                    evalsuite.attach_primes(records, primes)
                seed = entry.get("seed", 0)
                baseline_phen: dict[str, float] | None = None
                modes = entry.get("prime_modes", ["none"])
                # The unprimed pass runs first so primed passes can report
                # which phenomena it improved on.
                modes = [m for m in modes if m == "none"] + [m for m in modes if m != "none"]
                for mode in modes:
                    report = evalsuite.accuracy(
                        state,
                        tok,
                        records,
                        prime_mode=mode,
                        seed=seed,
                        prime_pool=primes,
                        baseline_per_phenomenon=baseline_phen if mode != "none" else None,
                    )
                    if mode == "none":
                        baseline_phen = report.per_phenomenon
                    stem = f"{entry['name']}_{mode}"
                    evalsuite.write_verdicts_csv(report.verdicts, eval_dir / f"{stem}.csv")
                    agg = evalsuite.report_to_json(report)
                    agg["manifest_hash"] = manifest.manifest_hash
                    agg["tokenizer_sha256"] = tok_hash
                    (eval_dir / f"{stem}.json").write_text(
                        json.dumps(agg, indent=2, sort_keys=True) + "\n", encoding="utf-8"
                    )
                    outputs += [f"eval/{stem}.csv", f"eval/{stem}.json"]
                    if baseline_result is not None:
                        cli_out = _join_cli(
                            manifest, baseline_result, entry["name"], mode, report, tok_hash
                        )
                        if cli_out is not None:
                            cli_path = eval_dir / f"cli_{stem}.json"
                            cli_path.write_text(
                                json.dumps(cli_out, indent=2, sort_keys=True) + "\n", encoding="utf-8"
                            )
                            outputs.append(f"eval/cli_{stem}.json")
            if "fce" in eval_sec:
                fce_sec = eval_sec["fce"]
                records, skipped = evalsuite.load_fce_pairs(manifest.path(fce_sec["path"]))
                fce = evalsuite.fce_delta_s(
                    state,
                    tok,
                    records,
                    n_seeds=fce_sec.get("n_seeds", 5),
                    seed=fce_sec.get("seed", 0),
                )
                (eval_dir / "fce.json").write_text(
                    json.dumps(
                        {
                            "manifest_hash": manifest.manifest_hash,
                            "groups": fce.groups,
                            "sample_size": fce.sample_size,
                            "n_seeds": fce.n_seeds,
                            "per_seed": fce.per_seed,
                            "per_seed_gaps": fce.per_seed_gaps,
                            "mean": fce.mean,
                            "flagged_seeds": fce.flagged_seeds,
                            "skipped": skipped,
                        },
                        indent=2,
                        sort_keys=True,
                    )
                    + "\n",
                    encoding="utf-8",
                )
                outputs.append("eval/fce.json")
            return outputs

        result.stages["eval"] = _run_stage(out_dir, "eval", eval_key, _eval)

    # mech
    mech_sec = raw.get("mech", {})
    if mech_sec.get("enabled", False):
        if manifest.monolingual:
            raise ValidationError("mech stage needs both languages; disable it for monolingual runs")
        mech_dir = out_dir / "mech"
        mech_key = json_sha256(
            {
                "section": mech_sec,
                "ckpt": file_sha256(final_ckpt),
                "packed": {
                    name: file_sha256(pack_dir / f"{name}.bin")
                    for name in ("l1_eval", "l2_eval", "l1_train", "l2_train")
                },
            }
        )

        def _mech() -> list[str]:
            _fresh_dir(mech_dir)
            state, _, _ = model.load_checkpoint(final_ckpt)
            dictionary = mech.build_lang_dictionary(
                packed["l1_train"],
                packed["l2_train"],
                vocab_size=tok.vocab_size,
                threshold=mech_sec.get("dictionary_threshold", 2.0),
                tokenizer_sha256=tok_hash,
            )
            write_tensor_file(
                mech_dir / "lang_dictionary.bin",
                {
                    "kind": "xli-lang-dictionary",
                    "threshold": dictionary.threshold,
                    "tokenizer_sha256": tok_hash,
                },
                {
                    "classes": dictionary.classes,
                    "counts_l1": dictionary.counts_l1,
                    "counts_l2": dictionary.counts_l2,
                },
            )
            lens_rows = packed["l2_eval"].sequences[: mech_sec.get("lens_rows", 8)]
            profile = mech.logit_lens(
                state,
                [row for row in lens_rows],
                dictionary,
                k=mech_sec.get("lens_k", 10),
                positions=mech_sec.get("lens_positions", "all"),
                tokenizer_sha256=tok_hash,
            )
            (mech_dir / "lens_profile.json").write_text(
                json.dumps(
                    {"manifest_hash": manifest.manifest_hash, **profile.to_json()},
                    indent=2,
                    sort_keys=True,
                )
                + "\n",
                encoding="utf-8",
            )
            quantile = mech_sec.get("neuron_quantile", 0.25)
            outputs = ["mech/lang_dictionary.bin", "mech/lens_profile.json"]
            for name, key in (("l1", "l1_eval"), ("l2", "l2_eval")):
                ns = mech.detect_language_neurons(state, packed[key], quantile=quantile)
                ns.save(
                    mech_dir / f"neurons_{name}.json",
                    extra={"manifest_hash": manifest.manifest_hash},
                )
                outputs.append(f"mech/neurons_{name}.json")
            return outputs

        result.stages["mech"] = _run_stage(out_dir, "mech", mech_key, _mech)

    result.metrics = _collect_metrics(out_dir)
    (out_dir / "result.json").write_text(
        json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return result


def _join_cli(
    manifest: ExperimentManifest,
    baseline_result: RunResult,
    dataset: str,
    mode: str,
    report: evalsuite.EvalReport,
    tok_hash: str,
) -> dict | None:
    """Join a bilingual accuracy with its monolingual baseline.

    Emitted only when the baseline run used the identical tokenizer; the
    baseline condition falls back to its unprimed accuracy when it was not
    evaluated under the same prime mode.
    """
    base_dir = baseline_result.out_dir / "eval"
    candidates = [base_dir / f"{dataset}_{mode}.json", base_dir / f"{dataset}_none.json"]
    for cand in candidates:
        if not cand.exists():
            continue
        base = json.loads(cand.read_text(encoding="utf-8"))
        if base.get("tokenizer_sha256") != tok_hash:
            raise ValidationError(
                f"baseline run used a different tokenizer ({cand}); influence metric not emitted"
            )
        cli = evalsuite.CliReport(
            acc_monolingual=base["overall"],
            acc_bilingual=report.overall,
            cli_value=evalsuite.cli_effect(base["overall"], report.overall),
            per_phenomenon={
                phen: {"monolingual": base["per_phenomenon"].get(phen), "bilingual": acc}
                for phen, acc in report.per_phenomenon.items()
            },
            condition={
                "l1": manifest.l1,
                "l2": manifest.l2,
                "onset": manifest.schedule.onset_step,
                "mode": manifest.schedule.mode,
                "prime_mode": mode,
                "dataset": dataset,
                "baseline_prime_mode": "none" if cand == candidates[-1] else mode,
                "manifest_hash": manifest.manifest_hash,
                "baseline_manifest_hash": baseline_result.manifest_hash,
            },
        )
        return asdict(cli)
    log.warning("no baseline aggregate found for %s/%s; influence metric skipped", dataset, mode)
    return None


def _collect_metrics(out_dir: Path) -> dict[str, float]:
    metrics: dict[str, float] = {}
    eval_dir = out_dir / "eval"
    if eval_dir.exists():
        for path in sorted(eval_dir.glob("*.json")):
            data = json.loads(path.read_text(encoding="utf-8"))
            stem = path.stem
            if stem == "fce":
                for group, value in data["mean"].items():
                    metrics[f"fce_delta_s:{group}"] = value
            elif stem.startswith("cli_"):
                metrics[f"{stem}"] = data["cli_value"]
            else:
                metrics[f"accuracy:{stem}"] = data["overall"]
    mech_profile = out_dir / "mech" / "lens_profile.json"
    if mech_profile.exists():
        data = json.loads(mech_profile.read_text(encoding="utf-8"))
        last = data["layers"][-1]
        if last["ratio"] is not None:
            metrics["lens_ratio:last_layer"] = last["ratio"]
    return metrics


def load_result(out_dir: str | Path) -> RunResult:
    out_dir = Path(out_dir)
    path = out_dir / "result.json"
    if not path.exists():
        raise ValidationError(f"no result.json under {out_dir}; run the manifest first")
    data = json.loads(path.read_text(encoding="utf-8"))
    return RunResult(
        manifest_hash=data["manifest_hash"],
        out_dir=out_dir,
        stages=data["stages"],
        metrics=data["metrics"],
        condition=data["condition"],
    )


def report(results: list[RunResult], out_path: str | Path) -> list[dict]:
    """Long-format condition x metric table, with the typological distance
    of the run's language pair joined from the bundled fixture."""
    if not results:
        raise ValidationError("no results to report")
    metric_names = [sorted(r.metrics) for r in results]
    if any(names != metric_names[0] for names in metric_names[1:]):
        raise ValidationError("heterogeneous metric schemas across results")

    profiles = typology.load_feature_matrix(typology.fixture_matrix_path())
    by_code = {p.language_code: p for p in profiles}
    shared = typology.filter_shared_features(profiles)

    rows = []
    for r in results:
        l1, l2 = r.condition["l1"], r.condition["l2"]
        distance = ""
        if l1 in by_code and l2 in by_code:
            distance = typology.syntactic_distance(by_code[l1], by_code[l2], shared)
        for metric, value in sorted(r.metrics.items()):
            prime_mode = ""
            for mode in evalsuite.PRIME_MODES:
                if metric.endswith(f"_{mode}"):
                    prime_mode = mode
                    break
            rows.append(
                {
                    "l1": l1,
                    "onset": r.condition["onset"],
                    "prime_mode": prime_mode,
                    "metric": metric,
                    "value": value,
                    "distance": distance,
                    "manifest_hash": r.manifest_hash,
                }
            )
    with open(out_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(
            f, fieldnames=["l1", "onset", "prime_mode", "metric", "value", "distance", "manifest_hash"]
        )
        writer.writeheader()
        writer.writerows(rows)
    return rows
