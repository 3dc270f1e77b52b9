"""Command-line surface.

Exit codes: 0 success, 1 validation failure (bad arguments, malformed or
inconsistent inputs), 2 runtime failure.  Science-relevant parameters for
reproducible experiments live in manifests consumed by ``run``; the other
subcommands are the a-la-carte tools around the same machinery.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import evalsuite, mech, model, pipeline, tokenizer, trainer, typology
from .corpus import load_packed, make_early_imbalanced_schedule, make_schedule, pack, save_packed
from .errors import ValidationError


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are validation failures
        raise ValidationError(message)


def _load_model_and_tokenizer(ckpt: str, tok_path: str):
    state, _, _ = model.load_checkpoint(ckpt)
    tok = tokenizer.TokenizerModel.load(tok_path)
    if tok.vocab_size != state.config.vocab_size:
        raise ValidationError(
            f"tokenizer vocab {tok.vocab_size} != model vocab {state.config.vocab_size}"
        )
    return state, tok


def _cmd_train_tokenizer(args) -> int:
    tok = tokenizer.train_tokenizer(args.l1, args.l2, args.lines, args.vocab, args.seed)
    tok.save(args.out)
    print(f"wrote {args.out} (vocab {tok.vocab_size})")
    return 0


def _cmd_pack(args) -> int:
    tok = tokenizer.TokenizerModel.load(args.tokenizer)
    with open(args.text, encoding="utf-8") as f:
        docs = (tok.encode(line.rstrip("\n")) for line in f if line.strip())
        pc = pack(
            docs,
            args.seq_len,
            args.budget,
            args.seed,
            eot_id=tokenizer.EOT_ID,
            language_code=args.language,
            tokenizer_sha256=tokenizer.TokenizerModel.sha256(args.tokenizer),
        )
    save_packed(pc, args.out)
    print(f"wrote {args.out}: {pc.n_rows} rows x {pc.seq_len} tokens")
    return 0


def _cmd_train(args) -> int:
    tok = tokenizer.TokenizerModel.load(args.tokenizer)
    cfg = model.preset(args.preset, vocab_size=tok.vocab_size, max_seq_len=args.max_seq_len,
                       dropout=args.dropout, attention_dropout=args.dropout)
    opt = trainer.OptimizerConfig(
        peak_lr=args.peak_lr,
        warmup_steps=args.warmup,
        total_steps=args.total_steps,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    if args.mode == "early-imbalanced":
        schedule = make_early_imbalanced_schedule(args.total_steps, args.batch_size, args.onset)
    elif args.mode == "monolingual":
        schedule = make_schedule(args.total_steps, args.batch_size, args.total_steps)
    else:
        schedule = make_schedule(args.total_steps, args.batch_size, args.onset)
    l1 = load_packed(args.l1)
    l2 = load_packed(args.l2) if args.l2 else None
    state = model.init(cfg, args.seed)
    trainer.train(state, schedule, l1, l2, opt, out_dir=args.out)
    print(f"trained {args.total_steps} steps; checkpoints under {args.out}")
    return 0


def _cmd_eval(args) -> int:
    state, tok = _load_model_and_tokenizer(args.model, args.tokenizer)
    records = evalsuite.load_blimp(args.data)
    primes = None
    if args.primes:
        primes = evalsuite.load_prime_file(args.primes)
        evalsuite.attach_primes(records, primes)
    report = evalsuite.accuracy(
        state, tok, records, prime_mode=args.prime_mode, seed=args.seed, prime_pool=primes
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    evalsuite.write_verdicts_csv(report.verdicts, out.with_suffix(".csv"))
    out.with_suffix(".json").write_text(
        json.dumps(evalsuite.report_to_json(report), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    print(f"accuracy {report.overall:.4f} over {report.n_pairs} pairs ({report.n_ties} ties)")
    return 0


def _cmd_fce(args) -> int:
    state, tok = _load_model_and_tokenizer(args.model, args.tokenizer)
    records, skipped = evalsuite.load_fce_pairs(args.data)
    fce = evalsuite.fce_delta_s(state, tok, records, n_seeds=args.seeds, seed=args.seed)
    payload = {
        "groups": fce.groups,
        "sample_size": fce.sample_size,
        "per_seed": fce.per_seed,
        "mean": fce.mean,
        "flagged_seeds": fce.flagged_seeds,
        "skipped": skipped,
    }
    Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for group in fce.groups:
        print(f"{group}: mean delta_s {fce.mean[group]:.4f}")
    return 0


def _cmd_lens(args) -> int:
    state, tok = _load_model_and_tokenizer(args.model, args.tokenizer)
    l1 = load_packed(args.dict_l1)
    l2 = load_packed(args.dict_l2)
    dictionary = mech.build_lang_dictionary(
        l1, l2, vocab_size=tok.vocab_size, threshold=args.threshold
    )
    inputs = load_packed(args.data)
    rows = [row for row in inputs.sequences[: args.rows]]
    profile = mech.logit_lens(state, rows, dictionary, k=args.k, positions=args.positions)
    Path(args.out).write_text(json.dumps(profile.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    ratios = ["inf" if math.isinf(r) else f"{r:.3f}" for r in profile.ratios]
    print("layer L1/L2 ratios:", " ".join(ratios))
    return 0


def _cmd_neurons(args) -> int:
    state, _, _ = model.load_checkpoint(args.model)
    packed = load_packed(args.corpus)
    ns = mech.detect_language_neurons(state, packed, quantile=args.quantile)
    ns.language = args.language or packed.language_code
    ns.save(args.out)
    if args.dump_activations:
        mech.dump_activations(state, packed, args.dump_activations)
    print(
        f"wrote {args.out}: {len(ns.attention[0])} attention + {len(ns.ffn[0])} FFN "
        f"indices per layer x {ns.n_layers} layers"
    )
    return 0


def _cmd_distance(args) -> int:
    source = args.matrix or typology.fixture_matrix_path()
    profiles = typology.load_feature_matrix(source)
    dm = typology.distance_matrix(profiles)
    text = typology.matrix_to_json(dm) + "\n" if args.format == "json" else typology.matrix_to_text(dm)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_run(args) -> int:
    manifest = pipeline.validate_manifest(args.manifest)
    result = pipeline.run(manifest)
    print(f"run {manifest.experiment_id} complete: {result.result_hash}")
    for name, value in sorted(result.metrics.items()):
        print(f"  {name} = {value:.6g}")
    return 0


def _cmd_report(args) -> int:
    results = [pipeline.load_result(d) for d in args.results]
    rows = pipeline.report(results, args.out)
    print(f"wrote {args.out}: {len(rows)} rows")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xli", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-tokenizer", help="train the shared bilingual tokenizer")
    p.add_argument("--l1", required=True)
    p.add_argument("--l2", required=True)
    p.add_argument("--lines", type=int, required=True)
    p.add_argument("--vocab", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_tokenizer)

    p = sub.add_parser("pack", help="pack a text file into fixed-length token rows")
    p.add_argument("--text", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--language", default="xx")
    p.add_argument("--seq-len", type=int, default=256)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_pack)

    p = sub.add_parser("train", help="train one model outside the manifest pipeline")
    p.add_argument("--preset", choices=["Base", "Small", "Tiny"], required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--l1", required=True, help="packed L1 training corpus")
    p.add_argument("--l2", help="packed L2 training corpus")
    p.add_argument("--mode", choices=["sequential-onset", "early-imbalanced", "monolingual"],
                   default="sequential-onset")
    p.add_argument("--onset", type=int, default=0)
    p.add_argument("--total-steps", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--max-seq-len", type=int, default=256)
    p.add_argument("--peak-lr", type=float, default=1e-4)
    p.add_argument("--warmup", type=int, default=5000)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=123)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="minimal-pair accuracy, optionally primed")
    p.add_argument("--model", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--primes")
    p.add_argument("--prime-mode", choices=list(evalsuite.PRIME_MODES), default="none")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output stem; writes .csv and .json")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("fce", help="learner-preference surprisal gaps by L1 group")
    p.add_argument("--model", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fce)

    p = sub.add_parser("lens", help="layerwise language profile of hidden states")
    p.add_argument("--model", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--data", required=True, help="packed corpus to scan")
    p.add_argument("--dict-l1", required=True, help="packed corpus defining L1 token counts")
    p.add_argument("--dict-l2", required=True, help="packed corpus defining L2 token counts")
    p.add_argument("--rows", type=int, default=8)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--positions", choices=["all", "last"], default="all")
    p.add_argument("--threshold", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_lens)

    p = sub.add_parser("neurons", help="language-selective neuron detection")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True, help="packed corpus")
    p.add_argument("--quantile", type=float, default=0.25)
    p.add_argument("--language")
    p.add_argument("--dump-activations", help="also write a raw activation dump here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_neurons)

    p = sub.add_parser("distance", help="typological distance matrix")
    p.add_argument("--matrix", help="feature matrix TSV (default: bundled fixture)")
    p.add_argument("--format", choices=["json", "text"], default="text")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_distance)

    p = sub.add_parser("run", help="validate and execute a manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="long-format table over completed runs")
    p.add_argument("--out", required=True)
    p.add_argument("results", nargs="+", help="run output directories")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            stream=sys.stderr,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except (ValidationError, FileNotFoundError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - runtime failures exit 2
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
