"""Command-line workflows: data generation, training, decoding, evaluation, profiling."""

import argparse
import dataclasses
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, config_hash, format_config, load_config
from .data import ManifestError, gen_synthetic, load_corpus, read_manifest, write_corpus
from .decoding import (
    greedy_key_reads,
    profile_decode_cost,
    recognize,
    wer_report,
)
from .model import CtcPromptASR
from .training import subsample_pairs, train, train_external_lm

log = logging.getLogger("ctcprompt")

COMMANDS = ("gen-data", "train", "train-lm", "decode", "eval", "profile", "compare-compression")


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _overrides(args):
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _resolve_config(args, seed_keys, extra=None):
    overrides = _overrides(args)
    overrides.update(extra or {})
    if args.seed is not None:
        for key in seed_keys:
            overrides[key] = str(args.seed)
    return load_config(args.config, overrides, toy=args.toy)


def _write_header(out_dir, command, run, seed):
    """Reproducibility header: no timestamps, so reruns produce identical bytes."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as f:
        f.write(format_config(run))
    with open(os.path.join(out_dir, "run.txt"), "w", encoding="utf-8") as f:
        f.write(f"artifact = ctcprompt\nversion = {__version__}\ncommand = {command}\n"
                f"seed = {seed}\nconfig_hash = {config_hash(run)}\n")


def _pairs(tokenizer, utts):
    return [(u.features, tokenizer.tokenize(u.transcript)) for u in utts]


def _load_model(path):
    ckpt = load_checkpoint(path)
    if ckpt.header["kind"] != "asr":
        raise CliError(f"{path} holds an external LM, not an ASR model")
    return ckpt


def _load_lm(path):
    if not path:
        return None
    ckpt = load_checkpoint(path)
    if ckpt.header["kind"] != "lm":
        raise CliError(f"{path} is not an external LM checkpoint")
    return ckpt.model


def _eval_utts(args):
    if args.manifest:
        return read_manifest(args.manifest)
    return read_manifest(os.path.join(args.data, f"{args.split}.tsv"))


def decode_utterances(model, tokenizer, utts, lm=None, weights=None, compression=None):
    """Returns decode records and aggregate prompt/timing statistics."""
    rows = []
    t0 = time.perf_counter()
    for u in utts:
        res = recognize(model, u.features, lm, weights, compression)
        rows.append((u.utt_id, tokenizer.detokenize(res.tokens), res))
    elapsed = time.perf_counter() - t0
    taus = [res.prompt_len for _, _, res in rows]
    frames = [res.frames for _, _, res in rows]
    audio = sum(u.frames for u in utts) * 0.01
    stats = {
        "utterances": len(rows),
        "mean_tau": float(np.mean(taus)) if taus else 0.0,
        "mean_frames": float(np.mean(frames)) if frames else 0.0,
        "seconds": elapsed,
        "audio_seconds": audio,
    }
    return rows, stats


def format_decode_line(utt_id, text, res):
    return (f"{utt_id}\t{text}\t{res.combined!r}\t{res.decoder_score!r}\t"
            f"{res.ctc_score!r}\t{res.lm_score!r}")


def read_transcripts(path):
    """``utt_id -> text`` from a manifest or a decode/plain ``utt_id<TAB>text`` file."""
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in f.read().split("\n") if ln]
    manifest = bool(lines) and lines[0].startswith("utt_id\tfeature_path")
    out = {}
    for ln in lines[1:] if manifest else lines:
        cols = ln.split("\t")
        if manifest:
            out[cols[0]] = cols[3]
        else:
            out[cols[0]] = cols[1] if len(cols) > 1 else ""
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    run = _resolve_config(args, ["data_seed"])
    corpus = gen_synthetic(run.data)
    write_corpus(corpus, args.out)
    _write_header(args.out, "gen-data", run, run.data.data_seed)
    print(f"wrote {len(corpus.train)} paired, {len(corpus.test)} test, "
          f"{len(corpus.text)} text-only records to {args.out}")


def _train_one(run, corpus, out_dir):
    tok = corpus.tokenizer
    pairs = subsample_pairs(_pairs(tok, corpus.train), run.train.pair_fraction, run.train.seed)
    texts = [tok.tokenize(u.transcript) for u in corpus.text]
    model = CtcPromptASR(tok.vocab_size, run.model)
    result = train(model, pairs, texts, run.train, out_dir=out_dir, tokenizer=tok)
    return model, result


def _data_feat_dim(corpus):
    for u in corpus.train:
        return u.features.shape[1]
    raise CliError("training manifest has no paired records")


def cmd_train(args):
    corpus = load_corpus(args.data)
    extra = {"feat_dim": str(_data_feat_dim(corpus))}
    run = _resolve_config(args, ["seed", "init_seed"], extra)
    _write_header(args.out, "train", run, run.train.seed)
    _, result = _train_one(run, corpus, args.out)
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {result.steps} steps; last metrics {last}; checkpoints in {args.out}")


def cmd_train_lm(args):
    corpus = load_corpus(args.data)
    run = _resolve_config(args, ["seed", "init_seed"])
    tok = corpus.tokenizer
    texts = [tok.tokenize(u.transcript) for u in corpus.text]
    _write_header(args.out, "train-lm", run, run.train.seed)
    result = train_external_lm(texts, tok.vocab_size, run.model, run.train)
    save_checkpoint(os.path.join(args.out, "lm.ckpt"), result.lm, tok, step=run.train.lm_steps,
                    seed=run.train.seed, train_config=run.train, model_config=run.model)
    with open(os.path.join(args.out, "lm_report.txt"), "w", encoding="utf-8") as f:
        f.write(f"heldout_perplexity = {result.perplexity!r}\n")
    print(f"external LM held-out perplexity {result.perplexity:.4f}")


def _weights(args, run):
    w = run.decode
    updates = {}
    for name in ("ctc_weight", "lm_weight", "length_penalty", "beam"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    return dataclasses.replace(w, **updates)


def cmd_decode(args):
    run = _resolve_config(args, [])
    ckpt = _load_model(args.model)
    lm = _load_lm(args.lm)
    weights = _weights(args, run)
    if lm is None and weights.lm_weight > 0:
        log.warning("no --lm given; lm_weight %s has no effect", weights.lm_weight)
    utts = _eval_utts(args)
    _write_header(args.out, "decode", run, args.seed if args.seed is not None else 0)
    rows, stats = decode_utterances(ckpt.model, ckpt.tokenizer, utts, lm, weights)
    with open(os.path.join(args.out, "hyps.tsv"), "w", encoding="utf-8") as f:
        for utt_id, text, res in rows:
            f.write(format_decode_line(utt_id, text, res) + "\n")
    with open(os.path.join(args.out, "decode_stats.txt"), "w", encoding="utf-8") as f:
        for k, v in stats.items():
            f.write(f"{k} = {v!r}\n")
    print(f"decoded {len(rows)} utterances into {os.path.join(args.out, 'hyps.tsv')}")


def _read_stats(hyp_path):
    path = os.path.join(os.path.dirname(os.path.abspath(hyp_path)), "decode_stats.txt")
    if not os.path.isfile(path):
        return None
    stats = {}
    with open(path, encoding="utf-8") as f:
        for ln in f:
            k, v = (s.strip() for s in ln.split("=", 1))
            stats[k] = float(v)
    return stats


def format_eval_report(report, stats=None):
    rows = [("WER(%)", f"{report.wer:.2f}"), ("substitutions", str(report.substitutions)),
            ("deletions", str(report.deletions)), ("insertions", str(report.insertions)),
            ("ref_words", str(report.ref_words))]
    if stats:
        ratio = stats["mean_tau"] / stats["mean_frames"] if stats["mean_frames"] else float("nan")
        rtf = stats["seconds"] / stats["audio_seconds"] if stats["audio_seconds"] else float("nan")
        rows += [("mean_tau/T'", f"{stats['mean_tau']:.2f}/{stats['mean_frames']:.2f} "
                                 f"({ratio:.3f})"), ("RTF", f"{rtf:.4f}")]
    else:
        rows += [("mean_tau/T'", "n/a"), ("RTF", "n/a")]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


def cmd_eval(args):
    run = _resolve_config(args, [])
    refs, hyps = read_transcripts(args.ref), read_transcripts(args.hyp)
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise CliError(f"hypotheses missing for {len(missing)} utterances, e.g. {missing[0]}")
    ids = sorted(refs)
    report = wer_report([refs[i] for i in ids], [hyps[i] for i in ids])
    text = format_eval_report(report, _read_stats(args.hyp))
    _write_header(args.out, "eval", run, args.seed if args.seed is not None else 0)
    with open(os.path.join(args.out, "eval.txt"), "w", encoding="utf-8") as f:
        f.write(text)
    print(text, end="")


def format_profile(reports, blocks):
    lines = ["mode          utts  key_reads    decode_s  RTF      mean_tau  mean_T'  "
             "analytic_greedy"]
    for r in reports:
        analytic = sum(greedy_key_reads(t, n, blocks) for t, n in zip(r.taus, r.out_lens))
        lines.append(f"{r.mode:<13} {r.utterances:<5} {r.key_reads:<12} {r.decode_seconds:<9.3f} "
                     f"{r.rtf:<8.4f} {r.mean_tau:<9.2f} {r.mean_frames:<8.2f} {analytic}")
    comp, full = reports
    lines.append(f"key-read ratio compressed/uncompressed = {comp.key_reads / full.key_reads:.4f}")
    return "\n".join(lines) + "\n"


def cmd_profile(args):
    run = _resolve_config(args, [])
    ckpt = _load_model(args.model)
    lm = _load_lm(args.lm)
    weights = _weights(args, run)
    feats = [u.features for u in _eval_utts(args)]
    _write_header(args.out, "profile", run, args.seed if args.seed is not None else 0)
    reports = [profile_decode_cost(ckpt.model, feats, mode, lm, weights)
               for mode in ("compressed", "uncompressed")]
    text = format_profile(reports, ckpt.model.config.decoder_blocks)
    with open(os.path.join(args.out, "profile.txt"), "w", encoding="utf-8") as f:
        f.write(text)
    print(text, end="")


def cmd_compare_compression(args):
    corpus = load_corpus(args.data)
    extra = {"feat_dim": str(_data_feat_dim(corpus)), "lm_batch_fraction": "0.0"}
    run = _resolve_config(args, ["seed", "init_seed"], extra)
    _write_header(args.out, "compare-compression", run, run.train.seed)
    weights = _weights(args, run)
    tok = corpus.tokenizer
    lines = ["row  compression  WER(%)  mean_tau  mean_T'  key_reads"]
    for row, mode in zip(("P1", "P2", "P3"), ("downsample", "average", "remove")):
        variant = dataclasses.replace(run, model=dataclasses.replace(run.model, compression=mode))
        sub = os.path.join(args.out, mode)
        model, _ = _train_one(variant, corpus, sub)
        rows, stats = decode_utterances(model, tok, corpus.test, None, weights)
        report = wer_report([u.transcript for u in corpus.test], [t for _, t, _ in rows])
        cost = profile_decode_cost(model, [u.features for u in corpus.test], "compressed",
                                   None, weights)
        lines.append(f"{row:<4} {mode:<12} {report.wer:<7.2f} {stats['mean_tau']:<9.2f} "
                     f"{stats['mean_frames']:<8.2f} {cost.key_reads}")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(args.out, "compare.txt"), "w", encoding="utf-8") as f:
        f.write(text)
    print(text, end="")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random draw")
    common.add_argument("--config", default=None, help="key = value configuration file")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--toy", action="store_true", help="start from the desk-scale preset")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")

    data_src = argparse.ArgumentParser(add_help=False)
    data_src.add_argument("--data", help="directory written by gen-data")
    data_src.add_argument("--split", default="test", choices=("train", "test"))
    data_src.add_argument("--manifest", help="explicit manifest, overrides --data/--split")

    fusion = argparse.ArgumentParser(add_help=False)
    fusion.add_argument("--ctc-weight", type=float, dest="ctc_weight")
    fusion.add_argument("--lm-weight", type=float, dest="lm_weight")
    fusion.add_argument("--length-penalty", type=float, dest="length_penalty")
    fusion.add_argument("--beam", type=int)

    parser = argparse.ArgumentParser(
        prog="ctcprompt", description="Decoder-only ASR with CTC-compressed prompts (toy scale)."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic corpus")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train the ASR model")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-lm", parents=[common], help="train the external LM")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("decode", parents=[common, data_src, fusion], help="beam-search decode")
    p.add_argument("--model", required=True)
    p.add_argument("--lm")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", parents=[common], help="score hypotheses against references")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", parents=[common, data_src, fusion],
                       help="compressed vs uncompressed decoding cost")
    p.add_argument("--model", required=True)
    p.add_argument("--lm")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("compare-compression", parents=[common, fusion],
                       help="train and score the three prompt compressions")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_compare_compression)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "manifest", None) is None and hasattr(args, "split") and not args.data:
        parser.error("one of --data or --manifest is required")
    try:
        args.func(args)
    except (ConfigError, ManifestError, CheckpointError, CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
