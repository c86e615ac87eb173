"""Command-line front end: ``layerlab <command> [flags]``.

Every command writes its outputs and one ``manifest.json`` under ``--out``.
A JSON ``--config`` file may supply any flag (by its long name, dashes or
underscores); flags given on the command line win.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict

from . import __version__
from .data import TaskSpec, generate_corpus, load_corpus_dir, save_corpus_dir
from .evaluation import (BeamConfig, SpeedReport, bench_depth_tradeoff, bleu, bleu1,
                         enc_bleu_csv, encoder_translation_scores, parse_enc_bleu_csv,
                         render_enc_bleu_table, render_speed_table, translate)
from .model import ModelConfig, build_model
from .probing import (ProbeConfig, ProbeReport, ProbeTarget, random_encoder_control,
                      run_probe_suite, train_probe)
from .training import (Checkpoint, TrainConfig, average_checkpoints, load_checkpoint,
                       save_checkpoint, train)

log = logging.getLogger("layerlab")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _write(out_dir: str, name: str, text: str, outputs: list[str]) -> str:
    path = os.path.join(out_dir, name)
    with open(path, "w", newline="\n") as f:
        f.write(text)
    outputs.append(path)
    return path


def _load_model(path: str):
    if not os.path.exists(path):
        raise UsageError(f"model checkpoint not found: {path}")
    return load_checkpoint(path).to_model().freeze()


def _load_corpus(path: str):
    if not os.path.isfile(os.path.join(path, "vocab.txt")):
        raise UsageError(f"not a corpus directory (no vocab.txt): {path}")
    return load_corpus_dir(path)


def _probe_config(args) -> ProbeConfig:
    return ProbeConfig(steps=args.probe_steps, lr=args.probe_lr,
                       token_batch_budget=args.batch_tokens, eval_interval=args.eval_interval,
                       seed=args.seed)


def _train_config(args) -> TrainConfig:
    return TrainConfig(steps=args.steps, warmup_steps=args.warmup,
                       token_batch_budget=args.batch_tokens,
                       checkpoint_interval=args.checkpoint_interval,
                       checkpoints_to_average=args.average, seed=args.seed)


def _parse_configs(text: str) -> list[tuple[int, int]]:
    out = []
    for item in text.split(","):
        try:
            e, d = item.split(":")
            out.append((int(e), int(d)))
        except ValueError:
            raise UsageError(f"bad --configs entry {item!r}; expected ENC:DEC") from None
    return out


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, outputs):
    spec = TaskSpec(kind=args.task, content_vocab=args.content_vocab, min_len=args.min_len,
                    max_len=args.max_len, swap_parity=args.swap_parity, n_dev=args.n_dev,
                    n_test=args.n_test, seed=args.seed)
    corpus = generate_corpus(spec, args.n_pairs)
    outputs += list(save_corpus_dir(args.out, corpus).values())
    return {"task": spec.to_dict(), "n_pairs": args.n_pairs}


def cmd_train(args, outputs):
    corpus = _load_corpus(args.corpus)
    mcfg = ModelConfig(encoder_depth=args.enc_depth, decoder_depth=args.dec_depth,
                       d_model=args.d_model, heads=args.heads, d_ff=args.d_ff,
                       vocab_size=len(corpus.vocab), dropout=args.dropout, seed=args.seed)
    tcfg = _train_config(args)
    model = build_model(mcfg)
    result = train(model, corpus.train, tcfg, dev=corpus.dev, out_dir=args.out)
    outputs += sorted(os.path.join(args.out, f) for f in os.listdir(args.out)
                      if f.startswith("checkpoint_") or f == "loss.csv")
    final = average_checkpoints(result.checkpoints, tcfg.checkpoints_to_average)
    path = os.path.join(args.out, "model.llab")
    save_checkpoint(path, final)
    outputs.append(path)
    return {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "dev_accuracy": result.dev_accuracy}


def cmd_average(args, outputs):
    if not args.checkpoints:
        raise UsageError("average needs at least one checkpoint")
    avg = average_checkpoints(args.checkpoints, args.last)
    path = os.path.join(args.out, "averaged.llab")
    save_checkpoint(path, avg)
    outputs.append(path)
    return {"n_averaged": args.last or len(args.checkpoints)}


def _save_probes(out_dir, probes, outputs):
    pdir = os.path.join(out_dir, "probes")
    os.makedirs(pdir, exist_ok=True)
    for target, probe in probes.items():
        tensors = {k: v.data for k, v in probe.parameters().items()}
        meta = {"side": target.side, "layer": target.layer, "ablation": target.ablation}
        path = os.path.join(pdir, f"{target.name}.llab")
        save_checkpoint(path, Checkpoint(tensors, 0, meta))
        outputs.append(path)


def cmd_probe(args, outputs):
    model = _load_model(args.model)
    corpus = _load_corpus(args.corpus)
    pcfg = _probe_config(args)
    if args.random_encoder:
        res = random_encoder_control(model, corpus, pcfg, seed=args.seed + 12345)
        text = "side,layer,ablation,accuracy,delta\n"
        text += f"random_encoder,0,none,{res.acc_embedding:.2f},\n"
        text += (f"random_encoder,{model.config.encoder_depth},none,{res.acc_last_layer:.2f},"
                 f"{res.acc_last_layer - res.acc_embedding:.2f}\n")
        _write(args.out, "random_encoder.csv", text, outputs)
        return {"probe": asdict(pcfg), **asdict(res)}
    suite = run_probe_suite(model, corpus, pcfg, ablations=not args.no_ablations)
    _write(args.out, "probe.csv", suite.report.to_csv(), outputs)
    _save_probes(args.out, suite.probes, outputs)
    return {"probe": asdict(pcfg)}


def cmd_ablate(args, outputs):
    model = _load_model(args.model)
    corpus = _load_corpus(args.corpus)
    pcfg = _probe_config(args)
    suite = run_probe_suite(model, corpus, pcfg, ablations=True, base=True)
    rows = [r for r in suite.report.rows if r.side == "decoder" and r.layer >= 1]
    _write(args.out, "ablate.csv", ProbeReport(rows).to_csv(), outputs)
    return {"probe": asdict(pcfg)}


def cmd_enc_translate(args, outputs):
    model = _load_model(args.model)
    corpus = _load_corpus(args.corpus)
    pcfg = _probe_config(args)
    layers = range(model.config.encoder_depth + 1) if args.layers is None else args.layers
    probes = {}
    for layer in layers:
        if not 0 <= layer <= model.config.encoder_depth:
            raise UsageError(f"encoder layer {layer} out of range")
        probes[layer] = train_probe(model, corpus, ProbeTarget("encoder", layer), pcfg).probe
    beam = None if args.no_full else BeamConfig(args.beam, args.max_output_len)
    rows = encoder_translation_scores(model, probes, corpus.test, beam)
    _write(args.out, "enc_bleu.csv", enc_bleu_csv(rows), outputs)
    return {"probe": asdict(pcfg), "layers": list(layers)}


def cmd_decode(args, outputs):
    model = _load_model(args.model)
    corpus = _load_corpus(args.corpus)
    pairs = corpus.split(args.split)
    beam = BeamConfig(args.beam, args.max_output_len)
    hyps = translate(model, [p.src for p in pairs], beam)
    refs = [p.tgt for p in pairs]
    lines = [" ".join(corpus.vocab.decode(h)) + "\n" for h in hyps]
    _write(args.out, "translations.txt", "".join(lines), outputs)
    score = f"bleu,bleu1\n{bleu(hyps, refs):.2f},{bleu1(hyps, refs):.2f}\n"
    _write(args.out, "bleu.csv", score, outputs)
    return {"beam": asdict(beam), "split": args.split}


def cmd_bench_speed(args, outputs):
    configs = _parse_configs(args.configs)
    corpus = _load_corpus(args.corpus)
    base = ModelConfig(d_model=args.d_model, heads=args.heads, d_ff=args.d_ff,
                       vocab_size=len(corpus.vocab), dropout=args.dropout, seed=args.seed)
    tcfg = _train_config(args)
    report = bench_depth_tradeoff(configs, corpus, tcfg,
                                  BeamConfig(args.beam, args.max_output_len), args.reps,
                                  args.sentences, base=base)
    _write(args.out, "speed.csv", report.to_csv(timings=True), outputs)
    _write(args.out, "speed_notiming.csv", report.to_csv(timings=False), outputs)
    return {"train": tcfg.to_dict(), "protocol": report.protocol}


def cmd_report(args, outputs):
    if not os.path.exists(args.input):
        raise UsageError(f"input CSV not found: {args.input}")
    with open(args.input) as f:
        text = f.read()
    if args.table == "probe":
        md = ProbeReport.from_csv(text).to_markdown()
    elif args.table == "enc-bleu":
        md = render_enc_bleu_table(parse_enc_bleu_csv(text))
    else:
        md = render_speed_table(SpeedReport.from_csv(text))
    _write(args.out, f"{args.table}_table.md", md, outputs)
    sys.stdout.write(md)
    return {"table": args.table}


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "average": cmd_average, "probe": cmd_probe,
    "ablate": cmd_ablate, "enc-translate": cmd_enc_translate, "decode": cmd_decode,
    "bench-speed": cmd_bench_speed, "report": cmd_report,
}


# ---------------------------------------------------------------- parser

def _model_flags(p, depth=True):
    if depth:
        p.add_argument("--enc-depth", type=int, default=6)
        p.add_argument("--dec-depth", type=int, default=6)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=128)
    p.add_argument("--dropout", type=float, default=0.1)


def _train_flags(p):
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--warmup", type=int, default=400)
    p.add_argument("--batch-tokens", type=int, default=2000)
    p.add_argument("--checkpoint-interval", type=int, default=500)
    p.add_argument("--average", type=int, default=3, help="checkpoints to average at the end")


def _probe_flags(p):
    p.add_argument("--model", required=True, help="LLAB1 model checkpoint")
    p.add_argument("--corpus", required=True, help="corpus directory from gen-data")
    p.add_argument("--probe-steps", type=int, default=2000)
    p.add_argument("--probe-lr", type=float, default=1e-3)
    p.add_argument("--batch-tokens", type=int, default=2000)
    p.add_argument("--eval-interval", type=int, default=200)


def _beam_flags(p):
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--max-output-len", type=int, default=30)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON file with flag defaults")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = add("gen-data", "generate a synthetic parallel corpus")
    p.add_argument("--task", choices=["lexical_swap_reorder", "copy_mod_shift"],
                   default="lexical_swap_reorder")
    p.add_argument("--content-vocab", type=int, default=64)
    p.add_argument("--n-pairs", type=int, default=22000)
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--swap-parity", type=int, choices=[0, 1], default=0)
    p.add_argument("--n-dev", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=1000)

    p = add("train", "train an encoder-decoder model")
    p.add_argument("--corpus", required=True)
    _model_flags(p)
    _train_flags(p)

    p = add("average", "average checkpoints elementwise")
    p.add_argument("checkpoints", nargs="*")
    p.add_argument("--last", type=int, help="average only the last N given")

    p = add("probe", "run the layer-wise probe suite")
    _probe_flags(p)
    p.add_argument("--random-encoder", action="store_true",
                   help="probe a randomly initialised encoder instead")
    p.add_argument("--no-ablations", action="store_true")

    p = add("ablate", "decoder sub-layer bypass probes")
    _probe_flags(p)

    p = add("enc-translate", "encoder-only translation BLEU per encoder layer")
    _probe_flags(p)
    _beam_flags(p)
    p.add_argument("--layers", type=int, nargs="*")
    p.add_argument("--no-full", action="store_true", help="skip the full-model row")

    p = add("decode", "beam-decode a corpus split")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=["train", "dev", "test"], default="test")
    _beam_flags(p)

    p = add("bench-speed", "train several depth splits and time decoding")
    p.add_argument("--corpus", required=True)
    p.add_argument("--configs", default="6:6,7:5,8:4,9:3,10:2,11:1,18:4")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--sentences", type=int, default=100)
    _model_flags(p, depth=False)
    _train_flags(p)
    _beam_flags(p)

    p = add("report", "render a stored CSV as a Markdown table")
    p.add_argument("--table", choices=["probe", "enc-bleu", "speed"], required=True)
    p.add_argument("--input", required=True, help="CSV written by probe/enc-translate/bench-speed")
    return parser


def _apply_config_file(parser, argv):
    """Parse with defaults taken from ``--config`` so explicit flags still win."""
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if not known.config or command is None:
        return parser.parse_args(argv)
    try:
        with open(known.config) as f:
            values = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read --config {known.config}: {exc}")
    if not isinstance(values, dict):
        parser.error("--config must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[command]
    known_dests = {a.dest for a in sub._actions}
    values = {k.replace("-", "_"): v for k, v in values.items()}
    unknown = sorted(set(values) - known_dests)
    if unknown:
        parser.error(f"unknown keys in --config: {', '.join(unknown)}")
    sub.set_defaults(**values)
    # required flags satisfied by the file
    for a in sub._actions:
        if a.dest in values:
            a.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    os.makedirs(args.out, exist_ok=True)
    outputs: list[str] = []
    t0 = time.perf_counter()
    try:
        extra = COMMANDS[args.command](args, outputs)
    except UsageError as exc:
        print(f"layerlab {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # surfaced to the user, exit 1
        print(f"layerlab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest = {
        "command": args.command,
        "config": {k: v for k, v in sorted(vars(args).items())},
        "resolved": extra,
        "seed": args.seed,
        "inputs": {k: getattr(args, k) for k in ("corpus", "model", "input", "checkpoints")
                   if getattr(args, k, None) is not None},
        "outputs": outputs,
        "version": __version__,
        "wall_seconds": round(time.perf_counter() - t0, 3),
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, default=str)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
