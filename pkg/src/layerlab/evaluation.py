"""Decoding, BLEU, encoder-only translation and the depth-trading benchmark."""
from __future__ import annotations

import csv
import io
import math
import statistics
import time
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import numerics as nx
from .data import Corpus, SentencePair
from .model import (BOS, EOS, ConfigError, IncrementalDecoder, ModelConfig, TransformerModel,
                    build_model, count_parameters, decode_teacher_forced, encode, forward,
                    logits)
from .probing import ProbeContractError, ProbeParams
from .training import TrainConfig, train


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 4
    max_output_len: int = 30

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")


# ---------------------------------------------------------------- search

def beam_search(next_log_probs, beam_size: int, max_steps: int, eos: int,
                reorder=None) -> tuple[tuple[int, ...], float]:
    """Generic beam search without length penalty.

    ``next_log_probs(prefixes)`` maps the alive prefixes to a ``[n, V]``
    array. ``reorder(index)`` is told which prefixes survived, in order,
    so stateful scorers can follow along. Hypotheses ending in ``eos``
    leave the beam (eos itself is not part of the returned tokens).
    """
    alive: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    for _ in range(max_steps):
        lp = np.asarray(next_log_probs([h for h, _ in alive]), dtype=np.float64)
        scores = np.array([s for _, s in alive])[:, None] + lp
        flat = scores.reshape(-1)
        top = np.argsort(-flat, kind="stable")[:beam_size]
        V = lp.shape[1]
        nxt, keep = [], []
        for idx in top:
            b, tok = divmod(int(idx), V)
            cand = (alive[b][0] + (tok,), float(flat[idx]))
            if tok == eos:
                finished.append((alive[b][0], cand[1]))
            else:
                nxt.append(cand)
                keep.append(b)
        if not nxt:
            alive = []
            break
        alive = nxt
        if reorder is not None:
            reorder(keep)
        # scores only decrease, so no alive hypothesis can overtake this
        if finished and max(s for _, s in finished) >= alive[0][1]:
            break
    pool = finished + alive
    best = max(range(len(pool)), key=lambda i: (pool[i][1], -i))
    return pool[best]


def _src_ids(source) -> np.ndarray:
    source = list(source)
    if not source:
        raise InputError("empty source sentence")
    return np.array([source + [EOS]], dtype=np.int64)


def _max_steps(model: TransformerModel, cfg: BeamConfig) -> int:
    return min(cfg.max_output_len + 1, model.config.max_len)


def beam_decode_scored(model: TransformerModel, source, cfg: BeamConfig = BeamConfig()):
    src = _src_ids(source)
    with nx.no_grad():
        enc = encode(model, src)
        dec = IncrementalDecoder(model, enc.memory.data, enc.src_mask)

        def next_lp(prefixes):
            last = [p[-1] if p else BOS for p in prefixes]
            return dec.step(last)

        return beam_search(next_lp, cfg.beam_size, _max_steps(model, cfg), EOS, dec.reorder)


def beam_decode(model: TransformerModel, source, cfg: BeamConfig = BeamConfig()) -> list[int]:
    return list(beam_decode_scored(model, source, cfg)[0])


def greedy_decode(model: TransformerModel, source, max_output_len: int = 30) -> list[int]:
    """Argmax decoding by re-running the full teacher-forced decoder each step."""
    src = _src_ids(source)
    out: list[int] = []
    with nx.no_grad():
        enc = encode(model, src)
        for _ in range(min(max_output_len + 1, model.config.max_len)):
            tgt_in = np.array([[BOS] + out], dtype=np.int64)
            trace = decode_teacher_forced(model, enc.memory, tgt_in, enc.src_mask)
            tok = int(logits(model, trace.decoder_layer_outputs[-1]).data[0, -1].argmax())
            if tok == EOS:
                break
            out.append(tok)
    return out


def sequence_log_prob(model: TransformerModel, source, target) -> float:
    """Model log-probability of ``target`` followed by eos."""
    src = _src_ids(source)
    tgt_in = np.array([[BOS] + list(target)], dtype=np.int64)
    labels = list(target) + [EOS]
    with nx.no_grad():
        trace = forward(model, src, tgt_in)
        lp = nx.log_softmax_np(logits(model, trace.decoder_layer_outputs[-1]).data[0].astype(np.float64))
    return float(sum(lp[t, y] for t, y in enumerate(labels)))


def translate(model: TransformerModel, sources, cfg: BeamConfig = BeamConfig()) -> list[list[int]]:
    return [beam_decode(model, s, cfg) for s in sources]


# ---------------------------------------------------------------- BLEU

def _ngrams(seq, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu(hypotheses, references, max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100]: clipped n-gram precisions, brevity penalty, no smoothing."""
    if len(hypotheses) != len(references):
        raise InputError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise InputError("empty hypothesis set")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def bleu1(hypotheses, references) -> float:
    return bleu(hypotheses, references, max_n=1)


# ---------------------------------------------------------------- encoder-only translation

def encoder_only_translate(model: TransformerModel, probe: ProbeParams, source) -> list[int]:
    """Per source position: project the probed encoder state, classify, take argmax.

    No alignment is applied, so the output keeps source length and order.
    """
    if not probe.trained or probe.target is None or probe.target.side != "encoder":
        raise ProbeContractError("encoder-only translation needs a trained encoder-layer probe")
    src = _src_ids(source)
    with nx.no_grad():
        states = encode(model, src).encoder_layer_outputs[probe.target.layer]
        z = logits(model, nx.matmul(states, probe.projection)).data[0]
    return [int(t) for t in z[: src.shape[1] - 1].argmax(axis=-1)]


# ---------------------------------------------------------------- depth trading

@dataclass
class SpeedRow:
    enc_depth: int
    dec_depth: int
    params: int
    train_seconds: float
    decode_seconds: float
    speedup: float = 1.0
    bleu: float = 0.0


@dataclass
class SpeedReport:
    rows: list[SpeedRow]
    protocol: str = ""

    def row(self, enc: int, dec: int) -> SpeedRow:
        for r in self.rows:
            if (r.enc_depth, r.dec_depth) == (enc, dec):
                return r
        raise KeyError((enc, dec))

    def to_csv(self, timings: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["enc_depth", "dec_depth", "params", "train_seconds", "decode_seconds",
                    "speedup", "bleu"])
        for r in self.rows:
            t = (f"{r.train_seconds:.3f}", f"{r.decode_seconds:.4f}", f"{r.speedup:.2f}") \
                if timings else ("", "", "")
            w.writerow([r.enc_depth, r.dec_depth, r.params, *t, f"{r.bleu:.2f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SpeedReport":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            rows.append(SpeedRow(int(rec["enc_depth"]), int(rec["dec_depth"]), int(rec["params"]),
                                 float(rec["train_seconds"] or 0), float(rec["decode_seconds"] or 0),
                                 float(rec["speedup"] or 0), float(rec["bleu"])))
        return cls(rows)


def _check_shared(configs: list[ModelConfig]) -> None:
    keys = ("d_model", "heads", "d_ff", "vocab_size", "max_len", "norm_placement")
    ref = configs[0]
    for c in configs[1:]:
        for k in keys:
            if getattr(c, k) != getattr(ref, k):
                raise ConfigError(f"configs disagree on {k}: {getattr(ref, k)} vs {getattr(c, k)}")


def time_decoding(model: TransformerModel, sources, cfg: BeamConfig,
                  repetitions: int = 5) -> tuple[float, list[list[int]]]:
    """Median wall time to beam-decode ``sources`` one sentence at a time.

    Single BLAS thread; one untimed warm-up pass first.
    """
    with threadpool_limits(limits=1):
        outputs = translate(model, sources, cfg)
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            translate(model, sources, cfg)
            times.append(time.perf_counter() - t0)
    return statistics.median(times), outputs


def bench_depth_tradeoff(configs, corpus: Corpus, train_cfg: TrainConfig,
                         beam: BeamConfig = BeamConfig(), repetitions: int = 5,
                         n_sentences: int | None = None,
                         reference: tuple[int, int] = (6, 6),
                         base: ModelConfig | None = None) -> SpeedReport:
    """Train each (encoder, decoder) depth identically, then time beam decoding.

    ``configs`` holds ModelConfigs or ``(enc, dec)`` pairs (expanded from
    ``base``). Speed-up is relative to ``reference`` when present, else the
    first row.
    """
    base = base or ModelConfig(vocab_size=len(corpus.vocab))
    cfgs = [c if isinstance(c, ModelConfig) else replace(base, encoder_depth=c[0], decoder_depth=c[1])
            for c in configs]
    _check_shared(cfgs)
    test = corpus.test[:n_sentences] if n_sentences else corpus.test
    sources = [p.src for p in test]
    refs = [p.tgt for p in test]
    rows = []
    for cfg in cfgs:
        model = build_model(cfg)
        t0 = time.perf_counter()
        with threadpool_limits(limits=1):
            result = train(model, corpus.train, train_cfg)
        train_s = time.perf_counter() - t0
        model = result.averaged(train_cfg.checkpoints_to_average).freeze()
        decode_s, hyps = time_decoding(model, sources, beam, repetitions)
        rows.append(SpeedRow(cfg.encoder_depth, cfg.decoder_depth, count_parameters(model),
                             train_s, decode_s, bleu=bleu(hyps, refs)))
    ref = next((r for r in rows if (r.enc_depth, r.dec_depth) == tuple(reference)), rows[0])
    for r in rows:
        r.speedup = ref.decode_seconds / r.decode_seconds
    protocol = (f"beam {beam.beam_size}, {len(sources)} sentences decoded one at a time, "
                f"1 BLAS thread, warm-up excluded, median of {repetitions}")
    return SpeedReport(rows, protocol)


def render_speed_table(report: SpeedReport) -> str:
    lines = ["| Encoder | Decoder | BLEU | Para. | Train (s) | Decode (s) | Speed up |",
             "|---:|---:|---:|---:|---:|---:|---:|"]
    for r in report.rows:
        lines.append(f"| {r.enc_depth} | {r.dec_depth} | {r.bleu:.2f} | {r.params} | "
                     f"{r.train_seconds:.1f} | {r.decode_seconds:.3f} | {r.speedup:.2f} |")
    return "\n".join(lines) + "\n"


@dataclass
class EncBleuRow:
    layer: str        # encoder layer index, or "FULL"
    bleu1: float
    bleu: float


def enc_bleu_csv(rows: list[EncBleuRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "bleu1", "bleu"])
    for r in rows:
        w.writerow([r.layer, f"{r.bleu1:.2f}", f"{r.bleu:.2f}"])
    return buf.getvalue()


def parse_enc_bleu_csv(text: str) -> list[EncBleuRow]:
    return [EncBleuRow(rec["layer"], float(rec["bleu1"]), float(rec["bleu"]))
            for rec in csv.DictReader(io.StringIO(text))]


def render_enc_bleu_table(rows: list[EncBleuRow]) -> str:
    lines = ["| Layer | BLEU 1 | Δ | BLEU | Δ |", "|---|---:|---:|---:|---:|"]
    prev = None
    for r in rows:
        d1 = "" if prev is None else f"{r.bleu1 - prev.bleu1:.2f}"
        d4 = "" if prev is None else f"{r.bleu - prev.bleu:.2f}"
        lines.append(f"| {r.layer} | {r.bleu1:.2f} | {d1} | {r.bleu:.2f} | {d4} |")
        prev = r
    return "\n".join(lines) + "\n"


def encoder_translation_scores(model: TransformerModel, probes: dict[int, ProbeParams],
                               pairs: list[SentencePair],
                               beam: BeamConfig | None = BeamConfig()) -> list[EncBleuRow]:
    """BLEU-1/BLEU of encoder-only translations per layer, plus the full model."""
    refs = [p.tgt for p in pairs]
    rows = []
    for layer in sorted(probes):
        hyps = [encoder_only_translate(model, probes[layer], p.src) for p in pairs]
        rows.append(EncBleuRow(str(layer), bleu1(hyps, refs), bleu(hyps, refs)))
    if beam is not None:
        hyps = translate(model, [p.src for p in pairs], beam)
        rows.append(EncBleuRow("FULL", bleu1(hyps, refs), bleu(hyps, refs)))
    return rows
