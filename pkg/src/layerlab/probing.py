"""Layer-wise word-translation probes on a frozen model.

A probe is a ``d_model x d_model`` projection placed in front of the frozen
tied classifier. Encoder probes also learn a weight per decoder
cross-attention head; the softmax of those weights mixes all heads into one
soft source->target alignment that carries encoder states over to target
positions. Every (layer, ablation) target gets its own independent probe.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import IGNORE_INDEX, Batch, Corpus, SentencePair, make_batches
from .model import (BypassSpec, ConfigError, ModelConfig, TransformerModel, build_model,
                    encode, encoder_param_shapes, forward, init_params, logits)
from .numerics import Tensor
from .training import AdamState, adam_step

log = logging.getLogger(__name__)

ABLATIONS = ("none", "skip_self_attention", "skip_cross_attention")
_SKIP = {"none": "none", "skip_self_attention": "self_attention",
         "skip_cross_attention": "cross_attention"}


class ProbeContractError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProbeTarget:
    side: str           # "encoder" or "decoder"
    layer: int
    ablation: str = "none"

    def __post_init__(self):
        if self.side not in ("encoder", "decoder"):
            raise ProbeContractError(f"unknown side {self.side!r}")
        if self.ablation not in ABLATIONS:
            raise ProbeContractError(f"unknown ablation {self.ablation!r}")
        if self.ablation != "none" and (self.side == "encoder" or self.layer == 0):
            raise ProbeContractError("ablations apply to decoder layers >= 1 only")

    def check(self, config: ModelConfig) -> None:
        depth = config.encoder_depth if self.side == "encoder" else config.decoder_depth
        if not 0 <= self.layer <= depth:
            raise ConfigError(f"{self.side} layer {self.layer} outside [0, {depth}]")

    @property
    def bypass(self) -> BypassSpec:
        return BypassSpec(self.layer, _SKIP[self.ablation])

    @property
    def name(self) -> str:
        return f"{self.side}_{self.layer}_{self.ablation}"


@dataclass
class ProbeParams:
    projection: Tensor
    align_weights: Tensor | None = None
    target: ProbeTarget | None = None
    trained: bool = False

    def parameters(self) -> dict[str, Tensor]:
        out = {"projection": self.projection}
        if self.align_weights is not None:
            out["align_weights"] = self.align_weights
        return out

    def copy(self) -> "ProbeParams":
        return ProbeParams(
            Tensor(self.projection.data.copy(), requires_grad=self.projection.requires_grad),
            None if self.align_weights is None else
            Tensor(self.align_weights.data.copy(), requires_grad=self.align_weights.requires_grad),
            self.target, self.trained)


def init_probe(config: ModelConfig, target: ProbeTarget, init: str = "xavier",
               seed: int = 0) -> ProbeParams:
    d = config.d_model
    if init == "identity":
        proj = np.eye(d, dtype=np.float32)
    elif init == "xavier":
        limit = math.sqrt(6.0 / (2 * d))
        proj = np.random.default_rng(seed).uniform(-limit, limit, (d, d)).astype(np.float32)
    else:
        raise ValueError(f"unknown probe init {init!r}")
    w = None
    if target.side == "encoder":
        w = Tensor(np.zeros(config.decoder_depth * config.heads, dtype=np.float32),
                   requires_grad=True)
    return ProbeParams(Tensor(proj, requires_grad=True), w, target)


# ---------------------------------------------------------------- alignment fusion

@dataclass
class FusedAlignment:
    p: Tensor   # [d*k] head weights, softmax of w
    A: Tensor   # [B, src_len, tgt_len] (or [src_len, tgt_len] unbatched)


def fuse_alignments(w: Tensor, heads) -> FusedAlignment:
    """Mix per-head cross-attention matrices with weights ``softmax(w)``.

    ``heads`` is ``[d*k, B, tgt, src]`` (or ``[d*k, tgt, src]``) in the
    orientation attention is captured in; the fused matrix is returned
    transposed to source x target.
    """
    heads = np.asarray(heads)
    w = nx.as_tensor(w)
    n = heads.shape[0]
    if w.shape != (n,):
        raise ConfigError(f"{w.shape[0] if w.ndim else 0} alignment weights for {n} attention matrices")
    p = nx.reshape(nx.softmax_rows(nx.reshape(w, (1, n))), (n,))
    flat = Tensor(heads.reshape(n, -1).astype(w.dtype, copy=False))
    mixed = nx.reshape(nx.matmul(nx.reshape(p, (1, n)), flat), heads.shape[1:])
    return FusedAlignment(p, nx.transpose(mixed))


def project_to_target(E, A) -> Tensor:
    """``A^T @ E``: source states re-ordered onto target positions."""
    A = A.A if isinstance(A, FusedAlignment) else nx.as_tensor(A)
    E = nx.as_tensor(E)
    if A.shape[-2] != E.shape[-2]:
        raise nx.DimensionError(f"alignment has {A.shape[-2]} source rows, E has {E.shape[-2]}")
    return nx.matmul(nx.transpose(A), E)


# ---------------------------------------------------------------- features

@dataclass
class ProbeFeatures:
    """Frozen inputs of one batch for one probe target."""

    hidden: np.ndarray           # [B, src_len or tgt_len, d]
    labels: np.ndarray           # [B, tgt_len]
    heads: np.ndarray | None = None   # [d*k, B, tgt_len, src_len], encoder side only


def _require_frozen(model: TransformerModel) -> None:
    if not model.frozen:
        raise ProbeContractError("probes need a frozen model")


def extract_features(model: TransformerModel, batch: Batch, target: ProbeTarget,
                     encoder_model: TransformerModel | None = None) -> ProbeFeatures:
    """Run the frozen model in eval mode and keep what ``target`` needs.

    ``encoder_model`` substitutes the encoder whose states are probed while
    alignments still come from ``model``.
    """
    _require_frozen(model)
    target.check(model.config)
    with nx.no_grad():
        trace = forward(model, batch.src, batch.tgt_in, bypass=target.bypass)
        if target.side == "decoder":
            return ProbeFeatures(trace.decoder_layer_outputs[target.layer].data, batch.labels)
        if encoder_model is not None:
            states = encode(encoder_model, batch.src).encoder_layer_outputs
        else:
            states = trace.encoder_layer_outputs
        return ProbeFeatures(states[target.layer].data, batch.labels, trace.alignment_stack())


def probe_logits(model: TransformerModel, feats: ProbeFeatures, probe: ProbeParams,
                 record: list | None = None) -> Tensor:
    """Projection then frozen classifier; encoder features are aligned first."""
    h = Tensor(feats.hidden)
    if feats.heads is not None:
        if probe.align_weights is None:
            raise ProbeContractError("encoder probe without alignment weights")
        fused = fuse_alignments(probe.align_weights, feats.heads)
        h = project_to_target(h, fused)
        if record is not None:
            record.append((fused, feats.hidden, h.data))
    return logits(model, nx.matmul(h, probe.projection))


def probe_forward(model: TransformerModel, batch: Batch, target: ProbeTarget,
                  probe: ProbeParams) -> Tensor:
    if target.side == "encoder" and target.ablation != "none":
        raise ProbeContractError("ablation on an encoder target")
    return probe_logits(model, extract_features(model, batch, target), probe)


def probe_loss(model, feats: ProbeFeatures, probe: ProbeParams, record=None) -> Tensor:
    z = probe_logits(model, feats, probe, record)
    B, T, V = z.shape
    return nx.cross_entropy(nx.reshape(z, (B * T, V)), feats.labels.reshape(-1), 0.0, IGNORE_INDEX)


# ---------------------------------------------------------------- accuracy

def accuracy_counts(scores: np.ndarray, labels: np.ndarray) -> tuple[int, int]:
    """(correct, total) of argmax predictions over non-pad labels.

    ``np.argmax`` returns the first maximum, so ties go to the lowest id.
    """
    pred = scores.argmax(axis=-1)
    keep = labels != IGNORE_INDEX
    return int((pred == labels)[keep].sum()), int(keep.sum())


def features_accuracy(model, feats_list, probe) -> float:
    correct = total = 0
    with nx.no_grad():
        for f in feats_list:
            c, t = accuracy_counts(probe_logits(model, f, probe).data, f.labels)
            correct += c
            total += t
    return 100.0 * correct / total


def evaluate_probe(model: TransformerModel, batches: list[Batch], target: ProbeTarget,
                   probe: ProbeParams, encoder_model: TransformerModel | None = None) -> float:
    """Word translation accuracy in percent on ``batches``."""
    feats = [extract_features(model, b, target, encoder_model) for b in batches]
    return features_accuracy(model, feats, probe)


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    token_batch_budget: int = 2000
    eval_interval: int = 200
    init: str = "xavier"
    seed: int = 0


@dataclass
class ProbeRun:
    probe: ProbeParams
    dev_trace: list[tuple[int, float]]
    best_dev: float
    losses: list[float] = field(default_factory=list)


def train_probe_on_features(model: TransformerModel, train_feats: list[ProbeFeatures],
                            dev_feats: list[ProbeFeatures], target: ProbeTarget,
                            cfg: ProbeConfig, on_batch=None) -> ProbeRun:
    _require_frozen(model)
    probe = init_probe(model.config, target, cfg.init, cfg.seed)
    params = probe.parameters()
    state = AdamState()
    rng = np.random.default_rng([cfg.seed, 11])
    order: list[int] = []
    best, best_probe, trace, losses = -1.0, probe.copy(), [], []
    for step in range(1, cfg.steps + 1):
        if not order:
            order = list(rng.permutation(len(train_feats)))
        record = [] if on_batch is not None else None
        loss = probe_loss(model, train_feats[order.pop()], probe, record)
        for p in params.values():
            p.grad = None
        nx.backward(loss)
        if on_batch is not None:
            on_batch(record)
        new = adam_step({k: p.data for k, p in params.items()},
                        {k: p.grad for k, p in params.items()}, state,
                        cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        for k, p in params.items():
            p.data = new[k]
            p.grad = None
        losses.append(loss.item())
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            acc = features_accuracy(model, dev_feats, probe)
            trace.append((step, acc))
            if acc > best:
                best, best_probe = acc, probe.copy()
    best_probe.trained = True
    return ProbeRun(best_probe, trace, best, losses)


def train_probe(model: TransformerModel, corpus: Corpus, target: ProbeTarget,
                cfg: ProbeConfig = ProbeConfig(),
                encoder_model: TransformerModel | None = None, on_batch=None) -> ProbeRun:
    """Fit one probe on the training split, keep the best-dev snapshot."""
    _require_frozen(model)
    max_len = model.config.max_len
    train_b = make_batches(corpus.train, cfg.token_batch_budget, max_len)
    dev_b = make_batches(corpus.dev, cfg.token_batch_budget, max_len)
    train_f = [extract_features(model, b, target, encoder_model) for b in train_b]
    dev_f = [extract_features(model, b, target, encoder_model) for b in dev_b]
    return train_probe_on_features(model, train_f, dev_f, target, cfg, on_batch)


# ---------------------------------------------------------------- reports

@dataclass
class ProbeRow:
    side: str
    layer: int
    ablation: str
    accuracy: float
    delta: float | None


@dataclass
class ProbeReport:
    rows: list[ProbeRow]

    def get(self, side: str, layer: int, ablation: str = "none") -> ProbeRow:
        for r in self.rows:
            if (r.side, r.layer, r.ablation) == (side, layer, ablation):
                return r
        raise KeyError((side, layer, ablation))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["side", "layer", "ablation", "accuracy", "delta"])
        for r in self.rows:
            w.writerow([r.side, r.layer, r.ablation, f"{r.accuracy:.2f}",
                        "" if r.delta is None else f"{r.delta:.2f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ProbeReport":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            rows.append(ProbeRow(rec["side"], int(rec["layer"]), rec["ablation"],
                                 float(rec["accuracy"]),
                                 float(rec["delta"]) if rec["delta"] else None))
        return cls(rows)

    def to_markdown(self) -> str:
        return render_probe_table(self)


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.2f}"


def render_probe_table(report: ProbeReport) -> str:
    """Markdown with encoder Acc/Δ next to decoder Acc/Δ and both ablations."""
    enc = {r.layer: r for r in report.rows if r.side == "encoder"}
    dec = {(r.layer, r.ablation): r for r in report.rows if r.side == "decoder"}
    extra = sorted({r.side for r in report.rows} - {"encoder", "decoder"})
    layers = sorted(set(enc) | {k[0] for k in dec})
    lines = [
        "| Layer | Enc Acc | Enc Δ | Dec Acc | Dec Δ | -Self attention Acc | -Self attention Δ "
        "| -Cross attention Acc | -Cross attention Δ |",
        "|---:|---:|---:|---:|---:|---:|---:|---:|---:|",
    ]
    for layer in layers:
        e = enc.get(layer)
        cells = [str(layer), _fmt(e.accuracy) if e else "", _fmt(e.delta) if e else ""]
        for abl in ABLATIONS:
            r = dec.get((layer, abl))
            cells += [_fmt(r.accuracy) if r else "", _fmt(r.delta) if r else ""]
        lines.append("| " + " | ".join(cells) + " |")
    for side in extra:
        for r in (r for r in report.rows if r.side == side):
            lines.append(f"\n{side} layer {r.layer}: {r.accuracy:.2f}")
    return "\n".join(lines) + "\n"


def suite_targets(config: ModelConfig, ablations: bool = True,
                  base: bool = True) -> list[ProbeTarget]:
    targets = []
    if base:
        targets += [ProbeTarget("encoder", i) for i in range(config.encoder_depth + 1)]
    for j in range(config.decoder_depth + 1):
        if base:
            targets.append(ProbeTarget("decoder", j))
        if ablations and j >= 1:
            targets += [ProbeTarget("decoder", j, a) for a in ABLATIONS[1:]]
    return targets


def assemble_report(accuracies: dict[ProbeTarget, float]) -> ProbeReport:
    """Rows in fixed layer order with Δ vs the previous layer (or the unablated layer)."""
    rows = []
    for side in ("encoder", "decoder"):
        layers = sorted({t.layer for t in accuracies if t.side == side})
        for layer in layers:
            for abl in ABLATIONS:
                t = ProbeTarget(side, layer, abl) if (abl == "none" or (side == "decoder" and layer)) else None
                if t is None or t not in accuracies:
                    continue
                acc = accuracies[t]
                if abl == "none":
                    prev = ProbeTarget(side, layer - 1) if layer else None
                    delta = acc - accuracies[prev] if prev in accuracies else None
                else:
                    base = ProbeTarget(side, layer)
                    delta = acc - accuracies[base] if base in accuracies else None
                rows.append(ProbeRow(side, layer, abl, acc, delta))
    return ProbeReport(rows)


@dataclass
class SuiteResult:
    report: ProbeReport
    probes: dict[ProbeTarget, ProbeParams]


def run_probe_suite(model: TransformerModel, corpus: Corpus, cfg: ProbeConfig = ProbeConfig(),
                    ablations: bool = True, base: bool = True,
                    targets: list[ProbeTarget] | None = None) -> SuiteResult:
    """Train and test one independent probe per target; accuracies on the test split."""
    _require_frozen(model)
    targets = targets or suite_targets(model.config, ablations, base)
    test_b = make_batches(corpus.test, cfg.token_batch_budget, model.config.max_len)
    acc, probes = {}, {}
    for t in targets:
        run = train_probe(model, corpus, t, cfg)
        acc[t] = evaluate_probe(model, test_b, t, run.probe)
        probes[t] = run.probe
        log.info("probe %s: test %.2f (best dev %.2f)", t.name, acc[t], run.best_dev)
    return SuiteResult(assemble_report(acc), probes)


def random_encoder(model: TransformerModel, seed: int) -> TransformerModel:
    """A copy of ``model`` whose source embedding and encoder stack are re-drawn.

    The fresh source table lives under ``src_embed`` so the trained tied
    target embedding / classifier stays intact.
    """
    cfg = model.config
    params = dict(model.params)
    fresh = init_params([("src_embed", (cfg.vocab_size, cfg.d_model))] + encoder_param_shapes(cfg),
                        seed)
    params.update(fresh)
    other = TransformerModel(cfg, params)
    return other.freeze()


@dataclass
class RandomEncoderResult:
    acc_embedding: float
    acc_last_layer: float


def random_encoder_control(model: TransformerModel, corpus: Corpus,
                           cfg: ProbeConfig = ProbeConfig(), seed: int = 12345) -> RandomEncoderResult:
    """Probe a randomly initialised encoder, with alignments from the trained model."""
    _require_frozen(model)
    rand = random_encoder(model, seed)
    test_b = make_batches(corpus.test, cfg.token_batch_budget, model.config.max_len)
    out = []
    for layer in (0, model.config.encoder_depth):
        t = ProbeTarget("encoder", layer)
        run = train_probe(model, corpus, t, cfg, encoder_model=rand)
        out.append(evaluate_probe(model, test_b, t, run.probe, encoder_model=rand))
    return RandomEncoderResult(*out)


def probe_checkpoint_tensors(probe: ProbeParams) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in probe.parameters().items()}


def probe_from_tensors(tensors: dict[str, np.ndarray], target: ProbeTarget) -> ProbeParams:
    w = tensors.get("align_weights")
    return ProbeParams(Tensor(tensors["projection"], requires_grad=True),
                       None if w is None else Tensor(w, requires_grad=True), target, True)
