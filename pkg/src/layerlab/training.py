"""Base-model training: warmup schedule, Adam, checkpoints and averaging."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .data import IGNORE_INDEX, Batch, SentencePair, make_batches
from .model import ModelConfig, TransformerModel, build_model, forward, logits

log = logging.getLogger(__name__)

MAGIC = b"LLAB1"
META_STEP = "__meta__.step"
META_CONFIG = "__meta__.config"


class FrozenModelError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4000
    warmup_steps: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    label_smoothing: float = 0.1
    token_batch_budget: int = 2000
    checkpoint_interval: int = 500
    checkpoints_to_average: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.checkpoints_to_average < 1:
            raise ValueError("checkpoints_to_average must be >= 1")
        if self.steps < 0 or self.checkpoint_interval < 1:
            raise ValueError("steps must be >= 0 and checkpoint_interval >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# the full-scale recipe, kept as a preset
FULL_SCALE = TrainConfig(steps=100_000, warmup_steps=8000, token_batch_budget=25_000,
                         checkpoint_interval=1500, checkpoints_to_average=5)


def lr_schedule(step: int, warmup: int, d_model: int) -> float:
    """Inverse-sqrt schedule with linear warmup; peaks at ``step == warmup``."""
    if step < 1:
        raise ValueError("step counts from 1")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.98,
              eps: float = 1e-9) -> dict[str, np.ndarray]:
    """Bias-corrected Adam. Returns new arrays; ``state`` is updated in place.

    Names without a gradient are passed through untouched.
    """
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise nx.DimensionError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        out[name] = (p - update).astype(p.dtype)
    return out


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    step: int = 0
    config: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: TransformerModel, step: int) -> "Checkpoint":
        return cls(model.state_dict(), step, model.config.to_dict())

    def to_model(self) -> TransformerModel:
        model = build_model(ModelConfig.from_dict(self.config))
        model.load_state_dict(self.tensors)
        return model


def _encode_meta(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    blob = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    return {
        META_STEP: np.array([ckpt.step], dtype=np.float32),
        META_CONFIG: np.frombuffer(blob, dtype=np.uint8).astype(np.float32),
    }


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialise to the LLAB1 container (entries sorted by UTF-8 name)."""
    entries = dict(ckpt.tensors)
    entries.update(_encode_meta(ckpt))
    parts = [MAGIC, struct.pack("<I", len(entries))]
    for name in sorted(entries, key=lambda n: n.encode("utf-8")):
        arr = np.asarray(entries[name], dtype="<f4", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:5] != MAGIC:
        raise CheckpointError("not an LLAB1 checkpoint (bad magic)")
    (count,) = struct.unpack_from("<I", buf, 5)
    off = 9
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if off + 4 * size > len(buf):
                raise CheckpointError(f"truncated payload for tensor {name}")
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            if name in tensors:
                raise CheckpointError(f"duplicate tensor name {name}")
            tensors[name] = arr.astype(np.float32)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    step_arr = tensors.pop(META_STEP, np.zeros(1, dtype=np.float32))
    cfg_arr = tensors.pop(META_CONFIG, None)
    config = {}
    if cfg_arr is not None:
        config = json.loads(cfg_arr.astype(np.uint8).tobytes().decode("utf-8"))
    return Checkpoint(tensors, int(step_arr[0]), config)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())


def average_checkpoints(checkpoints, n_last: int | None = None) -> Checkpoint:
    """Elementwise mean of the last ``n_last`` checkpoints (paths or objects)."""
    ckpts = [load_checkpoint(c) if isinstance(c, (str, os.PathLike)) else c for c in checkpoints]
    if n_last is not None:
        if n_last < 1 or n_last > len(ckpts):
            raise CheckpointError(f"asked to average {n_last} of {len(ckpts)} checkpoints")
        ckpts = ckpts[-n_last:]
    if not ckpts:
        raise CheckpointError("no checkpoints to average")
    ref = ckpts[0].tensors
    for c in ckpts[1:]:
        if set(c.tensors) != set(ref):
            odd = sorted(set(c.tensors) ^ set(ref))
            raise CheckpointError(f"tensor name mismatch: {odd[0]}")
        for name, arr in c.tensors.items():
            if arr.shape != ref[name].shape:
                raise CheckpointError(f"tensor {name}: shape {arr.shape} vs {ref[name].shape}")
    mean = {}
    for name in ref:
        acc = np.zeros(ref[name].shape, dtype=np.float64)
        for c in ckpts:
            acc += c.tensors[name]
        mean[name] = (acc / len(ckpts)).astype(np.float32)
    return Checkpoint(mean, ckpts[-1].step, dict(ckpts[-1].config))


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    model: TransformerModel
    checkpoints: list[Checkpoint]
    curve: list[tuple[int, float, float]]
    dev_accuracy: float | None = None

    def averaged(self, n_last: int) -> TransformerModel:
        if not self.checkpoints:
            return self.model
        n = min(n_last, len(self.checkpoints))
        return average_checkpoints(self.checkpoints, n).to_model()


def batch_loss(model: TransformerModel, batch: Batch, label_smoothing: float,
               train: bool, rng=None) -> nx.Tensor:
    trace = forward(model, batch.src, batch.tgt_in, train=train, rng=rng)
    z = logits(model, trace.decoder_layer_outputs[-1])
    B, T, V = z.shape
    return nx.cross_entropy(nx.reshape(z, (B * T, V)), batch.labels.reshape(-1),
                            label_smoothing, IGNORE_INDEX)


def teacher_forced_accuracy(model: TransformerModel, batches: list[Batch]) -> float:
    """Next-token accuracy (percent) over non-pad labels in eval mode."""
    correct = total = 0
    with nx.no_grad():
        for b in batches:
            trace = forward(model, b.src, b.tgt_in)
            pred = logits(model, trace.decoder_layer_outputs[-1]).data.argmax(axis=-1)
            keep = b.labels != IGNORE_INDEX
            correct += int((pred == b.labels)[keep].sum())
            total += int(keep.sum())
    return 100.0 * correct / total


def train(model: TransformerModel, pairs: list[SentencePair], cfg: TrainConfig,
          dev: list[SentencePair] | None = None, out_dir=None) -> TrainResult:
    """Train ``model`` in place; write checkpoints and the loss curve if ``out_dir``."""
    if model.frozen:
        raise FrozenModelError("refusing to train a frozen model")
    rng = np.random.default_rng([cfg.seed, 7])
    batches = make_batches(pairs, cfg.token_batch_budget, model.config.max_len)
    state = AdamState()
    curve: list[tuple[int, float, float]] = []
    checkpoints: list[Checkpoint] = []
    order: list[int] = []
    names = list(model.params)
    for step in range(1, cfg.steps + 1):
        if not order:
            order = list(rng.permutation(len(batches)))
        batch = batches[order.pop()]
        lr = lr_schedule(step, cfg.warmup_steps, model.config.d_model)
        try:
            loss = batch_loss(model, batch, cfg.label_smoothing, True, rng)
            if not math.isfinite(loss.item()):
                raise nx.NonFiniteError("loss")
            model.zero_grad()
            nx.backward(loss)
        except nx.NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite values at step {step}: {exc}") from exc
        grads = {n: model.params[n].grad for n in names if model.params[n].grad is not None}
        new = adam_step({n: model.params[n].data for n in names}, grads, state, lr,
                        cfg.beta1, cfg.beta2, cfg.adam_eps)
        for n in names:
            model.params[n].data = new[n]
        model.zero_grad()
        curve.append((step, loss.item(), lr))
        if step % cfg.checkpoint_interval == 0 or step == cfg.steps:
            ckpt = Checkpoint.from_model(model, step)
            if not checkpoints or checkpoints[-1].step != step:
                checkpoints.append(ckpt)
            if out_dir is not None:
                save_checkpoint(os.path.join(out_dir, f"checkpoint_{step:06d}.llab"), ckpt)
            log.info("step %d loss %.4f lr %.2e", step, loss.item(), lr)
    dev_acc = None
    if dev:
        dev_acc = teacher_forced_accuracy(model, make_batches(dev, cfg.token_batch_budget,
                                                              model.config.max_len))
    if out_dir is not None:
        write_curve(os.path.join(out_dir, "loss.csv"), curve)
    return TrainResult(model, checkpoints, curve, dev_acc)


def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in curve:
            w.writerow([step, f"{loss:.6f}", f"{lr:.8e}"])
