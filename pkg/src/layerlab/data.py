"""Synthetic bilingual tasks, vocabularies, batching and corpus files."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import BOS, EOS, PAD, UNK, LengthError

IGNORE_INDEX = PAD
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
TASK_KINDS = ("lexical_swap_reorder", "copy_mod_shift")


class SpecError(ValueError):
    pass


class CorpusFormatError(ValueError):
    pass


class Vocab:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise CorpusFormatError(f"vocabulary must start with {' '.join(RESERVED)}")
        if len(set(tokens)) != len(tokens):
            raise CorpusFormatError("duplicate token in vocabulary")
        for tok in tokens:
            if not tok or any(c.isspace() for c in tok):
                raise CorpusFormatError(f"invalid vocabulary token {tok!r}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def with_content(cls, content) -> "Vocab":
        return cls(list(RESERVED) + list(content))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @property
    def content_ids(self) -> range:
        return range(len(RESERVED), len(self.tokens))

    def encode(self, words) -> tuple[int, ...]:
        return tuple(self.index.get(w, UNK) for w in words)

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return cls(line.rstrip("\n") for line in f if line.strip())


@dataclass(frozen=True)
class SentencePair:
    src: tuple[int, ...]
    tgt: tuple[int, ...]
    # target position t is the translation of source position alignment[t]
    alignment: tuple[int, ...] | None = None


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "lexical_swap_reorder"
    content_vocab: int = 64
    min_len: int = 3
    max_len: int = 12
    # lexical_swap_reorder: swap each (2i, 2i+1) pair when the first id has this parity
    swap_parity: int = 0
    n_dev: int = 1000
    n_test: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise SpecError(f"unknown task kind {self.kind!r}")
        if self.content_vocab < 2:
            raise SpecError("content vocabulary needs at least two tokens for a bijection")
        if not 1 <= self.min_len <= self.max_len:
            raise SpecError("need 1 <= min_len <= max_len")
        if self.swap_parity not in (0, 1):
            raise SpecError("swap_parity must be 0 or 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Corpus:
    vocab: Vocab
    train: list[SentencePair]
    dev: list[SentencePair]
    test: list[SentencePair]
    spec: TaskSpec | None = None
    translation_table: dict[int, int] = field(default_factory=dict)

    def split(self, name: str) -> list[SentencePair]:
        return {"train": self.train, "dev": self.dev, "test": self.test}[name]


def content_names(n: int) -> list[str]:
    width = len(str(n - 1))
    return [f"w{i:0{width}d}" for i in range(n)]


def translation_table(spec: TaskSpec) -> dict[int, int]:
    """Source id -> target id word map of the task (a bijection on content ids)."""
    ids = np.arange(len(RESERVED), len(RESERVED) + spec.content_vocab)
    if spec.kind == "copy_mod_shift":
        return {int(i): int(ids[(k + 1) % len(ids)]) for k, i in enumerate(ids)}
    perm = np.random.default_rng([spec.seed, 1]).permutation(ids)
    return {int(i): int(j) for i, j in zip(ids, perm)}


def apply_rule(spec: TaskSpec, table: dict[int, int], src) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Translate ``src``; returns (target ids, target->source alignment)."""
    order = list(range(len(src)))
    if spec.kind == "lexical_swap_reorder":
        for i in range(0, len(src) - 1, 2):
            if src[i] % 2 == spec.swap_parity:
                order[i], order[i + 1] = i + 1, i
    return tuple(table[src[k]] for k in order), tuple(order)


def generate_corpus(spec: TaskSpec, n_pairs: int) -> Corpus:
    """Sample ``n_pairs`` distinct source sentences and translate them.

    The last ``n_dev + n_test`` sentences form dev and test; all splits are
    disjoint because sources are unique and targets are a function of them.
    """
    n_train = n_pairs - spec.n_dev - spec.n_test
    if n_train < 1 or spec.n_dev < 1 or spec.n_test < 1:
        raise SpecError(f"n_pairs={n_pairs} too small for dev={spec.n_dev}, test={spec.n_test}")
    space = sum(spec.content_vocab ** n for n in range(spec.min_len, spec.max_len + 1))
    if space < n_pairs:
        raise SpecError(f"only {space} distinct sentences exist; asked for {n_pairs}")
    vocab = Vocab.with_content(content_names(spec.content_vocab))
    table = translation_table(spec)
    rng = np.random.default_rng([spec.seed, 0])
    seen: set[tuple[int, ...]] = set()
    pairs: list[SentencePair] = []
    while len(pairs) < n_pairs:
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        src = tuple(int(t) + len(RESERVED) for t in rng.integers(0, spec.content_vocab, size=n))
        if src in seen:
            continue
        seen.add(src)
        tgt, align = apply_rule(spec, table, src)
        pairs.append(SentencePair(src, tgt, align))
    return Corpus(vocab, pairs[:n_train], pairs[n_train:n_train + spec.n_dev],
                  pairs[n_train + spec.n_dev:], spec, table)


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    src: np.ndarray      # [B, S] source ids + eos, padded
    tgt_in: np.ndarray   # [B, T] bos + target, padded
    labels: np.ndarray   # [B, T] target + eos, pad positions = IGNORE_INDEX
    pairs: list[SentencePair] = field(default_factory=list, repr=False)

    @property
    def src_mask(self) -> np.ndarray:
        return self.src != PAD

    @property
    def tgt_mask(self) -> np.ndarray:
        return self.tgt_in != PAD

    @property
    def n_target_tokens(self) -> int:
        return int((self.labels != IGNORE_INDEX).sum())

    def __len__(self) -> int:
        return self.src.shape[0]


def collate(pairs: list[SentencePair]) -> Batch:
    B = len(pairs)
    S = max(len(p.src) for p in pairs) + 1
    T = max(len(p.tgt) for p in pairs) + 1
    src = np.full((B, S), PAD, dtype=np.int64)
    tgt_in = np.full((B, T), PAD, dtype=np.int64)
    labels = np.full((B, T), IGNORE_INDEX, dtype=np.int64)
    for b, p in enumerate(pairs):
        src[b, : len(p.src)] = p.src
        src[b, len(p.src)] = EOS
        tgt_in[b, 0] = BOS
        tgt_in[b, 1 : len(p.tgt) + 1] = p.tgt
        labels[b, : len(p.tgt)] = p.tgt
        labels[b, len(p.tgt)] = EOS
    return Batch(src, tgt_in, labels, list(pairs))


def check_lengths(pairs, max_len: int) -> None:
    for k, p in enumerate(pairs):
        for side, seq in (("source", p.src), ("target", p.tgt)):
            if not 1 <= len(seq) <= max_len - 2:
                raise LengthError(f"pair {k}: {side} length {len(seq)} outside [1, {max_len - 2}]")


def make_batches(pairs: list[SentencePair], batch_size_tokens: int, max_len: int = 64,
                 seed: int | None = None) -> list[Batch]:
    """Length-sorted token-budget batching.

    Pairs are sorted by (target length, source length) and packed while the
    padded target size ``count * longest_target`` stays within the budget.
    A non-None ``seed`` shuffles the order of the finished batches.
    """
    if not pairs:
        raise ValueError("cannot batch an empty split")
    check_lengths(pairs, max_len)
    order = sorted(range(len(pairs)), key=lambda k: (len(pairs[k].tgt), len(pairs[k].src), k))
    groups: list[list[SentencePair]] = []
    current: list[SentencePair] = []
    longest = 0
    for k in order:
        p = pairs[k]
        grown = max(longest, len(p.tgt))
        if current and (len(current) + 1) * grown > batch_size_tokens:
            groups.append(current)
            current, grown = [], len(p.tgt)
        current.append(p)
        longest = grown
    groups.append(current)
    batches = [collate(g) for g in groups]
    if seed is not None:
        perm = np.random.default_rng(seed).permutation(len(batches))
        batches = [batches[i] for i in perm]
    return batches


# ---------------------------------------------------------------- files

def _check_token(tok: str, where: str) -> None:
    if not tok or any(c.isspace() for c in tok):
        raise CorpusFormatError(f"{where}: token {tok!r} is empty or contains whitespace")


def write_corpus(path, pairs: list[SentencePair], vocab: Vocab) -> None:
    lines = []
    for k, p in enumerate(pairs):
        src, tgt = vocab.decode(p.src), vocab.decode(p.tgt)
        for tok in src + tgt:
            _check_token(tok, f"pair {k}")
        lines.append(" ".join(src) + "\t" + " ".join(tgt) + "\n")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(lines)


def parse_corpus_line(line: str, lineno: int) -> tuple[list[str], list[str]]:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 2:
        raise CorpusFormatError(f"line {lineno}: expected exactly one tab, found {len(parts) - 1}")
    src, tgt = parts[0].split(" "), parts[1].split(" ")
    for tok in src + tgt:
        if not tok:
            raise CorpusFormatError(f"line {lineno}: empty token")
    return src, tgt


def read_corpus(path, vocab: Vocab) -> list[SentencePair]:
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            src, tgt = parse_corpus_line(line, lineno)
            pairs.append(SentencePair(vocab.encode(src), vocab.encode(tgt)))
    return pairs


def save_corpus_dir(out_dir, corpus: Corpus) -> dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = {"vocab": os.path.join(out_dir, "vocab.txt")}
    corpus.vocab.save(paths["vocab"])
    for name in ("train", "dev", "test"):
        paths[name] = os.path.join(out_dir, f"{name}.tsv")
        write_corpus(paths[name], corpus.split(name), corpus.vocab)
    if corpus.spec is not None:
        paths["task"] = os.path.join(out_dir, "task.json")
        with open(paths["task"], "w") as f:
            json.dump(corpus.spec.to_dict(), f, indent=2, sort_keys=True)
    return paths


def load_corpus_dir(path) -> Corpus:
    vocab = Vocab.load(os.path.join(path, "vocab.txt"))
    splits = {n: read_corpus(os.path.join(path, f"{n}.tsv"), vocab) for n in ("train", "dev", "test")}
    spec, table = None, {}
    task = os.path.join(path, "task.json")
    if os.path.exists(task):
        with open(task) as f:
            spec = TaskSpec(**json.load(f))
        table = translation_table(spec)
    return Corpus(vocab, splits["train"], splits["dev"], splits["test"], spec, table)
