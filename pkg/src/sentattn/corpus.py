"""Tokenisation, sentence partitions, synthetic summarisation data and JSONL I/O."""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
TERMINAL = "."


class CorpusError(ValueError):
    pass


@dataclass
class Vocab:
    """Dense token<->id map; ids 0..3 are PAD, BOS, EOS, UNK."""

    itos: list[str]
    stoi: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.itos[:4]) != RESERVED:
            raise CorpusError("vocab must start with the reserved tokens")
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise CorpusError("duplicate token in vocab")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    @property
    def terminal_id(self) -> int:
        """Id of the sentence-terminal marker (UNK if the corpus never used it)."""
        return self.id(TERMINAL)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def to_json(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_json(cls, items: Sequence[str]) -> "Vocab":
        return cls(list(items))


@dataclass(frozen=True)
class SentencePartition:
    lengths: tuple[int, ...]

    def __post_init__(self):
        if len(self.lengths) < 1:
            raise CorpusError("partition needs at least one sentence")
        if any(j < 1 for j in self.lengths):
            raise CorpusError(f"sentence lengths must be >= 1, got {list(self.lengths)}")

    @classmethod
    def from_lengths(cls, lengths: Iterable[int], n_tokens: int | None = None) -> "SentencePartition":
        part = cls(tuple(int(j) for j in lengths))
        if n_tokens is not None and part.n_tokens != n_tokens:
            raise CorpusError(f"partition covers {part.n_tokens} tokens but sequence has {n_tokens}")
        return part

    @property
    def n_sentences(self) -> int:
        return len(self.lengths)

    @property
    def n_tokens(self) -> int:
        return sum(self.lengths)

    @property
    def mean_length(self) -> float:
        return self.n_tokens / self.n_sentences

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.lengths)]).astype(np.int64)

    def sentence_ids(self) -> np.ndarray:
        """Sentence index (0-based) of every token."""
        return np.repeat(np.arange(self.n_sentences), self.lengths)

    def token_indices(self, sentences: Iterable[int]) -> np.ndarray:
        """Token positions of the given 0-based sentences, in order."""
        off = self.offsets
        parts = [np.arange(off[i], off[i + 1]) for i in sentences]
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


@dataclass(frozen=True)
class SummaryExample:
    sentences: tuple[str, ...]
    summary: str
    salient: tuple[int, ...] | None = None  # 1-based

    def __post_init__(self):
        if not self.sentences:
            raise CorpusError("document has no sentences")
        if not self.summary_tokens:
            raise CorpusError("summary must contain at least one token")
        for i, s in enumerate(self.sentences):
            if not whitespace_tokens(s):
                raise CorpusError(f"sentence {i + 1} has no tokens")
        if self.salient is not None:
            n1 = len(self.sentences)
            if len(set(self.salient)) != len(self.salient) or any(not 1 <= i <= n1 for i in self.salient):
                raise CorpusError(f"salient indices {list(self.salient)} invalid for {n1} sentences")

    @property
    def tokens(self) -> list[str]:
        return [t for s in self.sentences for t in whitespace_tokens(s)]

    @property
    def partition(self) -> SentencePartition:
        return SentencePartition.from_lengths(len(whitespace_tokens(s)) for s in self.sentences)

    @property
    def summary_tokens(self) -> list[str]:
        return whitespace_tokens(self.summary)

    def to_record(self) -> dict:
        rec = {"sentences": list(self.sentences), "summary": self.summary}
        if self.salient is not None:
            rec["salient"] = list(self.salient)
        return rec


@dataclass(frozen=True)
class EncodedExample:
    """Id-level view of a :class:`SummaryExample`; ``salient`` is 0-based here."""

    doc: np.ndarray
    part: SentencePartition
    summary: np.ndarray
    salient: tuple[int, ...] | None = None

    @property
    def M(self) -> int:
        return len(self.summary)


def whitespace_tokens(text: str) -> list[str]:
    return text.lower().split()


_SPLIT_RE = re.compile(r"(?<=[.!?])\s+")


def split_sentences(text: str) -> list[str]:
    """Split after '.', '!' or '?' followed by whitespace; no abbreviation handling."""
    text = text.strip()
    if not text:
        raise CorpusError("empty document")
    return [s for s in _SPLIT_RE.split(text) if s]


def tokenize(sentence: str, vocab: Vocab) -> list[int]:
    return [vocab.id(t) for t in whitespace_tokens(sentence)]


def build_vocab(corpus: Sequence[str], max_size: int) -> Vocab:
    """Keep the ``max_size - 4`` most frequent tokens; ties go to the lexicographically smaller."""
    if max_size < len(RESERVED) + 1:
        raise CorpusError(f"max_size {max_size} leaves no room beyond the {len(RESERVED)} reserved ids")
    if not corpus:
        raise CorpusError("empty corpus")
    counts = Counter(t for doc in corpus for t in whitespace_tokens(doc))
    for r in RESERVED:
        counts.pop(r, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(list(RESERVED) + [t for t, _ in ranked[: max_size - len(RESERVED)]])


def encode_example(ex: SummaryExample, vocab: Vocab) -> EncodedExample:
    doc = np.array([vocab.id(t) for t in ex.tokens], dtype=np.int64)
    summ = np.array([vocab.id(t) for t in ex.summary_tokens], dtype=np.int64)
    salient = None if ex.salient is None else tuple(i - 1 for i in ex.salient)
    return EncodedExample(doc, ex.partition, summ, salient)


def vocab_for(examples: Sequence[SummaryExample], max_size: int = 100_000) -> Vocab:
    corpus = [" ".join(ex.sentences) + " " + ex.summary for ex in examples]
    return build_vocab(corpus, max_size)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings.

    Content words are split into a plain lexicon and a key lexicon; salient
    sentences draw their words from the key lexicon, which is what makes the
    designated sentences recoverable from the document alone. Sentence lengths
    count the trailing '.' marker.
    """

    num_examples: int
    n_sentences: tuple[int, int] = (12, 12)
    sentence_len: tuple[int, int] = (4, 6)
    salient_count: int = 3
    vocab_size: int = 120
    noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        n1 = _as_range(self.n_sentences)
        jr = _as_range(self.sentence_len)
        object.__setattr__(self, "n_sentences", n1)
        object.__setattr__(self, "sentence_len", jr)
        if self.num_examples < 1:
            raise CorpusError("num_examples must be >= 1")
        if n1[0] < 1 or n1[0] > n1[1]:
            raise CorpusError(f"infeasible sentence-count range {n1}")
        if jr[0] < 2 or jr[0] > jr[1]:
            raise CorpusError(f"infeasible sentence-length range {jr} (each sentence needs a word and '.')")
        if not 1 <= self.salient_count <= n1[0]:
            raise CorpusError(f"salient_count {self.salient_count} must lie in [1, {n1[0]}]")
        if self.vocab_size < 2:
            raise CorpusError("vocab_size must be >= 2 (plain and key lexicons)")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise CorpusError("noise_rate must lie in [0, 1]")


def _as_range(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    lo, hi = v
    return int(lo), int(hi)


def _words(vocab_size: int) -> tuple[list[str], list[str]]:
    half = vocab_size // 2
    plain = [f"w{i}" for i in range(half)]
    key = [f"k{i}" for i in range(vocab_size - half)]
    return plain, key


def generate_example(spec: SyntheticSpec, index: int) -> SummaryExample:
    rng = np.random.default_rng([spec.seed, index])
    plain, key = _words(spec.vocab_size)
    everything = plain + key
    n1 = int(rng.integers(spec.n_sentences[0], spec.n_sentences[1] + 1))
    salient = sorted(rng.choice(n1, size=spec.salient_count, replace=False).tolist())
    sentences = []
    for i in range(n1):
        j = int(rng.integers(spec.sentence_len[0], spec.sentence_len[1] + 1))
        lex = key if i in salient else plain
        words = [lex[w] for w in rng.integers(0, len(lex), size=j - 1)]
        sentences.append(" ".join(words + [TERMINAL]))
    summary = " ".join(sentences[i] for i in salient).split()
    flip = rng.random(len(summary)) < spec.noise_rate
    repl = rng.integers(0, len(everything), size=len(summary))
    summary = [everything[r] if f else t for t, f, r in zip(summary, flip, repl)]
    return SummaryExample(tuple(sentences), " ".join(summary), tuple(i + 1 for i in salient))


def generate_synthetic_dataset(spec: SyntheticSpec) -> list[SummaryExample]:
    return [generate_example(spec, i) for i in range(spec.num_examples)]


def dataset_statistics(examples: Sequence[SummaryExample]) -> dict:
    """Corpus averages in the N, N1, M, N/M layout."""
    n = np.array([ex.partition.n_tokens for ex in examples], dtype=float)
    n1 = np.array([ex.partition.n_sentences for ex in examples], dtype=float)
    m = np.array([len(ex.summary_tokens) for ex in examples], dtype=float)
    return {"examples": len(examples), "N": float(n.mean()), "N1": float(n1.mean()),
            "M": float(m.mean()), "N/M": float((n / m).mean())}


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_dataset(examples: Iterable[SummaryExample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), ensure_ascii=False) + "\n")


def _parse_record(rec, lineno: int) -> SummaryExample:
    if not isinstance(rec, dict):
        raise CorpusError(f"line {lineno}: record must be a JSON object")
    for key in ("sentences", "summary"):
        if key not in rec:
            raise CorpusError(f"line {lineno}: missing field {key!r}")
    sents = rec["sentences"]
    if not isinstance(sents, list) or not all(isinstance(s, str) for s in sents):
        raise CorpusError(f"line {lineno}: 'sentences' must be a list of strings")
    if not isinstance(rec["summary"], str):
        raise CorpusError(f"line {lineno}: 'summary' must be a string")
    salient = rec.get("salient")
    if salient is not None:
        if not isinstance(salient, list) or not all(isinstance(i, int) for i in salient):
            raise CorpusError(f"line {lineno}: 'salient' must be a list of integers")
        salient = tuple(salient)
    try:
        return SummaryExample(tuple(sents), rec["summary"], salient)
    except CorpusError as err:
        raise CorpusError(f"line {lineno}: {err}") from None


def load_dataset(path) -> list[SummaryExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise CorpusError(f"line {lineno}: invalid JSON ({err.msg})") from None
            out.append(_parse_record(rec, lineno))
    return out
