"""Training-data plumbing: quality filtering with fixed reject ordering,
deduplication, toy tokenization with packing and masking, CoNLL-style
tagged-sentence I/O, and seeded synthetic corpora for desk-scale runs."""

from __future__ import annotations

import hashlib
import itertools
import json
import statistics
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import FormatError, InputError, ParameterError

TAG_TYPES = ("PER", "ORG", "LOC", "MISC")
BIO_LABELS = ("O",) + tuple(f"{p}-{t}" for t in TAG_TYPES for p in ("B", "I"))

REJECT_LANGUAGE = "language"
REJECT_QUALITY = "quality"
REJECT_PERPLEXITY = "perplexity"
REJECT_CATEGORY = "category"
REJECT_MISSING = "missing_metadata"
REJECT_REASONS = (REJECT_LANGUAGE, REJECT_QUALITY, REJECT_PERPLEXITY, REJECT_CATEGORY, REJECT_MISSING)


# ---------------------------------------------------------------------------
# records and filtering


@dataclass
class CorpusRecord:
    text: str
    lang: str = "en"
    lang_prob: float | None = None
    perplexity: float | None = None
    quality_flags: frozenset = frozenset()
    categories: frozenset = frozenset()


@dataclass(frozen=True)
class DedupPolicy:
    mode: str = "exact_hash"  # or "shingle"
    k: int = 5
    jaccard_threshold: float = 0.8

    def validate(self) -> None:
        if self.mode not in ("exact_hash", "shingle"):
            raise ParameterError(f"unknown dedup mode {self.mode!r}")
        if self.k < 1:
            raise ParameterError("shingle size must be >= 1")
        if not 0.0 < self.jaccard_threshold <= 1.0:
            raise ParameterError("jaccard threshold must be in (0, 1]")


@dataclass(frozen=True)
class FilterPolicy:
    min_lang_prob: float = 0.80
    min_perplexity_exclusive: float = 13.51  # scores at or below this are dropped
    banned_flags: frozenset = frozenset({"tiny", "short", "noisy"})
    banned_categories: frozenset = frozenset()
    dedup: DedupPolicy = field(default_factory=DedupPolicy)


@dataclass(frozen=True)
class FilterDecision:
    kept: bool
    reason: str | None = None


def filter_record(record: CorpusRecord, policy: FilterPolicy) -> FilterDecision:
    """Keep/reject one record; the reason reported is the FIRST failing
    check in the fixed order language, quality, perplexity, category."""
    if record.lang_prob is None:
        return FilterDecision(False, REJECT_MISSING)
    if record.lang_prob < policy.min_lang_prob:
        return FilterDecision(False, REJECT_LANGUAGE)
    if record.quality_flags is None:
        return FilterDecision(False, REJECT_MISSING)
    if set(record.quality_flags) & set(policy.banned_flags):
        return FilterDecision(False, REJECT_QUALITY)
    if record.perplexity is None:
        return FilterDecision(False, REJECT_MISSING)
    if record.perplexity <= policy.min_perplexity_exclusive:
        return FilterDecision(False, REJECT_PERPLEXITY)
    if record.categories is None:
        return FilterDecision(False, REJECT_MISSING)
    if set(record.categories) & set(policy.banned_categories):
        return FilterDecision(False, REJECT_CATEGORY)
    return FilterDecision(True)


def filter_stream(records, policy: FilterPolicy):
    """Yield kept records; returns rejection counts via the report dict in
    `filter_stream_with_report` when counts are needed."""
    for record in records:
        if filter_record(record, policy).kept:
            yield record


def filter_stream_with_report(records, policy: FilterPolicy) -> tuple[list[CorpusRecord], dict[str, int]]:
    kept = []
    report = {"kept": 0, **{r: 0 for r in REJECT_REASONS}}
    for record in records:
        decision = filter_record(record, policy)
        if decision.kept:
            kept.append(record)
            report["kept"] += 1
        else:
            report[decision.reason] += 1
    return kept, report


def write_filter_report(report: dict[str, int], path) -> None:
    with open(path, "w") as fh:
        fh.write("reason,count\n")
        fh.write(f"kept,{report['kept']}\n")
        for reason in REJECT_REASONS:
            fh.write(f"{reason},{report[reason]}\n")


# ---------------------------------------------------------------------------
# deduplication


def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


def _shingles(text: str, k: int) -> frozenset:
    words = _normalize(text).split()
    if len(words) < k:
        return frozenset([tuple(words)])
    return frozenset(tuple(words[i : i + k]) for i in range(len(words) - k + 1))


def _jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def dedup_stream(records, policy: FilterPolicy) -> list[CorpusRecord]:
    """Drop later records that duplicate earlier ones; first occurrence
    wins and input order is preserved."""
    dd = policy.dedup
    dd.validate()
    out = []
    if dd.mode == "exact_hash":
        seen = set()
        for record in records:
            digest = hashlib.sha1(_normalize(record.text).encode("utf-8")).hexdigest()
            if digest in seen:
                continue
            seen.add(digest)
            out.append(record)
        return out
    kept_shingles: list[frozenset] = []
    for record in records:
        sh = _shingles(record.text, dd.k)
        if any(_jaccard(sh, prev) >= dd.jaccard_threshold for prev in kept_shingles):
            continue
        kept_shingles.append(sh)
        out.append(record)
    return out


# ---------------------------------------------------------------------------
# record file I/O (one JSON object per line)


def read_records(path) -> list[CorpusRecord]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError("record_parse", f"line {lineno}: {e}") from e
            out.append(
                CorpusRecord(
                    text=obj.get("text", ""),
                    lang=obj.get("lang", "en"),
                    lang_prob=obj.get("lang_prob"),
                    perplexity=obj.get("ppl"),
                    quality_flags=frozenset(obj.get("flags", [])),
                    categories=frozenset(obj.get("categories", [])),
                )
            )
    return out


def write_records(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "text": r.text,
                        "lang": r.lang,
                        "lang_prob": r.lang_prob,
                        "ppl": r.perplexity,
                        "flags": sorted(r.quality_flags),
                        "categories": sorted(r.categories),
                    },
                    sort_keys=True,
                )
                + "\n"
            )


# ---------------------------------------------------------------------------
# toy tokenizer


class ToyTokenizer:
    """Whitespace tokenizer over a closed vocabulary with an unknown token.
    Ids 0..3 are reserved: <pad>, <unk>, <sep>, <mask>."""

    SPECIALS = ("<pad>", "<unk>", "<sep>", "<mask>")
    PAD, UNK, SEP, MASK = 0, 1, 2, 3

    def __init__(self, words: list[str]):
        self.words = list(words)
        self._ids = {w: i + len(self.SPECIALS) for i, w in enumerate(self.words)}

    @classmethod
    def build(cls, texts, max_vocab: int | None = None) -> "ToyTokenizer":
        """Closed vocabulary by descending frequency (ties alphabetical)."""
        counts: dict[str, int] = {}
        for text in texts:
            for w in text.split():
                counts[w] = counts.get(w, 0) + 1
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        if max_vocab is not None:
            ranked = ranked[: max(0, max_vocab - len(cls.SPECIALS))]
        return cls(ranked)

    @property
    def vocab_size(self) -> int:
        return len(self.SPECIALS) + len(self.words)

    def encode(self, text: str) -> list[int]:
        return [self._ids.get(w, self.UNK) for w in text.split()]

    def decode_id(self, token_id: int) -> str:
        if token_id < len(self.SPECIALS):
            return self.SPECIALS[token_id]
        return self.words[token_id - len(self.SPECIALS)]


@dataclass(frozen=True)
class MaskPolicy:
    """Select `rate` of maskable positions; of those, replace with the mask
    token / a random token / keep unchanged in the given proportions."""

    rate: float = 0.15
    mask_frac: float = 0.8
    random_frac: float = 0.1

    def validate(self) -> None:
        if not 0.0 <= self.rate <= 1.0:
            raise ParameterError("mask rate must be in [0, 1]")
        if self.mask_frac < 0 or self.random_frac < 0 or self.mask_frac + self.random_frac > 1.0:
            raise ParameterError("mask/random fractions must be nonnegative and sum to <= 1")


def tokenize_pack(
    texts,
    tokenizer: ToyTokenizer,
    seq_len: int,
    mask_policy: MaskPolicy,
    seed: int,
) -> list[tuple[np.ndarray, list[tuple[int, int]]]]:
    """Encode texts, join them with separator tokens, chunk to exactly
    `seq_len` (remainder dropped), and apply seeded masking.

    Returns (token_ids[seq_len], targets) per chunk where each target is
    (position, original token id).
    """
    mask_policy.validate()
    if seq_len < 1:
        raise ParameterError("seq_len must be >= 1")
    rng = nc.make_rng(seed)
    flat: list[int] = []
    for text in texts:
        flat.extend(tokenizer.encode(text))
        flat.append(ToyTokenizer.SEP)
    chunks = []
    n_chunks = len(flat) // seq_len
    specials = ToyTokenizer.SEP
    for c in range(n_chunks):
        ids = np.array(flat[c * seq_len : (c + 1) * seq_len], dtype=np.int64)
        targets: list[tuple[int, int]] = []
        if mask_policy.rate > 0:
            pick = rng.random(seq_len) < mask_policy.rate
            pick &= ids != specials
            rolls = rng.random(seq_len)
            for pos in np.nonzero(pick)[0]:
                orig = int(ids[pos])
                roll = rolls[pos]
                if roll < mask_policy.mask_frac:
                    ids[pos] = ToyTokenizer.MASK
                elif roll < mask_policy.mask_frac + mask_policy.random_frac:
                    ids[pos] = int(rng.integers(len(ToyTokenizer.SPECIALS), tokenizer.vocab_size))
                targets.append((int(pos), orig))
        chunks.append((ids, targets))
    return chunks


def mlm_batches(
    texts,
    tokenizer: ToyTokenizer,
    seq_len: int,
    mask_policy: MaskPolicy,
    seed: int,
    batch_size: int,
    epochs: int | None = None,
):
    """Batched masked chunks; masking is re-rolled each epoch from a
    derived seed. Infinite when `epochs` is None; incomplete trailing
    batches are dropped."""
    texts = list(texts)
    if not texts:
        return
    counter = itertools.count() if epochs is None else range(epochs)
    for epoch in counter:
        chunks = tokenize_pack(texts, tokenizer, seq_len, mask_policy, nc.derive_seed(seed, epoch))
        for start in range(0, len(chunks) - batch_size + 1, batch_size):
            group = chunks[start : start + batch_size]
            ids = np.stack([g[0] for g in group])
            targets = [(b, pos, tok) for b, g in enumerate(group) for pos, tok in g[1]]
            yield ids, targets


# ---------------------------------------------------------------------------
# tagged sentences (CoNLL-style)


@dataclass
class TaggedSentence:
    tokens: list[str]
    tags: list[str]

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise InputError("tokens and tags must have equal length")


@dataclass
class ConllData:
    sentences: list[TaggedSentence]
    repairs: int  # stray I-X transitions promoted to B-X during load


def repair_bio(tags: list[str]) -> tuple[list[str], int]:
    """Promote I-X tags that do not continue a same-type span to B-X."""
    fixed = list(tags)
    repairs = 0
    prev_type = None
    for i, tag in enumerate(fixed):
        if tag.startswith("I-"):
            t = tag[2:]
            if prev_type != t:
                fixed[i] = "B-" + t
                repairs += 1
            prev_type = t
        elif tag.startswith("B-"):
            prev_type = tag[2:]
        else:
            prev_type = None
    return fixed, repairs


def load_conll(path) -> ConllData:
    """Parse token-per-line data (tag in the final column, blank lines
    between sentences). Invalid BIO transitions are repaired and counted."""
    sentences: list[TaggedSentence] = []
    repairs = 0
    tokens: list[str] = []
    tags: list[str] = []

    def flush():
        nonlocal repairs
        if tokens:
            fixed, n = repair_bio(tags)
            repairs += n
            sentences.append(TaggedSentence(list(tokens), fixed))
            tokens.clear()
            tags.clear()

    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                flush()
                continue
            if line.startswith("-DOCSTART-"):
                continue
            cols = line.split()
            if len(cols) < 2:
                raise FormatError("conll_parse", f"line {lineno}: no tag column in {line!r}")
            token, tag = cols[0], cols[-1]
            if tag not in BIO_LABELS:
                raise FormatError("conll_parse", f"line {lineno}: unknown tag {tag!r}")
            tokens.append(token)
            tags.append(tag)
    flush()
    return ConllData(sentences=sentences, repairs=repairs)


def write_conll(sentences, path) -> None:
    with open(path, "w") as fh:
        for sent in sentences:
            for token, tag in zip(sent.tokens, sent.tags):
                fh.write(f"{token} {tag}\n")
            fh.write("\n")


def ner_batches(
    sentences,
    tokenizer: ToyTokenizer,
    batch_size: int,
    max_len: int,
    seed: int = 0,
    epochs: int | None = 1,
    shuffle: bool = True,
    truncate: bool = True,
):
    """Batched (token_ids, tag targets) pairs padded per batch.

    Sequences beyond `max_len` are truncated when `truncate` is set and
    rejected otherwise. Targets are (batch, position, tag index) triples
    for real tokens only; padding carries no target.
    """
    sentences = list(sentences)
    if not sentences:
        return
    tag_ids = {tag: i for i, tag in enumerate(BIO_LABELS)}
    counter = itertools.count() if epochs is None else range(epochs)
    for epoch in counter:
        order = np.arange(len(sentences))
        if shuffle:
            nc.make_rng(seed, 7, epoch).shuffle(order)
        for start in range(0, len(sentences) - batch_size + 1, batch_size):
            group = [sentences[i] for i in order[start : start + batch_size]]
            trimmed = []
            for s in group:
                if len(s.tokens) > max_len:
                    if not truncate:
                        raise InputError(f"sentence of length {len(s.tokens)} exceeds max_len {max_len}")
                    trimmed.append((s.tokens[:max_len], s.tags[:max_len]))
                else:
                    trimmed.append((s.tokens, s.tags))
            width = max(len(t) for t, _ in trimmed)
            ids = np.full((len(trimmed), width), ToyTokenizer.PAD, dtype=np.int64)
            targets = []
            for b, (toks, tags) in enumerate(trimmed):
                ids[b, : len(toks)] = tokenizer.encode(" ".join(toks))
                targets.extend((b, pos, tag_ids[tag]) for pos, tag in enumerate(tags))
            yield ids, targets


# ---------------------------------------------------------------------------
# synthetic corpora


def synth_mlm_records(size: int, seed: int, vocab: int = 32, min_len: int = 40, max_len: int = 90) -> list[CorpusRecord]:
    """Markov-chain token sequences with long-range copy dependencies
    (positions repeat an earlier token at offsets up to half a sequence),
    wrapped in clean filter metadata."""
    if size < 1:
        raise ParameterError("size must be >= 1")
    rng = nc.make_rng(seed)
    words = [f"w{i:02d}" for i in range(vocab)]
    records = []
    for _ in range(size):
        n = int(rng.integers(min_len, max_len + 1))
        seq = np.empty(n, dtype=np.int64)
        seq[0] = rng.integers(0, vocab)
        rolls = rng.random(n)
        for i in range(1, n):
            prev = seq[i - 1]
            if rolls[i] < 0.55:
                seq[i] = (prev * 7 + 1) % vocab
            elif rolls[i] < 0.85:
                seq[i] = (prev * 3 + 2) % vocab
            else:
                seq[i] = rng.integers(0, vocab)
        for _ in range(max(1, n // 8)):
            i = int(rng.integers(0, n))
            delta = int(rng.integers(1, max(2, n // 2)))
            if i + delta < n:
                seq[i + delta] = seq[i]
        records.append(
            CorpusRecord(
                text=" ".join(words[t] for t in seq),
                lang="en",
                lang_prob=1.0,
                perplexity=float(rng.uniform(50.0, 200.0)),
            )
        )
    return records


_NER_LEXICON = {
    "B-PER": [f"pname{i}" for i in range(8)],
    "I-PER": [f"psur{i}" for i in range(8)],
    "B-ORG": [f"orgco{i}" for i in range(8)],
    "I-ORG": [f"orgunit{i}" for i in range(6)],
    "B-LOC": [f"city{i}" for i in range(8)],
    "I-LOC": [f"region{i}" for i in range(4)],
    "B-MISC": [f"miscv{i}" for i in range(6)],
    "I-MISC": [f"miscx{i}" for i in range(4)],
    "O": [f"word{i:02d}" for i in range(40)],
}


def ner_lexicon() -> dict[str, list[str]]:
    """Surface-form lexicons; each token type maps to exactly one tag."""
    return {k: list(v) for k, v in _NER_LEXICON.items()}


def synth_ner_sentences(
    size: int,
    seed: int,
    over_threshold_frac: float = 0.35,
    length_threshold: int = 512,
    sigma: float = 1.0,
) -> list[TaggedSentence]:
    """Lexicon-tagged sentences with log-normal lengths tuned so that
    `over_threshold_frac` of them exceed `length_threshold` tokens."""
    if size < 1:
        raise ParameterError("size must be >= 1")
    if not 0.0 < over_threshold_frac < 1.0:
        raise ParameterError("over_threshold_frac must be in (0, 1)")
    mu = float(np.log(length_threshold)) - sigma * statistics.NormalDist().inv_cdf(1.0 - over_threshold_frac)
    rng = nc.make_rng(seed)
    sentences = []
    for _ in range(size):
        n = max(3, int(round(rng.lognormal(mu, sigma))))
        tokens: list[str] = []
        tags: list[str] = []
        while len(tokens) < n:
            if rng.random() < 0.25:
                t = TAG_TYPES[int(rng.integers(0, len(TAG_TYPES)))]
                tokens.append(_NER_LEXICON[f"B-{t}"][int(rng.integers(0, len(_NER_LEXICON[f'B-{t}'])))])
                tags.append(f"B-{t}")
                tail = int(rng.integers(0, 3))
                for _ in range(tail):
                    if len(tokens) >= n:
                        break
                    pool = _NER_LEXICON[f"I-{t}"]
                    tokens.append(pool[int(rng.integers(0, len(pool)))])
                    tags.append(f"I-{t}")
            else:
                run = int(rng.integers(2, 9))
                pool = _NER_LEXICON["O"]
                for _ in range(run):
                    if len(tokens) >= n:
                        break
                    tokens.append(pool[int(rng.integers(0, len(pool)))])
                    tags.append("O")
        sentences.append(TaggedSentence(tokens[:n], tags[:n]))
    return sentences


def synth_corpus(kind: str, size: int, seed: int, **kwargs):
    """Dispatch to the mlm_toy / ner_toy generators."""
    if kind == "mlm_toy":
        return synth_mlm_records(size, seed, **kwargs)
    if kind == "ner_toy":
        return synth_ner_sentences(size, seed, **kwargs)
    raise ParameterError(f"unknown synthetic corpus kind {kind!r}")
