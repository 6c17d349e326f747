"""Entity-level NER scoring, dataset statistics, and the retention /
speedup ratio arithmetic used in cost-performance summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import BIO_LABELS, TAG_TYPES, TaggedSentence
from .errors import InputError

STATS_ROWS = ("mean", "std. dev.", "min", "25%", "50%", "75%", "max")


# ---------------------------------------------------------------------------
# span decoding and F1


@dataclass(frozen=True)
class NerSpan:
    start: int  # inclusive token index
    end: int  # exclusive
    tag: str


def decode_bio(tags) -> list[NerSpan]:
    """Maximal spans from a BIO sequence. B-X opens a span, I-X continues a
    same-type span, and a stray I-X (after O or a different type) opens a
    new span; O closes."""
    tags = list(tags)
    spans: list[NerSpan] = []
    start = None
    current = None
    for i, tag in enumerate(tags):
        if tag not in BIO_LABELS:
            raise InputError(f"unknown BIO label {tag!r}")
        if tag == "O":
            if current is not None:
                spans.append(NerSpan(start, i, current))
                current = None
            continue
        prefix, t = tag.split("-", 1)
        if prefix == "B" or current != t:
            if current is not None:
                spans.append(NerSpan(start, i, current))
            start, current = i, t
    if current is not None:
        spans.append(NerSpan(start, len(tags), current))
    return spans


@dataclass(frozen=True)
class TagScore:
    precision: float
    recall: float
    f1: float
    support: int  # gold spans


def _prf(tp: int, pred: int, gold: int) -> TagScore:
    precision = tp / pred if pred else 0.0
    recall = tp / gold if gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return TagScore(precision, recall, f1, gold)


def entity_f1(pred_tags, gold_tags) -> dict[str, TagScore]:
    """Per-tag precision/recall/F1 plus micro-averaged overall under the
    key "ALL". A predicted span counts only when start, end AND tag all
    match a gold span.

    Accepts one aligned tag sequence or a list of aligned sequences.
    """
    if pred_tags and isinstance(pred_tags[0], str):
        pred_tags, gold_tags = [pred_tags], [gold_tags]
    if len(pred_tags) != len(gold_tags):
        raise InputError("prediction and gold sets differ in sentence count")
    tp = {t: 0 for t in TAG_TYPES}
    pred_n = {t: 0 for t in TAG_TYPES}
    gold_n = {t: 0 for t in TAG_TYPES}
    for pred, gold in zip(pred_tags, gold_tags):
        if len(pred) != len(gold):
            raise InputError("prediction and gold sequences differ in length")
        pset = set(decode_bio(pred))
        gset = set(decode_bio(gold))
        for span in pset:
            pred_n[span.tag] += 1
        for span in gset:
            gold_n[span.tag] += 1
        for span in pset & gset:
            tp[span.tag] += 1
    scores = {t: _prf(tp[t], pred_n[t], gold_n[t]) for t in TAG_TYPES}
    scores["ALL"] = _prf(sum(tp.values()), sum(pred_n.values()), sum(gold_n.values()))
    return scores


def write_f1_report(scores: dict[str, TagScore], path) -> None:
    with open(path, "w") as fh:
        fh.write("tag,precision,recall,f1,support\n")
        for tag in (*TAG_TYPES, "ALL"):
            s = scores[tag]
            fh.write(f"{tag},{s.precision:.6f},{s.recall:.6f},{s.f1:.6f},{s.support}\n")


# ---------------------------------------------------------------------------
# dataset statistics


@dataclass(frozen=True)
class LengthStats:
    mean: float
    std_dev: float
    min: float
    p25: float
    p50: float
    p75: float
    max: float


def length_stats(lengths, sample_std: bool = False) -> LengthStats:
    """Summary statistics over token counts. Population standard deviation
    by default; percentiles interpolate linearly between closest ranks."""
    arr = np.asarray(list(lengths), dtype=np.float64)
    if arr.size == 0:
        raise InputError("length_stats needs a non-empty list")
    p25, p50, p75 = np.percentile(arr, [25, 50, 75])
    return LengthStats(
        mean=float(arr.mean()),
        std_dev=float(arr.std(ddof=1 if sample_std else 0)),
        min=float(arr.min()),
        p25=float(p25),
        p50=float(p50),
        p75=float(p75),
        max=float(arr.max()),
    )


def write_length_stats(stats: LengthStats, path) -> None:
    values = (stats.mean, stats.std_dev, stats.min, stats.p25, stats.p50, stats.p75, stats.max)
    with open(path, "w") as fh:
        for name, value in zip(STATS_ROWS, values):
            fh.write(f"{name},{value:.1f}\n")


@dataclass(frozen=True)
class TagDistribution:
    counts: dict[str, int]
    p: dict[str, float]  # proportion over all tokens
    p1: dict[str, float]  # proportion over non-O tokens (zeros when undefined)
    p1_defined: bool


def tag_distribution(sentences) -> TagDistribution:
    """Exact per-label counts with proportions over all tokens and over
    non-O tokens. On an all-O corpus p1 is reported as zeros and flagged."""
    counts = {label: 0 for label in BIO_LABELS}
    for sent in sentences:
        for tag in sent.tags:
            if tag not in counts:
                raise InputError(f"unknown BIO label {tag!r}")
            counts[tag] += 1
    total = sum(counts.values())
    non_o = total - counts["O"]
    p = {label: (counts[label] / total if total else 0.0) for label in BIO_LABELS}
    if non_o:
        p1 = {label: counts[label] / non_o for label in BIO_LABELS if label != "O"}
    else:
        p1 = {label: 0.0 for label in BIO_LABELS if label != "O"}
    return TagDistribution(counts=counts, p=p, p1=p1, p1_defined=bool(non_o))


def write_tag_distribution(dist: TagDistribution, path) -> None:
    with open(path, "w") as fh:
        fh.write("label,count,p,p1\n")
        for label in BIO_LABELS:
            p1 = "" if label == "O" else f"{dist.p1[label]:.6f}"
            fh.write(f"{label},{dist.counts[label]},{dist.p[label]:.6f},{p1}\n")


# ---------------------------------------------------------------------------
# ratio arithmetic


def retention(student_metric: float, teacher_metric: float) -> float:
    """Student score as a fraction of the teacher score."""
    if teacher_metric <= 0:
        raise InputError(f"teacher metric must be positive, got {teacher_metric}")
    return student_metric / teacher_metric


def speedup(new_time: float, old_time: float) -> float:
    """Signed fractional change: negative means the new run is faster."""
    if old_time <= 0:
        raise InputError(f"old time must be positive, got {old_time}")
    return (new_time - old_time) / old_time
