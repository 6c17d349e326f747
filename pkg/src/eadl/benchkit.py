"""Inference cost harness: wall-clock timing, tensor-memory high-water
marks, attended-pair accounting, and growth-ratio classification.

Absolute numbers are machine-specific; only orderings and growth classes
are meaningful across machines."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import numpy as np

from . import attention as att
from . import numcore as nc
from .encoder import ModelConfig, ModelWeights, count_params, forward
from .errors import ContractError, LengthError, ParameterError

CSV_HEADER = "model,label,seq_len,batch,mean_s,std_s,peak_bytes,attended_pairs,params"
SCALING_HEADER = "model,label,seq_len_from,seq_len_to,time_ratio,mem_ratio,pair_ratio,class"

NEAR_LINEAR_BELOW = 2.5
NEAR_QUADRATIC_ABOVE = 3.5

_bench_lock = threading.Lock()


@dataclass(frozen=True)
class BenchConfig:
    seq_lens: tuple[int, ...] = (128, 256, 512, 1024)
    batch_size: int = 16
    warmup_reps: int = 2
    timed_reps: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.timed_reps < 3:
            raise ParameterError(f"timed_reps must be >= 3, got {self.timed_reps}")
        if self.warmup_reps < 0 or self.batch_size < 1:
            raise ParameterError("bad warmup_reps / batch_size")
        if list(self.seq_lens) != sorted(self.seq_lens) or len(self.seq_lens) == 0:
            raise ParameterError("seq_lens must be non-empty and ascending")


@dataclass(frozen=True)
class BenchResult:
    model: str
    label: str
    seq_len: int
    batch: int
    mean_s: float
    std_s: float
    peak_bytes: int
    attended_pairs: int
    params: int


def default_label(config: ModelConfig) -> str:
    from .encoder import spec_to_dict

    tag = spec_to_dict(config.attention_spec)["variant"]
    return f"{tag}-L{config.num_layers}-h{config.hidden_dim}"


def time_inference(
    config: ModelConfig,
    weights: ModelWeights,
    bench: BenchConfig,
    model: str = "",
    label: str = "",
) -> list[BenchResult]:
    """Timed eval-mode forwards on seeded random token batches.

    Per sequence length: `warmup_reps` unmeasured runs, then `timed_reps`
    measured ones. Peak bytes is the tensor high-water mark above the
    pre-run baseline within the measured window.
    """
    bench.validate()
    over = [l for l in bench.seq_lens if l > config.max_positions]
    if over:
        raise LengthError(
            f"seq_lens {over} exceed model max_positions {config.max_positions}"
        )
    if not label:
        label = default_label(config)
    if not _bench_lock.acquire(blocking=False):
        raise ContractError("one benchmark at a time per process")
    try:
        results = []
        params = count_params(config)
        for seq_len in bench.seq_lens:
            rng = nc.make_rng(bench.seed, seq_len)
            ids = rng.integers(0, config.vocab_size, size=(bench.batch_size, seq_len))
            for _ in range(bench.warmup_reps):
                forward(config, weights, ids, mode="eval")
            base = nc.alloc_stats.current_bytes
            nc.alloc_stats.reset_peak()
            samples = []
            for _ in range(bench.timed_reps):
                t0 = time.perf_counter()
                out = forward(config, weights, ids, mode="eval")
                samples.append(time.perf_counter() - t0)
                del out
            peak = nc.alloc_stats.peak_bytes - base
            results.append(
                BenchResult(
                    model=model,
                    label=label,
                    seq_len=seq_len,
                    batch=bench.batch_size,
                    mean_s=float(np.mean(samples)),
                    std_s=float(np.std(samples)),
                    peak_bytes=int(peak),
                    attended_pairs=att.attended_pairs(config.attention_spec, seq_len),
                    params=params,
                )
            )
        return results
    finally:
        _bench_lock.release()


def write_results_csv(results: list[BenchResult], fh) -> None:
    fh.write(CSV_HEADER + "\n")
    for r in results:
        fh.write(
            f"{r.model},{r.label},{r.seq_len},{r.batch},{r.mean_s!r},{r.std_s!r},"
            f"{r.peak_bytes},{r.attended_pairs},{r.params}\n"
        )


# ---------------------------------------------------------------------------
# growth ratios


@dataclass(frozen=True)
class ScalingRow:
    model: str
    label: str
    seq_len_from: int
    seq_len_to: int
    time_ratio: float
    mem_ratio: float
    pair_ratio: float
    growth_class: str  # near-linear | intermediate | near-quadratic


@dataclass
class ScalingReport:
    rows: list[ScalingRow]
    warnings: list[str]


def classify_pair_ratio(ratio: float) -> str:
    if ratio < NEAR_LINEAR_BELOW:
        return "near-linear"
    if ratio > NEAR_QUADRATIC_ABOVE:
        return "near-quadratic"
    return "intermediate"


def scaling_report(results: list[BenchResult]) -> ScalingReport:
    """Growth ratios at consecutive sequence-length doublings per model."""
    rows: list[ScalingRow] = []
    warnings: list[str] = []
    groups: dict[tuple[str, str], list[BenchResult]] = {}
    for r in results:
        groups.setdefault((r.model, r.label), []).append(r)
    for (model, label), group in groups.items():
        group = sorted(group, key=lambda r: r.seq_len)
        if len(group) < 2:
            warnings.append(f"{model or label}: single sequence length, no ratios")
            continue
        for a, b in zip(group, group[1:]):
            if b.seq_len != 2 * a.seq_len:
                warnings.append(
                    f"{model or label}: lengths {a.seq_len}->{b.seq_len} are not a doubling, skipped"
                )
                continue
            pair_ratio = b.attended_pairs / a.attended_pairs
            rows.append(
                ScalingRow(
                    model=model,
                    label=label,
                    seq_len_from=a.seq_len,
                    seq_len_to=b.seq_len,
                    time_ratio=b.mean_s / a.mean_s,
                    mem_ratio=b.peak_bytes / a.peak_bytes if a.peak_bytes else float("nan"),
                    pair_ratio=pair_ratio,
                    growth_class=classify_pair_ratio(pair_ratio),
                )
            )
    return ScalingReport(rows=rows, warnings=warnings)


def write_scaling_csv(report: ScalingReport, fh) -> None:
    fh.write(SCALING_HEADER + "\n")
    for r in report.rows:
        fh.write(
            f"{r.model},{r.label},{r.seq_len_from},{r.seq_len_to},"
            f"{r.time_ratio!r},{r.mem_ratio!r},{r.pair_ratio!r},{r.growth_class}\n"
        )
