"""Attention patterns: dense softmax attention plus four reduced-cost
variants (sliding window, block sparse with random blocks, landmark
approximation, local+strided+global).

Masked variants are materialized as explicit per-query key lists so the
attended-pair count is the real computed cost, not an upper bound; the
evaluation kernel touches only allowed pairs.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ContractError, NumericGuardError, ParameterError
from .numcore import Tensor

# ---------------------------------------------------------------------------
# pattern specs


@dataclass(frozen=True)
class Full:
    def validate(self) -> None:
        pass


@dataclass(frozen=True)
class SlidingWindow:
    """Symmetric window of `window` keys per side at spacing `dilation`,
    plus optional global tokens that read and are read everywhere."""

    window: int
    dilation: int = 1
    global_tokens: tuple[int, ...] = ()

    def validate(self) -> None:
        if self.window < 0:
            raise ParameterError(f"window must be >= 0, got {self.window}")
        if self.dilation < 1:
            raise ParameterError(f"dilation must be >= 1, got {self.dilation}")
        if any(g < 0 for g in self.global_tokens):
            raise ParameterError("global token indices must be nonnegative")


@dataclass(frozen=True)
class BlockSparse:
    """Block-diagonal neighborhood plus `global_blocks` leading blocks
    (symmetric) plus `random_blocks` seeded random blocks per row-block."""

    block: int
    random_blocks: int = 0
    global_blocks: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.block < 1:
            raise ParameterError(f"block size must be >= 1, got {self.block}")
        if self.random_blocks < 0 or self.global_blocks < 0:
            raise ParameterError("block counts must be nonnegative")


@dataclass(frozen=True)
class Nystrom:
    """Landmark-based algebraic approximation; no mask is materialized."""

    landmarks: int
    pinv_iters: int = 6

    def validate(self) -> None:
        if self.landmarks < 1:
            raise ParameterError(f"landmarks must be >= 1, got {self.landmarks}")
        if self.pinv_iters < 1:
            raise ParameterError(f"pinv_iters must be >= 1, got {self.pinv_iters}")


@dataclass(frozen=True)
class LocalSparseGlobal:
    """Local window plus strided anchor positions plus leading global
    tokens. Stands in for hash-bucketed local/sparse/global patterns; the
    strided component replaces bucket assignment."""

    local: int
    stride: int
    global_tokens: int = 0

    def validate(self) -> None:
        if self.local < 0:
            raise ParameterError(f"local window must be >= 0, got {self.local}")
        if self.stride < 2:
            raise ParameterError(f"stride must be >= 2, got {self.stride}")
        if self.global_tokens < 0:
            raise ParameterError("global token count must be nonnegative")


AttentionSpec = Full | SlidingWindow | BlockSparse | Nystrom | LocalSparseGlobal


# ---------------------------------------------------------------------------
# masks


class AttentionMask:
    """Per-query sorted key lists for one sequence length, stored CSR-style."""

    def __init__(self, n: int, rows: list[np.ndarray]):
        if len(rows) != n:
            raise ContractError(f"expected {n} rows, got {len(rows)}")
        indptr = np.zeros(n + 1, dtype=np.int64)
        for i, r in enumerate(rows):
            if r.size == 0:
                raise ContractError(f"query {i} attends to no keys")
            if i not in r:
                raise ContractError(f"query {i} does not attend to itself")
            if r.min() < 0 or r.max() >= n:
                raise ParameterError(f"key index out of range in row {i}")
            indptr[i + 1] = indptr[i] + r.size
        self.n = n
        self.indptr = indptr
        self.indices = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        # pair -> query index, and a key-sorted view for scatter passes
        self.pair_rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(indptr))
        self.key_perm = np.argsort(self.indices, kind="stable")
        key_counts = np.bincount(self.indices, minlength=n)
        self.key_indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(key_counts, out=self.key_indptr[1:])

    @property
    def cardinality(self) -> int:
        return int(self.indices.size)

    def row(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n, self.n), dtype=bool)
        dense[self.pair_rows, self.indices] = True
        return dense

    def dump(self, fileobj) -> None:
        """One line per query: space-separated sorted key indices."""
        for i in range(self.n):
            fileobj.write(" ".join(str(j) for j in self.row(i)) + "\n")

    def dumps(self) -> str:
        buf = io.StringIO()
        self.dump(buf)
        return buf.getvalue()


def _close_global(allowed: list[set], global_tokens) -> None:
    n = len(allowed)
    gset = {g for g in global_tokens if g < n}
    if not gset:
        return
    everything = set(range(n))
    for g in gset:
        allowed[g] |= everything
    for i in range(n):
        allowed[i] |= gset


def build_mask(spec: AttentionSpec, n: int) -> AttentionMask:
    """Materialize the key lists of a masked pattern at length `n`."""
    if n < 1:
        raise ParameterError(f"sequence length must be >= 1, got {n}")
    spec.validate()

    if isinstance(spec, Full):
        full = np.arange(n, dtype=np.int64)
        return AttentionMask(n, [full.copy() for _ in range(n)])

    if isinstance(spec, SlidingWindow):
        if any(g >= n for g in spec.global_tokens):
            raise ParameterError("global token index beyond sequence length")
        allowed = []
        for i in range(n):
            js = i + spec.dilation * np.arange(-spec.window, spec.window + 1)
            allowed.append(set(js[(js >= 0) & (js < n)].tolist()))
        _close_global(allowed, spec.global_tokens)
        return AttentionMask(n, [np.array(sorted(s), dtype=np.int64) for s in allowed])

    if isinstance(spec, BlockSparse):
        b = spec.block
        nb = (n + b - 1) // b  # blocks over the right-padded length
        block_keys = [np.arange(kb * b, min((kb + 1) * b, n), dtype=np.int64) for kb in range(nb)]
        rng = nc.make_rng(spec.seed)
        rand_per_row = []
        for _rb in range(nb):
            take = min(spec.random_blocks, nb)
            rand_per_row.append(rng.choice(nb, size=take, replace=False) if take else np.zeros(0, dtype=np.int64))
        g = min(spec.global_blocks, nb)
        rows = []
        for i in range(n):
            qb = i // b
            blocks = {kb for kb in (qb - 1, qb, qb + 1) if 0 <= kb < nb}
            blocks.update(range(g))
            blocks.update(int(kb) for kb in rand_per_row[qb])
            if qb < g:
                blocks = set(range(nb))
            keys = np.concatenate([block_keys[kb] for kb in sorted(blocks)])
            rows.append(keys)
        return AttentionMask(n, rows)

    if isinstance(spec, LocalSparseGlobal):
        allowed = []
        strided = set(range(0, n, spec.stride))
        for i in range(n):
            lo, hi = max(0, i - spec.local), min(n, i + spec.local + 1)
            s = set(range(lo, hi))
            s |= strided
            allowed.append(s)
        _close_global(allowed, range(min(spec.global_tokens, n)))
        return AttentionMask(n, [np.array(sorted(s), dtype=np.int64) for s in allowed])

    if isinstance(spec, Nystrom):
        raise ParameterError("landmark attention is algebraic; it has no mask")
    raise ParameterError(f"unknown attention spec {spec!r}")


def mask_cardinality(mask: AttentionMask) -> int:
    """Total allowed query-key pairs."""
    return mask.cardinality


def attended_pairs(spec: AttentionSpec, n: int) -> int:
    """Score evaluations the pattern performs at length `n` (the
    hardware-independent cost measure)."""
    if isinstance(spec, Full):
        return n * n
    if isinstance(spec, Nystrom):
        m = min(spec.landmarks, n)
        return 2 * n * m + m * m
    return mask_cardinality(build_mask(spec, n))


# ---------------------------------------------------------------------------
# kernels


_TILE_ELEMS = 1 << 22  # budget for transient gather buffers, in float32 elements


def _segment_tiles(indptr: np.ndarray, per_pair_elems: int) -> list[tuple[int, int, int, int]]:
    """Split segments (rows or keys) into contiguous tiles whose transient
    pair buffers stay within the element budget. Returns
    (seg_lo, seg_hi, pair_lo, pair_hi) spans; a segment larger than the
    budget gets a tile of its own."""
    n = len(indptr) - 1
    budget = max(1, _TILE_ELEMS // max(1, per_pair_elems))
    tiles = []
    lo = 0
    while lo < n:
        hi = int(np.searchsorted(indptr, indptr[lo] + budget, side="right")) - 1
        hi = min(max(hi, lo + 1), n)
        tiles.append((lo, hi, int(indptr[lo]), int(indptr[hi])))
        lo = hi
    return tiles


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: AttentionMask, scale: float | None = None) -> Tensor:
    """Softmax attention restricted to the mask's allowed pairs.

    Accepts [..., n, d] operands. Disallowed pairs contribute exactly
    nothing and are never computed: work is proportional to the pair
    count. Gathered pair buffers are processed in bounded tiles; only the
    pair-count-sized score/probability buffers persist.
    """
    qd, kd, vd = q.data, k.data, v.data
    if qd.shape != kd.shape or qd.shape != vd.shape:
        raise ContractError(f"q/k/v shapes differ: {qd.shape}, {kd.shape}, {vd.shape}")
    n, d = qd.shape[-2], qd.shape[-1]
    if n != mask.n:
        raise ContractError(f"mask built for n={mask.n}, inputs have n={n}")
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    rows, cols, indptr = mask.pair_rows, mask.indices, mask.indptr
    starts = indptr[:-1]
    lead = qd.shape[:-2]
    per_pair = int(np.prod(lead, dtype=np.int64)) * d if lead else d
    row_tiles = _segment_tiles(indptr, per_pair)
    key_tiles = _segment_tiles(mask.key_indptr, per_pair)
    perm = mask.key_perm

    p_arr = np.empty(lead + (rows.size,), dtype=qd.dtype)
    for _, _, p0, p1 in row_tiles:
        np.einsum(
            "...pd,...pd->...p",
            qd[..., rows[p0:p1], :], kd[..., cols[p0:p1], :],
            out=p_arr[..., p0:p1],
        )
    p_arr *= scale
    rowmax = np.maximum.reduceat(p_arr, starts, axis=-1)
    p_arr -= rowmax[..., rows]
    np.exp(p_arr, out=p_arr)
    denom = np.add.reduceat(p_arr, starts, axis=-1)
    p_arr /= denom[..., rows]
    p_t = Tensor._from_op(p_arr, False)  # pair probabilities, kept for backward

    out_arr = np.empty_like(qd)
    for r0, r1, p0, p1 in row_tiles:
        out_arr[..., r0:r1, :] = np.add.reduceat(
            p_arr[..., p0:p1, None] * vd[..., cols[p0:p1], :], starts[r0:r1] - p0, axis=-2
        )

    def backward(g):
        p_ = p_t.data
        ds = np.empty_like(p_)
        for _, _, p0, p1 in row_tiles:
            np.einsum(
                "...pd,...pd->...p",
                g[..., rows[p0:p1], :], vd[..., cols[p0:p1], :],
                out=ds[..., p0:p1],
            )
        inner = np.add.reduceat(p_ * ds, starts, axis=-1)
        ds -= inner[..., rows]
        ds *= p_
        ds *= scale
        dq = np.empty_like(qd)
        for r0, r1, p0, p1 in row_tiles:
            dq[..., r0:r1, :] = np.add.reduceat(
                ds[..., p0:p1, None] * kd[..., cols[p0:p1], :], starts[r0:r1] - p0, axis=-2
            )
        dk = np.empty_like(kd)
        dv = np.empty_like(vd)
        kstarts = mask.key_indptr[:-1]
        for k0, k1, p0, p1 in key_tiles:
            sel = perm[p0:p1]
            rel = kstarts[k0:k1] - p0
            dk[..., k0:k1, :] = np.add.reduceat(
                ds[..., sel, None] * qd[..., rows[sel], :], rel, axis=-2
            )
            dv[..., k0:k1, :] = np.add.reduceat(
                p_[..., sel, None] * g[..., rows[sel], :], rel, axis=-2
            )
        return dq, dk, dv

    return nc._emit(out_arr, (q, k, v), backward)


def dense_attention(q: Tensor, k: Tensor, v: Tensor, scale: float | None = None) -> Tensor:
    """Unmasked softmax attention composed from core ops (materializes the
    full score matrix)."""
    d = q.data.shape[-1]
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    scores = nc.scale(nc.matmul(q, nc.transpose(k)), scale)
    return nc.matmul(nc.softmax_T(scores), v)


def _segment_mean_matrix(n: int, m: int) -> np.ndarray:
    """[m, n] averaging matrix over m contiguous segments; the first n % m
    segments take one extra position when m does not divide n."""
    base, rem = divmod(n, m)
    mat = np.zeros((m, n), dtype=np.float64)
    start = 0
    for s in range(m):
        size = base + (1 if s < rem else 0)
        mat[s, start : start + size] = 1.0 / size
        start += size
    return mat


def iterative_pinv(a: Tensor, iters: int) -> Tensor:
    """Newton-type pseudoinverse iteration with cubic convergence.

    Z_0 = A^T / (|A|_1 * |A|_inf); each step applies the degree-3 update
    Z <- Z (13 I - A Z (15 I - A Z (7 I - A Z))) / 4.
    """
    if iters < 1:
        raise ParameterError(f"iters must be >= 1, got {iters}")
    m = a.data.shape[-1]
    if a.data.shape[-2] != m:
        raise ParameterError(f"pseudoinverse input must be square, got {a.data.shape}")
    eye = Tensor(np.eye(m))
    absa = nc.absolute(a)
    norm1 = nc.reduce_max(nc.reduce_sum(absa, axis=-2, keepdims=True), axis=-1, keepdims=True)
    norminf = nc.reduce_max(nc.reduce_sum(absa, axis=-1, keepdims=True), axis=-2, keepdims=True)
    z = nc.div(nc.transpose(a), nc.mul(norm1, norminf))
    for _ in range(iters):
        az = nc.matmul(a, z)
        t = nc.sub(nc.scale(eye, 7.0), az)
        t = nc.sub(nc.scale(eye, 15.0), nc.matmul(az, t))
        t = nc.sub(nc.scale(eye, 13.0), nc.matmul(az, t))
        z = nc.scale(nc.matmul(z, t), 0.25)
    if not np.all(np.isfinite(z.data)):
        raise NumericGuardError("pseudoinverse iteration overflowed")
    return z


def nystrom_attention(q: Tensor, k: Tensor, v: Tensor, landmarks: int, iters: int, scale: float | None = None) -> Tensor:
    """Landmark approximation of softmax attention.

    Landmark queries/keys are contiguous segment means; the middle kernel
    is inverted with `iterative_pinv`. Cost scales with n * landmarks.
    """
    n, d = q.data.shape[-2], q.data.shape[-1]
    if landmarks > n:
        raise ParameterError(f"landmarks ({landmarks}) exceed sequence length ({n})")
    if landmarks < 1:
        raise ParameterError(f"landmarks must be >= 1, got {landmarks}")
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    seg = Tensor(_segment_mean_matrix(n, landmarks))
    q_l = nc.matmul(seg, q)
    k_l = nc.matmul(seg, k)
    f1 = nc.softmax_T(nc.scale(nc.matmul(q, nc.transpose(k_l)), scale))
    f2 = nc.softmax_T(nc.scale(nc.matmul(q_l, nc.transpose(k_l)), scale))
    f3 = nc.softmax_T(nc.scale(nc.matmul(q_l, nc.transpose(k)), scale))
    z = iterative_pinv(f2, iters)
    return nc.matmul(f1, nc.matmul(z, nc.matmul(f3, v)))
