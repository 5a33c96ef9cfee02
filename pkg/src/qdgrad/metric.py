"""Quasi-diagonal metric storage and algebra.

A quasi-diagonal (QD) metric approximates a block-diagonal curvature matrix
by keeping, for each parameter block, only the diagonal and the first row.
Blocks correspond to the incoming parameters of one unit, with the bias as
entry 0 of the block. Storage is two flat arrays of dim(theta) reals each,
regardless of block sizes.

The solver inverts the retained entries against a vector in closed form:
each (bias, weight_i) pair is treated as an independent 2x2 system, then the
bias row is adjusted for the already-solved weights. For blocks of length 2
this is the exact block inverse.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BlockLayout",
    "MetricConfig",
    "QDMetric",
    "qd_reduce",
]


class MetricError(ValueError):
    """Structural or numerical misuse of a QD metric."""


@dataclass(frozen=True)
class BlockLayout:
    """Partition of a flat parameter vector into per-unit blocks.

    Blocks are contiguous, ordered, disjoint and cover every index exactly
    once. Entry 0 of each block is the unit's bias.
    """

    lengths: np.ndarray
    starts: np.ndarray = field(init=False)
    dim: int = field(init=False)

    def __post_init__(self):
        lengths = np.asarray(self.lengths, dtype=np.int64)
        if lengths.ndim != 1 or lengths.size == 0:
            raise MetricError("layout needs at least one block")
        if np.any(lengths < 1):
            raise MetricError("block lengths must be >= 1")
        starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "dim", int(lengths.sum()))

    @property
    def n_blocks(self) -> int:
        return len(self.lengths)

    def block_slice(self, k: int) -> slice:
        s = int(self.starts[k])
        return slice(s, s + int(self.lengths[k]))

    def groups(self):
        """Runs of consecutive equal-length blocks as (flat_start, count, length).

        Lets the solver reshape each run to a (count, length) matrix and work
        on whole layers at once instead of looping over units.
        """
        out = []
        k = 0
        n = self.n_blocks
        while k < n:
            length = int(self.lengths[k])
            j = k
            while j < n and int(self.lengths[j]) == length:
                j += 1
            out.append((int(self.starts[k]), j - k, length))
            k = j
        return out

    def __eq__(self, other):
        return isinstance(other, BlockLayout) and np.array_equal(
            self.lengths, other.lengths
        )


@dataclass
class MetricConfig:
    """Decay rate and damping for metric moving averages.

    gamma is the weight of the newest minibatch estimate, epsilon the
    absolute regularizer added to diagonal entries at solve time.
    """

    gamma: float = 0.01
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise MetricError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.epsilon < 0.0:
            raise MetricError(f"epsilon must be >= 0, got {self.epsilon}")


class QDMetric:
    """Diagonal plus first-row representation of a block curvature matrix.

    In quasi-diagonal mode both arrays are live; the first entry of ``row``
    in each block is unused and kept at zero. In diagonal mode ``row`` is
    ignored entirely and stays zero.
    """

    def __init__(self, layout: BlockLayout, quasi: bool = True):
        self.layout = layout
        self.quasi = bool(quasi)
        self.diag = np.zeros(layout.dim)
        self.row = np.zeros(layout.dim)
        self.initialized = False

    # -- accumulation ------------------------------------------------------

    def rank_one_update(self, v: np.ndarray, alpha: float) -> None:
        """Add alpha * (v v^T) restricted to the retained entries.

        diag += alpha * v**2 everywhere; in QD mode the first row of each
        block picks up alpha * v_0 * v_i for i >= 1.
        """
        v = np.asarray(v, dtype=float)
        if v.shape != (self.layout.dim,):
            raise MetricError("vector does not match layout")
        if not np.isfinite(alpha):
            raise MetricError("alpha must be finite")
        self.diag += alpha * v * v
        if self.quasi:
            for flat, count, length in self.layout.groups():
                blk = v[flat : flat + count * length].reshape(count, length)
                if length > 1:
                    r = self.row[flat : flat + count * length].reshape(count, length)
                    r[:, 1:] += alpha * blk[:, :1] * blk[:, 1:]

    def add_terms(self, diag_inc: np.ndarray, row_inc, alpha: float) -> None:
        """Accumulate a precomputed QD reduction with coefficient alpha.

        Used by the batched training path, which forms the minibatch-averaged
        diag and row contributions with matrix products instead of looping
        over per-sample rank-one updates.
        """
        self.diag += alpha * diag_inc
        if self.quasi and row_inc is not None:
            self.row += alpha * row_inc

    def decay(self, gamma: float) -> None:
        """Scale the whole metric by (1 - gamma)."""
        if not (0.0 <= gamma <= 1.0):
            raise MetricError(f"decay weight must be in [0, 1], got {gamma}")
        self.diag *= 1.0 - gamma
        self.row *= 1.0 - gamma

    # -- solving -----------------------------------------------------------

    def solve(self, v: np.ndarray, epsilon: float) -> np.ndarray:
        """Apply the inverse of the regularized metric to v.

        Quasi-diagonal mode, per block with Delta = diag + epsilon:
            w_i = (Delta_0 v_i - r_i v_0) / max(Delta_i Delta_0 - r_i^2, epsilon)
            w_0 = (v_0 - sum_i r_i w_i) / Delta_0
        Diagonal mode is elementwise division by Delta.

        Raises MetricError on an exactly zero divisor, which happens only
        for an uninitialized metric with epsilon = 0.
        """
        v = np.asarray(v, dtype=float)
        if v.shape != (self.layout.dim,):
            raise MetricError("vector does not match layout")
        if epsilon < 0.0:
            raise MetricError("epsilon must be >= 0")
        delta = self.diag + epsilon
        out = np.empty_like(v)
        if not self.quasi:
            if np.any(delta == 0.0):
                raise MetricError("zero diagonal entry; metric uninitialized?")
            np.divide(v, delta, out=out)
            return out
        for flat, count, length in self.layout.groups():
            stop = flat + count * length
            d = delta[flat:stop].reshape(count, length)
            if np.any(d[:, 0] == 0.0):
                raise MetricError("zero bias entry; metric uninitialized?")
            b = v[flat:stop].reshape(count, length)
            w = out[flat:stop].reshape(count, length)
            if length == 1:
                w[:, 0] = b[:, 0] / d[:, 0]
                continue
            r = self.row[flat:stop].reshape(count, length)[:, 1:]
            d0 = d[:, :1]
            denom = np.maximum(d[:, 1:] * d0 - r * r, epsilon)
            if np.any(denom == 0.0):
                raise MetricError("zero pair determinant; metric uninitialized?")
            w[:, 1:] = (d0 * b[:, 1:] - r * b[:, :1]) / denom
            w[:, 0] = (b[:, 0] - np.sum(r * w[:, 1:], axis=1)) / d[:, 0]
        return out

    # -- inspection --------------------------------------------------------

    def copy(self) -> "QDMetric":
        m = QDMetric(self.layout, self.quasi)
        m.diag = self.diag.copy()
        m.row = self.row.copy()
        m.initialized = self.initialized
        return m

    def dump_csv(self, path) -> None:
        """Write one line per block: diag entries, then row entries."""
        with open(path, "w") as fh:
            for k in range(self.layout.n_blocks):
                sl = self.block_values(k)
                fh.write(",".join(repr(float(x)) for x in sl) + "\n")

    def block_values(self, k: int) -> np.ndarray:
        sl = self.layout.block_slice(k)
        return np.concatenate([self.diag[sl], self.row[sl]])


def qd_reduce(dense: np.ndarray, layout: BlockLayout, quasi: bool = True) -> QDMetric:
    """Project a dense symmetric matrix onto its QD representation.

    Keeps the diagonal and, per block, the row of the bias entry. Intended
    for oracles and debugging; the training path never builds dense matrices.
    """
    dense = np.asarray(dense, dtype=float)
    if dense.shape != (layout.dim, layout.dim):
        raise MetricError("matrix does not match layout")
    m = QDMetric(layout, quasi=quasi)
    m.diag[:] = np.diagonal(dense)
    if quasi:
        for k in range(layout.n_blocks):
            sl = layout.block_slice(k)
            bias = sl.start
            m.row[sl.start + 1 : sl.stop] = dense[bias, sl.start + 1 : sl.stop]
    m.initialized = True
    return m
