"""Dense labelled tensors and the contraction primitives built on them.

Every axis carries a hashable label.  Data is stored as a C-ordered float64
array (last axis fastest) and is never mutated after construction.
"""

import os
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from tnml.errors import DimensionError, StructuralError

Label = Hashable

# Finite-value assertions after every operation; switched on by the test-suite.
DEBUG_CHECKS = os.environ.get("TNML_DEBUG", "") not in ("", "0")


class Tensor:
    """Immutable float64 array with one distinct label per axis."""

    __slots__ = ("_data", "_labels")

    def __init__(self, data, labels: Sequence[Label]):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        labels = tuple(labels)
        if arr.ndim != len(labels):
            raise StructuralError(
                f"{arr.ndim}-dimensional data given {len(labels)} labels {labels}")
        if len(set(labels)) != len(labels):
            raise StructuralError(f"duplicate axis labels {labels}")
        if DEBUG_CHECKS and not np.all(np.isfinite(arr)):
            raise FloatingPointError("tensor contains non-finite elements")
        arr.flags.writeable = False
        self._data = arr
        self._labels = labels

    @classmethod
    def _wrap(cls, arr, labels):
        # trusted fast path for internal results
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64, order="C")
        if DEBUG_CHECKS and not np.all(np.isfinite(arr)):
            raise FloatingPointError("operation produced non-finite elements")
        arr.flags.writeable = False
        t._data = arr
        t._labels = tuple(labels)
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def labels(self) -> tuple:
        return self._labels

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def extent(self, label: Label) -> int:
        return self._data.shape[self.axis(label)]

    def axis(self, label: Label) -> int:
        try:
            return self._labels.index(label)
        except ValueError:
            raise StructuralError(f"label {label!r} not in {self._labels}") from None

    def aligned(self, labels: Sequence[Label]) -> np.ndarray:
        """Data transposed so that its axes follow ``labels``."""
        labels = tuple(labels)
        if sorted(map(repr, labels)) != sorted(map(repr, self._labels)):
            raise StructuralError(f"cannot align {self._labels} to {labels}")
        return np.transpose(self._data, [self.axis(l) for l in labels])

    def allclose(self, other: "Tensor", rtol=1e-12, atol=0.0) -> bool:
        if set(self._labels) != set(other.labels):
            return False
        b = other.aligned(self._labels)
        return b.shape == self.shape and np.allclose(self._data, b, rtol=rtol, atol=atol)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        if set(self._labels) != set(other.labels):
            return False
        b = other.aligned(self._labels)
        return b.shape == self.shape and bool(np.array_equal(self._data, b))

    __hash__ = None

    def __mul__(self, scalar):
        return Tensor._wrap(self._data * float(scalar), self._labels)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.shape}, labels={self._labels})"


def _check_pairs(a: Tensor, b: Tensor, pairs):
    for la, lb in pairs:
        if la not in a.labels:
            raise StructuralError(f"label {la!r} missing from first operand {a.labels}")
        if lb not in b.labels:
            raise StructuralError(f"label {lb!r} missing from second operand {b.labels}")
        if a.extent(la) != b.extent(lb):
            raise DimensionError(
                f"extent mismatch on ({la!r}, {lb!r}): {a.extent(la)} vs {b.extent(lb)}")


def contract(a: Tensor, b: Tensor, pairs: Iterable[tuple] = (),
             keep: Iterable[tuple] = ()) -> Tensor:
    """Sum ``a`` and ``b`` over each ``(label_in_a, label_in_b)`` in ``pairs``.

    The result carries the unpaired axes of ``a`` followed by those of ``b``,
    each in original order.  ``keep`` lists shared axes that are matched
    element-wise but *not* summed (a hyperedge that still has other members);
    such an axis appears once, at its position in ``a``.

    The product is evaluated as a (batched) matrix multiplication after
    reshaping both operands.
    """
    pairs = [tuple(p) for p in pairs]
    keep = [tuple(p) for p in keep]
    _check_pairs(a, b, pairs + keep)
    used_a = [p[0] for p in pairs + keep]
    used_b = [p[1] for p in pairs + keep]
    if len(set(used_a)) != len(used_a) or len(set(used_b)) != len(used_b):
        raise StructuralError("a label is paired more than once")

    sum_a = [a.axis(la) for la, _ in pairs]
    sum_b = [b.axis(lb) for _, lb in pairs]
    keep_a = [a.axis(la) for la, _ in keep]
    keep_b = [b.axis(lb) for _, lb in keep]
    free_a = [i for i in range(a.ndim) if i not in sum_a and i not in keep_a]
    free_b = [i for i in range(b.ndim) if i not in sum_b and i not in keep_b]

    out_a_labels = [l for i, l in enumerate(a.labels) if i not in sum_a]
    out_b_labels = [b.labels[i] for i in free_b]
    clash = set(out_a_labels) & set(out_b_labels)
    if clash:
        raise StructuralError(f"result would repeat labels {sorted(map(repr, clash))}")

    sa, sb = a.shape, b.shape
    k_shape = [sa[i] for i in keep_a]
    fa_shape = [sa[i] for i in free_a]
    fb_shape = [sb[i] for i in free_b]
    K = int(np.prod(k_shape, dtype=np.int64))
    S = int(np.prod([sa[i] for i in sum_a], dtype=np.int64))
    Fa = int(np.prod(fa_shape, dtype=np.int64))
    Fb = int(np.prod(fb_shape, dtype=np.int64))

    am = np.transpose(a.data, keep_a + free_a + sum_a).reshape(K, Fa, S)
    bm = np.transpose(b.data, keep_b + sum_b + free_b).reshape(K, S, Fb)
    out = np.matmul(am, bm).reshape(k_shape + fa_shape + fb_shape)

    # move kept axes back to their slots among a's surviving axes
    survivors = [i for i in range(a.ndim) if i not in sum_a]
    current = keep_a + free_a
    perm = [current.index(i) for i in survivors]
    perm += list(range(len(survivors), out.ndim))
    out = np.transpose(out, perm)
    return Tensor._wrap(out, out_a_labels + out_b_labels)


def outer(a: Tensor, b: Tensor) -> Tensor:
    """Tensor product; axes of ``a`` then ``b``."""
    if set(a.labels) & set(b.labels):
        raise StructuralError(f"outer product of tensors sharing labels {a.labels} / {b.labels}")
    out = np.multiply.outer(a.data, b.data)
    return Tensor._wrap(out, a.labels + b.labels)


def make_copy_node(rank: int, dim: int, labels: Sequence[Label] | None = None) -> Tensor:
    """Rank-``rank`` tensor equal to 1 where all indices agree and 0 elsewhere."""
    if rank < 1 or dim < 1:
        raise ValueError(f"copy node needs rank >= 1 and dim >= 1, got {rank}, {dim}")
    if labels is None:
        labels = tuple(f"c{i}" for i in range(rank))
    data = np.zeros((dim,) * rank)
    idx = np.arange(dim)
    data[(idx,) * rank] = 1.0
    return Tensor(data, labels)


def diag_tensor(values, labels: Sequence[Label] = ("i", "j")) -> Tensor:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("diag_tensor needs a non-empty vector")
    return Tensor(np.diag(values), labels)


def relabel(t: Tensor, mapping: Mapping[Label, Label]) -> Tensor:
    """Rename axes; labels absent from ``mapping`` keep their name."""
    for old in mapping:
        if old not in t.labels:
            raise StructuralError(f"cannot relabel missing label {old!r}")
    new = [mapping.get(l, l) for l in t.labels]
    if len(set(new)) != len(new):
        raise StructuralError(f"relabelling {dict(mapping)} is not injective on {t.labels}")
    return Tensor._wrap(t.data, new)


def permute(t: Tensor, order: Sequence[Label]) -> Tensor:
    """Reorder axes to follow ``order`` (a permutation of ``t.labels``)."""
    order = tuple(order)
    if len(order) != t.ndim or set(order) != set(t.labels):
        raise StructuralError(f"{order} is not a permutation of {t.labels}")
    return Tensor._wrap(t.aligned(order), order)
