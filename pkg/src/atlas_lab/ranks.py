"""Rank/name bookkeeping: chamber labels, order statistics, gap extraction,
and deterministic enumeration of the symmetric group.

Ranks and names are 1-based in every public interface. Rank 1 is the largest
value; ties go to the lowest name.
"""

import itertools
from functools import lru_cache

import numpy as np

from .errors import CapacityError, StructuralError

__all__ = [
    "EXACT_ENUM_CAP",
    "Permutation",
    "rank_permutation",
    "ranked_values",
    "gaps",
    "enumerate_permutations",
    "permutation_blocks",
    "permutation_block",
    "block_count",
]

# Largest n for which sums over the full symmetric group are attempted
# (11! is about 4e7 rows).
EXACT_ENUM_CAP = 11

# Suffix length of the lexicographic block scheme; one block enumerates all
# permutations of at most this many trailing positions (8! = 40320 rows).
_BLOCK_SUFFIX = 8


class Permutation:
    """A bijection rank -> name on {1..n}; the chamber label.

    rank_to_name[k-1] is the name holding rank k; name_to_rank is the inverse.
    Immutable and hashable, so it can key dictionaries of per-chamber data.
    """

    __slots__ = ("_rank_to_name", "_name_to_rank")

    def __init__(self, rank_to_name):
        r2n = tuple(int(v) for v in rank_to_name)
        n = len(r2n)
        if sorted(r2n) != list(range(1, n + 1)):
            raise StructuralError(f"not a permutation of 1..{n}: {r2n}")
        n2r = [0] * n
        for k, name in enumerate(r2n, start=1):
            n2r[name - 1] = k
        self._rank_to_name = r2n
        self._name_to_rank = tuple(n2r)

    @classmethod
    def identity(cls, n):
        return cls(range(1, n + 1))

    @classmethod
    def from_zero_based(cls, arr):
        return cls(int(v) + 1 for v in arr)

    @property
    def rank_to_name(self):
        return self._rank_to_name

    @property
    def name_to_rank(self):
        return self._name_to_rank

    def name_at(self, rank):
        return self._rank_to_name[rank - 1]

    def rank_of(self, name):
        return self._name_to_rank[name - 1]

    def to_zero_based(self):
        return np.array(self._rank_to_name, dtype=np.int64) - 1

    def inverse_zero_based(self):
        return np.array(self._name_to_rank, dtype=np.int64) - 1

    def __len__(self):
        return len(self._rank_to_name)

    def __eq__(self, other):
        return (
            isinstance(other, Permutation)
            and self._rank_to_name == other._rank_to_name
        )

    def __hash__(self):
        return hash(self._rank_to_name)

    def __repr__(self):
        return f"Permutation({list(self._rank_to_name)})"


def _check_finite(y):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise StructuralError(f"expected a vector, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise StructuralError("non-finite entries in value vector")
    return y


def rank_permutation(y):
    """Chamber label of y: rank 1 gets the largest entry, ties to the lowest name."""
    y = _check_finite(y)
    # stable sort on -y keeps original (lowest-name) order among equals
    order = np.argsort(-y, kind="stable")
    return Permutation.from_zero_based(order)


def ranked_values(y):
    """Order statistics of y, nonincreasing."""
    y = _check_finite(y)
    return y[np.argsort(-y, kind="stable")]


def gaps(y):
    """Consecutive differences of the order statistics, all >= 0."""
    z = ranked_values(y)
    return z[:-1] - z[1:]


def _check_cap(n, cap):
    if n > cap:
        raise CapacityError(
            f"n={n} exceeds the exact-enumeration cap {cap}; "
            "use the MCMC estimator instead"
        )


def enumerate_permutations(n, cap=EXACT_ENUM_CAP):
    """All n! chamber labels, lexicographic on rank_to_name."""
    _check_cap(n, cap)
    for r2n in itertools.permutations(range(1, n + 1)):
        yield Permutation(r2n)


@lru_cache(maxsize=None)
def _suffix_template(m):
    """All permutations of {0..m-1} in lexicographic order, shape (m!, m) int8."""
    if m == 0:
        return np.zeros((1, 0), dtype=np.int8)
    prev = _suffix_template(m - 1)
    base = np.arange(m, dtype=np.int8)
    rows = []
    for first in range(m):
        rest = np.delete(base, first)
        head = np.full((prev.shape[0], 1), first, dtype=np.int8)
        rows.append(np.concatenate([head, rest[prev]], axis=1))
    return np.ascontiguousarray(np.concatenate(rows, axis=0))


def block_count(n):
    """Number of blocks permutation_blocks(n) yields."""
    k = max(0, n - _BLOCK_SUFFIX)
    count = 1
    for j in range(k):
        count *= n - j
    return count


def permutation_blocks(n, cap=EXACT_ENUM_CAP):
    """Chunked enumeration of the symmetric group for vectorized reduction.

    Yields 0-based int8 arrays of shape (block, n) whose concatenation is all
    n! permutations in lexicographic order. Each block fixes a prefix of
    length max(0, n-8) and runs the 8!-row suffix template over the remaining
    names in sorted order, so block boundaries sit at multiples of suffix
    factorials (unranking by the factorial number system) and can be computed
    without iterating. Reductions over blocks in yielded order are
    deterministic regardless of how blocks are scheduled.
    """
    _check_cap(n, cap)
    suffix = min(n, _BLOCK_SUFFIX)
    for prefix in itertools.permutations(range(n), n - suffix):
        yield _build_block(n, suffix, prefix)


def _build_block(n, suffix, prefix):
    template = _suffix_template(suffix)
    names = np.arange(n, dtype=np.int8)
    rest = np.delete(names, list(prefix))
    block = np.empty((template.shape[0], n), dtype=np.int8)
    for j, v in enumerate(prefix):
        block[:, j] = v
    block[:, n - suffix:] = rest[template]
    return block


def permutation_block(n, index, cap=EXACT_ENUM_CAP):
    """Random access to the index-th block of permutation_blocks(n).

    Unranks the prefix through the factorial number system (mixed radix
    n, n-1, ...), so no iteration over earlier blocks happens.
    """
    _check_cap(n, cap)
    total = block_count(n)
    if not 0 <= index < total:
        raise StructuralError(f"block index {index} out of range [0, {total})")
    suffix = min(n, _BLOCK_SUFFIX)
    avail = list(range(n))
    prefix = []
    rem = total
    r = index
    for j in range(n - suffix):
        rem //= n - j
        q, r = divmod(r, rem)
        prefix.append(avail.pop(q))
    return _build_block(n, suffix, tuple(prefix))
