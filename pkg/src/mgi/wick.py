"""Wick contractions for bosonic ladder-operator strings.

Vacuum expectation values of Gaussian fields are evaluated as sums over
perfect matchings (pairings) of operator positions, each pairing contributing
the product of its ordered pair moments.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterator, Mapping, Sequence

DEFAULT_MAX_OPS = 12


class Kind(enum.Enum):
    CREATION = "creation"
    ANNIHILATION = "annihilation"


@dataclass(frozen=True, order=True)
class LadderOp:
    """A single bosonic creation or annihilation operator."""

    mode_id: int
    kind: Kind

    def __post_init__(self):
        if not isinstance(self.mode_id, int) or self.mode_id < 0:
            raise ValueError(f"mode_id must be a non-negative integer, got {self.mode_id!r}")
        if not isinstance(self.kind, Kind):
            raise ValueError(f"kind must be a Kind, got {self.kind!r}")

    @property
    def is_creation(self) -> bool:
        return self.kind is Kind.CREATION

    def dag(self) -> "LadderOp":
        other = Kind.ANNIHILATION if self.is_creation else Kind.CREATION
        return LadderOp(self.mode_id, other)

    def __repr__(self):
        return f"a{self.mode_id}{'†' if self.is_creation else ''}"


def create(mode_id: int) -> LadderOp:
    return LadderOp(mode_id, Kind.CREATION)


def annihilate(mode_id: int) -> LadderOp:
    return LadderOp(mode_id, Kind.ANNIHILATION)


def number(mode_id: int) -> list[LadderOp]:
    """Operator string a†a for the photon-number operator of a mode."""
    return [create(mode_id), annihilate(mode_id)]


Pairing = tuple[tuple[int, int], ...]


def _pairings(positions: tuple[int, ...]) -> Iterator[Pairing]:
    # pair the smallest unpaired position first: (i < j) within pairs and
    # increasing first elements hold by construction
    if not positions:
        yield ()
        return
    first, rest = positions[0], positions[1:]
    for k, partner in enumerate(rest):
        remaining = rest[:k] + rest[k + 1:]
        for tail in _pairings(remaining):
            yield ((first, partner),) + tail


@lru_cache(maxsize=None)
def _cached_pairings(n_ops: int) -> tuple[Pairing, ...]:
    return tuple(_pairings(tuple(range(n_ops))))


def enumerate_pairings(n_ops: int, max_ops: int = DEFAULT_MAX_OPS) -> list[Pairing]:
    """All (n_ops - 1)!! pairings of positions ``0 .. n_ops - 1``.

    Each pairing is a tuple of ``(i, j)`` pairs with ``i < j`` and the first
    elements strictly increasing. The order is deterministic.
    """
    if n_ops < 0 or n_ops % 2:
        raise ValueError(f"number of operators must be even and non-negative, got {n_ops}")
    if n_ops > max_ops:
        raise ValueError(
            f"{n_ops} operators exceeds the pairing cap of {max_ops} "
            f"({_double_factorial(n_ops - 1)} pairings)"
        )
    return list(_cached_pairings(n_ops))


def _double_factorial(n: int) -> int:
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out


def vacuum_pair_moment(x: LadderOp, y: LadderOp) -> complex:
    """<0| x y |0> for input (vacuum) ladder operators."""
    if not x.is_creation and y.is_creation and x.mode_id == y.mode_id:
        return 1.0 + 0j
    return 0j


class MissingMomentError(KeyError):
    pass


class PairMomentTable:
    """Ordered second moments <X Y> of a zero-mean Gaussian field.

    Backed either by an explicit mapping ``{(X, Y): value}`` or by a function
    ``(X, Y) -> value``; subclasses override :meth:`value`.
    """

    def __init__(self, entries: Mapping[tuple[LadderOp, LadderOp], complex] | None = None,
                 func: Callable[[LadderOp, LadderOp], complex] | None = None):
        if entries is None and func is None:
            raise ValueError("need either entries or func")
        self._entries = dict(entries) if entries is not None else None
        self._func = func

    def value(self, x: LadderOp, y: LadderOp) -> complex:
        if self._entries is not None:
            try:
                return self._entries[(x, y)]
            except KeyError:
                raise MissingMomentError(f"no pair moment for <{x!r} {y!r}>") from None
        return self._func(x, y)

    def __call__(self, x: LadderOp, y: LadderOp) -> complex:
        return self.value(x, y)

    def scaled(self, x: LadderOp, y: LadderOp, factor: complex) -> "PairMomentTable":
        """Copy of the table with the single entry (x, y) multiplied by ``factor``."""
        def func(u, v):
            val = self.value(u, v)
            return val * factor if (u, v) == (x, y) else val
        return PairMomentTable(func=func)

    def hermiticity_residual(self, ops: Sequence[LadderOp]) -> float:
        """max |<XY> - conj(<Y†X†>)| over all ordered pairs drawn from ``ops``."""
        worst = 0.0
        for x in ops:
            for y in ops:
                diff = self.value(x, y) - self.value(y.dag(), x.dag()).conjugate()
                worst = max(worst, abs(diff))
        return worst


def gaussian_moment(ops: Sequence[LadderOp], table: PairMomentTable | Callable,
                    max_ops: int = DEFAULT_MAX_OPS) -> complex:
    """Vacuum-Gaussian expectation of the ordered product ``ops[0] ops[1] ...``."""
    n = len(ops)
    if n == 0:
        return 1.0 + 0j
    if n % 2:
        return 0j
    lookup = table.value if isinstance(table, PairMomentTable) else table
    # each ordered pair is looked up once even though it recurs across pairings
    cache: dict[tuple[int, int], complex] = {}
    total = 0j
    for pairing in enumerate_pairings(n, max_ops):
        term = 1.0 + 0j
        for i, j in pairing:
            val = cache.get((i, j))
            if val is None:
                val = cache[(i, j)] = complex(lookup(ops[i], ops[j]))
            if val == 0:
                term = 0j
                break
            term *= val
        total += term
    return total


def count_nonzero_terms(ops: Sequence[LadderOp], table: PairMomentTable | Callable) -> int:
    """Number of pairings of ``ops`` whose product of pair moments is non-zero."""
    lookup = table.value if isinstance(table, PairMomentTable) else table
    count = 0
    for pairing in enumerate_pairings(len(ops)):
        if all(lookup(ops[i], ops[j]) != 0 for i, j in pairing):
            count += 1
    return count
