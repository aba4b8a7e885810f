"""Monotone boolean functions over integer atoms, as antichains of
minimal satisfying atom-sets.

FALSE is the empty antichain, TRUE the antichain containing the empty
set.  All operations keep the representation minimized (no member is a
superset of another), which makes it canonical: two PosFn values are
equal iff they denote the same monotone function of free atoms.
"""

from __future__ import annotations

from itertools import product

PosFn = frozenset  # frozenset[frozenset[int]], minimized

FALSE: PosFn = frozenset()
TRUE: PosFn = frozenset({frozenset()})


def minimize(sets) -> PosFn:
    out: list[frozenset] = []
    for s in sorted(set(sets), key=len):
        if not any(t <= s for t in out):
            out.append(s)
    return frozenset(out)


def var(atom: int) -> PosFn:
    return frozenset({frozenset({atom})})


def const(value: bool) -> PosFn:
    return TRUE if value else FALSE


def por(*fns: PosFn) -> PosFn:
    acc: set = set()
    for f in fns:
        acc |= f
    return minimize(acc)


def pand(*fns: PosFn) -> PosFn:
    acc = TRUE
    for f in fns:
        if not f:
            return FALSE
        if acc is TRUE:
            acc = f
            continue
        acc = minimize(a | b for a, b in product(acc, f))
    return acc if acc is not TRUE else TRUE


def atoms(f: PosFn) -> frozenset:
    out: set = set()
    for s in f:
        out |= s
    return frozenset(out)


def subst(f: PosFn, mapping: dict) -> PosFn:
    """Substitute a PosFn for each mapped atom; unmapped atoms stay."""
    parts = []
    for s in f:
        conj = [mapping.get(a, var(a)) for a in s]
        parts.append(pand(*conj))
    return por(*parts)


def rename(f: PosFn, mapping: dict) -> PosFn:
    return frozenset(frozenset(mapping.get(a, a) for a in s) for s in f)


def evaluate(f: PosFn, assignment: dict) -> bool:
    """Total evaluation; every atom of f must be assigned."""
    return any(all(assignment[a] for a in s) for s in f)


def leq(f: PosFn, g: PosFn) -> bool:
    """Pointwise order: f <= g iff every min-set of f contains one of g."""
    return all(any(t <= s for t in g) for s in f)
