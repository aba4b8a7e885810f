"""Linear bottom-up finite tree transducers: representation, relation
semantics, and the split of an arbitrary linear FTT into a complete
transducer followed by a restriction.

The restriction half uses transitions of two shapes: relabel-and-drop
``a^r (q,x1)..(q,xr) -> q, b^n x_{i1}..x_{in}`` and single-child erasure
``a^r ... -> q, x_i``.  Erasure is needed so that transducers whose
output is a bare variable (subtree forwarding) decompose with exact
relation equality; it changes nothing for the scheme construction that
consumes restrictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

from .terms import (
    App, O, Sym, Term, Var,
    CapExceeded, HorsError, NameGen, ParseError,
    app, letter_counts, print_term, spine, substitute, _Lexer, _parse_term,
    _normalize_letter,
)


@dataclass(frozen=True)
class SymTransition:
    letter: str
    rank: int
    arg_states: tuple[str, ...]
    target: str
    output: Term  # over x1..x_rank (sort o) and symbols


@dataclass(frozen=True)
class EpsTransition:
    source: str
    target: str
    output: Term  # over x1 (sort o) and symbols


Transition = SymTransition | EpsTransition


def xvar(i: int) -> Var:
    return Var(f"x{i}", O)


@dataclass(frozen=True)
class Ftt:
    states: frozenset
    finals: frozenset
    transitions: tuple[Transition, ...]

    def __post_init__(self):
        if not self.finals <= self.states:
            raise HorsError("final states must be states")
        for tr in self.transitions:
            vs = _output_var_indices(tr.output)
            bound = tr.rank if isinstance(tr, SymTransition) else 1
            if any(i < 1 or i > bound for i in vs):
                raise HorsError(f"transition output uses variables outside x1..x{bound}")


def _output_var_indices(t: Term) -> list[int]:
    match t:
        case Var(name, _):
            if not name.startswith("x"):
                raise HorsError(f"transducer outputs use x<i> variables, got {name}")
            return [int(name[1:])]
        case App(fn, arg):
            return _output_var_indices(fn) + _output_var_indices(arg)
        case Sym():
            return []
        case _:
            raise HorsError("transducer outputs contain only symbols and variables")


def is_linear(a: Ftt) -> bool:
    """No output term uses the same variable twice."""
    for tr in a.transitions:
        vs = _output_var_indices(tr.output)
        if len(vs) != len(set(vs)):
            return False
    return True


def is_complete(a: Ftt) -> bool:
    """Every left-side variable appears in the output term."""
    for tr in a.transitions:
        vs = set(_output_var_indices(tr.output))
        need = tr.rank if isinstance(tr, SymTransition) else 1
        if vs != set(range(1, need + 1)):
            return False
    return True


def is_restriction(a: Ftt) -> bool:
    """Single state; outputs relabel-and-drop or single-child erasure."""
    if len(a.states) != 1:
        return False
    for tr in a.transitions:
        if not isinstance(tr, SymTransition):
            return False
        head, args = spine(tr.output)
        if isinstance(head, Var):
            if args:
                return False
            continue
        if not isinstance(head, Sym):
            return False
        idxs = []
        for child in args:
            if not isinstance(child, Var):
                return False
            idxs.append(int(child.name[1:]))
        if idxs != sorted(set(idxs)):
            return False
    return True


# ---------------------------------------------------------------------------
# Relation semantics

def run_ftt(a: Ftt, t: Term, max_pairs: int = 200_000) -> set[Term]:
    """All outputs of accepting runs of the transducer on a tree."""
    eps_by_source: dict[str, list[EpsTransition]] = {}
    sym_by_key: dict[tuple[str, int], list[SymTransition]] = {}
    for tr in a.transitions:
        if isinstance(tr, EpsTransition):
            eps_by_source.setdefault(tr.source, []).append(tr)
        else:
            sym_by_key.setdefault((tr.letter, tr.rank), []).append(tr)

    memo: dict[Term, set[tuple[str, Term]]] = {}

    def runs(node: Term) -> set[tuple[str, Term]]:
        if node in memo:
            return memo[node]
        head, children = spine(node)
        assert isinstance(head, Sym)
        child_runs = [runs(c) for c in children]
        pairs: set[tuple[str, Term]] = set()
        for tr in sym_by_key.get((head.letter, head.rank), []):
            pools = []
            ok = True
            for want, cr in zip(tr.arg_states, child_runs):
                pool = [out for (q, out) in cr if q == want]
                if not pool:
                    ok = False
                    break
                pools.append(pool)
            if not ok:
                continue
            used = set(_output_var_indices(tr.output))
            # discarded children only need some run in the required state
            iter_pools = [
                pool if (i + 1) in used else pool[:1]
                for i, pool in enumerate(pools)
            ]
            for combo in product(*iter_pools):
                bindings = {
                    f"x{i + 1}": combo[i] for i in range(len(combo)) if (i + 1) in used
                }
                pairs.add((tr.target, substitute(tr.output, bindings)))
                if len(pairs) > max_pairs:
                    raise CapExceeded("run-ftt", f"more than {max_pairs} run pairs")
        # epsilon saturation
        frontier = list(pairs)
        while frontier:
            q, out = frontier.pop()
            for tr in eps_by_source.get(q, []):
                used = set(_output_var_indices(tr.output))
                new_out = substitute(tr.output, {"x1": out} if 1 in used else {})
                pair = (tr.target, new_out)
                if pair not in pairs:
                    pairs.add(pair)
                    frontier.append(pair)
                    if len(pairs) > max_pairs:
                        raise CapExceeded("run-ftt", f"more than {max_pairs} run pairs")
        memo[node] = pairs
        return pairs

    return {out for (q, out) in runs(t) if q in a.finals}


def identity_ftt(symbols, state: str = "q") -> Ftt:
    """One-state transducer mapping every tree over ``symbols`` to itself."""
    transitions = [
        SymTransition(
            letter=letter,
            rank=rank,
            arg_states=(state,) * rank,
            target=state,
            output=app(Sym(letter, rank), *[xvar(i + 1) for i in range(rank)]),
        )
        for letter, rank in sorted(symbols)
    ]
    return Ftt(frozenset({state}), frozenset({state}), tuple(transitions))


# ---------------------------------------------------------------------------
# Decomposition into complete + restriction

RESTRICTION_STATE = "q"


def decompose(a: Ftt) -> tuple[Ftt, Ftt]:
    """Split a linear FTT into a complete FTT and a restriction with the
    same composed relation.

    Discarding transitions get their output root replaced by a fresh
    tagged letter that additionally carries the discarded subtrees; the
    restriction maps each tag back to the original root (or erases it
    when the output was a bare variable) and keeps every other letter
    unchanged.
    """
    if not is_linear(a):
        raise HorsError("decompose requires a linear transducer")

    used_letters = set()
    for tr in a.transitions:
        if isinstance(tr, SymTransition):
            used_letters.add(tr.letter)
        for letter, _ in _symbols_in(tr.output):
            used_letters.add(letter)
    gen = NameGen(used_letters)

    complete_transitions: list[Transition] = []
    restriction_map: dict[tuple[str, int], Term] = {}
    identity_syms: set[tuple[str, int]] = set()

    for tr in a.transitions:
        arity = tr.rank if isinstance(tr, SymTransition) else 1
        used = set(_output_var_indices(tr.output))
        discarded = [i for i in range(1, arity + 1) if i not in used]
        if not discarded:
            complete_transitions.append(tr)
            identity_syms |= _symbols_in(tr.output)
            continue
        junk = [xvar(i) for i in discarded]
        head, args = spine(tr.output)
        if isinstance(head, Var):
            # bare-variable output: tag node wraps the kept child, the
            # restriction erases it
            tag = gen.fresh("fwd")
            new_output = app(Sym(tag, 1 + len(junk)), head, *junk)
            restriction_map[(tag, 1 + len(junk))] = xvar(1)
        else:
            assert isinstance(head, Sym)
            n = len(args)
            tag = gen.fresh(f"{head.letter}_keep")
            new_output = app(Sym(tag, n + len(junk)), *args, *junk)
            restriction_map[(tag, n + len(junk))] = app(
                Sym(head.letter, n), *[xvar(i + 1) for i in range(n)]
            )
            for child in args:
                identity_syms |= _symbols_in(child)
        if isinstance(tr, SymTransition):
            complete_transitions.append(
                SymTransition(tr.letter, tr.rank, tr.arg_states, tr.target, new_output)
            )
        else:
            complete_transitions.append(EpsTransition(tr.source, tr.target, new_output))

    complete = Ftt(a.states, a.finals, tuple(complete_transitions))

    q = RESTRICTION_STATE
    rtransitions: list[SymTransition] = []
    for (letter, rank), out in sorted(restriction_map.items()):
        rtransitions.append(SymTransition(letter, rank, (q,) * rank, q, out))
    for letter, rank in sorted(identity_syms):
        rtransitions.append(
            SymTransition(
                letter, rank, (q,) * rank, q,
                app(Sym(letter, rank), *[xvar(i + 1) for i in range(rank)]),
            )
        )
    restriction = Ftt(frozenset({q}), frozenset({q}), tuple(rtransitions))
    return complete, restriction


def _symbols_in(t: Term) -> set[tuple[str, int]]:
    match t:
        case Sym(letter, rank):
            return {(letter, rank)}
        case App(fn, arg):
            return _symbols_in(fn) | _symbols_in(arg)
        case _:
            return set()


# ---------------------------------------------------------------------------
# Count analysis (Pareto fronts) for large inputs
#
# run_ftt materializes output sets, which is hopeless when the transducer
# branches at every node.  Questions about letter counts of the outputs
# only need, per (node, state), the Pareto-maximal achievable count
# vectors.

def _pareto(vectors) -> set[tuple[int, ...]]:
    vs = set(vectors)
    return {
        v for v in vs
        if not any(w != v and all(a >= b for a, b in zip(w, v)) for w in vs)
    }


def max_letter_counts(a: Ftt, t: Term, letters) -> set[tuple[int, ...]]:
    """Pareto-maximal vectors (count of each letter, in the given order)
    over all outputs of accepting runs on ``t``."""
    letters = tuple(letters)

    eps_by_source: dict[str, list[EpsTransition]] = {}
    sym_by_key: dict[tuple[str, int], list[SymTransition]] = {}
    for tr in a.transitions:
        if isinstance(tr, EpsTransition):
            eps_by_source.setdefault(tr.source, []).append(tr)
        else:
            sym_by_key.setdefault((tr.letter, tr.rank), []).append(tr)

    def out_counts(output: Term) -> tuple[int, ...]:
        counts = {}
        for s in _sym_multiset(output):
            counts[s[0]] = counts.get(s[0], 0) + 1
        return tuple(counts.get(letter, 0) for letter in letters)

    memo: dict[Term, dict[str, set[tuple[int, ...]]]] = {}

    def table(node: Term) -> dict[str, set[tuple[int, ...]]]:
        if node in memo:
            return memo[node]
        head, children = spine(node)
        assert isinstance(head, Sym)
        child_tables = [table(c) for c in children]
        acc: dict[str, set[tuple[int, ...]]] = {}
        for tr in sym_by_key.get((head.letter, head.rank), []):
            child_fronts = []
            ok = True
            used = set(_output_var_indices(tr.output))
            for i, want in enumerate(tr.arg_states):
                front = child_tables[i].get(want)
                if front is None:
                    ok = False
                    break
                child_fronts.append(front if (i + 1) in used else {(0,) * len(letters)})
            if not ok:
                continue
            base = out_counts(tr.output)
            for combo in product(*child_fronts) if child_fronts else [()]:
                vec = tuple(base[j] + sum(c[j] for c in combo) for j in range(len(letters)))
                acc.setdefault(tr.target, set()).add(vec)
        # epsilon saturation over fronts
        changed = True
        while changed:
            changed = False
            for q in list(acc):
                for tr in eps_by_source.get(q, []):
                    base = out_counts(tr.output)
                    keep = 1 in set(_output_var_indices(tr.output))
                    for vec in list(acc[q]):
                        nv = tuple(
                            base[j] + (vec[j] if keep else 0) for j in range(len(letters))
                        )
                        tgt = acc.setdefault(tr.target, set())
                        if nv not in tgt:
                            before = len(tgt)
                            tgt |= {nv}
                            acc[tr.target] = _pareto(tgt)
                            if len(acc[tr.target]) != before or nv in acc[tr.target]:
                                changed = True
        acc = {q: _pareto(front) for q, front in acc.items()}
        memo[node] = acc
        return acc

    root = table(t)
    merged: set[tuple[int, ...]] = set()
    for q in a.finals:
        merged |= root.get(q, set())
    return _pareto(merged)


def _sym_multiset(t: Term) -> list[tuple[str, int]]:
    match t:
        case Sym(letter, rank):
            return [(letter, rank)]
        case App(fn, arg):
            return _sym_multiset(fn) + _sym_multiset(arg)
        case _:
            return []


# ---------------------------------------------------------------------------
# Concrete syntax
#
#   state p
#   final p
#   a^2 (p1,x1) (p2,x2) -> q : <output term>
#   eps p x1 -> q : <output term>

def parse_ftt(text: str) -> Ftt:
    states: set[str] = set()
    finals: set[str] = set()
    transitions: list[Transition] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("state "):
            states.add(line[len("state "):].strip())
            continue
        if line.startswith("final "):
            name = line[len("final "):].strip()
            states.add(name)
            finals.add(name)
            continue
        if ":" not in line:
            raise ParseError("transition is missing `: <output>`", lineno, len(line))
        left, output_src = line.split(":", 1)
        if "->" not in left:
            raise ParseError("transition is missing `->`", lineno, 1)
        lhs, target = left.rsplit("->", 1)
        target = target.strip()
        states.add(target)
        lhs = lhs.strip()
        if lhs.startswith("eps "):
            rest = lhs[len("eps "):].split()
            if len(rest) != 2 or rest[1] != "x1":
                raise ParseError("epsilon transition must read `eps p x1`", lineno, 1)
            states.add(rest[0])
            output = _parse_output(output_src, 1, lineno)
            transitions.append(EpsTransition(rest[0], target, output))
            continue
        head, _, args_src = lhs.partition(" ")
        if "^" not in head:
            raise ParseError(f"expected letter^rank, got {head!r}", lineno, 1)
        letter, rank_src = head.split("^", 1)
        letter = _normalize_letter(letter)
        rank = int(rank_src)
        arg_states: list[str] = []
        pieces = args_src.split()
        if len(pieces) != rank:
            raise ParseError(
                f"transition on {letter}^{rank} must list {rank} (state,var) pairs",
                lineno, 1,
            )
        for i, piece in enumerate(pieces, start=1):
            if not (piece.startswith("(") and piece.endswith(")") and "," in piece):
                raise ParseError(f"malformed pair {piece!r}", lineno, 1)
            st, v = piece[1:-1].split(",", 1)
            if v.strip() != f"x{i}":
                raise ParseError(f"pair {i} must bind x{i}", lineno, 1)
            arg_states.append(st.strip())
            states.add(st.strip())
        output = _parse_output(output_src, rank, lineno)
        transitions.append(SymTransition(letter, rank, tuple(arg_states), target, output))
    return Ftt(frozenset(states), frozenset(finals), tuple(transitions))


def _parse_output(src: str, rank: int, lineno: int) -> Term:
    lx = _Lexer(src, lineno)
    env = {f"x{i}": O for i in range(1, rank + 1)}
    t = _parse_term(lx, env, {})
    if not lx.at_end():
        lx.error("trailing input after output term")
    return t


def print_ftt(a: Ftt) -> str:
    lines = []
    for st in sorted(a.states):
        lines.append(f"final {st}" if st in a.finals else f"state {st}")
    for tr in a.transitions:
        if isinstance(tr, EpsTransition):
            lines.append(f"eps {tr.source} x1 -> {tr.target} : {print_term(tr.output)}")
        else:
            pairs = " ".join(
                f"({st},x{i + 1})" for i, st in enumerate(tr.arg_states)
            )
            lhs = f"{tr.letter}^{tr.rank} {pairs}".strip()
            lines.append(f"{lhs} -> {tr.target} : {print_term(tr.output)}")
    return "\n".join(lines) + "\n"
