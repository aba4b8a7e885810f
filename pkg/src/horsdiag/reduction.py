"""The reduction relation of a scheme, bounded enumeration, and diagonal
profiles.

Enumeration is breadth-first over reduction steps with a visited set on
term structure; the step-indexed frontiers are what the desk-scale lemma
checks quantify over.  Budget exhaustion is always reported, never
silent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .terms import (
    App, NonTerm, Rule, Scheme, Sym, Term,
    HorsError, app, has_nonterminal, is_tree, letter_counts, print_term,
    spine, substitute, term_sort,
)


@dataclass(frozen=True)
class ReductionBudget:
    max_steps: int = 50
    max_term_size: int = 2000
    max_results: int = 100_000

    def __post_init__(self):
        if self.max_steps <= 0 or self.max_term_size <= 0 or self.max_results <= 0:
            raise HorsError("budget components must be positive")


def term_size(t: Term) -> int:
    size = 0
    stack = [t]
    while stack:
        u = stack.pop()
        size += 1
        if isinstance(u, App):
            stack.append(u.fn)
            stack.append(u.arg)
    return size


def _rewrite_head(s: Scheme, head: NonTerm, args: list[Term]) -> list[Term]:
    out = []
    for rule in s.rules_for(head.name):
        if len(rule.params) != len(args):
            continue
        bindings = dict(zip(rule.param_names(), args))
        out.append(substitute(rule.body, bindings))
    return out


def step(s: Scheme, t: Term, leftmost: bool = False) -> list[Term]:
    """All one-step successors of a closed ground-sorted term.

    An outermost nonterminal redex is rewritten by any matching rule;
    below a symbol head, exactly one child is rewritten.  With
    ``leftmost``, a child may be rewritten only when all children to its
    left are already free of nonterminals.
    """
    if not term_sort(t).is_ground:
        raise HorsError("step expects a term of sort o")
    head, args = spine(t)
    if isinstance(head, NonTerm):
        return _rewrite_head(s, head, args)
    if isinstance(head, Sym):
        out: list[Term] = []
        for i, child in enumerate(args):
            if leftmost and any(has_nonterminal(c) for c in args[:i]):
                break
            for child2 in step(s, child, leftmost):
                out.append(app(head, *args[:i], child2, *args[i + 1:]))
        return out
    raise HorsError(f"step expects a closed term, found head {print_term(head)}")


def leftmost_step(s: Scheme, t: Term) -> list[Term]:
    return step(s, t, leftmost=True)


@dataclass
class GenResult:
    """Enumeration outcome: the trees found, by the step at which each
    was first reached, plus whether any cap truncated the search."""

    trees: tuple[Term, ...]
    first_seen: dict[Term, int]
    truncated: bool
    caps_hit: list[str] = field(default_factory=list)

    def tree_set(self) -> set[Term]:
        return set(self.trees)


def generate(
    s: Scheme,
    budget: ReductionBudget,
    start: Term | None = None,
    leftmost: bool = False,
) -> GenResult:
    """All trees reachable from ``start`` (default: the initial
    nonterminal) within the budget."""
    if start is None:
        if s.initial not in s.sorts:
            raise HorsError(f"initial nonterminal {s.initial} is not declared")
        start = NonTerm(s.initial, s.sorts[s.initial])
    frontier = [start]
    seen = {start}
    trees: list[Term] = []
    first_seen: dict[Term, int] = {}
    caps: list[str] = []

    if is_tree(start):
        trees.append(start)
        first_seen[start] = 0

    for depth in range(1, budget.max_steps + 1):
        if not frontier:
            break
        nxt: list[Term] = []
        for t in frontier:
            if is_tree(t):
                continue
            for u in step(s, t, leftmost):
                if u in seen:
                    continue
                seen.add(u)
                if term_size(u) > budget.max_term_size:
                    if "max_term_size" not in caps:
                        caps.append("max_term_size")
                    continue
                if is_tree(u):
                    trees.append(u)
                    first_seen[u] = depth
                    if len(trees) >= budget.max_results:
                        caps.append("max_results")
                        return _finish(trees, first_seen, caps, truncated=True)
                nxt.append(u)
        frontier = nxt
    if frontier:
        caps.append("max_steps")
    return _finish(trees, first_seen, caps, truncated=bool(frontier) or bool(caps))


def _finish(trees, first_seen, caps, truncated) -> GenResult:
    ordered = tuple(sorted(trees, key=print_term))
    return GenResult(trees=ordered, first_seen=first_seen, truncated=truncated, caps_hit=caps)


def diag_profile(s: Scheme, sigma, budget: ReductionBudget) -> list[int | None]:
    """f[k] = best over trees reachable within k steps of the minimum
    letter count over sigma; None while no tree has been generated yet.

    With empty sigma the minimum over no letters is taken as 0, so the
    profile distinguishes "no tree yet" (None) from "some tree" (0).
    """
    sigma = tuple(sigma)
    res = generate(s, budget)
    best: list[int | None] = [None] * (budget.max_steps + 1)
    for tree, depth in res.first_seen.items():
        counts = letter_counts(tree)
        score = min((counts.get(a, 0) for a in sigma), default=0)
        cur = best[depth]
        if cur is None or score > cur:
            best[depth] = score
    running: int | None = None
    out: list[int | None] = []
    for k in range(budget.max_steps + 1):
        v = best[k]
        if v is not None and (running is None or v > running):
            running = v
        out.append(running)
    return out
