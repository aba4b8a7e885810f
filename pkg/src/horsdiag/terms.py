"""Sorts, terms, rules, and schemes: the data layer of the whole library.

A scheme is a nondeterministic rewriting system over simply-sorted
applicative terms.  Letters are unranked strings; a symbol is a letter
together with the rank it is used at, so the same letter may appear with
several ranks inside one scheme.  The reserved letter BULLET labels
auxiliary nodes introduced by the order-lowering translation and is
ignored by tree equivalence.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass


class HorsError(Exception):
    """Malformed input: sorts, terms, or scheme structure."""


class ParseError(HorsError):
    """Syntax error, carrying a 1-based line/column position."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{line}:{column}: {message}")
        self.line = line
        self.column = column


class CapExceeded(Exception):
    """A configured resource cap stopped an operation.

    Carries the stage name so drivers can report which part of the
    pipeline gave up.
    """

    def __init__(self, stage: str, detail: str):
        super().__init__(f"[{stage}] {detail}")
        self.stage = stage
        self.detail = detail


# ---------------------------------------------------------------------------
# Sorts

class Sort:
    """The ground sort o, or arg -> res.  Instances are interned, so
    equality and hashing are identity-based and cheap."""

    __slots__ = ("arg", "res", "order")
    _interned: dict[tuple, "Sort"] = {}

    def __new__(cls, arg: "Sort | None" = None, res: "Sort | None" = None):
        key = (arg, res)
        hit = cls._interned.get(key)
        if hit is not None:
            return hit
        if (arg is None) != (res is None):
            raise HorsError("a sort is ground or has both an argument and a result")
        self = object.__new__(cls)
        self.arg = arg
        self.res = res
        self.order = 0 if arg is None else max(1 + arg.order, res.order)
        cls._interned[key] = self
        return self

    @property
    def is_ground(self) -> bool:
        return self.arg is None

    def args(self) -> tuple["Sort", ...]:
        """The argument sorts a1..ak of a1 -> ... -> ak -> o."""
        out = []
        s = self
        while not s.is_ground:
            out.append(s.arg)
            s = s.res
        return tuple(out)

    def __repr__(self):
        return f"Sort({self})"

    def __str__(self):
        if self.is_ground:
            return "o"
        a = str(self.arg)
        if not self.arg.is_ground:
            a = f"({a})"
        return f"{a} -> {self.res}"


O = Sort()


def arrow(arg: Sort, res: Sort) -> Sort:
    return Sort(arg, res)


def fn_sort(args, res: Sort = O) -> Sort:
    """a1 -> a2 -> ... -> res."""
    s = res
    for a in reversed(tuple(args)):
        s = Sort(a, s)
    return s


def sym_sort(rank: int) -> Sort:
    """o^rank -> o."""
    return fn_sort([O] * rank)


def sort_order(s: Sort) -> int:
    """ord(o) = 0, ord(a -> b) = max(1 + ord(a), ord(b))."""
    return s.order


# ---------------------------------------------------------------------------
# Terms

Letter = str

BULLET: Letter = "•"
BULLET_ASCII = "_bullet"


@dataclass(frozen=True, slots=True)
class Var:
    name: str
    sort: Sort


@dataclass(frozen=True, slots=True)
class NonTerm:
    name: str
    sort: Sort


@dataclass(frozen=True, slots=True)
class Sym:
    letter: Letter
    rank: int

    @property
    def sort(self) -> Sort:
        return sym_sort(self.rank)


@dataclass(frozen=True, slots=True)
class App:
    fn: "Term"
    arg: "Term"


Term = Var | NonTerm | Sym | App


def app(fn: Term, *args: Term) -> Term:
    for a in args:
        fn = App(fn, a)
    return fn


def term_sort(t: Term) -> Sort:
    """The sort of a term; raises on ill-sorted applications."""
    if isinstance(t, (Var, NonTerm)):
        return t.sort
    if isinstance(t, Sym):
        return t.sort
    fs = term_sort(t.fn)
    if fs.is_ground:
        raise HorsError(f"cannot apply ground-sorted term: {print_term(t.fn)}")
    asort = term_sort(t.arg)
    if asort is not fs.arg:
        raise HorsError(
            f"sort mismatch in application {print_term(t)}: "
            f"expected {fs.arg}, got {asort}"
        )
    return fs.res


def spine(t: Term) -> tuple[Term, list[Term]]:
    """Decompose t into its head and argument list."""
    args: list[Term] = []
    while isinstance(t, App):
        args.append(t.arg)
        t = t.fn
    args.reverse()
    return t, args


def free_vars(t: Term) -> set[str]:
    match t:
        case Var(name, _):
            return {name}
        case App(fn, arg):
            return free_vars(fn) | free_vars(arg)
        case _:
            return set()


def has_nonterminal(t: Term) -> bool:
    match t:
        case NonTerm():
            return True
        case App(fn, arg):
            return has_nonterminal(fn) or has_nonterminal(arg)
        case _:
            return False


def is_tree(t: Term) -> bool:
    """A tree is a closed term of ground sort with no nonterminal."""
    match t:
        case Sym(_, r):
            return r == 0
        case App():
            h, args = spine(t)
            return (
                isinstance(h, Sym)
                and h.rank == len(args)
                and all(is_tree(a) for a in args)
            )
        case _:
            return False


def substitute(t: Term, bindings: dict[str, Term]) -> Term:
    """Simultaneous substitution of closed terms for variables.

    Every binding must be closed and sort-match its variable, which makes
    the substitution trivially capture-free.
    """
    for name, m in bindings.items():
        if free_vars(m):
            raise HorsError(f"substituted term for {name} is not closed")
    return _subst(t, bindings)


def _subst(t: Term, bindings: dict[str, Term]) -> Term:
    match t:
        case Var(name, sort):
            if name in bindings:
                m = bindings[name]
                if term_sort(m) is not sort:
                    raise HorsError(
                        f"substitution sort mismatch for {name}: "
                        f"{term_sort(m)} vs {sort}"
                    )
                return m
            return t
        case App(fn, arg):
            return App(_subst(fn, bindings), _subst(arg, bindings))
        case _:
            return t


# ---------------------------------------------------------------------------
# Rules and schemes

@dataclass(frozen=True, slots=True)
class Rule:
    head: str
    params: tuple[tuple[str, Sort], ...]
    body: Term

    def param_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.params)


@dataclass(frozen=True)
class Scheme:
    initial: str
    sorts: dict[str, Sort]
    rules: tuple[Rule, ...]

    def rules_for(self, name: str) -> list[Rule]:
        return [r for r in self.rules if r.head == name]

    def order(self) -> int:
        """Max sort order over nonterminals that have at least one rule."""
        ruled = {r.head for r in self.rules}
        if not ruled:
            return 0
        return max(self.sorts[n].order for n in ruled if n in self.sorts)

    def letters(self) -> set[tuple[Letter, int]]:
        """All (letter, rank) pairs used in rule bodies."""
        out: set[tuple[Letter, int]] = set()
        for r in self.rules:
            _collect_symbols(r.body, out)
        return out


def _collect_symbols(t: Term, out: set[tuple[Letter, int]]) -> None:
    match t:
        case Sym(letter, rank):
            out.add((letter, rank))
        case App(fn, arg):
            _collect_symbols(fn, out)
            _collect_symbols(arg, out)


def scheme_order(s: Scheme) -> int:
    return s.order()


def make_scheme(initial: str, sorts: dict[str, Sort], rules) -> Scheme:
    return Scheme(initial=initial, sorts=dict(sorts), rules=tuple(rules))


def mk_rule(scheme_sorts: dict[str, Sort], head: str, param_names, body: Term) -> Rule:
    """Build a rule, deriving parameter sorts from the head's declared sort."""
    hsort = scheme_sorts[head]
    names = tuple(param_names)
    sorts = hsort.args()
    if len(names) > len(sorts):
        raise HorsError(f"rule for {head} has more parameters than its sort allows")
    if len(names) != len(sorts):
        raise HorsError(
            f"rule for {head} must take all {len(sorts)} arguments (got {len(names)})"
        )
    return Rule(head=head, params=tuple(zip(names, sorts)), body=body)


def check_scheme(s: Scheme) -> list[str]:
    """All invariant violations, as human-readable diagnostics.

    Empty list iff the scheme is well-formed: the initial nonterminal is
    declared with ground sort, rule parameters are distinct and cover the
    head sort, bodies are ground-sorted, and bodies only use declared
    nonterminals and bound variables.
    """
    diags: list[str] = []
    if s.initial not in s.sorts:
        diags.append(f"initial nonterminal {s.initial} is not declared")
    elif not s.sorts[s.initial].is_ground:
        diags.append(f"initial nonterminal {s.initial} must have sort o")
    for i, r in enumerate(s.rules):
        where = f"rule {i + 1} ({r.head})"
        if r.head not in s.sorts:
            diags.append(f"{where}: head nonterminal is not declared")
            continue
        names = r.param_names()
        if len(set(names)) != len(names):
            diags.append(f"{where}: duplicate parameter names")
        expected = s.sorts[r.head].args()
        if tuple(sort for _, sort in r.params) != expected:
            diags.append(f"{where}: parameters do not match the head sort")
            continue
        env = dict(r.params)
        err = _check_body(r.body, env, s.sorts)
        if err is not None:
            diags.append(f"{where}: {err}")
            continue
        try:
            bsort = term_sort(r.body)
        except HorsError as e:
            diags.append(f"{where}: {e}")
            continue
        if not bsort.is_ground:
            diags.append(f"{where}: body has sort {bsort}, expected o")
    return diags


def _check_body(t: Term, env: dict[str, Sort], sorts: dict[str, Sort]) -> str | None:
    match t:
        case Var(name, sort):
            if name not in env:
                return f"unbound variable {name}"
            if env[name] is not sort:
                return f"variable {name} used at sort {sort}, declared {env[name]}"
        case NonTerm(name, sort):
            if name not in sorts:
                return f"undeclared nonterminal {name}"
            if sorts[name] is not sort:
                return f"nonterminal {name} used at sort {sort}, declared {sorts[name]}"
        case App(fn, arg):
            return _check_body(fn, env, sorts) or _check_body(arg, env, sorts)
    return None


# ---------------------------------------------------------------------------
# Tree predicates

def letter_counts(t: Term) -> Counter:
    """Occurrences of every letter in a tree, ranks ignored."""
    if has_nonterminal(t):
        raise HorsError("letter_counts expects a tree, got a term with nonterminals")
    counts: Counter = Counter()
    _count(t, counts)
    return counts


def _count(t: Term, counts: Counter) -> None:
    match t:
        case Sym(letter, _):
            counts[letter] += 1
        case App(fn, arg):
            _count(fn, counts)
            _count(arg, counts)
        case Var(name, _):
            raise HorsError(f"letter_counts: unexpected variable {name}")


def trees_equivalent(t1: Term, t2: Term) -> bool:
    """True iff the trees agree on the count of every letter except BULLET."""
    c1 = letter_counts(t1)
    c2 = letter_counts(t2)
    c1.pop(BULLET, None)
    c2.pop(BULLET, None)
    return +c1 == +c2


def leaf_letters(t: Term) -> list[Letter]:
    """Letters of the rank-0 nodes of a tree, left to right."""
    out: list[Letter] = []
    _leaves(t, out)
    return out


def _leaves(t: Term, out: list[Letter]) -> None:
    match t:
        case Sym(letter, 0):
            out.append(letter)
        case Sym():
            pass
        case App(fn, arg):
            _leaves(fn, out)
            _leaves(arg, out)
        case _:
            raise HorsError("leaf_letters expects a tree")


def is_narrow(t: Term, delta) -> bool:
    """True iff t has exactly |delta| leaves, each a distinct member of delta."""
    dset = set(delta)
    leaves = leaf_letters(t)
    return len(leaves) == len(dset) and set(leaves) == dset and len(set(leaves)) == len(leaves)


# ---------------------------------------------------------------------------
# Fresh names

class NameGen:
    """Deterministic fresh-name generation, disjoint from a used-name set.

    Names are base, base_1, base_2, ... with collisions against the used
    set skipped; every generated name is recorded as used.
    """

    def __init__(self, used):
        self.used = set(used)

    def fresh(self, base: str) -> str:
        if base not in self.used:
            self.used.add(base)
            return base
        i = 1
        while f"{base}_{i}" in self.used:
            i += 1
        name = f"{base}_{i}"
        self.used.add(name)
        return name


def scheme_names(s: Scheme) -> set[str]:
    """All identifiers of a scheme: nonterminals, variables, letters."""
    names = set(s.sorts)
    for r in s.rules:
        names.update(r.param_names())
        names |= {letter for letter, _ in _symbols_of(r.body)}
        names |= _vars_of(r.body)
    return names


def _symbols_of(t: Term) -> set[tuple[Letter, int]]:
    out: set[tuple[Letter, int]] = set()
    _collect_symbols(t, out)
    return out


def _vars_of(t: Term) -> set[str]:
    match t:
        case Var(name, _):
            return {name}
        case App(fn, arg):
            return _vars_of(fn) | _vars_of(arg)
        case _:
            return set()


# ---------------------------------------------------------------------------
# Concrete syntax
#
# Scheme files are line-oriented UTF-8 text with `#` comments:
#
#   start: S
#   nonterm S : o
#   nonterm F : (o -> o) -> o -> o
#   S -> F b^1 e^0
#   F g x -> g x
#
# Bodies: application is left-associative juxtaposition, parentheses
# allowed, symbols are written letter^rank, variables start lower-case,
# nonterminals upper-case.  `_bullet` is an accepted ASCII spelling of •.

_IDENT_START = tuple("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_") + (BULLET,)
_IDENT_CONT = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_'@") | {BULLET}


class _Lexer:
    def __init__(self, text: str, line: int):
        self.text = text
        self.line = line
        self.pos = 0
        self.tokens: list[tuple[str, str, int]] = []
        self._scan()
        self.idx = 0

    def _scan(self):
        text = self.text
        i = 0
        n = len(text)
        while i < n:
            c = text[i]
            if c in " \t":
                i += 1
                continue
            if c == "#":
                break
            col = i + 1
            if c == "(":
                self.tokens.append(("(", "(", col)); i += 1
            elif c == ")":
                self.tokens.append((")", ")", col)); i += 1
            elif c == ":":
                self.tokens.append((":", ":", col)); i += 1
            elif c == "^":
                self.tokens.append(("^", "^", col)); i += 1
            elif text.startswith("->", i):
                self.tokens.append(("->", "->", col)); i += 2
            elif c in _IDENT_START:
                j = i + 1
                while j < n and text[j] in _IDENT_CONT:
                    j += 1
                self.tokens.append(("ident", text[i:j], col))
                i = j
            elif c.isdigit():
                j = i + 1
                while j < n and text[j].isdigit():
                    j += 1
                self.tokens.append(("nat", text[i:j], col))
                i = j
            else:
                raise ParseError(f"unexpected character {c!r}", self.line, col)

    def peek(self):
        if self.idx < len(self.tokens):
            return self.tokens[self.idx]
        return ("eol", "", len(self.text) + 1)

    def next(self):
        tok = self.peek()
        self.idx += 1
        return tok

    def expect(self, kind: str):
        tok = self.next()
        if tok[0] != kind:
            raise ParseError(f"expected {kind!r}, got {tok[1]!r}", self.line, tok[2])
        return tok

    def at_end(self) -> bool:
        return self.idx >= len(self.tokens)

    def error(self, message: str):
        tok = self.peek()
        raise ParseError(message, self.line, tok[2])


def _parse_sort(lx: _Lexer) -> Sort:
    left = _parse_sort_atom(lx)
    if lx.peek()[0] == "->":
        lx.next()
        return Sort(left, _parse_sort(lx))
    return left


def _parse_sort_atom(lx: _Lexer) -> Sort:
    kind, val, _col = lx.peek()
    if kind == "(":
        lx.next()
        s = _parse_sort(lx)
        lx.expect(")")
        return s
    if kind == "ident" and val == "o":
        lx.next()
        return O
    lx.error("expected a sort")


def _normalize_letter(name: str) -> Letter:
    return BULLET if name == BULLET_ASCII else name


def _parse_term(lx: _Lexer, env: dict[str, Sort], sorts: dict[str, Sort]) -> Term:
    t = _parse_term_atom(lx, env, sorts)
    while lx.peek()[0] in ("ident", "("):
        t = App(t, _parse_term_atom(lx, env, sorts))
    return t


def _parse_term_atom(lx: _Lexer, env: dict[str, Sort], sorts: dict[str, Sort]) -> Term:
    kind, val, col = lx.peek()
    if kind == "(":
        lx.next()
        t = _parse_term(lx, env, sorts)
        lx.expect(")")
        return t
    if kind != "ident":
        lx.error("expected a term")
    lx.next()
    if lx.peek()[0] == "^":
        lx.next()
        rank_tok = lx.expect("nat")
        return Sym(_normalize_letter(val), int(rank_tok[1]))
    first = val[0]
    if first.isupper():
        if val not in sorts:
            raise ParseError(f"undeclared nonterminal {val}", lx.line, col)
        return NonTerm(val, sorts[val])
    if first.islower():
        if val not in env:
            raise ParseError(f"unbound variable {val}", lx.line, col)
        return Var(val, env[val])
    raise ParseError(f"{val!r} is a letter and needs a ^rank", lx.line, col)


def parse_scheme(text: str) -> Scheme:
    """Parse the scheme file format; raises ParseError with line/column."""
    initial: str | None = None
    sorts: dict[str, Sort] = {}
    rule_lines: list[tuple[int, _Lexer]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        lx = _Lexer(raw, lineno)
        if lx.at_end():
            continue
        kind, val, _ = lx.peek()
        if kind == "ident" and val == "start":
            lx.next()
            lx.expect(":")
            initial = lx.expect("ident")[1]
            if not lx.at_end():
                lx.error("trailing input after start declaration")
        elif kind == "ident" and val == "nonterm":
            lx.next()
            name = lx.expect("ident")[1]
            lx.expect(":")
            sorts[name] = _parse_sort(lx)
            if not lx.at_end():
                lx.error("trailing input after sort declaration")
        else:
            rule_lines.append((lineno, lx))

    if initial is None:
        raise ParseError("missing `start:` declaration", 1, 1)

    rules: list[Rule] = []
    for lineno, lx in rule_lines:
        head_tok = lx.expect("ident")
        head = head_tok[1]
        if head not in sorts:
            raise ParseError(f"undeclared nonterminal {head}", lineno, head_tok[2])
        params: list[str] = []
        while lx.peek()[0] == "ident":
            params.append(lx.next()[1])
        lx.expect("->")
        arg_sorts = sorts[head].args()
        if len(params) != len(arg_sorts):
            raise ParseError(
                f"rule for {head} must bind {len(arg_sorts)} parameters, got {len(params)}",
                lineno, 1,
            )
        env = dict(zip(params, arg_sorts))
        body = _parse_term(lx, env, sorts)
        if not lx.at_end():
            lx.error("trailing input after rule body")
        rules.append(Rule(head=head, params=tuple(zip(params, arg_sorts)), body=body))

    return Scheme(initial=initial, sorts=sorts, rules=tuple(rules))


def print_sort(s: Sort) -> str:
    return str(s)


def print_term(t: Term) -> str:
    match t:
        case Var(name, _):
            return name
        case NonTerm(name, _):
            return name
        case Sym(letter, rank):
            return f"{letter}^{rank}"
        case App():
            h, args = spine(t)
            parts = [print_term(h)]
            for a in args:
                s = print_term(a)
                parts.append(f"({s})" if isinstance(a, App) else s)
            return " ".join(parts)


def print_scheme(s: Scheme) -> str:
    lines = [f"start: {s.initial}"]
    for name in sorted(s.sorts):
        lines.append(f"nonterm {name} : {s.sorts[name]}")
    for r in s.rules:
        lhs = " ".join((r.head,) + r.param_names())
        lines.append(f"{lhs} -> {print_term(r.body)}")
    return "\n".join(lines) + "\n"
