"""Closure of scheme languages under linear tree transductions.

The pipeline follows the classical route: normalize the scheme, compose
it with the complete half of the transducer through a scheme-with-states
intermediate, cut the language down to the symbols the restriction half
can read, make the scheme productive, and finally apply the restriction
rule by rule.

Productivity is obtained by semantic specialization over the two-element
lattice (TOP = generates some tree) instead of a generic reflection:
nonterminal copies are indexed by the exact lattice values of their
arguments and rule instances whose bodies evaluate to BOTTOM are
dropped.  Two engines implement the semantics: hereditary monotone
function tables (any order, tiny value spaces only), and a demand-driven
summary engine for schemes whose argument sorts have order at most one,
which is what every stage of the decision pipeline produces.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

from . import posfn
from .posfn import PosFn, FALSE, TRUE
from .terms import (
    App, NonTerm, O, Rule, Scheme, Sort, Sym, Term, Var,
    CapExceeded, HorsError, NameGen,
    app, fn_sort, print_term, scheme_names, spine, term_sort,
)
from .transducers import (
    EpsTransition, Ftt, SymTransition,
    decompose, is_complete, is_linear, is_restriction,
)


# ---------------------------------------------------------------------------
# Normalization
#
# Every rule becomes  A x1..xp -> h (B1 x1..xp) .. (Br x1..xp)  with h a
# variable, a nonterminal, or a symbol, and the Bj nonterminals.  Rules
# are split at the cut points using fresh nonterminals; arguments of
# functional sort are eta-expanded to keep bodies ground.

def normalize(s: Scheme) -> Scheme:
    gen = NameGen(scheme_names(s))
    sorts = dict(s.sorts)
    done: list[Rule] = []
    work = list(s.rules)
    while work:
        rule = work.pop(0)
        head, args = spine(rule.body)
        param_terms = tuple(Var(n, srt) for n, srt in rule.params)
        new_args: list[Term] = []
        for m in args:
            if _is_full_param_app(m, param_terms):
                new_args.append(m)
                continue
            msort = term_sort(m)
            cname = gen.fresh("N")
            csort = fn_sort([srt for _, srt in rule.params], msort)
            sorts[cname] = csort
            eta_sorts = msort.args()
            taken = {n for n, _ in rule.params}
            eta_params = []
            for k, es in enumerate(eta_sorts, start=1):
                vn = f"z{k}"
                while vn in taken:
                    vn = vn + "'"
                taken.add(vn)
                eta_params.append((vn, es))
            cbody = app(m, *[Var(n, es) for n, es in eta_params])
            work.append(Rule(cname, rule.params + tuple(eta_params), cbody))
            new_args.append(app(NonTerm(cname, csort), *param_terms))
        done.append(Rule(rule.head, rule.params, app(head, *new_args)))
    return Scheme(initial=s.initial, sorts=sorts, rules=tuple(done))


def _is_full_param_app(m: Term, param_terms: tuple) -> bool:
    head, args = spine(m)
    return isinstance(head, NonTerm) and tuple(args) == param_terms


def is_normalized(s: Scheme) -> bool:
    for rule in s.rules:
        head, args = spine(rule.body)
        if isinstance(head, App):
            return False
        param_terms = tuple(Var(n, srt) for n, srt in rule.params)
        if not all(_is_full_param_app(m, param_terms) for m in args):
            return False
    return True


# ---------------------------------------------------------------------------
# Schemes with states

@dataclass(frozen=True, slots=True)
class PSym:
    """Output node of a rule body: a symbol over further body parts."""
    letter: str
    rank: int
    children: tuple


@dataclass(frozen=True, slots=True)
class PProc:
    """Process leaf of a rule body: run ``term`` under ``state``."""
    state: str
    term: Term


PTerm = PSym | PProc


@dataclass(frozen=True)
class HRule1:
    state: str
    head: str
    params: tuple[tuple[str, Sort], ...]
    body: PTerm


@dataclass(frozen=True)
class HRule2:
    state: str
    letter: str
    rank: int
    child_states: tuple[str, ...]


@dataclass(frozen=True)
class Horss:
    states: frozenset
    initial: tuple[str, str]  # (state, nonterminal)
    sorts: dict[str, Sort]
    rules1: tuple[HRule1, ...]
    rules2: tuple[HRule2, ...] = ()


def _pterm_subst(b: PTerm, bindings: dict[str, Term]) -> PTerm:
    if isinstance(b, PProc):
        from .terms import substitute
        return PProc(b.state, substitute(b.term, bindings))
    return PSym(b.letter, b.rank, tuple(_pterm_subst(c, bindings) for c in b.children))


def _pterm_is_tree(b: PTerm) -> bool:
    if isinstance(b, PProc):
        return False
    return all(_pterm_is_tree(c) for c in b.children)


def _pterm_to_term(b: PTerm) -> Term:
    assert isinstance(b, PSym)
    return app(Sym(b.letter, b.rank), *[_pterm_to_term(c) for c in b.children])


def horss_generate(h: Horss, max_steps: int, max_size: int = 4000) -> set[Term]:
    """Trees generated by a scheme-with-states, by bounded breadth-first
    search over process trees.  The independent oracle for the
    state-elimination construction."""
    start: PTerm = PProc(h.initial[0], NonTerm(h.initial[1], h.sorts[h.initial[1]]))
    frontier = {start}
    seen = {start}
    trees: set[Term] = set()

    def successors(b: PTerm) -> list[PTerm]:
        if isinstance(b, PSym):
            out = []
            for i, c in enumerate(b.children):
                for c2 in successors(c):
                    out.append(PSym(b.letter, b.rank, b.children[:i] + (c2,) + b.children[i + 1:]))
            return out
        head, args = spine(b.term)
        out = []
        if isinstance(head, NonTerm):
            for r in h.rules1:
                if r.state == b.state and r.head == head.name and len(r.params) == len(args):
                    out.append(_pterm_subst(r.body, dict(zip((n for n, _ in r.params), args))))
        elif isinstance(head, Sym):
            for r in h.rules2:
                if r.state == b.state and r.letter == head.letter and r.rank == head.rank:
                    out.append(PSym(head.letter, head.rank,
                                    tuple(PProc(q, m) for q, m in zip(r.child_states, args))))
        return out

    def psize(b: PTerm) -> int:
        if isinstance(b, PProc):
            from .reduction import term_size
            return term_size(b.term)
        return 1 + sum(psize(c) for c in b.children)

    for _ in range(max_steps):
        nxt = set()
        for b in frontier:
            for b2 in successors(b):
                if b2 in seen or psize(b2) > max_size:
                    continue
                seen.add(b2)
                if _pterm_is_tree(b2):
                    trees.add(_pterm_to_term(b2))
                else:
                    nxt.add(b2)
        frontier = nxt
        if not frontier:
            break
    return trees


def horss_to_hors(h: Horss) -> Scheme:
    """Eliminate states: nonterminal A at state q becomes A@q, with every
    argument duplicated once per state and occurrences translated
    accordingly.  The order of every nonterminal is unchanged."""
    states = sorted(h.states)
    n = len(states)
    h = _eliminate_embedded_symbols(h, states)

    bracket_memo: dict[Sort, Sort] = {}

    def bracket(s: Sort) -> Sort:
        if s.is_ground:
            return O
        hit = bracket_memo.get(s)
        if hit is None:
            res = bracket(s.res)
            a = bracket(s.arg)
            for _ in range(n):
                res = Sort(a, res)
            bracket_memo[s] = hit = res
        return hit

    def nt_name(a: str, q: str) -> str:
        return f"{a}@{q}"

    new_sorts: dict[str, Sort] = {}
    for a, srt in h.sorts.items():
        for q in states:
            new_sorts[nt_name(a, q)] = bracket(srt)

    def occ(m: Term, q: str, env: dict[str, Sort]) -> Term:
        head, args = spine(m)
        if isinstance(head, NonTerm):
            new_head: Term = NonTerm(nt_name(head.name, q), bracket(head.sort))
        elif isinstance(head, Var):
            new_head = Var(nt_name(head.name, q), bracket(head.sort))
        else:
            raise HorsError(
                "state elimination needs nonterminal- or variable-headed subterms; "
                f"found {print_term(m)}"
            )
        new_args = []
        for a in args:
            for q2 in states:
                new_args.append(occ(a, q2, env))
        return app(new_head, *new_args)

    def tr_body(b: PTerm, env: dict[str, Sort]) -> Term:
        if isinstance(b, PProc):
            return occ(b.term, b.state, env)
        return app(Sym(b.letter, b.rank), *[tr_body(c, env) for c in b.children])

    rules: list[Rule] = []
    for r in h.rules1:
        new_params = tuple(
            (nt_name(x, q), bracket(srt)) for x, srt in r.params for q in states
        )
        env = dict(r.params)
        rules.append(Rule(nt_name(r.head, r.state), new_params, tr_body(r.body, env)))

    initial = nt_name(h.initial[1], h.initial[0])
    return Scheme(initial=initial, sorts=new_sorts, rules=tuple(rules))


def _eliminate_embedded_symbols(h: Horss, states: list[str]) -> Horss:
    """Rewrite symbol-headed subterms inside process terms to wrapper
    nonterminals realizing the type-(II) rules, so occurrence translation
    only ever meets nonterminal or variable heads."""
    if not h.rules2 and not any(_body_has_symbol(r.body) for r in h.rules1):
        return h
    gen = NameGen(set(h.sorts) | {x for r in h.rules1 for x, _ in r.params})
    wrappers: dict[tuple[str, int], str] = {}
    new_rules1 = []
    sorts = dict(h.sorts)

    def wrapper_for(letter: str, rank: int) -> str:
        key = (letter, rank)
        if key not in wrappers:
            name = gen.fresh(f"W_{letter}")
            wrappers[key] = name
            sorts[name] = fn_sort([O] * rank)
        return wrappers[key]

    def rewrite(m: Term) -> Term:
        head, args = spine(m)
        new_args = [rewrite(a) for a in args]
        if isinstance(head, Sym):
            name = wrapper_for(head.letter, head.rank)
            head = NonTerm(name, sorts[name])
        return app(head, *new_args)

    def rewrite_body(b: PTerm) -> PTerm:
        if isinstance(b, PProc):
            return PProc(b.state, rewrite(b.term))
        return PSym(b.letter, b.rank, tuple(rewrite_body(c) for c in b.children))

    for r in h.rules1:
        new_rules1.append(HRule1(r.state, r.head, r.params, rewrite_body(r.body)))

    for r2 in h.rules2:
        key = (r2.letter, r2.rank)
        if key not in wrappers:
            continue
        name = wrappers[key]
        params = tuple((f"z{i + 1}", O) for i in range(r2.rank))
        body = PSym(
            r2.letter, r2.rank,
            tuple(PProc(q, Var(f"z{i + 1}", O)) for i, q in enumerate(r2.child_states)),
        )
        new_rules1.append(HRule1(r2.state, name, params, body))

    # wrappers demanded by rewriting but backed by no type-(II) rule stay
    # ruleless, matching a missing transition
    return Horss(h.states, h.initial, sorts, tuple(new_rules1), ())


def _body_has_symbol(b: PTerm) -> bool:
    if isinstance(b, PProc):
        return _term_has_symbol(b.term)
    return any(_body_has_symbol(c) for c in b.children)


def _term_has_symbol(m: Term) -> bool:
    head, args = spine(m)
    return isinstance(head, Sym) or any(_term_has_symbol(a) for a in args)


# ---------------------------------------------------------------------------
# Complete transductions

def apply_complete_ftt(s: Scheme, a: Ftt) -> Scheme:
    """Language image of a scheme under a complete linear transducer,
    built through a scheme-with-states."""
    if not is_linear(a):
        raise HorsError("apply_complete_ftt requires a linear transducer")
    if not is_complete(a):
        raise HorsError("apply_complete_ftt requires a complete transducer")
    sn = normalize(s)
    states = set(a.states)
    sgen = NameGen(states)
    q_init = sgen.fresh("qI")
    ngen = NameGen(scheme_names(sn))
    start = ngen.fresh("Start")

    sorts = dict(sn.sorts)
    sorts[start] = O

    sym_trs: dict[tuple[str, int], list[SymTransition]] = {}
    eps_trs: list[EpsTransition] = []
    for tr in a.transitions:
        if isinstance(tr, SymTransition):
            sym_trs.setdefault((tr.letter, tr.rank), []).append(tr)
        else:
            eps_trs.append(tr)

    rules1: list[HRule1] = []
    for q_f in sorted(a.finals):
        rules1.append(HRule1(q_init, start, (), PProc(q_f, NonTerm(sn.initial, O))))

    for rule in sn.rules:
        head, args = spine(rule.body)
        if isinstance(head, Sym):
            for tr in sym_trs.get((head.letter, head.rank), []):
                procs = {
                    f"x{i + 1}": PProc(tr.arg_states[i], args[i]) for i in range(head.rank)
                }
                body = _output_to_pterm(tr.output, procs)
                rules1.append(HRule1(tr.target, rule.head, rule.params, body))
        else:
            for p in sorted(states):
                rules1.append(HRule1(p, rule.head, rule.params, PProc(p, rule.body)))

    if eps_trs:
        arities: dict[str, tuple[Sort, ...]] = {
            name: srt.args() for name, srt in sn.sorts.items()
        }
        for tr in eps_trs:
            for name in sorted(sn.sorts):
                params = tuple((f"y{i + 1}", srt) for i, srt in enumerate(arities[name]))
                inner = app(NonTerm(name, sn.sorts[name]), *[Var(x, srt) for x, srt in params])
                body = _output_to_pterm(tr.output, {"x1": PProc(tr.source, inner)})
                rules1.append(HRule1(tr.target, name, params, body))

    h = Horss(
        states=frozenset(states | {q_init}),
        initial=(q_init, start),
        sorts=sorts,
        rules1=tuple(rules1),
    )
    return horss_to_hors(h)


def _output_to_pterm(output: Term, procs: dict[str, PTerm]) -> PTerm:
    head, args = spine(output)
    if isinstance(head, Var):
        if args:
            raise HorsError("transducer output variables have sort o")
        return procs[head.name]
    if isinstance(head, Sym):
        return PSym(head.letter, head.rank, tuple(_output_to_pterm(c, procs) for c in args))
    raise HorsError("transducer outputs contain only symbols and variables")


# ---------------------------------------------------------------------------
# Restriction to a symbol alphabet

def restrict_symbols(s: Scheme, theta) -> Scheme:
    """Keep exactly the trees using only symbols from theta, by deleting
    normalized rules that mention any other symbol."""
    theta = set(theta)
    sn = normalize(s)
    kept = [r for r in sn.rules if all(sym in theta for sym in _rule_symbols(r))]
    return Scheme(initial=sn.initial, sorts=dict(sn.sorts), rules=tuple(kept))


def _rule_symbols(r: Rule) -> set[tuple[str, int]]:
    out: set[tuple[str, int]] = set()

    def walk(t: Term):
        head, args = spine(t)
        if isinstance(head, Sym):
            out.add((head.letter, head.rank))
        for a in args:
            walk(a)

    walk(r.body)
    return out


# ---------------------------------------------------------------------------
# Finite-lattice semantics: hereditary monotone function tables
#
# TOP at ground sort means "generates at least one tree".  Nondeterminism
# is the join over a nonterminal's rules, every symbol is the meet of its
# arguments.

@dataclass(frozen=True)
class FnTable:
    sort: Sort
    outputs: tuple  # indexed by the canonical enumeration of domain(sort.arg)


LatticeValue = bool | FnTable

_MAX_DOMAIN = 4096
_MAX_ORDER = 3


def lattice_domain(sort: Sort) -> tuple:
    """All lattice values of a sort, in a canonical order."""
    if sort.order > _MAX_ORDER:
        raise CapExceeded("lattice", f"sort {sort} has order > {_MAX_ORDER}")
    return _domain(sort)


_domain_memo: dict[Sort, tuple] = {}


def _domain(sort: Sort) -> tuple:
    hit = _domain_memo.get(sort)
    if hit is not None:
        return hit
    if sort.is_ground:
        vals: tuple = (False, True)
    else:
        dom_a = _domain(sort.arg)
        dom_b = _domain(sort.res)
        if len(dom_b) ** len(dom_a) > 200_000:
            raise CapExceeded(
                "lattice", f"value space of {sort} is too large to enumerate"
            )
        vals = tuple(
            FnTable(sort, outs)
            for outs in product(dom_b, repeat=len(dom_a))
            if _monotone(outs, dom_a)
        )
    _domain_memo[sort] = vals
    return vals


def _monotone(outs, dom_a) -> bool:
    for i, u in enumerate(dom_a):
        for j, v in enumerate(dom_a):
            if lv_le(u, v) and not lv_le(outs[i], outs[j]):
                return False
    return True


def lv_le(u: LatticeValue, v: LatticeValue) -> bool:
    if isinstance(u, bool):
        return v or not u
    return all(lv_le(a, b) for a, b in zip(u.outputs, v.outputs))


def lv_bottom(sort: Sort) -> LatticeValue:
    if sort.is_ground:
        return False
    return FnTable(sort, tuple(lv_bottom(sort.res) for _ in _domain(sort.arg)))


def lv_apply(f: LatticeValue, v: LatticeValue) -> LatticeValue:
    assert isinstance(f, FnTable)
    return f.outputs[_domain(f.sort.arg).index(v)]


def _meet_value(rank: int) -> LatticeValue:
    if rank == 0:
        return True
    sort = fn_sort([O] * rank)
    rest_t = _meet_value(rank - 1)
    rest_b = lv_bottom(fn_sort([O] * (rank - 1)))
    return FnTable(sort, (rest_b, rest_t))


def _lv_join(u: LatticeValue, v: LatticeValue) -> LatticeValue:
    if isinstance(u, bool):
        return u or v
    return FnTable(u.sort, tuple(_lv_join(a, b) for a, b in zip(u.outputs, v.outputs)))


def lattice_semantics(s: Scheme) -> dict[str, LatticeValue]:
    """Least fixpoint of the rule operator; at ground sort the value is
    TOP exactly when the nonterminal generates some tree."""
    chi: dict[str, LatticeValue] = {name: lv_bottom(srt) for name, srt in s.sorts.items()}
    by_head: dict[str, list[Rule]] = {}
    for r in s.rules:
        by_head.setdefault(r.head, []).append(r)

    def eval_term(t: Term, nu: dict[str, LatticeValue]) -> LatticeValue:
        head, args = spine(t)
        if isinstance(head, Sym):
            vals = [eval_term(a, nu) for a in args]
            if head.rank == len(args):
                return all(vals)  # meet at ground
            f: LatticeValue = _meet_value(head.rank)
            for v in vals:
                f = lv_apply(f, v)
            return f
        if isinstance(head, Var):
            f = nu[head.name]
        else:
            f = chi[head.name]
        for a in args:
            f = lv_apply(f, eval_term(a, nu))
        return f

    def table_for(rules: list[Rule], arg_sorts: tuple[Sort, ...]) -> LatticeValue:
        doms = [_domain(srt) for srt in arg_sorts]
        space = 1
        for d in doms:
            space *= len(d)
        if space > _MAX_DOMAIN:
            raise CapExceeded(
                "lattice", f"argument space of size {space} exceeds {_MAX_DOMAIN}"
            )

        def build(i: int, nu_vals: list[LatticeValue]) -> LatticeValue:
            if i == len(doms):
                nu = {rules[0].params[j][0]: nu_vals[j] for j in range(len(nu_vals))}
                out: LatticeValue = False
                for r in rules:
                    nu_r = {r.params[j][0]: nu_vals[j] for j in range(len(nu_vals))}
                    out = out or eval_term(r.body, nu_r)
                    if out:
                        break
                return out
            return FnTable(
                fn_sort(arg_sorts[i:]),
                tuple(build(i + 1, nu_vals + [v]) for v in doms[i]),
            )

        if not arg_sorts:
            out: LatticeValue = False
            for r in rules:
                out = out or eval_term(r.body, {})
            return out
        return build(0, [])

    for name in s.sorts:
        if s.sorts[name].order > _MAX_ORDER:
            raise CapExceeded("lattice", f"nonterminal {name} has order > {_MAX_ORDER}")

    while True:
        changed = False
        for name, rules in by_head.items():
            new = table_for(rules, s.sorts[name].args())
            if new != chi[name]:
                chi[name] = _lv_join(chi[name], new)
                changed = True
        if not changed:
            return chi


# ---------------------------------------------------------------------------
# Demand-driven summaries (argument sorts of order <= 1)
#
# The value of a nonterminal given lattice values for its higher-order
# parameters is summarized as a monotone boolean function of its
# ground parameters.  Atom namespaces: 0..m-1 are slot atoms of a single
# order-1 value, PARAM_BASE+i is the i-th parameter of the nonterminal
# under evaluation, RESERVED_BASE+ are canonicalized free atoms inside
# table keys.

PARAM_BASE = 1_000_000
RESERVED_BASE = 10_000_000

_ENGINE_KEY_CAP = 200_000


class SummaryEngine:
    def __init__(self, s: Scheme):
        self.s = s
        self.by_head: dict[str, list[Rule]] = {}
        for r in s.rules:
            self.by_head.setdefault(r.head, []).append(r)
        for name, srt in s.sorts.items():
            for a in srt.args():
                if a.order > 1:
                    raise CapExceeded(
                        "make-productive",
                        f"argument sort {a} of {name} has order > 1; "
                        "only schemes of order <= 2 are supported by the summary engine",
                    )
        self.tab: dict[tuple, PosFn] = {}
        self.deps: dict[tuple, set[tuple]] = {}
        self.dirty: list[tuple] = []
        self.on_stack: set[tuple] = set()

    # -- keys ---------------------------------------------------------------

    def _canonical_key(self, name: str, hvals: tuple) -> tuple[tuple, dict]:
        """Rename free atoms (>= PARAM_BASE) in hvals to reserved ids;
        returns the key and the inverse renaming."""
        fwd: dict[int, int] = {}
        inv: dict[int, int] = {}

        def canon(f: PosFn) -> PosFn:
            minsets = sorted(f, key=lambda s: (len(s), sorted(s)))
            for ms in minsets:
                for a in sorted(ms):
                    if a >= PARAM_BASE and a not in fwd:
                        rid = RESERVED_BASE + len(fwd)
                        fwd[a] = rid
                        inv[rid] = a
            return posfn.rename(f, fwd)

        key = (name, tuple(canon(f) for f in hvals))
        return key, inv

    # -- fixpoint ------------------------------------------------------------

    def _get(self, key: tuple, reader: tuple | None) -> PosFn:
        if key not in self.tab:
            if len(self.tab) > _ENGINE_KEY_CAP:
                raise CapExceeded("make-productive", "too many summary keys")
            self.tab[key] = FALSE
            self.dirty.append(key)
        if reader is not None:
            self.deps.setdefault(key, set()).add(reader)
        return self.tab[key]

    def _stabilize(self):
        while self.dirty:
            key = self.dirty.pop()
            new = self._eval_key(key)
            if new != self.tab[key]:
                self.tab[key] = posfn.por(self.tab[key], new)
                for dep in self.deps.get(key, ()):
                    if dep not in self.dirty:
                        self.dirty.append(dep)

    def _eval_key(self, key: tuple) -> PosFn:
        name, hvals = key
        rules = self.by_head.get(name, [])
        if not rules:
            return FALSE
        srt = self.s.sorts[name]
        arg_sorts = srt.args()
        higher_positions = [i for i, a in enumerate(arg_sorts) if not a.is_ground]
        parts = []
        for r in rules:
            env: dict[str, PosFn] = {}
            hi = 0
            for i, (pname, psort) in enumerate(r.params):
                if psort.is_ground:
                    env[pname] = posfn.var(PARAM_BASE + i)
                else:
                    env[pname] = hvals[hi]
                    hi += 1
            assert hi == len(higher_positions)
            parts.append(self._eval_body(r.body, env, key))
        return posfn.por(*parts)

    def _eval_body(self, t: Term, env: dict[str, PosFn], reader: tuple | None) -> PosFn:
        head, args = spine(t)
        if isinstance(head, Sym):
            return posfn.pand(*[self._eval_body(a, env, reader) for a in args])
        if isinstance(head, Var):
            f = env[head.name]
            if not args:
                return f
            mapping = {i: self._eval_body(a, env, reader) for i, a in enumerate(args)}
            return posfn.subst(f, mapping)
        assert isinstance(head, NonTerm)
        return self._apply_summary(head.name, args, env, reader)

    def _apply_summary(self, name, args, env, reader) -> PosFn:
        arg_sorts = self.s.sorts[name].args()
        hvals = []
        for i, a in enumerate(args):
            if not arg_sorts[i].is_ground:
                hvals.append(self.summarize(a, env, reader))
        key, inv = self._canonical_key(name, tuple(hvals))
        f = self._get(key, reader)
        mapping: dict[int, PosFn] = {}
        for atom in posfn.atoms(f):
            if atom >= RESERVED_BASE:
                mapping[atom] = posfn.var(inv[atom])
            else:
                pos = atom - PARAM_BASE
                if pos < len(args):
                    mapping[atom] = self._eval_body(args[pos], env, reader)
                # unapplied trailing ground parameter: impossible here,
                # the application has ground sort
        return posfn.subst(f, mapping)

    def summarize(self, t: Term, env: dict[str, PosFn], reader: tuple | None) -> PosFn:
        """Value of a term of order-1 sort o^m -> o, as a PosFn over slot
        atoms 0..m-1 (plus free atoms of the enclosing context)."""
        m = len(term_sort(t).args())
        head, args = spine(t)
        j = len(args)
        if isinstance(head, Var):
            f = env[head.name]
            if j == 0:
                return f
            # shift unbound slots, then bind the applied prefix
            shift = {i: RESERVED_BASE * 2 + (i - j) for i in range(j, j + m)}
            f = posfn.rename(f, shift)
            bind = {i: self._eval_body(a, env, reader) for i, a in enumerate(args)}
            f = posfn.subst(f, bind)
            return posfn.rename(f, {RESERVED_BASE * 2 + k: k for k in range(m)})
        if isinstance(head, Sym):
            exprs = [self._eval_body(a, env, reader) for a in args]
            slots = [posfn.var(k) for k in range(m)]
            return posfn.pand(*exprs, *slots)
        assert isinstance(head, NonTerm)
        arg_sorts = self.s.sorts[head.name].args()
        hvals = []
        for i, a in enumerate(args):
            if not arg_sorts[i].is_ground:
                hvals.append(self.summarize(a, env, reader))
        key, inv = self._canonical_key(head.name, tuple(hvals))
        f = self._get(key, reader)
        mapping: dict[int, PosFn] = {}
        slot = 0
        ground_positions = [i for i, srt in enumerate(arg_sorts) if srt.is_ground]
        pos_to_slot = {}
        for i in ground_positions:
            if i >= j:
                pos_to_slot[i] = slot
                slot += 1
        assert slot == m
        for atom in posfn.atoms(f):
            if atom >= RESERVED_BASE:
                mapping[atom] = posfn.var(inv[atom])
            else:
                pos = atom - PARAM_BASE
                if pos < j:
                    mapping[atom] = self._eval_body(args[pos], env, reader)
                else:
                    mapping[atom] = posfn.var(pos_to_slot[pos])
        return posfn.subst(f, mapping)

    # -- public --------------------------------------------------------------

    def summary(self, name: str, hvals: tuple) -> PosFn:
        key, inv = self._canonical_key(name, hvals)
        self._get(key, None)
        self._stabilize()
        f = self.tab[key]
        mapping = {a: posfn.var(inv[a]) for a in posfn.atoms(f) if a >= RESERVED_BASE}
        return posfn.subst(f, mapping) if mapping else f

    def ground_value(self, t: Term, env: dict[str, PosFn]) -> bool:
        """Value of a ground-sorted term under concrete parameter values
        (env maps ground params to TRUE/FALSE, higher params to slot
        PosFns without free atoms)."""
        return self.stable_eval(t, env) == TRUE

    def stable_eval(self, t: Term, env: dict[str, PosFn]) -> PosFn:
        """Evaluate after the demanded part of the table has converged.
        Evaluation can demand fresh keys (summaries depend on table
        values), so iterate until no new key appears."""
        while True:
            n = len(self.tab)
            f = self._eval_body(t, env, None)
            self._stabilize()
            if len(self.tab) == n:
                return f

    def stable_summarize(self, t: Term, env: dict[str, PosFn]) -> PosFn:
        while True:
            n = len(self.tab)
            f = self.summarize(t, env, None)
            self._stabilize()
            if len(self.tab) == n:
                return f


# ---------------------------------------------------------------------------
# Productivity by semantic specialization

def make_productive(s: Scheme) -> Scheme:
    """A scheme with the same language and order in which every term
    reachable from the initial nonterminal can be reduced to a tree.

    Nonterminals are specialized by the exact lattice values of their
    arguments; rule instances whose bodies evaluate to BOTTOM under the
    given values are deleted.  If the language is empty, the canonical
    empty scheme (initial nonterminal, no rules) is returned.
    """
    if not any(r.head == s.initial for r in s.rules):
        return Scheme(initial=s.initial, sorts={s.initial: O}, rules=())
    engine = SummaryEngine(s)
    if engine.summary(s.initial, ()) != TRUE:
        return Scheme(initial=s.initial, sorts={s.initial: O}, rules=())
    return _Specializer(s, engine).run()


def _bits(ws: tuple[bool, ...]) -> str:
    return "".join("1" if b else "0" for b in ws)


def _posfn_tag(f: PosFn, counter: dict) -> str:
    if f not in counter:
        counter[f] = len(counter)
    return str(counter[f])


class _Specializer:
    """Builds the specialized scheme: copies keyed by exact argument
    values, higher-order parameter slots duplicated per demanded
    trailing-value vector."""

    def __init__(self, s: Scheme, engine: SummaryEngine):
        self.s = s
        self.engine = engine
        self.by_head = engine.by_head
        self.copies: dict[tuple, str] = {}
        self.interfaces: dict[tuple, dict[int, list[tuple[bool, ...]]]] = {}
        self.kept_rules: dict[tuple, list[Rule]] = {}
        self.gen = NameGen(scheme_names(s))
        self.val_tags: dict = {}

    def run(self) -> Scheme:
        root = self._demand(self.s.initial, (), ())
        # interface fixpoint: scan demands until no copy or slot grows;
        # surviving-rule sets are recomputed because the summary table
        # may still grow while scanning
        while True:
            before = (
                len(self.copies),
                {k: {i: len(v) for i, v in iface.items()} for k, iface in self.interfaces.items()},
            )
            for key in list(self.copies):
                self.kept_rules[key] = self._surviving_rules(key)
                for rule in self.kept_rules[key]:
                    self._scan(rule, key)
            after = (
                len(self.copies),
                {k: {i: len(v) for i, v in iface.items()} for k, iface in self.interfaces.items()},
            )
            if after == before:
                break
        return self._emit(root)

    # -- copy management ------------------------------------------------------

    def _demand(self, name: str, hvals: tuple, bvals: tuple) -> tuple:
        key = (name, hvals, bvals)
        if key in self.copies:
            return key
        if len(self.copies) > 50_000:
            raise CapExceeded("make-productive", "too many specialized nonterminals")
        if name == self.s.initial and not hvals and not bvals:
            cname = name
            self.gen.used.add(name)
        else:
            tag_parts = [_posfn_tag(f, self.val_tags) for f in hvals]
            tag_parts.extend("1" if b else "0" for b in bvals)
            cname = self.gen.fresh(f"{name}@{'_'.join(tag_parts) or 'c'}")
        self.copies[key] = cname
        self.interfaces[key] = {}
        self.kept_rules[key] = self._surviving_rules(key)
        return key

    def _surviving_rules(self, key: tuple) -> list[Rule]:
        name, hvals, bvals = key
        kept = []
        for rule in self.by_head.get(name, []):
            env = self._rule_env(rule, hvals, bvals)
            if self.engine.ground_value(rule.body, env):
                kept.append(rule)
        return kept

    def _rule_env(self, rule: Rule, hvals: tuple, bvals: tuple) -> dict[str, PosFn]:
        env: dict[str, PosFn] = {}
        hi = bi = 0
        for pname, psort in rule.params:
            if psort.is_ground:
                env[pname] = TRUE if bvals[bi] else FALSE
                bi += 1
            else:
                env[pname] = hvals[hi]
                hi += 1
        return env

    # -- evaluation helpers ---------------------------------------------------

    def _gval(self, t: Term, env) -> bool:
        return self.engine.stable_eval(t, env) == TRUE

    def _hval(self, t: Term, env) -> PosFn:
        return self.engine.stable_summarize(t, env)

    # -- demand scanning --------------------------------------------------------

    def _scan(self, rule: Rule, key: tuple):
        _, hvals, bvals = key
        env = self._rule_env(rule, hvals, bvals)
        pindex = {n: i for i, (n, _) in enumerate(rule.params)}
        self._scan_term(rule.body, env, key, pindex)

    def _scan_term(self, t: Term, env, key: tuple, pindex: dict[str, int]):
        head, args = spine(t)
        if isinstance(head, Sym):
            for a in args:
                self._scan_term(a, env, key, pindex)
            return
        if isinstance(head, Var):
            if not args:
                return
            ws = tuple(self._gval(a, env) for a in args)
            self._add_slot(self.interfaces[key], pindex[head.name], ws)
            for a in args:
                self._scan_term(a, env, key, pindex)
            return
        # nonterminal head, fully applied to ground sort
        self._scan_call(head.name, args, env, key, pindex, trailing=())

    def _scan_call(self, name, args, env, key, pindex, trailing):
        arg_sorts = self.s.sorts[name].args()
        hvals, bound_b = [], []
        for i, a in enumerate(args):
            if arg_sorts[i].is_ground:
                bound_b.append(self._gval(a, env))
            else:
                hvals.append(self._hval(a, env))
        bvals = tuple(bound_b) + tuple(trailing)
        callee = self._demand(name, tuple(hvals), bvals)
        callee_iface = self.interfaces[callee]
        # propagate demands into argument terms
        for i, a in enumerate(args):
            if arg_sorts[i].is_ground:
                self._scan_term(a, env, key, pindex)
            else:
                for ws in list(callee_iface.get(i, ())):
                    self._scan_arg(a, ws, env, key, pindex)

    def _scan_arg(self, t: Term, ws: tuple, env, key, pindex):
        """An order-1 argument demanded at trailing values ws."""
        head, args = spine(t)
        if isinstance(head, Var):
            bound = tuple(self._gval(a, env) for a in args)
            self._add_slot(self.interfaces[key], pindex[head.name], bound + ws)
            for a in args:
                self._scan_term(a, env, key, pindex)
            return
        if isinstance(head, Sym):
            for a in args:
                self._scan_term(a, env, key, pindex)
            return
        self._scan_call(head.name, args, env, key, pindex, trailing=ws)

    def _add_slot(self, iface: dict, pos: int, ws: tuple):
        lst = iface.setdefault(pos, [])
        if ws not in lst:
            lst.append(ws)
            lst.sort()

    # -- emission -----------------------------------------------------------------

    def _copy_sort(self, key: tuple) -> Sort:
        name, _, _ = key
        arg_sorts = self.s.sorts[name].args()
        iface = self.interfaces[key]
        parts: list[Sort] = []
        for i, srt in enumerate(arg_sorts):
            if srt.is_ground:
                parts.append(O)
            else:
                parts.extend([srt] * len(iface.get(i, ())))
        return fn_sort(parts)

    def _emit(self, root: tuple) -> Scheme:
        sorts = {cname: self._copy_sort(key) for key, cname in self.copies.items()}
        rules: list[Rule] = []
        for key, cname in self.copies.items():
            name, hvals, bvals = key
            iface = self.interfaces[key]
            for rule in self.kept_rules[key]:
                env = self._rule_env(rule, hvals, bvals)
                params: list[tuple[str, Sort]] = []
                for i, (pname, psort) in enumerate(rule.params):
                    if psort.is_ground:
                        params.append((pname, O))
                    else:
                        for ws in iface.get(i, ()):
                            params.append((f"{pname}@{_bits(ws)}", psort))
                pindex = {n: i for i, (n, _) in enumerate(rule.params)}
                body = self._tr_term(rule.body, env, key, pindex, sorts)
                rules.append(Rule(cname, tuple(params), body))
        rules.sort(key=lambda r: (r.head != self.copies[root], r.head, print_term(r.body)))
        return Scheme(initial=self.copies[root], sorts=sorts, rules=tuple(rules))

    def _tr_term(self, t: Term, env, key, pindex, sorts) -> Term:
        head, args = spine(t)
        if isinstance(head, Sym):
            return app(head, *[self._tr_term(a, env, key, pindex, sorts) for a in args])
        if isinstance(head, Var):
            if head.sort.is_ground:
                return head
            ws = tuple(self._gval(a, env) for a in args)
            return app(
                Var(f"{head.name}@{_bits(ws)}", head.sort),
                *[self._tr_term(a, env, key, pindex, sorts) for a in args],
            )
        return self._tr_call(head.name, args, env, key, pindex, sorts, trailing=())

    def _tr_call(self, name, args, env, key, pindex, sorts, trailing) -> Term:
        arg_sorts = self.s.sorts[name].args()
        hvals, bound_b = [], []
        for i, a in enumerate(args):
            if arg_sorts[i].is_ground:
                bound_b.append(self._gval(a, env))
            else:
                hvals.append(self._hval(a, env))
        callee = (name, tuple(hvals), tuple(bound_b) + tuple(trailing))
        cname = self.copies[callee]
        iface = self.interfaces[callee]
        out_args: list[Term] = []
        for i, a in enumerate(args):
            if arg_sorts[i].is_ground:
                out_args.append(self._tr_term(a, env, key, pindex, sorts))
            else:
                for ws in iface.get(i, ()):
                    out_args.append(self._tr_arg(a, ws, env, key, pindex, sorts))
        return app(NonTerm(cname, sorts[cname]), *out_args)

    def _tr_arg(self, t: Term, ws: tuple, env, key, pindex, sorts) -> Term:
        head, args = spine(t)
        if isinstance(head, Var):
            bound = tuple(self._gval(a, env) for a in args)
            return app(
                Var(f"{head.name}@{_bits(bound + ws)}", head.sort),
                *[self._tr_term(a, env, key, pindex, sorts) for a in args],
            )
        if isinstance(head, Sym):
            return app(head, *[self._tr_term(a, env, key, pindex, sorts) for a in args])
        return self._tr_call(head.name, args, env, key, pindex, sorts, trailing=ws)


# ---------------------------------------------------------------------------
# Restrictions

def apply_restriction(s: Scheme, r: Ftt) -> Scheme:
    """Apply a restriction transducer to a productive scheme.

    Requires that every symbol appearing in a generated tree has a
    transition; with the scheme productive, discarded subterms generate
    at least one accepted tree, so dropping them is language-exact.
    """
    if not is_restriction(r):
        raise HorsError("apply_restriction requires a restriction transducer")
    sn = normalize(s)
    by_key: dict[tuple[str, int], list[SymTransition]] = {}
    for tr in r.transitions:
        assert isinstance(tr, SymTransition)
        by_key.setdefault((tr.letter, tr.rank), []).append(tr)

    rules: list[Rule] = []
    for rule in sn.rules:
        head, args = spine(rule.body)
        if not isinstance(head, Sym):
            rules.append(rule)
            continue
        for tr in by_key.get((head.letter, head.rank), []):
            out_head, out_args = spine(tr.output)
            if isinstance(out_head, Var):
                i = int(out_head.name[1:])
                rules.append(Rule(rule.head, rule.params, args[i - 1]))
            else:
                assert isinstance(out_head, Sym)
                kept = [args[int(v.name[1:]) - 1] for v in out_args]  # type: ignore[union-attr]
                rules.append(Rule(rule.head, rule.params, app(out_head, *kept)))
    return Scheme(initial=sn.initial, sorts=dict(sn.sorts), rules=tuple(rules))


# ---------------------------------------------------------------------------
# Cleanup between stages

def trim(s: Scheme, inline: bool = True, max_inline_size: int = 4000) -> Scheme:
    """Language-preserving cleanup: drop unreachable nonterminals,
    delete rules that mention a dead nonterminal in a position that must
    produce a subtree, and inline single-rule non-recursive nonterminals
    whose occurrences are fully applied."""
    s = _drop_dead(s)
    s = _drop_unreachable(s)
    if inline:
        s = _inline_chains(s, max_inline_size)
        s = _drop_unreachable(s)
    return s


def _must_produce(t: Term) -> set[str]:
    head, args = spine(t)
    if isinstance(head, Sym):
        out: set[str] = set()
        for a in args:
            out |= _must_produce(a)
        return out
    if isinstance(head, NonTerm):
        return {head.name}
    return set()


def _drop_dead(s: Scheme) -> Scheme:
    rules = list(s.rules)
    while True:
        ruled = {r.head for r in rules}
        dead_nts = {
            name for name in s.sorts
            if name not in ruled
        }
        kept = [r for r in rules if not (_must_produce(r.body) & dead_nts)]
        if len(kept) == len(rules):
            return Scheme(initial=s.initial, sorts=dict(s.sorts), rules=tuple(kept))
        rules = kept


def _mentions(t: Term) -> set[str]:
    head, args = spine(t)
    out: set[str] = set()
    if isinstance(head, NonTerm):
        out.add(head.name)
    for a in args:
        out |= _mentions(a)
    return out


def _drop_unreachable(s: Scheme) -> Scheme:
    reach = {s.initial}
    frontier = [s.initial]
    by_head: dict[str, list[Rule]] = {}
    for r in s.rules:
        by_head.setdefault(r.head, []).append(r)
    while frontier:
        name = frontier.pop()
        for r in by_head.get(name, []):
            for m in _mentions(r.body):
                if m not in reach:
                    reach.add(m)
                    frontier.append(m)
    rules = tuple(r for r in s.rules if r.head in reach)
    mentioned = set(reach)
    sorts = {n: srt for n, srt in s.sorts.items() if n in mentioned or n == s.initial}
    return Scheme(initial=s.initial, sorts=sorts, rules=rules)


def _inline_chains(s: Scheme, max_size: int) -> Scheme:
    from .reduction import term_size

    for _ in range(50):
        by_head: dict[str, list[Rule]] = {}
        for r in s.rules:
            by_head.setdefault(r.head, []).append(r)
        target = None
        order = s.order()
        max_order_ruled = [n for n in by_head if s.sorts[n].order == order]
        for name, rules in by_head.items():
            if name == s.initial or len(rules) != 1:
                continue
            if name in _mentions(rules[0].body):
                continue
            if term_size(rules[0].body) > max_size:
                continue
            if s.sorts[name].order == order and len(max_order_ruled) == 1:
                continue
            if _all_occurrences_full(s, name):
                target = name
                break
        if target is None:
            return s
        s = _inline_one(s, target, by_head[target][0])
    return s


def _all_occurrences_full(s: Scheme, name: str) -> bool:
    arity = len(s.sorts[name].args())

    def ok(t: Term, applied: int) -> bool:
        if isinstance(t, NonTerm):
            return t.name != name or applied == arity
        if isinstance(t, App):
            return ok(t.fn, applied + 1) and ok(t.arg, 0)
        return True

    return all(ok(r.body, 0) for r in s.rules)


def _inline_one(s: Scheme, name: str, rule: Rule) -> Scheme:
    pnames = rule.param_names()

    def rewrite(t: Term) -> Term:
        head, args = spine(t)
        new_args = [rewrite(a) for a in args]
        if isinstance(head, NonTerm) and head.name == name:
            # arguments may be open; terms have no binders, so plain
            # structural substitution is capture-free
            from .terms import _subst
            return _subst(rule.body, dict(zip(pnames, new_args)))
        return app(head, *new_args)

    rules = tuple(
        Rule(r.head, r.params, rewrite(r.body)) for r in s.rules if r.head != name
    )
    sorts = {n: srt for n, srt in s.sorts.items() if n != name}
    return Scheme(initial=s.initial, sorts=sorts, rules=rules)


# ---------------------------------------------------------------------------
# Full linear transductions

def apply_ftt(s: Scheme, a: Ftt) -> Scheme:
    """Image of the scheme's language under an arbitrary linear
    transducer: complete part, symbol restriction, productivity,
    restriction part."""
    if not is_linear(a):
        raise HorsError("apply_ftt requires a linear transducer")
    complete, restriction = decompose(a)
    s1 = apply_complete_ftt(s, complete)
    theta = {(tr.letter, tr.rank) for tr in restriction.transitions}
    s2 = restrict_symbols(s1, theta)
    s2 = trim(s2, inline=False)
    s3 = make_productive(s2)
    s4 = apply_restriction(s3, restriction)
    return trim(s4)
