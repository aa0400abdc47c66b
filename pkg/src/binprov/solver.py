"""Satisfiability over presence conditions.

Constraint sets coming out of the binary diff are small (tens of atoms), so a
plain DPLL over a distributive CNF conversion is enough. The point of this
module is not raw speed but a precise contract:

* ``solve`` returns either a total ``Model`` over every atom the solver has
  seen, or an ``Unsatisfiable`` carrying a minimal-by-deletion core.
* ``enumerate_models`` brute-forces every assignment, used as the ground
  truth the DPLL answer is checked against in tests.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .conditions import (
    And,
    BoolConst,
    Condition,
    DefinedAtom,
    Not,
    OpaqueAtom,
    Or,
    atom_keys,
    evaluate,
    parse_expression,
    to_text,
)
from .errors import AtomLimitError, InvariantError

__all__ = [
    "AtomTable",
    "Model",
    "Unsatisfiable",
    "solve",
    "enumerate_models",
    "parse_expression",
    "ENUMERATION_ATOM_LIMIT",
]

ENUMERATION_ATOM_LIMIT = 20

# Literal = (atom index, polarity). Clause = frozenset of literals.
Literal = tuple[int, bool]
Clause = frozenset[Literal]


class AtomTable:
    """Insertion-ordered bidirectional atom registry.

    Atoms are keyed by their textual identity: a defined(NAME) atom by NAME,
    an opaque atom by its verbatim text. Indices are dense and stable.
    """

    def __init__(self) -> None:
        self._index: dict[str, int] = {}
        self._keys: list[str] = []

    def intern(self, key: str) -> int:
        idx = self._index.get(key)
        if idx is None:
            idx = len(self._keys)
            self._index[key] = idx
            self._keys.append(key)
        return idx

    def index_of(self, key: str) -> int:
        return self._index[key]

    def key_of(self, index: int) -> str:
        return self._keys[index]

    def __len__(self) -> int:
        return len(self._keys)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def keys(self) -> list[str]:
        return list(self._keys)

    def add_condition(self, cond: Condition) -> None:
        for key in atom_keys(cond):
            self.intern(key)


@dataclass(frozen=True)
class Model:
    """Total truth assignment over the atom table.

    ``free_atoms`` are atoms no constraint forced either way; they default to
    disabled (unless solving preferred enablement) so the pipeline never
    enables a macro without evidence.
    """

    assignment: dict[str, bool]
    free_atoms: frozenset[str] = field(default_factory=frozenset)

    def enabled(self) -> set[str]:
        return {k for k, v in self.assignment.items() if v}

    def to_text(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in sorted(self.assignment.items()))


@dataclass(frozen=True)
class Unsatisfiable:
    """Conflict answer carrying a deletion-minimal subset of the input."""

    core: tuple[Condition, ...]


def _nnf(cond: Condition, negated: bool = False) -> Condition:
    if isinstance(cond, BoolConst):
        return BoolConst(cond.value != negated)
    if isinstance(cond, (DefinedAtom, OpaqueAtom)):
        return Not(cond) if negated else cond
    if isinstance(cond, Not):
        return _nnf(cond.operand, not negated)
    if isinstance(cond, And):
        parts = tuple(_nnf(op, negated) for op in cond.operands)
        return Or(parts) if negated else And(parts)
    if isinstance(cond, Or):
        parts = tuple(_nnf(op, negated) for op in cond.operands)
        return And(parts) if negated else Or(parts)
    raise TypeError(f"not a condition: {cond!r}")


def _atom_key(cond: Condition) -> str:
    if isinstance(cond, DefinedAtom):
        return cond.name
    if isinstance(cond, OpaqueAtom):
        return cond.text
    raise TypeError(f"not an atom: {cond!r}")


def _cnf_clauses(cond: Condition, table: AtomTable) -> list[Clause] | None:
    """CNF of a single condition in NNF. None means the condition is false."""
    nnf = _nnf(cond)

    def walk(c: Condition) -> list[Clause] | None:
        if isinstance(c, BoolConst):
            return [] if c.value else None
        if isinstance(c, (DefinedAtom, OpaqueAtom)):
            return [frozenset({(table.intern(_atom_key(c)), True)})]
        if isinstance(c, Not):
            return [frozenset({(table.intern(_atom_key(c.operand)), False)})]
        if isinstance(c, And):
            out: list[Clause] = []
            for op in c.operands:
                sub = walk(op)
                if sub is None:
                    return None
                out.extend(sub)
            return out
        if isinstance(c, Or):
            # Distribute: cross product of the operand clause sets. Fragment
            # guards are shallow, so the blowup stays tiny in practice.
            product: list[Clause] = [frozenset()]
            for op in c.operands:
                sub = walk(op)
                if sub is None:
                    continue
                if not sub:
                    return []  # one disjunct is trivially true
                product = [a | b for a in product for b in sub]
            if product == [frozenset()]:
                return None  # every disjunct was false
            return product
        raise TypeError(f"not a condition: {c!r}")

    clauses = walk(nnf)
    if clauses is None:
        return None
    # Drop tautological clauses (contain both polarities of an atom).
    kept = []
    for cl in clauses:
        if any((idx, not pol) in cl for idx, pol in cl):
            continue
        kept.append(cl)
    return kept


def _dpll(clauses: list[Clause], prefer_true: bool = False) -> dict[int, bool] | None:
    assignment: dict[int, bool] = {}
    decision_order = (True, False) if prefer_true else (False, True)

    def simplify(cls: list[Clause], idx: int, val: bool) -> list[Clause] | None:
        out = []
        for cl in cls:
            if (idx, val) in cl:
                continue
            if (idx, not val) in cl:
                reduced = cl - {(idx, not val)}
                if not reduced:
                    return None
                out.append(reduced)
            else:
                out.append(cl)
        return out

    def recurse(cls: list[Clause]) -> bool:
        # Unit propagation.
        while True:
            unit = next((cl for cl in cls if len(cl) == 1), None)
            if unit is None:
                break
            (idx, val), = unit
            assignment[idx] = val
            nxt = simplify(cls, idx, val)
            if nxt is None:
                del assignment[idx]
                return False
            cls = nxt
        if not cls:
            return True
        # Pure literal elimination.
        polarity: dict[int, set[bool]] = {}
        for cl in cls:
            for idx, val in cl:
                polarity.setdefault(idx, set()).add(val)
        pures = [(idx, vals.pop()) for idx, vals in polarity.items() if len(vals) == 1]
        if pures:
            for idx, val in pures:
                assignment[idx] = val
                nxt = simplify(cls, idx, val)
                if nxt is None:  # cannot happen for a pure literal
                    return False
                cls = nxt
            if not cls:
                return True
        # Decide on the smallest-index open atom. False first by default so
        # unconstrained-but-mentioned atoms land disabled.
        open_atoms = {idx for cl in cls for idx, _ in cl}
        pick = min(open_atoms)
        for val in decision_order:
            assignment[pick] = val
            nxt = simplify(cls, pick, val)
            if nxt is not None and recurse(nxt):
                return True
            del assignment[pick]
        return False

    ok = recurse(list(clauses))
    return assignment if ok else None


def _minimize_core(constraints: list[Condition], table: AtomTable) -> tuple[Condition, ...]:
    """Single deletion pass: drop each constraint that is not needed for UNSAT."""
    core = list(constraints)
    i = 0
    while i < len(core):
        trial = core[:i] + core[i + 1:]
        if _sat_status(trial, table) is None:
            core = trial
        else:
            i += 1
    return tuple(core)


def _sat_status(
    constraints: list[Condition], table: AtomTable, prefer_true: bool = False
) -> dict[int, bool] | None:
    clauses: list[Clause] = []
    for cond in constraints:
        sub = _cnf_clauses(cond, table)
        if sub is None:
            return None
        clauses.extend(sub)
    return _dpll(clauses, prefer_true=prefer_true)


def solve(constraints, table: AtomTable | None = None, prefer_enabled: bool = False):
    """Decide a constraint set.

    Returns a total Model over every atom in ``table`` (atoms from the
    constraints are interned first), or an Unsatisfiable with a minimal core.
    Atoms left open by the search default to disabled; ``prefer_enabled``
    flips both the decision order and that default.
    """
    constraints = list(constraints)
    if table is None:
        table = AtomTable()
    for cond in constraints:
        table.add_condition(cond)

    partial = _sat_status(constraints, table, prefer_true=prefer_enabled)
    if partial is None:
        return Unsatisfiable(core=_minimize_core(constraints, table))

    assignment: dict[str, bool] = {}
    free: set[str] = set()
    for idx in range(len(table)):
        key = table.key_of(idx)
        if idx in partial:
            assignment[key] = partial[idx]
        else:
            assignment[key] = prefer_enabled
            free.add(key)

    # Soundness gate: a model that fails its own constraints is a solver bug.
    for cond in constraints:
        if not evaluate(cond, assignment, assignment):
            raise InvariantError(f"model violates constraint {to_text(cond)!r}")
    return Model(assignment=assignment, free_atoms=frozenset(free))


def enumerate_models(constraints, table: AtomTable | None = None, limit: int | None = None):
    """All satisfying assignments by brute force, in lexicographic order
    (False < True, atoms in table order). Guarding oracle for ``solve``."""
    constraints = list(constraints)
    if table is None:
        table = AtomTable()
    for cond in constraints:
        table.add_condition(cond)
    keys = table.keys()
    if len(keys) > ENUMERATION_ATOM_LIMIT:
        raise AtomLimitError(
            f"{len(keys)} atoms exceed the enumeration limit of {ENUMERATION_ATOM_LIMIT}"
        )

    models = []
    for bits in itertools.product((False, True), repeat=len(keys)):
        env = dict(zip(keys, bits))
        if all(evaluate(c, env, env) for c in constraints):
            models.append(Model(assignment=env, free_atoms=frozenset()))
            if limit is not None and len(models) >= limit:
                break
    return models
