"""Concrete syntax and data model for rule programs.

A rule program is an ordered decision list of target rules followed by
the rules defining its exception (``abN``) predicates, e.g.::

    target(X,'2') :- not 3(X), 54(X), not ab1(X).
    ab1(X) :- 7(X).

Predicates are bare kernel ids (``54``), semantic labels (``bathtub``),
or exception ids (``ab1``). ``not`` is negation as failure; the program
must be stratified (the dependency graph over ab predicates is acyclic).
The printer and parser are exact inverses on valid rule sets.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field

from .errors import CollisionError, FormatError, ParseError, StratificationError

_EXCEPTION_RE = re.compile(r"^ab[1-9][0-9]*$")
_IDENT_RE = re.compile(r"^[a-z][a-z0-9_]*$")
_NUMERIC_RE = re.compile(r"^(0|[1-9][0-9]*)$")

RESERVED_PREDICATES = frozenset({"target", "not"})


def is_exception_name(name: str) -> bool:
    return bool(_EXCEPTION_RE.match(name))


def is_valid_label(name: str) -> bool:
    """True when *name* can stand as a semantic predicate identifier."""
    return (
        bool(_IDENT_RE.match(name))
        and name not in RESERVED_PREDICATES
        and not is_exception_name(name)
    )


@dataclass(frozen=True)
class Predicate:
    """A body/head predicate, identified by its printed name.

    ``kernel_id`` records which kernel backs the predicate; it survives
    semantic relabelling so a labelled rule set stays executable. It is
    deliberately excluded from equality so that printing and re-parsing
    yields an equal rule set.
    """

    name: str
    kernel_id: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if _NUMERIC_RE.match(self.name):
            if self.kernel_id is None:
                object.__setattr__(self, "kernel_id", int(self.name))
        elif not _IDENT_RE.match(self.name):
            raise ValueError(f"invalid predicate name {self.name!r}")

    @property
    def is_exception(self) -> bool:
        return is_exception_name(self.name)

    @property
    def exception_index(self) -> int:
        if not self.is_exception:
            raise ValueError(f"{self.name} is not an exception predicate")
        return int(self.name[2:])

    def __str__(self):
        return self.name


def kernel_predicate(kernel_id: int) -> Predicate:
    return Predicate(name=str(kernel_id), kernel_id=kernel_id)


def exception_predicate(index: int) -> Predicate:
    if index < 1:
        raise ValueError("exception ids start at 1")
    return Predicate(name=f"ab{index}")


@dataclass(frozen=True)
class Literal:
    """A body literal: a predicate, optionally under negation as failure."""

    predicate: Predicate
    negated: bool = False

    def __str__(self):
        atom = f"{self.predicate}(X)"
        return f"not {atom}" if self.negated else atom


@dataclass(frozen=True)
class Rule:
    """One rule of the program.

    Target rules carry a class label; exception rules carry their ab head.
    ``coverage`` is the number of training rows the rule covered when it
    was learned; it orders the decision list but does not take part in
    structural equality (the printed syntax does not carry it).
    """

    label: str | None
    exception: Predicate | None
    body: tuple[Literal, ...]
    coverage: int = field(default=0, compare=False)

    def __post_init__(self):
        if (self.label is None) == (self.exception is None):
            raise ValueError("rule must have exactly one of label / exception head")
        if self.exception is not None and not self.exception.is_exception:
            raise ValueError(f"exception head {self.exception} is not an ab predicate")
        names = [lit.predicate.name for lit in self.body]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate predicate in rule body: {names}")
        if self.exception is not None and self.exception.name in names:
            raise ValueError(f"rule head {self.exception} occurs in its own body")

    @property
    def is_target(self) -> bool:
        return self.label is not None

    def head_text(self) -> str:
        if self.is_target:
            return f"target(X,'{self.label}')"
        return f"{self.exception}(X)"

    def __str__(self):
        if not self.body:
            return f"{self.head_text()}."
        return f"{self.head_text()} :- " + ", ".join(map(str, self.body)) + "."


def target_rule(label, body, coverage=0) -> Rule:
    return Rule(label=label, exception=None, body=tuple(body), coverage=coverage)


def exception_rule(index, body, coverage=0) -> Rule:
    return Rule(
        label=None, exception=exception_predicate(index),
        body=tuple(body), coverage=coverage,
    )


@dataclass(frozen=True)
class RuleSet:
    """An ordered decision list of target rules plus its exception rules.

    ``class_labels`` lists classes in order of first appearance;
    ``kernel_universe`` is the sorted set of kernel ids referenced by the
    rules (the significant kernels). Both are derived from the rules, so
    only the rules themselves take part in equality.
    """

    rules: tuple[Rule, ...]
    class_labels: tuple[str, ...] = field(compare=False, default=())
    kernel_universe: tuple[int, ...] = field(compare=False, default=())

    def __post_init__(self):
        seen_labels, labels = set(), []
        for rule in self.rules:
            if rule.is_target and rule.label not in seen_labels:
                seen_labels.add(rule.label)
                labels.append(rule.label)
        object.__setattr__(self, "class_labels", tuple(labels))
        kernels = set()
        for rule in self.rules:
            for lit in rule.body:
                pred = lit.predicate
                if not pred.is_exception and pred.kernel_id is not None:
                    kernels.add(pred.kernel_id)
        object.__setattr__(self, "kernel_universe", tuple(sorted(kernels)))

    @property
    def target_rules(self) -> tuple[Rule, ...]:
        return tuple(r for r in self.rules if r.is_target)

    @property
    def exception_rules(self) -> tuple[Rule, ...]:
        return tuple(r for r in self.rules if not r.is_target)

    def exception_groups(self) -> dict[int, list[Rule]]:
        """Defining rules per exception id, in program order."""
        groups: dict[int, list[Rule]] = {}
        for rule in self.rules:
            if not rule.is_target:
                groups.setdefault(rule.exception.exception_index, []).append(rule)
        return groups

    def validate(self) -> None:
        """Check the ab-predicate structure: defined, consecutive, acyclic."""
        groups = self.exception_groups()
        defined = set(groups)
        referenced = {
            lit.predicate.exception_index
            for rule in self.rules
            for lit in rule.body
            if lit.predicate.is_exception
        }
        undefined = referenced - defined
        if undefined:
            raise StratificationError(
                f"exception predicates referenced but never defined: "
                f"{sorted('ab%d' % i for i in undefined)}"
            )
        if defined and sorted(defined) != list(range(1, max(defined) + 1)):
            raise StratificationError(
                f"exception ids must be consecutive from 1, got {sorted(defined)}"
            )
        # Cycle check via depth-first search over ab dependencies.
        deps = {
            idx: {
                lit.predicate.exception_index
                for rule in rules
                for lit in rule.body
                if lit.predicate.is_exception
            }
            for idx, rules in groups.items()
        }
        state: dict[int, int] = {}  # 1 = on stack, 2 = done

        def visit(node, trail):
            if state.get(node) == 2:
                return
            if state.get(node) == 1:
                cycle = trail[trail.index(node):] + [node]
                raise StratificationError(
                    "exception dependency cycle: "
                    + " -> ".join(f"ab{i}" for i in cycle)
                )
            state[node] = 1
            for nxt in sorted(deps[node]):
                visit(nxt, trail + [node])
            state[node] = 2

        for idx in sorted(deps):
            visit(idx, [])


def ruleset(rules) -> RuleSet:
    return RuleSet(rules=tuple(rules))


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------

def print_ruleset(rs: RuleSet) -> str:
    """Render a rule set, one rule per line, trailing newline included."""
    lines = [str(rule) for rule in rs.rules]
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _Scanner:
    """Character scanner with line/column tracking; ``%`` starts a comment."""

    def __init__(self, text):
        self.text = text
        self.pos = 0
        self.line = 1
        self.col = 1

    def _advance(self, n=1):
        for _ in range(n):
            if self.pos < len(self.text):
                if self.text[self.pos] == "\n":
                    self.line += 1
                    self.col = 1
                else:
                    self.col += 1
                self.pos += 1

    def skip_space(self):
        while self.pos < len(self.text):
            ch = self.text[self.pos]
            if ch == "%":
                while self.pos < len(self.text) and self.text[self.pos] != "\n":
                    self._advance()
            elif ch.isspace():
                self._advance()
            else:
                break

    def take(self, n):
        self._advance(n)

    def eof(self):
        self.skip_space()
        return self.pos >= len(self.text)

    def error(self, message):
        raise ParseError(message, line=self.line, column=self.col)

    def peek(self):
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, token):
        self.skip_space()
        if not self.text.startswith(token, self.pos):
            self.error(f"expected {token!r}")
        self._advance(len(token))

    def match(self, token):
        self.skip_space()
        if self.text.startswith(token, self.pos):
            self._advance(len(token))
            return True
        return False

    def ident(self, pattern=re.compile(r"[A-Za-z0-9_]+")):
        self.skip_space()
        m = pattern.match(self.text, self.pos)
        if not m:
            self.error("expected an identifier")
        self._advance(len(m.group()))
        return m.group()

    def quoted_label(self):
        """Class label wrapped in straight quotes or a backquote pair."""
        self.skip_space()
        if self.peek() not in ("'", "`"):
            self.error("expected a quoted class label")
        self._advance()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] != "'":
            if self.text[self.pos] == "\n":
                self.error("unterminated class label")
            self._advance()
        if self.pos >= len(self.text):
            self.error("unterminated class label")
        label = self.text[start:self.pos]
        self._advance()  # closing '
        if not label:
            self.error("empty class label")
        return label


_VAR_RE = re.compile(r"[A-Z][A-Za-z0-9_]*")
_NOT_RE = re.compile(r"not\b")


def _parse_atom(sc: _Scanner, rule_var: str):
    """Parse ``pred(Var)`` and return the predicate name."""
    name = sc.ident()
    sc.expect("(")
    var = sc.ident(_VAR_RE)
    if var != rule_var:
        sc.error(f"variable {var!r} does not match rule variable {rule_var!r}")
    sc.expect(")")
    return name


def _make_predicate(sc, name):
    if _NUMERIC_RE.match(name) or _IDENT_RE.match(name):
        return Predicate(name=name)
    sc.error(f"invalid predicate name {name!r}")


def parse_ruleset(text: str) -> RuleSet:
    """Parse rule text into a validated, stratified rule set.

    Whitespace (including line breaks inside a rule) is insignificant;
    rules end at ``.``. Target rules keep their textual order; exception
    rules are gathered after them, preserving their own order.
    """
    sc = _Scanner(text)
    targets: list[Rule] = []
    exceptions: list[Rule] = []
    while not sc.eof():
        head_name = sc.ident()
        if head_name == "target":
            sc.expect("(")
            rule_var = sc.ident(_VAR_RE)
            sc.expect(",")
            label = sc.quoted_label()
            sc.expect(")")
            head_label, head_exc = label, None
        elif is_exception_name(head_name):
            sc.expect("(")
            rule_var = sc.ident(_VAR_RE)
            sc.expect(")")
            head_label, head_exc = None, Predicate(name=head_name)
        else:
            sc.error(
                f"rule head must be target(...) or an ab predicate, got {head_name!r}"
            )
        body: list[Literal] = []
        if sc.match(":-"):
            while True:
                sc.skip_space()
                negated = bool(_NOT_RE.match(sc.text, sc.pos))
                if negated:
                    sc.take(3)
                name = _parse_atom(sc, rule_var)
                body.append(Literal(predicate=_make_predicate(sc, name), negated=negated))
                if not sc.match(","):
                    break
        sc.expect(".")
        if head_exc is not None and any(
            l.predicate.name == head_exc.name for l in body
        ):
            raise StratificationError(
                f"exception dependency cycle: {head_exc.name} -> {head_exc.name}"
            )
        try:
            rule = Rule(label=head_label, exception=head_exc, body=tuple(body))
        except ValueError as exc:
            sc.error(str(exc))
        (targets if rule.is_target else exceptions).append(rule)
    rs = RuleSet(rules=tuple(targets) + tuple(exceptions))
    rs.validate()
    return rs


# ---------------------------------------------------------------------------
# Semantic label maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelMap:
    """kernel id -> semantic predicate name, injective."""

    entries: dict[int, str]

    def __post_init__(self):
        for kid, label in self.entries.items():
            if not is_valid_label(label):
                raise ValueError(f"label {label!r} for kernel {kid} is not a valid "
                                 f"predicate identifier")
        seen: dict[str, int] = {}
        for kid, label in self.entries.items():
            if label in seen:
                raise CollisionError(
                    f"kernels {seen[label]} and {kid} share label {label!r}"
                )
            seen[label] = kid

    def inverse(self) -> dict[str, int]:
        return {label: kid for kid, label in self.entries.items()}


def apply_labels(rs: RuleSet, labels: LabelMap) -> RuleSet:
    """Rename kernel predicates to their semantic labels.

    Kernels without a label entry keep their numeric name; ab predicates
    and class labels are untouched. The kernel id is retained on every
    renamed predicate, so the labelled rule set remains executable.
    """
    def rename(pred: Predicate) -> Predicate:
        if pred.is_exception or pred.kernel_id is None:
            return pred
        label = labels.entries.get(pred.kernel_id)
        if label is None:
            return pred
        return Predicate(name=label, kernel_id=pred.kernel_id)

    new_rules = []
    for rule in rs.rules:
        body = tuple(
            Literal(predicate=rename(lit.predicate), negated=lit.negated)
            for lit in rule.body
        )
        names = [lit.predicate.name for lit in body]
        if len(set(names)) != len(names):
            raise CollisionError(
                f"labelling collapses two predicates of one rule body: {names}"
            )
        new_rules.append(
            Rule(label=rule.label, exception=rule.exception, body=body,
                 coverage=rule.coverage)
        )
    return RuleSet(rules=tuple(new_rules))


def resolve_labels(rs: RuleSet, labels: LabelMap) -> RuleSet:
    """Re-attach kernel ids to a parsed labelled rule set via the label map."""
    inverse = labels.inverse()

    def attach(pred: Predicate) -> Predicate:
        if pred.is_exception or pred.kernel_id is not None:
            return pred
        if pred.name in inverse:
            return Predicate(name=pred.name, kernel_id=inverse[pred.name])
        return pred

    new_rules = tuple(
        Rule(
            label=rule.label, exception=rule.exception,
            body=tuple(
                Literal(predicate=attach(lit.predicate), negated=lit.negated)
                for lit in rule.body
            ),
            coverage=rule.coverage,
        )
        for rule in rs.rules
    )
    return RuleSet(rules=new_rules)


def write_labelmap(labels: LabelMap, path) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["kernel_id", "label"])
        for kid in sorted(labels.entries):
            writer.writerow([str(kid), labels.entries[kid]])


def load_labelmap(path) -> LabelMap:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["kernel_id", "label"]:
        raise FormatError(f"{path}: header must be 'kernel_id,label'")
    entries = {}
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise FormatError(f"{path}: row {r} must have 2 fields")
        try:
            kid = int(row[0])
        except ValueError:
            raise FormatError(f"{path}: row {r}: bad kernel_id {row[0]!r}") from None
        if kid in entries:
            raise FormatError(f"{path}: duplicate kernel_id {kid}")
        entries[kid] = row[1]
    try:
        return LabelMap(entries=entries)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Size statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RuleSetStats:
    """Size measures of a rule set.

    ``unique_predicates`` counts distinct non-ab body predicates (ab
    predicates are bookkeeping, not kernels); ``unique_predicates_with_ab``
    is kept alongside so the other counting convention stays readable.
    ``size`` counts every body literal, negated and ab literals included.
    """

    rule_count: int
    unique_predicates: int
    size: int
    unique_predicates_with_ab: int

    def __str__(self):
        return (f"rules={self.rule_count} predicates={self.unique_predicates} "
                f"size={self.size}")


def stats(rs: RuleSet) -> RuleSetStats:
    names = set()
    size = 0
    for rule in rs.rules:
        size += len(rule.body)
        for lit in rule.body:
            names.add(lit.predicate.name)
    non_ab = {n for n in names if not is_exception_name(n)}
    return RuleSetStats(
        rule_count=len(rs.rules),
        unique_predicates=len(non_ab),
        size=size,
        unique_predicates_with_ab=len(names),
    )
