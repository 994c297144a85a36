"""Execution of a rule program against binarized instances.

``predict`` scans the target rules in decision-list order and returns the
class of the first rule whose body holds: a plain literal is true when
its kernel bit is 1 (negated: 0), and an ab literal is true when any of
its defining rule bodies holds, evaluated recursively. When no rule
fires the instance is ``unclassified``, which the metrics count as both
inaccurate and infidelitous. ``justify`` produces the full evaluation
trace as a printable proof tree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import AlignmentError
from .interchange import BinarizationTable
from .rules import Literal, Rule, RuleSet

UNCLASSIFIED = "unclassified"


def _bit_lookup(rs: RuleSet, bits):
    """Normalize the instance to a mapping kernel_id -> bool."""
    if isinstance(bits, dict):
        table = {int(k): bool(v) for k, v in bits.items()}
    else:
        vector = list(bits)
        if len(vector) != len(rs.kernel_universe):
            raise AlignmentError(
                f"bit vector has {len(vector)} entries, rule set references "
                f"{len(rs.kernel_universe)} kernels"
            )
        table = {k: bool(v) for k, v in zip(rs.kernel_universe, vector)}
    missing = [k for k in rs.kernel_universe if k not in table]
    if missing:
        raise AlignmentError(f"instance lacks bits for kernels {missing}")
    return table


def _literal_kernel(lit: Literal):
    kid = lit.predicate.kernel_id
    if kid is None:
        raise AlignmentError(
            f"predicate {lit.predicate.name!r} carries no kernel id; "
            f"resolve the rule set against its label map first"
        )
    return kid


class _Evaluator:
    """Shared truth evaluation with per-instance memoization of ab values."""

    def __init__(self, rs: RuleSet, bits):
        self.groups = rs.exception_groups()
        self.bits = bits
        self.memo: dict[int, bool] = {}

    def literal(self, lit: Literal) -> bool:
        if lit.predicate.is_exception:
            value = self.ab(lit.predicate.exception_index)
        else:
            value = self.bits[_literal_kernel(lit)]
        return not value if lit.negated else value

    def body(self, rule: Rule) -> bool:
        return all(self.literal(lit) for lit in rule.body)

    def ab(self, index: int) -> bool:
        if index not in self.memo:
            self.memo[index] = any(self.body(r) for r in self.groups[index])
        return self.memo[index]


def predict(rs: RuleSet, bits) -> str:
    """Class of the first satisfied target rule, or ``unclassified``.

    ``bits`` is either a mapping kernel_id -> bit or a sequence aligned
    with ``rs.kernel_universe``.
    """
    ev = _Evaluator(rs, _bit_lookup(rs, bits))
    for rule in rs.rules:
        if rule.is_target and ev.body(rule):
            return rule.label
    return UNCLASSIFIED


# ---------------------------------------------------------------------------
# Justifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LiteralTrace:
    """One body literal with its truth value; ab literals carry a subtree."""

    literal: Literal
    value: bool
    subtree: "AbTrace | None" = None


@dataclass(frozen=True)
class RuleTrace:
    """Evaluation of one rule body.

    For a satisfied body every literal appears; a failed body is traced
    up to and including its first failing literal.
    """

    rule_index: int
    rule: Rule
    fired: bool
    literals: tuple[LiteralTrace, ...]

    @property
    def first_failure(self) -> LiteralTrace | None:
        if self.fired:
            return None
        return self.literals[-1] if self.literals else None


@dataclass(frozen=True)
class AbTrace:
    """Evaluation of one ab predicate over its defining rule group.

    When the predicate is derived, tracing stops at the deriving rule;
    when it fails, every defining rule appears with its failure point.
    """

    index: int
    value: bool
    rules: tuple[RuleTrace, ...]


@dataclass(frozen=True)
class Justification:
    """Full account of one prediction."""

    outcome: str
    fired_rule: int | None
    literal_trace: tuple[LiteralTrace, ...]
    failed_rules: tuple[RuleTrace, ...]

    def render(self) -> str:
        lines = [f"outcome: {self.outcome}"]
        if self.fired_rule is not None:
            lines.append(f"fired rule {self.fired_rule}:")
            for entry in self.literal_trace:
                _render_literal(entry, lines, depth=1)
        for trace in self.failed_rules:
            lines.append(f"rule {trace.rule_index} failed: {trace.rule}")
            for entry in trace.literals:
                _render_literal(entry, lines, depth=1)
        return "\n".join(lines)


def _render_literal(entry: LiteralTrace, lines, depth):
    pad = "  " * depth
    lines.append(f"{pad}{entry.literal}: {str(entry.value).lower()}")
    if entry.subtree is not None:
        for rt in entry.subtree.rules:
            lines.append(f"{pad}  ab{entry.subtree.index} rule: {rt.rule}")
            for sub in rt.literals:
                _render_literal(sub, lines, depth + 2)


class _Tracer(_Evaluator):
    def trace_literal(self, lit: Literal) -> LiteralTrace:
        subtree = None
        if lit.predicate.is_exception:
            subtree = self.trace_ab(lit.predicate.exception_index)
            raw = subtree.value
        else:
            raw = self.bits[_literal_kernel(lit)]
        value = not raw if lit.negated else raw
        return LiteralTrace(literal=lit, value=value, subtree=subtree)

    def trace_body(self, rule: Rule, index: int) -> RuleTrace:
        traces = []
        fired = True
        for lit in rule.body:
            entry = self.trace_literal(lit)
            traces.append(entry)
            if not entry.value:
                fired = False
                break
        return RuleTrace(rule_index=index, rule=rule, fired=fired,
                         literals=tuple(traces))

    def trace_ab(self, index: int) -> AbTrace:
        rule_traces = []
        value = False
        for rule in self.groups[index]:
            rt = self.trace_body(rule, index=-1)
            rule_traces.append(rt)
            if rt.fired:
                value = True
                break
        return AbTrace(index=index, value=value, rules=tuple(rule_traces))


def justify(rs: RuleSet, bits) -> Justification:
    """Trace the decision-list scan that ``predict`` performs.

    The outcome always equals ``predict(rs, bits)``. ``failed_rules``
    holds a trace for every target rule scanned without firing, each
    ending at its first failing literal; for an unclassified instance
    that is every target rule.
    """
    tracer = _Tracer(rs, _bit_lookup(rs, bits))
    failed = []
    for index, rule in enumerate(rs.rules):
        if not rule.is_target:
            continue
        trace = tracer.trace_body(rule, index)
        if trace.fired:
            return Justification(
                outcome=rule.label,
                fired_rule=index,
                literal_trace=trace.literals,
                failed_rules=tuple(failed),
            )
        failed.append(trace)
    return Justification(
        outcome=UNCLASSIFIED,
        fired_rule=None,
        literal_trace=(),
        failed_rules=tuple(failed),
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    """Evaluation summary of a rule set against a binarization table."""

    accuracy: float
    fidelity: float | None
    coverage_rate: float
    per_class_accuracy: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name, value in (("accuracy", self.accuracy),
                            ("coverage_rate", self.coverage_rate)):
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} {value} outside [0, 1]")
        if self.fidelity is not None and not (0.0 <= self.fidelity <= 1.0):
            raise ValueError(f"fidelity {self.fidelity} outside [0, 1]")


def predict_table(rs: RuleSet, table: BinarizationTable) -> list[str]:
    """Predictions for every row; requires the table to cover the rule
    set's kernel universe."""
    missing = [k for k in rs.kernel_universe if k not in set(table.kernel_ids)]
    if missing:
        raise AlignmentError(
            f"table lacks kernels {missing} referenced by the rule set"
        )
    cols = {k: j for j, k in enumerate(table.kernel_ids)}
    out = []
    for i in range(table.n_images):
        row = table.values[i]
        bits = {k: bool(row[cols[k]]) for k in rs.kernel_universe}
        out.append(predict(rs, bits))
    return out


def evaluate(rs: RuleSet, table: BinarizationTable) -> Metrics:
    """Accuracy and fidelity of the rule program on *table*.

    An unclassified instance counts as wrong for both measures. Fidelity
    is ``None`` when the table has no cnn_pred column.
    """
    predictions = predict_table(rs, table)
    n = len(predictions)
    correct = 0
    per_class_hit: dict[str, int] = {}
    per_class_n: dict[str, int] = {}
    covered = 0
    for pred, truth in zip(predictions, table.true_class):
        per_class_n[truth] = per_class_n.get(truth, 0) + 1
        if pred != UNCLASSIFIED:
            covered += 1
        if pred == truth:
            correct += 1
            per_class_hit[truth] = per_class_hit.get(truth, 0) + 1
    fidelity = None
    if table.cnn_pred is not None:
        agree = sum(
            1 for pred, cnn in zip(predictions, table.cnn_pred) if pred == cnn
        )
        fidelity = agree / n
    return Metrics(
        accuracy=correct / n,
        fidelity=fidelity,
        coverage_rate=covered / n,
        per_class_accuracy={
            cls: per_class_hit.get(cls, 0) / count
            for cls, count in sorted(per_class_n.items())
        },
    )
