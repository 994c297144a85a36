"""Induction of a stratified default theory from a binarization table.

The learner builds, per class, a sequence of rules by sequential covering:
each rule greedily accumulates body literals (kernel active / inactive)
that maximize Foil-style information gain until the rule's false positives
drop within ``ratio`` times its true positives. When no literal has
positive gain but false positives remain, the positive and negative
examples covered so far are swapped and the learner recurses to produce
exception (``abN``) rules, which join the body under negation. Rules
covering fewer than ``max(1, ceil(tail * n))`` examples are discarded.

Per-class rule lists are merged into a single decision list ordered by
descending training coverage (ties: class label, then learned order).
Exception ids are assigned globally, in order of rule completion, so a
nested exception always carries a smaller id than the rule that uses it.

The gain heuristic has one safety valve: on noise-free data where neither
gain nor exceptions can make progress (e.g. parity-like interactions), a
zero-gain literal that still covers a positive and excludes at least one
negative is admitted, ranked by mutual information. This keeps the greedy
search complete without touching its behaviour on ordinary inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, EmptyInputError
from .interchange import BinarizationTable
from .rules import (
    Literal,
    Rule,
    RuleSet,
    exception_predicate,
    kernel_predicate,
)

DEFAULT_MAX_EXCEPTION_DEPTH = 3


@dataclass(frozen=True)
class FoldParams:
    """Induction hyperparameters.

    ``ratio`` bounds false positives against true positives for the
    default part of a rule (may exceed 1); ``tail`` is the minimum rule
    coverage as a fraction of the training-set size.
    """

    ratio: float
    tail: float
    max_exception_depth: int = DEFAULT_MAX_EXCEPTION_DEPTH

    def __post_init__(self):
        if not (self.ratio >= 0):
            raise ValueError(f"ratio must be >= 0, got {self.ratio}")
        if not (0 < self.tail <= 1):
            raise ValueError(f"tail must be in (0, 1], got {self.tail}")
        if self.max_exception_depth < 0:
            raise ValueError("max_exception_depth must be >= 0")


class _Ctx:
    """Mutable learning state shared across the recursion."""

    def __init__(self, X, kernel_ids, params):
        self.X = X
        self.kernel_ids = list(kernel_ids)
        self.col_of = {kid: j for j, kid in enumerate(kernel_ids)}
        self.kids_sorted = sorted(kernel_ids)
        self.params = params
        self.ab_rules: list[Rule] = []          # completion order == id order
        self.ab_groups: dict[int, list[Rule]] = {}
        self._next_ab = 1

    def new_exception(self, body, coverage):
        rule = Rule(
            label=None, exception=exception_predicate(self._next_ab),
            body=tuple(body), coverage=coverage,
        )
        self.ab_groups[self._next_ab] = [rule]
        self.ab_rules.append(rule)
        self._next_ab += 1
        return rule

    # -- truth evaluation during learning --------------------------------

    def eval_body(self, rows, body):
        mask = np.ones(len(rows), dtype=bool)
        for lit in body:
            if lit.predicate.is_exception:
                sub = self.eval_ab(rows, lit.predicate.exception_index)
                mask &= ~sub if lit.negated else sub
            else:
                bits = self.X[rows, self.col_of[lit.predicate.kernel_id]] == 1
                mask &= ~bits if lit.negated else bits
        return mask

    def eval_ab(self, rows, index):
        out = np.zeros(len(rows), dtype=bool)
        for rule in self.ab_groups[index]:
            out |= self.eval_body(rows, rule.body)
        return out


def _count_candidates(X, pos_rows, neg_rows):
    """tp/fp counts for every (column, value) candidate literal."""
    tp1 = X[pos_rows].sum(axis=0).astype(np.int64)
    fp1 = X[neg_rows].sum(axis=0).astype(np.int64)
    tp0 = len(pos_rows) - tp1
    fp0 = len(neg_rows) - fp1
    return tp1, fp1, tp0, fp0


def _foil_gain(tp, fp, p_before):
    if tp == 0:
        return float("-inf")
    p_after = tp / (tp + fp)
    if p_after <= p_before:
        return float("-inf")
    return tp * (math.log2(p_after) - math.log2(p_before))


def _mutual_information(tp, fp, fn, tn):
    total = tp + fp + fn + tn
    mi = 0.0
    for a, b, joint in (
        (tp + fp, tp + fn, tp),
        (tp + fp, fp + tn, fp),
        (fn + tn, tp + fn, fn),
        (fn + tn, fp + tn, tn),
    ):
        if joint:
            mi += (joint / total) * math.log2(joint * total / (a * b))
    return mi


def _pick(ctx, pos_rows, neg_rows, used, scorer):
    """Best candidate literal under *scorer*, ties by kernel id then polarity."""
    tp1, fp1, tp0, fp0 = _count_candidates(ctx.X, pos_rows, neg_rows)
    best, best_score = None, 0.0
    for kid in ctx.kids_sorted:
        if kid in used:
            continue
        j = ctx.col_of[kid]
        for value, tp, fp in ((1, tp1[j], fp1[j]), (0, tp0[j], fp0[j])):
            score = scorer(int(tp), int(fp))
            if score > best_score:
                best_score = score
                best = Literal(predicate=kernel_predicate(kid), negated=value == 0)
    return best


def select_literal(pos, neg, used=frozenset(), kernel_ids=None):
    """Best literal by Foil information gain, or ``None``.

    ``pos`` and ``neg`` are 2D bit arrays with identical column layouts;
    ``used`` holds kernel ids that may not be proposed again. Candidate
    literals test a column against 1 (plain) or 0 (negated). A literal
    scores only if it strictly improves precision on the covered set;
    a feature distributed identically over ``pos`` and ``neg`` scores 0.
    Ties prefer the lowest kernel id, then the positive polarity.
    """
    pos = np.asarray(pos, dtype=np.uint8)
    neg = np.asarray(neg, dtype=np.uint8)
    if pos.ndim != 2 or len(pos) == 0:
        raise EmptyInputError("select_literal needs a non-empty positive set")
    kernel_ids = list(range(pos.shape[1])) if kernel_ids is None else list(kernel_ids)
    X = np.concatenate([pos, neg]) if len(neg) else pos
    ctx = _Ctx(X, kernel_ids, params=None)
    p_before = len(pos) / (len(pos) + len(neg))
    return _pick(
        ctx,
        np.arange(len(pos)),
        np.arange(len(pos), len(pos) + len(neg)),
        set(used),
        lambda tp, fp: _foil_gain(tp, fp, p_before),
    )


def _select_gain(ctx, pos_rows, neg_rows, used):
    p_before = len(pos_rows) / (len(pos_rows) + len(neg_rows))
    return _pick(ctx, pos_rows, neg_rows, used,
                 lambda tp, fp: _foil_gain(tp, fp, p_before))


def _select_progress(ctx, pos_rows, neg_rows, used):
    """Zero-gain fallback: must keep a positive and shed a negative."""
    n_pos, n_neg = len(pos_rows), len(neg_rows)

    def scorer(tp, fp):
        if tp == 0 or fp >= n_neg:
            return 0.0
        mi = _mutual_information(tp, fp, n_pos - tp, n_neg - fp)
        return max(mi, 1e-12)  # admissible even when MI is exactly 0

    return _pick(ctx, pos_rows, neg_rows, used, scorer)


def _restrict(ctx, rows, literal):
    col = ctx.col_of[literal.predicate.kernel_id]
    bits = ctx.X[rows, col] == 1
    return rows[~bits if literal.negated else bits]


def _learn_body(ctx, pos_rows, neg_rows, used, depth):
    """Grow one rule body; may emit exception rules into the context."""
    params = ctx.params
    body: list[Literal] = []
    used = set(used)
    cp, cn = pos_rows, neg_rows
    while len(cn) > 0:
        lit = _select_gain(ctx, cp, cn, used)
        if lit is None:
            if len(cn) <= params.ratio * len(cp):
                break  # residual false positives within budget
            ab_literals = _swap_for_exceptions(ctx, cp, cn, used, depth)
            if ab_literals:
                body.extend(ab_literals)
                break
            lit = _select_progress(ctx, cp, cn, used)
            if lit is None:
                break  # pos and neg are indistinguishable on unused kernels
        body.append(lit)
        used.add(lit.predicate.kernel_id)
        cp = _restrict(ctx, cp, lit)
        cn = _restrict(ctx, cn, lit)
        if len(cn) <= params.ratio * len(cp):
            break
    return tuple(body)


def _swap_for_exceptions(ctx, covered_pos, covered_neg, used, depth):
    """Learn exception rules on the swapped example sets.

    Returns the ``not abN`` literals to append to the calling rule body,
    or an empty tuple when the depth budget is exhausted or nothing
    learnable remains.
    """
    if depth >= ctx.params.max_exception_depth or len(covered_neg) == 0:
        return ()
    sub = _learn_rules(
        ctx, covered_neg, covered_pos, used, depth + 1,
        min_cov=1, make=ctx.new_exception,
    )
    return tuple(
        Literal(predicate=rule.exception, negated=True) for rule in sub
    )


def _learn_rules(ctx, pos_rows, neg_rows, used, depth, min_cov, make):
    """Sequential covering: learn rules until the positives are exhausted."""
    rules: list[Rule] = []
    remaining = pos_rows
    while len(remaining) > 0:
        body = _learn_body(ctx, remaining, neg_rows, used, depth)
        covered = ctx.eval_body(remaining, body)
        n_covered = int(covered.sum())
        if n_covered < max(1, min_cov):
            break  # the candidate rule is below the coverage floor
        rules.append(make(body, n_covered))
        remaining = remaining[~covered]
    return rules


def learn_exceptions(covered_pos, covered_neg, params, depth,
                     used=frozenset(), kernel_ids=None):
    """Learn exception rules for the negatives a rule would wrongly cover.

    The example sets are swapped internally: ``covered_neg`` become the
    positives of the exception program. Returns ``(ab_literals, rules)``;
    one fresh ab literal per learned rule, numbered from 1. When
    ``depth >= params.max_exception_depth`` both tuples are empty and the
    calling rule keeps its residual false positives.
    """
    covered_pos = np.asarray(covered_pos, dtype=np.uint8)
    covered_neg = np.asarray(covered_neg, dtype=np.uint8)
    if len(covered_neg) == 0:
        raise ValueError("learn_exceptions requires covered negatives")
    if depth >= params.max_exception_depth:
        return (), ()
    kernel_ids = (
        list(range(covered_pos.shape[1])) if kernel_ids is None else list(kernel_ids)
    )
    X = np.concatenate([covered_pos, covered_neg]) if len(covered_pos) else covered_neg
    ctx = _Ctx(X, kernel_ids, params)
    pos_rows = np.arange(len(covered_pos))
    neg_rows = np.arange(len(covered_pos), len(X))
    literals = _swap_for_exceptions(ctx, pos_rows, neg_rows, set(used), depth)
    return literals, tuple(ctx.ab_rules)


def _simplify_decision_list(targets, ctx, n_rows):
    """Drop target rules whose removal changes no training prediction.

    One-vs-rest covering cannot see that an earlier rule of the merged
    list already shadows part of a later rule, so the merge can carry
    redundant fragments. Removal candidates are tried smallest coverage
    first (ties: the later rule); the training predictions of the list
    are compared exactly, so the pass never trades accuracy for size.
    """
    rows = np.arange(n_rows)
    fired = [ctx.eval_body(rows, rule.body) for rule in targets]

    def predictions(active):
        pred = np.full(n_rows, "", dtype=object)
        undecided = np.ones(n_rows, dtype=bool)
        for i in active:
            hit = undecided & fired[i]
            pred[hit] = targets[i].label
            undecided &= ~fired[i]
        return pred

    active = list(range(len(targets)))
    base = predictions(active)
    improved = True
    while improved:
        improved = False
        for i in sorted(active, key=lambda i: (targets[i].coverage, -i)):
            trial = [j for j in active if j != i]
            if np.array_equal(predictions(trial), base):
                active = trial
                improved = True
                break
    return tuple(targets[i] for i in sorted(active))


def _prune_exceptions(target_rules, ab_groups):
    """Drop ab rules no surviving target rule reaches; renumber the rest.

    Discarded target rules can strand the exception rules learned for
    them. Renumbering keeps ids consecutive from 1 while preserving
    their relative (completion) order.
    """
    def referenced(rules):
        return {
            lit.predicate.exception_index
            for rule in rules
            for lit in rule.body
            if lit.predicate.is_exception
        }

    reachable: set[int] = set()
    frontier = referenced(target_rules)
    while frontier:
        idx = frontier.pop()
        if idx in reachable:
            continue
        reachable.add(idx)
        frontier |= referenced(ab_groups[idx]) - reachable

    renum = {old: new for new, old in enumerate(sorted(reachable), start=1)}

    def rewrite_body(body):
        out = []
        for lit in body:
            pred = lit.predicate
            if pred.is_exception:
                pred = exception_predicate(renum[pred.exception_index])
            out.append(Literal(predicate=pred, negated=lit.negated))
        return tuple(out)

    new_targets = tuple(
        Rule(label=r.label, exception=None, body=rewrite_body(r.body),
             coverage=r.coverage)
        for r in target_rules
    )
    new_abs = tuple(
        Rule(label=None, exception=exception_predicate(renum[old]),
             body=rewrite_body(rule.body), coverage=rule.coverage)
        for old in sorted(reachable)
        for rule in ab_groups[old]
    )
    return new_targets + new_abs


def learn_ruleset(table: BinarizationTable, params: FoldParams) -> RuleSet:
    """Learn a stratified decision list from a binarization table.

    One-vs-rest over the classes in lexicographic order, then a merge of
    all target rules by descending coverage (ties: class label, learned
    order), followed by the exception rules in id order.
    """
    if table.n_images == 0:
        raise EmptyInputError("cannot learn from an empty table")
    classes = sorted(set(table.true_class))
    if len(classes) < 2:
        raise DegenerateInputError(
            f"need at least 2 classes, got {classes!r}"
        )
    min_cov = max(1, math.ceil(params.tail * table.n_images))
    ctx = _Ctx(np.ascontiguousarray(table.values), table.kernel_ids, params)
    labels = np.asarray(table.true_class)

    merged: list[tuple[int, str, int, Rule]] = []
    for cls in classes:
        pos_rows = np.flatnonzero(labels == cls)
        neg_rows = np.flatnonzero(labels != cls)

        def make_target(body, coverage, _cls=cls):
            return Rule(label=_cls, exception=None, body=body, coverage=coverage)

        class_rules = _learn_rules(
            ctx, pos_rows, neg_rows, used=frozenset(), depth=0,
            min_cov=min_cov, make=make_target,
        )
        for order, rule in enumerate(class_rules):
            merged.append((-rule.coverage, cls, order, rule))

    merged.sort(key=lambda item: item[:3])
    targets = _simplify_decision_list(
        tuple(item[3] for item in merged), ctx, table.n_images
    )
    rs = RuleSet(rules=_prune_exceptions(targets, ctx.ab_groups))
    rs.validate()
    return rs
