"""Event-based error rate and F1 under the onset-only condition."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .postproc import EventAnnotation

DEFAULT_COLLAR = 0.5


def match_events(
    refs: Sequence[EventAnnotation],
    preds: Sequence[EventAnnotation],
    collar: float = DEFAULT_COLLAR,
) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Pair predictions with references by onset, one-to-one.

    A prediction may pair with a reference when their onsets differ by at
    most ``collar`` seconds; offsets are ignored. References are visited in
    onset order and first try the nearest free prediction. When that fails,
    an augmenting path re-routes earlier pairs, so the number of pairs is
    always the maximum possible. Returns ``(pairs, unmatched_ref_indices,
    unmatched_pred_indices)`` with pairs as ``(ref_index, pred_index)``.
    """
    # float slack so that e.g. |5.5 - 5.0| <= 0.5 survives rounding
    tol = collar + 1e-9
    order = sorted(range(len(refs)), key=lambda i: (refs[i].onset, i))
    candidates = {
        ri: sorted(
            (pi for pi in range(len(preds)) if abs(preds[pi].onset - refs[ri].onset) <= tol),
            key=lambda pi: (abs(preds[pi].onset - refs[ri].onset), pi),
        )
        for ri in order
    }
    owner: dict[int, int] = {}

    def augment(ri: int, seen: set) -> bool:
        for pi in candidates[ri]:
            if pi in seen:
                continue
            seen.add(pi)
            if pi not in owner or augment(owner[pi], seen):
                owner[pi] = ri
                return True
        return False

    for ri in order:
        augment(ri, set())
    pairs = sorted((ri, pi) for pi, ri in owner.items())
    matched_refs = {ri for ri, _ in pairs}
    unmatched_refs = [ri for ri in range(len(refs)) if ri not in matched_refs]
    unmatched_preds = [pi for pi in range(len(preds)) if pi not in owner]
    return pairs, unmatched_refs, unmatched_preds


@dataclass
class ClassScore:
    label: str
    n_ref: int = 0
    n_pred: int = 0
    tp: int = 0

    @property
    def fp(self) -> int:
        return self.n_pred - self.tp

    @property
    def fn(self) -> int:
        return self.n_ref - self.tp

    @property
    def er_defined(self) -> bool:
        return self.n_ref > 0

    @property
    def error_rate(self) -> float:
        """(deletions + insertions) / N_ref; NaN when there are no references."""
        if not self.er_defined:
            return math.nan
        return (self.fn + self.fp) / self.n_ref

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0


@dataclass
class EvalReport:
    classes: dict[str, ClassScore] = field(default_factory=dict)

    @property
    def average_error_rate(self) -> float:
        defined = [c.error_rate for c in self.classes.values() if c.er_defined]
        return sum(defined) / len(defined) if defined else math.nan

    @property
    def average_f1(self) -> float:
        if not self.classes:
            return 0.0
        return sum(c.f1 for c in self.classes.values()) / len(self.classes)

    def to_text(self) -> str:
        """Tab-separated table: one row per class and a final ``average`` row."""
        head = "class\tNref\tNpred\tTP\tFP\tFN\tER\tF1\tER|F1\n"
        rows = []
        for name in sorted(self.classes):
            c = self.classes[name]
            rows.append(
                f"{name}\t{c.n_ref}\t{c.n_pred}\t{c.tp}\t{c.fp}\t{c.fn}\t"
                f"{_fmt_er(c.error_rate)}\t{100 * c.f1:.1f}\t{_fmt_er(c.error_rate)}|{100 * c.f1:.1f}\n"
            )
        tot = [sum(getattr(c, k) for c in self.classes.values()) for k in ("n_ref", "n_pred", "tp", "fp", "fn")]
        er, f1 = self.average_error_rate, self.average_f1
        rows.append(
            "average\t" + "\t".join(map(str, tot))
            + f"\t{_fmt_er(er)}\t{100 * f1:.1f}\t{_fmt_er(er)}|{100 * f1:.1f}\n"
        )
        return head + "".join(rows)


def _fmt_er(v: float) -> str:
    return "NaN" if math.isnan(v) else f"{v:.2f}"


def score(
    refs: Mapping[str, Sequence[EventAnnotation]],
    preds: Mapping[str, Sequence[EventAnnotation]],
    collar: float = DEFAULT_COLLAR,
    labels: Sequence[str] | None = None,
) -> EvalReport:
    """Micro-average counts per class over every clip, then macro-average classes.

    ``refs`` and ``preds`` map clip names to that clip's events. Matching only
    pairs events of the same class within the same clip.
    """
    if labels is None:
        labels = sorted(
            {e.label for evs in refs.values() for e in evs}
            | {e.label for evs in preds.values() for e in evs}
        )
    report = EvalReport({lab: ClassScore(lab) for lab in labels})
    for clip in sorted(set(refs) | set(preds)):
        for lab, cs in report.classes.items():
            r = [e for e in refs.get(clip, ()) if e.label == lab]
            p = [e for e in preds.get(clip, ()) if e.label == lab]
            pairs, _, _ = match_events(r, p, collar)
            cs.n_ref += len(r)
            cs.n_pred += len(p)
            cs.tp += len(pairs)
    return report
