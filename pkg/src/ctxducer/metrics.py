"""Scoring: word error rate via minimal-edit alignment, and the matched-pairs
segment-level significance test on per-segment error-count differences."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .exceptions import DegenerateTestError, ShapeError, UndefinedMetricError
from .validation import check_same_length


def wer(ref, hyp) -> dict:
    """Minimal-edit counts and rate between two word sequences.

    Unit costs; ties prefer a substitution over an insertion+deletion pair.
    The rate is undefined (an error) for an empty reference.
    """
    ref = list(ref)
    hyp = list(hyp)
    if len(ref) == 0:
        raise UndefinedMetricError("WER undefined for an empty reference")

    n, m = len(ref), len(hyp)
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    op = [[""] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = i
        op[i][0] = "del"
    for j in range(1, m + 1):
        cost[0][j] = j
        op[0][j] = "ins"
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = cost[i - 1][j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
            dele = cost[i - 1][j] + 1
            ins = cost[i][j - 1] + 1
            best = min(diag, dele, ins)
            cost[i][j] = best
            if best == diag:
                op[i][j] = "match" if ref[i - 1] == hyp[j - 1] else "sub"
            elif best == dele:
                op[i][j] = "del"
            else:
                op[i][j] = "ins"

    subs = dels = inss = 0
    i, j = n, m
    while i > 0 or j > 0:
        o = op[i][j]
        if o in ("match", "sub"):
            subs += o == "sub"
            i, j = i - 1, j - 1
        elif o == "del":
            dels += 1
            i -= 1
        else:
            inss += 1
            j -= 1

    errors = subs + dels + inss
    return {"sub": subs, "del": dels, "ins": inss, "errors": errors, "wer": errors / n}


def normal_cdf(x: float) -> float:
    """Standard normal CDF via the error function."""
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def mapsswe(errs_a, errs_b, alpha: float = 0.05) -> dict:
    """Matched-pairs test on per-segment error counts (one segment per
    utterance): W = mean(Z) / (s / sqrt(n)) with sample std, two-tailed p
    from the standard normal."""
    errs_a = list(errs_a)
    errs_b = list(errs_b)
    check_same_length(errs_a, errs_b, "errs_a", "errs_b")
    n = len(errs_a)
    if n < 2:
        raise DegenerateTestError("need at least 2 paired segments")
    z = [a - b for a, b in zip(errs_a, errs_b)]
    mean = sum(z) / n
    var = sum((v - mean) ** 2 for v in z) / (n - 1)
    if var == 0.0:
        raise DegenerateTestError("zero variance across paired segments")
    w = mean / math.sqrt(var / n)
    p = 2.0 * (1.0 - normal_cdf(abs(w)))
    return {"W": w, "p": p, "significant": p < alpha, "n": n, "alpha": alpha}


# ---------------------------------------------------------------------------
# score reports


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # per-utterance dicts

    def add(self, utterance_id: str, ref, hyp) -> dict:
        counts = wer(ref, hyp)
        row = {
            "utterance_id": utterance_id,
            "ref_len": len(list(ref)),
            "sub": counts["sub"],
            "del": counts["del"],
            "ins": counts["ins"],
            "errors": counts["errors"],
        }
        self.rows.append(row)
        return row

    @property
    def aggregate_wer(self) -> float:
        total_ref = sum(r["ref_len"] for r in self.rows)
        if total_ref == 0:
            raise UndefinedMetricError("aggregate WER undefined: zero reference length")
        return sum(r["errors"] for r in self.rows) / total_ref

    def to_dict(self, meta: dict | None = None) -> dict:
        out = {
            "utterances": self.rows,
            "aggregate": {
                "wer": self.aggregate_wer,
                "errors": sum(r["errors"] for r in self.rows),
                "ref_len": sum(r["ref_len"] for r in self.rows),
            },
        }
        if meta:
            out["meta"] = meta
        return out


def save_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, indent=1)
        f.write("\n")


def load_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def paired_error_counts(report_a: dict, report_b: dict) -> tuple:
    """Error-count lists aligned by utterance_id across two score reports."""
    rows_a = {r["utterance_id"]: r["errors"] for r in report_a["utterances"]}
    rows_b = {r["utterance_id"]: r["errors"] for r in report_b["utterances"]}
    if set(rows_a) != set(rows_b):
        raise ShapeError("reports score different utterance sets; cannot pair")
    keys = sorted(rows_a)
    return [rows_a[k] for k in keys], [rows_b[k] for k in keys]
