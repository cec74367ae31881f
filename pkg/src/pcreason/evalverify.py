"""Assertion grammar, metadata cross-validation, and evaluation metrics.

Rationales embed machine-oriented assertions in function-call syntax:

    count(<part>)=<int>
    exists(<part>)
    missing(<part>)
    relation(<subject>, <direction>, <object>)
    property(<name>)=<true|false>

Whitespace inside parentheses is tolerated on parse and part names are
normalized to hyphens; serialization always emits the compact no-space form.
Verification is a deterministic lookup against ``ObjectMetadata``; unknown
parts or properties are *unverifiable* and excluded from the hallucination
rate on both sides of the ratio (counting them as wrong would punish
vocabulary, not grounding).

The hallucination rate is #false / (#true + #false) over all verifiable
assertions; with no verifiable assertions at all it is undefined and
reported as None. BLEU-4 uses modified n-gram precisions with add-one
smoothing on zero counts and the standard brevity penalty.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .datagen import ObjectMetadata

TRUE, FALSE, UNVERIFIABLE = "true", "false", "unverifiable"

_OPPOSITE_DIRECTION = {
    "left-of": "right-of",
    "right-of": "left-of",
    "front-of": "rear-of",
    "rear-of": "front-of",
    "above": "below",
    "below": "above",
}


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class Assertion:
    kind: str  # count | exists | missing | relation | property
    subject: str
    value: object = None  # int for count, bool for property, (dir, obj) for relation

    def serialize(self) -> str:
        if self.kind == "count":
            return f"count({self.subject})={self.value}"
        if self.kind in ("exists", "missing"):
            return f"{self.kind}({self.subject})"
        if self.kind == "relation":
            direction, obj = self.value
            return f"relation({self.subject},{direction},{obj})"
        return f"property({self.subject})={'true' if self.value else 'false'}"


@dataclass
class ParseResult:
    assertions: list
    skipped: int = 0


_CANDIDATE = re.compile(r"\b(count|exists|missing|relation|property)\(([^)]*)\)(=\S+)?")


def _norm_name(raw: str) -> str:
    return "-".join(raw.strip().split())


def parse_assertions(rationale: str) -> ParseResult:
    """Extract every well-formed assertion; malformed fragments are skipped
    and counted."""
    assertions: list[Assertion] = []
    skipped = 0
    for match in _CANDIDATE.finditer(rationale):
        kind, inner, suffix = match.group(1), match.group(2), match.group(3)
        suffix = (suffix or "").lstrip("=")
        # trailing punctuation from surrounding prose
        suffix = suffix.rstrip(".,;")
        try:
            if kind == "count":
                assertions.append(Assertion("count", _norm_name(inner), int(suffix)))
            elif kind in ("exists", "missing"):
                if suffix or not inner.strip():
                    raise ValueError
                assertions.append(Assertion(kind, _norm_name(inner)))
            elif kind == "relation":
                parts = [_norm_name(p) for p in inner.split(",")]
                if len(parts) != 3 or suffix or not all(parts):
                    raise ValueError
                assertions.append(
                    Assertion("relation", parts[0], (parts[1], parts[2]))
                )
            else:  # property
                if suffix not in ("true", "false") or not inner.strip():
                    raise ValueError
                assertions.append(
                    Assertion("property", _norm_name(inner), suffix == "true")
                )
        except ValueError:
            skipped += 1
    return ParseResult(assertions=assertions, skipped=skipped)


# -- verification -----------------------------------------------------------

_PROPERTY_FIELDS = {
    "stable": "stable",
    "containment": "containment",
    "symmetric": "mirror_symmetric",
}


def _directional_part(name: str):
    """'rear-left-leg' -> ('rear-left', 'leg'), else None."""
    for pos in ("front-left", "front-right", "rear-left", "rear-right"):
        if name.startswith(pos + "-"):
            return pos, name[len(pos) + 1 :]
    return None


def verify_assertion(a: Assertion, meta: ObjectMetadata) -> str:
    """Deterministic lookup; returns 'true', 'false', or 'unverifiable'."""
    if a.kind == "count":
        if a.subject not in meta.part_counts:
            return UNVERIFIABLE
        return TRUE if meta.part_counts[a.subject] == a.value else FALSE
    if a.kind == "exists":
        if a.subject in meta.part_counts:
            return TRUE if meta.part_counts[a.subject] > 0 else FALSE
        if a.subject in meta.removed_parts:
            return FALSE
        return UNVERIFIABLE
    if a.kind == "missing":
        if a.subject in meta.removed_parts:
            return TRUE
        directional = _directional_part(a.subject)
        if directional is not None:
            base = directional[1]
            if base in meta.part_counts:
                # a named leg slot that was not removed is present
                return FALSE
            return UNVERIFIABLE
        if a.subject in meta.part_counts and meta.part_counts[a.subject] > 0:
            return FALSE
        return UNVERIFIABLE
    if a.kind == "relation":
        direction, obj = a.value
        known = meta.relations.get((a.subject, obj))
        if known is None:
            return UNVERIFIABLE
        if direction in known:
            return TRUE
        if _OPPOSITE_DIRECTION.get(direction) in known:
            return FALSE
        return UNVERIFIABLE
    if a.kind == "property":
        fld = _PROPERTY_FIELDS.get(a.subject)
        if fld is None:
            return UNVERIFIABLE
        return TRUE if bool(getattr(meta, fld)) == a.value else FALSE
    return UNVERIFIABLE


def compute_hallucination_rate(rationales, metas) -> float | None:
    """#false / (#true + #false) over all parsed assertions; None when no
    assertion is verifiable. ``rationales`` are plain strings aligned with
    ``metas``."""
    if len(rationales) != len(metas):
        raise EvalError("rationale/metadata length mismatch")
    n_true = n_false = 0
    for text, meta in zip(rationales, metas):
        for a in parse_assertions(text).assertions:
            verdict = verify_assertion(a, meta)
            if verdict == TRUE:
                n_true += 1
            elif verdict == FALSE:
                n_false += 1
    if n_true + n_false == 0:
        return None
    return n_false / (n_true + n_false)


# -- answer metrics ---------------------------------------------------------


def exact_match(predicted: str, gold: str) -> bool:
    """Case-folded, whitespace-trimmed equality; no numeral normalization."""
    return predicted.strip().casefold() == gold.strip().casefold()


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate, reference) -> float:
    """Single-reference BLEU-4, add-one smoothed on zero counts."""
    candidate = list(candidate)
    reference = list(reference)
    if not candidate:
        return 0.0
    log_precision = 0.0
    for n in range(1, 5):
        cand = _ngrams(candidate, n)
        ref = _ngrams(reference, n)
        total = sum(cand.values())
        matched = sum(min(cnt, ref[g]) for g, cnt in cand.items())
        if matched == 0:
            matched, total = matched + 1, total + 1
        log_precision += np.log(matched / total) / 4.0
    c, r = len(candidate), len(reference)
    brevity = 1.0 if c >= r else float(np.exp(1.0 - r / c))
    return float(brevity * np.exp(log_precision))


# -- reports ----------------------------------------------------------------


@dataclass
class EvalReport:
    exact_match: float
    bleu4: float
    ghr: float | None
    per_level: dict  # level -> {"exact_match","bleu4","ghr","n"}
    n_records: int
    mode: str = "explicit"
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "mode": self.mode,
                "n_records": self.n_records,
                "exact_match": self.exact_match,
                "bleu4": self.bleu4,
                "ghr": self.ghr,
                "per_level": {str(k): v for k, v in sorted(self.per_level.items())},
                **self.extra,
            },
            indent=2,
        )

    def to_table(self) -> str:
        def fmt(x):
            return "  n/a" if x is None else f"{x:.3f}"

        lines = [
            f"{'subset':<10}{'n':>6}{'exact':>8}{'bleu4':>8}{'ghr':>8}",
            "-" * 40,
        ]
        for level in sorted(self.per_level):
            row = self.per_level[level]
            lines.append(
                f"{'level ' + str(level):<10}{row['n']:>6}"
                f"{fmt(row['exact_match']):>8}{fmt(row['bleu4']):>8}"
                f"{fmt(row['ghr']):>8}"
            )
        lines.append("-" * 40)
        lines.append(
            f"{'overall':<10}{self.n_records:>6}"
            f"{fmt(self.exact_match):>8}{fmt(self.bleu4):>8}{fmt(self.ghr):>8}"
        )
        return "\n".join(lines)


def aggregate_report(rows: list[dict], mode: str = "explicit") -> EvalReport:
    """Build an EvalReport from per-record rows with keys
    level / em (bool) / bleu (float) / rationale (str) / meta."""
    if not rows:
        raise EvalError("no records to aggregate")
    per_level = {}
    for level in sorted({r["level"] for r in rows}):
        sub = [r for r in rows if r["level"] == level]
        per_level[level] = {
            "n": len(sub),
            "exact_match": float(np.mean([r["em"] for r in sub])),
            "bleu4": float(np.mean([r["bleu"] for r in sub])),
            "ghr": compute_hallucination_rate(
                [r["rationale"] for r in sub], [r["meta"] for r in sub]
            ),
        }
    return EvalReport(
        exact_match=float(np.mean([r["em"] for r in rows])),
        bleu4=float(np.mean([r["bleu"] for r in rows])),
        ghr=compute_hallucination_rate(
            [r["rationale"] for r in rows], [r["meta"] for r in rows]
        ),
        per_level=per_level,
        n_records=len(rows),
        mode=mode,
    )
