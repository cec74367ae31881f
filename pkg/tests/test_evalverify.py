"""Evalverify: assertion parser round trips, verification table, GHR, BLEU."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcreason.datagen import ObjectMetadata
from pcreason.evalverify import (
    FALSE,
    TRUE,
    UNVERIFIABLE,
    Assertion,
    EvalError,
    EvalReport,
    aggregate_report,
    bleu4,
    compute_hallucination_rate,
    exact_match,
    parse_assertions,
    verify_assertion,
)


def _meta(**overrides):
    base = dict(
        object_id="chair-1",
        family="chair",
        part_counts={"leg": 3, "armrest": 2, "seat": 1, "back": 1},
        removed_parts=["rear-left-leg"],
        dimensions={},
        mirror_symmetric=False,
        stable=False,
        containment=False,
        relations={("back", "seat"): ["rear-of"]},
    )
    base.update(overrides)
    return ObjectMetadata(**base)


class TestParser:
    def test_all_kinds(self):
        text = (
            "count(leg)=3 then exists(handle) and missing(rear-left-leg) "
            "relation(handle,left-of,body) finally property(stable)=false"
        )
        result = parse_assertions(text)
        kinds = [a.kind for a in result.assertions]
        assert kinds == ["count", "exists", "missing", "relation", "property"]
        assert result.skipped == 0
        assert result.assertions[0].value == 3
        assert result.assertions[3].value == ("left-of", "body")
        assert result.assertions[4].value is False

    def test_space_tolerant(self):
        got = parse_assertions("relation( handle , left-of , body )").assertions
        assert got == [Assertion("relation", "handle", ("left-of", "body"))]
        got = parse_assertions("count( rear left leg )=1").assertions
        assert got[0].subject == "rear-left-leg"

    def test_malformed_counted(self):
        result = parse_assertions("count(leg)=three exists() relation(a,b)")
        assert result.assertions == []
        assert result.skipped == 3

    def test_trailing_punctuation(self):
        got = parse_assertions("so count(leg)=4.").assertions
        assert got == [Assertion("count", "leg", 4)]

    def test_prose_without_assertions(self):
        result = parse_assertions("the chair is red and comfortable")
        assert result.assertions == [] and result.skipped == 0

    def test_serialize_roundtrip(self):
        cases = [
            Assertion("count", "leg", 3),
            Assertion("exists", "handle"),
            Assertion("missing", "rear-left-leg"),
            Assertion("relation", "handle", ("right-of", "body")),
            Assertion("property", "stable", True),
        ]
        for a in cases:
            parsed = parse_assertions(a.serialize()).assertions
            assert parsed == [a]

    @settings(max_examples=40, deadline=None)
    @given(
        st.lists(
            st.sampled_from(
                [
                    Assertion("count", "leg", 2),
                    Assertion("exists", "seat"),
                    Assertion("missing", "front-left-leg"),
                    Assertion("relation", "back", ("rear-of", "seat")),
                    Assertion("property", "symmetric", False),
                ]
            ),
            max_size=6,
        )
    )
    def test_parse_serialize_parse_identity(self, assertions):
        text = " and ".join(a.serialize() for a in assertions)
        assert parse_assertions(text).assertions == assertions


class TestVerify:
    def test_count(self):
        m = _meta()
        assert verify_assertion(Assertion("count", "leg", 3), m) == TRUE
        assert verify_assertion(Assertion("count", "leg", 4), m) == FALSE
        assert verify_assertion(Assertion("count", "wing", 1), m) == UNVERIFIABLE

    def test_exists_missing(self):
        m = _meta()
        assert verify_assertion(Assertion("exists", "seat"), m) == TRUE
        assert verify_assertion(Assertion("exists", "rear-left-leg"), m) == FALSE
        assert verify_assertion(Assertion("missing", "rear-left-leg"), m) == TRUE
        assert verify_assertion(Assertion("missing", "front-left-leg"), m) == FALSE
        assert verify_assertion(Assertion("missing", "seat"), m) == FALSE
        assert verify_assertion(Assertion("missing", "wing"), m) == UNVERIFIABLE

    def test_relation(self):
        m = _meta()
        assert verify_assertion(
            Assertion("relation", "back", ("rear-of", "seat")), m
        ) == TRUE
        assert verify_assertion(
            Assertion("relation", "back", ("front-of", "seat")), m
        ) == FALSE
        assert verify_assertion(
            Assertion("relation", "back", ("above", "seat")), m
        ) == UNVERIFIABLE
        assert verify_assertion(
            Assertion("relation", "leg", ("above", "seat")), m
        ) == UNVERIFIABLE

    def test_property(self):
        m = _meta()
        assert verify_assertion(Assertion("property", "stable", False), m) == TRUE
        assert verify_assertion(Assertion("property", "stable", True), m) == FALSE
        assert verify_assertion(Assertion("property", "symmetric", False), m) == TRUE
        assert verify_assertion(Assertion("property", "containment", True), m) == FALSE
        assert verify_assertion(Assertion("property", "shiny", True), m) == UNVERIFIABLE


class TestGhr:
    def test_known_mixture(self):
        m = _meta()
        rationales = [
            "count(leg)=3 and property(stable)=true",  # 1 true, 1 false
            "exists(wing) tells nothing",  # unverifiable only
            "count(leg)=3",  # 1 true
        ]
        got = compute_hallucination_rate(rationales, [m, m, m])
        assert got == pytest.approx(1.0 / 3.0)

    def test_all_true_is_zero(self):
        m = _meta()
        assert compute_hallucination_rate(["count(leg)=3"], [m]) == 0.0

    def test_none_when_nothing_verifiable(self):
        m = _meta()
        assert compute_hallucination_rate(["just prose", "exists(wing)"], [m, m]) is None

    def test_length_mismatch(self):
        with pytest.raises(EvalError):
            compute_hallucination_rate(["a"], [])


class TestAnswerMetrics:
    def test_exact_match(self):
        assert exact_match(" Yes ", "yes")
        assert not exact_match("no", "yes")
        assert not exact_match("3 legs", "3")

    def test_bleu_identity(self):
        assert bleu4("a b c d e".split(), "a b c d e".split()) == pytest.approx(1.0)

    def test_bleu_empty_candidate(self):
        assert bleu4([], "a b".split()) == 0.0

    def test_bleu_frozen_prefix_value(self):
        """'a b c d' vs 'a b c d e': all precisions 1, BP = exp(-1/4)."""
        got = bleu4("a b c d".split(), "a b c d e".split())
        assert got == pytest.approx(np.exp(-0.25), abs=1e-12)

    def test_bleu_reference_implementation(self):
        """Duplicate-implementation oracle on random token strings."""
        from collections import Counter

        def reference(cand, ref):
            if not cand:
                return 0.0
            logs = []
            for n in range(1, 5):
                cg = Counter(tuple(cand[i:i + n]) for i in range(len(cand) - n + 1))
                rg = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
                num = sum(min(c, rg[g]) for g, c in cg.items())
                den = sum(cg.values())
                if num == 0:
                    num, den = 1, den + 1
                logs.append(np.log(num / den))
            bp = 1.0 if len(cand) >= len(ref) else np.exp(1 - len(ref) / len(cand))
            return float(bp * np.exp(np.mean(logs)))

        rng = np.random.Generator(np.random.PCG64(0))
        words = list("abcdef")
        for _ in range(50):
            cand = [words[i] for i in rng.integers(0, 6, rng.integers(1, 12))]
            ref = [words[i] for i in rng.integers(0, 6, rng.integers(1, 12))]
            assert bleu4(cand, ref) == pytest.approx(reference(cand, ref), abs=1e-12)

    def test_bleu_bounded(self):
        rng = np.random.Generator(np.random.PCG64(1))
        for _ in range(30):
            cand = list(rng.integers(0, 4, rng.integers(1, 10)))
            ref = list(rng.integers(0, 4, rng.integers(1, 10)))
            assert 0.0 <= bleu4(cand, ref) <= 1.0

    def test_bleu_drops_when_4gram_removed(self):
        ref = "a b c d e f".split()
        full = bleu4("a b c d e f".split(), ref)
        broken = bleu4("a b c x e f".split(), ref)
        assert broken < full


class TestReport:
    def _rows(self):
        m = _meta()
        return [
            {"level": 1, "em": True, "bleu": 1.0, "rationale": "count(leg)=3", "meta": m},
            {"level": 1, "em": False, "bleu": 0.5,
             "rationale": "property(stable)=true", "meta": m},
            {"level": 2, "em": True, "bleu": 0.8, "rationale": "", "meta": m},
        ]

    def test_aggregate(self):
        rep = aggregate_report(self._rows(), mode="explicit")
        assert rep.n_records == 3
        assert rep.exact_match == pytest.approx(2.0 / 3.0)
        assert rep.per_level[1]["n"] == 2
        assert rep.per_level[1]["ghr"] == pytest.approx(0.5)
        assert rep.per_level[2]["ghr"] is None
        assert rep.ghr == pytest.approx(0.5)

    def test_empty_rows_raise(self):
        with pytest.raises(EvalError):
            aggregate_report([])

    def test_table_and_json_render(self):
        rep = aggregate_report(self._rows())
        table = rep.to_table()
        assert "level 1" in table and "overall" in table and "n/a" in table
        import json

        payload = json.loads(rep.to_json())
        assert payload["n_records"] == 3
        assert "1" in payload["per_level"]
