import json
from collections import Counter

import pytest

from personakit.errors import PreconditionError
from personakit.events import EventRecord, Stratum
from personakit.traces import (
    ACTION_TYPE_BY_EVENT,
    emit_traces,
    infer_category,
    persona_token_string,
    serialize_record,
    synthesize_goal,
)


def _session(buyer="b1", shop="s1", session="sess1"):
    kw = {"buyer_id": buyer, "shop_id": shop, "session_id": session}
    return [
        EventRecord(ts=0, event_type="page_view", **kw),
        EventRecord(ts=10, event_type="collection_view", collection_id="boots", **kw),
        EventRecord(ts=20, event_type="product_view", product_id="p1", **kw),
        EventRecord(ts=30, event_type="add_to_cart", product_id="p1", value_cents=990, **kw),
    ]


class TestPersonaTokenString:
    def test_zero(self):
        assert persona_token_string(0, 256) == "<|persona_0|>"

    def test_boundary(self):
        assert persona_token_string(255, 256) == "<|persona_255|>"

    def test_out_of_range(self):
        with pytest.raises(PreconditionError):
            persona_token_string(256, 256)
        with pytest.raises(PreconditionError):
            persona_token_string(-1, 256)


class TestSynthesizeGoal:
    def test_stage_two_buy(self):
        assert synthesize_goal("skirts", Stratum.A, 2) == "You are here to buy skirts."
        assert synthesize_goal("skirts", Stratum.B, 2) == "You are here to buy skirts."
        assert synthesize_goal("skirts", Stratum.C, 2) == "You are here to buy skirts."

    def test_stage_two_browse(self):
        assert synthesize_goal("skirts", Stratum.D, 2) == "You are here to browse skirts."

    def test_stage_one_neutral(self):
        goal = synthesize_goal("skirts", Stratum.B, 1)
        assert goal == "You are interested in skirts."

    def test_stratum_e_rejected(self):
        with pytest.raises(PreconditionError):
            synthesize_goal("skirts", Stratum.E, 2)

    def test_empty_category_rejected(self):
        with pytest.raises(PreconditionError):
            synthesize_goal("", Stratum.A, 2)

    def test_bad_stage_rejected(self):
        with pytest.raises(PreconditionError):
            synthesize_goal("skirts", Stratum.A, 3)


class TestInferCategory:
    def test_most_frequent_collection_wins(self):
        kw = {"buyer_id": "b", "shop_id": "s", "session_id": "x"}
        events = [
            EventRecord(ts=0, event_type="collection_view", collection_id="hats", **kw),
            EventRecord(ts=1, event_type="collection_view", collection_id="boots", **kw),
            EventRecord(ts=2, event_type="collection_view", collection_id="boots", **kw),
            EventRecord(ts=3, event_type="search", query="socks", **kw),
        ]
        assert infer_category(events) == "boots"

    def test_falls_back_to_first_query(self):
        kw = {"buyer_id": "b", "shop_id": "s", "session_id": "x"}
        events = [
            EventRecord(ts=0, event_type="search", query="socks", **kw),
            EventRecord(ts=1, event_type="search", query="hats", **kw),
        ]
        assert infer_category(events) == "socks"

    def test_generic_fallback(self):
        kw = {"buyer_id": "b", "shop_id": "s", "session_id": "x"}
        events = [EventRecord(ts=0, event_type="page_view", **kw)]
        assert infer_category(events) == "the storefront catalog"


class TestEmitTraces:
    def _maps(self, stratum=Stratum.C):
        return {("b1", "s1"): 7}, {("b1", "s1"): stratum}

    def test_progress_log_grows_per_step(self):
        tokens, strata = self._maps()
        records, diagnostics = emit_traces([_session()], tokens, strata, 2, 32)
        assert not diagnostics
        assert len(records) == 4
        assert [len(r["user"]["progress"]) for r in records] == [0, 1, 2, 3]
        assert records[0]["user"]["persona"] == "<|persona_7|>"
        assert records[0]["metadata"] == {
            "shop_id": "s1", "stratum": "C", "token": 7, "stage": 2, "step_index": 0,
        }

    def test_round_trip_byte_identical(self):
        tokens, strata = self._maps()
        records, _ = emit_traces([_session()], tokens, strata, 1, 32)
        for record in records:
            line = serialize_record(record)
            assert serialize_record(json.loads(line)) == line

    def test_action_histogram_matches_events(self):
        tokens, strata = self._maps()
        session = _session()
        records, _ = emit_traces([session], tokens, strata, 2, 32)
        actions = Counter(r["assistant"]["action"]["type"] for r in records)
        events = Counter(ACTION_TYPE_BY_EVENT[e.event_type] for e in session)
        assert actions == events

    def test_stage_one_goals_intent_neutral(self):
        tokens, strata = self._maps(Stratum.A)
        records, _ = emit_traces([_session()], tokens, strata, 1, 32)
        for record in records:
            goal = record["user"]["goal"].lower()
            assert "buy" not in goal and "browse" not in goal

    def test_empty_session_skipped_with_diagnostic(self):
        tokens, strata = self._maps()
        records, diagnostics = emit_traces([[]], tokens, strata, 2, 32)
        assert not records
        assert diagnostics[0]["reason"] == "empty session"

    def test_unassigned_buyer_skipped(self):
        records, diagnostics = emit_traces([_session()], {}, {}, 2, 32)
        assert not records
        assert diagnostics[0]["reason"] == "missing assignment"

    def test_stratum_e_buyer_skipped(self):
        tokens, strata = self._maps(Stratum.E)
        records, diagnostics = emit_traces([_session()], tokens, strata, 2, 32)
        assert not records
        assert "stratum E" in diagnostics[0]["reason"]

    def test_action_payloads_replay_events(self):
        tokens, strata = self._maps()
        session = _session()
        records, _ = emit_traces([session], tokens, strata, 2, 32)
        atc = records[3]["assistant"]["action"]
        assert atc == {"type": "add_to_cart", "product_id": "p1", "value_cents": 990}
        obs = records[2]["user"]["observation"]
        assert obs["page_type"] == "product" and obs["entity_id"] == "p1"
