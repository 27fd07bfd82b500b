"""SFT-ready multi-turn trace records with template goals.

Each step of a session becomes one record: a fixed system turn, a user turn
carrying the persona token surface form, the goal, a cumulative progress
log, and a page-observation placeholder, and an assistant turn with the
structured action replaying the step. Records are newline-delimited JSON
with deterministic serialization, so parse -> serialize round-trips
byte-identically.
"""

from __future__ import annotations

import json
from collections import Counter
from typing import Iterable, Mapping

from .errors import PreconditionError
from .events import EventRecord, Stratum

TRACE_FORMAT_VERSION = 1

TRACE_SYSTEM_PROMPT = (
    "You are a shopping agent navigating an online storefront. At every step "
    "you receive your buyer profile token, the session goal, a progress log of "
    "your previous actions, and the current page observation. Respond with a "
    "single JSON action object matching the schema "
    '{"type": string, "product_id"?: string, "collection_id"?: string, '
    '"query"?: string, "value_cents"?: integer} followed by a short reasoning '
    "note. Act consistently with the buyer profile token."
)

ACTION_TYPE_BY_EVENT = {
    "page_view": "open_page",
    "product_view": "view_product",
    "search": "search",
    "collection_view": "view_collection",
    "add_to_cart": "add_to_cart",
    "checkout_start": "start_checkout",
    "purchase": "purchase",
}

PAGE_TYPE_BY_EVENT = {
    "page_view": "home",
    "product_view": "product",
    "search": "search_results",
    "collection_view": "collection",
    "add_to_cart": "product",
    "checkout_start": "checkout",
    "purchase": "order_confirmation",
}


def persona_token_string(token: int, codebook_size: int) -> str:
    """Vocabulary surface form of one persona token."""
    if not 0 <= token < codebook_size:
        raise PreconditionError(f"token {token} outside [0, {codebook_size})")
    return f"<|persona_{token}|>"


def synthesize_goal(category: str, stratum: Stratum, stage: int) -> str:
    """Template goal text: stage 1 is intent-neutral, stage 2 carries the
    funnel-derived intent. Stratum E is excluded from training data."""
    if not category:
        raise PreconditionError("goal synthesis requires a category")
    if stratum == Stratum.E:
        raise PreconditionError("stratum E sessions are excluded from traces")
    if stage == 1:
        return f"You are interested in {category}."
    if stage == 2:
        if stratum == Stratum.D:
            return f"You are here to browse {category}."
        return f"You are here to buy {category}."
    raise PreconditionError(f"stage must be 1 or 2, got {stage}")


def infer_category(events: list[EventRecord]) -> str:
    """Most frequent collection name in the session, then the first query,
    then a generic fallback."""
    collections = Counter(e.collection_id for e in events if e.collection_id)
    if collections:
        best = max(collections.items(), key=lambda kv: (kv[1], kv[0]))
        return best[0]
    for e in events:
        if e.query:
            return e.query
    return "the storefront catalog"


def _action_object(event: EventRecord) -> dict:
    action: dict = {"type": ACTION_TYPE_BY_EVENT[event.event_type]}
    if event.product_id is not None:
        action["product_id"] = event.product_id
    if event.collection_id is not None:
        action["collection_id"] = event.collection_id
    if event.query is not None:
        action["query"] = event.query
    if event.value_cents is not None:
        action["value_cents"] = event.value_cents
    return action


def _observation(event: EventRecord) -> dict:
    obs: dict = {"page_type": PAGE_TYPE_BY_EVENT[event.event_type]}
    entity = event.product_id or event.collection_id or event.query
    if entity is not None:
        obs["entity_id"] = entity
        obs["title"] = f"{obs['page_type'].replace('_', ' ')} page: {entity}"
    return obs


def _progress_entry(step: int, event: EventRecord) -> str:
    action = _action_object(event)
    target = action.get("product_id") or action.get("collection_id") or action.get("query")
    if target:
        return f"step {step}: {action['type']} {target}"
    return f"step {step}: {action['type']}"


def serialize_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def emit_traces(
    sessions: Iterable[list[EventRecord]],
    assignments: Mapping[tuple[str, str], int],
    strata: Mapping[tuple[str, str], Stratum],
    stage: int,
    codebook_size: int,
) -> tuple[list[dict], list[dict]]:
    """One record per step of each session.

    Sessions whose buyer has no assigned token, sits in stratum E, or has
    zero events are skipped with a diagnostic.
    """
    records: list[dict] = []
    diagnostics: list[dict] = []
    for events in sessions:
        if not events:
            diagnostics.append({"reason": "empty session"})
            continue
        key = (events[0].buyer_id, events[0].shop_id)
        token = assignments.get(key)
        stratum = strata.get(key)
        if token is None or stratum is None:
            diagnostics.append(
                {"reason": "missing assignment", "buyer_id": key[0], "shop_id": key[1]}
            )
            continue
        if stratum == Stratum.E:
            diagnostics.append(
                {"reason": "stratum E excluded", "buyer_id": key[0], "shop_id": key[1]}
            )
            continue
        category = infer_category(events)
        goal = synthesize_goal(category, stratum, stage)
        persona = persona_token_string(int(token), codebook_size)
        progress: list[str] = []
        for step, event in enumerate(events):
            action = _action_object(event)
            records.append(
                {
                    "system": TRACE_SYSTEM_PROMPT,
                    "user": {
                        "persona": persona,
                        "goal": goal,
                        "progress": list(progress),
                        "observation": _observation(event),
                    },
                    "assistant": {
                        "action": action,
                        "reasoning": (
                            f"Acting as buyer profile {persona} toward the goal; "
                            f"the next step is {action['type']}."
                        ),
                    },
                    "metadata": {
                        "shop_id": key[1],
                        "stratum": stratum.value,
                        "token": int(token),
                        "stage": stage,
                        "step_index": step,
                    },
                }
            )
            progress.append(_progress_entry(step, event))
    return records, diagnostics
