"""Raw event schema, sessionization, and buyer-shop aggregation.

The event log is newline-delimited JSON, one object per line, with field
names exactly matching EventRecord. Aggregation produces one record per
buyer-shop pair holding the 16 raw behavioral scalars, three per-channel
product-embedding means with evidence masks, and the funnel stratum.
"""

from __future__ import annotations

import datetime
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable, Iterator, Mapping

import numpy as np

from .catalog import ProductCatalog
from .errors import OrderingError, PreconditionError, SchemaError

EVENT_TYPES = (
    "page_view",
    "product_view",
    "search",
    "collection_view",
    "add_to_cart",
    "checkout_start",
    "purchase",
)

# Weights of the bounded intent composite, increasing with funnel depth.
INTENT_WEIGHT_ATC = 3
INTENT_WEIGHT_CHECKOUT = 5
INTENT_WEIGHT_PURCHASE = 8


class Stratum(str, Enum):
    A = "A"  # purchasers
    B = "B"  # checkout abandoners
    C = "C"  # cart builders
    D = "D"  # window shoppers
    E = "E"  # bouncers (page views only)


STRATA = tuple(Stratum)
ACTIVE_STRATA = (Stratum.A, Stratum.B, Stratum.C, Stratum.D)


@dataclass
class EventRecord:
    buyer_id: str
    shop_id: str
    session_id: str
    ts: int  # milliseconds since epoch
    event_type: str
    product_id: str | None = None
    collection_id: str | None = None
    query: str | None = None
    value_cents: int | None = None

    def __post_init__(self) -> None:
        if self.event_type not in EVENT_TYPES:
            raise SchemaError(f"unknown event_type {self.event_type!r}")
        if self.ts < 0:
            raise SchemaError(f"negative timestamp {self.ts}")
        if self.event_type in ("product_view", "add_to_cart") and not self.product_id:
            raise SchemaError(f"{self.event_type} event requires product_id")
        if self.event_type == "search" and not self.query:
            raise SchemaError("search event requires query")
        if self.event_type == "collection_view" and not self.collection_id:
            raise SchemaError("collection_view event requires collection_id")
        if self.value_cents is not None and self.value_cents < 0:
            raise SchemaError("value_cents must be non-negative")


@dataclass
class SessionSummary:
    buyer_id: str
    shop_id: str
    session_id: str
    start_ts: int
    end_ts: int
    counts: dict[str, int]
    product_ids_viewed: list[str] = field(default_factory=list)
    product_ids_carted: list[str] = field(default_factory=list)
    product_ids_purchased: list[str] = field(default_factory=list)
    collection_ids: list[str] = field(default_factory=list)
    queries: list[str] = field(default_factory=list)
    cart_value_cents: int | None = None
    order_value_cents: int | None = None

    @property
    def duration_ms(self) -> int:
        return self.end_ts - self.start_ts

    def has_any(self, *event_types: str) -> bool:
        return any(self.counts.get(t, 0) > 0 for t in event_types)


@dataclass
class BuyerShopAggregate:
    buyer_id: str
    shop_id: str
    # exposure & volume (8)
    total_sessions: int = 0
    active_days: int = 0
    pdp_view_sessions: int = 0
    atc_sessions: int = 0
    checkout_sessions: int = 0
    purchase_sessions: int = 0
    search_sessions: int = 0
    collection_sessions: int = 0
    # engagement (2)
    total_duration_ms: int = 0
    total_product_views: int = 0
    # funnel rates (3)
    atc_rate: float = 0.0
    checkout_rate: float = 0.0
    browse_only_rate: float = 0.0
    # intent (1)
    intent_strength: float = 0.0
    # dollar values (2)
    avg_cart_value_cents: float = 0.0
    avg_order_value_cents: float = 0.0
    # per-channel product-embedding means with evidence masks
    emb_viewed: np.ndarray | None = None
    emb_carted: np.ndarray | None = None
    emb_purchased: np.ndarray | None = None
    mask_viewed: int = 0
    mask_carted: int = 0
    mask_purchased: int = 0
    stratum: Stratum = Stratum.E
    # bookkeeping, not features
    browse_only_sessions: int = 0
    dropped_product_ids: int = 0

    def scalar_values(self) -> np.ndarray:
        """The 16 raw scalars in canonical feature order."""
        return np.array(
            [
                self.total_sessions,
                self.active_days,
                self.pdp_view_sessions,
                self.atc_sessions,
                self.checkout_sessions,
                self.purchase_sessions,
                self.search_sessions,
                self.collection_sessions,
                self.total_duration_ms,
                self.total_product_views,
                self.atc_rate,
                self.checkout_rate,
                self.browse_only_rate,
                self.intent_strength,
                self.avg_cart_value_cents,
                self.avg_order_value_cents,
            ],
            dtype=np.float64,
        )


SCALAR_FEATURE_NAMES = (
    "total_sessions",
    "active_days",
    "pdp_view_sessions",
    "atc_sessions",
    "checkout_sessions",
    "purchase_sessions",
    "search_sessions",
    "collection_sessions",
    "total_duration_ms",
    "total_product_views",
    "atc_rate",
    "checkout_rate",
    "browse_only_rate",
    "intent_strength",
    "avg_cart_value_cents",
    "avg_order_value_cents",
)


def parse_event(doc: Mapping[str, object]) -> EventRecord:
    try:
        return EventRecord(
            buyer_id=str(doc["buyer_id"]),
            shop_id=str(doc["shop_id"]),
            session_id=str(doc["session_id"]),
            ts=int(doc["ts"]),  # type: ignore[arg-type]
            event_type=str(doc["event_type"]),
            product_id=doc.get("product_id"),  # type: ignore[arg-type]
            collection_id=doc.get("collection_id"),  # type: ignore[arg-type]
            query=doc.get("query"),  # type: ignore[arg-type]
            value_cents=None if doc.get("value_cents") is None else int(doc["value_cents"]),  # type: ignore[arg-type]
        )
    except KeyError as exc:
        raise SchemaError(f"event record missing field {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"malformed event record: {exc}") from exc


def read_events(fh: IO[str]) -> Iterator[EventRecord]:
    """Parse an ndjson event stream, raising SchemaError with a line number."""
    for lineno, line in enumerate(fh, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"line {lineno}: invalid JSON: {exc}") from exc
        try:
            yield parse_event(doc)
        except SchemaError as exc:
            raise SchemaError(f"line {lineno}: {exc}") from exc


def event_to_json(event: EventRecord) -> str:
    doc: dict[str, object] = {
        "buyer_id": event.buyer_id,
        "shop_id": event.shop_id,
        "session_id": event.session_id,
        "ts": event.ts,
        "event_type": event.event_type,
    }
    for name in ("product_id", "collection_id", "query", "value_cents"):
        value = getattr(event, name)
        if value is not None:
            doc[name] = value
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def sessionize(events: Iterable[EventRecord]) -> list[SessionSummary]:
    """Group one buyer-shop's time-ordered events into session summaries.

    Sessions are delimited by the log's session_id; summaries come back
    ordered by (first event ts, session_id).
    """
    events = list(events)
    if not events:
        return []
    buyer_id, shop_id = events[0].buyer_id, events[0].shop_id
    last_ts = None
    sessions: dict[str, list[EventRecord]] = {}
    for ev in events:
        if ev.buyer_id != buyer_id or ev.shop_id != shop_id:
            raise PreconditionError(
                f"mixed buyer/shop in sessionize input: {(ev.buyer_id, ev.shop_id)} "
                f"vs {(buyer_id, shop_id)}"
            )
        if last_ts is not None and ev.ts < last_ts:
            raise OrderingError(f"events not sorted by ts at {ev.ts} < {last_ts}")
        last_ts = ev.ts
        sessions.setdefault(ev.session_id, []).append(ev)

    summaries = []
    for session_id, evs in sessions.items():
        counts = {t: 0 for t in EVENT_TYPES}
        viewed: list[str] = []
        carted: list[str] = []
        purchased: list[str] = []
        collections: list[str] = []
        queries: list[str] = []
        cart_value = None
        order_value = None
        for ev in evs:
            counts[ev.event_type] += 1
            if ev.event_type == "product_view":
                viewed.append(ev.product_id)  # type: ignore[arg-type]
            elif ev.event_type == "add_to_cart":
                carted.append(ev.product_id)  # type: ignore[arg-type]
                if ev.value_cents is not None:
                    cart_value = (cart_value or 0) + ev.value_cents
            elif ev.event_type == "purchase":
                if ev.product_id is not None:
                    purchased.append(ev.product_id)
                if ev.value_cents is not None:
                    order_value = (order_value or 0) + ev.value_cents
            elif ev.event_type == "collection_view":
                collections.append(ev.collection_id)  # type: ignore[arg-type]
            elif ev.event_type == "search":
                queries.append(ev.query)  # type: ignore[arg-type]
        summaries.append(
            SessionSummary(
                buyer_id=buyer_id,
                shop_id=shop_id,
                session_id=session_id,
                start_ts=evs[0].ts,
                end_ts=evs[-1].ts,
                counts=counts,
                product_ids_viewed=viewed,
                product_ids_carted=carted,
                product_ids_purchased=purchased,
                collection_ids=collections,
                queries=queries,
                cart_value_cents=cart_value,
                order_value_cents=order_value,
            )
        )
    summaries.sort(key=lambda s: (s.start_ts, s.session_id))
    return summaries


def stratify(
    purchase_sessions: int,
    checkout_sessions: int,
    atc_sessions: int,
    pdp_view_sessions: int,
    search_sessions: int,
    collection_sessions: int,
) -> Stratum:
    """Priority cascade: purchase, then checkout, then cart, then any browse signal."""
    if min(purchase_sessions, checkout_sessions, atc_sessions,
           pdp_view_sessions, search_sessions, collection_sessions) < 0:
        raise PreconditionError("stratify requires non-negative counts")
    if purchase_sessions > 0:
        return Stratum.A
    if checkout_sessions > 0:
        return Stratum.B
    if atc_sessions > 0:
        return Stratum.C
    if pdp_view_sessions > 0 or search_sessions > 0 or collection_sessions > 0:
        return Stratum.D
    return Stratum.E


def intent_strength(n_sessions: int, n_atc: int, n_co: int, n_pur: int) -> float:
    """Bounded composite in [0, 16/17) weighting conversion-bearing sessions."""
    for n in (n_sessions, n_atc, n_co, n_pur):
        if n < 0:
            raise PreconditionError("intent_strength requires non-negative counts")
    if max(n_atc, n_co, n_pur) > n_sessions:
        raise PreconditionError("conversion session counts cannot exceed total sessions")
    weighted = (
        INTENT_WEIGHT_ATC * n_atc
        + INTENT_WEIGHT_CHECKOUT * n_co
        + INTENT_WEIGHT_PURCHASE * n_pur
    )
    if weighted == 0:
        return 0.0
    return weighted / (n_sessions + weighted)


def _active_days(sessions: list[SessionSummary]) -> int:
    days = set()
    for s in sessions:
        for ts in (s.start_ts, s.end_ts):
            days.add(datetime.datetime.fromtimestamp(ts / 1000.0, tz=datetime.timezone.utc).date())
    return len(days)


def aggregate(sessions: list[SessionSummary], catalog: ProductCatalog) -> BuyerShopAggregate:
    """Fold one buyer-shop's sessions into the raw aggregate record.

    Embedding channels are means over the union of each channel's product
    ids; ids missing from the catalog are skipped and counted.
    """
    if not sessions:
        raise PreconditionError("aggregate requires at least one session")
    buyer_id, shop_id = sessions[0].buyer_id, sessions[0].shop_id
    if any(s.buyer_id != buyer_id or s.shop_id != shop_id for s in sessions):
        raise PreconditionError("aggregate requires sessions from a single buyer-shop pair")

    agg = BuyerShopAggregate(buyer_id=buyer_id, shop_id=shop_id)
    agg.total_sessions = len(sessions)
    agg.active_days = _active_days(sessions)
    agg.pdp_view_sessions = sum(1 for s in sessions if s.counts["product_view"] > 0)
    agg.atc_sessions = sum(1 for s in sessions if s.counts["add_to_cart"] > 0)
    agg.checkout_sessions = sum(1 for s in sessions if s.counts["checkout_start"] > 0)
    agg.purchase_sessions = sum(1 for s in sessions if s.counts["purchase"] > 0)
    agg.search_sessions = sum(1 for s in sessions if s.counts["search"] > 0)
    agg.collection_sessions = sum(1 for s in sessions if s.counts["collection_view"] > 0)
    agg.total_duration_ms = sum(s.duration_ms for s in sessions)
    agg.total_product_views = sum(s.counts["product_view"] for s in sessions)
    agg.browse_only_sessions = sum(
        1 for s in sessions if not s.has_any("add_to_cart", "checkout_start", "purchase")
    )

    n = agg.total_sessions
    agg.atc_rate = agg.atc_sessions / n
    agg.checkout_rate = agg.checkout_sessions / n
    agg.browse_only_rate = agg.browse_only_sessions / n
    agg.intent_strength = intent_strength(
        n, agg.atc_sessions, agg.checkout_sessions, agg.purchase_sessions
    )

    cart_values = [s.cart_value_cents for s in sessions if s.cart_value_cents is not None]
    order_values = [s.order_value_cents for s in sessions if s.order_value_cents is not None]
    agg.avg_cart_value_cents = float(np.mean(cart_values)) if cart_values else 0.0
    agg.avg_order_value_cents = float(np.mean(order_values)) if order_values else 0.0

    channels = {
        "viewed": sorted({p for s in sessions for p in s.product_ids_viewed}),
        "carted": sorted({p for s in sessions for p in s.product_ids_carted}),
        "purchased": sorted({p for s in sessions for p in s.product_ids_purchased}),
    }
    for name, ids in channels.items():
        vectors = []
        for pid in ids:
            vec = catalog.lookup(pid)
            if vec is None:
                agg.dropped_product_ids += 1
            else:
                vectors.append(vec)
        if vectors:
            mean = np.mean(np.asarray(vectors, dtype=np.float64), axis=0)
            setattr(agg, f"emb_{name}", mean)
            setattr(agg, f"mask_{name}", 1)
        else:
            setattr(agg, f"emb_{name}", np.zeros(catalog.dim, dtype=np.float64))
            setattr(agg, f"mask_{name}", 0)

    agg.stratum = stratify(
        agg.purchase_sessions,
        agg.checkout_sessions,
        agg.atc_sessions,
        agg.pdp_view_sessions,
        agg.search_sessions,
        agg.collection_sessions,
    )
    return agg


def aggregate_to_json(agg: BuyerShopAggregate) -> str:
    doc = {
        "buyer_id": agg.buyer_id,
        "shop_id": agg.shop_id,
        "scalars": {name: getattr(agg, name) for name in SCALAR_FEATURE_NAMES},
        "browse_only_sessions": agg.browse_only_sessions,
        "dropped_product_ids": agg.dropped_product_ids,
        "stratum": agg.stratum.value,
        "masks": [agg.mask_viewed, agg.mask_carted, agg.mask_purchased],
        "emb_viewed": [float(x) for x in agg.emb_viewed],
        "emb_carted": [float(x) for x in agg.emb_carted],
        "emb_purchased": [float(x) for x in agg.emb_purchased],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def aggregate_from_json(line: str) -> BuyerShopAggregate:
    doc = json.loads(line)
    agg = BuyerShopAggregate(buyer_id=doc["buyer_id"], shop_id=doc["shop_id"])
    for name in SCALAR_FEATURE_NAMES:
        setattr(agg, name, doc["scalars"][name])
    agg.browse_only_sessions = doc["browse_only_sessions"]
    agg.dropped_product_ids = doc["dropped_product_ids"]
    agg.stratum = Stratum(doc["stratum"])
    agg.mask_viewed, agg.mask_carted, agg.mask_purchased = doc["masks"]
    agg.emb_viewed = np.asarray(doc["emb_viewed"], dtype=np.float64)
    agg.emb_carted = np.asarray(doc["emb_carted"], dtype=np.float64)
    agg.emb_purchased = np.asarray(doc["emb_purchased"], dtype=np.float64)
    return agg


def read_aggregates(fh: IO[str]) -> list[BuyerShopAggregate]:
    return [aggregate_from_json(line) for line in fh if line.strip()]


def write_aggregates(aggs: Iterable[BuyerShopAggregate], fh: IO[str]) -> None:
    for agg in aggs:
        fh.write(aggregate_to_json(agg) + "\n")
