"""Seeded synthetic clickstream populations with planted ground truth.

Buyers are drawn from per-shop archetype mixtures; each archetype fixes
session volume, funnel depth, browsing style, and a preferred product
cluster inside a catalog of well-separated Gaussian embedding clusters.
Archetype labels are the ground truth for the desk-scale evaluations and
are emitted only in the side table, never in the event log.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .catalog import ProductCatalog
from .config import derive_rng
from .errors import ConfigError
from .events import EventRecord

EPOCH_MS = 1704067200000          # 2024-01-01T00:00:00Z
WINDOW_MS = 122 * 24 * 3600 * 1000  # four months of traffic


@dataclass
class ArchetypeSpec:
    name: str
    mean_sessions: float
    p_product_view: float
    mean_products_viewed: float
    p_search: float
    p_collection: float
    # marginal per-session probabilities of reaching at least this funnel depth;
    # requires p_purchase <= p_checkout <= p_add_to_cart
    p_add_to_cart: float
    p_checkout: float
    p_purchase: float
    duration_mean_s: float
    duration_sigma: float
    product_cluster: int
    value_mean_cents: float = 2500.0
    value_sigma: float = 0.5

    def validate(self) -> None:
        probs = (
            self.p_product_view, self.p_search, self.p_collection,
            self.p_add_to_cart, self.p_checkout, self.p_purchase,
        )
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ConfigError(f"archetype {self.name!r} has probabilities outside [0,1]")
        if not self.p_purchase <= self.p_checkout <= self.p_add_to_cart:
            raise ConfigError(
                f"archetype {self.name!r} needs p_purchase <= p_checkout <= p_add_to_cart"
            )
        if self.mean_sessions < 1 or self.duration_mean_s <= 0:
            raise ConfigError(f"archetype {self.name!r} has degenerate volume parameters")


@dataclass
class ShopSpec:
    shop_id: str
    weights: list[float]
    buyers: int


@dataclass
class CatalogSpec:
    n_products: int = 400
    n_clusters: int = 4
    embedding_dim: int = 32
    separation: float = 10.0


@dataclass
class PopulationConfig:
    archetypes: list[ArchetypeSpec]
    shops: list[ShopSpec]
    catalog: CatalogSpec = field(default_factory=CatalogSpec)
    seed: int = 20240801

    def validate(self) -> "PopulationConfig":
        if not self.archetypes or not self.shops:
            raise ConfigError("population needs at least one archetype and one shop")
        if self.catalog.n_products < 1:
            raise ConfigError("catalog needs at least one product")
        for arch in self.archetypes:
            arch.validate()
            if not 0 <= arch.product_cluster < self.catalog.n_clusters:
                raise ConfigError(f"archetype {arch.name!r} references missing product cluster")
        for shop in self.shops:
            if shop.buyers < 1:
                raise ConfigError(f"shop {shop.shop_id!r} needs at least one buyer")
            if len(shop.weights) != len(self.archetypes):
                raise ConfigError(f"shop {shop.shop_id!r} weight count mismatch")
            if abs(sum(shop.weights) - 1.0) > 1e-9:
                raise ConfigError(f"shop {shop.shop_id!r} weights must sum to 1")
        return self

    def as_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "catalog": vars(self.catalog).copy(),
            "archetypes": [vars(a).copy() for a in self.archetypes],
            "shops": [vars(s).copy() for s in self.shops],
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "PopulationConfig":
        try:
            cfg = cls(
                archetypes=[ArchetypeSpec(**a) for a in doc["archetypes"]],
                shops=[ShopSpec(**s) for s in doc["shops"]],
                catalog=CatalogSpec(**doc.get("catalog", {})),
                seed=int(doc.get("seed", 20240801)),
            )
        except TypeError as exc:
            raise ConfigError(f"bad population config: {exc}") from exc
        return cfg.validate()


def _lognormal_mu(mean: float, sigma: float) -> float:
    return math.log(mean) - 0.5 * sigma * sigma


def generate_catalog(spec: CatalogSpec, seed: int) -> tuple[ProductCatalog, np.ndarray]:
    """Catalog embeddings as well-separated Gaussian clusters.

    Returns the catalog plus the per-product cluster assignment.
    """
    rng = derive_rng(seed, "synthgen/catalog")
    centers = rng.normal(size=(spec.n_clusters, spec.embedding_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= spec.separation
    clusters = np.arange(spec.n_products) % spec.n_clusters
    points = centers[clusters] + rng.normal(size=(spec.n_products, spec.embedding_dim))
    ids = [f"p{idx:05d}" for idx in range(spec.n_products)]
    return ProductCatalog(ids, points.astype(np.float32)), clusters


def _buyer_events(
    buyer_id: str,
    shop_id: str,
    arch: ArchetypeSpec,
    cluster_products: np.ndarray,
    rng: np.random.Generator,
) -> list[EventRecord]:
    n_sessions = 1 + rng.poisson(max(arch.mean_sessions - 1.0, 0.0))
    starts = np.sort(rng.integers(0, WINDOW_MS, size=n_sessions))
    events: list[EventRecord] = []
    for s_idx in range(n_sessions):
        session_id = f"{buyer_id}-s{s_idx:03d}"
        t0 = EPOCH_MS + int(starts[s_idx])
        duration_ms = int(
            rng.lognormal(_lognormal_mu(arch.duration_mean_s, arch.duration_sigma),
                          arch.duration_sigma) * 1000
        )

        depth_u = rng.random()
        reaches_purchase = depth_u < arch.p_purchase
        reaches_checkout = depth_u < arch.p_checkout
        reaches_cart = depth_u < arch.p_add_to_cart

        views_products = rng.random() < arch.p_product_view or reaches_cart
        searches = rng.random() < arch.p_search
        browses_collection = rng.random() < arch.p_collection

        planned: list[dict] = [{"event_type": "page_view"}]
        viewed: list[str] = []
        if views_products:
            n_views = 1 + rng.poisson(max(arch.mean_products_viewed - 1.0, 0.0))
            picks = rng.choice(cluster_products, size=n_views)
            for p in picks:
                pid = f"p{int(p):05d}"
                viewed.append(pid)
                planned.append({"event_type": "product_view", "product_id": pid})
        if searches:
            planned.append({"event_type": "search", "query": f"query-{rng.integers(0, 40)}"})
        if browses_collection:
            planned.append(
                {"event_type": "collection_view",
                 "collection_id": f"col-{arch.product_cluster}-{rng.integers(0, 4)}"}
            )
        if reaches_cart:
            target = viewed[int(rng.integers(0, len(viewed)))]
            value = int(rng.lognormal(_lognormal_mu(arch.value_mean_cents, arch.value_sigma),
                                      arch.value_sigma))
            planned.append({"event_type": "add_to_cart", "product_id": target,
                            "value_cents": max(value, 1)})
            if reaches_checkout:
                planned.append({"event_type": "checkout_start"})
            if reaches_purchase:
                planned.append({"event_type": "purchase", "product_id": target,
                                "value_cents": max(value, 1)})

        n_ev = len(planned)
        for i, doc in enumerate(planned):
            ts = t0 if n_ev == 1 else t0 + (duration_ms * i) // (n_ev - 1)
            events.append(EventRecord(buyer_id=buyer_id, shop_id=shop_id,
                                      session_id=session_id, ts=ts, **doc))
    events.sort(key=lambda e: (e.ts, e.session_id))
    return events


def generate(
    config: PopulationConfig,
) -> tuple[list[EventRecord], ProductCatalog, list[tuple[str, str, str]]]:
    """Generate (event log, catalog, buyer -> archetype ground truth).

    Deterministic given config.seed; shops use independently derived
    streams, so output is stable under per-shop parallel generation.
    """
    config.validate()
    catalog, clusters = generate_catalog(config.catalog, config.seed)
    products_by_cluster = [
        np.flatnonzero(clusters == c) for c in range(config.catalog.n_clusters)
    ]
    for c, members in enumerate(products_by_cluster):
        if len(members) == 0:
            raise ConfigError(f"product cluster {c} is empty; add products or drop clusters")

    events: list[EventRecord] = []
    truth: list[tuple[str, str, str]] = []
    for shop in config.shops:
        rng = derive_rng(config.seed, f"synthgen/shop/{shop.shop_id}")
        picks = rng.choice(len(config.archetypes), size=shop.buyers, p=shop.weights)
        for b_idx in range(shop.buyers):
            arch = config.archetypes[int(picks[b_idx])]
            buyer_id = f"{shop.shop_id}-b{b_idx:05d}"
            events.extend(
                _buyer_events(buyer_id, shop.shop_id, arch,
                              products_by_cluster[arch.product_cluster], rng)
            )
            truth.append((buyer_id, shop.shop_id, arch.name))
    return events, catalog, truth


def default_archetypes() -> list[ArchetypeSpec]:
    # cart_builder / checkout_abandoner / light_buyer share one product
    # cluster and identical browsing style, differing only in funnel depth;
    # window_flitter / window_devoted share a cluster and differ only in
    # engagement. Geometry-led clusterings conflate those pairs.
    return [
        ArchetypeSpec("bouncer", 1.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                      30.0, 0.4, 0),
        ArchetypeSpec("window_flitter", 2.5, 0.9, 2.0, 0.1, 0.1, 0.0, 0.0, 0.0,
                      50.0, 0.4, 0),
        ArchetypeSpec("window_devoted", 4.0, 0.95, 6.0, 0.3, 0.6, 0.0, 0.0, 0.0,
                      900.0, 0.4, 0),
        ArchetypeSpec("searcher", 3.0, 0.8, 3.0, 0.9, 0.2, 0.0, 0.0, 0.0,
                      240.0, 0.4, 1),
        ArchetypeSpec("cart_builder", 3.2, 0.95, 4.0, 0.3, 0.2, 0.55, 0.0, 0.0,
                      300.0, 0.4, 2, 2500.0),
        ArchetypeSpec("checkout_abandoner", 3.2, 0.95, 4.0, 0.3, 0.2, 0.55, 0.35, 0.0,
                      300.0, 0.4, 2, 2500.0),
        ArchetypeSpec("light_buyer", 3.2, 0.95, 4.0, 0.3, 0.2, 0.55, 0.35, 0.2,
                      300.0, 0.4, 2, 2500.0),
        ArchetypeSpec("whale", 6.0, 1.0, 6.0, 0.3, 0.3, 0.8, 0.65, 0.5,
                      800.0, 0.4, 3, 15000.0),
    ]


def default_population(seed: int = 20240801) -> PopulationConfig:
    """Twelve shops, eight archetypes, ~5000 buyer-shop pairs, 32-d embeddings."""
    mixes = [
        # browser-dominated through buyer-heavy storefronts
        [0.25, 0.25, 0.20, 0.15, 0.06, 0.04, 0.03, 0.02],
        [0.20, 0.30, 0.15, 0.15, 0.08, 0.05, 0.05, 0.02],
        [0.15, 0.20, 0.25, 0.15, 0.10, 0.06, 0.06, 0.03],
        [0.15, 0.15, 0.15, 0.25, 0.10, 0.08, 0.08, 0.04],
        [0.10, 0.20, 0.15, 0.15, 0.15, 0.10, 0.10, 0.05],
        [0.10, 0.15, 0.20, 0.10, 0.15, 0.10, 0.12, 0.08],
        [0.10, 0.12, 0.12, 0.12, 0.18, 0.12, 0.16, 0.08],
        [0.08, 0.12, 0.10, 0.10, 0.15, 0.15, 0.20, 0.10],
        [0.08, 0.10, 0.10, 0.10, 0.12, 0.15, 0.23, 0.12],
        [0.05, 0.10, 0.08, 0.08, 0.12, 0.15, 0.27, 0.15],
        [0.05, 0.08, 0.08, 0.06, 0.10, 0.13, 0.30, 0.20],
        [0.04, 0.06, 0.05, 0.05, 0.10, 0.12, 0.33, 0.25],
    ]
    shops = [
        ShopSpec(shop_id=f"shop{idx:02d}", weights=mix, buyers=420)
        for idx, mix in enumerate(mixes)
    ]
    return PopulationConfig(
        archetypes=default_archetypes(),
        shops=shops,
        catalog=CatalogSpec(n_products=400, n_clusters=4, embedding_dim=32),
        seed=seed,
    ).validate()
