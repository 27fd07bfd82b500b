"""Persona assignment and population-distribution analytics.

Tokens are assigned with one inference-mode encoder pass plus a nearest
codebook entry scan. Token profiles (stratum mixture, raw-scalar centroid,
majority head bins) computed on a reference population let per-store token
distributions predict stratum mixes and reconstruct store-level behavioral
means; stratum E is excluded throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import PreconditionError
from .events import SCALAR_FEATURE_NAMES, Stratum

PROFILE_STRATA = ("A", "B", "C", "D")


@dataclass
class TokenProfile:
    token: int
    support: int
    stratum_dist: np.ndarray        # probabilities over A-D
    centroid: np.ndarray            # mean raw 16-scalar vector of assigned buyers
    head_bins: dict[str, int]       # majority-vote bin per auxiliary head

    def as_dict(self) -> dict:
        return {
            "token": self.token,
            "support": self.support,
            "stratum_dist": {s: float(p) for s, p in zip(PROFILE_STRATA, self.stratum_dist)},
            "centroid": {n: float(v) for n, v in zip(SCALAR_FEATURE_NAMES, self.centroid)},
            "head_bins": dict(self.head_bins),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TokenProfile":
        return cls(
            token=int(doc["token"]),
            support=int(doc["support"]),
            stratum_dist=np.array([doc["stratum_dist"][s] for s in PROFILE_STRATA]),
            centroid=np.array([doc["centroid"][n] for n in SCALAR_FEATURE_NAMES]),
            head_bins={k: int(v) for k, v in doc["head_bins"].items()},
        )


@dataclass
class StoreDistribution:
    shop_id: str
    probs: np.ndarray               # over the K tokens
    buyer_count: int


def assign_tokens(model, rows: np.ndarray) -> np.ndarray:
    """Token per row: inference-mode encode then nearest-entry quantize."""
    z = model.encode(np.atleast_2d(rows))
    tokens, _ = model.codebook.quantize_batch(z)
    return tokens


def store_distribution(
    shop_ids: Sequence[str], tokens: np.ndarray, codebook_size: int
) -> list[StoreDistribution]:
    """Empirical per-shop distribution over tokens; empty shops are omitted."""
    tokens = np.asarray(tokens)
    out = []
    for shop in sorted(set(shop_ids)):
        idx = [i for i, s in enumerate(shop_ids) if s == shop]
        if not idx:
            continue
        counts = np.bincount(tokens[idx], minlength=codebook_size).astype(np.float64)
        out.append(
            StoreDistribution(shop_id=shop, probs=counts / counts.sum(), buyer_count=len(idx))
        )
    return out


def build_profiles(
    tokens: np.ndarray,
    strata: Sequence[str],
    raw_scalars: np.ndarray,
    label_bins: Mapping[str, np.ndarray],
) -> dict[int, TokenProfile]:
    """Profiles from a reference population; stratum-E rows are ignored."""
    tokens = np.asarray(tokens)
    strata = np.asarray(strata)
    raw_scalars = np.asarray(raw_scalars, dtype=np.float64)
    keep = strata != Stratum.E.value
    profiles = {}
    for token in np.unique(tokens[keep]):
        members = np.flatnonzero(keep & (tokens == token))
        member_strata = strata[members]
        dist = np.array([np.mean(member_strata == s) for s in PROFILE_STRATA])
        bins = {}
        for head, values in label_bins.items():
            counts = np.bincount(np.asarray(values)[members], minlength=3)
            bins[head] = int(np.argmax(counts))  # ties resolve to the lower bin
        profiles[int(token)] = TokenProfile(
            token=int(token),
            support=int(members.size),
            stratum_dist=dist,
            centroid=raw_scalars[members].mean(axis=0),
            head_bins=bins,
        )
    return profiles


def predict_store_strata(
    dist: StoreDistribution, profiles: Mapping[int, TokenProfile]
) -> np.ndarray:
    """Mix token stratum profiles by the store's token distribution."""
    used = np.flatnonzero(dist.probs > 0)
    missing = [int(t) for t in used if int(t) not in profiles]
    if missing:
        raise PreconditionError(
            f"shop {dist.shop_id!r} uses tokens without profiles: {missing}"
        )
    out = np.zeros(len(PROFILE_STRATA), dtype=np.float64)
    for t in used:
        out += dist.probs[t] * profiles[int(t)].stratum_dist
    return out


def js_divergence(p: Sequence[float], q: Sequence[float]) -> float:
    """Base-2 Jensen-Shannon divergence; 0 for identical distributions,
    1 for disjoint supports."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise PreconditionError("distributions must share a support")
    if abs(p.sum() - 1.0) > 1e-6 or abs(q.sum() - 1.0) > 1e-6:
        raise PreconditionError("distributions must be normalized")
    if np.any(p < 0) or np.any(q < 0):
        raise PreconditionError("distributions must be non-negative")
    m = 0.5 * (p + q)

    def kl(a: np.ndarray) -> float:
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / m[mask])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def reconstruct_store_features(
    distributions: Sequence[StoreDistribution],
    profiles: Mapping[int, TokenProfile],
    true_means: Mapping[str, np.ndarray],
) -> tuple[dict[str, np.ndarray], dict[str, float | None]]:
    """Token-mixture reconstruction of per-store raw scalar means and the
    per-feature R-squared across stores.

    Features with zero cross-store variance get R-squared None.
    """
    if len(distributions) < 3:
        raise PreconditionError("feature reconstruction needs at least 3 stores")
    predicted = {}
    for dist in distributions:
        used = np.flatnonzero(dist.probs > 0)
        missing = [int(t) for t in used if int(t) not in profiles]
        if missing:
            raise PreconditionError(
                f"shop {dist.shop_id!r} uses tokens without profiles: {missing}"
            )
        x_hat = np.zeros(len(SCALAR_FEATURE_NAMES), dtype=np.float64)
        for t in used:
            x_hat += dist.probs[t] * profiles[int(t)].centroid
        predicted[dist.shop_id] = x_hat

    shops = [d.shop_id for d in distributions]
    truth = np.stack([np.asarray(true_means[s], dtype=np.float64) for s in shops])
    guess = np.stack([predicted[s] for s in shops])
    r2: dict[str, float | None] = {}
    for j, name in enumerate(SCALAR_FEATURE_NAMES):
        ss_tot = float(np.sum((truth[:, j] - truth[:, j].mean()) ** 2))
        if ss_tot == 0.0:
            r2[name] = None
            continue
        ss_res = float(np.sum((guess[:, j] - truth[:, j]) ** 2))
        r2[name] = 1.0 - ss_res / ss_tot
    return predicted, r2


def distribution_report(
    shop_ids: Sequence[str],
    tokens: np.ndarray,
    strata: Sequence[str],
    raw_scalars: np.ndarray,
    label_bins: Mapping[str, np.ndarray],
    codebook_size: int,
    profiles: Mapping[int, TokenProfile] | None = None,
) -> dict:
    """Population-recovery analysis: per-shop stratum-mixture prediction with
    JS divergence, plus store-feature reconstruction R-squared.

    Rows must already be restricted to strata A-D. Profiles default to ones
    computed from the evaluated population itself.
    """
    strata = np.asarray(strata)
    if np.any(strata == Stratum.E.value):
        raise PreconditionError("distribution analysis expects stratum-E rows removed")
    tokens = np.asarray(tokens)
    if profiles is None:
        profiles = build_profiles(tokens, strata, raw_scalars, label_bins)
    dists = store_distribution(shop_ids, tokens, codebook_size)

    shops_out = []
    js_values = []
    true_means = {}
    shop_arr = np.asarray(shop_ids)
    for dist in dists:
        members = shop_arr == dist.shop_id
        true_strata = np.array([np.mean(strata[members] == s) for s in PROFILE_STRATA])
        predicted = predict_store_strata(dist, profiles)
        js = js_divergence(true_strata, predicted)
        js_values.append(js)
        true_means[dist.shop_id] = np.asarray(raw_scalars, dtype=np.float64)[members].mean(axis=0)
        shops_out.append(
            {
                "shop_id": dist.shop_id,
                "buyers": dist.buyer_count,
                "true_strata": {s: float(v) for s, v in zip(PROFILE_STRATA, true_strata)},
                "predicted_strata": {s: float(v) for s, v in zip(PROFILE_STRATA, predicted)},
                "js_divergence": js,
            }
        )

    _, r2 = reconstruct_store_features(dists, profiles, true_means)
    return {
        "shops": shops_out,
        "mean_js": float(np.mean(js_values)),
        "median_js": float(np.median(js_values)),
        "per_feature_r2": r2,
        "tokens_used": int(np.unique(tokens).size),
        "profiles": [profiles[t].as_dict() for t in sorted(profiles)],
    }
