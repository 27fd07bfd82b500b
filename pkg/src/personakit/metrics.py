"""Evaluation statistics: cluster quality, conversion-rate alignment with
mismatch baselines, behavioral-separation tests, and the stochastic
persona-policy simulator that stands in for a live agent at desk scale.

All functions are pure over immutable inputs; sampling loops take an
explicit seeded generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as sps

from .config import MetricsConfig, SimulatorConfig
from .errors import PreconditionError
from .events import BuyerShopAggregate, SCALAR_FEATURE_NAMES, Stratum
from .population import TokenProfile

ATC_RATE_IDX = SCALAR_FEATURE_NAMES.index("atc_rate")
CHECKOUT_RATE_IDX = SCALAR_FEATURE_NAMES.index("checkout_rate")

GroupKey = tuple[str, int, str]  # (shop_id, token, stratum letter)


# ---------------------------------------------------------------------------
# cluster quality


def purity_and_mixing(
    tokens: np.ndarray,
    strata: Sequence[str],
    mixing_threshold: float = 0.2,
) -> list[dict]:
    """Per-cluster stratum purity and the incompatible-mixing flag.

    A cluster is incompatibly mixed when high-funnel buyers (A-C) and
    window shoppers (D) each hold at least the threshold share.
    """
    strata = np.asarray(strata)
    if not set(np.unique(strata)) <= {"A", "B", "C", "D"}:
        raise PreconditionError("purity expects strata within A-D")
    rows = []
    for token in np.unique(tokens):
        members = strata[tokens == token]
        size = members.size
        counts = {s: int(np.sum(members == s)) for s in "ABCD"}
        purity = max(counts.values()) / size
        high_funnel = (counts["A"] + counts["B"] + counts["C"]) / size
        window = counts["D"] / size
        rows.append(
            {
                "token": int(token),
                "size": int(size),
                "strata": counts,
                "purity": purity,
                "incompatible": bool(
                    high_funnel >= mixing_threshold and window >= mixing_threshold
                ),
            }
        )
    return rows


def coherence(
    tokens: np.ndarray,
    bins: np.ndarray,
    threshold: float = 0.05,
) -> tuple[float, list[dict]]:
    """Fraction of buyers sitting in codes whose members span Low and High."""
    bins = np.asarray(bins)
    total = tokens.shape[0]
    incoherent_buyers = 0
    rows = []
    for token in np.unique(tokens):
        members = bins[tokens == token]
        size = members.size
        shares = np.bincount(members, minlength=3) / size
        flag = bool(shares[0] >= threshold and shares[2] >= threshold)
        if flag:
            incoherent_buyers += size
        rows.append(
            {
                "token": int(token),
                "size": int(size),
                "bin_histogram": np.bincount(members, minlength=3).tolist(),
                "incoherent": flag,
            }
        )
    return incoherent_buyers / total, rows


def pairwise_cosine(
    values: np.ndarray,
    tokens: np.ndarray,
    cap: int = 200,
    n_samples: int = 10000,
    rng: np.random.Generator | None = None,
) -> float | None:
    """Size-weighted mean within-cluster pairwise cosine.

    Exact over all unordered pairs up to the size cap; larger clusters use
    a seeded sample of pairs.
    """
    values = np.asarray(values, dtype=np.float64)
    norms = np.linalg.norm(values, axis=1)
    unit = np.where(norms[:, None] > 0, values / np.where(norms[:, None] > 0, norms[:, None], 1.0), 0.0)
    weighted = 0.0
    weight_total = 0
    for token in np.unique(tokens):
        idx = np.flatnonzero(tokens == token)
        n = idx.size
        if n < 2:
            continue
        u = unit[idx]
        if n <= cap:
            total = u.sum(axis=0)
            cross = float(total @ total) - float(np.sum(u * u))
            mean_cos = cross / (n * (n - 1))
        else:
            if rng is None:
                raise PreconditionError("sampling pairwise cosine requires an rng")
            i = rng.integers(0, n, size=n_samples)
            j = rng.integers(0, n - 1, size=n_samples)
            j = np.where(j >= i, j + 1, j)
            mean_cos = float(np.mean(np.sum(u[i] * u[j], axis=1)))
        weighted += n * mean_cos
        weight_total += n
    if weight_total == 0:
        return None
    return weighted / weight_total


def calinski_harabasz(values: np.ndarray, tokens: np.ndarray) -> float:
    """Between/within dispersion ratio, each normalized by degrees of freedom."""
    values = np.asarray(values, dtype=np.float64)
    tokens = np.asarray(tokens)
    n = values.shape[0]
    labels = np.unique(tokens)
    k = labels.size
    if k <= 1 or k >= n:
        raise PreconditionError(f"Calinski-Harabasz undefined for k={k}, n={n}")
    global_centroid = values.mean(axis=0)
    ss_between = 0.0
    ss_within = 0.0
    for label in labels:
        cluster = values[tokens == label]
        centroid = cluster.mean(axis=0)
        diff = centroid - global_centroid
        ss_between += cluster.shape[0] * float(diff @ diff)
        ss_within += float(np.sum((cluster - centroid) ** 2))
    if ss_within == 0.0:
        return math.inf
    return (ss_between / (k - 1)) / (ss_within / (n - k))


def cluster_report(
    values: np.ndarray,
    tokens: np.ndarray,
    strata: Sequence[str],
    label_bins: Mapping[str, np.ndarray],
    cfg: MetricsConfig,
    rng: np.random.Generator,
) -> dict:
    """The full cluster-quality report (purity, coherence, separation)."""
    purity_rows = purity_and_mixing(tokens, strata, cfg.mixing_threshold)
    sizes = np.array([r["size"] for r in purity_rows])
    mean_purity = float(
        np.sum([r["purity"] * r["size"] for r in purity_rows]) / sizes.sum()
    )
    incompat = int(np.sum([r["incompatible"] for r in purity_rows]))
    incoherence = {}
    head_rows: dict[int, dict] = {r["token"]: dict(r) for r in purity_rows}
    for head, bins in label_bins.items():
        frac, rows = coherence(tokens, bins, cfg.coherence_threshold)
        incoherence[head] = frac
        for row in rows:
            head_rows[row["token"]][f"{head}_histogram"] = row["bin_histogram"]
            head_rows[row["token"]][f"{head}_incoherent"] = row["incoherent"]
    pw = pairwise_cosine(
        values, tokens, cfg.pairwise_cosine_cap, cfg.pairwise_cosine_samples, rng
    )
    try:
        ch = calinski_harabasz(values, tokens)
    except PreconditionError:
        ch = None
    return {
        "clusters_used": int(np.unique(tokens).size),
        "buyers": int(np.asarray(tokens).shape[0]),
        "mean_purity": mean_purity,
        "incompatible_clusters": incompat,
        "incoherence": incoherence,
        "pairwise_cosine": pw,
        "calinski_harabasz": None if ch is None else ("inf" if math.isinf(ch) else ch),
        "clusters": [head_rows[t] for t in sorted(head_rows)],
    }


# ---------------------------------------------------------------------------
# behavioral separation


def separation_stats(
    low: Sequence[float],
    medium: Sequence[float],
    high: Sequence[float],
    n_permutations: int = 10000,
    rng: np.random.Generator | None = None,
) -> dict:
    """Effect size and significance of the Low/Medium/High score split.

    Cohen's d and Welch compare Low vs High; Kruskal-Wallis runs across all
    three; the permutation test shuffles the Low/High pooled sample and
    reports the add-one-smoothed fraction of shuffles with a mean gap at
    least as large as observed.
    """
    low = np.asarray(low, dtype=np.float64)
    medium = np.asarray(medium, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    if low.size == 0 or medium.size == 0 or high.size == 0:
        raise PreconditionError("separation requires non-empty groups")
    out: dict[str, float | None] = {}

    if low.size >= 2 and high.size >= 2:
        pooled_var = (
            (low.size - 1) * low.var(ddof=1) + (high.size - 1) * high.var(ddof=1)
        ) / (low.size + high.size - 2)
        pooled_sd = math.sqrt(pooled_var)
        gap = high.mean() - low.mean()
        if pooled_sd == 0.0:
            out["cohens_d"] = 0.0 if gap == 0.0 else math.inf
            out["welch_p"] = 1.0 if gap == 0.0 else 0.0
        else:
            out["cohens_d"] = gap / pooled_sd
            out["welch_p"] = float(sps.ttest_ind(high, low, equal_var=False).pvalue)
    else:
        out["cohens_d"] = None
        out["welch_p"] = None

    pooled_all = np.concatenate([low, medium, high])
    if np.all(pooled_all == pooled_all[0]):
        out["kruskal_p"] = 1.0
    else:
        out["kruskal_p"] = float(sps.kruskal(low, medium, high).pvalue)

    if rng is None:
        rng = np.random.default_rng(0)
    pooled = np.concatenate([low, high])
    observed = abs(high.mean() - low.mean())
    perms = rng.permuted(np.tile(pooled, (n_permutations, 1)), axis=1)
    gaps = np.abs(
        perms[:, low.size :].mean(axis=1) - perms[:, : low.size].mean(axis=1)
    )
    out["permutation_p"] = float((1 + int(np.sum(gaps >= observed))) / (n_permutations + 1))
    return out


# ---------------------------------------------------------------------------
# conversion alignment


def alignment(
    atc_real: float, atc_agent: float, pur_real: float, pur_agent: float
) -> tuple[float, float, float]:
    """(ATC alignment, purchase alignment, their mean)."""
    for rate in (atc_real, atc_agent, pur_real, pur_agent):
        if not 0.0 <= rate <= 1.0:
            raise PreconditionError(f"rate {rate} outside [0, 1]")
    atc_align = 1.0 - abs(atc_real - atc_agent)
    pur_align = 1.0 - abs(pur_real - pur_agent)
    return atc_align, pur_align, 0.5 * (atc_align + pur_align)


def real_conversion_stats(
    aggregates: Sequence[BuyerShopAggregate],
    tokens: Mapping[tuple[str, str], int],
) -> dict[GroupKey, tuple[float, float]]:
    """Session-level add-to-cart and checkout fractions per (shop, token, stratum)."""
    sums: dict[GroupKey, list[int]] = {}
    for agg in aggregates:
        token = tokens.get((agg.buyer_id, agg.shop_id))
        if token is None or agg.stratum == Stratum.E:
            continue
        key = (agg.shop_id, int(token), agg.stratum.value)
        acc = sums.setdefault(key, [0, 0, 0])
        acc[0] += agg.total_sessions
        acc[1] += agg.atc_sessions
        acc[2] += agg.checkout_sessions
    return {
        key: (atc / total, co / total)
        for key, (total, atc, co) in sums.items()
        if total > 0
    }


def pairing_study(
    real: Mapping[GroupKey, tuple[float, float]],
    agent: Mapping[GroupKey, tuple[float, float]],
    rng: np.random.Generator,
) -> dict:
    """Correct vs mismatch pairings of agent stats against real buyer stats.

    Mismatch baselines pair an agent conditioned on one token against the
    real buyers of every other token in the same (shop, stratum) cell; the
    aggregates run over cells with at least two tokens so correct and
    mismatch averages cover the same keys. The stratified summary is the
    unweighted mean over strata of per-stratum means.
    """
    cells: dict[tuple[str, str], list[int]] = {}
    for shop, token, stratum in real:
        cells.setdefault((shop, stratum), []).append(token)

    per_key = []
    singles = 0
    for key in sorted(k for k in real if k in agent):
        shop, token, stratum = key
        others = sorted(t for t in cells[(shop, stratum)] if t != token)
        row = {
            "shop": shop,
            "token": token,
            "stratum": stratum,
            "real_atc": real[key][0],
            "real_pur": real[key][1],
            "agent_atc": agent[key][0],
            "agent_pur": agent[key][1],
        }
        row["correct"] = alignment(real[key][0], agent[key][0], real[key][1], agent[key][1])
        if others:
            mis = [
                alignment(
                    real[(shop, t, stratum)][0], agent[key][0],
                    real[(shop, t, stratum)][1], agent[key][1],
                )
                for t in others
            ]
            row["all_mismatch"] = tuple(float(np.mean([m[i] for m in mis])) for i in range(3))
            pick = others[int(rng.integers(len(others)))]
            row["random_mismatch"] = alignment(
                real[(shop, pick, stratum)][0], agent[key][0],
                real[(shop, pick, stratum)][1], agent[key][1],
            )
        else:
            singles += 1
            row["all_mismatch"] = None
            row["random_mismatch"] = None
        per_key.append(row)

    strata_present = sorted({row["stratum"] for row in per_key})
    summary: dict[str, dict] = {}
    stratified: dict[str, list[float]] = {"correct": [], "all_mismatch": [], "random_mismatch": []}
    for stratum in strata_present:
        rows = [r for r in per_key if r["stratum"] == stratum and r["all_mismatch"] is not None]
        if not rows:
            continue
        entry = {}
        for kind in ("correct", "all_mismatch", "random_mismatch"):
            triples = np.array([r[kind] for r in rows], dtype=np.float64)
            entry[kind] = {
                "atc": float(triples[:, 0].mean()),
                "pur": float(triples[:, 1].mean()),
                "ara": float(triples[:, 2].mean()),
            }
            stratified[kind].append(entry[kind]["ara"])
        entry["pairs"] = len(rows)
        summary[stratum] = entry

    overall = {
        kind: (float(np.mean(values)) if values else None)
        for kind, values in stratified.items()
    }
    return {
        "rows": per_key,
        "by_stratum": summary,
        "stratified_ara": overall,
        "single_token_cells": singles,
    }


# ---------------------------------------------------------------------------
# persona-policy simulator


@dataclass
class SimulatedSessions:
    """Per-session outcomes for one (shop, token, stratum) roster group."""

    action_counts: np.ndarray
    explore_counts: np.ndarray
    atc_flags: np.ndarray
    checkout_flags: np.ndarray

    @property
    def atc_rate(self) -> float:
        return float(self.atc_flags.mean())

    @property
    def checkout_rate(self) -> float:
        return float(self.checkout_flags.mean())

    @property
    def mean_actions(self) -> float:
        return float(self.action_counts.mean())


EXPLORE_ACTION_RATES = (0.5, 1.5, 3.0)


def policy_simulate(
    profiles: Mapping[int, TokenProfile],
    roster: Sequence[GroupKey],
    rng: np.random.Generator,
    cfg: SimulatorConfig,
) -> dict[GroupKey, SimulatedSessions]:
    """Stochastic sessions parameterized by each token's centroid rates and
    head bins; deterministic given the generator."""
    out = {}
    for key in sorted(set(roster)):
        _, token, _ = key
        profile = profiles.get(int(token))
        if profile is None:
            raise PreconditionError(f"no profile for token {token}")
        p_atc = float(np.clip(profile.centroid[ATC_RATE_IDX], 0.0, 1.0))
        p_co = float(np.clip(profile.centroid[CHECKOUT_RATE_IDX], 0.0, 1.0))
        browse_rate = cfg.engagement_action_rates[profile.head_bins["engagement"]]
        explore_rate = EXPLORE_ACTION_RATES[profile.head_bins["exploration"]]
        n = cfg.sessions_per_group
        atc = rng.random(n) < p_atc
        checkout = rng.random(n) < p_co
        atc = atc | checkout  # a checkout session always contains an add-to-cart
        explore = rng.poisson(explore_rate, size=n)
        browse = rng.poisson(browse_rate, size=n)
        actions = 1 + browse + explore + atc.astype(int) + checkout.astype(int)
        out[key] = SimulatedSessions(
            action_counts=actions,
            explore_counts=explore,
            atc_flags=atc,
            checkout_flags=checkout,
        )
    return out


def simulated_agent_stats(
    simulated: Mapping[GroupKey, SimulatedSessions],
) -> dict[GroupKey, tuple[float, float]]:
    return {key: (sim.atc_rate, sim.checkout_rate) for key, sim in simulated.items()}


def separation_report(
    profiles: Mapping[int, TokenProfile],
    simulated: Mapping[GroupKey, SimulatedSessions],
    n_permutations: int = 10000,
    rng: np.random.Generator | None = None,
) -> dict:
    """Group per-roster-cell mean scores by token head bin and test separation."""
    if rng is None:
        rng = np.random.default_rng(0)
    score_fns = {
        "engagement": lambda sim: sim.mean_actions,
        "exploration": lambda sim: float(sim.explore_counts.mean()),
        "purchase": lambda sim: float(
            (sim.atc_flags.astype(int) + sim.checkout_flags.astype(int)).mean()
        ),
    }
    report = {}
    for head, score_fn in score_fns.items():
        groups: list[list[float]] = [[], [], []]
        for key, sim in sorted(simulated.items()):
            profile = profiles[int(key[1])]
            groups[profile.head_bins[head]].append(score_fn(sim))
        if any(len(g) == 0 for g in groups):
            report[head] = {
                "mean_scores": [float(np.mean(g)) if g else None for g in groups],
                "stats": None,
            }
            continue
        stats_out = separation_stats(
            groups[0], groups[1], groups[2], n_permutations=n_permutations, rng=rng
        )
        report[head] = {
            "mean_scores": [float(np.mean(g)) for g in groups],
            "group_sizes": [len(g) for g in groups],
            "stats": stats_out,
        }
    return report
