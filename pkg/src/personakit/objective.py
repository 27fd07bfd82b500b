"""Training objective: group-aware reconstruction, commitment, gated
InfoNCE, and the three weighted-cross-entropy auxiliary heads, plus the
label-binning rules those heads are trained against.

Every loss function returns (value, gradient) pairs for its differentiable
inputs; gradients are exact for the returned value (verified against
central finite differences in the test suite).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import IO, Mapping, Sequence

import numpy as np

from .config import ObjectiveConfig
from .errors import ConfigError, DivergenceError, PreconditionError
from .events import BuyerShopAggregate, Stratum
from .features import FeatureLayout, SCALAR_GROUP_SLICES, STYLE_FEATURE_IDX

LABEL_NAMES = ("engagement", "exploration", "purchase")
PURCHASE_WEIGHT_CHECKOUT = 8
PURCHASE_WEIGHT_ATC = 3

# ordinal funnel signature: none < view < cart < purchase
SIGNATURE_BY_STRATUM = {
    Stratum.A: 3,
    Stratum.B: 2,  # checkout abandoners surface at the cart level
    Stratum.C: 2,
    Stratum.D: 1,
    Stratum.E: 0,
}


def funnel_signature(stratum: Stratum) -> int:
    return SIGNATURE_BY_STRATUM[stratum]


# ---------------------------------------------------------------------------
# label binning


def fit_log_tercile_bounds(values: Sequence[float]) -> tuple[float, float]:
    """Tercile boundaries of log1p-transformed training values."""
    arr = np.log1p(np.asarray(values, dtype=np.float64))
    if np.unique(arr).size < 3:
        raise ConfigError("tercile binning needs at least 3 distinct values")
    q1, q2 = np.percentile(arr, [100.0 / 3.0, 200.0 / 3.0])
    return float(q1), float(q2)


def apply_log_terciles(values: Sequence[float], bounds: tuple[float, float]) -> np.ndarray:
    """Assign Low/Medium/High bins; boundary values go to the lower bin."""
    arr = np.log1p(np.asarray(values, dtype=np.float64))
    q1, q2 = bounds
    return np.where(arr <= q1, 0, np.where(arr <= q2, 1, 2)).astype(np.int64)


def purchase_score(
    checkout_sessions: int,
    atc_sessions: int,
    checkout_weight: int = PURCHASE_WEIGHT_CHECKOUT,
    atc_weight: int = PURCHASE_WEIGHT_ATC,
) -> int:
    if checkout_sessions < 0 or atc_sessions < 0:
        raise PreconditionError("purchase_score requires non-negative counts")
    return checkout_weight * checkout_sessions + atc_weight * atc_sessions


@dataclass
class PurchaseBinning:
    edges: tuple[float, float]
    used_fallback: bool = False

    def assign(self, scores: Sequence[int]) -> np.ndarray:
        arr = np.asarray(scores)
        return np.where(arr <= self.edges[0], 0, np.where(arr <= self.edges[1], 1, 2)).astype(
            np.int64
        )


def fit_purchase_bins(
    score_counts: Mapping[int, int],
    checkout_weight: int = PURCHASE_WEIGHT_CHECKOUT,
) -> PurchaseBinning:
    """Three bins over the discrete composite-score support.

    Distinct scores form initial groups; the adjacent pair with the
    smallest combined count is merged (ties toward the lower scores) until
    three groups remain. Bin edges sit at midpoints between the boundary
    scores, so integer scores never land on an edge.
    """
    groups = sorted((int(s), int(c)) for s, c in score_counts.items() if c > 0)
    if len(groups) < 3:
        # degenerate support: zero / add-to-cart only / checkout-bearing
        return PurchaseBinning(edges=(0.5, checkout_weight - 0.5), used_fallback=True)
    scores = [[s] for s, _ in groups]
    counts = [c for _, c in groups]
    while len(counts) > 3:
        combined = [counts[i] + counts[i + 1] for i in range(len(counts) - 1)]
        i = int(np.argmin(combined))
        scores[i] = scores[i] + scores[i + 1]
        counts[i] = counts[i] + counts[i + 1]
        del scores[i + 1], counts[i + 1]
    e1 = (scores[0][-1] + scores[1][0]) / 2.0
    e2 = (scores[1][-1] + scores[2][0]) / 2.0
    return PurchaseBinning(edges=(e1, e2))


def class_weights(bin_counts: Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights w_i = N / (3 * n_i)."""
    counts = np.asarray(bin_counts, dtype=np.float64)
    if counts.size != 3:
        raise ConfigError("expected exactly 3 bin counts")
    if np.any(counts < 1):
        raise ConfigError(f"empty label bin in counts {counts.tolist()}")
    total = counts.sum()
    return total / (3.0 * counts)


@dataclass
class LabelTable:
    buyer_ids: list[str]
    shop_ids: list[str]
    bins: dict[str, np.ndarray]          # per head, values in {0,1,2}
    purchase_scores: np.ndarray
    weights: dict[str, np.ndarray]       # per head, inverse-frequency over train rows

    def __len__(self) -> int:
        return len(self.buyer_ids)


def build_labels(
    aggregates: Sequence[BuyerShopAggregate], train_mask: np.ndarray
) -> LabelTable:
    """Derive the three head labels; binning state is fit on training rows only."""
    train_mask = np.asarray(train_mask, dtype=bool)
    if train_mask.shape[0] != len(aggregates):
        raise PreconditionError("train mask must align with aggregates")
    engagement = np.asarray([a.total_duration_ms for a in aggregates], dtype=np.float64)
    exploration = np.asarray(
        [a.pdp_view_sessions + a.search_sessions + a.collection_sessions for a in aggregates],
        dtype=np.float64,
    )
    scores = np.asarray(
        [purchase_score(a.checkout_sessions, a.atc_sessions) for a in aggregates],
        dtype=np.int64,
    )

    bins = {}
    for name, values in (("engagement", engagement), ("exploration", exploration)):
        bounds = fit_log_tercile_bounds(values[train_mask])
        bins[name] = apply_log_terciles(values, bounds)
    score_counts: dict[int, int] = {}
    for s in scores[train_mask]:
        score_counts[int(s)] = score_counts.get(int(s), 0) + 1
    binning = fit_purchase_bins(score_counts)
    bins["purchase"] = binning.assign(scores)

    weights = {}
    for name in LABEL_NAMES:
        train_bins = bins[name][train_mask]
        counts = [int(np.sum(train_bins == b)) for b in range(3)]
        weights[name] = class_weights(counts)
    return LabelTable(
        buyer_ids=[a.buyer_id for a in aggregates],
        shop_ids=[a.shop_id for a in aggregates],
        bins=bins,
        purchase_scores=scores,
        weights=weights,
    )


def write_labels(table: LabelTable, fh: IO[str]) -> None:
    fh.write("buyer_id\tshop_id\tengagement_bin\texploration_bin\tpurchase_bin\tpurchase_score\n")
    for i in range(len(table)):
        fh.write(
            f"{table.buyer_ids[i]}\t{table.shop_ids[i]}"
            f"\t{table.bins['engagement'][i]}\t{table.bins['exploration'][i]}"
            f"\t{table.bins['purchase'][i]}\t{table.purchase_scores[i]}\n"
        )


def read_labels(fh: IO[str]) -> LabelTable:
    header = fh.readline().rstrip("\n").split("\t")
    expected = ["buyer_id", "shop_id", "engagement_bin", "exploration_bin",
                "purchase_bin", "purchase_score"]
    if header != expected:
        raise ConfigError(f"unexpected label table header {header}")
    buyer_ids, shop_ids = [], []
    cols: list[list[int]] = [[], [], [], []]
    for line in fh:
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        buyer_ids.append(parts[0])
        shop_ids.append(parts[1])
        for j in range(4):
            cols[j].append(int(parts[2 + j]))
    bins = {
        "engagement": np.asarray(cols[0], dtype=np.int64),
        "exploration": np.asarray(cols[1], dtype=np.int64),
        "purchase": np.asarray(cols[2], dtype=np.int64),
    }
    weights = {}
    for name in LABEL_NAMES:
        counts = [max(int(np.sum(bins[name] == b)), 1) for b in range(3)]
        weights[name] = class_weights(counts)
    return LabelTable(
        buyer_ids=buyer_ids,
        shop_ids=shop_ids,
        bins=bins,
        purchase_scores=np.asarray(cols[3], dtype=np.int64),
        weights=weights,
    )


def sweep_weight_invariance(
    count_pairs: Sequence[tuple[int, int]],
    max_checkout_weight: int = 15,
) -> tuple[int, int]:
    """Sweep monotone integer weight pairs and count distinct 3-way partitions.

    Returns (number of weight pairs tested, number of distinct partitions of
    the buyers). A return of (n, 1) means every pair induced the identical
    partition.
    """
    partitions = set()
    tested = 0
    for w_co in range(2, max_checkout_weight + 1):
        for w_atc in range(1, w_co):
            scores = [
                purchase_score(n_co, n_atc, w_co, w_atc) for n_co, n_atc in count_pairs
            ]
            score_counts: dict[int, int] = {}
            for s in scores:
                score_counts[s] = score_counts.get(s, 0) + 1
            binning = fit_purchase_bins(score_counts, checkout_weight=w_co)
            assignment = tuple(binning.assign(scores).tolist())
            partitions.add(assignment)
            tested += 1
    return tested, len(partitions)


# ---------------------------------------------------------------------------
# loss terms


def group_recon_loss(
    x: np.ndarray,
    x_hat: np.ndarray,
    masks: np.ndarray,
    layout: FeatureLayout,
    scalar_groups: Mapping[str, slice] | None = None,
) -> tuple[float, np.ndarray, int]:
    """Mean over present groups of per-group MSE (scalars) and cosine
    distance (embedding channels); masked-off channels contribute nothing.

    Returns (loss, gradient wrt x_hat, count of zero-norm channel slices).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_hat64 = np.atleast_2d(np.asarray(x_hat, dtype=np.float64))
    masks = np.atleast_2d(np.asarray(masks))
    if x.shape != x_hat64.shape:
        raise PreconditionError("x and x_hat layouts must match")
    groups = SCALAR_GROUP_SLICES if scalar_groups is None else scalar_groups
    batch = x.shape[0]
    n_groups = len(groups) + masks.sum(axis=1).astype(np.float64)  # per row
    grad = np.zeros_like(x_hat64)
    row_loss = np.zeros(batch, dtype=np.float64)
    zero_norm = 0
    for sl in groups.values():
        width = sl.stop - sl.start
        diff = x_hat64[:, sl] - x[:, sl]
        row_loss += np.sum(diff * diff, axis=1) / width
        grad[:, sl] = 2.0 * diff / width / n_groups[:, None] / batch
    for c in range(masks.shape[1]):
        sl = layout.channel(c)
        rows = np.flatnonzero(masks[:, c] == 1)
        if rows.size == 0:
            continue
        u = x_hat64[rows][:, sl]
        v = x[rows][:, sl]
        nu = np.linalg.norm(u, axis=1)
        nv = np.linalg.norm(v, axis=1)
        ok = (nu > 0) & (nv > 0)
        zero_norm += int(np.sum(~ok))
        row_loss[rows[~ok]] += 1.0
        if np.any(ok):
            rows_ok = rows[ok]
            u, v, nu, nv = u[ok], v[ok], nu[ok], nv[ok]
            cos = np.sum(u * v, axis=1) / (nu * nv)
            row_loss[rows_ok] += 1.0 - cos
            scale = (n_groups[rows_ok] * batch)[:, None]
            grad[rows_ok, sl] = grad[rows_ok, sl] - (
                v / (nu * nv)[:, None] - (cos / (nu * nu))[:, None] * u
            ) / scale
    return float(np.mean(row_loss / n_groups)), grad, zero_norm


def commitment_loss(z_e: np.ndarray, z_q: np.ndarray) -> tuple[float, np.ndarray]:
    """Squared distance to the (stop-gradient) assigned codes; the gradient
    flows only to the encoder outputs."""
    z_e64 = np.atleast_2d(np.asarray(z_e, dtype=np.float64))
    z_q64 = np.atleast_2d(np.asarray(z_q, dtype=np.float64))
    if z_e64.shape != z_q64.shape:
        raise PreconditionError("z_e and z_q must share a shape")
    batch = z_e64.shape[0]
    diff = z_e64 - z_q64
    loss = float(np.sum(diff * diff)) / batch
    return loss, 2.0 * diff / batch


@dataclass
class MiningResult:
    positives: np.ndarray                  # index per anchor, -1 when none
    funnel_pools: list[list[int]]
    product_pools: list[list[int]]
    style_pools: list[list[int]]


def pairwise_shared_channel_cosine(
    features: np.ndarray, masks: np.ndarray, layout: FeatureLayout
) -> np.ndarray:
    """All-pairs cosine over the concatenation of channels present in both
    rows; -inf where a pair shares no channel, 0 where a shared slice has
    zero norm."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    masks = np.atleast_2d(np.asarray(masks))
    n = features.shape[0]
    dots = np.zeros((n, n), dtype=np.float64)
    sq_i = np.zeros((n, n), dtype=np.float64)
    sq_j = np.zeros((n, n), dtype=np.float64)
    any_shared = np.zeros((n, n), dtype=bool)
    for c in range(masks.shape[1]):
        block = features[:, layout.channel(c)]
        shared = (masks[:, c] == 1)[:, None] & (masks[:, c] == 1)[None, :]
        any_shared |= shared
        dots += shared * (block @ block.T)
        norms = np.sum(block * block, axis=1)
        sq_i += shared * norms[:, None]
        sq_j += shared * norms[None, :]
    denom = np.sqrt(sq_i) * np.sqrt(sq_j)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    cos[~any_shared] = -math.inf
    return cos


def mine_positives(
    features: np.ndarray,
    signatures: np.ndarray,
    layout: FeatureLayout,
    product_pool_size: int = 10,
    style_pool_size: int = 3,
) -> MiningResult:
    """Three progressively finer gates per anchor.

    Gate 1 keeps same-funnel-signature batch members; gate 2 the top-M by
    cosine over shared embedding channels; gate 3 the top-F by Euclidean
    distance over the browsing-style scalars. The positive is the nearest
    gate-3 survivor; anchors whose pool empties at any gate get none.
    Distance and similarity ties break toward the lower index.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = features.shape[0]
    if n < 2:
        raise PreconditionError("mining requires a batch of at least 2 rows")
    signatures = np.asarray(signatures)
    masks = features[:, layout.masks]
    style = features[:, list(STYLE_FEATURE_IDX)]

    cos = pairwise_shared_channel_cosine(features, masks, layout)
    sq = np.sum(style * style, axis=1)
    style_d2 = np.maximum(sq[:, None] - 2.0 * (style @ style.T) + sq[None, :], 0.0)
    same_sig = signatures[:, None] == signatures[None, :]

    positives = np.full(n, -1, dtype=np.int64)
    funnel_pools, product_pools, style_pools = [], [], []
    indices = np.arange(n)
    for i in range(n):
        pool1 = indices[same_sig[i] & (indices != i)]
        funnel_pools.append(pool1.tolist())
        if pool1.size == 0:
            product_pools.append([])
            style_pools.append([])
            continue
        sims = cos[i, pool1]
        finite = pool1[sims != -math.inf]
        if finite.size == 0:
            product_pools.append([])
            style_pools.append([])
            continue
        order = np.lexsort((finite, -cos[i, finite]))
        pool2 = finite[order[:product_pool_size]]
        product_pools.append(pool2.tolist())
        order3 = np.lexsort((pool2, style_d2[i, pool2]))
        pool3 = pool2[order3[:style_pool_size]]
        style_pools.append(pool3.tolist())
        positives[i] = pool3[0]
    return MiningResult(positives, funnel_pools, product_pools, style_pools)


def info_nce(
    z: np.ndarray, positives: np.ndarray, temperature: float = 0.1
) -> tuple[float, np.ndarray, int]:
    """Contrastive loss over cosine similarities of encoder outputs.

    The denominator keeps every non-self batch member; the mean runs over
    anchors that have a positive. Returns (loss, grad wrt z, anchor count);
    with no anchors the term is 0 with zero gradient.
    """
    z64 = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n, dim = z64.shape
    positives = np.asarray(positives)
    anchors = np.flatnonzero(positives >= 0)
    if anchors.size == 0:
        return 0.0, np.zeros_like(z64), 0

    norms = np.linalg.norm(z64, axis=1)
    inv = np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 0.0)
    unit = z64 * inv[:, None]
    sim = unit @ unit.T

    logits = sim / temperature
    np.fill_diagonal(logits, -np.inf)
    row_max = logits[anchors].max(axis=1, keepdims=True)
    exp = np.exp(logits[anchors] - row_max)
    denom = exp.sum(axis=1)
    softmax = exp / denom[:, None]

    loss = 0.0
    w = np.zeros((n, n), dtype=np.float64)  # dL/dsim
    for a_row, i in enumerate(anchors):
        p = positives[i]
        loss += -(logits[i, p] - row_max[a_row, 0] - math.log(denom[a_row]))
        w[i] += softmax[a_row] / temperature
        w[i, p] -= 1.0 / temperature
        w[i, i] = 0.0
    count = anchors.size
    loss /= count
    w /= count

    # d sim_ij / d z_i = (u_j - sim_ij * u_i) / |z_i|, symmetric in j
    grad = np.zeros_like(z64)
    row_mix = w @ unit
    row_diag = (w * sim).sum(axis=1)
    grad += (row_mix - row_diag[:, None] * unit) * inv[:, None]
    col_mix = w.T @ unit
    col_diag = (w * sim).sum(axis=0)
    grad += (col_mix - col_diag[:, None] * unit) * inv[:, None]
    return float(loss), grad, int(count)


def weighted_ce_loss(
    logits: np.ndarray, labels: np.ndarray, weights: np.ndarray
) -> tuple[float, np.ndarray]:
    """Class-weighted cross-entropy, mean over the batch."""
    logits64 = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels)
    batch = logits64.shape[0]
    shifted = logits64 - logits64.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    sample_w = np.asarray(weights, dtype=np.float64)[labels]
    loss = float(np.mean(-sample_w * log_probs[np.arange(batch), labels]))
    grad = np.exp(log_probs)
    grad[np.arange(batch), labels] -= 1.0
    grad *= sample_w[:, None] / batch
    return loss, grad


def total_loss(terms: Mapping[str, float], cfg: ObjectiveConfig) -> float:
    """Weighted combination of all objective terms."""
    for name, value in terms.items():
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss term {name!r} = {value}")
    return (
        cfg.recon_weight * terms["recon"]
        + cfg.commitment_weight * terms["commit"]
        + cfg.contrastive_weight * terms["contrastive"]
        + cfg.aux_weight * (terms["engagement"] + terms["exploration"] + terms["purchase"])
    )
