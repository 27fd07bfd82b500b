"""Normalization pipeline and assembly of the model input vectors.

Each buyer-shop aggregate becomes one row laid out as

    [16 normalized scalars | viewed | carted | purchased | 3 mask bits]

where each embedding channel occupies pca_dim slots (403 total at the
production defaults of pca_dim=128). Scalar features run through per-group
transform chains before a robust z-score whose statistics are fit on the
training split only:

    counts / engagement / dollars:  log1p -> robust-z
    funnel rates:                   Laplace-smoothed rate -> logit -> robust-z
    intent composite:               clamped logit -> robust-z
    embedding channels:             per-dim z-score -> PCA projection
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .errors import ConfigError, FormatError, PreconditionError, SchemaError
from .events import BuyerShopAggregate, Stratum

FEATURE_MAGIC = b"SPFEAT1"

N_SCALARS = 16
N_CHANNELS = 3
CHANNEL_NAMES = ("viewed", "carted", "purchased")

# slices of the 16-scalar block, in canonical order
SCALAR_GROUP_SLICES = {
    "exposure": slice(0, 8),
    "engagement": slice(8, 10),
    "funnel": slice(10, 13),
    "intent": slice(13, 14),
    "dollars": slice(14, 16),
}
LOG1P_FEATURE_IDX = tuple(range(0, 10)) + (14, 15)
RATE_FEATURE_IDX = (10, 11, 12)
INTENT_FEATURE_IDX = 13

# scalar indices used by the browsing-style gate of the positive miner:
# product views, search sessions, collection views, session duration
STYLE_FEATURE_IDX = (9, 6, 7, 8)

MAD_SCALE = 1.4826


@dataclass
class FeatureLayout:
    pca_dim: int

    @property
    def length(self) -> int:
        return N_SCALARS + N_CHANNELS * self.pca_dim + N_CHANNELS

    @property
    def scalars(self) -> slice:
        return slice(0, N_SCALARS)

    def channel(self, i: int) -> slice:
        start = N_SCALARS + i * self.pca_dim
        return slice(start, start + self.pca_dim)

    @property
    def masks(self) -> slice:
        return slice(N_SCALARS + N_CHANNELS * self.pca_dim, self.length)


def robust_z(x: float, median: float, iqr: float, mad: float) -> float:
    """(x - median)/IQR, falling back to scaled MAD, then to 0 for constants."""
    if iqr < 0 or mad < 0:
        raise PreconditionError("IQR and MAD must be non-negative")
    if iqr > 0:
        return (x - median) / iqr
    if mad > 0:
        return (x - median) / (MAD_SCALE * mad)
    return 0.0


def smooth_rate(n: int, total: int) -> float:
    """Laplace-smoothed rate (n+1)/(N+2); strictly inside (0, 1)."""
    if n < 0 or total < 0 or n > total:
        raise PreconditionError(f"smooth_rate requires 0 <= n <= N, got n={n} N={total}")
    return (n + 1) / (total + 2)


def logit_eps(p: float, eps: float = 1e-6) -> float:
    """log(p/(1-p)) with p clamped to [eps, 1-eps]."""
    p = min(max(p, eps), 1.0 - eps)
    return math.log(p / (1.0 - p))


@dataclass
class ChannelPCA:
    mean: np.ndarray          # (d_emb,)
    std: np.ndarray           # (d_emb,), zeros replaced by 1
    basis: np.ndarray         # (d_emb, pca_dim), orthonormal columns
    explained_variance_ratio: float

    def project(self, row: np.ndarray) -> np.ndarray:
        return (row - self.mean) / self.std @ self.basis


def fit_pca(rows: np.ndarray, pca_dim: int) -> ChannelPCA:
    """Per-dimension z-scoring then the top principal components via SVD.

    Deterministic sign convention: the largest-magnitude loading of each
    component is made positive.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise PreconditionError("fit_pca expects a 2-d row matrix")
    n, dim = rows.shape
    if pca_dim < 1 or pca_dim > dim:
        raise ConfigError(f"pca_dim={pca_dim} must lie in [1, {dim}]")
    if n < pca_dim:
        raise ConfigError(
            f"channel has {n} rows but pca_dim={pca_dim}; lower pca_dim to at most {n}"
        )
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    z = (rows - mean) / std
    _, singular, vt = np.linalg.svd(z, full_matrices=False)
    basis = vt[:pca_dim].T.copy()
    # sign convention: largest-|loading| entry of each component positive
    flip = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(pca_dim)])
    flip = np.where(flip == 0, 1.0, flip)
    basis *= flip
    variances = singular**2
    total = variances.sum()
    ratio = float(variances[:pca_dim].sum() / total) if total > 0 else 1.0
    return ChannelPCA(mean=mean, std=std, basis=basis, explained_variance_ratio=ratio)


@dataclass
class NormalizerState:
    medians: np.ndarray       # (16,) transformed-scale medians
    iqrs: np.ndarray
    mads: np.ndarray
    logit_epsilon: float
    channels: dict[str, ChannelPCA]
    pca_dim: int

    @property
    def layout(self) -> FeatureLayout:
        return FeatureLayout(self.pca_dim)

    def to_json(self) -> str:
        doc = {
            "medians": self.medians.tolist(),
            "iqrs": self.iqrs.tolist(),
            "mads": self.mads.tolist(),
            "logit_epsilon": self.logit_epsilon,
            "pca_dim": self.pca_dim,
            "channels": {
                name: {
                    "mean": ch.mean.tolist(),
                    "std": ch.std.tolist(),
                    "basis": ch.basis.tolist(),
                    "explained_variance_ratio": ch.explained_variance_ratio,
                }
                for name, ch in self.channels.items()
            },
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NormalizerState":
        doc = json.loads(text)
        channels = {
            name: ChannelPCA(
                mean=np.asarray(ch["mean"], dtype=np.float64),
                std=np.asarray(ch["std"], dtype=np.float64),
                basis=np.asarray(ch["basis"], dtype=np.float64),
                explained_variance_ratio=ch["explained_variance_ratio"],
            )
            for name, ch in doc["channels"].items()
        }
        return cls(
            medians=np.asarray(doc["medians"], dtype=np.float64),
            iqrs=np.asarray(doc["iqrs"], dtype=np.float64),
            mads=np.asarray(doc["mads"], dtype=np.float64),
            logit_epsilon=doc["logit_epsilon"],
            channels=channels,
            pca_dim=doc["pca_dim"],
        )


def transformed_scalars(agg: BuyerShopAggregate, eps: float) -> np.ndarray:
    """The 16 scalars after their transform chains, before the robust z-score."""
    raw = agg.scalar_values()
    out = np.empty(N_SCALARS, dtype=np.float64)
    for i in LOG1P_FEATURE_IDX:
        out[i] = math.log1p(raw[i])
    n = agg.total_sessions
    for i, count in zip(
        RATE_FEATURE_IDX,
        (agg.atc_sessions, agg.checkout_sessions, agg.browse_only_sessions),
    ):
        out[i] = logit_eps(smooth_rate(count, n), eps)
    out[INTENT_FEATURE_IDX] = logit_eps(agg.intent_strength, eps)
    return out


def fit_normalizer(
    train_aggregates: Sequence[BuyerShopAggregate],
    pca_dim: int,
    logit_epsilon: float = 1e-6,
) -> NormalizerState:
    """Fit scalar robust-z statistics and per-channel PCA on training rows only."""
    if not train_aggregates:
        raise ConfigError("cannot fit a normalizer on an empty training set")
    transformed = np.stack([transformed_scalars(a, logit_epsilon) for a in train_aggregates])
    medians = np.median(transformed, axis=0)
    q75, q25 = np.percentile(transformed, [75, 25], axis=0)
    iqrs = q75 - q25
    mads = np.median(np.abs(transformed - medians), axis=0)

    channels = {}
    for i, name in enumerate(CHANNEL_NAMES):
        rows = [
            getattr(a, f"emb_{name}")
            for a in train_aggregates
            if getattr(a, f"mask_{name}") == 1
        ]
        if len(rows) < pca_dim:
            raise ConfigError(
                f"channel {name!r} has {len(rows)} observed rows but pca_dim={pca_dim}; "
                f"lower pca_dim to at most {len(rows)}"
            )
        channels[name] = fit_pca(np.stack(rows), pca_dim)
    return NormalizerState(
        medians=medians,
        iqrs=iqrs,
        mads=mads,
        logit_epsilon=logit_epsilon,
        channels=channels,
        pca_dim=pca_dim,
    )


def assemble(agg: BuyerShopAggregate, norm: NormalizerState) -> np.ndarray:
    """Build one normalized feature row; raises SchemaError on non-finite values."""
    layout = norm.layout
    out = np.zeros(layout.length, dtype=np.float64)
    transformed = transformed_scalars(agg, norm.logit_epsilon)
    for i in range(N_SCALARS):
        out[i] = robust_z(transformed[i], norm.medians[i], norm.iqrs[i], norm.mads[i])
    for c, name in enumerate(CHANNEL_NAMES):
        if getattr(agg, f"mask_{name}") == 1:
            out[layout.channel(c)] = norm.channels[name].project(
                np.asarray(getattr(agg, f"emb_{name}"), dtype=np.float64)
            )
    out[layout.masks] = [agg.mask_viewed, agg.mask_carted, agg.mask_purchased]
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out))[0])
        raise SchemaError(
            f"non-finite feature value at index {bad} for buyer "
            f"{agg.buyer_id!r} shop {agg.shop_id!r}"
        )
    return out


@dataclass
class FeatureMatrix:
    buyer_ids: list[str]
    shop_ids: list[str]
    strata: np.ndarray        # uint8 codes indexing STRATUM_CODES
    values: np.ndarray        # (n, layout.length) float32

    def __len__(self) -> int:
        return len(self.buyer_ids)

    def stratum(self, i: int) -> Stratum:
        return list(Stratum)[int(self.strata[i])]


STRATUM_TO_CODE = {s: i for i, s in enumerate(Stratum)}


def assemble_matrix(
    aggregates: Sequence[BuyerShopAggregate], norm: NormalizerState
) -> tuple[FeatureMatrix, list[dict]]:
    """Assemble all rows, skipping non-finite ones and reporting diagnostics."""
    buyer_ids, shop_ids, strata, rows = [], [], [], []
    diagnostics = []
    for agg in aggregates:
        try:
            row = assemble(agg, norm)
        except SchemaError as exc:
            diagnostics.append(
                {"buyer_id": agg.buyer_id, "shop_id": agg.shop_id, "reason": str(exc)}
            )
            continue
        buyer_ids.append(agg.buyer_id)
        shop_ids.append(agg.shop_id)
        strata.append(STRATUM_TO_CODE[agg.stratum])
        rows.append(row)
    if not rows:
        raise ConfigError("no assemblable rows")
    matrix = FeatureMatrix(
        buyer_ids=buyer_ids,
        shop_ids=shop_ids,
        strata=np.asarray(strata, dtype=np.uint8),
        values=np.asarray(np.stack(rows), dtype=np.float32),
    )
    return matrix, diagnostics


def write_features(matrix: FeatureMatrix, fh: IO[bytes]) -> None:
    fh.write(FEATURE_MAGIC)
    n, width = matrix.values.shape
    fh.write(struct.pack("<IQ", width, n))
    for i in range(n):
        for text in (matrix.buyer_ids[i], matrix.shop_ids[i]):
            raw = text.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(struct.pack("<B", int(matrix.strata[i])))
        fh.write(np.ascontiguousarray(matrix.values[i], dtype="<f4").tobytes())


def read_features(fh: IO[bytes]) -> FeatureMatrix:
    magic = fh.read(len(FEATURE_MAGIC))
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad feature-matrix magic {magic!r}")
    width, n = struct.unpack("<IQ", _read_exact(fh, 12))
    buyer_ids, shop_ids = [], []
    strata = np.empty(n, dtype=np.uint8)
    values = np.empty((n, width), dtype=np.float32)
    for i in range(n):
        ids = []
        for _ in range(2):
            (length,) = struct.unpack("<I", _read_exact(fh, 4))
            ids.append(_read_exact(fh, length).decode("utf-8"))
        buyer_ids.append(ids[0])
        shop_ids.append(ids[1])
        (strata[i],) = struct.unpack("<B", _read_exact(fh, 1))
        values[i] = np.frombuffer(_read_exact(fh, 4 * width), dtype="<f4")
    return FeatureMatrix(buyer_ids=buyer_ids, shop_ids=shop_ids, strata=strata, values=values)


def _read_exact(fh: IO[bytes], n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("truncated feature-matrix file")
    return data
