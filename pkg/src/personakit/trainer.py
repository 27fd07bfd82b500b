"""Dataset sampling, the quantized-autoencoder training loop, and the
minibatch k-means baseline.

The loop is sequential and fully seeded: warm-up encoder pass, k-means++
codebook init, then per batch forward / quantize / losses / backward /
optimizer step / EMA update / dead-code revival. Codebook entries never
receive gradients; the straight-through path carries decoder and head
gradients to the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .codebook import Codebook, init_kmeanspp, kmeanspp_indices
from .config import RunConfig, TrainerConfig, derive_rng
from .errors import ConfigError, DivergenceError
from .features import FeatureLayout, FeatureMatrix, STRATUM_TO_CODE
from .events import Stratum
from .nn import AdamState, DenseNet
from .objective import (
    LABEL_NAMES,
    LabelTable,
    SIGNATURE_BY_STRATUM,
    class_weights,
    commitment_loss,
    group_recon_loss,
    info_nce,
    mine_positives,
    total_loss,
    weighted_ce_loss,
)

_CODE_TO_STRATUM = {code: s for s, code in STRATUM_TO_CODE.items()}
_E_CODE = STRATUM_TO_CODE[Stratum.E]


def sample_dataset(
    shop_ids: Sequence[str],
    strata_codes: np.ndarray,
    cfg: TrainerConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Cap rows per (shop, stratum) and per shop, drop stratum E, then split.

    The split is stratified by (shop, stratum) with the training share
    rounded per group, so group counts stay within one row of the target
    fractions. Returns sorted (train_idx, val_idx); never duplicates a row.
    """
    cfg.validate()
    strata_codes = np.asarray(strata_codes)
    groups: dict[tuple[str, int], list[int]] = {}
    for i, (shop, code) in enumerate(zip(shop_ids, strata_codes)):
        if int(code) == _E_CODE:
            continue
        groups.setdefault((shop, int(code)), []).append(i)

    kept_by_shop: dict[str, list[int]] = {}
    for key in sorted(groups):
        rows = groups[key]
        if len(rows) > cfg.per_stratum_cap:
            pick = rng.choice(len(rows), size=cfg.per_stratum_cap, replace=False)
            rows = [rows[i] for i in sorted(pick)]
        kept_by_shop.setdefault(key[0], []).extend(rows)

    train_idx: list[int] = []
    val_idx: list[int] = []
    for shop in sorted(kept_by_shop):
        rows = sorted(kept_by_shop[shop])
        if len(rows) > cfg.per_shop_cap:
            pick = rng.choice(len(rows), size=cfg.per_shop_cap, replace=False)
            rows = [rows[i] for i in sorted(pick)]
        by_stratum: dict[int, list[int]] = {}
        for i in rows:
            by_stratum.setdefault(int(strata_codes[i]), []).append(i)
        for code in sorted(by_stratum):
            members = by_stratum[code]
            n_train = int(round(cfg.train_fraction * len(members)))
            perm = rng.permutation(len(members))
            chosen = set(perm[:n_train].tolist())
            for j, i in enumerate(members):
                (train_idx if j in chosen else val_idx).append(i)
    if not train_idx:
        raise ConfigError("dataset sampling produced an empty training set")
    return np.asarray(sorted(train_idx)), np.asarray(sorted(val_idx))


@dataclass
class VqModel:
    encoder: DenseNet
    decoder: DenseNet
    heads: dict[str, tuple[np.ndarray, np.ndarray]]  # name -> (weight (3,D), bias (3,))
    codebook: Codebook
    layout: FeatureLayout

    def encode(self, rows: np.ndarray) -> np.ndarray:
        """Inference-mode encoder pass (dropout off)."""
        out, _ = self.encoder.forward(np.atleast_2d(rows), train=False)
        return out

    def parameters(self) -> list[np.ndarray]:
        params = self.encoder.parameters() + self.decoder.parameters()
        for name in LABEL_NAMES:
            weight, bias = self.heads[name]
            params.append(weight)
            params.append(bias)
        return params


@dataclass
class TrainResult:
    model: VqModel
    train_idx: np.ndarray
    val_idx: np.ndarray
    assignments: np.ndarray        # inference-mode token per matrix row
    log: list[dict] = field(default_factory=list)


def build_model(input_dim: int, cfg: RunConfig, rng: np.random.Generator) -> VqModel:
    dims_enc = [input_dim] + list(cfg.model.hidden_layers) + [cfg.model.latent_dim]
    dims_dec = [cfg.model.latent_dim] + list(reversed(cfg.model.hidden_layers)) + [input_dim]
    encoder = DenseNet.build(dims_enc, rng, dropout=cfg.model.dropout)
    decoder = DenseNet.build(dims_dec, rng, dropout=cfg.model.dropout)
    heads = {}
    for name in LABEL_NAMES:
        weight = (rng.normal(size=(3, cfg.model.latent_dim)) * 0.01).astype(np.float32)
        heads[name] = (weight, np.zeros(3, dtype=np.float32))
    layout = FeatureLayout(cfg.features.pca_dim)
    if layout.length != input_dim:
        raise ConfigError(
            f"feature width {input_dim} does not match layout length {layout.length}"
        )
    # codebook is attached after the k-means++ warm-up pass
    return VqModel(encoder=encoder, decoder=decoder, heads=heads, codebook=None, layout=layout)  # type: ignore[arg-type]


def train_model(
    matrix: FeatureMatrix,
    labels: LabelTable,
    cfg: RunConfig,
) -> TrainResult:
    """Run the full training procedure; deterministic given cfg.seed."""
    seed = cfg.seed
    values = matrix.values.astype(np.float32)
    rng_split = derive_rng(seed, "train/split")
    train_idx, val_idx = sample_dataset(matrix.shop_ids, matrix.strata, cfg.trainer, rng_split)

    model = build_model(values.shape[1], cfg, derive_rng(seed, "train/init"))
    layout = model.layout
    signatures = np.asarray(
        [SIGNATURE_BY_STRATUM[_CODE_TO_STRATUM[int(c)]] for c in matrix.strata]
    )

    # warm-up pass over the training rows seeds the codebook
    warm = model.encode(values[train_idx])
    model.codebook = init_kmeanspp(
        warm,
        cfg.model.codebook_size,
        derive_rng(seed, "train/codebook-init"),
        decay=cfg.codebook.decay,
        dead_fraction=cfg.codebook.dead_fraction,
        revival_interval=cfg.codebook.revival_interval,
        warmup_steps=cfg.codebook.warmup_steps,
        revival_noise=cfg.codebook.revival_noise,
    )

    params = model.parameters()
    optimizer = AdamState(
        params,
        learning_rate=cfg.trainer.learning_rate,
        beta1=cfg.trainer.beta1,
        beta2=cfg.trainer.beta2,
        epsilon=cfg.trainer.adam_epsilon,
    )
    rng_shuffle = derive_rng(seed, "train/shuffle")
    rng_dropout = derive_rng(seed, "train/dropout")
    rng_revival = derive_rng(seed, "train/revival")
    hp = cfg.objective

    # inverse-frequency weights over the actual training rows
    weights = {
        name: class_weights(
            [int(np.sum(labels.bins[name][train_idx] == b)) for b in range(3)]
        )
        for name in LABEL_NAMES
    }

    log: list[dict] = []
    checkpoint = [p.copy() for p in params]
    checkpoint_entries = model.codebook.entries.copy()
    step = 0
    try:
        for epoch in range(cfg.trainer.epochs):
            order = rng_shuffle.permutation(train_idx.size)
            for start in range(0, order.size, cfg.trainer.batch_size):
                batch_rows = train_idx[order[start : start + cfg.trainer.batch_size]]
                if batch_rows.size < 2:
                    continue
                step += 1
                record = _train_step(
                    model, values, signatures, labels, weights, batch_rows,
                    optimizer, params, hp, rng_dropout, rng_revival, step,
                )
                record["epoch"] = epoch
                log.append(record)
            checkpoint = [p.copy() for p in params]
            checkpoint_entries = model.codebook.entries.copy()
    except DivergenceError as exc:
        for p, saved in zip(params, checkpoint):
            p[...] = saved
        model.codebook.entries[...] = checkpoint_entries
        raise DivergenceError(
            f"training diverged at step {step}; restored last epoch checkpoint: {exc}"
        ) from exc

    assignments, _ = model.codebook.quantize_batch(model.encode(values))
    return TrainResult(
        model=model,
        train_idx=train_idx,
        val_idx=val_idx,
        assignments=assignments,
        log=log,
    )


@dataclass
class StepLosses:
    terms: dict[str, float]
    total: float
    grads: list[np.ndarray]        # aligned with model.parameters()
    z_e: np.ndarray
    assignments: np.ndarray | None
    anchors: int


def step_losses(
    model: VqModel,
    x: np.ndarray,
    signatures: np.ndarray,
    bins: dict[str, np.ndarray],
    weights: dict[str, np.ndarray],
    hp,
    rng_dropout: np.random.Generator | None = None,
    frozen_offset: np.ndarray | None = None,
    frozen_zq: np.ndarray | None = None,
) -> StepLosses:
    """One objective evaluation with gradients for every model parameter.

    The straight-through path uses z_e plus a stop-gradient offset to the
    assigned code. Passing frozen_offset/frozen_zq replaces live
    quantization with constants, which turns the straight-through gradients
    into exact derivatives of the evaluated function (the surrogate the
    finite-difference checks differentiate).
    """
    layout = model.layout
    masks = x[:, layout.masks]
    train = rng_dropout is not None

    z_e, enc_cache = model.encoder.forward(x, train=train, rng=rng_dropout)
    if frozen_offset is None:
        assignments, z_q = model.codebook.quantize_batch(z_e)
        offset = z_q - z_e
    else:
        assignments = None
        offset = frozen_offset
        z_q = frozen_zq
    z_st = (z_e + offset).astype(z_e.dtype)
    x_hat, dec_cache = model.decoder.forward(z_st, train=train, rng=rng_dropout)

    recon, d_xhat, _ = group_recon_loss(x, x_hat, masks, layout)
    commit, d_ze_commit = commitment_loss(z_e, z_q)
    mining = mine_positives(
        x, signatures, layout,
        product_pool_size=hp.product_pool_size,
        style_pool_size=hp.style_pool_size,
    )
    contrastive, d_ze_nce, n_anchors = info_nce(z_e, mining.positives, hp.temperature)

    terms = {"recon": recon, "commit": commit, "contrastive": contrastive}
    d_logits = {}
    for name in LABEL_NAMES:
        weight, bias = model.heads[name]
        logits = z_st @ weight.T + bias
        loss, grad = weighted_ce_loss(logits, bins[name], weights[name])
        terms[name] = loss
        d_logits[name] = grad
    total = total_loss(terms, hp)

    dec_grads, d_zst = model.decoder.backward(dec_cache, hp.recon_weight * d_xhat)
    d_zst = d_zst.astype(np.float64)
    head_grads = []
    for name in LABEL_NAMES:
        weight, _ = model.heads[name]
        g = hp.aux_weight * d_logits[name]
        head_grads.append((g.T @ z_st, g.sum(axis=0)))
        d_zst += g @ weight
    d_ze = (
        d_zst
        + hp.commitment_weight * d_ze_commit
        + hp.contrastive_weight * d_ze_nce
    )
    enc_grads, _ = model.encoder.backward(enc_cache, d_ze.astype(z_e.dtype))

    flat_grads: list[np.ndarray] = []
    for g_w, g_b in enc_grads + dec_grads:
        flat_grads.extend((g_w, g_b))
    for g_w, g_b in head_grads:
        flat_grads.extend((g_w, g_b))
    return StepLosses(
        terms=terms,
        total=float(total),
        grads=flat_grads,
        z_e=z_e,
        assignments=assignments,
        anchors=int(n_anchors),
    )


def _train_step(
    model: VqModel,
    values: np.ndarray,
    signatures: np.ndarray,
    labels: LabelTable,
    weights: dict[str, np.ndarray],
    batch_rows: np.ndarray,
    optimizer: AdamState,
    params: list[np.ndarray],
    hp,
    rng_dropout: np.random.Generator,
    rng_revival: np.random.Generator,
    step: int,
) -> dict:
    x = values[batch_rows]
    bins = {name: labels.bins[name][batch_rows] for name in LABEL_NAMES}
    result = step_losses(
        model, x, signatures[batch_rows], bins, weights, hp,
        rng_dropout=rng_dropout if model.encoder.dropout > 0 else None,
    )
    optimizer.step(params, result.grads)
    model.codebook.ema_update(result.z_e, result.assignments)
    revived = model.codebook.revive_dead(step, result.z_e, rng_revival)

    record = {"step": step, "total": result.total, "anchors": result.anchors,
              "active_codes": model.codebook.active_count(), "revived": int(revived)}
    record.update({k: float(v) for k, v in result.terms.items()})
    return record


def minibatch_kmeans(
    rows: np.ndarray,
    k: int,
    rng: np.random.Generator,
    batch_size: int = 1024,
    iterations: int = 150,
) -> tuple[np.ndarray, np.ndarray]:
    """Minibatch Lloyd updates over a k-means++ seeding.

    Every row is assigned to its nearest final centroid (ties to the lowest
    index); deterministic given the generator state.
    """
    data = np.asarray(rows, dtype=np.float64)
    n = data.shape[0]
    if n < k:
        raise ConfigError(f"minibatch k-means needs at least k={k} rows, got {n}")
    centers = data[kmeanspp_indices(data, k, rng)].copy()
    counts = np.zeros(k, dtype=np.int64)
    for _ in range(iterations):
        batch = rng.choice(n, size=min(batch_size, n), replace=False)
        d2 = (
            np.sum(data[batch] ** 2, axis=1)[:, None]
            - 2.0 * data[batch] @ centers.T
            + np.sum(centers**2, axis=1)[None, :]
        )
        nearest = np.argmin(d2, axis=1)
        for row, c in zip(batch, nearest):
            counts[c] += 1
            eta = 1.0 / counts[c]
            centers[c] += eta * (data[row] - centers[c])
    d2 = (
        np.sum(data**2, axis=1)[:, None]
        - 2.0 * data @ centers.T
        + np.sum(centers**2, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1), centers
