"""Shared fixtures: the default synthetic population and a trained model,
built once per session for the evaluation-level tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from personakit import events as ev
from personakit import features as feat
from personakit import objective as obj
from personakit import synthgen
from personakit import trainer
from personakit.config import RunConfig, derive_rng

DESK_SEED = 20240801


@dataclass
class DeskData:
    cfg: RunConfig
    events: list
    catalog: object
    truth: list
    aggregates: list
    matrix: feat.FeatureMatrix
    labels: obj.LabelTable
    normalizer: feat.NormalizerState
    train_idx: np.ndarray
    val_idx: np.ndarray

    @property
    def active_rows(self) -> np.ndarray:
        return np.flatnonzero(self.matrix.strata != feat.STRATUM_TO_CODE[ev.Stratum.E])

    @property
    def strata_letters(self) -> np.ndarray:
        return np.asarray([self.matrix.stratum(i).value for i in range(len(self.matrix))])


@pytest.fixture(scope="session")
def desk_data() -> DeskData:
    cfg = RunConfig.desk(seed=DESK_SEED)
    population = synthgen.default_population(cfg.seed)
    events, catalog, truth = synthgen.generate(population)
    groups: dict[tuple[str, str], list] = {}
    for e in events:
        groups.setdefault((e.buyer_id, e.shop_id), []).append(e)
    aggregates = [ev.aggregate(ev.sessionize(g), catalog) for g in groups.values()]
    strata_codes = np.asarray(
        [feat.STRATUM_TO_CODE[a.stratum] for a in aggregates], dtype=np.uint8
    )
    train_idx, val_idx = trainer.sample_dataset(
        [a.shop_id for a in aggregates], strata_codes, cfg.trainer,
        derive_rng(cfg.seed, "train/split"),
    )
    train_mask = np.zeros(len(aggregates), dtype=bool)
    train_mask[train_idx] = True
    norm = feat.fit_normalizer(
        [aggregates[i] for i in train_idx], cfg.features.pca_dim, cfg.features.logit_epsilon
    )
    matrix, diagnostics = feat.assemble_matrix(aggregates, norm)
    assert not diagnostics
    labels = obj.build_labels(aggregates, train_mask)
    return DeskData(
        cfg=cfg,
        events=events,
        catalog=catalog,
        truth=truth,
        aggregates=aggregates,
        matrix=matrix,
        labels=labels,
        normalizer=norm,
        train_idx=train_idx,
        val_idx=val_idx,
    )


@pytest.fixture(scope="session")
def desk_trained(desk_data: DeskData) -> trainer.TrainResult:
    return trainer.train_model(desk_data.matrix, desk_data.labels, desk_data.cfg)


@pytest.fixture(scope="session")
def desk_kmeans(desk_data: DeskData) -> np.ndarray:
    cfg = desk_data.cfg
    values = desk_data.matrix.values.astype(np.float64)
    _, centers = trainer.minibatch_kmeans(
        values[desk_data.train_idx],
        cfg.model.codebook_size,
        derive_rng(cfg.seed, "baseline/kmeans"),
        batch_size=cfg.baseline.batch_size,
        iterations=cfg.baseline.iterations,
    )
    d2 = (
        np.sum(values**2, axis=1)[:, None]
        - 2.0 * values @ centers.T
        + np.sum(centers**2, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def tiny_population(seed: int = 5) -> synthgen.PopulationConfig:
    """Four-shop population for fast CLI and end-to-end tests."""
    archetypes = synthgen.default_archetypes()
    mixes = [
        [0.20, 0.25, 0.15, 0.10, 0.10, 0.08, 0.07, 0.05],
        [0.10, 0.15, 0.15, 0.15, 0.12, 0.13, 0.10, 0.10],
        [0.08, 0.10, 0.10, 0.12, 0.15, 0.15, 0.15, 0.15],
        [0.05, 0.10, 0.10, 0.10, 0.15, 0.15, 0.20, 0.15],
    ]
    shops = [
        synthgen.ShopSpec(shop_id=f"tiny{i}", weights=m, buyers=150)
        for i, m in enumerate(mixes)
    ]
    return synthgen.PopulationConfig(
        archetypes=archetypes,
        shops=shops,
        catalog=synthgen.CatalogSpec(n_products=120, n_clusters=4, embedding_dim=16),
        seed=seed,
    ).validate()


def tiny_config(seed: int = 5) -> RunConfig:
    cfg = RunConfig.desk(seed)
    cfg.features.embedding_dim = 16
    cfg.features.pca_dim = 4
    cfg.model.codebook_size = 32
    cfg.model.hidden_layers = [64, 32]
    cfg.model.latent_dim = 16
    cfg.trainer.epochs = 8
    cfg.trainer.batch_size = 128
    cfg.baseline.iterations = 40
    cfg.metrics.permutation_rounds = 2000
    cfg.simulator.sessions_per_group = 100
    cfg.population = tiny_population(seed).as_dict()
    return cfg
