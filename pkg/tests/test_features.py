import io
import math

import numpy as np
import pytest

from personakit.errors import ConfigError, PreconditionError, SchemaError
from personakit.events import BuyerShopAggregate, Stratum, aggregate, sessionize
from personakit.features import (
    FeatureLayout,
    NormalizerState,
    assemble,
    assemble_matrix,
    fit_normalizer,
    fit_pca,
    logit_eps,
    read_features,
    robust_z,
    smooth_rate,
    transformed_scalars,
    write_features,
)
from tests.test_events import _catalog, _ev


def _make_agg(total_sessions, atc, checkout, purchase, duration_ms, views,
              cart_value=0.0, order_value=0.0, buyer="b", shop="s", dim=4):
    agg = BuyerShopAggregate(buyer_id=buyer, shop_id=shop)
    agg.total_sessions = total_sessions
    agg.active_days = max(1, total_sessions // 2)
    agg.pdp_view_sessions = min(views, total_sessions)
    agg.atc_sessions = atc
    agg.checkout_sessions = checkout
    agg.purchase_sessions = purchase
    agg.search_sessions = 1
    agg.collection_sessions = 0
    agg.total_duration_ms = duration_ms
    agg.total_product_views = views
    agg.browse_only_sessions = total_sessions - atc
    agg.atc_rate = atc / total_sessions
    agg.checkout_rate = checkout / total_sessions
    agg.browse_only_rate = agg.browse_only_sessions / total_sessions
    from personakit.events import intent_strength

    agg.intent_strength = intent_strength(total_sessions, atc, checkout, purchase)
    agg.avg_cart_value_cents = cart_value
    agg.avg_order_value_cents = order_value
    rng = np.random.default_rng(hash(buyer) % (2**32))
    agg.emb_viewed = rng.normal(size=dim)
    agg.mask_viewed = 1
    if atc > 0:
        agg.emb_carted = rng.normal(size=dim)
        agg.mask_carted = 1
    else:
        agg.emb_carted = np.zeros(dim)
        agg.mask_carted = 0
    if purchase > 0:
        agg.emb_purchased = rng.normal(size=dim)
        agg.mask_purchased = 1
    else:
        agg.emb_purchased = np.zeros(dim)
        agg.mask_purchased = 0
    agg.stratum = Stratum.A if purchase else (Stratum.C if atc else Stratum.D)
    return agg


class TestRobustZ:
    def test_median_maps_to_zero(self):
        assert robust_z(3.5, 3.5, 2.0, 1.0) == 0.0

    def test_mad_fallback(self):
        # IQR = 0, MAD = 2: (x - median) / (1.4826 * 2)
        assert robust_z(2.9652, 0.0, 0.0, 2.0) == pytest.approx(1.0)

    def test_constant_column_degenerates_to_zero(self):
        assert robust_z(17.0, 3.0, 0.0, 0.0) == 0.0

    def test_negative_spread_rejected(self):
        with pytest.raises(PreconditionError):
            robust_z(1.0, 0.0, -1.0, 0.0)


class TestSmoothRate:
    def test_prior_mean(self):
        assert smooth_rate(0, 0) == pytest.approx(0.5)

    def test_substitutions(self):
        assert smooth_rate(1, 1) == pytest.approx(2 / 3)
        assert smooth_rate(0, 8) == pytest.approx(0.1)

    def test_n_above_total_rejected(self):
        with pytest.raises(PreconditionError):
            smooth_rate(3, 2)


class TestLogitEps:
    def test_half_maps_to_zero(self):
        assert logit_eps(0.5) == 0.0

    def test_clamped_one(self):
        assert logit_eps(1.0, 1e-6) == pytest.approx(math.log((1 - 1e-6) / 1e-6))
        assert logit_eps(1.0, 1e-6) == pytest.approx(13.8155, abs=1e-4)

    def test_antisymmetry(self):
        for p in (0.01, 0.2, 0.7, 0.99):
            assert logit_eps(p) == pytest.approx(-logit_eps(1 - p))


class TestFitPca:
    def test_planted_subspace_recovers_variance(self):
        rng = np.random.default_rng(1)
        n, dim, k = 300, 24, 10
        basis = np.linalg.qr(rng.normal(size=(dim, k)))[0]
        rows = rng.normal(size=(n, k)) * 12.0 @ basis.T + 0.3 * rng.normal(size=(n, dim))
        state = fit_pca(rows, k)
        assert state.explained_variance_ratio >= 0.85
        # oracle: eigendecomposition of the sample covariance of the z-scored rows
        z = (rows - rows.mean(0)) / rows.std(0)
        eigvals = np.sort(np.linalg.eigvalsh(np.cov(z.T)))[::-1]
        oracle_ratio = eigvals[:k].sum() / eigvals.sum()
        assert state.explained_variance_ratio == pytest.approx(oracle_ratio, rel=1e-6)

    def test_orthonormal_basis(self):
        rng = np.random.default_rng(2)
        state = fit_pca(rng.normal(size=(50, 12)), 5)
        gram = state.basis.T @ state.basis
        assert np.max(np.abs(gram - np.eye(5))) < 1e-8

    def test_full_basis_reconstructs(self):
        rng = np.random.default_rng(3)
        rows = rng.normal(size=(40, 6))
        state = fit_pca(rows, 6)
        z = (rows - state.mean) / state.std
        recon = (z @ state.basis) @ state.basis.T
        assert np.max(np.abs(recon - z)) < 1e-6
        assert state.explained_variance_ratio == pytest.approx(1.0)

    def test_too_few_rows_rejected(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ConfigError, match="lower pca_dim"):
            fit_pca(rng.normal(size=(3, 8)), 5)

    def test_sign_convention_deterministic(self):
        rng = np.random.default_rng(5)
        rows = rng.normal(size=(60, 7))
        a = fit_pca(rows, 3)
        b = fit_pca(rows.copy(), 3)
        assert np.array_equal(a.basis, b.basis)
        leads = a.basis[np.argmax(np.abs(a.basis), axis=0), np.arange(3)]
        assert np.all(leads > 0)

    def test_projection_loses_exactly_unexplained_variance(self):
        rng = np.random.default_rng(6)
        rows = rng.normal(size=(80, 10)) @ np.diag(np.linspace(0.5, 4.0, 10))
        state = fit_pca(rows, 4)
        z = (rows - state.mean) / state.std
        recon = (z @ state.basis) @ state.basis.T
        total_var = np.sum(z * z)
        lost_var = np.sum((z - recon) ** 2)
        assert lost_var / total_var == pytest.approx(
            1.0 - state.explained_variance_ratio, rel=1e-9
        )


def _fixture_aggs(n=40, dim=6):
    rng = np.random.default_rng(7)
    out = []
    for i in range(n):
        total = int(rng.integers(2, 9))
        if i < 8:  # guarantee enough carted/purchased rows for the channel PCAs
            atc = int(rng.integers(1, total + 1))
            checkout = int(rng.integers(1, atc + 1))
            purchase = int(rng.integers(1, checkout + 1))
        else:
            atc = int(rng.integers(0, total + 1))
            checkout = int(rng.integers(0, atc + 1))
            purchase = int(rng.integers(0, checkout + 1))
        out.append(
            _make_agg(
                total, atc, checkout, purchase,
                duration_ms=int(rng.integers(10_000, 2_000_000)),
                views=int(rng.integers(0, 25)),
                cart_value=float(rng.integers(0, 5_000)),
                order_value=float(rng.integers(0, 5_000)),
                buyer=f"b{i}", dim=dim,
            )
        )
    return out


class TestAssemble:
    def test_layout_length(self):
        aggs = _fixture_aggs(dim=6)
        norm = fit_normalizer(aggs, pca_dim=3)
        row = assemble(aggs[0], norm)
        assert row.shape == (16 + 3 * 3 + 3,)
        assert FeatureLayout(128).length == 403

    def test_masked_channel_zeroed(self):
        aggs = _fixture_aggs(dim=6)
        norm = fit_normalizer(aggs, pca_dim=3)
        layout = norm.layout
        browse_only = _make_agg(4, 0, 0, 0, 50_000, 2, buyer="nocart", dim=6)
        row = assemble(browse_only, norm)
        assert np.all(row[layout.channel(1)] == 0.0)
        assert np.all(row[layout.channel(2)] == 0.0)
        assert row[layout.masks][1] == 0.0 and row[layout.masks][2] == 0.0

    def test_training_median_row_maps_to_zero_scalars(self):
        # odd count, shared total_sessions, per-feature monotone rows: the
        # middle aggregate sits at every column median, and the monotone
        # transform chains commute with the median
        rows = [
            (0, 0, 0, 100, 1, 0),
            (1, 1, 0, 200, 2, 100),
            (2, 1, 1, 300, 3, 200),
            (3, 2, 1, 400, 4, 300),
            (4, 2, 2, 500, 5, 400),
        ]
        aggs = []
        for i, (atc, co, pur, dur, views, cart) in enumerate(rows):
            agg = _make_agg(4, atc, co, pur, dur, views,
                            cart_value=cart, order_value=cart, buyer=f"m{i}", dim=4)
            agg.search_sessions = i + 1
            agg.active_days = i + 1
            agg.collection_sessions = i
            aggs.append(agg)
        norm = fit_normalizer(aggs, pca_dim=2)
        row = assemble(aggs[2], norm)
        assert np.allclose(row[:16], 0.0, atol=1e-12)

    def test_non_finite_rejected_with_diagnostics(self):
        aggs = _fixture_aggs(dim=6)
        norm = fit_normalizer(aggs, pca_dim=3)
        bad = _fixture_aggs(dim=6)[0]
        bad.total_duration_ms = float("nan")
        with pytest.raises(SchemaError, match="non-finite"):
            assemble(bad, norm)
        matrix, diagnostics = assemble_matrix(aggs + [bad], norm)
        assert len(matrix) == len(aggs)
        assert len(diagnostics) == 1 and "non-finite" in diagnostics[0]["reason"]

    def test_row_independence(self):
        # the same aggregate produces the same vector regardless of batch
        aggs = _fixture_aggs(dim=6)
        norm = fit_normalizer(aggs, pca_dim=3)
        alone = assemble(aggs[5], norm)
        matrix, _ = assemble_matrix(aggs, norm)
        assert np.array_equal(alone.astype(np.float32), matrix.values[5])

    def test_transform_chain_monotone(self):
        aggs = _fixture_aggs(dim=6)
        norm = fit_normalizer(aggs, pca_dim=3)
        low = _make_agg(5, 1, 1, 0, 100_000, 3, cart_value=100.0, buyer="lo", dim=6)
        high = _make_agg(5, 3, 2, 1, 900_000, 9, cart_value=900.0, buyer="hi", dim=6)
        t_low = transformed_scalars(low, norm.logit_epsilon)
        t_high = transformed_scalars(high, norm.logit_epsilon)
        # raw values that increased never decrease after the transform chain
        raw_low, raw_high = low.scalar_values(), high.scalar_values()
        increased = raw_high >= raw_low
        assert np.all(t_high[increased] >= t_low[increased] - 1e-12)


def test_feature_matrix_io_round_trip():
    aggs = _fixture_aggs(dim=6)
    norm = fit_normalizer(aggs, pca_dim=3)
    matrix, _ = assemble_matrix(aggs, norm)
    buf = io.BytesIO()
    write_features(matrix, buf)
    buf.seek(0)
    clone = read_features(buf)
    assert clone.buyer_ids == matrix.buyer_ids
    assert clone.shop_ids == matrix.shop_ids
    assert np.array_equal(clone.strata, matrix.strata)
    assert np.array_equal(clone.values, matrix.values)
    buf2 = io.BytesIO()
    write_features(clone, buf2)
    assert buf.getvalue() == buf2.getvalue()


def test_normalizer_json_round_trip():
    aggs = _fixture_aggs(dim=6)
    norm = fit_normalizer(aggs, pca_dim=3)
    clone = NormalizerState.from_json(norm.to_json())
    assert clone.to_json() == norm.to_json()
    row_a = assemble(aggs[0], norm)
    row_b = assemble(aggs[0], clone)
    assert np.array_equal(row_a, row_b)


def test_pipeline_aggregate_ingestion_smoke():
    catalog = _catalog()
    events = [
        _ev(0, "page_view"),
        _ev(5, "product_view", product_id="p1"),
        _ev(9, "add_to_cart", product_id="p1", value_cents=2000),
    ]
    agg = aggregate(sessionize(events), catalog)
    norm = fit_normalizer(_fixture_aggs(dim=4), pca_dim=2)
    row = assemble(agg, norm)
    assert row.shape == (norm.layout.length,)
    assert np.all(np.isfinite(row))
