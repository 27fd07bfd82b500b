"""Property-based checks of the algebraic invariants."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from personakit.codebook import Codebook
from personakit.events import Stratum, intent_strength, stratify
from personakit.features import logit_eps, robust_z, smooth_rate
from personakit.objective import fit_purchase_bins, purchase_score
from personakit.population import js_divergence

counts = st.integers(min_value=0, max_value=50)


@given(counts, counts, counts, counts)
def test_intent_strength_bounded_and_zero_iff_no_conversions(n_extra, atc, co, pur):
    n_sessions = atc + co + pur + n_extra  # keeps the precondition satisfiable
    value = intent_strength(max(n_sessions, max(atc, co, pur)), atc, co, pur)
    assert 0.0 <= value < 16 / 17 + 1e-12
    assert (value == 0.0) == (atc == co == pur == 0)


@given(counts, counts, counts, st.integers(min_value=1, max_value=50))
def test_intent_strength_strictly_monotone(atc, co, pur, bump):
    n = atc + co + pur + bump + 50
    base = intent_strength(n, atc, co, pur)
    assert intent_strength(n, atc + bump, co, pur) > base
    assert intent_strength(n, atc, co + bump, pur) > base
    assert intent_strength(n, atc, co, pur + bump) > base


@given(counts, counts, counts, counts, counts, counts)
def test_stratify_total_and_cascade_consistent(pur, co, atc, views, searches, colls):
    stratum = stratify(pur, co, atc, views, searches, colls)
    assert stratum in set(Stratum)
    assert (stratum == Stratum.A) == (pur > 0)
    if stratum == Stratum.B:
        assert co > 0 and pur == 0
    if stratum == Stratum.E:
        assert pur == co == atc == views == searches == colls == 0


@given(st.integers(min_value=0, max_value=200), st.integers(min_value=0, max_value=200))
def test_smooth_rate_interior_and_monotone(n, extra):
    total = n + extra
    value = smooth_rate(n, total)
    assert 0.0 < value < 1.0
    if n + 1 <= total:
        assert smooth_rate(n + 1, total) > value


@given(st.floats(min_value=1e-5, max_value=1 - 1e-5))
def test_logit_antisymmetric(p):
    assert logit_eps(p) == -logit_eps(1 - p) or abs(logit_eps(p) + logit_eps(1 - p)) < 1e-9


@given(
    st.floats(min_value=-100, max_value=100),
    st.floats(min_value=-100, max_value=100),
    st.floats(min_value=0, max_value=10),
    st.floats(min_value=0, max_value=10),
)
def test_robust_z_monotone_in_x(x, median, iqr, mad):
    lower = robust_z(x, median, iqr, mad)
    upper = robust_z(x + 1.0, median, iqr, mad)
    assert upper >= lower


@given(
    st.lists(st.floats(min_value=1e-6, max_value=1.0), min_size=2, max_size=8),
    st.lists(st.floats(min_value=1e-6, max_value=1.0), min_size=2, max_size=8),
)
def test_js_divergence_symmetric_and_bounded(raw_p, raw_q):
    size = min(len(raw_p), len(raw_q))
    p = np.asarray(raw_p[:size]) / np.sum(raw_p[:size])
    q = np.asarray(raw_q[:size]) / np.sum(raw_q[:size])
    forward = js_divergence(p, q)
    backward = js_divergence(q, p)
    assert abs(forward - backward) <= 1e-12
    assert -1e-12 <= forward <= 1.0 + 1e-12


@settings(max_examples=30)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_quantize_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    entries = rng.normal(size=(int(rng.integers(2, 12)), int(rng.integers(1, 6))))
    cb = Codebook(entries.copy())
    z = rng.normal(size=entries.shape[1])
    k, _ = cb.quantize(z)
    distances = [float(np.sum((z - e) ** 2)) for e in entries]
    assert k == int(np.argmin(distances))


@settings(max_examples=30)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_purchase_bins_monotone_under_count_increase(seed):
    rng = np.random.default_rng(seed)
    pairs = [
        (int(rng.integers(0, 4)), int(rng.integers(0, 6)))
        for _ in range(int(rng.integers(6, 40)))
    ]
    scores = [purchase_score(co, atc) for co, atc in pairs]
    score_counts: dict[int, int] = {}
    for s in scores:
        score_counts[s] = score_counts.get(s, 0) + 1
    if len(score_counts) < 3:
        return
    binning = fit_purchase_bins(score_counts)
    for co, atc in pairs:
        base = binning.assign([purchase_score(co, atc)])[0]
        higher = binning.assign([purchase_score(co + 1, atc)])[0]
        wider = binning.assign([purchase_score(co, atc + 1)])[0]
        assert higher >= base
        assert wider >= base
