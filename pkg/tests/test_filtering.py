import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamwatch.errors import ConfigError, ValidationError
from streamwatch.filtering import (
    ADOS_PRESETS,
    PATH_CODES,
    VARIANTS,
    AdosConfig,
    DimensionPartition,
    adg_sketch,
    ados_filter,
    calibrate_triggers,
    corner_bound_rows,
    exhaustive_labels,
    group_bound,
    js_l1_bounds,
    re_i_group_bound,
    t_func,
)
from streamwatch.metrics import filtering_power
from streamwatch.scoring import ThresholdConfig, js_divergence


def _scan(v, n):
    """Linear interval scan over the documented partition."""
    if 0.5 <= v <= 1.0:
        return 0
    for j in range(1, n - 1):
        if 2.0 ** -(j + 1) <= v < 2.0**-j:
            return j
    return n - 1


def _sparse(rng, d=40):
    v = rng.dirichlet(np.full(d, 0.3)) * rng.uniform(0, 0.1)
    k = rng.integers(1, 4)
    dims = rng.choice(d, k, replace=False)
    v[dims] += rng.dirichlet(np.ones(k)) * (1 - v.sum())
    return v / v.sum()


def _pair(rng, d=40):
    f = _sparse(rng, d)
    fh = _sparse(rng, d) if rng.random() < 0.5 else 0.7 * f + 0.3 * _sparse(rng, d)
    return f, fh


# -- partition ---------------------------------------------------------------


def test_group_id_examples():
    p = DimensionPartition(20)
    assert p.group_id(0.75) == 0
    assert p.group_id(0.3) == _scan(0.3, 20) == 1
    assert p.group_id(0.0) == 19
    assert p.group_id(1.0) == 0
    assert p.group_id(0.5) == 0


def test_group_id_range_error():
    with pytest.raises(ValidationError):
        DimensionPartition(20).group_id(1.5)
    with pytest.raises(ValidationError):
        DimensionPartition(20).group_id(-0.1)


def test_group_id_closed_form_matches_scan_1e6():
    rng = np.random.default_rng(0)
    n = 20
    # half uniform, half log-uniform so every group is exercised
    v = np.concatenate([rng.random(500_000), 2.0 ** -rng.uniform(0, 22, 500_000)])
    v = np.concatenate([v, [2.0**-j for j in range(25)], [0.0, 1.0]])
    got = DimensionPartition(n).group_ids(v)
    # vectorized scan: group j iff lower bound <= v < upper bound
    lo = np.array([0.5] + [2.0 ** -(j + 1) for j in range(1, n - 1)] + [0.0])
    hi = np.array([np.inf] + [2.0**-j for j in range(1, n - 1)] + [2.0 ** -(n - 1)])
    ref = np.argmax((v[:, None] >= lo) & (v[:, None] < hi), axis=1)
    np.testing.assert_array_equal(got, ref)
    for x in v[:2000]:
        assert _scan(x, n) == DimensionPartition(n).group_id(x)


@pytest.mark.parametrize("n", [2, 3, 8, 20])
def test_lookup_matches_closed_form(n):
    rng = np.random.default_rng(n)
    v = np.concatenate([rng.random(20_000), 2.0 ** -rng.uniform(0, n + 2, 20_000), [0.0, 1.0, 0.5]])
    np.testing.assert_array_equal(DimensionPartition(n, use_lookup=True).group_ids(v), DimensionPartition(n).group_ids(v))


def test_partition_bounds_cover():
    p = DimensionPartition(6)
    edges = sorted(p.bounds(j) for j in range(6))
    assert edges[0][0] == 0.0 and edges[-1][1] == 1.0
    for (a, b), (c, d) in zip(edges, edges[1:]):
        assert b == c
    with pytest.raises(ConfigError):
        DimensionPartition(1)


# -- sketches ----------------------------------------------------------------


def test_sketch_uniform():
    sk = adg_sketch(np.full(4, 0.25), DimensionPartition(3))
    occupied = np.flatnonzero(sk.count)
    # 0.25 opens group 1 = [0.25, 0.5)
    assert occupied.tolist() == [1] == [_scan(0.25, 3)]
    assert (sk.lo[1], sk.hi[1], sk.count[1]) == (0.25, 0.25, 4)


def test_sketch_example_scan_oracle():
    f = np.array([0.7, 0.2, 0.05, 0.05])
    sk = adg_sketch(f, DimensionPartition(3))
    assert (sk.lo[0], sk.hi[0], sk.count[0]) == (0.7, 0.7, 1)
    for g in range(3):
        members = [x for x in f if _scan(x, 3) == g]
        assert sk.count[g] == len(members)
        if members:
            assert (sk.lo[g], sk.hi[g]) == (min(members), max(members))
    assert sk.count.sum() == 4
    assert adg_sketch(f, DimensionPartition(3), n_sg=0).sparse_exact == {}


def test_sketch_sparse_groups_fewest_members():
    f = np.array([0.6, 0.2, 0.1, 0.05, 0.05])
    sk = adg_sketch(f, DimensionPartition(4), n_sg=2)
    counts = {g: sk.count[g] for g in sk.sparse_exact}
    assert all(c == 1 for c in counts.values())
    assert sorted(sk.sparse_exact) == [0, 2]


# -- bounds ------------------------------------------------------------------


def test_js_l1_bounds_examples():
    f = np.array([0.3, 0.7])
    assert js_l1_bounds(f, f) == (0.0, 0.0)
    lo, hi = js_l1_bounds(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert (lo, hi) == (0.5, 1.0)
    assert lo <= math.log(2) <= hi


def test_l1_and_group_bound_sandwich_randomized():
    rng = np.random.default_rng(1)
    part = DimensionPartition(20)
    F, Fh = zip(*(_pair(rng) for _ in range(20_000)))
    F, Fh = np.array(F), np.array(Fh)
    r = js_divergence(F, Fh)
    l1 = np.abs(F - Fh).sum(axis=1)
    assert np.all(0.125 * l1**2 <= r) and np.all(r <= 0.5 * l1)
    gb = corner_bound_rows(F, Fh, part, 2)
    assert np.all(gb >= r)


def test_group_bound_identical_inputs():
    f = _sparse(np.random.default_rng(2))
    for v in VARIANTS:
        assert group_bound(f, f, DimensionPartition(20), 0, v) >= 0.0


def test_group_bound_exact_when_all_sparse():
    rng = np.random.default_rng(3)
    part = DimensionPartition(20)
    for _ in range(50):
        f, fh = _pair(rng)
        for v in VARIANTS:
            assert abs(group_bound(f, fh, part, part.n, v) - js_divergence(f, fh)) < 1e-12


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_group_bound_monotone_in_n_sg(seed):
    rng = np.random.default_rng(seed)
    f, fh = _pair(rng)
    part = DimensionPartition(20)
    vals = [group_bound(f, fh, part, k, "corner") for k in range(0, 21)]
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 100_000), n_sg=st.integers(0, 20))
def test_corner_rows_match_scalar(seed, n_sg):
    rng = np.random.default_rng(seed)
    f, fh = _pair(rng)
    part = DimensionPartition(20)
    assert abs(corner_bound_rows(f[None], fh[None], part, n_sg)[0] - group_bound(f, fh, part, n_sg, "corner")) < 1e-12


def test_min_form_is_unsound():
    # the printed-statement reading underestimates often; kept for comparison only
    rng = np.random.default_rng(4)
    part = DimensionPartition(20)
    bad = 0
    for _ in range(500):
        f, fh = _pair(rng)
        bad += group_bound(f, fh, part, 2, "min-form") < js_divergence(f, fh)
    assert bad > 0


def test_group_bound_partition_mismatch():
    f = np.full(4, 0.25)
    a = adg_sketch(f, DimensionPartition(3))
    b = adg_sketch(f, DimensionPartition(4))
    with pytest.raises(ConfigError):
        re_i_group_bound(a, b)


def test_t_func_examples():
    f = np.array([0.3, 0.7])
    assert t_func(f, f) == 0.0
    assert abs(t_func(np.array([0.9, 0.1]), np.array([0.2, 0.8])) - 0.7) < 1e-15
    assert abs(t_func(np.array([0.5, 0.5]), np.array([0.4, 0.6])) - 0.1) < 1e-15


# -- ADOS --------------------------------------------------------------------


def _reference(F, Fh, ra, omega, th, cfg):
    """Per-segment loop following the documented decision order."""
    part = DimensionPartition(cfg.n_groups)
    strict = cfg.strict_paper_mode
    wi, wa = (1.0, 0.0) if strict else (omega, 1.0 - omega)
    out = []
    for f, fh, a in zip(F, Fh, ra):
        base = wa * a
        tf = t_func(f, fh)
        if cfg.t1 <= tf <= cfg.t2:
            lo, hi = js_l1_bounds(f, fh)
            if wi * hi + base < th.normal:
                out.append(("L1_normal", False))
                continue
            if wi * lo + base > th.anomaly:
                out.append(("L1_anomaly", True))
                continue
        gb = group_bound(f, fh, part, cfg.n_sg, cfg.bound_variant)
        if wi * gb + base <= th.normal:
            out.append(("group_pruned_normal", False))
            continue
        score = wi * js_divergence(f, fh) + base
        out.append(("exact", bool(score > (th.anomaly if strict else th.tau))))
    return out


def _batch(seed, n=300, d=40):
    rng = np.random.default_rng(seed)
    F, Fh = zip(*(_pair(rng, d) for _ in range(n)))
    return np.array(F), np.array(Fh), rng.random(n) * 0.4


def test_ados_empty_stream():
    z = np.zeros((0, 4))
    res = ados_filter(z, z, np.zeros(0), 0.8, ThresholdConfig(0.2), AdosConfig())
    assert len(res) == 0 and res.paths == [] and res.decisions() == []


def test_ados_requires_thresholds():
    z = np.zeros((0, 4))
    with pytest.raises(ConfigError):
        ados_filter(z, z, np.zeros(0), 0.8, None, AdosConfig())


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    t1=st.floats(0, 1),
    width=st.floats(0, 1),
    tau=st.floats(0.02, 0.5),
    n_sg=st.integers(0, 5),
)
def test_ados_composite_lossless_any_trigger(seed, t1, width, tau, n_sg):
    F, Fh, ra = _batch(seed, 120)
    cfg = AdosConfig(t1=t1, t2=t1 + width + 1e-9, n_sg=n_sg)
    th = ThresholdConfig(tau)
    res = ados_filter(F, Fh, ra, 0.8, th, cfg)
    np.testing.assert_array_equal(res.anomaly.astype(int), exhaustive_labels(F, Fh, ra, 0.8, tau))


@pytest.mark.parametrize("strict", [False, True])
@pytest.mark.parametrize("variant", VARIANTS)
def test_ados_matches_reference_loop(strict, variant):
    F, Fh, ra = _batch(7)
    th = ThresholdConfig(0.15)
    cfg = AdosConfig(t1=0.05, t2=0.6, n_sg=2, bound_variant=variant, strict_paper_mode=strict)
    res = ados_filter(F, Fh, ra, 0.8, th, cfg)
    ref = _reference(F, Fh, ra, 0.8, th, cfg)
    assert res.paths == [p for p, _ in ref]
    assert res.anomaly.tolist() == [a for _, a in ref]


def test_ados_one_path_per_segment_and_fp():
    F, Fh, ra = _batch(8)
    res = ados_filter(F, Fh, ra, 0.8, ThresholdConfig(0.15), AdosConfig(0.05, 0.6))
    decs = res.decisions()
    assert len(decs) == len(F)
    assert all(d.path in PATH_CODES for d in decs)
    fp = filtering_power(res.paths)
    assert abs(sum(fp[p] for p in PATH_CODES) - 1.0) < 1e-12
    assert res.exact_calls == sum(p == "exact" for p in res.paths)
    # exact re_i only where the exact path ran
    assert np.all(np.isnan(res.re_i) == (np.array(res.paths) != "exact"))


def test_ados_identical_segments_never_exact():
    rng = np.random.default_rng(5)
    f = _sparse(rng)
    F = np.tile(f, (50, 1))
    res = ados_filter(F, F.copy(), np.zeros(50), 0.8, ThresholdConfig(0.1), AdosConfig())
    assert set(res.paths) <= {"L1_normal", "group_pruned_normal"}
    assert res.exact_calls == 0


def test_ados_config_validation():
    with pytest.raises(ConfigError):
        AdosConfig(t1=0.5, t2=0.2).validate()
    with pytest.raises(ConfigError):
        AdosConfig(bound_variant="avg").validate()
    with pytest.raises(ConfigError):
        AdosConfig(n_sg=30).validate()
    for name, (t1, t2, n_sg) in ADOS_PRESETS.items():
        assert t1 > t2
        with pytest.raises(ConfigError):
            AdosConfig.preset(name)
        cfg = AdosConfig.preset(name, allow_empty_window=True)
        assert (cfg.t1, cfg.t2, cfg.n_sg) == (t1, t2, n_sg)


def test_calibrate_triggers_window():
    F, Fh, ra = _batch(9, 400)
    th = ThresholdConfig(0.15)
    t1, t2 = calibrate_triggers(F, Fh, ra, 0.8, th)
    if t1 <= t2:
        res = ados_filter(F, Fh, ra, 0.8, th, AdosConfig(t1, t2))
        np.testing.assert_array_equal(res.anomaly.astype(int), exhaustive_labels(F, Fh, ra, 0.8, 0.15))
    # never-resolving data gives the empty window
    same = np.tile(_sparse(np.random.default_rng(1)), (5, 1))
    shifted = np.roll(same, 1, axis=1)
    assert calibrate_triggers(same, shifted, np.full(5, 0.5), 0.8, ThresholdConfig(0.9, t_n=0.1)) == (1.0, 0.0)
