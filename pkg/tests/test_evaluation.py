import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from transfusor import evaluation as E
from transfusor.data import Corpus, LabeledTrajectory, read_trajectories
from transfusor.errors import CoverageUndefinedError, UsageError
from transfusor.labels import ConditionLabel, table_order

traj = arrays(np.float64, (6, 2), elements=st.floats(-50, 50))


def ade_loop(a, b):
    total = 0.0
    for (x1, y1), (x2, y2) in zip(a, b):
        total += ((x1 - x2) ** 2 + (y1 - y2) ** 2) ** 0.5
    return total / len(a)


def coverage_loop(dataset, generated, theta):
    hit_d = sum(any(ade_loop(d, g) < theta for g in generated) for d in dataset)
    hit_g = sum(any(ade_loop(d, g) < theta for d in dataset) for g in generated)
    return hit_d / len(dataset), hit_g / len(generated)


# ADE --------------------------------------------------------------------------------

def test_ade_identity(np_rng):
    a = np_rng.normal(size=(15, 2))
    assert E.ade(a, a) == 0.0


def test_ade_constant_offset(np_rng):
    a = np_rng.normal(size=(15, 2))
    assert E.ade(a, a + [3.0, 4.0]) == pytest.approx(5.0, abs=1e-12)
    assert E.ade(np.zeros((15, 2)), np.tile([3.0, 4.0], (15, 1))) == 5.0


def test_ade_matches_loop(np_rng):
    for _ in range(20):
        a, b = np_rng.normal(size=(2, 15, 2)) * 3
        assert E.ade(a, b) == pytest.approx(ade_loop(a, b), rel=1e-15, abs=1e-15)


def test_ade_length_mismatch():
    with pytest.raises(UsageError):
        E.ade(np.zeros((15, 2)), np.zeros((14, 2)))


@settings(max_examples=60, deadline=None)
@given(traj, traj, traj)
def test_ade_metric_properties(a, b, c):
    assert E.ade(a, b) == E.ade(b, a)
    assert E.ade(a, c) <= E.ade(a, b) + E.ade(b, c) + 1e-12


# coverage -------------------------------------------------------------------------

def test_coverage_of_identical_sets(np_rng):
    s = np_rng.normal(size=(5, 15, 2))
    assert E.coverage(s, s, 0.5) == (1.0, 1.0)


def test_coverage_of_far_sets(np_rng):
    s = np_rng.normal(size=(5, 15, 2))
    assert E.coverage(s, s + 100.0, 1.0) == (0.0, 0.0)


def test_coverage_hand_built_4_by_3():
    base = np.zeros((15, 2))
    dataset = [base, base + [0.3, 0], base + [2.0, 0], base + [0, -5.0]]
    generated = [base + [0.1, 0.1], base + [2.6, 0], base + [10, 10]]
    assert E.coverage(dataset, generated, 0.5) == coverage_loop(dataset, generated, 0.5) == (0.5, 1 / 3)
    assert E.coverage(dataset, generated, 1.0) == coverage_loop(dataset, generated, 1.0) == (0.75, 2 / 3)


def test_coverage_strict_threshold():
    a = np.zeros((1, 15, 2))
    b = a + [0.5, 0.0]
    assert E.coverage(a, b, 0.5) == (0.0, 0.0)


@pytest.mark.parametrize("n,m", [(1, 1), (7, 13), (100, 100)])
def test_coverage_matches_double_loop(n, m, np_rng):
    d = np.cumsum(np_rng.normal(size=(n, 15, 2)) * 0.3, axis=1)
    g = np.cumsum(np_rng.normal(size=(m, 15, 2)) * 0.3, axis=1)
    for theta in (0.5, 1.0, 2.0):
        assert E.coverage(d, g, theta) == coverage_loop(d, g, theta)


def test_coverage_empty_sides():
    s = np.zeros((2, 15, 2))
    with pytest.raises(CoverageUndefinedError):
        E.coverage(np.zeros((0, 15, 2)), s, 1.0)
    with pytest.raises(CoverageUndefinedError):
        E.coverage(s, np.zeros((0, 15, 2)), 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 31), st.floats(0.05, 3.0), st.floats(0.0, 2.0))
def test_coverage_monotone(n, m, seed, theta, extra):
    rng = np.random.default_rng(seed)
    d, g = rng.normal(size=(n, 6, 2)), rng.normal(size=(m + 1, 6, 2))
    low, high = E.coverage(d, g, theta), E.coverage(d, g, theta + extra)
    assert high[0] >= low[0] and high[1] >= low[1]
    # growing the generated set never lowers c1
    assert low[0] >= E.coverage(d, g[:-1], theta)[0]


def test_dispersion(np_rng):
    s = np_rng.normal(size=(4, 15, 2))
    pairs = [E.ade(s[i], s[j]) for i in range(4) for j in range(i + 1, 4)]
    assert E.dispersion(s) == pytest.approx(np.mean(pairs), rel=1e-14)
    assert E.dispersion(s[:1]) == 0.0


# report ------------------------------------------------------------------------------

def small_corpus(np_rng, per=3, skip=()):
    trajs = []
    for lab in table_order():
        if lab.index in skip:
            continue
        for _ in range(per):
            pts = np.cumsum(np_rng.normal(size=(15, 2)) * 0.2, axis=0) + [100.0, 5.0]
            trajs.append(LabeledTrajectory(pts, lab))
    return Corpus(trajs)


def noisy_sampler(np_rng):
    def sample(label, n):
        return np.cumsum(np_rng.normal(size=(n, 15, 2)) * 0.2, axis=1)
    return sample


def test_report_schema_and_monotonicity(np_rng):
    rep = E.table2_report(small_corpus(np_rng), noisy_sampler(np_rng), n_gen=10)
    assert len(rep.rows) == 24
    for lab in table_order():
        lo, hi = rep.row(lab, 0.5), rep.row(lab, 1.0)
        assert 0 <= lo.c1 <= hi.c1 <= 1 and 0 <= lo.c2 <= hi.c2 <= 1
    lines = rep.to_text().splitlines()
    assert lines[0] == ",".join(E.REPORT_HEADER) and len(lines) == 25
    assert lines[1].startswith("transfusor,car,left,low,0.5,")


def test_report_missing_category(np_rng):
    rep = E.table2_report(small_corpus(np_rng, skip={4}), noisy_sampler(np_rng), n_gen=5)
    row = rep.row(ConditionLabel.from_index(4), 0.5)
    assert not row.applicable and row.cells()[5:7] == ["NA", "NA"]


def test_report_default_sample_count(np_rng):
    counts = []

    def sampler(label, n):
        counts.append(n)
        return np.zeros((n, 15, 2))

    E.table2_report(small_corpus(np_rng, per=60), sampler)
    assert set(counts) == {60}
    assert E.default_n_gen(10) == 50 and E.default_n_gen(400) == 400


def test_report_aligns_origins(np_rng):
    # dataset lives far from the origin; the sampler returns the same shapes anchored at zero
    corpus = small_corpus(np_rng, per=2)

    def sampler(label, n):
        members = [t.points for t in corpus.trajectories if t.label == label]
        return np.stack(members)[:n] - np.stack(members)[:n, :1]

    rep = E.table2_report(corpus, sampler, n_gen=2)
    assert all(r.c1 == 1.0 and r.c2 == 1.0 for r in rep.rows)


# KDE --------------------------------------------------------------------------------

def test_kde_single_cluster(np_rng):
    pts = np_rng.normal([3.0, -1.0], 0.3, size=(400, 2))
    g = E.kde_grid(pts, resolution=(121, 121))
    x, y = g.argmax()
    assert abs(x - 3.0) < 0.15 and abs(y + 1.0) < 0.15
    assert np.all(g.density >= 0)


def test_kde_integral_near_one(np_rng):
    pts = np_rng.normal(size=(300, 2)) * [5.0, 0.5]
    assert abs(E.kde_grid(pts, resolution=(200, 200)).integral() - 1) < 0.02


def test_kde_two_clusters(np_rng):
    pts = np.r_[np_rng.normal([-5, 0], 0.3, (200, 2)), np_rng.normal([5, 0], 0.3, (200, 2))]
    g = E.kde_grid(pts, resolution=(201, 51))
    row = g.density[np.argmin(np.abs(g.ys))]
    interior = row[1:-1]
    peaks = np.nonzero((interior > row[:-2]) & (interior > row[2:]))[0]
    assert len(peaks) == 2


def test_kde_scott_bandwidth(np_rng):
    pts = np_rng.normal(size=(64, 2)) * [2.0, 0.5]
    expected = 64 ** (-1 / 6) * pts.std(axis=0, ddof=1)
    assert np.allclose(E.kde_grid(pts).bandwidth, expected)


def test_kde_zero_spread_floor():
    with pytest.warns(RuntimeWarning):
        g = E.kde_grid(np.ones((5, 2)))
    assert g.bandwidth == (1e-3, 1e-3)


def test_kde_needs_two_points():
    with pytest.raises(UsageError):
        E.kde_grid(np.ones((1, 2)))


# exports ---------------------------------------------------------------------------

def test_twenty_per_category_export(tmp_path, np_rng):
    samples = {lab.index: np_rng.normal(size=(20, 15, 2)) for lab in table_order()}
    paths = E.export_per_category(tmp_path, samples)
    assert len(paths) == 12
    for p in paths:
        with open(p) as fh:
            assert len(fh.read().splitlines()) == 1 + 20 * 15
        items = read_trajectories(p)
        assert len(items) == 20 and all(np.array_equal(pts[0], [0.0, 0.0]) for _, _, pts in items)


def test_empty_export_is_header_only(tmp_path):
    path = tmp_path / "empty.csv"
    E.export_trajectories(path, {})
    assert path.read_text() == "traj_id,category_index,point_index,x,y\n"


def test_reexport_byte_identical(tmp_path, np_rng):
    samples = {3: np_rng.normal(size=(4, 15, 2))}
    E.export_trajectories(tmp_path / "a.csv", samples)
    E.export_trajectories(tmp_path / "b.csv", samples)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    g = E.kde_grid(np_rng.normal(size=(30, 2)), resolution=(10, 8), step=40)
    g.order = 2
    E.export_kde(tmp_path / "k1.csv", g)
    E.export_kde(tmp_path / "k2.csv", g)
    assert (tmp_path / "k1.csv").read_bytes() == (tmp_path / "k2.csv").read_bytes()


def test_kde_file_roundtrip(tmp_path, np_rng):
    g = E.kde_grid(np_rng.normal(size=(30, 2)), resolution=(10, 8), step=40)
    g.order = 2
    E.export_kde(tmp_path / "k.csv", g)
    lines = (tmp_path / "k.csv").read_text().splitlines()
    assert lines[0].startswith("# extent = ") and lines[1] == "step,k,x,y,density"
    assert lines[2].startswith("2,40,")
    back = E.read_kde(tmp_path / "k.csv")
    assert np.array_equal(back.density, g.density) and back.step == 40 and back.order == 2


def test_unwritable_export(tmp_path):
    with pytest.raises(OSError):
        E.export_trajectories(os.path.join(tmp_path, "missing", "x.csv"), {})
