import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import dsc_sets, nsd_bruteforce, random_blob_mask
from udaseg.metrics import (
    MetricsReport, accuracy_table, aggregate_report, boundary, comparison_table, default_tolerance, dsc, nsd,
)

masks2d = arrays(np.uint8, st.tuples(st.integers(1, 7), st.integers(1, 7)), elements=st.integers(0, 2))


def test_dsc_hand_examples():
    p = np.zeros((4, 4), int)
    g = np.zeros((4, 4), int)
    p[0, :4] = 1
    g[0, 2:4] = 1
    g[1, 0:2] = 1
    assert dsc(p, g) == 0.5
    assert dsc(p, p) == 1.0
    assert dsc(np.zeros_like(p), np.zeros_like(p)) == 1.0
    assert dsc(np.zeros_like(p), g) == 0.0
    assert dsc(p, np.zeros_like(p)) == 0.0


def test_nsd_edge_conventions():
    z = np.zeros((5, 5), int)
    m = z.copy()
    m[1:3, 1:3] = 1
    assert nsd(z, z) == 1.0
    assert nsd(z, m) == 0.0 and nsd(m, z) == 0.0
    for tol in (0.0, 0.5, 3.0):
        assert nsd(m, m, 1, tol) == 1.0


def test_nsd_rejects_bad_input():
    with pytest.raises(ValueError, match="tolerance"):
        nsd(np.ones((3, 3)), np.ones((3, 3)), 1, -1.0)
    with pytest.raises(ValueError, match="shape"):
        nsd(np.ones((3, 3)), np.ones((3, 4)))
    with pytest.raises(ValueError, match="shape"):
        dsc(np.ones((3, 3)), np.ones((3, 4)))


def test_offset_cubes():
    a = np.zeros((10, 10, 10), int)
    b = np.zeros_like(a)
    a[2:6, 2:6, 2:6] = 1
    b[3:7, 2:6, 2:6] = 1
    assert nsd(a, b, 1, 1.0) == 1.0
    assert nsd(a, b, 1, 0.0) == pytest.approx(nsd_bruteforce(a, b, 1, 0.0), abs=1e-12)
    assert nsd(a, b, 1, 0.0) < 1.0


def test_boundary_of_solid_block_counts_faces():
    m = np.zeros((6, 6, 6), bool)
    m[1:5, 1:5, 1:5] = True
    assert boundary(m).sum() == 4**3 - 2**3
    full = np.ones((3, 3), bool)
    assert boundary(full).sum() == 8  # grid border counts as boundary


def test_oracle_equivalence_random_3d(rng):
    for _ in range(20):
        p = random_blob_mask(rng, (9, 9, 9)).astype(int)
        g = random_blob_mask(rng, (9, 9, 9)).astype(int)
        sp = tuple(rng.uniform(0.5, 2.0, 3))
        tol = float(rng.uniform(0, 3))
        assert abs(dsc(p, g) - dsc_sets(p, g, 1)) <= 1e-12
        assert abs(nsd(p, g, 1, tol, sp) - nsd_bruteforce(p, g, 1, tol, sp)) <= 1e-9


@given(masks2d, st.data())
def test_symmetry_and_range(a, data):
    b = data.draw(arrays(np.uint8, a.shape, elements=st.integers(0, 2)))
    tol = data.draw(st.floats(0, 4))
    for c in (1, 2):
        d, n = dsc(a, b, c), nsd(a, b, c, tol)
        assert 0.0 <= d <= 1.0 and 0.0 <= n <= 1.0
        assert d == dsc(b, a, c)
        assert n == pytest.approx(nsd(b, a, c, tol), abs=1e-15)
        assert dsc(a, a, c) == 1.0 and nsd(a, a, c, tol) == 1.0


@given(masks2d, st.data())
def test_permutation_invariance(a, data):
    b = data.draw(arrays(np.uint8, a.shape, elements=st.integers(0, 2)))
    # axis flips and transposes are spatial permutations that keep face adjacency
    fa, fb = np.flip(a.T, 0), np.flip(b.T, 0)
    assert dsc(a, b) == dsc(fa, fb)
    assert nsd(a, b, 1, 1.0) == pytest.approx(nsd(fa, fb, 1, 1.0), abs=1e-15)
    # dsc ignores geometry entirely: any identical voxel permutation preserves it
    perm = np.random.default_rng(0).permutation(a.size)
    assert dsc(a.ravel()[perm], b.ravel()[perm]) == dsc(a, b)


def test_tolerance_monotone(rng):
    tols = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0]
    for _ in range(50):
        p = random_blob_mask(rng, (12, 12)).astype(int)
        g = random_blob_mask(rng, (12, 12)).astype(int)
        vals = [nsd(p, g, 1, t) for t in tols]
        assert all(x <= y + 1e-15 for x, y in zip(vals, vals[1:]))


def _cases():
    g1 = np.zeros((4, 6, 6), int)
    g1[1:3, 1:4, 1:4] = 1
    g1[0, 4:6, 4:6] = 2
    p1 = g1.copy()
    p1[1, 1, 1] = 0
    g2 = np.zeros_like(g1)
    g2[2:4, 2:5, 2:5] = 1
    p2 = np.zeros_like(g1)
    p2[2:4, 2:5, 1:4] = 1
    p2[0, 0, 0] = 2
    return [(p1, g1, (2.0, 1.0, 1.0), "c1"), (p2, g2, (2.0, 1.0, 1.0), "c2")]


def test_aggregate_matches_direct_recomputation():
    cases = _cases()
    rep = aggregate_report(cases, [1, 2], tolerance_mm=1.0, class_names={1: "Liver"})
    for j, c in enumerate([1, 2]):
        d = [dsc(p, g, c) for p, g, _, _ in cases]
        n = [nsd(p, g, c, 1.0, sp) for p, g, sp, _ in cases]
        assert rep.summary[j].dsc_mean == pytest.approx(np.mean(d), abs=1e-15)
        assert rep.summary[j].dsc_std == pytest.approx(np.std(d), abs=1e-15)
        assert rep.summary[j].nsd_mean == pytest.approx(np.mean(n), abs=1e-15)
    assert rep.summary[1].present_cases == 1  # class 2 absent from case 2's gt
    assert abs(rep.overall_dsc - np.mean([s.dsc_mean for s in rep.summary])) < 1e-12
    assert rep.name(1) == "Liver" and rep.name(2) == "class 2"


def test_single_case_std_zero_and_absent_class():
    p, g, sp, cid = _cases()[0]
    rep = aggregate_report([(p, g, sp, cid)], [1, 2, 3])
    assert all(s.dsc_std == 0 and s.nsd_std == 0 for s in rep.summary)
    assert rep.summary[2].present_cases == 0
    assert rep.summary[2].dsc_mean == 1.0  # both empty
    with pytest.raises(ValueError):
        aggregate_report([], [1])


def test_default_tolerance_is_inplane_voxel():
    assert default_tolerance((4.0, 1.5, 1.25)) == 1.5
    rep = aggregate_report(_cases(), [1])
    assert rep.tolerance_mm == 1.0


def test_report_round_trip_and_tables():
    rep = aggregate_report(_cases(), [1, 2], tolerance_mm=1.0, class_names={1: "Liver", 2: "Spleen"})
    back = MetricsReport.from_dict(rep.to_dict())
    assert back == rep
    table = accuracy_table(rep).splitlines()
    assert table[0].startswith("Target,DSC (%),NSD (%)")
    assert table[1].startswith("Liver,") and table[-1].startswith("Average,")
    assert f"{100 * rep.summary[0].dsc_mean:.4f}" in table[1]
    comp = comparison_table({"no_uda": rep, "drl": rep}).splitlines()
    assert comp[0] == "Method,DSC Liver,DSC Spleen,DSC Avg,NSD Liver,NSD Spleen,NSD Avg"
    assert comp[1].split(",")[3] == f"{100 * rep.overall_dsc:.2f}"
