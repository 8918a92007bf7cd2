import numpy as np
import pytest

from selfkp import geometry, matching
from selfkp.geometry import Homography, HomographyConfig

import oracles


def unit(rng, n, d=16):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def planted_instance(rng, size=64):
    """Random instance with some true correspondences, some noise points and decoy descriptors."""
    h = geometry.sample_homography(HomographyConfig(4, 8, 0.1), rng, size, size)
    n = int(rng.integers(1, 21))
    k = rng.uniform(0, size - 1, (n, 2))
    proj = geometry.project_points(k, h)
    k_proj, kept = geometry.filter_in_bounds(proj, size, size)
    m_true = int(rng.integers(0, len(k_proj) + 1)) if len(k_proj) else 0
    k_h = k_proj[:m_true] + rng.normal(0, 2.0, (m_true, 2))
    extra = rng.uniform(0, size - 1, (int(rng.integers(1, 21 - m_true + 1)), 2))
    k_h = np.clip(np.vstack([k_h, extra]), 0, size - 1)
    d_h = unit(rng, len(k_h))
    d_proj = unit(rng, len(kept))
    # make most true pairs descriptor-consistent
    for i in range(min(m_true, len(kept))):
        if rng.random() < 0.7:
            d_proj[i] = d_h[i] + 0.05 * rng.normal(size=16)
            d_proj[i] /= np.linalg.norm(d_proj[i])
    return k, k_h, d_proj, d_h, h


def test_geometric_against_oracle(rng):
    for _ in range(100):
        a = rng.uniform(0, 64, (int(rng.integers(0, 21)), 2))
        b = rng.uniform(0, 64, (int(rng.integers(1, 21)), 2))
        gm = matching.match_geometric(a, b)
        dist, idx = oracles.brute_nearest(a.tolist(), b.tolist())
        assert gm.idx.tolist() == idx
        assert np.abs(gm.dist - dist).max(initial=0) <= 1e-10


def test_descriptor_against_oracle(rng):
    for _ in range(100):
        da, db = unit(rng, int(rng.integers(1, 21))), unit(rng, int(rng.integers(1, 21)))
        assert matching.match_descriptors(da, db).tolist() == oracles.brute_desc_match(da.tolist(), db.tolist())


def test_empty_inputs():
    with pytest.raises(ValueError):
        matching.match_geometric(np.zeros((2, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        matching.match_descriptors(np.zeros((2, 4)), np.zeros((0, 4)))
    assert len(matching.match_geometric(np.zeros((0, 2)), np.ones((3, 2))).idx) == 0


def test_targets_against_oracle(rng):
    checked = accepted = 0
    for _ in range(150):
        k, k_h, d_proj, d_h, h = planted_instance(rng)
        t = matching.estimate_targets(k, k_h, d_proj, d_h, h, (64, 64))
        ref_t, ref_th, ref_acc = oracles.brute_targets(k.tolist(), k_h.tolist(), d_proj.tolist(), d_h.tolist(),
                                                       h.m, 64, 64, matching.THETA_DIST)
        assert t.source_indices.tolist() == ref_acc
        if ref_acc:
            assert np.abs(t.k_prime - ref_t).max() <= 1e-10
            assert np.abs(t.k_prime_h - ref_th).max() <= 1e-10
        checked += 1
        accepted += len(ref_acc)
    assert checked >= 100 and accepted > 50


def test_identity_accepts_everything(rng):
    k = rng.uniform(0, 63, (15, 2))
    d = unit(rng, 15)
    t = matching.estimate_targets(k, k, d, d, Homography.identity(), (64, 64))
    assert len(t) == 15
    assert np.array_equal(t.k_prime, k) and np.array_equal(t.k_prime_h, k)


def test_threshold_strict():
    k = np.array([[10.0, 10.0]])
    k_h = np.array([[14.0, 10.0]])
    d = np.array([[1.0, 0.0]])
    assert len(matching.estimate_targets(k, k_h, d, d, Homography.identity(), (32, 32), theta_dist=4.0)) == 0
    assert len(matching.estimate_targets(k, k_h, d, d, Homography.identity(), (32, 32), theta_dist=4.0001)) == 1


def test_midpoint_and_back_projection():
    h = Homography.translation(5, 0)
    k = np.array([[10.0, 10.0]])
    k_h = np.array([[17.0, 10.0]])
    d = np.array([[1.0, 0.0]])
    t = matching.estimate_targets(k, k_h, d, d, h, (32, 32))
    assert t.k_prime_h.tolist() == [[16.0, 10.0]]
    assert t.k_prime.tolist() == [[11.0, 10.0]]


def test_back_projection_outside_dropped():
    h = Homography.translation(-2, 0)
    k = np.array([[2.0, 5.0]])
    k_h = np.array([[0.0, 5.0]])
    # midpoint (0, 5) maps back to (2, 5): kept; shift partner so the midpoint lands left of the border
    d = np.array([[1.0, 0.0]])
    assert len(matching.estimate_targets(k, k_h, d, d, h, (16, 16))) == 1
    h = Homography.translation(3, 0)
    k = np.array([[0.0, 5.0]])
    k_h = np.array([[0.0, 5.0]])
    # projection (3, 5), midpoint (1.5, 5), back to (-1.5, 5): out of the source image
    t = matching.estimate_targets(k, k_h, d, d, h, (16, 16))
    assert len(t) == 0 and t.geometric.idx.tolist() == [0]


def test_misaligned_descriptor_rows_rejected(rng):
    with pytest.raises(ValueError, match="d_proj"):
        matching.estimate_targets(rng.uniform(0, 10, (3, 2)), rng.uniform(0, 10, (3, 2)), unit(rng, 2), unit(rng, 3),
                                  Homography.identity(), (16, 16))


def test_theta_monotone(rng):
    for _ in range(30):
        k, k_h, d_proj, d_h, h = planted_instance(rng)
        prev = set()
        for theta in (1.0, 2.0, 4.0, 8.0, 100.0):
            cur = set(matching.estimate_targets(k, k_h, d_proj, d_h, h, (64, 64), theta).source_indices.tolist())
            assert prev <= cur
            prev = cur


def test_midpoint_on_segment(rng):
    for _ in range(30):
        k, k_h, d_proj, d_h, h = planted_instance(rng)
        t = matching.estimate_targets(k, k_h, d_proj, d_h, h, (64, 64))
        for row, i in enumerate(t.source_indices):
            a, b = t.k_proj[i], k_h[t.geometric.idx[i]]
            assert np.allclose(t.k_prime_h[row], 0.5 * (a + b))


def test_permutation_invariance(rng):
    a, b = rng.uniform(0, 64, (12, 2)), rng.uniform(0, 64, (9, 2))
    perm = rng.permutation(9)
    g1 = matching.match_geometric(a, b)
    g2 = matching.match_geometric(a, b[perm])
    assert np.array_equal(perm[g2.idx], g1.idx)
    assert np.array_equal(g1.dist, g2.dist)


def test_match_text_round_trip():
    rows = [(0, 3, 0.91, 1.5, True), (1, 0, 0.2, 12.25, False)]
    assert matching.parse_matches(matching.format_matches(rows)) == rows
