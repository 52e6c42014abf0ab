import numpy as np
import pytest

from qseg import metrics as M


def brute_dsc(pred, gt):
    p, g = pred.astype(bool), gt.astype(bool)
    if not p.any() and not g.any():
        return 1.0
    return 2.0 * np.logical_and(p, g).sum() / (p.sum() + g.sum())


def brute_boundary(mask):
    m = mask.astype(bool)
    out = np.zeros_like(m)
    h, w = m.shape
    for y in range(h):
        for x in range(w):
            if not m[y, x]:
                continue
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ny, nx = y + dy, x + dx
                if ny < 0 or ny >= h or nx < 0 or nx >= w or not m[ny, nx]:
                    out[y, x] = True
                    break
    return out


def brute_nsd(pred, gt, tol=2.0):
    bp, bg = brute_boundary(pred), brute_boundary(gt)
    if not bp.any() and not bg.any():
        return 1.0
    if not bp.any() or not bg.any():
        return 0.0
    pp = np.argwhere(bp)
    gg = np.argwhere(bg)
    d_pg = [np.sqrt(((gg - p) ** 2).sum(axis=1)).min() for p in pp]
    d_gp = [np.sqrt(((pp - g) ** 2).sum(axis=1)).min() for g in gg]
    hits = (np.array(d_pg) <= tol).sum() + (np.array(d_gp) <= tol).sum()
    return hits / (len(pp) + len(gg))


class TestDSC:
    def test_random_masks_match_oracle(self, rng):
        for _ in range(100):
            h, w = rng.integers(1, 32, size=2)
            p = rng.random((h, w)) > 0.6
            g = rng.random((h, w)) > 0.6
            assert M.dsc(p, g) == pytest.approx(brute_dsc(p, g), abs=1e-12)

    def test_both_empty_is_one(self):
        z = np.zeros((4, 4), dtype=bool)
        assert M.dsc(z, z) == 1.0

    def test_one_empty_is_zero(self):
        z = np.zeros((4, 4), dtype=bool)
        o = np.ones((4, 4), dtype=bool)
        assert M.dsc(z, o) == 0.0

    def test_identity_is_one(self, rng):
        m = rng.random((10, 10)) > 0.5
        assert M.dsc(m, m) == 1.0


class TestBoundary:
    def test_matches_bruteforce(self, rng):
        for _ in range(30):
            m = rng.random((12, 12)) > 0.5
            np.testing.assert_array_equal(M.boundary_pixels(m),
                                          brute_boundary(m))

    def test_interior_excluded(self):
        m = np.zeros((7, 7), dtype=bool)
        m[1:6, 1:6] = True
        b = M.boundary_pixels(m)
        assert not b[3, 3]
        assert b[1, 1] and b[5, 5]

    def test_image_border_counts_as_boundary(self):
        m = np.ones((5, 5), dtype=bool)
        b = M.boundary_pixels(m)
        assert b[0, 0] and b[0, 4] and not b[2, 2]


class TestNSD:
    def test_random_masks_match_oracle(self, rng):
        for _ in range(40):
            h, w = rng.integers(2, 20, size=2)
            p = rng.random((h, w)) > 0.55
            g = rng.random((h, w)) > 0.55
            assert M.nsd(p, g) == pytest.approx(brute_nsd(p, g), abs=1e-9)

    def test_empty_conventions(self):
        z = np.zeros((5, 5), dtype=bool)
        o = np.ones((5, 5), dtype=bool)
        assert M.nsd(z, z) == 1.0
        assert M.nsd(z, o) == 0.0

    def test_within_tolerance_shift(self):
        a = np.zeros((20, 20), dtype=bool)
        b = np.zeros((20, 20), dtype=bool)
        a[5:10, 5:10] = True
        b[6:11, 5:10] = True  # 1-pixel shift, tau = 2 covers it
        assert M.nsd(a, b, tolerance=2.0) == 1.0

    def test_3d_is_slicewise_mean(self, rng):
        p = rng.random((3, 10, 10)) > 0.5
        g = rng.random((3, 10, 10)) > 0.5
        per = [M.nsd(p[z], g[z]) for z in range(3)]
        assert M.nsd_3d(p, g) == pytest.approx(np.mean(per))


class TestAggregate:
    def _score(self, mod, d, n):
        return M.CaseScore("c", mod, [d], [n], 0.1)

    def test_average_row_unweighted(self):
        rows = M.aggregate([self._score("ct", 0.9, 0.8),
                            self._score("ct", 0.7, 0.6),
                            self._score("mr", 0.5, 0.4)])
        assert [r["modality"] for r in rows] == ["ct", "mr", "Average"]
        assert rows[0]["dsc"] == pytest.approx(0.8)
        assert rows[2]["dsc"] == pytest.approx((0.8 + 0.5) / 2)

    def test_report_roundtrip(self, tmp_path):
        rows = M.aggregate([self._score("ct", 1.0, 1.0)])
        path = tmp_path / "r.csv"
        M.write_report(rows, path)
        text = path.read_text()
        assert "modality" in text and "Average" in text

    def test_format_table_mentions_all_rows(self):
        rows = M.aggregate([self._score("ct", 0.5, 0.5)])
        table = M.format_table(rows)
        assert "ct" in table and "Average" in table
