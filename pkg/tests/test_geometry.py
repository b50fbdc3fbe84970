import numpy as np
import pytest

from adaptok import geometry
from adaptok.errors import ContractError
from adaptok.geometry import TokenKey, canonical_order, coarse_grid, finest_cover, split

from conftest import grow_random_set


class TestCoarseGrid:
    def test_256(self):
        s = coarse_grid(256, 256)
        assert s.n_valid == 64
        assert len(s.frontier) == 64

    def test_rectangular(self):
        assert coarse_grid(64, 32).n_valid == 2

    def test_non_divisible_rejected(self):
        with pytest.raises(ValueError):
            coarse_grid(100, 64)
        assert geometry.padded_extent(100, 64) == (128, 64)

    def test_pixel_coverage_512(self):
        s = coarse_grid(512, 512)
        assert s.n_valid == 256
        counter = np.zeros((512, 512), dtype=int)
        for k in s.keys:
            y0, x0, y1, x1 = k.rect()
            counter[y0:y1, x0:x1] += 1
        assert np.all(counter == 1)


class TestSplit:
    def test_root_children(self):
        kids = split(TokenKey(0, 0, 0))
        assert set(kids) == {TokenKey(1, 0, 0), TokenKey(1, 0, 1), TokenKey(1, 1, 0), TokenKey(1, 1, 1)}

    def test_children_tile_parent(self, rng):
        for _ in range(50):
            level = int(rng.integers(0, 3))
            parent = TokenKey(level, int(rng.integers(0, 8)), int(rng.integers(0, 8)))
            y0, x0, y1, x1 = parent.rect()
            counter = np.zeros((y1 - y0, x1 - x0), dtype=int)
            for c in split(parent):
                cy0, cx0, cy1, cx1 = c.rect()
                assert (cy1 - cy0) * (cx1 - cx0) * 4 == (y1 - y0) * (x1 - x0)
                counter[cy0 - y0 : cy1 - y0, cx0 - x0 : cx1 - x0] += 1
            assert np.all(counter == 1)

    def test_finest_level_refuses(self):
        with pytest.raises(ContractError):
            split(TokenKey(3, 0, 0))
        with pytest.raises(ContractError):
            TokenKey(0, 0, 0).parent()


class TestCanonicalOrder:
    def test_single(self):
        k = TokenKey(1, 2, 3)
        assert canonical_order([k]) == [k]

    def test_permutation_invariant(self, rng):
        keys = list(coarse_grid(256, 256).keys) + [TokenKey(1, 3, 5), TokenKey(2, 0, 0)]
        for _ in range(10):
            perm = [keys[i] for i in rng.permutation(len(keys))]
            assert canonical_order(perm) == canonical_order(keys)

    def test_against_sort_oracle(self, rng):
        keys = []
        for _ in range(100):
            level = int(rng.integers(0, 4))
            side = 32 >> level
            keys.append(TokenKey(level, int(rng.integers(0, 512 // side)), int(rng.integers(0, 512 // side))))

        def slow_morton(y, x):
            code = 0
            for bit in range(16):
                code |= ((x >> bit) & 1) << (2 * bit)
                code |= ((y >> bit) & 1) << (2 * bit + 1)
            return code

        def oracle_key(k):
            cy, cx = k.center2()
            return (slow_morton(cy, cx), k.level, k.row, k.col)

        assert canonical_order(keys) == sorted(keys, key=oracle_key)


class TestMixedSet:
    def test_with_children_structure(self, rng):
        s = coarse_grid(64, 64)
        s, kids = s.with_children([s.frontier[0], s.frontier[2]])
        assert len(kids) == 8
        assert set(s.frontier) == set(kids)
        s.validate()

    def test_sibling_completeness_and_counts(self, rng):
        for _ in range(25):
            s, selections = grow_random_set(64, 64, 0.5, rng)
            s.validate()
            counts = s.counts_per_level()
            for lvl, sel in enumerate(selections, start=1):
                assert counts[lvl] == 4 * len(sel)

    def test_no_same_level_overlap(self, rng):
        for _ in range(10):
            s, _ = grow_random_set(64, 64, 0.6, rng)
            for lvl in range(4):
                counter = np.zeros((64, 64), dtype=int)
                for k in s.keys:
                    if k.level != lvl:
                        continue
                    y0, x0, y1, x1 = k.rect()
                    counter[y0:y1, x0:x1] += 1
                assert counter.max() <= 1

    def test_level_tiling_union_equals_selected_parents(self, rng):
        s, selections = grow_random_set(64, 64, 0.5, rng)
        for lvl, sel in enumerate(selections, start=1):
            child_cover = np.zeros((64, 64), dtype=bool)
            parent_cover = np.zeros((64, 64), dtype=bool)
            for k in s.keys:
                if k.level == lvl:
                    y0, x0, y1, x1 = k.rect()
                    child_cover[y0:y1, x0:x1] = True
            for p in sel:
                y0, x0, y1, x1 = p.rect()
                parent_cover[y0:y1, x0:x1] = True
            assert np.array_equal(child_cover, parent_cover)


class TestFinestCover:
    def brute_force(self, s):
        cover = np.full((s.height, s.width), -1, dtype=int)
        for y in range(s.height):
            for x in range(s.width):
                best = -1
                best_level = -1
                for i, k in enumerate(s.keys):
                    y0, x0, y1, x1 = k.rect()
                    if y0 <= y < y1 and x0 <= x < x1 and k.level > best_level:
                        best, best_level = i, k.level
                cover[y, x] = best
        return cover

    def test_coarse_only(self):
        s = coarse_grid(64, 64)
        cover = finest_cover(s)
        for i, k in enumerate(s.keys):
            y0, x0, y1, x1 = k.rect()
            assert np.all(cover[y0:y1, x0:x1] == i)

    def test_one_split_parent(self):
        s = coarse_grid(64, 64)
        parent = s.frontier[1]
        s, kids = s.with_children([parent])
        cover = finest_cover(s)
        y0, x0, y1, x1 = parent.rect()
        inside = cover[y0:y1, x0:x1]
        assert {s.keys[i].level for i in np.unique(inside)} == {1}
        outside_levels = {s.keys[i].level for i in np.unique(cover)} - {1}
        assert outside_levels == {0}

    def test_against_brute_force(self, rng):
        for _ in range(5):
            s, _ = grow_random_set(64, 64, 0.4, rng)
            assert np.array_equal(finest_cover(s), self.brute_force(s))

    def test_total_and_idempotent(self, rng):
        s, _ = grow_random_set(64, 64, 0.5, rng)
        c1 = finest_cover(s)
        c2 = finest_cover(s)
        assert c1.min() >= 0
        assert np.array_equal(c1, c2)


def test_scale_levels():
    for lvl, side in enumerate((32, 16, 8, 4)):
        assert geometry.ScaleLevel.of(lvl).patch_side == side
    with pytest.raises(ValueError):
        geometry.ScaleLevel.of(4)


def test_pad_and_mask_counts():
    from adaptok.stage1 import pad_and_mask

    a = coarse_grid(64, 64)
    b, _ = coarse_grid(64, 64).with_children([a.frontier[0]])
    # counts per level: a = [4,0,...], b = [4,4,...]
    padded, masks = pad_and_mask([a, b])
    assert padded[0].n_rows == padded[1].n_rows == 8
    assert masks[0].sum() == 4 and masks[1].sum() == 8
    assert list(padded[0].pad_levels) == [1] * 4
