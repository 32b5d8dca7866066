"""Confusion counts, rates, and Jaccard stability."""

import pytest

from svjoint.metrics import ConfusionCounts, confusion, jaccard, metrics


GENES = [f"g{i}" for i in range(200)]
FLAGS = [i < 20 for i in range(200)]


class TestConfusion:
    def test_perfect_selection(self):
        c = confusion({g for g, f in zip(GENES, FLAGS) if f}, GENES, FLAGS)
        assert c.fp == 0 and c.fn == 0 and c.tp == 20 and c.tn == 180

    def test_empty_selection(self):
        c = confusion(set(), GENES, FLAGS)
        assert (c.tp, c.fn, c.tn, c.fp) == (0, 20, 180, 0)

    def test_complement_swaps_roles(self):
        sv = {g for g, f in zip(GENES, FLAGS) if f}
        comp = set(GENES) - sv
        a = confusion(sv, GENES, FLAGS)
        b = confusion(comp, GENES, FLAGS)
        assert (a.tp, a.tn) == (b.fn, b.fp)

    def test_total_is_G(self):
        c = confusion({"g0", "g100"}, GENES, FLAGS)
        assert c.total == 200

    def test_unknown_gene(self):
        with pytest.raises(ValueError):
            confusion({"nope"}, GENES, FLAGS)


class TestMetrics:
    def test_definition_arithmetic(self):
        tpr, fpr, f1 = metrics(ConfusionCounts(tp=8, fp=1, tn=189, fn=2))
        assert tpr == pytest.approx(0.8)
        assert fpr == pytest.approx(1.0 / 190.0)
        assert f1 == pytest.approx(16.0 / 19.0)

    def test_degenerate_convention(self):
        assert metrics(ConfusionCounts(0, 0, 5, 0)) == (0.0, 0.0, 0.0)

    def test_perfect_f1(self):
        _, _, f1 = metrics(ConfusionCounts(tp=10, fp=0, tn=0, fn=0))
        assert f1 == 1.0

    def test_bounds(self):
        import itertools
        for tp, fp, tn, fn in itertools.product(range(4), repeat=4):
            tpr, fpr, f1 = metrics(ConfusionCounts(tp, fp, tn, fn))
            assert 0.0 <= tpr <= 1.0 and 0.0 <= fpr <= 1.0 and 0.0 <= f1 <= 1.0


class TestJaccard:
    def test_half_overlap(self):
        assert jaccard({"a", "b", "c"}, {"b", "c", "d"}) == pytest.approx(0.5)

    def test_identical(self):
        assert jaccard({"a", "b"}, {"a", "b"}) == 1.0

    def test_disjoint(self):
        assert jaccard({"a"}, {"b"}) == 0.0

    def test_both_empty(self):
        assert jaccard(set(), set()) == 1.0

    def test_symmetry(self):
        import random
        rng = random.Random(0)
        for _ in range(25):
            a = {rng.randrange(30) for _ in range(rng.randrange(10))}
            b = {rng.randrange(30) for _ in range(rng.randrange(10))}
            assert jaccard(a, b) == jaccard(b, a)
