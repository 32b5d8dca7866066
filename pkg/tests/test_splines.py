"""Basis, design-matrix, and degree-selection tests."""

import math
import warnings

import numpy as np
import pytest

from svjoint import splines
from svjoint.simulate import SimConfig, generate
from svjoint.splines import (
    BasisSpec,
    eval_basis,
    normalize_coords,
    select_degree,
    zinb_mle,
)

from conftest import make_design


class TestNormalizeCoords:
    def test_affine_endpoints(self):
        coords = np.array([[0.0, 0.0], [16.0, 1.0], [32.0, 2.0]])
        out = normalize_coords(coords)
        np.testing.assert_allclose(out[:, 0], [0.0, 0.5, 1.0])

    def test_degenerate_axis(self):
        coords = np.array([[5.0, 0.0], [5.0, 1.0], [5.0, 2.0]])
        out = normalize_coords(coords)
        np.testing.assert_allclose(out[:, 0], 0.5)

    def test_unit_interval_unchanged(self):
        coords = np.array([[0.0, 0.25], [0.4, 0.5], [1.0, 1.0], [0.2, 0.0]])
        np.testing.assert_allclose(normalize_coords(coords), coords)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            normalize_coords(np.array([[0.0, np.inf], [1.0, 2.0]]))


class TestEvalBasis:
    def test_degree_two_midpoint(self):
        np.testing.assert_allclose(eval_basis(BasisSpec(2), 0.5), [0.5, 0.25])

    def test_zero_boundary(self):
        for d in (1, 2, 3, 4):
            np.testing.assert_allclose(eval_basis(BasisSpec(d), 0.0), np.zeros(d))

    def test_one_boundary_degree_three(self):
        np.testing.assert_allclose(eval_basis(BasisSpec(3), 1.0), [0.0, 0.0, 1.0])

    def test_partition_of_unity(self):
        t = np.linspace(0.0, 1.0, 1001)
        for d in (1, 2, 3, 4):
            vals = eval_basis(BasisSpec(d), t)
            total = vals.sum(axis=1) + (1.0 - t) ** d
            np.testing.assert_allclose(total, 1.0, atol=1e-12)

    def test_range_and_continuity(self):
        step = 1e-3
        t = np.arange(0.0, 1.0 + step / 2, step)
        for d in (1, 2, 3, 4):
            vals = eval_basis(BasisSpec(d), t)
            assert vals.min() >= 0.0 and vals.max() <= 1.0
            jumps = np.abs(np.diff(vals, axis=0)).max()
            assert jumps < 10.0 * step * d

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            eval_basis(BasisSpec(2), 1.1)

    def test_bad_degree(self):
        with pytest.raises(ValueError):
            BasisSpec(5)


class TestBuildDesign:
    def test_dimensions(self):
        rng = np.random.default_rng(0)
        design = make_design(rng.uniform(size=(3, 2)), rng.uniform(size=(3, 1)), degree=2)
        assert design.matrix.shape == (3, 6)
        assert design.dim == 6

    def test_boundary_row(self):
        design = make_design([[0.0, 0.0]], [[7.0]], degree=2)
        np.testing.assert_allclose(design.matrix[0], [1.0, 0.0, 0.0, 0.0, 0.0, 7.0])

    def test_identical_spots_identical_rows(self):
        design = make_design([[0.3, 0.7], [0.3, 0.7]], [[1.0], [1.0]], degree=3)
        np.testing.assert_array_equal(design.matrix[0], design.matrix[1])

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(3)
        coords = rng.uniform(size=(10, 2))
        covs = rng.uniform(size=(10, 2))
        perm = rng.permutation(10)
        a = make_design(coords, covs, degree=3).matrix
        b = make_design(coords[perm], covs[perm], degree=3).matrix
        np.testing.assert_array_equal(a[perm], b)

    def test_block_slices(self):
        design = make_design([[0.1, 0.9]], [[2.0, 3.0]], degree=2)
        assert design.beta_slice(0) == slice(1, 3)
        assert design.beta_slice(1) == slice(3, 5)
        assert design.psi_slice == slice(5, 7)

    def test_requires_normalized(self):
        with pytest.raises(ValueError):
            make_design([[1.5, 0.2]], [[0.0]], degree=1)


def _flat_sample(pattern, degree_true, seed, n_side=14, dropout=0.0):
    cfg = SimConfig(
        M=1,
        grid=(n_side, n_side),
        G=10,
        n_sv=10,
        pattern=pattern,
        signal_setting=1,
        dropout_pi=dropout,
        seed=seed,
        n_celltypes=3,
        region_dirichlets=tuple((1.0,) * 3 for _ in range(4)),
    )
    ds, _ = generate(cfg)
    return ds


class TestSelectDegree:
    def test_singleton(self):
        ds = _flat_sample("linear", 1, seed=0)
        assert select_degree(ds, {3}, [0, 1]) == 3

    def test_max_rule_across_samples(self):
        # Sample 1 carries a linear pattern (prefers degree 1), sample 2 a
        # cubic one (prefers degree 3); the vote must be the maximum.
        lin = _flat_sample("linear", 1, seed=11)
        cub = _flat_sample("poly2", 3, seed=12)
        from svjoint.dataio import MultiSampleDataset
        from dataclasses import replace

        merged = MultiSampleDataset(
            samples=[lin.samples[0], replace(cub.samples[0], sample_id="s2")],
            gene_ids=lin.gene_ids,
        )
        got = select_degree(merged, {1, 3}, list(range(8)))
        single = select_degree(cub, {1, 3}, list(range(8)))
        assert single == 3
        assert got == 3

    def test_cubic_signal_prefers_three(self):
        # Polynomial2 spatial effect, strong signal, no dropout: degree 3
        # must win the AIC vote in at least 9 of 10 seeds.
        wins = 0
        for seed in range(10):
            ds = _flat_sample("poly2", 3, seed=100 + seed)
            if select_degree(ds, {1, 3}, list(range(10))) == 3:
                wins += 1
        assert wins >= 9

    def test_input_validation(self):
        ds = _flat_sample("linear", 1, seed=0)
        with pytest.raises(ValueError):
            select_degree(ds, set(), [0])
        with pytest.raises(ValueError):
            select_degree(ds, {5}, [0])
        with pytest.raises(ValueError):
            select_degree(ds, {1, 2}, [])

    def test_fallback_vote_on_total_failure(self, monkeypatch):
        ds = _flat_sample("linear", 1, seed=0)
        monkeypatch.setattr(splines, "zinb_mle", lambda *a, **k: None)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            got = select_degree(ds, {1, 2}, [0, 1])
        assert got == splines.DEFAULT_DEGREE
        assert any("votes for degree" in str(w.message) for w in caught)


class TestZinbMle:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        coords = rng.uniform(size=(40, 2))
        covs = rng.uniform(size=(40, 1))
        design = make_design(coords, covs, degree=2)
        lam = np.exp(1.0 + design.matrix[:, 1])
        y = rng.poisson(lam)
        y[rng.random(40) < 0.3] = 0
        params = np.concatenate([[0.2, math.log(8.0)], rng.normal(0, 0.3, design.dim)])
        is_zero = y == 0
        nll, grad = splines._zinb_nll_grad(params, y.astype(float), design.matrix, is_zero)
        eps = 1e-6
        for j in range(params.size):
            up = params.copy()
            up[j] += eps
            dn = params.copy()
            dn[j] -= eps
            fd = (
                splines._zinb_nll_grad(up, y.astype(float), design.matrix, is_zero)[0]
                - splines._zinb_nll_grad(dn, y.astype(float), design.matrix, is_zero)[0]
            ) / (2 * eps)
            assert grad[j] == pytest.approx(fd, rel=2e-4, abs=1e-5)

    def test_recovers_dispersion_scale(self):
        rng = np.random.default_rng(9)
        coords = rng.uniform(size=(400, 2))
        design = make_design(coords, np.zeros((400, 0)), degree=1)
        lam = np.exp(2.0 + 1.0 * design.matrix[:, 1])
        phi_true = 5.0
        y = rng.poisson(rng.gamma(phi_true, lam / phi_true))
        fit = zinb_mle(y, design)
        assert fit is not None
        logl, k = fit
        assert k == 2 + design.dim
        assert math.isfinite(logl)
