"""Tests for the finite-width simulator: sampling, FIM builders, spectra."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isospec.meanfield import HardTanh, Linear
from isospec.rmtsim import (
    OrthogonalNet,
    dual_fim_dense,
    dual_fim_recursive,
    eig_sym,
    empirical_measure,
    forward_trace,
    freeness_probe,
    model_fim_sample,
    normalized_input,
    ntk_block_matrix,
    sample_haar_orthogonal,
)


class TestSampleHaarOrthogonal:
    def test_orthogonality(self):
        q = sample_haar_orthogonal(32, np.random.default_rng(0))
        assert np.abs(q.T @ q - np.eye(32)).max() < 1e-10

    def test_unit_determinant_magnitude(self):
        q = sample_haar_orthogonal(16, np.random.default_rng(1))
        assert abs(abs(np.linalg.det(q)) - 1.0) < 1e-10

    def test_entry_mean_is_centered(self):
        # with the sign fix the first entry has mean 0 and variance 1/M
        rng = np.random.default_rng(7)
        vals = [sample_haar_orthogonal(16, rng)[0, 0] for _ in range(2000)]
        assert abs(np.mean(vals)) < 3.0 / math.sqrt(2000 * 16)

    def test_seeded_draw_is_deterministic(self):
        qa = sample_haar_orthogonal(8, np.random.default_rng(5))
        qb = sample_haar_orthogonal(8, np.random.default_rng(5))
        np.testing.assert_array_equal(qa, qb)

    def test_rejects_tiny_width(self):
        with pytest.raises(ValueError):
            sample_haar_orthogonal(1, np.random.default_rng(0))


class TestNormalizedInput:
    @settings(max_examples=20, deadline=None)
    @given(
        q_hat=st.floats(min_value=0.1, max_value=10.0),
        M=st.integers(min_value=4, max_value=64),
        seed=st.integers(min_value=0, max_value=2**31),
    )
    def test_norm_is_exact(self, q_hat, M, seed):
        x = normalized_input(M, np.random.default_rng(seed), q_hat)
        assert float(x @ x) / M == pytest.approx(q_hat, rel=1e-12)

    def test_rejects_nonpositive_q_hat(self):
        with pytest.raises(ValueError):
            normalized_input(8, np.random.default_rng(0), 0.0)


class TestOrthogonalNet:
    def test_sample_scales_orthogonal_layers(self):
        net = OrthogonalNet.sample(16, 3, Linear(1.0), sigma=1.5, seed=2)
        assert net.sigma == (1.5, 1.5, 1.5)
        for w in net.weights:
            assert np.abs((w / 1.5).T @ (w / 1.5) - np.eye(16)).max() < 1e-10

    def test_sample_is_seed_deterministic(self):
        na = OrthogonalNet.sample(8, 2, Linear(1.0), seed=3)
        nb = OrthogonalNet.sample(8, 2, Linear(1.0), seed=3)
        for wa, wb in zip(na.weights, nb.weights):
            np.testing.assert_array_equal(wa, wb)

    def test_rejects_non_orthogonal_weights(self):
        with pytest.raises(ValueError):
            OrthogonalNet(4, 1, [np.ones((4, 4))], (1.0,), Linear(1.0))

    def test_rejects_shape_and_count_mismatches(self):
        w = sample_haar_orthogonal(4, np.random.default_rng(0))
        with pytest.raises(ValueError):
            OrthogonalNet(4, 2, [w], (1.0, 1.0), Linear(1.0))
        with pytest.raises(ValueError):
            OrthogonalNet(6, 1, [w], (1.0,), Linear(1.0))
        with pytest.raises(ValueError):
            OrthogonalNet(4, 1, [w], (-1.0,), Linear(1.0))

    def test_copy_is_independent(self):
        net = OrthogonalNet.sample(8, 2, Linear(1.0), seed=4)
        clone = net.copy()
        clone.weights[0][0, 0] += 1.0
        assert net.weights[0][0, 0] != clone.weights[0][0, 0]


class TestForwardTrace:
    def test_linear_preserves_moments(self):
        net = OrthogonalNet.sample(32, 4, Linear(1.0), seed=0)
        x = normalized_input(32, np.random.default_rng(0))
        tr = forward_trace(net, x)
        assert len(tr.x) == 5 and len(tr.h) == 4
        assert len(tr.deriv) == 3 and len(tr.q_hat) == 4
        np.testing.assert_allclose(tr.q_hat, 1.0, atol=1e-12)

    def test_unsaturated_hard_tanh_compounds_gain(self):
        # saturation at |h| ~ 900 is never reached, so the map is g-linear
        net = OrthogonalNet.sample(64, 3, HardTanh(s=1e-3, g=1.1), seed=1)
        x = normalized_input(64, np.random.default_rng(1))
        tr = forward_trace(net, x)
        assert tr.q_hat[1] == pytest.approx(1.1**2, rel=1e-9)
        assert tr.q_hat[2] == pytest.approx(1.1**4, rel=1e-9)

    def test_rejects_bad_inputs(self):
        net = OrthogonalNet.sample(8, 2, Linear(1.0), seed=0)
        with pytest.raises(ValueError):
            forward_trace(net, np.zeros(8))
        with pytest.raises(ValueError):
            forward_trace(net, np.ones(4))


class TestDualFim:
    def test_recursive_matches_dense(self):
        net = OrthogonalNet.sample(8, 3, HardTanh(s=1.0, g=1.0), seed=6)
        x = normalized_input(8, np.random.default_rng(6))
        h_dense, _ = dual_fim_dense(net, x)
        h_rec = dual_fim_recursive(net, forward_trace(net, x))
        assert np.abs(h_dense - h_rec).max() < 1e-8

    def test_conditional_fim_duality(self):
        # J J^T / M and J^T J / M share the nonzero spectrum; the dense
        # form carries exactly L M^2 - M extra zeros
        M, L = 8, 3
        net = OrthogonalNet.sample(M, L, HardTanh(s=1.0, g=1.0), seed=7)
        x = normalized_input(M, np.random.default_rng(7))
        h, cond = dual_fim_dense(net, x)
        h_eigs = np.sort(np.linalg.eigvalsh(h))
        cond_eigs = np.sort(np.linalg.eigvalsh(cond / M))
        assert np.count_nonzero(np.abs(cond_eigs) < 1e-8) == L * M * M - M
        np.testing.assert_allclose(cond_eigs[-M:], h_eigs, atol=1e-6)

    @pytest.mark.parametrize("depth", [1, 2, 8])
    def test_linear_unit_scales_give_depth_identity(self, depth):
        net = OrthogonalNet.sample(16, depth, Linear(1.0), seed=8)
        x = normalized_input(16, np.random.default_rng(8))
        h = dual_fim_recursive(net, forward_trace(net, x))
        assert np.abs(np.linalg.eigvalsh(h) - depth).max() < 1e-9

    def test_fim_is_positive_semidefinite(self):
        net = OrthogonalNet.sample(24, 4, HardTanh(s=0.5, g=1.3), seed=9)
        x = normalized_input(24, np.random.default_rng(9))
        h = dual_fim_recursive(net, forward_trace(net, x))
        assert np.linalg.eigvalsh(h)[0] > -1e-10

    def test_rejects_mismatched_trace(self):
        net2 = OrthogonalNet.sample(8, 2, Linear(1.0), seed=0)
        net3 = OrthogonalNet.sample(8, 3, Linear(1.0), seed=0)
        tr = forward_trace(net2, normalized_input(8, np.random.default_rng(0)))
        with pytest.raises(ValueError):
            dual_fim_recursive(net3, tr)

    def test_dense_size_guards(self):
        big = OrthogonalNet.sample(32, 2, Linear(1.0), seed=0)
        with pytest.raises(ValueError):
            dual_fim_dense(big, normalized_input(32, np.random.default_rng(0)))
        deep = OrthogonalNet.sample(8, 5, Linear(1.0), seed=0)
        with pytest.raises(ValueError):
            dual_fim_dense(deep, normalized_input(8, np.random.default_rng(0)))


class TestNtkBlockMatrix:
    def test_single_sample_is_scaled_fim(self):
        net = OrthogonalNet.sample(12, 3, HardTanh(s=1.0, g=1.0), seed=10)
        x = normalized_input(12, np.random.default_rng(10))
        theta = ntk_block_matrix(net, [x])
        h = dual_fim_recursive(net, forward_trace(net, x))
        assert np.abs(theta - 12 * h).max() < 1e-8

    def test_trace_identity(self):
        net = OrthogonalNet.sample(16, 3, HardTanh(s=1.0, g=1.0), seed=11)
        rng = np.random.default_rng(11)
        inputs = [normalized_input(16, rng) for _ in range(3)]
        theta = ntk_block_matrix(net, inputs)
        # both sides in normalized trace: tr(A) / dim(A)
        lhs = np.trace(theta / 16) / (3 * 16)
        rhs = sum(
            np.trace(dual_fim_recursive(net, forward_trace(net, x))) / 16
            for x in inputs
        ) / 9.0
        assert lhs == pytest.approx(rhs, abs=1e-8)

    def test_symmetric_and_psd(self):
        net = OrthogonalNet.sample(8, 2, HardTanh(s=1.0, g=1.0), seed=12)
        rng = np.random.default_rng(12)
        theta = ntk_block_matrix(net, [normalized_input(8, rng) for _ in range(4)])
        assert np.abs(theta - theta.T).max() < 1e-12
        assert np.linalg.eigvalsh(theta)[0] > -1e-8

    def test_guards(self):
        net = OrthogonalNet.sample(64, 2, Linear(1.0), seed=0)
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            ntk_block_matrix(net, [])
        with pytest.raises(ValueError):
            ntk_block_matrix(net, [normalized_input(64, rng) for _ in range(65)])


class TestEigSym:
    def test_identity_spectrum(self):
        rep = eig_sym(np.eye(12))
        np.testing.assert_allclose(rep.eigenvalues, 1.0)
        assert rep.max == 1.0 and rep.mean == 1.0
        assert rep.atom_mass_near_max == 1.0
        # degenerate spectrum collapses to a single histogram bin
        assert list(rep.histogram[1]) == [12]

    def test_diagonal_spectrum_statistics(self):
        rep = eig_sym(np.diag(np.arange(1.0, 11.0)))
        assert rep.max == pytest.approx(10.0)
        assert rep.mean == pytest.approx(5.5)
        assert rep.eigenvalues[0] <= rep.eigenvalues[-1]

    def test_matches_direct_solver(self):
        rng = np.random.default_rng(13)
        a = rng.standard_normal((20, 20))
        sym = (a + a.T) / 2.0
        rep = eig_sym(sym, bin_count=32)
        np.testing.assert_allclose(rep.eigenvalues, np.linalg.eigvalsh(sym), atol=1e-12)
        assert len(rep.histogram[1]) == 32

    def test_atom_mass_counts_top_cluster(self):
        rep = eig_sym(np.diag([0.2, 0.5, 1.0, 1.0, 1.0]))
        assert rep.atom_mass_near_max == pytest.approx(0.6)

    def test_rejects_bad_matrices(self):
        with pytest.raises(ValueError):
            eig_sym(np.array([[0.0, 1.0], [0.0, 0.0]]))
        with pytest.raises(ValueError):
            eig_sym(np.zeros((2, 3)))


class TestEmpiricalMeasure:
    def test_atom_isolation(self):
        rep = eig_sym(np.diag([0.53, 0.81, 1.07, 1.33, 2.0, 2.0, 2.0, 2.0]))
        mu = empirical_measure(rep, 0.25, atom_window=0.01)
        assert mu.atoms == ((2.0, 0.5),)
        assert mu.density.mass() == pytest.approx(0.5, abs=1e-9)

    def test_bin_edges_align_to_width(self):
        rep = eig_sym(np.diag([0.53, 0.81, 1.07, 1.33, 2.0, 2.0, 2.0, 2.0]))
        mu = empirical_measure(rep, 0.25, atom_window=0.01)
        assert mu.density.left / 0.25 == pytest.approx(round(mu.density.left / 0.25))
        assert mu.density.right / 0.25 == pytest.approx(round(mu.density.right / 0.25))

    def test_fully_degenerate_becomes_one_atom(self):
        mu = empirical_measure(eig_sym(np.eye(6)), 0.1, atom_window=0.01)
        assert mu.atoms == ((1.0, 1.0),)
        assert mu.density is None

    def test_density_only_mass_is_one(self):
        rng = np.random.default_rng(14)
        a = rng.standard_normal((30, 30))
        mu = empirical_measure(eig_sym((a + a.T) / 2.0), 0.5)
        assert mu.atoms == ()
        assert mu.density.mass() == pytest.approx(1.0, abs=1e-9)

    def test_rejects_nonpositive_bin_width(self):
        with pytest.raises(ValueError):
            empirical_measure(eig_sym(np.eye(4)), 0.0)


class TestModelFimSample:
    def test_linear_model_is_depth_identity(self):
        rng = np.random.default_rng(4)
        h = model_fim_sample(64, [1.0] * 3, [1.0] * 3, [1.0] * 2, [1.0] * 2, rng)
        assert np.abs(np.linalg.eigvalsh(h) - 3.0).max() < 1e-10

    def test_trace_tracks_mean_recursion(self):
        # E[tr H / M] = 1 + a + a^2 for constant alpha = a, unit scales
        rng = np.random.default_rng(3)
        h = model_fim_sample(400, [1.0] * 3, [1.0] * 3, [0.75] * 2, [1.0] * 2, rng)
        assert np.trace(h) / 400 == pytest.approx(2.3125, abs=0.05)
        assert np.linalg.eigvalsh(h)[0] > -1e-10

    def test_rejects_mismatched_lengths(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            model_fim_sample(16, [1.0] * 3, [1.0] * 2, [0.5] * 2, [1.0] * 2, rng)
        with pytest.raises(ValueError):
            model_fim_sample(16, [1.0] * 3, [1.0] * 3, [0.5] * 1, [1.0] * 2, rng)


class TestFreenessProbe:
    def test_alternating_moments_shrink_with_width(self):
        rng = np.random.default_rng(11)
        p32 = freeness_probe(32, 30, rng)
        p256 = freeness_probe(256, 30, rng)
        assert len(p32.moments) == 30
        assert p256.median_abs < p32.median_abs

    def test_guards(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            freeness_probe(16, 10, rng)
        with pytest.raises(ValueError):
            freeness_probe(32, 0, rng)
