"""Tests for grids, fields, and the spectral operator layer.

The bilinear term is checked against a dense O(N^4) convolution reference,
so the collocation product and the 2/3 mask carry their own oracle.
"""

import numpy as np
import pytest

from nsqp.spectral import (
    FourierField,
    NoiseOperator,
    bilinear_B,
    dense_advect_reference,
    field_from_mode_pairs,
    field_to_scalars,
    hermitian_part,
    inner_h,
    leray_project,
    load_field,
    make_grid,
    make_noise,
    q_apply,
    random_field,
    reflect_modes,
    save_field,
    stokes_apply,
    trilinear_b,
)


class TestSpectralGrid:
    def test_lowest_eigenvalue_2pi_box(self):
        """L = 2 pi makes the lowest Stokes eigenvalue exactly 1."""
        grid = make_grid(2.0 * np.pi, 8)
        assert grid.lam_1 == pytest.approx(1.0, rel=1e-14)
        assert grid.lam[grid.active_mask].min() == pytest.approx(1.0, rel=1e-14)

    def test_lowest_eigenvalue_unit_box(self):
        grid = make_grid(1.0, 8)
        assert grid.lam_1 == pytest.approx(4.0 * np.pi**2, rel=1e-14)

    def test_validation(self):
        with pytest.raises(ValueError, match="even integer"):
            make_grid(1.0, 7)
        with pytest.raises(ValueError, match="even integer"):
            make_grid(1.0, 2)
        with pytest.raises(ValueError, match="positive"):
            make_grid(-1.0, 8)

    def test_dealias_mask_is_strict_two_thirds(self):
        # products of retained modes must not alias back into the mask
        for N in (8, 12, 16, 32):
            grid = make_grid(2.0 * np.pi, N)
            kcut = grid.kcut
            assert 3 * kcut <= N - 1
            assert grid.dealias_mask[kcut, 0]
            assert not grid.dealias_mask[kcut + 1, 0]

    def test_masks_symmetric_and_zero_mode_excluded(self):
        grid = make_grid(2.0 * np.pi, 16)
        assert not grid.active_mask[0, 0]
        assert np.array_equal(
            grid.active_mask, reflect_modes(grid.active_mask.astype(int)).astype(bool)
        )
        # eigenvalues strictly positive on the retained set
        assert grid.lam[grid.active_mask].min() > 0.0

    def test_half_indices_partition_active_pairs(self):
        grid = make_grid(2.0 * np.pi, 16)
        ih, im, e_half = grid.half_indices()
        assert len(ih) * 2 == int(grid.active_mask.sum())
        assert not np.intersect1d(ih, im).size
        assert np.allclose(np.sum(e_half**2, axis=0), 1.0)


class TestFourierField:
    def test_hermitian_enforced_on_construction(self, grid8, rng):
        g = rng.standard_normal((grid8.N, grid8.N)) + 1j * rng.standard_normal(
            (grid8.N, grid8.N)
        )
        coeffs = g * grid8.ehat  # not Hermitian, but divergence-free
        u = FourierField(grid8, coeffs)
        c = u.coeffs
        assert np.allclose(c, np.conj(reflect_modes(c)), atol=1e-14)
        assert np.all(c[:, 0, 0] == 0.0)

    def test_divergence_rejected(self, grid8):
        coeffs = np.zeros((2, 8, 8), dtype=np.complex128)
        coeffs[:, 1, 0] = [1.0, 0.0]  # parallel to k = (1, 0)
        with pytest.raises(ValueError, match="divergence"):
            FourierField(grid8, coeffs)

    def test_random_field_invariants(self, grid16, rng):
        u = random_field(grid16, rng, amplitude=0.7)
        assert u.norm_h() == pytest.approx(0.7, rel=1e-12)
        c = u.coeffs
        assert np.allclose(c, np.conj(reflect_modes(c)), atol=1e-15)
        kdot = grid16.kx * c[0] + grid16.ky * c[1]
        assert np.max(np.abs(kdot)) <= 1e-12 * u.norm_h()
        assert np.all(c[~np.broadcast_to(grid16.dealias_mask, c.shape)] == 0.0)

    def test_parseval(self, grid16, rng):
        """|u|_H^2 equals the grid average of |u(x)|^2."""
        u = random_field(grid16, rng)
        up = u.to_physical()
        phys = float(np.mean(up[0] ** 2 + up[1] ** 2))
        assert phys == pytest.approx(u.norm_h() ** 2, rel=1e-12)

    def test_poincare(self, grid16, rng):
        u = random_field(grid16, rng)
        assert u.norm_v() ** 2 >= grid16.lam_1 * u.norm_h() ** 2 * (1.0 - 1e-12)

    def test_norm_frac_matches_stokes_apply(self, grid16, rng):
        u = random_field(grid16, rng)
        assert u.norm_frac(1.0) == pytest.approx(u.norm_v(), rel=1e-12)
        assert stokes_apply(u, 0.5).norm_h() == pytest.approx(u.norm_v(), rel=1e-12)
        # negative powers stay finite with the zero mode excluded
        assert np.isfinite(u.norm_frac(-1.0))

    def test_mode_pair_builder(self, grid16):
        phi = field_from_mode_pairs(grid16, [(1, 0), (2, 1)], [0.3, 0.4])
        assert phi.norm_h() == pytest.approx(0.5, rel=1e-12)
        # lowest pair alone has |u|_V^2 = lam_1 |u|_H^2
        lo = field_from_mode_pairs(grid16, [(1, 0)], [0.3])
        assert lo.norm_v() ** 2 == pytest.approx(grid16.lam_1 * 0.09, rel=1e-12)
        with pytest.raises(ValueError, match="outside the dealiased set"):
            field_from_mode_pairs(grid16, [(7, 0)], [1.0])

    def test_scalar_roundtrip(self, grid16, rng):
        u = random_field(grid16, rng)
        a = field_to_scalars(grid16, u.coeffs)
        v = FourierField.from_scalars(grid16, a)
        assert np.allclose(v.coeffs, u.coeffs, atol=1e-15)
        assert np.sum(np.abs(a) ** 2) == pytest.approx(u.norm_h() ** 2, rel=1e-12)


class TestLeray:
    def test_kills_gradient_fields(self, grid8, rng):
        g = rng.standard_normal((grid8.N, grid8.N)) + 1j * rng.standard_normal(
            (grid8.N, grid8.N)
        )
        g = hermitian_part(g) * grid8.active_mask
        coeffs = np.stack([grid8.kx * g, grid8.ky * g]).astype(np.complex128)
        u = FourierField._wrap(grid8, coeffs)
        assert leray_project(u).norm_h() <= 1e-13 * np.abs(coeffs).max()

    def test_single_mode_examples(self, grid8):
        # transverse mode is untouched
        c = np.zeros((2, 8, 8), dtype=np.complex128)
        c[1, 1, 0] = 1.0  # k = (1, 0), u along y
        out = leray_project(FourierField._wrap(grid8, c))
        assert np.allclose(out.coeffs, c, atol=1e-16)
        # longitudinal mode is annihilated
        c2 = np.zeros((2, 8, 8), dtype=np.complex128)
        c2[0, 1, 0] = 1.0  # k = (1, 0), u along x
        out2 = leray_project(FourierField._wrap(grid8, c2))
        assert np.abs(out2.coeffs).max() == 0.0

    def test_idempotent_and_self_adjoint(self, grid8, rng):
        g1 = rng.standard_normal((2, 8, 8)) + 1j * rng.standard_normal((2, 8, 8))
        g2 = rng.standard_normal((2, 8, 8)) + 1j * rng.standard_normal((2, 8, 8))
        g1, g2 = hermitian_part(g1), hermitian_part(g2)
        u = FourierField._wrap(grid8, g1)
        v = FourierField._wrap(grid8, g2)
        pu, pv = leray_project(u), leray_project(v)
        scale = u.norm_h() * v.norm_h()
        assert np.allclose(leray_project(pu).coeffs, pu.coeffs, atol=1e-15 * scale)
        assert abs(inner_h(pu, v) - inner_h(u, pv)) <= 1e-13 * scale


class TestStokes:
    def test_mode_scaling_example(self):
        grid = make_grid(2.0 * np.pi, 8)
        u = field_from_mode_pairs(grid, [(1, 1)], [1.0])
        out = stokes_apply(u, 1.0)
        assert np.allclose(out.coeffs, 2.0 * u.coeffs)

    def test_fractional_composition(self, grid16, rng):
        u = random_field(grid16, rng)
        a = stokes_apply(stokes_apply(u, 0.5), 0.5)
        b = stokes_apply(u, 1.0)
        assert np.allclose(a.coeffs, b.coeffs, rtol=1e-13, atol=1e-16)


class TestBilinear:
    def test_antisymmetry_in_last_two_slots(self, rng):
        """b(u, v, w) = -b(u, w, v) on dealiased fields."""
        for N in (8, 16):
            grid = make_grid(2.0 * np.pi, N)
            for _ in range(10):
                u = random_field(grid, rng)
                v = random_field(grid, rng)
                w = random_field(grid, rng)
                b1 = trilinear_b(u, v, w)
                b2 = trilinear_b(u, w, v)
                scale = max(abs(b1), abs(b2), 1e-30)
                assert abs(b1 + b2) <= 1e-10 * scale

    def test_energy_orthogonality(self, rng):
        """<B(u, v), v> = 0 on dealiased fields."""
        for N in (8, 16):
            grid = make_grid(2.0 * np.pi, N)
            for _ in range(10):
                u = random_field(grid, rng)
                v = random_field(grid, rng)
                bv = bilinear_B(u, v)
                scale = max(bv.norm_h() * v.norm_h(), 1e-30)
                assert abs(inner_h(bv, v)) <= 1e-10 * scale

    def test_enstrophy_orthogonality_periodic(self, rng):
        """b(u, u, Au) = 0, the periodic-only identity behind the V-norm
        formula for the quasipotential."""
        for N in (8, 16):
            grid = make_grid(2.0 * np.pi, N)
            for _ in range(10):
                u = random_field(grid, rng)
                au = stokes_apply(u)
                val = trilinear_b(u, u, au)
                scale = max(bilinear_B(u, u).norm_h() * au.norm_h(), 1e-30)
                assert abs(val) <= 1e-10 * scale

    def test_dealias_disabled_breaks_enstrophy_identity(self, rng):
        """Aliased products violate b(u, u, Au) = 0 by a finite margin."""
        grid = make_grid(2.0 * np.pi, 8)
        worst = 0.0
        for _ in range(10):
            # populate the full lattice so the product actually aliases
            g = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
            from nsqp.spectral import antihermitian_scalars

            a = antihermitian_scalars(grid, g) * grid.nonzero_mask
            u = FourierField.from_scalars(grid, a)
            au = stokes_apply(u)
            val = abs(trilinear_b(u, u, au, dealias=False))
            scale = max(
                bilinear_B(u, u, dealias=False).norm_h() * au.norm_h(), 1e-30
            )
            worst = max(worst, val / scale)
        assert worst > 1e-6

    def test_output_is_masked_divergence_free(self, grid16, rng):
        u = random_field(grid16, rng)
        v = random_field(grid16, rng)
        w = bilinear_B(u, v)
        c = w.coeffs
        kdot = np.abs(grid16.kx * c[0] + grid16.ky * c[1])
        assert kdot.max() <= 1e-12 * max(w.norm_h(), 1e-30)
        assert np.all(c[:, ~grid16.dealias_mask] == 0.0)
        assert np.all(c[:, 0, 0] == 0.0)

    def test_single_pair_field_is_nonlinearly_silent(self, grid8):
        """A one-pair field advects itself to zero; the one-mode truncation
        used in the exit tests is genuinely linear."""
        u = field_from_mode_pairs(grid8, [(1, 0)], [2.0])
        assert bilinear_B(u, u).norm_h() <= 1e-14

    def test_matches_dense_convolution_reference(self, grid8, rng):
        for _ in range(5):
            u = random_field(grid8, rng)
            v = random_field(grid8, rng)
            fast = bilinear_B(u, v)
            ref = dense_advect_reference(grid8, u, v)
            scale = max(ref.norm_h(), 1e-30)
            assert (fast - ref).norm_h() <= 1e-10 * scale


class TestNoiseOperator:
    def test_delta_zero_is_identity(self, grid16, rng):
        noise = make_noise(grid16, 0.0)
        u = random_field(grid16, rng)
        assert np.array_equal(q_apply(noise, u).coeffs, u.coeffs)
        assert np.array_equal(q_apply(noise, u, inverse=True).coeffs, u.coeffs)

    def test_lowest_mode_multiplier_example(self):
        grid = make_grid(2.0 * np.pi, 8)
        noise = make_noise(grid, 1.0, beta=2.0)
        assert noise.q[1, 0] == pytest.approx(0.5, rel=1e-15)

    def test_monotone_in_delta(self, grid16, rng):
        """|Q_sigma^-1 y| >= |Q_delta^-1 y| for sigma >= delta."""
        u = random_field(grid16, rng)
        norms = [
            q_apply(make_noise(grid16, d), u, inverse=True).norm_h()
            for d in (1.0, 0.1, 0.01, 0.0)
        ]
        assert all(a >= b - 1e-15 for a, b in zip(norms, norms[1:]))

    def test_roundtrip_multipliers(self, grid16, rng):
        noise = make_noise(grid16, 0.3, beta=2.0)
        assert np.all(noise.q == 1.0 / noise.q_inv)
        u = random_field(grid16, rng)
        back = q_apply(noise, q_apply(noise, u), inverse=True)
        assert np.allclose(back.coeffs, u.coeffs, rtol=1e-15, atol=0.0)

    def test_validation(self, grid16):
        with pytest.raises(ValueError, match="delta"):
            make_noise(grid16, -0.1)
        with pytest.raises(ValueError, match="beta"):
            make_noise(grid16, 0.1, beta=0.0)

    def test_trace_diagnostic(self, grid8):
        noise = make_noise(grid8, 0.5, beta=2.0)
        m = grid8.active_mask
        expect = float(np.sum(noise.q[m] ** 2 / grid8.lam[m]))
        assert noise.trace_diagnostic() == pytest.approx(expect, rel=1e-14)


class TestSerialization:
    def test_roundtrip(self, grid16, rng, tmp_path):
        u = random_field(grid16, rng)
        p = tmp_path / "field.nsqf"
        save_field(u, p)
        v = load_field(p)
        assert v.grid == grid16
        assert np.array_equal(v.coeffs, u.coeffs)

    def test_grid_mismatch_and_bad_magic(self, grid16, grid8, rng, tmp_path):
        u = random_field(grid16, rng)
        p = tmp_path / "field.nsqf"
        save_field(u, p)
        with pytest.raises(ValueError, match="does not match"):
            load_field(p, grid=grid8)
        with open(p, "r+b") as fh:
            fh.write(b"XXXX")
        with pytest.raises(ValueError, match="bad magic"):
            load_field(p)
