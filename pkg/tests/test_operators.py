import numpy as np
import pytest

from gapmrf.operators import (SamplingScheme, add_noise, adjoint, forward, gradient,
                              load_measurements, make_epi_scheme, noise_sigma,
                              save_measurements)

from oracles import dense_forward


def random_coils(n, C, rng):
    return rng.standard_normal((n, C)) + 1j * rng.standard_normal((n, C))


def unit_coils(n, C, rng):
    return np.exp(2j * np.pi * rng.uniform(size=(n, C)))


def cnormal(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def energy(M, Y, scheme):
    return 0.5 * np.linalg.norm(Y - forward(M, scheme)) ** 2


@pytest.mark.parametrize("C", [1, 3])
def test_adjoint_identity(C):
    rng = np.random.default_rng(C)
    for trial in range(10):
        R = [1, 2, 4, 8, 16][trial % 5]
        coils = None if C == 1 else random_coils(256, C, rng)
        sch = make_epi_scheme((16, 16), R, 8, seed=trial, coil_maps=coils)
        M = cnormal(rng, 256, 8)
        Y = cnormal(rng, sch.n_samples, 8, sch.n_coils)
        lhs = np.vdot(Y, forward(M, sch))
        rhs = np.vdot(adjoint(Y, sch), M)
        assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(M) * np.linalg.norm(Y)


def test_forward_matches_dense_dft():
    rng = np.random.default_rng(0)
    sch = make_epi_scheme((8, 6), 2, 5, seed=1, coil_maps=random_coils(48, 2, rng))
    M = cnormal(rng, 48, 5)
    assert np.allclose(forward(M, sch), dense_forward(M, sch), atol=1e-12)


def test_full_sampling_round_trip():
    rng = np.random.default_rng(1)
    sch = make_epi_scheme((8, 8), 1, 4, seed=0)
    assert sch.n_samples == 64
    M = cnormal(rng, 64, 4)
    assert np.allclose(adjoint(forward(M, sch), sch), M, atol=1e-13)
    assert np.isclose(np.linalg.norm(forward(M, sch)), np.linalg.norm(M))


def test_zero_in_zero_out():
    sch = make_epi_scheme((8, 8), 4, 3, seed=0)
    assert np.all(forward(np.zeros((64, 3)), sch) == 0)
    assert np.all(adjoint(np.zeros((16, 3, 1)), sch) == 0)


def test_adjoint_of_single_kspace_point_is_fourier_mode():
    rows, cols = 4, 6
    rng = np.random.default_rng(2)
    coils = random_coils(rows * cols, 1, rng)
    mask = np.zeros((1, rows, cols), dtype=bool)
    mask[0, 1, 2] = True
    sch = SamplingScheme.from_masks(mask, coils)
    out = adjoint(np.ones((1, 1, 1)), sch)[:, 0]
    r, c = np.divmod(np.arange(rows * cols), cols)
    mode = np.exp(2j * np.pi * (1 * r / rows + 2 * c / cols)) / np.sqrt(rows * cols)
    assert np.allclose(out, coils[:, 0].conj() * mode, atol=1e-14)


def test_contraction_with_unit_magnitude_coils():
    rng = np.random.default_rng(3)
    for C in (1, 2):
        sch = make_epi_scheme((16, 16), 4, 6, seed=C, coil_maps=unit_coils(256, C, rng))
        M = cnormal(rng, 256, 6)
        # per coil the map is an isometry followed by a selection
        assert np.linalg.norm(forward(M, sch)) <= np.sqrt(C) * np.linalg.norm(M) + 1e-12
        if C == 1:
            assert np.linalg.norm(forward(M, sch)) <= np.linalg.norm(M)


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(4)
    for trial in range(3):
        sch = make_epi_scheme((8, 8), 2, 4, seed=trial,
                              coil_maps=None if trial == 0 else random_coils(64, 2, rng))
        M = cnormal(rng, 64, 4)
        Y = cnormal(rng, sch.n_samples, 4, sch.n_coils)
        g = gradient(M, Y, sch)
        for _ in range(5):
            D = cnormal(rng, 64, 4)
            h = 1e-4
            fd = (energy(M + h * D, Y, sch) - energy(M - h * D, Y, sch)) / (2 * h)
            # E is quadratic, so the central difference is exact up to rounding;
            # with Wirtinger gradient g the directional derivative is Re<g, D>
            analytic = np.real(np.vdot(g, D))
            assert abs(fd - analytic) <= 1e-5 * abs(analytic)


def test_epi_scheme_geometry():
    sch = make_epi_scheme((64, 64), 16, 32, seed=5)
    assert sch.n_samples == 256
    masks = sch.frame_masks
    assert masks.shape == (32, 64, 64)
    # every frame selects complete rows
    assert np.all(masks.all(axis=2) == masks.any(axis=2))
    rows_per_frame = masks.any(axis=2)
    assert np.all(rows_per_frame.sum(axis=1) == 4)
    for start in range(32 - 16 + 1):
        union = rows_per_frame[start:start + 16].any(axis=0)
        assert union.all()
    assert sch.covers_all_rows()


def test_epi_scheme_is_seeded():
    a = make_epi_scheme((32, 32), 8, 20, seed=3)
    b = make_epi_scheme((32, 32), 8, 20, seed=3)
    assert np.array_equal(a.indices, b.indices)
    differs = [not np.array_equal(a.indices, make_epi_scheme((32, 32), 8, 20, seed=s).indices)
               for s in range(4, 10)]
    assert any(differs)


@pytest.mark.parametrize("R", [0, 32, 3])
def test_epi_scheme_rejects_bad_undersampling(R):
    with pytest.raises(ValueError):
        make_epi_scheme((16, 16), R, 4, seed=0)


def test_scheme_validation():
    with pytest.raises(ValueError):
        SamplingScheme((4, 4), [[0, 0]], np.ones((16, 1)))
    with pytest.raises(ValueError):
        SamplingScheme((4, 4), [[16]], np.ones((16, 1)))
    with pytest.raises(ValueError):
        SamplingScheme((4, 4), [[1]], np.ones((15, 1)))
    masks = np.zeros((2, 4, 4), dtype=bool)
    masks[0, 0, :2] = True
    masks[1, 0, :3] = True
    with pytest.raises(ValueError):
        SamplingScheme.from_masks(masks)


def test_dimension_mismatch_rejected():
    sch = make_epi_scheme((8, 8), 2, 3, seed=0)
    with pytest.raises(ValueError):
        forward(np.zeros((63, 3)), sch)
    with pytest.raises(ValueError):
        adjoint(np.zeros((32, 2, 1)), sch)


def test_noise_sigma_formula():
    assert noise_sigma(np.ones((1, 1, 1)), 0.0) == pytest.approx(1.0)
    Y, s = add_noise(np.ones((1, 1, 1)), np.inf, 0)
    assert s == 0.0 and np.all(Y == 1)


def test_noise_level_monte_carlo():
    rng = np.random.default_rng(0)
    Y = cnormal(rng, 200, 50, 2)
    noisy, sigma = add_noise(Y, 30.0, seed=11)
    eta = noisy - Y
    sigma_hat = np.sqrt(np.mean(np.abs(eta - eta.mean()) ** 2))
    isnr = 20 * np.log10(np.linalg.norm(Y) / (np.sqrt(Y.size) * sigma_hat))
    assert abs(isnr - 30.0) <= 0.2
    # circular: real and imaginary parts carry equal power
    assert np.std(eta.real) == pytest.approx(sigma / np.sqrt(2), rel=0.02)
    assert np.std(eta.imag) == pytest.approx(sigma / np.sqrt(2), rel=0.02)
    again, _ = add_noise(Y, 30.0, seed=11)
    assert np.array_equal(noisy, again)


def test_add_noise_rejects_non_finite():
    with pytest.raises(ValueError):
        add_noise(np.array([[[np.nan]]]), 30.0, 0)


def test_measurement_file_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    Y = cnormal(rng, 7, 3, 2)
    save_measurements(Y, tmp_path / "y.bin")
    assert np.array_equal(load_measurements(tmp_path / "y.bin"), Y)
    raw = (tmp_path / "y.bin").read_bytes()
    assert raw[:8] == b"GMRFMEAS"
    assert len(raw) == 8 + 24 + Y.size * 16
