import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gapmrf.fingerprint import (AcquisitionParams, Dictionary, TissueParams, build_dictionary,
                                cached_dictionary, load_dictionary, parameter_grid,
                                random_flip_angle_schedule, save_dictionary,
                                simulate_fingerprint, simulate_fingerprints, unique_rows)

from oracles import bloch_fine_step


def const_schedule(L, alpha=90.0, tr=10.0, spoiled=False):
    return AcquisitionParams(np.full(L, alpha), np.full(L, tr), 18.0, 2.0, spoiled)


@pytest.mark.parametrize("spoiled", [False, True])
def test_recursion_matches_fine_step_integrator_90_degrees(spoiled):
    acq = const_schedule(10, spoiled=spoiled)
    ref = bloch_fine_step(811.0, 77.0, acq)
    got = simulate_fingerprint(TissueParams(811.0, 77.0), acq)
    assert np.linalg.norm(got - ref) <= 1e-6 * np.linalg.norm(ref)


@pytest.mark.parametrize("spoiled", [False, True])
def test_recursion_matches_fine_step_integrator_random_schedule(spoiled):
    base = random_flip_angle_schedule(12, seed=3)
    acq = AcquisitionParams(base.flip_angles, base.repetition_times, spoiled=spoiled)
    for t1, t2 in [(530.0, 77.0), (5012.0, 512.0), (300.0, 250.0)]:
        ref = bloch_fine_step(t1, t2, acq)
        got = simulate_fingerprints(t1, t2, acq)[0]
        assert np.linalg.norm(got - ref) <= 1e-6 * np.linalg.norm(ref)


def test_zero_flip_angles_give_zero_fingerprint():
    acq = const_schedule(8, alpha=0.0)
    assert np.all(simulate_fingerprint(TissueParams(800.0, 80.0), acq) == 0)


def test_dictionary_rejects_zero_norm_atom():
    acq = const_schedule(8, alpha=0.0)
    with pytest.raises(ValueError, match="zero-norm"):
        build_dictionary([TissueParams(800.0, 80.0)], acq)


def test_first_echo_value():
    # inversion, TI relaxation, 90 degree pulse, TE decay
    acq = const_schedule(1)
    t1, t2 = 811.0, 77.0
    mz = -np.exp(-18 / t1) + (1 - np.exp(-18 / t1))
    assert simulate_fingerprint(TissueParams(t1, t2), acq)[0] == pytest.approx(
        mz * np.exp(-2 / t2), rel=1e-14)


def test_spoiled_sequence_depends_on_t2_only_through_echo_decay():
    acq = AcquisitionParams(*(lambda a: (a.flip_angles, a.repetition_times))(
        random_flip_angle_schedule(40, 0)), spoiled=True)
    a = simulate_fingerprints(1000.0, 50.0, acq)[0]
    b = simulate_fingerprints(1000.0, 200.0, acq)[0]
    ratio = a / b
    assert np.allclose(ratio, ratio[0], rtol=1e-12)


def test_unspoiled_sequence_separates_t2():
    acq = random_flip_angle_schedule(300, 0)
    a = simulate_fingerprints(1545.0, 83.0, acq)[0]
    b = simulate_fingerprints(1545.0, 41.0, acq)[0]
    corr = abs(np.vdot(a, b)) / np.linalg.norm(a) / np.linalg.norm(b)
    assert corr < 0.99


def test_vectorised_matches_single():
    acq = random_flip_angle_schedule(30, 1)
    t1 = np.array([300.0, 900.0, 2500.0])
    t2 = np.array([40.0, 90.0, 300.0])
    batch = simulate_fingerprints(t1, t2, acq)
    for i in range(3):
        assert np.array_equal(batch[i], simulate_fingerprint(TissueParams(t1[i], t2[i]), acq))


def test_schedule_is_seeded():
    a = random_flip_angle_schedule(50, 7)
    b = random_flip_angle_schedule(50, 7)
    c = random_flip_angle_schedule(50, 8)
    assert np.array_equal(a.flip_angles, b.flip_angles)
    assert np.any(a.flip_angles != c.flip_angles)
    assert a.flip_angles.min() >= 10 and a.flip_angles.max() <= 70
    assert np.all(a.repetition_times == 10.0)
    assert (a.inversion_time, a.echo_time) == (18.0, 2.0)


@pytest.mark.parametrize("kwargs", [
    dict(flip_angles=[10, 20], repetition_times=[10]),
    dict(flip_angles=[-1], repetition_times=[10]),
    dict(flip_angles=[181], repetition_times=[10]),
    dict(flip_angles=[10], repetition_times=[0]),
    dict(flip_angles=[], repetition_times=[]),
])
def test_acquisition_validation(kwargs):
    with pytest.raises(ValueError):
        AcquisitionParams(**kwargs)


def test_tissue_params_validation():
    with pytest.raises(ValueError):
        TissueParams(50.0, 80.0)
    with pytest.raises(ValueError):
        TissueParams(-1.0, -2.0)


def test_parameter_grid_shape_and_order():
    g = parameter_grid()
    assert g.shape == (400, 2)
    assert g[0].tolist() == [100.0, 20.0]
    assert g[1].tolist() == [100.0, g[1, 1]] and g[1, 1] > 20
    assert g[-1].tolist() == [5100.0, 600.0]
    dense = parameter_grid(127, 127, log_t1=True)
    assert dense.shape == (16129, 2)
    assert np.allclose(np.diff(np.log(np.unique(dense[:, 0]))), np.log(51) / 126)


def test_build_dictionary_rejects_duplicates():
    acq = random_flip_angle_schedule(10, 0)
    with pytest.raises(ValueError, match="duplicate"):
        build_dictionary(np.array([[500.0, 50.0], [500.0, 50.0]]), acq)


def test_dictionary_roundtrip_and_cache(tmp_path):
    acq = random_flip_angle_schedule(20, 0)
    d = build_dictionary(parameter_grid(4, 3), acq)
    save_dictionary(d, tmp_path / "d.bin")
    e = load_dictionary(tmp_path / "d.bin")
    assert np.array_equal(d.params, e.params) and np.array_equal(d.atoms, e.atoms)

    path = tmp_path / "cache.bin"
    c1 = cached_dictionary(parameter_grid(4, 3), acq, path)
    c2 = cached_dictionary(parameter_grid(4, 3), acq, path)
    assert np.array_equal(c1.atoms, c2.atoms)
    other = random_flip_angle_schedule(20, 1)
    c3 = cached_dictionary(parameter_grid(4, 3), other, path)
    assert np.array_equal(c3.atoms, build_dictionary(parameter_grid(4, 3), other).atoms)


def test_real_correlation_matches_direct_product():
    acq = random_flip_angle_schedule(25, 2)
    d = build_dictionary(parameter_grid(5, 5), acq)
    rng = np.random.default_rng(0)
    m = rng.standard_normal((7, 25)) + 1j * rng.standard_normal((7, 25))
    assert np.allclose(d.real_correlation(m), (m @ d.atoms.conj().T).real, atol=1e-12)
    cplx = Dictionary(d.params, d.atoms * np.exp(0.3j))
    assert np.allclose(cplx.real_correlation(m), (m @ cplx.atoms.conj().T).real, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=20))
def test_unique_rows_keeps_first_occurrences(rows):
    out = unique_rows(np.array(rows, dtype=float))
    seen = []
    for r in rows:
        if r not in seen:
            seen.append(r)
    assert out.tolist() == [list(map(float, r)) for r in seen]
