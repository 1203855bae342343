import math

import numpy as np
import pytest
from scipy import stats

from photonvae.detector import (
    MAX_RECORDED_CLICKS,
    DetectorConfig,
    apply_click_model,
    apply_efficiency,
    chain_mean,
    click_coefficients,
    enumerate_click_row,
    observed_chain,
)
from photonvae.distributions import (
    PhotonPMF,
    PhysicsError,
    SourceKind,
    SourceSpec,
    coherent_pmf,
    pmf_mean,
    source_pmf,
    thermal_pmf,
)


# --- click coefficients -------------------------------------------------------


@pytest.mark.parametrize("n_detectors", [1, 2, 3, 4])
def test_click_coefficients_match_enumeration(n_detectors):
    coeffs = click_coefficients(n_detectors, 8)
    for j in range(9):
        np.testing.assert_allclose(
            coeffs.table[:, j], enumerate_click_row(n_detectors, j), atol=1e-12
        )


@pytest.mark.parametrize("n_detectors", [1, 2, 3, 4, 5, 6])
def test_click_coefficients_closure(n_detectors):
    coeffs = click_coefficients(n_detectors, 12)
    sums = coeffs.table.sum(axis=0)
    np.testing.assert_allclose(sums, np.ones(13), atol=1e-12)


@pytest.mark.parametrize("n_detectors", [2, 3, 4, 5, 6])
def test_click_coefficients_no_collision_diagonal(n_detectors):
    coeffs = click_coefficients(n_detectors, n_detectors)
    for j in range(1, n_detectors + 1):
        falling = math.prod(range(n_detectors, n_detectors - j, -1))
        assert coeffs[j, j] == pytest.approx(falling / n_detectors**j, abs=1e-12)


def test_click_coefficients_known_values():
    for n_detectors in (1, 2, 4, 6):
        assert click_coefficients(n_detectors, 2)[1, 1] == 1.0
    two = click_coefficients(2, 4)
    assert two[1, 2] == pytest.approx(0.5, abs=1e-15)
    assert two[2, 2] == pytest.approx(0.5, abs=1e-15)
    four = click_coefficients(4, 4)
    assert four[1, 2] == pytest.approx(0.25, abs=1e-15)
    assert four[2, 2] == pytest.approx(0.75, abs=1e-15)


def test_click_coefficients_structural_zeros():
    coeffs = click_coefficients(3, 6)
    assert coeffs[0, 0] == 1.0
    for j in range(1, 7):
        assert coeffs[0, j] == 0.0
    for n in range(1, 4):
        for j in range(n):
            assert coeffs[n, j] == 0.0


# --- efficiency thinning ---------------------------------------------------------


def test_efficiency_identity():
    pmf = thermal_pmf(0.9, 25)
    np.testing.assert_array_equal(apply_efficiency(pmf, 1.0).probs, pmf.probs)


def test_efficiency_single_photon_bernoulli():
    pmf = PhotonPMF(np.array([0.0, 1.0]))
    np.testing.assert_allclose(apply_efficiency(pmf, 0.5).probs, [0.5, 0.5], atol=1e-15)


def test_poisson_thinning_identity():
    thinned = apply_efficiency(coherent_pmf(2.0, 40), 0.3)
    expected = stats.poisson.pmf(np.arange(16), 0.6)
    np.testing.assert_allclose(thinned.probs[:16], expected, atol=1e-9)


@pytest.mark.parametrize("eta", [0.1, 0.45, 0.9])
def test_thinning_scales_mean(eta):
    for pmf in (coherent_pmf(1.9, 40), thermal_pmf(1.3, 60), source_pmf(SourceSpec(SourceKind.SPATS, 0.45))):
        assert pmf_mean(apply_efficiency(pmf, eta)) == pytest.approx(eta * pmf_mean(pmf), abs=1e-9)


@pytest.mark.parametrize("eta", [0.0, -0.2, 1.0001])
def test_efficiency_range_rejected(eta):
    with pytest.raises(PhysicsError):
        apply_efficiency(coherent_pmf(1.0, 20), eta)


# --- click collapse ----------------------------------------------------------------


def test_click_model_vacuum_passthrough():
    pmf = PhotonPMF(np.array([1.0] + [0.0] * 10))
    out = apply_click_model(pmf, 4)
    assert out.probs[0] == 1.0
    assert out.probs[1:].sum() == 0.0


def test_click_model_single_photon():
    pmf = PhotonPMF(np.array([0.0, 1.0]))
    for n_detectors in (1, 2, 4, 7):
        out = apply_click_model(pmf, n_detectors)
        assert out.probs[1] == 1.0


def test_click_model_two_photons_two_detectors():
    pmf = PhotonPMF(np.array([0.0, 0.0, 1.0]))
    out = apply_click_model(pmf, 2)
    np.testing.assert_allclose(out.probs[:3], [0.0, 0.5, 0.5], atol=1e-15)


def test_click_model_pads_to_recorded_range():
    out = apply_click_model(PhotonPMF(np.array([0.0, 1.0])), 2)
    assert out.n_max == MAX_RECORDED_CLICKS
    assert out.probs[2:].sum() == 0.0


def test_click_model_support_bounded_by_detectors():
    pmf = coherent_pmf(3.0, 25)
    out = apply_click_model(pmf, 4)
    assert out.probs[5:].sum() == 0.0
    assert out.probs.sum() == pytest.approx(pmf.probs.sum(), abs=1e-12)


# --- full chain ------------------------------------------------------------------


def test_chain_lossless_single_photon():
    out = observed_chain(PhotonPMF(np.array([0.0, 1.0])), DetectorConfig(4, 1.0))
    assert out.probs[1] == 1.0


def test_chain_mean_below_thinned_mean():
    pmf = coherent_pmf(1.9, 40)
    observed = chain_mean(pmf, DetectorConfig(4, 0.6))
    assert observed < 0.6 * 1.9


def test_chain_normalization():
    pmf = thermal_pmf(1.3, 60)
    out = observed_chain(pmf, DetectorConfig(4, 0.9))
    assert 1 - 1e-6 <= out.probs[:5].sum() <= 1 + 1e-12


def test_composition_order_matters():
    pmf = coherent_pmf(2.5, 40)
    eff_then_click = apply_click_model(apply_efficiency(pmf, 0.5), 3)
    click_then_eff = apply_efficiency(apply_click_model(pmf, 3), 0.5)
    assert not np.allclose(
        eff_then_click.probs[:4], click_then_eff.probs[:4], atol=1e-6
    )


def test_saturation_with_four_detectors():
    cfg = DetectorConfig(4, 1.0)
    means = [
        chain_mean(source_pmf(SourceSpec(SourceKind.COHERENT, value)), cfg)
        for value in (0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0)
    ]
    assert all(b >= a for a, b in zip(means, means[1:]))
    assert means[-1] > 3.9
    assert all(m <= 4.0 for m in means)


def test_detector_config_validation():
    with pytest.raises(PhysicsError):
        DetectorConfig(0, 0.5)
    with pytest.raises(PhysicsError):
        DetectorConfig(4, 0.0)
    with pytest.raises(PhysicsError):
        DetectorConfig(4, 1.1)
    with pytest.raises(PhysicsError):
        DetectorConfig(4, 0.9, equal_split=False)
