import numpy as np
import pytest

from photonvae.detector import DetectorConfig, observed_chain
from photonvae.distributions import (
    PhotonPMF,
    PhysicsError,
    SourceKind,
    SourceSpec,
    pmf_mean,
    source_pmf,
)
from photonvae.sampling import (
    BinnedObservation,
    DatasetMeta,
    bin_statistics,
    derive_bin_rng,
    feature_matrix,
    generate_bins,
    generate_dataset,
    label_vector,
    load_dataset_csv,
    meta_from_dict,
    meta_to_dict,
    observed_click_pmf,
    sample_counts,
    split_rows,
    write_dataset_csv,
    write_dataset_meta,
)

LOSSLESS = DetectorConfig(6, 1.0)


def small_meta(bin_size=10, bins_per_class=40, seed=7, detector=LOSSLESS):
    return DatasetMeta(
        sources=(
            ("spacs", SourceSpec(SourceKind.SPACS, 1.3)),
            ("spats", SourceSpec(SourceKind.SPATS, 1.3)),
        ),
        detector=detector,
        bin_size=bin_size,
        bins_per_class=bins_per_class,
        seed=seed,
    )


# --- sampling --------------------------------------------------------------


def test_sample_counts_degenerate():
    rng = np.random.default_rng(0)
    zeros = sample_counts(PhotonPMF(np.array([1.0, 0.0])), 100, rng)
    assert np.all(zeros == 0)
    ones = sample_counts(PhotonPMF(np.array([0.0, 1.0])), 100, rng)
    assert np.all(ones == 1)


def test_sample_counts_concentration():
    rng = np.random.default_rng(11)
    draws = sample_counts(PhotonPMF(np.array([0.5, 0.5])), 10**6, rng)
    # 4 sigma binomial bound
    assert abs(draws.mean() - 0.5) < 0.002


def test_sample_counts_residual_tail_goes_to_n_max():
    class TopDraw:
        def random(self, count):
            return np.full(count, 1.0 - 1e-9)

    pmf = PhotonPMF(np.array([0.6, 0.4 - 5e-7]))  # tail 5e-7 unassigned
    counts = sample_counts(pmf, 8, TopDraw())
    assert np.all(counts == 1)


def test_empirical_matches_chain_probabilities():
    observed = observed_chain(source_pmf(SourceSpec(SourceKind.SPATS, 0.45)), DetectorConfig(4, 0.9))
    rng = np.random.default_rng(3)
    n = 10**6
    draws = sample_counts(observed, n, rng)
    empirical = np.bincount(draws, minlength=observed.n_max + 1) / n
    for k, p in enumerate(observed.probs):
        sigma = np.sqrt(max(p * (1 - p), 1e-12) / n)
        assert abs(empirical[k] - p) <= 5 * sigma + 1e-9


# --- binning ----------------------------------------------------------------


def test_bin_statistics_direct_count():
    rows = bin_statistics([0, 0, 1, 1], 4, "lab")
    assert len(rows) == 1
    assert rows[0].p_obs[:2] == (0.5, 0.5)
    assert rows[0].nbar_obs == 0.5
    assert rows[0].label == "lab"


def test_bin_statistics_constant_counts():
    rows = bin_statistics([2] * 200, 200, "x")
    assert rows[0].p_obs[2] == 1.0
    assert rows[0].nbar_obs == 2.0


def test_bin_statistics_drops_trailing_remainder():
    rows = bin_statistics([0, 1, 2, 3, 4], 2, "x")
    assert len(rows) == 2


def test_bin_statistics_rejects_out_of_range():
    with pytest.raises(PhysicsError):
        bin_statistics([0, 7], 2, "x")
    with pytest.raises(PhysicsError):
        bin_statistics([-1, 0], 2, "x")


def test_bin_fractions_are_multiples_of_inverse_bin_size():
    rng = np.random.default_rng(5)
    counts = rng.integers(0, 5, size=600)
    for row in bin_statistics(counts, 200, "x"):
        for p in row.p_obs:
            assert p * 200 == pytest.approx(round(p * 200), abs=1e-9)
        assert row.nbar_obs == pytest.approx(
            float(np.dot(np.arange(7), row.p_obs)), abs=1e-12
        )


def test_bin_mean_matches_chain_mean_within_three_sigma():
    # 2000 bins of 200 observations at the paper's lossy operating point
    source = SourceSpec(SourceKind.SPATS, 0.45)  # realized source mean 1.9
    detector = DetectorConfig(4, 0.9)
    observed = observed_chain(source_pmf(source), detector)
    rows = generate_bins(source, detector, 200, "spats", seed=99, class_index=0, start=0, stop=2000)
    grand_mean = float(np.mean([row.nbar_obs for row in rows]))
    mean = pmf_mean(observed)
    var = float(np.dot(np.arange(observed.probs.size) ** 2, observed.probs)) - mean**2
    sigma = np.sqrt(var / (2000 * 200))
    assert abs(grand_mean - mean) <= 3 * sigma


# --- dataset generation --------------------------------------------------------


def test_generate_dataset_row_count_and_balance():
    meta = small_meta(bin_size=10, bins_per_class=2000)
    dataset = generate_dataset(meta)
    assert len(dataset.rows) == 4000
    labels = [row.label for row in dataset.rows]
    assert labels.count("spacs") == labels.count("spats") == 2000


def test_generate_dataset_deterministic():
    a = generate_dataset(small_meta())
    b = generate_dataset(small_meta())
    assert a.rows == b.rows
    assert a.nbar_the == b.nbar_the


def test_generate_dataset_records_preloss_mean():
    dataset = generate_dataset(small_meta())
    assert dataset.nbar_the["spacs"] == pytest.approx((1 + 3 * 1.3 + 1.3**2) / 2.3, abs=1e-6)
    assert dataset.nbar_the["spats"] == pytest.approx(2 * 1.3 + 1, abs=1e-6)


def test_lossless_spacs_has_no_vacuum_clicks():
    meta = small_meta(bin_size=50, bins_per_class=60)
    dataset = generate_dataset(meta)
    for row in dataset.rows:
        if row.label == "spacs":
            assert row.p_obs[0] == 0.0


def test_sharded_generation_matches_serial():
    source = SourceSpec(SourceKind.SPATS, 1.3)
    full = generate_bins(source, LOSSLESS, 25, "spats", seed=42, class_index=1, start=0, stop=12)
    first = generate_bins(source, LOSSLESS, 25, "spats", seed=42, class_index=1, start=0, stop=5)
    second = generate_bins(source, LOSSLESS, 25, "spats", seed=42, class_index=1, start=5, stop=12)
    assert full == first + second


def test_bin_streams_are_independent_of_order():
    a = derive_bin_rng(9, 0, 3).random(4)
    derive_bin_rng(9, 1, 0).random(100)
    b = derive_bin_rng(9, 0, 3).random(4)
    np.testing.assert_array_equal(a, b)


def test_observed_click_pmf_support_guard():
    # 10 detectors at unit efficiency let a bright source exceed 6 clicks
    with pytest.raises(PhysicsError):
        observed_click_pmf(SourceSpec(SourceKind.COHERENT, 3.0), DetectorConfig(10, 1.0))
    ok = observed_click_pmf(SourceSpec(SourceKind.COHERENT, 3.0), LOSSLESS)
    assert ok.n_max == 6


def test_dataset_meta_validation():
    with pytest.raises(ValueError):
        DatasetMeta(
            sources=(("a", SourceSpec(SourceKind.COHERENT, 1.0)), ("a", SourceSpec(SourceKind.THERMAL, 1.0))),
            detector=LOSSLESS,
            bin_size=10,
            bins_per_class=5,
            seed=0,
        )
    with pytest.raises(ValueError):
        DatasetMeta(sources=(), detector=LOSSLESS, bin_size=10, bins_per_class=5, seed=0)


# --- splits ----------------------------------------------------------------------


def test_split_rows_stratified_and_deterministic():
    dataset = generate_dataset(small_meta(bins_per_class=100))
    train, val, test = split_rows(dataset.rows, seed=5)
    assert len(train) == 160 and len(val) == 20 and len(test) == 20
    for part in (train, val, test):
        labels = [row.label for row in part]
        assert labels.count("spacs") == labels.count("spats")
    again = split_rows(dataset.rows, seed=5)
    assert (train, val, test) == again
    assert sorted(map(hash, train + val + test)) == sorted(map(hash, dataset.rows))


# --- features ----------------------------------------------------------------------


def test_feature_matrix_shapes_and_values():
    row = BinnedObservation((0.5, 0.3, 0.2, 0.0, 0.0, 0.0, 0.0), 0.7, "a", 10)
    plain = feature_matrix([row], include_nbar=False)
    assert plain.shape == (1, 5)
    np.testing.assert_allclose(plain[0], [0.5, 0.3, 0.2, 0.0, 0.0])
    with_nbar = feature_matrix([row], include_nbar=True)
    assert with_nbar.shape == (1, 6)
    assert with_nbar[0, 5] == 0.7


def test_label_vector_mapping_and_rejection():
    rows = [
        BinnedObservation((1.0, 0, 0, 0, 0, 0, 0), 0.0, "b", 4),
        BinnedObservation((1.0, 0, 0, 0, 0, 0, 0), 0.0, "a", 4),
    ]
    np.testing.assert_array_equal(label_vector(rows, ["a", "b"]), [1, 0])
    with pytest.raises(ValueError):
        label_vector(rows, ["a"])


# --- file round trips -----------------------------------------------------------------


def test_csv_round_trip(tmp_path):
    dataset = generate_dataset(small_meta(bin_size=20, bins_per_class=15))
    path = tmp_path / "data.csv"
    write_dataset_csv(path, dataset)
    rows = load_dataset_csv(path)
    assert len(rows) == len(dataset.rows)
    for loaded, original in zip(rows, dataset.rows):
        assert loaded.label == original.label
        assert loaded.bin_size == original.bin_size
        assert loaded.p_obs == original.p_obs  # exact multiples of 1/bin_size
        assert loaded.nbar_obs == pytest.approx(original.nbar_obs, rel=1e-8)


def test_csv_write_is_byte_stable(tmp_path):
    dataset = generate_dataset(small_meta())
    first = tmp_path / "a.csv"
    second = tmp_path / "b.csv"
    write_dataset_csv(first, dataset)
    write_dataset_csv(second, dataset)
    assert first.read_bytes() == second.read_bytes()


def test_meta_sidecar_round_trip(tmp_path):
    dataset = generate_dataset(small_meta())
    payload = meta_to_dict(dataset)
    rebuilt = meta_from_dict(payload)
    assert rebuilt == dataset.meta
    path = tmp_path / "meta.json"
    write_dataset_meta(path, dataset)
    assert path.read_text().startswith("{")


def test_load_rejects_foreign_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        load_dataset_csv(path)
