from __future__ import annotations

import numpy as np
import pytest

from dsp_core import (
    FilterSpec,
    Spectrum,
    band_power,
    baseline_remove,
    design_bandpass,
    filter_apply,
    fractional_node_weights,
    frequency_response,
    is_stable,
    linear_interp,
    median_filter,
    modwpt,
    moving_minmax_norm,
    welch_median_psd,
)


def test_modwpt_conserves_energy(rng):
    worst = 0.0
    for i in range(200):
        n = (64, 120, 1024)[i % 3]
        x = rng.standard_normal(n)
        energies = modwpt(x, fs=4.0, level=4).energies()
        worst = max(worst, abs(energies.sum() - np.sum(x ** 2)) / np.sum(x ** 2))
    assert worst <= 1e-8


def test_modwpt_nodes_are_in_frequency_order():
    t = np.arange(120) / 4.0
    decomposition = modwpt(np.sin(2 * np.pi * 0.3 * t), fs=4.0, level=4)
    energies = decomposition.energies()
    share = energies / energies.sum()

    assert decomposition.node_bands_hz[2].tolist() == [0.25, 0.375]
    assert int(np.argmax(energies)) == 2
    assert share[2] >= 0.55
    assert share[1:4].sum() >= 0.85


def test_modwpt_rejects_signals_shorter_than_the_filter_support():
    with pytest.raises(ValueError):
        modwpt(np.ones(40), fs=4.0, level=4)


def test_hf_node_weights_at_level_four():
    edges = np.arange(17) * 0.125
    weights = fractional_node_weights(np.column_stack([edges[:-1], edges[1:]]), 0.15, 0.4)
    assert weights[:4] == pytest.approx([0.0, 0.8, 1.0, 0.2], abs=1e-12)
    assert np.all(weights[4:] == 0.0)


def test_butterworth_half_power_points():
    coeffs = design_bandpass(FilterSpec(order=4, low_hz=0.04, high_hz=0.4, sample_rate_hz=4.0))
    assert is_stable(coeffs)
    gains = frequency_response(coeffs, [0.04, 0.4])
    assert gains == pytest.approx([1 / np.sqrt(2)] * 2, abs=0.05)
    assert frequency_response(coeffs, [0.13])[0] == pytest.approx(1.0, abs=0.05)


@pytest.mark.parametrize(
    ("low", "high", "fs"),
    [(0.0, 0.4, 4.0), (0.4, 0.04, 4.0), (0.04, 2.0, 4.0)],
)
def test_invalid_band_edges_are_rejected(low, high, fs):
    with pytest.raises(ValueError):
        FilterSpec(order=4, low_hz=low, high_hz=high, sample_rate_hz=fs)


def test_zero_phase_filtering_keeps_a_sine_in_place():
    fs = 4.0
    t = np.arange(2400) / fs
    x = np.sin(2 * np.pi * 0.2 * t)
    coeffs = design_bandpass(FilterSpec(4, 0.04, 0.4, fs))
    y = filter_apply(coeffs, x, zero_phase=True)
    middle = slice(400, 2000)
    assert np.max(np.abs(y[middle] - x[middle])) < 0.05
    causal = filter_apply(coeffs, x)
    assert np.max(np.abs(causal[middle] - x[middle])) > 0.1


def test_median_filter_matches_brute_force(rng):
    fs = 100.0
    x = rng.standard_normal(257)
    out = median_filter(x, 0.05, fs)
    half = 2
    expected = [np.median(x[i - min(i, x.size - 1 - i, half):i + min(i, x.size - 1 - i, half) + 1])
                for i in range(x.size)]
    assert np.allclose(out, expected, atol=0.0)


def test_baseline_remove_cancels_slow_drift():
    fs = 256.0
    t = np.arange(int(20 * fs)) / fs
    drift = 0.5 + 0.3 * np.sin(2 * np.pi * 0.05 * t)
    residual = baseline_remove(drift, fs)
    assert np.max(np.abs(residual[512:-512])) < 0.01


def test_baseline_remove_needs_two_windows_of_signal():
    with pytest.raises(ValueError):
        baseline_remove(np.ones(100), 256.0)


def test_minmax_normalization_is_affine_invariant(rng):
    x = rng.standard_normal(1000)
    base = moving_minmax_norm(x, 2.0, 100.0)
    assert np.allclose(moving_minmax_norm(3.5 * x - 7.0, 2.0, 100.0), base, atol=1e-12)
    assert base.min() >= 0.0 and base.max() <= 1.0
    assert np.all(moving_minmax_norm(np.full(300, 4.2), 2.0, 100.0) == 0.5)


def test_linear_interp_grid_and_edges():
    out = linear_interp([1.0, 2.0, 3.0], [10.0, 20.0, 40.0], 4.0, 0.0, 3.75)
    assert out.size == 16
    assert out[0] == 10.0  # 最初のノット以前は端の値
    assert out[6] == pytest.approx(15.0)  # t = 1.5
    assert out[-1] == 40.0


def test_linear_interp_rejects_unsorted_knots():
    with pytest.raises(ValueError):
        linear_interp([1.0, 1.0, 2.0], [1.0, 2.0, 3.0], 4.0, 0.0, 2.0)


def test_welch_median_finds_a_sine():
    fs = 256.0
    t = np.arange(int(30 * fs)) / fs
    spectrum = welch_median_psd(np.sin(2 * np.pi * 10.0 * t), fs)
    assert spectrum.n_segments == 14
    assert spectrum.freqs_hz[1] == pytest.approx(0.25)
    assert spectrum.freqs_hz[np.argmax(spectrum.power)] == pytest.approx(10.0)


def test_welch_rejects_too_short_input():
    with pytest.raises(ValueError):
        welch_median_psd(np.ones(500), 256.0)


def test_band_power_interpolates_band_edges():
    spectrum = Spectrum(freqs_hz=np.linspace(0.0, 10.0, 41), power=np.ones(41))
    assert band_power(spectrum, 2.5, 7.25) == pytest.approx(4.75, abs=1e-12)
    assert band_power(spectrum, 8.0, 20.0) == pytest.approx(2.0, abs=1e-12)
    assert band_power(spectrum, 11.0, 20.0) == 0.0


def test_modwpt_spreads_white_noise_evenly(rng):
    fractions = np.mean([
        (lambda e: e / e.sum())(modwpt(rng.standard_normal(1024), fs=4.0, level=4).energies())
        for _ in range(100)
    ], axis=0)
    assert fractions.size == 16
    assert np.max(np.abs(fractions - 1 / 16)) <= 0.03


def _hf_filter(fs: float = 4.0):
    return design_bandpass(FilterSpec(order=4, low_hz=0.04, high_hz=0.4, sample_rate_hz=fs))


def test_filtering_is_linear_and_shift_invariant(rng):
    coeffs = _hf_filter()
    x, y = rng.standard_normal(2000), rng.standard_normal(2000)
    combined = filter_apply(coeffs, 2.0 * x - 3.0 * y)
    assert np.max(np.abs(combined - (2.0 * filter_apply(coeffs, x) - 3.0 * filter_apply(coeffs, y)))) <= 1e-9

    lag = 50
    delayed = filter_apply(coeffs, np.concatenate([np.zeros(lag), x[:-lag]]))
    assert np.max(np.abs(delayed[lag:] - filter_apply(coeffs, x)[:-lag])) <= 1e-9
    assert np.all(filter_apply(coeffs, np.zeros(100)) == 0.0)


def test_impulse_response_spectrum_matches_the_design():
    coeffs = _hf_filter()
    n = 2 ** 14
    impulse = np.zeros(n)
    impulse[0] = 1.0
    response = filter_apply(coeffs, impulse)
    freqs = np.fft.rfftfreq(n, d=1 / 4.0)
    assert np.max(np.abs(np.abs(np.fft.rfft(response)) - frequency_response(coeffs, freqs))) <= 1e-6


def test_welch_sine_power_and_grid():
    fs = 256.0
    t = np.arange(int(30 * fs)) / fs
    spectrum = welch_median_psd(np.sin(2 * np.pi * 10.0 * t), fs)
    assert np.allclose(np.diff(spectrum.freqs_hz), 0.25)
    assert np.all(spectrum.power >= 0)
    assert band_power(spectrum, 0.0, fs / 2) == pytest.approx(0.5, rel=0.05)
    assert band_power(spectrum, 8.0, 12.0) >= 0.95 * band_power(spectrum, 0.0, fs / 2)


def test_welch_on_white_noise(rng):
    fs = 256.0
    x = rng.standard_normal(int(120 * fs))
    mean_psd = welch_median_psd(x, fs, average="mean")
    median_psd = welch_median_psd(x, fs)
    variance = float(np.var(x))

    assert band_power(mean_psd, 0.0, fs / 2) == pytest.approx(variance, rel=0.15)
    # 補正なしのメディアンは指数分布の中央値 ln 2 倍になる
    assert band_power(median_psd, 0.0, fs / 2) == pytest.approx(np.log(2) * variance, rel=0.15)
    inner = median_psd.power[4:-4]
    assert np.max(np.abs(inner[: inner.size // 2].mean() / inner[inner.size // 2:].mean() - 1.0)) <= 0.15


def test_single_segment_median_equals_mean(rng):
    x = rng.standard_normal(1024)
    median = welch_median_psd(x, 256.0)
    mean = welch_median_psd(x, 256.0, average="mean")
    assert median.n_segments == 1
    assert np.array_equal(median.power, mean.power)
