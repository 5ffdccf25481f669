"""Quantized GEMM engine: exactness, wraparound, injection, anomaly clearance."""
import numpy as np
import pytest

from voltsim.errmodel import RngStream, UniformBerModel, default_table
from voltsim.qgemm import (
    AnomalyBound,
    CalibrationError,
    GemmFaultConfig,
    QuantizedMatrix,
    calibrate_bound,
    dequantize,
    faulty_gemm,
    quantize,
    requant_bound,
    requantize,
    required_width,
)

CLEAN = GemmFaultConfig()


def rand_q(rows, cols, scale, gen):
    data = gen.integers(-128, 128, size=(rows, cols)).astype(np.int8)
    return QuantizedMatrix(data, scale)


# ---------------------------------------------------------------- quantize

def test_quantize_examples():
    q = quantize(np.array([[1.0, 0.0, 20.0]]), 0.1)
    assert q.data.tolist() == [[10, 0, 127]]
    assert q.scale == 0.1


def test_quantize_rounds_half_to_even():
    # exact binary halves: 0.25/0.5 = 0.5, 0.75/0.5 = 1.5, 1.25/0.5 = 2.5
    q = quantize(np.array([[0.25, 0.75, 1.25, -0.25]]), 0.5)
    # ties at .5 go to the even integer
    assert q.data.tolist() == [[0, 2, 2, 0]]


def test_quantize_saturates_both_ends():
    q = quantize(np.array([[1e9, -1e9]]), 0.5)
    assert q.data.tolist() == [[127, -128]]


def test_dequantize_roundtrip_within_half_scale():
    gen = np.random.default_rng(7)
    x = gen.uniform(-12.0, 12.0, size=(40, 40))
    scale = 0.1
    back = dequantize(quantize(x, scale))
    assert np.max(np.abs(back - x)) <= scale / 2 + 1e-12


def test_quantize_rejects_bad_input():
    with pytest.raises(ValueError):
        quantize(np.array([[np.nan]]), 0.1)
    with pytest.raises(ValueError):
        quantize(np.array([[np.inf]]), 0.1)
    with pytest.raises(ValueError):
        quantize(np.array([[1.0]]), 0.0)
    with pytest.raises(ValueError):
        quantize(np.array([[1.0]]), -0.5)


def test_quantized_matrix_validation():
    with pytest.raises(TypeError):
        QuantizedMatrix(np.zeros((2, 2), dtype=np.int32), 1.0)
    with pytest.raises(ValueError):
        QuantizedMatrix(np.zeros((2, 2), dtype=np.int8), 0.0)


# ------------------------------------------------------------- faulty_gemm

def test_hand_example():
    A = QuantizedMatrix(np.array([[2, 3]], dtype=np.int8), 1.0)
    B = QuantizedMatrix(np.array([[5], [7]], dtype=np.int8), 1.0)
    acc, clamped = faulty_gemm(A, B, CLEAN)
    assert acc.tolist() == [[31]]
    assert clamped == 0


def test_identity_weight_passthrough():
    gen = np.random.default_rng(11)
    A = rand_q(8, 16, 0.02, gen)
    I = QuantizedMatrix(np.eye(16, dtype=np.int8), 1.0)
    acc, _ = faulty_gemm(A, I, CLEAN)
    assert np.array_equal(acc, A.data.astype(np.int64))


def test_exact_gemm_matches_integer_oracle():
    gen = np.random.default_rng(13)
    A = rand_q(17, 96, 0.03, gen)
    B = rand_q(96, 23, 0.05, gen)
    acc, _ = faulty_gemm(A, B, CLEAN)
    oracle = A.data.astype(np.int64) @ B.data.astype(np.int64)
    assert np.array_equal(acc, oracle)


def test_dimension_mismatch_rejected():
    gen = np.random.default_rng(3)
    A = rand_q(4, 8, 1.0, gen)
    B = rand_q(9, 4, 1.0, gen)
    with pytest.raises(ValueError, match="mismatch"):
        faulty_gemm(A, B, CLEAN)


def test_width_precondition():
    gen = np.random.default_rng(5)
    A = rand_q(2, 512, 1.0, gen)
    B = rand_q(512, 2, 1.0, gen)
    assert required_width(512) == 25
    with pytest.raises(ValueError, match="width"):
        faulty_gemm(A, B, CLEAN, width=24)
    faulty_gemm(A, B, CLEAN, width=25)  # wide enough


def test_wraparound_matches_wide_integer_oracle():
    # force a narrow register so real sums exceed the representable range
    gen = np.random.default_rng(17)
    A = rand_q(5, 64, 1.0, gen)
    B = rand_q(64, 7, 1.0, gen)
    for w in (8, 12, 16):
        acc, _ = faulty_gemm(A, B, CLEAN, width=w, allow_narrow=True)
        span, half = 1 << w, 1 << (w - 1)
        for i in range(5):
            for j in range(7):
                s = sum(int(A.data[i, k]) * int(B.data[k, j]) for k in range(64))
                assert acc[i, j] == ((s + half) % span) - half, (w, i, j)
        assert acc.min() >= -half and acc.max() < half


def test_injection_deterministic_per_stream():
    gen = np.random.default_rng(19)
    A = rand_q(12, 32, 0.1, gen)
    B = rand_q(32, 20, 0.1, gen)
    cfg = lambda: GemmFaultConfig(error_source=UniformBerModel(0.02))
    a1, _ = faulty_gemm(A, B, cfg(), RngStream(42, ("g",)))
    a2, _ = faulty_gemm(A, B, cfg(), RngStream(42, ("g",)))
    a3, _ = faulty_gemm(A, B, cfg(), RngStream(42, ("other",)))
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, a3)


def test_flip_counter_statistics():
    # site count is Binomial(n_words * width, ber); check a 4-sigma band
    gen = np.random.default_rng(23)
    A = rand_q(64, 48, 0.1, gen)
    B = rand_q(48, 250, 0.1, gen)
    cfg = GemmFaultConfig(error_source=UniformBerModel(0.01))
    faulty_gemm(A, B, cfg, RngStream(7, ("stats",)))
    n = 64 * 250 * 24
    mean, sd = n * 0.01, (n * 0.01 * 0.99) ** 0.5
    assert abs(cfg.flip_counter - mean) < 4 * sd


def test_corrupted_fraction_matches_word_rate():
    gen = np.random.default_rng(29)
    A = rand_q(64, 48, 0.1, gen)
    B = rand_q(48, 250, 0.1, gen)
    cfg = GemmFaultConfig(error_source=UniformBerModel(0.01))
    acc, _ = faulty_gemm(A, B, cfg, RngStream(9, ("frac",)))
    clean, _ = faulty_gemm(A, B, CLEAN)
    frac = np.mean(acc != clean)
    p_word = 1 - (1 - 0.01) ** 24  # any of 24 bits flips
    n = 64 * 250
    sd = (p_word * (1 - p_word) / n) ** 0.5
    assert abs(frac - p_word) < 4 * sd


def test_voltage_table_source():
    gen = np.random.default_rng(31)
    A = rand_q(32, 64, 0.1, gen)
    B = rand_q(64, 100, 0.1, gen)
    table = default_table()
    cfg = GemmFaultConfig(error_source=table, voltage=0.80)
    acc, _ = faulty_gemm(A, B, cfg, RngStream(3, ("vt",)))
    clean, _ = faulty_gemm(A, B, CLEAN)
    assert cfg.flip_counter > 0
    assert not np.array_equal(acc, clean)
    # nominal voltage from the default table injects nothing
    cfg_nom = GemmFaultConfig(error_source=table, voltage=0.90)
    acc_nom, _ = faulty_gemm(A, B, cfg_nom, RngStream(3, ("vt",)))
    assert np.array_equal(acc_nom, clean)
    assert cfg_nom.flip_counter == 0


# ------------------------------------------------- anomaly detection stage

def test_fault_free_transparency():
    gen = np.random.default_rng(37)
    A = rand_q(16, 64, 0.04, gen)
    B = rand_q(64, 32, 0.02, gen)
    plain, c0 = faulty_gemm(A, B, CLEAN)
    bound = calibrate_bound([plain.astype(np.float64) * A.scale * B.scale], 1.0)
    cfg_ad = GemmFaultConfig(ad_enabled=True, bound=bound)
    with_ad, c1 = faulty_gemm(A, B, cfg_ad)
    assert np.array_equal(plain, with_ad)
    assert c0 == 0 and c1 == 0 and cfg_ad.anomaly_counter == 0


def test_clamp_soundness_and_containment():
    gen = np.random.default_rng(41)
    A = rand_q(48, 128, 0.03, gen)
    B = rand_q(128, 64, 0.03, gen)
    clean, _ = faulty_gemm(A, B, CLEAN)
    s = A.scale * B.scale
    bound = calibrate_bound([clean.astype(np.float64) * s], 1.0)
    cfg = GemmFaultConfig(
        error_source=UniformBerModel(1e-2), ad_enabled=True, bound=bound
    )
    acc, clamped = faulty_gemm(A, B, cfg, RngStream(4, ("cont",)))
    assert clamped > 0 and cfg.anomaly_counter == clamped
    deq = np.abs(acc.astype(np.float64) * s)
    assert np.all(deq <= bound.threshold_dequant + 1e-9)  # soundness
    dev = np.abs((acc - clean).astype(np.float64) * s)
    assert np.max(dev) <= 2 * bound.threshold_dequant + 1e-9  # containment


def test_large_requant_bound_example():
    # 4096x4096 random inputs, ber 1e-2, AD on with the requant bound
    gen = np.random.default_rng(43)
    n = 4096
    A = rand_q(n, n, 0.02, gen)
    B = rand_q(n, n, 0.02, gen)
    w = required_width(n)
    clean, _ = faulty_gemm(A, B, CLEAN, width=w)
    s = A.scale * B.scale
    out_scale = float(np.max(np.abs(clean)) * s) / 127.0
    cfg = GemmFaultConfig(
        error_source=UniformBerModel(1e-2),
        ad_enabled=True,
        bound=requant_bound(out_scale),
    )
    acc, clamped = faulty_gemm(A, B, cfg, RngStream(8, ("big",)), width=w)
    assert clamped > 0
    deq = np.abs(acc.astype(np.float64) * s)
    assert np.all(deq <= cfg.bound.threshold_dequant + 1e-9)


def test_ad_config_validation():
    with pytest.raises(ValueError, match="bound"):
        GemmFaultConfig(ad_enabled=True)
    with pytest.raises(ValueError, match="voltage"):
        GemmFaultConfig(error_source=default_table())
    with pytest.raises(ValueError, match="mode"):
        AnomalyBound("never_heard_of_it", 1.0)
    with pytest.raises(ValueError):
        AnomalyBound("calibrated", 0.0)
    with pytest.raises(ValueError):
        AnomalyBound("calibrated", 1.0, clamp_value=3)


# ------------------------------------------------------------- requantize

def test_requantize_examples():
    acc = np.array([[0, 31]], dtype=np.int64)
    q = requantize(acc, (1.0, 1.0), 1.0)
    assert q.data.tolist() == [[0, 31]]


def test_requantize_no_saturation_at_matched_scale():
    gen = np.random.default_rng(47)
    acc = gen.integers(-(2**20), 2**20, size=(50, 50))
    s_a, s_b = 0.03, 0.07
    out_scale = float(np.max(np.abs(acc)) * s_a * s_b) / 127.0
    q = requantize(acc, (s_a, s_b), out_scale)
    # values land exactly on the representable range, never clipped
    raw = np.rint(acc * s_a * s_b / out_scale)
    assert np.max(np.abs(raw)) <= 127
    assert np.array_equal(q.data.astype(np.int64), raw.astype(np.int64))


def test_requantize_rejects_bad_scale():
    with pytest.raises(ValueError):
        requantize(np.array([[1]], dtype=np.int64), (1.0, 1.0), 0.0)


# --------------------------------------------------------- calibrate_bound

def test_calibrate_bound_examples():
    batches = [np.array([[-3.0, 1.0]]), np.array([[2.5, -0.5]])]
    assert calibrate_bound(batches, 1.0).threshold_dequant == 3.0
    assert calibrate_bound(batches, 1.25).threshold_dequant == pytest.approx(3.75)


def test_calibrate_bound_covers_calibration_set():
    gen = np.random.default_rng(53)
    batches = [gen.normal(size=(10, 10)) for _ in range(5)]
    t = calibrate_bound(batches, 1.0).threshold_dequant
    for b in batches:
        assert np.all(np.abs(b) <= t)


def test_calibrate_bound_errors():
    with pytest.raises(CalibrationError):
        calibrate_bound([], 1.0)
    with pytest.raises(CalibrationError):
        calibrate_bound([np.zeros((3, 3))], 1.0)
    with pytest.raises(ValueError):
        calibrate_bound([np.ones((2, 2))], 0.5)


def test_requant_bound_helper():
    b = requant_bound(0.25)
    assert b.mode == "requant_bound"
    assert b.threshold_dequant == pytest.approx(127 * 0.25)
