import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from evtc import models as M
from evtc import quant as Q
from evtc import tensor as T
from evtc.errors import ContractError
from evtc.tensor import Tensor


def binary16_oracle(v: float) -> float:
    """Exact-rational round-to-nearest-even onto the binary16 grid with the
    saturation policy (magnitudes above 65504 clamp to +-65504).

    Independent of numpy's float16: grid arithmetic is done with Fractions.
    """
    if v == 0.0:
        return math.copysign(0.0, v)
    sign = -1.0 if v < 0 else 1.0
    a = Fraction(abs(v))  # exact value of the double
    # anything at or above the inf-rounding threshold 65520 rounds to inf
    # (saturated); (65504, 65520) rounds down to 65504 -> both clamp to 65504
    if a >= 65504:
        return sign * 65504.0
    # exponent of the half grid cell: normals use e in [-14, 15], subnormals e=-14
    m, exp2 = math.frexp(abs(v))  # v = m * 2^exp2, 0.5 <= m < 1
    e = max(exp2 - 1, -14)
    step = Fraction(2) ** (e - 10)  # grid spacing: 2^(e-10)
    q = a / step
    n = int(q)  # floor (q >= 0)
    frac = q - n
    if frac > Fraction(1, 2) or (frac == Fraction(1, 2) and n % 2 == 1):
        n += 1
    return sign * float(n * step)


def fp16_sample_values():
    rng = np.random.default_rng(2024)
    chunks = [
        rng.uniform(-70000, 70000, 30000),                 # wide normals incl. overflow
        rng.uniform(-2, 2, 30000),                          # typical weights
        rng.normal(0, 1e-5, 20000),                         # near/below subnormal range
        10.0 ** rng.uniform(-12, 5, 20000) * rng.choice([-1, 1], 20000),
        np.array([0.0, -0.0, 0.5, 0.1, 1.0, -1.0, 65504.0, -65504.0, 65519.9, 65520.0,
                  70000.0, -70000.0, 2.0 ** -14, 2.0 ** -24, 2.0 ** -25, 2.0 ** -26,
                  1.5 * 2.0 ** -24, 6.0975e-5, 6.1e-5, 2048.0, 2049.0, 2050.0, 2051.0,
                  0.0999755859375, 1e-8, -1e-8, 32768.0, 49152.0, 65503.99,
                  1.0009765625, 1.00048828125, -1.00048828125,
                  float(np.nextafter(np.float64(65520), 0.0)),
                  float(np.nextafter(np.float64(65520), 1e9)),
                  (2.0 ** -24) * 0.5, (2.0 ** -24) * 1.5, (2.0 ** -24) * 2.5]),
    ]
    vals = np.concatenate(chunks)
    assert vals.size >= 100_000
    return vals


class TestFp16:
    def test_exactly_representable(self):
        assert Q.quantize_fp16(np.array([0.5]))[0] == 0.5

    def test_tenth_rounds_to_binary16_grid(self):
        assert Q.quantize_fp16(np.array([0.1]))[0] == 0.0999755859375

    def test_saturation_above_max(self):
        assert Q.quantize_fp16(np.array([70000.0]))[0] == 65504.0
        assert Q.quantize_fp16(np.array([-70000.0]))[0] == -65504.0

    def test_matches_bit_level_oracle_on_1e5_sweep(self):
        vals = fp16_sample_values()
        got = Q.quantize_fp16(vals)
        expected = np.array([binary16_oracle(float(v)) for v in vals])
        mismatch = np.nonzero(got != expected)[0]
        assert mismatch.size == 0, \
            f"{mismatch.size} mismatches, first: v={vals[mismatch[0]]!r} " \
            f"got={got[mismatch[0]]!r} expected={expected[mismatch[0]]!r}"

    def test_subnormals_preserved(self):
        v = np.array([2.0 ** -24])  # smallest positive binary16 subnormal
        assert Q.quantize_fp16(v)[0] == 2.0 ** -24
        tiny = np.array([2.0 ** -26])  # below half the smallest subnormal
        assert Q.quantize_fp16(tiny)[0] == 0.0

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1e5, 1e5, 5000)
        once = Q.quantize_fp16(x)
        assert np.array_equal(Q.quantize_fp16(once), once)

    def test_float32_input_stays_float32(self):
        x = np.random.default_rng(0).uniform(-1, 1, 100).astype(np.float32)
        out = Q.quantize_fp16(x)
        assert out.dtype == np.float32


class TestInt8:
    def test_scale_formula(self):
        assert Q.calibrate_int8(np.array([0.25, -1.0, 0.5])) == 1.0 / 127

    def test_all_zero_fallback(self):
        s = Q.calibrate_int8(np.zeros(10))
        assert s == np.finfo(np.float32).tiny
        q = Q.quantize_int8(np.zeros(10), s)
        assert np.array_equal(Q.dequantize(q, s), np.zeros(10, dtype=np.float32))

    def test_scale_homogeneity(self):
        x = np.random.default_rng(1).uniform(-1, 1, 50)
        assert Q.calibrate_int8(3.0 * x) == pytest.approx(3.0 * Q.calibrate_int8(x), rel=1e-12)

    def test_stream_of_chunks(self):
        s = Q.calibrate_int8([np.array([0.2]), np.array([-2.0]), np.array([1.0])])
        assert s == 2.0 / 127

    def test_zero_maps_to_zero(self):
        s = 1.0 / 127
        assert Q.quantize_int8(np.array([0.0]), s)[0] == 0
        assert Q.dequantize(np.array([0], dtype=np.int8), s)[0] == 0.0

    def test_round_half_even_case(self):
        s = 1.0 / 127
        q = Q.quantize_int8(np.array([0.5]), s)
        assert q[0] == 64  # 63.5 rounds to even 64
        assert Q.dequantize(q, s)[0] == pytest.approx(64 / 127, rel=1e-6)

    def test_clamp(self):
        s = 1.0 / 127
        q = Q.quantize_int8(np.array([2.0]), s)
        assert q[0] == 127
        assert Q.dequantize(q, s)[0] == pytest.approx(1.0, rel=1e-6)

    def test_empty_stream_rejected(self):
        with pytest.raises(ContractError):
            Q.calibrate_int8(np.zeros(0))

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=40))
    def test_roundtrip_error_bound(self, vals):
        x = np.array(vals)
        s = Q.calibrate_int8(x)
        back = Q.dequantize(Q.quantize_int8(x, s), s)
        # |dequant - x| <= s/2 for in-range x (all are, by calibration)
        assert (np.abs(back - x) <= s / 2 + 1e-7 * np.abs(x)).all()

    def test_idempotent_through_model(self):
        model = M.build_model(tiny_config(), seed=0)
        spec = Q.QuantSpec(mode="int8")
        cal = _cal_set()
        q1, _ = Q.quantize_model(model, spec, cal)
        q2, _ = Q.quantize_model(q1, spec, cal)
        for name, p in q1.named_parameters():
            assert p.data.tobytes() == q2.params[name].data.tobytes()


def _cal_set(n=2):
    from evtc import data as D
    spec = D.SceneSpec(resolution=(16, 16), num_classes=5, seed=0)
    return D.generate_split(spec, n, "eval")


class TestQuantizeModel:
    def test_fp16_fixed_point_gives_bit_identical_outputs(self):
        model = M.build_model(tiny_config(), seed=0)
        for _, p in model.named_parameters():
            p.data = Q.quantize_fp16(p.data).astype(np.float32)
        qmodel, report = Q.quantize_model(model, Q.QuantSpec(mode="fp16"))
        img = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 16, 16)).astype(np.float32))
        with T.no_grad():
            a = M.forward_segment(model, img).data
            b = M.forward_segment(qmodel, img).data
        assert a.tobytes() == b.tobytes()
        assert all(e.max_abs == 0.0 for e in report.layers.values())

    def test_fp16_idempotence(self):
        model = M.build_model(tiny_config(), seed=1)
        q1, _ = Q.quantize_model(model, Q.QuantSpec(mode="fp16"))
        q2, _ = Q.quantize_model(q1, Q.QuantSpec(mode="fp16"))
        for name, p in q1.named_parameters():
            assert p.data.tobytes() == q2.params[name].data.tobytes()

    def test_int8_requires_calibration(self):
        model = M.build_model(tiny_config(), seed=0)
        with pytest.raises(ContractError):
            Q.quantize_model(model, Q.QuantSpec(mode="int8"))

    def test_report_contents(self):
        model = M.build_model(tiny_config(), seed=0)
        qmodel, report = Q.quantize_model(model, Q.QuantSpec(mode="int8"), _cal_set())
        assert set(report.layers) == set(model.params)
        assert report.calibration_images == 2
        assert report.max_logit_err is not None and np.isfinite(report.max_logit_err)
        for name, entry in report.layers.items():
            assert entry.mean_abs <= entry.max_abs + 1e-12
            assert entry.scale is not None and entry.scale > 0

    def test_original_model_untouched(self):
        model = M.build_model(tiny_config(), seed=0)
        before = {n: p.data.tobytes() for n, p in model.named_parameters()}
        Q.quantize_model(model, Q.QuantSpec(mode="fp16"))
        after = {n: p.data.tobytes() for n, p in model.named_parameters()}
        assert before == after

    def test_eval_batch_independent_by_construction(self):
        """Evaluation forwards images singly; repeated eval is deterministic."""
        from evtc import train as TR
        model = M.build_model(tiny_config(), seed=0)
        qmodel, _ = Q.quantize_model(model, Q.QuantSpec(mode="fp16"))
        ds = _cal_set(4)
        a = TR.evaluate(qmodel, ds)
        b = TR.evaluate(qmodel, ds)
        assert a.per_image_iou == b.per_image_iou
