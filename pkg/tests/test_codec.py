import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trustsim.codec import (
    CheckpointDictionary,
    DictIndex,
    Frame,
    LatticeQuantizer,
    NewEntry,
    QuantizedUpdate,
    UpdateExceedsClamp,
    apply_refinement,
    decode_frame,
    dequantize_update,
    dict_encode_checkpoint,
    encode_frame,
    quantize_update,
    refine_update,
    update_bit_cost,
)


def ball_point(rng, d, radius):
    v = rng.normal(size=d)
    v /= np.linalg.norm(v)
    return v * radius * rng.random() ** (1.0 / d)


class TestQuantizer:
    def test_step_formula(self):
        q = LatticeQuantizer(dimension=4, max_error=0.1, clamp_radius=10.0)
        assert q.step == pytest.approx(2 * 0.1 / math.sqrt(4))

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            LatticeQuantizer(dimension=2, max_error=0.0, clamp_radius=1.0)
        with pytest.raises(ValueError):
            LatticeQuantizer(dimension=2, max_error=0.5, clamp_radius=0.4)

    def test_hand_rounding(self):
        q = LatticeQuantizer(dimension=4, max_error=0.1, clamp_radius=10.0)
        u = quantize_update(q, np.array([0.04, -0.07, 0.12, 0.0]))
        np.testing.assert_array_equal(u.indices, [0, -1, 1, 0])
        recon = dequantize_update(q, u)
        np.testing.assert_allclose(recon, [0.0, -0.1, 0.1, 0.0], atol=1e-15)
        err = np.linalg.norm(recon - [0.04, -0.07, 0.12, 0.0])
        assert err == pytest.approx(0.05385, abs=1e-4)
        assert err <= 0.1

    def test_zero_delta(self):
        q = LatticeQuantizer(dimension=3, max_error=0.2, clamp_radius=5.0)
        u = quantize_update(q, np.zeros(3))
        np.testing.assert_array_equal(u.indices, 0)
        assert np.linalg.norm(dequantize_update(q, u)) == 0.0

    def test_ties_round_to_even(self):
        # step 0.5 exactly representable: 0.75/0.5 = 1.5 -> 2, 0.25/0.5 = 0.5 -> 0
        q = LatticeQuantizer(dimension=1, max_error=0.25, clamp_radius=2.0)
        assert q.step == 0.5
        assert quantize_update(q, np.array([0.75])).indices[0] == 2
        assert quantize_update(q, np.array([0.25])).indices[0] == 0

    def test_clamp_rejection(self):
        q = LatticeQuantizer(dimension=2, max_error=0.1, clamp_radius=1.0)
        with pytest.raises(UpdateExceedsClamp):
            quantize_update(q, np.array([1.0, 1.0]))

    @pytest.mark.parametrize("d,eps", [(1, 0.5), (2, 0.1), (8, 0.03), (32, 1.0)])
    def test_error_bound_over_ball(self, d, eps):
        q = LatticeQuantizer(dimension=d, max_error=eps, clamp_radius=20 * eps)
        rng = np.random.default_rng(d * 1000 + 1)
        worst = 0.0
        for _ in range(10_000):
            delta = ball_point(rng, d, q.clamp_radius)
            err = np.linalg.norm(dequantize_update(q, quantize_update(q, delta)) - delta)
            worst = max(worst, err)
        assert worst <= eps


class TestDequantize:
    def test_direct_scaling(self):
        q = LatticeQuantizer(dimension=4, max_error=0.1, clamp_radius=10.0)
        u = QuantizedUpdate(indices=np.array([0, -1, 1, 0]))
        np.testing.assert_allclose(dequantize_update(q, u), [0.0, -0.1, 0.1, 0.0], atol=1e-15)

    def test_level_one_halves_step(self):
        # max_error chosen so the base step is 0.1; at level 1 the effective
        # step is 0.05 and indices (2, 0) reconstruct (0.1, 0)
        q = LatticeQuantizer(dimension=2, max_error=0.1 * math.sqrt(2) / 2, clamp_radius=10.0)
        assert q.step == pytest.approx(0.1, rel=1e-15)
        u = QuantizedUpdate(indices=np.array([2, 0]), refinement_level=1)
        np.testing.assert_allclose(dequantize_update(q, u), [0.1, 0.0], atol=1e-15)

    def test_dimension_mismatch(self):
        q = LatticeQuantizer(dimension=3, max_error=0.1, clamp_radius=1.0)
        with pytest.raises(ValueError):
            dequantize_update(q, QuantizedUpdate(indices=np.array([1, 2])))


class TestBitCost:
    def test_hand_count(self):
        # s = 0.2, ceil(1/0.2) = 5 representable magnitudes -> 11 points -> 4 bits
        q = LatticeQuantizer(dimension=1, max_error=0.1, clamp_radius=1.0)
        assert update_bit_cost(q) == 4

    def test_linear_in_dimension(self):
        base = LatticeQuantizer(dimension=1, max_error=2 / math.sqrt(1) / 2, clamp_radius=16.0)
        per_coord = update_bit_cost(base)
        for d in (2, 4, 16):
            # keep step constant by scaling max_error with sqrt(d)
            q = LatticeQuantizer(dimension=d, max_error=math.sqrt(d) / 2 * base.step, clamp_radius=16.0)
            assert q.step == pytest.approx(base.step)
            assert update_bit_cost(q) == d * per_coord

    @given(st.integers(1, 24), st.floats(0.01, 10.0), st.floats(1.5, 100.0))
    @settings(max_examples=100, deadline=None)
    def test_halving_adds_at_most_two_bits_per_coord(self, d, eps, ratio):
        q1 = LatticeQuantizer(dimension=d, max_error=eps, clamp_radius=eps * ratio)
        q2 = LatticeQuantizer(dimension=d, max_error=eps / 2, clamp_radius=eps * ratio)
        rise = update_bit_cost(q2) - update_bit_cost(q1)
        assert 0 <= rise <= 2 * d

    @given(st.integers(1, 16), st.floats(0.01, 1.0), st.floats(2.0, 50.0), st.floats(1.1, 4.0))
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_tolerance_and_clamp(self, d, eps, ratio, grow):
        q = LatticeQuantizer(dimension=d, max_error=eps, clamp_radius=eps * ratio)
        finer = LatticeQuantizer(dimension=d, max_error=eps / grow, clamp_radius=eps * ratio)
        wider = LatticeQuantizer(dimension=d, max_error=eps, clamp_radius=eps * ratio * grow)
        assert update_bit_cost(finer) >= update_bit_cost(q)
        assert update_bit_cost(wider) >= update_bit_cost(q)


class TestCheckpointDictionary:
    def test_first_insertion(self):
        d = CheckpointDictionary(dimension=2, tolerance=0.1)
        code = dict_encode_checkpoint(d, np.array([1.0, 1.0]))
        assert isinstance(code, NewEntry)
        assert len(d.entries) == 1
        assert np.linalg.norm(code.state - [1.0, 1.0]) <= 0.1

    def test_exact_repeat_hits_index_zero(self):
        d = CheckpointDictionary(dimension=2, tolerance=0.1)
        dict_encode_checkpoint(d, np.array([1.0, 1.0]))
        code = dict_encode_checkpoint(d, np.array([1.0, 1.0]))
        assert code == DictIndex(0)
        assert len(d.entries) == 1

    def test_near_state_within_tolerance(self):
        d = CheckpointDictionary(dimension=2, tolerance=0.1)
        d.entries.append(np.array([1.0, 1.0]))
        code = dict_encode_checkpoint(d, np.array([1.0, 1.05]))
        assert code == DictIndex(0)

    def test_first_match_wins(self):
        d = CheckpointDictionary(dimension=1, tolerance=0.5)
        d.entries.append(np.array([0.0]))
        d.entries.append(np.array([0.4]))
        assert dict_encode_checkpoint(d, np.array([0.3])) == DictIndex(0)

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=2), st.floats(0.01, 1.0))
    @settings(max_examples=200, deadline=None)
    def test_epsilon_idempotence(self, point, tol):
        d = CheckpointDictionary(dimension=2, tolerance=tol)
        x = np.array(point)
        dict_encode_checkpoint(d, x)
        size = len(d.entries)
        rng = np.random.default_rng(0)
        for _ in range(10):
            jitter = ball_point(rng, 2, tol - np.linalg.norm(x - d.entries[0]))
            dict_encode_checkpoint(d, d.entries[0] + jitter)
        assert len(d.entries) == size


def random_frame(rng, q, n_updates, frame_index=0, new_entry=True):
    if new_entry:
        code = NewEntry(state=np.round(rng.normal(size=q.dimension), 3))
    else:
        code = DictIndex(int(rng.integers(0, 100)))
    frame = Frame(frame_index=frame_index, checkpoint_code=code, checkpoint_time=0)
    max_idx = math.ceil(q.clamp_radius / q.step)
    for _ in range(n_updates):
        idx = rng.integers(-max_idx, max_idx + 1, size=q.dimension)
        frame.append_update(QuantizedUpdate(indices=idx))
    frame.seal()
    return frame


class TestFrameBitstream:
    def test_empty_frame_is_header_only(self):
        q = LatticeQuantizer(dimension=3, max_error=0.1, clamp_radius=1.0)
        frame = Frame(frame_index=5, checkpoint_code=DictIndex(2), checkpoint_time=0)
        frame.seal()
        data, bits = encode_frame(frame, q)
        assert bits == 8 + 64 + 8 + 64 + 64
        assert len(data) == bits // 8
        assert data[0] == 0xAF
        assert decode_frame(data, q) == frame

    def test_unsealed_frame_rejected(self):
        q = LatticeQuantizer(dimension=3, max_error=0.1, clamp_radius=1.0)
        frame = Frame(frame_index=0, checkpoint_code=DictIndex(0), checkpoint_time=0)
        with pytest.raises(ValueError):
            encode_frame(frame, q)

    @pytest.mark.parametrize("m", [1, 7, 64])
    def test_bit_length_formula(self, m):
        q = LatticeQuantizer(dimension=5, max_error=0.02, clamp_radius=1.0)
        rng = np.random.default_rng(m)
        frame = random_frame(rng, q, m, new_entry=True)
        data, bits = encode_frame(frame, q)
        header = 8 + 64 + 8 + 64 * q.dimension + 64
        assert bits == header + m * update_bit_cost(q)
        assert len(data) == (bits + 7) // 8

    def test_round_trip_100_random_frames(self):
        rng = np.random.default_rng(77)
        for i in range(100):
            d = int(rng.integers(1, 9))
            q = LatticeQuantizer(dimension=d, max_error=0.05, clamp_radius=2.0)
            frame = random_frame(rng, q, int(rng.integers(0, 30)),
                                 frame_index=i, new_entry=bool(rng.integers(0, 2)))
            data, _ = encode_frame(frame, q)
            assert decode_frame(data, q) == frame

    def test_refined_updates_not_wire_encodable(self):
        q = LatticeQuantizer(dimension=2, max_error=0.1, clamp_radius=1.0)
        frame = Frame(frame_index=0, checkpoint_code=DictIndex(0), checkpoint_time=0)
        frame.append_update(QuantizedUpdate(indices=np.array([1, 0]), refinement_level=1))
        frame.seal()
        with pytest.raises(ValueError):
            encode_frame(frame, q)


class TestRefinement:
    def test_already_exact_gives_zero_corrections(self):
        q = LatticeQuantizer(dimension=3, max_error=0.3, clamp_radius=5.0)
        delta = np.array([2, -1, 0]) * q.step
        base = quantize_update(q, delta)
        chunk = refine_update(q, delta, base)
        np.testing.assert_array_equal(chunk.correction_indices, 0)
        assert chunk.level == 1

    def test_one_dimensional_hand_case(self):
        # s = 0.2, true delta 0.07: base index 0 (error 0.07), refined
        # index 1 at step 0.1 (error 0.03)
        q = LatticeQuantizer(dimension=1, max_error=0.1, clamp_radius=1.0)
        base = quantize_update(q, np.array([0.07]))
        assert base.indices[0] == 0
        chunk = refine_update(q, np.array([0.07]), base)
        refined = apply_refinement(base, chunk)
        assert refined.indices[0] == 1
        assert refined.refinement_level == 1
        recon = dequantize_update(q, refined)
        assert abs(recon[0] - 0.07) == pytest.approx(0.03, abs=1e-12)
        assert abs(recon[0] - 0.07) <= 0.05

    def test_corrections_stay_in_unit_range(self):
        q = LatticeQuantizer(dimension=6, max_error=0.2, clamp_radius=3.0)
        rng = np.random.default_rng(3)
        for _ in range(200):
            delta = ball_point(rng, 6, q.clamp_radius)
            u = quantize_update(q, delta)
            for _ in range(4):
                chunk = refine_update(q, delta, u)
                assert np.all(np.abs(chunk.correction_indices) <= 1)
                u = apply_refinement(u, chunk)

    @pytest.mark.parametrize("d,eps", [(2, 0.5), (4, 0.1)])
    def test_geometric_error_decay(self, d, eps):
        q = LatticeQuantizer(dimension=d, max_error=eps, clamp_radius=10 * eps)
        rng = np.random.default_rng(d)
        for _ in range(300):
            delta = ball_point(rng, d, q.clamp_radius)
            u = quantize_update(q, delta)
            for r in range(1, 7):
                u = apply_refinement(u, refine_update(q, delta, u))
                err = np.linalg.norm(dequantize_update(q, u) - delta)
                assert err <= eps / 2 ** r

    def test_stale_base_rejected(self):
        q = LatticeQuantizer(dimension=1, max_error=0.1, clamp_radius=2.0)
        stale = QuantizedUpdate(indices=np.array([5]))  # reconstructs 1.0
        with pytest.raises(ValueError):
            refine_update(q, np.array([0.0]), stale)
