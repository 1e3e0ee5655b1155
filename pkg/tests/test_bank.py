import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lfb.bank import (
    BadMagicError, FeatureBank, InconsistentBankError, TruncatedBankError, VersionMismatchError,
    WindowSpec, bank_from_stream, pad_and_mask,
)
from oracles import window_steps


def random_bank(T, d, max_rows=3, seed=0, rate=1.0):
    rng = np.random.default_rng(seed)
    bank = FeatureBank(d, rate)
    for _ in range(T):
        bank.append_step(rng.normal(size=(int(rng.integers(0, max_rows + 1)), d)))
    return bank


def one_row_bank(T, d=2):
    bank = FeatureBank(d)
    for t in range(T):
        bank.append_step(np.full((1, d), float(t)))
    return bank


class TestAppend:
    def test_first_step(self):
        bank = FeatureBank(512)
        bank.append_step(np.ones((3, 512)))
        assert bank.T == 1 and bank.counts().tolist() == [3]

    def test_empty_step(self):
        bank = FeatureBank(512)
        bank.append_step(np.zeros((0, 512)))
        assert bank.T == 1 and bank.step(0).shape == (0, 512)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            FeatureBank(4).append_step(np.ones((2, 5)))

    def test_fifteen_minute_video(self):
        bank = FeatureBank(8, steps_per_second=1.0)
        for _ in range(900):
            bank.append_step(np.zeros((1, 8)))
        assert bank.T == 900 and bank.T / bank.steps_per_second == 15 * 60

    def test_stored_steps_are_read_only_copies(self):
        rows = np.ones((2, 3))
        bank = FeatureBank(3)
        bank.append_step(rows)
        rows[:] = 7
        assert np.all(bank.step(0) == 1)
        with pytest.raises(ValueError):
            bank.step(0)[0, 0] = 5


class TestWindow:
    def test_interior_batch(self):
        win = one_row_bank(5).window(2, WindowSpec(1, "batch"))
        assert win.n == 3 and win.provenance[:, 0].tolist() == [1, 2, 3]

    def test_boundary_batch(self):
        win = one_row_bank(5).window(0, WindowSpec(1, "batch"))
        assert win.provenance[:, 0].tolist() == [0, 1]

    def test_causal_end(self):
        win = one_row_bank(5).window(4, WindowSpec(1, "causal"))
        assert win.provenance[:, 0].tolist() == [2, 3, 4]

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            one_row_bank(5).window(5, WindowSpec(1))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            WindowSpec(-1)
        with pytest.raises(ValueError):
            WindowSpec(1, "centred")
        assert WindowSpec(3).size == 7

    @pytest.mark.parametrize("mode", ["batch", "causal"])
    def test_membership_exhaustive(self, mode):
        for T in range(1, 21):
            bank = random_bank(T, 2, seed=T)
            for w in range(0, 5):
                for t in range(T):
                    win = bank.window(t, WindowSpec(w, mode))
                    expected = window_steps(T, t, w, mode)
                    assert set(win.provenance[:, 0].tolist()) <= expected
                    assert win.n == sum(bank.counts()[s] for s in expected)
                    # Rows appear in step order and keep their within-step order.
                    assert [tuple(p) for p in win.provenance] == sorted(tuple(p) for p in win.provenance)
                    for (s, r), row in zip(win.provenance, win.rows):
                        assert np.array_equal(row, bank.step(s)[r])
                    if mode == "causal":
                        assert all(s <= t for s in win.provenance[:, 0])

    def test_window_does_not_mutate(self):
        bank = random_bank(10, 3, seed=1)
        before = bank.to_bytes()
        for t in range(10):
            bank.window(t, WindowSpec(2, "batch")).rows.sum()
        assert bank.to_bytes() == before

    def test_all_empty_window(self):
        bank = FeatureBank(3)
        for _ in range(4):
            bank.append_step(np.zeros((0, 3)))
        win = bank.window(2, WindowSpec(1))
        assert win.rows.shape == (0, 3) and win.provenance.shape == (0, 2)


class TestPadAndMask:
    def test_two_windows(self):
        bank = FeatureBank(2)
        for n in (3, 5):
            bank.append_step(np.ones((n, 2)))
        batch, mask = pad_and_mask([bank.gather(0, 0), bank.gather(1, 1)])
        assert batch.shape == (2, 5, 2)
        assert mask.astype(int).tolist() == [[1, 1, 1, 0, 0], [1] * 5]
        assert np.all(batch[0, 3:] == 0)

    def test_single_window(self):
        win = random_bank(3, 2, seed=4, max_rows=2).gather(0, 2)
        batch, mask = pad_and_mask([win])
        assert batch.shape == (1, win.n, 2) and mask.all()

    def test_explicit_n_max(self):
        win = one_row_bank(3).gather(0, 2)
        assert pad_and_mask([win], n_max=6)[0].shape == (1, 6, 2)
        with pytest.raises(ValueError):
            pad_and_mask([win], n_max=2)

    def test_mixed_dimensions_rejected(self):
        with pytest.raises(ValueError):
            pad_and_mask([one_row_bank(1, 2).gather(0, 0), one_row_bank(1, 3).gather(0, 0)])


class TestSerialization:
    def test_round_trip(self):
        bank = random_bank(10, 64, seed=3, rate=2.0)
        again = FeatureBank.from_bytes(bank.to_bytes())
        assert again == bank and again.to_bytes() == bank.to_bytes()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 30), st.integers(1, 9), st.integers(0, 10_000),
           st.sampled_from([0.5, 1.0, 2.0, 29.97]))
    def test_round_trip_property(self, T, d, seed, rate):
        bank = random_bank(T, d, seed=seed, rate=rate)
        buf = io.BytesIO()
        bank.serialize(buf)
        buf.seek(0)
        again = FeatureBank.deserialize(buf)
        assert again == bank
        for t in range(T):
            assert again.step(t).tobytes() == bank.step(t).tobytes()

    def test_file_round_trip(self, tmp_path):
        bank = random_bank(5, 4, seed=9)
        bank.save(tmp_path / "b.lfbk")
        assert FeatureBank.load(tmp_path / "b.lfbk") == bank

    def test_header_layout(self):
        data = one_row_bank(2, 3).to_bytes()
        assert struct.unpack_from("<4sIIIf", data) == (b"LFBK", 1, 3, 2, 1.0)

    def test_file_size_arithmetic(self):
        rng = np.random.default_rng(0)
        bank = FeatureBank(2048)
        for _ in range(900):
            bank.append_step(rng.normal(size=(3, 2048)).astype(np.float32))
        assert len(bank.to_bytes()) == 20 + 900 * 4 + 900 * 3 * 2048 * 4

    def test_bad_magic(self):
        data = bytearray(one_row_bank(2).to_bytes())
        data[:4] = b"NOPE"
        with pytest.raises(BadMagicError):
            FeatureBank.from_bytes(bytes(data))

    def test_version_mismatch(self):
        data = bytearray(one_row_bank(2).to_bytes())
        struct.pack_into("<I", data, 4, 2)
        with pytest.raises(VersionMismatchError):
            FeatureBank.from_bytes(bytes(data))

    @pytest.mark.parametrize("cut", [2, 10, 21, 25, -1])
    def test_truncation(self, cut):
        data = one_row_bank(3).to_bytes()
        with pytest.raises(TruncatedBankError):
            FeatureBank.from_bytes(data[:cut])

    def test_trailing_bytes_are_inconsistent(self):
        with pytest.raises(InconsistentBankError):
            FeatureBank.from_bytes(one_row_bank(2).to_bytes() + b"\x00" * 4)

    def test_zero_dimension_is_inconsistent(self):
        data = bytearray(one_row_bank(1).to_bytes()[:20])
        struct.pack_into("<I", data, 8, 0)
        struct.pack_into("<I", data, 12, 0)
        with pytest.raises(InconsistentBankError):
            FeatureBank.from_bytes(bytes(data))

    def test_error_classes_are_distinct(self):
        classes = {BadMagicError, VersionMismatchError, TruncatedBankError, InconsistentBankError}
        assert len(classes) == 4
        for a in classes:
            for b in classes - {a}:
                assert not issubclass(a, b)


class TestStream:
    def stream(self, duration, fps, d=4, rows_per_frame=2):
        frames = int(duration * fps)
        times = (np.arange(frames) + 0.5) / fps
        index = np.repeat(np.arange(frames), rows_per_frame)
        feats = np.arange(index.size * d, dtype=np.float32).reshape(-1, d)
        return times, index, feats

    def test_one_step_per_second_over_900_seconds(self):
        times, index, feats = self.stream(900, 2)
        assert bank_from_stream(times, index, feats, 900, 1.0).T == 900

    def test_two_steps_per_second_over_30_seconds(self):
        times, index, feats = self.stream(30, 10)
        bank = bank_from_stream(times, index, feats, 30, 2.0)
        assert bank.T == 60 and bank.steps_per_second == 2.0

    def test_empty_stream(self):
        bank = bank_from_stream([], [], np.zeros((0, 4)), 0.0, 1.0)
        assert bank.T == 0
        assert FeatureBank.from_bytes(bank.to_bytes()) == bank

    def test_nearest_frame_to_interval_centre(self):
        times = np.array([0.1, 0.45, 0.9, 1.6])
        index = np.array([0, 1, 2, 3])
        feats = np.arange(4, dtype=np.float32).reshape(4, 1)
        bank = bank_from_stream(times, index, feats, 2.0, 1.0)
        # Centres at 0.5 and 1.5.
        assert bank.step(0).tolist() == [[1.0]] and bank.step(1).tolist() == [[3.0]]

    def test_bad_frame_index(self):
        with pytest.raises(InconsistentBankError):
            bank_from_stream([0.0], [3], np.zeros((1, 2)), 1.0, 1.0)
