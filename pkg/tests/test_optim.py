import io

import numpy as np
import numpy.testing as npt
import pytest

from microbianet import tensorio
from microbianet.errors import CheckpointError, ParameterError
from microbianet.optim import AdamState, adam_step, kaiming_init, make_rng


class TestAdam:
    def test_zero_gradient_no_move(self):
        state = AdamState(learning_rate=0.1)
        p = {"w": np.array([1.0, -2.0, 3.0])}
        adam_step(state, p, {"w": np.zeros(3)})
        npt.assert_array_equal(p["w"], [1.0, -2.0, 3.0])
        assert state.step_count == 1

    def test_first_step_magnitude(self):
        # With g = 1 at t = 1 the bias corrections cancel and the step is
        # -lr * 1 / (1 + eps).
        state = AdamState(learning_rate=0.1)
        p = {"w": np.array([0.0])}
        adam_step(state, p, {"w": np.array([1.0])})
        npt.assert_allclose(p["w"], [-0.1], atol=1e-8)

    def test_minimizes_quadratic(self):
        state = AdamState(learning_rate=0.01)
        p = {"w": np.array([1.0])}
        losses = []
        for _ in range(100):
            losses.append(float(p["w"][0] ** 2))
            adam_step(state, p, {"w": 2.0 * p["w"]})
        assert abs(p["w"][0]) < 0.5
        # loss should broadly decrease over the run
        assert losses[-1] < losses[0]

    def test_step_count_increments(self):
        state = AdamState()
        p = {"w": np.zeros(2)}
        for i in range(5):
            adam_step(state, p, {"w": np.ones(2)})
            assert state.step_count == i + 1

    def test_coupled_weight_decay_shrinks(self):
        state = AdamState(learning_rate=0.01, weight_decay=5e-4)
        p = {"w": np.array([10.0])}
        adam_step(state, p, {"w": np.zeros(1)})
        assert p["w"][0] < 10.0

    def test_decoupled_weight_decay(self):
        state = AdamState(learning_rate=0.1, weight_decay=0.01, decoupled=True)
        p = {"w": np.array([10.0])}
        adam_step(state, p, {"w": np.zeros(1)})
        npt.assert_allclose(p["w"], [10.0 - 0.1 * 0.01 * 10.0])

    def test_bad_betas(self):
        with pytest.raises(ParameterError):
            AdamState(beta1=1.0)

    def test_moment_shapes_match(self):
        state = AdamState()
        p = {"w": np.zeros((3, 4))}
        adam_step(state, p, {"w": np.ones((3, 4))})
        assert state.first_moment["w"].shape == (3, 4)
        assert state.second_moment["w"].shape == (3, 4)


class TestKaiming:
    def test_std_matches_fan_in(self):
        rng = make_rng(100)
        draws = kaiming_init((100_000,), 2, rng, dtype=np.float64)
        assert abs(draws.std() - 1.0) <= 0.02
        assert abs(draws.mean()) <= 0.02

    def test_deterministic(self):
        a = kaiming_init((50, 50), 50, make_rng(7))
        b = kaiming_init((50, 50), 50, make_rng(7))
        assert a.tobytes() == b.tobytes()

    def test_fan_in_positive(self):
        with pytest.raises(ParameterError):
            kaiming_init((3,), 0, make_rng(0))


class TestRng:
    def test_same_seed_same_stream(self):
        a = make_rng(42).random(1000)
        b = make_rng(42).random(1000)
        assert a.tobytes() == b.tobytes()

    def test_streams_independent(self):
        a = make_rng(42, stream=0).random(10)
        b = make_rng(42, stream=1).random(10)
        assert a.tobytes() != b.tobytes()


class TestTensorDump:
    def test_roundtrip_f32(self):
        arr = make_rng(1).standard_normal((3, 4, 5)).astype(np.float32)
        buf = io.BytesIO()
        tensorio.write_tensor(buf, arr)
        buf.seek(0)
        back = tensorio.read_tensor(buf)
        assert back.dtype == np.dtype("<f4")
        npt.assert_array_equal(back, arr)

    def test_roundtrip_f64(self):
        arr = make_rng(2).standard_normal((7,))
        buf = io.BytesIO()
        tensorio.write_tensor(buf, arr)
        buf.seek(0)
        npt.assert_array_equal(tensorio.read_tensor(buf), arr)

    def test_header_is_json_line(self):
        buf = io.BytesIO()
        tensorio.write_tensor(buf, np.zeros((2, 2), dtype=np.float32))
        line = buf.getvalue().split(b"\n", 1)[0]
        import json

        header = json.loads(line)
        assert header == {"shape": [2, 2], "dtype": "f32", "layout": "row-major"}

    def test_truncated_payload(self):
        buf = io.BytesIO()
        tensorio.write_tensor(buf, np.ones((10,), dtype=np.float32))
        data = buf.getvalue()[:-8]
        with pytest.raises(CheckpointError):
            tensorio.read_tensor(io.BytesIO(data))

    def test_file_roundtrip(self, tmp_path):
        arr = make_rng(3).standard_normal((6, 2)).astype(np.float32)
        path = tmp_path / "t.bin"
        tensorio.dump_tensor(path, arr)
        npt.assert_array_equal(tensorio.load_tensor(path), arr)

    def test_unsupported_dtype(self):
        with pytest.raises(CheckpointError):
            tensorio.write_tensor(io.BytesIO(), np.zeros(3, dtype=np.int32))
