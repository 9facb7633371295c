import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgr import tensor as T
from lgr.checkpoint import MAGIC, Checkpoint, from_bytes, load_checkpoint, quantize, save_checkpoint, to_bytes
from lgr.config import DEEPFASHION_SCHEDULE, FLD_SCHEDULE, ModelConfig, SynthSpec, TrainConfig
from lgr.errors import ConfigError, ContractError, DataError, ValidationError
from lgr.graph import fld8
from lgr.layer import LgrOptions, as_tensors, init_lgr_params, orthogonality_penalty
from lgr.model import graph_for, init_params
from lgr.synth import Landmark, make_split
from lgr.training import AdamState, LOG_HEADER, adam_step, apply_affine, augment, lr_schedule, total_loss, train

TOY = ModelConfig(input_size=8, channels=(2, 2), C=2, d=2, num_stacks=1, clustering_depth=1, hierarchy="toy2", inject_after_block=2)
SMALL = ModelConfig(input_size=32, channels=(4, 8, 8), C=8, d=4, num_stacks=1, clustering_depth=2)
MIRROR = fld8().mirror()


@pytest.fixture(scope="module")
def tiny_data():
    return make_split(SynthSpec(image_size=32, clutter_density=1.0, seed=5), "train", 4)


class TestTotalLoss:
    def toy_params(self, W_p):
        p = as_tensors(init_params(TOY, 0))
        p["stack0.up0.W_p"] = T.Tensor(W_p)
        return p

    def test_perfect_and_orthonormal_is_zero(self):
        target = np.full((1, 1, 1, 2), 0.3)
        loss = total_loss(T.Tensor(target), target, self.toy_params([[0.6], [0.8]]), TOY, graph_for(TOY), 1.0)
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_zero_lambda_is_mse(self):
        rng = np.random.default_rng(0)
        pred, target = rng.uniform(0, 1, (2, 3, 3, 2)), rng.uniform(0, 1, (2, 3, 3, 2))
        loss = total_loss(T.Tensor(pred), target, self.toy_params([[5.0], [0.0]]), TOY, graph_for(TOY), 0.0)
        assert loss.item() == pytest.approx(np.mean((pred - target) ** 2), rel=1e-15)

    def test_one_pixel_hand_value(self):
        # (0.3 - 0.5)^2 = 0.04 and (0.9 - 1.0)^2 = 0.01 -> mse 0.025; W_p = (1, 1): (2 - 1)^2 = 1
        loss = total_loss(T.Tensor([[[[0.3, 0.9]]]]), [[[[0.5, 1.0]]]], self.toy_params([[1.0], [1.0]]), TOY, graph_for(TOY), 0.1)
        assert loss.item() == pytest.approx(0.025 + 0.1 * 1.0, rel=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            total_loss(T.zeros(1, 2, 2, 2), np.zeros((1, 2, 2, 3)), self.toy_params([[1.0], [0.0]]), TOY, graph_for(TOY), 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**30), st.floats(0, 2))
    def test_non_negative(self, seed, lam):
        rng = np.random.default_rng(seed)
        pred, target = rng.uniform(0, 1, (1, 2, 2, 2)), rng.uniform(0, 1, (1, 2, 2, 2))
        assert total_loss(T.Tensor(pred), target, self.toy_params(rng.normal(size=(2, 1))), TOY, graph_for(TOY), lam).item() >= 0


class TestAdam:
    cfg = TrainConfig()

    def test_first_step_hand_trace(self):
        p, _ = adam_step({"w": np.array(1.0)}, {"w": np.array(1.0)}, AdamState.zeros({"w": np.array(1.0)}), 1e-3, self.cfg)
        # m_hat = 1, v_hat = 1 -> w - lr / (1 + eps)
        assert p["w"] == pytest.approx(1 - 1e-3 / (1 + 1e-8), abs=1e-15)
        assert p["w"] == pytest.approx(0.999, abs=1e-10)

    def test_second_step_hand_trace(self):
        w = {"w": np.array(1.0)}
        p, s = adam_step(w, {"w": np.array(1.0)}, AdamState.zeros(w), 1e-3, self.cfg)
        p, s = adam_step(p, {"w": np.array(-2.0)}, s, 1e-3, self.cfg)
        m = 0.9 * 0.1 + 0.1 * -2.0
        v = 0.999 * 0.001 + 0.001 * 4.0
        mhat, vhat = m / (1 - 0.81), v / (1 - 0.999**2)
        assert s.step == 2
        assert p["w"] == pytest.approx(1 - 1e-3 / (1 + 1e-8) - 1e-3 * mhat / (np.sqrt(vhat) + 1e-8), abs=1e-15)

    def test_zero_gradient(self):
        w = {"w": np.array([1.0, -2.0])}
        state = AdamState({"w": np.array([0.5, 0.5])}, {"w": np.array([0.2, 0.2])}, 3)
        p, s = adam_step(w, {"w": np.zeros(2)}, state, 1e-3, self.cfg)
        np.testing.assert_allclose(s.m["w"], 0.45)
        np.testing.assert_allclose(s.v["w"], 0.2 * 0.999)
        assert np.all(np.abs(s.m["w"]) < 0.5)
        # momentum keeps moving the weights; with no history the weights stay put
        p0, _ = adam_step(w, {"w": np.zeros(2)}, AdamState.zeros(w), 1e-3, self.cfg)
        np.testing.assert_array_equal(p0["w"], w["w"])

    @pytest.mark.parametrize("lr", [0.0, 1e-20])
    def test_vanishing_lr_leaves_params(self, lr):
        rng = np.random.default_rng(0)
        w = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
        g = {k: rng.normal(size=v.shape) for k, v in w.items()}
        p, _ = adam_step(w, g, AdamState.zeros(w), lr, self.cfg)
        for k in w:
            np.testing.assert_allclose(p[k], w[k], rtol=0, atol=1e-12)

    def test_missing_gradient(self):
        w = {"a": np.ones(2), "b": np.ones(2)}
        with pytest.raises(ContractError, match="'b'"):
            adam_step(w, {"a": np.ones(2)}, AdamState.zeros(w), 1e-3, self.cfg)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        w = {"a": rng.normal(size=5)}
        gs = [{"a": rng.normal(size=5)} for _ in range(10)]

        def run():
            p, s = w, AdamState.zeros(w)
            for g in gs:
                p, s = adam_step(p, g, s, 1e-2, self.cfg)
            return p["a"]

        assert np.array_equal(run(), run())


class TestSchedule:
    def test_initial(self):
        assert lr_schedule(0, TrainConfig()) == 1e-3

    def test_fld_first_drop(self):
        cfg = TrainConfig(drop_every_epochs=FLD_SCHEDULE)
        assert lr_schedule(19, cfg) == 1e-3
        assert lr_schedule(20, cfg) == pytest.approx(1e-4, rel=1e-12)

    def test_deepfashion_two_drops(self):
        assert lr_schedule(25, TrainConfig(drop_every_epochs=DEEPFASHION_SCHEDULE)) == pytest.approx(1e-5, rel=1e-12)

    @pytest.mark.parametrize("field", ["lr0", "drop_factor", "eps", "sigma_g"])
    def test_rates_must_be_positive(self, field):
        with pytest.raises(ConfigError):
            replace(TrainConfig(), **{field: 0.0}).validate()

    def test_batch_size(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0).validate()


def fld8_landmarks(rng):
    return [Landmark(n, float(x), float(y)) for n, (x, y) in zip(fld8().leaves, rng.uniform(0.3, 0.7, (8, 2)))]


class TestAugment:
    def test_identity(self):
        rng = np.random.default_rng(0)
        img, lms = rng.uniform(0, 1, (16, 16, 3)), fld8_landmarks(rng)
        out, moved = apply_affine(img, lms, 1.0, 0.0, False, MIRROR)
        np.testing.assert_array_equal(out, img)
        assert moved == lms

    def test_hflip_swaps_pair(self):
        lms = [Landmark(n, 0.5, 0.5) for n in fld8().leaves]
        lms[0] = Landmark("L.Collar", 0.2, 0.3)
        _, moved = apply_affine(np.zeros((8, 8, 3)), lms, 1.0, 0.0, True, MIRROR)
        by = {m.name: m for m in moved}
        assert by["R.Collar"].x == pytest.approx(0.8, abs=1e-15)
        assert by["R.Collar"].y == pytest.approx(0.3, abs=1e-15)
        assert by["L.Collar"].x == pytest.approx(0.5)

    def test_hflip_mirrors_pixels(self):
        img = np.random.default_rng(1).uniform(0, 1, (6, 6, 3))
        out, _ = apply_affine(img, [], 1.0, 0.0, True, MIRROR)
        np.testing.assert_allclose(out, img[:, ::-1], atol=1e-12)

    def test_rotation_fixes_centre(self):
        _, moved = apply_affine(np.zeros((9, 9, 3)), [Landmark("c", 0.5, 0.5)], 1.0, 90.0, False, {})
        assert (moved[0].x, moved[0].y) == pytest.approx((0.5, 0.5), abs=1e-15)

    def test_rotation_90_moves_pixels_consistently(self):
        img = np.zeros((9, 9, 1))
        img[1, 4] = 1.0  # above the centre: normalized (0.5, 1.5/9)
        out, moved = apply_affine(img, [Landmark("p", 0.5, 1.5 / 9)], 1.0, 90.0, False, {})
        r, c = np.unravel_index(np.argmax(out[..., 0]), (9, 9))
        assert (moved[0].x * 9 - 0.5, moved[0].y * 9 - 0.5) == pytest.approx((c, r), abs=1e-9)

    def test_out_of_frame_becomes_invisible(self):
        _, moved = apply_affine(np.zeros((8, 8, 3)), [Landmark("p", 0.98, 0.5)], 1.1, 0.0, False, {})
        assert moved[0].x > 1 and not moved[0].visible

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**30))
    def test_preserves_count_and_pairs(self, seed):
        rng = np.random.default_rng(seed)
        lms = fld8_landmarks(rng)
        _, moved = augment(np.zeros((8, 8, 3)), lms, rng, TrainConfig(hflip_prob=0.5), MIRROR)
        assert [m.name for m in moved] == [m.name for m in lms]
        for a, b in fld8().symmetric_pairs:
            assert MIRROR[a] == b and MIRROR[b] == a

    def test_draws_three_numbers(self):
        a, b = np.random.default_rng(3), np.random.default_rng(3)
        augment(np.zeros((8, 8, 3)), [], a, TrainConfig(), MIRROR)
        b.uniform(size=3)
        assert a.uniform() == b.uniform()


class TestOrthogonalityFeasibility:
    def test_gradient_descent_reaches_tolerance(self):
        g = graph_for(ModelConfig())
        opts = LgrOptions()
        W = {k: v for k, v in init_lgr_params(g, 4, 3, opts, np.random.default_rng(0)).items() if k.endswith(".W_p")}
        assert len(W) == 3
        for _ in range(1000):
            pt = as_tensors(W, requires_grad=True)
            with T.Tape() as tape:
                pen = orthogonality_penalty(pt, g, opts)
                grads = tape.backward(pen, wrt=pt.values())
            W = {k: W[k] - 1e-2 * grads[t] for k, t in pt.items()}
        final = orthogonality_penalty(as_tensors(W), g, opts).item()
        assert final <= 1e-3


class TestCheckpoint:
    def sample(self):
        p = init_params(TOY, 0)
        state = AdamState({k: np.full_like(v, 0.25) for k, v in p.items()}, {k: np.full_like(v, 0.5) for k, v in p.items()}, 7)
        return Checkpoint.snapshot(p, TOY, TrainConfig(epochs=3), state.step, state.m, state.v)

    def test_round_trip(self, tmp_path):
        ck = self.sample()
        back = load_checkpoint(save_checkpoint(ck, tmp_path / "a.ckpt"))
        assert back.model == ck.model and back.train == ck.train and back.step == 7
        for group in ("params", "m", "v"):
            a, b = getattr(ck, group), getattr(back, group)
            assert a.keys() == b.keys()
            for k in a:
                assert np.array_equal(a[k], b[k])

    def test_layout(self):
        buf = to_bytes(self.sample())
        assert buf[:8] == MAGIC
        assert struct.unpack("<I", buf[8:12])[0] == 1
        assert struct.unpack("<Q", buf[12:20])[0] == 7

    def test_quantized_to_float32(self):
        x = np.array([0.1, 1 / 3])
        assert np.array_equal(quantize(x), x.astype(np.float32).astype(np.float64))

    @pytest.mark.parametrize("mutate", [lambda b: b"XXXXXXXX" + b[8:], lambda b: b[:-3], lambda b: b + b"\0"])
    def test_corruption_rejected(self, mutate):
        with pytest.raises(ValidationError):
            from_bytes(mutate(to_bytes(self.sample())))

    def test_orphan_moment(self):
        ck = self.sample()
        ck.m["ghost"] = np.zeros(2)
        with pytest.raises(ValidationError, match="ghost"):
            from_bytes(to_bytes(ck))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="nope"):
            load_checkpoint(tmp_path / "nope.ckpt")


class TestTrainLoop:
    def test_zero_epochs_returns_init(self, tiny_data):
        res = train(SMALL, TrainConfig(epochs=0, seed=3), tiny_data.subset([0]))
        init = init_params(SMALL, 3)
        assert res.steps == 0 and res.log_lines == [LOG_HEADER]
        for k, v in init.items():
            assert np.array_equal(res.best.params[k], quantize(v))

    def test_deterministic_logs(self, tiny_data, tmp_path):
        cfg = TrainConfig(epochs=2, batch_size=2, seed=1)
        a = train(SMALL, cfg, tiny_data, out_dir=tmp_path / "a")
        b = train(SMALL, cfg, tiny_data, out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()
        assert a.log_lines[0] == LOG_HEADER and len(a.log_lines) == 3
        epoch, lr, loss, ne = a.log_lines[1].split(",")
        assert int(epoch) == 0 and float(lr) == 1e-3 and float(loss) > 0 and float(ne) >= 0

    def test_loss_decreases(self, tiny_data):
        res = train(SMALL, TrainConfig(epochs=15, batch_size=4, augment=False, lr0=3e-3), tiny_data)
        losses = [h["train_loss"] for h in res.history]
        assert losses[-1] < losses[0]

    def test_max_steps(self, tiny_data):
        res = train(SMALL, TrainConfig(epochs=5, batch_size=1, max_steps=3), tiny_data)
        assert res.steps == 3 and len(res.history) == 1

    def test_early_stopping(self, tiny_data):
        res = train(SMALL, TrainConfig(epochs=30, batch_size=4, lr0=1e-12, patience=2, decode="argmax"), tiny_data)
        assert res.stopped_early and len(res.history) < 30

    def test_empty_dataset(self, tiny_data):
        with pytest.raises(DataError, match="empty"):
            train(SMALL, TrainConfig(epochs=1), tiny_data.subset([]))

    def test_hierarchy_mismatch(self, tiny_data):
        with pytest.raises(DataError, match="hierarchy"):
            train(replace(SMALL, hierarchy="ffld32"), TrainConfig(epochs=1), tiny_data)

    def test_unwritable_output(self, tiny_data, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(DataError, match="file"):
            train(SMALL, TrainConfig(epochs=0), tiny_data, out_dir=blocker / "sub")
