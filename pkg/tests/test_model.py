import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazetarget import model as gm
from gazetarget.model import ConfigError, ConvLSTMState, GazeNet, ModelConfig
from gazetarget.tensor import Tensor, backward, ops
from gazetarget.tensor.gradcheck import numeric_grad, relative_error

TINY = ModelConfig(
    input_size=16,
    head_size=8,
    attention_grid=4,
    heatmap_size=16,
    backbone_channels=(3, 4),
    encode_channels=3,
    deconv_layers=2,
    deconv_channels=(3,),
    inframe_channels=(2, 2),
)

GRID7 = ModelConfig(
    input_size=56,
    head_size=56,
    attention_grid=7,
    heatmap_size=56,
    backbone_channels=(4, 4, 4),
    encode_channels=4,
    deconv_layers=3,
    deconv_channels=(4, 4),
)


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def frames_and_boxes(n, size=16, seed=0):
    rng = np.random.default_rng(seed)
    frames = rng.integers(0, 256, (n, size, size, 3), dtype=np.uint8)
    boxes = [(0.1, 0.2, 0.4, 0.5)] * n
    return frames, boxes


class TestConfig:
    def test_default_valid(self):
        cfg = ModelConfig().validate()
        assert cfg.decoder_sides() == [8, 16, 32, 64]

    def test_full_scale_preset(self):
        cfg = ModelConfig.full_scale().validate()
        assert cfg.attention_grid == 7
        assert cfg.decoder_sides()[-1] == 64
        assert cfg.input_size // 2**cfg.stages == 7

    def test_grid_mismatch_rejected(self):
        with pytest.raises(ConfigError, match="attention_grid"):
            ModelConfig(attention_grid=7).validate()

    def test_decoder_mismatch_rejected(self):
        with pytest.raises(ConfigError, match="heatmap_size"):
            ModelConfig(heatmap_size=32).validate()

    def test_json_roundtrip(self):
        cfg = ModelConfig.full_scale()
        assert ModelConfig.from_json(cfg.to_json()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            ModelConfig.from_json({"bogus": 1})


class TestHeadPosition:
    def test_example_box(self):
        img = gm.head_position_image((0.25, 0.25, 0.5, 0.75), 8)
        expected = np.zeros((8, 8))
        expected[2:6, 2:4] = 1
        np.testing.assert_array_equal(img[0], expected)

    def test_tiny_box_is_one_pixel(self):
        assert gm.head_position_image((0.5, 0.5, 0.501, 0.501), 16).sum() == 1

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=100, deadline=None)
    def test_pixel_count_oracle(self, a, b, c, d):
        x0, x1 = sorted((a, c))
        y0, y1 = sorted((b, d))
        size = 32
        img = gm.head_position_image((x0, y0, x1, y1), size)
        centers = (np.arange(size) + 0.5) / size
        # a pixel is inside when its center is inside the half-open box [x0, x1)
        nx = max(int(((centers >= x0) & (centers < x1)).sum()), 1)
        ny = max(int(((centers >= y0) & (centers < y1)).sum()), 1)
        assert img.sum() == nx * ny
        assert set(np.unique(img)) <= {0.0, 1.0}

    def test_position_feature_all_ones(self):
        feat = gm.head_position_feature(Tensor(np.ones((1, 1, 8, 8))))
        np.testing.assert_array_equal(feat.data, [[1.0]])

    def test_position_feature_length(self):
        feat = gm.head_position_feature(Tensor(np.zeros((2, 1, 64, 64))))
        assert feat.shape == (2, 64)

    def test_position_feature_marks_cell(self):
        img = np.zeros((1, 1, 64, 64))
        img[0, 0, 9, 17] = 1
        feat = gm.head_position_feature(Tensor(img)).data.reshape(8, 8)
        assert feat[1, 2] == 1 and feat.sum() == 1


class TestAttention:
    def test_zero_weights_uniform(self):
        params = gm.init_params(GRID7, 0, np.float64)
        params["attention_fc.w"].data[:] = 0
        params["attention_fc.b"].data[:] = 0
        rng = np.random.default_rng(0)
        head = Tensor(rng.standard_normal((2, 4)))
        pos = Tensor(rng.standard_normal((2, GRID7.position_feature_size)))
        attn = gm.attention_weights(params, head, pos).data
        np.testing.assert_allclose(attn, 1 / 49, atol=1e-15)

    @given(st.integers(0, 10_000), st.floats(0.01, 100))
    @settings(max_examples=30, deadline=None)
    def test_simplex(self, seed, scale):
        params = gm.init_params(TINY, seed, np.float64)
        params["attention_fc.w"].data *= scale
        rng = np.random.default_rng(seed)
        attn = gm.attention_weights(params, Tensor(rng.standard_normal((3, 4)) * scale),
                                    Tensor(rng.standard_normal((3, TINY.position_feature_size)))).data
        assert np.all(attn >= 0)
        np.testing.assert_allclose(attn.sum(1), 1.0, atol=1e-12)

    def test_full_scale_scene_side(self):
        cfg = ModelConfig.full_scale()
        assert cfg.input_size // 2 ** cfg.stages == 7
        # trace the stride-2 convolutions with pad 1 and kernel 3
        side = cfg.input_size
        for _ in range(cfg.stages):
            side = (side + 2 - 3) // 2 + 1
        assert side == 7

    def test_scene_feature_shape(self):
        params = gm.init_params(GRID7, 0)
        out = gm.scene_features(params, Tensor(np.zeros((1, 3, 56, 56), np.float32)),
                                Tensor(np.zeros((1, 1, 56, 56), np.float32)), GRID7.stages)
        assert out.shape == (1, 4, 7, 7)

    def test_zero_input_zero_bias_zero_features(self):
        params = gm.init_params(GRID7, 0)
        out = gm.scene_features(params, Tensor(np.zeros((1, 3, 56, 56), np.float32)),
                                Tensor(np.zeros((1, 1, 56, 56), np.float32)), GRID7.stages)
        assert np.all(out.data == 0)

    def test_receptive_field_reaches_corners(self):
        # a gradient from the top-left output cell must reach a pixel well beyond its own stride block
        params = gm.init_params(GRID7, 0, np.float64)
        scene = Tensor(np.random.default_rng(0).standard_normal((1, 3, 56, 56)), requires_grad=True)
        out = gm.scene_features(params, scene, Tensor(np.zeros((1, 1, 56, 56))), GRID7.stages)
        backward(ops.sum(ops.mul(out, _cell(0, 0))))
        touched = np.argwhere(np.abs(scene.grad).sum((0, 1)) > 0)
        assert touched.max() >= 8


def _cell(r, c):
    m = np.zeros((1, 1, 7, 7))
    m[0, 0, r, c] = 1
    return m


class TestFuse:
    def test_uniform_scales_by_inverse_cells(self):
        rng = np.random.default_rng(0)
        scene = rng.standard_normal((2, 3, 4, 4))
        head = rng.standard_normal((2, 5))
        out = gm.fuse(Tensor(scene), Tensor(np.full((2, 16), 1 / 16)), Tensor(head)).data
        np.testing.assert_allclose(out[:, :3], scene / 16, atol=1e-15)
        np.testing.assert_array_equal(out[:, 3:], np.broadcast_to(head[:, :, None, None], (2, 5, 4, 4)))

    def test_one_hot_keeps_single_cell(self):
        scene = np.random.default_rng(1).standard_normal((1, 2, 3, 3))
        attn = np.zeros((1, 9))
        attn[0, 4] = 1
        out = gm.fuse(Tensor(scene), Tensor(attn), Tensor(np.zeros((1, 1)))).data
        expected = np.zeros_like(scene)
        expected[:, :, 1, 1] = scene[:, :, 1, 1]
        np.testing.assert_array_equal(out[:, :2], expected)

    def test_cell_count_mismatch(self):
        with pytest.raises(ops.ShapeError):
            gm.fuse(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 1))))


class TestConvLSTM:
    def setup_method(self):
        rng = np.random.default_rng(2)
        self.e, self.k = 3, 3
        self.x = rng.standard_normal((2, self.e, 5, 5))
        self.h = rng.standard_normal((2, self.e, 5, 5))
        self.c = rng.standard_normal((2, self.e, 5, 5))
        self.wx = rng.standard_normal((4 * self.e, self.e, 3, 3)) * 0.3
        self.wh = rng.standard_normal((4 * self.e, self.e, 3, 3)) * 0.3
        self.b = rng.standard_normal(4 * self.e)

    def _conv(self, x, w):
        # direct loop correlation, pad 1
        b, cin, hh, ww = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        out = np.zeros((b, w.shape[0], hh, ww))
        for i in range(hh):
            for j in range(ww):
                out[:, :, i, j] = np.einsum("bcuv,ocuv->bo", xp[:, :, i:i + 3, j:j + 3], w)
        return out

    def test_formula_oracle(self):
        h, c = gm.convlstm_cell(Tensor(self.x), Tensor(self.h), Tensor(self.c),
                                Tensor(self.wx), Tensor(self.wh), Tensor(self.b))
        z = self._conv(self.x, self.wx) + self._conv(self.h, self.wh) + self.b[None, :, None, None]
        e = self.e
        i, f, o, g = sigmoid(z[:, :e]), sigmoid(z[:, e:2 * e]), sigmoid(z[:, 2 * e:3 * e]), np.tanh(z[:, 3 * e:])
        c_ref = f * self.c + i * g
        np.testing.assert_allclose(c.data, c_ref, atol=1e-10)
        np.testing.assert_allclose(h.data, o * np.tanh(c_ref), atol=1e-10)

    def test_saturated_gates(self):
        e = self.e
        b = np.concatenate([np.full(e, 50.0), np.full(e, -50.0), np.full(e, 50.0), np.full(e, 50.0)])
        zeros = np.zeros_like(self.wx)
        h, c = gm.convlstm_cell(Tensor(self.x), Tensor(self.h), Tensor(self.c), Tensor(zeros), Tensor(zeros),
                                Tensor(b))
        # input open, forget closed, candidate 1: c' = 1, h' = tanh(1)
        np.testing.assert_allclose(c.data, 1.0, atol=1e-6)
        np.testing.assert_allclose(h.data, np.tanh(1.0), atol=1e-6)

    def test_forget_open_keeps_cell(self):
        e = self.e
        b = np.concatenate([np.full(e, -50.0), np.full(e, 50.0), np.full(e, 50.0), np.zeros(e)])
        zeros = np.zeros_like(self.wx)
        _, c = gm.convlstm_cell(Tensor(self.x), Tensor(self.h), Tensor(self.c), Tensor(zeros), Tensor(zeros),
                                Tensor(b))
        np.testing.assert_allclose(c.data, self.c, atol=1e-6)

    def test_zero_weights_zero_state(self):
        zeros = np.zeros_like(self.wx)
        h, c = gm.convlstm_cell(Tensor(self.x), None, None, Tensor(zeros), Tensor(zeros), Tensor(np.zeros(12)))
        assert np.all(h.data == 0) and np.all(c.data == 0)

    def test_none_state_equals_zero_state(self):
        zero = np.zeros_like(self.h)
        a = gm.convlstm_cell(Tensor(self.x), None, None, Tensor(self.wx), Tensor(self.wh), Tensor(self.b))
        b = gm.convlstm_cell(Tensor(self.x), Tensor(zero), Tensor(zero), Tensor(self.wx), Tensor(self.wh),
                             Tensor(self.b))
        np.testing.assert_allclose(a[0].data, b[0].data, atol=1e-14)
        np.testing.assert_allclose(a[1].data, b[1].data, atol=1e-14)


class TestHeads:
    def test_decode_reaches_heatmap(self):
        cfg = ModelConfig()
        params = gm.init_params(cfg, 0)
        out = gm.decode(params, Tensor(np.zeros((2, cfg.encode_channels, cfg.attention_grid, cfg.attention_grid), np.float32)), cfg.geometry)
        assert out.shape == (2, 1, 64, 64)

    @pytest.mark.parametrize("alpha,expected", [(1.0, [0.0, 0.3, 1.0]), (0.0, [0.0, 0.0, 0.0]),
                                                (0.5, [0.0, 0.0, 0.5])])
    def test_modulate_examples(self, alpha, expected):
        raw = Tensor(np.array([[0.0, 0.3, 1.0]]))
        out = gm.modulate(raw, Tensor(np.array([[alpha]])))
        np.testing.assert_allclose(out.data[0], expected, atol=1e-15)

    @given(st.floats(0, 1), st.integers(0, 1000))
    @settings(max_examples=50, deadline=None)
    def test_modulate_properties(self, alpha, seed):
        raw = np.random.default_rng(seed).random((1, 1, 6, 6))
        out = gm.modulate(Tensor(raw), Tensor(np.array([[alpha]]))).data
        assert np.all(out >= 0) and np.all(out <= raw + 1e-15)
        assert out.max() <= alpha + 1e-15


class TestNetwork:
    def test_forward_shapes(self):
        net = GazeNet(TINY, seed=0)
        frames, boxes = frames_and_boxes(3)
        out, state = net.forward_frame(gm.prepare_inputs(frames, boxes, TINY))
        assert out.heatmap.shape == (3, 1, 16, 16)
        assert out.alpha.shape == (3, 1)
        assert np.all((out.raw_map.data >= 0) & (out.raw_map.data <= 1))
        assert len(state.layers) == 2

    def test_no_attention_is_uniform(self):
        cfg = ModelConfig(**{**TINY.to_json(), "use_attention": False})
        net = GazeNet(cfg, seed=0)
        frames, boxes = frames_and_boxes(2)
        out, _ = net.forward_frame(gm.prepare_inputs(frames, boxes, cfg))
        np.testing.assert_allclose(out.attention.data, 1 / 16)

    def test_single_frame_sequence_matches_forward_frame(self):
        net = GazeNet(TINY, seed=1)
        frames, boxes = frames_and_boxes(1)
        seq = net.forward_sequence(list(frames), boxes)[0]
        out, _ = net.forward_frame(gm.prepare_inputs(frames, boxes, TINY))
        np.testing.assert_array_equal(seq.heatmap, out.heatmap.data[0, 0])
        assert seq.alpha == float(out.alpha.data[0, 0])

    def test_sequence_skips_missing_boxes(self, caplog):
        net = GazeNet(TINY, seed=1)
        frames, boxes = frames_and_boxes(3)
        boxes = [boxes[0], None, boxes[2]]
        out = net.forward_sequence(list(frames), boxes)
        assert out[1] is None and out[0] is not None and out[2] is not None
        assert "skipped 1 frame" in caplog.text

    def test_batched_sequences_match_single(self):
        net = GazeNet(TINY, seed=2)
        frames, boxes = frames_and_boxes(4, seed=3)
        single = net.forward_sequence(list(frames), boxes)
        steps = [gm.prepare_inputs(np.stack([f, f]), [b, b], TINY) for f, b in zip(frames, boxes)]
        batched = net.forward_batch_sequences(steps)
        for s, b in zip(single, batched):
            np.testing.assert_allclose(s.heatmap, b.heatmap.data[1, 0], atol=1e-6)

    def test_deterministic(self):
        frames, boxes = frames_and_boxes(2)
        a = GazeNet(TINY, seed=5).forward_frame(gm.prepare_inputs(frames, boxes, TINY))[0]
        b = GazeNet(TINY, seed=5).forward_frame(gm.prepare_inputs(frames, boxes, TINY))[0]
        np.testing.assert_array_equal(a.heatmap.data, b.heatmap.data)
        np.testing.assert_array_equal(a.alpha.data, b.alpha.data)

    def test_end_to_end_gradient(self):
        params = gm.init_params(TINY, 0, np.float64)
        # zero biases put relu inputs exactly on the kink wherever a patch is all zero
        brng = np.random.default_rng(9)
        for name, t in params:
            if name.endswith(".b"):
                t.data += 0.1 * brng.standard_normal(t.shape)
        net = GazeNet(TINY, params)
        frames, boxes = frames_and_boxes(2, seed=4)
        steps = [gm.prepare_inputs(frames, boxes, TINY).astype(np.float64)] * 2
        target = np.random.default_rng(0).random((2, 1, 16, 16))
        labels = np.array([[1.0], [0.0]])

        def loss(_x=None):
            state = net.zero_state()
            total = None
            for inputs in steps:
                out, state = net.forward_frame(inputs, state)
                term = ops.add(ops.mse_loss(out.decoded, target), ops.bce_loss(out.alpha_logit, labels))
                total = term if total is None else ops.add(total, term)
            return total

        for _, t in params:
            t.requires_grad = True
        backward(loss())
        rng = np.random.default_rng(1)
        analytic, numeric = [], []
        for _, t in params:
            idx = rng.choice(t.size, size=min(4, t.size), replace=False)
            analytic.append(t.grad.reshape(-1)[idx])
            numeric.append(numeric_grad(loss, t, 1e-6, index=idx))
        analytic, numeric = np.concatenate(analytic), np.concatenate(numeric)
        assert analytic.size >= 100
        assert relative_error(analytic, numeric, floor=1e-6) <= 1e-3


class TestCheckpoint:
    def test_bitwise_roundtrip(self, tmp_path):
        net = GazeNet(TINY, seed=3)
        gm.save_checkpoint(net, tmp_path / "ck", {"step": 7})
        back = gm.load_checkpoint(tmp_path / "ck")
        assert back.config == net.config
        for (n1, a), (n2, b) in zip(net.params, back.params):
            assert n1 == n2
            assert a.data.tobytes() == b.data.tobytes()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            gm.load_checkpoint(tmp_path)

    def test_state_helpers(self):
        s = ConvLSTMState.zeros(2)
        assert s.is_zero
        t = Tensor(np.ones((2, 1, 2, 2)), requires_grad=True)
        s2 = ConvLSTMState([(t, t), (t, t)])
        assert not s2.detach().layers[0][0].requires_grad
        assert s2.select([1]).layers[0][0].shape == (1, 1, 2, 2)
