import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from vesselfield.field import (
    MlpConfig,
    MlpParams,
    field_evaluate,
    frequency_encode,
    frequency_encode_batch,
    init_mlp,
    init_params,
    leaky_relu,
    load_mlp,
    mlp_backward,
    mlp_forward,
    save_mlp,
    sigmoid,
)
from vesselfield.geometry import VolumeGrid, normalize_coords
from vesselfield.hashgrid import HashEncoderConfig, encode


def zero_params(cfg):
    return MlpParams([np.zeros(s) for s in cfg.layer_shapes()], [np.zeros(s[1]) for s in cfg.layer_shapes()])


class TestForward:
    def test_zero_network(self):
        cfg = MlpConfig()
        y, _ = mlp_forward(cfg, zero_params(cfg), np.ones(32))
        assert y == 0.5

    def test_leaky_relu_unit(self):
        assert leaky_relu(-1.0, 0.01) == -0.01
        assert leaky_relu(2.0, 0.01) == 2.0

    def test_sigmoid_stable(self):
        s = sigmoid(np.array([-800.0, 0.0, 800.0]))
        assert_array_equal(s, [0.0, 0.5, 1.0])
        assert np.all(np.isfinite(s))

    def test_hand_toy(self):
        # width 2, 3 layers, no skip: h1 = lrelu(x W0 + b0), h2 = lrelu(h1 W1 + b1), y = sigmoid(h2 W2 + b2)
        cfg = MlpConfig(n_layers=3, hidden_width=2, in_dim=2, skip="none")
        W0 = np.array([[1.0, -1.0], [2.0, 0.5]])
        W1 = np.array([[1.0, 0.0], [-3.0, 1.0]])
        W2 = np.array([[0.5], [-1.0]])
        p = MlpParams([W0, W1, W2], [np.array([0.0, 0.1]), np.zeros(2), np.array([0.2])])
        x = np.array([1.0, 1.0])
        # layer 0: (3, -0.4) -> (3, -0.004); layer 1: (3.012, -0.004) -> (3.012, -0.00004)
        # layer 2: 1.506 + 0.00004 + 0.2 = 1.70604
        y, _ = mlp_forward(cfg, p, x)
        assert_allclose(y, 1.0 / (1.0 + np.exp(-1.70604)), rtol=1e-12)

    def test_shapes(self):
        cfg = MlpConfig()
        shapes = cfg.layer_shapes()
        assert len(shapes) == 8
        assert shapes[0] == (32, 256) and shapes[4] == (256 + 32, 256) and shapes[-1] == (256, 1)
        assert MlpConfig(skip="add").layer_shapes()[4] == (256, 256)

    def test_shape_mismatch(self):
        cfg = MlpConfig(n_layers=3, hidden_width=4, in_dim=5)
        p = init_mlp(cfg, np.random.default_rng(0))
        with pytest.raises(ValueError):
            mlp_forward(cfg, p, np.ones(4))
        with pytest.raises(ValueError):
            mlp_forward(MlpConfig(n_layers=4, hidden_width=4, in_dim=5), p, np.ones(5))


@pytest.mark.parametrize("skip", ["concat", "add", "none"])
@pytest.mark.parametrize("n_layers", [3, 4, 8])
def test_backward_finite_differences(skip, n_layers):
    rng = np.random.default_rng(n_layers)
    cfg = MlpConfig(n_layers=n_layers, hidden_width=5, in_dim=4, skip=skip)
    p = init_mlp(cfg, rng, np.float64)
    p = MlpParams(p.weights, [rng.normal(size=b.shape) * 0.1 for b in p.biases])
    x = rng.normal(size=(6, 4))
    up = rng.normal(size=6)

    def f(params, feats):
        return float(mlp_forward(cfg, params, feats)[0] @ up)

    y, tape = mlp_forward(cfg, p, x)
    g, d_in = mlp_backward(cfg, p, tape, up)
    h = 1e-6
    for arrs, grads in ((p.weights, g.weights), (p.biases, g.biases)):
        for a, ga in zip(arrs, grads):
            for idx in list(np.ndindex(a.shape))[:12]:
                o = a[idx]
                a[idx] = o + h
                fp = f(p, x)
                a[idx] = o - h
                fm = f(p, x)
                a[idx] = o
                fd = (fp - fm) / (2 * h)
                assert abs(fd - ga[idx]) <= 1e-6 * max(1.0, abs(fd))
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (f(p, xp) - f(p, xm)) / (2 * h)
        assert abs(fd - d_in[idx]) <= 1e-6 * max(1.0, abs(fd))


class TestBackward:
    def test_zero_upstream(self):
        cfg = MlpConfig(n_layers=4, hidden_width=6, in_dim=3)
        p = init_mlp(cfg, np.random.default_rng(0), np.float64)
        _, tape = mlp_forward(cfg, p, np.ones((2, 3)))
        g, d = mlp_backward(cfg, p, tape, 0.0)
        assert not any(a.any() for a in g.arrays()) and not d.any()

    def test_sigmoid_local_gradient(self):
        # one affine layer straight into the sigmoid: dy/db = sigma'(0) = 1/4
        cfg = MlpConfig(n_layers=1, hidden_width=1, in_dim=1, skip="none")
        p = MlpParams([np.zeros((1, 1))], [np.zeros(1)])
        _, tape = mlp_forward(cfg, p, np.array([[1.0]]))
        g, _ = mlp_backward(cfg, p, tape, 1.0)
        assert g.biases[0][0] == 0.25

    def test_tape_mismatch(self):
        cfg = MlpConfig(n_layers=3, hidden_width=4, in_dim=2)
        p = init_mlp(cfg, np.random.default_rng(0))
        _, tape = mlp_forward(cfg, p, np.ones(2))
        tape.inputs.pop()
        with pytest.raises(ValueError):
            mlp_backward(cfg, p, tape, 1.0)


class TestFrequency:
    def test_origin(self):
        f = frequency_encode(np.zeros(3), 4)
        assert f.shape == (24,)
        assert_array_equal(f[0::2], 0.0)
        assert_array_equal(f[1::2], 1.0)

    def test_hand_pi(self):
        f = frequency_encode(np.array([1.0, 0.0, 0.0]), 1)
        assert_allclose(f[:2], [0.0, -1.0], atol=1e-15)

    def test_batch_agrees(self, rng):
        grid = VolumeGrid(5, 6, 7, 1.0, 2.0, 0.5)
        x = grid.voxel_centers()[::7]
        u = (x + grid.half_extent) / (2 * grid.half_extent)
        b = frequency_encode_batch(x, 3, grid)
        assert b.shape == (x.shape[0], 18)
        for i in range(x.shape[0]):
            assert_allclose(b[i], frequency_encode(u[i], 3), atol=1e-12)

    def test_invalid(self):
        with pytest.raises(ValueError):
            frequency_encode(np.zeros(3), 0)


class TestInitAndEvaluate:
    enc = HashEncoderConfig(levels=4, table_size=2 ** 10, features=2, base_resolution=4, growth=1.5)
    mlp = MlpConfig(n_layers=8, hidden_width=32, in_dim=8)
    grid = VolumeGrid(10, 9, 8, 1.0, 1.0, 1.0)

    def test_deterministic_counts(self):
        t1, p1 = init_params(7, self.enc, self.mlp)
        t2, p2 = init_params(7, self.enc, self.mlp)
        assert_array_equal(t1, t2)
        for a, b in zip(p1.arrays(), p2.arrays()):
            assert_array_equal(a, b)
        assert t1.size == self.enc.levels * self.enc.table_size * self.enc.features
        assert p1.n_params == sum(fi * fo + fo for fi, fo in self.mlp.layer_shapes())
        assert np.abs(t1).max() <= 1e-4
        assert not any(b.any() for b in p1.biases)

    def test_initial_output_near_half(self, rng):
        t, p = init_params(0, self.enc, self.mlp)
        pts = np.stack([rng.integers(1, n + 1, 1000) for n in (10, 9, 8)], axis=1)
        y = field_evaluate(self.enc, t, self.mlp, p, pts, self.grid)
        assert abs(y.mean() - 0.5) < 0.05

    def test_composition_and_range(self, rng):
        t = rng.normal(size=(4, 2 ** 10, 2)).astype(np.float32)
        _, p = init_params(1, None, self.mlp)
        pts = np.stack([rng.integers(1, n + 1, 10000) for n in (10, 9, 8)], axis=1)
        y = field_evaluate(self.enc, t, self.mlp, p, pts, self.grid, chunk=999)
        assert np.all((y > 0) & (y < 1))
        assert_array_equal(y, field_evaluate(self.enc, t, self.mlp, p, pts, self.grid, chunk=999))
        assert_allclose(y, field_evaluate(self.enc, t, self.mlp, p, pts, self.grid), rtol=1e-6)
        for i in range(5):
            feat = encode(self.enc, t, normalize_coords(pts[i], self.grid), self.grid).astype(np.float32)
            assert_allclose(y[i], mlp_forward(self.mlp, p, feat)[0], rtol=1e-6)

    def test_pure(self, rng):
        t, p = init_params(2, self.enc, self.mlp)
        t0, w0 = t.copy(), [a.copy() for a in p.arrays()]
        field_evaluate(self.enc, t, self.mlp, p, np.array([[1, 1, 1], [10, 9, 8]]), self.grid)
        assert_array_equal(t, t0)
        for a, b in zip(p.arrays(), w0):
            assert_array_equal(a, b)


def test_mlp_checkpoint_roundtrip(tmp_path):
    cfg = MlpConfig(n_layers=4, hidden_width=6, in_dim=3)
    p = init_mlp(cfg, np.random.default_rng(0))
    save_mlp(tmp_path / "m.bin", cfg, p)
    shapes, q = load_mlp(tmp_path / "m.bin")
    assert [tuple(s) for s in shapes] == cfg.layer_shapes()
    for a, b in zip(p.arrays(), q.arrays()):
        assert_array_equal(a, b)
