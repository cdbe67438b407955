import numpy as np
import pytest
import torch

from hjival import games
from hjival import neural_operator as nop
from hjival.errors import ArtifactError, ConfigError


def make_op(case="narrow_road", activation="tanh", seed=0):
    spec = games.make_spec(case)
    op = nop.ValueOperator(
        spec.case_id, spec.state_dim, nop.default_lattice(spec),
        nop.default_normalizer(spec), activation=activation,
        sign_tag="cost-to-go").init_params(seed)
    return spec, op


def numpy_forward(op, bits, xt):
    """Straight-line reimplementation of both subnetworks."""
    def act(name, z):
        return {"tanh": np.tanh, "sin": np.sin,
                "relu": lambda v: np.maximum(v, 0.0)}[name](z)

    def mlp(m, x):
        for i, layer in enumerate(m.layers):
            w = layer.weight.detach().numpy()
            b = layer.bias.detach().numpy()
            s = m.slopes.detach().numpy()[i]
            x = act(op.activation, 10.0 * s * (x @ w.T + b))
        w = m.head.weight.detach().numpy()
        b = m.head.bias.detach().numpy()
        return x @ w.T + b

    return np.sum(mlp(op.branch, bits) * mlp(op.trunk, xt), axis=-1)


def random_xt(spec, n, rng):
    x1 = rng.uniform(spec.x_hj[0, :, 0], spec.x_hj[0, :, 1], size=(n, spec.state_dim))
    x2 = rng.uniform(spec.x_hj[1, :, 0], spec.x_hj[1, :, 1], size=(n, spec.state_dim))
    t = rng.uniform(0, spec.horizon, size=n)
    return np.concatenate([x1, x2], axis=1), t


class TestLatticeAndBranch:
    def test_node_counts(self):
        assert nop.default_lattice(games.make_spec("narrow_road")).n_nodes == 900
        assert nop.default_lattice(games.make_spec("lane_change")).n_nodes == 900
        assert nop.default_lattice(games.make_spec("drone")).n_nodes == 1728

    def test_monotone_in_types(self):
        # larger thresholds can only switch bits on
        for case in games.CASES:
            spec = games.make_spec(case)
            lat = nop.default_lattice(spec)
            b11 = nop.build_branch_input(spec, games.TypePair(1, 1), lat)
            b55 = nop.build_branch_input(spec, games.TypePair(5, 5), lat)
            assert np.all(b55 >= b11)
            assert b55.sum() > b11.sum()  # grids resolve the threshold range

    def test_swapped_types_identical(self):
        spec = games.make_spec("lane_change")
        lat = nop.default_lattice(spec)
        a = nop.build_branch_input(spec, games.TypePair(1, 5), lat)
        b = nop.build_branch_input(spec, games.TypePair(5, 1), lat)
        np.testing.assert_array_equal(a, b)

    def test_boundary_node_counts_as_violation(self):
        spec = games.make_spec("narrow_road")
        eta = games.collision_threshold(spec, games.TypePair(1, 1))
        lat = nop.Lattice(case_id="narrow_road", axes=(("mirror_gap", eta, eta, 1),
                                                       ("dy", 0.0, 0.0, 1)))
        bits = nop.build_branch_input(spec, games.TypePair(1, 1), lat)
        assert bits[0] == 1.0

    def test_all_safe_nodes_zero(self):
        spec = games.make_spec("narrow_road")
        lat = nop.Lattice(case_id="narrow_road", axes=(("mirror_gap", 20.0, 40.0, 5),
                                                       ("dy", 5.0, 8.0, 5)))
        bits = nop.build_branch_input(spec, games.TypePair(5, 5), lat)
        assert bits.sum() == 0.0

    def test_case_mismatch_rejected(self):
        spec = games.make_spec("narrow_road")
        lat = nop.default_lattice(games.make_spec("drone"))
        with pytest.raises(ConfigError):
            nop.build_branch_input(spec, games.TypePair(1, 1), lat)

    def test_indicator_agreement_on_nodes(self):
        # a joint state realizing a node's separation coords gets the same flag
        spec = games.make_spec("lane_change")
        tp = games.TypePair(2, 4)
        lat = nop.default_lattice(spec)
        bits = nop.build_branch_input(spec, tp, lat)
        nodes = lat.nodes()
        for j in (0, 250, 464, 465, 899):
            dx, dy = nodes[j]
            xj = np.array([10.0, 4.0, 0, 18, 10.0 + dx, 4.0 + dy, 0, 18])
            assert bits[j] == games.constraint_indicator(spec, tp, xj)


class TestNormalizer:
    @pytest.mark.parametrize("case", games.CASES)
    def test_round_trip(self, case):
        spec = games.make_spec(case)
        norm = nop.default_normalizer(spec)
        rng = np.random.default_rng(0)
        xj, t = random_xt(spec, 50, rng)
        xt = np.concatenate([xj, t[:, None]], axis=1)
        back = norm.decode(norm.encode(xt))
        assert np.abs(back - xt).max() <= 1e-12

    def test_covers_boxes(self):
        spec = games.make_spec("lane_change")
        norm = nop.default_normalizer(spec)
        for slot in (0, 1):
            for box in (spec.x_gt[slot], spec.x_hj[slot]):
                enc = norm.encode(np.concatenate([box[:, 0], box[:, 1], [0.0]]))
                assert enc.min() >= -1 - 1e-12 and enc.max() <= 1 + 1e-12


class TestForward:
    def test_constant_stub_inner_product(self):
        spec, op = make_op()
        with torch.no_grad():
            for mlp, const in ((op.branch, 2.0), (op.trunk, 3.0)):
                for layer in mlp.layers:
                    layer.weight.zero_()
                    layer.bias.zero_()
                mlp.head.weight.zero_()
                mlp.head.bias.fill_(0.0)
            op.branch.head.bias.fill_(2.0)
            op.trunk.head.bias.fill_(3.0)
        bits = torch.zeros((1, op.lattice.n_nodes), dtype=torch.float64)
        xt = torch.zeros((1, 9), dtype=torch.float64)
        assert op(bits, xt).item() == pytest.approx(6.0 * op.q)

    def test_one_hot_branch_selects_basis(self):
        spec, op = make_op(seed=3)
        with torch.no_grad():
            for layer in op.branch.layers:
                layer.weight.zero_()
                layer.bias.zero_()
            op.branch.head.weight.zero_()
            op.branch.head.bias.zero_()
            op.branch.head.bias[5] = 1.0
        xt = torch.from_numpy(np.random.default_rng(1).uniform(-1, 1, size=(4, 9)))
        bits = torch.zeros((4, op.lattice.n_nodes), dtype=torch.float64)
        v = op(bits, xt)
        trunk_out = op.trunk(xt, torch.tanh)
        np.testing.assert_allclose(v.detach().numpy(),
                                   trunk_out[:, 5].detach().numpy(), rtol=1e-12)

    @pytest.mark.parametrize("activation", nop.ACTIVATIONS)
    def test_duplicate_implementation_oracle(self, activation):
        spec, op = make_op(activation=activation, seed=11)
        rng = np.random.default_rng(7)
        xj, t = random_xt(spec, 32, rng)
        xt = op.encode_inputs(xj, t)
        bits = op.bits_for(spec, games.TypePair(1, 5)).expand(32, -1)
        mine = op(bits, xt).detach().numpy()
        ref = numpy_forward(op, bits.numpy(), xt.numpy())
        scale = max(1.0, np.abs(ref).max())
        assert np.abs(mine - ref).max() / scale <= 1e-12


class TestGradients:
    @pytest.mark.parametrize("activation", ["tanh", "sin"])
    def test_input_gradient_matches_fd(self, activation):
        spec, op = make_op(activation=activation, seed=5)
        tp = games.TypePair(1, 1)
        rng = np.random.default_rng(9)
        xj, t = random_xt(spec, 20, rng)
        v, gx, gt = op.value_and_gradient(spec, tp, xj, t)
        h = 1e-4  # in normalized units, converted per dimension
        scale = op.normalizer.grad_scale()
        for k in range(9):
            dx = h / scale[k]
            if k < 8:
                fd = (op.value(spec, tp, xj + dx * np.eye(8)[k], t)
                      - op.value(spec, tp, xj - dx * np.eye(8)[k], t)) / (2 * dx)
                got = gx[:, k]
            else:
                fd = (op.value(spec, tp, xj, t + dx)
                      - op.value(spec, tp, xj, t - dx)) / (2 * dx)
                got = gt
            denom = np.maximum(1e-6, np.maximum(np.abs(fd), np.abs(got)))
            assert (np.abs(fd - got) / denom).max() <= 1e-5

    def test_constant_params_zero_gradient(self):
        spec, op = make_op(seed=2)
        with torch.no_grad():
            for layer in list(op.trunk.layers) + [op.trunk.head]:
                layer.weight.zero_()
                layer.bias.fill_(0.5)
        tp = games.TypePair(1, 1)
        xj, t = random_xt(spec, 5, np.random.default_rng(1))
        _, gx, gt = op.value_and_gradient(spec, tp, xj, t)
        assert np.abs(gx).max() == 0.0 and np.abs(gt).max() == 0.0


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        spec, op = make_op(seed=13)
        path = tmp_path / "op.ckpt"
        nop.save_operator(op, path)
        back = nop.load_operator(path)
        rng = np.random.default_rng(3)
        xj, t = random_xt(spec, 100, rng)
        tp = games.TypePair(1, 5)
        a = op.value(spec, tp, xj, t)
        b = back.value(spec, tp, xj, t)
        np.testing.assert_array_equal(a, b)
        assert back.sign_tag == "cost-to-go"

    def test_wrong_case_rejected(self, tmp_path):
        spec, op = make_op(seed=1)
        path = tmp_path / "op.ckpt"
        nop.save_operator(op, path)
        with pytest.raises(ArtifactError):
            nop.load_operator(path, expect_case="drone")

    def test_version_mismatch_rejected(self, tmp_path):
        spec, op = make_op(seed=1)
        path = tmp_path / "op.ckpt"
        nop.save_operator(op, path)
        raw = path.read_bytes()
        import json as _json
        import struct as _struct
        off = len(nop.CHECKPOINT_MAGIC)
        (hlen,) = _struct.unpack("<Q", raw[off:off + 8])
        header = _json.loads(raw[off + 8:off + 8 + hlen])
        header["version"] = 99
        blob = _json.dumps(header, sort_keys=True).encode()
        path.write_bytes(nop.CHECKPOINT_MAGIC + _struct.pack("<Q", len(blob))
                         + blob + raw[off + 8 + hlen:])
        with pytest.raises(ArtifactError, match="version"):
            nop.load_operator(path)

    def test_garbage_rejected(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ArtifactError):
            nop.load_operator(path)
