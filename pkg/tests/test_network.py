import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specres.errors import ConfigError, DataFormatError, ShapeError
from specres.network import (
    WEIGHT_HEADER,
    Conv,
    NetworkConfig,
    build_network,
    he_normal_,
    init_he_normal,
    load_weights,
    num_parameters,
    predict_image,
    save_weights,
    weight_file_size,
)
from specres.tensor import Tape, Tensor, backward, dropout_mask, mse_loss


def small_net(scales=2, base=4, seed=0, **kw):
    net = init_he_normal(build_network(NetworkConfig(scales=scales, base_features=base, **kw)), seed)
    # one training pass so batch-norm running stats exist
    net.forward(Tensor(np.random.default_rng(seed).random((2, 3, 4 * 2**scales, 4 * 2**scales), np.float32)),
                training=True)
    return net


def test_feature_counts_scales2_base16():
    net = build_network(NetworkConfig(scales=2, base_features=16))
    assert [b.cout for b in net.encoder] == [16, 32]
    assert net.bottleneck.cout == 64
    assert [b.cout for b in net.decoder] == [32, 16]
    assert (net.head.cin, net.head.cout, net.head.k) == (16, 31, 1)
    # decoder input = shuffled deeper features + encoder skip
    for up, blk in zip(net.expand, net.decoder):
        assert up.cout // 4 + blk.cout == blk.conv1.cin


def test_head_parameter_count():
    net = build_network(NetworkConfig(scales=4, base_features=64))
    assert net.head.weight.size + net.head.bias.size == 64 * 31 + 31 == 2015


def test_invalid_configs_rejected():
    with pytest.raises(ConfigError):
        build_network(NetworkConfig(scales=0))
    with pytest.raises(ConfigError):
        build_network(NetworkConfig(dropout_rate=1.0))


def test_parameter_count_grows_quadratically_with_width():
    a = num_parameters(build_network(NetworkConfig(scales=3, base_features=16)))
    b = num_parameters(build_network(NetworkConfig(scales=3, base_features=32)))
    assert 3.5 < b / a < 4.0


@pytest.mark.parametrize("shape,scales", [((2, 3, 64, 64), 4), ((1, 3, 32, 32), 2)])
def test_forward_shapes(shape, scales):
    net = init_he_normal(build_network(NetworkConfig(scales=scales, base_features=4)), 0)
    assert net.forward(Tensor(np.zeros(shape, np.float32)), training=True).shape == (shape[0], 31, *shape[2:])


@settings(max_examples=15, deadline=None)
@given(h=st.integers(1, 5), w=st.integers(1, 5))
def test_output_spatial_shape_matches_input(h, w):
    net = small_net(scales=2, base=2)
    x = np.random.default_rng(h * 7 + w).random((1, 3, 4 * h, 4 * w), np.float32)
    assert net.forward(Tensor(x), training=False).shape == (1, 31, 4 * h, 4 * w)


def test_indivisible_input_rejected_but_predict_pads():
    net = small_net(scales=2, base=2)
    with pytest.raises(ShapeError):
        net.forward(Tensor(np.zeros((1, 3, 10, 12), np.float32)))
    rgb = np.random.default_rng(0).random((3, 10, 13), np.float32)
    assert predict_image(net, rgb).shape == (31, 10, 13)


def test_eval_forward_is_deterministic():
    net = small_net()
    x = Tensor(np.random.default_rng(1).random((2, 3, 16, 16), np.float32))
    assert net.forward(x, training=False).data.tobytes() == net.forward(x, training=False).data.tobytes()


def test_train_forward_deterministic_with_fixed_masks():
    net = small_net()
    x = Tensor(np.random.default_rng(1).random((2, 3, 16, 16), np.float32))
    rng = np.random.default_rng(3)
    masks = {site: dropout_mask((2, c), 0.2, rng) for site, c in net.dropout_sites()}
    a = net.forward(x, training=True, masks=masks).data
    b = net.forward(x, training=True, masks=masks).data
    assert a.tobytes() == b.tobytes()
    # without fixed masks dropout makes training-mode passes differ
    assert not np.array_equal(net.forward(x, training=True).data, net.forward(x, training=True).data)


# ---------------------------------------------------------------------------
# initialization


@pytest.mark.parametrize("cin,cout,k", [(3, 3704, 3), (64, 174, 3)])
def test_he_normal_std(cin, cout, k):
    conv = Conv("c", cin, cout, k)
    he_normal_(conv, np.random.default_rng(0))
    assert conv.weight.size >= 100_000
    target = np.sqrt(2.0 / (cin * k * k))
    assert abs(conv.weight.data.std() / target - 1) < 0.05
    assert np.all(conv.bias.data == 0)


def test_he_normal_network_reference_value():
    net = init_he_normal(build_network(NetworkConfig(scales=2, base_features=64)), 1)
    assert np.sqrt(2 / 576) == pytest.approx(0.05893, abs=1e-5)
    w = np.concatenate([c.weight.data.ravel() for c in net.convs() if c.fan_in == 576])
    assert w.size >= 100_000
    assert abs(w.std() / np.sqrt(2 / 576) - 1) < 0.05
    assert all(np.all(c.bias.data == 0) for c in net.convs())
    assert all(np.all(b.gamma.data == 1) and np.all(b.beta.data == 0) for b in net.batchnorms())


def test_same_seed_same_weights():
    a = init_he_normal(build_network(NetworkConfig(scales=1, base_features=4)), 42)
    b = init_he_normal(build_network(NetworkConfig(scales=1, base_features=4)), 42)
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.data.tobytes() == q.data.tobytes()


# ---------------------------------------------------------------------------
# weight files


def test_weight_roundtrip_bit_exact(tmp_path):
    net = small_net(seed=3)
    path = tmp_path / "w.ssrw"
    save_weights(net, path)
    other = build_network(net.config)
    load_weights(other, path)
    x = Tensor(np.random.default_rng(9).random((1, 3, 16, 16), np.float32))
    assert net.forward(x, training=False).data.tobytes() == other.forward(x, training=False).data.tobytes()
    for bn, bn2 in zip(net.batchnorms(), other.batchnorms()):
        assert bn.state.running_var.tobytes() == bn2.state.running_var.tobytes()


def test_weight_file_size(tmp_path):
    net = small_net()
    path = tmp_path / "w.ssrw"
    save_weights(net, path)
    stats = sum(2 * b.state.channels for b in net.batchnorms())
    assert path.stat().st_size == weight_file_size(net) == 14 + 4 * (num_parameters(net) + stats)
    assert WEIGHT_HEADER.size == 14


def test_weight_fingerprint_and_truncation(tmp_path):
    net = small_net()
    path = tmp_path / "w.ssrw"
    save_weights(net, path)
    with pytest.raises(DataFormatError):
        load_weights(build_network(NetworkConfig(scales=2, base_features=8)), path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(DataFormatError):
        load_weights(build_network(net.config), path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(DataFormatError):
        load_weights(build_network(net.config), path)


# ---------------------------------------------------------------------------
# end-to-end gradient


def test_end_to_end_finite_differences():
    cfg = NetworkConfig(scales=1, base_features=4)
    net = init_he_normal(build_network(cfg, dtype=np.float64), 0)
    rng = np.random.default_rng(1)
    x = rng.random((2, 3, 8, 8))
    y = rng.random((2, 31, 8, 8))
    masks = {site: dropout_mask((2, c), 0.2, rng, np.float64) for site, c in net.dropout_sites()}

    def loss_value():
        return float(mse_loss(net.forward(Tensor(x), training=True, masks=masks), Tensor(y)).data)

    with Tape() as tape:
        loss = mse_loss(net.forward(Tensor(x), training=True, masks=masks), Tensor(y))
    net.zero_grad()
    backward(tape, loss)

    # biases feeding a training-mode batch norm have exactly zero gradient, so the
    # check is relative to the whole sampled gradient vector rather than per tensor
    ana, num = [], []
    for p in net.parameters():
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(6, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + 1e-4
            fp = loss_value()
            flat[i] = old - 1e-4
            fm = loss_value()
            flat[i] = old
            num.append((fp - fm) / 2e-4)
            ana.append(p.grad.reshape(-1)[i])
    ana, num = np.array(ana), np.array(num)
    assert np.max(np.abs(ana - num)) / (np.max(np.abs(num)) + 1e-8) < 1e-4

    xt = Tensor(x.copy(), requires_grad=True)
    with Tape() as tape:
        loss = mse_loss(net.forward(xt, training=True, masks=masks), Tensor(y))
    backward(tape, loss)
    corner = np.zeros((2, 3, 2, 2))
    for i in np.ndindex(corner.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += 1e-4
        xm[i] -= 1e-4
        fp = float(mse_loss(net.forward(Tensor(xp), training=True, masks=masks), Tensor(y)).data)
        fm = float(mse_loss(net.forward(Tensor(xm), training=True, masks=masks), Tensor(y)).data)
        corner[i] = (fp - fm) / 2e-4
    ana = xt.grad[:, :, :2, :2]
    assert np.max(np.abs(ana - corner)) / (np.max(np.abs(corner)) + 1e-8) < 1e-4
