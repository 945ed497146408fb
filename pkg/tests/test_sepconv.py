import numpy as np
import pytest

from patchcraft_denoise.core.sepconv import SepConv, register_params, sepconv_backward, sepconv_forward, sepconv_param_count
from patchcraft_denoise.core.tensorcore import GraphError, ParamBank, ShapeError, numerical_gradient, relative_error
from patchcraft_denoise.utils.data_types import SepConvConfig

TINY = SepConvConfig(n_in=2, n_out=1, f_in=2, f_out=2, c=1, m=3)
PARTS = ("vh.weight", "vh.bias", "f.weight", "f.bias", "n.weight", "n.bias")


def _bank(config, seed, zero=False, random_bias=True):
    rng = np.random.default_rng(seed)
    bank = ParamBank()
    register_params(bank, "layer", config, rng, zero)
    if random_bias:
        for part in ("vh.bias", "f.bias", "n.bias"):
            name = f"layer.{part}"
            bank.set_value(name, rng.normal(size=bank.value(name).shape))
    return bank


def _dense_oracle(x, bank, config):
    """逐元素循环实现的三段组合"""
    vw, vb = bank.value("layer.vh.weight"), bank.value("layer.vh.bias")
    fw, fb = bank.value("layer.f.weight"), bank.value("layer.f.bias")
    nw, nb = bank.value("layer.n.weight"), bank.value("layer.n.bias")
    n_in, f_in, c, v, h = x.shape
    m, r = config.m, (config.m - 1) // 2
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (0, 0), (r, r), (r, r)))

    spatial = np.zeros((n_in, f_in, c, v, h))
    for ni in range(n_in):
        for fi in range(f_in):
            for co in range(c):
                for i in range(v):
                    for j in range(h):
                        spatial[ni, fi, co, i, j] = vb[ni, fi, co] + np.sum(vw[ni, fi, co] * xp[ni, fi, :, i:i + m, j:j + m])

    mixed = np.zeros((n_in, config.f_out, c, v, h))
    for ni in range(n_in):
        for fo in range(config.f_out):
            for co in range(c):
                mixed[ni, fo, co] = fb[ni, fo * c + co]
                for fi in range(f_in):
                    for ci in range(c):
                        mixed[ni, fo, co] += fw[ni, fo * c + co, fi * c + ci, 0, 0] * spatial[ni, fi, ci]

    out = np.zeros((config.n_out, config.f_out, c, v, h))
    for no in range(config.n_out):
        for fo in range(config.f_out):
            for co in range(c):
                out[no, fo, co] = nb[fo, co, no]
                for ni in range(n_in):
                    out[no, fo, co] += nw[fo, co, no, ni, 0, 0] * mixed[ni, fo, co]
    return out


class TestSepConvForward:

    def test_default_layer_shape(self):
        config = SepConvConfig(n_in=15, n_out=8, f_in=50, f_out=50, c=3, m=7)
        bank = ParamBank()
        register_params(bank, "layer", config, np.random.default_rng(0))
        x = np.random.default_rng(1).random((15, 50, 3, 4, 4)).astype(np.float32)
        assert sepconv_forward(x, bank, "layer", config).shape == (8, 50, 3, 4, 4)

    def test_batched_shape(self):
        bank = _bank(TINY, 0)
        x = np.random.default_rng(1).random((3, 2, 2, 1, 5, 6))
        assert sepconv_forward(x, bank, "layer", TINY).shape == (3, 1, 2, 1, 5, 6)

    def test_identity_configuration(self):
        config = SepConvConfig(n_in=2, n_out=2, f_in=3, f_out=3, c=2, m=1)
        bank = ParamBank()
        register_params(bank, "layer", config, np.random.default_rng(0))
        bank.set_value("layer.vh.weight", np.broadcast_to(np.eye(2)[:, :, None, None], (2, 3, 2, 2, 1, 1)).copy())
        bank.set_value("layer.f.weight", np.broadcast_to(np.eye(6)[:, :, None, None], (2, 6, 6, 1, 1)).copy())
        bank.set_value("layer.n.weight", np.broadcast_to(np.eye(2)[:, :, None, None], (3, 2, 2, 2, 1, 1)).copy())
        x = np.random.default_rng(1).random((2, 3, 2, 4, 5)).astype(np.float32)
        np.testing.assert_array_equal(sepconv_forward(x, bank, "layer", config), x)

    @pytest.mark.usefixtures("float64")
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_dense_oracle(self, seed):
        bank = _bank(TINY, seed)
        x = np.random.default_rng(seed + 100).normal(size=(2, 2, 1, 4, 4))
        np.testing.assert_allclose(sepconv_forward(x, bank, "layer", TINY), _dense_oracle(x, bank, TINY),
                                   rtol=1e-5, atol=1e-5)

    @pytest.mark.usefixtures("float64")
    def test_matches_dense_oracle_with_colors(self):
        config = SepConvConfig(n_in=3, n_out=2, f_in=2, f_out=3, c=2, m=3)
        bank = _bank(config, 7)
        x = np.random.default_rng(8).normal(size=(3, 2, 2, 4, 3))
        np.testing.assert_allclose(sepconv_forward(x, bank, "layer", config), _dense_oracle(x, bank, config),
                                   rtol=1e-5, atol=1e-5)

    @pytest.mark.usefixtures("float64")
    def test_linear_without_bias(self):
        bank = _bank(TINY, 3, random_bias=False)
        rng = np.random.default_rng(4)
        x, y = rng.normal(size=(2, 2, 1, 4, 4)), rng.normal(size=(2, 2, 1, 4, 4))
        combined = sepconv_forward(2.5 * x - 0.5 * y, bank, "layer", TINY)
        separate = 2.5 * sepconv_forward(x, bank, "layer", TINY) - 0.5 * sepconv_forward(y, bank, "layer", TINY)
        np.testing.assert_allclose(combined, separate, rtol=1e-5, atol=1e-8)

    def test_rejects_mismatched_input(self):
        bank = _bank(TINY, 0)
        with pytest.raises(ShapeError):
            sepconv_forward(np.zeros((3, 2, 1, 4, 4)), bank, "layer", TINY)
        with pytest.raises(ShapeError):
            sepconv_forward(np.zeros((2, 1, 4, 4)), bank, "layer", TINY)

    def test_backward_before_forward(self):
        layer = SepConv(ParamBank(), "layer", TINY)
        with pytest.raises(GraphError):
            layer.backward(np.zeros((1, 1, 2, 1, 4, 4)))


@pytest.mark.usefixtures("float64")
class TestSepConvBackward:

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("zero", [False, True])
    def test_gradients(self, seed, zero):
        bank = _bank(TINY, seed, zero=zero)
        rng = np.random.default_rng(seed + 200)
        x = rng.normal(size=(2, 2, 1, 4, 4))
        upstream = rng.normal(size=(1, 2, 1, 4, 4))

        bank.zero_grad()
        grad_x = sepconv_backward(x, bank, "layer", TINY, upstream)
        numeric_x = numerical_gradient(lambda v: np.sum(sepconv_forward(v, bank, "layer", TINY) * upstream), x)
        if zero:
            # 近邻混合核为零时输入梯度恒为零
            assert not np.any(grad_x) and not np.any(numeric_x)
        else:
            assert relative_error(grad_x, numeric_x) < 1e-4

        for part in PARTS:
            name = f"layer.{part}"
            original = bank.value(name).copy()

            def loss(value):
                bank.set_value(name, value)
                return np.sum(sepconv_forward(x, bank, "layer", TINY) * upstream)

            numeric = numerical_gradient(loss, original)
            bank.set_value(name, original)
            if not np.any(numeric):
                assert not np.any(bank.grad(name))
            else:
                assert relative_error(bank.grad(name), numeric) < 1e-4

    def test_zero_upstream(self):
        bank = _bank(TINY, 0)
        bank.zero_grad()
        x = np.random.default_rng(1).normal(size=(2, 2, 1, 4, 4))
        grad_x = sepconv_backward(x, bank, "layer", TINY, np.zeros((1, 2, 1, 4, 4)))
        assert not np.any(grad_x)
        for part in PARTS:
            assert not np.any(bank.grad(f"layer.{part}"))


class TestParamCount:

    @pytest.mark.parametrize("config, expected", [
        (SepConvConfig(15, 8, 50, 50, 3, 7), 691_950),
        (SepConvConfig(1, 1, 1, 1, 1, 1), 6),
        (SepConvConfig(1, 1, 50, 1, 3, 7), 22_659),
    ])
    def test_closed_form(self, config, expected):
        assert sepconv_param_count(config) == expected

    def test_matches_enumerated_bank(self):
        rng = np.random.default_rng(0)
        for index in range(10):
            n_in = int(rng.integers(1, 6))
            config = SepConvConfig(n_in=n_in, n_out=int(rng.integers(1, n_in + 1)), f_in=int(rng.integers(1, 6)),
                                   f_out=int(rng.integers(1, 6)), c=int(rng.integers(1, 4)),
                                   m=int(rng.choice([1, 3, 5])))
            layer = SepConv(ParamBank(), f"layer{index}", config, rng)
            assert layer.parameter_count() == sepconv_param_count(config)
            assert layer.bank.total_parameter_count() == sepconv_param_count(config)
