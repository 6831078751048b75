import numpy as np
import pytest

from oracles import GRAD_RTOL, check_layer_gradients
from theftnet.blocks import (
    DenseBlock,
    DenseBlockSpec,
    DensePartSpec,
    Ordering,
    Transition,
    TransitionSpec,
    dense_block_forward,
    multiscale_block_forward,
    multiscale_part,
    standard_part,
    transition_forward,
    wiring_table,
)
from theftnet.errors import ConfigurationError
from theftnet.tensor import Conv1D, GlobalAvgPool, Sequential, record_ops


def hand_channels(in_channels, parts, exported):
    return in_channels + parts * sum(exported)


class TestChannelCounts:
    def test_standard_block_six_parts(self):
        spec = DenseBlockSpec(6, standard_part(128, 32))
        assert spec.out_channels(16) == hand_channels(16, 6, [32]) == 208

    def test_one_part(self):
        spec = DenseBlockSpec(1, standard_part(128, 32))
        assert spec.out_channels(8) == 40
        x = np.random.default_rng(0).standard_normal((2, 8, 9)).astype(np.float32)
        assert dense_block_forward(x, spec).shape == (2, 40, 9)

    def test_zero_parts_is_identity(self):
        x = np.random.default_rng(0).standard_normal((2, 5, 7))
        np.testing.assert_array_equal(dense_block_forward(x, DenseBlockSpec(0, standard_part())), x)

    def test_multiscale_default(self):
        spec = DenseBlockSpec(6, multiscale_part())
        assert spec.out_channels(1) == hand_channels(1, 6, [64, 48, 40, 32]) == 1105
        assert spec.conv_layers == 24

    def test_multiscale_one_part_forward(self):
        spec = DenseBlockSpec(1, multiscale_part())
        x = np.random.default_rng(1).standard_normal((2, 1, 40)).astype(np.float32)
        assert multiscale_block_forward(x, spec).shape == (2, 185, 40)

    def test_built_block_counts_its_convs(self):
        block = DenseBlock(1, DenseBlockSpec(6, multiscale_part((2, 2, 2, 2))), np.random.default_rng(0))
        assert block.conv_layers == 24
        assert sum(isinstance(m, Conv1D) for m in block.modules()) == 24


class TestSpecs:
    def test_multiscale_kernels_must_decrease(self):
        with pytest.raises(ConfigurationError):
            multiscale_part((4, 4, 4), (7, 7, 3))
        with pytest.raises(ConfigurationError):
            multiscale_part((4, 4), (3, 7))

    def test_positive_sizes(self):
        with pytest.raises(ConfigurationError):
            DensePartSpec(((0, 3),))
        with pytest.raises(ConfigurationError):
            DensePartSpec(((4, 0),))

    def test_multiscale_forward_rejects_standard_spec(self):
        with pytest.raises(ConfigurationError):
            multiscale_block_forward(np.zeros((1, 1, 5)), DenseBlockSpec(1, standard_part(4, 2)))

    def test_block_rejects_wrong_channels(self):
        block = DenseBlock(3, DenseBlockSpec(1, standard_part(4, 2)), np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            block.forward(np.zeros((1, 2, 5), np.float32))

    @pytest.mark.parametrize("compression", [0.0, 1.5])
    def test_transition_compression_range(self, compression):
        with pytest.raises(ConfigurationError):
            TransitionSpec(compression)


class TestWiring:
    def test_multiscale_every_unit_reads_everything_before_it(self):
        wires = wiring_table(1, DenseBlockSpec(2, multiscale_part((4, 3, 2, 1), (9, 5, 3, 1))))
        running, expected = 1, []
        for _ in range(2):
            for f in (4, 3, 2, 1):
                expected.append(running)
                running += f
        assert [w.in_channels for w in wires] == expected
        assert all(w.reads_all and w.exports for w in wires)

    def test_standard_bottleneck_chain(self):
        wires = wiring_table(16, DenseBlockSpec(3, standard_part(128, 32)))
        assert [w.in_channels for w in wires] == [16, 128, 48, 128, 80, 128]
        assert [w.exports for w in wires] == [False, True] * 3
        assert [w.offset for w in wires if w.exports] == [16, 48, 80]

    @pytest.mark.parametrize("drop", range(7))
    def test_dropping_an_export_shrinks_every_later_input(self, drop):
        spec = DenseBlockSpec(2, multiscale_part((4, 3, 2, 1), (9, 5, 3, 1)))
        full = [w.in_channels for w in wiring_table(1, spec)]
        # recompute by hand with one export removed
        filters = [4, 3, 2, 1] * 2
        running, reduced = 1, []
        for i, f in enumerate(filters):
            reduced.append(running)
            if i != drop:
                running += f
        for later in range(drop + 1, len(filters)):
            assert reduced[later] < full[later]


class TestOrdering:
    def _trace(self, ordering):
        spec = DenseBlockSpec(2, multiscale_part((2, 2, 2, 2), ordering=ordering))
        block = DenseBlock(1, spec, np.random.default_rng(0))
        with record_ops() as ops:
            block.forward(np.ones((2, 1, 40), np.float32), training=True)
        return ops

    def test_conv_first(self):
        ops = self._trace(Ordering.CONV_BN_RELU)
        assert ops == ["conv", "bn", "relu"] * 8

    def test_bn_first(self):
        ops = self._trace(Ordering.BN_RELU_CONV)
        assert ops == ["bn", "relu", "conv"] * 8


class TestTransition:
    def test_compression_halves(self):
        assert TransitionSpec(0.5).out_channels(208) == 104
        x = np.random.default_rng(0).standard_normal((2, 208, 6)).astype(np.float32)
        assert transition_forward(x, TransitionSpec(0.5)).shape == (2, 104, 6)

    def test_odd_channel_count_rounds_up(self):
        assert TransitionSpec(0.5).out_channels(185) == 93

    def test_identity_compression(self):
        x = np.random.default_rng(0).standard_normal((2, 7, 6)).astype(np.float32)
        assert transition_forward(x, TransitionSpec(1.0, 1)).shape == (2, 7, 6)

    def test_pool_stride_two(self):
        x = np.zeros((1, 4, 365), np.float32)
        assert transition_forward(x, TransitionSpec(0.5, 2)).shape == (1, 2, 182)

    def test_layer_sequence(self):
        tr = Transition(4, TransitionSpec(0.5, 2), np.random.default_rng(0))
        with record_ops() as ops:
            tr.forward(np.ones((2, 4, 8), np.float32), training=True)
        assert ops == ["bn", "relu", "conv", "avgpool"]


@pytest.mark.parametrize("part", [
    standard_part(3, 2),
    standard_part(3, 2, Ordering.CONV_BN_RELU),
    multiscale_part((2, 2, 1), (5, 3, 1)),
    multiscale_part((2, 1), (4, 2), Ordering.BN_RELU_CONV),
], ids=["standard", "standard-conv-first", "multiscale", "multiscale-bn-first"])
def test_block_gradients_in_toy_network(part):
    rng = np.random.default_rng(3)
    block = DenseBlock(2, DenseBlockSpec(2, part), rng, np.float64)
    model = Sequential([block, Transition(block.out_channels, TransitionSpec(0.5, 2), rng, np.float64),
                        GlobalAvgPool()])
    errors = check_layer_gradients(model, rng.standard_normal((3, 2, 8)), rng)
    assert max(errors.values()) < GRAD_RTOL, errors
