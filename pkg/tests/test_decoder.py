import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfcm.convlstm import ConvLSTMCell
from cfcm.decoder import CFCMDecoder, ModelConfig, SkipDecoder, build_model, cfcm_forward, skip_forward
from cfcm.layers import EVAL, ConvLayer, count_parameters
from cfcm.tensor import ShapeError, Tensor


def pyramid(n=2, channels=(64, 32, 16, 8), finest=16, seed=0):
    rng = np.random.default_rng(seed)
    sizes = [finest >> i for i in range(len(channels))][::-1]
    return [Tensor(rng.standard_normal((n, c, s, s)).astype(np.float32)) for c, s in zip(channels, sizes)]


def zero_all(module):
    for p in module.parameters():
        p.data[...] = 0.0


@pytest.mark.parametrize("num_classes", [1, 3])
def test_cfcm_logits_shape(num_classes):
    dec = CFCMDecoder([64, 32, 16, 8], hidden=4, num_classes=num_classes)
    assert cfcm_forward(dec, pyramid()).shape == (2, num_classes, 64, 64)


@pytest.mark.parametrize("fusion", ["sum", "concat"])
def test_skip_logits_shape(fusion):
    dec = SkipDecoder([64, 32, 16, 8], num_classes=3, fusion=fusion)
    assert skip_forward(dec, pyramid()).shape == (2, 3, 64, 64)


def test_zero_parameters_give_zero_logits():
    dec = CFCMDecoder([64, 32, 16, 8], hidden=4, num_classes=2)
    zero_all(dec)
    np.testing.assert_array_equal(cfcm_forward(dec, pyramid()).data, 0.0)
    skip = SkipDecoder([64, 32, 16, 8], num_classes=2, fusion="sum")
    zero_all(skip)
    np.testing.assert_array_equal(skip_forward(skip, pyramid()).data, 0.0)


def test_coarsest_level_reaches_logits():
    dec = CFCMDecoder([64, 32, 16, 8], hidden=4, num_classes=1, seed=1)
    pyr = pyramid()
    base = cfcm_forward(dec, pyr).data
    pyr[0] = Tensor(pyr[0].data + 1.0)
    assert np.abs(cfcm_forward(dec, pyr).data - base).max() > 0


def test_forward_is_pure():
    dec = CFCMDecoder([64, 32, 16, 8], hidden=4, num_classes=1, seed=1)
    pyr = pyramid()
    assert cfcm_forward(dec, pyr).data.tobytes() == cfcm_forward(dec, pyr).data.tobytes()


def test_pyramid_mismatches():
    dec = CFCMDecoder([64, 32, 16, 8], hidden=4, num_classes=1)
    with pytest.raises(ShapeError):
        cfcm_forward(dec, pyramid()[:3])
    with pytest.raises(ShapeError):
        cfcm_forward(dec, pyramid(channels=(64, 32, 16, 4)))


def test_concat_fusion_channel_bookkeeping():
    dec = SkipDecoder([64, 32, 16, 8], num_classes=1, fusion="concat")
    assert [b.mix.conv.weight.shape[1] for b in dec.blocks] == [96, 48, 24]
    dec = SkipDecoder([64, 32, 16, 8], num_classes=1, fusion="sum")
    assert [b.adapt.weight.shape[:2] for b in dec.blocks] == [(32, 64), (16, 32), (8, 16)]


def test_sum_and_concat_differ():
    pyr = pyramid()
    a = skip_forward(SkipDecoder([64, 32, 16, 8], 1, "sum", seed=0), pyr).data
    b = skip_forward(SkipDecoder([64, 32, 16, 8], 1, "concat", seed=0), pyr).data
    assert not np.array_equal(a, b)


def test_parameter_count_examples():
    assert count_parameters(ConvLayer(2, 3, 1, bias=True)) == 9
    assert count_parameters(ConvLSTMCell(2, 3)) == 552


def _hand_count_cfcm18(w, hidden, c_in=1, classes=1):
    """Layer-list sum for ResNet-18 basic blocks + one ConvLSTM cell per level + head."""
    conv = lambda ci, co, k: ci * co * k * k  # noqa: E731
    bn = lambda c: 2 * c  # noqa: E731
    widths = [int(64 * w), int(128 * w), int(256 * w), int(512 * w)]
    total = conv(c_in, widths[0], 7) + bn(widths[0])
    prev = widths[0]
    for stage, c in enumerate(widths):
        for b in range(2):
            total += conv(prev, c, 3) + bn(c) + conv(c, c, 3) + bn(c)
            if prev != c or (b == 0 and stage > 0):
                total += conv(prev, c, 1) + bn(c)
            prev = c
    for c in widths:
        total += conv(c + hidden, 4 * hidden, 3) + 4 * hidden
    total += conv(hidden, hidden, 3) + hidden + conv(hidden, classes, 1) + classes
    return total


def test_cfcm18_parameter_count_matches_hand_sum():
    model = build_model(ModelConfig(depth=18, width_mult="1/8", hidden=4))
    assert count_parameters(model) == _hand_count_cfcm18(1 / 8, 4) == 195729
    model = build_model(ModelConfig(depth=18, width_mult="1/4", num_classes=3))
    assert count_parameters(model) == _hand_count_cfcm18(1 / 4, 8, classes=3)


@settings(max_examples=8, deadline=None)
@given(
    depth=st.sampled_from([18, 34, 50]),
    h=st.integers(1, 3),
    w=st.integers(1, 3),
    decoder=st.sampled_from(["cfcm", "skip_sum", "skip_concat"]),
)
def test_logits_match_input_resolution(depth, h, w, decoder):
    model = build_model(ModelConfig(depth=depth, width_mult="1/16", num_classes=2, decoder=decoder))
    x = Tensor(np.zeros((1, 1, 32 * h, 32 * w), dtype=np.float32))
    assert model(x, EVAL).shape == (1, 2, 32 * h, 32 * w)
