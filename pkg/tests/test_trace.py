import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kvcomp.errors import (
    BadMagicError,
    InvalidArgumentError,
    ShapeMismatchError,
    TruncatedError,
    UnsupportedVersionError,
)
from kvcomp.trace import (
    CompressionConfig,
    KvTrace,
    LayerShape,
    generate_synthetic_trace,
    outlier_channels,
    read_trace,
    trace_from_bytes,
    trace_to_bytes,
    write_trace,
)


def test_layer_shape_hidden_dim():
    s = LayerShape(12, 12, 64)
    assert s.hidden_dim == 768
    assert LayerShape.opt_125m() == s


@pytest.mark.parametrize("bad", [(0, 1, 1), (1, 0, 1), (1, 1, 0), (-1, 2, 2)])
def test_layer_shape_rejects_non_positive(bad):
    with pytest.raises(InvalidArgumentError):
        LayerShape(*bad)


def test_generator_determinism_and_seed_sensitivity():
    shape = LayerShape(2, 2, 4)
    a = generate_synthetic_trace(shape, 4, 4, seed=7, outlier_channel_fraction=0, outlier_gain=1)
    b = generate_synthetic_trace(shape, 4, 4, seed=7, outlier_channel_fraction=0, outlier_gain=1)
    c = generate_synthetic_trace(shape, 4, 4, seed=8, outlier_channel_fraction=0, outlier_gain=1)
    assert a == b
    assert np.array_equal(a.data, b.data)
    assert np.any(a.data != c.data)
    assert a.num_tokens == 8
    assert a.data.shape == (2, 2, 8, 2, 4)


def test_generator_rejects_zero_tokens():
    with pytest.raises(InvalidArgumentError):
        generate_synthetic_trace(LayerShape(1, 1, 4), 0, 4, seed=1)
    with pytest.raises(InvalidArgumentError):
        generate_synthetic_trace(LayerShape(1, 1, 4), 4, 0, seed=1)


def test_outlier_channel_has_largest_variance():
    shape = LayerShape(2, 2, 4)
    mask = outlier_channels(shape, 7, 0.25)
    assert (mask.sum(axis=-1) == 1).all()  # ceil(0.25 * 4) per head
    t = generate_synthetic_trace(shape, 5000, 5000, seed=7, outlier_channel_fraction=0.25, outlier_gain=8)
    var = t.data.astype(np.float64).var(axis=2)  # [layer, kv, head, dim]
    top = var.argmax(axis=-1)
    assert np.array_equal(top, mask.argmax(axis=-1))


def test_values_clamped_at_extreme_gain():
    t = generate_synthetic_trace(LayerShape(1, 2, 8), 64, 64, seed=3, outlier_channel_fraction=0.5, outlier_gain=100)
    assert t.data.dtype == np.int8
    assert t.data.min() == -128 and t.data.max() == 127


def test_trace_immutable(small_trace):
    with pytest.raises(ValueError):
        small_trace.data[0, 0, 0, 0, 0] = 1


def test_kvt1_header_layout(small_trace):
    buf = trace_to_bytes(small_trace)
    assert buf[:4] == b"KVT1"
    assert int.from_bytes(buf[4:6], "little") == 1
    assert int.from_bytes(buf[6:8], "little") == 2  # layers
    assert int.from_bytes(buf[16:20], "little") == 24  # decode_len
    s = small_trace.shape
    assert len(buf) == 20 + s.num_layers * 2 * small_trace.num_tokens * s.hidden_dim
    # first payload byte is layer 0, K, token 0, head 0, channel 0
    assert np.frombuffer(buf[20:21], dtype=np.int8)[0] == small_trace.data[0, 0, 0, 0, 0]
    # V payload of layer 0 follows the K payload
    kbytes = small_trace.num_tokens * s.hidden_dim
    v0 = np.frombuffer(buf[20 + kbytes:20 + 2 * kbytes], dtype=np.int8)
    assert np.array_equal(v0, small_trace.values(0).reshape(-1))


def test_roundtrip_file(tmp_path, small_trace):
    path = tmp_path / "t.kvt"
    n = write_trace(small_trace, path)
    assert n == path.stat().st_size
    assert read_trace(path) == small_trace
    bio = io.BytesIO()
    write_trace(small_trace, bio)
    bio.seek(0)
    assert read_trace(bio) == small_trace


@settings(max_examples=40, deadline=None)
@given(
    layers=st.integers(1, 3),
    heads=st.integers(1, 3),
    dim=st.integers(1, 6),
    p=st.integers(1, 5),
    d=st.integers(1, 5),
    seed=st.integers(0, 2**31),
)
def test_roundtrip_property(layers, heads, dim, p, d, seed):
    t = generate_synthetic_trace(LayerShape(layers, heads, dim), p, d, seed, 0.5, 3.0)
    assert trace_from_bytes(trace_to_bytes(t)) == t


def test_bad_magic_and_version(small_trace):
    buf = bytearray(trace_to_bytes(small_trace))
    with pytest.raises(UnsupportedVersionError):
        trace_from_bytes(b"KVT2" + bytes(buf[4:]))
    with pytest.raises(BadMagicError):
        trace_from_bytes(b"XXXX" + bytes(buf[4:]))
    buf[4] = 2
    with pytest.raises(UnsupportedVersionError):
        trace_from_bytes(bytes(buf))


def test_truncation_names_expected_and_actual(small_trace):
    buf = trace_to_bytes(small_trace)
    cut = buf[: len(buf) - 5]
    with pytest.raises(TruncatedError) as err:
        trace_from_bytes(cut)
    assert err.value.expected == len(buf)
    assert err.value.actual == len(buf) - 5
    assert str(len(buf)) in str(err.value) and str(len(buf) - 5) in str(err.value)
    with pytest.raises(TruncatedError):
        trace_from_bytes(buf[:10])


def test_shape_inconsistency(small_trace):
    buf = bytearray(trace_to_bytes(small_trace))
    buf[10:12] = (0).to_bytes(2, "little")  # head_dim 0
    with pytest.raises(ShapeMismatchError):
        trace_from_bytes(bytes(buf))
    with pytest.raises(ShapeMismatchError):
        trace_from_bytes(trace_to_bytes(small_trace) + b"\x00")


def test_kvtrace_rejects_wrong_shape():
    with pytest.raises(ShapeMismatchError):
        KvTrace(LayerShape(1, 1, 2), 1, 1, np.zeros((1, 2, 3, 1, 2), dtype=np.int8))
    with pytest.raises(InvalidArgumentError):
        KvTrace(LayerShape(1, 1, 1), 1, 0, np.full((1, 2, 1, 1, 1), 300))


def test_compression_config_validation():
    cfg = CompressionConfig.uniform(3, threshold=2, bits=4)
    assert cfg.num_layers == 3 and cfg.bits(1, 1) == 4 and cfg.threshold(2, 0) == 2
    assert CompressionConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InvalidArgumentError):
        CompressionConfig((1,), (1, 2), (4,), (4,))
    with pytest.raises(InvalidArgumentError):
        CompressionConfig((-1,), (1,), (4,), (4,))
    with pytest.raises(InvalidArgumentError):
        CompressionConfig((1,), (1,), (9,), (4,))
    with pytest.raises(InvalidArgumentError):
        CompressionConfig((1,), (1,), (4,), (1,))
    with pytest.raises(InvalidArgumentError):
        CompressionConfig.from_dict({"th_k": [1]})
