import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lrt import container
from lrt.errors import ParseError, VersionError

MAGIC = b"TEST"


def sample():
    r = np.random.default_rng(0)
    return {"a": 1, "b": [1, 2]}, {"x": r.normal(size=(3, 2)), "i": np.arange(5), "s": np.asarray(2.5)}


def test_roundtrip_bitwise():
    meta, arrays = sample()
    m2, a2 = container.decode(container.encode(MAGIC, meta, arrays), MAGIC)
    assert m2 == meta
    for k in arrays:
        assert a2[k].shape == np.asarray(arrays[k]).shape
        assert a2[k].tobytes() == np.asarray(arrays[k], dtype=a2[k].dtype).tobytes()
    assert a2["i"].dtype == np.int64


def test_special_floats_survive():
    arr = np.array([np.nan, np.inf, -0.0, 5e-324])
    _, out = container.decode(container.encode(MAGIC, {}, {"v": arr}), MAGIC)
    assert out["v"].tobytes() == arr.tobytes()


def test_bad_magic_and_version():
    blob = container.encode(MAGIC, *sample())
    with pytest.raises(ParseError):
        container.decode(blob, b"NOPE")
    bumped = blob[:4] + (99).to_bytes(4, "little") + blob[8:]
    with pytest.raises(VersionError):
        container.decode(bumped, MAGIC)


def test_truncation_reports_offset():
    blob = container.encode(MAGIC, *sample())
    for cut in (3, 9, 20, len(blob) // 2, len(blob) - 1):
        with pytest.raises(ParseError) as info:
            container.decode(blob[:cut], MAGIC)
        assert 0 <= info.value.offset <= cut


def test_trailing_bytes_rejected():
    with pytest.raises(ParseError):
        container.decode(container.encode(MAGIC, *sample()) + b"\0", MAGIC)


@given(st.data())
def test_any_corruption_is_a_parse_error(data):
    clean = container.encode(MAGIC, *sample())
    blob = bytearray(clean)
    for _ in range(data.draw(st.integers(1, 8))):
        pos = data.draw(st.integers(0, len(blob) - 1))
        blob[pos] = data.draw(st.integers(0, 255))
    if bytes(blob) == clean:
        return
    with pytest.raises(ParseError):
        container.decode(bytes(blob), MAGIC)


def test_every_single_byte_flip_detected():
    clean = container.encode(MAGIC, *sample())
    for pos in range(len(clean)):
        blob = bytearray(clean)
        blob[pos] ^= 0x5A
        with pytest.raises(ParseError):
            container.decode(bytes(blob), MAGIC)


def test_version_error_is_a_parse_error():
    assert issubclass(VersionError, ParseError)


def test_write_returns_file_hash(tmp_path):
    p = tmp_path / "f.bin"
    sha = container.write(p, MAGIC, *sample())
    assert sha == container.file_sha256(p)
