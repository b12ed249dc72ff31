import numpy as np
import pytest

from mixrank.errors import DecodeError
from mixrank.payload import decode_payload, encode_payload


class TestByteLayout:
    def test_documented_example(self):
        # 1x2 float32 [1.0, 2.0]
        blob = encode_payload(np.array([[1.0, 2.0]], dtype=np.float32))
        want = bytes([
            0x4D, 0x58, 0x46, 0x31,  # "MXF1"
            0x01,                     # dtype float32
            0x02,                     # ndim
            0x01, 0x00, 0x00, 0x00,   # dim 1
            0x02, 0x00, 0x00, 0x00,   # dim 2
            0x00, 0x00, 0x80, 0x3F,   # 1.0f LE
            0x00, 0x00, 0x00, 0x40,   # 2.0f LE
        ])
        assert blob == want

    def test_float64_code(self):
        blob = encode_payload(np.zeros((1,), dtype=np.float64))
        assert blob[4] == 2


class TestRoundTrip:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    @pytest.mark.parametrize("shape", [(3,), (2, 5), (2, 3, 4), (1, 1)])
    def test_bitwise(self, rng, dtype, shape):
        x = rng.normal(size=shape).astype(dtype)
        back = decode_payload(encode_payload(x))
        assert back.dtype == x.dtype
        assert back.shape == x.shape
        np.testing.assert_array_equal(back, x)

    def test_zero_length_axis(self):
        x = np.zeros((0, 4))
        np.testing.assert_array_equal(decode_payload(encode_payload(x)), x)


class TestDecodeErrors:
    def test_bad_magic(self):
        blob = b"MXF2" + encode_payload(np.zeros(2))[4:]
        with pytest.raises(DecodeError) as err:
            decode_payload(blob)
        assert err.value.field == "magic"

    def test_truncated_body(self):
        blob = encode_payload(np.zeros(4))
        with pytest.raises(DecodeError) as err:
            decode_payload(blob[:-3])
        assert err.value.field == "data"

    def test_trailing_garbage(self):
        blob = encode_payload(np.zeros(4)) + b"\x00"
        with pytest.raises(DecodeError) as err:
            decode_payload(blob)
        assert err.value.field == "data"

    def test_unknown_dtype(self):
        blob = bytearray(encode_payload(np.zeros(2)))
        blob[4] = 9
        with pytest.raises(DecodeError) as err:
            decode_payload(bytes(blob))
        assert err.value.field == "dtype"

    def test_dims_overflow(self):
        import struct
        blob = b"MXF1" + struct.pack("<BB", 2, 2) + struct.pack("<II", 1 << 31, 1 << 31)
        with pytest.raises(DecodeError) as err:
            decode_payload(blob)
        assert err.value.field == "dims"

    def test_truncated_dims(self):
        import struct
        blob = b"MXF1" + struct.pack("<BB", 2, 3) + struct.pack("<I", 4)
        with pytest.raises(DecodeError) as err:
            decode_payload(blob)
        assert err.value.field == "dims"

    def test_non_finite_rejected_on_encode(self):
        with pytest.raises(ValueError):
            encode_payload(np.array([np.inf]))
