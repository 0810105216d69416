import struct

import numpy as np
import pytest

from blocklora import checkpoint
from blocklora.adapter import BlockLoRAAdapter, LoRAAdapter
from blocklora.errors import FormatError, TruncatedError


def _block(rng, dtype=np.float64, freeze=False):
    return BlockLoRAAdapter(rng.normal(size=(5, 2)).astype(dtype),
                            [rng.normal(size=(2, 3)).astype(dtype) for _ in range(2)],
                            freeze_down=freeze)


def test_header_layout(rng):
    buf = checkpoint.to_bytes(_block(rng))
    assert buf[:4] == b"BLRA"
    assert struct.unpack("<IBBIIII", buf[4:26]) == (1, 1, 0, 5, 3, 4, 2)
    assert len(buf) == 26 + (5 * 2 + 2 * 2 * 3) * 8


def test_hand_built_lora_payload():
    A = np.array([[1.0], [2.0]])
    B = np.array([[3.0, 4.0, 5.0]])
    buf = struct.pack("<4sIBBIIII", b"BLRA", 1, 0, 0, 2, 3, 1, 1) + struct.pack("<5d", 1, 2, 3, 4, 5)
    assert checkpoint.to_bytes(LoRAAdapter(A, B)) == buf
    ad = checkpoint.from_bytes(buf)
    assert isinstance(ad, LoRAAdapter)
    assert ad.A.tolist() == A.tolist() and ad.B.tolist() == B.tolist()


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_round_trip_bitwise(rng, dtype, tmp_path):
    ad = _block(rng, dtype)
    path = tmp_path / "a.blra"
    checkpoint.save(ad, path)
    back = checkpoint.load(path)
    assert back.A_s.dtype == dtype
    assert back.A_s.tobytes() == ad.A_s.tobytes()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(back.B_blocks, ad.B_blocks))


def test_frozen_down_kind(rng):
    buf = checkpoint.to_bytes(_block(rng, freeze=True))
    assert buf[8] == 2
    assert checkpoint.from_bytes(buf).freeze_down


def _patch(buf, offset, fmt, value):
    b = bytearray(buf)
    struct.pack_into(fmt, b, offset, value)
    return bytes(b)


@pytest.mark.parametrize("offset,fmt,value,field", [
    (0, "<4s", b"XXXX", "magic"),
    (4, "<I", 2, "version"),
    (8, "<B", 7, "kind"),
    (9, "<B", 5, "precision"),
    (10, "<I", 0, "shape"),
    (22, "<I", 3, "shape"),
])
def test_rejects_bad_header(rng, offset, fmt, value, field):
    buf = _patch(checkpoint.to_bytes(_block(rng)), offset, fmt, value)
    with pytest.raises(FormatError) as info:
        checkpoint.from_bytes(buf)
    assert info.value.field == field


def test_vanilla_must_have_one_block(rng):
    buf = _patch(checkpoint.to_bytes(_block(rng)), 8, "<B", 0)
    with pytest.raises(FormatError) as info:
        checkpoint.from_bytes(buf)
    assert info.value.field == "n"


def test_truncated_is_io_and_format(rng):
    buf = checkpoint.to_bytes(_block(rng))
    with pytest.raises(TruncatedError) as info:
        checkpoint.from_bytes(buf[:-1])
    assert isinstance(info.value, OSError) and isinstance(info.value, FormatError)
    with pytest.raises(TruncatedError):
        checkpoint.from_bytes(buf[:10])


def test_trailing_bytes_rejected(rng):
    with pytest.raises(FormatError) as info:
        checkpoint.from_bytes(checkpoint.to_bytes(_block(rng)) + b"\0")
    assert info.value.field == "payload"
