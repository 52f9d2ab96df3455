from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esc_codec import bitstream as bs
from esc_codec.csrvq import EncodedPayload

from oracle_bits import GOLDEN, esc_reference, pack_bits_reference

GOLDEN_DIR = Path(__file__).parent / "golden"


def payload_from(kw) -> EncodedPayload:
    return EncodedPayload(np.array(kw["streams"]), kw["fingerprint"], kw["bits"], kw.get("sample_rate", 16000))


@st.composite
def payloads(draw):
    bits = draw(st.integers(1, 16))
    s, g, l = draw(st.integers(1, 6)), draw(st.integers(0, 40)), draw(st.integers(1, 4))
    seed = draw(st.integers(0, 2**32 - 1))
    codes = np.random.default_rng(seed).integers(0, 1 << bits, size=(s, g, l))
    fp = draw(st.integers(0, 2**64 - 1))
    return EncodedPayload(codes, fp, bits, draw(st.sampled_from([8000, 16000, 48000])))


def test_three_codes_pack_msb_first():
    assert bs.pack_codes(np.array([1023, 0, 1]), 10) == bytes.fromhex("ffc00004")
    assert pack_bits_reference([1023, 0, 1], 10) == bytes.fromhex("ffc00004")


def test_header_is_24_bytes():
    assert bs.HEADER_SIZE == 24


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_golden_files(name):
    data = (GOLDEN_DIR / name).read_bytes()
    p = payload_from(GOLDEN[name])
    assert bs.pack(p) == data
    assert bs.unpack(data) == p


@settings(max_examples=200, deadline=None)
@given(payloads())
def test_pack_matches_reference_and_round_trips(p):
    data = bs.pack(p)
    assert data == esc_reference(p.codes.tolist(), p.frame_groups, p.product_size, p.codebook_bits,
                                 p.fingerprint, p.sample_rate)
    assert len(data) == bs.file_size(p) == 24 + p.num_streams * -(-p.frame_groups * p.product_size * p.codebook_bits // 8)
    assert bs.unpack(data) == p
    assert bs.pack(bs.unpack(data)) == data


@settings(max_examples=60, deadline=None)
@given(payloads(), st.data())
def test_stream_truncation_yields_lower_rate_payload(p, data):
    raw = bs.pack(p)
    per = bs.stream_nbytes(p.frame_groups, p.product_size, p.codebook_bits)
    if per == 0:
        return
    k = data.draw(st.integers(1, p.num_streams))
    extra = data.draw(st.integers(0, per - 1)) if k < p.num_streams else 0
    cut = raw[:24 + k * per + extra]
    q = bs.unpack(cut, lenient=True)
    assert q.num_streams == k
    np.testing.assert_array_equal(q.codes, p.codes[:k])
    if k < p.num_streams:
        with pytest.raises(bs.BitstreamError, match="truncated"):
            bs.unpack(cut)


def test_truncation_reports_offset():
    p = payload_from(GOLDEN["three_streams.esc"])
    with pytest.raises(bs.BitstreamError, match=r"offset 43"):
        bs.unpack(bs.pack(p)[:50])


def test_truncated_header_and_first_stream_rejected():
    data = bs.pack(payload_from(GOLDEN["three_streams.esc"]))
    with pytest.raises(bs.BitstreamError):
        bs.unpack(data[:10])
    with pytest.raises(bs.BitstreamError):
        bs.unpack(data[:30], lenient=True)


def test_bad_magic_rejected():
    data = bytearray(bs.pack(payload_from(GOLDEN["single_frame.esc"])))
    data[0] ^= 0xFF
    with pytest.raises(bs.BitstreamError, match="magic"):
        bs.unpack(bytes(data))


def test_nonzero_padding_rejected():
    data = bytearray(bs.pack(payload_from(GOLDEN["single_frame.esc"])))
    data[-1] |= 0x01
    with pytest.raises(bs.BitstreamError, match="padding"):
        bs.unpack(bytes(data))


def test_trailing_bytes_rejected():
    data = bs.pack(payload_from(GOLDEN["single_frame.esc"]))
    with pytest.raises(bs.BitstreamError, match="trailing"):
        bs.unpack(data + b"\0")


def test_fingerprint_mismatch_strict_vs_warning():
    p = payload_from(GOLDEN["single_frame.esc"])
    data = bs.pack(p)
    with pytest.raises(bs.FingerprintMismatch):
        bs.unpack(data, expected_fingerprint=1)
    with pytest.warns(UserWarning, match="fingerprint"):
        assert bs.unpack(data, expected_fingerprint=1, strict=False) == p
    assert bs.unpack(data, expected_fingerprint=p.fingerprint) == p


def test_out_of_range_codes_and_empty_payloads_rejected():
    with pytest.raises(bs.BitstreamError):
        bs.pack_codes(np.array([16]), 4)
    with pytest.raises(ValueError):
        EncodedPayload(np.array([[[1024]]]), 0, 10)
    with pytest.raises(ValueError):
        EncodedPayload(np.zeros((0, 3, 3), dtype=int), 0, 10)


@pytest.mark.parametrize("s,kbps", [(1, 1.5), (2, 3.0), (4, 6.0), (6, 9.0)])
def test_bitrate_for_three_second_base_clip(s, kbps):
    p = EncodedPayload(np.zeros((s, 150, 3), dtype=int), 0, 10)
    assert p.num_bits == 4500 * s
    assert bs.bitrate(p, 3.0) == kbps


def test_single_stream_body_is_563_bytes():
    p = EncodedPayload(np.zeros((1, 150, 3), dtype=int), 0, 10)
    assert len(bs.pack(p)) - 24 == 563


def test_bitrate_requires_positive_duration():
    with pytest.raises(ValueError):
        bs.bitrate(EncodedPayload(np.zeros((1, 1, 1), dtype=int), 0, 10), 0.0)


def test_file_round_trip(tmp_path):
    p = payload_from(GOLDEN["toy_4bit.esc"])
    path = tmp_path / "x.esc"
    assert bs.write_esc(path, p) == bs.file_size(p)
    assert bs.read_esc(path) == p
