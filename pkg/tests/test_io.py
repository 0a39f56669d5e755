import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsfcn import io


shapes = st.tuples(*[st.integers(1, 4)] * 4)


@settings(max_examples=60, deadline=None)
@given(shapes, st.sampled_from([np.float32, np.float64]), st.integers(0, 2**31 - 1))
def test_wsft_round_trip(shape, dtype, seed):
    rng = np.random.default_rng(seed)
    arr = (rng.standard_normal(shape) * 10 ** rng.uniform(-30, 30)).astype(dtype)
    blob = io.encode_wsft(arr)
    back = io.decode_wsft(blob)
    assert back.dtype == arr.dtype and back.shape == arr.shape and back.tobytes() == arr.tobytes()
    assert io.encode_wsft(back) == blob


def test_wsft_header_layout():
    blob = io.encode_wsft(np.arange(6, dtype=np.float64).reshape(1, 2, 3, 1))
    assert blob[:4] == bytes([0x57, 0x53, 0x46, 0x54])
    assert struct.unpack_from("<IBB4I", blob, 4) == (1, 1, 4, 1, 2, 3, 1)
    assert len(blob) == 4 + 4 + 1 + 1 + 16 + 6 * 8
    assert np.frombuffer(blob[26:], "<f8").tolist() == list(range(6))


def test_wsft_special_values_bit_exact():
    arr = np.array([np.nan, -0.0, np.inf, 5e-324], np.float64).reshape(1, 1, 2, 2)
    assert io.decode_wsft(io.encode_wsft(arr)).tobytes() == arr.tobytes()


def test_wsft_rejects_bad_input():
    with pytest.raises(io.FormatError):
        io.encode_wsft(np.zeros((2, 2)))
    with pytest.raises(io.FormatError):
        io.encode_wsft(np.zeros((1, 1, 1, 1), np.int32))
    blob = io.encode_wsft(np.zeros((1, 1, 2, 2), np.float32))
    with pytest.raises(io.FormatError):
        io.decode_wsft(b"XSFT" + blob[4:])
    with pytest.raises(io.FormatError):
        io.decode_wsft(blob[:-1])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**31 - 1))
def test_pnm_round_trip(h, w, seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    mask = rng.integers(0, 256, size=(h, w), dtype=np.uint8)
    ppm, pgm = io.encode_ppm(img), io.encode_pgm(mask)
    assert ppm.startswith(f"P6\n{w} {h}\n255\n".encode()) and pgm.startswith(b"P5")
    assert np.array_equal(io.decode_ppm(ppm), img) and io.encode_ppm(io.decode_ppm(ppm)) == ppm
    assert np.array_equal(io.decode_pgm(pgm), mask) and io.encode_pgm(io.decode_pgm(pgm)) == pgm


def test_pnm_reader_accepts_comments_and_rejects_other_maxval():
    body = bytes(range(6))
    assert io.decode_pgm(b"P5\n# made by hand\n3 2\n255\n" + body).tolist() == [[0, 1, 2], [3, 4, 5]]
    with pytest.raises(io.FormatError):
        io.decode_pgm(b"P5\n3 2\n65535\n" + body * 2)
    with pytest.raises(io.FormatError):
        io.decode_ppm(b"P5\n3 2\n255\n" + body)


def test_labels_round_trip():
    entries = {"a.ppm": [1, 3], "b.ppm": [2], "c.ppm": [1, 2, 3, 4]}
    text = io.format_labels(entries)
    assert text.splitlines()[0] == "a.ppm: 1,3"
    assert io.parse_labels(text) == entries


def test_key_values():
    kv = io.parse_key_values("# header\na = 1\n\nb=two # trailing\n")
    assert kv == {"a": "1", "b": "two"}
    with pytest.raises(io.FormatError, match="duplicate"):
        io.parse_key_values("a = 1\na = 2\n")
    with pytest.raises(io.FormatError, match=":2:"):
        io.parse_key_values("a = 1\nnot a pair\n")


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.integers(0, 20), st.floats(0, 1)), st.floats(0, 1), st.floats(0, 1))
def test_report_round_trip(ious, m, a):
    text = io.format_report(ious, m, a, header="variant=full")
    parsed = io.parse_report(text)
    assert io.format_report(*parsed, header="variant=full") == text
    assert parsed[1] == round(m, 6) or abs(parsed[1] - m) <= 5e-7
    lines = text.splitlines()
    assert lines[-2].startswith("miou, ") and lines[-1].startswith("pixacc, ")
    assert all(len(line.split(", ")[1].split(".")[1]) == 6 for line in lines[1:])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_checkpoint_round_trip(tmp_path_factory, seed, count):
    rng = np.random.default_rng(seed)
    d = tmp_path_factory.mktemp("ckpt")
    tensors = {f"mod{i}.part/weight": rng.standard_normal(tuple(rng.integers(1, 4, 4))).astype(
        [np.float32, np.float64][i % 2]) for i in range(count)}
    manifest = {"variant": "full", "epoch": 3, "seed": seed, "config_hash": "abc"}
    io.save_checkpoint(d, tensors, manifest)
    assert (d / "mod0.part__weight.wsft").exists()
    back, man = io.load_checkpoint(d)
    assert man["version"] == "1" and man["variant"] == "full" and man["epoch"] == "3"
    assert set(back) == set(tensors)
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes() and back[k].dtype == tensors[k].dtype
    before = io.tree_digest(d)
    io.save_checkpoint(d, back, {k: v for k, v in man.items() if k != "version"})
    assert io.tree_digest(d) == before
    assert (d / "manifest.txt").read_text().splitlines()[0] == "version = 1"


def test_tree_digest_sensitive_to_content(tmp_path):
    (tmp_path / "a").write_bytes(b"x")
    d1 = io.tree_digest(tmp_path)
    (tmp_path / "a").write_bytes(b"y")
    assert io.tree_digest(tmp_path) != d1
