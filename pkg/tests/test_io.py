import gzip
import struct

import numpy as np
import pytest

from kfacbo import seeding
from kfacbo.errors import FormatError
from kfacbo.io import load_idx, load_tensors, read_csv, save_tensors, write_csv, write_idx


# -- tensor container ------------------------------------------------------------

def test_tensor_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"x": rng.standard_normal((3, 4)), "y": np.arange(5, dtype=np.int64),
               "scalar": np.array(2.5), "empty": np.zeros((0, 3))}
    path = tmp_path / "t.tnsr"
    save_tensors(path, tensors)
    back = load_tensors(path)
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_tensor_header_layout(tmp_path):
    path = tmp_path / "t.tnsr"
    save_tensors(path, {"ab": np.array([1.0, 2.0])})
    raw = path.read_bytes()
    assert raw[:4] == b"TNSR"
    assert struct.unpack_from("<II", raw, 4) == (1, 1)
    assert struct.unpack_from("<I", raw, 12) == (2,) and raw[16:18] == b"ab"
    assert struct.unpack_from("<III", raw, 18) == (0, 1, 2)
    assert np.frombuffer(raw[30:], "<f8").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("mutate, message", [
    (lambda raw: b"XXXX" + raw[4:], "magic"),
    (lambda raw: raw[:-3], "truncated"),
    (lambda raw: raw[:10], "truncated"),
    (lambda raw: raw + b"\0", "trailing"),
    (lambda raw: raw[:4] + struct.pack("<I", 9) + raw[8:], "version"),
])
def test_tensor_malformed_files_rejected(tmp_path, mutate, message):
    path = tmp_path / "t.tnsr"
    save_tensors(path, {"a": np.ones(3)})
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError, match=message):
        load_tensors(path)


def test_tensor_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(TypeError):
        save_tensors(tmp_path / "t.tnsr", {"s": np.array(["a"])})


# -- IDX -------------------------------------------------------------------------

def _fixture(tmp_path, images, labels, gz=False):
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(ip, lp, images, labels)
    if gz:
        for p in (ip, lp):
            p.write_bytes(gzip.compress(p.read_bytes()))
    return ip, lp


def test_idx_two_image_fixture_hand_crafted(tmp_path):
    ip, lp = tmp_path / "i", tmp_path / "l"
    ip.write_bytes(struct.pack(">4I", 0x803, 2, 2, 2) + bytes([0, 255, 51, 102, 1, 2, 3, 4]))
    lp.write_bytes(struct.pack(">2I", 0x801, 2) + bytes([3, 9]))
    x, y = load_idx(ip, lp)
    assert x.dtype == np.float64 and x.shape == (2, 4)
    np.testing.assert_array_equal(x[0], [0.0, 1.0, 0.2, 0.4])
    np.testing.assert_array_equal(x[1], np.array([1, 2, 3, 4]) / 255.0)
    assert y.tolist() == [3, 9] and y.dtype == np.int64


def test_idx_gzip_matches_plain(tmp_path):
    imgs = np.random.default_rng(1).integers(0, 256, (3, 4, 5), dtype=np.uint8)
    plain = load_idx(*_fixture(tmp_path, imgs, [0, 1, 2]))
    sub = tmp_path / "gz"
    sub.mkdir()
    zipped = load_idx(*_fixture(sub, imgs, [0, 1, 2], gz=True))
    np.testing.assert_array_equal(plain[0], zipped[0])
    assert plain[0].min() >= 0 and plain[0].max() <= 1


def test_idx_count_mismatch(tmp_path):
    ip, lp = _fixture(tmp_path, np.zeros((2, 2, 2)), [1, 2, 3])
    with pytest.raises(FormatError, match="count mismatch"):
        load_idx(ip, lp)


def test_idx_bad_magic_and_truncation(tmp_path):
    ip, lp = _fixture(tmp_path, np.zeros((2, 2, 2)), [1, 2])
    good = ip.read_bytes()
    ip.write_bytes(struct.pack(">I", 0x801) + good[4:])
    with pytest.raises(FormatError, match="magic"):
        load_idx(ip, lp)
    ip.write_bytes(good[:-1])
    with pytest.raises(FormatError, match="truncated"):
        load_idx(ip, lp)
    ip.write_bytes(good[:6])
    with pytest.raises(FormatError, match="truncated"):
        load_idx(ip, lp)


# -- CSV -------------------------------------------------------------------------

def test_csv_float_roundtrip_exact(tmp_path):
    vals = [0.1, 1 / 3, 1e-300, -2.5e17]
    write_csv(tmp_path / "a.csv", ["i", "v", "s"], [{"i": np.int64(k), "v": v, "s": "x"} for k, v in enumerate(vals)])
    rows = read_csv(tmp_path / "a.csv")
    assert [float(r["v"]) for r in rows] == vals
    assert [r["i"] for r in rows] == ["0", "1", "2", "3"]


def test_csv_header_only(tmp_path):
    write_csv(tmp_path / "a.csv", ["a", "b"], [])
    assert (tmp_path / "a.csv").read_text().strip() == "a,b"


# -- seeding ---------------------------------------------------------------------

def test_same_seed_and_label_give_identical_draws():
    a = seeding.stream(5, "inner").random(100)
    b = seeding.stream(5, "inner").random(100)
    assert a.tobytes() == b.tobytes()


def test_labels_used_by_the_package_do_not_collide():
    labels = ["linreg", "diagnostic", "split", "corrupt", "clusters", "init", "outer", "batch", "kfac",
              "inner", "curvature"]
    firsts = {seeding.stream(0, lbl).random() for lbl in labels}
    assert len(firsts) == len(labels)
    assert seeding.stream(0, "x").random() != seeding.stream(1, "x").random()


def test_creation_order_is_irrelevant():
    forward = seeding.seed_streams(3, ["a", "b", "c"])
    backward = seeding.seed_streams(3, ["c", "b", "a"])
    for k in "abc":
        assert forward[k].random(10).tobytes() == backward[k].random(10).tobytes()


def test_multi_label_streams_differ_by_position():
    assert seeding.stream(0, "a", 1).random() != seeding.stream(0, 1, "a").random()
