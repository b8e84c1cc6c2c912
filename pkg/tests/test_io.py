import struct

import numpy as np
import pytest

from ramnet import io as rio
from ramnet.events import EventStream


def test_tensor_round_trip_and_layout(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    rio.save_tensor(tmp_path / "a.ten", a)
    raw = (tmp_path / "a.ten").read_bytes()
    assert raw[:4] == b"TEN1"
    assert struct.unpack("<III", raw[4:16]) == (2, 2, 3)
    assert raw[16:] == a.astype("<f4").tobytes()
    np.testing.assert_array_equal(rio.load_tensor(tmp_path / "a.ten"), a)


def test_truncated_tensor_raises(tmp_path):
    rio.save_tensor(tmp_path / "a.ten", np.ones((4, 4)))
    (tmp_path / "b.ten").write_bytes((tmp_path / "a.ten").read_bytes()[:-3])
    with pytest.raises(rio.FormatError):
        rio.load_tensor(tmp_path / "b.ten")
    (tmp_path / "c.ten").write_bytes(b"XXXX")
    with pytest.raises(rio.FormatError):
        rio.load_tensor(tmp_path / "c.ten")


def test_checkpoint_round_trip_sorted(tmp_path):
    params = {"b.w": np.ones((2, 2), np.float32), "a.b": np.zeros(3, np.float32)}
    rio.save_checkpoint(tmp_path / "m.ckp", params)
    back = rio.load_checkpoint(tmp_path / "m.ckp")
    assert list(back) == ["a.b", "b.w"]
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])
    assert rio.checkpoint_bytes(params) == rio.checkpoint_bytes(dict(reversed(list(params.items()))))


def test_events_round_trip(tmp_path):
    ev = EventStream([1, 5, 5], [0, 3, 2], [1, 1, 0], [1, -1, 1], 4, 2)
    rio.save_events(tmp_path / "e.evt", ev)
    raw = (tmp_path / "e.evt").read_bytes()
    assert len(raw) == 4 + 12 + 14 * 3
    back = rio.load_events(tmp_path / "e.evt")
    for f in ("t", "x", "y", "p"):
        np.testing.assert_array_equal(getattr(back, f), getattr(ev, f))
    assert (back.width, back.height) == (4, 2)
    rio.save_events_csv(tmp_path / "e.csv", ev)
    csv_back = rio.load_events_csv(tmp_path / "e.csv", 4, 2)
    np.testing.assert_array_equal(csv_back.t, ev.t)


def test_depth_with_mask(tmp_path):
    d, m = np.random.default_rng(0).random((3, 3)), np.eye(3, dtype=bool)
    rio.save_depth(tmp_path / "d.ten", d, m)
    assert (tmp_path / "d.ten.mask").exists()
    d2, m2 = rio.load_depth(tmp_path / "d.ten")
    np.testing.assert_allclose(d2, d, rtol=1e-6)
    np.testing.assert_array_equal(m2, m)


def test_meta_round_trip(tmp_path):
    rio.write_meta(tmp_path / "meta.cfg", {"b": 2, "a": "x y"})
    assert (tmp_path / "meta.cfg").read_text() == "a = x y\nb = 2\n"
    assert rio.read_meta(tmp_path / "meta.cfg") == {"a": "x y", "b": "2"}
