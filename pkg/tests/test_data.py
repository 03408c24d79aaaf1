"""Dataset ingestion, splitting, batching, and file-format tests."""

import json
import math

import numpy as np
import pytest
import torch
from PIL import Image

import despeckle as d
from despeckle.data import write_manifest
from despeckle.errors import DataError


def _write_png(path, arr_uint8):
    Image.fromarray(arr_uint8).save(path)


# --- load_image ----------------------------------------------------------

def test_load_image_grayscale_values(tmp_path):
    arr = (np.arange(64, dtype=np.uint8).reshape(8, 8) * 4)
    p = tmp_path / "g.png"
    _write_png(p, arr)
    out = d.load_image(p, resolution=8)
    assert out.shape == (8, 8, 1)
    assert out.dtype == torch.float32
    assert torch.allclose(out[:, :, 0], torch.from_numpy(arr).float() / 255.0, atol=1e-6)


def test_load_image_rgb_uses_rec601_luminance(tmp_path):
    rgb = np.zeros((8, 8, 3), dtype=np.uint8)
    rgb[..., 0] = 200  # pure red
    p = tmp_path / "c.png"
    _write_png(p, rgb)
    out = d.load_image(p, resolution=8)
    assert abs(float(out.mean()) - 0.299 * 200 / 255) < 2e-3


def test_load_image_resizes(tmp_path):
    arr = np.full((32, 32), 128, dtype=np.uint8)
    p = tmp_path / "r.png"
    _write_png(p, arr)
    out = d.load_image(p, resolution=16)
    assert out.shape == (16, 16, 1)
    assert abs(float(out.mean()) - 128 / 255) < 1e-3


def test_load_image_range_clamped(tmp_path):
    arr = np.zeros((16, 16), dtype=np.uint8)
    arr[::2] = 255
    p = tmp_path / "b.png"
    _write_png(p, arr)
    out = d.load_image(p, resolution=8)
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


# --- load_folder ---------------------------------------------------------

def test_load_folder_sorted_and_flagged(tmp_path):
    for name in ("b.png", "a.png", "c.png"):
        _write_png(tmp_path / name, np.full((8, 8), 100, dtype=np.uint8))
    items = d.load_folder(tmp_path, resolution=8, clean=True)
    assert [it.name for it in items] == ["a", "b", "c"]
    assert all(it.is_clean for it in items)
    noisy = d.load_folder(tmp_path, resolution=8, clean=False)
    assert not any(it.is_clean for it in noisy)


def test_load_folder_skips_undecodable_with_warning(tmp_path):
    _write_png(tmp_path / "ok.png", np.full((8, 8), 10, dtype=np.uint8))
    (tmp_path / "broken.png").write_bytes(b"not a png at all")
    with pytest.warns(UserWarning):
        items = d.load_folder(tmp_path, resolution=8)
    assert [it.name for it in items] == ["ok"]


def test_load_folder_errors(tmp_path):
    with pytest.raises(DataError):
        d.load_folder(tmp_path / "missing", resolution=8)
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(DataError):
        d.load_folder(empty, resolution=8)


# --- split ---------------------------------------------------------------

def _items(n):
    return [d.ImageTensor(values=torch.full((8, 8, 1), i / n), source_path=f"i{i:02d}.png")
            for i in range(n)]


def test_split_sizes_and_disjoint():
    items = _items(10)
    sp = d.split(items, 0.8, seed=3)
    assert len(sp.train) == 8 and len(sp.test) == 2
    names = sorted(it.name for it in sp.train + sp.test)
    assert names == sorted(it.name for it in items)


def test_split_rounds_and_clamps():
    assert len(d.split(_items(10), 0.75, seed=0).train) == 8  # round(7.5) banker's -> 8
    sp_lo = d.split(_items(5), 0.01, seed=0)
    assert len(sp_lo.train) == 1  # clamped away from empty train
    sp_hi = d.split(_items(5), 0.999, seed=0)
    assert len(sp_hi.test) == 1  # clamped away from empty test


def test_split_deterministic_and_seed_sensitive():
    items = _items(12)
    a = d.split(items, 0.75, seed=5)
    b = d.split(items, 0.75, seed=5)
    c = d.split(items, 0.75, seed=6)
    assert [x.name for x in a.train] == [x.name for x in b.train]
    assert [x.name for x in a.train] != [x.name for x in c.train]


def test_split_contiguous_keeps_order():
    items = _items(10)
    sp = d.split(items, 0.8, seed=3, contiguous=True)
    assert [x.name for x in sp.train] == [x.name for x in items[:8]]
    assert [x.name for x in sp.test] == [x.name for x in items[8:]]


def test_split_rejects_bad_ratio_and_tiny_sets():
    with pytest.raises(ValueError):
        d.split(_items(10), 0.0, seed=0)
    with pytest.raises(ValueError):
        d.split(_items(10), 1.0, seed=0)
    with pytest.raises(ValueError):
        d.split(_items(1), 0.5, seed=0)


# --- batching ------------------------------------------------------------

def test_make_batches_covers_split_once():
    sp = d.split(_items(10), 0.8, seed=1)
    batches = d.make_batches(sp, batch_size=3, seed=1, epoch=0)
    assert [len(b) for b in batches] == [3, 3, 2]
    seen = sorted(it.name for b in batches for it in b)
    assert seen == sorted(it.name for it in sp.train)


def test_make_batches_epoch_changes_order():
    sp = d.split(_items(16), 0.75, seed=1)
    order0 = [it.name for b in d.make_batches(sp, 4, seed=1, epoch=0) for it in b]
    order1 = [it.name for b in d.make_batches(sp, 4, seed=1, epoch=1) for it in b]
    order0_again = [it.name for b in d.make_batches(sp, 4, seed=1, epoch=0) for it in b]
    assert order0 == order0_again
    assert order0 != order1


def test_stack_batch_shape():
    sp = d.split(_items(6), 0.8, seed=1)
    batch = d.make_batches(sp, 4, seed=0, epoch=0)[0]
    stacked = d.stack_batch(batch)
    assert stacked.shape == (4, 8, 8, 1)


# --- PNG and raw tensor round trips ---------------------------------------

def test_save_png_quantizes_and_clips(tmp_path):
    t = torch.tensor([[[-0.5], [0.251]], [[0.5], [1.7]]])
    p = tmp_path / "q.png"
    d.save_png(t, p)
    back = np.asarray(Image.open(p))
    assert back.dtype == np.uint8
    assert back.tolist() == [[0, 64], [128, 255]]


def test_tensor_file_round_trip_exact(tmp_path):
    t = torch.rand(9, 7, 2)
    p = tmp_path / "t.spkt"
    d.write_tensor(t, p)
    back = d.read_tensor(p)
    assert torch.equal(back, t)
    assert p.read_bytes()[:4] == b"SPKT"


def test_read_tensor_rejects_garbage(tmp_path):
    p = tmp_path / "bad.spkt"
    p.write_bytes(b"WHAT" + b"\x00" * 16)
    with pytest.raises(DataError):
        d.read_tensor(p)
    q = tmp_path / "short.spkt"
    d.write_tensor(torch.rand(4, 4, 1), q)
    q.write_bytes(q.read_bytes()[:-8])
    with pytest.raises(DataError):
        d.read_tensor(q)


# --- synthetic shapes ----------------------------------------------------

def test_synthetic_shapes_contract():
    imgs = d.synthetic_shapes(5, 64, seed=2)
    assert len(imgs) == 5
    for it in imgs:
        assert it.values.shape == (64, 64, 1)
        assert it.values.dtype == torch.float32
        assert float(it.values.min()) >= 0.0 and float(it.values.max()) <= 1.0
        assert it.is_clean
    again = d.synthetic_shapes(5, 64, seed=2)
    assert all(torch.equal(a.values, b.values) for a, b in zip(imgs, again))
    other = d.synthetic_shapes(5, 64, seed=3)
    assert not all(torch.equal(a.values, b.values) for a, b in zip(imgs, other))


def test_synthetic_shapes_have_structure():
    # each image must contain real content above its background level
    for it in d.synthetic_shapes(6, 64, seed=4):
        assert float(it.values.max()) > 0.35
        assert float(it.values.double().std(correction=0)) > 0.02


# --- manifest ------------------------------------------------------------

def test_write_manifest_deterministic(tmp_path):
    rows = [{"noisy": "a.png", "clean": "c.png", "alpha": 0.21, "seed": 9}]
    p1, p2 = tmp_path / "m1.json", tmp_path / "m2.json"
    write_manifest(rows, p1)
    write_manifest(rows, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert json.loads(p1.read_text()) == rows
