import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from opendas.data import (CLIP_MEAN, SegmentRecord, crop_record, decode_rle, encode_rle,
                          generate_synthetic, load_manifest, load_segments, mask_and_fill,
                          mask_bbox, read_mask, resize_bilinear, save_manifest,
                          scannetpp_offices_split, split_queries, synthetic_negatives,
                          write_mask, write_rgb)
from opendas.errors import ShapeError, ValidationError
from opendas.mining import load_negative_bank


def test_default_fill_color():
    assert CLIP_MEAN == (0.48145466, 0.4578275, 0.40821073)


def test_full_mask_is_identity_then_resize():
    rng = np.random.default_rng(0)
    img = rng.random((20, 20, 3))
    mask = np.ones((20, 20), bool)
    assert np.array_equal(mask_and_fill(img, mask).pixels, img)
    crop = mask_and_fill(img, mask, size=8)
    assert np.allclose(crop.pixels, resize_bilinear(img, 8))


def test_empty_mask_is_constant_fill_and_flagged():
    img = np.random.default_rng(1).random((10, 12, 3))
    with pytest.warns(UserWarning, match="empty mask"):
        crop = mask_and_fill(img, np.zeros((10, 12), bool), size=6)
    assert crop.empty_mask
    assert np.allclose(crop.pixels, np.broadcast_to(CLIP_MEAN, (6, 6, 3)))


@settings(max_examples=60, deadline=None)
@given(arrays(bool, (9, 11)), st.tuples(*[st.floats(0, 1)] * 3))
def test_outside_mask_equals_fill_exactly(mask, fill):
    img = np.random.default_rng(2).random((9, 11, 3))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        crop = mask_and_fill(img, mask, fill_color=fill)
    if not mask.any():
        return
    top, bottom, left, right = mask_bbox(mask)
    sub_mask = mask[top:bottom, left:right]
    assert np.array_equal(crop.pixels[~sub_mask], np.broadcast_to(fill, (int((~sub_mask).sum()), 3)))
    assert np.array_equal(crop.pixels[sub_mask], img[top:bottom, left:right][sub_mask])


def test_bbox_padding_and_clipping():
    mask = np.zeros((100, 100), bool)
    mask[40:60, 10:30] = True
    assert mask_bbox(mask) == (38, 62, 8, 32)
    mask[:] = False
    mask[0:10, 90:100] = True
    assert mask_bbox(mask) == (0, 11, 89, 100)


def test_mask_and_fill_errors():
    img = np.zeros((4, 4, 3))
    with pytest.raises(ShapeError):
        mask_and_fill(img, np.ones((3, 4), bool))
    with pytest.raises(ValidationError):
        mask_and_fill(img, np.ones((4, 4), np.uint8))
    with pytest.raises(ShapeError):
        mask_and_fill(np.zeros((4, 4)), np.ones((4, 4), bool))


def test_split_reported_counts():
    common = [f"class {i}" for i in range(108)]
    train = common + [f"train only {i}" for i in range(48)]
    test = common + [f"test only {i}" for i in range(125)]
    qs = split_queries(train, test)
    assert qs.counts() == {"train_queries": 156, "test_queries": 233, "base": 108, "novel": 125}


def test_split_edge_cases():
    qs = split_queries({"a", "b"}, {"b", "a"})
    assert qs.base_test == ["a", "b"] and qs.novel_test == []
    qs = split_queries(["a"], ["b", "c"])
    assert qs.base_test == [] and qs.novel_test == ["b", "c"]
    qs = split_queries(["Wall"], ["wall"])
    assert qs.novel_test == ["wall"]
    with pytest.raises(ValidationError):
        split_queries([], ["a"])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("abcdefgh"), min_size=1), st.lists(st.sampled_from("abcdefgh"),
                                                                    min_size=1))
def test_split_is_partition(train, test):
    qs = split_queries(train, test)
    assert set(qs.base_test) | set(qs.novel_test) == set(test)
    assert not set(qs.base_test) & set(qs.novel_test)
    assert set(qs.base_test) == set(test) & set(train)


def test_offices_split_resource():
    info = scannetpp_offices_split()
    assert len(info["train_scenes"]) == 14 and len(info["test_scenes"]) == 16
    assert not set(info["train_scenes"]) & set(info["test_scenes"])
    assert (info["train_images"], info["test_images"]) == (7989, 11054)
    assert info["query_counts"]["base"] + info["query_counts"]["novel"] == 233


@settings(max_examples=100, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 8), st.integers(1, 8))))
def test_rle_round_trip(mask):
    rle = encode_rle(mask)
    assert rle["counts"][0] >= 0 and sum(rle["counts"]) == mask.size
    assert np.array_equal(decode_rle(rle), mask)


def test_rle_bad_counts():
    with pytest.raises(ValidationError):
        decode_rle({"size": [2, 2], "counts": [1, 1]})


def _write_pair(tmp_path, name, size=(8, 8), fill=True):
    img = np.random.default_rng(0).random((*size, 3))
    mask = np.zeros(size, bool)
    if fill:
        mask[2:5, 3:6] = True
    write_rgb(tmp_path / f"{name}.png", img)
    write_mask(tmp_path / f"{name}_m.png", mask)
    return tmp_path / f"{name}.png", tmp_path / f"{name}_m.png"


def test_manifest_round_trip(tmp_path):
    img, mask = _write_pair(tmp_path, "a")
    records = [
        SegmentRecord(str(img.resolve()), str(mask.resolve()), "red square", 0, "train"),
        SegmentRecord(str(img.resolve()), encode_rle(np.eye(8, dtype=bool)), "blue circle", 1,
                      "test"),
    ]
    save_manifest(records, tmp_path / "m.jsonl")
    rows = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert rows[0]["image"] == "a.png" and set(rows[0]) == {"image", "mask", "label",
                                                             "segment_id", "split"}
    assert load_manifest(tmp_path / "m.jsonl") == records


def test_manifest_three_lines(tmp_path):
    lines = [json.dumps({"image": "x.png", "mask": "m.png", "label": f"l{i}",
                         "segment_id": i, "split": "train"}) for i in range(3)]
    (tmp_path / "m.jsonl").write_text("\n".join(lines) + "\n")
    assert len(load_manifest(tmp_path / "m.jsonl")) == 3


@pytest.mark.parametrize("row,msg", [
    ({"image": "x.png", "mask": "m.png", "label": "", "segment_id": 0}, "empty label"),
    ({"image": "x.png", "mask": "m.png", "label": "a"}, "segment_id"),
    ({"image": "x.png", "mask": "m.png", "label": "a", "segment_id": 0, "split": "val"},
     "unknown split"),
])
def test_manifest_bad_record_names_line(tmp_path, row, msg):
    good = json.dumps({"image": "y.png", "mask": "m.png", "label": "a", "segment_id": 0})
    (tmp_path / "m.jsonl").write_text(good + "\n" + json.dumps(row) + "\n")
    with pytest.raises(ValidationError, match=rf"m\.jsonl:2: .*{msg}"):
        load_manifest(tmp_path / "m.jsonl")


def test_manifest_duplicate_segment(tmp_path):
    row = json.dumps({"image": "x.png", "mask": "m.png", "label": "a", "segment_id": 4})
    (tmp_path / "m.jsonl").write_text(row + "\n" + row + "\n")
    with pytest.raises(ValidationError, match="duplicate segment_id"):
        load_manifest(tmp_path / "m.jsonl")


def test_manifest_malformed_json(tmp_path):
    (tmp_path / "m.jsonl").write_text("{oops\n")
    with pytest.raises(ValidationError, match=r"m\.jsonl:1"):
        load_manifest(tmp_path / "m.jsonl")


def test_crop_record_missing_file_names_record(tmp_path):
    img, _ = _write_pair(tmp_path, "a")
    rec = SegmentRecord(str(img), str(tmp_path / "nope.png"), "red square", 7)
    with pytest.raises(FileNotFoundError, match="segment 7"):
        crop_record(rec)


def test_crop_record_and_inline_mask(tmp_path):
    img, mask_path = _write_pair(tmp_path, "a")
    mask = read_mask(str(mask_path))
    a = crop_record(SegmentRecord(str(img), str(mask_path), "x", 0), size=4)
    b = crop_record(SegmentRecord(str(img), encode_rle(mask), "x", 0), size=4)
    assert np.array_equal(a.pixels, b.pixels) and a.pixels.shape == (4, 4, 3)


def test_load_segments_tensor(tmp_path):
    img, mask = _write_pair(tmp_path, "a")
    segs = load_segments([SegmentRecord(str(img), str(mask), "x", 0)], 16)
    assert tuple(segs.images.shape) == (1, 16, 16, 3) and segs.labels == ["x"]


def test_synthetic_counts_and_bank(tmp_path):
    records, bank = generate_synthetic(8, 10, 32, seed=1, out_dir=tmp_path)
    labels = {r.label for r in records}
    train = {r.label for r in records if r.split == "train"}
    assert len(labels) == 8 and len(train) == 6
    assert set(bank.entries) == train
    for key, negs in bank.entries.items():
        assert len(negs) == 5 and key not in negs
    split = json.loads((tmp_path / "split.json").read_text())
    assert split["counts"] == {"train_queries": 6, "test_queries": 8, "base": 6, "novel": 2}
    assert load_negative_bank(tmp_path / "negatives.json").entries == bank.entries
    assert len(load_manifest(tmp_path / "train.jsonl")) == 6 * 7


def test_synthetic_deterministic(tmp_path):
    generate_synthetic(4, 3, 32, seed=5, out_dir=tmp_path / "a")
    generate_synthetic(4, 3, 32, seed=5, out_dir=tmp_path / "b")
    for name in sorted(p.name for p in (tmp_path / "a" / "images").iterdir()):
        assert (tmp_path / "a" / "images" / name).read_bytes() == \
            (tmp_path / "b" / "images" / name).read_bytes()
    assert (tmp_path / "a" / "train.jsonl").read_text() == \
        (tmp_path / "b" / "train.jsonl").read_text()


def test_synthetic_masks_cover_labelled_shape(tmp_path):
    records, _ = generate_synthetic(3, 2, 32, seed=0, out_dir=tmp_path, novel_fraction=0.0)
    for r in records:
        mask = read_mask(r.mask)
        assert 0.02 < mask.mean() < 0.6


def test_synthetic_negatives_differ():
    for neg in synthetic_negatives("red", "square"):
        assert neg != "red square"
    with pytest.raises(ValidationError):
        generate_synthetic(1, 2, 32, seed=0, out_dir="unused")
