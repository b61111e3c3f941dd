from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from lupidet.data import (
    DatasetError,
    ingest_coco,
    ingest_voc,
    preprocess,
    read_split_manifest,
    split,
    tile,
    write_split_manifest,
)
from lupidet.types import (
    BoundingBox,
    DatasetTriplet,
    LabeledObject,
    ObjectSet,
    PreprocessConfig,
)


def _write_png(path, h, w, value=128):
    Image.fromarray(np.full((h, w, 3), value, dtype=np.uint8)).save(path)


def _coco_doc(images, annotations, categories):
    return {"images": images, "annotations": annotations, "categories": categories}


@pytest.fixture
def coco_dir(tmp_path):
    images = tmp_path / "images"
    images.mkdir()
    _write_png(images / "a.png", 100, 120)
    doc = _coco_doc(
        images=[{"id": 1, "file_name": "a.png", "width": 120, "height": 100}],
        annotations=[
            {"id": 1, "image_id": 1, "category_id": 5, "bbox": [10, 20, 30, 40]},
            {"id": 2, "image_id": 1, "category_id": 7, "bbox": [50, 50, 0, 10]},
        ],
        categories=[{"id": 5, "name": "cat"}, {"id": 7, "name": "dog"}],
    )
    ann = tmp_path / "ann.json"
    ann.write_text(json.dumps(doc))
    return ann, images


class TestIngestCoco:
    def test_converts_corners_and_remaps_labels(self, coco_dir):
        ann, images = coco_dir
        result = ingest_coco(ann, images)
        assert len(result.triplets) == 1
        (obj,) = result.triplets[0].truth.objects
        assert (obj.box.x_min, obj.box.y_min, obj.box.x_max, obj.box.y_max) == (10, 20, 40, 60)
        assert obj.label == 0  # category 5 is the lowest id
        assert result.label_map == {5: 0, 7: 1}

    def test_degenerate_box_dropped(self, coco_dir):
        ann, images = coco_dir
        result = ingest_coco(ann, images)
        assert result.dropped_boxes == 1
        assert len(result.triplets[0].truth.objects) == 1

    def test_zero_images_gives_empty_list(self, tmp_path):
        ann = tmp_path / "empty.json"
        ann.write_text(json.dumps(_coco_doc([], [], [{"id": 1, "name": "x"}])))
        assert ingest_coco(ann, tmp_path).triplets == []

    def test_malformed_json_names_problem(self, tmp_path):
        ann = tmp_path / "bad.json"
        ann.write_text("{not json")
        with pytest.raises(DatasetError, match="malformed COCO JSON"):
            ingest_coco(ann, tmp_path)

    def test_missing_required_field(self, tmp_path):
        ann = tmp_path / "nofield.json"
        ann.write_text(json.dumps({"images": [], "annotations": []}))
        with pytest.raises(DatasetError, match="categories"):
            ingest_coco(ann, tmp_path)

    def test_missing_image_file_lists_path(self, tmp_path):
        ann = tmp_path / "ann.json"
        ann.write_text(
            json.dumps(
                _coco_doc(
                    [{"id": 1, "file_name": "nope.png"}], [], [{"id": 1, "name": "x"}]
                )
            )
        )
        with pytest.raises(DatasetError, match="nope.png"):
            ingest_coco(ann, tmp_path)


VOC_XML = """<annotation>
  <filename>{name}.png</filename>
  <size><width>{w}</width><height>{h}</height><depth>3</depth></size>
  {objects}
</annotation>"""

VOC_OBJ = """<object>
  <name>{cls}</name>
  <bndbox><xmin>{x0}</xmin><ymin>{y0}</ymin><xmax>{x1}</xmax><ymax>{y1}</ymax></bndbox>
</object>"""


class TestIngestVoc:
    def _setup(self, tmp_path, objects_xml):
        xml_dir = tmp_path / "xml"
        images = tmp_path / "imgs"
        xml_dir.mkdir()
        images.mkdir()
        _write_png(images / "s1.png", 80, 90)
        (xml_dir / "s1.xml").write_text(VOC_XML.format(name="s1", w=90, h=80, objects=objects_xml))
        return xml_dir, images

    def test_two_known_objects(self, tmp_path):
        objs = VOC_OBJ.format(cls="bird", x0=1, y0=1, x1=20, y1=30) + VOC_OBJ.format(
            cls="boat", x0=40, y0=10, x1=60, y1=50
        )
        xml_dir, images = self._setup(tmp_path, objs)
        result = ingest_voc(xml_dir, images, ["bird", "boat"])
        (triplet,) = result.triplets
        assert [o.label for o in triplet.truth] == [0, 1]
        first = triplet.truth.objects[0].box
        # 1-based inclusive -> 0-based corners
        assert (first.x_min, first.y_min, first.x_max, first.y_max) == (0, 0, 20, 30)

    def test_empty_directory(self, tmp_path):
        (tmp_path / "xml").mkdir()
        assert ingest_voc(tmp_path / "xml", tmp_path, ["a"]).triplets == []

    def test_unknown_class_is_error(self, tmp_path):
        xml_dir, images = self._setup(
            tmp_path, VOC_OBJ.format(cls="plane", x0=1, y0=1, x1=5, y1=5)
        )
        with pytest.raises(DatasetError, match="plane"):
            ingest_voc(xml_dir, images, ["bird"])

    def test_missing_size_is_error(self, tmp_path):
        xml_dir = tmp_path / "xml"
        xml_dir.mkdir()
        (xml_dir / "bad.xml").write_text("<annotation><filename>x.png</filename></annotation>")
        with pytest.raises(DatasetError, match="size"):
            ingest_voc(xml_dir, tmp_path, ["bird"])


def _triplet(h=90, w=90, boxes=(), with_mask=False):
    objects = [LabeledObject(box=BoundingBox(*b), label=lbl) for b, lbl in boxes]
    return DatasetTriplet(
        image=np.random.default_rng(0).random((h, w, 3)).astype(np.float32),
        truth=ObjectSet(objects=objects, image_id="parent"),
        privileged=np.zeros((h, w), dtype=np.uint8) if with_mask else None,
    )


class TestTile:
    def test_identity_grid(self):
        t = _triplet(boxes=[((5, 5, 20, 20), 0)])
        assert tile(t, (1, 1)) == [t]

    def test_box_spanning_one_tile(self):
        t = _triplet(boxes=[((0, 0, 30, 30), 1)])
        children = tile(t, (3, 3))
        assert len(children) == 9
        assert len(children[0].truth.objects) == 1
        box = children[0].truth.objects[0].box
        assert (box.x_min, box.y_min, box.x_max, box.y_max) == (0, 0, 30, 30)
        assert all(len(c.truth.objects) == 0 for c in children[1:])

    def test_corner_box_lands_in_four_tiles(self):
        # centered on the shared corner of tiles (0,0),(0,1),(1,0),(1,1): each
        # clipped quarter keeps 25% >= 20% of the area
        t = _triplet(boxes=[((20, 20, 40, 40), 0)])
        children = tile(t, (3, 3))
        with_box = [i for i, c in enumerate(children) if c.truth.objects]
        assert with_box == [0, 1, 3, 4]

    def test_sliver_dropped(self):
        # 10% of the box area lands in tile (0,1): dropped there
        t = _triplet(boxes=[((10, 0, 33, 10), 0)])
        children = tile(t, (3, 3))
        assert len(children[0].truth.objects) == 1
        assert len(children[1].truth.objects) == 0

    def test_remainder_absorbed_by_last_tiles(self):
        t = _triplet(h=100, w=100)
        children = tile(t, (3, 3))
        assert children[0].image.shape[:2] == (33, 33)
        assert children[-1].image.shape[:2] == (34, 34)
        assert sum(c.image.shape[0] * c.image.shape[1] for c in children) == 100 * 100

    def test_privileged_tiled_identically(self):
        t = _triplet(with_mask=True)
        children = tile(t, (3, 3))
        assert all(c.privileged.shape == c.image.shape[:2] for c in children)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_child_boxes_stay_inside_tiles(self, seed):
        rng = np.random.default_rng(seed)
        boxes = []
        for _ in range(rng.integers(1, 6)):
            x0, y0 = rng.uniform(0, 70, size=2)
            w, h = rng.uniform(3, 40, size=2)
            boxes.append(((x0, y0, min(x0 + w, 90.0), min(y0 + h, 90.0)), 0))
        children = tile(_triplet(boxes=boxes), (3, 3))
        for child in children:
            ch, cw = child.image.shape[:2]
            for obj in child.truth:
                assert 0 <= obj.box.x_min < obj.box.x_max <= cw
                assert 0 <= obj.box.y_min < obj.box.y_max <= ch

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_child_boxes_map_back_inside_parents(self, seed):
        from lupidet.data import tile_bounds

        rng = np.random.default_rng(seed)
        boxes = []
        for _ in range(rng.integers(1, 5)):
            x0, y0 = rng.uniform(0, 60, size=2)
            boxes.append(((x0, y0, x0 + rng.uniform(5, 30), y0 + rng.uniform(5, 30)), 0))
        parent = _triplet(boxes=boxes)
        children = tile(parent, (3, 3))
        rects = tile_bounds(90, 90, (3, 3))
        for child, (ox, oy, _, _) in zip(children, rects):
            for obj in child.truth:
                mapped = obj.box.shifted(ox, oy)
                # the mapped-back child box is a clipped region of some parent box
                assert any(
                    mapped.x_min >= p.box.x_min - 1e-9
                    and mapped.y_min >= p.box.y_min - 1e-9
                    and mapped.x_max <= p.box.x_max + 1e-9
                    and mapped.y_max <= p.box.y_max + 1e-9
                    for p in parent.truth
                )


class TestPreprocess:
    def test_uniform_scale_factors(self):
        t = _triplet(h=400, w=400, boxes=[((10, 20, 50, 60), 0)])
        sample = preprocess(t, PreprocessConfig(target_size=800))
        box = sample.truth.objects[0].box
        assert (box.x_min, box.y_min, box.x_max, box.y_max) == (20, 40, 100, 120)
        assert sample.image.shape == (3, 800, 800)

    def test_constant_image_maps_to_zeros(self):
        t = DatasetTriplet(
            image=np.full((64, 64, 3), 0.5, dtype=np.float32),
            truth=ObjectSet(image_id="gray"),
        )
        sample = preprocess(t, PreprocessConfig(target_size=64))
        assert np.all(sample.image.numpy() == 0.0)

    def test_box_round_trip(self):
        t = _triplet(h=123, w=77, boxes=[((3.5, 10.25, 40.0, 99.5), 0)])
        sample = preprocess(t, PreprocessConfig(target_size=800))
        box = sample.truth.objects[0].box
        back = sample.transform.invert(box)
        original = t.truth.objects[0].box
        for a, b in zip(
            (back.x_min, back.y_min, back.x_max, back.y_max),
            (original.x_min, original.y_min, original.x_max, original.y_max),
        ):
            assert abs(a - b) < 1e-6

    def test_privileged_becomes_fourth_channel(self):
        t = _triplet(with_mask=True)
        t.privileged[10:20, 10:20] = 200
        sample = preprocess(t, PreprocessConfig(target_size=64))
        assert sample.privileged.shape == (1, 64, 64)
        assert sample.model_input.shape == (4, 64, 64)

    def test_deterministic(self):
        t = _triplet(boxes=[((5, 5, 30, 30), 0)])
        a = preprocess(t, PreprocessConfig(target_size=128))
        b = preprocess(t, PreprocessConfig(target_size=128))
        assert np.array_equal(a.image.numpy(), b.image.numpy())

    def test_dataset_global_stats(self):
        t = _triplet()
        cfg = PreprocessConfig(
            target_size=64, channel_stats=((0.5, 0.5, 0.5), (0.25, 0.25, 0.25))
        )
        sample = preprocess(t, cfg)
        assert sample.image.shape == (3, 64, 64)
        with pytest.raises(ValueError, match="channels"):
            preprocess(_triplet(with_mask=True), cfg)


class TestSplit:
    def _items(self, n):
        return [_triplet(h=10, w=10) for _ in range(n)]

    def test_sizes_and_determinism(self):
        items = self._items(10)
        a = split(items, (0.8, 0.1, 0.1), seed=7)
        b = split(items, (0.8, 0.1, 0.1), seed=7)
        assert tuple(len(part) for part in a) == (8, 1, 1)
        for pa, pb in zip(a, b):
            assert [id(x) for x in pa] == [id(x) for x in pb]

    def test_all_train(self):
        items = self._items(5)
        train, val, test = split(items, (1.0, 0.0, 0.0), seed=0)
        assert (len(train), len(val), len(test)) == (5, 0, 0)

    def test_different_seeds_permute_differently(self):
        items = self._items(30)
        a = split(items, (0.5, 0.25, 0.25), seed=1)
        b = split(items, (0.5, 0.25, 0.25), seed=2)
        assert tuple(len(p) for p in a) == tuple(len(p) for p in b)
        assert [id(x) for x in a[0]] != [id(x) for x in b[0]]

    def test_partition_property(self):
        items = self._items(23)
        train, val, test = split(items, (0.6, 0.2, 0.2), seed=3)
        ids = [id(x) for part in (train, val, test) for x in part]
        assert sorted(ids) == sorted(id(x) for x in items)
        assert len(set(ids)) == len(items)

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            split(self._items(4), (0.5, 0.2, 0.2), seed=0)
        with pytest.raises(ValueError):
            split(self._items(4), (1.5, -0.25, -0.25), seed=0)


def test_split_manifest_round_trip(tmp_path):
    path = tmp_path / "splits.txt"
    splits = {"train": ["a", "b"], "val": ["c"], "test": []}
    write_split_manifest(path, splits)
    assert read_split_manifest(path) == splits
