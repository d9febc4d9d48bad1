import numpy as np
import pytest

from pcrkit.data import (
    ComposedQuery,
    DatasetRecord,
    ModalityItem,
    cosine,
    normalize,
    read_records,
    validate_record,
    validate_records,
    write_records,
)
from pcrkit.errors import DimensionMismatch, ZeroVector


def test_normalize_345_triangle():
    assert np.allclose(normalize(np.array([3.0, 4.0])), [0.6, 0.8])


def test_normalize_unit_passthrough():
    assert np.allclose(normalize(np.array([1.0, 0.0, 0.0])), [1, 0, 0])


def test_normalize_zero_vector_raises():
    with pytest.raises(ZeroVector):
        normalize(np.zeros(2))


def test_normalize_idempotent():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = rng.normal(size=8) * rng.uniform(0.1, 100)
        once = normalize(v)
        assert np.max(np.abs(normalize(once) - once)) < 1e-12


def test_cosine_orthonormal_and_identity():
    e1 = np.array([1.0, 0.0])
    e2 = np.array([0.0, 1.0])
    assert cosine(e1, e2) == 0.0
    assert cosine(e1, e1) == 1.0


def test_cosine_45_degrees():
    a = normalize(np.array([1.0, 1.0]))
    assert abs(cosine(a, np.array([1.0, 0.0])) - 0.70710678) < 1e-8


def test_cosine_symmetry_and_bound():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a = normalize(rng.normal(size=16))
        b = normalize(rng.normal(size=16))
        assert cosine(a, b) == cosine(b, a)
        assert abs(cosine(a, b)) <= 1 + 1e-9


def test_cosine_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        cosine(np.ones(3) / np.sqrt(3), np.ones(4) / 2)


def test_validate_record_text_only_ok():
    assert validate_record(DatasetRecord(id="a", text="hello")) == []


def test_validate_record_no_modality():
    violations = validate_record(DatasetRecord(id="a", class_label="x"))
    assert any("no modality" in v for v in violations)


def test_validate_records_duplicate_id():
    recs = [DatasetRecord(id="a", text="x"), DatasetRecord(id="a", text="y")]
    violations = validate_records(recs)
    assert any("duplicate id" in v for v in violations)


def test_validate_record_deep_missing_file(tmp_path):
    r = DatasetRecord(id="a", image_path="nope.png", text="x")
    violations = validate_record(r, deep=True, base_dir=tmp_path)
    assert any("not found" in v for v in violations)


def test_records_jsonl_roundtrip_omits_absent_fields(tmp_path):
    recs = [
        DatasetRecord(id="a", text="caption", split="train"),
        DatasetRecord(id="b", image_path="x.png", text="y", class_label="c", split="test"),
    ]
    path = tmp_path / "r.jsonl"
    write_records(recs, path)
    raw = path.read_text().splitlines()
    assert "null" not in raw[0] and "image_path" not in raw[0]
    back = read_records(path)
    assert [r.to_dict() for r in back] == [r.to_dict() for r in recs]


def test_modality_item_validation():
    with pytest.raises(Exception):
        ModalityItem.image(np.zeros((0, 4, 3), dtype=np.uint8))
    with pytest.raises(Exception):
        ModalityItem.video([])
    item = ModalityItem.text("hi")
    assert item.kind == "text"


def test_composed_query_preserves_order():
    a = ModalityItem.text("one")
    b = ModalityItem.text("two")
    q = ComposedQuery([a, b])
    assert q.items[0].payload == "one" and q.items[1].payload == "two"
    with pytest.raises(ValueError):
        ComposedQuery([])
