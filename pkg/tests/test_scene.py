import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenesync.scene import (
    ATTR_DIM,
    ClassTable,
    ObjectAttributes,
    SceneLayout,
    SceneParseError,
    SceneSchemaError,
    SceneSlot,
    canonical_slot_order,
    count_vector,
    load_scene,
    save_scene,
    soft_counts,
)


def _random_scene(table, rng):
    n = table.total_slots
    attrs = rng.normal(0, 1, (n, ATTR_DIM))
    attrs[:, 3:6] = rng.uniform(-np.pi + 1e-9, np.pi, (n, 3))
    return SceneLayout(table, attrs, rng.uniform(0, 1, n))


def test_class_table_basics():
    t = ClassTable(("bed", "chair"), (1, 4))
    assert t.total_slots == 5
    assert t.slots_of("chair") == 4
    assert t.slot_range("chair") == slice(1, 5)
    assert list(t.class_index_per_slot()) == [0, 1, 1, 1, 1]
    with pytest.raises(KeyError):
        t.slots_of("sofa")


def test_class_table_validation():
    with pytest.raises(ValueError):
        ClassTable(("a", "a"), (1, 1))
    with pytest.raises(ValueError):
        ClassTable(("a",), (0,))
    with pytest.raises(ValueError):
        ClassTable(("a", "b"), (1,))


def test_canonical_slot_order():
    t = ClassTable(("x", "y"), (2, 1))
    assert canonical_slot_order(t) == [("x", 0), ("x", 1), ("y", 0)]


def test_object_attributes_round_trip():
    v = np.arange(12.0) / 10.0
    a = ObjectAttributes.from_vector(v)
    assert np.allclose(a.as_vector(), v)
    with pytest.raises(ValueError):
        ObjectAttributes.from_vector(np.zeros(11))
    with pytest.raises(ValueError):
        ObjectAttributes.from_vector(np.full(12, np.nan))


def test_scene_layout_validation():
    t = ClassTable(("a",), (2,))
    with pytest.raises(ValueError):
        SceneLayout(t, np.zeros((3, ATTR_DIM)), np.zeros(3))
    with pytest.raises(ValueError):
        SceneLayout(t, np.zeros((2, ATTR_DIM)), np.array([0.5, 1.5]))
    bad = np.zeros((2, ATTR_DIM))
    bad[0, 0] = np.inf
    with pytest.raises(ValueError):
        SceneLayout(t, bad, np.zeros(2))


def test_scene_layout_arrays_read_only():
    t = ClassTable(("a",), (2,))
    s = SceneLayout.empty(t)
    with pytest.raises(ValueError):
        s.attrs[0, 0] = 1.0


def test_from_slots_requires_canonical_order():
    t = ClassTable(("a", "b"), (1, 1))
    a = ObjectAttributes.from_vector(np.zeros(12))
    good = [SceneSlot(a, 0.5, "a", 0), SceneSlot(a, 0.5, "b", 0)]
    s = SceneLayout.from_slots(t, good)
    assert s.indicators.tolist() == [0.5, 0.5]
    with pytest.raises(ValueError):
        SceneLayout.from_slots(t, list(reversed(good)))


def test_harden_ties_round_up_and_active_mask():
    t = ClassTable(("a",), (4,))
    s = SceneLayout(t, np.zeros((4, ATTR_DIM)), np.array([0.2, 0.5, 0.7, 1.0]))
    h = s.harden()
    assert h.indicators.tolist() == [0.0, 1.0, 1.0, 1.0]
    assert h.is_hard and not s.is_hard
    assert s.active_mask().tolist() == [False, True, True, True]
    assert s.harden(0.8).indicators.tolist() == [0.0, 0.0, 0.0, 1.0]


def test_count_vector_and_soft_counts():
    t = ClassTable(("a", "b"), (2, 3))
    z = np.array([0.3, 0.9, 1.0, 0.0, 0.25])
    s = SceneLayout(t, np.zeros((5, ATTR_DIM)), z)
    assert count_vector(s, "a") == pytest.approx(1.2)
    assert soft_counts(s) == {"a": pytest.approx(1.2), "b": pytest.approx(1.25)}
    with pytest.raises(ValueError):
        count_vector(s, "zzz")


def test_json_round_trip_bitwise():
    rng = np.random.default_rng(0)
    t = ClassTable(("bed", "nightstand", "lamp"), (1, 2, 3))
    s = _random_scene(t, rng)
    s2 = load_scene(save_scene(s))
    assert s2 == s  # exact array equality, not approx
    assert save_scene(s2) == save_scene(s)


def test_json_round_trip_empty_scene():
    t = ClassTable(("a",), (1,))
    s = SceneLayout.empty(t)
    assert load_scene(save_scene(s)) == s


def test_json_round_trip_large_table():
    rng = np.random.default_rng(1)
    t = ClassTable(tuple(f"c{i}" for i in range(16)), (5,) * 16)
    assert t.total_slots == 80
    s = _random_scene(t, rng)
    assert load_scene(save_scene(s)) == s


def test_load_scene_from_path(tmp_path):
    rng = np.random.default_rng(2)
    t = ClassTable(("a",), (2,))
    s = _random_scene(t, rng)
    p = tmp_path / "scene.json"
    p.write_text(save_scene(s))
    assert load_scene(p) == s
    assert load_scene(str(p)) == s


def test_parse_error_is_not_schema_error():
    with pytest.raises(SceneParseError):
        load_scene("{not json")
    assert not issubclass(SceneParseError, SceneSchemaError)


def _valid_doc():
    t = ClassTable(("a",), (1,))
    return json.loads(save_scene(SceneLayout.empty(t)))


@pytest.mark.parametrize(
    "mutate,msg",
    [
        (lambda d: d.pop("classes"), "classes"),
        (lambda d: d.pop("objects"), "objects"),
        (lambda d: d["objects"][0].pop("indicator"), "indicator"),
        (lambda d: d["objects"][0].pop("shape_code"), "shape_code"),
        (lambda d: d["objects"][0].__setitem__("size", [1, 2]), "size"),
        (lambda d: d["objects"][0].__setitem__("slot", 5), "order"),
        (lambda d: d["objects"].append(dict(d["objects"][0])), "expected"),
        (lambda d: d["objects"][0].__setitem__("indicator", 2.0), "0, 1"),
        (lambda d: d["classes"][0].pop("slots"), "slots"),
    ],
)
def test_schema_errors(mutate, msg):
    doc = _valid_doc()
    mutate(doc)
    with pytest.raises(SceneSchemaError, match=msg):
        load_scene(json.dumps(doc))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_round_trip_property(zs):
    t = ClassTable(("p", "q"), (2, 1))
    s = SceneLayout(t, np.zeros((3, ATTR_DIM)), np.array(zs))
    assert load_scene(save_scene(s)) == s
