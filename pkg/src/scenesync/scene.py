"""Over-complete slot representation of a scene and its JSON serialization.

A scene is a fixed grid of slots: each class c owns N_c slots, ordered by
class order then slot index. Every slot carries a 12-dim attribute vector
(size 3, Euler rotation 3, translation 3, shape code 3) plus a soft
existence indicator in [0, 1]. Inactive slots (indicator ~ 0) retain
attribute storage but their values are meaningless; consumers gate on the
indicator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .rotation import wrap_angle

__all__ = [
    "ClassTable",
    "ObjectAttributes",
    "SceneSlot",
    "SceneLayout",
    "SceneParseError",
    "SceneSchemaError",
    "canonical_slot_order",
    "count_vector",
    "load_scene",
    "save_scene",
    "ATTR_DIM",
    "S_SLICE",
    "R_SLICE",
    "T_SLICE",
    "D_SLICE",
]

ATTR_DIM = 12
S_SLICE = slice(0, 3)
R_SLICE = slice(3, 6)
T_SLICE = slice(6, 9)
D_SLICE = slice(9, 12)


class SceneParseError(ValueError):
    """Input text is not valid JSON."""


class SceneSchemaError(ValueError):
    """Input parses but violates the scene file schema."""


@dataclass(frozen=True)
class ClassTable:
    """Ordered class identifiers and slot counts per class."""

    classes: tuple[str, ...]
    slots: tuple[int, ...]

    def __post_init__(self):
        if len(self.classes) != len(self.slots):
            raise ValueError("classes and slots length mismatch")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class identifiers must be unique")
        if any(n < 1 for n in self.slots):
            raise ValueError("every class needs at least one slot")
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "slots", tuple(int(n) for n in self.slots))

    @classmethod
    def from_dict(cls, d: dict) -> "ClassTable":
        return cls(tuple(d.keys()), tuple(d.values()))

    @property
    def total_slots(self) -> int:
        return sum(self.slots)

    def slots_of(self, name: str) -> int:
        try:
            return self.slots[self.classes.index(name)]
        except ValueError:
            raise KeyError(f"unknown class {name!r}") from None

    def class_index_per_slot(self) -> np.ndarray:
        """Integer class index for every slot, in canonical order."""
        return np.repeat(np.arange(len(self.classes)), self.slots)

    def slot_range(self, name: str) -> slice:
        i = self.classes.index(name)
        start = sum(self.slots[:i])
        return slice(start, start + self.slots[i])


def canonical_slot_order(table: ClassTable) -> list[tuple[str, int]]:
    """Deterministic slot order: class order, then slot index."""
    return [(c, i) for c, n in zip(table.classes, table.slots) for i in range(n)]


@dataclass(frozen=True)
class ObjectAttributes:
    """Per-object attributes: size, Euler rotation, translation, shape code."""

    size: tuple[float, float, float]
    rotation: tuple[float, float, float]
    translation: tuple[float, float, float]
    shape_code: tuple[float, float, float]

    def __post_init__(self):
        vec = self.as_vector()
        if not np.all(np.isfinite(vec)):
            raise ValueError("attribute entries must be finite")

    @classmethod
    def from_vector(cls, v) -> "ObjectAttributes":
        v = np.asarray(v, dtype=float)
        if v.shape != (ATTR_DIM,):
            raise ValueError(f"expected {ATTR_DIM}-vector, got shape {v.shape}")
        return cls(
            tuple(v[S_SLICE]),
            tuple(wrap_angle(v[R_SLICE])),
            tuple(v[T_SLICE]),
            tuple(v[D_SLICE]),
        )

    def as_vector(self) -> np.ndarray:
        return np.array(
            self.size + self.rotation + self.translation + self.shape_code,
            dtype=float,
        )


@dataclass(frozen=True)
class SceneSlot:
    """One slot of the over-complete grid: attributes + soft indicator."""

    attrs: ObjectAttributes
    indicator: float
    cls: str
    slot_index: int

    def __post_init__(self):
        if not 0.0 <= self.indicator <= 1.0:
            raise ValueError(f"indicator {self.indicator} outside [0, 1]")


@dataclass(frozen=True, eq=False)
class SceneLayout:
    """Dense scene: class table plus per-slot attributes and indicators.

    Backed by read-only arrays `attrs` (n_slots, 12) and `indicators`
    (n_slots,); `slots` materializes SceneSlot views on demand.
    """

    class_table: ClassTable
    attrs: np.ndarray = field(repr=False)
    indicators: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = self.class_table.total_slots
        attrs = np.ascontiguousarray(np.asarray(self.attrs, dtype=float))
        z = np.ascontiguousarray(np.asarray(self.indicators, dtype=float))
        if attrs.shape != (n, ATTR_DIM):
            raise ValueError(f"attrs shape {attrs.shape} != ({n}, {ATTR_DIM})")
        if z.shape != (n,):
            raise ValueError(f"indicators shape {z.shape} != ({n},)")
        if not np.all(np.isfinite(attrs)):
            raise ValueError("non-finite attribute values")
        if np.any(z < 0.0) or np.any(z > 1.0):
            raise ValueError("indicators outside [0, 1]")
        attrs.setflags(write=False)
        z.setflags(write=False)
        object.__setattr__(self, "attrs", attrs)
        object.__setattr__(self, "indicators", z)

    @classmethod
    def from_slots(cls, table: ClassTable, slots: list[SceneSlot]) -> "SceneLayout":
        order = canonical_slot_order(table)
        if [(s.cls, s.slot_index) for s in slots] != order:
            raise ValueError("slots not in canonical order")
        attrs = np.stack([s.attrs.as_vector() for s in slots])
        z = np.array([s.indicator for s in slots])
        return cls(table, attrs, z)

    @classmethod
    def empty(cls, table: ClassTable) -> "SceneLayout":
        n = table.total_slots
        return cls(table, np.zeros((n, ATTR_DIM)), np.zeros(n))

    @property
    def slots(self) -> list[SceneSlot]:
        order = canonical_slot_order(self.class_table)
        return [
            SceneSlot(
                ObjectAttributes.from_vector(self.attrs[i]),
                float(self.indicators[i]),
                c,
                k,
            )
            for i, (c, k) in enumerate(order)
        ]

    @property
    def is_hard(self) -> bool:
        return bool(np.all((self.indicators == 0.0) | (self.indicators == 1.0)))

    def harden(self, threshold: float = 0.5) -> "SceneLayout":
        """Threshold indicators into {0, 1}; ties (== threshold) round up."""
        z = np.where(self.indicators >= threshold, 1.0, 0.0)
        return SceneLayout(self.class_table, self.attrs, z)

    def active_mask(self) -> np.ndarray:
        return self.indicators >= 0.5

    def replace(self, attrs=None, indicators=None) -> "SceneLayout":
        return SceneLayout(
            self.class_table,
            self.attrs if attrs is None else attrs,
            self.indicators if indicators is None else indicators,
        )

    def __eq__(self, other):
        if not isinstance(other, SceneLayout):
            return NotImplemented
        return (
            self.class_table == other.class_table
            and np.array_equal(self.attrs, other.attrs)
            and np.array_equal(self.indicators, other.indicators)
        )

    def __hash__(self):
        return hash((self.class_table, self.attrs.tobytes(), self.indicators.tobytes()))


def count_vector(scene: SceneLayout, cls: str) -> float:
    """Sum of indicators over the slots of one class (real for soft scenes)."""
    sl = scene.class_table.slot_range(cls)  # raises ValueError for unknown class
    return float(scene.indicators[sl].sum())


def soft_counts(scene: SceneLayout) -> dict[str, float]:
    """Indicator sums for every class."""
    return {c: count_vector(scene, c) for c in scene.class_table.classes}


def save_scene(scene: SceneLayout) -> str:
    """Serialize to the scene JSON format (doubles at full precision)."""
    objs = []
    for i, (c, k) in enumerate(canonical_slot_order(scene.class_table)):
        a = scene.attrs[i]
        objs.append(
            {
                "class": c,
                "slot": k,
                "size": list(a[S_SLICE]),
                "rotation": list(a[R_SLICE]),
                "translation": list(a[T_SLICE]),
                "shape_code": list(a[D_SLICE]),
                "indicator": float(scene.indicators[i]),
            }
        )
    doc = {
        "classes": [
            {"name": c, "slots": n}
            for c, n in zip(scene.class_table.classes, scene.class_table.slots)
        ],
        "objects": objs,
    }
    # json emits repr(float): shortest string that round-trips the double.
    return json.dumps(doc, indent=1)


def _require(cond, msg):
    if not cond:
        raise SceneSchemaError(msg)


def load_scene(text_or_path) -> SceneLayout:
    """Parse a scene JSON document (text, or a path-like to one)."""
    text = text_or_path
    if hasattr(text_or_path, "read_text"):
        text = text_or_path.read_text()
    elif isinstance(text_or_path, str) and "\n" not in text_or_path and text_or_path.endswith(".json"):
        with open(text_or_path) as fh:
            text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneParseError(f"invalid JSON at line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    _require(isinstance(doc, dict), "top level must be an object")
    _require("classes" in doc, "missing 'classes'")
    _require("objects" in doc, "missing 'objects'")
    names, counts = [], []
    for entry in doc["classes"]:
        _require(isinstance(entry, dict) and "name" in entry and "slots" in entry,
                 "class entries need 'name' and 'slots'")
        names.append(entry["name"])
        counts.append(entry["slots"])
    try:
        table = ClassTable(tuple(names), tuple(counts))
    except ValueError as exc:
        raise SceneSchemaError(str(exc)) from exc
    order = canonical_slot_order(table)
    objs = doc["objects"]
    _require(len(objs) == len(order),
             f"expected {len(order)} objects (one per slot), got {len(objs)}")
    n = len(order)
    attrs = np.zeros((n, ATTR_DIM))
    z = np.zeros(n)
    for i, (obj, (c, k)) in enumerate(zip(objs, order)):
        _require(isinstance(obj, dict), f"object {i} is not a JSON object")
        for fieldname in ("class", "slot", "size", "rotation", "translation",
                          "shape_code", "indicator"):
            _require(fieldname in obj, f"object {i} missing field '{fieldname}'")
        _require(obj["class"] == c and obj["slot"] == k,
                 f"object {i} out of canonical order: got ({obj['class']}, "
                 f"{obj['slot']}), expected ({c}, {k})")
        for fieldname, sl in (("size", S_SLICE), ("rotation", R_SLICE),
                              ("translation", T_SLICE), ("shape_code", D_SLICE)):
            val = obj[fieldname]
            _require(isinstance(val, list) and len(val) == 3,
                     f"object {i} field '{fieldname}' must be a 3-vector")
            attrs[i, sl] = val
        z[i] = obj["indicator"]
    try:
        return SceneLayout(table, attrs, z)
    except ValueError as exc:
        raise SceneSchemaError(str(exc)) from exc
