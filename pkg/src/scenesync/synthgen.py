"""Synthetic bedroom generator and the corruption model used for testing.

Scenes follow a small layout grammar on a square floor plan (z up,
objects resting on the floor): a bed against a wall, one or two
nightstands flanking its head, an optional wardrobe against a side wall,
and optionally a lamp standing on each nightstand. Generated scenes are
penetration-free by construction (verified, with rejection).

`corrupt` turns a clean scene into the noisy over-complete predictions
that synchronization consumes: per-slot attribute noise, softened and
occasionally flipped indicators, garbage attributes on inactive slots,
and pairwise relative attributes with additive noise plus a fraction of
gross outliers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .objective import PredictionBundle
from .relative import EDGE_DIM, RE_SLICE, SE_SLICE, TE_SLICE, RelativeTensor, phi_all
from .rotation import wrap_angle
from .scene import ATTR_DIM, ClassTable, SceneLayout, R_SLICE, S_SLICE, T_SLICE, D_SLICE

__all__ = [
    "GrammarConfig",
    "CorruptionConfig",
    "default_class_table",
    "generate",
    "corrupt",
]


def default_class_table() -> ClassTable:
    return ClassTable(("bed", "nightstand", "wardrobe", "lamp"), (2, 3, 2, 3))


@dataclass(frozen=True)
class GrammarConfig:
    arena_half: float = 3.0  # floor plan is [-arena_half, arena_half]^2
    rotation_jitter: float = 0.17  # max |yaw| deviation from wall alignment
    two_nightstand_prob: float = 0.8
    wardrobe_prob: float = 0.7
    lamp_prob: float = 0.6
    max_attempts: int = 1000

    def to_dict(self) -> dict:
        return {
            "arena_half": self.arena_half,
            "rotation_jitter": self.rotation_jitter,
            "two_nightstand_prob": self.two_nightstand_prob,
            "wardrobe_prob": self.wardrobe_prob,
            "lamp_prob": self.lamp_prob,
            "max_attempts": self.max_attempts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GrammarConfig":
        return cls(**d)


@dataclass(frozen=True)
class CorruptionConfig:
    sigma_t: float = 0.2  # translation noise, nodes and edges
    sigma_r: float = 0.02  # rotation noise (radians); rotations are easy to predict
    sigma_s: float = 0.05  # size / scale-difference noise
    sigma_d: float = 0.1  # shape-code noise
    p_z: float = 0.1  # indicator flip probability
    p_out: float = 0.1  # fraction of edges replaced by gross outliers
    soft_hi: float = 0.9  # indicator value reported for "present"
    soft_lo: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.p_z <= 1.0 or not 0.0 <= self.p_out <= 1.0:
            raise ValueError("p_z and p_out must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "sigma_t": self.sigma_t,
            "sigma_r": self.sigma_r,
            "sigma_s": self.sigma_s,
            "sigma_d": self.sigma_d,
            "p_z": self.p_z,
            "p_out": self.p_out,
            "soft_hi": self.soft_hi,
            "soft_lo": self.soft_lo,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionConfig":
        return cls(**d)


_SHAPE_MEANS = {
    "bed": (1.0, 0.0, 0.0),
    "nightstand": (0.0, 1.0, 0.0),
    "wardrobe": (0.0, 0.0, 1.0),
    "lamp": (0.7, 0.7, 0.0),
}


def _aabb_overlaps(attrs, active):
    """True if any two active boxes overlap on all three axes."""
    idx = np.nonzero(active)[0]
    for a in range(len(idx)):
        for b in range(a + 1, len(idx)):
            v, w = idx[a], idx[b]
            half = 0.5 * (attrs[v, S_SLICE] + attrs[w, S_SLICE])
            gap = np.abs(attrs[w, T_SLICE] - attrs[v, T_SLICE])
            if np.all(gap < half):
                return True
    return False


def _build_bedroom(rng, grammar):
    """One sample from the grammar; may still collide (caller rejects)."""
    table = default_class_table()
    n = table.total_slots
    attrs = np.zeros((n, ATTR_DIM))
    z = np.zeros(n)
    A = grammar.arena_half
    jit = grammar.rotation_jitter

    def place(cls, slot, size, yaw, xy, zc):
        i = table.slot_range(cls).start + slot
        attrs[i, S_SLICE] = size
        attrs[i, R_SLICE] = (0.0, 0.0, wrap_angle(yaw))
        attrs[i, T_SLICE] = (xy[0], xy[1], zc)
        attrs[i, D_SLICE] = np.asarray(_SHAPE_MEANS[cls]) + rng.normal(0, 0.1, 3)
        z[i] = 1.0

    def clustered(centers, jitter):
        return float(rng.choice(centers) + rng.normal(0, jitter))

    # Bed near the -y wall, head toward the wall, facing +y. Positions are
    # cluster + jitter: rooms follow a handful of canonical layouts.
    bed = np.array([rng.uniform(1.7, 1.9), rng.uniform(2.0, 2.2), rng.uniform(0.5, 0.65)])
    bx = np.clip(clustered([-1.1, 0.0, 1.1], 0.12), -A + bed[0] / 2 + 0.3, A - bed[0] / 2 - 0.3)
    by = -A + bed[1] / 2 + 0.1 + abs(rng.normal(0, 0.1))
    place("bed", 0, bed, rng.uniform(-jit, jit), (bx, by), bed[2] / 2)

    # Nightstands flank the bed head, placed relative to the bed so the
    # pairwise geometry is tightly structured.
    n_ns = 2 if rng.random() < grammar.two_nightstand_prob else 1
    sides = [-1.0, 1.0] if n_ns == 2 else [rng.choice([-1.0, 1.0])]
    ns_xy = []
    for k, side in enumerate(sides):
        ns = np.array([rng.uniform(0.42, 0.52), rng.uniform(0.42, 0.52), rng.uniform(0.45, 0.6)])
        nx = bx + side * (bed[0] / 2 + ns[0] / 2 + 0.08 + abs(rng.normal(0, 0.04)))
        ny = by - bed[1] / 2 + ns[1] / 2 + rng.normal(0, 0.06)
        place("nightstand", k, ns, rng.uniform(-jit, jit), (nx, ny), ns[2] / 2)
        ns_xy.append((k, nx, ny, ns))

    # Wardrobe near the +x or -x wall, rotated to face inward.
    if rng.random() < grammar.wardrobe_prob:
        wd = np.array([rng.uniform(1.0, 1.8), rng.uniform(0.55, 0.7), rng.uniform(1.8, 2.2)])
        side = rng.choice([-1.0, 1.0])
        wx = side * (A - wd[1] / 2 - 0.08 - abs(rng.normal(0, 0.08)))
        wy = float(np.clip(clustered([-1.4, 0.0, 1.4], 0.15), -A + 1.0, A - wd[0] / 2 - 0.3))
        place("wardrobe", 0, wd, side * np.pi / 2 + rng.uniform(-jit, jit), (wx, wy), wd[2] / 2)

    # Lamps stand on nightstands (disjoint in z by construction).
    for k, nx, ny, ns in ns_xy:
        if rng.random() < grammar.lamp_prob:
            lamp = np.array([rng.uniform(0.2, 0.3), rng.uniform(0.2, 0.3), rng.uniform(0.4, 0.55)])
            lx = nx + rng.normal(0, 0.04)
            ly = ny + rng.normal(0, 0.04)
            place("lamp", k, lamp, rng.uniform(-jit, jit), (lx, ly), ns[2] + lamp[2] / 2)

    return SceneLayout(table, attrs, z)


def generate(grammar: GrammarConfig, n: int, seed: int) -> list:
    """n penetration-free bedroom scenes, deterministic per seed."""
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(n):
        for _ in range(grammar.max_attempts):
            scene = _build_bedroom(rng, grammar)
            if not _aabb_overlaps(scene.attrs, scene.active_mask()):
                scenes.append(scene)
                break
        else:
            raise RuntimeError(
                f"no collision-free layout in {grammar.max_attempts} attempts"
            )
    return scenes


def corrupt(scene: SceneLayout, corruption: CorruptionConfig, seed: int) -> PredictionBundle:
    """Noisy over-complete predictions for one clean scene."""
    if not scene.is_hard:
        raise ValueError("corrupt expects a hard ground-truth scene")
    rng = np.random.default_rng(seed)
    c = corruption
    table = scene.class_table
    n = table.total_slots
    active = scene.active_mask()
    A = 3.0  # garbage-draw scale for inactive slots and outlier edges

    attrs = scene.attrs.copy()
    attrs[:, S_SLICE] += rng.normal(0, c.sigma_s, (n, 3))
    attrs[:, R_SLICE] = wrap_angle(attrs[:, R_SLICE] + rng.normal(0, c.sigma_r, (n, 3)))
    attrs[:, T_SLICE] += rng.normal(0, c.sigma_t, (n, 3))
    attrs[:, D_SLICE] += rng.normal(0, c.sigma_d, (n, 3))
    attrs[:, S_SLICE] = np.maximum(attrs[:, S_SLICE], 0.05)
    # Inactive slots report unstructured attributes.
    for i in np.nonzero(~active)[0]:
        attrs[i, S_SLICE] = rng.uniform(0.2, 2.0, 3)
        attrs[i, R_SLICE] = rng.uniform(-np.pi, np.pi, 3)
        attrs[i, T_SLICE] = rng.uniform(-A, A, 3)
        attrs[i, D_SLICE] = rng.normal(0, 1, 3)

    z = np.where(active, c.soft_hi, c.soft_lo)
    flip = rng.random(n) < c.p_z
    z = np.where(flip, c.soft_hi + c.soft_lo - z, z)

    node_preds = SceneLayout(table, attrs, z)

    # Edges: relative attributes of the noisy nodes for pairs touching an
    # inactive slot; of the clean scene (plus noise) when both are active.
    edges = phi_all(attrs)
    both = np.outer(active, active)
    np.fill_diagonal(both, False)
    clean = phi_all(scene.attrs)
    edges[both] = clean[both]
    noise = np.zeros((n, n, EDGE_DIM))
    noise[:, :, SE_SLICE] = rng.normal(0, c.sigma_s, (n, n, 9))
    noise[:, :, RE_SLICE] = rng.normal(0, c.sigma_r, (n, n, 3))
    noise[:, :, TE_SLICE] = rng.normal(0, c.sigma_t, (n, n, 3))
    edges = edges + noise
    edges[:, :, RE_SLICE] = wrap_angle(edges[:, :, RE_SLICE])

    outlier = rng.random((n, n)) < c.p_out
    for v, w in zip(*np.nonzero(outlier)):
        if v == w:
            continue
        edges[v, w, SE_SLICE] = rng.uniform(-2.0, 2.0, 9)
        edges[v, w, RE_SLICE] = rng.uniform(-np.pi, np.pi, 3)
        edges[v, w, TE_SLICE] = rng.uniform(-2 * A, 2 * A, 3)
    idx = np.arange(n)
    edges[idx, idx] = 0.0

    return PredictionBundle(node_preds, RelativeTensor(table, edges))
