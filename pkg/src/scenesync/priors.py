"""Scene priors: translation mixtures, relative-translation mixtures with
penetration masks, and object-count mixtures, all fit from hard scenes.

Translation and relative-translation priors are independent 1D mixtures
per axis (only translation is modeled; rotations/sizes pass through).
Count priors hold both the empirical discrete tables and continuous
mixtures fit to the counts, so the relaxed (real-valued) counts seen
during indicator optimization can be scored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .gmm import Gmm1D, Gmm2D, fit_gmm_em
from .relative import TE_SLICE, phi_all
from .scene import ClassTable, T_SLICE

__all__ = [
    "TranslationPrior",
    "RelativePrior",
    "CountPrior",
    "PriorModel",
    "penetration_mask",
    "penetration_mask_grad",
    "fit_priors",
    "regularizer_l",
    "count_prior_logpdf",
    "TRANSLATION_COMPONENTS",
    "RELATIVE_COMPONENTS",
    "COUNT_COMPONENTS",
    "COUNT_PAIR_COMPONENTS",
    "COUNT_VARIANCE_FLOOR",
]

TRANSLATION_COMPONENTS = 6
RELATIVE_COMPONENTS = 8
COUNT_COMPONENTS = 2
COUNT_PAIR_COMPONENTS = 4
# Counts are integers, so EM drives the count mixtures to the variance
# floor. The resulting near-discrete density acts as a barrier that keeps
# relaxed counts pinned near the values seen in training; widening this
# floor trades indicator accuracy for smoothness and is not worth it.
COUNT_VARIANCE_FLOOR = 1e-6

# Prior used for classes / pairs never observed in the corpus.
_WIDE_VARIANCE = 100.0


def _wide_gmm1d() -> Gmm1D:
    return Gmm1D(np.array([1.0]), np.array([0.0]), np.array([_WIDE_VARIANCE]))


def _wide_gmm2d() -> Gmm2D:
    return Gmm2D(np.array([1.0]), np.zeros((1, 2)), _WIDE_VARIANCE * np.eye(2)[None])


@dataclass(frozen=True)
class TranslationPrior:
    """Per class: one 1D mixture per translation axis."""

    mixtures: dict  # class -> (Gmm1D, Gmm1D, Gmm1D)

    def logpdf(self, cls: str, t) -> float:
        """Sum of per-axis log densities at translation t."""
        axes = self.mixtures[cls]
        return float(sum(axes[i].logpdf(float(t[i])) for i in range(3)))


@dataclass(frozen=True)
class RelativePrior:
    """Per ordered class pair: per-axis mixtures over relative translation
    plus a flag for whether the pair may interpenetrate (mask disabled)."""

    mixtures: dict  # (c, c') -> (Gmm1D, Gmm1D, Gmm1D)
    penetrable: frozenset  # ordered pairs allowed to interpenetrate

    def logpdf(self, pair, t_e) -> float:
        axes = self.mixtures[pair]
        return float(sum(axes[i].logpdf(float(t_e[i])) for i in range(3)))

    def allows_penetration(self, pair) -> bool:
        return pair in self.penetrable


@dataclass(frozen=True)
class CountPrior:
    """Continuous mixtures over (relaxed) per-class counts and count pairs,
    plus the empirical discrete tables they were fit to."""

    class_mixtures: dict  # class -> Gmm1D
    pair_mixtures: dict  # (c, c') -> Gmm2D
    class_tables: dict  # class -> np.ndarray of pmf over 0..N_c
    pair_tables: dict  # (c, c') -> np.ndarray (N_c+1, N_c'+1) pmf


@dataclass(frozen=True)
class PriorModel:
    """All fitted priors for one class table."""

    class_table: ClassTable
    translation: TranslationPrior
    relative: RelativePrior
    counts: CountPrior

    def to_json(self) -> str:
        def pairkey(p):
            return f"{p[0]}|{p[1]}"

        doc = {
            "format": 1,
            "classes": [
                {"name": c, "slots": n}
                for c, n in zip(self.class_table.classes, self.class_table.slots)
            ],
            "translation": {
                c: [g.to_dict() for g in axes]
                for c, axes in self.translation.mixtures.items()
            },
            "relative": {
                pairkey(p): [g.to_dict() for g in axes]
                for p, axes in self.relative.mixtures.items()
            },
            "penetrable": [list(p) for p in sorted(self.relative.penetrable)],
            "count_class": {c: g.to_dict() for c, g in self.counts.class_mixtures.items()},
            "count_pair": {pairkey(p): g.to_dict() for p, g in self.counts.pair_mixtures.items()},
            "count_class_tables": {c: t.tolist() for c, t in self.counts.class_tables.items()},
            "count_pair_tables": {pairkey(p): t.tolist() for p, t in self.counts.pair_tables.items()},
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "PriorModel":
        doc = json.loads(text)
        if doc.get("format") != 1:
            raise ValueError(f"unsupported prior format {doc.get('format')!r}")

        def unkey(k):
            a, b = k.split("|")
            return (a, b)

        table = ClassTable(
            tuple(e["name"] for e in doc["classes"]),
            tuple(e["slots"] for e in doc["classes"]),
        )
        translation = TranslationPrior(
            {c: tuple(Gmm1D.from_dict(g) for g in axes) for c, axes in doc["translation"].items()}
        )
        relative = RelativePrior(
            {unkey(k): tuple(Gmm1D.from_dict(g) for g in axes) for k, axes in doc["relative"].items()},
            frozenset(tuple(p) for p in doc["penetrable"]),
        )
        counts = CountPrior(
            {c: Gmm1D.from_dict(g) for c, g in doc["count_class"].items()},
            {unkey(k): Gmm2D.from_dict(g) for k, g in doc["count_pair"].items()},
            {c: np.array(t) for c, t in doc["count_class_tables"].items()},
            {unkey(k): np.array(t) for k, t in doc["count_pair_tables"].items()},
        )
        return cls(table, translation, relative, counts)


def penetration_mask(s_v, t_v, s_vp, t_vp, allowed: bool) -> float:
    """Penetration mask in (0, 1] for a pair of axis-aligned boxes.

    1 when the pair is allowed to interpenetrate or the boxes are
    disjoint on some axis; otherwise exp(-depth), where depth is the
    minimum over axes of the per-axis overlap
    max(0, (s_v[i] + s_vp[i]) / 2 - |t_vp[i] - t_v[i]|).
    """
    if allowed:
        return 1.0
    return float(np.exp(-_penetration_depth(s_v, t_v, s_vp, t_vp)))


def _penetration_depth(s_v, t_v, s_vp, t_vp):
    s_v = np.asarray(s_v, float)
    s_vp = np.asarray(s_vp, float)
    t_v = np.asarray(t_v, float)
    t_vp = np.asarray(t_vp, float)
    delta = np.maximum(0.0, 0.5 * (s_v + s_vp) - np.abs(t_vp - t_v))
    return float(delta.min())


def penetration_mask_grad(s_v, t_v, s_vp, t_vp, allowed: bool):
    """Gradient of log(mask) w.r.t. (s_v, t_v, s_vp, t_vp), four 3-vectors.

    Subgradient 0 at the kinks (depth 0 or axis ties).
    """
    zeros = (np.zeros(3),) * 4
    if allowed:
        return zeros
    s_v = np.asarray(s_v, float)
    s_vp = np.asarray(s_vp, float)
    t_v = np.asarray(t_v, float)
    t_vp = np.asarray(t_vp, float)
    diff = t_vp - t_v
    per_axis = 0.5 * (s_v + s_vp) - np.abs(diff)
    delta = np.maximum(0.0, per_axis)
    i = int(np.argmin(delta))
    if delta[i] <= 0.0:
        return zeros
    g_sv = np.zeros(3)
    g_tv = np.zeros(3)
    g_svp = np.zeros(3)
    g_tvp = np.zeros(3)
    sgn = np.sign(diff[i])
    # log mask = -delta[i]
    g_sv[i] = -0.5
    g_svp[i] = -0.5
    g_tvp[i] = sgn
    g_tv[i] = -sgn
    return g_sv, g_tv, g_svp, g_tvp


def _fit_axis_mixtures(samples, k, seed):
    """Three per-axis 1D mixtures for an (n, 3) sample matrix."""
    out = []
    for ax in range(3):
        col = samples[:, ax]
        k_eff = min(k, len(np.unique(col)))
        out.append(fit_gmm_em(col, max(1, k_eff), seed=seed + ax))
    return tuple(out)


def fit_priors(
    scenes,
    seed: int = 0,
    penetrable_pairs=(),
    translation_components: int = TRANSLATION_COMPONENTS,
    relative_components: int = RELATIVE_COMPONENTS,
) -> PriorModel:
    """Fit all priors from a corpus of hard scenes.

    Classes or pairs with no active observations get a wide uninformative
    prior. Deterministic given (scenes, seed).
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("empty scene corpus")
    if len(scenes) < 2:
        raise ValueError("need at least 2 scenes to fit priors")
    table = scenes[0].class_table
    for s in scenes:
        if s.class_table != table:
            raise ValueError("scenes use different class tables")
        if not s.is_hard:
            raise ValueError("fit_priors requires hard scenes")
    classes = table.classes
    n_scenes = len(scenes)

    # Gather active translations per class and active relative translations
    # per ordered class pair.
    trans_samples = {c: [] for c in classes}
    rel_samples = {(a, b): [] for a in classes for b in classes}
    counts = np.zeros((n_scenes, len(classes)))
    cls_idx = table.class_index_per_slot()
    for si, scene in enumerate(scenes):
        active = scene.active_mask()
        for c in classes:
            sl = table.slot_range(c)
            counts[si, classes.index(c)] = scene.indicators[sl].sum()
            for i in range(sl.start, sl.stop):
                if active[i]:
                    trans_samples[c].append(scene.attrs[i, T_SLICE])
        rel = phi_all(scene.attrs)[:, :, TE_SLICE]
        idx = np.nonzero(active)[0]
        for v in idx:
            for vp in idx:
                if v == vp:
                    continue
                rel_samples[(classes[cls_idx[v]], classes[cls_idx[vp]])].append(rel[v, vp])

    trans_mixtures = {}
    for c in classes:
        samples = np.array(trans_samples[c])
        if len(samples) < 2:
            trans_mixtures[c] = (_wide_gmm1d(),) * 3
        else:
            trans_mixtures[c] = _fit_axis_mixtures(samples, translation_components, seed)

    rel_mixtures = {}
    for pair, rows in rel_samples.items():
        samples = np.array(rows)
        if len(samples) < 2:
            rel_mixtures[pair] = (_wide_gmm1d(),) * 3
        else:
            rel_mixtures[pair] = _fit_axis_mixtures(samples, relative_components, seed)

    # Count tables and mixtures.
    class_tables = {}
    class_mixtures = {}
    for j, c in enumerate(classes):
        n_c = table.slots[j]
        tbl = np.bincount(counts[:, j].astype(int), minlength=n_c + 1).astype(float)
        class_tables[c] = tbl / n_scenes
        k_eff = min(COUNT_COMPONENTS, len(np.unique(counts[:, j])))
        class_mixtures[c] = fit_gmm_em(
            counts[:, j], max(1, k_eff), seed=seed,
            variance_floor=COUNT_VARIANCE_FLOOR,
        )

    pair_tables = {}
    pair_mixtures = {}
    for a in classes:
        for b in classes:
            ia, ib = classes.index(a), classes.index(b)
            na, nb = table.slots[ia], table.slots[ib]
            tbl = np.zeros((na + 1, nb + 1))
            for si in range(n_scenes):
                tbl[int(counts[si, ia]), int(counts[si, ib])] += 1.0
            pair_tables[(a, b)] = tbl / n_scenes
            pts = counts[:, [ia, ib]]
            k_eff = min(COUNT_PAIR_COMPONENTS, len(np.unique(pts, axis=0)))
            pair_mixtures[(a, b)] = fit_gmm_em(
                pts, max(1, k_eff), seed=seed,
                variance_floor=COUNT_VARIANCE_FLOOR,
            )

    return PriorModel(
        table,
        TranslationPrior(trans_mixtures),
        RelativePrior(rel_mixtures, frozenset(tuple(p) for p in penetrable_pairs)),
        CountPrior(class_mixtures, pair_mixtures, class_tables, pair_tables),
    )


def regularizer_l(prior: PriorModel, scenes) -> tuple[float, dict]:
    """Prior-fit regularizer: negative translation log-likelihoods (l1)
    plus squared residuals between count mixtures and the empirical count
    tables (l2). Returns (l1 + l2, breakdown)."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("empty corpus")
    table = prior.class_table
    classes = table.classes
    cls_idx = table.class_index_per_slot()
    l1 = 0.0
    for scene in scenes:
        active = scene.active_mask()
        idx = np.nonzero(active)[0]
        for v in idx:
            l1 -= prior.translation.logpdf(classes[cls_idx[v]], scene.attrs[v, T_SLICE])
        rel = phi_all(scene.attrs)[:, :, TE_SLICE]
        for v in idx:
            for vp in idx:
                if v != vp:
                    l1 -= prior.relative.logpdf(
                        (classes[cls_idx[v]], classes[cls_idx[vp]]), rel[v, vp]
                    )
    l2 = 0.0
    for j, c in enumerate(classes):
        tbl = prior.counts.class_tables[c]
        support = np.arange(len(tbl), dtype=float)
        l2 += float(np.sum((prior.counts.class_mixtures[c].pdf(support) - tbl) ** 2))
    for pair, tbl in prior.counts.pair_tables.items():
        na, nb = tbl.shape
        grid = np.stack(np.meshgrid(np.arange(na), np.arange(nb), indexing="ij"), axis=-1).astype(float)
        l2 += float(np.sum((prior.counts.pair_mixtures[pair].pdf(grid) - tbl) ** 2))
    return l1 + l2, {"l1": l1, "l2": l2}


def count_prior_logpdf(counts: CountPrior, soft: dict) -> tuple[float, dict]:
    """Log density of relaxed per-class counts under the count mixtures.

    Returns (value, gradient w.r.t. each class count). The gradient for an
    individual indicator z_v is the per-class gradient of its class (the
    count is a plain sum of indicators).
    """
    classes = list(soft.keys())
    value = 0.0
    grad = {c: 0.0 for c in classes}
    for c in classes:
        g = counts.class_mixtures[c]
        value += g.logpdf(float(soft[c]))
        grad[c] += float(g.logpdf_grad(float(soft[c])))
    for (a, b), g in counts.pair_mixtures.items():
        if a not in soft or b not in soft:
            continue
        x = np.array([soft[a], soft[b]])
        value += g.logpdf(x)
        gx = g.logpdf_grad(x)
        grad[a] += float(gx[0])
        grad[b] += float(gx[1])
    return float(value), grad
