"""Corpus- and scene-level evaluation metrics.

All metrics operate on lists of hard scenes (or one scene for the
per-scene helpers) and only consider active slots.
"""

from __future__ import annotations

import numpy as np

from .relative import phi_vector, TE_SLICE
from .rotation import euler_to_rotation
from .scene import R_SLICE, S_SLICE, T_SLICE, D_SLICE

__all__ = [
    "relative_histogram_kl",
    "indicator_pr",
    "penetration_rate",
    "attribute_l2",
]


def _pair_translations(scenes, cls_a, cls_b):
    """Relative translations t_e for every active ordered (cls_a, cls_b) pair."""
    rows = []
    for scene in scenes:
        ra = scene.class_table.slot_range(cls_a)
        rb = scene.class_table.slot_range(cls_b)
        act = scene.active_mask()
        for v in range(ra.start, ra.stop):
            if not act[v]:
                continue
            for w in range(rb.start, rb.stop):
                if v == w or not act[w]:
                    continue
                rows.append(phi_vector(scene.attrs[v], scene.attrs[w])[TE_SLICE])
    return np.array(rows).reshape(-1, 3)


def relative_histogram_kl(scenes, reference, cls_a, cls_b, bins=64, eps=1e-6):
    """KL(scenes || reference) of the relative-translation histograms.

    Computed per axis over the relative translations of active ordered
    (cls_a, cls_b) pairs, with a shared binning spanning both corpora and
    additive smoothing eps on every bin. Returns a length-3 array.
    """
    p_samples = _pair_translations(scenes, cls_a, cls_b)
    q_samples = _pair_translations(reference, cls_a, cls_b)
    if len(p_samples) == 0 or len(q_samples) == 0:
        raise ValueError(
            f"no active ({cls_a}, {cls_b}) pairs in "
            + ("first corpus" if len(p_samples) == 0 else "reference corpus")
        )
    out = np.zeros(3)
    for ax in range(3):
        lo = min(p_samples[:, ax].min(), q_samples[:, ax].min())
        hi = max(p_samples[:, ax].max(), q_samples[:, ax].max())
        if hi <= lo:
            hi = lo + 1e-9
        edges = np.linspace(lo, hi, bins + 1)
        p, _ = np.histogram(p_samples[:, ax], bins=edges)
        q, _ = np.histogram(q_samples[:, ax], bins=edges)
        p = p + eps
        q = q + eps
        p = p / p.sum()
        q = q / q.sum()
        out[ax] = float(np.sum(p * np.log(p / q)))
    return out


def indicator_pr(predicted, truth):
    """Slot-wise existence precision and recall over scene pairs.

    Returns {"precision", "recall", "f1"}; any rate with an empty
    denominator is reported as None (and f1 degrades accordingly).
    """
    tp = fp = fn = 0
    for pred, gt in zip(predicted, truth):
        if pred.class_table != gt.class_table:
            raise ValueError("scene pair uses different class tables")
        p = pred.active_mask()
        g = gt.active_mask()
        tp += int(np.sum(p & g))
        fp += int(np.sum(p & ~g))
        fn += int(np.sum(~p & g))
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    if precision and recall:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0 if (precision is not None or recall is not None) else None
    return {"precision": precision, "recall": recall, "f1": f1}


def _scene_penetrates(scene):
    act = np.nonzero(scene.active_mask())[0]
    s = scene.attrs[:, S_SLICE]
    t = scene.attrs[:, T_SLICE]
    for a in range(len(act)):
        for b in range(a + 1, len(act)):
            v, w = act[a], act[b]
            half = 0.5 * (s[v] + s[w])
            gap = np.abs(t[w] - t[v])
            if np.all(gap < half):
                return True
    return False


def penetration_rate(scenes) -> float:
    """Fraction of scenes with at least one overlapping active box pair.

    Boxes are treated as axis-aligned with the stored sizes as extents.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("empty corpus")
    return sum(_scene_penetrates(s) for s in scenes) / len(scenes)


def attribute_l2(predicted, truth):
    """Mean attribute errors over slots active in both scenes.

    Returns {"size", "translation", "shape_code"} as mean L2 distances and
    {"rotation"} as the mean geodesic angle between rotations, plus
    {"slots"}: how many slot pairs contributed. With no common active
    slots all errors are None.
    """
    errs = {"size": [], "rotation": [], "translation": [], "shape_code": []}
    count = 0
    for pred, gt in zip(predicted, truth):
        if pred.class_table != gt.class_table:
            raise ValueError("scene pair uses different class tables")
        common = pred.active_mask() & gt.active_mask()
        for i in np.nonzero(common)[0]:
            count += 1
            for key, sl in (("size", S_SLICE), ("translation", T_SLICE), ("shape_code", D_SLICE)):
                errs[key].append(np.linalg.norm(pred.attrs[i, sl] - gt.attrs[i, sl]))
            Rp = euler_to_rotation(pred.attrs[i, R_SLICE])
            Rg = euler_to_rotation(gt.attrs[i, R_SLICE])
            cosang = (np.trace(Rp.T @ Rg) - 1.0) / 2.0
            errs["rotation"].append(float(np.arccos(np.clip(cosang, -1.0, 1.0))))
    out = {k: (float(np.mean(v)) if v else None) for k, v in errs.items()}
    out["slots"] = count
    return out
