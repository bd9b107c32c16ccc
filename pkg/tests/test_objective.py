import numpy as np
import pytest

from scenesync.objective import (
    ABAR_DIM,
    HyperParams,
    ObjectiveCore,
    PredictionBundle,
    RobustParams,
    default_robust_params,
    geman_mcclure,
    geman_mcclure_deriv,
    mahalanobis,
    objective_f,
    objective_grad_attrs,
    objective_grad_indicators,
)
from scenesync.relative import RE_SLICE, TE_SLICE, phi_vector
from scenesync.rotation import wrap_angle
from scenesync.scene import ClassTable, SceneLayout

from conftest import fd_gradient, rel_err


# ---------------------------------------------------------------------------
# Independent scalar reference implementation of the objective. Plain loops
# over slots and ordered pairs, built only from phi_vector, the mixture
# logpdf methods, and the documented formulas; no shared code with
# ObjectiveCore's vectorized evaluation.
# ---------------------------------------------------------------------------


def reference_objective(hyper, preds, attrs, z):
    table = preds.class_table
    classes = table.classes
    cls_of = [classes[k] for k in table.class_index_per_slot()]
    n = table.total_slots
    r = hyper.robust
    pen = hyper.prior.relative.penetrable

    total = 0.0
    # unary robust terms over the 13-dim (attributes, indicator) residual
    for v in range(n):
        pred = np.concatenate(
            [preds.node_preds.attrs[v], [preds.node_preds.indicators[v]]]
        )
        cur = np.concatenate([attrs[v], [z[v]]])
        res = pred - cur
        res[3:6] = wrap_angle(res[3:6])
        q = float(np.sum(res**2 / np.asarray(r.unary_var[cls_of[v]])))
        total += 0.5 * geman_mcclure(q, r.unary_alpha[cls_of[v]])

    # pairwise robust terms + relative prior + penetration mask
    for v in range(n):
        for vp in range(n):
            if v == vp:
                continue
            pair = (cls_of[v], cls_of[vp])
            w = z[v] * z[vp] if hyper.edge_gating else 1.0
            edge = phi_vector(attrs[v], attrs[vp])
            res = preds.edge_preds.values[v, vp] - edge
            res[RE_SLICE] = wrap_angle(res[RE_SLICE])
            q = float(np.sum(res**2 / np.asarray(r.pair_var[pair])))
            total += 0.5 * w * geman_mcclure(q, r.pair_alpha[pair])
            logp_e = hyper.prior.relative.logpdf(pair, edge[TE_SLICE])
            if pair in pen:
                logmask = 0.0
            else:
                overlap = 0.5 * (attrs[v, 0:3] + attrs[vp, 0:3]) - np.abs(
                    attrs[vp, 6:9] - attrs[v, 6:9]
                )
                logmask = -float(np.maximum(0.0, overlap).min())
            total -= w * (logp_e + logmask)

    # translation prior, gated by the indicator
    for v in range(n):
        total -= z[v] * hyper.prior.translation.logpdf(cls_of[v], attrs[v, 6:9])

    # count prior over relaxed per-class indicator sums
    cnt = {c: float(z[table.slot_range(c)].sum()) for c in classes}
    for c in classes:
        total -= float(hyper.prior.counts.class_mixtures[c].logpdf(cnt[c]))
    for (a, b), g in hyper.prior.counts.pair_mixtures.items():
        total -= float(g.logpdf(np.array([cnt[a], cnt[b]])))
    return total


def _moderate_state(bundle, rng):
    """A soft state near the predictions with indicators off the bounds."""
    attrs = bundle.node_preds.attrs + rng.normal(0, 0.02, bundle.node_preds.attrs.shape)
    z = np.clip(bundle.node_preds.indicators * 0.8 + 0.1 + rng.normal(0, 0.02, len(bundle.node_preds.indicators)), 0.05, 0.95)
    return attrs, z


def test_robust_loss_laws():
    assert geman_mcclure(0.0, 1.0) == 0.0
    assert geman_mcclure(1.0, 1.0) == 0.5
    rng = np.random.default_rng(0)
    x = rng.normal(0, 10, 1000)
    a = rng.uniform(0.1, 5, 1000)
    v = geman_mcclure(x, a)
    assert np.all(v >= 0.0) and np.all(v < 1.0)
    # saturation for large residuals
    assert geman_mcclure(1e8, 1.0) == pytest.approx(1.0, abs=1e-10)
    with pytest.raises(ValueError):
        geman_mcclure(1.0, 0.0)
    with pytest.raises(ValueError):
        geman_mcclure_deriv(1.0, -2.0)


def test_robust_loss_deriv_fd():
    rng = np.random.default_rng(1)
    for _ in range(100):
        x = rng.normal(0, 3)
        a = rng.uniform(0.1, 5)
        fd = (geman_mcclure(x + 1e-6, a) - geman_mcclure(x - 1e-6, a)) / 2e-6
        assert abs(geman_mcclure_deriv(x, a) - fd) < 1e-8 * max(1.0, abs(fd))


def test_mahalanobis():
    assert mahalanobis(np.array([1.0, 2.0]), np.array([1.0, 0.5])) == pytest.approx(3.0)
    assert mahalanobis(np.zeros(5), np.ones(5)) == 0.0
    with pytest.raises(ValueError):
        mahalanobis(np.zeros(3), np.ones(4))


def test_robust_params_validation(table):
    with pytest.raises(ValueError):
        RobustParams.uniform(table, -1.0, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        RobustParams.uniform(table, 1.0, 0.0, 1.0, 1.0)
    p = RobustParams.uniform(table, 2.0, 0.5, 3.0, 0.25)
    c = table.classes[0]
    assert p.unary_alpha[c] == 2.0
    assert p.unary_var[c].shape == (ABAR_DIM,)
    assert p.pair_var[(c, c)].shape == (15,)


def test_core_rejects_mismatched_tables(hyper, bundles):
    other = ClassTable(("x",), (1,))
    s = SceneLayout.empty(other)
    from scenesync.relative import build_relative_tensor

    with pytest.raises(ValueError):
        PredictionBundle(s, bundles[0].edge_preds)
    bad = PredictionBundle(s, build_relative_tensor(s))
    with pytest.raises(ValueError):
        ObjectiveCore(hyper, bad)


def test_value_matches_reference(hyper, bundles, test_scenes):
    rng = np.random.default_rng(2)
    core = ObjectiveCore(hyper, bundles[0])
    b = bundles[0]
    states = [
        (b.node_preds.attrs, b.node_preds.indicators),
        (test_scenes[0].attrs, test_scenes[0].indicators),
        _moderate_state(b, rng),
    ]
    for attrs, z in states:
        got = core.value(attrs, z)
        want = reference_objective(hyper, b, attrs, z)
        assert rel_err(got, want, floor=1e-6) < 1e-8


def test_value_matches_reference_no_gating(hyper, bundles):
    rng = np.random.default_rng(3)
    ungated = HyperParams(hyper.robust, hyper.prior, edge_gating=False)
    b = bundles[1]
    core = ObjectiveCore(ungated, b)
    attrs, z = _moderate_state(b, rng)
    got = core.value(attrs, z)
    want = reference_objective(ungated, b, attrs, z)
    assert rel_err(got, want, floor=1e-6) < 1e-8


def test_wrapper_functions_agree(hyper, bundles):
    b = bundles[2]
    y = b.node_preds
    core = ObjectiveCore(hyper, b)
    assert objective_f(hyper, b, y) == core.value(y.attrs, y.indicators)
    f, ga = core.value_grad_attrs(y.attrs, y.indicators)
    assert np.array_equal(objective_grad_attrs(hyper, b, y), ga)
    _, gz = core.value_grad_z(y.attrs, y.indicators)
    assert np.array_equal(objective_grad_indicators(hyper, b, y), gz)


def test_grad_attrs_fd(smooth_hyper, bundles):
    rng = np.random.default_rng(4)
    for b in bundles[:3]:
        core = ObjectiveCore(smooth_hyper, b)
        attrs, z = _moderate_state(b, rng)
        f, g = core.value_grad_attrs(attrs, z)
        assert f == pytest.approx(core.value(attrs, z))
        fd = fd_gradient(lambda a: core.value(a, z), attrs)
        assert rel_err(g, fd, floor=1e-3 * max(1.0, abs(f))) < 1e-5


def test_grad_indicators_fd(smooth_hyper, bundles):
    rng = np.random.default_rng(5)
    for b in bundles[:3]:
        core = ObjectiveCore(smooth_hyper, b)
        attrs, z = _moderate_state(b, rng)
        _, g = core.value_grad_z(attrs, z)
        fd = fd_gradient(lambda x: core.value(attrs, x), z)
        f = core.value(attrs, z)
        assert rel_err(g, fd, floor=1e-3 * max(1.0, abs(f))) < 1e-5


def test_gradient_zero_structure(hyper, bundles):
    # With gating on, an edge between two switched-off slots contributes
    # nothing: zeroing a slot's indicator removes its pairwise pull.
    b = bundles[0]
    core = ObjectiveCore(hyper, b)
    z = np.zeros(len(b.node_preds.indicators))
    f, g = core.value_grad_attrs(b.node_preds.attrs, z)
    # all pairwise and translation-prior terms are gated away; remaining
    # attribute gradient comes only from the unary robust terms, which are
    # zero at the predictions themselves
    assert np.allclose(g, 0.0, atol=1e-12)


def test_hyper_params_json_round_trip(hyper):
    h2 = HyperParams.from_json(hyper.to_json())
    assert h2.edge_gating == hyper.edge_gating
    assert h2.robust.unary_alpha == hyper.robust.unary_alpha
    for c, v in hyper.robust.unary_var.items():
        assert np.array_equal(h2.robust.unary_var[c], v)
    assert h2.robust.pair_alpha == hyper.robust.pair_alpha
    assert h2.to_json() == hyper.to_json()
    with pytest.raises(ValueError):
        HyperParams.from_json('{"format": 7}')


def test_default_robust_params_structure(table):
    p = default_robust_params(table)
    for c in table.classes:
        assert p.unary_alpha[c] > 0
        assert p.unary_var[c].shape == (ABAR_DIM,)
        # translation channels deliberately looser than size channels
        assert p.unary_var[c][6] > p.unary_var[c][0]
