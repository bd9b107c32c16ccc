"""Negative-log-posterior objective over a scene, with analytic gradients.

f(hyper, preds, y) =
      1/2 sum_v rho(q_v, alpha_c)                     unary likelihood
    + 1/2 sum_e w_e rho(q_e, alpha_ce)                pairwise likelihood
    - sum_v z_v * log M_c(t_v)                        translation prior
    - sum_e w_e * (log M_ce(t_e) + log mask_e)        relative prior
    - count prior log density over relaxed counts

where q is the (diagonal) quadratic form of the residual, rho the
Geman-McClure robust function on that quadratic form, and
w_e = z_v z_v' when edge gating is on (else 1). Edges run over all
ordered slot pairs. Angle-channel residuals are wrapped to (-pi, pi].

Gradients are available w.r.t. attributes, indicators, and all continuous
hyperparameters; rotation-extraction rows fall back to finite differences
near gimbal lock.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .priors import PriorModel
from .relative import (
    EDGE_DIM,
    RE_SLICE,
    SE_SLICE,
    TE_SLICE,
    RelativeTensor,
    _phi_jacobian_fd,
)
from .rotation import (
    euler_extraction_jacobian_batch,
    euler_to_rotation_batch,
    rotation_derivatives_batch,
    rotation_to_euler_batch,
    wrap_angle,
)
from .scene import ATTR_DIM, ClassTable, SceneLayout, S_SLICE, T_SLICE

logger = logging.getLogger(__name__)

__all__ = [
    "ABAR_DIM",
    "RobustParams",
    "PredictionBundle",
    "HyperParams",
    "default_robust_params",
    "geman_mcclure",
    "geman_mcclure_deriv",
    "mahalanobis",
    "objective_f",
    "objective_grad_attrs",
    "objective_grad_indicators",
    "ObjectiveCore",
]

ABAR_DIM = ATTR_DIM + 1  # attributes + indicator channel
_NODE_ANGLE = slice(3, 6)
_GIMBAL_MARGIN = 1e-6
_LOG_2PI = float(np.log(2.0 * np.pi))


def geman_mcclure(x, alpha):
    """Geman-McClure robust function x^2 / (x^2 + alpha), in [0, 1)."""
    x = np.asarray(x, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise ValueError("alpha must be positive")
    out = x * x / (x * x + alpha)
    return float(out) if out.ndim == 0 else out


def geman_mcclure_deriv(x, alpha):
    """d/dx of the Geman-McClure function: 2 x alpha / (x^2 + alpha)^2."""
    x = np.asarray(x, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise ValueError("alpha must be positive")
    out = 2.0 * x * alpha / (x * x + alpha) ** 2
    return float(out) if out.ndim == 0 else out


def mahalanobis(x, inv_var):
    """Diagonal quadratic form sum_i x_i^2 * inv_var_i."""
    x = np.asarray(x, dtype=float)
    inv_var = np.asarray(inv_var, dtype=float)
    if x.shape[-1] != inv_var.shape[-1]:
        raise ValueError(f"dimension mismatch: {x.shape} vs {inv_var.shape}")
    out = np.sum(x * x * inv_var, axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class RobustParams:
    """Robust-loss scales and diagonal variances per class / class pair."""

    unary_alpha: dict  # class -> float
    unary_var: dict  # class -> (13,) variances over (a, z) channels
    pair_alpha: dict  # (c, c') -> float
    pair_var: dict  # (c, c') -> (15,) variances

    def __post_init__(self):
        for a in self.unary_alpha.values():
            if a <= 0:
                raise ValueError("unary alpha must be positive")
        for a in self.pair_alpha.values():
            if a <= 0:
                raise ValueError("pair alpha must be positive")
        for v in list(self.unary_var.values()) + list(self.pair_var.values()):
            if np.any(np.asarray(v) <= 0):
                raise ValueError("variances must be positive")

    @classmethod
    def uniform(cls, table: ClassTable, unary_alpha, unary_var, pair_alpha, pair_var):
        """Same parameters for every class and every ordered class pair."""
        uv = np.asarray(unary_var, dtype=float)
        pv = np.asarray(pair_var, dtype=float)
        if uv.ndim == 0:
            uv = np.full(ABAR_DIM, float(uv))
        if pv.ndim == 0:
            pv = np.full(EDGE_DIM, float(pv))
        pairs = [(a, b) for a in table.classes for b in table.classes]
        return cls(
            {c: float(unary_alpha) for c in table.classes},
            {c: uv.copy() for c in table.classes},
            {p: float(pair_alpha) for p in pairs},
            {p: pv.copy() for p in pairs},
        )


@dataclass(frozen=True)
class PredictionBundle:
    """Noisy inputs to synchronization: node scene + edge tensor."""

    node_preds: SceneLayout
    edge_preds: RelativeTensor

    def __post_init__(self):
        if self.node_preds.class_table != self.edge_preds.class_table:
            raise ValueError("node and edge predictions use different class tables")

    @property
    def class_table(self) -> ClassTable:
        return self.node_preds.class_table


@dataclass(frozen=True)
class HyperParams:
    """All hyperparameters of the objective."""

    robust: RobustParams
    prior: PriorModel
    edge_gating: bool = True

    def to_json(self) -> str:
        def pairkey(p):
            return f"{p[0]}|{p[1]}"

        return json.dumps(
            {
                "format": 1,
                "edge_gating": self.edge_gating,
                "unary_alpha": self.robust.unary_alpha,
                "unary_var": {c: np.asarray(v).tolist() for c, v in self.robust.unary_var.items()},
                "pair_alpha": {pairkey(p): a for p, a in self.robust.pair_alpha.items()},
                "pair_var": {pairkey(p): np.asarray(v).tolist() for p, v in self.robust.pair_var.items()},
                "prior": json.loads(self.prior.to_json()),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "HyperParams":
        doc = json.loads(text)
        if doc.get("format") != 1:
            raise ValueError(f"unsupported hyperparameter format {doc.get('format')!r}")

        def unkey(k):
            a, b = k.split("|")
            return (a, b)

        robust = RobustParams(
            {c: float(a) for c, a in doc["unary_alpha"].items()},
            {c: np.array(v) for c, v in doc["unary_var"].items()},
            {unkey(k): float(a) for k, a in doc["pair_alpha"].items()},
            {unkey(k): np.array(v) for k, v in doc["pair_var"].items()},
        )
        prior = PriorModel.from_json(json.dumps(doc["prior"]))
        return cls(robust, prior, bool(doc["edge_gating"]))


def _bank_1d(mixtures, K):
    """Pad a list of Gmm1D into (G, K) arrays (const term, mean, inv var).

    The constant term folds mixture weight and normalizer; padded
    components carry -inf so they vanish under log-sum-exp.
    """
    G = len(mixtures)
    C = np.full((G, K), -np.inf)
    mu = np.zeros((G, K))
    iv = np.zeros((G, K))
    for g, mm in enumerate(mixtures):
        k = mm.n_components
        C[g, :k] = np.log(mm.weights) - 0.5 * (np.log(mm.variances) + _LOG_2PI)
        mu[g, :k] = mm.means
        iv[g, :k] = 1.0 / mm.variances
    return C, mu, iv


def _bank_logpdf(C, mu, iv, x):
    """Log mixture densities + component log terms for a padded bank."""
    e = C - 0.5 * (x[..., None] - mu) ** 2 * iv
    m = e.max(axis=-1)
    lp = m + np.log(np.sum(np.exp(e - m[..., None]), axis=-1))
    return lp, e


class ObjectiveCore:
    """Pre-indexed evaluator of f and its gradients for one (hyper, preds).

    Construction flattens every per-class / per-pair parameter into dense
    arrays so that each evaluation is pure vectorized work; the instance is
    reused across the many evaluations of one optimization run. All methods
    are pure functions of the (attrs, z) arrays passed in.
    """

    def __init__(self, hyper: HyperParams, preds: PredictionBundle):
        table = preds.class_table
        if hyper.prior.class_table != table:
            raise ValueError("prior fitted for a different class table")
        self.hyper = hyper
        self.preds = preds
        self.table = table
        self.classes = table.classes
        n = table.total_slots
        self.n = n
        self.cls_idx = table.class_index_per_slot()
        nc = len(self.classes)

        r = hyper.robust
        self.alpha_u = np.array([r.unary_alpha[c] for c in self.classes])
        self.invvar_u = np.array([1.0 / np.asarray(r.unary_var[c]) for c in self.classes])
        self.alpha_p = np.array(
            [[r.pair_alpha[(a, b)] for b in self.classes] for a in self.classes]
        )
        self.invvar_p = np.array(
            [[1.0 / np.asarray(r.pair_var[(a, b)]) for b in self.classes] for a in self.classes]
        )
        self.slot_alpha = self.alpha_u[self.cls_idx]
        self.slot_invvar = self.invvar_u[self.cls_idx]

        # Ordered edge index arrays.
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        off = ii != jj
        self.ei = ii[off]
        self.ej = jj[off]
        self.m = len(self.ei)
        self.eci = self.cls_idx[self.ei]
        self.ecj = self.cls_idx[self.ej]
        self.edge_alpha = self.alpha_p[self.eci, self.ecj]
        self.edge_invvar = self.invvar_p[self.eci, self.ecj]
        pen = hyper.prior.relative.penetrable
        self.edge_masked = np.array(
            [
                (self.classes[a], self.classes[b]) not in pen
                for a, b in zip(self.eci, self.ecj)
            ]
        )
        self.pred_nodes = np.concatenate(
            [preds.node_preds.attrs, preds.node_preds.indicators[:, None]], axis=1
        )
        self.pred_edges = preds.edge_preds.values[self.ei, self.ej]

        # Mixture banks: translation prior indexed per slot x axis, relative
        # prior per edge x axis.
        tmix = hyper.prior.translation.mixtures
        flat = [tmix[c][ax] for c in self.classes for ax in range(3)]
        K = max(mm.n_components for mm in flat)
        C, mu, iv = _bank_1d(flat, K)
        self.node_C = C.reshape(nc, 3, K)[self.cls_idx]
        self.node_mu = mu.reshape(nc, 3, K)[self.cls_idx]
        self.node_iv = iv.reshape(nc, 3, K)[self.cls_idx]

        rmix = hyper.prior.relative.mixtures
        flat = [
            rmix[(a, b)][ax]
            for a in self.classes
            for b in self.classes
            for ax in range(3)
        ]
        K = max(mm.n_components for mm in flat)
        C, mu, iv = _bank_1d(flat, K)
        code = self.eci * nc + self.ecj
        self.edge_C = C.reshape(nc * nc, 3, K)[code]
        self.edge_mu = mu.reshape(nc * nc, 3, K)[code]
        self.edge_iv = iv.reshape(nc * nc, 3, K)[code]

        # Count prior banks.
        cm = hyper.prior.counts.class_mixtures
        flat = [cm[c] for c in self.classes]
        K = max(mm.n_components for mm in flat)
        self.cnt_C, self.cnt_mu, self.cnt_iv = _bank_1d(flat, K)
        pm = list(hyper.prior.counts.pair_mixtures.items())
        self.pair_keys = [p for p, _ in pm]
        self.pa = np.array([self.classes.index(p[0]) for p, _ in pm], dtype=int)
        self.pb = np.array([self.classes.index(p[1]) for p, _ in pm], dtype=int)
        P = len(pm)
        K2 = max(g.n_components for _, g in pm) if P else 1
        self.p2_C = np.full((P, K2), -np.inf)
        self.p2_mu = np.zeros((P, K2, 2))
        self.p2_i00 = np.zeros((P, K2))
        self.p2_i10 = np.zeros((P, K2))
        self.p2_i11 = np.zeros((P, K2))
        for g, (_, gmm) in enumerate(pm):
            k = gmm.n_components
            L = np.linalg.cholesky(gmm.covs)
            self.p2_C[g, :k] = (
                np.log(gmm.weights) - np.log(L[:, 0, 0] * L[:, 1, 1]) - _LOG_2PI
            )
            self.p2_mu[g, :k] = gmm.means
            self.p2_i00[g, :k] = 1.0 / L[:, 0, 0]
            self.p2_i10[g, :k] = -L[:, 1, 0] / (L[:, 0, 0] * L[:, 1, 1])
            self.p2_i11[g, :k] = 1.0 / L[:, 1, 1]

        # Contiguous slot ranges per class, for indicator sums.
        self.slot_starts = np.concatenate([[0], np.cumsum(table.slots)[:-1]])

        # Grouping used by the hyperparameter gradient.
        self.slot_groups = [
            (c, np.arange(table.slot_range(c).start, table.slot_range(c).stop))
            for c in self.classes
        ]
        self.edge_groups = []
        for a in range(nc):
            for b in range(nc):
                sel = np.nonzero(code == a * nc + b)[0]
                if len(sel):
                    self.edge_groups.append(((self.classes[a], self.classes[b]), sel))

    # -- shared term evaluation -------------------------------------------

    def _count_terms(self, z):
        """Count-prior log density and its gradient w.r.t. class counts."""
        cnt = np.add.reduceat(z, self.slot_starts)
        lp1, e1 = _bank_logpdf(self.cnt_C, self.cnt_mu, self.cnt_iv, cnt)
        resp1 = np.exp(e1 - lp1[:, None])
        gcnt = np.sum(resp1 * (self.cnt_mu - cnt[:, None]) * self.cnt_iv, axis=-1)
        total = lp1.sum()
        if len(self.pa):
            d0 = cnt[self.pa][:, None] - self.p2_mu[..., 0]
            d1 = cnt[self.pb][:, None] - self.p2_mu[..., 1]
            y0 = d0 * self.p2_i00
            y1 = d0 * self.p2_i10 + d1 * self.p2_i11
            e2 = self.p2_C - 0.5 * (y0 * y0 + y1 * y1)
            mx = e2.max(axis=-1)
            lp2 = mx + np.log(np.sum(np.exp(e2 - mx[:, None]), axis=-1))
            resp2 = np.exp(e2 - lp2[:, None])
            g0 = -np.sum(resp2 * (y0 * self.p2_i00 + y1 * self.p2_i10), axis=-1)
            g1 = -np.sum(resp2 * (y1 * self.p2_i11), axis=-1)
            np.add.at(gcnt, self.pa, g0)
            np.add.at(gcnt, self.pb, g1)
            total += lp2.sum()
        return cnt, float(total), gcnt

    def _terms(self, attrs, z):
        """All intermediate quantities shared by value and gradients."""
        attrs = np.asarray(attrs, dtype=float)
        z = np.asarray(z, dtype=float)
        abar = np.concatenate([attrs, z[:, None]], axis=1)
        ru = self.pred_nodes - abar
        ru[:, _NODE_ANGLE] = wrap_angle(ru[:, _NODE_ANGLE])
        qu = np.einsum("ij,ij->i", ru * ru, self.slot_invvar)
        rho_u = qu * qu / (qu * qu + self.slot_alpha)

        # Relative attributes per ordered edge (size diffs, relative
        # rotation euler, relative translation in the frame of slot v).
        R = euler_to_rotation_batch(attrs[:, 3:6])
        Rv = R[self.ei]
        sz = attrs[:, S_SLICE]
        tr = attrs[:, T_SLICE]
        d = tr[self.ej] - tr[self.ei]
        Re_mat = np.matmul(np.swapaxes(Rv, 1, 2), R[self.ej])
        rel_e = np.empty((self.m, EDGE_DIM))
        rel_e[:, SE_SLICE] = (sz[self.ei, :, None] - sz[self.ej, None, :]).reshape(
            self.m, 9
        )
        rel_e[:, RE_SLICE] = rotation_to_euler_batch(Re_mat)
        rel_e[:, TE_SLICE] = np.matmul(np.swapaxes(Rv, 1, 2), d[:, :, None])[:, :, 0]
        re = self.pred_edges - rel_e
        re[:, RE_SLICE] = wrap_angle(re[:, RE_SLICE])
        qe = np.einsum("ij,ij->i", re * re, self.edge_invvar)
        rho_e = qe * qe / (qe * qe + self.edge_alpha)

        w = z[self.ei] * z[self.ej] if self.hyper.edge_gating else np.ones(self.m)

        # Translation prior per slot (summed over axes).
        lp_n, e_n = _bank_logpdf(self.node_C, self.node_mu, self.node_iv, attrs[:, T_SLICE])
        logp_t = lp_n.sum(axis=1)

        # Relative-translation prior per edge (summed over axes).
        te = rel_e[:, TE_SLICE]
        lp_e, e_e = _bank_logpdf(self.edge_C, self.edge_mu, self.edge_iv, te)
        logp_e = lp_e.sum(axis=1)

        # Penetration mask per edge.
        diff = d
        per_axis = 0.5 * (sz[self.ei] + sz[self.ej]) - np.abs(diff)
        delta = np.maximum(0.0, per_axis)
        depth = delta.min(axis=1)
        logmask = np.where(self.edge_masked, -depth, 0.0)

        cnt, count_lp, count_gcnt = self._count_terms(z)

        value = (
            0.5 * rho_u.sum()
            + 0.5 * (w * rho_e).sum()
            - (z * logp_t).sum()
            - (w * (logp_e + logmask)).sum()
            - count_lp
        )
        return {
            "attrs": attrs,
            "z": z,
            "ru": ru,
            "qu": qu,
            "rho_u": rho_u,
            "rel_e": rel_e,
            "R": R,
            "Re_mat": Re_mat,
            "re": re,
            "qe": qe,
            "rho_e": rho_e,
            "w": w,
            "lp_n": lp_n,
            "e_n": e_n,
            "logp_t": logp_t,
            "lp_e": lp_e,
            "e_e": e_e,
            "logp_e": logp_e,
            "te": te,
            "diff": diff,
            "delta": delta,
            "depth": depth,
            "logmask": logmask,
            "cnt": cnt,
            "count_gcnt": count_gcnt,
            "value": float(value),
        }

    def value(self, attrs, z) -> float:
        return self._terms(attrs, z)["value"]

    # -- gradient w.r.t. attributes ---------------------------------------

    def value_grad_attrs(self, attrs, z):
        T = self._terms(attrs, z)
        g = np.zeros((self.n, ATTR_DIM))

        # Unary: d/dy rho(q)/2 with residual r = pred - y.
        dr_u = 2.0 * T["qu"] * self.slot_alpha / (T["qu"] ** 2 + self.slot_alpha) ** 2
        g -= (dr_u[:, None] * self.slot_invvar * T["ru"])[:, :ATTR_DIM]

        # Per-edge upstream vector u (15,) collecting the pairwise robust
        # term and the relative-translation prior term.
        dr_e = 2.0 * T["qe"] * self.edge_alpha / (T["qe"] ** 2 + self.edge_alpha) ** 2
        u = -(T["w"] * dr_e)[:, None] * (self.edge_invvar * T["re"])
        resp_e = np.exp(T["e_e"] - T["lp_e"][..., None])  # (m, 3, K)
        dlp_te = np.sum(
            resp_e * (self.edge_mu - T["te"][..., None]) * self.edge_iv, axis=-1
        )
        u[:, 12:15] -= T["w"][:, None] * dlp_te
        self._backprop_phi(T, u, g)

        # Translation prior on nodes: -z_v * sum_ax log M(t_ax).
        resp_n = np.exp(T["e_n"] - T["lp_n"][..., None])
        dlp_t = np.sum(
            resp_n * (self.node_mu - T["attrs"][:, T_SLICE][..., None]) * self.node_iv,
            axis=-1,
        )
        g[:, T_SLICE] -= z[:, None] * dlp_t

        # Penetration mask: f includes + w * depth for masked edges.
        self._mask_grad_attrs(T, g)
        return T["value"], g

    def _mask_grad_attrs(self, T, g):
        active = self.edge_masked & (T["depth"] > 0.0)
        if not active.any():
            return
        idx = np.nonzero(active)[0]
        axis = np.argmin(T["delta"][idx], axis=1)
        sgn = np.sign(T["diff"][idx, axis])
        w = T["w"][idx]
        # d(w * depth)/d attrs; depth = 0.5(s_v + s_vp) - |t_vp - t_v| on
        # the argmin axis.
        np.add.at(g, (self.ei[idx], axis), 0.5 * w)
        np.add.at(g, (self.ej[idx], axis), 0.5 * w)
        np.add.at(g, (self.ei[idx], 6 + axis), sgn * w)
        np.add.at(g, (self.ej[idx], 6 + axis), -sgn * w)

    def _backprop_phi(self, T, u, g):
        """Accumulate J_phi^T u over all edges into the (n, 12) gradient."""
        ei, ej = self.ei, self.ej
        attrs = T["attrs"]
        # Scale rows.
        U9 = u[:, :9].reshape(-1, 3, 3)
        np.add.at(g[:, S_SLICE], ei, U9.sum(axis=2))
        np.add.at(g[:, S_SLICE], ej, -U9.sum(axis=1))

        R = T["R"]
        dR = rotation_derivatives_batch(attrs[:, 3:6])  # (n,3,3,3)
        t = attrs[:, T_SLICE]
        d = t[ej] - t[ei]  # (m, 3)

        # Translation rows: t_e = R_v^T d.
        ut = u[:, 12:15]
        Rut = np.matmul(R[ei], ut[:, :, None])[:, :, 0]
        np.add.at(g[:, T_SLICE], ei, -Rut)
        np.add.at(g[:, T_SLICE], ej, Rut)
        # d t_e / d r_v[k] = dR_v[k]^T d, contracted against ut: pair dR's
        # (row, col) axes with the outer product d ut^T.
        M = d[:, :, None] * ut[:, None, :]
        np.add.at(
            g[:, 3:6],
            ei,
            np.matmul(dR[ei].reshape(-1, 3, 9), M.reshape(-1, 9, 1))[:, :, 0],
        )

        # Rotation rows.
        ur = u[:, RE_SLICE]
        nonzero = np.abs(ur).sum(axis=1) > 0
        if not nonzero.any():
            return
        Re = T["Re_mat"]
        singular = 1.0 - np.abs(Re[:, 2, 0]) < _GIMBAL_MARGIN
        regular = nonzero & ~singular
        idx = np.nonzero(regular)[0]
        if len(idx):
            E = euler_extraction_jacobian_batch(Re[idx])  # (k,3,3,3)
            uE = np.einsum("ea,eaij->eij", ur[idx], E)  # (k,3,3)
            # d Re / d r_v[k] = dR_v[k]^T R_vp ; d Re / d r_vp[k] = R_v^T dR_vp[k].
            # Both contractions reduce to pairing dR's trailing axes with a
            # 3x3 coefficient matrix.
            W = np.matmul(R[ej[idx]], np.swapaxes(uE, 1, 2))
            gv = np.matmul(dR[ei[idx]].reshape(-1, 3, 9), W.reshape(-1, 9, 1))[:, :, 0]
            V = np.matmul(R[ei[idx]], uE)
            gvp = np.matmul(dR[ej[idx]].reshape(-1, 3, 9), V.reshape(-1, 9, 1))[:, :, 0]
            np.add.at(g[:, 3:6], ei[idx], gv)
            np.add.at(g[:, 3:6], ej[idx], gvp)
        bad = np.nonzero(nonzero & singular)[0]
        if len(bad):
            logger.warning(
                "phi jacobian: %d edge(s) near gimbal lock, finite-difference fallback",
                len(bad),
            )
            for e in bad:
                J = _phi_jacobian_fd(attrs[self.ei[e]], attrs[self.ej[e]])
                g[self.ei[e]] += J[RE_SLICE, :ATTR_DIM].T @ ur[e]
                g[self.ej[e]] += J[RE_SLICE, ATTR_DIM:].T @ ur[e]

    # -- gradient w.r.t. indicators ---------------------------------------

    def value_grad_z(self, attrs, z):
        T = self._terms(attrs, z)
        g = np.zeros(self.n)
        dr_u = 2.0 * T["qu"] * self.slot_alpha / (T["qu"] ** 2 + self.slot_alpha) ** 2
        g -= dr_u * self.slot_invvar[:, ATTR_DIM] * T["ru"][:, ATTR_DIM]
        g -= T["logp_t"]
        if self.hyper.edge_gating:
            core = 0.5 * T["rho_e"] - T["logp_e"] - T["logmask"]
            np.add.at(g, self.ei, z[self.ej] * core)
            np.add.at(g, self.ej, z[self.ei] * core)
        g -= T["count_gcnt"][self.cls_idx]
        return T["value"], g

    # -- gradient w.r.t. hyperparameters ----------------------------------

    def value_grad_phi(self, attrs, z):
        """f and its gradient w.r.t. all continuous hyperparameters.

        Layout of the returned dict matches hyperlearn.PhiPacker:
        log-alphas and log-variances for the robust terms; (weight logits,
        means, log-variances) for 1D mixtures; (logits, means, Cholesky
        params) for 2D count mixtures. Alpha gradients are w.r.t. alpha
        itself (not log alpha).
        """
        T = self._terms(attrs, z)
        nc = len(self.classes)
        d_alpha_u = np.zeros(nc)
        d_logvar_u = np.zeros((nc, ABAR_DIM))
        qu, a_u = T["qu"], self.slot_alpha
        # d rho / d alpha = -q^2 / (q^2 + alpha)^2
        da = -0.5 * qu * qu / (qu * qu + a_u) ** 2
        dr_u = 2.0 * qu * a_u / (qu * qu + a_u) ** 2
        # d q / d logvar_j = -invvar_j r_j^2
        dlv = -0.5 * dr_u[:, None] * self.slot_invvar * T["ru"] ** 2
        for j, (c, idx) in enumerate(self.slot_groups):
            d_alpha_u[j] = da[idx].sum()
            d_logvar_u[j] = dlv[idx].sum(axis=0)

        d_alpha_p = np.zeros((nc, nc))
        d_logvar_p = np.zeros((nc, nc, EDGE_DIM))
        qe, a_e, w = T["qe"], self.edge_alpha, T["w"]
        dae = -0.5 * w * qe * qe / (qe * qe + a_e) ** 2
        dr_e = 2.0 * qe * a_e / (qe * qe + a_e) ** 2
        dlve = -0.5 * (w * dr_e)[:, None] * self.edge_invvar * T["re"] ** 2
        for pair, idx in self.edge_groups:
            a = self.classes.index(pair[0])
            b = self.classes.index(pair[1])
            d_alpha_p[a, b] = dae[idx].sum()
            d_logvar_p[a, b] = dlve[idx].sum(axis=0)

        # Translation prior mixtures: term is -z_v log M(t_ax).
        d_trans = {}
        for c, idx in self.slot_groups:
            axes = self.hyper.prior.translation.mixtures[c]
            per_axis = []
            for ax in range(3):
                gl, gm, gv = axes[ax].logpdf_param_grad(T["attrs"][idx, 6 + ax])
                zc = z[idx][:, None]
                per_axis.append(
                    (-(zc * gl).sum(0), -(zc * gm).sum(0), -(zc * gv).sum(0))
                )
            d_trans[c] = per_axis

        # Relative prior mixtures: term is -w_e log M(t_e_ax).
        d_rel = {}
        for pair, idx in self.edge_groups:
            axes = self.hyper.prior.relative.mixtures[pair]
            per_axis = []
            for ax in range(3):
                gl, gm, gv = axes[ax].logpdf_param_grad(T["te"][idx, ax])
                wc = T["w"][idx][:, None]
                per_axis.append(
                    (-(wc * gl).sum(0), -(wc * gm).sum(0), -(wc * gv).sum(0))
                )
            d_rel[pair] = per_axis

        # Count prior mixtures: term is -log M(count).
        counts = {c: T["cnt"][j] for j, c in enumerate(self.classes)}
        d_count_class = {}
        for c in self.classes:
            gmm = self.hyper.prior.counts.class_mixtures[c]
            gl, gm, gv = gmm.logpdf_param_grad(counts[c])
            d_count_class[c] = (-gl, -gm, -gv)
        d_count_pair = {}
        for pair, gmm in self.hyper.prior.counts.pair_mixtures.items():
            x = np.array([counts[pair[0]], counts[pair[1]]])
            gl, gm, gc = gmm.logpdf_param_grad(x)
            d_count_pair[pair] = (-gl, -gm, -gc)

        return T["value"], {
            "unary_alpha": d_alpha_u,
            "unary_logvar": d_logvar_u,
            "pair_alpha": d_alpha_p,
            "pair_logvar": d_logvar_p,
            "trans": d_trans,
            "rel": d_rel,
            "count_class": d_count_class,
            "count_pair": d_count_pair,
        }


def default_robust_params(table: ClassTable) -> RobustParams:
    """Robust-loss parameters tuned on synthetic bedroom corpora.

    Rotation, size, and shape channels are tight (those predictions are
    accurate); absolute translation is loose so the relative-translation
    channel and the layout priors drive placement. Alphas sit at roughly
    3x the expected residual quadratic form so inliers stay on the
    near-quadratic part of the robust function.
    """
    unary_var = np.array([0.0025] * 3 + [0.001] * 3 + [0.12] * 3 + [0.01] * 3 + [0.01])
    pair_var = np.array([0.0025] * 12 + [0.01] * 3)
    return RobustParams.uniform(table, 1026.75, unary_var, 1730.0, pair_var)


def objective_f(hyper: HyperParams, preds: PredictionBundle, y: SceneLayout) -> float:
    """Value of the negative-log-posterior objective at scene y."""
    return ObjectiveCore(hyper, preds).value(y.attrs, y.indicators)


def objective_grad_attrs(hyper, preds, y: SceneLayout) -> np.ndarray:
    """Gradient of f w.r.t. all slot attributes, shape (n_slots, 12)."""
    _, g = ObjectiveCore(hyper, preds).value_grad_attrs(y.attrs, y.indicators)
    return g


def objective_grad_indicators(hyper, preds, y: SceneLayout) -> np.ndarray:
    """Gradient of f w.r.t. all indicators, shape (n_slots,)."""
    _, g = ObjectiveCore(hyper, preds).value_grad_z(y.attrs, y.indicators)
    return g
