"""Learning the objective's hyperparameters from validation instances.

The loss forces each ground-truth scene to be a local minimum of f with a
margin, and penalizes sharp variation of f around it:

    L(Phi) = l(Phi) + sum_i mean_j [ max(f(gt_i) - f(y_ij) + delta, 0)
                      + lambda_s * mean_k (f(y_ij) - f(y'_ijk))^2 ]

with y_ij ~ N(gt_i, r_m^2 I) and y'_ijk ~ N(y_ij, r_s^2 I) over attribute
channels (optionally indicators too), l(Phi) the prior-regularizer, and
all perturbation samples frozen up front (common random numbers) so the
loss is a deterministic, differentiable function of Phi.

Positivity and simplex constraints are enforced by parameterization:
log alphas and log variances, softmax weight logits, and per-component
Cholesky factors with log diagonals for 2D count mixtures.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .gmm import Gmm1D, Gmm2D
from .objective import ABAR_DIM, HyperParams, ObjectiveCore, RobustParams
from .priors import CountPrior, PriorModel, RelativePrior, TranslationPrior
from .relative import EDGE_DIM
from .rotation import wrap_angle
from .scene import ATTR_DIM, SceneLayout

__all__ = [
    "HyperLearnConfig",
    "PhiPacker",
    "hyper_loss",
    "learn_hyper",
    "cross_validate_meta",
]


@dataclass(frozen=True)
class HyperLearnConfig:
    r_m: float = 0.1  # margin-sample radius around ground truth
    r_s: float = 0.05  # smoothness-sample radius
    delta: float = 0.5  # hinge margin
    lambda_s: float = 0.1  # smoothness weight
    samples_per_instance: int = 8
    inner_samples: int = 4
    learn_rate: float = 0.05  # step length; gradients are norm-clipped
    epochs: int = 30
    seed: int = 0
    perturb_indicators: bool = False

    def __post_init__(self):
        if self.r_m <= 0 or self.r_s <= 0:
            raise ValueError("perturbation radii must be positive")
        if self.epochs < 1 or self.samples_per_instance < 1 or self.inner_samples < 1:
            raise ValueError("counts must be >= 1")

    def to_dict(self) -> dict:
        return {
            "r_m": self.r_m,
            "r_s": self.r_s,
            "delta": self.delta,
            "lambda_s": self.lambda_s,
            "samples_per_instance": self.samples_per_instance,
            "inner_samples": self.inner_samples,
            "learn_rate": self.learn_rate,
            "epochs": self.epochs,
            "seed": self.seed,
            "perturb_indicators": self.perturb_indicators,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HyperLearnConfig":
        return cls(**d)


class PhiPacker:
    """Bijection between HyperParams and a flat unconstrained vector."""

    def __init__(self, template: HyperParams):
        self.template = template
        self.classes = template.prior.class_table.classes
        self.pairs = [(a, b) for a in self.classes for b in self.classes]
        self._layout = []
        off = 0

        def block(key, size):
            nonlocal off
            self._layout.append((key, slice(off, off + size)))
            off += size

        for c in self.classes:
            block(("ua", c), 1)
            block(("uv", c), ABAR_DIM)
        for p in self.pairs:
            block(("pa", p), 1)
            block(("pv", p), EDGE_DIM)
        for c in self.classes:
            for ax in range(3):
                k = template.prior.translation.mixtures[c][ax].n_components
                block(("tm", c, ax), 3 * k)
        for p in self.pairs:
            for ax in range(3):
                k = template.prior.relative.mixtures[p][ax].n_components
                block(("rm", p, ax), 3 * k)
        for c in self.classes:
            k = template.prior.counts.class_mixtures[c].n_components
            block(("cc", c), 3 * k)
        for p, gmm in template.prior.counts.pair_mixtures.items():
            block(("cp", p), 6 * gmm.n_components)
        self.size = off
        self._index = {key: sl for key, sl in self._layout}

    # -- packing ----------------------------------------------------------

    @staticmethod
    def _pack_1d(gmm: Gmm1D):
        return np.concatenate(
            [np.log(gmm.weights), gmm.means, np.log(gmm.variances)]
        )

    @staticmethod
    def _unpack_1d(vec):
        k = len(vec) // 3
        logits = vec[:k]
        w = np.exp(logits - logits.max())
        w = w / w.sum()
        return Gmm1D(w, vec[k : 2 * k].copy(), np.exp(vec[2 * k :]))

    @staticmethod
    def _pack_2d(gmm: Gmm2D):
        L = np.linalg.cholesky(gmm.covs)
        chol = np.stack(
            [np.log(L[:, 0, 0]), L[:, 1, 0], np.log(L[:, 1, 1])], axis=1
        )
        return np.concatenate(
            [np.log(gmm.weights), gmm.means.ravel(), chol.ravel()]
        )

    @staticmethod
    def _unpack_2d(vec):
        k = len(vec) // 6
        logits = vec[:k]
        w = np.exp(logits - logits.max())
        w = w / w.sum()
        means = vec[k : 3 * k].reshape(k, 2).copy()
        chol = vec[3 * k :].reshape(k, 3)
        L = np.zeros((k, 2, 2))
        L[:, 0, 0] = np.exp(chol[:, 0])
        L[:, 1, 0] = chol[:, 1]
        L[:, 1, 1] = np.exp(chol[:, 2])
        covs = L @ np.swapaxes(L, 1, 2)
        return Gmm2D(w, means, covs)

    def pack(self, hyper: HyperParams) -> np.ndarray:
        theta = np.empty(self.size)
        r = hyper.robust
        for c in self.classes:
            theta[self._index[("ua", c)]] = np.log(r.unary_alpha[c])
            theta[self._index[("uv", c)]] = np.log(np.asarray(r.unary_var[c]))
        for p in self.pairs:
            theta[self._index[("pa", p)]] = np.log(r.pair_alpha[p])
            theta[self._index[("pv", p)]] = np.log(np.asarray(r.pair_var[p]))
        for c in self.classes:
            for ax in range(3):
                theta[self._index[("tm", c, ax)]] = self._pack_1d(
                    hyper.prior.translation.mixtures[c][ax]
                )
        for p in self.pairs:
            for ax in range(3):
                theta[self._index[("rm", p, ax)]] = self._pack_1d(
                    hyper.prior.relative.mixtures[p][ax]
                )
        for c in self.classes:
            theta[self._index[("cc", c)]] = self._pack_1d(
                hyper.prior.counts.class_mixtures[c]
            )
        for p, gmm in hyper.prior.counts.pair_mixtures.items():
            theta[self._index[("cp", p)]] = self._pack_2d(gmm)
        return theta

    def unpack(self, theta: np.ndarray) -> HyperParams:
        t = self.template
        robust = RobustParams(
            {c: float(np.exp(theta[self._index[("ua", c)]])[0]) for c in self.classes},
            {c: np.exp(theta[self._index[("uv", c)]]) for c in self.classes},
            {p: float(np.exp(theta[self._index[("pa", p)]])[0]) for p in self.pairs},
            {p: np.exp(theta[self._index[("pv", p)]]) for p in self.pairs},
        )
        trans = TranslationPrior(
            {
                c: tuple(
                    self._unpack_1d(theta[self._index[("tm", c, ax)]])
                    for ax in range(3)
                )
                for c in self.classes
            }
        )
        rel = RelativePrior(
            {
                p: tuple(
                    self._unpack_1d(theta[self._index[("rm", p, ax)]])
                    for ax in range(3)
                )
                for p in self.pairs
            },
            t.prior.relative.penetrable,
        )
        counts = CountPrior(
            {c: self._unpack_1d(theta[self._index[("cc", c)]]) for c in self.classes},
            {
                p: self._unpack_2d(theta[self._index[("cp", p)]])
                for p in t.prior.counts.pair_mixtures
            },
            t.prior.counts.class_tables,
            t.prior.counts.pair_tables,
        )
        prior = PriorModel(t.prior.class_table, trans, rel, counts)
        return HyperParams(robust, prior, t.edge_gating)

    # -- gradient assembly ------------------------------------------------

    def grad_vector(self, hyper: HyperParams, g: dict) -> np.ndarray:
        """Flatten an objective phi-gradient dict into theta coordinates.

        Chains alpha/variance gradients through the log parameterization;
        mixture-weight gradients arrive already in logit coordinates.
        """
        out = np.zeros(self.size)
        r = hyper.robust
        for j, c in enumerate(self.classes):
            out[self._index[("ua", c)]] = g["unary_alpha"][j] * r.unary_alpha[c]
            out[self._index[("uv", c)]] = g["unary_logvar"][j]
        for p in self.pairs:
            a = self.classes.index(p[0])
            b = self.classes.index(p[1])
            out[self._index[("pa", p)]] = g["pair_alpha"][a, b] * r.pair_alpha[p]
            out[self._index[("pv", p)]] = g["pair_logvar"][a, b]
        for c in self.classes:
            if c not in g["trans"]:
                continue
            for ax in range(3):
                gl, gm, gv = g["trans"][c][ax]
                out[self._index[("tm", c, ax)]] = np.concatenate([gl, gm, gv])
        for p in self.pairs:
            if p not in g["rel"]:
                continue
            for ax in range(3):
                gl, gm, gv = g["rel"][p][ax]
                out[self._index[("rm", p, ax)]] = np.concatenate([gl, gm, gv])
        for c in self.classes:
            gl, gm, gv = g["count_class"][c]
            out[self._index[("cc", c)]] = np.concatenate([gl, gm, gv])
        for p in g["count_pair"]:
            gl, gm, gc = g["count_pair"][p]
            out[self._index[("cp", p)]] = np.concatenate([gl, gm.ravel(), gc.ravel()])
        return out


def _regularizer_terms(packer: PhiPacker, hyper: HyperParams, gt_scenes):
    """l(Phi) = l1 + l2 and its gradient in theta coordinates.

    l1: negative log-likelihood of ground-truth absolute and relative
    active translations under the prior mixtures. l2: squared deviation of
    the count mixture densities from the empirical count tables.
    """
    from .relative import TE_SLICE, phi_all
    from .scene import T_SLICE

    value = 0.0
    grad = np.zeros(packer.size)
    classes = packer.classes
    table = hyper.prior.class_table

    per_class = {c: [] for c in classes}
    per_pair = {}
    for scene in gt_scenes:
        act = scene.active_mask()
        idx = np.nonzero(act)[0]
        cls = [classes[i] for i in table.class_index_per_slot()]
        for i in idx:
            per_class[cls[i]].append(scene.attrs[i, T_SLICE])
        rel = phi_all(scene.attrs)
        for v in idx:
            for w in idx:
                if v == w:
                    continue
                per_pair.setdefault((cls[v], cls[w]), []).append(rel[v, w, TE_SLICE])

    for c, rows in per_class.items():
        if not rows:
            continue
        x = np.array(rows)
        for ax in range(3):
            gmm = hyper.prior.translation.mixtures[c][ax]
            value -= float(gmm.logpdf(x[:, ax]).sum())
            gl, gm, gv = gmm.logpdf_param_grad(x[:, ax])
            grad[packer._index[("tm", c, ax)]] -= np.concatenate(
                [gl.sum(0), gm.sum(0), gv.sum(0)]
            )
    for p, rows in per_pair.items():
        x = np.array(rows)
        for ax in range(3):
            gmm = hyper.prior.relative.mixtures[p][ax]
            value -= float(gmm.logpdf(x[:, ax]).sum())
            gl, gm, gv = gmm.logpdf_param_grad(x[:, ax])
            grad[packer._index[("rm", p, ax)]] -= np.concatenate(
                [gl.sum(0), gm.sum(0), gv.sum(0)]
            )

    # l2: least squares between mixture densities and empirical tables.
    for c, tab in hyper.prior.counts.class_tables.items():
        gmm = hyper.prior.counts.class_mixtures[c]
        pts = np.arange(len(tab), dtype=float)
        pdf = gmm.pdf(pts)
        resid = pdf - np.asarray(tab)
        value += float(np.sum(resid**2))
        gl, gm, gv = gmm.logpdf_param_grad(pts)
        coef = 2.0 * resid * pdf
        grad[packer._index[("cc", c)]] += np.concatenate(
            [coef @ gl, coef @ gm, coef @ gv]
        )
    for p, tab in hyper.prior.counts.pair_tables.items():
        gmm = hyper.prior.counts.pair_mixtures[p]
        tab = np.asarray(tab)
        na, nb = tab.shape
        pts = np.array([[i, j] for i in range(na) for j in range(nb)], dtype=float)
        pdf = gmm.pdf(pts)
        resid = pdf - tab.ravel()
        value += float(np.sum(resid**2))
        gl, gm, gc = gmm.logpdf_param_grad(pts)
        coef = 2.0 * resid * pdf
        grad[packer._index[("cp", p)]] += np.concatenate(
            [coef @ gl, np.einsum("n,nki->ki", coef, gm).ravel(),
             np.einsum("n,nki->ki", coef, gc).ravel()]
        )
    return value, grad


def _draw_samples(instances, config):
    """Frozen perturbation samples (common random numbers) per instance.

    Each instance's noise stream is seeded from a hash of its ground-truth
    scene, so the total loss does not depend on the ordering of the
    validation set.
    """
    frozen = []
    for _, gt in instances:
        digest = hashlib.blake2b(
            gt.attrs.tobytes() + gt.indicators.tobytes(), digest_size=8
        ).digest()
        rng = np.random.default_rng([config.seed, int.from_bytes(digest, "little")])
        n = gt.class_table.total_slots
        outer = rng.normal(0, 1.0, (config.samples_per_instance, n, ATTR_DIM))
        inner = rng.normal(
            0, 1.0, (config.samples_per_instance, config.inner_samples, n, ATTR_DIM)
        )
        if config.perturb_indicators:
            z_outer = rng.normal(0, 1.0, (config.samples_per_instance, n))
            z_inner = rng.normal(
                0, 1.0, (config.samples_per_instance, config.inner_samples, n)
            )
        else:
            z_outer = z_inner = None
        frozen.append((outer, inner, z_outer, z_inner))
    return frozen


def _perturb(gt, noise_a, noise_z, radius):
    attrs = gt.attrs + radius * noise_a
    attrs = np.concatenate(
        [attrs[:, :3], wrap_angle(attrs[:, 3:6]), attrs[:, 6:]], axis=1
    )
    z = gt.indicators
    if noise_z is not None:
        z = np.clip(z + radius * noise_z, 0.0, 1.0)
    return attrs, z


def hyper_loss(hyper: HyperParams, instances, config: HyperLearnConfig,
               gt_scenes=None, packer: PhiPacker | None = None,
               frozen=None, want_grad: bool = False):
    """Loss L(Phi) over validation instances; optionally its theta-gradient.

    instances: list of (PredictionBundle, ground-truth SceneLayout).
    Returns (loss, stats) or (loss, stats, grad); stats include the
    fraction of margin samples violating the hinge.
    """
    packer = packer or PhiPacker(hyper)
    frozen = frozen or _draw_samples(instances, config)
    gt_scenes = gt_scenes if gt_scenes is not None else [gt for _, gt in instances]

    reg, reg_grad = _regularizer_terms(packer, hyper, gt_scenes)
    total = reg
    grad = reg_grad if want_grad else None
    violations = 0
    margin_samples = 0

    for (preds, gt), (outer, inner, z_outer, z_inner) in zip(instances, frozen):
        core = ObjectiveCore(hyper, preds)
        if want_grad:
            f_gt, g_gt = core.value_grad_phi(gt.attrs, gt.indicators)
            g_gt = packer.grad_vector(hyper, g_gt)
        else:
            f_gt = core.value(gt.attrs, gt.indicators)
        J = config.samples_per_instance
        for j in range(J):
            a_j, z_j = _perturb(
                gt, outer[j], None if z_outer is None else z_outer[j], config.r_m
            )
            if want_grad:
                f_j, g_j = core.value_grad_phi(a_j, z_j)
                g_j = packer.grad_vector(hyper, g_j)
            else:
                f_j = core.value(a_j, z_j)
            hinge = f_gt - f_j + config.delta
            margin_samples += 1
            if hinge > 0:
                violations += 1
                total += hinge / J
                if want_grad:
                    grad += (g_gt - g_j) / J
            if config.lambda_s > 0:
                Kin = config.inner_samples
                for k in range(Kin):
                    a_k = a_j + config.r_s * inner[j, k]
                    a_k = np.concatenate(
                        [a_k[:, :3], wrap_angle(a_k[:, 3:6]), a_k[:, 6:]], axis=1
                    )
                    z_k = z_j
                    if z_inner is not None:
                        z_k = np.clip(z_j + config.r_s * z_inner[j, k], 0.0, 1.0)
                    if want_grad:
                        f_k, g_k = core.value_grad_phi(a_k, z_k)
                        g_k = packer.grad_vector(hyper, g_k)
                        d = f_j - f_k
                        total += config.lambda_s * d * d / (J * Kin)
                        grad += config.lambda_s * 2.0 * d * (g_j - g_k) / (J * Kin)
                    else:
                        f_k = core.value(a_k, z_k)
                        d = f_j - f_k
                        total += config.lambda_s * d * d / (J * Kin)

    stats = {
        "regularizer": reg,
        "violation_rate": violations / max(margin_samples, 1),
    }
    if want_grad:
        return float(total), stats, grad
    return float(total), stats


def learn_hyper(hyper: HyperParams, instances, config: HyperLearnConfig | None = None):
    """Gradient descent on the hyperparameter loss; returns (hyper, report).

    Normalized-gradient steps; if the loss rises for 10 consecutive epochs
    the learning rate is halved and descent restarts from the best
    parameters seen. The best iterate is returned, so the result never
    scores worse than the input. Deterministic per config seed.
    """
    config = config or HyperLearnConfig()
    packer = PhiPacker(hyper)
    frozen = _draw_samples(instances, config)
    gt_scenes = [gt for _, gt in instances]

    theta = packer.pack(hyper)
    best_theta = theta.copy()
    lr = config.learn_rate
    losses = []
    viol = []
    best_loss = np.inf
    prev_loss = np.inf
    rising = 0
    for _ in range(config.epochs):
        h = packer.unpack(theta)
        loss, stats, grad = hyper_loss(
            h, instances, config, gt_scenes, packer, frozen, want_grad=True
        )
        losses.append(loss)
        viol.append(stats["violation_rate"])
        if loss < best_loss:
            best_loss = loss
            best_theta = theta.copy()
        rising = rising + 1 if loss > prev_loss else 0
        prev_loss = loss
        if rising >= 10:
            lr *= 0.5
            theta = best_theta.copy()
            rising = 0
            prev_loss = np.inf
            continue
        gnorm = np.linalg.norm(grad)
        if gnorm == 0:
            break
        theta = theta - lr * grad / max(1.0, gnorm)
    report = {
        "losses": losses,
        "violation_rates": viol,
        "final_learn_rate": lr,
        "best_loss": best_loss,
    }
    return packer.unpack(best_theta), report


_DEFAULT_GRID = {
    "r_m": (0.05, 0.1, 0.2),
    "r_s": (0.01, 0.05),
    "delta": (0.1, 0.5),
    "lambda_s": (0.0, 0.1, 1.0),
}


def _holdout_score(hyper, holdout_instances, opt_config):
    """Mean attribute L2 of synchronize over a held-out split."""
    from .metrics import attribute_l2
    from .optimize import synchronize

    post, gts = [], []
    for preds, gt in holdout_instances:
        scene, _ = synchronize(hyper, preds, config=opt_config)
        post.append(scene)
        gts.append(gt)
    m = attribute_l2(post, gts)
    channels = [m["size"], m["rotation"], m["translation"], m["shape_code"]]
    if any(c is None for c in channels):
        return np.inf
    return float(np.mean(channels))


def cross_validate_meta(hyper: HyperParams, train_instances, holdout_instances,
                        config: HyperLearnConfig | None = None, grid=None,
                        opt_config=None):
    """Grid search over meta-parameters of the learning loss.

    Each grid point runs learn_hyper on the training split, synchronizes
    the held-out split under the learned parameters, and scores by mean
    attribute L2; ties prefer smaller delta, then smaller r_m. Returns
    (best_config, best_hyper, table).
    """
    config = config or HyperLearnConfig()
    grid = grid or _DEFAULT_GRID
    results = []
    for r_m in grid["r_m"]:
        for r_s in grid["r_s"]:
            for delta in grid["delta"]:
                for lam in grid["lambda_s"]:
                    cfg = replace(config, r_m=r_m, r_s=r_s, delta=delta, lambda_s=lam)
                    learned, _ = learn_hyper(hyper, train_instances, cfg)
                    score = _holdout_score(learned, holdout_instances, opt_config)
                    results.append((score, delta, r_m, cfg, learned))
    results.sort(key=lambda r: (r[0], r[1], r[2]))
    best = results[0]
    table = [
        {"config": r[3].to_dict(), "score": r[0]} for r in results
    ]
    return best[3], best[4], table
