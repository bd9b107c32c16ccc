"""1D / 2D Gaussian mixtures: EM fitting, densities, and gradients.

EM is hand-rolled so the per-iteration log-likelihood trace is available,
initialization is deterministic from a seed (k-means++ style), and the
variance floor is explicit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "Gmm1D",
    "Gmm2D",
    "fit_gmm_em",
    "VARIANCE_FLOOR",
]

VARIANCE_FLOOR = 1e-6
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True, eq=False)
class Gmm1D:
    """Mixture of K univariate Gaussians."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.asarray(self.means, dtype=float)
        v = np.asarray(self.variances, dtype=float)
        if not (w.shape == m.shape == v.shape and w.ndim == 1):
            raise ValueError("weights, means, variances must be equal-length 1D")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(v <= 0):
            raise ValueError("variances must be positive")
        for name, a in (("weights", w), ("means", m), ("variances", v)):
            a = np.ascontiguousarray(a)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def _component_logpdfs(self, x):
        x = np.asarray(x, dtype=float)[..., None]
        return (
            -0.5 * (x - self.means) ** 2 / self.variances
            - 0.5 * np.log(self.variances)
            - 0.5 * _LOG_2PI
        )

    def logpdf(self, x):
        """Log mixture density at x (scalar or array, broadcast over x)."""
        lp = self._component_logpdfs(x) + np.log(self.weights)
        out = logsumexp(lp, axis=-1)
        return float(out) if np.ndim(x) == 0 else out

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def responsibilities(self, x):
        lp = self._component_logpdfs(x) + np.log(self.weights)
        return np.exp(lp - logsumexp(lp, axis=-1, keepdims=True))

    def logpdf_grad(self, x):
        """d logpdf / dx, broadcast over x."""
        r = self.responsibilities(x)
        x = np.asarray(x, dtype=float)[..., None]
        g = (r * (self.means - x) / self.variances).sum(axis=-1)
        return float(g) if g.ndim == 0 else g

    def logpdf_param_grad(self, x):
        """Gradients of logpdf(x) w.r.t. (weight logits, means, log-variances).

        Weights are treated as softmax of logits. Returns three arrays of
        shape x.shape + (K,).
        """
        r = self.responsibilities(x)
        x = np.asarray(x, dtype=float)[..., None]
        d = (x - self.means) / self.variances
        g_logit = r - self.weights
        g_mean = r * d
        g_logvar = 0.5 * r * ((x - self.means) * d - 1.0)
        return g_logit, g_mean, g_logvar

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["weights"]), np.array(d["means"]), np.array(d["variances"]))

    def __eq__(self, other):
        if not isinstance(other, Gmm1D):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.variances, other.variances)
        )

    def __hash__(self):
        return hash((self.weights.tobytes(), self.means.tobytes(), self.variances.tobytes()))


@dataclass(frozen=True, eq=False)
class Gmm2D:
    """Mixture of K bivariate Gaussians with full covariances."""

    weights: np.ndarray
    means: np.ndarray  # (K, 2)
    covs: np.ndarray  # (K, 2, 2)
    _chols: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=float))
        m = np.ascontiguousarray(np.asarray(self.means, dtype=float))
        c = np.ascontiguousarray(np.asarray(self.covs, dtype=float))
        if w.ndim != 1 or m.shape != (len(w), 2) or c.shape != (len(w), 2, 2):
            raise ValueError("inconsistent component shapes")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        try:
            chols = np.linalg.cholesky(c)  # also certifies positive definiteness
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariances must be positive definite") from exc
        for name, a in (("weights", w), ("means", m), ("covs", c)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        chols.setflags(write=False)
        object.__setattr__(self, "_chols", chols)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def _component_logpdfs(self, x):
        """x: (..., 2) -> (..., K)."""
        x = np.asarray(x, dtype=float)
        d = x[..., None, :] - self.means  # (..., K, 2)
        L = self._chols
        # Solve L y = d per component (2x2 lower triangular, unrolled).
        y0 = d[..., 0] / L[:, 0, 0]
        y1 = (d[..., 1] - L[:, 1, 0] * y0) / L[:, 1, 1]
        maha = y0 * y0 + y1 * y1
        logdet = np.log(L[:, 0, 0]) + np.log(L[:, 1, 1])
        return -0.5 * maha - logdet - _LOG_2PI

    def logpdf(self, x):
        lp = self._component_logpdfs(x) + np.log(self.weights)
        out = logsumexp(lp, axis=-1)
        return float(out) if out.ndim == 0 else out

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def responsibilities(self, x):
        lp = self._component_logpdfs(x) + np.log(self.weights)
        return np.exp(lp - logsumexp(lp, axis=-1, keepdims=True))

    def logpdf_grad(self, x):
        """d logpdf / dx, shape (..., 2)."""
        x = np.asarray(x, dtype=float)
        r = self.responsibilities(x)
        d = x[..., None, :] - self.means
        inv = np.linalg.inv(self.covs)  # (K, 2, 2)
        per = -np.einsum("kij,...kj->...ki", inv, d)
        return np.einsum("...k,...ki->...i", r, per)

    def logpdf_param_grad(self, x):
        """Gradients of logpdf(x) w.r.t. (logits, means, Cholesky params).

        Cholesky parameterization per component: (log L00, L10, log L11).
        Returns arrays of shape x.shape[:-1] + (K,), (..., K, 2), (..., K, 3).
        """
        x = np.asarray(x, dtype=float)
        r = self.responsibilities(x)
        d = x[..., None, :] - self.means
        L = self._chols
        y0 = d[..., 0] / L[:, 0, 0]
        y1 = (d[..., 1] - L[:, 1, 0] * y0) / L[:, 1, 1]
        # d logN / d mu = Sigma^{-1} d = L^{-T} y
        g1 = y1 / L[:, 1, 1]
        g0 = (y0 - L[:, 1, 0] * g1) / L[:, 0, 0]
        g_mu = np.stack([g0, g1], axis=-1)
        # d logN / d L = L^{-T} (y y^T - I), lower entries only.
        # A = y y^T - I
        a00 = y0 * y0 - 1.0
        a10 = y1 * y0
        a11 = y1 * y1 - 1.0
        # (L^{-T} A)[i, j] = sum_k invLT[i, k] A[k, j]; invLT = (L^{-1})^T
        # L^{-1} = [[1/L00, 0], [-L10/(L00 L11), 1/L11]]
        i00 = 1.0 / L[:, 0, 0]
        i10 = -L[:, 1, 0] / (L[:, 0, 0] * L[:, 1, 1])
        i11 = 1.0 / L[:, 1, 1]
        dL00 = i00 * a00 + i10 * a10
        dL10 = i11 * a10
        dL11 = i11 * a11
        g_chol = np.stack(
            [dL00 * L[:, 0, 0], dL10, dL11 * L[:, 1, 1]], axis=-1
        )  # chain through log-diagonal
        g_logit = r - self.weights
        return g_logit, r[..., None] * g_mu, r[..., None] * g_chol

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["weights"]), np.array(d["means"]), np.array(d["covs"]))

    def __eq__(self, other):
        if not isinstance(other, Gmm2D):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.covs, other.covs)
        )

    def __hash__(self):
        return hash((self.weights.tobytes(), self.means.tobytes(), self.covs.tobytes()))


def _kmeanspp_centers(x2d, k, rng):
    n = len(x2d)
    centers = [x2d[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            [np.sum((x2d - c) ** 2, axis=1) for c in centers], axis=0
        )
        total = d2.sum()
        if total <= 0:
            centers.append(x2d[rng.integers(n)])
            continue
        centers.append(x2d[rng.choice(n, p=d2 / total)])
    return np.stack(centers)


def _floor_cov(cov, floor=VARIANCE_FLOOR):
    """Raise covariance eigenvalues to the variance floor."""
    w, V = np.linalg.eigh(cov)
    w = np.maximum(w, floor)
    return (V * w) @ V.T


def fit_gmm_em(
    samples,
    k: int,
    seed: int = 0,
    *,
    return_trace: bool = False,
    variance_floor: float = VARIANCE_FLOOR,
):
    """Fit a K-component mixture by EM; dimension 1 or 2 from sample shape.

    Deterministic for a given seed. Converged when the mean log-likelihood
    improves by less than 1e-8 or after 500 iterations. Degenerate data
    (all samples identical) falls back to a single floored component;
    K larger than the number of distinct samples is an error. A larger
    `variance_floor` keeps the fitted density smooth when the samples are
    discrete (counts) but the mixture will be evaluated at relaxed reals.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] not in (1, 2):
        raise ValueError("samples must be 1D or 2D vectors")
    n, dim = x.shape
    floor = float(variance_floor)
    distinct = len(np.unique(x, axis=0))
    if distinct == 1:
        if dim == 1:
            gmm = Gmm1D(np.array([1.0]), x[0], np.array([floor]))
        else:
            gmm = Gmm2D(np.array([1.0]), x[:1], floor * np.eye(2)[None])
        return (gmm, [float(np.mean(gmm.logpdf(samples if dim == 2 else x[:, 0])))]) if return_trace else gmm
    if k > distinct:
        raise ValueError(f"k={k} exceeds number of distinct samples ({distinct})")
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")

    rng = np.random.default_rng(seed)
    if k == 1:
        # Closed-form MLE.
        mean = x.mean(axis=0, keepdims=True)
        if dim == 1:
            var = max(float(np.var(x[:, 0])), floor)
            gmm = Gmm1D(np.array([1.0]), mean[0], np.array([var]))
        else:
            cov = _floor_cov(np.cov(x.T, bias=True), floor)
            gmm = Gmm2D(np.array([1.0]), mean, cov[None])
        if return_trace:
            arg = x[:, 0] if dim == 1 else x
            return gmm, [float(np.mean(gmm.logpdf(arg)))]
        return gmm

    centers = _kmeanspp_centers(x, k, rng)
    # Hard-assignment init for means/covs/weights.
    d2 = np.sum((x[:, None, :] - centers[None]) ** 2, axis=2)
    assign = np.argmin(d2, axis=1)
    weights = np.empty(k)
    means = np.empty((k, dim))
    covs = np.empty((k, dim, dim))
    global_cov = np.atleast_2d(np.cov(x.T, bias=True)) + floor * np.eye(dim)
    for j in range(k):
        mask = assign == j
        weights[j] = max(mask.sum(), 1)
        if mask.sum() >= 2:
            means[j] = x[mask].mean(axis=0)
            covs[j] = _floor_cov(np.atleast_2d(np.cov(x[mask].T, bias=True)), floor)
        else:
            means[j] = centers[j]
            covs[j] = global_cov
    weights /= weights.sum()

    trace = []
    prev = -np.inf
    for _ in range(500):
        gmm = _make(weights, means, covs, dim)
        arg = x[:, 0] if dim == 1 else x
        ll = float(np.mean(gmm.logpdf(arg)))
        trace.append(ll)
        if ll - prev < 1e-8:
            break
        prev = ll
        resp = gmm.responsibilities(arg)  # (n, k)
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-12)
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        for j in range(k):
            d = x - means[j]
            cov = (resp[:, j, None] * d).T @ d / nk[j]
            covs[j] = _floor_cov(np.atleast_2d(cov), floor)
        weights = np.maximum(weights, 1e-12)
        weights /= weights.sum()
    gmm = _make(weights, means, covs, dim)
    return (gmm, trace) if return_trace else gmm


def _make(weights, means, covs, dim):
    if dim == 1:
        return Gmm1D(weights.copy(), means[:, 0].copy(), covs[:, 0, 0].copy())
    return Gmm2D(weights.copy(), means.copy(), covs.copy())
