"""Gaussian-process surrogates with a Matérn-5/2 ARD kernel and constant mean.

`GPRegressor` is exact GP regression (reward model). `GPClassifier` is a
probit GP whose latent posterior is the Laplace approximation at the mode
(feasibility model per constraint primitive). Both fit their hyperparameters
by maximizing the (approximate) log marginal likelihood with analytic
gradients and random restarts in log space.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, optimize
from scipy.special import log_ndtr, ndtr

SQRT5 = math.sqrt(5.0)
JITTER_LADDER = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)

LOG_LS_BOUNDS = (math.log(0.03), math.log(20.0))
LOG_SF2_BOUNDS = (math.log(1e-8), math.log(1e3))
LOG_SN2_BOUNDS = (math.log(1e-8), math.log(10.0))
CLS_LOG_LS_BOUNDS = (math.log(0.05), math.log(3.0))
CLS_LOG_SF2_BOUNDS = (math.log(0.1), math.log(10.0))
CLS_MEAN_HALF_WIDTH = 1.0
# weak log-normal / normal hyperpriors keep small-data classifiers smooth
CLS_PRIOR_LOG_LS = (math.log(0.5), 1.0)
CLS_PRIOR_LOG_SF2 = (0.0, 1.0)
CLS_PRIOR_MEAN_SD = 0.5


class SurrogateError(ValueError):
    pass


@dataclass
class KernelParams:
    lengthscales: np.ndarray
    signal_variance: float = 1.0
    noise_variance: float = 1e-6
    constant_mean: float = 0.0

    def __post_init__(self):
        self.lengthscales = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if np.any(self.lengthscales <= 0) or self.signal_variance <= 0:
            raise SurrogateError("lengthscales and signal variance must be positive")
        if self.noise_variance < 0:
            raise SurrogateError("noise variance must be non-negative")


# ---------------------------------------------------------------- encoding

def encode(values: Sequence, encodings: Sequence) -> np.ndarray:
    """Concatenate raw continuous coordinates and one-hot blocks for symbols."""
    out = []
    for val, enc in zip(values, encodings):
        if isinstance(enc, (list, tuple)):
            if val is None:
                out.extend([1.0 / len(enc)] * len(enc))
            else:
                if val not in enc:
                    raise SurrogateError(f"symbol {val!r} not in {list(enc)}")
                out.extend(1.0 if s == val else 0.0 for s in enc)
        else:
            vals = [0.5] * enc if val is None else list(val)
            if len(vals) != enc:
                raise SurrogateError(f"expected {enc} coordinates, got {len(vals)}")
            out.extend(float(v) for v in vals)
    return np.asarray(out, dtype=float)


def blocks(encodings: Sequence) -> list[tuple[int, int, bool]]:
    """(start, stop, is_one_hot) column ranges of an encoding."""
    out = []
    i = 0
    for enc in encodings:
        n = len(enc) if isinstance(enc, (list, tuple)) else int(enc)
        out.append((i, i + n, isinstance(enc, (list, tuple))))
        i += n
    return out


# ---------------------------------------------------------------- kernel

def _scaled_dist(A, B, ls):
    A = np.atleast_2d(A) / ls
    B = np.atleast_2d(B) / ls
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2 * A @ B.T
    return np.sqrt(np.maximum(d2, 0.0))


def matern52_matrix(A, B, lengthscales, signal_variance) -> np.ndarray:
    r = _scaled_dist(A, B, np.asarray(lengthscales, dtype=float))
    return signal_variance * (1 + SQRT5 * r + 5.0 / 3.0 * r * r) * np.exp(-SQRT5 * r)


def matern52(a, b, params: KernelParams) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape or a.shape[0] != params.lengthscales.shape[0]:
        raise SurrogateError(f"dimension mismatch: {a.shape[0]}, {b.shape[0]}, {params.lengthscales.shape[0]} lengthscales")
    r = math.sqrt(float(np.sum(((a - b) / params.lengthscales) ** 2)))
    return params.signal_variance * (1 + SQRT5 * r + 5.0 / 3.0 * r * r) * math.exp(-SQRT5 * r)


def _kernel_and_grads(X, ls, sf2):
    """K and dK/dlog(l_d) for every d, dK/dlog(sf2) equals K."""
    diff2 = ((X[:, None, :] - X[None, :, :]) / ls) ** 2
    r = np.sqrt(diff2.sum(-1))
    e = np.exp(-SQRT5 * r)
    K = sf2 * (1 + SQRT5 * r + 5.0 / 3.0 * r * r) * e
    common = sf2 * 5.0 / 3.0 * (1 + SQRT5 * r) * e
    dls = common[None, :, :] * np.moveaxis(diff2, -1, 0)
    return K, dls


def _cholesky(K):
    n = K.shape[0]
    scale = max(1.0, float(np.mean(np.diag(K)))) if n else 1.0
    for j in JITTER_LADDER:
        try:
            return linalg.cholesky(K + j * scale * np.eye(n), lower=True), j
        except linalg.LinAlgError:
            continue
    raise SurrogateError("kernel matrix is not positive definite even with 1e-4 jitter")


# ---------------------------------------------------------------- regression

@dataclass
class GPRegressor:
    params: KernelParams
    train_x: np.ndarray
    train_y: np.ndarray
    degenerate: bool = False
    chol_factor: np.ndarray = field(init=False, repr=False)
    alpha: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.train_x = np.atleast_2d(np.asarray(self.train_x, dtype=float))
        self.train_y = np.asarray(self.train_y, dtype=float).ravel()
        p = self.params
        K = matern52_matrix(self.train_x, self.train_x, p.lengthscales, p.signal_variance)
        K[np.diag_indices_from(K)] += p.noise_variance
        self.chol_factor, self.jitter = _cholesky(K)
        self.alpha = linalg.cho_solve((self.chol_factor, True), self.train_y - p.constant_mean)

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        p = self.params
        Ks = matern52_matrix(X, self.train_x, p.lengthscales, p.signal_variance)
        mean = p.constant_mean + Ks @ self.alpha
        v = linalg.solve_triangular(self.chol_factor, Ks.T, lower=True)
        var = np.maximum(p.signal_variance - (v * v).sum(0), 0.0)
        return mean, var


def log_marginal_likelihood(theta: np.ndarray, X: np.ndarray, y: np.ndarray,
                            with_grad: bool = True):
    """Log evidence and its gradient in theta = [log l_1..D, log sf2, log sn2, mean]."""
    D = X.shape[1]
    ls = np.exp(theta[:D])
    sf2 = math.exp(theta[D])
    sn2 = math.exp(theta[D + 1])
    m = theta[D + 2]
    n = len(y)
    K, dls = _kernel_and_grads(X, ls, sf2)
    Ky = K + sn2 * np.eye(n)
    try:
        L = linalg.cholesky(Ky, lower=True)
    except linalg.LinAlgError:
        return (-1e25, np.zeros_like(theta)) if with_grad else -1e25
    r = y - m
    a = linalg.cho_solve((L, True), r)
    lml = -0.5 * r @ a - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi)
    if not with_grad:
        return lml
    Kinv = linalg.cho_solve((L, True), np.eye(n))
    Q = np.outer(a, a) - Kinv
    grad = np.empty_like(theta)
    grad[:D] = 0.5 * np.einsum("ij,dji->d", Q, dls)
    grad[D] = 0.5 * np.sum(Q * K)
    grad[D + 1] = 0.5 * sn2 * np.trace(Q)
    grad[D + 2] = a.sum()
    return lml, grad


def fit_regression(X, y, restarts: int = 5, rng: np.random.Generator | None = None,
                   init: KernelParams | None = None) -> GPRegressor:
    """Type-II maximum likelihood fit with multi-start L-BFGS-B."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(y) < 2:
        raise SurrogateError("regression needs at least 2 points")
    rng = rng or np.random.default_rng(0)
    D = X.shape[1]
    degenerate = bool(np.all(np.ptp(X, axis=0) == 0))
    yvar = float(np.var(y))
    bounds = [LOG_LS_BOUNDS] * D + [LOG_SF2_BOUNDS, LOG_SN2_BOUNDS,
                                    (float(y.min()) - 1.0, float(y.max()) + 1.0)]
    starts = []
    if init is not None:
        starts.append(np.r_[np.log(init.lengthscales), math.log(init.signal_variance),
                            math.log(max(init.noise_variance, 1e-8)), init.constant_mean])
    starts.append(np.r_[np.full(D, math.log(0.3)), math.log(max(yvar, 1e-6)),
                        math.log(max(1e-3 * yvar, 1e-6)), float(y.mean())])
    while len(starts) < restarts:
        starts.append(np.r_[rng.uniform(math.log(0.05), math.log(3.0), D),
                            math.log(max(yvar, 1e-6)) + rng.normal(0, 1),
                            rng.uniform(math.log(1e-6), math.log(1e-1)),
                            float(y.mean()) + rng.normal(0, 0.1 + math.sqrt(yvar))])
    best = None
    for s in starts:
        s = np.clip(s, [b[0] for b in bounds], [b[1] for b in bounds])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = optimize.minimize(lambda t: tuple(-v for v in log_marginal_likelihood(t, X, y)),
                                    s, jac=True, method="L-BFGS-B", bounds=bounds,
                                    options={"maxiter": 200})
        if best is None or res.fun < best.fun:
            best = res
    t = best.x
    noise = math.exp(t[D + 1])
    if degenerate:
        noise = max(noise, 1e-4)
    params = KernelParams(np.exp(t[:D]), math.exp(t[D]), noise, float(t[D + 2]))
    return GPRegressor(params, X, y, degenerate)


def predict(model: GPRegressor, x) -> tuple[float, float]:
    mean, var = model.predict(np.asarray(x, dtype=float).reshape(1, -1))
    return float(mean[0]), float(var[0])


# ---------------------------------------------------------------- classification

def _probit_derivs(f, t):
    """log p(t|f), d/df, -d2/df2 (= W) and d3/df3 for the probit likelihood."""
    z = t * f
    logp = log_ndtr(z)
    r = np.exp(-0.5 * z * z - 0.5 * math.log(2 * math.pi) - logp)
    d1 = t * r
    W = r * (z + r)
    d3 = t * (r * (z + r) * (z + 2 * r) - r)
    return logp, d1, W, d3


def _laplace_mode(K, t, m, f0=None, tol=1e-9, max_iter=100):
    n = len(t)
    f = np.full(n, m) if f0 is None else f0.copy()
    obj_old = -np.inf
    a = np.zeros(n)
    for _ in range(max_iter):
        logp, d1, W, _ = _probit_derivs(f, t)
        sW = np.sqrt(W)
        B = np.eye(n) + sW[:, None] * K * sW[None, :]
        L = linalg.cholesky(B, lower=True)
        b = W * (f - m) + d1
        c = linalg.cho_solve((L, True), sW * (K @ b))
        a_new = b - sW * c
        f_new = K @ a_new + m
        # damped step keeps the objective ascending
        step = 1.0
        for _ in range(20):
            f_try = f + step * (f_new - f)
            a_try = a + step * (a_new - a)
            obj = -0.5 * a_try @ (f_try - m) + log_ndtr(t * f_try).sum()
            if obj >= obj_old - 1e-12:
                break
            step *= 0.5
        f, a = f_try, a_try
        if abs(obj - obj_old) < tol:
            break
        obj_old = obj
    return f, a


@dataclass
class _LaplaceState:
    f: np.ndarray
    a: np.ndarray
    d1: np.ndarray
    sW: np.ndarray
    L: np.ndarray
    log_evidence: float


def _laplace(K, t, m, f0=None) -> _LaplaceState:
    f, a = _laplace_mode(K, t, m, f0)
    logp, d1, W, _ = _probit_derivs(f, t)
    sW = np.sqrt(W)
    L = linalg.cholesky(np.eye(len(t)) + sW[:, None] * K * sW[None, :], lower=True)
    lz = -0.5 * a @ (f - m) + logp.sum() - np.log(np.diag(L)).sum()
    return _LaplaceState(f, a, d1, sW, L, float(lz))


def laplace_log_evidence(theta: np.ndarray, X: np.ndarray, t: np.ndarray, with_grad: bool = True,
                         f0: np.ndarray | None = None):
    """Approximate log evidence and gradient in theta = [log l_1..D, log sf2, mean]."""
    D = X.shape[1]
    ls = np.exp(theta[:D])
    sf2 = math.exp(theta[D])
    m = theta[D + 1]
    n = len(t)
    K, dls = _kernel_and_grads(X, ls, sf2)
    K = K + 1e-8 * np.eye(n)
    st = _laplace(K, t, m, f0)
    if not with_grad:
        return st.log_evidence
    _, d1, W, d3 = _probit_derivs(st.f, t)
    sW, L, a = st.sW, st.L, st.a
    R = sW[:, None] * linalg.cho_solve((L, True), np.diag(sW))
    C = linalg.solve_triangular(L, sW[:, None] * K, lower=True)
    s2 = 0.5 * (np.diag(K) - (C * C).sum(0)) * d3
    grads = np.empty_like(theta)
    mats = list(dls) + [K - 1e-8 * np.eye(n)]
    for j, Cj in enumerate(mats):
        s1 = 0.5 * a @ Cj @ a - 0.5 * np.sum(R * Cj)
        b = Cj @ d1
        s3 = b - K @ (R @ b)
        grads[j] = s1 + s2 @ s3
    ones = np.ones(n)
    grads[D + 1] = a.sum() + s2 @ (ones - K @ (R @ ones))
    return st.log_evidence, grads


@dataclass
class GPClassifier:
    params: KernelParams
    train_x: np.ndarray
    train_labels: np.ndarray
    fallback: bool = False
    _state: _LaplaceState | None = field(default=None, repr=False)

    def __post_init__(self):
        self.train_x = np.atleast_2d(np.asarray(self.train_x, dtype=float))
        self.train_labels = np.where(np.asarray(self.train_labels).ravel() > 0, 1.0, -1.0)
        if self.fallback:
            return
        p = self.params
        K = matern52_matrix(self.train_x, self.train_x, p.lengthscales, p.signal_variance)
        K[np.diag_indices_from(K)] += 1e-8
        self._state = _laplace(K, self.train_labels, p.constant_mean)

    @property
    def rate(self) -> float:
        n_pos = float(np.sum(self.train_labels > 0))
        return (n_pos + 0.5) / (len(self.train_labels) + 1.0)

    def latent(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        p = self.params
        if self.fallback:
            # probit of the smoothed empirical rate, with unit extra latent variance
            mu = math.sqrt(2.0) * _ndtri(self.rate)
            return np.full(len(X), mu), np.ones(len(X))
        st = self._state
        Ks = matern52_matrix(X, self.train_x, p.lengthscales, p.signal_variance)
        mean = p.constant_mean + Ks @ st.d1
        v = linalg.solve_triangular(st.L, (st.sW[:, None] * Ks.T), lower=True)
        var = np.maximum(p.signal_variance - (v * v).sum(0), 1e-12)
        return mean, var

    def predict_prob(self, X) -> np.ndarray:
        mean, var = self.latent(X)
        return probit_predictive(mean, var)


def _ndtri(p):
    from scipy.special import ndtri
    return float(ndtri(p))


def probit_predictive(mean, var):
    """Phi(mean / sqrt(1 + var)), clipped into the open unit interval."""
    p = ndtr(np.asarray(mean) / np.sqrt(1.0 + np.asarray(var)))
    return np.clip(p, 1e-12, 1 - 1e-12)


def fit_classifier(X, labels, params: KernelParams | None = None, optimize_hypers: bool = True,
                   restarts: int = 5, rng: np.random.Generator | None = None,
                   smote_k: int | None = 5, encodings: Sequence | None = None,
                   max_points: int = 300, prior_mean: float = 0.0, smote_min: int = 2) -> GPClassifier:
    """Probit GP classifier; labels > 0 mean feasible.

    Single-class data yields a flagged constant model at the smoothed
    empirical rate. With `smote_k`, a minority class of at least `smote_min`
    points is oversampled to parity before fitting.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = np.where(np.asarray(labels).ravel() > 0, 1.0, -1.0)
    if len(t) == 0:
        raise SurrogateError("cannot fit a classifier on empty data")
    rng = rng or np.random.default_rng(0)
    D = X.shape[1]
    X, t = _dedupe(X, t)
    if len(np.unique(t)) < 2:
        p = params or KernelParams(np.full(D, 0.3), 1.0, 0.0, 0.0)
        return GPClassifier(p, X, t, fallback=True)
    if len(t) > max_points:
        keep = rng.choice(len(t), max_points, replace=False)
        keep.sort()
        X, t = X[keep], t[keep]
        if len(np.unique(t)) < 2:
            return GPClassifier(params or KernelParams(np.full(D, 0.3)), X, t, fallback=True)
    if smote_k and min(np.sum(t > 0), np.sum(t < 0)) >= smote_min:
        X, t = smote_balance(X, t, smote_k, rng=rng, encodings=encodings)
    if params is None or optimize_hypers:
        params = _fit_classifier_hypers(X, t, params, restarts, rng, prior_mean)
    return GPClassifier(params, X, t)


def _dedupe(X, t):
    seen = {}
    for i, (row, lab) in enumerate(zip(map(tuple, X), t)):
        seen.setdefault((row, lab), i)
    idx = sorted(seen.values())
    return X[idx], t[idx]


def _hyperprior(theta, D, prior_mean=0.0):
    """Log density (up to a constant) and gradient of the classifier hyperprior."""
    mu = np.r_[np.full(D, CLS_PRIOR_LOG_LS[0]), CLS_PRIOR_LOG_SF2[0], prior_mean]
    sd = np.r_[np.full(D, CLS_PRIOR_LOG_LS[1]), CLS_PRIOR_LOG_SF2[1], CLS_PRIOR_MEAN_SD]
    z = (theta - mu) / sd
    return -0.5 * float(z @ z), -z / sd


def _fit_classifier_hypers(X, t, init, restarts, rng, prior_mean=0.0) -> KernelParams:
    """MAP estimate of the classifier hyperparameters under `_hyperprior`."""
    D = X.shape[1]
    bounds = [CLS_LOG_LS_BOUNDS] * D + [CLS_LOG_SF2_BOUNDS,
                                        (prior_mean - CLS_MEAN_HALF_WIDTH, prior_mean + CLS_MEAN_HALF_WIDTH)]
    starts = []
    if init is not None:
        starts.append(np.r_[np.log(init.lengthscales), math.log(init.signal_variance), init.constant_mean])
    if not starts or restarts > 1:
        starts.append(np.r_[np.full(D, math.log(0.3)), math.log(2.0), prior_mean])
    while len(starts) < restarts:
        starts.append(np.r_[rng.uniform(math.log(0.08), math.log(2.0), D),
                            rng.uniform(math.log(0.5), math.log(8.0)), prior_mean + rng.normal(0, 0.5)])
    best = None
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    for s in starts:
        s = np.clip(s, lo, hi)

        def neg(theta):
            try:
                v, g = laplace_log_evidence(theta, X, t)
            except (linalg.LinAlgError, FloatingPointError):
                return 1e25, np.zeros_like(theta)
            pv, pg = _hyperprior(theta, D, prior_mean)
            return -(v + pv), -(g + pg)

        with warnings.catch_warnings(), np.errstate(all="ignore"):
            warnings.simplefilter("ignore")
            res = optimize.minimize(neg, s, jac=True, method="L-BFGS-B", bounds=bounds,
                                    options={"maxiter": 60})
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    theta = best.x if best is not None else starts[0]
    return KernelParams(np.exp(theta[:D]), math.exp(theta[D]), 0.0, float(theta[D + 1]))


def predict_prob(model: GPClassifier, x) -> float:
    return float(model.predict_prob(np.asarray(x, dtype=float).reshape(1, -1))[0])


# ---------------------------------------------------------------- SMOTE

def smote_balance(X, labels, k: int = 5, rng: np.random.Generator | None = None,
                  encodings: Sequence | None = None):
    """Oversample the minority class to parity with convex combinations.

    Returns (X, labels) with the input as a prefix. One-hot blocks of a
    synthetic point are copied from its seed so they stay integral.
    """
    if k < 1:
        raise SurrogateError("SMOTE needs k >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    labels = np.asarray(labels).ravel()
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2 or counts[0] == counts[1]:
        return X.copy(), labels.copy()
    rng = rng or np.random.default_rng(0)
    minority = classes[np.argmin(counts)]
    need = int(counts.max() - counts.min())
    M = X[labels == minority]
    cont = np.ones(X.shape[1], dtype=bool)
    if encodings is not None:
        for start, stop, onehot in blocks(encodings):
            if onehot:
                cont[start:stop] = False
    synth = np.empty((need, X.shape[1]))
    if len(M) == 1:
        for i in range(need):
            s = M[0].copy()
            s[cont] = np.clip(s[cont] + rng.normal(0, 1e-3, cont.sum()), 0.0, 1.0)
            synth[i] = s
    else:
        d = ((M[:, None, :] - M[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d, np.inf)
        kk = min(k, len(M) - 1)
        nbrs = np.argsort(d, axis=1)[:, :kk]
        for i in range(need):
            j = i % len(M)
            n = nbrs[j, rng.integers(kk)]
            gap = rng.random()
            s = M[j].copy()
            s[cont] = M[j, cont] + gap * (M[n, cont] - M[j, cont])
            synth[i] = s
    return np.vstack([X, synth]), np.concatenate([labels, np.full(need, minority, dtype=labels.dtype)])
