"""Multivariable Cox proportional hazards with Wald inference.

Newton-Raphson on the Breslow partial log-likelihood, with step halving
whenever a full step lowers the likelihood. Covariates are used in their raw
units so hazard ratios are reportable per unit of each covariate.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .concordance import cindex
from .errors import DataError, SingularMatrixError

logger = logging.getLogger(__name__)

ROUNDOFF = 1e-13

Z_95 = 1.959963984540054


@dataclass(frozen=True)
class CoxFit:
    names: tuple
    coef: np.ndarray
    cov: np.ndarray
    loglik: float
    n_iter: int
    converged: bool
    loglik_history: tuple = field(default=(), repr=False)
    n: int = 0
    n_events: int = 0

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    @property
    def hazard_ratio(self) -> np.ndarray:
        with np.errstate(over="ignore"):  # diverged fits report inf
            return np.exp(self.coef)

    @property
    def ci(self) -> np.ndarray:
        """``(p, 2)`` array of 95% hazard-ratio bounds."""
        with np.errstate(over="ignore"):
            return np.exp(np.column_stack([self.coef - Z_95 * self.se, self.coef + Z_95 * self.se]))

    @property
    def z(self) -> np.ndarray:
        return self.coef / self.se

    @property
    def p(self) -> np.ndarray:
        return 2.0 * stats.norm.sf(np.abs(self.z))

    def linear_predictor(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.coef

    def summary(self) -> list[dict]:
        ci = self.ci
        return [
            {"covariate": name, "coef": float(b), "se": float(s), "hr": float(hr),
             "hr_ci_low": float(lo), "hr_ci_high": float(hi), "z": float(z), "p": float(p)}
            for name, b, s, hr, (lo, hi), z, p in zip(
                self.names, self.coef, self.se, self.hazard_ratio, ci, self.z, self.p)
        ]


def _sorted_inputs(X, time, event):
    order = np.argsort(time, kind="stable")
    t = time[order]
    # index of the first member of each tie group: its risk set is {j: t_j >= t}
    first = np.searchsorted(t, t, side="left")
    return X[order], t, event[order], first


def partial_loglik(beta, X, time, event, *, derivatives=True):
    """Breslow log partial likelihood and (optionally) its score and information."""
    X = np.asarray(X, dtype=float)
    Xs, _, e, first = _sorted_inputs(X, np.asarray(time, float), np.asarray(event).astype(bool))
    return _loglik_sorted(np.asarray(beta, float), Xs, e, first, derivatives)


def _loglik_sorted(beta, X, e, first, derivatives):
    eta = X @ beta
    shift = eta.max()
    w = np.exp(eta - shift)
    s0 = np.cumsum(w[::-1])[::-1][first]
    ll = float(np.sum(eta[e] - shift - np.log(s0[e])))
    if not derivatives:
        return ll
    s1 = np.cumsum((w[:, None] * X)[::-1], axis=0)[::-1][first]
    s2 = np.cumsum((w[:, None, None] * X[:, :, None] * X[:, None, :])[::-1], axis=0)[::-1][first]
    xbar = s1[e] / s0[e, None]
    score = np.sum(X[e] - xbar, axis=0)
    info = np.sum(s2[e] / s0[e, None, None] - xbar[:, :, None] * xbar[:, None, :], axis=0)
    return ll, score, info


def _check_design(X, names):
    if not np.all(np.isfinite(X)):
        raise DataError("covariates must be finite")
    centered = X - X.mean(axis=0)
    for j, name in enumerate(names):
        if np.ptp(X[:, j]) == 0:
            raise SingularMatrixError(f"covariate {name!r} is constant; information matrix is singular", name)
        if np.linalg.matrix_rank(centered[:, : j + 1]) < j + 1:
            raise SingularMatrixError(f"covariate {name!r} is collinear with earlier covariates", name)


def fit(X, time, event, names=None, *, max_iter=50, tol=1e-8, max_halvings=30) -> CoxFit:
    """Fit a Cox model by Newton-Raphson with step halving.

    Converges when ``max |score| < tol``; otherwise the last iterate is
    returned with ``converged=False`` and a warning.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    t = np.asarray(time, dtype=float)
    e = np.asarray(event).astype(bool)
    n, k = X.shape
    if t.shape != (n,) or e.shape != (n,):
        raise DataError("time and event must have one entry per row of X")
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(k))
    if len(names) != k:
        raise DataError("one name per covariate required")
    if not e.any():
        raise DataError("Cox fit requires at least one event")
    _check_design(X, names)

    Xs, _, es, first = _sorted_inputs(X, t, e)
    beta = np.zeros(k)
    ll, score, info = _loglik_sorted(beta, Xs, es, first, True)
    history = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(score)) < tol:
            converged = True
            it -= 1
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            j = int(np.argmin(np.abs(np.diag(info))))
            raise SingularMatrixError(f"singular information matrix (covariate {names[j]!r})", names[j])
        for _ in range(max_halvings):
            cand = beta + step
            ll_new = _loglik_sorted(cand, Xs, es, first, False)
            # near the optimum the gain drops below float resolution of ll
            if np.isfinite(ll_new) and ll_new >= ll - ROUNDOFF * max(1.0, abs(ll)):
                break
            step = step / 2.0
        else:
            logger.debug("step halving exhausted at iteration %d", it)
            break
        beta = cand
        ll, score, info = _loglik_sorted(beta, Xs, es, first, True)
        history.append(ll)
    else:
        converged = np.max(np.abs(score)) < tol

    if not converged:
        warnings.warn(f"Cox fit did not converge after {it} iterations", RuntimeWarning, stacklevel=2)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        j = int(np.argmin(np.abs(np.diag(info))))
        raise SingularMatrixError(f"singular information matrix at the optimum (covariate {names[j]!r})", names[j])
    cov = (cov + cov.T) / 2.0
    return CoxFit(names, beta, cov, ll, it, bool(converged), tuple(history), n, int(e.sum()))


def joint_cindex(fitted: CoxFit, X, time, event) -> float:
    """Harrell's c-index of the fitted linear predictor."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return cindex(time, event, fitted.linear_predictor(X))
