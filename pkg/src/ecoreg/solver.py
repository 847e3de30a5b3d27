"""Grouped elastic-net multinomial logit on three outcome classes.

The model is ``y_i ~ Multinomial(t_i, softmax(a + x_i B))`` with class 3 as
the reference (its intercept and coefficient column are fixed at zero).
Fitting minimizes::

    NLL(B, a) / N  +  lam * ((1 - alpha) / 2 * ||B||_F^2
                             + alpha * sum_g sqrt(3 * span_g) * ||B_g||_F)

where ``N`` is the total count.  The solver cycles over the intercept and
the feature groups; each block takes one majorize-minimize step.  The
softmax Hessian in the reference parameterization is bounded by 1/2, so a
group's likelihood is majorized by 1/2 times the count-weighted Gram matrix
of its (centered) columns.  In that Gram matrix's eigenbasis the bound is
diagonal and the penalized block update is a group soft-threshold with a
scalar radius found by a monotone Newton solve.  Every sweep therefore
decreases the objective.  A single scalar bound per group would also be
valid but converges far more slowly on the correlated columns of random
Fourier features.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numba import njit

from ._rng import substream
from .data_model import RegionTable, RowKind
from .errors import AlphaZero, NotConverged, ValidationError
from .featurizer import EmbeddingMatrix, FeatureLayout

__all__ = [
    "softmax",
    "DesignProblem",
    "ModelFit",
    "CVEntry",
    "CVResult",
    "probabilities",
    "nll",
    "nll_gradient",
    "deviance",
    "null_intercepts",
    "null_fit",
    "lambda_max",
    "objective",
    "fit_lambda",
    "fit_path",
    "cross_validate",
    "fit_cv",
    "fraction_deviance_explained",
]

RIDGE_ALPHA = 1e-3  # alpha used to anchor the lambda grid of a pure ridge path


def softmax(eta):
    """Softmax along the last axis, shifted by the max for stability."""
    eta = np.asarray(eta, dtype=float)
    z = np.exp(eta - eta.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _probs_from_free(eta2):
    # eta2: (n, 2) linear predictors of classes 1 and 2; class 3 is fixed at 0
    m = np.maximum(eta2.max(axis=1), 0.0)
    e = np.exp(eta2 - m[:, None])
    e3 = np.exp(-m)
    s = e.sum(axis=1) + e3
    return np.column_stack([e / s[:, None], e3 / s])


@dataclass(frozen=True, eq=False)
class DesignProblem:
    """Regression inputs: embeddings ``X`` (n x p) and outcome counts ``Y`` (n x 3).

    ``row_scale`` multiplies each row's counts in the likelihood (exit-poll
    rows can be down-weighted).  Rows with ``holdout`` False are always kept
    in the training part of every cross-validation fold.
    """

    X: np.ndarray
    Y: np.ndarray
    layout: FeatureLayout
    row_scale: np.ndarray | None = None
    holdout: np.ndarray | None = None
    row_ids: tuple[str, ...] | None = None
    kinds: tuple[RowKind, ...] | None = None
    columns: np.ndarray | None = None  # source columns when restricted

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        n = X.shape[0]
        if X.ndim != 2 or X.shape[1] != self.layout.n_features:
            raise ValidationError("X width does not match the layout")
        if Y.shape != (n, 3):
            raise ValidationError("Y must be n x 3")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValidationError("X and Y must be finite")
        if np.any(Y < 0) or np.any(Y.sum(axis=1) <= 0):
            raise ValidationError("counts must be nonnegative with positive totals")
        scale = np.ones(n) if self.row_scale is None else np.asarray(self.row_scale, dtype=float)
        if scale.shape != (n,) or np.any(scale <= 0) or not np.all(np.isfinite(scale)):
            raise ValidationError("row_scale must be positive and finite")
        hold = np.ones(n, bool) if self.holdout is None else np.asarray(self.holdout, bool)
        ids = tuple(str(i) for i in range(n)) if self.row_ids is None else tuple(self.row_ids)
        kinds = (RowKind.TRUE_OUTCOME,) * n if self.kinds is None else tuple(self.kinds)
        if len(ids) != n or len(kinds) != n or hold.shape != (n,):
            raise ValidationError("row metadata length mismatch")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "row_scale", scale)
        object.__setattr__(self, "holdout", hold)
        object.__setattr__(self, "row_ids", ids)
        object.__setattr__(self, "kinds", kinds)

    @classmethod
    def from_embeddings(cls, emb: EmbeddingMatrix, table: RegionTable,
                        exit_poll_weight: float = 1.0) -> "DesignProblem":
        """Align embedding rows with outcome rows by row id.

        Exit-poll rows get likelihood weight ``exit_poll_weight`` and are never
        held out in cross-validation.
        """
        pos = {r: i for i, r in enumerate(emb.row_ids)}
        missing = [r.row_id for r in table.rows if r.row_id not in pos]
        if missing:
            raise ValidationError(f"no embedding for rows {missing[:5]}")
        idx = np.array([pos[r.row_id] for r in table.rows], dtype=int)
        kinds = tuple(r.kind for r in table.rows)
        exit_rows = np.array([k == RowKind.EXIT_POLL for k in kinds])
        scale = np.where(exit_rows, exit_poll_weight, 1.0)
        return cls(emb.rows[idx], table.counts(), emb.layout, scale, ~exit_rows,
                   tuple(table.row_ids), kinds)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def counts(self) -> np.ndarray:
        """Likelihood counts (row_scale applied)."""
        return self.Y * self.row_scale[:, None]

    def take(self, rows) -> "DesignProblem":
        rows = np.asarray(rows)
        return DesignProblem(self.X[rows], self.Y[rows], self.layout, self.row_scale[rows],
                             self.holdout[rows], tuple(np.asarray(self.row_ids, dtype=object)[rows]),
                             tuple(np.asarray(self.kinds, dtype=object)[rows]), self.columns)

    def restrict(self, names: Sequence[str]) -> "DesignProblem":
        """Keep only the feature groups ``names``."""
        layout, cols = self.layout.subset(names)
        source = cols if self.columns is None else self.columns[cols]
        return DesignProblem(self.X[:, cols], self.Y, layout, self.row_scale, self.holdout,
                             self.row_ids, self.kinds, source)


@dataclass(frozen=True, eq=False)
class ModelFit:
    """Fitted coefficients in reference-class form (column 3 and intercept 3 are zero)."""

    beta: np.ndarray
    intercepts: np.ndarray
    alpha: float
    lam: float
    layout: FeatureLayout
    lambda_path: tuple[float, ...] = ()
    cv_table: tuple["CVEntry", ...] = ()
    columns: np.ndarray | None = None
    converged: bool = True
    n_sweeps: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        icpt = np.asarray(self.intercepts, dtype=float)
        if beta.shape != (self.layout.n_features, 3) or icpt.shape != (3,):
            raise ValueError("beta must be p x 3 and intercepts length 3")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "intercepts", icpt)
        object.__setattr__(self, "lambda_path", tuple(float(v) for v in self.lambda_path))
        if self.columns is not None:
            object.__setattr__(self, "columns", np.asarray(self.columns, dtype=int))

    @property
    def active_groups(self) -> list[str]:
        return [g.name for g in self.layout.groups if np.any(self.beta[g.start:g.end] != 0)]

    @property
    def nonzero_groups(self) -> int:
        return len(self.active_groups)

    @property
    def nonzero_features(self) -> int:
        return int(np.count_nonzero(np.any(self.beta != 0, axis=1)))

    def select(self, mu) -> np.ndarray:
        """Pick this fit's columns out of full-width embeddings."""
        mu = np.asarray(mu, dtype=float)
        return mu if self.columns is None else mu[..., self.columns]

    def linear_predictor(self, mu) -> np.ndarray:
        return self.intercepts + self.select(mu) @ self.beta

    def predict_proba(self, mu) -> np.ndarray:
        """Class probabilities for embeddings ``mu`` (full width or restricted width)."""
        mu = np.asarray(mu, dtype=float)
        if mu.shape[-1] != self.layout.n_features:
            mu = self.select(mu)
        return softmax(self.intercepts + mu @ self.beta)


@dataclass(frozen=True)
class CVEntry:
    alpha: float
    lam: float
    mean_deviance: float
    se: float
    converged: bool = True


@dataclass(frozen=True)
class CVResult:
    best_alpha: float
    best_lambda: float
    lambda_1se: float
    table: tuple[CVEntry, ...]
    folds: np.ndarray

    @property
    def best(self) -> CVEntry:
        return min(self.table, key=lambda e: e.mean_deviance)


# -- likelihood ---------------------------------------------------------------


def _split(beta, intercepts):
    beta = np.asarray(beta, dtype=float)
    intercepts = np.asarray(intercepts, dtype=float)
    if beta.shape[-1] == 3:
        return beta[:, :2] - beta[:, 2:3], intercepts[:2] - intercepts[2]
    return beta, intercepts


def probabilities(beta, intercepts, X) -> np.ndarray:
    B, a = _split(beta, intercepts)
    return _probs_from_free(a + np.asarray(X, dtype=float) @ B)


def _xlogy(y, p):
    out = np.zeros_like(y)
    pos = y > 0
    out[pos] = y[pos] * np.log(p[pos])
    return out


def nll(beta, intercepts, problem: DesignProblem) -> float:
    """Count-normalized negative log-likelihood (multinomial constants dropped)."""
    C = problem.counts
    P = probabilities(beta, intercepts, problem.X)
    return float(-_xlogy(C, P).sum() / C.sum())


def nll_gradient(beta, intercepts, problem: DesignProblem):
    """Gradient of :func:`nll` w.r.t. the free (p x 2) coefficients and 2 intercepts."""
    C = problem.counts
    N = C.sum()
    P = probabilities(beta, intercepts, problem.X)
    R = (P[:, :2] * C.sum(axis=1, keepdims=True) - C[:, :2]) / N
    return problem.X.T @ R, R.sum(axis=0)


def deviance(beta, intercepts, problem: DesignProblem) -> float:
    """Multinomial deviance per unit count.

    ``2 * sum y log(y / (t p))`` over cells, divided by the total count;
    zero-count cells contribute nothing.
    """
    C = problem.counts
    P = probabilities(beta, intercepts, problem.X)
    return _deviance_from_probs(C, P)


def _deviance_from_probs(C, P) -> float:
    t = C.sum(axis=1, keepdims=True)
    sat = _xlogy(C, C / t)
    val = 2.0 * (sat - _xlogy(C, P)).sum() / C.sum()
    return float(max(val, 0.0))


def null_intercepts(problem: DesignProblem) -> np.ndarray:
    """Closed-form intercept-only MLE: log pooled shares relative to class 3."""
    pooled = problem.counts.sum(axis=0)
    if np.any(pooled <= 0):
        raise ValidationError("every outcome class needs a positive pooled count")
    return np.log(pooled / pooled[2])


def null_fit(problem: DesignProblem) -> ModelFit:
    return ModelFit(np.zeros((problem.layout.n_features, 3)), null_intercepts(problem),
                    1.0, math.inf, problem.layout, columns=problem.columns)


def _group_weights(layout: FeatureLayout) -> np.ndarray:
    return np.sqrt(3.0 * layout.spans())


def lambda_max(problem: DesignProblem, alpha: float) -> float:
    """Smallest lambda at which every group is zero at the optimum."""
    if alpha <= 0:
        raise AlphaZero("lambda_max is undefined for a pure ridge penalty")
    a0 = null_intercepts(problem)
    B0 = np.zeros((problem.layout.n_features, 3))
    G, _ = nll_gradient(B0, a0, problem)
    wts = _group_weights(problem.layout)
    norms = np.array([np.linalg.norm(G[g.start:g.end]) for g in problem.layout.groups])
    lmax = float(np.max(norms / wts)) / alpha if len(norms) else 0.0
    # slack so the boundary lambda thresholds every group despite rounding
    return lmax * (1.0 + 1e-9) if lmax > 0 else 1e-12


def penalty(B, layout: FeatureLayout, lam: float, alpha: float) -> float:
    B = np.asarray(B)
    ridge = 0.5 * (1.0 - alpha) * float(np.sum(B * B))
    wts = _group_weights(layout)
    lasso = alpha * sum(w * np.linalg.norm(B[g.start:g.end]) for w, g in zip(wts, layout.groups))
    return lam * (ridge + lasso)


def objective(beta, intercepts, problem: DesignProblem, lam: float, alpha: float) -> float:
    B, _ = _split(beta, intercepts)
    return nll(beta, intercepts, problem) + penalty(B, problem.layout, lam, alpha)


# -- block majorize-minimize solver -----------------------------------------------


class _Workspace:
    """Per-problem quantities reused across the lambda path.

    Each group's centered columns are rotated onto the eigenvectors of the
    group's weighted Gram matrix.  Group norms and the ridge term are
    rotation invariant, so the solver works in rotated coordinates where the
    group majorizer is diagonal; directions with (numerically) zero
    curvature are dropped since they never move the likelihood.
    """

    def __init__(self, problem: DesignProblem):
        C = problem.counts
        self.N = C.sum()
        self.t = C.sum(axis=1) / self.N  # row weights, sum to 1
        self.C2 = np.ascontiguousarray(C[:, :2] / self.N)
        self.xbar = self.t @ problem.X
        Xc = problem.X - self.xbar
        self.groups = problem.layout.groups
        self.wts = _group_weights(problem.layout)
        self.p = problem.layout.n_features
        self.bases, cols, curv, starts, ends = [], [], [], [], []
        pos = 0
        for g in self.groups:
            Xg = Xc[:, g.start:g.end]
            H = (Xg * self.t[:, None]).T @ Xg
            evals, evecs = np.linalg.eigh(H)
            top = evals[-1] if len(evals) else 0.0
            keep = evals > max(top, 0.0) * 1e-12 if top > 0 else np.zeros(len(evals), bool)
            V = evecs[:, keep]
            self.bases.append(V)
            cols.append(Xg @ V)
            curv.append(0.5 * evals[keep])
            starts.append(pos)
            pos += int(keep.sum())
            ends.append(pos)
        self.Xr = np.ascontiguousarray(np.hstack(cols) if cols else np.zeros((len(C), 0)))
        self.curv = np.concatenate(curv) if curv else np.zeros(0)
        self.starts = np.array(starts, dtype=np.int64)
        self.ends = np.array(ends, dtype=np.int64)

    def rotate(self, B):
        out = np.zeros((self.Xr.shape[1], 2))
        for g, V, s, e in zip(self.groups, self.bases, self.starts, self.ends):
            out[s:e] = V.T @ B[g.start:g.end]
        return out

    def unrotate(self, Br):
        B = np.zeros((self.p, 2))
        for g, V, s, e in zip(self.groups, self.bases, self.starts, self.ends):
            B[g.start:g.end] = V @ Br[s:e]
        return B

    def smooth(self, eta):
        P = _probs_from_free(eta)
        return float(-(_xlogy(self.C2, P[:, :2]).sum()
                       + _xlogy(self.t - self.C2.sum(axis=1), P[:, 2]).sum()))


@njit(cache=True, nogil=True)
def _residual_row(e0, e1, ti, y0, y1):
    m = max(e0, e1, 0.0)
    a = math.exp(e0 - m)
    b = math.exp(e1 - m)
    s = a + b + math.exp(-m)
    return a / s * ti - y0, b / s * ti - y1


@njit(cache=True, nogil=True)
def _group_radius(cn, d, tau):
    """Root r > 0 of sum_j cn_j / (d_j r + tau)^2 = 1 (requires sum cn > tau^2).

    The left side is convex and decreasing in r, so Newton from r = 0 climbs
    monotonically to the root.
    """
    r = 0.0
    for _ in range(200):
        h = 0.0
        dh = 0.0
        for j in range(cn.shape[0]):
            q = d[j] * r + tau
            h += cn[j] / (q * q)
            dh -= 2.0 * cn[j] * d[j] / (q * q * q)
        step = (h - 1.0) / dh
        r_new = r - step
        if r_new <= r or abs(r_new - r) <= 1e-15 * r_new:
            return max(r_new, r)
        r = r_new
    return r


@njit(cache=True, nogil=True)
def _sweep(B, c, eta, Xr, starts, ends, curv, wts, t, C2, ridge, l1, todo, active):
    """One pass over the intercept and the groups in ``todo``; returns max |step|.

    ``B`` holds rotated coefficients; each group minimizes its majorizer
    ``G.d + 1/2 sum_j curv_j |d_j|^2`` plus the penalty exactly.
    """
    n = eta.shape[0]
    delta = 0.0
    g0 = 0.0
    g1 = 0.0
    for i in range(n):
        r0, r1 = _residual_row(eta[i, 0], eta[i, 1], t[i], C2[i, 0], C2[i, 1])
        g0 += r0
        g1 += r1
    # intercept curvature bound: 1/2 with row weights summing to 1
    s0 = -2.0 * g0
    s1 = -2.0 * g1
    c[0] += s0
    c[1] += s1
    for i in range(n):
        eta[i, 0] += s0
        eta[i, 1] += s1
    delta = max(delta, abs(s0), abs(s1))
    R = np.empty((n, 2))
    for k in todo:
        lo = starts[k]
        hi = ends[k]
        w = hi - lo
        if w == 0:
            active[k] = False
            continue
        for i in range(n):
            r0, r1 = _residual_row(eta[i, 0], eta[i, 1], t[i], C2[i, 0], C2[i, 1])
            R[i, 0] = r0
            R[i, 1] = r1
        Z = np.zeros((w, 2))
        for i in range(n):
            for j in range(w):
                x = Xr[i, lo + j]
                Z[j, 0] -= x * R[i, 0]
                Z[j, 1] -= x * R[i, 1]
        cn = np.empty(w)
        d = np.empty(w)
        norm2 = 0.0
        for j in range(w):
            Z[j, 0] += curv[lo + j] * B[lo + j, 0]
            Z[j, 1] += curv[lo + j] * B[lo + j, 1]
            cn[j] = Z[j, 0] ** 2 + Z[j, 1] ** 2
            d[j] = curv[lo + j] + ridge
            norm2 += cn[j]
        tau = l1 * wts[k]
        if math.sqrt(norm2) <= tau:
            shrink_r = -1.0
        elif tau > 0.0:
            shrink_r = _group_radius(cn, d, tau)
        else:
            shrink_r = 0.0
        any_nz = False
        for j in range(w):
            for m in range(2):
                if shrink_r < 0.0:
                    new = 0.0
                elif tau > 0.0:
                    new = Z[j, m] * shrink_r / (d[j] * shrink_r + tau)
                else:
                    new = Z[j, m] / d[j]
                diff = new - B[lo + j, m]
                if diff != 0.0:
                    for i in range(n):
                        eta[i, m] += Xr[i, lo + j] * diff
                    B[lo + j, m] = new
                    delta = max(delta, abs(diff))
                if new != 0.0:
                    any_nz = True
        active[k] = any_nz
    return delta


def _solve(ws: _Workspace, lam, alpha, B, c, tol, max_sweeps, callback=None):
    """Minimize over rotated, centered coordinates; ``c`` is the centered intercept.

    Sweeps alternate between all groups and the active set only; a fit is
    converged once a full sweep moves no coefficient by more than ``tol``
    relative to the coefficient scale.
    """
    B = np.ascontiguousarray(B, dtype=float).copy()
    c = np.asarray(c, dtype=float).copy()
    eta = np.ascontiguousarray(c + ws.Xr @ B)
    ridge = lam * (1.0 - alpha)
    l1 = lam * alpha
    active = np.array([np.any(B[s:e] != 0) for s, e in zip(ws.starts, ws.ends)], dtype=np.bool_)
    everything = np.arange(len(ws.groups), dtype=np.int64)
    full_sweep = True
    sweeps = 0
    change = math.inf

    def obj():
        pen = 0.5 * ridge * float(np.sum(B * B))
        pen += l1 * sum(ws.wts[k] * np.linalg.norm(B[s:e])
                        for k, (s, e) in enumerate(zip(ws.starts, ws.ends)))
        return ws.smooth(eta) + pen

    while sweeps < max_sweeps:
        sweeps += 1
        scale = max(1.0, np.abs(B).max(initial=0.0), np.abs(c).max())
        todo = everything if full_sweep else np.flatnonzero(active).astype(np.int64)
        delta = _sweep(B, c, eta, ws.Xr, ws.starts, ws.ends, ws.curv, ws.wts, ws.t, ws.C2,
                       ridge, l1, todo, active)
        change = delta / scale
        if callback is not None:
            callback(sweeps, obj())
        if change < tol:
            if full_sweep:
                return B, c, sweeps, change, True
            full_sweep = True
        else:
            full_sweep = False
    return B, c, sweeps, change, False


def _to_model(ws: _Workspace, problem, Br, c, alpha, lam, **kw) -> ModelFit:
    B = ws.unrotate(Br)
    a = c - ws.xbar @ B
    beta = np.zeros((ws.p, 3))
    beta[:, :2] = B
    intercepts = np.array([a[0], a[1], 0.0])
    return ModelFit(beta, intercepts, alpha, lam, problem.layout, columns=problem.columns, **kw)


def _start(ws: _Workspace, problem, warm: ModelFit | None):
    if warm is None:
        a0 = null_intercepts(problem)[:2]
        return np.zeros((ws.Xr.shape[1], 2)), a0.copy()
    B, a = _split(warm.beta, warm.intercepts)
    return ws.rotate(B), a + ws.xbar @ B


def fit_lambda(problem: DesignProblem, lam: float, alpha: float, warm: ModelFit | None = None,
               tol: float = 1e-7, max_sweeps: int = 10_000, strict: bool = True,
               callback: Callable[[int, float], None] | None = None,
               _ws: _Workspace | None = None) -> ModelFit:
    """Fit at a single lambda (cold start unless ``warm`` is given).

    ``callback(sweep, objective)`` is invoked after every sweep.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    ws = _ws or _Workspace(problem)
    B, c = _start(ws, problem, warm)
    B, c, sweeps, change, ok = _solve(ws, lam, alpha, B, c, tol, max_sweeps, callback)
    fit = _to_model(ws, problem, B, c, alpha, lam, converged=ok, n_sweeps=sweeps)
    if not ok and strict:
        raise NotConverged(lam, fit, change)
    return fit


def lambda_grid(problem: DesignProblem, alpha: float, n_lambda: int = 100,
                lambda_min_ratio: float | None = None) -> np.ndarray:
    """Log-spaced descending grid from lambda_max down to ``lambda_min_ratio * lambda_max``."""
    if n_lambda < 1:
        raise ValueError("n_lambda must be >= 1")
    if lambda_min_ratio is None:
        lambda_min_ratio = 1e-3 if problem.n > problem.layout.n_features else 1e-2
    if alpha > 0:
        lmax = lambda_max(problem, alpha)
    else:
        lmax = lambda_max(problem, RIDGE_ALPHA)
    if n_lambda == 1:
        return np.array([lmax])
    return np.geomspace(lmax, lmax * lambda_min_ratio, n_lambda)


def fit_path(problem: DesignProblem, alpha: float, n_lambda: int = 100,
             lambda_min_ratio: float | None = None, lambdas: Sequence[float] | None = None,
             tol: float = 1e-7, max_sweeps: int = 10_000, strict: bool = True) -> list[ModelFit]:
    """Warm-started fits along a descending lambda grid.

    With ``strict`` a non-converged lambda raises :class:`NotConverged`;
    otherwise the fit is returned with ``converged=False``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if lambdas is None:
        lambdas = lambda_grid(problem, alpha, n_lambda, lambda_min_ratio)
    lambdas = np.asarray(lambdas, dtype=float)
    ws = _Workspace(problem)
    fits, warm = [], None
    path = tuple(float(v) for v in lambdas)
    for lam in lambdas:
        fit = fit_lambda(problem, float(lam), alpha, warm, tol, max_sweeps, strict, _ws=ws)
        fit = replace(fit, lambda_path=path)
        fits.append(fit)
        warm = fit
    return fits


# -- cross-validation ---------------------------------------------------------------


def assign_folds(problem: DesignProblem, n_folds: int, seed: int) -> np.ndarray:
    """Fold id per row; rows not eligible for holdout get -1."""
    eligible = np.flatnonzero(problem.holdout)
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    if len(eligible) < n_folds:
        raise ValidationError("fewer hold-out rows than folds")
    perm = substream(seed, "folds").permutation(eligible)
    folds = np.full(problem.n, -1, dtype=int)
    folds[perm] = np.arange(len(perm)) % n_folds
    return folds


def cross_validate(problem: DesignProblem, alpha_grid: Sequence[float] = (0.05, 0.5, 1.0),
                   n_lambda: int = 100, lambda_min_ratio: float | None = None,
                   n_folds: int = 10, seed: int = 0, tol: float = 1e-7,
                   max_sweeps: int = 10_000, workers: int = 1) -> CVResult:
    """K-fold CV of held-out deviance per unit count over (alpha, lambda).

    The lambda grid for each alpha comes from the full problem and is shared
    by all folds.  Non-converged fits are kept and flagged in the table.
    """
    folds = assign_folds(problem, n_folds, seed)
    table = []
    for alpha in alpha_grid:
        lambdas = lambda_grid(problem, alpha, n_lambda, lambda_min_ratio)

        def run_fold(k, alpha=alpha, lambdas=lambdas):
            train = problem.take(folds != k)
            test = problem.take(folds == k)
            fits = fit_path(train, alpha, lambdas=lambdas, tol=tol, max_sweeps=max_sweeps,
                            strict=False)
            return ([deviance(f.beta, f.intercepts, test) for f in fits],
                    [f.converged for f in fits])

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run_fold, range(n_folds)))
        else:
            results = [run_fold(k) for k in range(n_folds)]
        dev = np.array([r[0] for r in results])
        conv = np.array([r[1] for r in results]).all(axis=0)
        mean = dev.mean(axis=0)
        se = dev.std(axis=0, ddof=1) / math.sqrt(n_folds)
        for j, lam in enumerate(lambdas):
            table.append(CVEntry(float(alpha), float(lam), float(mean[j]), float(se[j]),
                                 bool(conv[j])))
    best = min(table, key=lambda e: e.mean_deviance)
    same = [e for e in table if e.alpha == best.alpha]
    lam_1se = max(e.lam for e in same if e.mean_deviance <= best.mean_deviance + best.se)
    return CVResult(best.alpha, best.lam, lam_1se, tuple(table), folds)


def fit_cv(problem: DesignProblem, alpha_grid: Sequence[float] = (0.05, 0.5, 1.0),
           n_lambda: int = 100, lambda_min_ratio: float | None = None, n_folds: int = 10,
           seed: int = 0, tol: float = 1e-7, max_sweeps: int = 10_000, workers: int = 1,
           use_1se: bool = False) -> ModelFit:
    """Cross-validate, then refit the full-data path at the chosen alpha."""
    cv = cross_validate(problem, alpha_grid, n_lambda, lambda_min_ratio, n_folds, seed, tol,
                        max_sweeps, workers)
    lambdas = [e.lam for e in cv.table if e.alpha == cv.best_alpha]
    target = cv.lambda_1se if use_1se else cv.best_lambda
    # warm-start down the grid only as far as the chosen lambda
    head = [lam for lam in lambdas if lam >= target]
    chosen = fit_path(problem, cv.best_alpha, lambdas=head, tol=tol, max_sweeps=max_sweeps,
                      strict=False)[-1]
    return replace(chosen, lambda_path=tuple(lambdas), cv_table=cv.table,
                   metadata={"lambda_1se": cv.lambda_1se, "n_folds": n_folds, "seed": seed,
                             "best_cv_deviance": cv.best.mean_deviance,
                             "best_cv_se": cv.best.se})


def fraction_deviance_explained(fit: ModelFit, problem: DesignProblem) -> float:
    """``1 - deviance(fit) / deviance(intercept-only fit)``."""
    null = null_intercepts(problem)
    d0 = deviance(np.zeros((problem.layout.n_features, 3)), null, problem)
    d = deviance(fit.beta, fit.intercepts, problem)
    if d0 == 0:
        return 1.0 if d == 0 else -math.inf
    return 1.0 - d / d0
