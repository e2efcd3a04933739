"""Gaussian mixtures fitted by EM, Gaussian-kernel density estimates, and the
per-feature two-sample Kolmogorov-Smirnov statistic used to compare them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.special import logsumexp

from .errors import FormatError, InvalidInput, NumericalError

RIDGE = 1e-6
LOG_2PI = math.log(2.0 * math.pi)
DENSITY_FORMAT = "replaycl-density"
DENSITY_VERSION = 1


def _as_matrix(x, name="X") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise InvalidInput(f"{name} must be a 2-D matrix")
    return x


# ------------------------------------------------------------------------ GMM


@dataclass(frozen=True, eq=False)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    # average log-likelihood of the training data after each E-step
    history: tuple[float, ...] = ()
    # validation score per candidate component count, when chosen by selection
    selection_scores: dict = field(default_factory=dict)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_prob(self, x) -> np.ndarray:
        x = _as_matrix(x)
        if x.shape[1] != self.dim:
            raise InvalidInput(f"X has {x.shape[1]} columns, model has {self.dim}")
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights)
        return logsumexp(_component_log_density(x, self.means, self.covariances) + log_w, axis=1)

    def score(self, x) -> float:
        return gmm_score(self, x)

    def sample(self, count: int, seed) -> np.ndarray:
        return gmm_sample(self, count, seed)


def _cholesky_factors(covs: np.ndarray) -> np.ndarray:
    try:
        return np.stack([cholesky(c, lower=True) for c in covs])
    except LinAlgError as exc:
        raise NumericalError(f"covariance is not positive definite: {exc}") from exc


def _component_log_density(x, means, covs, chols=None) -> np.ndarray:
    n, d = x.shape
    chols = _cholesky_factors(covs) if chols is None else chols
    out = np.empty((n, means.shape[0]))
    for c, (mu, chol) in enumerate(zip(means, chols)):
        sol = solve_triangular(chol, (x - mu).T, lower=True, check_finite=False)
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        out[:, c] = -0.5 * (d * LOG_2PI + log_det + np.sum(sol**2, axis=0))
    return out


def gmm_fit_em(x, n_components: int, seed=0, max_iter: int = 200, tol: float = 1e-4,
               ridge: float = RIDGE) -> GmmModel:
    """Fit a full-covariance mixture by expectation-maximization.

    Initialization: means are distinct training rows picked with ``seed``,
    every covariance is the global sample covariance, weights are uniform.
    Stops when the average log-likelihood improves by less than ``tol`` or
    after ``max_iter`` E-steps. ``ridge`` is added to every covariance
    diagonal in each M-step.
    """
    x = _as_matrix(x)
    n, d = x.shape
    if n_components < 1:
        raise InvalidInput("need at least one component")
    if n < n_components:
        raise InvalidInput(f"{n} rows cannot support {n_components} components")
    rng = np.random.default_rng(seed)
    means = x[np.sort(rng.choice(n, n_components, replace=False))].copy()
    glob = np.atleast_2d(np.cov(x, rowvar=False, bias=True)) + ridge * np.eye(d)
    covs = np.repeat(glob[None], n_components, axis=0)
    weights = np.full(n_components, 1.0 / n_components)
    history: list[float] = []
    eye = np.eye(d)
    for it in range(max_iter):
        log_comp = _component_log_density(x, means, covs) + np.log(weights)
        log_norm = logsumexp(log_comp, axis=1)
        ll = float(log_norm.mean())
        if not math.isfinite(ll):
            raise NumericalError("non-finite log-likelihood during EM")
        converged = bool(history) and ll - history[-1] < tol
        history.append(ll)
        if converged or it == max_iter - 1:
            break
        resp = np.exp(log_comp - log_norm[:, None])
        nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
        weights = nk / nk.sum()
        means = (resp.T @ x) / nk[:, None]
        covs = np.empty((n_components, d, d))
        for c in range(n_components):
            diff = x - means[c]
            cov = (resp[:, c, None] * diff).T @ diff / nk[c]
            covs[c] = 0.5 * (cov + cov.T) + ridge * eye
    return GmmModel(weights, means, covs, tuple(history))


def gmm_score(model: GmmModel, x) -> float:
    """Per-sample average log-likelihood."""
    x = _as_matrix(x)
    if x.shape[0] == 0:
        raise InvalidInput("cannot score an empty matrix")
    return float(model.log_prob(x).mean())


def gmm_select_and_fit(x_train, x_val, c_max: int = 50, seed=0, max_iter: int = 200,
                       tol: float = 1e-4) -> GmmModel:
    """Fit C = 1..c_max components and keep the one with the best validation
    score (smallest C on ties). Candidates with more components than training
    rows are skipped. Fits are deterministic in ``seed``, so the returned
    candidate is identical to a refit at the chosen C."""
    x_train, x_val = _as_matrix(x_train), _as_matrix(x_val)
    if c_max < 1:
        raise InvalidInput("c_max must be at least 1")
    if x_val.shape[0] == 0:
        raise InvalidInput("validation set is empty")
    best, best_score, scores = None, -math.inf, {}
    for c in range(1, min(c_max, x_train.shape[0]) + 1):
        model = gmm_fit_em(x_train, c, seed=seed, max_iter=max_iter, tol=tol)
        s = gmm_score(model, x_val)
        scores[c] = s
        if s > best_score:
            best, best_score = model, s
    if best is None:
        raise InvalidInput("no candidate could be fitted")
    return GmmModel(best.weights, best.means, best.covariances, best.history, scores)


def gmm_sample(model: GmmModel, count: int, seed) -> np.ndarray:
    if count < 0:
        raise InvalidInput("count must be non-negative")
    rng = np.random.default_rng(seed)
    if count == 0:
        return np.empty((0, model.dim))
    comp = rng.choice(model.n_components, size=count, p=model.weights / model.weights.sum())
    z = rng.standard_normal((count, model.dim))
    chols = _cholesky_factors(model.covariances)
    return model.means[comp] + np.einsum("nij,nj->ni", chols[comp], z)


# ------------------------------------------------------------------------ KDE


@dataclass(frozen=True, eq=False)
class KdeModel:
    """Isotropic Gaussian KDE ``N(0, h^2 I)`` around each retained training row.

    The centers are the training rows themselves.
    """

    bandwidth: float
    centers: np.ndarray
    selection_scores: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "centers", _as_matrix(self.centers, "centers"))
        if not self.bandwidth > 0:
            raise InvalidInput("bandwidth must be positive")
        if self.centers.shape[0] == 0:
            raise InvalidInput("KDE needs at least one center")

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def log_density(self, x) -> np.ndarray:
        x = _as_matrix(x)
        if x.shape[1] != self.dim:
            raise InvalidInput(f"X has {x.shape[1]} columns, model has {self.dim}")
        out = np.empty(x.shape[0])
        for rows, d2 in _sq_dist_chunks(x, self.centers):
            out[rows] = _kde_log_density_from_d2(d2, self.bandwidth, self.dim)
        return out

    def sample(self, count: int, seed) -> np.ndarray:
        return kde_sample(self, count, seed)


def _sq_dist_chunks(x, centers, budget: int = 2_000_000):
    c_sq = np.sum(centers**2, axis=1)
    step = max(1, budget // max(1, centers.shape[0]))
    for start in range(0, x.shape[0], step):
        xs = x[start:start + step]
        d2 = np.sum(xs**2, axis=1)[:, None] + c_sq[None, :] - 2.0 * xs @ centers.T
        yield slice(start, start + xs.shape[0]), np.maximum(d2, 0.0)


def _kde_log_density_from_d2(d2, h, d) -> np.ndarray:
    n = d2.shape[1]
    return logsumexp(-0.5 * d2 / (h * h), axis=1) - math.log(n) - 0.5 * d * (LOG_2PI + 2.0 * math.log(h))


def kde_log_likelihood(model: KdeModel, x) -> float:
    """Total (summed) log-likelihood of the rows of ``x``."""
    return float(model.log_density(x).sum())


def bandwidth_grid(h_max: float, step: float = 0.05) -> list[float]:
    count = int(math.floor(h_max / step + 1e-9))
    return [round(step * k, 10) for k in range(1, count + 1)]


def kde_select_and_fit(x_train, x_val, h_max: float = 0.5) -> KdeModel:
    """Pick the bandwidth in {0.05, 0.10, ..., h_max} maximizing the total
    validation log-likelihood (smallest h on ties)."""
    x_train, x_val = _as_matrix(x_train), _as_matrix(x_val)
    if x_train.shape[0] == 0 or x_val.shape[0] == 0:
        raise InvalidInput("train and validation sets must be non-empty")
    if x_val.shape[1] != x_train.shape[1]:
        raise InvalidInput("train and validation widths differ")
    grid = bandwidth_grid(h_max)
    if not grid:
        raise InvalidInput("h_max must be at least 0.05")
    totals = np.zeros(len(grid))
    for _, d2 in _sq_dist_chunks(x_val, x_train):
        for i, h in enumerate(grid):
            totals[i] += _kde_log_density_from_d2(d2, h, x_train.shape[1]).sum()
    best = int(np.argmax(totals))
    return KdeModel(grid[best], x_train, dict(zip(grid, totals.tolist())))


def kde_sample(model: KdeModel, count: int, seed) -> np.ndarray:
    if count < 0:
        raise InvalidInput("count must be non-negative")
    rng = np.random.default_rng(seed)
    if count == 0:
        return np.empty((0, model.dim))
    idx = rng.integers(model.centers.shape[0], size=count)
    return model.centers[idx] + model.bandwidth * rng.standard_normal((count, model.dim))


# ------------------------------------------------------------------------- KS


@dataclass(frozen=True, eq=False)
class KsReport:
    per_feature_statistics: np.ndarray
    aggregate: float


def ks_two_sample(a, b) -> KsReport:
    """Per-feature supremum distance between the empirical CDFs of ``a`` and
    ``b``; ``aggregate`` is the mean over features."""
    a, b = _as_matrix(a, "A"), _as_matrix(b, "B")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InvalidInput("KS needs non-empty samples")
    if a.shape[1] != b.shape[1]:
        raise InvalidInput(f"sample widths differ: {a.shape[1]} vs {b.shape[1]}")
    stats = np.empty(a.shape[1])
    for j in range(a.shape[1]):
        sa, sb = np.sort(a[:, j]), np.sort(b[:, j])
        grid = np.concatenate([sa, sb])
        # integer counts, one division: the statistic is correctly rounded
        cnt_a = np.searchsorted(sa, grid, side="right").astype(np.int64)
        cnt_b = np.searchsorted(sb, grid, side="right").astype(np.int64)
        stats[j] = np.max(np.abs(cnt_a * sb.size - cnt_b * sa.size)) / (sa.size * sb.size)
    return KsReport(stats, float(stats.mean()))


# ---------------------------------------------------------------- persistence


def density_to_dict(model: GmmModel | KdeModel) -> dict:
    """Versioned JSON-ready form. KDE checkpoints embed every training row."""
    if isinstance(model, GmmModel):
        return {
            "format": DENSITY_FORMAT, "version": DENSITY_VERSION, "kind": "gmm", "D": model.dim,
            "weights": model.weights.tolist(), "means": model.means.tolist(),
            "covariances": model.covariances.tolist(),
        }
    return {
        "format": DENSITY_FORMAT, "version": DENSITY_VERSION, "kind": "kde", "D": model.dim,
        "bandwidth": model.bandwidth, "centers": model.centers.tolist(),
    }


def density_from_dict(d: dict) -> GmmModel | KdeModel:
    try:
        if d.get("format") != DENSITY_FORMAT or d.get("version") != DENSITY_VERSION:
            raise FormatError(f"unsupported density checkpoint {d.get('format')!r} v{d.get('version')!r}")
        dim = int(d["D"])
        if d["kind"] == "gmm":
            w = np.array(d["weights"], dtype=np.float64)
            mu = np.array(d["means"], dtype=np.float64).reshape(len(w), dim)
            cov = np.array(d["covariances"], dtype=np.float64).reshape(len(w), dim, dim)
            return GmmModel(w, mu, cov)
        if d["kind"] == "kde":
            return KdeModel(float(d["bandwidth"]), np.array(d["centers"], dtype=np.float64).reshape(-1, dim))
        raise FormatError(f"unknown density kind {d['kind']!r}")
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"corrupt density checkpoint: {exc}") from exc
