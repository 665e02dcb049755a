"""Virtual experiments, Gaussian likelihood and Metropolis-Hastings sampling over xi.

The unknowns are the KLE coordinates ``xi`` with a standard normal prior.
Observations are nodal temperatures and humidities at a few probes and time
steps, ordered field first (temperature, then humidity), then probe, then
time.  Every log density drops its normalising constant; acceptance only
depends on differences, so nothing is lost.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.stats import gaussian_kde

from .fem.mesh import EXTERIOR, INTERIOR_SIDE, Mesh
from .fem.timestepping import StepFailure, run_simulation
from .coefficients import CoefficientError
from .random_field import realize_fields

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- observations
def default_probes(mesh: Mesh, count: int = 14, ncols: int = 7, nrows: int = 2) -> np.ndarray:
    """Probe nodes away from the loaded sides.

    On a structured grid with enough free columns and rows the probes sit on
    a regular ``ncols x nrows`` sub-lattice; otherwise ``count`` free nodes
    are picked at evenly spaced positions in index order.
    """
    free = np.flatnonzero((mesh.tags != EXTERIOR) & (mesh.tags != INTERIOR_SIDE))
    if count > len(free):
        raise ValueError(f"only {len(free)} unloaded nodes for {count} probes")
    xs = np.unique(np.round(mesh.nodes[free, 0], 12))
    ys = np.unique(np.round(mesh.nodes[free, 1], 12))
    if ncols * nrows == count and len(xs) >= ncols and len(ys) >= nrows + 2:
        cols = xs[np.round(np.linspace(0, len(xs) - 1, ncols)).astype(int)]
        # keep rows off the insulated edges when possible
        inner = ys[1:-1]
        rows = inner[np.round(np.linspace(0, len(inner) - 1, nrows)).astype(int)]
        probes = [mesh.nearest_node((x, y)) for y in rows for x in cols]
        if len(set(probes)) == count:
            return np.array(probes)
    pick = np.round(np.linspace(0, len(free) - 1, count)).astype(int)
    return free[pick]


def default_times(steps: int) -> np.ndarray:
    """Step indices near one third, two thirds and the end of the horizon."""
    last = steps - 1
    return np.array([round(last / 3), round(2 * last / 3), last])


def observation_columns(n_nodes: int, probes, times) -> tuple[np.ndarray, np.ndarray]:
    """Time-step and dof index arrays, each of length ``2 * probes * times``."""
    probes = np.asarray(probes)
    times = np.asarray(times)
    field_off = np.array([0, n_nodes])
    dof = (field_off[:, None, None] + probes[None, :, None] + 0 * times[None, None, :]).ravel()
    step = np.broadcast_to(times[None, None, :], (2, len(probes), len(times))).ravel()
    return step, dof


def observation_operator(states, probes, times) -> np.ndarray:
    """Extract observations from states of shape (..., T, 2N)."""
    states = np.asarray(states)
    n_nodes = states.shape[-1] // 2
    probes = np.asarray(probes)
    times = np.asarray(times)
    if probes.min() < 0 or probes.max() >= n_nodes:
        raise IndexError("probe node out of range")
    if times.min() < 0 or times.max() >= states.shape[-2]:
        raise IndexError("observation time out of range")
    step, dof = observation_columns(n_nodes, probes, times)
    return states[..., step, dof]


@dataclass(frozen=True)
class NoiseModel:
    sigma_theta: float = 0.2
    sigma_phi: float = 0.02
    replicates: int = 100

    def __post_init__(self):
        if self.sigma_theta <= 0 or self.sigma_phi <= 0:
            raise ValueError("noise standard deviations must be positive")

    def sigmas(self, n_per_field: int) -> np.ndarray:
        return np.concatenate([np.full(n_per_field, self.sigma_theta), np.full(n_per_field, self.sigma_phi)])


@dataclass
class ObservationSet:
    probes: np.ndarray
    times: np.ndarray
    values: np.ndarray
    cov: np.ndarray
    truth_xi: np.ndarray | None = None
    noise_free: np.ndarray | None = None

    def __post_init__(self):
        n = 2 * len(self.probes) * len(self.times)
        if self.values.shape != (n,) or self.cov.shape != (n, n):
            raise ValueError(f"expected {n} observations and an {n}x{n} covariance")
        if not np.allclose(self.cov, self.cov.T):
            raise ValueError("observation covariance must be symmetric")

    @property
    def size(self) -> int:
        return len(self.values)


def virtual_experiment(truth_xi, forward, probes, times, noise: NoiseModel | None = None,
                       rng: np.random.Generator | None = None, covariance: str = "diagonal") -> ObservationSet:
    """Synthetic data from ``forward(truth_xi)``, which returns (T, 2N) states.

    ``noise=None`` gives exact data.  ``covariance="empirical"`` estimates the
    covariance from ``noise.replicates`` noise draws instead of the diagonal.
    """
    truth_xi = np.asarray(truth_xi, float)
    y = observation_operator(forward(truth_xi), probes, times)
    n = len(y)
    if noise is None:
        return ObservationSet(np.asarray(probes), np.asarray(times), y.copy(), np.eye(n), truth_xi, y)
    rng = rng or np.random.default_rng()
    sig = noise.sigmas(n // 2)
    z = y + sig * rng.standard_normal(n)
    if covariance == "diagonal":
        cov = np.diag(sig**2)
    elif covariance == "empirical":
        reps = sig * rng.standard_normal((noise.replicates, n))
        cov = np.cov(reps, rowvar=False)
        cov = 0.5 * (cov + cov.T)
    else:
        raise ValueError(f"unknown covariance kind {covariance!r}")
    return ObservationSet(np.asarray(probes), np.asarray(times), z, cov, truth_xi, y)


# ------------------------------------------------------------ densities
class GaussianLikelihood:
    """``-0.5 (y - z)^T C^-1 (y - z)``; the covariance is factorised once."""

    def __init__(self, obs: ObservationSet):
        self.obs = obs
        self.chol = cho_factor(obs.cov, lower=True)

    def __call__(self, y) -> np.ndarray | float:
        r = np.asarray(y, float) - self.obs.values
        if r.ndim == 1:
            return float(-0.5 * r @ cho_solve(self.chol, r))
        w = solve_triangular(self.chol[0], r.T, lower=True)
        return -0.5 * np.sum(w * w, axis=0)


def log_prior(xi) -> float:
    xi = np.asarray(xi, float)
    return float(-0.5 * xi @ xi)


def log_likelihood(xi, forward, obs: ObservationSet) -> float:
    """Gaussian log likelihood of ``forward(xi)`` (observation vector); -inf on solver failure."""
    try:
        y = forward(xi)
    except (StepFailure, CoefficientError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.debug("forward failure at xi=%s: %s", xi, exc)
        return -math.inf
    if not np.all(np.isfinite(y)):
        return -math.inf
    return GaussianLikelihood(obs)(y)


class Posterior:
    """Callable log posterior with a cached likelihood factorisation.

    With ``obs=None`` it is the prior.  Calls return ``(logpost, y)`` so the
    predicted observations can be stored alongside the chain.
    """

    def __init__(self, forward, obs: ObservationSet | None):
        self.forward = forward
        self.obs = obs
        self.likelihood = GaussianLikelihood(obs) if obs is not None else None

    def __call__(self, xi):
        lp = log_prior(xi)
        if self.likelihood is None:
            return lp, None
        try:
            y = self.forward(xi)
        except (StepFailure, CoefficientError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.debug("forward failure at xi=%s: %s", xi, exc)
            return -math.inf, None
        if not np.all(np.isfinite(y)):
            return -math.inf, None
        return lp + self.likelihood(y), y


def log_posterior(xi, forward, obs: ObservationSet | None) -> float:
    return Posterior(forward, obs)(xi)[0]


# ------------------------------------------------------------ forward models
class FEForward:
    """Full finite element run mapped to the observation vector."""

    def __init__(self, disc, kle, specs, ti, probes, times, settings=None):
        self.disc, self.kle, self.specs, self.ti = disc, kle, specs, ti
        self.probes = np.asarray(probes)
        self.times = np.asarray(times)
        self.settings = settings

    def states(self, xi):
        params = realize_fields(self.kle, self.specs, xi)
        kwargs = {} if self.settings is None else {"settings": self.settings}
        return run_simulation(self.disc, params, self.ti, **kwargs).states

    def __call__(self, xi):
        return observation_operator(self.states(xi), self.probes, self.times)


class SurrogateForward:
    """Polynomial chaos surrogate evaluated only at the observed entries."""

    def __init__(self, pce, probes, times):
        self.pce = pce
        self.probes = np.asarray(probes)
        self.times = np.asarray(times)
        n_nodes = pce.coeffs.shape[-1] // 2
        step, dof = observation_columns(n_nodes, self.probes, self.times)
        # (R, n_obs) block, so one evaluation is a single small matrix product
        self.block = np.ascontiguousarray(pce.coeffs[step, :, dof].T)

    def __call__(self, xi):
        return self.pce.basis_values(xi) @ self.block


# ------------------------------------------------------------ sampling
@dataclass
class Chain:
    samples: np.ndarray  # (n, M)
    logpost: np.ndarray  # (n,)
    accepted: np.ndarray  # (n,) bool
    proposal_scale: float
    seed: int | None = None
    aux: np.ndarray | None = None  # (n, k) stored predictions
    seconds_per_sample: float = float("nan")
    warmup: int = 0

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepted.mean()) if len(self.accepted) else float("nan")

    def after_burn_in(self, fraction: float = 0.1) -> np.ndarray:
        return self.samples[int(round(fraction * len(self.samples))):]


def metropolis_hastings(log_target, x0, n_samples: int, proposal_scale: float = 0.5, seed: int | None = 0,
                        warmup: int = 0, target_rate=(0.2, 0.4), store_aux: bool = False) -> Chain:
    """Gaussian random-walk Metropolis-Hastings.

    ``log_target(x)`` returns a float or a ``(float, aux)`` pair.  During
    ``warmup`` extra iterations the scale is adapted in blocks of 50 towards
    ``target_rate``; those iterations are discarded.  A proposal increment
    and a uniform are drawn at every iteration regardless of the outcome,
    so chains with equal seeds consume identical random numbers.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    x = np.array(x0, dtype=float)
    dim = x.size

    def evaluate(point):
        out = log_target(point)
        if isinstance(out, tuple):
            return float(out[0]), out[1]
        return float(out), None

    lp, aux = evaluate(x)
    if not math.isfinite(lp):
        raise ValueError("starting point has zero posterior density")
    scale = float(proposal_scale)
    block_acc = 0
    for i in range(warmup):
        prop = x + scale * rng.standard_normal(dim)
        u = rng.random()
        lq, aq = evaluate(prop)
        if math.log(u) < lq - lp:
            x, lp, aux = prop, lq, aq
            block_acc += 1
        if (i + 1) % 50 == 0:
            rate = block_acc / 50
            if rate < target_rate[0]:
                scale *= 0.7
            elif rate > target_rate[1]:
                scale *= 1.3
            block_acc = 0

    samples = np.empty((n_samples, dim))
    lps = np.empty(n_samples)
    acc = np.zeros(n_samples, dtype=bool)
    auxes = [] if store_aux else None
    start = time.perf_counter()
    for i in range(n_samples):
        prop = x + scale * rng.standard_normal(dim)
        u = rng.random()
        lq, aq = evaluate(prop)
        if math.log(u) < lq - lp:
            x, lp, aux = prop, lq, aq
            acc[i] = True
        samples[i] = x
        lps[i] = lp
        if store_aux:
            auxes.append(aux)
    elapsed = time.perf_counter() - start
    aux_arr = None
    if store_aux and all(a is not None for a in auxes):
        aux_arr = np.array(auxes)
    return Chain(samples, lps, acc, scale, seed, aux_arr, elapsed / n_samples, warmup)


def integrated_autocorrelation_time(x, c: float = 5.0) -> float:
    """Autocorrelation time with an automatic window (smallest W with W >= c tau)."""
    x = np.asarray(x, float)
    n = len(x)
    x = x - x.mean()
    if not np.any(x):
        return 1.0
    f = np.fft.rfft(x, n=2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n]
    acf /= acf[0]
    tau = 2.0 * np.cumsum(acf) - 1.0
    window = np.arange(n) >= c * tau
    m = int(np.argmax(window)) if window.any() else n - 1
    return float(max(tau[m], 1.0))


def effective_sample_size(x) -> float:
    return len(x) / integrated_autocorrelation_time(x)


# ------------------------------------------------------------ pushforward
@dataclass
class DensityTable:
    label: str
    grid: np.ndarray
    density: np.ndarray
    samples: int
    degenerate: bool = False


def kde_density(values, label: str = "", points: int = 200) -> DensityTable:
    """Gaussian kernel density with Silverman's bandwidth on a padded grid.

    Constant input produces a degenerate spike (single grid point, infinite density).
    """
    values = np.asarray(values, float).ravel()
    if len(values) == 0:
        raise ValueError("cannot estimate a density from an empty sample")
    spread = values.std()
    if spread == 0 or len(values) < 2:
        return DensityTable(label, np.array([values[0]]), np.array([np.inf]), len(values), True)
    kde = gaussian_kde(values, bw_method="silverman")
    bw = spread * kde.factor
    grid = np.linspace(values.min() - 4 * bw, values.max() + 4 * bw, points)
    return DensityTable(label, grid, kde(grid), len(values))


def pushforward(chain: Chain, kle, specs, response=None, elements=(), parameters=(), nodes_steps=(),
                burn_in: float = 0.1, points: int = 200) -> list[DensityTable]:
    """Density tables of xi marginals, parameter values and responses over a chain.

    ``elements`` x ``parameters`` select parameter-field entries; ``nodes_steps``
    are ``(dof, step)`` pairs evaluated with ``response(xi_batch)``, which must
    return states of shape (B, T, 2N).
    """
    xs = chain.after_burn_in(burn_in)
    if len(xs) == 0:
        raise ValueError("chain is empty after burn-in")
    tables = [kde_density(xs[:, k], f"xi_{k + 1}", points) for k in range(xs.shape[1])]
    if elements and parameters:
        fields = realize_fields(kle, specs, xs)
        for name in parameters:
            vals = getattr(fields, name)
            for e in elements:
                tables.append(kde_density(vals[:, e], f"{name}[element {e}]", points))
    if nodes_steps:
        if response is None:
            raise ValueError("response model required for response densities")
        states = response(xs)
        for dof, step in nodes_steps:
            tables.append(kde_density(states[:, step, dof], f"u[dof {dof}, step {step}]", points))
    return tables


# ------------------------------------------------------------ export
def write_chain_csv(chain: Chain, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = chain.samples.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "accepted", "logpost"] + [f"xi_{k + 1}" for k in range(dim)])
        for i in range(len(chain.samples)):
            w.writerow([i, int(chain.accepted[i]), repr(float(chain.logpost[i]))]
                       + [repr(float(v)) for v in chain.samples[i]])
    return path


def write_density_csv(tables: list[DensityTable], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "value", "density"])
        for t in tables:
            for g, d in zip(t.grid, t.density):
                w.writerow([t.label, repr(float(g)), repr(float(d))])
    return path
