"""Per-pixel block-sparse Bayesian unmixing.

Each coefficient x_i of the abundance vector carries a precision
hyperparameter alpha_i, and the effective prior precision of x_i mixes its
own alpha_i with its index neighbours' through a coupling weight beta.
Alternating posterior computation and hyperparameter re-estimation (EM)
shrinks coefficients that the data does not support while letting coupled
neighbours keep each other alive, which favours estimates whose nonzeros
cluster. Works with the noise variance given, or learns the noise precision
alongside the coefficients through a Gamma hyperprior.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .mixing import (
    AbundanceVector,
    EndmemberMatrix,
    HyperspectralCube,
    PixelSpectrum,
    project_map,
    project_to_constraints,
)

# Floor added to the EM denominator; keeps every updated alpha finite.
EM_DENOMINATOR_FLOOR = 1e-4


@dataclass(frozen=True)
class SolverOptions:
    """Knobs for the EM recovery loop.

    beta couples each coefficient's prior precision to its index neighbours
    (0 disables coupling), k scales the hyperparameter update, epsilon is the
    stopping tolerance on the estimate change, and noise_variance selects the
    noise mode: a positive value runs the known-variance solver, None learns
    the noise precision with a Gamma(c, d) hyperprior.
    """

    beta: float = 1.0
    k: float = 1.0
    epsilon: float = 1e-8
    max_iters: int = 500
    noise_variance: float | None = None
    c: float = 1e-4
    d: float = 1e-4
    asc_postprocess: bool = False

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not np.isfinite(self.k) or self.k <= 0:
            raise ValueError(f"k must be > 0, got {self.k}")
        if not np.isfinite(self.epsilon) or self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.noise_variance is not None:
            if not np.isfinite(self.noise_variance) or self.noise_variance <= 0:
                raise ValueError(
                    f"known noise variance must be > 0, got {self.noise_variance}"
                )
        if self.c <= 0 or self.d <= 0:
            raise ValueError(f"c and d must be > 0, got c={self.c}, d={self.d}")

    @property
    def known_noise(self) -> bool:
        return self.noise_variance is not None


@dataclass(frozen=True)
class SolverState:
    """Snapshot of one in-flight pixel solve."""

    alpha: np.ndarray
    gamma: float
    mu: np.ndarray
    phi: np.ndarray
    iteration: int

    def __post_init__(self):
        if np.any(self.alpha < 0):
            raise ValueError("all hyperparameters alpha_i must be >= 0")
        if not self.gamma > 0:
            raise ValueError(f"noise precision gamma must be > 0, got {self.gamma}")
        if self.phi.shape != (self.alpha.size, self.alpha.size):
            raise ValueError("posterior covariance shape does not match alpha")
        if not np.allclose(self.phi, self.phi.T, rtol=1e-8, atol=1e-12):
            raise ValueError("posterior covariance must be symmetric")
        if np.any(np.diag(self.phi) < 0):
            raise ValueError("posterior covariance diagonal must be non-negative")


@dataclass(frozen=True)
class SolverResult:
    """Outcome of one pixel solve."""

    abundances: AbundanceVector
    raw_estimate: np.ndarray
    iterations_used: int
    converged: bool
    estimated_noise_variance: float | None
    final_alpha: np.ndarray


@dataclass(frozen=True)
class CubeUnmixResult:
    """Scene-level unmixing output plus per-pixel diagnostics."""

    abundances: np.ndarray
    raw_estimates: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    estimated_noise_variance: np.ndarray | None
    failures: tuple[tuple[int, int, str], ...]


def coupled_precision_diagonal(alpha, beta: float) -> np.ndarray:
    """Effective prior precision D_i = alpha_i + beta*alpha_{i-1} + beta*alpha_{i+1}.

    Neighbour terms outside the index range contribute zero. Accepts stacked
    inputs; coupling runs along the last axis.
    """
    a = np.asarray(alpha, dtype=np.float64)
    d = a.copy()
    d[..., 1:] += beta * a[..., :-1]
    d[..., :-1] += beta * a[..., 1:]
    return d


def _spectrum_values(y) -> np.ndarray:
    if isinstance(y, PixelSpectrum):
        return y.values
    return np.asarray(y, dtype=np.float64)


def _posterior_batch(AtA: np.ndarray, AtY: np.ndarray, D: np.ndarray, prec: np.ndarray):
    """Posterior mean/covariance for a stack of pixels sharing one design.

    AtY is (n, q), D is (n, q), prec is (n,). All per-pixel arithmetic is
    independent of the stacking, so a batch of one reproduces a solo solve
    bit for bit.
    """
    q = AtA.shape[0]
    P = np.multiply.outer(prec, AtA)
    idx = np.arange(q)
    P[:, idx, idx] += D
    phi = np.linalg.inv(P)
    phi = 0.5 * (phi + phi.transpose(0, 2, 1))
    mu = prec[:, None] * np.einsum("nij,nj->ni", phi, AtY)
    return mu, phi


def posterior(A, y, D, noise_precision: float):
    """Gaussian posterior of the coefficients given one pixel.

    Returns (mu, phi) with phi = (precision * A^T A + diag(D))^-1 and
    mu = precision * phi A^T y.

    Parameters
    ----------
    A : ndarray, shape (L, q)
        Design restricted to the retained bands.
    y : PixelSpectrum or ndarray, shape (L,)
    D : ndarray, shape (q,)
        Non-negative effective prior precision diagonal.
    noise_precision : float
        Inverse noise variance, > 0.
    """
    A = np.asarray(A, dtype=np.float64)
    yv = _spectrum_values(y)
    Dv = np.asarray(D, dtype=np.float64)
    if noise_precision <= 0:
        raise ValueError(f"noise precision must be > 0, got {noise_precision}")
    if np.any(Dv < 0):
        raise ValueError("prior precision diagonal must be non-negative")
    if A.shape[0] != yv.size or A.shape[1] != Dv.size:
        raise ValueError(
            f"incompatible shapes: A {A.shape}, y ({yv.size},), D ({Dv.size},)"
        )
    AtA = A.T @ A
    AtY = np.einsum("nl,lq->nq", yv[None, :], A)
    prec = np.asarray([noise_precision], dtype=np.float64)
    try:
        mu, phi = _posterior_batch(AtA, AtY, Dv[None, :], prec)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"posterior system is singular: {exc}") from exc
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(phi))):
        raise NumericalError("posterior produced non-finite values")
    return mu[0], phi[0]


def _neighbour_sum(values: np.ndarray) -> np.ndarray:
    """values_i + values_{i-1} + values_{i+1} along the last axis, zero-padded."""
    out = values.copy()
    out[..., 1:] += values[..., :-1]
    out[..., :-1] += values[..., 1:]
    return out


def em_update_alpha(mu, phi, k: float) -> np.ndarray:
    """EM re-estimate of the hyperparameters.

    alpha_i = k / (0.5 * omega_i + 1e-4) with
    omega_i = (mu_i^2 + phi_ii) + (mu_{i+1}^2 + phi_{i+1,i+1})
            + (mu_{i-1}^2 + phi_{i-1,i-1]),
    neighbour terms outside the index range contributing zero. Output is
    strictly positive and finite for any input. Accepts stacked inputs.
    """
    m = np.asarray(mu, dtype=np.float64)
    p = np.asarray(phi, dtype=np.float64)
    diag = np.diagonal(p, axis1=-2, axis2=-1)
    energy = m * m + diag
    omega = _neighbour_sum(energy)
    return k / (0.5 * omega + EM_DENOMINATOR_FLOOR)


def em_update_gamma(
    y,
    A,
    mu,
    phi,
    alpha,
    beta: float,
    gamma_prev: float,
    c: float,
    d: float,
    m: int,
) -> float:
    """EM re-estimate of the noise precision in unknown-noise mode.

    1/gamma_new = (||y - A mu||^2 + gamma_prev^-1 * sum_i rho_i + 2d) / (m + 2c)
    with rho_i = 1 - phi_ii * (alpha_i + beta*alpha_{i-1} + beta*alpha_{i+1})
    and m the number of retained spectral bands.
    """
    if gamma_prev <= 0:
        raise ValueError(f"gamma_prev must be > 0, got {gamma_prev}")
    yv = _spectrum_values(y)
    Av = np.asarray(A, dtype=np.float64)
    muv = np.asarray(mu, dtype=np.float64)
    phiv = np.asarray(phi, dtype=np.float64)
    alphav = np.asarray(alpha, dtype=np.float64)
    resid = yv - Av @ muv
    rho = 1.0 - np.diag(phiv) * coupled_precision_diagonal(alphav, beta)
    new_variance = (resid @ resid + float(np.sum(rho)) / gamma_prev + 2.0 * d) / (m + 2.0 * c)
    if not np.isfinite(new_variance) or new_variance <= 0:
        raise NumericalError(
            f"noise-variance update produced a non-positive value: {new_variance}"
        )
    return 1.0 / new_variance


def estimate_noise_variance_residual(y, A, x_hat) -> float:
    """Residual-based noise variance estimate ||y - A x_hat||^2 / N."""
    yv = _spectrum_values(y)
    Av = np.asarray(A, dtype=np.float64)
    xv = np.asarray(x_hat, dtype=np.float64)
    resid = yv - Av @ xv
    return float(resid @ resid) / yv.size


def _initial_precision(Y: np.ndarray, opts: SolverOptions) -> np.ndarray:
    """Per-pixel starting noise precision."""
    n = Y.shape[0]
    if opts.known_noise:
        return np.full(n, 1.0 / opts.noise_variance)
    # Scale-free start: assume the noise carries ~1% of the signal variance.
    var = np.var(Y, axis=1)
    return 100.0 / np.maximum(var, 1e-12)


class _BatchSolve:
    """Mutable scratch for one EM batch; results land in the output arrays."""

    def __init__(self, n: int, q: int, opts: SolverOptions):
        self.mu = np.full((n, q), np.nan)
        self.alpha = np.full((n, q), np.nan)
        self.noise_variance = np.full(n, np.nan)
        self.iterations = np.zeros(n, dtype=np.int64)
        self.converged = np.zeros(n, dtype=bool)
        self.failures: dict[int, str] = {}


def _em_solve(A: np.ndarray, Y: np.ndarray, opts: SolverOptions) -> _BatchSolve:
    """Run the EM loop for a stack of pixels sharing the design A.

    A is (L, q) with only retained bands; Y is (n, L). Pixels that meet the
    stopping tolerance retire from the active set; pixels whose posterior
    system fails are recorded in ``failures`` and skipped.
    """
    L, q = A.shape
    n = Y.shape[0]
    out = _BatchSolve(n, q, opts)

    AtA = A.T @ A
    AtY = np.einsum("nl,lq->nq", Y, A)

    active = np.arange(n)
    alpha = np.ones((n, q))
    prec = _initial_precision(Y, opts)
    x_old = np.zeros((n, q))

    for iteration in range(1, opts.max_iters + 1):
        D = coupled_precision_diagonal(alpha[active], opts.beta)
        try:
            mu, phi = _posterior_batch(AtA, AtY[active], D, prec[active])
        except np.linalg.LinAlgError:
            active = _drop_singular(out, active, AtA, AtY, D, prec, iteration)
            if active.size == 0:
                break
            D = coupled_precision_diagonal(alpha[active], opts.beta)
            mu, phi = _posterior_batch(AtA, AtY[active], D, prec[active])

        bad = ~(
            np.all(np.isfinite(mu), axis=1)
            & np.all(np.isfinite(phi), axis=(1, 2))
        )
        if np.any(bad):
            for i in active[bad]:
                out.failures[int(i)] = "posterior produced non-finite values"
                out.iterations[i] = iteration
            keep = ~bad
            active, mu, phi, D = active[keep], mu[keep], phi[keep], D[keep]
            if active.size == 0:
                break

        phi_diag = np.diagonal(phi, axis1=1, axis2=2)
        if not opts.known_noise:
            resid = Y[active] - np.einsum("nq,lq->nl", mu, A)
            resid_sq = np.einsum("nl,nl->n", resid, resid)
            rho_sum = np.einsum("nq->n", 1.0 - phi_diag * D)
            new_variance = (resid_sq + rho_sum / prec[active] + 2.0 * opts.d) / (
                L + 2.0 * opts.c
            )
            if np.any(new_variance <= 0) or not np.all(np.isfinite(new_variance)):
                raise NumericalError("noise-variance update produced a non-positive value")
            prec[active] = 1.0 / new_variance
            out.noise_variance[active] = new_variance

        energy = mu * mu + phi_diag
        alpha[active] = opts.k / (0.5 * _neighbour_sum(energy) + EM_DENOMINATOR_FLOOR)

        diff = mu - x_old[active]
        delta = np.sqrt(np.einsum("nq,nq->n", diff, diff))
        x_old[active] = mu
        out.mu[active] = mu
        out.alpha[active] = alpha[active]
        out.iterations[active] = iteration

        done = delta <= opts.epsilon
        if np.any(done):
            out.converged[active[done]] = True
            active = active[~done]
        if active.size == 0:
            break

    return out


def _drop_singular(out, active, AtA, AtY, D, prec, iteration):
    """Identify which pixels of a failed batched inversion are singular."""
    keep = []
    for j, i in enumerate(active):
        try:
            _posterior_batch(AtA, AtY[i : i + 1], D[j : j + 1], prec[i : i + 1])
            keep.append(i)
        except np.linalg.LinAlgError:
            out.failures[int(i)] = "posterior system is singular"
            out.iterations[i] = iteration
    return np.asarray(keep, dtype=np.int64)


def unmix_pixel(
    A: EndmemberMatrix,
    y: PixelSpectrum,
    opts: SolverOptions,
    return_state: bool = False,
):
    """Recover one pixel's abundances.

    Iterates posterior computation and hyperparameter updates (plus the noise
    precision update in unknown-noise mode) until the MAP estimate change
    drops to ``opts.epsilon`` or ``opts.max_iters`` is hit. The raw MAP
    estimate is kept alongside the constraint-projected abundances.

    With ``return_state`` the final :class:`SolverState` is returned as a
    second value.
    """
    yv = _spectrum_values(y)
    if yv.size != A.bands:
        raise ValueError(
            f"spectrum length {yv.size} does not match band count {A.bands}"
        )
    solve = _em_solve(A.values, yv[None, :], opts)
    if 0 in solve.failures:
        raise NumericalError(f"pixel solve failed: {solve.failures[0]}")
    mu = solve.mu[0]
    noise_variance = None if opts.known_noise else float(solve.noise_variance[0])
    result = SolverResult(
        abundances=project_to_constraints(mu, opts.asc_postprocess),
        raw_estimate=mu,
        iterations_used=int(solve.iterations[0]),
        converged=bool(solve.converged[0]),
        estimated_noise_variance=noise_variance,
        final_alpha=solve.alpha[0],
    )
    if not return_state:
        return result
    # Recompute the posterior at the final hyperparameters for the snapshot.
    gamma = 1.0 / opts.noise_variance if opts.known_noise else 1.0 / noise_variance
    D = coupled_precision_diagonal(solve.alpha[0], opts.beta)
    mu_state, phi_state = posterior(A.values, yv, D, gamma)
    state = SolverState(
        alpha=solve.alpha[0],
        gamma=gamma,
        mu=mu_state,
        phi=phi_state,
        iteration=int(solve.iterations[0]),
    )
    return result, state


def unmix_cube(
    cube: HyperspectralCube,
    A: EndmemberMatrix,
    opts: SolverOptions,
    workers: int = 1,
    chunk_size: int | None = None,
) -> CubeUnmixResult:
    """Unmix every pixel of a cube independently.

    The endmember matrix may be given either already restricted to the
    cube's retained bands or at the full band count, in which case the
    cube's band mask is applied to it. Pixels whose solve fails are reported
    in ``failures`` (with the uniform mixture substituted in the projected
    output) instead of aborting the scene. The result is identical for any
    ``workers``/``chunk_size`` split.
    """
    if A.bands == cube.bands:
        A_eff = A.select_bands(cube.band_mask) if cube.effective_bands != cube.bands else A
    elif A.bands == cube.effective_bands:
        A_eff = A
    else:
        raise ValueError(
            f"endmember matrix has {A.bands} bands; cube has {cube.bands} "
            f"({cube.effective_bands} retained)"
        )
    H, W = cube.height, cube.width
    n = H * W
    q = A_eff.endmembers
    Y = cube.masked_data().reshape(n, A_eff.bands)

    if chunk_size is None or chunk_size >= n:
        chunks = [np.arange(n)]
    else:
        chunks = [np.arange(s, min(s + chunk_size, n)) for s in range(0, n, chunk_size)]

    def run(idx: np.ndarray) -> _BatchSolve:
        return _em_solve(A_eff.values, Y[idx], opts)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            solves = list(pool.map(run, chunks))
    else:
        solves = [run(idx) for idx in chunks]

    raw = np.full((n, q), np.nan)
    iterations = np.zeros(n, dtype=np.int64)
    converged = np.zeros(n, dtype=bool)
    noise_variance = np.full(n, np.nan)
    failures = []
    for idx, solve in zip(chunks, solves):
        raw[idx] = solve.mu
        iterations[idx] = solve.iterations
        converged[idx] = solve.converged
        noise_variance[idx] = solve.noise_variance
        for local_i, message in sorted(solve.failures.items()):
            flat = int(idx[local_i])
            failures.append((flat // W, flat % W, message))

    projected = raw.copy()
    failed_flat = [r * W + c for r, c, _ in failures]
    if failed_flat:
        projected[failed_flat] = 1.0 / q  # defined fallback, reported above
    projected = project_map(projected.reshape(H, W, q), opts.asc_postprocess)

    return CubeUnmixResult(
        abundances=projected,
        raw_estimates=raw.reshape(H, W, q),
        iterations=iterations.reshape(H, W),
        converged=converged.reshape(H, W),
        estimated_noise_variance=None if opts.known_noise else noise_variance.reshape(H, W),
        failures=tuple(sorted(failures)),
    )
