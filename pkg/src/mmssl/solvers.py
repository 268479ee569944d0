"""Numerical kernels for multi-modal shared/specific sparse coding.

The model represents a test sample's feature vector in each modality k as
D_k (c_k + s_k), where c_k is a "shared" code pulled toward the cross-modality
mean and s_k is a modality-specific code; both are l1-penalized:

    min  sum_k ||y_k - D_k (c_k + s_k)||^2 + tau ||c_k - mean(c)||^2
         + lam (||c_k||_1 + ||s_k||_1)

The shared codes are updated jointly through an augmented-Lagrangian
relaxation with a closed-form coupled solve; the specific codes through a
proximal-gradient (iterative soft-thresholding) lasso solver.  A brute-force
lasso oracle is included for testing the solvers on small instances.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ModalDictionary",
    "CoefficientPair",
    "AlmState",
    "MmsslConfig",
    "MmsslResult",
    "soft_threshold",
    "largest_gram_eigenvalue",
    "ridge_gram_inverse",
    "coupling_inverse",
    "update_shared_codes",
    "update_relaxed_codes",
    "update_multipliers",
    "solve_lasso",
    "lasso_objective",
    "lasso_bruteforce",
    "mmssl_objective",
    "mmssl_solve",
]


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModalDictionary:
    """Training matrix for one modality with class-grouped column slices.

    `matrix` is (n_features, n_atoms) with unit-norm columns; `class_slices`
    holds one (start, stop) column range per class, in class order, and the
    ranges must partition the columns.
    """

    matrix: np.ndarray
    class_slices: tuple[tuple[int, int], ...]

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=float)
        object.__setattr__(self, "matrix", matrix)
        if matrix.ndim != 2 or matrix.size == 0:
            raise ValueError(f"dictionary matrix must be 2-D and non-empty, got shape {matrix.shape}")
        slices = tuple((int(a), int(b)) for a, b in self.class_slices)
        object.__setattr__(self, "class_slices", slices)
        expected = 0
        for j, (start, stop) in enumerate(slices):
            if start != expected or stop <= start:
                raise ValueError(f"class slice {j} = [{start}, {stop}) does not partition the columns in order")
            expected = stop
        if expected != matrix.shape[1]:
            raise ValueError(f"class slices cover {expected} columns, dictionary has {matrix.shape[1]}")
        norms = np.linalg.norm(matrix, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            worst = int(np.argmax(np.abs(norms - 1.0)))
            raise ValueError(f"dictionary column {worst} has norm {norms[worst]!r}, expected unit norm")

    @classmethod
    def from_columns(cls, columns, class_slices):
        """Build a dictionary from raw columns, normalizing each to unit norm."""
        matrix = np.array(columns, dtype=float)
        norms = np.linalg.norm(matrix, axis=0)
        if np.any(norms == 0.0):
            raise ValueError(f"column {int(np.argmin(norms))} has zero norm and cannot be normalized")
        return cls(matrix / norms, tuple(class_slices))

    @property
    def n_features(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_slices)

    def class_matrix(self, j: int) -> np.ndarray:
        start, stop = self.class_slices[j]
        return self.matrix[:, start:stop]

    def class_coefficients(self, alpha: np.ndarray, j: int) -> np.ndarray:
        start, stop = self.class_slices[j]
        return alpha[start:stop]


@dataclass
class CoefficientPair:
    """Shared and modality-specific code for one modality."""

    shared: np.ndarray
    specific: np.ndarray

    @property
    def combined(self) -> np.ndarray:
        return self.shared + self.specific


@dataclass
class AlmState:
    """Augmented-Lagrangian state: relaxed copies, multipliers, step value."""

    relaxed: list[np.ndarray]
    multipliers: list[np.ndarray]
    step: float

    @classmethod
    def zeros(cls, sizes, mu0: float) -> "AlmState":
        return cls(
            relaxed=[np.zeros(n) for n in sizes],
            multipliers=[np.zeros(n) for n in sizes],
            step=float(mu0),
        )


@dataclass(frozen=True)
class MmsslConfig:
    """Solver parameters.

    lam          l1 sparsity weight (>= 0)
    tau          shared-code similarity weight (>= 0)
    mu0          initial augmented-Lagrangian step (> 0)
    mu_growth    multiplicative step growth per outer pass (> 1)
    sigma_safety safety factor on the proximal-gradient curvature bound (> 1)
    weights      per-modality fusion weights, None for uniform
    alm_inner_loop    iterate the shared-code relaxation to convergence
                      within each outer pass instead of a single sweep
    warm_start_specific  reuse the previous pass's specific code as the
                         lasso iteration start inside mmssl_solve
    """

    lam: float = 0.01
    tau: float = 0.1
    mu0: float = 1.0
    mu_growth: float = 1.2
    sigma_safety: float = 1.01
    tol_outer: float = 1e-8
    tol_inner: float = 1e-10
    max_outer: int = 200
    max_inner: int = 1000
    weights: tuple[float, ...] | None = None
    alm_inner_loop: bool = False
    warm_start_specific: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if self.mu0 <= 0:
            raise ValueError(f"mu0 must be > 0, got {self.mu0}")
        if self.mu_growth <= 1:
            raise ValueError(f"mu_growth must be > 1, got {self.mu_growth}")
        if self.sigma_safety <= 1:
            raise ValueError(f"sigma_safety must be > 1, got {self.sigma_safety}")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError(f"weights must be non-negative and sum to 1, got {self.weights}")


@dataclass
class MmsslResult:
    """Converged coefficients plus solver diagnostics."""

    pairs: list[CoefficientPair]
    objective: float
    iterations: int
    primal_residual: float
    converged: bool


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------

def soft_threshold(beta, t: float) -> np.ndarray:
    """Component-wise shrinkage: 0 where |b_i| <= t, else b_i - sign(b_i) t."""
    if t < 0:
        raise ValueError(f"threshold must be >= 0, got {t}")
    beta = np.asarray(beta, dtype=float)
    return np.where(np.abs(beta) <= t, 0.0, beta - np.sign(beta) * t)


def largest_gram_eigenvalue(matrix, iters: int = 50, tol: float = 1e-10) -> float:
    """Largest eigenvalue of D^T D by power iteration from a ones vector."""
    matrix = np.asarray(matrix, dtype=float)
    n = matrix.shape[1]
    v = np.full(n, 1.0 / np.sqrt(n))
    estimate = 0.0
    for _ in range(iters):
        w = matrix.T @ (matrix @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new_estimate = float(v @ (matrix.T @ (matrix @ v)))
        if abs(new_estimate - estimate) <= tol:
            return new_estimate
        estimate = new_estimate
    return estimate


def ridge_gram_inverse(matrix, tau: float, mu: float) -> np.ndarray:
    """(D^T D + (tau + mu/2) I)^{-1}, symmetric positive definite."""
    if mu <= 0:
        raise ValueError(f"mu must be > 0, got {mu}")
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    matrix = np.asarray(matrix, dtype=float)
    gram = matrix.T @ matrix
    inv = np.linalg.inv(gram + (tau + mu / 2.0) * np.eye(gram.shape[0]))
    return (inv + inv.T) / 2.0


def coupling_inverse(ridge_inverses, tau: float) -> np.ndarray:
    """(I - (tau/K) sum_k P_k)^{-1} for the coupled shared-code solve.

    Exists for any tau >= 0, mu > 0: each P_k has spectral norm at most
    1/(tau + mu/2), so the subtracted term has norm < 1.
    """
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    mats = [np.asarray(p, dtype=float) for p in ridge_inverses]
    if not mats:
        raise ValueError("need at least one ridge inverse")
    shape = mats[0].shape
    for k, p in enumerate(mats):
        if p.shape != shape:
            raise ValueError(f"ridge inverse {k} has shape {p.shape}, expected {shape}")
    total = sum(mats)
    n = shape[0]
    return np.linalg.inv(np.eye(n) - (tau / len(mats)) * total)


def update_relaxed_codes(shared: np.ndarray, multiplier: np.ndarray, mu: float, lam: float) -> np.ndarray:
    """Relaxed-copy update: soft_threshold(c + z/mu, lam/mu)."""
    if mu <= 0:
        raise ValueError(f"mu must be > 0, got {mu}")
    return soft_threshold(np.asarray(shared, dtype=float) + np.asarray(multiplier, dtype=float) / mu, lam / mu)


def update_multipliers(state: AlmState, shared, relaxed, growth: float = 1.2) -> AlmState:
    """Multiplier step z_k += mu (c_k - c'_k) and step growth mu *= growth."""
    if state.step <= 0:
        raise ValueError(f"step must be > 0, got {state.step}")
    new_multipliers = [
        z + state.step * (np.asarray(c, dtype=float) - np.asarray(r, dtype=float))
        for z, c, r in zip(state.multipliers, shared, relaxed)
    ]
    return AlmState(
        relaxed=[np.asarray(r, dtype=float).copy() for r in relaxed],
        multipliers=new_multipliers,
        step=state.step * growth,
    )


# ---------------------------------------------------------------------------
# Coupled shared-code update
# ---------------------------------------------------------------------------

class _ModalOps:
    """Eigen-factored Gram operators for one dictionary.

    Lets the solver apply (D^T D + c I)^{-1} for any c > 0 in O(n^2) without
    refactoring as the augmented-Lagrangian step grows.
    """

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)
        gram = self.matrix.T @ self.matrix
        evals, evecs = np.linalg.eigh(gram)
        self.evals = np.clip(evals, 0.0, None)  # Gram matrices are PSD; clip rounding noise
        self.evecs = evecs
        self.lam_max = float(self.evals[-1]) if self.evals.size else 0.0

    def ridge_solve(self, vec: np.ndarray, c: float) -> np.ndarray:
        return self.evecs @ ((self.evecs.T @ vec) / (self.evals + c))


def _cg_coupling_solve(ops, rhs, tau, c, rtol=1e-14, atol=1e-300):
    """Conjugate-gradient solve of (I - (tau/K) sum_k (G_k + cI)^{-1}) x = rhs.

    The operator is symmetric positive definite with spectrum inside
    [(c - tau)/c, 1), so CG converges quickly and deterministically.
    """
    K = len(ops)
    scale = tau / K

    def apply(v):
        acc = v.copy()
        for op in ops:
            acc -= scale * op.ridge_solve(v, c)
        return acc

    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rs = float(r @ r)
    limit = max(rtol * np.linalg.norm(rhs), atol) ** 2
    for _ in range(rhs.size + 10):
        if rs <= limit:
            break
        ap = apply(p)
        alpha = rs / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def _coupled_shared_update(ops, ys, specifics, relaxed, multipliers, mu, tau):
    """Simultaneous closed-form update of all shared codes.

    Per modality, c0_k = P_k (D_k^T (y_k - D_k s_k) + (mu/2) c'_k - z_k / 2)
    with P_k = (D_k^T D_k + (tau + mu/2) I)^{-1}; the coupling through the
    cross-modality mean adds (tau/K) P_k Q sum_eta c0_eta, where
    Q = (I - (tau/K) sum_eta P_eta)^{-1}.
    """
    c = tau + mu / 2.0
    base = []
    for op, y, s, r, z in zip(ops, ys, specifics, relaxed, multipliers):
        rhs = op.matrix.T @ (y - op.matrix @ s) + (mu / 2.0) * r - z / 2.0
        base.append(op.ridge_solve(rhs, c))
    if tau == 0.0:
        return base
    pooled = _cg_coupling_solve(ops, sum(base), tau, c)
    scale = tau / len(ops)
    return [b + scale * op.ridge_solve(pooled, c) for op, b in zip(ops, base)]


def update_shared_codes(dicts, ys, specifics, state: AlmState, config: MmsslConfig) -> list[np.ndarray]:
    """One coupled shared-code update across all modalities.

    Equals the direct solve of the stacked first-order optimality system for
    the quadratic-plus-similarity subproblem with the specific codes fixed.
    """
    matrices = [d.matrix for d in dicts]
    _check_modal_shapes(matrices, ys, specifics, state)
    ops = [_ModalOps(m) for m in matrices]
    ys = [np.asarray(y, dtype=float) for y in ys]
    specifics = [np.asarray(s, dtype=float) for s in specifics]
    return _coupled_shared_update(ops, ys, specifics, state.relaxed, state.multipliers, state.step, config.tau)


def _check_modal_shapes(matrices, ys, specifics, state=None):
    K = len(matrices)
    if K == 0:
        raise ValueError("need at least one modality")
    if len(ys) != K or len(specifics) != K:
        raise ValueError(f"got {K} dictionaries but {len(ys)} targets and {len(specifics)} codes")
    n = matrices[0].shape[1]
    for k, (m, y, s) in enumerate(zip(matrices, ys, specifics)):
        if m.shape[1] != n:
            raise ValueError(f"modality {k} has {m.shape[1]} atoms, expected {n} in all modalities")
        if np.asarray(y).shape != (m.shape[0],):
            raise ValueError(f"modality {k}: target has shape {np.asarray(y).shape}, dictionary rows {m.shape[0]}")
        if np.asarray(s).shape != (n,):
            raise ValueError(f"modality {k}: code has length {np.asarray(s).size}, expected {n}")
    if state is not None:
        for k, (r, z) in enumerate(zip(state.relaxed, state.multipliers)):
            if r.shape != (n,) or z.shape != (n,):
                raise ValueError(f"modality {k}: state vectors do not match {n} atoms")


# ---------------------------------------------------------------------------
# Lasso: proximal-gradient solver and brute-force oracle
# ---------------------------------------------------------------------------

def lasso_objective(matrix, y, alpha, lam: float) -> float:
    """||y - D alpha||^2 + lam ||alpha||_1."""
    r = np.asarray(y, dtype=float) - np.asarray(matrix, dtype=float) @ np.asarray(alpha, dtype=float)
    return float(r @ r + lam * np.abs(alpha).sum())


def _lasso_iterate(matrix, target, lam, sigma, init, tol, max_iter):
    """Iterative soft-thresholding on ||target - D x||^2 + lam ||x||_1.

    Gradient of the quadratic is 2 D^T (D x - target); the step 1/sigma is
    non-expansive for sigma >= 2 lambda_max(D^T D), and the shrinkage
    threshold lam/sigma makes fixed points exactly the lasso minimizers.
    """
    x = init.copy()
    threshold = lam / sigma
    for _ in range(max_iter):
        grad = 2.0 * (matrix.T @ (matrix @ x - target))
        x_new = soft_threshold(x - grad / sigma, threshold)
        delta = float(np.max(np.abs(x_new - x))) if x.size else 0.0
        x = x_new
        if delta < tol:
            break
    return x


def solve_lasso(matrix, y, offset=None, lam: float = 0.0,
                config: MmsslConfig | None = None, sigma: float | None = None,
                init=None) -> np.ndarray:
    """Solve min_s ||y - D (offset + s)||^2 + lam ||s||_1 by proximal gradient.

    `sigma` defaults to sigma_safety * 2 * lambda_max(D^T D) estimated by
    power iteration; `offset` defaults to zero.
    """
    config = config or MmsslConfig()
    matrix = np.asarray(matrix, dtype=float)
    y = np.asarray(y, dtype=float)
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    if offset is None:
        offset = np.zeros(matrix.shape[1])
    offset = np.asarray(offset, dtype=float)
    if not (np.all(np.isfinite(matrix)) and np.all(np.isfinite(y)) and np.all(np.isfinite(offset))):
        raise ValueError("non-finite input to lasso solver")
    if y.shape != (matrix.shape[0],) or offset.shape != (matrix.shape[1],):
        raise ValueError(
            f"shape mismatch: D is {matrix.shape}, y is {y.shape}, offset is {offset.shape}")
    if sigma is None:
        sigma = config.sigma_safety * 2.0 * largest_gram_eigenvalue(matrix)
        if sigma == 0.0:
            # all-zero dictionary: the quadratic is constant, so the sparsest
            # (zero) code is optimal
            return np.zeros(matrix.shape[1])
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    target = y - matrix @ offset
    start = np.zeros(matrix.shape[1]) if init is None else np.asarray(init, dtype=float).copy()
    return _lasso_iterate(matrix, target, lam, sigma, start, config.tol_inner, config.max_inner)


_SIGN_PATTERNS: dict[int, np.ndarray] = {}


def _sign_patterns(k: int) -> np.ndarray:
    """All k-length sign vectors as a (k, 2^k) matrix, cached."""
    if k not in _SIGN_PATTERNS:
        _SIGN_PATTERNS[k] = np.array(list(itertools.product((1.0, -1.0), repeat=k))).T.reshape(k, -1)
    return _SIGN_PATTERNS[k]


def lasso_bruteforce(matrix, y, lam: float) -> np.ndarray:
    """Global minimizer of ||y - D a||^2 + lam ||a||_1 by support enumeration.

    For every support the stationarity system D_S^T D_S a_S = D_S^T y -
    (lam/2) s is solved for every sign vector s; candidates whose solution
    signs match s survive, and the lowest-objective candidate wins.  Only
    feasible for up to 14 columns.
    """
    matrix = np.asarray(matrix, dtype=float)
    y = np.asarray(y, dtype=float)
    m, n = matrix.shape
    if n > 14:
        raise ValueError(f"brute-force oracle supports at most 14 columns, got {n}")
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")

    best_alpha = np.zeros(n)
    best_obj = lasso_objective(matrix, y, best_alpha, lam)
    columns = np.arange(n)
    for mask in range(1, 2 ** n):
        support = columns[[(mask >> i) & 1 == 1 for i in range(n)]]
        sub = matrix[:, support]
        gram = sub.T @ sub
        signs = _sign_patterns(len(support))
        rhs = (sub.T @ y)[:, None] - (lam / 2.0) * signs
        try:
            cand = np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError:
            cand = np.linalg.lstsq(gram, rhs, rcond=None)[0]
        feasible = np.all(cand * signs > 0, axis=0)
        if not np.any(feasible):
            continue
        cand = cand[:, feasible]
        residual = y[:, None] - sub @ cand
        objs = np.einsum("ij,ij->j", residual, residual) + lam * np.abs(cand).sum(axis=0)
        pick = int(np.argmin(objs))
        if objs[pick] < best_obj:
            best_obj = float(objs[pick])
            best_alpha = np.zeros(n)
            best_alpha[support] = cand[:, pick]
    return best_alpha


# ---------------------------------------------------------------------------
# Full solver
# ---------------------------------------------------------------------------

def mmssl_objective(dicts, ys, shared, specific, lam: float, tau: float) -> float:
    """Model objective at the given shared/specific codes."""
    shared = [np.asarray(c, dtype=float) for c in shared]
    specific = [np.asarray(s, dtype=float) for s in specific]
    mean_shared = sum(shared) / len(shared)
    total = 0.0
    for d, y, c, s in zip(dicts, ys, shared, specific):
        matrix = d.matrix if isinstance(d, ModalDictionary) else np.asarray(d, dtype=float)
        r = np.asarray(y, dtype=float) - matrix @ (c + s)
        dev = c - mean_shared
        total += float(r @ r) + tau * float(dev @ dev)
        total += lam * (float(np.abs(c).sum()) + float(np.abs(s).sum()))
    return total


def mmssl_solve(dicts, ys, config: MmsslConfig | None = None) -> MmsslResult:
    """Alternating solver for the shared/specific multi-modal model.

    Starts from all-zero codes and alternates one augmented-Lagrangian sweep
    over the shared codes (closed-form coupled update, relaxation shrinkage,
    multiplier and step update) with a proximal-gradient solve of each
    specific code, until the objective change and the primal residual
    max_k ||c_k - c'_k||_inf both drop below tol_outer or max_outer passes.
    """
    config = config or MmsslConfig()
    matrices = [d.matrix for d in dicts]
    ys = [np.asarray(y, dtype=float) for y in ys]
    K = len(matrices)
    n = matrices[0].shape[1] if K else 0
    _check_modal_shapes(matrices, ys, [np.zeros(n)] * K)

    ops = [_ModalOps(m) for m in matrices]
    sigmas = [config.sigma_safety * 2.0 * op.lam_max for op in ops]
    shared = [np.zeros(n) for _ in range(K)]
    specific = [np.zeros(n) for _ in range(K)]
    state = AlmState.zeros([n] * K, config.mu0)

    prev_obj = mmssl_objective(matrices, ys, shared, specific, config.lam, config.tau)
    residual = np.inf
    converged = False
    iterations = 0
    for iterations in range(1, config.max_outer + 1):
        shared, state, residual = _shared_sweep(ops, ys, specific, state, config)
        for k in range(K):
            if sigmas[k] == 0.0:
                specific[k] = np.zeros(n)
                continue
            start = specific[k] if config.warm_start_specific else np.zeros(n)
            target = ys[k] - matrices[k] @ shared[k]
            specific[k] = _lasso_iterate(
                matrices[k], target, config.lam, sigmas[k], start,
                config.tol_inner, config.max_inner)
        obj = mmssl_objective(matrices, ys, shared, specific, config.lam, config.tau)
        if abs(obj - prev_obj) < config.tol_outer and residual < config.tol_outer:
            prev_obj = obj
            converged = True
            break
        prev_obj = obj

    pairs = [CoefficientPair(shared=c, specific=s) for c, s in zip(shared, specific)]
    return MmsslResult(
        pairs=pairs,
        objective=prev_obj,
        iterations=iterations,
        primal_residual=float(residual),
        converged=converged,
    )


def _shared_sweep(ops, ys, specific, state, config):
    """One (or, with alm_inner_loop, a converged run of) ALM update(s)."""
    passes = config.max_outer if config.alm_inner_loop else 1
    residual = np.inf
    shared = state.relaxed
    for _ in range(passes):
        shared = _coupled_shared_update(
            ops, ys, specific, state.relaxed, state.multipliers, state.step, config.tau)
        relaxed = [
            update_relaxed_codes(c, z, state.step, config.lam)
            for c, z in zip(shared, state.multipliers)
        ]
        state = update_multipliers(state, shared, relaxed, config.mu_growth)
        residual = max(
            float(np.max(np.abs(c - r))) if c.size else 0.0
            for c, r in zip(shared, relaxed)
        )
        if residual < config.tol_outer:
            break
    return shared, state, residual
