"""
EMR Closure - Least-squares machinery
Quadratic design matrices, ridge / QR solves, and the equality + inequality
constrained grand solve used for energy-conserving main levels.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg

from .errors import (ConvergenceError, DataError, InfeasibleConstraintsError,
                     RankDeficientError)
from .timeseries import TimeSeries

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, TimeSeries]

POSITIVE_DIAGONAL_FLOOR = 1e-8


@dataclass(frozen=True)
class DesignMatrix:
    columns: Tuple[str, ...]
    values: np.ndarray
    has_constant: bool = False
    n_state: int = 0
    quadratic: bool = False

    def __post_init__(self):
        if len(set(self.columns)) != len(self.columns):
            raise DataError("Design column labels must be unique")
        if self.values.ndim != 2 or self.values.shape[1] != len(self.columns):
            raise DataError(f"Design values {self.values.shape} do not match {len(self.columns)} labels")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class LinearEquality:
    coefficients: Dict[int, float]
    rhs: float = 0.0
    family: str = ""


@dataclass(frozen=True)
class LinearInequality:
    """scale * theta[index] >= lower"""

    index: int
    lower: float
    scale: float = 1.0
    family: str = ""


@dataclass
class ConstraintSet:
    """Linear constraints over the grand parameter vector (channel-major blocks of M rows)"""

    n_params: int
    equalities: List[LinearEquality] = field(default_factory=list)
    inequalities: List[LinearInequality] = field(default_factory=list)

    def __post_init__(self):
        for ineq in self.inequalities:
            if not np.isfinite(ineq.lower):
                raise DataError(f"Inequality bound on parameter {ineq.index} is not finite")
        for item in [*self.equalities, *self.inequalities]:
            indices = item.coefficients.keys() if isinstance(item, LinearEquality) else [item.index]
            for idx in indices:
                if not 0 <= idx < self.n_params:
                    raise DataError(f"Constraint references parameter {idx} outside [0, {self.n_params})")

    @property
    def family_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for item in [*self.equalities, *self.inequalities]:
            counts[item.family] = counts.get(item.family, 0) + 1
        return counts

    def is_empty(self) -> bool:
        return not self.equalities and not self.inequalities

    def equality_matrix(self) -> Tuple[np.ndarray, np.ndarray]:
        E = np.zeros((len(self.equalities), self.n_params))
        e = np.zeros(len(self.equalities))
        for row, eq in enumerate(self.equalities):
            for idx, coef in eq.coefficients.items():
                E[row, idx] += coef
            e[row] = eq.rhs
        return E, e

    def assemble(self) -> Tuple[np.ndarray, np.ndarray]:
        """Deduplicated, linearly independent equality rows"""
        E, e = self.equality_matrix()
        if E.shape[0] == 0:
            return E, e
        stacked = np.round(np.hstack([E, e[:, None]]), 14)
        _, keep = np.unique(stacked, axis=0, return_index=True)
        keep = np.sort(keep)
        E, e = E[keep], e[keep]

        _, R, piv = scipy.linalg.qr(E.T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        tol = max(E.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
        rank = int(np.sum(diag > tol))
        if rank < E.shape[0]:
            independent = np.sort(piv[:rank])
            E_ind, e_ind = E[independent], e[independent]
            sol, *_ = np.linalg.lstsq(E_ind, e_ind, rcond=None)
            if np.max(np.abs(E @ sol - e)) > 1e-9 * (1.0 + np.max(np.abs(e))):
                raise InfeasibleConstraintsError("Equality constraints are inconsistent")
            logger.debug(f"Dropped {E.shape[0] - rank} dependent equality rows")
            E, e = E_ind, e_ind
        return E, e

    def inequality_matrix(self) -> Tuple[np.ndarray, np.ndarray]:
        G = np.zeros((len(self.inequalities), self.n_params))
        h = np.zeros(len(self.inequalities))
        for row, ineq in enumerate(self.inequalities):
            G[row, ineq.index] = ineq.scale
            h[row] = ineq.lower
        return G, h

    def max_equality_violation(self, theta: np.ndarray) -> float:
        if not self.equalities:
            return 0.0
        E, e = self.equality_matrix()
        return float(np.max(np.abs(E @ theta - e)))


@dataclass(frozen=True)
class LsSolution:
    coefficients: np.ndarray          # M x d
    residuals: np.ndarray             # N x d
    r_squared: np.ndarray             # d
    active_inequalities: Tuple[int, ...] = ()
    columns: Tuple[str, ...] = ()
    ridge_lambda: float = 0.0
    iterations: int = 0

    @property
    def grand_vector(self) -> np.ndarray:
        return self.coefficients.T.ravel()


def monomial_pairs(d: int) -> List[Tuple[int, int]]:
    """Unordered monomials x_i x_j with i <= j in lexicographic order"""
    rows, cols = np.triu_indices(d)
    return list(zip(rows.tolist(), cols.tolist()))


def quadratic_monomials(x: np.ndarray, d: Optional[int] = None) -> np.ndarray:
    """Evaluate all x_i x_j (i <= j) for a vector or a batch of row vectors"""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1] if d is None else d
    rows, cols = np.triu_indices(d)
    return x[..., rows] * x[..., cols]


def n_quadratic_columns(d: int) -> int:
    return 1 + d + d * (d + 1) // 2


def _as_array(values: ArrayLike) -> np.ndarray:
    data = values.data if isinstance(values, TimeSeries) else np.asarray(values, dtype=float)
    return data[:, None] if data.ndim == 1 else data


def build_quadratic_design(ts: ArrayLike, extra_channels: Sequence[ArrayLike] = (),
                           constant: Optional[bool] = None, quadratic: Optional[bool] = None,
                           names: Optional[Sequence[str]] = None,
                           extra_prefix: str = "r") -> DesignMatrix:
    """Columns [1, x_1..x_d, x_i*x_j (i<=j), extras].

    With extra channels (a level fit) the constant and quadratic blocks default to off.
    """
    x = _as_array(ts)
    n, d = x.shape
    if names is None:
        names = ts.names if isinstance(ts, TimeSeries) else tuple(f"x{i + 1}" for i in range(d))
    level_fit = len(extra_channels) > 0
    constant = (not level_fit) if constant is None else constant
    quadratic = (not level_fit) if quadratic is None else quadratic

    blocks: List[np.ndarray] = []
    labels: List[str] = []
    if constant:
        blocks.append(np.ones((n, 1)))
        labels.append("1")
    blocks.append(x)
    labels.extend(names)
    if quadratic:
        blocks.append(quadratic_monomials(x, d))
        labels.extend(f"{names[i]}*{names[j]}" for i, j in monomial_pairs(d))

    for level, extra in enumerate(extra_channels):
        if isinstance(extra, TimeSeries) and isinstance(ts, TimeSeries) and extra.dt != ts.dt:
            raise DataError(f"Extra channel block {level} has dt={extra.dt}, expected {ts.dt}")
        values = _as_array(extra)
        if values.shape[0] != n:
            raise DataError(f"Extra channel block {level} has {values.shape[0]} rows, expected {n}")
        blocks.append(values)
        labels.extend(f"{extra_prefix}{level}_{i + 1}" for i in range(values.shape[1]))

    return DesignMatrix(tuple(labels), np.hstack(blocks), has_constant=constant,
                        n_state=d, quadratic=quadratic)


def build_level_design(ts: ArrayLike, residual_stack: Sequence[ArrayLike]) -> DesignMatrix:
    """Linear predictors [x, r(0), ..., r(m-1)] of a hidden-level regression"""
    return build_quadratic_design(ts, residual_stack, constant=False, quadratic=False)


def default_ridge(design: DesignMatrix) -> float:
    """1e-6 * trace(X^T X) / M"""
    trace = float(np.sum(design.values ** 2))
    return 1e-6 * trace / design.n_columns if trace > 0 else 1e-12


def resolve_ridge(ridge: Union[str, float, None], design: DesignMatrix) -> float:
    if ridge is None or ridge == "auto":
        return default_ridge(design)
    ridge = float(ridge)
    if ridge < 0:
        raise DataError("ridge_lambda must be >= 0")
    return ridge


def r_squared(targets: np.ndarray, residuals: np.ndarray, centered: bool) -> np.ndarray:
    """1 - SS_res / SS_tot; SS_tot is uncentered when the design has no constant"""
    reference = targets - targets.mean(axis=0) if centered else targets
    ss_tot = np.sum(reference ** 2, axis=0)
    ss_res = np.sum(residuals ** 2, axis=0)
    out = np.zeros(targets.shape[1])
    live = ss_tot > 0
    out[live] = 1.0 - ss_res[live] / ss_tot[live]
    return out


def _check_targets(design: DesignMatrix, targets: ArrayLike) -> np.ndarray:
    y = _as_array(targets)
    if y.shape[0] != design.n_rows:
        raise DataError(f"Targets have {y.shape[0]} rows, design has {design.n_rows}")
    if design.n_rows < design.n_columns:
        logger.warning(f"Underdetermined regression: {design.n_rows} rows for {design.n_columns} columns")
    return y


def least_squares(design: DesignMatrix, targets: ArrayLike,
                  ridge_lambda: float = 0.0) -> LsSolution:
    """Per-channel ridge solve (Cholesky on the normal equations) or pivoted QR when lambda=0"""
    X = design.values
    Y = _check_targets(design, targets)
    if ridge_lambda < 0:
        raise DataError("ridge_lambda must be >= 0")

    if ridge_lambda > 0:
        gram = X.T @ X + ridge_lambda * np.eye(design.n_columns)
        try:
            factor = scipy.linalg.cho_factor(gram, lower=True)
        except np.linalg.LinAlgError as e:
            raise RankDeficientError(f"Normal equations not positive definite: {e}") from e
        theta = scipy.linalg.cho_solve(factor, X.T @ Y)
    else:
        Q, R, perm = scipy.linalg.qr(X, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        tol = max(X.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
        rank = int(np.sum(diag > tol))
        if rank < design.n_columns:
            raise RankDeficientError(
                f"Design is rank deficient ({rank} < {design.n_columns}); use ridge_lambda > 0")
        theta = np.empty((design.n_columns, Y.shape[1]))
        theta[perm] = scipy.linalg.solve_triangular(R, Q.T @ Y)

    residuals = Y - X @ theta
    return LsSolution(
        coefficients=theta,
        residuals=residuals,
        r_squared=r_squared(Y, residuals, design.has_constant),
        columns=design.columns,
        ridge_lambda=float(ridge_lambda),
    )


def _solve_working_set(Hr: np.ndarray, gr: np.ndarray, Cr: np.ndarray,
                       cr: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """min 1/2 u'Hr u - gr'u  s.t.  Cr u = cr; returns (u, multipliers)"""
    k = Cr.shape[0]
    if k == 0:
        return scipy.linalg.solve(Hr, gr, assume_a="pos"), np.zeros(0)
    n = Hr.shape[0]
    kkt = np.block([[Hr, -Cr.T], [Cr, np.zeros((k, k))]])
    rhs = np.concatenate([gr, cr])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    u, mu = sol[:n], sol[n:]
    if np.max(np.abs(Cr @ u - cr)) > 1e-8 * (1.0 + np.max(np.abs(cr))):
        raise InfeasibleConstraintsError("Active inequality bounds conflict with the equality constraints")
    return u, mu


def constrained_least_squares(design: DesignMatrix, targets: ArrayLike,
                              constraints: Optional[ConstraintSet] = None,
                              ridge_lambda: float = 0.0,
                              max_iter: Optional[int] = None) -> LsSolution:
    """Grand (all channels at once) least squares under linear constraints.

    Equalities are eliminated with a null-space basis; inequality bounds are handled by a
    primal active-set loop on the reduced problem.
    """
    X = design.values
    Y = _check_targets(design, targets)
    M, d = design.n_columns, Y.shape[1]
    n = M * d
    constraints = constraints or ConstraintSet(n)
    if constraints.n_params != n:
        raise DataError(f"Constraint set is sized for {constraints.n_params} parameters, problem has {n}")

    gram = X.T @ X
    H = np.kron(np.eye(d), gram) + ridge_lambda * np.eye(n)
    g = (X.T @ Y).T.ravel()

    E, e = constraints.assemble()
    G, h = constraints.inequality_matrix()

    if E.shape[0]:
        theta_p, *_ = np.linalg.lstsq(E, e, rcond=None)
        if np.max(np.abs(E @ theta_p - e)) > 1e-9 * (1.0 + np.max(np.abs(e))):
            raise InfeasibleConstraintsError("Equality constraints admit no solution")
        Z = scipy.linalg.null_space(E)
    else:
        theta_p = np.zeros(n)
        Z = np.eye(n)

    if Z.shape[1] == 0:
        # equalities pin theta; the bounds can only be checked
        theta = theta_p
        working: List[int] = []
        iterations = 0
        if G.shape[0]:
            violation = h - G @ theta
            if violation.max() > 1e-10 * (1.0 + np.abs(h).max()):
                raise InfeasibleConstraintsError(
                    f"Equalities fix every parameter and violate inequality bound "
                    f"{int(np.argmax(violation))} by {violation.max():.3g}")
    else:
        Hr = Z.T @ H @ Z
        gr = Z.T @ (g - H @ theta_p)
        cap = max_iter if max_iter is not None else 100 * max(1, G.shape[0])
        working = []
        tol = 1e-10
        for iterations in range(1, cap + 1):
            Cw = G[working]
            try:
                u, mu = _solve_working_set(Hr, gr, Cw @ Z, h[working] - Cw @ theta_p)
            except np.linalg.LinAlgError as e:
                raise RankDeficientError(f"Reduced Hessian is singular: {e}; use ridge_lambda > 0") from e
            theta = theta_p + Z @ u

            if working and mu.min() < -tol:
                working.pop(int(np.argmin(mu)))
                continue

            violation = h - G @ theta if G.shape[0] else np.zeros(0)
            if working:
                violation[working] = -np.inf
            if violation.size and violation.max() > tol * (1.0 + np.abs(h).max()):
                working.append(int(np.argmax(violation)))
                continue
            break
        else:
            raise ConvergenceError(f"Active-set QP exceeded {cap} iterations")

    coefficients = theta.reshape(d, M).T
    residuals = Y - X @ coefficients
    logger.debug(f"Constrained solve: {E.shape[0]} equalities, {len(working)} active bounds")
    return LsSolution(
        coefficients=coefficients,
        residuals=residuals,
        r_squared=r_squared(Y, residuals, design.has_constant),
        active_inequalities=tuple(sorted(working)),
        columns=design.columns,
        ridge_lambda=float(ridge_lambda),
        iterations=iterations,
    )


def main_level_index(d: int) -> Dict[str, object]:
    """Row layout of the quadratic main-level design for d state channels"""
    pairs = monomial_pairs(d)
    return {
        "M": n_quadratic_columns(d),
        "linear": lambda j: 1 + j,
        "mono": {pair: 1 + d + k for k, pair in enumerate(pairs)},
    }


def energy_constraints(d: int) -> ConstraintSet:
    """Energy-conservation and dissipativity constraints in the monomial convention.

    Parameter (channel c, design row q) lives at c * M + q. Quadratic coefficients are
    stored per unordered monomial, so each family instance becomes a relation among
    monomial coefficients; duplicate rows are removed by ``assemble``.
    """
    if d < 1:
        raise DataError("energy_constraints needs d >= 1")
    layout = main_level_index(d)
    M = layout["M"]
    mono = layout["mono"]

    def idx(channel: int, row: int) -> int:
        return channel * M + row

    def b(channel: int, i: int, j: int) -> int:
        return idx(channel, mono[(min(i, j), max(i, j))])

    equalities: List[LinearEquality] = []
    for i in range(d):
        equalities.append(LinearEquality({b(i, i, i): 1.0}, 0.0, "nlcons1"))

    for j in range(d):
        for k in range(d):
            if j == k:
                continue
            # coefficient of x_j^2 x_k in <B(x,x), x>
            equalities.append(LinearEquality({b(k, j, j): 1.0, b(j, j, k): 1.0}, 0.0, "nlcons2"))
            # coefficient of x_j x_k^2
            equalities.append(LinearEquality({b(j, k, k): 1.0, b(k, j, k): 1.0}, 0.0, "nlcons2"))

    for i in range(d):
        for j in range(i + 1, d):
            for k in range(j + 1, d):
                equalities.append(LinearEquality(
                    {b(i, j, k): 1.0, b(j, i, k): 1.0, b(k, i, j): 1.0}, 0.0, "nlcons3"))

    # theta[x_j, channel i] = -A_ij
    for i in range(d):
        for j in range(i + 1, d):
            equalities.append(LinearEquality(
                {idx(i, 1 + j): 1.0, idx(j, 1 + i): 1.0}, 0.0, "skewcons"))

    inequalities = [
        LinearInequality(idx(i, 1 + i), POSITIVE_DIAGONAL_FLOOR, -1.0, "poscons")
        for i in range(d)
    ]
    return ConstraintSet(d * M, equalities, inequalities)
