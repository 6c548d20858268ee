"""Deterministic mechanistic simulators used as emulation targets.

Three systems of increasing spatial structure: a predator-prey ODE pair
(two "locations"), an SIR epidemic on a 2-D grid with diffusing
infections, and an activation-passing process on an arbitrary graph.
A finite-difference transition builder exposes the 1-D diffusion
operator used to reason about the grid dynamics. All solvers are pure
functions of their parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ValidationError

__all__ = [
    "LvParams",
    "SirPdeParams",
    "NetParams",
    "solve_lotka_volterra",
    "build_diffusion_transition",
    "solve_sir_rd",
    "simulate_network",
]


# ---------------------------------------------------------------------------
# Predator-prey ODEs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LvParams:
    """Lotka-Volterra rates and solve grid.

    du/dt = eta1 u - eta2 u v (prey), dv/dt = eta4 u v - eta3 v
    (predator). Populations must stay positive along the solve.
    """

    eta1: float
    eta2: float
    eta3: float
    eta4: float
    u0: float = 1.0
    v0: float = 1.0
    dt: float = 0.01
    n_steps: int = 100

    def __post_init__(self):
        for name in ("eta1", "eta2", "eta3", "eta4"):
            if getattr(self, name) < 0.0:
                raise ValidationError(f"{name} must be nonnegative")
        if self.u0 <= 0.0 or self.v0 <= 0.0:
            raise ValidationError("initial populations must be positive")
        if self.dt <= 0.0 or self.n_steps < 1:
            raise ValidationError("dt must be positive and n_steps >= 1")


def _lv_rhs(state, p: LvParams):
    u, v = state
    return np.array([p.eta1 * u - p.eta2 * u * v, p.eta4 * u * v - p.eta3 * v])


def solve_lotka_volterra(p: LvParams) -> np.ndarray:
    """Classical 4th-order Runge-Kutta trajectory, shape (n_steps+1, 2).

    Column 0 is prey, column 1 predator; row 0 is the initial state.
    Raises ``NumericError`` if a step drives a population nonpositive.
    """
    out = np.empty((p.n_steps + 1, 2))
    state = np.array([p.u0, p.v0], dtype=float)
    out[0] = state
    for i in range(1, p.n_steps + 1):
        k1 = _lv_rhs(state, p)
        k2 = _lv_rhs(state + 0.5 * p.dt * k1, p)
        k3 = _lv_rhs(state + 0.5 * p.dt * k2, p)
        k4 = _lv_rhs(state + p.dt * k3, p)
        state = state + (p.dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(state)) or np.any(state <= 0.0):
            raise NumericError(
                f"population became nonpositive at step {i}; use a smaller dt"
            )
        out[i] = state
    return out


# ---------------------------------------------------------------------------
# Finite-difference diffusion transition
# ---------------------------------------------------------------------------


def build_diffusion_transition(alpha: float, dt: float, ds: float, n: int) -> np.ndarray:
    """Explicit 1-D diffusion step as an n x n tridiagonal matrix.

    With mesh ratio lam = alpha dt / ds^2, one forward-Euler step of the
    heat equation under Dirichlet-zero boundaries is u -> G u with
    1 - 2 lam on the diagonal and lam on both off-diagonals. Interior
    rows sum to one; boundary rows leak mass to the zero exterior.
    """
    if alpha < 0.0 or dt <= 0.0 or ds <= 0.0 or n < 1:
        raise ValidationError("need alpha >= 0, dt > 0, ds > 0, n >= 1")
    lam = alpha * dt / ds**2
    if lam > 0.5:
        raise NumericError(
            f"mesh ratio alpha*dt/ds^2 = {lam:.4g} exceeds the stability bound 1/2"
        )
    g = np.eye(n) * (1.0 - 2.0 * lam)
    idx = np.arange(n - 1)
    g[idx, idx + 1] = lam
    g[idx + 1, idx] = lam
    return g


# ---------------------------------------------------------------------------
# SIR reaction-diffusion on a square grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SirPdeParams:
    """SIR epidemic on an n x n grid with per-compartment diffusion.

    Per cell: dS = -eta1 S I / N, dI = eta1 S I / N - eta2 I,
    dR = eta2 I, each plus alpha_k times the 5-point Laplacian of its
    compartment (Dirichlet-zero outside the grid). ``seed_cells`` are
    (row, col) pairs that start with ``seed_fraction * n_pop`` infected.
    The default alpha1 = alpha3 = 0 lets only infections diffuse.
    """

    eta1: float
    eta2: float
    alpha2: float
    alpha1: float = 0.0
    alpha3: float = 0.0
    n_side: int = 12
    ds: float = 1.0
    dt: float = 0.1
    n_steps: int = 100
    n_pop: float = 1000.0
    seed_cells: tuple = ((0, 0),)
    seed_fraction: float = 0.01
    observe_every: int = 1

    def __post_init__(self):
        if min(self.eta1, self.eta2, self.alpha1, self.alpha2, self.alpha3) < 0.0:
            raise ValidationError("rates and diffusivities must be nonnegative")
        if self.n_side < 1 or self.dt <= 0.0 or self.ds <= 0.0 or self.n_pop <= 0.0:
            raise ValidationError("grid, dt, ds, and n_pop must be positive")
        if self.n_steps < 1 or self.observe_every < 1:
            raise ValidationError("n_steps and observe_every must be >= 1")
        if not (0.0 < self.seed_fraction <= 1.0):
            raise ValidationError("seed_fraction must lie in (0, 1]")
        for i, j in self.seed_cells:
            if not (0 <= i < self.n_side and 0 <= j < self.n_side):
                raise ValidationError(f"seed cell ({i}, {j}) outside the grid")


def _laplacian5(x: np.ndarray) -> np.ndarray:
    """5-point Laplacian with Dirichlet-zero exterior, unscaled by ds^2."""
    padded = np.pad(x, 1)
    return (
        padded[:-2, 1:-1]
        + padded[2:, 1:-1]
        + padded[1:-1, :-2]
        + padded[1:-1, 2:]
        - 4.0 * x
    )


def solve_sir_rd(p: SirPdeParams, return_full: bool = False):
    """Forward-Euler reaction-diffusion solve.

    Returns infections as an array (n_recorded, n_side**2) over recorded
    steps 0, observe_every, 2*observe_every, ... with cells flattened
    row-major. With ``return_full`` returns (I, S, R) arrays instead.
    """
    lam_max = max(p.alpha1, p.alpha2, p.alpha3) * p.dt / p.ds**2
    if lam_max > 0.25:
        raise NumericError(
            f"mesh ratio alpha*dt/ds^2 = {lam_max:.4g} exceeds the 2-D stability "
            "bound 1/4"
        )
    n = p.n_side
    s = np.full((n, n), p.n_pop, dtype=float)
    i_comp = np.zeros((n, n))
    r = np.zeros((n, n))
    for row, col in p.seed_cells:
        seeded = p.seed_fraction * p.n_pop
        i_comp[row, col] = seeded
        s[row, col] -= seeded

    recorded = [0] + list(range(p.observe_every, p.n_steps + 1, p.observe_every))
    out_i = np.empty((len(recorded), n * n))
    out_s = np.empty_like(out_i) if return_full else None
    out_r = np.empty_like(out_i) if return_full else None

    def record(k):
        out_i[k] = i_comp.ravel()
        if return_full:
            out_s[k] = s.ravel()
            out_r[k] = r.ravel()

    record(0)
    k = 1
    scale = p.dt / p.ds**2
    for step in range(1, p.n_steps + 1):
        infection = p.eta1 * s * i_comp / p.n_pop
        recovery = p.eta2 * i_comp
        s_new = s + p.dt * (-infection) + p.alpha1 * scale * _laplacian5(s)
        i_new = i_comp + p.dt * (infection - recovery) + p.alpha2 * scale * _laplacian5(i_comp)
        r_new = r + p.dt * recovery + p.alpha3 * scale * _laplacian5(r)
        low = min(s_new.min(), i_new.min(), r_new.min())
        if not np.isfinite(low) or low < -1e-9 * p.n_pop:
            raise NumericError(
                f"compartment went negative at step {step}; the reaction terms "
                "violate the explicit-step bound — reduce dt"
            )
        s, i_comp, r = (
            np.clip(s_new, 0.0, None),
            np.clip(i_new, 0.0, None),
            np.clip(r_new, 0.0, None),
        )
        if k < len(recorded) and step == recorded[k]:
            record(k)
            k += 1
    if return_full:
        return out_i, out_s, out_r
    return out_i


# ---------------------------------------------------------------------------
# Network activation spread
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NetParams:
    """Retention/decay activation passing on an undirected graph.

    Each step, node n keeps reservoir = r * inflow, sends
    (1-d)(1-r) * inflow / deg(n) to each neighbour, and next inflow is
    received outflow plus own reservoir. Isolated nodes send nothing and
    keep (1-d) * inflow, preserving the d = 0 conservation identity.
    """

    adjacency: np.ndarray
    r: object = 0.5
    d: float = 0.1
    x0: np.ndarray = None
    n_steps: int = 50

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=float)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValidationError("adjacency must be square")
        if not np.array_equal(adj, adj.T):
            raise ValidationError("adjacency must be symmetric")
        if np.any(np.diag(adj) != 0.0):
            raise ValidationError("adjacency diagonal must be zero")
        if not np.all(np.isin(adj, (0.0, 1.0))):
            raise ValidationError("adjacency entries must be 0 or 1")
        object.__setattr__(self, "adjacency", adj)
        n = adj.shape[0]
        r = np.broadcast_to(np.asarray(self.r, dtype=float), (n,)).copy()
        if np.any(r < 0.0) or np.any(r > 1.0):
            raise ValidationError("retention r must lie in [0, 1]")
        object.__setattr__(self, "r", r)
        if not (0.0 <= self.d <= 1.0):
            raise ValidationError("decay d must lie in [0, 1]")
        x0 = (
            np.ones(n)
            if self.x0 is None
            else np.asarray(self.x0, dtype=float).copy()
        )
        if x0.shape != (n,):
            raise ValidationError("x0 must have one entry per node")
        object.__setattr__(self, "x0", x0)
        if self.n_steps < 1:
            raise ValidationError("n_steps must be >= 1")


def simulate_network(p: NetParams, output: str = "inflow") -> np.ndarray:
    """Run the activation recursion; shape (n_steps+1, n_nodes).

    ``output`` selects the reported series: ``"inflow"`` (default, row 0
    is the initial activation) or ``"reservoir"`` (row 0 is the
    reservoir formed from the initial activation).
    """
    if output not in ("inflow", "reservoir"):
        raise ValidationError(f"unknown output {output!r}")
    adj = p.adjacency
    deg = adj.sum(axis=1)
    isolated = deg == 0.0
    safe_deg = np.where(isolated, 1.0, deg)

    inflow = p.x0.copy()
    out = np.empty((p.n_steps + 1, adj.shape[0]))
    reservoirs = np.empty_like(out)
    out[0] = inflow
    for t in range(1, p.n_steps + 1):
        reservoir = np.where(isolated, (1.0 - p.d) * inflow, p.r * inflow)
        outflow = np.where(
            isolated, 0.0, (1.0 - p.d) * (1.0 - p.r) * inflow / safe_deg
        )
        reservoirs[t - 1] = reservoir
        inflow = adj @ outflow + reservoir
        out[t] = inflow
    reservoirs[p.n_steps] = np.where(
        isolated, (1.0 - p.d) * inflow, p.r * inflow
    )
    return out if output == "inflow" else reservoirs
