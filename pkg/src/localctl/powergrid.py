"""Structure-preserving power-grid swing model: generators carry phase and
frequency states, buses carry a first-order phase state. Provides the
equilibrium solve, linearization, zero-order-hold discretization, nonlinear
simulation, and the localized-control experiment on the linearization."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import control as ctl
from .control import BlockLayout, ControlProblem, InputSequence
from .sparse import ConvergenceError, as_csr


class Generator(NamedTuple):
    node: int
    inertia: float  # s^2
    damping: float  # s
    power: float  # per-unit mechanical injection


class Bus(NamedTuple):
    node: int
    damping: float  # s
    power: float  # per-unit injection (negative for loads)


class Line(NamedTuple):
    a: int
    b: int
    susceptance: float  # per-unit


@dataclass(frozen=True)
class GridModel:
    generators: tuple
    buses: tuple
    lines: tuple

    def __post_init__(self):
        n = self.node_count
        ids = sorted([g.node for g in self.generators] + [b.node for b in self.buses])
        if ids != list(range(n)):
            raise ValueError("generator and bus ids must partition 0..node_count-1")
        for g in self.generators:
            if g.inertia <= 0:
                raise ValueError(f"generator {g.node} has nonpositive inertia")
        for b in self.buses:
            if b.damping <= 0:
                raise ValueError(f"bus {b.node} has nonpositive damping")
        for ln in self.lines:
            if not (0 <= ln.a < n and 0 <= ln.b < n) or ln.a == ln.b:
                raise ValueError(f"bad line endpoints ({ln.a}, {ln.b})")
        if not self._connected():
            raise ValueError("line graph is not connected")

    def _connected(self) -> bool:
        n = self.node_count
        adj = [[] for _ in range(n)]
        for ln in self.lines:
            adj[ln.a].append(ln.b)
            adj[ln.b].append(ln.a)
        seen = np.zeros(n, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        return bool(seen.all())

    @property
    def node_count(self) -> int:
        return len(self.generators) + len(self.buses)

    @property
    def generator_nodes(self) -> np.ndarray:
        return np.array(sorted(g.node for g in self.generators), dtype=int)

    @property
    def bus_nodes(self) -> np.ndarray:
        return np.array(sorted(b.node for b in self.buses), dtype=int)

    @property
    def state_dim(self) -> int:
        return 2 * len(self.generators) + len(self.buses)

    def injections(self) -> np.ndarray:
        p = np.zeros(self.node_count)
        for g in self.generators:
            p[g.node] = g.power
        for b in self.buses:
            p[b.node] = b.power
        return p

    def balanced(self) -> "GridModel":
        """Absorb any net injection imbalance into the slack generator."""
        imbalance = float(np.sum(self.injections()))
        if imbalance == 0.0:
            return self
        slack = min(g.node for g in self.generators)
        gens = tuple(
            g._replace(power=g.power - imbalance) if g.node == slack else g
            for g in self.generators
        )
        return replace(self, generators=gens)

    def scale_damping(self, factor) -> "GridModel":
        """Uniformly scale generator damping; small or negative factors
        produce the unstable-equilibrium scenarios."""
        return replace(
            self,
            generators=tuple(g._replace(damping=g.damping * factor) for g in self.generators),
        )

    def layout(self, input_mask=None) -> BlockLayout:
        """Per-node block layout: 2 state channels per generator, 1 per bus;
        input dimensions count the actuated channels of each node."""
        dims = np.ones(self.node_count, dtype=int)
        dims[self.generator_nodes] = 2
        if input_mask is None:
            input_dims = dims.copy()
        else:
            offs = np.concatenate([[0], np.cumsum(dims)])
            input_dims = np.array(
                [int(np.count_nonzero(input_mask[offs[i]:offs[i + 1]]))
                 for i in range(self.node_count)]
            )
        return BlockLayout(dims, input_dims)


@dataclass(frozen=True)
class GridState:
    generator_phase: np.ndarray
    generator_frequency: np.ndarray
    bus_phase: np.ndarray


def actuation_mask(grid: GridModel, which="all") -> np.ndarray:
    """Boolean mask over state channels receiving control input."""
    mask = np.ones(grid.state_dim, dtype=bool)
    if which == "all":
        return mask
    if which == "generators":
        dyn = _Dynamics(grid)
        mask[:] = False
        mask[dyn.phase_idx[grid.generator_nodes]] = True
        mask[dyn.freq_idx[dyn.freq_idx >= 0]] = True
        return mask
    raise ValueError(f"unknown actuation selector {which!r}")


class _Dynamics:
    """Precomputed arrays for fast residual / right-hand-side evaluation."""

    def __init__(self, grid: GridModel):
        self.grid = grid
        n = grid.node_count
        dims = np.ones(n, dtype=int)
        dims[grid.generator_nodes] = 2
        offs = np.concatenate([[0], np.cumsum(dims)])
        self.state_offsets = offs
        self.phase_idx = offs[:-1].copy()  # phase is the first channel of each node
        self.freq_idx = np.full(n, -1, dtype=int)
        self.freq_idx[grid.generator_nodes] = offs[grid.generator_nodes] + 1
        self.is_gen = np.zeros(n, dtype=bool)
        self.is_gen[grid.generator_nodes] = True
        self.p = grid.injections()
        self.inertia = np.zeros(n)
        self.damping = np.zeros(n)
        for g in grid.generators:
            self.inertia[g.node] = g.inertia
            self.damping[g.node] = g.damping
        for b in grid.buses:
            self.damping[b.node] = b.damping
        self.line_a = np.array([ln.a for ln in grid.lines], dtype=int)
        self.line_b = np.array([ln.b for ln in grid.lines], dtype=int)
        self.line_w = np.array([ln.susceptance for ln in grid.lines])

    def power_residual(self, theta) -> np.ndarray:
        """p_i - sum_j w_ij sin(theta_i - theta_j) at every node."""
        flow = self.line_w * np.sin(theta[self.line_a] - theta[self.line_b])
        r = self.p.copy()
        np.subtract.at(r, self.line_a, flow)
        np.add.at(r, self.line_b, flow)
        return r

    def laplacian(self, theta) -> np.ndarray:
        """Weighted Laplacian with weights w_ij cos(theta_i - theta_j)."""
        n = self.grid.node_count
        lap = np.zeros((n, n))
        c = self.line_w * np.cos(theta[self.line_a] - theta[self.line_b])
        for a, b, w in zip(self.line_a, self.line_b, c):
            lap[a, a] += w
            lap[b, b] += w
            lap[a, b] -= w
            lap[b, a] -= w
        return lap

    def rhs(self, x, u_state) -> np.ndarray:
        theta = x[self.phase_idx]
        resid = self.power_residual(theta)
        dx = np.empty_like(x)
        gen = self.is_gen
        omega = x[self.freq_idx[gen]]
        dx[self.phase_idx[gen]] = omega
        dx[self.freq_idx[gen]] = (
            resid[gen] - self.damping[gen] * omega
        ) / self.inertia[gen]
        dx[self.phase_idx[~gen]] = resid[~gen] / self.damping[~gen]
        if u_state is not None:
            dx = dx + u_state
        return dx


def state_vector(grid: GridModel, state: GridState) -> np.ndarray:
    dyn = _Dynamics(grid)
    x = np.zeros(grid.state_dim)
    x[dyn.phase_idx[grid.generator_nodes]] = state.generator_phase
    x[dyn.freq_idx[grid.generator_nodes]] = state.generator_frequency
    x[dyn.phase_idx[grid.bus_nodes]] = state.bus_phase
    return x


def state_from_vector(grid: GridModel, x) -> GridState:
    dyn = _Dynamics(grid)
    return GridState(
        generator_phase=x[dyn.phase_idx[grid.generator_nodes]].copy(),
        generator_frequency=x[dyn.freq_idx[grid.generator_nodes]].copy(),
        bus_phase=x[dyn.phase_idx[grid.bus_nodes]].copy(),
    )


def solve_equilibrium(grid: GridModel, tol=1e-10, max_iters=50) -> GridState:
    """Synchronous fixed point: phases with zero power residual everywhere
    and zero frequencies. Newton iteration with the slack phase pinned to 0.
    """
    grid = grid.balanced()
    dyn = _Dynamics(grid)
    n = grid.node_count
    slack = int(min(g.node for g in grid.generators))
    free = np.array([i for i in range(n) if i != slack], dtype=int)
    theta = np.zeros(n)
    last = np.inf
    for _ in range(max_iters):
        resid = dyn.power_residual(theta)
        last = float(np.max(np.abs(resid)))
        if last <= tol:
            return GridState(
                generator_phase=theta[grid.generator_nodes].copy(),
                generator_frequency=np.zeros(len(grid.generators)),
                bus_phase=theta[grid.bus_nodes].copy(),
            )
        lap = dyn.laplacian(theta)[np.ix_(free, free)]
        try:
            step = np.linalg.solve(lap, resid[free])
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(
                f"power flow Jacobian singular (residual {last:g})", residual=last
            ) from exc
        if not np.all(np.isfinite(step)):
            raise ConvergenceError(
                f"power flow diverged (residual {last:g})", residual=last
            )
        theta[free] += step
    raise ConvergenceError(
        f"power flow did not reach tol={tol:g} in {max_iters} iterations "
        f"(residual {last:g})",
        residual=last,
        iterations=max_iters,
    )


@dataclass(frozen=True)
class LinearizedGrid:
    """Linearization around an equilibrium, with an optional discrete pair."""

    grid: GridModel
    equilibrium: GridState
    a_continuous: sp.csr_matrix
    h: float | None = None
    a_discrete: sp.csr_matrix | None = None
    b_discrete: sp.csr_matrix | None = None
    input_mask: np.ndarray | None = None


def linearize(grid: GridModel, eq: GridState) -> LinearizedGrid:
    """Jacobian of the swing dynamics at the equilibrium.

    Generator blocks follow d(phase)=freq, M d(freq) = -D freq - L phase;
    bus rows follow D d(phase) = -L phase, with L the Laplacian weighted by
    susceptance * cos(phase difference).
    """
    grid = grid.balanced()
    dyn = _Dynamics(grid)
    theta = state_vector(grid, eq)[dyn.phase_idx]
    resid = np.max(np.abs(dyn.power_residual(theta)))
    if resid > 1e-8:
        raise ValueError(f"state is not an equilibrium (residual {resid:g})")
    lap = dyn.laplacian(theta)
    ns = grid.state_dim
    a = np.zeros((ns, ns))
    for i in range(grid.node_count):
        if dyn.is_gen[i]:
            ti, wi = dyn.phase_idx[i], dyn.freq_idx[i]
            a[ti, wi] = 1.0
            a[wi, dyn.phase_idx] = -lap[i] / dyn.inertia[i]
            a[wi, wi] = -dyn.damping[i] / dyn.inertia[i]
        else:
            ti = dyn.phase_idx[i]
            a[ti, dyn.phase_idx] = -lap[i] / dyn.damping[i]
    return LinearizedGrid(grid=grid, equilibrium=eq, a_continuous=sp.csr_matrix(a))


def discretize(lin: LinearizedGrid, h, input_mask=None, drop_tol=0.0) -> LinearizedGrid:
    """Zero-order-hold discretization via the augmented matrix exponential.

    input_mask selects the state channels that receive actuation (default:
    every channel, i.e. an identity continuous input matrix). drop_tol sets
    entries below drop_tol * max|entry| to zero; the exact exponential is
    dense with roundoff-scale tails, so grid experiments sparsify here.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    ns = lin.a_continuous.shape[0]
    if input_mask is None:
        input_mask = np.ones(ns, dtype=bool)
    cols = np.flatnonzero(input_mask)
    bc = np.zeros((ns, len(cols)))
    bc[cols, np.arange(len(cols))] = 1.0
    aug = np.zeros((ns + len(cols), ns + len(cols)))
    aug[:ns, :ns] = lin.a_continuous.toarray()
    aug[:ns, ns:] = bc
    expo = scipy.linalg.expm(aug * h)
    ad = expo[:ns, :ns]
    bd = expo[:ns, ns:]
    if drop_tol > 0.0:
        ad = np.where(np.abs(ad) < drop_tol * np.max(np.abs(ad)), 0.0, ad)
        bd = np.where(np.abs(bd) < drop_tol * np.max(np.abs(bd)), 0.0, bd)
    return replace(
        lin,
        h=h,
        a_discrete=sp.csr_matrix(ad),
        b_discrete=sp.csr_matrix(bd),
        input_mask=input_mask,
    )


class Trajectory(NamedTuple):
    times: np.ndarray
    states: np.ndarray  # one row per time


def simulate_nonlinear(
    grid: GridModel, x0, u: InputSequence | None, h, substeps, input_mask=None
) -> Trajectory:
    """Classical RK4 integration of the swing equations with zero-order-hold
    control: the input is constant within each control step of length h and
    each control step takes `substeps` RK4 stages."""
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    grid = grid.balanced()
    dyn = _Dynamics(grid)
    ns = grid.state_dim
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (ns,):
        raise ValueError(f"state has shape {x.shape}, expected {(ns,)}")
    if input_mask is None:
        input_mask = np.ones(ns, dtype=bool)
    mask_idx = np.flatnonzero(input_mask)
    layout = grid.layout(input_mask)
    if u is None:
        steps = 1
        u_time = np.zeros(len(mask_idx))
    else:
        u_time = ctl.to_time_major(u, layout, _horizon(u, layout)).values
        steps = _horizon(u, layout)
    total_u = len(mask_idx)
    dt = h / substeps
    times = [0.0]
    states = [x.copy()]
    for k in range(steps):
        u_state = np.zeros(ns)
        if u is not None:
            u_state[mask_idx] = u_time[k * total_u:(k + 1) * total_u]
        for s in range(substeps):
            k1 = dyn.rhs(x, u_state)
            k2 = dyn.rhs(x + 0.5 * dt * k1, u_state)
            k3 = dyn.rhs(x + 0.5 * dt * k2, u_state)
            k4 = dyn.rhs(x + dt * k3, u_state)
            x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise ConvergenceError(
                    f"nonlinear state blew up at control step {k}, substep {s}"
                )
            times.append(k * h + (s + 1) * dt)
            states.append(x.copy())
    return Trajectory(np.array(times), np.array(states))


def _horizon(u: InputSequence, layout: BlockLayout) -> int:
    total = layout.total_input
    if total == 0 or len(u.values) % total:
        raise ValueError("input length is not a multiple of the channel count")
    return len(u.values) // total


@dataclass(frozen=True)
class GridControlSetup:
    """Everything reusable across perturbation seeds for one (f, q) pair."""

    grid: GridModel
    lin: LinearizedGrid
    layout: BlockLayout
    controller: ctl.LocalizedController
    f: int
    q: int
    h: float
    substeps: int
    input_mask: np.ndarray


class GridRunResult(NamedTuple):
    eps_linear: float
    eps_nonlinear: float
    eps_uncontrolled: float


def prepare_grid_control(
    grid: GridModel, f, q, h=0.1, substeps=10, drop_tol=1e-6,
    input_mask=None, delta=0.0, spai_threads=1,
) -> GridControlSetup:
    grid = grid.balanced()
    eq = solve_equilibrium(grid)
    lin = discretize(linearize(grid, eq), h, input_mask, drop_tol=drop_tol)
    layout = grid.layout(lin.input_mask)
    problem = ControlProblem(
        a=lin.a_discrete, b=lin.b_discrete, f=f,
        x0=np.zeros(grid.state_dim), xd=np.zeros(grid.state_dim), layout=layout,
    )
    controller = ctl.build_localized(problem, q, delta=delta, spai_threads=spai_threads)
    return GridControlSetup(
        grid=grid, lin=lin, layout=layout, controller=controller,
        f=f, q=q, h=h, substeps=substeps, input_mask=lin.input_mask,
    )


def run_perturbation(setup: GridControlSetup, perturb, seed) -> GridRunResult:
    """One perturbation-recovery run in deviation coordinates (xd = 0).

    The initial deviation flips a fair coin per state variable and moves it
    by +/- perturb. Errors are relative to the initial deviation norm; the
    nonlinear errors drive the full swing dynamics with the inputs computed
    from the linearization.
    """
    grid = setup.grid
    ns = grid.state_dim
    rng = np.random.default_rng(seed)
    dev0 = perturb * rng.choice([-1.0, 1.0], size=ns)
    dev_norm = float(np.linalg.norm(dev0))
    if dev_norm == 0.0:
        return GridRunResult(0.0, 0.0, 0.0)
    problem = ControlProblem(
        a=setup.lin.a_discrete, b=setup.lin.b_discrete, f=setup.f,
        x0=dev0, xd=np.zeros(ns), layout=setup.layout,
    )
    u = ctl.apply_localized(setup.controller, dev0, np.zeros(ns))
    eps_linear = ctl.control_error(problem, u)
    x_star = state_vector(grid, setup.lin.equilibrium)
    traj = simulate_nonlinear(
        grid, x_star + dev0, u, setup.h, setup.substeps, setup.input_mask
    )
    eps_nonlinear = float(np.linalg.norm(traj.states[-1] - x_star) / dev_norm)
    zero_u = InputSequence(np.zeros_like(u.values), u.ordering)
    traj0 = simulate_nonlinear(
        grid, x_star + dev0, zero_u, setup.h, setup.substeps, setup.input_mask
    )
    eps_uncontrolled = float(np.linalg.norm(traj0.states[-1] - x_star) / dev_norm)
    return GridRunResult(eps_linear, eps_nonlinear, eps_uncontrolled)


def grid_control_experiment(grid: GridModel, f, q, perturb, seed, **kwargs):
    """One-shot localized-control experiment on the grid linearization.

    Returns (result, setup); the setup carries the controller and its SINs.
    """
    setup = prepare_grid_control(grid, f, q, **kwargs)
    return run_perturbation(setup, perturb, seed), setup


# ---------------------------------------------------------------------------
# Grid file format
# ---------------------------------------------------------------------------

_SECTION_COLUMNS = {"generators": 4, "buses": 3, "lines": 3}

GRID_FILE_HEADER = """\
# power grid description
# [generators]: node_id inertia(s^2) damping(s) power(pu)
# [buses]:      node_id damping(s) power(pu)
# [lines]:      node_a node_b susceptance(pu)
"""


def load_grid(path) -> GridModel:
    """Parse and validate a grid file (sections [generators]/[buses]/[lines])."""
    gens, buses, lines = [], [], []
    section = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            if text.startswith("["):
                name = text.strip("[]").strip()
                if name not in _SECTION_COLUMNS:
                    raise ValueError(f"{path}: line {lineno}: unknown section [{name}]")
                section = name
                continue
            if section is None:
                raise ValueError(f"{path}: line {lineno}: data before any section")
            cols = text.split()
            if len(cols) != _SECTION_COLUMNS[section]:
                raise ValueError(
                    f"{path}: line {lineno}: expected "
                    f"{_SECTION_COLUMNS[section]} columns, got {len(cols)}"
                )
            try:
                if section == "generators":
                    gens.append(Generator(int(cols[0]), *map(float, cols[1:])))
                elif section == "buses":
                    buses.append(Bus(int(cols[0]), *map(float, cols[1:])))
                else:
                    lines.append(Line(int(cols[0]), int(cols[1]), float(cols[2])))
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    try:
        model = GridModel(tuple(gens), tuple(buses), tuple(lines))
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    return model.balanced()


def save_grid(path, grid: GridModel):
    with open(path, "w") as fh:
        fh.write(GRID_FILE_HEADER)
        fh.write("[generators]\n")
        for g in grid.generators:
            fh.write(f"{g.node} {g.inertia!r} {g.damping!r} {g.power!r}\n")
        fh.write("[buses]\n")
        for b in grid.buses:
            fh.write(f"{b.node} {b.damping!r} {b.power!r}\n")
        fh.write("[lines]\n")
        for ln in grid.lines:
            fh.write(f"{ln.a} {ln.b} {ln.susceptance!r}\n")
