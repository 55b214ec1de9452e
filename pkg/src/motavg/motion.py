"""Event-driven Monte Carlo of classical atom trajectories in the cell.

Atoms fly ballistically between wall hits.  Wall-crossing times are found
by exact linear solves against the six boundary planes, so collision
statistics carry no time-step bias; the uniform sample grid is filled by
linear interpolation inside each free-flight (or wall-dwell) segment.

Reproducibility: atom ``i`` draws from a dedicated bit stream spawned as
``SeedSequence(master_seed, spawn_key=(i,))``, which makes every
trajectory a pure function of ``(master_seed, i)`` independent of how the
ensemble is split over workers.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import BinaryIO, Iterator, Sequence

import numpy as np

from .errors import DataError, ResourceLimitError
from .model import CellConfig, K_BOLTZMANN

__all__ = [
    "WallModel",
    "Trajectory",
    "TrajState",
    "sample_initial",
    "initial_state",
    "propagate",
    "generate_trajectory",
    "generate_ensemble",
    "iter_trajectories",
    "dump_trajectories",
    "load_trajectories",
    "DEFAULT_DT",
    "DEFAULT_MEMORY_CAP",
]

DEFAULT_DT = 10e-9  # s; resolves the ~0.3 us beam transit comfortably
DEFAULT_MEMORY_CAP = 1 << 30  # bytes for a fully materialized ensemble

# Snap tolerance (relative to the box half-size) used to recognize which
# boundary plane a just-computed crossing point lies on.
_HIT_RTOL = 1e-12


class WallModel(Enum):
    """Velocity update applied at a wall hit."""

    THERMALIZING = "thermalizing"
    BALLISTIC = "ballistic"


@dataclass
class Trajectory:
    """One atom's sampled motion on a uniform time grid."""

    seed: int
    sample_times: np.ndarray  # (n,) s
    positions: np.ndarray  # (n, 3) m
    velocities: np.ndarray  # (n, 3) m/s
    collision_count: int
    atom_index: int = 0


@dataclass
class TrajState:
    """Mutable integration state for a single atom.

    ``pending_vel`` is non-None while the atom sits adsorbed on a wall;
    it holds the velocity to restore when the dwell ends at
    ``dwell_until``.
    """

    t: float
    pos: np.ndarray
    vel: np.ndarray
    rng: np.random.Generator
    bounds: np.ndarray  # (3,) half-sizes of the box
    sigma: float  # sqrt(k_B T / m), per-component thermal spread
    collision_count: int = 0
    dwell_until: float = 0.0
    pending_vel: np.ndarray | None = None


def _sigma(cell: CellConfig) -> float:
    return math.sqrt(K_BOLTZMANN * cell.temperature / cell.atom_mass)


def _bounds(cell: CellConfig) -> np.ndarray:
    return np.array([cell.half_width_L, cell.half_width_L, cell.half_length_Lz])


def _draw_initial(rng: np.random.Generator, cell: CellConfig):
    bounds = _bounds(cell)
    pos = rng.uniform(-bounds, bounds)
    vel = rng.normal(0.0, _sigma(cell), size=3)
    return pos, vel


def sample_initial(seed: int | np.random.SeedSequence, cell: CellConfig):
    """Uniform position in the box, Maxwell-Boltzmann velocity.

    Returns ``(position, velocity)`` as float arrays of shape (3,).
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    return _draw_initial(rng, cell)


def initial_state(seed: int | np.random.SeedSequence, cell: CellConfig) -> TrajState:
    """Build a ready-to-propagate state with a fresh initial draw."""
    rng = np.random.Generator(np.random.PCG64(seed))
    pos, vel = _draw_initial(rng, cell)
    return TrajState(t=0.0, pos=pos, vel=vel, rng=rng,
                     bounds=_bounds(cell), sigma=_sigma(cell))


def _thermal_reemission(rng: np.random.Generator, sigma: float, axis: int,
                        inward: float) -> np.ndarray:
    """Diffuse thermal re-emission from a wall.

    The component along the inward normal is drawn flux-weighted
    (Rayleigh, sigma*sqrt(-2 ln U)) and the tangential components from
    the plain Gaussian.  This is the unique re-emission law that leaves
    the bulk Maxwell-Boltzmann distribution stationary for a wall that
    forgets the incoming atom: faster atoms hit walls proportionally more
    often, so the outgoing flux must be speed-weighted to compensate.
    """
    vel = rng.normal(0.0, sigma, size=3)
    u = rng.random()
    if u <= 0.0:  # probability ~2^-53, but would give infinite speed
        u = np.finfo(float).tiny
    vel[axis] = inward * sigma * math.sqrt(-2.0 * math.log(u))
    return vel


def _segment_end(state: TrajState, trap_time: float) -> float:
    """Absolute time at which the current uniform-motion segment ends.

    Pure (no RNG use), so callers may stop short of the returned time
    without perturbing the event sequence.
    """
    if state.pending_vel is not None:
        return state.dwell_until
    t_hit = math.inf
    for ax in range(3):
        v = state.vel[ax]
        if v == 0.0:
            continue
        target = state.bounds[ax] if v > 0 else -state.bounds[ax]
        t_ax = (target - state.pos[ax]) / v
        if t_ax < t_hit:
            t_hit = t_ax
    return state.t + max(t_hit, 0.0)


def _apply_event(state: TrajState, wall: WallModel, trap_time: float) -> None:
    """Process the event scheduled at the current ``state.t``."""
    if state.pending_vel is not None:
        state.vel = state.pending_vel
        state.pending_vel = None
        return
    # Wall hit: identify boundary plane(s) the atom sits on and snap.
    hit_axes = [ax for ax in range(3)
                if abs(state.pos[ax]) >= state.bounds[ax] * (1.0 - _HIT_RTOL)]
    if not hit_axes:  # rounding pathology; take the closest plane
        hit_axes = [int(np.argmax(np.abs(state.pos) / state.bounds))]
    for ax in hit_axes:
        state.pos[ax] = math.copysign(state.bounds[ax], state.pos[ax])
    state.collision_count += 1
    if wall is WallModel.BALLISTIC:
        new_vel = state.vel.copy()
        for ax in hit_axes:
            new_vel[ax] = -new_vel[ax]
    else:
        primary = hit_axes[0]
        inward = -math.copysign(1.0, state.pos[primary])
        new_vel = _thermal_reemission(state.rng, state.sigma, primary, inward)
    # Corner safety: every at-boundary component must point back inside.
    for ax in hit_axes:
        if new_vel[ax] * state.pos[ax] > 0:
            new_vel[ax] = -new_vel[ax]
    if trap_time > 0.0:
        state.dwell_until = state.t + state.rng.exponential(trap_time)
        state.pending_vel = new_vel
        state.vel = np.zeros(3)
    else:
        state.vel = new_vel


def propagate(traj_state: TrajState, dt: float, wall: WallModel,
              trap_time: float = 0.0) -> TrajState:
    """Advance the state by exactly ``dt`` through any number of events.

    Wall crossings are located analytically, so ``dt`` may straddle many
    collisions without any penetration of the boundary.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    t_target = traj_state.t + dt
    while True:
        t1 = _segment_end(traj_state, trap_time)
        if t1 >= t_target:
            traj_state.pos = traj_state.pos + traj_state.vel * (t_target - traj_state.t)
            traj_state.t = t_target
            return traj_state
        traj_state.pos = traj_state.pos + traj_state.vel * (t1 - traj_state.t)
        traj_state.t = t1
        _apply_event(traj_state, wall, trap_time)


def _atom_seed(master_seed: int, atom_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master_seed, spawn_key=(atom_index,))


def generate_trajectory(atom_index: int, master_seed: int, duration: float,
                        dt: float, cell: CellConfig,
                        wall: WallModel) -> Trajectory:
    """Simulate one atom and sample it on a uniform grid.

    The per-atom bit stream is spawned from ``(master_seed, atom_index)``
    so the result does not depend on generation order or thread count.
    """
    ss = _atom_seed(master_seed, atom_index)
    rng = np.random.Generator(np.random.PCG64(ss))
    pos, vel = _draw_initial(rng, cell)
    state = TrajState(t=0.0, pos=pos, vel=vel, rng=rng,
                      bounds=_bounds(cell), sigma=_sigma(cell))
    trap_time = cell.trap_time

    n = int(math.floor(duration / dt + 1e-9)) + 1
    times = np.arange(n) * dt
    positions = np.empty((n, 3))
    velocities = np.empty((n, 3))
    filled = 0
    while filled < n:
        t0 = state.t
        pos0 = state.pos
        vel0 = state.vel
        t1 = _segment_end(state, trap_time)
        if math.isfinite(t1):
            k1 = min(n, int(math.ceil(t1 / dt - 1e-9)))
        else:
            k1 = n
        if k1 > filled:
            tau = times[filled:k1] - t0
            positions[filled:k1] = pos0[None, :] + vel0[None, :] * tau[:, None]
            velocities[filled:k1] = vel0[None, :]
            filled = k1
        if filled >= n:
            break
        state.pos = pos0 + vel0 * (t1 - t0)
        state.t = t1
        _apply_event(state, wall, trap_time)
    return Trajectory(
        seed=int(ss.generate_state(1, dtype=np.uint64)[0]),
        sample_times=times,
        positions=positions,
        velocities=velocities,
        collision_count=state.collision_count,
        atom_index=atom_index,
    )


def _check_cap(n_atoms: int, duration: float, dt: float, memory_cap: int) -> None:
    n_samples = int(math.floor(duration / dt + 1e-9)) + 1
    need = n_atoms * n_samples * 7 * 8  # times + two 3-vectors, float64
    if need > memory_cap:
        raise ResourceLimitError(
            f"ensemble of {n_atoms} atoms x {n_samples} samples needs "
            f"{need / 1e9:.2f} GB > cap {memory_cap / 1e9:.2f} GB; "
            "use iter_trajectories() for streaming access"
        )


def iter_trajectories(n_atoms: int, duration: float, dt: float,
                      cell: CellConfig, wall: WallModel,
                      master_seed: int) -> Iterator[Trajectory]:
    """Stream trajectories one at a time (constant memory)."""
    for i in range(n_atoms):
        yield generate_trajectory(i, master_seed, duration, dt, cell, wall)


def generate_ensemble(n_atoms: int, duration: float, dt: float,
                      cell: CellConfig, wall: WallModel, master_seed: int,
                      memory_cap: int = DEFAULT_MEMORY_CAP,
                      threads: int = 1) -> list[Trajectory]:
    """Materialize ``n_atoms`` independent trajectories, in atom order.

    Raises
    ------
    ResourceLimitError
        If the stored ensemble would exceed ``memory_cap`` bytes.
    """
    if n_atoms < 1:
        raise ValueError("n_atoms must be >= 1")
    _check_cap(n_atoms, duration, dt, memory_cap)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(
                lambda i: generate_trajectory(i, master_seed, duration, dt,
                                              cell, wall),
                range(n_atoms)))
    return list(iter_trajectories(n_atoms, duration, dt, cell, wall,
                                  master_seed))


# ---------------------------------------------------------------------------
# Binary trajectory dump: little-endian columnar layout with a versioned
# header, so ensembles can be archived and reloaded bit-exactly.
# ---------------------------------------------------------------------------

_DUMP_MAGIC = b"MAVGTRJ1"


def dump_trajectories(trajectories: Sequence[Trajectory], fh: BinaryIO) -> None:
    """Write trajectories as little-endian binary columns."""
    trajectories = list(trajectories)
    fh.write(_DUMP_MAGIC)
    fh.write(struct.pack("<I", len(trajectories)))
    for traj in trajectories:
        n = traj.sample_times.shape[0]
        fh.write(struct.pack("<QqII", traj.seed & (2**64 - 1),
                             traj.atom_index, traj.collision_count, n))
        fh.write(np.ascontiguousarray(traj.sample_times, "<f8").tobytes())
        fh.write(np.ascontiguousarray(traj.positions, "<f8").tobytes())
        fh.write(np.ascontiguousarray(traj.velocities, "<f8").tobytes())


def load_trajectories(fh: BinaryIO) -> list[Trajectory]:
    """Read back a trajectory dump written by :func:`dump_trajectories`."""
    magic = fh.read(len(_DUMP_MAGIC))
    if magic != _DUMP_MAGIC:
        raise DataError("not a trajectory dump (bad magic)")
    (count,) = struct.unpack("<I", fh.read(4))
    out = []
    for _ in range(count):
        seed, atom_index, collisions, n = struct.unpack("<QqII", fh.read(24))
        times = np.frombuffer(fh.read(8 * n), "<f8").copy()
        positions = np.frombuffer(fh.read(24 * n), "<f8").reshape(n, 3).copy()
        velocities = np.frombuffer(fh.read(24 * n), "<f8").reshape(n, 3).copy()
        out.append(Trajectory(seed=seed, sample_times=times,
                              positions=positions, velocities=velocities,
                              collision_count=collisions,
                              atom_index=atom_index))
    return out
