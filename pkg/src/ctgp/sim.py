"""Closed-loop simulation: sinusoidal references, fixed-step integrators,
seeded stochastic ensembles and a Lyapunov-function trace.

Deterministic runs use classic fixed-step RK4 with the controller evaluated
at every stage.  Stochastic runs use Euler-Maruyama: the controller output is
held over the step, the drift torque drives the rigid-body dynamics, and the
diagonal diffusion (GP posterior std) enters the velocity update through
H(q)^-1 scaled by sqrt(dt).  A controller that reports no diffusion at all
makes the Euler-Maruyama update an exact explicit-Euler step (no noise term
is added, no random numbers are drawn).

Ensembles run all realizations in lockstep with one generator per run,
seeded base_seed + i, so results do not depend on scheduling and rerunning a
single realization reproduces its ensemble member.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .control import ReferenceSample
from .dynamics import JointState, ManipulatorModel


class DivergenceError(Exception):
    """Raised when every requested realization diverged."""


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Per-joint sinusoid q_d,i(t) = A_i sin(w_i t + phi_i).

    frequency_unit selects how `frequency` is read: cycles per second
    ("hz", w = 2 pi f) or angular rate ("rad_per_s", w = f).
    """

    amplitude: np.ndarray
    frequency: np.ndarray
    phase: np.ndarray
    frequency_unit: str = "hz"

    def __post_init__(self):
        for name in ("amplitude", "frequency", "phase"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if arr.ndim != 1 or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be a finite 1-d array")
            object.__setattr__(self, name, arr)
        if not (self.amplitude.shape == self.frequency.shape == self.phase.shape):
            raise ValueError("amplitude, frequency, phase must share shape")
        if self.frequency_unit not in ("hz", "rad_per_s"):
            raise ValueError(f"unknown frequency_unit {self.frequency_unit!r}")

    @property
    def n(self) -> int:
        return self.amplitude.shape[0]

    @property
    def omega(self) -> np.ndarray:
        if self.frequency_unit == "hz":
            return 2.0 * math.pi * self.frequency
        return self.frequency

    def sample(self, t: float) -> ReferenceSample:
        w = self.omega
        arg = w * t + self.phase
        s, c = np.sin(arg), np.cos(arg)
        return ReferenceSample(
            q=self.amplitude * s,
            qd=self.amplitude * w * c,
            qdd=-self.amplitude * w**2 * s,
        )

    def bounds(self) -> tuple[float, float, float]:
        """(c_q, c_qd, c_qdd): Euclidean norms of the per-joint envelopes."""
        w = self.omega
        return (
            float(np.linalg.norm(self.amplitude)),
            float(np.linalg.norm(self.amplitude * w)),
            float(np.linalg.norm(self.amplitude * w**2)),
        )


def reference_sinusoid(amplitude, frequency, phase, t: float,
                       frequency_unit: str = "hz") -> ReferenceSample:
    traj = ReferenceTrajectory(amplitude, frequency, phase, frequency_unit)
    return traj.sample(t)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    duration: float = 10.0
    integrator: str = "rk4"  # "rk4" | "euler-maruyama"
    realizations: int = 1
    base_seed: int = 0
    lyapunov_epsilon: float = 0.1
    lyapunov_trace: bool = False
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.dt <= 0 or not math.isfinite(self.dt):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.duration < self.dt:
            raise ValueError("duration must cover at least one step")
        if self.integrator not in ("rk4", "euler-maruyama"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.realizations < 1:
            raise ValueError("realizations must be >= 1")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))


@dataclass
class SimResult:
    """Recorded trajectory on the uniform grid t_k = k dt.

    tau holds the drift (commanded) torque; in stochastic mode the diffusion
    is not a recorded torque.  Divergent runs carry the partial trace up to
    the last finite state and diverged=True.
    """

    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    e: np.ndarray
    ed: np.ndarray
    tau: np.ndarray
    gp_mean: np.ndarray
    gp_std: np.ndarray
    seed: int
    diverged: bool = False
    v: np.ndarray | None = None
    lyapunov_ball_radius: float | None = None
    lyapunov_indefinite: bool = False

    @property
    def n(self) -> int:
        return self.q.shape[1]

    def error_norms(self) -> np.ndarray:
        """||(e, ed)|| per step."""
        return np.sqrt(np.sum(self.e**2, axis=1) + np.sum(self.ed**2, axis=1))

    def rmse(self, t_skip: float = 0.0) -> np.ndarray:
        """Per-joint root-mean-square of e over t >= t_skip."""
        mask = self.t >= t_skip - 1e-12
        if not np.any(mask):
            raise ValueError(f"t_skip {t_skip} leaves no samples")
        return np.sqrt(np.mean(self.e[mask] ** 2, axis=0))

    def to_csv(self, path, manifest: tuple[str, ...] = ()):
        n = self.n
        cols = ["t"]
        for base in ("q", "qd", "e", "ed", "tau", "gp_mean", "gp_std"):
            cols += [f"{base}_{j + 1}" for j in range(n)]
        arrays = [self.t[:, None], self.q, self.qd, self.e, self.ed, self.tau,
                  self.gp_mean, self.gp_std]
        if self.v is not None:
            cols.append("v")
            arrays.append(self.v[:, None])
        data = np.concatenate(arrays, axis=1)
        lines = list(manifest)
        lines.append(",".join(cols))
        for row in data:
            lines.append(",".join(repr(float(x)) for x in row))
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


@dataclass
class EnsembleStats:
    """Per-step mean/std over completed realizations plus per-run RMSE."""

    t: np.ndarray
    mean_q: np.ndarray
    std_q: np.ndarray
    mean_qd: np.ndarray
    std_qd: np.ndarray
    rmse: np.ndarray            # (runs, n), full-trace window, divergent rows NaN
    divergent_runs: list[int] = field(default_factory=list)
    realizations: int = 1

    @property
    def std_valid(self) -> bool:
        # a single realization has no spread estimate
        return self.realizations - len(self.divergent_runs) >= 2

    def to_csv(self, path, manifest: tuple[str, ...] = ()):
        n = self.mean_q.shape[1]
        cols = ["t"]
        for base in ("mean_q", "std_q", "mean_qd", "std_qd"):
            cols += [f"{base}_{j + 1}" for j in range(n)]
        data = np.concatenate(
            [self.t[:, None], self.mean_q, self.std_q, self.mean_qd, self.std_qd],
            axis=1,
        )
        lines = list(manifest)
        lines.append(",".join(cols))
        for row in data:
            lines.append(",".join(repr(float(x)) for x in row))
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def _check_modes(controller, config: SimConfig):
    mode = getattr(controller, "mode", "deterministic")
    if mode == "stochastic" and config.integrator != "euler-maruyama":
        raise ValueError("stochastic controllers require the euler-maruyama integrator")
    return mode


def simulate(model: ManipulatorModel, controller, ref: ReferenceTrajectory,
             config: SimConfig, seed: int | None = None,
             q0: np.ndarray | None = None, qd0: np.ndarray | None = None) -> SimResult:
    """Integrate one closed-loop run on the fixed grid.

    The run aborts with diverged=True (partial trace kept) when any state
    component leaves [-threshold, threshold] or turns non-finite.
    """
    _check_modes(controller, config)
    n = model.n
    if ref.n != n:
        raise ValueError(f"reference dimension {ref.n} != model dimension {n}")
    run_seed = config.base_seed if seed is None else seed
    rng = np.random.default_rng(run_seed)
    steps = config.steps
    dt = config.dt

    q = np.zeros(n) if q0 is None else np.array(q0, dtype=float)
    qd = np.zeros(n) if qd0 is None else np.array(qd0, dtype=float)

    t_arr = np.arange(steps + 1) * dt
    rec = {k: np.zeros((steps + 1, n)) for k in
           ("q", "qd", "e", "ed", "tau", "gp_mean", "gp_std")}
    diverged = False
    last = steps

    for k in range(steps + 1):
        t = t_arr[k]
        refk = ref.sample(t)
        out = controller.output(JointState(q, qd), refk, include_std=True)
        rec["q"][k] = q
        rec["qd"][k] = qd
        rec["e"][k] = q - refk.q
        rec["ed"][k] = qd - refk.qd
        rec["tau"][k] = out.drift
        rec["gp_mean"][k] = out.gp_mean
        rec["gp_std"][k] = out.gp_std
        if k == steps:
            break
        if config.integrator == "rk4":
            q_new, qd_new = _rk4_step(model, controller, ref, q, qd, t, dt, out)
        else:
            q_new, qd_new = _em_step(model, q, qd, dt, out, rng)
        if not _finite_state(q_new, qd_new, config.divergence_threshold):
            diverged = True
            last = k
            break
        q, qd = q_new, qd_new

    sl = slice(0, last + 1)
    result = SimResult(
        t=t_arr[sl], q=rec["q"][sl], qd=rec["qd"][sl], e=rec["e"][sl],
        ed=rec["ed"][sl], tau=rec["tau"][sl], gp_mean=rec["gp_mean"][sl],
        gp_std=rec["gp_std"][sl], seed=run_seed, diverged=diverged,
    )
    if config.lyapunov_trace:
        attach_lyapunov(result, model, controller.gains, config.lyapunov_epsilon)
    return result


def _finite_state(q, qd, threshold) -> bool:
    return bool(
        np.all(np.isfinite(q)) and np.all(np.isfinite(qd))
        and np.max(np.abs(q)) <= threshold and np.max(np.abs(qd)) <= threshold
    )


def _rk4_step(model, controller, ref, q, qd, t, dt, out0):
    """One RK4 step; the controller is re-evaluated at every stage."""

    def rate(qs, qds, ts, stage_out=None):
        if stage_out is None:
            stage_out = controller.output(JointState(qs, qds), ref.sample(ts),
                                          include_std=False)
        return qds, model.forward_dynamics(qs, qds, stage_out.drift)

    k1q, k1v = rate(q, qd, t, out0)
    k2q, k2v = rate(q + 0.5 * dt * k1q, qd + 0.5 * dt * k1v, t + 0.5 * dt)
    k3q, k3v = rate(q + 0.5 * dt * k2q, qd + 0.5 * dt * k2v, t + 0.5 * dt)
    k4q, k4v = rate(q + dt * k3q, qd + dt * k3v, t + dt)
    q_new = q + (dt / 6.0) * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
    qd_new = qd + (dt / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return q_new, qd_new


def _em_step(model, q, qd, dt, out, rng):
    """Euler-Maruyama with the controller held over the step.

    diffusion=None adds no noise term at all, making the update an exact
    explicit-Euler step.
    """
    qdd = model.forward_dynamics(q, qd, out.drift)
    q_new = q + dt * qd
    qd_new = qd + dt * qdd
    if out.diffusion is not None:
        xi = rng.standard_normal(qd.shape[-1])
        h = model.mass_matrix(q)
        kick = np.linalg.solve(h, (out.diffusion @ xi)[..., None])[..., 0]
        qd_new = qd_new + math.sqrt(dt) * kick
    return q_new, qd_new


def run_ensemble(model: ManipulatorModel, controller, ref: ReferenceTrajectory,
                 config: SimConfig) -> tuple[EnsembleStats, list[SimResult]]:
    """Integrate `realizations` runs in lockstep, seeds base_seed + i.

    Vectorized over runs; each run draws from its own generator in step
    order, so a run reproduces `simulate` with the same seed to floating
    round-off (BLAS batching), and divergence freezes a run without
    disturbing the others' streams.  Divergent runs are returned truncated
    and excluded from the statistics; if every run diverges a
    DivergenceError is raised.
    """
    mode = _check_modes(controller, config)
    n = model.n
    runs = config.realizations
    steps = config.steps
    dt = config.dt
    rngs = [np.random.default_rng(config.base_seed + i) for i in range(runs)]

    q = np.zeros((runs, n))
    qd = np.zeros((runs, n))
    active = np.ones(runs, dtype=bool)
    div_step = np.full(runs, steps + 1, dtype=int)  # first invalid index

    t_arr = np.arange(steps + 1) * dt
    rec = {k: np.zeros((runs, steps + 1, n)) for k in
           ("q", "qd", "e", "ed", "tau", "gp_mean", "gp_std")}

    for k in range(steps + 1):
        t = t_arr[k]
        refk = ref.sample(t)
        out = controller.output(JointState(q, qd), refk, include_std=True)
        rec["q"][:, k] = q
        rec["qd"][:, k] = qd
        rec["e"][:, k] = q - refk.q
        rec["ed"][:, k] = qd - refk.qd
        rec["tau"][:, k] = out.drift
        rec["gp_mean"][:, k] = out.gp_mean
        rec["gp_std"][:, k] = out.gp_std
        if k == steps:
            break
        if config.integrator == "rk4":
            q_new, qd_new = _rk4_step(model, controller, ref, q, qd, t, dt, out)
        else:
            qdd = model.forward_dynamics(q, qd, out.drift)
            q_new = q + dt * qd
            qd_new = qd + dt * qdd
            if out.diffusion is not None:
                xi = np.zeros((runs, n))
                for i in range(runs):
                    if active[i]:
                        xi[i] = rngs[i].standard_normal(n)
                h = model.mass_matrix(q)
                kick = np.linalg.solve(h, np.einsum("rij,rj->ri", out.diffusion, xi)[..., None])[..., 0]
                qd_new = qd_new + math.sqrt(dt) * kick
        ok = (
            np.all(np.isfinite(q_new), axis=1)
            & np.all(np.isfinite(qd_new), axis=1)
            & (np.max(np.abs(np.where(np.isfinite(q_new), q_new, 0.0)), axis=1)
               <= config.divergence_threshold)
            & (np.max(np.abs(np.where(np.isfinite(qd_new), qd_new, 0.0)), axis=1)
               <= config.divergence_threshold)
        )
        newly_dead = active & ~ok
        div_step[newly_dead] = k + 1
        active = active & ok
        # frozen runs keep their last finite state
        upd = active[:, None]
        q = np.where(upd, q_new, q)
        qd = np.where(upd, qd_new, qd)

    results = []
    rmse = np.full((runs, n), np.nan)
    for i in range(runs):
        end = min(div_step[i], steps + 1)
        res = SimResult(
            t=t_arr[:end], q=rec["q"][i, :end], qd=rec["qd"][i, :end],
            e=rec["e"][i, :end], ed=rec["ed"][i, :end], tau=rec["tau"][i, :end],
            gp_mean=rec["gp_mean"][i, :end], gp_std=rec["gp_std"][i, :end],
            seed=config.base_seed + i, diverged=bool(div_step[i] <= steps),
        )
        results.append(res)
        if not res.diverged:
            rmse[i] = res.rmse(0.0)

    complete = [i for i in range(runs) if not results[i].diverged]
    divergent = [i for i in range(runs) if results[i].diverged]
    if not complete:
        raise DivergenceError(f"all {runs} realizations diverged")
    qc = rec["q"][complete]
    qdc = rec["qd"][complete]
    ddof_ok = len(complete) >= 2
    stats = EnsembleStats(
        t=t_arr,
        mean_q=np.mean(qc, axis=0),
        std_q=np.std(qc, axis=0, ddof=1) if ddof_ok else np.zeros_like(qc[0]),
        mean_qd=np.mean(qdc, axis=0),
        std_qd=np.std(qdc, axis=0, ddof=1) if ddof_ok else np.zeros_like(qdc[0]),
        rmse=rmse,
        divergent_runs=divergent,
        realizations=runs,
    )
    return stats, results


# ---------------------------------------------------------------------------
# Lyapunov trace


@dataclass
class LyapunovTrace:
    v: np.ndarray
    ball_radius: float
    indefinite_warning: bool


def lyapunov_trace(result: SimResult, model: ManipulatorModel, gains,
                   epsilon: float = 0.1) -> LyapunovTrace:
    """V(t) = 1/2 ed' H ed + 1/2 e' Kp e + eps e' H ed along a trajectory.

    The cross term makes V a Lyapunov candidate only while the block form
    [[Kp, eps H], [eps H, H]] / 2 stays positive definite; if any sampled
    instant violates that, indefinite_warning is set.  Also reports the
    smallest empirically consistent error-ball radius: with s_j the error
    norms and M_j = max_{i >= j} s_i, a candidate entry index j needs
    M_j < min_{i < j} s_i, and the radius is the smallest such M_j.
    """
    e, ed = result.e, result.ed
    h = model.mass_matrix(result.q)
    kp = gains.kp
    v = (
        0.5 * np.einsum("ti,tij,tj->t", ed, h, ed)
        + 0.5 * np.einsum("ti,ij,tj->t", e, kp, e)
        + epsilon * np.einsum("ti,tij,tj->t", e, h, ed)
    )
    n = result.n
    block = np.zeros((e.shape[0], 2 * n, 2 * n))
    block[:, :n, :n] = 0.5 * kp
    block[:, n:, n:] = 0.5 * h
    block[:, :n, n:] = 0.5 * epsilon * h
    block[:, n:, :n] = 0.5 * epsilon * np.swapaxes(h, -1, -2)
    indefinite = bool(np.min(np.linalg.eigvalsh(block)) <= 0)

    s = result.error_norms()
    m = np.maximum.accumulate(s[::-1])[::-1]  # M_j = sup of the tail
    prefix = np.concatenate([[np.inf], np.minimum.accumulate(s)[:-1]])
    valid = m < prefix
    radius = float(np.min(m[valid])) if np.any(valid) else float(m[0])
    return LyapunovTrace(v=v, ball_radius=radius, indefinite_warning=indefinite)


def attach_lyapunov(result: SimResult, model: ManipulatorModel, gains,
                    epsilon: float = 0.1) -> LyapunovTrace:
    trace = lyapunov_trace(result, model, gains, epsilon)
    result.v = trace.v
    result.lyapunov_ball_radius = trace.ball_radius
    result.lyapunov_indefinite = trace.indefinite_warning
    return trace
