"""Exact multi-output Gaussian process regression with a squared-exponential kernel.

Each output dimension is an independent zero-mean GP over a shared set of
training inputs.  Fitting factors the regularized Gram matrix once per output
(Cholesky); afterwards mean prediction is O(m) and variance prediction O(m^2)
per query.  Hyperparameter selection maximizes the log marginal likelihood by
gradient ascent in log-parameter space.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.linalg.lapack import dpotrf

_LOG_2PI = math.log(2.0 * math.pi)


class GPError(Exception):
    """Numerical failure inside the GP machinery."""


class CholeskyError(GPError):
    """Gram matrix not positive definite for some output dimension."""

    def __init__(self, output_index: int, pivot: float):
        super().__init__(
            f"Cholesky factorization failed for output {output_index}: "
            f"smallest pivot {pivot:.6e}; the regularized Gram matrix is not "
            f"positive definite (increase noise_variance or deduplicate inputs)"
        )
        self.output_index = output_index
        self.pivot = pivot


@dataclass(frozen=True)
class Hyperparameters:
    """Squared-exponential kernel hyperparameters for one output dimension.

    Attributes
    ----------
    length_scale : float
        Isotropic length scale, > 0.
    signal_variance : float
        Kernel amplitude sigma_f^2, >= 0.
    noise_variance : float
        Observation-noise variance sigma_n^2 added to the Gram diagonal,
        >= 0.  Strict positivity is what guarantees invertibility of the
        regularized Gram matrix; zero is accepted and fit() reports the
        singular case through CholeskyError.
    """

    length_scale: float = 1.0
    signal_variance: float = 1.0
    noise_variance: float = 1e-6

    def __post_init__(self):
        for name in ("length_scale", "signal_variance", "noise_variance"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ValueError(f"{name} must be a finite number, got {value!r}")
        if self.length_scale <= 0:
            raise ValueError(f"length_scale must be positive, got {self.length_scale}")
        if self.signal_variance < 0:
            raise ValueError(f"signal_variance must be non-negative, got {self.signal_variance}")
        if self.noise_variance < 0:
            raise ValueError(f"noise_variance must be non-negative, got {self.noise_variance}")

    def to_log_array(self) -> np.ndarray:
        """(log lambda, log sigma_f, log sigma_n); requires positive entries."""
        if self.signal_variance <= 0 or self.noise_variance <= 0:
            raise ValueError("log-parameter form requires strictly positive variances")
        return np.array([
            math.log(self.length_scale),
            0.5 * math.log(self.signal_variance),
            0.5 * math.log(self.noise_variance),
        ])

    @classmethod
    def from_log_array(cls, theta: np.ndarray) -> "Hyperparameters":
        return cls(
            length_scale=math.exp(theta[0]),
            signal_variance=math.exp(2.0 * theta[1]),
            noise_variance=math.exp(2.0 * theta[2]),
        )


@dataclass(frozen=True)
class Prediction:
    """Posterior mean and standard deviation at a single query point."""

    mean: np.ndarray
    std: np.ndarray


class TrainingSet:
    """Immutable bundle of training inputs (d x m) and outputs (m x n).

    Inputs are stored one column per point; outputs one row per point.
    m = 0 (empty set) is legal and yields the prior-mean predictor.
    """

    def __init__(self, inputs: np.ndarray, outputs: np.ndarray):
        inputs = np.asarray(inputs, dtype=float)
        outputs = np.asarray(outputs, dtype=float)
        if inputs.ndim != 2:
            raise ValueError(f"inputs must be a (d, m) matrix, got shape {inputs.shape}")
        if outputs.ndim != 2:
            raise ValueError(f"outputs must be an (m, n) matrix, got shape {outputs.shape}")
        if inputs.shape[1] != outputs.shape[0]:
            raise ValueError(
                f"point-count mismatch: {inputs.shape[1]} input columns vs "
                f"{outputs.shape[0]} output rows"
            )
        if inputs.size and not np.all(np.isfinite(inputs)):
            raise ValueError("inputs contain non-finite values")
        if outputs.size and not np.all(np.isfinite(outputs)):
            raise ValueError("outputs contain non-finite values")
        self.inputs = inputs
        self.outputs = outputs
        self.inputs.setflags(write=False)
        self.outputs.setflags(write=False)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[0]

    @property
    def size(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.outputs.shape[1]

    def subsample(self, size: int, seed: int = 0) -> "TrainingSet":
        """Deterministic stratified subsample of `size` points.

        The index range is split into `size` contiguous strata and one point
        is drawn uniformly from each, preserving order.  size = 0 gives the
        empty set; size = m returns all points.
        """
        if not 0 <= size <= self.size:
            raise ValueError(f"subsample size {size} outside [0, {self.size}]")
        if size == 0:
            return TrainingSet(self.inputs[:, :0], self.outputs[:0, :])
        if size == self.size:
            return self
        rng = np.random.default_rng(seed)
        picked = []
        for stratum in np.array_split(np.arange(self.size), size):
            picked.append(stratum[rng.integers(0, len(stratum))])
        idx = np.array(picked)
        return TrainingSet(self.inputs[:, idx], self.outputs[idx, :])

    def save_csv(self, path, manifest: tuple[str, ...] = ()):
        """Write one row per point, columns x_1..x_d, y_1..y_n.

        Floats are written with shortest round-trip representation so a
        load/save cycle is lossless.
        """
        d, n = self.input_dim, self.output_dim
        header = [f"x_{j + 1}" for j in range(d)] + [f"y_{j + 1}" for j in range(n)]
        lines = list(manifest)
        lines.append(",".join(header))
        for i in range(self.size):
            row = [repr(float(v)) for v in self.inputs[:, i]]
            row += [repr(float(v)) for v in self.outputs[i, :]]
            lines.append(",".join(row))
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load_csv(cls, path) -> "TrainingSet":
        with open(path) as fh:
            raw = [ln.strip() for ln in fh]
        rows = [ln for ln in raw if ln and not ln.startswith("#")]
        if not rows:
            raise ValueError(f"{path}: no header row")
        header = rows[0].split(",")
        d = sum(1 for c in header if c.startswith("x_"))
        n = sum(1 for c in header if c.startswith("y_"))
        if d + n != len(header) or d == 0 or n == 0:
            raise ValueError(f"{path}: header must be x_1..x_d,y_1..y_n, got {header}")
        data = np.array([[float(v) for v in ln.split(",")] for ln in rows[1:]], dtype=float)
        data = data.reshape(-1, d + n)
        return cls(data[:, :d].T, data[:, d:])


def kernel_eval(x, x_prime, hp: Hyperparameters) -> float:
    """Squared-exponential kernel sigma_f^2 exp(-||x - x'||^2 / (2 lambda^2))."""
    x = np.asarray(x, dtype=float)
    x_prime = np.asarray(x_prime, dtype=float)
    if x.shape != x_prime.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_prime.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(x_prime))):
        raise ValueError("kernel inputs must be finite")
    r2 = float(np.sum((x - x_prime) ** 2))
    return hp.signal_variance * math.exp(-r2 / (2.0 * hp.length_scale**2))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared distances between rows of a (p, d) and b (q, d)."""
    aa = np.sum(a * a, axis=1)
    bb = np.sum(b * b, axis=1)
    d2 = aa[:, None] + bb[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def _self_sq_dists(a: np.ndarray) -> np.ndarray:
    # exact symmetry and an exactly zero diagonal, both relied on downstream
    d2 = _sq_dists(a, a)
    d2 = 0.5 * (d2 + d2.T)
    np.fill_diagonal(d2, 0.0)
    return d2


def gram_matrix(inputs: np.ndarray, hp: Hyperparameters) -> np.ndarray:
    """Regularized Gram matrix K + sigma_n^2 I over (d, m) inputs."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2:
        raise ValueError(f"inputs must be (d, m), got shape {inputs.shape}")
    pts = inputs.T
    d2 = _self_sq_dists(pts)
    k = hp.signal_variance * np.exp(-d2 / (2.0 * hp.length_scale**2))
    k[np.diag_indices_from(k)] += hp.noise_variance
    return k


def _cholesky_lower(k: np.ndarray, output_index: int) -> np.ndarray:
    """Lower Cholesky factor; raises CholeskyError with the failing pivot."""
    c, info = dpotrf(k, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        j = info - 1  # first leading minor that is not positive definite
        pivot = k[j, j] - float(np.sum(c[j, :j] ** 2))
        raise CholeskyError(output_index, pivot)
    if info < 0:
        raise GPError(f"illegal value in Cholesky argument {-info}")
    return c


class FittedGP:
    """Single-output posterior: stored Cholesky factor and weight vector."""

    def __init__(self, hyperparameters, training_inputs, cholesky_factor, weights):
        self.hyperparameters = hyperparameters
        self.training_inputs = training_inputs  # (d, m)
        self.cholesky_factor = cholesky_factor  # (m, m) lower, None when m = 0
        self.weights = weights                  # (m,)

    @property
    def size(self) -> int:
        return self.training_inputs.shape[1]

    def _cross(self, queries: np.ndarray) -> np.ndarray:
        d2 = _sq_dists(queries, self.training_inputs.T)
        hp = self.hyperparameters
        return hp.signal_variance * np.exp(-d2 / (2.0 * hp.length_scale**2))

    def mean(self, queries: np.ndarray) -> np.ndarray:
        """Posterior mean at (b, d) query rows -> (b,)."""
        if self.size == 0:
            return np.zeros(queries.shape[0])
        return self._cross(queries) @ self.weights

    def variance(self, queries: np.ndarray) -> np.ndarray:
        """Posterior variance (noise-free, latent-function) at (b, d) rows -> (b,)."""
        hp = self.hyperparameters
        if self.size == 0:
            # empty training set: the posterior is pinned to the zero
            # correction with zero uncertainty by convention
            return np.zeros(queries.shape[0])
        ks = self._cross(queries)
        v = solve_triangular(self.cholesky_factor, ks.T, lower=True)
        var = hp.signal_variance - np.einsum("ij,ij->j", v, v)
        floor = -1e-12 * max(1.0, hp.signal_variance)
        if np.any(var < floor):
            raise GPError(
                f"posterior variance {var.min():.3e} below cancellation floor "
                f"{floor:.1e}; inconsistent factorization"
            )
        return np.maximum(var, 0.0)


class MultiGP:
    """Independent per-output GPs sharing one set of training inputs."""

    def __init__(self, components: list[FittedGP], input_dim: int):
        self.components = components
        self.input_dim = input_dim

    @property
    def output_dim(self) -> int:
        return len(self.components)

    @property
    def size(self) -> int:
        return self.components[0].size if self.components else 0

    @classmethod
    def empty(cls, input_dim: int, output_dim: int,
              hyperparameters: list[Hyperparameters] | None = None) -> "MultiGP":
        hps = hyperparameters or [Hyperparameters() for _ in range(output_dim)]
        if len(hps) != output_dim:
            raise ValueError("one Hyperparameters per output required")
        comps = [
            FittedGP(hp, np.zeros((input_dim, 0)), None, np.zeros(0)) for hp in hps
        ]
        return cls(comps, input_dim)

    def _check_query(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        q = x[None, :] if single else x
        if q.ndim != 2 or q.shape[1] != self.input_dim:
            raise ValueError(
                f"query dimension {x.shape} incompatible with input_dim {self.input_dim}"
            )
        if not np.all(np.isfinite(q)):
            raise ValueError("query contains non-finite values")
        return q, single

    def predict_mean(self, x: np.ndarray) -> np.ndarray:
        """Mean at a (d,) query -> (n,), or (b, d) queries -> (b, n)."""
        q, single = self._check_query(x)
        out = np.stack([c.mean(q) for c in self.components], axis=-1)
        return out[0] if single else out

    def predict_var(self, x: np.ndarray) -> np.ndarray:
        """Latent variance at a (d,) query -> (n,), or (b, d) -> (b, n)."""
        q, single = self._check_query(x)
        out = np.stack([c.variance(q) for c in self.components], axis=-1)
        return out[0] if single else out

    def predict(self, x: np.ndarray) -> Prediction:
        q, single = self._check_query(x)
        mean = np.stack([c.mean(q) for c in self.components], axis=-1)
        std = np.sqrt(np.stack([c.variance(q) for c in self.components], axis=-1))
        if single:
            return Prediction(mean=mean[0], std=std[0])
        return Prediction(mean=mean, std=std)


def fit(train: TrainingSet, hypers: list[Hyperparameters]) -> MultiGP:
    """Fit one GP per output column; Cholesky once per output.

    Raises CholeskyError naming the offending output and the failing pivot
    when the regularized Gram matrix is not positive definite.
    """
    if len(hypers) != train.output_dim:
        raise ValueError(
            f"{train.output_dim} outputs need {train.output_dim} hyperparameter "
            f"sets, got {len(hypers)}"
        )
    if train.size == 0:
        return MultiGP.empty(train.input_dim, train.output_dim, list(hypers))
    comps = []
    for i, hp in enumerate(hypers):
        k = gram_matrix(train.inputs, hp)
        low = _cholesky_lower(k, i)
        alpha = cho_solve((low, True), train.outputs[:, i])
        comps.append(FittedGP(hp, train.inputs, low, alpha))
    return MultiGP(comps, train.input_dim)


def predict_mean(gp: MultiGP, x: np.ndarray) -> np.ndarray:
    return gp.predict_mean(x)


def predict_var(gp: MultiGP, x: np.ndarray) -> np.ndarray:
    return gp.predict_var(x)


def log_marginal_likelihood(
    train: TrainingSet, hp: Hyperparameters, output_index: int = 0
) -> tuple[float, np.ndarray]:
    """Marginal log-likelihood of one output column and its gradient.

    Returns (value, gradient) with the gradient taken with respect to
    (log lambda, log sigma_f, log sigma_n).
    """
    if not 0 <= output_index < train.output_dim:
        raise ValueError(f"output_index {output_index} outside [0, {train.output_dim})")
    y = train.outputs[:, output_index]
    m = train.size
    pts = train.inputs.T
    d2 = _self_sq_dists(pts)
    lam2 = hp.length_scale**2
    k_se = hp.signal_variance * np.exp(-d2 / (2.0 * lam2))
    k = k_se.copy()
    k[np.diag_indices_from(k)] += hp.noise_variance
    low = _cholesky_lower(k, output_index)
    alpha = cho_solve((low, True), y)
    value = (
        -0.5 * float(y @ alpha)
        - float(np.sum(np.log(np.diag(low))))
        - 0.5 * m * _LOG_2PI
    )
    k_inv = cho_solve((low, True), np.eye(m))
    a = np.outer(alpha, alpha) - k_inv
    grad = np.array([
        0.5 * float(np.sum(a * (k_se * d2))) / lam2,
        float(np.sum(a * k_se)),
        hp.noise_variance * float(np.trace(a)),
    ])
    return value, grad


def _gradient_ascent(
    train: TrainingSet,
    output_index: int,
    theta0: np.ndarray,
    budget: int,
    noise_floor: float,
) -> tuple[np.ndarray, float, list[float]]:
    """Backtracking gradient ascent in log-parameter space.

    Returns (theta, value, accepted_values).  The accepted-value sequence is
    non-decreasing by construction: a step is taken only on strict
    improvement, and Cholesky failures or out-of-box candidates count as
    rejected steps.
    """
    log_sn_floor = 0.5 * math.log(noise_floor)

    def evaluate(theta):
        return log_marginal_likelihood(
            train, Hyperparameters.from_log_array(theta), output_index
        )

    theta = np.asarray(theta0, dtype=float)
    value, grad = evaluate(theta)
    history = [value]
    step = 0.1
    for _ in range(budget):
        gnorm = float(np.linalg.norm(grad))
        if gnorm < 1e-9:
            break
        direction = grad / gnorm
        accepted = False
        trial = step
        for _ in range(30):
            cand = theta + trial * direction
            if cand[2] < log_sn_floor or np.any(np.abs(cand) > 20.0):
                trial *= 0.5
                continue
            try:
                cval, cgrad = evaluate(cand)
            except CholeskyError:
                trial *= 0.5
                continue
            if math.isfinite(cval) and cval > value:
                accepted = True
                break
            trial *= 0.5
        if not accepted:
            break
        theta, value, grad = cand, cval, cgrad
        history.append(value)
        step = min(trial * 2.0, 2.0)
    return theta, value, history


def optimize_hyperparameters(
    train: TrainingSet,
    initial: Hyperparameters,
    budget: int,
    output_index: int = 0,
    restarts: int = 5,
    noise_floor: float = 1e-8,
) -> Hyperparameters:
    """Maximize the marginal likelihood of one output by restarted ascent.

    Restart 0 starts exactly at `initial`, so the result never scores below
    the initial point; restarts r >= 1 perturb each parameter by a factor
    10^u, u ~ U(-1, 1), drawn from default_rng(r).  `budget` is the
    iteration allowance per restart; budget = 0 returns `initial` unchanged.
    During the search sigma_n^2 is kept at or above `noise_floor` and
    log-parameters inside [-20, 20]; candidates that fail Cholesky are
    treated as rejected steps.  Raises CholeskyError if every restart fails
    on its first evaluation.
    """
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    if budget == 0 or train.size == 0:
        return initial
    theta0 = initial.to_log_array()
    if theta0[2] < 0.5 * math.log(noise_floor):
        theta0 = theta0.copy()
        theta0[2] = 0.5 * math.log(noise_floor)
    best_theta = None
    best_value = -math.inf
    first_error = None
    for r in range(max(1, restarts)):
        if r == 0:
            start = theta0
        else:
            offsets = np.random.default_rng(r).uniform(-1.0, 1.0, 3) * math.log(10.0)
            start = np.clip(theta0 + offsets, -20.0, 20.0)
            start[2] = max(start[2], 0.5 * math.log(noise_floor))
        try:
            theta, value, _ = _gradient_ascent(
                train, output_index, start, budget, noise_floor
            )
        except CholeskyError as err:
            if first_error is None:
                first_error = err
            continue
        if value > best_value:
            best_theta, best_value = theta, value
    if best_theta is None:
        raise first_error if first_error is not None else GPError("no restart succeeded")
    return Hyperparameters.from_log_array(best_theta)


def save_hyperparameters(path, hypers: list[Hyperparameters], manifest: tuple[str, ...] = ()):
    """Plain-text key = value file, one lambda/sigma_f/sigma_n triple per output.

    sigma_f_i and sigma_n_i store the variances.
    """
    lines = list(manifest)
    for i, hp in enumerate(hypers, start=1):
        lines.append(f"lambda_{i} = {repr(float(hp.length_scale))}")
        lines.append(f"sigma_f_{i} = {repr(float(hp.signal_variance))}")
        lines.append(f"sigma_n_{i} = {repr(float(hp.noise_variance))}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


_HP_LINE = re.compile(r"^(lambda|sigma_f|sigma_n)_(\d+)\s*=\s*(\S+)$")


def load_hyperparameters(path) -> list[Hyperparameters]:
    entries: dict[tuple[str, int], float] = {}
    with open(path) as fh:
        for ln in fh:
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            m = _HP_LINE.match(ln)
            if m is None:
                raise ValueError(f"{path}: unparseable line {ln!r}")
            entries[(m.group(1), int(m.group(2)))] = float(m.group(3))
    if not entries:
        raise ValueError(f"{path}: no hyperparameter entries")
    count = max(i for _, i in entries)
    out = []
    for i in range(1, count + 1):
        try:
            out.append(Hyperparameters(
                length_scale=entries[("lambda", i)],
                signal_variance=entries[("sigma_f", i)],
                noise_variance=entries[("sigma_n", i)],
            ))
        except KeyError as missing:
            raise ValueError(f"{path}: incomplete triple for output {i}: {missing}")
    return out
