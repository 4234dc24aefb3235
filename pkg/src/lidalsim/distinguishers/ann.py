"""Single-hidden-layer perceptron trained with Levenberg-Marquardt.

Hidden units are sigmoid, outputs are linear. The flat parameter vector is
ordered ``[w_ij (row-major, n_in x n_hidden), L_j, w_jk (row-major,
n_hidden x n_out), M_k]``. Residuals are ``e = A - y`` so the Jacobian is
``J = de/dtheta = -dy/dtheta``; rows run sample-major, output-minor.

Small problems solve the damped normal equations by Cholesky. Larger ones
use matrix-free conjugate gradients with a Jacobi preconditioner, since
the normal matrix of a ten-thousand-weight net does not fit comfortably
in memory.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.sparse.linalg import LinearOperator, cg

from .. import constants as K

log = logging.getLogger(__name__)

FORMAT = "lidalsim-mlp"
VERSION = 1
DIRECT_MAX_PARAMS = 2500
DIRECT_MAX_ENTRIES = 60_000_000


class TrainingError(RuntimeError):
    pass


def sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


@dataclass
class Mlp:
    w_ij: np.ndarray
    L_j: np.ndarray
    w_jk: np.ndarray
    M_k: np.ndarray
    scale: float = 1.0  # inputs are divided by this before the first layer
    meta: dict = field(default_factory=dict)
    offset: np.ndarray | None = None  # subtracted from raw inputs before scaling

    def __post_init__(self):
        self.w_ij = np.asarray(self.w_ij, float)
        self.L_j = np.asarray(self.L_j, float).ravel()
        self.w_jk = np.asarray(self.w_jk, float)
        self.M_k = np.asarray(self.M_k, float).ravel()
        n_in, n_h = self.w_ij.shape
        if self.L_j.size != n_h or self.w_jk.shape[0] != n_h or self.w_jk.shape[1] != self.M_k.size:
            raise ValueError("inconsistent layer shapes")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.offset is not None:
            self.offset = np.asarray(self.offset, float).ravel()
            if self.offset.size != n_in:
                raise ValueError("offset length differs from the input width")

    def prepare(self, x):
        """Raw inputs to network inputs: subtract the offset, divide by the scale."""
        x = np.asarray(x, float)
        return (x if self.offset is None else x - self.offset) / self.scale

    @property
    def n_in(self):
        return self.w_ij.shape[0]

    @property
    def n_hidden(self):
        return self.w_ij.shape[1]

    @property
    def n_out(self):
        return self.w_jk.shape[1]

    @property
    def n_params(self):
        return n_params(self.n_in, self.n_hidden, self.n_out)

    @classmethod
    def zeros(cls, n_in, n_hidden, n_out, **kw):
        return cls(np.zeros((n_in, n_hidden)), np.zeros(n_hidden),
                   np.zeros((n_hidden, n_out)), np.zeros(n_out), **kw)

    @classmethod
    def random(cls, n_in, n_hidden, n_out, seed, limit=0.5, **kw):
        rng = np.random.default_rng(seed)
        theta = rng.uniform(-limit, limit, n_params(n_in, n_hidden, n_out))
        return cls.from_vector(theta, n_in, n_hidden, n_out, **kw)

    def to_vector(self):
        return np.concatenate([self.w_ij.ravel(), self.L_j, self.w_jk.ravel(), self.M_k])

    @classmethod
    def from_vector(cls, theta, n_in, n_hidden, n_out, **kw):
        theta = np.asarray(theta, float)
        if theta.size != n_params(n_in, n_hidden, n_out):
            raise ValueError("parameter vector has the wrong length")
        a = n_in * n_hidden
        b = a + n_hidden
        c = b + n_hidden * n_out
        return cls(theta[:a].reshape(n_in, n_hidden).copy(), theta[a:b].copy(),
                   theta[b:c].reshape(n_hidden, n_out).copy(), theta[c:].copy(), **kw)

    def with_vector(self, theta):
        return Mlp.from_vector(theta, self.n_in, self.n_hidden, self.n_out,
                               scale=self.scale, meta=dict(self.meta), offset=self.offset)

    # serialization: JSON floats use repr, so the round trip is exact
    def to_dict(self):
        return {
            "format": FORMAT, "version": VERSION,
            "n_in": self.n_in, "n_hidden": self.n_hidden, "n_out": self.n_out,
            "scale": self.scale, "meta": self.meta,
            "offset": None if self.offset is None else self.offset.tolist(),
            "w_ij": self.w_ij.tolist(), "L_j": self.L_j.tolist(),
            "w_jk": self.w_jk.tolist(), "M_k": self.M_k.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != FORMAT or d.get("version") != VERSION:
            raise ValueError("not a supported model file")
        m = cls(np.array(d["w_ij"], float).reshape(d["n_in"], d["n_hidden"]), d["L_j"],
                np.array(d["w_jk"], float).reshape(d["n_hidden"], d["n_out"]), d["M_k"],
                scale=d["scale"], meta=d.get("meta", {}), offset=d.get("offset"))
        return m

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def n_params(n_in, n_hidden, n_out):
    return n_in * n_hidden + n_hidden + n_hidden * n_out + n_out


def prune_hidden(n_in, y, beta):
    """Hidden-layer size (n_in + y) / beta, rounded, never below one."""
    if not 1 <= beta <= 2 * n_in:
        raise ValueError(f"beta must lie in [1, {2 * n_in}]")
    return max(1, int(round((n_in + y) / beta)))


def _hidden(mlp, X):
    return sigmoid(X @ mlp.w_ij + mlp.L_j)


def ann_forward(mlp: Mlp, x):
    """Network output for one input vector or a batch (rows). Inputs are pre-scaled."""
    X = np.asarray(x, float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != mlp.n_in:
        raise ValueError(f"expected {mlp.n_in} inputs, got {X.shape[1]}")
    Y = _hidden(mlp, X) @ mlp.w_jk + mlp.M_k
    return Y[0] if single else Y


def ann_error(outputs, labels):
    """Returns (sum of residuals, residual vector A - y)."""
    y = np.asarray(outputs, float)
    a = np.asarray(labels, float)
    if y.shape != a.shape:
        raise ValueError("outputs and labels differ in shape")
    r = a - y
    return float(r.sum()), r


def mse(mlp, X, A):
    if len(X) == 0:
        return float("nan")
    return float(np.mean((A - ann_forward(mlp, X)) ** 2))


def compute_jacobian(mlp: Mlp, X):
    """Dense residual Jacobian, shape (n_samples * n_out, n_params)."""
    X = np.atleast_2d(np.asarray(X, float))
    n, n_out, n_h = X.shape[0], mlp.n_out, mlp.n_hidden
    H = _hidden(mlp, X)
    S = H * (1.0 - H)
    # dy_k/dz_j = S_j * w_jk
    G = S[:, None, :] * mlp.w_jk.T[None, :, :]  # (n, out, hidden)
    d_w1 = np.einsum("ni,nkj->nkij", X, G).reshape(n, n_out, -1)
    d_w2 = np.einsum("nj,kl->nkjl", H, np.eye(n_out))
    d_m = np.broadcast_to(np.eye(n_out), (n, n_out, n_out))
    J = np.concatenate([d_w1, G, d_w2.reshape(n, n_out, -1), d_m], axis=2)
    return -J.reshape(n * n_out, -1)


class _Linearization:
    """Matrix-free products with the residual Jacobian at one parameter point."""

    def __init__(self, mlp, X):
        self.mlp, self.X = mlp, X
        self.H = _hidden(mlp, X)
        self.S = self.H * (1.0 - self.H)
        self.shape = (mlp.n_in, mlp.n_hidden, mlp.n_out)

    def _split(self, v):
        n_in, n_h, n_out = self.shape
        a = n_in * n_h
        b = a + n_h
        c = b + n_h * n_out
        return v[:a].reshape(n_in, n_h), v[a:b], v[b:c].reshape(n_h, n_out), v[c:]

    def jv(self, v):
        V1, vl, V2, vm = self._split(v)
        dh = self.S * (self.X @ V1 + vl)
        return -(dh @ self.mlp.w_jk + self.H @ V2 + vm)  # (n, out)

    def jtu(self, U):
        gz = (U @ self.mlp.w_jk.T) * self.S
        return -np.concatenate([(self.X.T @ gz).ravel(), gz.sum(0),
                                (self.H.T @ U).ravel(), U.sum(0)])

    def diag_jtj(self):
        w2sq = (self.mlp.w_jk ** 2).sum(axis=1)
        S2 = self.S ** 2
        d_w1 = ((self.X ** 2).T @ S2) * w2sq
        d_l = S2.sum(0) * w2sq
        d_w2 = np.repeat((self.H ** 2).sum(0), self.shape[2])
        d_m = np.full(self.shape[2], float(self.X.shape[0]))
        return np.concatenate([d_w1.ravel(), d_l, d_w2, d_m])


def lm_update(theta, J, e, mu, max_retries=8):
    """theta - (J'J + mu I)^-1 J'e via Cholesky; mu grows x10 if factorization fails."""
    theta = np.asarray(theta, float)
    J = np.atleast_2d(np.asarray(J, float))
    e = np.asarray(e, float).ravel()
    A = J.T @ J
    g = J.T @ e
    for _ in range(max_retries + 1):
        try:
            c = cho_factor(A + mu * np.eye(A.shape[0]), check_finite=True)
            return theta - cho_solve(c, g), mu
        except (LinAlgError, ValueError):
            mu *= 10.0
    raise TrainingError("damped normal matrix stayed singular")


def _solve_cg(lin, E, mu, maxiter, rtol):
    g = lin.jtu(E)
    diag = lin.diag_jtj() + mu
    n_out = lin.shape[2]
    P = g.size

    def matvec(v):
        return lin.jtu(lin.jv(v).reshape(-1, n_out)) + mu * v

    A = LinearOperator((P, P), matvec=matvec, dtype=float)
    M = LinearOperator((P, P), matvec=lambda v: v / diag, dtype=float)
    delta, _ = cg(A, g, rtol=rtol, maxiter=maxiter, M=M)
    return delta


def _use_direct(mlp, n_rows, solver):
    if solver == "direct":
        return True
    if solver == "cg":
        return False
    return mlp.n_params <= DIRECT_MAX_PARAMS and n_rows * mlp.n_params <= DIRECT_MAX_ENTRIES


def lm_step(mlp: Mlp, X, A, mu, solver="auto", cg_maxiter=60, cg_rtol=1e-6):
    """One damped Gauss-Newton update of all weights and biases.

    Returns (candidate mlp, its training MSE). Acceptance is the caller's job.
    """
    if not mu > 0:
        raise ValueError("mu must be positive")
    X = np.atleast_2d(np.asarray(X, float))
    A = np.atleast_2d(np.asarray(A, float))
    theta = mlp.to_vector()
    E = A - ann_forward(mlp, X)
    if _use_direct(mlp, E.size, solver):
        new, _ = lm_update(theta, compute_jacobian(mlp, X), E, mu)
    else:
        new = theta - _solve_cg(_Linearization(mlp, X), E, mu, cg_maxiter, cg_rtol)
    cand = mlp.with_vector(new)
    return cand, mse(cand, X, A)


@dataclass(frozen=True)
class TrainerConfig:
    epochs: int = K.EPOCHS
    mu_r: float = K.MU_R
    validation_fraction: float = K.VALIDATION_FRACTION
    beta_range: tuple = (42.0,)
    output_threshold: float = K.OUTPUT_THRESHOLD
    seed: int = 0
    mse_goal: float = 0.0
    max_retries: int = 8
    mu_max: float = 1e10
    solver: str = "auto"
    cg_maxiter: int = 60

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if not self.mu_r > 0:
            raise ValueError("mu_r must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if not self.beta_range:
            raise ValueError("beta_range is empty")


@dataclass
class TrainingReport:
    rows: list = field(default_factory=list)  # (beta, epoch, train_mse, val_mse, mu)
    best_beta: float = float("nan")
    best_val_mse: float = float("inf")
    best_train_mse: float = float("inf")
    n_hidden: int = 0

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_mse", "val_mse", "mu_r", "beta"])
            for beta, ep, tr, va, mu in self.rows:
                w.writerow([ep, repr(tr), repr(va), repr(mu), repr(beta)])


def split_dataset(X, A, fraction, seed):
    """Shuffled (train, validation) split. Fraction 0 validates on the training set."""
    n = len(X)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(fraction * n))
    if fraction > 0 and n_val == 0 and n > 1:
        n_val = 1
    if n_val == 0:
        return (X, A), (X, A)
    tr, va = order[n_val:], order[:n_val]
    return (X[tr], A[tr]), (X[va], A[va])


def train_ann(X, A, config: TrainerConfig = TrainerConfig(), scale=1.0, meta=None, offset=None):
    """LM training swept over the pruning factors; keeps the best validation epoch.

    X holds raw inputs, mapped to (X - offset) / scale here; A the 0/1 labels.
    """
    X = np.atleast_2d(np.asarray(X, float))
    if offset is not None:
        X = X - np.asarray(offset, float)
    X = X / scale
    A = np.atleast_2d(np.asarray(A, float))
    if len(X) != len(A) or len(X) == 0:
        raise ValueError("dataset is empty or misaligned")
    if not np.all(np.isfinite(X)):
        raise ValueError("inputs must be finite")
    n_in, n_out = X.shape[1], A.shape[1]
    (Xt, At), (Xv, Av) = split_dataset(X, A, config.validation_fraction, config.seed)
    report = TrainingReport()
    best = None
    for b_idx, beta in enumerate(config.beta_range):
        n_h = prune_hidden(n_in, n_out, beta)
        net = Mlp.random(n_in, n_h, n_out, seed=(config.seed, b_idx), scale=scale, offset=offset)
        mu = config.mu_r
        tr = mse(net, Xt, At)
        for epoch in range(1, config.epochs + 1):
            accepted = False
            for _ in range(config.max_retries + 1):
                cand, cand_mse = lm_step(net, Xt, At, mu, config.solver, config.cg_maxiter)
                if not math.isfinite(cand_mse):
                    mu *= 10.0
                elif cand_mse < tr:
                    net, tr, accepted = cand, cand_mse, True
                    mu = max(mu / 10.0, 1e-15)
                    break
                else:
                    mu *= 10.0
                if mu > config.mu_max:
                    break
            va = mse(net, Xv, Av)
            if not math.isfinite(va):
                log.warning("beta %s: non-finite loss, candidate dropped", beta)
                break
            report.rows.append((float(beta), epoch, tr, va, mu))
            if va < report.best_val_mse:
                report.best_val_mse, report.best_train_mse = va, tr
                report.best_beta, report.n_hidden = float(beta), n_h
                best = net
            if not accepted or tr <= config.mse_goal:
                break
    if best is None:
        raise TrainingError("no beta candidate produced a finite loss")
    best.meta = {**(meta or {}), "beta": report.best_beta, "val_mse": report.best_val_mse,
                 "train_mse": report.best_train_mse, "config": _jsonable(asdict(config))}
    return best, report


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def ann_detect(mlp: Mlp, x, threshold=K.OUTPUT_THRESHOLD):
    """Occupancy bits: output strictly above the threshold."""
    v = x.vector() if hasattr(x, "vector") else np.asarray(x, float)
    if v.shape[-1] != mlp.n_in:
        raise ValueError(f"input layout mismatch: {v.shape[-1]} values for {mlp.n_in} inputs")
    return (ann_forward(mlp, mlp.prepare(v)) > threshold).astype(np.uint8)
