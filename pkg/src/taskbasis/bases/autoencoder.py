"""Softmax-encoder / linear-decoder autoencoder trained purely in Gram space.

The reconstruction objective ``||T W_e W_d - T||_F^2`` equals
``Tr(E^T G E)`` with ``E = W_e W_d - I`` and ``G = T^T T``, so after one
O(d T^2) Gram pass every training step costs O(T^2 M) and never touches the
d-dimensional vectors.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from ..vecstore import GramMatrix, TaskVectorMatrix, gram, spectral_bounds
from .model import BasisModel, Method

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e3
OLS_COND_LIMIT = 1e12


class DivergenceError(RuntimeError):
    """Training loss blew past ``DIVERGENCE_FACTOR * Tr(G)``."""

    def __init__(self, step: int, loss: float, trace: list[float]):
        super().__init__(f"autoencoder diverged at step {step}: loss={loss:.3e}")
        self.step = step
        self.loss = loss
        self.trace = trace


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class AeConfig:
    """Training hyperparameters. Defaults follow the reference configuration
    (M=4, 4000 steps, lr 0.01, temperature 5, weight decay 1e-6)."""

    M: int = 4
    steps: int = 4000
    lr: float = 0.01
    tau0: float = 5.0
    anneal: tuple[int, float] | None = None
    weight_decay: float = 1e-6
    seed: int = 0
    decoder_mode: str = "joint"
    tol_grad: float | None = None
    init_scale: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    record_every: int = 50

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.tau0 > 0:
            raise ValueError("tau0 must be positive")
        if self.anneal is not None:
            period, eta = self.anneal
            if int(period) < 1 or not 0 < eta <= 1:
                raise ValueError("anneal needs period >= 1 and 0 < eta <= 1")
            object.__setattr__(self, "anneal", (int(period), float(eta)))
        if self.decoder_mode not in ("joint", "ols_refit"):
            raise ValueError(f"unknown decoder_mode {self.decoder_mode!r}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")

    def temperature(self, step: int) -> float:
        """Temperature in effect at 0-based ``step``."""
        if self.anneal is None:
            return self.tau0
        period, eta = self.anneal
        return self.tau0 * eta ** (step // period)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["anneal"] = list(self.anneal) if self.anneal else None
        out["betas"] = list(self.betas)
        return out


def parse_anneal(text: str | None) -> tuple[int, float] | None:
    """Parse ``"period:factor"`` (e.g. ``"500:0.8"``)."""
    if text is None or text == "" or text.lower() == "none":
        return None
    try:
        period, factor = text.split(":")
        return int(period), float(factor)
    except ValueError as exc:
        raise ValueError(f"anneal schedule must look like PERIOD:FACTOR, got {text!r}") from exc


def softmax_columns(A: np.ndarray, tau: float) -> np.ndarray:
    z = A / tau
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def softmax_logits_for(b: np.ndarray, tau: float) -> np.ndarray:
    """Logits ``a`` with ``softmax(a / tau) == b`` for a strictly positive simplex point."""
    b = np.asarray(b, dtype=np.float64)
    if np.any(b <= 0):
        raise ValueError("target weights must be strictly positive")
    if abs(b.sum() - 1.0) > 1e-9:
        raise ValueError(f"target weights must sum to 1, got {b.sum()!r}")
    if not tau > 0:
        raise ValueError("tau must be positive")
    return tau * np.log(b)


def _entries(g) -> np.ndarray:
    return g.entries if isinstance(g, GramMatrix) else np.asarray(g, dtype=np.float64)


def ae_loss_gram(g: GramMatrix | np.ndarray, W_e: np.ndarray, W_d: np.ndarray) -> float:
    """Tr(E^T G E) with E = W_e W_d - I."""
    G = _entries(g)
    t = G.shape[0]
    W_e = np.asarray(W_e, dtype=np.float64)
    W_d = np.asarray(W_d, dtype=np.float64)
    if W_e.ndim != 2 or W_d.ndim != 2 or W_e.shape[0] != t or W_d.shape != (W_e.shape[1], t):
        raise ValueError(f"shape mismatch: G {G.shape}, W_e {W_e.shape}, W_d {W_d.shape}")
    E = W_e @ W_d - np.eye(t)
    return max(float(np.sum(E * (G @ E))), 0.0)


def ae_gradients(
    g: GramMatrix | np.ndarray, A: np.ndarray, W_d: np.ndarray, tau: float, step: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of Tr(E^T G E) w.r.t. the logits A and the decoder W_d.

    ``dW_d = 2 W_e^T G E`` and, column by column,
    ``dA[:, m] = J_m^T (2 G E W_d^T)[:, m]`` with the softmax Jacobian
    ``J_m = (diag(w_m) - w_m w_m^T) / tau``.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    G = _entries(g)
    _, dA, dW_d = _loss_and_grads(G, softmax_columns(A, tau), W_d, tau, np.eye(G.shape[0]))
    _check_finite(dA, dW_d, step, tau)
    return dA, dW_d


def _loss_and_grads(G, W_e, W_d, tau, eye):
    with np.errstate(over="ignore", invalid="ignore"):
        E = W_e @ W_d - eye
        GE2 = 2.0 * (G @ E)
        loss = 0.5 * float(np.sum(E * GE2))
        dW = GE2 @ W_d.T
        dW_d = W_e.T @ GE2
        dA = (W_e * dW - W_e * np.sum(W_e * dW, axis=0, keepdims=True)) / tau
    return loss, dA, dW_d


def _check_finite(dA, dW_d, step, tau):
    if not (np.all(np.isfinite(dA)) and np.all(np.isfinite(dW_d))):
        where = f" at step {step}" if step is not None else ""
        raise NumericalError(f"non-finite gradient{where} (tau={tau:.3e})")


def finite_difference_check(
    g: GramMatrix | np.ndarray, A: np.ndarray, W_d: np.ndarray, tau: float, h: float = 1e-5
) -> float:
    """Max relative error of :func:`ae_gradients` against central differences."""

    def f(a, wd):
        return ae_loss_gram(g, softmax_columns(a, tau), wd)

    dA, dW_d = ae_gradients(g, A, W_d, tau)
    fdA = np.zeros_like(A)
    for idx in np.ndindex(A.shape):
        ap, am = A.copy(), A.copy()
        ap[idx] += h
        am[idx] -= h
        fdA[idx] = (f(ap, W_d) - f(am, W_d)) / (2 * h)
    fdW = np.zeros_like(W_d)
    for idx in np.ndindex(W_d.shape):
        wp, wm = W_d.copy(), W_d.copy()
        wp[idx] += h
        wm[idx] -= h
        fdW[idx] = (f(A, wp) - f(A, wm)) / (2 * h)
    analytic = np.concatenate([dA.ravel(), dW_d.ravel()])
    numeric = np.concatenate([fdA.ravel(), fdW.ravel()])
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


class Adam:
    """Adam with decoupled weight decay over a fixed list of arrays (updated in place)."""

    def __init__(self, params, lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def ols_decoder(g: GramMatrix | np.ndarray, W_e: np.ndarray) -> np.ndarray:
    """Least-squares decoder for a frozen encoder: (W_e^T G W_e)^+ W_e^T G."""
    G = _entries(g)
    K = W_e.T @ G @ W_e
    rhs = W_e.T @ G
    cond = np.linalg.cond(K) if K.size else 1.0
    if np.isfinite(cond) and cond < OLS_COND_LIMIT:
        return np.linalg.solve(K, rhs)
    warnings.warn(
        f"OLS decoder system is ill-conditioned (cond={cond:.3e}); using the pseudoinverse",
        RuntimeWarning,
        stacklevel=2,
    )
    return np.linalg.pinv(K, rcond=1e-12, hermitian=True) @ rhs


@dataclass
class AeFit:
    """Gram-space training result (no d-dimensional data)."""

    A: np.ndarray
    W_e: np.ndarray
    W_d: np.ndarray
    loss: float
    tau_final: float
    trace: list[tuple[int, float]] = field(default_factory=list)


def fit_ae_gram(g: GramMatrix, cfg: AeConfig, init_logits: np.ndarray | None = None) -> AeFit:
    """Train (A, W_d) on ``Tr(E^T G E)`` with Adam; deterministic per ``cfg.seed``."""
    G = g.entries
    t, M = G.shape[0], cfg.M
    if M >= t:
        warnings.warn(f"M={M} >= T={t}: no compression takes place", UserWarning, stacklevel=2)
    rng = np.random.default_rng(cfg.seed)
    if init_logits is not None:
        A = np.array(init_logits, dtype=np.float64, copy=True)
        if A.shape != (t, M):
            raise ValueError(f"init_logits has shape {A.shape}, expected {(t, M)}")
    else:
        A = rng.normal(0.0, cfg.init_scale, size=(t, M))
    W_d = softmax_columns(A, cfg.tau0).T.copy()
    opt = Adam([A, W_d], lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)

    if cfg.tol_grad is not None:
        err = finite_difference_check(g, A, W_d, cfg.tau0)
        if err > cfg.tol_grad:
            raise NumericalError(f"gradient check failed at initialization: rel err {err:.3e}")

    limit = DIVERGENCE_FACTOR * max(g.trace, np.finfo(float).tiny)
    eye = np.eye(t)
    trace: list[tuple[int, float]] = []
    tau = cfg.tau0
    for step in range(cfg.steps):
        tau = cfg.temperature(step)
        W_e = softmax_columns(A, tau)
        # structural guarantee of the softmax parametrisation
        assert np.all(W_e >= 0.0) and np.max(np.abs(W_e.sum(axis=0) - 1.0)) <= 1e-12
        loss, dA, dW_d = _loss_and_grads(G, W_e, W_d, tau, eye)
        if not np.isfinite(loss) or loss > limit:
            trace.append((step, loss))
            raise DivergenceError(step, loss, [v for _, v in trace])
        _check_finite(dA, dW_d, step, tau)
        if step % cfg.record_every == 0:
            trace.append((step, loss))
        opt.step([dA, dW_d])

    W_e = softmax_columns(A, tau)
    if cfg.decoder_mode == "ols_refit":
        W_d = ols_decoder(g, W_e)
    final = ae_loss_gram(g, W_e, W_d)
    trace.append((cfg.steps, final))
    return AeFit(A, W_e, W_d.copy(), final, tau, trace)


def fit_ae(m: TaskVectorMatrix, cfg: AeConfig, g: GramMatrix | None = None,
           init_logits: np.ndarray | None = None) -> BasisModel:
    """Fit softmax-autoencoder bases; B = T W_e is a convex mix of the inputs."""
    g = gram(m) if g is None else g
    fit = fit_ae_gram(g, cfg, init_logits=init_logits)
    lb = spectral_bounds(g, min(cfg.M, m.T)).frobenius_lb
    log.debug("AE fit: loss=%.6g lower bound=%.6g", fit.loss, lb)
    meta = {
        "config": cfg.to_dict(),
        "tau_final": fit.tau_final,
        "frobenius_lb": lb,
        "gap": fit.loss - lb,
        "loss_trace": [[s, v] for s, v in fit.trace],
    }
    return BasisModel(Method.AE, m.columns @ fit.W_e, fit.W_e, fit.W_d, fit.loss, m.names,
                      theta0=m.theta0, metadata=meta)
