"""Tikhonov initialization, proximal-gradient layers and the unrolled models.

States are row-stacked: a batch of reconstructions is a (B, 2N) array whose
columns are [chi_R | chi_I] in raster order. All model forwards are written
with :mod:`autodiff` primitives, so the same code path serves inference
(no tape active) and training (tape active).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import autodiff as ad
from .prior import PriorConfig, PriorNet, weight_init
from .rng import Xoshiro256
from .xpra import DiffOperators, ReconstructionState, XpraOperator, build_diff_operators

MODEL_KINDS = ("tk-dprior", "dprior", "tv", "di")


class SingularSystemError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class LinearSystem:
    """Operator-dependent constants shared by every layer."""

    op: XpraOperator
    diffs: DiffOperators
    AtA: np.ndarray
    lap: sp.csr_matrix
    eye: sp.csr_matrix
    dstack: sp.csr_matrix

    @classmethod
    def build(cls, op: XpraOperator, diffs: DiffOperators | None = None) -> "LinearSystem":
        if diffs is None:
            diffs = build_diff_operators(op.grid.nx, op.grid.ny)
        A = op.A
        return cls(op, diffs, A.T @ A, diffs.laplacian, sp.identity(A.shape[1], format="csr"), diffs.stacked)

    @property
    def n(self) -> int:
        return self.op.n

    @property
    def mean_eig(self) -> float:
        """trace(AtA) / 2N."""
        return float(np.trace(self.AtA)) / self.AtA.shape[0]

    def hessian_apply(self, x, lam1: float, lam2: float) -> np.ndarray:
        return x @ self.AtA + lam1 * x + lam2 * (self.lap @ x.T).T

    def max_eig(self, lam1: float, lam2: float, iters: int = 50) -> float:
        """Largest eigenvalue of AtA + lam1 I + lam2 D^T D by power iteration."""
        v = np.ones(self.AtA.shape[0]) / np.sqrt(self.AtA.shape[0])
        est = 0.0
        for _ in range(iters):
            w = self.hessian_apply(v, lam1, lam2)
            est = float(np.linalg.norm(w))
            v = w / est
        return float(v @ self.hessian_apply(v, lam1, lam2))


def _system(op, diffs) -> LinearSystem:
    return op if isinstance(op, LinearSystem) else LinearSystem.build(op, diffs)


def _relu_imag_half(x: ad.Tensor, n: int) -> ad.Tensor:
    return ad.concat([x[:, :n], ad.relu(x[:, n:])], axis=1)


# ---------------------------------------------------------------- plain operations

def tikhonov_solve(op, diffs, lam1: float, lam2: float, delta_p) -> np.ndarray:
    """Minimizer of f (no ReLU); rows of `delta_p` are independent problems."""
    sysm = _system(op, diffs)
    if lam1 <= 0 and lam2 <= 0:
        raise SingularSystemError("lam1 = lam2 = 0 is singular; use minimum_norm_init")
    dp = np.atleast_2d(np.asarray(delta_p, dtype=np.float64))
    H = sysm.AtA + lam1 * np.eye(sysm.AtA.shape[0]) + lam2 * sysm.lap.toarray()
    rhs = dp @ sysm.op.A
    x = sla.cho_solve(sla.cho_factor(H, lower=True), rhs.T).T
    res = np.linalg.norm(x @ H - rhs) / max(np.linalg.norm(rhs), np.finfo(float).tiny)
    if res > 1e-8:
        raise SingularSystemError(f"normal-equation residual {res:.2e} exceeds 1e-8")
    return x.reshape(np.shape(delta_p)[:-1] + (x.shape[-1],))


def tikhonov_init(op, diffs, lam1: float, lam2: float, delta_p) -> ReconstructionState:
    x = tikhonov_solve(op, diffs, lam1, lam2, delta_p)
    state = ReconstructionState.from_stacked(x)
    state.chi_i = np.maximum(state.chi_i, 0.0)
    return state


def default_floor(op) -> float:
    return 1e-8 * _system(op, None).mean_eig


def minimum_norm_init(op, delta_p, eps_floor: float | None = None) -> ReconstructionState:
    sysm = _system(op, None)
    eps = default_floor(sysm) if eps_floor is None else eps_floor
    if eps <= 0:
        raise SingularSystemError("eps_floor must be positive")
    H = sysm.AtA + eps * np.eye(sysm.AtA.shape[0])
    dp = np.atleast_2d(np.asarray(delta_p, dtype=np.float64))
    x = sla.cho_solve(sla.cho_factor(H, lower=True), (dp @ sysm.op.A).T).T
    return ReconstructionState.from_stacked(x.reshape(np.shape(delta_p)[:-1] + (x.shape[-1],)))


def objective(op, diffs, lam1, lam2, x, delta_p) -> float:
    sysm = _system(op, diffs)
    x = np.asarray(x, dtype=np.float64)
    r = x @ sysm.op.A.T - delta_p
    dx = sysm.dstack @ x
    return 0.5 * float(r @ r) + 0.5 * lam1 * float(x @ x) + 0.5 * lam2 * float(dx @ dx)


def grad_f(op, diffs, lam1, lam2, state, delta_p) -> np.ndarray:
    """A^T (A x - dP) + (lam1 I + lam2 D^T D) x."""
    sysm = _system(op, diffs)
    x = state.stacked() if isinstance(state, ReconstructionState) else np.asarray(state, dtype=np.float64)
    if x.shape[-1] != sysm.op.A.shape[1] or np.shape(delta_p)[-1] != sysm.op.A.shape[0]:
        raise ValueError("dimension mismatch between state, measurements and operator")
    r = x @ sysm.op.A.T - delta_p
    return r @ sysm.op.A + lam1 * x + lam2 * (sysm.lap @ np.atleast_2d(x).T).T.reshape(x.shape)


def _grad_tensor(sysm: LinearSystem, x, dp, lam1, lam2):
    r = ad.sub(ad.matmul(x, sysm.op.A.T), dp)
    g = ad.add(ad.matmul(r, sysm.op.A), ad.mul(lam1, x))
    return ad.add(g, ad.mul(lam2, ad.matmul(x, sysm.lap)))


def identity_prox(zr, zi, train=False):
    return zi


def pgm_layer(sysm: LinearSystem, x, dp, lam1, lam2, eta, prox=identity_prox, train: bool = False):
    """One PGM layer on (B, 2N) tensors: gradient step, chi_R passes through,
    chi_I goes through the prox fed with both halves as images."""
    n, (ny, nx) = sysm.n, (sysm.op.grid.ny, sysm.op.grid.nx)
    if np.any(ad.as_tensor(eta).value < 0):
        raise ConfigError("eta must be non-negative")
    z = ad.sub(x, ad.mul(eta, _grad_tensor(sysm, x, dp, lam1, lam2)))
    zr, zi = z[:, :n], z[:, n:]
    b = zr.shape[0]
    chi_i = prox(ad.reshape(zr, (b, ny, nx)), ad.reshape(zi, (b, ny, nx)), train)
    return ad.concat([zr, ad.reshape(chi_i, (b, n))], axis=1)


def soft_threshold(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


# ---------------------------------------------------------------- models

def _scalar(value: float, name: str) -> ad.Tensor:
    return ad.Tensor(np.array(float(value)), requires_grad=True, name=name)


class UnrolledModel:
    """xPRA-TK-DPrior (Tikhonov init) or xPRA-DPrior (minimum-norm init, no
    Tikhonov terms in the layers). ``prior="identity"`` gives classical PGM."""

    def __init__(self, sysm: LinearSystem, layers: int = 3, kind: str = "tk-dprior",
                 prior: str = "learned", prior_config: PriorConfig = PriorConfig(), seed: int = 0,
                 lam: float | None = None, eta: float | None = None):
        if layers < 1:
            raise ConfigError("T must be >= 1")
        if kind not in ("tk-dprior", "dprior"):
            raise ConfigError(f"unknown unrolled kind {kind!r}")
        if prior not in ("learned", "identity"):
            raise ConfigError(f"unknown prior kind {prior!r}")
        self.kind, self.prior_kind, self.layers = kind, prior, layers
        self.prior_config = prior_config
        lam = 1e-2 * sysm.mean_eig if lam is None else lam
        tk = kind == "tk-dprior"
        lam_layer = lam if tk else 0.0
        # eta_i = eta_scale * eta_hat_i with eta_hat learned; a raw eta of
        # order 1/lambda_max would be swamped by fixed-size Adam steps
        self.eta_scale = 1.0 / sysm.max_eig(lam_layer, lam_layer)
        eta_hat = 1.0 if eta is None else eta / self.eta_scale
        self.lam0 = [_scalar(lam, "lam1_0"), _scalar(lam, "lam2_0")] if tk else []
        self.floor = default_floor(sysm)
        self.lam = [[_scalar(lam_layer, f"lam1_{i + 1}"), _scalar(lam_layer, f"lam2_{i + 1}")] for i in range(layers)]
        self.eta = [_scalar(eta_hat, f"eta_{i + 1}") for i in range(layers)]
        self.priors = []
        if prior == "learned":
            for i in range(layers):
                self.priors.append(weight_init(PriorNet(prior_config, f"prior{i + 1}"), seed * 1000 + i))

    def step_sizes(self) -> list[float]:
        return [float(e.value) * self.eta_scale for e in self.eta]

    def reg_params(self):
        if self.kind == "dprior":
            return []
        return self.lam0 + [p for pair in self.lam for p in pair]

    def other_params(self):
        return self.eta + [p for net in self.priors for p in net.parameters()]

    def clamped(self):
        return self.reg_params() + self.eta

    def buffers(self):
        out = {}
        for net in self.priors:
            out.update(net.buffers())
        return out

    def init_layer(self, sysm: LinearSystem, dp):
        rhs = ad.matmul(dp, sysm.op.A)
        if self.kind == "tk-dprior":
            x = ad.spd_solve(sysm.AtA, [(self.lam0[0], sysm.eye), (self.lam0[1], sysm.lap)], rhs)
            return _relu_imag_half(x, sysm.n)
        return ad.spd_solve(sysm.AtA, [], rhs, jitter=self.floor)

    def forward(self, sysm: LinearSystem, dp, train: bool = False, return_state: bool = False,
                trace: list | None = None):
        dp = dp if isinstance(dp, ad.Tensor) else ad.Tensor(np.atleast_2d(dp))
        x = self.init_layer(sysm, dp)
        if trace is not None:
            trace.append(("init", float(np.linalg.norm(x.value))))
        for i in range(self.layers):
            prox = identity_prox if not self.priors else (
                lambda zr, zi, tr, net=self.priors[i]: net(zr, zi, tr))
            if self.kind == "tk-dprior":
                l1, l2 = self.lam[i]
            else:
                l1 = l2 = 0.0
            x = pgm_layer(sysm, x, dp, l1, l2, ad.mul(self.eta[i], self.eta_scale), prox, train)
            if trace is not None:
                trace.append((f"layer{i + 1}", float(np.linalg.norm(x.value))))
        if return_state:
            return x
        b = x.shape[0]
        return ad.reshape(ad.relu(x[:, sysm.n:]), (b, sysm.op.grid.ny, sysm.op.grid.nx))


class TvModel:
    """Unrolled ADMM for 0.5||A x - dP||^2 + lam_tv ||D x||_1."""

    def __init__(self, sysm: LinearSystem, layers: int = 5, lam_tv: float = 1e-2, rho: float = 1.0):
        if layers < 1:
            raise ConfigError("T must be >= 1")
        if rho <= 0:
            raise ConfigError("ADMM penalty rho must be positive")
        if lam_tv < 0:
            raise ConfigError("lam_tv must be >= 0")
        self.kind, self.layers = "tv", layers
        self.lam_tv = _scalar(lam_tv, "lam_tv")
        self.rho = _scalar(rho, "rho")
        # keeps the x-update factorizable if rho is driven to its clamp
        self.ridge = 1e-10 * sysm.mean_eig

    def reg_params(self):
        return [self.lam_tv, self.rho]

    def other_params(self):
        return []

    def clamped(self):
        return self.reg_params()

    def buffers(self):
        return {}

    def forward(self, sysm: LinearSystem, dp, train: bool = False, return_state: bool = False,
                trace: list | None = None, history: list | None = None):
        if float(self.rho.value) <= 0:
            raise ConfigError("ADMM penalty rho must be positive")
        dp = dp if isinstance(dp, ad.Tensor) else ad.Tensor(np.atleast_2d(dp))
        b = dp.shape[0]
        rhs0 = ad.matmul(dp, sysm.op.A)
        z = ad.Tensor(np.zeros((b, sysm.dstack.shape[0])))
        u = ad.Tensor(np.zeros((b, sysm.dstack.shape[0])))
        thresh = ad.div(self.lam_tv, self.rho)
        x = None
        for _ in range(self.layers):
            rhs = ad.add(rhs0, ad.mul(self.rho, ad.matmul(ad.sub(z, u), sysm.dstack)))
            x = ad.spd_solve(sysm.AtA, [(self.rho, sysm.lap)], rhs, jitter=self.ridge)
            dx = ad.matmul(x, sysm.dstack.T)
            z = ad.soft_threshold(ad.add(dx, u), thresh)
            u = ad.sub(ad.add(u, dx), z)
            if history is not None:
                history.append(float(np.linalg.norm(dx.value - z.value)))
        if return_state:
            return x
        return ad.reshape(ad.relu(x[:, sysm.n:]), (b, sysm.op.grid.ny, sysm.op.grid.nx))


class DirectInversionModel:
    """Affine map from measurements to [chi_R | chi_I], then T cascaded priors."""

    def __init__(self, sysm: LinearSystem, layers: int = 3, prior_config: PriorConfig = PriorConfig(),
                 seed: int = 0, weight_std: float = 1e-3):
        L, n2 = sysm.op.A.shape
        self.kind, self.layers = "di", layers
        # small random start: with W = 0 every activation is exactly zero and
        # the ReLU subgradient at 0 would block all gradients
        w0 = Xoshiro256.for_stream(seed, 2**32).normal_array((L, n2), weight_std)
        self.W = ad.Tensor(w0, requires_grad=True, name="di_W")
        self.b = ad.Tensor(np.zeros(n2), requires_grad=True, name="di_b")
        self.priors = [weight_init(PriorNet(prior_config, f"prior{i + 1}"), seed * 1000 + i)
                       for i in range(layers)]
        self.prior_config = prior_config

    def reg_params(self):
        return []

    def other_params(self):
        return [self.W, self.b] + [p for net in self.priors for p in net.parameters()]

    def clamped(self):
        return []

    def buffers(self):
        out = {}
        for net in self.priors:
            out.update(net.buffers())
        return out

    def forward(self, sysm: LinearSystem, dp, train: bool = False, return_state: bool = False,
                trace: list | None = None):
        dp = dp if isinstance(dp, ad.Tensor) else ad.Tensor(np.atleast_2d(dp))
        if dp.shape[-1] != self.W.shape[0]:
            raise ValueError(f"expected {self.W.shape[0]} measurements, got {dp.shape[-1]}")
        b, n = dp.shape[0], sysm.n
        ny, nx = sysm.op.grid.ny, sysm.op.grid.nx
        x = ad.add(ad.matmul(dp, self.W), self.b)
        zr = ad.reshape(x[:, :n], (b, ny, nx))
        zi = ad.reshape(x[:, n:], (b, ny, nx))
        for net in self.priors:
            zi = net(zr, zi, train)
            if trace is not None:
                trace.append((net.name, float(np.linalg.norm(zi.value))))
        if return_state:
            return ad.concat([ad.reshape(zr, (b, n)), ad.reshape(zi, (b, n))], axis=1)
        return ad.relu(zi)


def model_parameters(model) -> list[ad.Tensor]:
    return list(model.reg_params()) + list(model.other_params())


def run_unrolled(model, op, diffs, delta_p, train: bool = False, return_state: bool = False) -> np.ndarray:
    """Reconstruct delta*sqrt(eps_R) image(s) from measurement row(s)."""
    sysm = _system(op, diffs)
    dp = np.asarray(delta_p, dtype=np.float64)
    out = model.forward(sysm, ad.Tensor(np.atleast_2d(dp)), train=train, return_state=return_state).value
    return out[0] if dp.ndim == 1 else out


def admm_tv(model: TvModel, op, diffs, delta_p) -> np.ndarray:
    return run_unrolled(model, op, diffs, delta_p)


def direct_inversion(model: DirectInversionModel, op, diffs, delta_p) -> np.ndarray:
    return run_unrolled(model, op, diffs, delta_p)


def tikhonov_image(op, diffs, lam1, lam2, delta_p) -> np.ndarray:
    """The init-only estimate: ReLU(chi_I) of the Tikhonov layer, as images."""
    sysm = _system(op, diffs)
    state = tikhonov_init(sysm, sysm.diffs, lam1, lam2, delta_p)
    return state.chi_i.reshape(np.shape(delta_p)[:-1] + (sysm.op.grid.ny, sysm.op.grid.nx))


def build_model(kind: str, sysm: LinearSystem, layers: int = 3, prior_config: PriorConfig = PriorConfig(),
                seed: int = 0):
    if kind in ("tk-dprior", "dprior"):
        return UnrolledModel(sysm, layers, kind, "learned", prior_config, seed)
    if kind == "tv":
        return TvModel(sysm, max(layers, 1))
    if kind == "di":
        return DirectInversionModel(sysm, layers, prior_config, seed)
    raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
