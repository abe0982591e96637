"""Nonlinear stroke-monitoring (MO) reconstruction.

Both frames are fitted jointly with the unknown ``x = [sigma1; delta]``:

    F(x) = ||(V1 - U(sigma1)) / s||^2 + ||(V2 - U(sigma1 + K delta)) / s||^2
           + TV_B(sigma1; kappa) + TV(K delta)

where ``K`` zero-extends ``delta`` from the region of interest. The solver is
a Gauss-Newton iteration with lagged TV weights (the diffusivities are frozen
at the current iterate), a direct solve of the normal equations and a
projected Armijo backtracking line search.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .fem import CurrentPatternSet, cem_model, fit_homogeneous_sigma
from .mesh import BRAIN, SKIN, SKULL, Mesh, barycentric_gradients, interpolation_matrix, node_layers
from .phantom import BRAIN_SIGMA, SKIN_SIGMA, SKULL_SIGMA
from .recon_linear import ConditioningError, default_noise_std

MO_FORMAT_VERSION = 1


class LineSearchWarning(RuntimeWarning):
    """The line search found no decrease; the last iterate is returned."""


# --------------------------------------------------------------------------
# regularizers


class GradientOperator:
    """Elementwise-constant P1 gradients as a sparse ``(M*d, N)`` matrix."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        grads = barycentric_gradients(mesh.nodes[mesh.elements])  # (M, d, d+1)
        M, d, k = grads.shape
        self.M, self.d = M, d
        rows = np.repeat(np.arange(M * d), k)
        cols = np.repeat(mesh.elements, d, axis=0).ravel()
        self.G = sp.csr_matrix((grads.ravel(), (rows, cols)), shape=(M * d, mesh.node_count))
        self.areas = mesh.element_measures()

    def __call__(self, f: np.ndarray) -> np.ndarray:
        return (self.G @ f).reshape(self.M, self.d)


_GRAD_CACHE: dict = {}


def gradient_operator(mesh: Mesh) -> GradientOperator:
    op = _GRAD_CACHE.get(mesh.mesh_id)
    if op is None:
        if len(_GRAD_CACHE) > 8:
            _GRAD_CACHE.clear()
        op = _GRAD_CACHE[mesh.mesh_id] = GradientOperator(mesh)
    return op


def level_set_tensor(kappa: np.ndarray, mesh: Mesh, gamma: float, eta: float | None = None) -> np.ndarray:
    """Per-element B(kappa) = I - gamma k k^T / (|k|^2 + eta^2), shape (M, d, d)."""
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    op = gradient_operator(mesh)
    k = op(np.asarray(kappa, dtype=float))
    kk = np.einsum("mi,mi->m", k, k)
    if eta is None:
        eta = 1e-3 * float(np.sqrt(kk.max())) if kk.max() > 0 else 1.0
    eye = np.broadcast_to(np.eye(op.d), (op.M, op.d, op.d))
    return eye - gamma * np.einsum("mi,mj->mij", k, k) / (kk + eta * eta)[:, None, None]


def _tv(field, mesh, alpha, beta, B):
    op = gradient_operator(mesh)
    g = op(np.asarray(field, dtype=float))
    Bg = g if B is None else np.einsum("mij,mj->mi", B, g)
    s = np.sqrt(np.einsum("mi,mi->m", g, Bg) + beta * beta)
    value = alpha * float(np.sum(op.areas * s))
    grad = alpha * (op.G.T @ ((op.areas / s)[:, None] * Bg).ravel())
    return value, grad, s


def smoothed_tv(field: np.ndarray, mesh: Mesh, alpha: float, beta: float):
    """alpha * sum_T |T| sqrt(|grad f|^2 + beta^2) and its gradient."""
    value, grad, _ = _tv(field, mesh, alpha, beta, None)
    return value, grad


def weighted_tv(field: np.ndarray, kappa: np.ndarray, mesh: Mesh, alpha: float, beta: float,
                gamma: float, eta: float | None = None):
    """Level-set weighted smoothed TV, alpha * sum_T |T| sqrt(g^T B(kappa) g + beta^2)."""
    if gamma == 0:
        return smoothed_tv(field, mesh, alpha, beta)
    value, grad, _ = _tv(field, mesh, alpha, beta, level_set_tensor(kappa, mesh, gamma, eta))
    return value, grad


def lagged_tv_hessian(field: np.ndarray, mesh: Mesh, alpha: float, beta: float,
                      B: np.ndarray | None = None) -> sp.csr_matrix:
    """alpha * G^T diag(|T| B_T / s_T) G with s frozen at ``field``."""
    op = gradient_operator(mesh)
    _, _, s = _tv(field, mesh, alpha, beta, B)
    w = alpha * op.areas / s
    if B is None:
        W = sp.diags(np.repeat(w, op.d))
    else:
        blocks = w[:, None, None] * B
        d = op.d
        rows = np.repeat(np.arange(op.M * d).reshape(op.M, d), d, axis=1).ravel()
        cols = np.tile(np.arange(op.M * d).reshape(op.M, d), (1, d)).ravel()
        W = sp.csr_matrix((blocks.ravel(), (rows, cols)), shape=(op.M * d, op.M * d))
    return (op.G.T @ W @ op.G).tocsr()


# --------------------------------------------------------------------------
# problem definition


@dataclass(frozen=True, eq=False)
class ROIMap:
    """Region of interest for the change, with zero extension ``K``."""

    nodes: np.ndarray
    node_count: int

    def __post_init__(self):
        nodes = np.unique(np.asarray(self.nodes, dtype=np.int64))
        if len(nodes) == 0:
            raise ValueError("ROI is empty")
        if nodes[0] < 0 or nodes[-1] >= self.node_count:
            raise ValueError("ROI node index out of range")
        object.__setattr__(self, "nodes", nodes)

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def is_full(self) -> bool:
        return self.size == self.node_count

    @classmethod
    def brain(cls, mesh: Mesh) -> "ROIMap":
        return cls(np.flatnonzero(node_layers(mesh) == BRAIN), mesh.node_count)

    @classmethod
    def full(cls, mesh: Mesh) -> "ROIMap":
        return cls(np.arange(mesh.node_count), mesh.node_count)

    def extend(self, delta: np.ndarray) -> np.ndarray:
        out = np.zeros(self.node_count)
        out[self.nodes] = delta
        return out

    def restrict(self, field: np.ndarray) -> np.ndarray:
        """K^T: the adjoint of the zero extension."""
        return np.asarray(field)[self.nodes]

    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((np.ones(self.size), (self.nodes, np.arange(self.size))),
                             shape=(self.node_count, self.size))


def layered_reference(mesh: Mesh, skin=SKIN_SIGMA, skull=SKULL_SIGMA, brain=BRAIN_SIGMA) -> np.ndarray:
    """Nominal layered conductivity used as the structural reference kappa."""
    layers = node_layers(mesh)
    return np.select([layers == BRAIN, layers == SKULL, layers == SKIN], [brain, skull, skin])


@dataclass(frozen=True)
class MOParams:
    alpha_delta: float = 1e4
    alpha_sigma1: float = 1e4
    beta: float = 1e-4
    gamma: float = 0.9
    max_iterations: int = 50
    objective_tolerance: float = 1e-6
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    max_halvings: int = 20
    sigma_floor: float = 1e-4

    def validate(self) -> None:
        if self.alpha_delta <= 0 or self.alpha_sigma1 <= 0:
            raise ValueError("regularization weights must be positive")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.sigma_floor <= 0:
            raise ValueError("sigma floor must be positive")

    def to_dict(self) -> dict:
        return {
            "alphaDelta": self.alpha_delta, "alphaSigma1": self.alpha_sigma1, "beta": self.beta,
            "gamma": self.gamma, "maxIterations": self.max_iterations,
            "objectiveTolerance": self.objective_tolerance, "armijoC": self.armijo_c,
            "backtrackFactor": self.backtrack_factor, "maxHalvings": self.max_halvings,
            "sigmaFloor": self.sigma_floor,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MOParams":
        keys = {"alphaDelta": "alpha_delta", "alphaSigma1": "alpha_sigma1", "beta": "beta",
                "gamma": "gamma", "maxIterations": "max_iterations",
                "objectiveTolerance": "objective_tolerance", "armijoC": "armijo_c",
                "backtrackFactor": "backtrack_factor", "maxHalvings": "max_halvings",
                "sigmaFloor": "sigma_floor"}
        return cls(**{keys[k]: v for k, v in data.items() if k in keys})


@dataclass(frozen=True, eq=False)
class MOResult:
    sigma1: np.ndarray
    delta_roi: np.ndarray
    delta: np.ndarray  # zero-extended to the whole mesh
    objective_trace: list = field(default_factory=list)
    iterations: int = 0
    solve_time: float = 0.0
    line_search_failed: bool = False
    mesh_id: str = ""

    def to_dict(self) -> dict:
        return {
            "version": MO_FORMAT_VERSION,
            "meshId": self.mesh_id,
            "sigma1": self.sigma1.tolist(),
            "delta": self.delta.tolist(),
            "objectiveTrace": list(self.objective_trace),
            "iterations": self.iterations,
            "lineSearchFailed": self.line_search_failed,
            "solveTimeSeconds": self.solve_time,
        }


def save_mo(result: MOResult, path, extra: dict | None = None) -> None:
    payload = result.to_dict()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload))


def load_mo(path) -> dict:
    data = json.loads(Path(path).read_text())
    if data.get("version") != MO_FORMAT_VERSION:
        raise ValueError(f"unsupported MO file version {data.get('version')!r}")
    return data


class ForwardMap:
    """Electrode voltages as a function of nodal conductivity on ``mesh``.

    With a separate ``forward_mesh`` the CEM is solved there on the P1
    interpolant of the conductivity, which decouples the resolution of the
    unknown from the accuracy of the forward model.
    """

    def __init__(self, mesh: Mesh, z, patterns: CurrentPatternSet, forward_mesh: Mesh | None = None):
        self.patterns = patterns
        if forward_mesh is None or forward_mesh is mesh:
            self.model = cem_model(mesh, z)
            self.P = None
        else:
            self.model = cem_model(forward_mesh, z)
            self.P = interpolation_matrix(mesh, forward_mesh.nodes)

    def _lift(self, sigma):
        return sigma if self.P is None else self.P @ sigma

    def voltages(self, sigma: np.ndarray) -> np.ndarray:
        return self.model.voltages(self._lift(sigma), self.patterns)

    def jacobian(self, sigma: np.ndarray):
        """(J, U) at ``sigma``; J is taken with respect to the nodal values on ``mesh``."""
        s = self._lift(sigma)
        J = self.model.jacobian(s, self.patterns)
        U = self.model.voltages(s, self.patterns)
        if self.P is not None:
            J = np.asarray((self.P.T @ J.T).T)
        return J, U


class MOProblem:
    """Objective, gradient and lagged Gauss-Newton system of the MO functional."""

    def __init__(self, V1, V2, mesh: Mesh, z, patterns: CurrentPatternSet, roi: ROIMap,
                 kappa: np.ndarray, params: MOParams, noise_std: float,
                 forward_mesh: Mesh | None = None):
        self.V1, self.V2 = np.asarray(V1, float), np.asarray(V2, float)
        self.mesh, self.patterns, self.roi, self.params = mesh, patterns, roi, params
        self.forward = ForwardMap(mesh, z, patterns, forward_mesh)
        self.w = 1.0 / noise_std ** 2
        self.n = mesh.node_count
        self.B = None if params.gamma == 0 else level_set_tensor(kappa, mesh, params.gamma)
        self.kappa = kappa

    def split(self, x):
        return x[: self.n], x[self.n:]

    def sigma2(self, x):
        s1, d = self.split(x)
        return s1 + d if self.roi.is_full else s1 + self.roi.extend(d)

    def project(self, x):
        s1, d = self.split(x)
        eps = self.params.sigma_floor
        s1 = np.maximum(s1, eps)
        base = s1 if self.roi.is_full else self.roi.restrict(s1)
        d = np.maximum(d, eps - base)
        return np.concatenate([s1, d])

    def free_basis(self, x, grad) -> sp.csr_matrix:
        """Basis of steps that keep binding positivity bounds fixed.

        A bound binds when the iterate sits on it and the gradient pushes
        outward. A binding ``sigma1`` bound freezes that node of ``sigma1``;
        a binding ``sigma2`` bound ties the change to it, delta_i = -sigma1_i,
        so that ``sigma2`` stays put. Without this the projection would undo
        the descent direction at the bounds.
        """
        s1, d = self.split(x)
        g1, g2 = self.split(grad)
        tol = self.params.sigma_floor * (1.0 + 1e-9)
        n, m = self.n, self.roi.size
        roi_nodes = self.roi.nodes
        fixed1 = (s1 <= tol) & (g1 > 0)
        s2_roi = self.roi.restrict(self.sigma2(x))
        tied = (s2_roi <= tol) & (g2 > 0)
        # columns: one per free sigma1 node, one per untied delta entry
        free1 = np.flatnonzero(~fixed1)
        free2 = np.flatnonzero(~tied)
        col1 = np.full(n, -1)
        col1[free1] = np.arange(len(free1))
        rows = [free1, n + free2]
        cols = [np.arange(len(free1)), len(free1) + np.arange(len(free2))]
        vals = [np.ones(len(free1)), np.ones(len(free2))]
        tied_idx = np.flatnonzero(tied)
        tied_nodes = roi_nodes[tied_idx]
        keep = col1[tied_nodes] >= 0
        rows.append(n + tied_idx[keep])
        cols.append(col1[tied_nodes[keep]])
        vals.append(-np.ones(int(keep.sum())))
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n + m, len(free1) + len(free2)))

    def _ext(self, d):
        return d if self.roi.is_full else self.roi.extend(d)

    def _res(self, v):
        return v if self.roi.is_full else self.roi.restrict(v)

    def objective(self, x) -> float:
        s1, d = self.split(x)
        p = self.params
        r1 = self.V1 - self.forward.voltages(s1)
        r2 = self.V2 - self.forward.voltages(self.sigma2(x))
        f = self.w * (r1 @ r1 + r2 @ r2)
        f += _tv(s1, self.mesh, p.alpha_sigma1, p.beta, self.B)[0]
        f += _tv(self._ext(d), self.mesh, p.alpha_delta, p.beta, None)[0]
        return float(f)

    def gauss_newton_system(self, x):
        """Gradient and lagged Gauss-Newton matrix at ``x``."""
        s1, d = self.split(x)
        p = self.params
        s2 = self.sigma2(x)
        J1, U1 = self.forward.jacobian(s1)
        J2, U2 = self.forward.jacobian(s2)
        r1, r2 = self.V1 - U1, self.V2 - U2
        J2K = J2 if self.roi.is_full else J2[:, self.roi.nodes]
        g1 = -2 * self.w * (J1.T @ r1 + J2.T @ r2)
        g2 = -2 * self.w * (J2K.T @ r2)
        _, tg1, _ = _tv(s1, self.mesh, p.alpha_sigma1, p.beta, self.B)
        _, tg2, _ = _tv(self._ext(d), self.mesh, p.alpha_delta, p.beta, None)
        grad = np.concatenate([g1 + tg1, g2 + self._res(tg2)])

        H11 = J1.T @ J1 + J2.T @ J2
        H12 = J2.T @ J2K
        H22 = J2K.T @ J2K
        H = 2 * self.w * np.block([[H11, H12], [H12.T, H22]])
        L1 = lagged_tv_hessian(s1, self.mesh, p.alpha_sigma1, p.beta, self.B).toarray()
        L2 = lagged_tv_hessian(self._ext(d), self.mesh, p.alpha_delta, p.beta)
        if not self.roi.is_full:
            idx = self.roi.nodes
            L2 = L2[idx][:, idx]
        H[: self.n, : self.n] += L1
        H[self.n:, self.n:] += L2.toarray()
        return grad, H


def reconstruct_mo(pair, inv_mesh: Mesh, z, patterns: CurrentPatternSet, roi: ROIMap | None = None,
                   kappa: np.ndarray | None = None, params: MOParams | None = None,
                   noise_std: float | None = None, sigma1_init: np.ndarray | None = None,
                   forward_mesh: Mesh | None = None) -> MOResult:
    """Joint estimate of the baseline and the change by lagged Gauss-Newton.

    The default start is the homogeneous fit of ``V1`` with zero change.
    ``roi`` defaults to the brain nodes and ``kappa`` to the nominal layered
    conductivity of ``inv_mesh``. ``forward_mesh``, when given, carries the
    CEM solves while the unknowns stay on ``inv_mesh``.
    """
    params = params or MOParams()
    params.validate()
    t0 = time.perf_counter()
    roi = roi or ROIMap.brain(inv_mesh)
    if roi.node_count != inv_mesh.node_count:
        raise ValueError("ROI belongs to a different mesh")
    kappa = layered_reference(inv_mesh) if kappa is None else np.asarray(kappa, dtype=float)
    std = default_noise_std(pair) if noise_std is None else noise_std
    V1, V2 = pair.V1.voltages, pair.V2.voltages
    prob = MOProblem(V1, V2, inv_mesh, z, patterns, roi, kappa, params, std, forward_mesh)
    if sigma1_init is None:
        fit_mesh = inv_mesh if forward_mesh is None else forward_mesh
        sigma1_init = np.full(inv_mesh.node_count, fit_homogeneous_sigma(V1, fit_mesh, z, patterns))
    x = prob.project(np.concatenate([np.asarray(sigma1_init, float), np.zeros(roi.size)]))
    f = prob.objective(x)
    trace = [f]
    failed = False
    it = 0
    for it in range(1, params.max_iterations + 1):
        grad, H = prob.gauss_newton_system(x)
        Z = prob.free_basis(x, grad)
        try:
            step = -(Z @ sla.solve(Z.T @ H @ Z, Z.T @ grad, assume_a="pos"))
        except (np.linalg.LinAlgError, sla.LinAlgError) as exc:
            raise ConditioningError(f"Gauss-Newton matrix factorization failed: {exc}") from exc
        if np.abs(step).max() <= 1e-14 * (1.0 + np.abs(x).max()):
            it -= 1  # stationary point: nothing to do
            break
        t = 1.0
        accepted = False
        for _ in range(params.max_halvings + 1):
            x_new = prob.project(x + t * step)
            f_new = prob.objective(x_new)
            if f_new <= f + params.armijo_c * float(grad @ (x_new - x)) and f_new < f:
                accepted = True
                break
            t *= params.backtrack_factor
        if not accepted:
            failed = True
            warnings.warn(f"MO line search found no decrease at iteration {it}", LineSearchWarning)
            it -= 1
            break
        rel = (f - f_new) / max(abs(f), 1e-300)
        x, f = x_new, f_new
        trace.append(f)
        if rel < params.objective_tolerance:
            break
    s1, d = prob.split(x)
    delta = roi.extend(d)
    return MOResult(s1.copy(), d.copy(), delta, trace, it, time.perf_counter() - t0, failed,
                    inv_mesh.mesh_id)
