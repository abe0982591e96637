"""Linear difference (LD) imaging with a squared-exponential smoothness prior.

The change ``delta = sigma2 - sigma1`` is estimated from ``dV = V2 - V1`` by
one regularized least-squares solve around a homogeneous linearization point
fitted to the first frame:

    min ||L_de (dV - J delta)||^2 + ||R delta||^2
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist

from .fem import CurrentPatternSet, compute_jacobian, fit_homogeneous_sigma
from .mesh import Mesh

LD_FORMAT_VERSION = 1
DEFAULT_MARGINAL_STD = 0.2
DEFAULT_RELATIVE_NOISE = 0.00067


class ConditioningError(RuntimeError):
    """A factorization failed because a matrix is not numerically SPD."""


@dataclass(frozen=True, eq=False)
class CorrelationRegularizer:
    """Prior precision factor ``R`` with ``R^T R = inv(Gamma_pr)``."""

    R: np.ndarray
    correlation_length: float
    marginal_std: float
    precision: np.ndarray  # R^T R, kept to avoid re-forming it per solve
    mesh_id: str = ""

    @property
    def kernel_width(self) -> float:
        return kernel_width(self.correlation_length)


def kernel_width(correlation_length: float) -> float:
    """Width ``b`` for which exp(-l^2 / (2 b^2)) = 0.01 at l = correlation_length."""
    return correlation_length / math.sqrt(2.0 * math.log(100.0))


def prior_covariance(points: np.ndarray, correlation_length: float, marginal_std: float) -> np.ndarray:
    b = kernel_width(correlation_length)
    d2 = cdist(points, points, "sqeuclidean")
    return marginal_std ** 2 * np.exp(-d2 / (2.0 * b * b))


def build_correlation_regularizer(mesh: Mesh, correlation_length: float | None = None,
                                  marginal_std: float = DEFAULT_MARGINAL_STD,
                                  jitter: float = 1e-9) -> CorrelationRegularizer:
    """Squared-exponential prior on the nodes of ``mesh``.

    ``correlation_length`` defaults to a third of the head width (two thirds
    of the outer radius). ``jitter`` is relative to the prior variance.
    """
    if correlation_length is None:
        correlation_length = 2.0 * mesh.radii.get("outer", np.abs(mesh.nodes).max()) / 3.0
    if correlation_length <= 0 or marginal_std <= 0:
        raise ValueError("correlation length and marginal std must be positive")
    cov = prior_covariance(mesh.nodes, correlation_length, marginal_std)
    cov[np.diag_indices_from(cov)] += jitter * marginal_std ** 2
    try:
        cf = sla.cho_factor(cov, lower=True)
        precision = sla.cho_solve(cf, np.eye(len(cov)))
        precision = 0.5 * (precision + precision.T)
        R = sla.cholesky(precision, lower=False)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(f"prior covariance is not positive definite after jitter: {exc}") from exc
    return CorrelationRegularizer(R, float(correlation_length), float(marginal_std),
                                  precision, mesh.mesh_id)


@dataclass(frozen=True, eq=False)
class LDResult:
    delta: np.ndarray
    sigma0: float
    solve_time: float
    mesh_id: str = ""

    def to_dict(self) -> dict:
        return {
            "version": LD_FORMAT_VERSION,
            "meshId": self.mesh_id,
            "sigma0": self.sigma0,
            "delta": self.delta.tolist(),
            "solveTimeSeconds": self.solve_time,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LDResult":
        if data.get("version") != LD_FORMAT_VERSION:
            raise ValueError(f"unsupported LD file version {data.get('version')!r}")
        return cls(np.asarray(data["delta"], dtype=float), float(data["sigma0"]),
                   float(data.get("solveTimeSeconds", 0.0)), data.get("meshId", ""))


def save_ld(result: LDResult, path, extra: dict | None = None) -> None:
    payload = result.to_dict()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload))


def load_ld(path) -> LDResult:
    return LDResult.from_dict(json.loads(Path(path).read_text()))


class LDLinearization:
    """Factorized LD normal equations at a fixed ``sigma0``.

    ``solve`` is a linear map of ``dV``; reusing one instance guarantees
    ``solve(a * dV) == a * solve(dV)`` up to rounding.
    """

    def __init__(self, J: np.ndarray, reg: CorrelationRegularizer, noise_std: float,
                 sigma0: float = float("nan")):
        if noise_std <= 0:
            raise ValueError("noise standard deviation must be positive")
        self.J = J
        self.sigma0 = sigma0
        # Gamma_de = Gamma_e1 + Gamma_e2 = 2 s^2 I, so L_de = I / (sqrt(2) s)
        self.weight = 1.0 / (2.0 * noise_std ** 2)
        normal = self.weight * (J.T @ J) + reg.precision
        try:
            self._cf = sla.cho_factor(normal, lower=False)
        except np.linalg.LinAlgError as exc:
            raise ConditioningError("LD normal matrix is singular; the regularization is too weak") from exc

    def solve(self, dV: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self._cf, self.weight * (self.J.T @ dV))


def default_noise_std(pair) -> float:
    """Noise level used for the data weighting of a monitoring pair."""
    std = float(getattr(pair, "noise_std", 0.0) or 0.0)
    if std > 0:
        return std
    return DEFAULT_RELATIVE_NOISE * float(np.abs(pair.V1.voltages).max())


def linearize(V1: np.ndarray, inv_mesh: Mesh, z, patterns: CurrentPatternSet,
              reg: CorrelationRegularizer, noise_std: float) -> LDLinearization:
    sigma0 = fit_homogeneous_sigma(V1, inv_mesh, z, patterns)
    J = compute_jacobian(inv_mesh, sigma0, z, patterns)
    return LDLinearization(J, reg, noise_std, sigma0)


def reconstruct_ld(pair, inv_mesh: Mesh, z, patterns: CurrentPatternSet,
                   reg: CorrelationRegularizer, noise_std: float | None = None) -> LDResult:
    """One-step linear difference reconstruction on ``inv_mesh``.

    ``pair`` is a monitoring pair with frames ``V1`` and ``V2``. Data are
    weighted by the pair's noise level, or by the nominal relative level
    (0.067 % of max|V1|) for noiseless pairs.
    """
    if reg.mesh_id and reg.mesh_id != inv_mesh.mesh_id:
        raise ValueError("regularizer was built on a different mesh")
    t0 = time.perf_counter()
    std = default_noise_std(pair) if noise_std is None else noise_std
    lin = linearize(pair.V1.voltages, inv_mesh, z, patterns, reg, std)
    delta = lin.solve(pair.V2.voltages - pair.V1.voltages)
    if not np.all(np.isfinite(delta)):
        raise ConditioningError("LD solution is not finite")
    return LDResult(delta, lin.sigma0, time.perf_counter() - t0, inv_mesh.mesh_id)
