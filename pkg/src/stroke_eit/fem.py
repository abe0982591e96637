"""Complete electrode model: assembly, forward solves, Jacobian, constant fit.

The CEM system for nodal potentials ``u`` and electrode potentials ``U`` is

    [ K(sigma) + C    -E ] [u]   [0]
    [   -E^T           D ] [U] = [I]

with ``K`` the P1 stiffness matrix, ``C``/``E``/``D`` the electrode coupling
blocks scaled by ``1/z``. The constant vector spans its null space; adding
``c * 1 1^T`` to the ``D`` block removes it and, because admissible current
patterns sum to zero, selects the solution with ``sum(U) == 0``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import minimize_scalar

from .mesh import Mesh, barycentric_gradients

logger = logging.getLogger(__name__)

VOLTAGE_FORMAT_VERSION = 1


class AssemblyError(RuntimeError):
    """The CEM system could not be assembled or factorized."""


class NumericError(RuntimeError):
    """A linear solve did not reach the required residual."""


class FitError(RuntimeError):
    """The homogeneous conductivity fit could not bracket a minimum."""


@dataclass(frozen=True, eq=False)
class CurrentPatternSet:
    """Current patterns ``I^(j)``, one row per pattern, in amperes."""

    patterns: np.ndarray
    amplitude: float
    name: str = "custom"

    def __post_init__(self):
        self.patterns.setflags(write=False)

    @property
    def count(self) -> int:
        return self.patterns.shape[0]

    @property
    def electrode_count(self) -> int:
        return self.patterns.shape[1]

    def validate(self) -> None:
        scale = np.abs(self.patterns).max()
        if not np.all(np.abs(self.patterns.sum(axis=1)) <= 1e-12 * scale):
            raise ValueError("every current pattern must sum to zero")

    def to_dict(self) -> dict:
        return {"name": self.name, "amplitude": self.amplitude,
                "patterns": self.patterns.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "CurrentPatternSet":
        return cls(np.asarray(data["patterns"], dtype=float), float(data["amplitude"]),
                   data.get("name", "custom"))


def adjacent_patterns(L: int, amplitude: float = 1e-3) -> CurrentPatternSet:
    """Pair drives (l, l+1 mod L); L patterns of rank L-1."""
    p = np.zeros((L, L))
    for ell in range(L):
        p[ell, ell] = amplitude
        p[ell, (ell + 1) % L] = -amplitude
    return CurrentPatternSet(p, amplitude, "adjacent")


def reference_patterns(L: int, amplitude: float = 1e-3, reference: int = 0) -> CurrentPatternSet:
    """Pair drives from every other electrode against ``reference``."""
    rows = []
    for ell in range(L):
        if ell == reference:
            continue
        r = np.zeros(L)
        r[ell] = amplitude
        r[reference] = -amplitude
        rows.append(r)
    return CurrentPatternSet(np.asarray(rows), amplitude, "reference")


def default_patterns(dimension: int, L: int, amplitude: float = 1e-3) -> CurrentPatternSet:
    return adjacent_patterns(L, amplitude) if dimension == 2 else reference_patterns(L, amplitude)


def contact_impedances(L: int, value: float = 1e-3) -> np.ndarray:
    return np.full(L, float(value))


@dataclass(frozen=True, eq=False)
class ForwardSolution:
    """Nodal potentials ``(P, N)`` and electrode potentials ``(P, L)``."""

    potentials: np.ndarray
    electrode_potentials: np.ndarray
    residual: float


@dataclass(frozen=True, eq=False)
class VoltageFrame:
    """Electrode voltages ordered pattern-major, then electrode."""

    voltages: np.ndarray
    patterns: CurrentPatternSet
    mesh_id: str

    def as_matrix(self) -> np.ndarray:
        return self.voltages.reshape(self.patterns.count, self.patterns.electrode_count)

    def to_dict(self) -> dict:
        return {"version": VOLTAGE_FORMAT_VERSION, "meshId": self.mesh_id,
                "patternSet": self.patterns.to_dict(),
                "voltages": self.voltages.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "VoltageFrame":
        if data.get("version") != VOLTAGE_FORMAT_VERSION:
            raise ValueError(f"unsupported voltage file version {data.get('version')!r}")
        return cls(np.asarray(data["voltages"], dtype=float),
                   CurrentPatternSet.from_dict(data["patternSet"]), data["meshId"])


def save_voltage_frame(frame: VoltageFrame, path, extra: dict | None = None) -> None:
    payload = frame.to_dict()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload))


def load_voltage_frame(path) -> VoltageFrame:
    return VoltageFrame.from_dict(json.loads(Path(path).read_text()))


class CEMModel:
    """Precomputed geometry of the CEM on one mesh with fixed contact impedances.

    Conductivity enters only through the stiffness values, so the sparsity
    pattern and the electrode blocks are built once.
    """

    def __init__(self, mesh: Mesh, z):
        self.mesh = mesh
        z = np.broadcast_to(np.asarray(z, dtype=float), (mesh.electrode_count,)).copy()
        if np.any(z <= 0):
            raise AssemblyError("contact impedances must be positive")
        self.z = z
        d = mesh.dimension
        n, L = mesh.node_count, mesh.electrode_count
        self.n, self.L, self.d = n, L, d
        coords = mesh.nodes[mesh.elements]
        self.grads = barycentric_gradients(coords)  # (M, d, d+1)
        self.volumes = mesh.element_measures()
        local = self.volumes[:, None, None] * np.einsum("mki,mkj->mij", self.grads, self.grads)
        self._local = local.reshape(len(local), -1)  # per unit conductivity
        k = d + 1
        rows = np.repeat(mesh.elements, k, axis=1).ravel()
        cols = np.tile(mesh.elements, (1, k)).ravel()
        # map every local entry to its slot in the CSR data array
        coo = sp.coo_matrix((np.arange(len(rows)), (rows, cols)), shape=(n, n))
        self._csr_slots = self._slot_map(coo, n)
        self._csr_template = sp.csr_matrix(
            (np.zeros(self._nnz), self._indices, self._indptr), shape=(n, n))
        # element-to-node incidence weighted by the P1 mean (1/(d+1))
        self.node_incidence = sp.csr_matrix(
            (np.repeat(1.0 / k, k * len(mesh.elements)),
             (mesh.elements.ravel(), np.repeat(np.arange(len(mesh.elements)), k))),
            shape=(n, len(mesh.elements)))
        self._electrode_blocks()
        self._factor_cache: tuple | None = None

    def _slot_map(self, coo: sp.coo_matrix, n: int) -> np.ndarray:
        order = np.lexsort((coo.col, coo.row))
        r, c = coo.row[order], coo.col[order]
        new = np.ones(len(r), dtype=bool)
        new[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
        slot_sorted = np.cumsum(new) - 1
        slots = np.empty(len(r), dtype=np.int64)
        slots[coo.data[order].astype(np.int64)] = slot_sorted
        ur, uc = r[new], c[new]
        self._nnz = int(new.sum())
        self._indices = uc.astype(np.int32)
        self._indptr = np.concatenate([[0], np.cumsum(np.bincount(ur, minlength=n))]).astype(np.int32)
        return slots

    def _electrode_blocks(self) -> None:
        mesh, n, L, d = self.mesh, self.n, self.L, self.d
        C = sp.csr_matrix((n, n))
        E = np.zeros((n, L))
        D = np.zeros(L)
        mass_local = (np.ones((d, d)) + np.eye(d)) / (d * (d + 1))
        for ell, facets_idx in enumerate(mesh.electrodes):
            facets = mesh.boundary_facets[facets_idx]
            meas = mesh.facet_measures(facets)
            rows = np.repeat(facets, d, axis=1).ravel()
            cols = np.tile(facets, (1, d)).ravel()
            vals = (meas[:, None, None] * mass_local[None]).ravel() / self.z[ell]
            C = C + sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
            np.add.at(E[:, ell], facets.ravel(), np.repeat(meas / d, d) / self.z[ell])
            D[ell] = meas.sum() / self.z[ell]
        self.C = C.tocsr()
        self.E = sp.csr_matrix(E)
        self.D = D
        self.electrode_lengths = D * self.z
        ground = float(D.mean())
        self._U_block = np.diag(D) + ground * np.ones((L, L))

    # ------------------------------------------------------------------
    def stiffness(self, sigma: np.ndarray) -> sp.csr_matrix:
        sigma = np.asarray(sigma, dtype=float)
        elem_sigma = sigma[self.mesh.elements].mean(axis=1)
        vals = (elem_sigma[:, None] * self._local).ravel()
        data = np.bincount(self._csr_slots, vals, minlength=self._nnz)
        K = self._csr_template.copy()
        K.data = data
        return K

    def system_matrix(self, sigma: np.ndarray) -> sp.csc_matrix:
        sigma = np.asarray(sigma, dtype=float)
        if sigma.shape != (self.n,):
            raise AssemblyError(f"conductivity has shape {sigma.shape}, expected ({self.n},)")
        if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
            raise AssemblyError("conductivity must be finite and positive at every node")
        K = self.stiffness(sigma)
        return sp.bmat([[K + self.C, -self.E], [-self.E.T, sp.csr_matrix(self._U_block)]],
                       format="csc")

    def factorize(self, sigma: np.ndarray):
        sigma = np.asarray(sigma, dtype=float)
        cached = self._factor_cache
        if cached is not None and np.array_equal(cached[0], sigma):
            return cached[1], cached[2]
        A = self.system_matrix(sigma)
        try:
            lu = spla.splu(A, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise AssemblyError(f"CEM system is singular: {exc}") from exc
        self._factor_cache = (sigma.copy(), lu, A)
        return lu, A

    def _solve(self, lu, A, rhs: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        x = lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise NumericError("CEM solve produced non-finite values")
        res = A @ x - rhs
        scale = np.abs(rhs).max() if np.abs(rhs).max() > 0 else 1.0
        rel = float(np.abs(res).max() / scale)
        if rel > tol:
            # one step of iterative refinement before giving up
            x = x - lu.solve(res)
            rel = float(np.abs(A @ x - rhs).max() / scale)
            if rel > tol:
                raise NumericError(f"CEM solve residual {rel:.3e} exceeds {tol:.1e}")
        return x

    def solve(self, sigma: np.ndarray, patterns: CurrentPatternSet) -> ForwardSolution:
        if patterns.electrode_count != self.L:
            raise AssemblyError("pattern electrode count does not match the mesh")
        patterns.validate()
        lu, A = self.factorize(sigma)
        rhs = np.zeros((self.n + self.L, patterns.count))
        rhs[self.n:, :] = patterns.patterns.T
        x = self._solve(lu, A, rhs)
        res = float(np.abs(A @ x - rhs).max())
        return ForwardSolution(x[: self.n].T.copy(), x[self.n:].T.copy(), res)

    def voltages(self, sigma: np.ndarray, patterns: CurrentPatternSet) -> np.ndarray:
        return self.solve(sigma, patterns).electrode_potentials.ravel()

    def measurement_fields(self, sigma: np.ndarray) -> np.ndarray:
        """Adjoint fields, one per electrode: solutions for unit electrode loads."""
        lu, A = self.factorize(sigma)
        rhs = np.zeros((self.n + self.L, self.L))
        rhs[self.n:, :] = np.eye(self.L)
        return self._solve(lu, A, rhs)[: self.n].T

    def jacobian(self, sigma: np.ndarray, patterns: CurrentPatternSet) -> np.ndarray:
        """dU/dsigma_h for all patterns/electrodes, shape ``(P*L, N)``.

        Uses the measurement-field identity
        ``dU_l^(j)/dsigma_h = -int phi_h grad u^(j) . grad v_l``
        with ``v_l`` the adjoint field of electrode ``l``.
        """
        sol = self.solve(sigma, patterns)
        v = self.measurement_fields(sigma)  # (L, N)
        el = self.mesh.elements
        gu = np.einsum("mki,pmi->mkp", self.grads, sol.potentials[:, el])  # (M, d, P)
        gv = np.einsum("mki,lmi->mkl", self.grads, v[:, el])  # (M, d, L)
        P, L = patterns.count, self.L
        prod = np.einsum("mkp,mkl->mpl", gu, gv).reshape(len(el), P * L)
        prod *= self.volumes[:, None]
        return -(self.node_incidence @ prod).T

    def jacobian_direct(self, sigma: np.ndarray, patterns: CurrentPatternSet) -> np.ndarray:
        """Jacobian by one sensitivity solve per node; for verification only."""
        sol = self.solve(sigma, patterns)
        lu, A = self.factorize(sigma)
        x = np.vstack([sol.potentials.T, sol.electrode_potentials.T])  # (n+L, P)
        J = np.empty((patterns.count * self.L, self.n))
        for h in range(self.n):
            e = np.zeros(self.n)
            e[h] = 1.0
            dK = self.stiffness(e)
            rhs = np.zeros_like(x)
            rhs[: self.n] = -(dK @ x[: self.n])
            dx = lu.solve(rhs)
            J[:, h] = dx[self.n:].T.ravel()
        return J


_MODEL_CACHE: dict = {}


def cem_model(mesh: Mesh, z) -> CEMModel:
    """Shared :class:`CEMModel` per mesh and contact impedance vector."""
    key = (mesh.mesh_id, tuple(np.broadcast_to(np.asarray(z, float), (mesh.electrode_count,))))
    model = _MODEL_CACHE.get(key)
    if model is None:
        if len(_MODEL_CACHE) > 8:
            _MODEL_CACHE.clear()
        model = _MODEL_CACHE[key] = CEMModel(mesh, z)
    return model


def solve_forward(mesh: Mesh, sigma, z, patterns: CurrentPatternSet):
    """Forward CEM solve; returns ``(ForwardSolution, VoltageFrame)``."""
    sol = cem_model(mesh, z).solve(np.asarray(sigma, dtype=float), patterns)
    return sol, VoltageFrame(sol.electrode_potentials.ravel(), patterns, mesh.mesh_id)


def compute_jacobian(mesh: Mesh, sigma0, z, patterns: CurrentPatternSet) -> np.ndarray:
    sigma0 = np.broadcast_to(np.asarray(sigma0, dtype=float), (mesh.node_count,))
    return cem_model(mesh, z).jacobian(np.array(sigma0), patterns)


def fit_homogeneous_sigma(V1, mesh: Mesh, z, patterns: CurrentPatternSet,
                          rtol: float = 1e-6, weights=None) -> float:
    """Best constant conductivity ``argmin_c ||V1 - U(c)||^2``.

    A logarithmic grid brackets the minimum, Brent's method refines it in
    ``log c``, where an absolute tolerance is a relative tolerance on ``c``.
    """
    V1 = V1.voltages if isinstance(V1, VoltageFrame) else np.asarray(V1, dtype=float)
    if not np.all(np.isfinite(V1)):
        raise FitError("voltage data contain non-finite values")
    model = cem_model(mesh, z)
    ones = np.ones(mesh.node_count)
    w = np.ones_like(V1) if weights is None else np.asarray(weights, dtype=float)

    def misfit(logc: float) -> float:
        r = V1 - model.voltages(math.exp(logc) * ones, patterns)
        return float(np.sum(w * r * r))

    grid = np.log(np.logspace(-4, 2, 25))
    values = np.array([misfit(g) for g in grid])
    i = int(values.argmin())
    if i == 0 or i == len(grid) - 1:
        raise FitError("no interior minimum of the constant-conductivity misfit on "
                       "[1e-4, 1e2] S/m; inspect the measurement data")
    res = minimize_scalar(misfit, bracket=(grid[i - 1], grid[i], grid[i + 1]),
                          method="brent", options={"xtol": rtol * 0.1})
    if not res.success:
        raise FitError(f"Brent minimization failed: {res.message}")
    return float(math.exp(res.x))
