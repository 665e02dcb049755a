"""Finite element assembly of the coupled heat/moisture balance equations.

The unknown vector is ordered ``(theta_1..theta_N, phi_1..phi_N)``.  Transport
and storage coefficients are evaluated once per element at the centroid
state, so every element matrix is a scalar multiple of the P1 stiffness or
mass matrix.  All routines take a leading batch axis ``B`` so that many
realisations (quadrature nodes, Monte Carlo samples) are assembled together.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .. import coefficients as kc
from .mesh import EXTERIOR, INTERIOR_SIDE, Mesh

_COEFF_NAMES = (
    "ktt", "ktp", "kpt", "kpp", "ct", "cp",
    "ktt_t", "ktt_p", "ktp_t", "ktp_p", "kpt_t", "kpt_p", "kpp_t", "kpp_p", "cp_p",
)


@dataclass
class ElementCoefficients:
    """Per-element coefficients, shape (B, E), and their centroid-state derivatives.

    ``k??`` multiply the stiffness matrix in the four field blocks (first
    letter: equation, second: field differentiated), ``ct``/``cp`` the mass
    matrix of the energy and moisture equations.  ``x_t``/``x_p`` are
    derivatives with respect to centroid temperature and humidity.
    """

    ktt: np.ndarray
    ktp: np.ndarray
    kpt: np.ndarray
    kpp: np.ndarray
    ct: np.ndarray
    cp: np.ndarray
    ktt_t: np.ndarray
    ktt_p: np.ndarray
    ktp_t: np.ndarray
    ktp_p: np.ndarray
    kpt_t: np.ndarray
    kpt_p: np.ndarray
    kpp_t: np.ndarray
    kpp_p: np.ndarray
    cp_p: np.ndarray
    clamped: int = 0


class KunzelTransport:
    """Kuenzel's model: temperature and relative humidity as potentials.

    The vapour flux ``delta_p grad(phi p_sat)`` is expanded into its
    temperature and humidity gradient parts, and the evaporation enthalpy is
    taken inside the divergence of the energy equation.
    """

    def __init__(self, vapour_diffusion: bool = True, liquid_conduction: bool = True):
        self.vapour_diffusion = vapour_diffusion
        self.liquid_conduction = liquid_conduction

    def evaluate(self, params: kc.MaterialParams, theta, phi, derivatives: bool = True) -> ElementCoefficients:
        """Coefficients at centroid states; derivative fields are None unless requested."""
        phi_c, clamped = kc.clamp_phi(phi)
        free = (phi_c == phi).astype(float)
        phi = phi_c
        b = kc.approximation_factor(params)

        lam = kc.thermal_conductivity(params, phi, b)
        hv = kc.evaporation_enthalpy(theta)
        if self.vapour_diffusion:
            dp = kc.vapour_permeability(theta, params.mu)
        else:
            dp = np.zeros(np.broadcast(theta, params.mu).shape)
        ps = kc.saturation_pressure(theta)
        ps_t = kc.saturation_pressure_dtheta(theta)
        if self.liquid_conduction:
            dl = kc.liquid_conduction(params, phi, b)
        else:
            dl = np.zeros(np.broadcast(phi, b).shape)
        cw = kc.water_capacity(params, phi, b)
        ct = np.broadcast_to(kc.enthalpy_capacity(params), np.shape(theta))
        values = dict(
            ktt=lam + hv * dp * phi * ps_t,
            ktp=hv * dp * ps,
            kpt=dp * phi * ps_t,
            kpp=dl + dp * ps,
            ct=ct,
            cp=cw,
            clamped=clamped,
        )
        if not derivatives:
            return ElementCoefficients(**values, **{k: None for k in _COEFF_NAMES[6:]})

        lam_p = kc.thermal_conductivity_dphi(params, phi, b)
        hv_t = kc.evaporation_enthalpy_dtheta(theta)
        if self.vapour_diffusion:
            dp_t = kc.vapour_permeability_dtheta(theta, params.mu)
        else:
            dp_t = np.zeros_like(dp)
        ps_tt = kc.saturation_pressure_d2theta(theta)
        if self.liquid_conduction:
            dl_p = kc.liquid_conduction_dphi(params, phi, b)
        else:
            dl_p = np.zeros_like(dl)
        cw_p = kc.water_capacity_dphi(params, phi, b)
        return ElementCoefficients(
            **values,
            ktt_t=phi * (hv_t * dp * ps_t + hv * dp_t * ps_t + hv * dp * ps_tt),
            ktt_p=free * (lam_p + hv * dp * ps_t),
            ktp_t=hv_t * dp * ps + hv * dp_t * ps + hv * dp * ps_t,
            ktp_p=np.zeros_like(lam),
            kpt_t=phi * (dp_t * ps_t + dp * ps_tt),
            kpt_p=free * dp * ps_t,
            kpp_t=dp_t * ps + dp * ps_t,
            kpp_p=free * dl_p,
            cp_p=free * cw_p,
        )


class ConstantTransport:
    """State and parameter independent coefficients; linear test problems."""

    def __init__(self, ktt=1.0, ktp=0.0, kpt=0.0, kpp=1.0, ct=1.0, cp=1.0):
        self.values = dict(ktt=ktt, ktp=ktp, kpt=kpt, kpp=kpp, ct=ct, cp=cp)

    def evaluate(self, params, theta, phi, derivatives: bool = True) -> ElementCoefficients:
        shape = np.shape(theta)
        vals = {k: np.broadcast_to(np.asarray(v, float), shape) for k, v in self.values.items()}
        zero = np.zeros(shape)
        derivs = {k: zero for k in _COEFF_NAMES[6:]}
        return ElementCoefficients(**vals, **derivs)


def p1_gradients(nodes: np.ndarray, triangles: np.ndarray):
    """Shape function gradients (E, 3, 2) and areas (E,)."""
    p = nodes[triangles]
    x, y = p[..., 0], p[..., 1]
    area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    grads = np.empty(triangles.shape + (2,))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        grads[:, i, 0] = (y[:, j] - y[:, k]) / area2
        grads[:, i, 1] = (x[:, k] - x[:, j]) / area2
    return grads, 0.5 * area2


def element_matrices(mesh: Mesh, lumped: bool = True):
    """Unit-coefficient P1 stiffness and mass matrices, each (E, 3, 3)."""
    grads, area = p1_gradients(mesh.nodes, mesh.triangles)
    stiff = area[:, None, None] * np.einsum("eik,ejk->eij", grads, grads)
    if lumped:
        mass = area[:, None, None] / 3.0 * np.eye(3)
    else:
        mass = area[:, None, None] / 12.0 * (np.ones((3, 3)) + np.eye(3))
    return stiff, mass


def _edge_mass(nodes, edges):
    """Consistent 1D mass matrices of boundary edges, (k, 2, 2)."""
    length = np.linalg.norm(nodes[edges[:, 1]] - nodes[edges[:, 0]], axis=1)
    return length[:, None, None] / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])


@dataclass
class BoundaryConditions:
    """Boundary and initial data.

    With ``kind == "dirichlet"`` the exterior and interior sides are held at
    their ambient values; with ``kind == "robin"`` heat and moisture enter
    through transfer coefficients ``h_theta`` [W m^-2 K^-1] and ``h_phi``
    [kg m^-2 s^-1].
    """

    theta_ext: float = 5.0
    phi_ext: float = 0.5
    theta_int: float = 24.0
    phi_int: float = 0.8
    theta_in: float = 14.0
    phi_in: float = 0.5
    kind: str = "dirichlet"
    h_theta: float = 8.0
    h_phi: float = 1e-7

    def validate(self):
        for name in ("phi_ext", "phi_int", "phi_in"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        for name in ("theta_ext", "theta_int", "theta_in"):
            if getattr(self, name) <= -kc.KELVIN:
                raise ValueError(f"{name} must exceed absolute zero")
        if self.kind not in ("dirichlet", "robin"):
            raise ValueError("kind must be 'dirichlet' or 'robin'")
        if self.kind == "robin" and (self.h_theta <= 0 or self.h_phi <= 0):
            raise ValueError("transfer coefficients must be positive")


class Discretization:
    """Mesh, loading and coefficient model bound together for fast assembly."""

    def __init__(self, mesh: Mesh, bc: BoundaryConditions | None = None, model=None,
                 lumped_mass: bool = True):
        self.mesh = mesh
        self.bc = bc or BoundaryConditions()
        self.bc.validate()
        self.model = model or KunzelTransport()
        self.n_nodes = N = mesh.n_nodes
        self.n_dofs = 2 * N
        self.tri = mesh.triangles
        self.stiff, self.mass = element_matrices(mesh, lumped=lumped_mass)
        E = mesh.n_elements

        # node-level scatter-add of element vectors: (E*3) -> N
        rows = self.tri.ravel()
        self._vec_scatter = sp.csr_matrix(
            (np.ones(E * 3), (rows, np.arange(E * 3))), shape=(N, E * 3))
        # dof-level scatter of element blocks (E, 2, 2, 3, 3) -> (2N)^2
        ldofs = np.concatenate([self.tri, self.tri + N], axis=1)  # (E, 6)
        gi = np.broadcast_to(ldofs[:, :, None], (E, 6, 6))
        gj = np.broadcast_to(ldofs[:, None, :], (E, 6, 6))
        # local (a, i) x (b, j) ordering matches the (E, 2, 3, 2, 3) layout
        flat = (gi * self.n_dofs + gj).ravel()
        self._mat_scatter = sp.csr_matrix(
            (np.ones(flat.size), (flat, np.arange(flat.size))),
            shape=(self.n_dofs**2, flat.size))

        self._setup_boundary()

    def _setup_boundary(self):
        N = self.n_nodes
        ld = self.bc
        self.initial_state = np.concatenate([np.full(N, ld.theta_in), np.full(N, ld.phi_in)])
        self.robin_matrix = np.zeros((self.n_dofs, self.n_dofs))
        self.robin_load = np.zeros(self.n_dofs)
        self.robin = ld.kind == "robin"
        if ld.kind == "dirichlet":
            ext = self.mesh.nodes_tagged(EXTERIOR)
            inn = self.mesh.nodes_tagged(INTERIOR_SIDE)
            dofs = np.concatenate([ext, inn, ext + N, inn + N])
            vals = np.concatenate([
                np.full(len(ext), ld.theta_ext), np.full(len(inn), ld.theta_int),
                np.full(len(ext), ld.phi_ext), np.full(len(inn), ld.phi_int)])
            order = np.argsort(dofs)
            self.dirichlet_dofs = dofs[order]
            self.dirichlet_values = vals[order]
            self.initial_state[self.dirichlet_dofs] = self.dirichlet_values
        else:
            self.dirichlet_dofs = np.zeros(0, dtype=np.int64)
            self.dirichlet_values = np.zeros(0)
            for tag, th, ph in ((EXTERIOR, ld.theta_ext, ld.phi_ext),
                                (INTERIOR_SIDE, ld.theta_int, ld.phi_int)):
                edges = self.mesh.edges.get(tag)
                if edges is None or len(edges) == 0:
                    raise ValueError(f"mesh has no {tag} edges for Robin conditions")
                em = _edge_mass(self.mesh.nodes, edges)
                for off, h, amb in ((0, ld.h_theta, th), (N, ld.h_phi, ph)):
                    for a in range(2):
                        for c in range(2):
                            np.add.at(self.robin_matrix, (edges[:, a] + off, edges[:, c] + off),
                                      h * em[:, a, c])
                        np.add.at(self.robin_load, edges[:, a] + off, h * amb * em[:, a].sum(axis=1))
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.dirichlet_dofs] = False
        self.free_dofs = np.flatnonzero(mask)
        self._free_theta = self.free_dofs < N

    # ------------------------------------------------------------------
    def _centroid_state(self, u):
        N = self.n_nodes
        th_e = u[:, :N][:, self.tri]
        ph_e = u[:, N:][:, self.tri]
        return th_e, ph_e, th_e.mean(axis=-1), ph_e.mean(axis=-1)

    def _scatter_vec(self, elem):
        B = elem.shape[0]
        return np.asarray((self._vec_scatter @ elem.reshape(B, -1).T).T)

    def _scatter_mat(self, blocks):
        B = blocks.shape[0]
        out = self._mat_scatter @ blocks.reshape(B, -1).T
        return np.asarray(out.T).reshape(B, self.n_dofs, self.n_dofs)

    def coefficients(self, params, u) -> ElementCoefficients:
        u = np.atleast_2d(u)
        _, _, th_c, ph_c = self._centroid_state(u)
        return self.model.evaluate(params, th_c, ph_c, derivatives=False)

    def assemble(self, params, u):
        """Conductivity K, capacity C and load F at state ``u``.

        F holds the Robin loads and, on free rows, the Dirichlet elimination
        ``-K[free, D] u_D``; it is zero on Dirichlet rows.  Shapes gain a
        leading batch axis when ``u`` is 2D.
        """
        single = np.ndim(u) == 1
        u = np.atleast_2d(np.asarray(u, float))
        co = self.coefficients(params, u)
        S, M = self.stiff, self.mass
        B, E = co.ktt.shape
        kb = np.zeros((B, E, 2, 3, 2, 3))
        cb = np.zeros((B, E, 2, 3, 2, 3))
        kb[:, :, 0, :, 0, :] = co.ktt[..., None, None] * S
        kb[:, :, 0, :, 1, :] = co.ktp[..., None, None] * S
        kb[:, :, 1, :, 0, :] = co.kpt[..., None, None] * S
        kb[:, :, 1, :, 1, :] = co.kpp[..., None, None] * S
        cb[:, :, 0, :, 0, :] = co.ct[..., None, None] * M
        cb[:, :, 1, :, 1, :] = co.cp[..., None, None] * M
        K = self._scatter_mat(kb) + self.robin_matrix
        C = self._scatter_mat(cb)
        F = np.broadcast_to(self.robin_load, (B, self.n_dofs)).copy()
        D = self.dirichlet_dofs
        if len(D):
            F -= np.einsum("bij,j->bi", K[:, :, D], self.dirichlet_values)
            F[:, D] = 0.0
        if single:
            return K[0], C[0], F[0]
        return K, C, F

    def residual(self, params, u, u_tilde, gdt, jacobian: str | None = "full"):
        """Residual of ``(gdt K + C) u = gdt F + C u_tilde`` on free dofs.

        Returns ``(r, f, J, clamped)`` with ``r``/``f`` of shape (B, n_free)
        and ``J`` of shape (B, n_free, n_free) or None.  ``f`` is the right
        hand side, used only as a scale for convergence checks.

        ``jacobian`` selects the tangent: ``"full"`` differentiates every
        coefficient, ``"capacity"`` only the moisture capacity (conductivities
        frozen), ``"picard"`` freezes all coefficients, None skips it.  A
        boolean array of shape (B,) picks ``"full"`` where True and
        ``"picard"`` elsewhere.
        """
        N = self.n_nodes
        th_e, ph_e, th_c, ph_c = self._centroid_state(u)
        needs_derivatives = jacobian is not None and not (isinstance(jacobian, str) and jacobian == "picard")
        co = self.model.evaluate(params, th_c, ph_c, derivatives=needs_derivatives)
        thd_e = th_e - u_tilde[:, :N][:, self.tri]
        phd_e = ph_e - u_tilde[:, N:][:, self.tri]
        S, M = self.stiff, self.mass
        Sth = np.einsum("eij,bej->bei", S, th_e)
        Sph = np.einsum("eij,bej->bei", S, ph_e)
        Mth = np.einsum("eij,bej->bei", M, thd_e)
        Mph = np.einsum("eij,bej->bei", M, phd_e)

        r_t = gdt * (co.ktt[..., None] * Sth + co.ktp[..., None] * Sph) + co.ct[..., None] * Mth
        r_p = gdt * (co.kpt[..., None] * Sth + co.kpp[..., None] * Sph) + co.cp[..., None] * Mph
        r = np.concatenate([self._scatter_vec(r_t), self._scatter_vec(r_p)], axis=1)

        # right hand side scale: C u_tilde - gdt K[:, D] u_D + gdt F_robin
        tt_e = u_tilde[:, :N][:, self.tri]
        tp_e = u_tilde[:, N:][:, self.tri]
        f_t = co.ct[..., None] * np.einsum("eij,bej->bei", M, tt_e)
        f_p = co.cp[..., None] * np.einsum("eij,bej->bei", M, tp_e)
        if len(self.dirichlet_dofs):
            ud = np.zeros_like(u)
            ud[:, self.dirichlet_dofs] = u[:, self.dirichlet_dofs]
            dth_e = ud[:, :N][:, self.tri]
            dph_e = ud[:, N:][:, self.tri]
            Sdt = np.einsum("eij,bej->bei", S, dth_e)
            Sdp = np.einsum("eij,bej->bei", S, dph_e)
            f_t = f_t - gdt * (co.ktt[..., None] * Sdt + co.ktp[..., None] * Sdp)
            f_p = f_p - gdt * (co.kpt[..., None] * Sdt + co.kpp[..., None] * Sdp)
        f = np.concatenate([self._scatter_vec(f_t), self._scatter_vec(f_p)], axis=1)
        if self.robin:
            r = r + gdt * (u @ self.robin_matrix.T - self.robin_load)
            f = f + gdt * self.robin_load

        free = self.free_dofs
        r = r[:, free]
        f = f[:, free]
        if jacobian is None:
            return r, f, None, co.clamped

        B, E = co.ktt.shape
        blocks = np.zeros((B, E, 2, 3, 2, 3))
        g = gdt
        blocks[:, :, 0, :, 0, :] = g * co.ktt[..., None, None] * S + co.ct[..., None, None] * M
        blocks[:, :, 0, :, 1, :] = g * co.ktp[..., None, None] * S
        blocks[:, :, 1, :, 0, :] = g * co.kpt[..., None, None] * S
        blocks[:, :, 1, :, 1, :] = g * co.kpp[..., None, None] * S + co.cp[..., None, None] * M
        third = 1.0 / 3.0
        if isinstance(jacobian, str) and jacobian == "capacity":
            blocks[:, :, 1, :, 1, :] += third * (Mph * co.cp_p[..., None])[..., None]
        elif not isinstance(jacobian, str) or jacobian == "full":
            w = 1.0 if isinstance(jacobian, str) else np.asarray(jacobian, float)[:, None, None, None]
            # d(coefficient)/d(nodal value) = d(coefficient)/d(centroid value) / 3
            third = w * third
            ct_ = g * (Sth * co.ktt_t[..., None] + Sph * co.ktp_t[..., None])
            cp_ = g * (Sth * co.ktt_p[..., None] + Sph * co.ktp_p[..., None])
            pt_ = g * (Sth * co.kpt_t[..., None] + Sph * co.kpp_t[..., None])
            pp_ = g * (Sth * co.kpt_p[..., None] + Sph * co.kpp_p[..., None])
            pp_ = pp_ + Mph * co.cp_p[..., None]
            blocks[:, :, 0, :, 0, :] += third * ct_[..., None]
            blocks[:, :, 0, :, 1, :] += third * cp_[..., None]
            blocks[:, :, 1, :, 0, :] += third * pt_[..., None]
            blocks[:, :, 1, :, 1, :] += third * pp_[..., None]
        J = self._scatter_mat(blocks)
        if self.robin:
            J = J + gdt * self.robin_matrix
        J = J[:, free][:, :, free]
        return r, f, J, co.clamped

    def field_norms(self, v):
        """Euclidean norms of the temperature and humidity parts of free-dof vectors."""
        t = self._free_theta
        return np.linalg.norm(v[..., t], axis=-1), np.linalg.norm(v[..., ~t], axis=-1)
