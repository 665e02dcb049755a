from collections import Counter

import numpy as np
import pytest
from scipy.linalg import expm

from kunzel_uq.coefficients import MaterialParams
from kunzel_uq.fem.assembly import (
    BoundaryConditions,
    ConstantTransport,
    Discretization,
    KunzelTransport,
    element_matrices,
)
from kunzel_uq.fem.mesh import EXTERIOR, INSULATED, INTERIOR_SIDE, Mesh, MeshError, build_mesh
from kunzel_uq.fem.timestepping import (
    NewtonSettings,
    StepFailure,
    TimeIntegration,
    newton_solve,
    run_simulation,
)

MEANS = MaterialParams.prior_means()
LX, LY = 0.6, 0.15


@pytest.fixture(scope="module")
def mesh():
    return build_mesh(16, 5, LX, LY)


def element_params(mesh, p=MEANS):
    return p.map(lambda v: np.full(mesh.n_elements, float(v)))


class TestMesh:
    def test_default_counts(self, mesh):
        assert mesh.n_nodes == 80 and mesh.n_elements == 120

    def test_smallest_grid(self):
        m = build_mesh(2, 2, 1.0, 1.0)
        assert m.n_nodes == 4 and m.n_elements == 2

    def test_edges_shared_by_at_most_two(self, mesh):
        count = Counter()
        for t in mesh.triangles:
            for a, b in ((0, 1), (1, 2), (2, 0)):
                count[tuple(sorted((t[a], t[b])))] += 1
        on_boundary = {e for e, c in count.items() if c == 1}
        assert set(count.values()) == {1, 2}
        # boundary edges: 2 (nx - 1) + 2 (ny - 1)
        assert len(on_boundary) == 2 * 15 + 2 * 4

    def test_tags(self, mesh):
        x = mesh.nodes[:, 0]
        assert np.all(mesh.tags[x == 0] == EXTERIOR)
        assert np.all(mesh.tags[np.isclose(x, LX)] == INTERIOR_SIDE)
        assert len(mesh.nodes_tagged(INSULATED)) == 2 * 14

    def test_areas_sum_to_domain(self, mesh):
        assert mesh.signed_areas().sum() == pytest.approx(LX * LY, rel=1e-12)

    def test_invalid(self):
        with pytest.raises(MeshError):
            build_mesh(1, 5, 1.0, 1.0)
        with pytest.raises(MeshError):
            Mesh(nodes=[[0, 0], [1, 0], [0, 1]], triangles=[[0, 2, 1]])


class TestAssembly:
    def test_reference_triangle_stiffness(self):
        m = Mesh(nodes=[[0, 0], [1, 0], [0, 1]], triangles=[[0, 1, 2]])
        stiff, mass = element_matrices(m, lumped=False)
        expected = 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]])
        np.testing.assert_allclose(stiff[0], expected, atol=1e-15)
        np.testing.assert_allclose(mass[0], np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24, atol=1e-15)

    def test_constant_unit_coefficients_give_p1_stiffness(self):
        m = Mesh(nodes=[[0, 0], [1, 0], [0, 1]], triangles=[[0, 1, 2]])
        disc = Discretization(m, model=ConstantTransport())
        K, C, _ = disc.assemble(MEANS, disc.initial_state)
        expected = 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]])
        np.testing.assert_allclose(K[:3, :3], expected, atol=1e-15)
        np.testing.assert_allclose(K[3:, 3:], expected, atol=1e-15)
        np.testing.assert_allclose(C[:3, :3], np.eye(3) / 6, atol=1e-15)

    def test_stiffness_rows_sum_to_zero(self, mesh):
        disc = Discretization(mesh, model=ConstantTransport())
        K, _, _ = disc.assemble(MEANS, disc.initial_state)
        np.testing.assert_allclose(K.sum(axis=1), 0.0, atol=1e-12)

    def test_decoupled_without_vapour_and_liquid_transport(self, mesh):
        disc = Discretization(mesh, model=KunzelTransport(vapour_diffusion=False, liquid_conduction=False))
        u = disc.initial_state + 0.01 * np.arange(disc.n_dofs) / disc.n_dofs
        K, C, _ = disc.assemble(element_params(mesh), u)
        N = disc.n_nodes
        assert np.all(K[:N, N:] == 0) and np.all(K[N:, :N] == 0)
        assert np.all(C[:N, N:] == 0) and np.all(C[N:, :N] == 0)

    def test_coupled_blocks_present_by_default(self, mesh):
        disc = Discretization(mesh)
        K, _, _ = disc.assemble(element_params(mesh), disc.initial_state)
        N = disc.n_nodes
        assert np.abs(K[:N, N:]).max() > 0 and np.abs(K[N:, :N]).max() > 0

    def test_point_reflection_symmetry(self, mesh):
        # rotating the rising-diagonal grid by 180 degrees maps it onto itself
        disc = Discretization(mesh)
        N = disc.n_nodes
        u = np.concatenate([np.full(N, 18.0), np.full(N, 0.6)])
        K, C, _ = disc.assemble(element_params(mesh), u)
        rot = np.concatenate([np.arange(N)[::-1], N + np.arange(N)[::-1]])
        np.testing.assert_allclose(K[np.ix_(rot, rot)], K, rtol=1e-13, atol=1e-13 * np.abs(K).max())
        np.testing.assert_allclose(C[np.ix_(rot, rot)], C, rtol=1e-13)

    def test_load_superposes(self, mesh):
        loads = [
            dict(theta_ext=3.0, theta_int=7.0, phi_ext=0.2, phi_int=0.1),
            dict(theta_ext=-1.0, theta_int=11.0, phi_ext=0.3, phi_int=0.5),
        ]
        total = {k: loads[0][k] + loads[1][k] for k in loads[0]}
        Fs = []
        for ld in loads + [total]:
            disc = Discretization(mesh, BoundaryConditions(**ld),
                                  model=ConstantTransport(ktp=0.3, kpt=0.2))
            Fs.append(disc.assemble(MEANS, disc.initial_state)[2])
        np.testing.assert_allclose(Fs[0] + Fs[1], Fs[2], atol=1e-12)

    def test_batched_assembly_matches_single(self, mesh):
        disc = Discretization(mesh)
        p = element_params(mesh)
        u1 = disc.initial_state
        u2 = u1 + np.linspace(0, 0.1, disc.n_dofs)
        batch = p.map(lambda v: np.stack([v, 1.1 * v]))
        K, C, F = disc.assemble(batch, np.stack([u1, u2]))
        K2, C2, F2 = disc.assemble(p.map(lambda v: 1.1 * v), u2)
        np.testing.assert_allclose(K[1], K2, rtol=1e-14)
        np.testing.assert_allclose(F[1], F2, rtol=1e-12, atol=1e-12)

    def test_jacobian_matches_finite_differences(self):
        m = build_mesh(4, 3, LX, LY)
        disc = Discretization(m)
        p = element_params(m)
        rng = np.random.default_rng(0)
        u = disc.initial_state.copy()
        N = disc.n_nodes
        u[:N] += rng.uniform(-2, 2, N)
        u[N:] += rng.uniform(-0.1, 0.2, N)
        u[disc.dirichlet_dofs] = disc.dirichlet_values
        ut = disc.initial_state[None]
        r0, _, J, _ = disc.residual(p, u[None], ut, 4000.0, jacobian="full")
        free = disc.free_dofs
        fd = np.empty_like(J[0])
        for k, dof in enumerate(free):
            h = 1e-6 * max(1.0, abs(u[dof]))
            up, um = u.copy(), u.copy()
            up[dof] += h
            um[dof] -= h
            rp = disc.residual(p, up[None], ut, 4000.0, jacobian=None)[0][0]
            rm = disc.residual(p, um[None], ut, 4000.0, jacobian=None)[0][0]
            fd[:, k] = (rp - rm) / (2 * h)
        scale = np.abs(J[0]).max(axis=1, keepdims=True)
        assert np.max(np.abs(J[0] - fd) / scale) < 1e-5


class TestTimeStepping:
    def test_equilibrium_is_fixed_point(self, mesh):
        bc = BoundaryConditions(theta_ext=14.0, theta_int=14.0, theta_in=14.0,
                                phi_ext=0.5, phi_int=0.5, phi_in=0.5)
        disc = Discretization(mesh, bc)
        sol = run_simulation(disc, element_params(mesh), TimeIntegration(steps=31))
        assert sol.states.shape == (31, 160)
        assert np.abs(sol.states - sol.states[0]).max() <= 1e-10

    def test_steady_conduction_is_linear(self, mesh):
        disc = Discretization(mesh, model=ConstantTransport(ktt=1.0, ct=1.0))
        ti = TimeIntegration(dt=0.05, steps=200)
        sol = run_simulation(disc, MEANS, ti)
        x = mesh.nodes[:, 0]
        exact = 5.0 + (24.0 - 5.0) * x / LX
        dev = np.abs(sol.theta[-1] - exact) / np.abs(exact)
        assert dev.max() <= 5e-3

    @pytest.mark.parametrize("gamma,expected", [(1.0, 1.0), (0.5, 2.0)])
    def test_convergence_order(self, gamma, expected):
        order = observed_orders(gamma)
        assert np.all(np.abs(order - expected) < 0.15), order

    def test_discrete_maximum_principle(self, mesh):
        disc = Discretization(mesh, model=ConstantTransport(ktt=2.0, ct=3.0))
        ti = TimeIntegration(gamma=1.0, dt=0.01, steps=60)
        theta = run_simulation(disc, MEANS, ti).theta
        assert theta.min() >= 5.0 - 1e-12 and theta.max() <= 24.0 + 1e-12

    def test_newton_converges_quadratically(self, mesh):
        disc = Discretization(mesh)
        p = element_params(mesh)
        ti = TimeIntegration()
        u0 = disc.initial_state[None]
        hist = []
        settings = NewtonSettings(tol=1e-13, max_iter=40)
        newton_solve(disc, p, u0.copy(), u0, ti.dt, settings, hist)
        res = np.array([h[0] for h in hist])
        tail = res[res < 3e-2]
        tail = tail[tail > 1e-12]
        assert len(tail) >= 3
        ratios = tail[1:] / tail[:-1] ** 2
        assert np.all(ratios < 50), ratios

    def test_nonconvergence_raises_with_step(self, mesh):
        disc = Discretization(mesh)
        with pytest.raises(StepFailure) as err:
            run_simulation(disc, element_params(mesh), TimeIntegration(steps=3),
                           NewtonSettings(max_iter=1))
        assert err.value.step == 1 and err.value.residuals

    def test_failed_member_filled_with_nan(self, mesh):
        disc = Discretization(mesh)
        p = element_params(mesh).map(lambda v: np.stack([v, v]))
        sol = run_simulation(disc, p, TimeIntegration(steps=3), NewtonSettings(max_iter=1),
                             on_failure="nan")
        assert sol.diagnostics["failed"] == [0, 1]
        assert np.all(np.isnan(sol.states[:, 1:]))

    def test_batch_matches_single_runs(self):
        m = build_mesh(6, 3, LX, LY)
        disc = Discretization(m)
        p = element_params(m)
        scaled = MaterialParams(**{**p.as_dict(), "lambda0": 1.3 * p.lambda0, "a": 0.8 * p.a})
        ti = TimeIntegration(steps=6)
        batch = p.map(lambda v: v).__class__(
            **{k: np.stack([p.as_dict()[k], scaled.as_dict()[k]]) for k in p.as_dict()})
        both = run_simulation(disc, batch, ti).states
        for k, q in enumerate((p, scaled)):
            np.testing.assert_allclose(both[k], run_simulation(disc, q, ti).states, rtol=1e-9, atol=1e-9)

    def test_deterministic(self, mesh):
        disc = Discretization(mesh)
        ti = TimeIntegration(steps=4)
        a = run_simulation(disc, element_params(mesh), ti).states
        b = run_simulation(disc, element_params(mesh), ti).states
        assert np.array_equal(a, b)


def observed_orders(gamma):
    """Orders from three dt halvings, measured against the exact semi-discrete flow."""
    m = build_mesh(9, 3, 1.0, 0.25)
    bc = BoundaryConditions(theta_ext=0.0, theta_int=0.0, phi_ext=0.5, phi_int=0.5)
    disc = Discretization(m, bc, model=ConstantTransport())
    x = m.nodes[:, 0]
    u0 = np.concatenate([np.sin(np.pi * x), 0.5 + 0.1 * np.sin(np.pi * x)])
    K, C, _ = disc.assemble(MEANS, u0)
    free = disc.free_dofs
    A = -np.linalg.solve(C[np.ix_(free, free)], K[np.ix_(free, free)])
    horizon = 0.05
    # the data relax towards theta = 0, phi = 0.5 without forcing
    steady = np.concatenate([np.zeros_like(x), np.full_like(x, 0.5)])[free]
    exact = steady + expm(horizon * A) @ (u0[free] - steady)
    errs = []
    for n in (4, 8, 16, 32):
        ti = TimeIntegration(gamma=gamma, dt=horizon / n, steps=n + 1, startup_steps=0)
        sol = run_simulation(disc, MEANS, ti, initial=u0)
        errs.append(np.linalg.norm(sol.states[-1, free] - exact))
    errs = np.array(errs)
    return np.log2(errs[:-1] / errs[1:])


class TestDefaultConfiguration:
    @pytest.fixture(scope="class")
    @staticmethod
    def runs(mesh):
        disc = Discretization(mesh)
        p = element_params(mesh)
        coarse = run_simulation(disc, p, TimeIntegration())
        fine = run_simulation(disc, p, TimeIntegration(dt=400 * 3600 / 300, steps=301))
        return disc, coarse, fine

    def test_shapes_and_initial_state(self, runs):
        disc, coarse, _ = runs
        assert coarse.states.shape == (151, 160)
        assert coarse.times[-1] == pytest.approx(400 * 3600)
        np.testing.assert_array_equal(coarse.states[0], disc.initial_state)
        assert np.all(np.isfinite(coarse.states))

    def test_halving_dt_changes_final_state_little(self, runs):
        _, coarse, fine = runs
        rel = np.abs(coarse.states[-1] - fine.states[-1]) / np.abs(fine.states[-1])
        assert rel.max() < 1e-3

    def test_interior_probe_approaches_interior_load(self, runs, mesh):
        _, coarse, fine = runs
        probe = mesh.nearest_node((LX * 14 / 15, LY / 2))
        th = coarse.theta[:, probe]
        assert np.all(np.diff(th) >= -1e-9)
        assert abs(24.0 - th[-1]) < 0.2 * abs(24.0 - th[0])
        # the coarse run tracks the refined one once the start-up transient has passed
        np.testing.assert_allclose(th[10:], fine.theta[20::2, probe], rtol=2e-3)

    def test_fields_stay_between_loads(self, runs):
        _, coarse, _ = runs
        assert coarse.theta.min() >= 5.0 - 1e-6 and coarse.theta.max() <= 24.0 + 1e-6
        assert coarse.phi.min() > 0.0 and coarse.phi.max() < 1.0
