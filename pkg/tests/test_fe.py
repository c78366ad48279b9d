import numpy as np
import pytest
import scipy.sparse as sp

from microfe.config import SolverSettings
from microfe.fe import (
    ConstrainedSystem,
    CouplingError,
    Solver,
    SolverError,
    apply_coupling,
    assemble,
    body_force_vector,
    boundary_tractions,
    constraint_transform,
    element_stiffness,
    solve_load,
)
from microfe.material import MacroLoad, MaterialTable, PhaseMaterial
from microfe.mesh import MeshError, QuadElement, build_uniform_mesh, coarsen_pipeline
from microfe.phase_grid import PhaseGrid
from microfe.synthetic import cross, laminate

SIGNS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def _unit_square_stiffness(d):
    # Tensor Simpson rule on [0, 1]^2 with shape derivatives written out per corner.
    nodes = np.array([0.0, 0.5, 1.0])
    weights = np.array([1.0, 4.0, 1.0]) / 6.0
    k = np.zeros((8, 8))
    for x, wx in zip(nodes, weights):
        for y, wy in zip(nodes, weights):
            b = np.zeros((3, 8))
            for a, (sx, sy) in enumerate(SIGNS):
                fx = x if sx > 0 else 1.0 - x
                fy = y if sy > 0 else 1.0 - y
                dx, dy = sx * fy, sy * fx
                b[0, 2 * a] = dx
                b[1, 2 * a + 1] = dy
                b[2, 2 * a] = dy
                b[2, 2 * a + 1] = dx
            k += wx * wy * b.T @ d @ b
    return k


def _element(side=1.0, phase=0):
    return QuadElement(id=0, corner_nodes=(0, 1, 2, 3), level=0, side_length=side, phase=phase, origin_pixels=(0, 0, 1))


def _coarse_offset_mesh(grid):
    mesh = coarsen_pipeline(grid, algorithm="hard", steps=3)[-1]
    assert mesh.n_hanging > 0
    return mesh


@pytest.mark.parametrize("young, poisson", [(1.0, 0.0), (2.0, 0.3)])
def test_element_stiffness_matches_exact_integration(young, poisson):
    material = MaterialTable({0: PhaseMaterial(young, poisson)})

    ke = element_stiffness(_element(), material)

    assert np.allclose(ke, _unit_square_stiffness(material.stiffness(0)), atol=1e-12)
    assert np.allclose(ke, ke.T)


def test_element_stiffness_closed_form_entries():
    ke = element_stiffness(_element(), MaterialTable({0: PhaseMaterial(1.0, 0.0)}))

    assert ke[0, 0] == pytest.approx(0.5)
    assert ke[0, 1] == pytest.approx(0.125)


def test_element_stiffness_rigid_modes_and_size_invariance():
    material = MaterialTable({0: PhaseMaterial(3.0, 0.2)})
    ke = element_stiffness(_element(), material)

    eigenvalues = np.linalg.eigvalsh(ke)
    assert int(np.sum(np.abs(eigenvalues) < 1e-10 * eigenvalues.max())) == 3
    assert np.allclose(ke @ np.tile([1.0, 0.0], 4), 0.0, atol=1e-12)
    assert np.allclose(element_stiffness(_element(side=0.25), material), ke)
    with pytest.raises(MeshError):
        element_stiffness(_element(side=0.0), material)


def test_single_element_assembly_equals_element_matrix():
    material = MaterialTable({0: PhaseMaterial(1.0, 0.25)})
    mesh = build_uniform_mesh(PhaseGrid(np.zeros((1, 1), dtype=int)))

    system = assemble(mesh, material)

    dofs = np.stack([2 * mesh.corners[0], 2 * mesh.corners[0] + 1], axis=1).ravel()
    local = system.stiffness.toarray()[np.ix_(dofs, dofs)]
    assert np.allclose(local, element_stiffness(_element(), material))


def test_transform_interpolates_linear_fields(offset_inclusion_grid):
    mesh = _coarse_offset_mesh(offset_inclusion_grid)
    transform, free_nodes = constraint_transform(mesh)
    gradient = np.array([[0.3, -1.2], [0.7, 2.0]])
    exact = np.array([0.1, -0.4]) + mesh.positions @ gradient.T

    full = transform @ exact[free_nodes].ravel()

    assert np.allclose(full.reshape(-1, 2), exact, atol=1e-12)


def test_patch_test_with_hanging_nodes(offset_inclusion_grid, uniform_material):
    mesh = _coarse_offset_mesh(offset_inclusion_grid)
    system = assemble(mesh, uniform_material)
    gradient = np.array([[0.3, -1.2], [0.7, 2.0]])
    exact = np.array([0.1, -0.4]) + mesh.positions @ gradient.T

    residual = (system.stiffness @ exact[system.free_nodes].ravel()).reshape(-1, 2)

    interior = ~mesh.domain_boundary_mask[system.free_nodes]
    scale = abs(system.stiffness).max() * np.abs(exact).max()
    assert np.abs(residual[interior]).max() <= 1e-10 * scale
    assert abs(system.stiffness - system.stiffness.T).max() <= 1e-12 * abs(system.stiffness).max()


def test_patch_test_solves_on_every_soft_coarsening_level(uniform_material):
    meshes = coarsen_pipeline(cross(size=32), algorithm="soft", steps=3)
    macro = np.array([1e-3, -2e-3, 5e-4])
    gradient = np.array([[macro[0], macro[2] / 2.0], [macro[2] / 2.0, macro[1]]])

    assert len(meshes) == 4
    for mesh in meshes[1:]:
        assert mesh.n_hanging > 0
        displacement, _ = solve_load(mesh, uniform_material, MacroLoad("dirichlet", macro_strain=macro))
        exact = mesh.positions @ gradient.T
        assert np.abs(displacement.values - exact).max() <= 1e-10 * np.abs(exact).max()


def test_hanging_nodes_have_no_independent_dofs(offset_inclusion_grid, uniform_material):
    mesh = _coarse_offset_mesh(offset_inclusion_grid)
    system = assemble(mesh, uniform_material)

    assert system.ndof == mesh.ndof
    with pytest.raises(CouplingError):
        system.reduced_dof(mesh.constraints[0].hanging, 0)


@pytest.mark.parametrize("coupling", ["dirichlet", "periodic"])
def test_homogeneous_medium_reproduces_macro_strain(coupling, offset_inclusion_grid, uniform_material):
    mesh = _coarse_offset_mesh(offset_inclusion_grid)
    macro = np.array([1e-3, -2e-3, 5e-4])

    _, field = solve_load(mesh, uniform_material, MacroLoad(coupling, macro_strain=macro))

    assert np.allclose(field.strain, macro, atol=1e-11)
    stress, strain = field.volume_average()
    assert np.allclose(strain, macro, atol=1e-11)
    assert np.allclose(stress, uniform_material.stiffness(0) @ macro, rtol=1e-9)


def test_periodic_edges_need_not_match(offset_inclusion_grid):
    mesh = _coarse_offset_mesh(offset_inclusion_grid)
    n = mesh.grid.width

    left = int(np.sum(mesh.lattice[:, 1] == 0))
    right = int(np.sum(mesh.lattice[:, 1] == n))

    assert left != right


@pytest.mark.parametrize(
    "orient",
    [lambda a: a, np.fliplr, np.transpose, lambda a: np.flipud(a.T)],
    ids=["fine_left", "fine_right", "fine_top", "fine_bottom"],
)
def test_periodic_coupling_with_mismatched_edge_refinement(orient, offset_inclusion_grid, uniform_material):
    grid = PhaseGrid(np.ascontiguousarray(orient(offset_inclusion_grid.labels)))
    mesh = _coarse_offset_mesh(grid)
    macro = np.array([1e-3, -2e-3, 5e-4])
    gradient = np.array([[macro[0], macro[2] / 2.0], [macro[2] / 2.0, macro[1]]])

    displacement, _ = solve_load(mesh, uniform_material, MacroLoad("periodic", macro_strain=macro))

    origin = mesh.positions[np.argmin(mesh.positions[:, 0] + mesh.positions[:, 1])]
    assert np.allclose(origin, 0.0)
    assert np.allclose(displacement.values, mesh.positions @ gradient.T, atol=1e-12)


def test_homogeneous_medium_under_traction(offset_inclusion_grid, uniform_material):
    mesh = _coarse_offset_mesh(offset_inclusion_grid)
    macro_stress = np.array([2.0, -1.0, 0.5])

    displacement, field = solve_load(mesh, uniform_material, MacroLoad("neumann", macro_stress=macro_stress))

    expected = np.linalg.solve(uniform_material.stiffness(0), macro_stress)
    assert np.allclose(field.strain, expected, atol=1e-9 * np.abs(expected).max())
    bottom_left = int(np.argmin(mesh.positions[:, 0] + mesh.positions[:, 1]))
    assert np.allclose(displacement.values[bottom_left], 0.0)


def test_zero_macro_strain_gives_zero_solution(two_block_grid, two_phase_material):
    mesh = build_uniform_mesh(two_block_grid)

    displacement, field = solve_load(mesh, two_phase_material, MacroLoad("dirichlet", macro_strain=[0.0, 0.0, 0.0]))

    assert displacement.max_abs == 0.0
    assert field.strain_energy() == 0.0


def test_hanging_node_displacements_follow_masters(offset_inclusion_grid, two_phase_material):
    mesh = _coarse_offset_mesh(offset_inclusion_grid)

    displacement, _ = solve_load(mesh, two_phase_material, MacroLoad("dirichlet", macro_strain=[0.0, 0.0, 1.0]))

    values = displacement.values
    for constraint in mesh.constraints:
        (a, b), (wa, wb) = constraint.masters, constraint.weights
        assert np.allclose(values[constraint.hanging], wa * values[a] + wb * values[b], atol=1e-12)


def _laminate_strains(material, macro):
    # Vertical layers of equal fraction: sigma_xx, sigma_xy continuous, eps_yy shared.
    d0, d1 = material.stiffness(0), material.stiffness(1)
    system = np.array(
        [
            [d0[0, 0], -d1[0, 0], 0.0, 0.0],
            [0.0, 0.0, d0[2, 2], -d1[2, 2]],
            [0.5, 0.5, 0.0, 0.0],
            [0.0, 0.0, 0.5, 0.5],
        ]
    )
    rhs = np.array([-(d0[0, 1] - d1[0, 1]) * macro[1], 0.0, macro[0], macro[2]])
    exx0, exx1, g0, g1 = np.linalg.solve(system, rhs)
    return {0: np.array([exx0, macro[1], g0]), 1: np.array([exx1, macro[1], g1])}


def test_periodic_laminate_matches_layer_solution(two_phase_material):
    mesh = build_uniform_mesh(laminate(size=8, fraction=0.5))
    macro = np.array([1.0, 0.5, 0.25])

    _, field = solve_load(mesh, two_phase_material, MacroLoad("periodic", macro_strain=macro))

    expected = _laminate_strains(two_phase_material, macro)
    for element, phase in enumerate(mesh.phases.tolist()):
        assert np.allclose(field.strain[element], expected[phase], atol=1e-9)


def test_iterative_solver_agrees_with_direct(two_block_grid, two_phase_material):
    mesh = build_uniform_mesh(two_block_grid)
    load = MacroLoad("periodic", macro_strain=[0.0, 0.0, 1.0])

    direct, _ = solve_load(mesh, two_phase_material, load)
    iterative, _ = solve_load(mesh, two_phase_material, load, SolverSettings(direct_limit=0))

    assert np.allclose(iterative.values, direct.values, atol=1e-7 * direct.max_abs)


def test_load_cases_share_one_factorization(two_block_grid, two_phase_material):
    mesh = build_uniform_mesh(two_block_grid)
    system = assemble(mesh, two_phase_material)
    cases = [apply_coupling(system, mesh, MacroLoad("dirichlet", macro_strain=unit)) for unit in np.eye(3)]

    fields = Solver().solve_cases(cases)

    assert len({case.key for case in cases}) == 1
    assert [f.load.macro_strain.tolist() for f in fields] == np.eye(3).tolist()


def test_singular_system_raises_solver_error():
    case = ConstrainedSystem(
        system=None,
        load=MacroLoad("dirichlet", macro_strain=[0.0, 0.0, 0.0]),
        matrix=sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]])),
        rhs=np.array([1.0, 0.0]),
        elimination=sp.identity(2, format="csr"),
        offset=np.zeros(2),
    )

    with pytest.raises(SolverError):
        Solver().solve(case)


def test_boundary_tractions_are_self_equilibrated(offset_inclusion_grid):
    mesh = _coarse_offset_mesh(offset_inclusion_grid)

    forces = boundary_tractions(mesh, np.array([1.0, 2.0, -0.5])).reshape(-1, 2)

    assert np.allclose(forces.sum(axis=0), 0.0, atol=1e-12)
    assert np.allclose(forces[mesh.hanging_mask], 0.0)


def test_body_force_resultant_equals_load_integral(offset_inclusion_grid):
    mesh = _coarse_offset_mesh(offset_inclusion_grid)

    def gravity(x, y):
        return np.stack([np.ones_like(x), 2.0 * np.ones_like(y)], axis=-1)

    load = MacroLoad("dirichlet", macro_strain=[0.0, 0.0, 0.0], body_force=gravity)
    forces = body_force_vector(mesh, load).reshape(-1, 2)

    assert np.allclose(forces.sum(axis=0), [1.0, 2.0])


def test_coupling_rejects_foreign_system(two_block_grid, two_phase_material):
    system = assemble(build_uniform_mesh(two_block_grid), two_phase_material)
    other = build_uniform_mesh(two_block_grid)

    with pytest.raises(CouplingError):
        apply_coupling(system, other, MacroLoad("dirichlet", macro_strain=[1.0, 0.0, 0.0]))
