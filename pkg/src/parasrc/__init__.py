"""parasrc: reconstruct the spatial factor of a separable parabolic source
from partial interior observations with space-time H2-conforming finite
elements."""

from .mesh import (
    MeshAlignmentError,
    SpaceMesh1D,
    TimeGrid,
    TriMesh,
    build_mesh_1d,
    build_time_grid,
    build_trimesh_congruent,
    classify_omega_cells,
)
from .basis import (
    ElementBasis,
    QuadratureRule,
    build_argyris_basis,
    eval_basis,
    gauss_rule_1d,
    triangle_rule,
)
from .spaces import (
    DofSpace,
    FeFunction,
    TensorSpace,
    apply_dirichlet_constraints,
    argyris_space,
    hermite_space,
    p1_space,
    project_l2,
    tensor_eval,
)
from .assembly import (
    EllipticOperator,
    SourceModulation,
    SystemBlocks,
    apply_L,
    assemble_holder_system,
    assemble_lipschitz_system,
    residual_norms,
)
from .linsolve import (
    IllConditionedError,
    SingularSystemError,
    SolveReport,
    condition_estimate,
    solve_spd,
)
from .inverse import (
    ExperimentReport,
    ObservationData,
    ProblemConfig,
    convergence_study,
    delta_study,
    inject_noise,
    run_reconstruction,
    synthesize_data_analytic,
    synthesize_data_forward,
)

__version__ = "0.1.0"
