"""Numerical Tanaka-Webster geometry on charted pseudo-Hermitian manifolds.

Everything is evaluated in double precision through JAX; importing the
package switches x64 on globally.
"""

import jax

jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"


def enable_compile_cache(path=None):
    """Persist compiled integrator kernels on disk (default ~/.cache/phgeo/jax).

    The geodesic and Jacobi kernels take seconds to compile; with the cache
    a second process reuses them.  Returns the directory in use.
    """
    import os

    path = path or os.environ.get("PHGEO_CACHE_DIR") or os.path.join(os.path.expanduser("~"), ".cache", "phgeo", "jax")
    os.makedirs(path, exist_ok=True)
    jax.config.update("jax_compilation_cache_dir", path)
    jax.config.update("jax_persistent_cache_min_compile_time_secs", 0.5)
    return path


from .errors import *  # noqa: E402,F401,F403
from .chart import (  # noqa: E402
    PseudoHermitianChart,
    DerivedStructure,
    StructureValidationReport,
    compute_reeb,
    webster_metric,
    validate_structure,
    chart_from_json,
)
from .connection import (  # noqa: E402
    TWConnection,
    CurvatureAtPoint,
    levi_civita_christoffels,
    tw_connection_coeffs,
    torsion_tensor,
    curvature_tensor,
    horizontal_sectional_curvature,
    ricci,
)
from .connection import connection_for  # noqa: E402
from .builtins import REGISTRY, get_manifold, heisenberg, sasakian_sphere3  # noqa: E402
from .geodesics import (  # noqa: E402
    GeodesicPath,
    integrate_geodesic,
    integrate_geodesics,
    parallel_transport,
    exp_map,
    gauss_lemma_defect,
    shoot_boundary_value,
    delta_upper_bound,
    riemannian_distance,
)
from .jacobi import (  # noqa: E402
    JacobiSolution,
    integrate_jacobi,
    dexp,
    decompose,
    conjugate_search,
    taylor_expansion_check,
)
from .variational import index_form, index_comparison, bonnet_myers_experiment, cartan_hadamard_sweep  # noqa: E402
from .report import ExperimentReport, dump_reports, load_reports  # noqa: E402
from .suite import run_paper_suite  # noqa: E402

__all__ = [
    "PseudoHermitianChart",
    "DerivedStructure",
    "StructureValidationReport",
    "compute_reeb",
    "webster_metric",
    "validate_structure",
    "chart_from_json",
    "TWConnection",
    "CurvatureAtPoint",
    "levi_civita_christoffels",
    "tw_connection_coeffs",
    "torsion_tensor",
    "curvature_tensor",
    "horizontal_sectional_curvature",
    "ricci",
    "connection_for",
    "GeodesicPath",
    "integrate_geodesic",
    "integrate_geodesics",
    "parallel_transport",
    "exp_map",
    "gauss_lemma_defect",
    "shoot_boundary_value",
    "delta_upper_bound",
    "riemannian_distance",
    "JacobiSolution",
    "integrate_jacobi",
    "dexp",
    "decompose",
    "conjugate_search",
    "taylor_expansion_check",
    "index_form",
    "index_comparison",
    "bonnet_myers_experiment",
    "cartan_hadamard_sweep",
    "ExperimentReport",
    "dump_reports",
    "load_reports",
    "run_paper_suite",
    "REGISTRY",
    "get_manifold",
    "heisenberg",
    "sasakian_sphere3",
]
