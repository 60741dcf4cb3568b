"""Population atlases of square-root ODF fields via diffeomorphic EM."""
from .atlas import AtlasConfig, AtlasState, EMError, run_em
from .diffeo import DiffeoFlow, KernelSpec, Lattice3, VectorField3, apply_kernel, diffeo_metric, geodesic_shoot
from .manifold import SqrtOdf, TangentVec, exp_map, geodesic_dist, log_map, weighted_karcher_mean
from .registration import RegProblem, RegResult, register
from .sphere import SphereGrid, make_sphere_grid
from .synth import CohortSpec, generate_cohort, make_phantom
from .transport import OdfField, act, pullback

__version__ = "0.1.0"

__all__ = [
    "AtlasConfig", "AtlasState", "EMError", "run_em",
    "DiffeoFlow", "KernelSpec", "Lattice3", "VectorField3", "apply_kernel", "diffeo_metric", "geodesic_shoot",
    "SqrtOdf", "TangentVec", "exp_map", "geodesic_dist", "log_map", "weighted_karcher_mean",
    "RegProblem", "RegResult", "register",
    "SphereGrid", "make_sphere_grid",
    "CohortSpec", "generate_cohort", "make_phantom",
    "OdfField", "act", "pullback",
]
