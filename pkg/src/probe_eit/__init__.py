"""Open-domain EIT around a cylindrical probe: forward model, linear, TV and
neural reconstructions, synthetic datasets and image-quality metrics."""

from .errors import EITError
from .forward import ConductivityField, DrivePattern, MeasurementFrame, compute_jacobian, solve_forward
from .linear import ConductivityImage, RegularizationPrior, build_reconstruction_matrix, reconstruct_gn
from .mesh import AnnularMesh, ProbeSpec, build_mesh, reduce_mesh
from .metrics import evaluate
from .network import NetworkParams, PsoConfig, postprocess, invert_direct, train_pso
from .pdipm import TvConfig, reconstruct_pdipm
from .scenario import EllipseTarget, NoiseModel, PlacementConfig

__version__ = "0.1.0"
