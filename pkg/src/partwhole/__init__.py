"""Generative 3D part assembly with a two-level part-whole hierarchy."""
from .data import AssemblyShape, ShapeRecord, load_shape, preprocess, save_shape
from .geometry import Pose6DoF, chamfer_distance
from .hierarchy import SuperPartAssignment, build_super_parts
from .model import AssemblyModel, AssemblyPrediction, ModelConfig
from .synth import SynthSpec, generate_synthetic
from .training import LossWeights, TrainConfig, mon_loss, total_loss, train

__version__ = "0.1.0"
