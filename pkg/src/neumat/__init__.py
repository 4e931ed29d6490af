"""Neural reflectance material pipeline.

A 7D-query material model (uv position, incoming/outgoing directions,
level of detail) built from a learnable texture pyramid, a neural uv
offset, Fourier input encodings and an MLP or inception-style decoder;
trained against ray-marched heightfield references with an L1 +
Sobel-gradient objective on 4th-root remapped images.
"""
from .autodiff import Tape, Tensor, backward
from .dataset import Dataset, GenConfig, generate_dataset, load_dataset, save_dataset
from .heightfield import HeightfieldMaterial, make_material, shade_reference
from .model import ModelConfig, NeuralMaterial, QueryBatch, fourier_encode
from .optim import Adam
from .render import SceneConfig, render, render_reference
from .training import TrainConfig, resume, train

__all__ = [
    "Adam", "Dataset", "GenConfig", "HeightfieldMaterial", "ModelConfig",
    "NeuralMaterial", "QueryBatch", "SceneConfig", "Tape", "Tensor",
    "TrainConfig", "backward", "fourier_encode", "generate_dataset",
    "load_dataset", "make_material", "render", "render_reference", "resume",
    "save_dataset", "shade_reference", "train",
]

__version__ = "0.1.0"
