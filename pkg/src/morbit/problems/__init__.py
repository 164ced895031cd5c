from .idx import parse_idx
from .linrep import IdxDataset, LinRepSpec, LinearRepresentation, SyntheticGaussian, linrep_suite
from .proximal import ProximalInnerProblem, QuadraticLosses
from .quadratic import (QuadraticBilevel, QuadraticBilevelSpec, quadratic_benchmark,
                        quadratic_oracles, random_quadratic_spec)
from .sinusoid import (MlpEmbedding, SinusoidRegression, SinusoidTask, sinusoid_suite,
                       unseen_sinusoid_tasks)

__all__ = [
    "parse_idx", "IdxDataset", "LinRepSpec", "LinearRepresentation", "SyntheticGaussian",
    "linrep_suite", "ProximalInnerProblem", "QuadraticLosses", "QuadraticBilevel",
    "QuadraticBilevelSpec", "quadratic_benchmark", "quadratic_oracles", "random_quadratic_spec", "MlpEmbedding",
    "SinusoidRegression", "SinusoidTask", "sinusoid_suite", "unseen_sinusoid_tasks",
]
