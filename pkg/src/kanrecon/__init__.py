"""KAN-based conditional diffusion for undersampled MRI reconstruction."""

from kanrecon.estimator import KanReconstructor, ZeroFilledReconstructor

__version__ = "0.1.0"

__all__ = ["KanReconstructor", "ZeroFilledReconstructor", "__version__"]
