"""PHNet: permutable hybrid CNN+MLP segmentation network for anisotropic
volumes, with its own reverse-mode autodiff engine, metric suite, synthetic
data pipeline, and training/benchmark harness.

Feature maps are rank-5 tensors with (batch, channels, depth, height, width)
axis semantics throughout.
"""

from .autograd import Tensor, Parameter, backward, grad_check, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "Parameter", "backward", "grad_check", "no_grad", "__version__"]
