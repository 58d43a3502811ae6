"""panodepth: desk-scale 360-degree depth estimation building blocks.

Subpackages are small and independent: `tensor` (autodiff substrate),
`sphere` (equirectangular / cubemap / tangent geometry), `icosap`
(geodesic icosahedron point sets), `encoders` (image and point encoders),
`b2f` (bi-attention fusion), `pipeline` (decoder, losses, metrics,
optimizer), `scenes` (synthetic ground truth), and `cli` (command-line
harness).
"""

from .tensor import (
    Tensor,
    ShapeError,
    UsageError,
    NumericError,
    backward,
    finite_diff_gradcheck,
    no_grad,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "ShapeError",
    "UsageError",
    "NumericError",
    "backward",
    "finite_diff_gradcheck",
    "no_grad",
    "__version__",
]
