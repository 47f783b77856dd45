"""Global-local attention fusion of camera, gated and lidar streams for
object detection in simulated adverse weather, on a small numpy autodiff core."""

from gla.kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
