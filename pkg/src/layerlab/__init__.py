"""layerlab: mutate small image classifiers, train at desk scale, compare trends."""

__version__ = "0.1.0"

from .kernels import active_backend


def engine_version() -> str:
    return f"layerlab-{__version__}+{active_backend()}"
