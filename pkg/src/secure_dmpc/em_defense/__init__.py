"""Supervision layer: EM identification of the dual map, detection and repair."""

from .mixture import *  # noqa: F401,F403
from .supervision import *  # noqa: F401,F403
from . import mixture, supervision

__all__ = mixture.__all__ + supervision.__all__
