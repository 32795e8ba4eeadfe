"""GhostNetV2 / DFC attention micro-framework (C++ core)."""

from ._ghostv2 import *  # noqa: F401,F403
from ._ghostv2 import GhostV2Error, Model, WeightFileError  # noqa: F401
