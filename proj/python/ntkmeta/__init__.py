"""Meta-learning in the NTK function space."""

from ._ntkmeta import *  # noqa: F401,F403
from ._ntkmeta import Error, LossKind, NetworkSpec  # noqa: F401
