from .world import *  # noqa: F401,F403
from .tracking import *  # noqa: F401,F403
