from ._kromhc import *  # noqa: F401,F403
from ._kromhc import __doc__  # noqa: F401
