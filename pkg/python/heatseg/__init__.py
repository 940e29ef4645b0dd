from . import config  # noqa: F401
from .autograd import *  # noqa: F401
from .bench import *  # noqa: F401
from .checkpoint import *  # noqa: F401
from .checks import *  # noqa: F401
from .data import *  # noqa: F401
from .hco import *  # noqa: F401
from .metrics import *  # noqa: F401
from .network import *  # noqa: F401
from .spectral import *  # noqa: F401
from .ssm import *  # noqa: F401
from .tensor import *  # noqa: F401
from .training import *  # noqa: F401
