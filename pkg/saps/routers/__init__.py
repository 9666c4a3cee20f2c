from . import experiments
from . import cost
