__version__ = '1'

from .model import ChargingRequest
from .model import CostModel
from .model import TimeStamp
from .model import decompose_intervals
from .model import evaluate_cost
from .model import load_instance
from .model import validate_schedule

from .offline import OfflineSolver
from .offline import solve_offline
from .offline import verify_kkt

from .online import AlgorithmKind
from .online import OnlineEngine
from .online import run_online

from .scenario import scenario_config
from .scenario import run_replication
