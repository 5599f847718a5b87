from .policies import (CbfQpPolicy, ClfCbfQpPolicy, ClfQpPolicy,
                       ControlOutput, LinearStateFeedback, TrackingController,
                       box_rows)
from .qp import QpSolution, RelaxedQpController

__all__ = [
    "CbfQpPolicy", "ClfCbfQpPolicy", "ClfQpPolicy", "ControlOutput",
    "LinearStateFeedback", "TrackingController", "box_rows",
    "QpSolution", "RelaxedQpController",
]
