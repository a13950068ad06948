"""Colony cardinality classification workbench.

A small numpy library that trains a fixed four-stage CNN on colony
segment images and inspects it with embedding, feature-visualization and
class-activation-map diagnostics. All randomness flows through explicit
seeds; repeated runs produce bit-identical artifacts.
"""

from .errors import MicrobiaNetError
from .model import (
    ModelState,
    build_microbianet,
    checkpoint_load,
    checkpoint_save,
    class_score_gradient,
    count_parameters,
    forward,
    backward,
)
from .optim import AdamState, adam_step, kaiming_init, make_rng

__version__ = "0.1.0"
