"""Sequential predictor-corrector Euler integration and ensemble Kalman filtering."""

from .core import (DEFAULT_BOUND, BlockSde, ConfigurationError, Purpose,
                   RunOutcome, RunStatus, StateCheck, TimeGrid, check_state,
                   derive_rng, wiener_increments)
from .schemes import (EULER, REFERENCE, SEQ_EULER, Scheme, em_step, integrate,
                      integrate_batch, spc_corrector, spc_predictor, spc_step)

__all__ = [
    "DEFAULT_BOUND", "BlockSde", "ConfigurationError", "Purpose", "RunOutcome",
    "RunStatus", "StateCheck", "TimeGrid", "check_state", "derive_rng",
    "wiener_increments", "EULER", "REFERENCE", "SEQ_EULER", "Scheme",
    "em_step", "integrate", "integrate_batch", "spc_corrector",
    "spc_predictor", "spc_step",
]

__version__ = "0.1.0"
