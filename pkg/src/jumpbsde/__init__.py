"""Deep BSDE solver for forward-backward SDEs driven by jump processes."""

from .models import (BasketCallPayoff, CallPayoff, CgmySpec, FbsdeProblem, GaussianJumpDiffusionSpec,
                     IdentityPayoff, LinearDriver, PRESETS, make_problem)
from .oracles import PriceEstimate, fft_density, mc_price
from .sampling import RngStream
from .solver import DeepBSDESolver, NumericalAbort, SolverConfig, TrainReport, train

__version__ = "0.1.0"

__all__ = [
    "BasketCallPayoff", "CallPayoff", "CgmySpec", "DeepBSDESolver", "FbsdeProblem",
    "GaussianJumpDiffusionSpec", "IdentityPayoff", "LinearDriver", "NumericalAbort", "PRESETS",
    "PriceEstimate", "RngStream", "SolverConfig", "TrainReport", "fft_density", "make_problem",
    "mc_price", "train",
]
