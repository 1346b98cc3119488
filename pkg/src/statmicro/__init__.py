"""Price dynamics of a market as a statistical field theory of log-prices.

Modules: ``model`` (potential and stationary prices), ``duality``
(utility, demand, cost and market clearing), ``lattice`` (discretized
action), ``propagator`` (Gaussian correlators), ``sampler`` (Metropolis
Monte Carlo), ``calibration`` (fits to price series) and ``cli``.
"""

from .lattice import Lattice, PricePath
from .model import ModelParams, load_params

__all__ = ["Lattice", "ModelParams", "PricePath", "load_params"]
__version__ = "0.1.0"
