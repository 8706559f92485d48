"""Numerical laboratory for diffusion in periodic cellular flows."""

import warnings

# numba probes TBB on first parallel launch; an old TBB just means another layer is used.
warnings.filterwarnings("ignore", message="The TBB threading layer requires")

__version__ = "0.1.0"
