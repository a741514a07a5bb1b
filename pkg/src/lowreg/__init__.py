"""Deformable registration of noisy volumes with a low-rank similarity loss."""

import warnings

# numba probes an optional TBB threading layer and warns when it is too old
warnings.filterwarnings("ignore", message=".*TBB.*", category=Warning)

__version__ = "0.1.0"
