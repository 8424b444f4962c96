"""Deep-learning head-model construction and TMS induced-field dosimetry."""
import warnings

# numba probes an outdated TBB on some hosts and falls back to another threading layer
warnings.filterwarnings("ignore", message="The TBB threading layer")

__version__ = "0.1.0"
