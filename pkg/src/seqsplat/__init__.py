"""Multi-sequence Gaussian splatting at desk scale.

Appearance-aware splat training over image collections captured in several
sequences, transient-mask refinement, mesh extraction, and synthetic UAV
frame generation.
"""
import warnings

# numba probes an old system TBB at first parallel launch and falls back to
# another threading layer; the notice is noise for users.
warnings.filterwarnings("ignore", message="The TBB threading layer requires TBB")

__version__ = "0.1.0"
