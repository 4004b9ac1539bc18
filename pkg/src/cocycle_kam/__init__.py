"""Reduction of analytic quasiperiodic SL(2,R) cocycles to cocycles of rotations.

Modules:

- ``arithmetic``: continued fractions, special denominators, arithmetic certificates;
- ``analytic``: Fourier-series functions on a strip with certified norms;
- ``cocycle``: cocycles, fibered products, rotation number, Lyapunov exponent;
- ``kam``: elliptic normalization, the conjugation step and the reduction driver;
- ``experiments``: energy scans and checks on Schrodinger cocycles;
- ``cli``: the ``cocycle-kam`` command.
"""

__version__ = "0.1.0"

from .analytic import AnalyticFunction, MatrixFunction, birkhoff_sum, norm_strip, shift  # noqa: E402
from .arithmetic import (ContinuedFraction, DiophantineParams, SelectedSubsequence,  # noqa: E402
                         check_rho_condition, expand_cf, parse_alpha, select_Q, torus_norm)
from .cocycle import (Cocycle, RotationForm, iterate, lyapunov, rotation_number,  # noqa: E402
                      schrodinger)
from .kam import KamConfig, KamResult, reduce_to_rotations  # noqa: E402

__all__ = [
    "AnalyticFunction", "MatrixFunction", "birkhoff_sum", "norm_strip", "shift",
    "ContinuedFraction", "DiophantineParams", "SelectedSubsequence", "check_rho_condition",
    "expand_cf", "parse_alpha", "select_Q", "torus_norm",
    "Cocycle", "RotationForm", "iterate", "lyapunov", "rotation_number", "schrodinger",
    "KamConfig", "KamResult", "reduce_to_rotations",
]
