"""Quantum polyspectra toolkit.

Exact power-, bi- and trispectra of continuously monitored quantum systems
from their Liouvillian, stochastic-master-equation trajectory simulation,
spectra estimation from detector traces via windowed FFTs and unbiased
cumulant estimators, and simultaneous multi-order fitting of model rates.
"""

from .analytic import (
    CumulantValue,
    ModeData,
    SpectrumGrid,
    cumulant_time,
    default_omega_grid,
    liouvillian_modes,
    multi_time_moment,
    s2_analytic,
    s3_analytic,
    s4_analytic,
    spectrum_from_files,
    spectrum_to_files,
    sqd_s2_closed,
    sqd_s3_closed,
    sqd_s4_closed,
)
from .estimation import (
    EstimatorConfig,
    FourierFrame,
    confined_gaussian_window,
    estimate_s2,
    estimate_s3,
    estimate_s4,
    frames,
    k_stat_c2,
    k_stat_c3,
    k_stat_c4,
)
from .fitting import FitProblem, FitResult, fit, fit_spin3, model_spectra
from .liouville import (
    HilbertSpec,
    LiouvilleError,
    LiouvillianSpec,
    OperatorMatrix,
    StateVector,
    SuperOperator,
    build_liouvillian,
    meas_superop,
    meas_superop_prime,
    resolvent_gprime,
    steady_state,
)
from .models import (
    DoubleDotParams,
    Spin3Params,
    SqdParams,
    build_preset,
    doubledot_model,
    resolve_model,
    spin3_model,
    spin3_rates,
    sqd_model,
)
from .trajectory import (
    SimConfig,
    TimeTrace,
    default_dt,
    ensemble,
    read_trace,
    simulate,
    simulate_to_file,
    write_trace,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
