"""Surrogate modelling of injector flows from a common POD basis and a
sparse co-kriging model of its time-varying coefficients."""

from .archive import SnapshotEnsemble, read_archive, write_archive
from .cokrige import (DesignScaler, GpModelSlice, chi2_quantile, correlation_matrix,
                      hdcr_contains, predict_coefficients)
from .cpod import CpodBasis, extract_basis, leading_eigenpairs, reconstruct
from .errors import (ConditioningError, ConvergenceError, CpodError, DegenerateMapError,
                     DomainError, ParameterError, StageOrderError, UndefinedMetricError,
                     ValidationError)
from .coupling import CouplingGraph, extract_couplings, pooled_couplings
from .estimate import (FitConfig, FitReport, bcd_fit, fit_pooled, fit_slices, glasso_block,
                       select_top_k, tune_lambda)
from .grid import (GeometryParams, Grid, Region, build_rescale_map, idw_interpolate,
                   partition_grid)
from .predictor import PredictedField, mre, predict_flow, psd_probe
from .synthgen import SyntheticSpec, generate, reference_spec
from .tke import (WncqDistribution, tke_confidence_band, tke_distribution, tke_predict,
                  wncq_cdf, wncq_quantile)

__version__ = "0.1.0"
