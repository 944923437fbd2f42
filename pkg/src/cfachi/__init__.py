"""Confirmatory factor analysis with ML, RLS and Satorra-Bentler chi-square
tests, score-test modification indices, fit indices and a Monte Carlo
harness."""

from .estimation import SampleMoments, FitSolution, f_ml, f_gls, fit, fit_independence, \
    gradient_f_ml, starting_values
from .inference import (TestStatistic, FitIndexSet, LmCandidate, chi_square_sf, t_ml, t_rls,
                        satorra_bentler, lm_test, nfi, cfi, tli, rmsea, evaluate_fit)
from .model import CfaModel, Fixed, Free, Position, unpack, pack, implied_covariance, \
    degrees_of_freedom, population_model, build_model, load_model

__version__ = "0.1.0"
