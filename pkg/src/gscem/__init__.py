"""Exact closed-form EM for Gaussian sparse coding (spike-and-slab) models.

Modules
-------
model
    Parameter and state types, validation, forward sampling.
inference
    Exact posterior over all ``2**H`` binary states, moments, likelihood.
em
    M-step updates, initialisation, the EM driver and restarts.
metrics
    Amari index, orthogonality deviation, run-cluster selection.
datagen
    Cauchy/Laplace sparse-coding data, orthogonal mixing, source files.
cli
    ``gscem`` command line (generate, fit, eval, bench).
"""
from .model import (PI_FLOOR, MAX_HIDDEN, BinaryState, Dataset, GSCError,
                    InputError, LatentSample, ModelParams, NumericalError,
                    StateCapError, enumerate_states, log_state_prior,
                    random_gsc_params, sample_gsc, validate_params)
from .inference import (StateContexts, StatePosterior, PointMoments,
                        build_state_contexts, log_likelihood, point_moments,
                        posterior_over_states)
from .em import (FitAborted, FitOptions, FitResult, SufficientStats, e_step,
                 fit, init_params, mstep_pi, mstep_Sigma, mstep_W,
                 multi_restart)
from .metrics import (amari_index, ortho_deviation, select_orthogonal_cluster,
                      select_likelihood_cluster, summarize_runs)
from .datagen import (load_sources_csv, mix_sources, random_orthogonal,
                      sample_sc)

__version__ = "0.1.0"
