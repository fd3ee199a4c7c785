"""Desk-scale score distillation laboratory.

Implements four score-distillation objectives (SDS, CSD, VSD, ASD) against
toy diffusion denoisers and analytic Gaussian-mixture oracles, with a run
harness, error-curve analysis, and a command line front end.
"""

__version__ = "0.1.0"

from .schedule import (NoiseSchedule, TimestepRange, ShiftPolicy, AnnealPlan,
                       build_schedule, diffuse, sample_timestep, sample_shift,
                       anneal_range)
from .corpus import (GaussianMixture, PointCorpus, ImageCorpus, build_corpus,
                     default_point_corpus, isotropic_gaussian)
from .denoiser import (Condition, GuidanceSpec, Denoiser, DenoiserArch,
                       DenoiserTrainConfig, GaussianMixtureOracle, OracleDenoiser,
                       cfg_combine, convert_v_to_eps, convert_eps_to_v,
                       oracle_noise, predict_noise, train_denoiser,
                       save_denoiser, load_denoiser)
from .distill import (GradientField, DistillationObjective, VsdAdapter,
                      apply_gradient_field, grad_sds, grad_csd, grad_vsd,
                      grad_asd, vsd_adapter_step, objective_gradient)
from .scene import (ParticleScene, ConditionalGenerator, RenderSpec, render,
                    hypernet_forward)
from .config import (RootConfig, build_config, load_config, apply_overrides,
                     resolve_objective, config_to_yaml)
from .harness import (ExperimentRecord, run_prompt_specific, run_amortized,
                      run_from_config, ablation_sweep, load_record)
from .analysis import (ErrorCurve, RecallReport, ClassifierBundle,
                       profile_error_curve, check_shift_inequality,
                       grad_norm_stats, train_classifier, recall_at_1,
                       emit_report, mc_bayes_error, corpus_probe_set,
                       error_probe_grid, spearman)

__all__ = [name for name in dir() if not name.startswith("_")]
