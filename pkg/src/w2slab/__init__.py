"""Numerical laboratory for weak-to-strong generalization under
group-imbalance spurious correlations: synthetic task generation, the
two-stage ridgeless pipeline, closed-form risk predictors, sweep experiments,
and confidence-based retraining on a classification analog."""

__version__ = "0.1.0"

from .config import (ConfigError, GeometryTargets, ProblemConfig, RunConfig,
                     load_config, parse_grid)
from .geometry import (GroupGeometry, GeometryError, build_frames, build_mu_xi,
                       build_geometry, validate)
from .data import (Dataset, FeatureMatrix, sample_dataset, features,
                   empirical_group_cov, empirical_cross_cov)
from .ridgeless import (MinNormRegressor, RankDeficiencyError, RiskReport,
                        fit_min_norm, population_optimum, pseudolabel,
                        exact_excess_risk, holdout_excess_risk)
from .theory import (CovBlocks, GainPrediction, FailureReport, cov_teacher,
                     cov_teacher_inv, cov_student, cov_student_inv, cross_cov,
                     trace_identity_teacher, trace_identity_w2s, sft_risk,
                     w2s_risk, optimal_eta_u, failure_criterion)
from .sweep import (SweepSpec, SweepResult, run_replicate, run_sweep,
                    export_csv, compare_to_theory)
from .enhanced import (ClassifConfig, ClassifDataset, SoftmaxHead, HeadHyper,
                       gce_loss, gen_classif, train_head, entropy_select,
                       enhanced_pipeline, ablation_grid)
from .selfcheck import run_selfcheck
