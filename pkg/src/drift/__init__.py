"""Distributionally robust individualized treatment effects from multi-item
outcomes through a latent factor model."""
from .factor_model import (
    FactorConfig,
    FactorFit,
    ItemSchema,
    Reparam,
    ResponseDataset,
    apply_reparam,
    cjmle_objective,
    fit_cjmle,
    item_loss,
    item_loss_grad,
    promax_rotate,
    varimax_rotate,
)
from .latent_effects import FactorITE, dr_learner, factor_ite, fit_arm_regressions, ite_predict
from .maximin import (
    DriftModel,
    MaximinSolution,
    XiMatrix,
    drift_from_factors,
    drift_predict,
    empirical_xi,
    factorized_geo_predict,
    itr_assign,
    obs_maximin,
    run_drift,
    solve_maximin,
    solve_maximin_ellipsoid,
)
from .on_target import (
    ExcessLossEvaluator,
    OnTargetSet,
    Representation,
    build_unobserved_geo_evaluator,
    default_radius,
    excess_loss,
    fit_geo_observed,
    minimax_center,
    profiled_excess,
)
from .simulation import SimConfig, evaluate_methods, run_study, sample_vmf

__version__ = "0.1.0"
