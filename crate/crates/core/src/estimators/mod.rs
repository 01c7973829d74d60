mod correction;
mod features;
mod nuisance;

pub use correction::{
    build_weighted_design, correct_representation, fit_parametric_bias, fit_representation_bias,
    predict_cate, solve_weighted_design, BiasModel, CorrectedCate, NuisanceBundle,
    ParametricConfig, ParametricFit, RepresentationConfig, RepresentationFit, WeightedDesign,
};
pub use features::{FeatureMap, Featurizer, FnFeaturizer, ReprFeatures, Term};
pub use nuisance::{
    clip_compliance, compliance_weight, fit_compliance, fit_instrument_propensity,
    fit_iv_ratio_cate, fit_tau_obs_tlearner, pseudo_outcome, ComplianceModel, FixedLearner,
    ForestCompliance, IvLearner, IvRatioModel, NuisanceLearners, PropensityLearner,
    PropensityModel, PropensitySpec, TLearner, PROPENSITY_EPS,
};
