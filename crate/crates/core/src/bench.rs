//! Monte Carlo studies: replicate runner, metrics, rate studies and result files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{gen_iv, gen_obs, DgpSpec, OracleSet};
use crate::error::{Error, Result};
use crate::estimators::{
    fit_iv_ratio_cate, fit_parametric_bias, fit_representation_bias, fit_tau_obs_tlearner,
    FeatureMap, Featurizer, FixedLearner, ForestCompliance, NuisanceLearners, ParametricConfig,
    PropensityLearner, RepresentationConfig,
};
use crate::learners::{
    predictor_fn, Constant, ForestParams, MaxFeatures, NetConfig, Penalty, Predictor,
    SharedPredictor,
};
use crate::tabular::{fmt_num, write_table, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// T-learner on the observational sample.
    TauObs,
    /// Clipped Wald ratio on the IV sample.
    TauIv,
    /// Parametric extrapolation.
    Alg1,
    /// Representation-learning correction.
    Alg2,
    /// The biased effect implied by the representation network's heads.
    NetTauObs,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [
        Estimator::TauObs,
        Estimator::TauIv,
        Estimator::Alg1,
        Estimator::Alg2,
        Estimator::NetTauObs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::TauObs => "tau_obs",
            Estimator::TauIv => "tau_iv",
            Estimator::Alg1 => "alg1",
            Estimator::Alg2 => "alg2",
            Estimator::NetTauObs => "net_tau_obs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown estimator `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridSpec {
    /// Evenly spaced points on one coordinate (scalar DGP).
    Linspace { lo: f64, hi: f64, points: usize },
    /// Fixed standard-normal draws, shared by all replicates.
    Draws { points: usize },
}

impl GridSpec {
    pub fn default_for(spec: &DgpSpec) -> Self {
        match spec {
            DgpSpec::Scalar { .. } => GridSpec::Linspace {
                lo: -2.5,
                hi: 2.5,
                points: 200,
            },
            DgpSpec::HighDim { .. } => GridSpec::Draws { points: 1000 },
        }
    }

    /// Grid rows and their labels (`x` for a line, the point index otherwise).
    pub fn build(&self, dim: usize, seed: u64) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        match *self {
            GridSpec::Linspace { lo, hi, points } => {
                if dim != 1 {
                    return Err(Error::invalid(
                        "a linspace grid needs a one-dimensional DGP",
                    ));
                }
                if points == 0 || !(lo < hi) && points > 1 {
                    return Err(Error::invalid(
                        "linspace grid needs points >= 1 and lo < hi",
                    ));
                }
                let xs: Vec<f64> = (0..points)
                    .map(|i| {
                        if points == 1 {
                            lo
                        } else {
                            lo + (hi - lo) * i as f64 / (points - 1) as f64
                        }
                    })
                    .collect();
                Ok((xs.iter().map(|&v| vec![v]).collect(), xs))
            }
            GridSpec::Draws { points } => {
                if points == 0 {
                    return Err(Error::invalid("grid needs at least one point"));
                }
                let mut rng = RngStream::new(seed, u64::MAX).rng();
                let rows = (0..points)
                    .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
                    .collect();
                Ok((rows, (0..points).map(|i| i as f64).collect()))
            }
        }
    }
}

/// Forest hyperparameters without a seed; seeds are derived per replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestSettings {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub bootstrap: bool,
}

impl ForestSettings {
    pub fn outcome() -> Self {
        Self::from_params(&ForestParams::outcome(RngStream::new(0, 0)))
    }

    pub fn compliance() -> Self {
        Self::from_params(&ForestParams::compliance(RngStream::new(0, 0)))
    }

    fn from_params(p: &ForestParams) -> Self {
        ForestSettings {
            n_trees: p.n_trees,
            max_depth: p.max_depth,
            min_samples_leaf: p.min_samples_leaf,
            max_features: p.max_features,
            bootstrap: p.bootstrap,
        }
    }

    pub fn params(&self, seed: RngStream) -> ForestParams {
        ForestParams {
            n_trees: self.n_trees,
            max_depth: self.max_depth,
            min_samples_leaf: self.min_samples_leaf,
            max_features: self.max_features,
            bootstrap: self.bootstrap,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceMode {
    /// Learned compliance and observational effect.
    Estimated,
    /// True compliance, propensity and observational effect from the DGP.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub dgp: DgpSpec,
    pub n_obs: usize,
    pub n_iv: usize,
    pub reps: usize,
    pub folds: usize,
    pub estimators: Vec<Estimator>,
    /// `None` picks the default grid for the DGP.
    pub grid: Option<GridSpec>,
    pub seed: u64,
    pub nuisances: NuisanceMode,
    /// Basis for the parametric correction; `None` means the raw covariates.
    pub feature_map: Option<FeatureMap>,
    pub penalty: Penalty,
    pub outcome_forest: ForestSettings,
    pub compliance_forest: ForestSettings,
    pub net: NetConfig,
    pub clip: f64,
    /// Known instrument propensity; `None` learns it with the compliance forest settings.
    pub known_propensity: Option<f64>,
    /// Ridge strength for the representation correction, on the mean-loss
    /// scale. `None` uses half the network weight decay, the penalty a
    /// weight-decayed gradient fit of the correction would minimize.
    pub repr_ridge: Option<f64>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            dgp: DgpSpec::scalar(),
            n_obs: 2000,
            n_iv: 2000,
            reps: 20,
            folds: 5,
            estimators: vec![Estimator::TauObs, Estimator::TauIv, Estimator::Alg1],
            grid: None,
            seed: 0,
            nuisances: NuisanceMode::Estimated,
            feature_map: None,
            penalty: Penalty::None,
            outcome_forest: ForestSettings::outcome(),
            compliance_forest: ForestSettings::compliance(),
            net: NetConfig::default(),
            clip: 0.1,
            known_propensity: Some(0.5),
            repr_ridge: None,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.reps == 0 {
            return Err(Error::invalid("reps must be >= 1"));
        }
        if self.n_obs == 0 || self.n_iv == 0 {
            return Err(Error::invalid("sample sizes must be >= 1"));
        }
        if self.estimators.is_empty() {
            return Err(Error::invalid("estimator set is empty"));
        }
        if self.folds < 2 || self.folds > self.n_iv {
            return Err(Error::invalid(format!(
                "folds {} must lie in 2..=n_iv",
                self.folds
            )));
        }
        let phi = self.phi();
        phi.validate()?;
        if phi.input_dim() != self.dgp.dim() {
            return Err(Error::invalid("feature map dimension differs from the DGP"));
        }
        self.outcome_forest
            .params(RngStream::new(0, 0))
            .validate()?;
        self.compliance_forest
            .params(RngStream::new(0, 0))
            .validate()?;
        if self.needs_net() {
            self.net.validate()?;
            if let Some(a) = self.repr_ridge {
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::invalid(format!(
                        "repr_ridge {a} must be finite and >= 0"
                    )));
                }
            }
        }
        self.grid().build(self.dgp.dim(), self.seed)?;
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
            .clone()
            .unwrap_or_else(|| GridSpec::default_for(&self.dgp))
    }

    pub fn phi(&self) -> FeatureMap {
        self.feature_map.clone().unwrap_or(FeatureMap::Raw {
            input_dim: self.dgp.dim(),
        })
    }

    /// Penalty on the representation correction, scaled to the summed loss
    /// over the IV sample.
    pub fn repr_penalty(&self) -> Penalty {
        let alpha = self.repr_ridge.unwrap_or(self.net.weight_decay / 2.0);
        if alpha == 0.0 {
            Penalty::None
        } else {
            Penalty::L2 {
                alpha: alpha * self.n_iv as f64,
            }
        }
    }

    fn needs_net(&self) -> bool {
        self.estimators
            .iter()
            .any(|e| matches!(e, Estimator::Alg2 | Estimator::NetTauObs))
    }

    /// Estimators in canonical order with duplicates removed.
    pub fn estimator_set(&self) -> Vec<Estimator> {
        let mut v = self.estimators.clone();
        v.sort();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateReport {
    pub replicate: usize,
    pub mse: BTreeMap<Estimator, f64>,
    pub predictions: BTreeMap<Estimator, Vec<f64>>,
    /// Parametric-correction coefficients.
    pub theta: Option<Vec<f64>>,
    /// Representation-correction coefficients.
    pub nu: Option<Vec<f64>>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub estimator: Estimator,
    pub mean_mse: f64,
    pub sd: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
    pub grid_labels: Vec<f64>,
    pub oracle_tau: Vec<f64>,
    pub curves: BTreeMap<Estimator, Curve>,
    pub theta_mean: Option<Vec<f64>>,
    pub theta_sd: Option<Vec<f64>>,
    pub replicates: Vec<ReplicateReport>,
    /// `(replicate, error message)` for excluded replicates.
    pub failures: Vec<(usize, String)>,
}

impl MetricTable {
    pub fn row(&self, e: Estimator) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.estimator == e)
    }

    pub fn mean_mse(&self, e: Estimator) -> Option<f64> {
        self.row(e).map(|r| r.mean_mse)
    }
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter()
        .zip(truth)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / pred.len() as f64
}

fn nuisance_learners(cfg: &StudyConfig, oracle: &OracleSet, stream: RngStream) -> NuisanceLearners {
    let propensity: SharedPredictor = Arc::new(Constant(cfg.known_propensity.unwrap_or(0.5)));
    match cfg.nuisances {
        NuisanceMode::Oracle => {
            let o = oracle.clone();
            NuisanceLearners::new(
                FixedLearner(predictor_fn(move |x: &[f64]| o.gamma(x))),
                FixedLearner(propensity),
            )
        }
        NuisanceMode::Estimated => {
            let compliance = ForestCompliance(cfg.compliance_forest.params(stream.child(0)));
            match cfg.known_propensity {
                Some(p) => NuisanceLearners::new(compliance, PropensityLearner::known(p)),
                None => NuisanceLearners::new(
                    compliance,
                    PropensityLearner::forest(cfg.compliance_forest.params(stream.child(1))),
                ),
            }
        }
    }
}

/// Runs one replicate; the stream `(seed, r)` determines everything.
pub fn run_replicate(
    cfg: &StudyConfig,
    r: usize,
    grid: &[Vec<f64>],
    truth: &[f64],
) -> Result<ReplicateReport> {
    let start = Instant::now();
    let oracle = cfg.dgp.oracle();
    let root = RngStream::new(cfg.seed, r as u64);
    let o = gen_obs(&cfg.dgp, cfg.n_obs, root.child(0))?;
    let e = gen_iv(&cfg.dgp, cfg.n_iv, root.child(1))?;
    let set = cfg.estimator_set();
    let mut fitted: BTreeMap<Estimator, SharedPredictor> = BTreeMap::new();
    let (mut theta, mut nu) = (None, None);

    let needs_tlearner = set.contains(&Estimator::TauObs)
        || (set.contains(&Estimator::Alg1) && cfg.nuisances == NuisanceMode::Estimated);
    let tlearner: Option<SharedPredictor> = if needs_tlearner {
        Some(Arc::new(fit_tau_obs_tlearner(
            &o,
            &cfg.outcome_forest.params(root.child(2)),
        )?))
    } else {
        None
    };
    if set.contains(&Estimator::TauObs) {
        fitted.insert(Estimator::TauObs, tlearner.clone().expect("fitted above"));
    }
    if set.contains(&Estimator::TauIv) {
        let m = fit_iv_ratio_cate(
            &e,
            &cfg.outcome_forest.params(root.child(3)),
            &cfg.compliance_forest.params(root.child(4)),
            cfg.clip,
        )?;
        fitted.insert(Estimator::TauIv, Arc::new(m));
    }
    let learners = nuisance_learners(cfg, &oracle, root.child(5));
    let pcfg = ParametricConfig {
        folds: cfg.folds,
        penalty: cfg.penalty,
        unpenalized_column: None,
    };
    if set.contains(&Estimator::Alg1) {
        let tau_obs: SharedPredictor = match cfg.nuisances {
            NuisanceMode::Oracle => {
                let o = oracle.clone();
                predictor_fn(move |x: &[f64]| o.tau_obs(x))
            }
            NuisanceMode::Estimated => tlearner.clone().expect("fitted above"),
        };
        let phi: Arc<dyn Featurizer> = Arc::new(cfg.phi());
        let fit = fit_parametric_bias(tau_obs, &e, phi, &learners, &pcfg)?;
        theta = Some(fit.bias.theta.clone());
        fitted.insert(Estimator::Alg1, Arc::new(fit.cate));
    }
    if cfg.needs_net() {
        let rcfg = RepresentationConfig {
            net: NetConfig {
                seed: root.child(6),
                ..cfg.net.clone()
            },
            correction: ParametricConfig {
                penalty: cfg.repr_penalty(),
                ..pcfg.clone()
            },
        };
        let fit = fit_representation_bias(&o, &e, &learners, &rcfg)?;
        nu = Some(fit.nu.clone());
        let net = fit.net.clone();
        if set.contains(&Estimator::Alg2) {
            fitted.insert(Estimator::Alg2, Arc::new(fit.cate));
        }
        if set.contains(&Estimator::NetTauObs) {
            fitted.insert(
                Estimator::NetTauObs,
                predictor_fn(move |x: &[f64]| net.tau_obs(x)),
            );
        }
    }

    let mut predictions = BTreeMap::new();
    let mut errors = BTreeMap::new();
    for (est, model) in &fitted {
        let pred: Vec<f64> = grid.iter().map(|x| model.predict(x)).collect();
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "{} produced a non-finite prediction",
                est.name()
            )));
        }
        errors.insert(*est, mse(&pred, truth));
        predictions.insert(*est, pred);
    }
    let wall_secs = start.elapsed().as_secs_f64();
    log::info!("replicate {r} done in {wall_secs:.1}s");
    Ok(ReplicateReport {
        replicate: r,
        mse: errors,
        predictions,
        theta,
        nu,
        wall_secs,
    })
}

/// Replicates run in parallel; aggregation happens in replicate order.
pub fn run_study(cfg: &StudyConfig) -> Result<MetricTable> {
    cfg.validate()?;
    let (grid, labels) = cfg.grid().build(cfg.dgp.dim(), cfg.seed)?;
    let oracle = cfg.dgp.oracle();
    let truth: Vec<f64> = grid.iter().map(|x| oracle.tau(x)).collect();
    let outcomes: Vec<Result<ReplicateReport>> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| run_replicate(cfg, r, &grid, &truth))
        .collect();
    aggregate(cfg, outcomes, labels, truth)
}

pub fn aggregate(
    cfg: &StudyConfig,
    outcomes: Vec<Result<ReplicateReport>>,
    grid_labels: Vec<f64>,
    oracle_tau: Vec<f64>,
) -> Result<MetricTable> {
    let total = outcomes.len();
    let mut reps = Vec::new();
    let mut failures = Vec::new();
    for (r, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(rep) => reps.push(rep),
            Err(e) => {
                log::warn!("replicate {r} failed: {e}");
                failures.push((r, e.to_string()));
            }
        }
    }
    reps.sort_by_key(|r| r.replicate);
    if failures.len() * 5 > total || reps.is_empty() {
        return Err(Error::StudyAborted {
            failed: failures.len(),
            total,
        });
    }
    let mut rows = Vec::new();
    let mut curves = BTreeMap::new();
    for est in cfg.estimator_set() {
        let errs: Vec<f64> = reps.iter().map(|r| r.mse[&est]).collect();
        let (mean_mse, sd) = mean_sd(&errs);
        rows.push(MetricRow {
            estimator: est,
            mean_mse,
            sd,
            replicates: errs.len(),
        });
        let m = oracle_tau.len();
        let (mut mean, mut stderr) = (Vec::with_capacity(m), Vec::with_capacity(m));
        for j in 0..m {
            let col: Vec<f64> = reps.iter().map(|r| r.predictions[&est][j]).collect();
            let (mu, sd) = mean_sd(&col);
            mean.push(mu);
            stderr.push(sd / (col.len() as f64).sqrt());
        }
        curves.insert(est, Curve { mean, stderr });
    }
    let thetas: Vec<&Vec<f64>> = reps.iter().filter_map(|r| r.theta.as_ref()).collect();
    let (theta_mean, theta_sd) = if thetas.is_empty() {
        (None, None)
    } else {
        let p = thetas[0].len();
        let stats: Vec<(f64, f64)> = (0..p)
            .map(|j| mean_sd(&thetas.iter().map(|t| t[j]).collect::<Vec<_>>()))
            .collect();
        (
            Some(stats.iter().map(|s| s.0).collect()),
            Some(stats.iter().map(|s| s.1).collect()),
        )
    };
    Ok(MetricTable {
        rows,
        grid_labels,
        oracle_tau,
        curves,
        theta_mean,
        theta_sd,
        replicates: reps,
        failures,
    })
}

/// Bias coefficients of the DGP in the given basis, when it contains the bias exactly.
pub fn true_theta(spec: &DgpSpec, phi: &FeatureMap) -> Option<Vec<f64>> {
    let coef: Vec<f64> = match spec {
        DgpSpec::Scalar { confounding } => vec![-confounding],
        DgpSpec::HighDim {
            gamma, confounding, ..
        } => gamma.iter().map(|g| -confounding * g).collect(),
    };
    match phi {
        FeatureMap::Raw { .. } => Some(coef),
        FeatureMap::IdentityWithIntercept { .. } => {
            Some(std::iter::once(0.0).chain(coef).collect())
        }
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n_iv: usize,
    pub median_oracle: f64,
    pub median_estimated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub rows: Vec<RateRow>,
    pub slope_oracle: f64,
    pub slope_estimated: f64,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Least-squares slope of `log(y)` on `log(x)`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn theta_error(
    cfg: &StudyConfig,
    n_iv: usize,
    r: usize,
    mode: NuisanceMode,
    truth: &[f64],
) -> Result<f64> {
    let mut c = cfg.clone();
    c.n_iv = n_iv;
    c.nuisances = mode;
    c.estimators = vec![Estimator::Alg1];
    let oracle = c.dgp.oracle();
    let root = RngStream::new(cfg.seed, ((n_iv as u64) << 20) | r as u64);
    let e = gen_iv(&c.dgp, n_iv, root.child(1))?;
    let tau_obs: SharedPredictor = match mode {
        NuisanceMode::Oracle => {
            let o = oracle.clone();
            predictor_fn(move |x: &[f64]| o.tau_obs(x))
        }
        NuisanceMode::Estimated => {
            let o = gen_obs(&c.dgp, c.n_obs, root.child(0))?;
            Arc::new(fit_tau_obs_tlearner(
                &o,
                &c.outcome_forest.params(root.child(2)),
            )?)
        }
    };
    let learners = nuisance_learners(&c, &oracle, root.child(5));
    let pcfg = ParametricConfig {
        folds: c.folds,
        penalty: c.penalty,
        unpenalized_column: None,
    };
    let fit = fit_parametric_bias(tau_obs, &e, Arc::new(c.phi()), &learners, &pcfg)?;
    Ok(fit
        .bias
        .theta
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Median `||theta_hat - theta||` per IV sample size, for oracle and estimated nuisances.
pub fn run_rate_study(cfg: &StudyConfig, n_list: &[usize]) -> Result<RateTable> {
    if n_list.len() < 3 || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(
            "n_list must be strictly increasing with at least 3 entries",
        ));
    }
    let mut probe = cfg.clone();
    probe.n_iv = n_list[n_list.len() - 1];
    probe.estimators = vec![Estimator::Alg1];
    probe.validate()?;
    let truth = true_theta(&cfg.dgp, &cfg.phi()).ok_or_else(|| {
        Error::invalid("rate study needs a raw or intercept-plus-raw feature map")
    })?;
    let mut rows = Vec::new();
    for &n in n_list {
        let mut medians = [0.0; 2];
        for (slot, mode) in [NuisanceMode::Oracle, NuisanceMode::Estimated]
            .into_iter()
            .enumerate()
        {
            let errs: Vec<Result<f64>> = (0..cfg.reps)
                .into_par_iter()
                .map(|r| theta_error(cfg, n, r, mode, &truth))
                .collect();
            let failed = errs.iter().filter(|e| e.is_err()).count();
            if failed * 5 > cfg.reps {
                return Err(Error::StudyAborted {
                    failed,
                    total: cfg.reps,
                });
            }
            let ok: Vec<f64> = errs.into_iter().filter_map(|e| e.ok()).collect();
            medians[slot] = median(&ok);
        }
        log::info!(
            "rate study n_iv={n}: oracle {:.4}, estimated {:.4}",
            medians[0],
            medians[1]
        );
        rows.push(RateRow {
            n_iv: n,
            median_oracle: medians[0],
            median_estimated: medians[1],
        });
    }
    let ns: Vec<f64> = rows.iter().map(|r| r.n_iv as f64).collect();
    let slope_oracle = loglog_slope(
        &ns,
        &rows.iter().map(|r| r.median_oracle).collect::<Vec<_>>(),
    );
    let slope_estimated = loglog_slope(
        &ns,
        &rows.iter().map(|r| r.median_estimated).collect::<Vec<_>>(),
    );
    Ok(RateTable {
        rows,
        slope_oracle,
        slope_estimated,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Writes `table.csv`, `curves.csv`, `theta.csv` (when available) and `config.json`.
pub fn emit_results(table: &MetricTable, cfg: &StudyConfig, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let mut t = String::from("estimator,mean_mse,sd,replicates\n");
    for r in &table.rows {
        t.push_str(&format!(
            "{},{},{},{}\n",
            r.estimator.name(),
            fmt_num(r.mean_mse),
            fmt_num(r.sd),
            r.replicates
        ));
    }
    write_text(&dir.join("table.csv"), &t)?;

    let mut c = String::from("point,estimator,mean,stderr,oracle_tau\n");
    for (est, curve) in &table.curves {
        for j in 0..table.grid_labels.len() {
            c.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_num(table.grid_labels[j]),
                est.name(),
                fmt_num(curve.mean[j]),
                fmt_num(curve.stderr[j]),
                fmt_num(table.oracle_tau[j])
            ));
        }
    }
    write_text(&dir.join("curves.csv"), &c)?;

    if let (Some(m), Some(s)) = (&table.theta_mean, &table.theta_sd) {
        let header = ["index", "mean", "sd"].map(String::from);
        let rows = m
            .iter()
            .zip(s)
            .enumerate()
            .map(|(j, (a, b))| vec![j as f64, *a, *b]);
        write_table(&dir.join("theta.csv"), &header, rows)?;
    }
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    write_text(&dir.join("config.json"), &(json + "\n"))
}

pub fn emit_rates(rates: &RateTable, cfg: &StudyConfig, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let header = ["n_iv", "median_oracle", "median_estimated"].map(String::from);
    let rows = rates
        .rows
        .iter()
        .map(|r| vec![r.n_iv as f64, r.median_oracle, r.median_estimated]);
    write_table(&dir.join("rates.csv"), &header, rows)?;
    write_text(
        &dir.join("slopes.csv"),
        &format!(
            "nuisances,slope\noracle,{}\nestimated,{}\n",
            fmt_num(rates.slope_oracle),
            fmt_num(rates.slope_estimated)
        ),
    )?;
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    write_text(&dir.join("config.json"), &(json + "\n"))
}
