//! Cross-fitted bias correction: parametric extrapolation and its
//! representation-learning variant.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{Featurizer, ReprFeatures};
use super::nuisance::{
    check_dataset_nonempty, compliance_weight, pseudo_outcome, NuisanceLearners,
};
use crate::error::{Error, Result};
use crate::learners::{
    fit_repr_net, LinearRegression, NetConfig, Penalty, Predictor, ReprNet, SharedPredictor,
};
use crate::tabular::{make_folds, FoldPlan, IvDataset, ObsDataset, RowData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParametricConfig {
    pub folds: usize,
    pub penalty: Penalty,
    /// Feature column excluded from the penalty.
    pub unpenalized_column: Option<usize>,
}

impl Default for ParametricConfig {
    fn default() -> Self {
        ParametricConfig {
            folds: 5,
            penalty: Penalty::None,
            unpenalized_column: None,
        }
    }
}

/// Per-fold compliance and propensity fits, each trained off its own fold.
pub struct NuisanceBundle {
    pub plan: FoldPlan,
    pub compliance: Vec<SharedPredictor>,
    pub propensity: Vec<SharedPredictor>,
    /// 0-based rows each fold's nuisances were trained on.
    pub train_rows: Vec<Vec<usize>>,
}

impl NuisanceBundle {
    pub fn fit(e: &IvDataset, folds: usize, learners: &NuisanceLearners) -> Result<Self> {
        let plan = make_folds(e.len(), folds)?;
        let fits: Vec<(SharedPredictor, SharedPredictor, Vec<usize>)> = (1..=folds)
            .into_par_iter()
            .map(|k| {
                let rows = plan.out_of_fold(k)?;
                if rows.is_empty() {
                    return Err(Error::invalid(format!(
                        "fold {k} complement has {} rows, too few to train nuisances",
                        rows.len()
                    )));
                }
                let train = e.select_rows(&rows);
                let gamma = learners.compliance.fit(&train)?;
                let pi = learners.propensity.fit(&train)?;
                Ok((gamma, pi, rows))
            })
            .collect::<Result<_>>()?;
        let mut bundle = NuisanceBundle {
            plan,
            compliance: Vec::with_capacity(folds),
            propensity: Vec::with_capacity(folds),
            train_rows: Vec::with_capacity(folds),
        };
        for (g, p, rows) in fits {
            bundle.compliance.push(g);
            bundle.propensity.push(p);
            bundle.train_rows.push(rows);
        }
        Ok(bundle)
    }

    /// `(gamma, pi)` for 0-based row `i`, from the fold that excludes it.
    pub fn at_row(&self, i: usize, x: &[f64]) -> (f64, f64) {
        let k = self.plan.assignment()[i] - 1;
        (
            self.compliance[k].predict(x).clamp(-1.0, 1.0),
            self.propensity[k].predict(x),
        )
    }
}

/// The pooled least-squares problem: rows `w_i phi(x_i)` against
/// `Ytilde_i - w_i tau_obs(x_i)`.
#[derive(Debug, Clone)]
pub struct WeightedDesign {
    pub design: DMatrix<f64>,
    pub target: Vec<f64>,
    pub weights: Vec<f64>,
    pub pseudo: Vec<f64>,
}

impl WeightedDesign {
    pub fn positive_weight_rows(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }
}

pub fn build_weighted_design(
    e: &IvDataset,
    tau_obs: &dyn Predictor,
    phi: &dyn Featurizer,
    bundle: &NuisanceBundle,
) -> Result<WeightedDesign> {
    if phi.input_dim() != e.dim() {
        return Err(Error::invalid(format!(
            "feature map expects {} covariates, data has {}",
            phi.input_dim(),
            e.dim()
        )));
    }
    if bundle.plan.n_rows() != e.len() {
        return Err(Error::invalid(
            "nuisance bundle was fit on a different sample",
        ));
    }
    let n = e.len();
    let p = phi.dim();
    let mut design = DMatrix::zeros(n, p);
    let mut target = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut pseudo = Vec::with_capacity(n);
    let (mut row, mut feats) = (Vec::with_capacity(e.dim()), Vec::with_capacity(p));
    for i in 0..n {
        e.x().row_into(i, &mut row);
        let (gamma, pi) = bundle.at_row(i, &row);
        let yt = pseudo_outcome(e.y()[i], e.z()[i], pi)?;
        let w = compliance_weight(gamma, pi)?;
        let t0 = if w == 0.0 { 0.0 } else { tau_obs.predict(&row) };
        if !t0.is_finite() {
            return Err(Error::invalid(format!(
                "observational CATE is not finite at row {}",
                i + 1
            )));
        }
        phi.eval_into(&row, &mut feats);
        for (j, f) in feats.iter().enumerate() {
            design[(i, j)] = w * f;
        }
        target.push(yt - w * t0);
        weights.push(w);
        pseudo.push(yt);
    }
    Ok(WeightedDesign {
        design,
        target,
        weights,
        pseudo,
    })
}

/// `b(x) = theta^T phi(x)`.
#[derive(Clone)]
pub struct BiasModel {
    pub phi: Arc<dyn Featurizer>,
    pub theta: Vec<f64>,
    /// Set when every compliance weight was zero and theta defaulted to zero.
    pub degenerate: bool,
}

impl BiasModel {
    pub fn zero(phi: Arc<dyn Featurizer>) -> Self {
        let theta = vec![0.0; phi.dim()];
        BiasModel {
            phi,
            theta,
            degenerate: false,
        }
    }

    pub fn bias(&self, x: &[f64]) -> f64 {
        self.phi
            .eval(x)
            .iter()
            .zip(&self.theta)
            .map(|(f, t)| f * t)
            .sum()
    }
}

/// A bias-corrected CATE estimate.
#[derive(Clone)]
pub enum CorrectedCate {
    /// `tau_obs(x) + theta^T phi(x)`.
    Parametric {
        input_dim: usize,
        tau_obs: SharedPredictor,
        bias: BiasModel,
    },
    /// `(h_obs + nu)^T phi(x)` on a shared representation.
    Representation {
        phi: Arc<dyn Featurizer>,
        h_obs: Vec<f64>,
        nu: Vec<f64>,
    },
}

impl CorrectedCate {
    pub fn input_dim(&self) -> usize {
        match self {
            CorrectedCate::Parametric { input_dim, .. } => *input_dim,
            CorrectedCate::Representation { phi, .. } => phi.input_dim(),
        }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            CorrectedCate::Parametric { tau_obs, bias, .. } => tau_obs.predict(x) + bias.bias(x),
            CorrectedCate::Representation { phi, h_obs, nu } => phi
                .eval(x)
                .iter()
                .zip(h_obs.iter().zip(nu))
                .map(|(f, (h, v))| f * (h + v))
                .sum(),
        }
    }
}

impl Predictor for CorrectedCate {
    fn predict(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }
}

pub fn predict_cate(model: &CorrectedCate, x: &[f64]) -> Result<f64> {
    if x.len() != model.input_dim() {
        return Err(Error::invalid(format!(
            "model expects {} covariates, got {}",
            model.input_dim(),
            x.len()
        )));
    }
    Ok(model.eval(x))
}

pub struct ParametricFit {
    pub bias: BiasModel,
    pub cate: CorrectedCate,
    pub nuisances: NuisanceBundle,
    pub positive_weight_rows: usize,
}

/// Solves the pooled problem. Returns `None` when every weight is zero.
pub fn solve_weighted_design(
    design: &WeightedDesign,
    cfg: &ParametricConfig,
) -> Result<Option<Vec<f64>>> {
    if design.positive_weight_rows() == 0 {
        return Ok(None);
    }
    let ones = vec![1.0; design.target.len()];
    let model = LinearRegression::new(cfg.penalty)
        .with_unpenalized(cfg.unpenalized_column)
        .fit(&design.design, &design.target, &ones)?;
    Ok(Some(model.coef))
}

pub fn fit_parametric_bias(
    tau_obs: SharedPredictor,
    e: &IvDataset,
    phi: Arc<dyn Featurizer>,
    learners: &NuisanceLearners,
    cfg: &ParametricConfig,
) -> Result<ParametricFit> {
    check_dataset_nonempty(e, "IV")?;
    if let Some(c) = cfg.unpenalized_column {
        if c >= phi.dim() {
            return Err(Error::invalid(format!(
                "unpenalized column {c} outside {} features",
                phi.dim()
            )));
        }
    }
    let nuisances = NuisanceBundle::fit(e, cfg.folds, learners)?;
    let design = build_weighted_design(e, tau_obs.as_ref(), phi.as_ref(), &nuisances)?;
    let positive_weight_rows = design.positive_weight_rows();
    let bias = match solve_weighted_design(&design, cfg)? {
        Some(theta) => BiasModel {
            phi,
            theta,
            degenerate: false,
        },
        None => {
            log::warn!("every compliance weight is zero; returning a zero bias model");
            let mut b = BiasModel::zero(phi);
            b.degenerate = true;
            b
        }
    };
    Ok(ParametricFit {
        cate: CorrectedCate::Parametric {
            input_dim: e.dim(),
            tau_obs,
            bias: bias.clone(),
        },
        bias,
        nuisances,
        positive_weight_rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationConfig {
    pub net: NetConfig,
    pub correction: ParametricConfig,
}

pub struct RepresentationFit {
    pub net: Arc<ReprNet>,
    pub h_obs: Vec<f64>,
    pub nu: Vec<f64>,
    pub cate: CorrectedCate,
    pub correction: ParametricFit,
}

/// Corrects `tau_obs(x) = h_obs^T phi(x)` on a fixed representation.
pub fn correct_representation(
    phi: Arc<dyn Featurizer>,
    h_obs: Vec<f64>,
    e: &IvDataset,
    learners: &NuisanceLearners,
    cfg: &ParametricConfig,
) -> Result<(CorrectedCate, ParametricFit)> {
    if h_obs.len() != phi.dim() {
        return Err(Error::invalid(format!(
            "head has {} weights for {} features",
            h_obs.len(),
            phi.dim()
        )));
    }
    let tau_obs: SharedPredictor = {
        let (phi, h) = (phi.clone(), h_obs.clone());
        Arc::new(crate::learners::FnPredictor(move |x: &[f64]| {
            phi.eval(x).iter().zip(&h).map(|(f, w)| f * w).sum::<f64>()
        }))
    };
    let fit = fit_parametric_bias(tau_obs, e, phi.clone(), learners, cfg)?;
    let cate = CorrectedCate::Representation {
        phi,
        h_obs,
        nu: fit.bias.theta.clone(),
    };
    Ok((cate, fit))
}

pub fn fit_representation_bias(
    o: &ObsDataset,
    e: &IvDataset,
    learners: &NuisanceLearners,
    cfg: &RepresentationConfig,
) -> Result<RepresentationFit> {
    check_dataset_nonempty(o, "observational")?;
    if o.dim() != e.dim() {
        return Err(Error::invalid(format!(
            "observational data has {} covariates, IV data {}",
            o.dim(),
            e.dim()
        )));
    }
    let net = Arc::new(fit_repr_net(o.x(), o.a(), o.y(), &cfg.net)?);
    let h_obs = net.effect_head();
    let phi: Arc<dyn Featurizer> = Arc::new(ReprFeatures(net.clone()));
    let (cate, correction) =
        correct_representation(phi, h_obs.clone(), e, learners, &cfg.correction)?;
    Ok(RepresentationFit {
        net,
        h_obs,
        nu: correction.bias.theta.clone(),
        cate,
        correction,
    })
}
