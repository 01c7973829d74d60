//! Nuisance models: biased observational effect, compliance, instrument
//! propensity, and the IV-ratio baseline.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::learners::{
    fit_forest, ForestMode, ForestModel, ForestParams, Predictor, SharedPredictor,
};
use crate::tabular::{IvDataset, ObsDataset, RowData};

/// Default floor/ceiling applied to instrument propensities.
pub const PROPENSITY_EPS: f64 = 0.01;

/// T-learner: difference of arm-wise outcome forests.
#[derive(Debug, Clone)]
pub struct TLearner {
    pub treated: ForestModel,
    pub control: ForestModel,
}

impl Predictor for TLearner {
    fn predict(&self, x: &[f64]) -> f64 {
        self.treated.predict(x) - self.control.predict(x)
    }
}

pub fn fit_tau_obs_tlearner(o: &ObsDataset, params: &ForestParams) -> Result<TLearner> {
    let (x1, y1) = o.arm(1);
    let (x0, y0) = o.arm(0);
    if y1.is_empty() || y0.is_empty() {
        return Err(Error::PositivityViolation(format!(
            "observational arms have {} treated and {} control rows",
            y1.len(),
            y0.len()
        )));
    }
    Ok(TLearner {
        treated: fit_forest(
            &x1,
            &y1,
            &params.with_seed(params.seed.child(1)),
            ForestMode::Regression,
        )?,
        control: fit_forest(
            &x0,
            &y0,
            &params.with_seed(params.seed.child(0)),
            ForestMode::Regression,
        )?,
    })
}

/// `P(A=1 | Z=1, x) - P(A=1 | Z=0, x)`, clamped to `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct ComplianceModel {
    pub encouraged: ForestModel,
    pub not_encouraged: ForestModel,
}

impl Predictor for ComplianceModel {
    fn predict(&self, x: &[f64]) -> f64 {
        (self.encouraged.predict(x) - self.not_encouraged.predict(x)).clamp(-1.0, 1.0)
    }
}

pub fn fit_compliance(e: &IvDataset, params: &ForestParams) -> Result<ComplianceModel> {
    let (x1, a1, _) = e.instrument_arm(1);
    let (x0, a0, _) = e.instrument_arm(0);
    if a1.is_empty() || a0.is_empty() {
        return Err(Error::PositivityViolation(format!(
            "instrument arms have {} encouraged and {} unencouraged rows",
            a1.len(),
            a0.len()
        )));
    }
    let t1: Vec<f64> = a1.iter().map(|&a| a as f64).collect();
    let t0: Vec<f64> = a0.iter().map(|&a| a as f64).collect();
    Ok(ComplianceModel {
        encouraged: fit_forest(
            &x1,
            &t1,
            &params.with_seed(params.seed.child(11)),
            ForestMode::Probability,
        )?,
        not_encouraged: fit_forest(
            &x0,
            &t0,
            &params.with_seed(params.seed.child(10)),
            ForestMode::Probability,
        )?,
    })
}

/// How the instrument propensity is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum PropensitySpec {
    /// Randomized instrument with known `P(Z=1 | x)`.
    Known(f64),
    Forest(ForestParams),
}

#[derive(Debug, Clone)]
pub enum PropensityModel {
    Known(f64),
    Forest { model: ForestModel, eps: f64 },
}

impl Predictor for PropensityModel {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            PropensityModel::Known(p) => *p,
            PropensityModel::Forest { model, eps } => model.predict(x).clamp(*eps, 1.0 - eps),
        }
    }
}

pub fn fit_instrument_propensity(
    e: &IvDataset,
    spec: &PropensitySpec,
    eps: f64,
) -> Result<PropensityModel> {
    if !(0.0..0.5).contains(&eps) {
        return Err(Error::invalid(format!(
            "propensity eps {eps} outside [0, 0.5)"
        )));
    }
    match spec {
        PropensitySpec::Known(p) => {
            if !(*p > 0.0 && *p < 1.0) {
                return Err(Error::invalid(format!(
                    "known propensity {p} outside (0, 1)"
                )));
            }
            Ok(PropensityModel::Known(*p))
        }
        PropensitySpec::Forest(params) => {
            let z = e.z();
            if z.is_empty() || z.iter().all(|&v| v == z[0]) {
                return Err(Error::DegenerateInstrument);
            }
            let t: Vec<f64> = z.iter().map(|&v| v as f64).collect();
            let model = fit_forest(e.x(), &t, params, ForestMode::Probability)?;
            Ok(PropensityModel::Forest { model, eps })
        }
    }
}

/// `Y Z (1 - pi) - Y (1 - Z) pi`.
pub fn pseudo_outcome(y: f64, z: u8, pi: f64) -> Result<f64> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::invalid(format!("propensity {pi} outside (0, 1)")));
    }
    if z > 1 {
        return Err(Error::invalid(format!("instrument code {z} is not 0/1")));
    }
    let z = z as f64;
    Ok(y * z * (1.0 - pi) - y * (1.0 - z) * pi)
}

/// `gamma * pi * (1 - pi)`.
pub fn compliance_weight(gamma: f64, pi: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&pi) {
        return Err(Error::invalid(format!("propensity {pi} outside [0, 1]")));
    }
    if !(-1.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!(
            "compliance {gamma} outside [-1, 1]"
        )));
    }
    Ok(gamma * pi * (1.0 - pi))
}

/// Sign-preserving clip: `sign(g) * max(|g|, clip)`, with `g = 0` mapped to `+clip`.
pub fn clip_compliance(gamma: f64, clip: f64) -> f64 {
    if gamma < 0.0 {
        -(gamma.abs().max(clip))
    } else {
        gamma.max(clip)
    }
}

/// Wald-ratio CATE `delta_Y(x) / gamma_clipped(x)` from the IV sample alone.
#[derive(Debug, Clone)]
pub struct IvRatioModel {
    pub outcome_encouraged: ForestModel,
    pub outcome_not_encouraged: ForestModel,
    pub compliance: ComplianceModel,
    pub clip: f64,
}

impl IvRatioModel {
    pub fn delta_y(&self, x: &[f64]) -> f64 {
        self.outcome_encouraged.predict(x) - self.outcome_not_encouraged.predict(x)
    }
}

impl Predictor for IvRatioModel {
    fn predict(&self, x: &[f64]) -> f64 {
        self.delta_y(x) / clip_compliance(self.compliance.predict(x), self.clip)
    }
}

pub fn fit_iv_ratio_cate(
    e: &IvDataset,
    outcome_params: &ForestParams,
    compliance_params: &ForestParams,
    clip: f64,
) -> Result<IvRatioModel> {
    if !(clip > 0.0) {
        return Err(Error::invalid(format!(
            "compliance clip {clip} must be > 0"
        )));
    }
    let compliance = fit_compliance(e, compliance_params)?;
    let (x1, _, y1) = e.instrument_arm(1);
    let (x0, _, y0) = e.instrument_arm(0);
    Ok(IvRatioModel {
        outcome_encouraged: fit_forest(
            &x1,
            &y1,
            &outcome_params.with_seed(outcome_params.seed.child(21)),
            ForestMode::Regression,
        )?,
        outcome_not_encouraged: fit_forest(
            &x0,
            &y0,
            &outcome_params.with_seed(outcome_params.seed.child(20)),
            ForestMode::Regression,
        )?,
        compliance,
        clip,
    })
}

/// Fits a per-fold nuisance function on an IV training subset.
pub trait IvLearner: Send + Sync {
    fn fit(&self, train: &IvDataset) -> Result<SharedPredictor>;
}

/// Forest compliance learner.
pub struct ForestCompliance(pub ForestParams);

impl IvLearner for ForestCompliance {
    fn fit(&self, train: &IvDataset) -> Result<SharedPredictor> {
        Ok(Arc::new(fit_compliance(train, &self.0)?))
    }
}

/// Instrument propensity learner, known or forest-based.
pub struct PropensityLearner {
    pub spec: PropensitySpec,
    pub eps: f64,
}

impl PropensityLearner {
    pub fn known(p: f64) -> Self {
        PropensityLearner {
            spec: PropensitySpec::Known(p),
            eps: PROPENSITY_EPS,
        }
    }

    pub fn forest(params: ForestParams) -> Self {
        PropensityLearner {
            spec: PropensitySpec::Forest(params),
            eps: PROPENSITY_EPS,
        }
    }
}

impl IvLearner for PropensityLearner {
    fn fit(&self, train: &IvDataset) -> Result<SharedPredictor> {
        Ok(Arc::new(fit_instrument_propensity(
            train, &self.spec, self.eps,
        )?))
    }
}

/// Ignores the training data and returns a fixed function (oracle nuisances).
pub struct FixedLearner(pub SharedPredictor);

impl IvLearner for FixedLearner {
    fn fit(&self, _train: &IvDataset) -> Result<SharedPredictor> {
        Ok(self.0.clone())
    }
}

/// Compliance and propensity learners for the cross-fitted stage.
#[derive(Clone)]
pub struct NuisanceLearners {
    pub compliance: Arc<dyn IvLearner>,
    pub propensity: Arc<dyn IvLearner>,
}

impl NuisanceLearners {
    pub fn new(compliance: impl IvLearner + 'static, propensity: impl IvLearner + 'static) -> Self {
        NuisanceLearners {
            compliance: Arc::new(compliance),
            propensity: Arc::new(propensity),
        }
    }
}

pub(crate) fn check_dataset_nonempty<D: RowData>(d: &D, what: &str) -> Result<()> {
    if d.is_empty() {
        return Err(Error::invalid(format!("{what} dataset is empty")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::MaxFeatures;
    use crate::tabular::{Covariates, RngStream};
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn pseudo_outcome_examples() {
        assert_eq!(pseudo_outcome(2.0, 1, 0.5).unwrap(), 1.0);
        assert_eq!(pseudo_outcome(2.0, 0, 0.5).unwrap(), -1.0);
        assert_eq!(pseudo_outcome(3.0, 1, 0.25).unwrap(), 2.25);
        assert!(pseudo_outcome(1.0, 1, 0.0).is_err());
        assert!(pseudo_outcome(1.0, 1, 1.0).is_err());
    }

    #[test]
    fn compliance_weight_examples() {
        assert!((compliance_weight(0.8, 0.5).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(compliance_weight(0.0, 0.3).unwrap(), 0.0);
        assert!((compliance_weight(0.5, 0.25).unwrap() - 0.09375).abs() < 1e-15);
        assert!(compliance_weight(1.5, 0.5).is_err());
        assert!(compliance_weight(0.5, 1.5).is_err());
    }

    #[test]
    fn clip_preserves_sign() {
        assert_eq!(clip_compliance(0.05, 0.1), 0.1);
        assert_eq!(clip_compliance(-0.05, 0.1), -0.1);
        assert_eq!(clip_compliance(0.0, 0.1), 0.1);
        assert_eq!(clip_compliance(0.7, 0.1), 0.7);
        assert_eq!(clip_compliance(-0.7, 0.1), -0.7);
    }

    fn one_d(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = RngStream::new(seed, 77).rng();
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn zero_outcome_gives_zero_effect() {
        let xs = one_d(200, 1);
        let a: Vec<u8> = (0..200).map(|i| (i % 2) as u8).collect();
        let o = ObsDataset::new(
            Covariates::from_columns(vec![xs]).unwrap(),
            a,
            vec![0.0; 200],
        )
        .unwrap();
        let t = fit_tau_obs_tlearner(&o, &ForestParams::outcome(RngStream::new(1, 1))).unwrap();
        for v in [-2.0, 0.0, 1.5] {
            assert_eq!(t.predict(&[v]), 0.0);
        }
    }

    #[test]
    fn empty_arm_is_positivity_violation() {
        let xs = one_d(20, 2);
        let o = ObsDataset::new(
            Covariates::from_columns(vec![xs.clone()]).unwrap(),
            vec![1; 20],
            vec![1.0; 20],
        )
        .unwrap();
        assert!(matches!(
            fit_tau_obs_tlearner(&o, &ForestParams::outcome(RngStream::new(1, 1))),
            Err(Error::PositivityViolation(_))
        ));
        let e = IvDataset::new(
            Covariates::from_columns(vec![xs]).unwrap(),
            vec![0; 20],
            vec![0; 20],
            vec![1.0; 20],
        )
        .unwrap();
        assert!(matches!(
            fit_compliance(&e, &ForestParams::compliance(RngStream::new(1, 1))),
            Err(Error::PositivityViolation(_))
        ));
        let spec = PropensitySpec::Forest(ForestParams::compliance(RngStream::new(1, 1)));
        assert!(matches!(
            fit_instrument_propensity(&e, &spec, PROPENSITY_EPS),
            Err(Error::DegenerateInstrument)
        ));
        assert!(fit_instrument_propensity(&e, &PropensitySpec::Known(0.5), PROPENSITY_EPS).is_ok());
    }

    #[test]
    fn tlearner_is_invariant_to_row_order_after_canonical_sort() {
        let n = 300;
        let xs = one_d(n, 3);
        let a: Vec<u8> = (0..n).map(|i| ((i * 7) % 3 == 0) as u8).collect();
        let y: Vec<f64> = xs
            .iter()
            .zip(&a)
            .map(|(x, &a)| x * x + a as f64 * x)
            .collect();
        let o = ObsDataset::new(Covariates::from_columns(vec![xs]).unwrap(), a, y).unwrap();
        let canonical = |d: &ObsDataset| {
            let mut idx: Vec<usize> = (0..d.len()).collect();
            idx.sort_by(|&i, &j| {
                (d.a()[i], d.x().get(i, 0))
                    .partial_cmp(&(d.a()[j], d.x().get(j, 0)))
                    .unwrap()
            });
            d.select_rows(&idx)
        };
        let mut shuffled: Vec<usize> = (0..n).rev().collect();
        shuffled.rotate_left(17);
        let p = ForestParams::outcome(RngStream::new(8, 8));
        let t1 = fit_tau_obs_tlearner(&canonical(&o), &p).unwrap();
        let t2 = fit_tau_obs_tlearner(&canonical(&o.select_rows(&shuffled)), &p).unwrap();
        for v in [-1.5, -0.2, 0.4, 2.0] {
            assert_eq!(t1.predict(&[v]), t2.predict(&[v]));
        }
    }

    #[test]
    fn perfect_compliance_gives_gamma_near_one() {
        let n = 2000;
        let xs = one_d(n, 4);
        let mut rng = RngStream::new(4, 1).rng();
        let z: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        let e = IvDataset::new(
            Covariates::from_columns(vec![xs.clone()]).unwrap(),
            z.clone(),
            z,
            vec![0.0; n],
        )
        .unwrap();
        let mut p = ForestParams::compliance(RngStream::new(3, 3));
        p.max_features = MaxFeatures::All;
        let g = fit_compliance(&e, &p).unwrap();
        assert!(xs.iter().all(|&v| g.predict(&[v]) >= 0.95));
    }

    #[test]
    fn propensity_clamped_and_known_constant() {
        let known = fit_instrument_propensity(
            &IvDataset::new(
                Covariates::from_columns(vec![vec![0.0, 1.0]]).unwrap(),
                vec![0, 1],
                vec![0, 1],
                vec![0.0, 0.0],
            )
            .unwrap(),
            &PropensitySpec::Known(0.5),
            PROPENSITY_EPS,
        )
        .unwrap();
        assert_eq!(known.predict(&[3.0]), 0.5);

        // Z perfectly determined by x: raw forest output is 0 or 1, clamped to [eps, 1-eps].
        let xs = one_d(400, 5);
        let z: Vec<u8> = xs.iter().map(|&v| (v > 0.0) as u8).collect();
        let e = IvDataset::new(
            Covariates::from_columns(vec![xs.clone()]).unwrap(),
            z,
            vec![0; 400],
            vec![0.0; 400],
        )
        .unwrap();
        let mut p = ForestParams::outcome(RngStream::new(2, 2));
        p.min_samples_leaf = 1;
        let model = fit_instrument_propensity(&e, &PropensitySpec::Forest(p), 0.01).unwrap();
        for v in xs.iter().chain(&[-10.0, 10.0]) {
            let pv = model.predict(&[*v]);
            assert!((0.01..=0.99).contains(&pv), "{pv}");
        }
    }

    #[test]
    fn iv_ratio_with_perfect_compliance_tracks_delta_y() {
        let n = 2000;
        let xs = one_d(n, 6);
        let mut rng = RngStream::new(6, 1).rng();
        let z: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        let y: Vec<f64> = xs
            .iter()
            .zip(&z)
            .map(|(x, &z)| 1.0 + x + z as f64 * (2.0 + x))
            .collect();
        let e =
            IvDataset::new(Covariates::from_columns(vec![xs]).unwrap(), z.clone(), z, y).unwrap();
        let mut cp = ForestParams::compliance(RngStream::new(1, 2));
        cp.max_features = MaxFeatures::All;
        let m =
            fit_iv_ratio_cate(&e, &ForestParams::outcome(RngStream::new(1, 3)), &cp, 0.1).unwrap();
        for v in [-1.0, 0.0, 1.0] {
            let g = m.compliance.predict(&[v]);
            assert!(g > 0.95);
            assert!((m.predict(&[v]) - m.delta_y(&[v]) / g).abs() < 1e-12);
        }
        assert!(
            fit_iv_ratio_cate(&e, &ForestParams::outcome(RngStream::new(1, 3)), &cp, 0.0).is_err()
        );
    }
}
