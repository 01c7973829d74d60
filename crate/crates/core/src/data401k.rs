//! The 401(k) survey: loading, outlier trimming, observational/IV split,
//! artificial non-compliance, and the end-to-end correction pipeline.
//!
//! Expected input: a comma-separated file with a header containing at least
//! `age, inc, educ, fsize, marr, twoearn (or two_earn), db, pira, hown, e401,
//! p401, net_tfa`. Extra columns are ignored.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    fit_iv_ratio_cate, fit_parametric_bias, fit_tau_obs_tlearner, CorrectedCate, FeatureMap,
    Featurizer, ForestCompliance, IvLearner, NuisanceLearners, ParametricConfig, PropensityLearner,
};
use crate::learners::{ForestParams, Penalty, Predictor, SharedPredictor};
use crate::tabular::{read_table, Covariates, IvDataset, ObsDataset, RngStream, RowData};

/// Covariate names in canonical order.
pub const COVARIATES: [&str; 9] = [
    "age", "inc", "educ", "fsize", "marr", "twoearn", "db", "pira", "hown",
];
const BINARY: [&str; 5] = ["marr", "twoearn", "db", "pira", "hown"];
pub const EDUC: usize = 2;
pub const MARR: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Survey401k {
    pub x: Covariates,
    pub e401: Vec<u8>,
    pub p401: Vec<u8>,
    pub net_tfa: Vec<f64>,
}

impl Survey401k {
    pub fn new(x: Covariates, e401: Vec<u8>, p401: Vec<u8>, net_tfa: Vec<f64>) -> Result<Self> {
        if x.n_cols() != COVARIATES.len() {
            return Err(Error::invalid(format!(
                "expected 9 covariates, got {}",
                x.n_cols()
            )));
        }
        let n = x.n_rows();
        if e401.len() != n || p401.len() != n || net_tfa.len() != n {
            return Err(Error::invalid("column lengths differ"));
        }
        let bad: Vec<usize> = (0..n)
            .filter(|&i| p401[i] == 1 && e401[i] == 0)
            .map(|i| i + 1)
            .collect();
        if !bad.is_empty() {
            return Err(Error::invalid(format!(
                "participation without eligibility in rows {}",
                summarize_rows(&bad)
            )));
        }
        Ok(Survey401k {
            x,
            e401,
            p401,
            net_tfa,
        })
    }

    pub fn len(&self) -> usize {
        self.net_tfa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.net_tfa.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Survey401k {
        Survey401k {
            x: self.x.select(idx),
            e401: idx.iter().map(|&i| self.e401[i]).collect(),
            p401: idx.iter().map(|&i| self.p401[i]).collect(),
            net_tfa: idx.iter().map(|&i| self.net_tfa[i]).collect(),
        }
    }
}

fn summarize_rows(rows: &[usize]) -> String {
    let shown: Vec<String> = rows.iter().take(10).map(usize::to_string).collect();
    if rows.len() > 10 {
        format!("{} (and {} more)", shown.join(", "), rows.len() - 10)
    } else {
        shown.join(", ")
    }
}

pub fn load_401k(path: &Path) -> Result<Survey401k> {
    let label = path.display().to_string();
    let load_err = |message: String| Error::Load {
        path: label.clone(),
        message,
    };
    let table = read_table(path)?;
    if table.n_rows() == 0 {
        return Err(load_err("file has no data rows".into()));
    }
    let col = |name: &str| -> Result<usize> {
        let alias = if name == "twoearn" {
            Some("two_earn")
        } else {
            None
        };
        table
            .find(name)
            .or_else(|| alias.and_then(|a| table.find(a)))
            .ok_or_else(|| load_err(format!("missing column `{name}`")))
    };
    let mut cols = Vec::with_capacity(9);
    for name in COVARIATES {
        let j = col(name)?;
        if BINARY.contains(&name) {
            table.binary_column(path, j)?;
        }
        cols.push(table.column(j));
    }
    let e401 = table.binary_column(path, col("e401")?)?;
    let p401 = table.binary_column(path, col("p401")?)?;
    let net_tfa = table.column(col("net_tfa")?);
    let x = Covariates::from_columns(cols).map_err(|e| load_err(e.to_string()))?;
    let data = Survey401k::new(x, e401, p401, net_tfa).map_err(|e| load_err(e.to_string()))?;
    log::info!("loaded {} rows from {label}", data.len());
    Ok(data)
}

/// Type-7 (linear interpolation) empirical quantile of sorted values.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Drops rows whose outcome lies strictly outside the `[fraction, 1 - fraction]`
/// type-7 quantiles; rows equal to a bound are kept.
pub fn trim_outcome(data: &Survey401k, fraction: f64) -> Result<Survey401k> {
    if !(0.0..0.5).contains(&fraction) {
        return Err(Error::invalid(format!(
            "trim fraction {fraction} outside [0, 0.5)"
        )));
    }
    if fraction == 0.0 || data.is_empty() {
        return Ok(data.clone());
    }
    let (lo, hi) = trim_bounds(&data.net_tfa, fraction);
    let keep: Vec<usize> = (0..data.len())
        .filter(|&i| data.net_tfa[i] >= lo && data.net_tfa[i] <= hi)
        .collect();
    Ok(data.select(&keep))
}

pub fn trim_bounds(values: &[f64], fraction: f64) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (
        quantile_type7(&sorted, fraction),
        quantile_type7(&sorted, 1.0 - fraction),
    )
}

/// Random halves: the observational half drops the instrument.
pub fn split_oe(data: &Survey401k, stream: RngStream) -> Result<(ObsDataset, IvDataset)> {
    let (o_idx, e_idx) = split_indices(data.len(), stream)?;
    let o = data.select(&o_idx);
    let e = data.select(&e_idx);
    Ok((
        ObsDataset::new(o.x, o.p401, o.net_tfa)?,
        IvDataset::new(e.x, e.e401, e.p401, e.net_tfa)?,
    ))
}

/// Row ids of the observational and IV halves, each ascending. The first half
/// gets the extra row when `n` is odd.
pub fn split_indices(n: usize, stream: RngStream) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::invalid(format!("cannot split {n} rows into halves")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream.rng());
    let (a, b) = perm.split_at(n.div_ceil(2));
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}

/// `x[column] < below`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskRule {
    pub column: usize,
    pub below: f64,
}

impl MaskRule {
    pub fn education_below_12() -> Self {
        MaskRule {
            column: EDUC,
            below: 12.0,
        }
    }

    pub fn matches(&self, x: &[f64]) -> bool {
        x[self.column] < self.below
    }
}

struct Masked {
    inner: SharedPredictor,
    rule: MaskRule,
}

impl Predictor for Masked {
    fn predict(&self, x: &[f64]) -> f64 {
        if self.rule.matches(x) {
            0.0
        } else {
            self.inner.predict(x)
        }
    }
}

/// Zeroes a compliance predictor wherever `rule` holds.
pub fn inject_noncompliance(
    gamma: SharedPredictor,
    rule: MaskRule,
    input_dim: usize,
) -> Result<SharedPredictor> {
    if rule.column >= input_dim {
        return Err(Error::invalid(format!(
            "mask column {} outside {input_dim} covariates",
            rule.column
        )));
    }
    Ok(Arc::new(Masked { inner: gamma, rule }))
}

/// Compliance learner whose fits are masked by `rule`.
pub struct MaskedCompliance {
    pub inner: Arc<dyn IvLearner>,
    pub rule: MaskRule,
}

impl IvLearner for MaskedCompliance {
    fn fit(&self, train: &IvDataset) -> Result<SharedPredictor> {
        inject_noncompliance(self.inner.fit(train)?, self.rule, train.dim())
    }
}

/// Intercept, the nine covariates, then their 36 pairwise products.
pub fn build_phi_interactions(input_dim: usize) -> Result<FeatureMap> {
    if input_dim != COVARIATES.len() {
        return Err(Error::invalid(format!(
            "interaction map needs 9 covariates, got {input_dim}"
        )));
    }
    Ok(FeatureMap::PairwiseInteractions { input_dim })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurveyConfig {
    pub trim_fraction: f64,
    pub folds: usize,
    pub lasso_alpha: f64,
    pub clip: f64,
    pub mask: Option<MaskRule>,
    /// Covariate grid: age and income are fixed, binaries are 0 except marital status.
    pub grid_age: f64,
    pub grid_inc: f64,
    /// `None` uses the sample median family size.
    pub grid_fsize: Option<f64>,
    pub seed: u64,
}

impl Default for SurveyConfig {
    fn default() -> Self {
        SurveyConfig {
            trim_fraction: 0.025,
            folds: 5,
            lasso_alpha: 0.07,
            clip: 0.1,
            mask: Some(MaskRule::education_below_12()),
            grid_age: 40.0,
            grid_inc: 30_000.0,
            grid_fsize: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyGridRow {
    pub educ: f64,
    pub marr: u8,
    pub tau_obs: f64,
    pub tau_iv: f64,
    pub tau: f64,
    pub masked: bool,
}

pub struct SurveyFit {
    pub trimmed_rows: usize,
    pub obs_rows: usize,
    pub iv_rows: usize,
    pub masked_fraction: f64,
    pub grid: Vec<SurveyGridRow>,
    pub cate: CorrectedCate,
    pub theta: Vec<f64>,
}

pub fn run_survey(data: &Survey401k, cfg: &SurveyConfig) -> Result<SurveyFit> {
    let root = RngStream::new(cfg.seed, 401);
    let trimmed = trim_outcome(data, cfg.trim_fraction)?;
    let (o, e) = split_oe(&trimmed, root.child(0))?;
    let params = ForestParams::survey(root.child(1));

    let tau_obs: SharedPredictor = Arc::new(fit_tau_obs_tlearner(&o, &params)?);
    let tau_iv = fit_iv_ratio_cate(
        &e,
        &params.with_seed(root.child(2)),
        &params.with_seed(root.child(3)),
        cfg.clip,
    )?;

    let base: Arc<dyn IvLearner> = Arc::new(ForestCompliance(params.with_seed(root.child(4))));
    let compliance: Arc<dyn IvLearner> = match cfg.mask {
        Some(rule) => Arc::new(MaskedCompliance { inner: base, rule }),
        None => base,
    };
    let learners = NuisanceLearners {
        compliance,
        propensity: Arc::new(PropensityLearner::forest(params.with_seed(root.child(5)))),
    };
    let phi: Arc<dyn Featurizer> = Arc::new(build_phi_interactions(e.dim())?);
    let pcfg = ParametricConfig {
        folds: cfg.folds,
        penalty: Penalty::L1 {
            alpha: cfg.lasso_alpha,
        },
        unpenalized_column: Some(0),
    };
    let fit = fit_parametric_bias(tau_obs.clone(), &e, phi, &learners, &pcfg)?;

    let masked_fraction = match cfg.mask {
        Some(rule) => {
            (0..trimmed.len())
                .filter(|&i| rule.matches(&trimmed.x.row(i)))
                .count() as f64
                / trimmed.len() as f64
        }
        None => 0.0,
    };
    let fsize = cfg.grid_fsize.unwrap_or_else(|| {
        let mut f = trimmed.x.col(3).to_vec();
        f.sort_by(f64::total_cmp);
        quantile_type7(&f, 0.5)
    });
    let educ = trimmed.x.col(EDUC);
    let lo = educ.iter().copied().fold(f64::INFINITY, f64::min).ceil() as i64;
    let hi = educ
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        .floor() as i64;
    let mut grid = Vec::new();
    for marr in [0u8, 1] {
        for ed in lo..=hi {
            let x = [
                cfg.grid_age,
                cfg.grid_inc,
                ed as f64,
                fsize,
                marr as f64,
                0.0,
                0.0,
                0.0,
                0.0,
            ];
            grid.push(SurveyGridRow {
                educ: ed as f64,
                marr,
                tau_obs: tau_obs.predict(&x),
                tau_iv: tau_iv.predict(&x),
                tau: fit.cate.predict(&x),
                masked: cfg.mask.is_some_and(|r| r.matches(&x)),
            });
        }
    }
    Ok(SurveyFit {
        trimmed_rows: trimmed.len(),
        obs_rows: o.len(),
        iv_rows: e.len(),
        masked_fraction,
        grid,
        theta: fit.bias.theta.clone(),
        cate: fit.cate,
    })
}

/// One `(educ, marr, estimator)` cell averaged over random splits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurveyCurveRow {
    pub educ: f64,
    pub marr: u8,
    pub estimator: &'static str,
    pub mean: f64,
    pub sd: f64,
    pub masked: bool,
}

/// Runs the pipeline once per split seed `cfg.seed, cfg.seed + 1, ...`.
pub fn run_survey_splits(
    data: &Survey401k,
    cfg: &SurveyConfig,
    splits: usize,
) -> Result<Vec<SurveyFit>> {
    if splits == 0 {
        return Err(Error::invalid("splits must be >= 1"));
    }
    (0..splits as u64)
        .map(|s| {
            let c = SurveyConfig {
                seed: cfg.seed.wrapping_add(s),
                ..cfg.clone()
            };
            run_survey(data, &c)
        })
        .collect()
}

pub fn summarize_splits(fits: &[SurveyFit]) -> Vec<SurveyCurveRow> {
    let mut out = Vec::new();
    let Some(first) = fits.first() else {
        return out;
    };
    for (name, pick) in [
        (
            "tau_obs",
            (|g: &SurveyGridRow| g.tau_obs) as fn(&SurveyGridRow) -> f64,
        ),
        ("tau_iv", |g: &SurveyGridRow| g.tau_iv),
        ("tau", |g: &SurveyGridRow| g.tau),
    ] {
        for (j, cell) in first.grid.iter().enumerate() {
            let vals: Vec<f64> = fits.iter().map(|f| pick(&f.grid[j])).collect();
            let (mean, sd) = crate::bench::mean_sd(&vals);
            out.push(SurveyCurveRow {
                educ: cell.educ,
                marr: cell.marr,
                estimator: name,
                mean,
                sd,
                masked: cell.masked,
            });
        }
    }
    out
}

/// Writes `curves.csv` with columns `educ,marr,estimator,mean,sd,masked`.
pub fn emit_survey(rows: &[SurveyCurveRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut body = String::from("educ,marr,estimator,mean,sd,masked\n");
    for r in rows {
        body.push_str(&format!(
            "{},{},{},{},{},{}\n",
            crate::tabular::fmt_num(r.educ),
            r.marr,
            r.estimator,
            crate::tabular::fmt_num(r.mean),
            crate::tabular::fmt_num(r.sd),
            r.masked as u8
        ));
    }
    let path = dir.join("curves.csv");
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

/// Schema-compatible synthetic sample with one-sided compliance, for smoke tests.
pub fn synthetic_survey(n: usize, stream: RngStream) -> Result<Survey401k> {
    let mut rng = stream.rng();
    let mut cols: Vec<Vec<f64>> = (0..9).map(|_| Vec::with_capacity(n)).collect();
    let (mut e401, mut p401, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let age = rng.random_range(25..=64) as f64;
        let educ = rng.random_range(4..=18) as f64;
        let z: f64 = rng.sample(StandardNormal);
        let inc = (10_000.0 + 2_500.0 * (educ - 4.0) + 8_000.0 * z).max(0.0);
        let fsize = rng.random_range(1..=6) as f64;
        let marr = rng.random_bool(0.6) as u8;
        let twoearn = (marr == 1 && rng.random_bool(0.5)) as u8;
        let db = rng.random_bool(0.3) as u8;
        let pira = rng.random_bool(0.25) as u8;
        let hown = rng.random_bool(0.6) as u8;
        let elig = rng.random_bool((0.2 + inc / 150_000.0).min(0.8)) as u8;
        let part = (elig == 1 && rng.random_bool(0.7)) as u8;
        let noise: f64 = rng.sample(StandardNormal);
        let outcome = -5_000.0
            + 0.3 * inc
            + 200.0 * (age - 25.0)
            + 10_000.0 * pira as f64
            + part as f64 * (5_000.0 + 400.0 * educ)
            + 15_000.0 * noise;
        for (c, v) in cols.iter_mut().zip([
            age,
            inc,
            educ,
            fsize,
            marr as f64,
            twoearn as f64,
            db as f64,
            pira as f64,
            hown as f64,
        ]) {
            c.push(v);
        }
        e401.push(elig);
        p401.push(part);
        y.push(outcome);
    }
    Survey401k::new(Covariates::from_columns(cols)?, e401, p401, y)
}

/// Writes a survey with the canonical header.
pub fn write_survey_csv(data: &Survey401k, path: &Path) -> Result<()> {
    let mut header: Vec<String> = COVARIATES.iter().map(|s| s.to_string()).collect();
    header.extend(["e401", "p401", "net_tfa"].map(String::from));
    let rows = (0..data.len()).map(|i| {
        let mut r = data.x.row(i);
        r.extend([data.e401[i] as f64, data.p401[i] as f64, data.net_tfa[i]]);
        r
    });
    crate::tabular::write_table(path, &header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn type7_matches_hand_values() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_type7(&v, 0.0), 1.0);
        assert_eq!(quantile_type7(&v, 0.5), 3.0);
        assert_eq!(quantile_type7(&v, 0.1), 1.4);
        assert_eq!(quantile_type7(&v, 1.0), 5.0);
    }

    #[test]
    fn trim_keeps_rows_within_bounds() {
        let s = synthetic_survey(1000, RngStream::new(1, 1)).unwrap();
        let t = trim_outcome(&s, 0.025).unwrap();
        let (lo, hi) = trim_bounds(&s.net_tfa, 0.025);
        assert!(t.net_tfa.iter().all(|&v| v >= lo && v <= hi));
        // h = 999 * 0.025 = 24.975: sorted rows 0..=24 fall below the lower cut, 975..=999 above the upper.
        assert_eq!(t.len(), 1000 - 2 * 25);
        assert_eq!(trim_outcome(&s, 0.0).unwrap(), s);
        assert!(trim_outcome(&s, 0.5).is_err());
    }

    #[test]
    fn canonical_row_count_rule() {
        // With 9915 distinct outcomes, h = 9914 * 0.025 = 247.85, so rows 1..=248
        // (0-based 0..=247) fall strictly below the lower cut.
        let v: Vec<f64> = (0..9915).map(|i| i as f64).collect();
        let (lo, hi) = trim_bounds(&v, 0.025);
        let kept = v.iter().filter(|&&x| x >= lo && x <= hi).count();
        assert_eq!(kept, 9419);
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let (a, b) = split_indices(9419, RngStream::new(3, 0)).unwrap();
        assert_eq!((a.len(), b.len()), (4710, 4709));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..9419).collect::<Vec<_>>());
        assert_eq!(split_indices(9419, RngStream::new(3, 0)).unwrap(), (a, b));
        assert!(split_indices(1, RngStream::new(3, 0)).is_err());
    }

    #[test]
    fn mask_boundary() {
        let g = inject_noncompliance(
            Arc::new(crate::learners::Constant(0.7)),
            MaskRule::education_below_12(),
            9,
        )
        .unwrap();
        let mut x = vec![0.0; 9];
        x[EDUC] = 10.0;
        assert_eq!(g.predict(&x), 0.0);
        x[EDUC] = 12.0;
        assert_eq!(g.predict(&x), 0.7);
        assert!(inject_noncompliance(
            Arc::new(crate::learners::Constant(0.7)),
            MaskRule {
                column: 9,
                below: 1.0
            },
            9
        )
        .is_err());
    }

    #[test]
    fn interaction_map() {
        let m = build_phi_interactions(9).unwrap();
        assert_eq!(m.dim(), 46);
        let f = m.eval(&[0.0; 9]);
        assert_eq!(f[0], 1.0);
        assert!(f[1..].iter().all(|&v| v == 0.0));
        let x = [40.0, 30_000.0, 12.0, 2.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let names = m.names(&COVARIATES.map(String::from));
        let ai = names.iter().position(|n| n == "age*inc").unwrap();
        assert_eq!(ai, 10);
        assert_eq!(m.eval(&x)[ai], 40.0 * 30_000.0);
        assert!(build_phi_interactions(8).is_err());
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        p
    }

    #[test]
    fn loader_errors_and_aliases() {
        let dir = tempfile::tempdir().unwrap();
        let head = "age,inc,educ,fsize,marr,two_earn,db,pira,hown,e401,p401,net_tfa\n";
        let ok = write(
            dir.path(),
            "ok.csv",
            &format!("{head}30,20000,12,2,1,0,0,1,1,1,1,500\n40,10000,9,3,0,0,0,0,0,0,0,-20\n"),
        );
        let s = load_401k(&ok).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.x.get(1, EDUC), 9.0);

        let bad = write(
            dir.path(),
            "bad.csv",
            &format!("{head}30,20000,12,2,1,0,0,1,1,0,1,500\n"),
        );
        let err = load_401k(&bad).unwrap_err().to_string();
        assert!(err.contains("rows 1"), "{err}");

        let empty = write(dir.path(), "empty.csv", "");
        assert!(matches!(load_401k(&empty), Err(Error::Load { .. })));
        let header_only = write(dir.path(), "h.csv", head);
        assert!(matches!(load_401k(&header_only), Err(Error::Load { .. })));
        let missing = write(dir.path(), "m.csv", "age,inc\n1,2\n");
        assert!(load_401k(&missing)
            .unwrap_err()
            .to_string()
            .contains("educ"));
        let nonbinary = write(
            dir.path(),
            "nb.csv",
            &format!("{head}30,20000,12,2,2,0,0,1,1,1,1,500\n"),
        );
        assert!(load_401k(&nonbinary).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = synthetic_survey(50, RngStream::new(2, 2)).unwrap();
        let p = dir.path().join("s.csv");
        write_survey_csv(&s, &p).unwrap();
        assert_eq!(load_401k(&p).unwrap(), s);
    }
}
