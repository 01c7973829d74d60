//! Synthetic data-generating processes with closed-form effect oracles.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::{Covariates, IvDataset, ObsDataset, RngStream};

/// Standard deviation of the confounder around its mean.
const U_SD: f64 = 0.866_025_403_784_438_6; // sqrt(0.75)
const EPS_SCALE: f64 = 0.5;

fn one() -> f64 {
    1.0
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DgpSpec {
    /// One standard-normal covariate; bias `-confounding * x`.
    Scalar {
        #[serde(default = "one")]
        confounding: f64,
    },
    /// `dim` covariates; bias `-confounding * gamma^T x`.
    HighDim {
        dim: usize,
        beta: Vec<f64>,
        gamma: Vec<f64>,
        #[serde(default = "one")]
        confounding: f64,
    },
}

impl DgpSpec {
    pub fn scalar() -> Self {
        DgpSpec::Scalar { confounding: 1.0 }
    }

    /// Draws `beta` and `gamma` uniformly from `[-1, 1]^dim`.
    pub fn highdim(dim: usize, stream: RngStream) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("high-dimensional DGP needs dim >= 1"));
        }
        let mut rng = stream.rng();
        let beta = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let gamma = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Ok(DgpSpec::HighDim {
            dim,
            beta,
            gamma,
            confounding: 1.0,
        })
    }

    pub fn with_confounding(mut self, scale: f64) -> Self {
        match &mut self {
            DgpSpec::Scalar { confounding } | DgpSpec::HighDim { confounding, .. } => {
                *confounding = scale
            }
        }
        self
    }

    pub fn dim(&self) -> usize {
        match self {
            DgpSpec::Scalar { .. } => 1,
            DgpSpec::HighDim { dim, .. } => *dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DgpSpec::Scalar { confounding } => check_finite(*confounding),
            DgpSpec::HighDim {
                dim,
                beta,
                gamma,
                confounding,
            } => {
                if *dim == 0 {
                    return Err(Error::invalid("high-dimensional DGP needs dim >= 1"));
                }
                if beta.len() != *dim || gamma.len() != *dim {
                    return Err(Error::invalid(format!(
                        "coefficient lengths {} and {} do not match dim {dim}",
                        beta.len(),
                        gamma.len()
                    )));
                }
                if beta.iter().chain(gamma).any(|c| !c.is_finite()) {
                    return Err(Error::invalid("coefficients must be finite"));
                }
                check_finite(*confounding)
            }
        }
    }

    pub fn oracle(&self) -> OracleSet {
        OracleSet { spec: self.clone() }
    }

    /// Baseline and effect parts of the outcome, excluding `U` and noise.
    fn structural(&self, x: &[f64], a: f64) -> f64 {
        match self {
            DgpSpec::Scalar { .. } => {
                let v = x[0];
                1.0 + a + v + 2.0 * a * v + 0.5 * v * v + 0.75 * a * v * v
            }
            DgpSpec::HighDim { beta, .. } => {
                let sum: f64 = x.iter().sum();
                let x1 = x[0];
                1.0 + a + sum + 2.0 * a * dot(beta, x) + 0.5 * x1 * x1 + 0.75 * a * x1 * x1
            }
        }
    }

    /// Confounding index `s(x)`; the confounder mean is `s(x) (a - 0.5)`.
    fn confounder_index(&self, x: &[f64]) -> f64 {
        match self {
            DgpSpec::Scalar { confounding } => confounding * x[0],
            DgpSpec::HighDim {
                gamma, confounding, ..
            } => confounding * dot(gamma, x),
        }
    }

    fn compliance_index(&self, x: &[f64]) -> f64 {
        2.0 * x[0]
    }
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("confounding scale must be finite"))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Closed-form effect functions of a [`DgpSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSet {
    spec: DgpSpec,
}

impl OracleSet {
    pub fn spec(&self) -> &DgpSpec {
        &self.spec
    }

    pub fn tau(&self, x: &[f64]) -> f64 {
        self.spec.structural(x, 1.0) - self.spec.structural(x, 0.0)
    }

    pub fn tau_obs(&self, x: &[f64]) -> f64 {
        self.tau(x) - self.bias(x)
    }

    pub fn bias(&self, x: &[f64]) -> f64 {
        -self.spec.confounder_index(x)
    }

    pub fn gamma(&self, x: &[f64]) -> f64 {
        sigmoid(self.spec.compliance_index(x))
    }
}

fn draw_x(spec: &DgpSpec, n: usize, stream: RngStream) -> Covariates {
    let d = spec.dim();
    let mut rng = stream.child(0).rng();
    let mut data = vec![0.0; n * d];
    // Row-major draw order, so a row's values do not depend on d's column layout.
    for i in 0..n {
        for j in 0..d {
            data[j * n + i] = rng.sample(StandardNormal);
        }
    }
    Covariates::from_col_major(n, d, data).expect("normal draws are finite")
}

fn check_n(spec: &DgpSpec, n: usize) -> Result<()> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("sample size must be >= 1"));
    }
    Ok(())
}

pub fn gen_obs(spec: &DgpSpec, n: usize, stream: RngStream) -> Result<ObsDataset> {
    check_n(spec, n)?;
    let x = draw_x(spec, n, stream);
    let mut rng = stream.child(1).rng();
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut row = Vec::new();
    for i in 0..n {
        x.row_into(i, &mut row);
        let ai: u8 = rng.random_bool(0.5) as u8;
        let af = ai as f64;
        let mean = spec.confounder_index(&row) * (af - 0.5);
        let u = Normal::new(mean, U_SD).expect("valid sd").sample(&mut rng);
        let eps: f64 = rng.sample(StandardNormal);
        a.push(ai);
        y.push(spec.structural(&row, af) + u + EPS_SCALE * eps);
    }
    ObsDataset::new(x, a, y)
}

pub fn gen_iv(spec: &DgpSpec, n: usize, stream: RngStream) -> Result<IvDataset> {
    gen_iv_with_compliers(spec, n, stream).map(|(e, _)| e)
}

/// Like [`gen_iv`], also returning the latent complier indicator `C`.
pub fn gen_iv_with_compliers(
    spec: &DgpSpec,
    n: usize,
    stream: RngStream,
) -> Result<(IvDataset, Vec<bool>)> {
    check_n(spec, n)?;
    let x = draw_x(spec, n, stream);
    let mut rng = stream.child(2).rng();
    let (mut z, mut a, mut y) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let mut compliers = Vec::with_capacity(n);
    let mut row = Vec::new();
    for i in 0..n {
        x.row_into(i, &mut row);
        let zi = rng.random_bool(0.5) as u8;
        let a_star = rng.random_bool(0.5) as u8;
        let complier = rng.random_bool(sigmoid(spec.compliance_index(&row)));
        let ai = if complier { zi } else { a_star };
        let af = ai as f64;
        let u = if complier {
            rng.sample::<f64, _>(StandardNormal)
        } else {
            let mean = spec.confounder_index(&row) * (af - 0.5);
            Normal::new(mean, U_SD).expect("valid sd").sample(&mut rng)
        };
        let eps: f64 = rng.sample(StandardNormal);
        z.push(zi);
        a.push(ai);
        y.push(spec.structural(&row, af) + u + EPS_SCALE * eps);
        compliers.push(complier);
    }
    Ok((IvDataset::new(x, z, a, y)?, compliers))
}
