//! Basis functions for the bias correction.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::ReprNet;

/// A map from a covariate row to a fixed-length feature vector.
pub trait Featurizer: Send + Sync {
    fn input_dim(&self) -> usize;
    fn dim(&self) -> usize;
    /// Overwrites `out` with the features of `x`.
    fn eval_into(&self, x: &[f64], out: &mut Vec<f64>);

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        self.eval_into(x, &mut out);
        out
    }
}

/// A monomial `prod_j x_j^p_j`; no factors means the constant 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub factors: Vec<(usize, u32)>,
}

impl Term {
    pub fn constant() -> Self {
        Term {
            factors: Vec::new(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.factors
            .iter()
            .map(|&(j, p)| x[j].powi(p as i32))
            .product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    /// `[1, x_1, ..., x_d]`.
    IdentityWithIntercept {
        input_dim: usize,
    },
    /// `[x_1, ..., x_d]`.
    Raw {
        input_dim: usize,
    },
    /// Optional intercept, then `x_j, x_j^2, ..., x_j^degree` for each coordinate in turn.
    Polynomial {
        input_dim: usize,
        degree: u32,
        intercept: bool,
    },
    /// `[1, x_1..x_d, x_i x_j for i < j]` in lexicographic pair order.
    PairwiseInteractions {
        input_dim: usize,
    },
    Custom {
        input_dim: usize,
        terms: Vec<Term>,
    },
}

impl FeatureMap {
    pub fn validate(&self) -> Result<()> {
        let d = self.input_dim();
        if d == 0 {
            return Err(Error::invalid(
                "feature map needs at least one input column",
            ));
        }
        match self {
            FeatureMap::Polynomial {
                degree, intercept, ..
            } if *degree == 0 && !intercept => Err(Error::invalid(
                "polynomial map with degree 0 and no intercept is empty",
            )),
            FeatureMap::Custom { terms, .. } => {
                if terms.is_empty() {
                    return Err(Error::invalid("custom feature map has no terms"));
                }
                for t in terms {
                    if let Some(&(j, _)) = t.factors.iter().find(|(j, _)| *j >= d) {
                        return Err(Error::invalid(format!("term references column {j} of {d}")));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Feature names given covariate names.
    pub fn names(&self, cols: &[String]) -> Vec<String> {
        let mono = |t: &Term| -> String {
            if t.factors.is_empty() {
                return "1".to_string();
            }
            t.factors
                .iter()
                .map(|&(j, p)| {
                    if p == 1 {
                        cols[j].clone()
                    } else {
                        format!("{}^{p}", cols[j])
                    }
                })
                .collect::<Vec<_>>()
                .join("*")
        };
        self.terms().iter().map(mono).collect()
    }

    /// The map written as monomials.
    pub fn terms(&self) -> Vec<Term> {
        let d = self.input_dim();
        let single = |j: usize, p: u32| Term {
            factors: vec![(j, p)],
        };
        match self {
            FeatureMap::IdentityWithIntercept { .. } => std::iter::once(Term::constant())
                .chain((0..d).map(|j| single(j, 1)))
                .collect(),
            FeatureMap::Raw { .. } => (0..d).map(|j| single(j, 1)).collect(),
            FeatureMap::Polynomial {
                degree, intercept, ..
            } => {
                let mut out = Vec::new();
                if *intercept {
                    out.push(Term::constant());
                }
                for j in 0..d {
                    for p in 1..=*degree {
                        out.push(single(j, p));
                    }
                }
                out
            }
            FeatureMap::PairwiseInteractions { .. } => {
                let mut out = vec![Term::constant()];
                out.extend((0..d).map(|j| single(j, 1)));
                for i in 0..d {
                    for j in i + 1..d {
                        out.push(Term {
                            factors: vec![(i, 1), (j, 1)],
                        });
                    }
                }
                out
            }
            FeatureMap::Custom { terms, .. } => terms.clone(),
        }
    }
}

impl Featurizer for FeatureMap {
    fn input_dim(&self) -> usize {
        match self {
            FeatureMap::IdentityWithIntercept { input_dim }
            | FeatureMap::Raw { input_dim }
            | FeatureMap::Polynomial { input_dim, .. }
            | FeatureMap::PairwiseInteractions { input_dim }
            | FeatureMap::Custom { input_dim, .. } => *input_dim,
        }
    }

    fn dim(&self) -> usize {
        let d = self.input_dim();
        match self {
            FeatureMap::IdentityWithIntercept { .. } => d + 1,
            FeatureMap::Raw { .. } => d,
            FeatureMap::Polynomial {
                degree, intercept, ..
            } => d * *degree as usize + *intercept as usize,
            FeatureMap::PairwiseInteractions { .. } => 1 + d + d * (d - 1) / 2,
            FeatureMap::Custom { terms, .. } => terms.len(),
        }
    }

    fn eval_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match self {
            FeatureMap::IdentityWithIntercept { .. } => {
                out.push(1.0);
                out.extend_from_slice(x);
            }
            FeatureMap::Raw { .. } => out.extend_from_slice(x),
            FeatureMap::Polynomial {
                degree, intercept, ..
            } => {
                if *intercept {
                    out.push(1.0);
                }
                for &v in x {
                    let mut p = 1.0;
                    for _ in 0..*degree {
                        p *= v;
                        out.push(p);
                    }
                }
            }
            FeatureMap::PairwiseInteractions { .. } => {
                out.push(1.0);
                out.extend_from_slice(x);
                for i in 0..x.len() {
                    for j in i + 1..x.len() {
                        out.push(x[i] * x[j]);
                    }
                }
            }
            FeatureMap::Custom { terms, .. } => out.extend(terms.iter().map(|t| t.eval(x))),
        }
    }
}

/// The learned representation `[trunk(x), 1]` of a trained network.
#[derive(Clone)]
pub struct ReprFeatures(pub Arc<ReprNet>);

impl Featurizer for ReprFeatures {
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    fn dim(&self) -> usize {
        self.0.feature_dim()
    }

    fn eval_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.0.representation(x));
    }
}

/// Wraps a closure and its declared dimensions.
pub struct FnFeaturizer<F> {
    pub input_dim: usize,
    pub dim: usize,
    pub f: F,
}

impl<F> Featurizer for FnFeaturizer<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend((self.f)(x));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_and_polynomial() {
        let m = FeatureMap::IdentityWithIntercept { input_dim: 2 };
        assert_eq!(m.eval(&[3.0, -1.0]), vec![1.0, 3.0, -1.0]);
        let p = FeatureMap::Polynomial {
            input_dim: 1,
            degree: 2,
            intercept: false,
        };
        assert_eq!(p.eval(&[3.0]), vec![3.0, 9.0]);
        assert_eq!(p.dim(), 2);
    }

    #[test]
    fn pairwise_has_46_features_for_nine_inputs() {
        let m = FeatureMap::PairwiseInteractions { input_dim: 9 };
        assert_eq!(m.dim(), 46);
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let f = m.eval(&x);
        assert_eq!(f.len(), 46);
        assert_eq!(f[0], 1.0);
        assert_eq!(f[10], 2.0);
        assert_eq!(f[45], 72.0);
    }

    #[test]
    fn validation() {
        assert!(FeatureMap::Raw { input_dim: 0 }.validate().is_err());
        let bad = FeatureMap::Custom {
            input_dim: 2,
            terms: vec![Term {
                factors: vec![(2, 1)],
            }],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn names_follow_terms() {
        let m = FeatureMap::PairwiseInteractions { input_dim: 2 };
        let names = m.names(&["a".into(), "b".into()]);
        assert_eq!(names, vec!["1", "a", "b", "a*b"]);
    }

    fn maps(d: usize) -> Vec<FeatureMap> {
        vec![
            FeatureMap::IdentityWithIntercept { input_dim: d },
            FeatureMap::Raw { input_dim: d },
            FeatureMap::Polynomial {
                input_dim: d,
                degree: 3,
                intercept: true,
            },
            FeatureMap::PairwiseInteractions { input_dim: d },
        ]
    }

    proptest! {
        #[test]
        fn closed_form_matches_terms(x in prop::collection::vec(-3.0f64..3.0, 1..6)) {
            for m in maps(x.len()) {
                let direct = m.eval(&x);
                let via_terms: Vec<f64> = m.terms().iter().map(|t| t.eval(&x)).collect();
                prop_assert_eq!(direct.len(), m.dim());
                for (a, b) in direct.iter().zip(&via_terms) {
                    prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
                }
            }
        }
    }
}
