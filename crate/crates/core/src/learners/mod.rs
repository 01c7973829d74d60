//! Base learners used as nuisance estimators.

pub mod forest;
pub mod linear;
pub mod net;

use std::sync::Arc;

pub use forest::{fit_forest, ForestMode, ForestModel, ForestParams, MaxFeatures};
pub use linear::{fit_linear, LinearModel, LinearRegression, Penalty};
pub use net::{fit_repr_net, HeadMode, NetConfig, ReprNet};

/// A fitted real-valued function of a covariate row.
pub trait Predictor: Send + Sync {
    fn predict(&self, x: &[f64]) -> f64;
}

pub type SharedPredictor = Arc<dyn Predictor>;

impl Predictor for ForestModel {
    fn predict(&self, x: &[f64]) -> f64 {
        ForestModel::predict(self, x)
    }
}

impl<P: Predictor + ?Sized> Predictor for Arc<P> {
    fn predict(&self, x: &[f64]) -> f64 {
        (**self).predict(x)
    }
}

/// Wraps a closure as a [`Predictor`].
pub struct FnPredictor<F>(pub F);

impl<F> Predictor for FnPredictor<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn predict(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

pub fn predictor_fn<F>(f: F) -> SharedPredictor
where
    F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
{
    Arc::new(FnPredictor(f))
}

/// Always returns the same value.
#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl Predictor for Constant {
    fn predict(&self, _x: &[f64]) -> f64 {
        self.0
    }
}
