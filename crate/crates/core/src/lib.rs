//! LoRA viewed as a mixture of experts: a gated regression model with
//! low-rank expert deltas, four ways of parameterizing those deltas,
//! least-squares estimation, Voronoi losses between mixing measures, and
//! the attention layer the model is read off from.

pub mod attention_moe;
pub mod error;
pub mod estimation;
pub mod moe_regression;
pub mod numerics;
pub mod parameterization;
pub mod voronoi_metrics;

pub use error::{Error, Result};
pub use estimation::{fit, FitOptions, FitResult, InitMode, LsProblem};
pub use moe_regression::{
    gate_weights, gen_dataset, l2_mu_distance, regression_fn, Dataset, ExpertAtom, FixedBackbone, InputDist,
    MixingMeasure,
};
pub use numerics::{mat_mul, softmax_logits, Mat, RngStream};
pub use parameterization::{Activation, Family, FamilyParams, FamilySpec};
pub use voronoi_metrics::{family_loss, loss_d1, loss_d2, loss_d3, ppt, LossReport};
