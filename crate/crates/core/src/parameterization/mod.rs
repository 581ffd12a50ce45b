//! The four ways of producing per-expert low-rank deltas, plus
//! merge-and-discard for RepLoRA and numerical probes of the activation
//! assumptions used by the non-linear family.

mod activation;
mod assumptions;
mod free;
mod replora;
mod shared;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use activation::Activation;
pub use assumptions::{check_assumptions, check_assumptions_with, AssumptionProbe, AssumptionReport, ProbeOutcome};
pub use free::{FreeExpert, FreeLowRank};
pub use replora::{
    merge_and_discard, replora_materialize, Affine, LowRankFactors, MergedAdapter, RepLoraExpert,
    RepLoraExperts, RepLoraMlp, RepLoraNet, DEFAULT_HIDDEN,
};
pub use shared::{LinearExpert, LinearShared, NonlinearExpert, NonlinearShared};

use crate::error::{Error, Result};
use crate::moe_regression::{ExpertAtom, MixingMeasure};
use crate::numerics::{Mat, RngStream};

/// Default compact parameter box: every entry within `[-10, 10]`.
pub const DEFAULT_THETA_BOX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    FreeLowRank,
    LinearShared,
    NonlinearShared,
    #[serde(rename = "replora")]
    RepLora,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::FreeLowRank,
        Family::LinearShared,
        Family::NonlinearShared,
        Family::RepLora,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::FreeLowRank => "free_low_rank",
            Family::LinearShared => "linear_shared",
            Family::NonlinearShared => "nonlinear_shared",
            Family::RepLora => "replora",
        }
    }

    /// Gate and expert deltas are the same matrix.
    pub fn is_shared(&self) -> bool {
        matches!(self, Family::LinearShared | Family::NonlinearShared)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::arg(format!("unknown family `{s}`")))
    }
}

fn default_sigmoid() -> Activation {
    Activation::SIGMOID
}

fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}

/// Everything needed to lay out a parameter bundle of one family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub family: Family,
    pub dim: usize,
    pub rank: usize,
    pub experts: usize,
    #[serde(default = "default_sigmoid")]
    pub act1: Activation,
    #[serde(default = "default_sigmoid")]
    pub act2: Activation,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_sigmoid")]
    pub trunk_activation: Activation,
}

impl FamilySpec {
    pub fn new(family: Family, dim: usize, rank: usize, experts: usize) -> Self {
        FamilySpec {
            family,
            dim,
            rank,
            experts,
            act1: Activation::SIGMOID,
            act2: Activation::SIGMOID,
            hidden: DEFAULT_HIDDEN,
            trunk_activation: Activation::SIGMOID,
        }
    }

    pub fn with_experts(&self, experts: usize) -> Self {
        FamilySpec {
            experts,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.rank == 0 || self.experts == 0 {
            return Err(Error::arg("dim, rank and experts must all be >= 1"));
        }
        if self.rank > self.dim {
            return Err(Error::arg(format!(
                "rank {} exceeds dimension {}",
                self.rank, self.dim
            )));
        }
        if self.family == Family::RepLora && self.hidden == 0 {
            return Err(Error::arg("hidden width must be >= 1"));
        }
        Ok(())
    }

    /// Draws every entry uniformly in `[-scale, scale]` (the RepLoRA network
    /// weights are additionally divided by the square root of their fan-in).
    pub fn sample(&self, rng: &mut RngStream, scale: f64) -> Result<FamilyParams> {
        self.validate()?;
        let (d, r, l) = (self.dim, self.rank, self.experts);
        Ok(match self.family {
            Family::FreeLowRank => FamilyParams::FreeLowRank(FreeLowRank::sample(d, r, l, rng, scale)),
            Family::LinearShared => FamilyParams::LinearShared(LinearShared::sample(d, r, l, rng, scale)),
            Family::NonlinearShared => FamilyParams::NonlinearShared(NonlinearShared::sample(
                d, r, l, self.act1, self.act2, rng, scale,
            )),
            Family::RepLora => FamilyParams::RepLora(RepLoraExperts::sample(
                d,
                r,
                l,
                self.hidden,
                self.trunk_activation,
                rng,
                scale,
            )),
        })
    }
}

/// A parameter bundle of any family. Gradients use the same type and layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FamilyParams {
    FreeLowRank(FreeLowRank),
    LinearShared(LinearShared),
    NonlinearShared(NonlinearShared),
    #[serde(rename = "replora")]
    RepLora(RepLoraExperts),
}

macro_rules! dispatch {
    ($self:expr, $p:ident => $body:expr) => {
        match $self {
            FamilyParams::FreeLowRank($p) => $body,
            FamilyParams::LinearShared($p) => $body,
            FamilyParams::NonlinearShared($p) => $body,
            FamilyParams::RepLora($p) => $body,
        }
    };
}

impl FamilyParams {
    pub fn family(&self) -> Family {
        match self {
            FamilyParams::FreeLowRank(_) => Family::FreeLowRank,
            FamilyParams::LinearShared(_) => Family::LinearShared,
            FamilyParams::NonlinearShared(_) => Family::NonlinearShared,
            FamilyParams::RepLora(_) => Family::RepLora,
        }
    }

    pub fn num_experts(&self) -> usize {
        dispatch!(self, p => p.experts.len())
    }

    pub fn dim(&self) -> usize {
        dispatch!(self, p => p.dim())
    }

    pub fn rank(&self) -> usize {
        dispatch!(self, p => p.rank())
    }

    pub fn validate(&self) -> Result<()> {
        dispatch!(self, p => p.validate())
    }

    pub fn log_weight(&self, j: usize) -> f64 {
        dispatch!(self, p => p.experts[j].c)
    }

    pub fn set_log_weight(&mut self, j: usize, c: f64) {
        dispatch!(self, p => p.experts[j].c = c)
    }

    pub fn log_weights(&self) -> Vec<f64> {
        (0..self.num_experts()).map(|j| self.log_weight(j)).collect()
    }

    /// `(gate_delta, expert_delta)` of expert `j`.
    pub fn materialize(&self, j: usize) -> Result<(Mat, Mat)> {
        if j >= self.num_experts() {
            return Err(Error::arg(format!(
                "expert index {j} out of range ({} experts)",
                self.num_experts()
            )));
        }
        dispatch!(self, p => p.materialize(j))
    }

    pub fn to_measure(&self) -> Result<MixingMeasure> {
        let atoms = (0..self.num_experts())
            .map(|j| {
                let (gate_delta, expert_delta) = self.materialize(j)?;
                Ok(ExpertAtom {
                    log_weight: self.log_weight(j),
                    gate_delta,
                    expert_delta,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MixingMeasure::new(atoms, self.family())
    }

    pub fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        dispatch!(self, p => p.visit(f))
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        dispatch!(self, p => p.visit_mut(f))
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.visit(&mut |s| v.extend_from_slice(s));
        v
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::shape("assign_flat", n, flat.len()));
        }
        let mut at = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        });
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<FamilyParams> {
        let mut p = self.clone();
        p.assign_flat(flat)?;
        Ok(p)
    }

    /// Clamps every entry into `[-bound, bound]`.
    pub fn project_box(&mut self, bound: f64) {
        self.visit_mut(&mut |s| {
            for v in s.iter_mut() {
                *v = v.clamp(-bound, bound);
            }
        });
    }

    pub fn within_box(&self, bound: f64) -> bool {
        let mut ok = true;
        self.visit(&mut |s| ok &= s.iter().all(|v| v.abs() <= bound));
        ok
    }

    /// Chain rule from gradients w.r.t. the materialized quantities
    /// `(c_j, gate_delta_j, expert_delta_j)` to the family parameters.
    pub fn backprop(&self, d_c: &[f64], d_gate: &[Mat], d_expert: &[Mat]) -> Result<FamilyParams> {
        let l = self.num_experts();
        if d_c.len() != l || d_gate.len() != l || d_expert.len() != l {
            return Err(Error::shape("backprop", l, d_c.len()));
        }
        Ok(match self {
            FamilyParams::FreeLowRank(p) => FamilyParams::FreeLowRank(p.backprop(d_c, d_gate, d_expert)?),
            FamilyParams::LinearShared(p) => FamilyParams::LinearShared(p.backprop(d_c, d_gate, d_expert)?),
            FamilyParams::NonlinearShared(p) => {
                FamilyParams::NonlinearShared(p.backprop(d_c, d_gate, d_expert)?)
            }
            FamilyParams::RepLora(p) => FamilyParams::RepLora(p.backprop(d_c, d_gate, d_expert)?),
        })
    }

    /// Family-specific atom coordinates used for Voronoi assignment:
    /// free `(B_Q, A_Q, B_V, A_V)`, linear `Z`, non-linear `(W2B, W1A)`,
    /// RepLoRA the merged factors.
    pub fn atom_coordinates(&self, j: usize) -> Result<Vec<f64>> {
        Ok(match self {
            FamilyParams::FreeLowRank(p) => {
                let e = &p.experts[j];
                [&e.b_q, &e.a_q, &e.b_v, &e.a_v]
                    .iter()
                    .flat_map(|m| m.data().iter().copied())
                    .collect()
            }
            FamilyParams::LinearShared(p) => p.experts[j].z()?.into_vec(),
            FamilyParams::NonlinearShared(p) => {
                let e = &p.experts[j];
                e.w2b.data().iter().chain(e.w1a.data()).copied().collect()
            }
            FamilyParams::RepLora(p) => {
                let f = p.factors(j)?;
                [&f.b_q, &f.a_q, &f.b_v, &f.a_v]
                    .iter()
                    .flat_map(|m| m.data().iter().copied())
                    .collect()
            }
        })
    }

    /// Appends the atoms of `extra` (same family and shapes) after this
    /// bundle's atoms. For RepLoRA the network of `self` is kept.
    pub fn extend_experts(&mut self, extra: &FamilyParams) -> Result<()> {
        match (self, extra) {
            (FamilyParams::FreeLowRank(a), FamilyParams::FreeLowRank(b)) => {
                a.experts.extend(b.experts.iter().cloned())
            }
            (FamilyParams::LinearShared(a), FamilyParams::LinearShared(b)) => {
                a.experts.extend(b.experts.iter().cloned())
            }
            (FamilyParams::NonlinearShared(a), FamilyParams::NonlinearShared(b)) => {
                a.experts.extend(b.experts.iter().cloned())
            }
            (FamilyParams::RepLora(a), FamilyParams::RepLora(b)) => {
                a.experts.extend(b.experts.iter().cloned())
            }
            _ => return Err(Error::arg("cannot mix atoms of different families")),
        }
        Ok(())
    }

    pub fn permute_experts(&self, order: &[usize]) -> FamilyParams {
        let mut p = self.clone();
        dispatch!(&mut p, q => {
            let src = q.experts.clone();
            q.experts = order.iter().map(|&i| src[i].clone()).collect();
        });
        p
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: FamilyParams = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

/// `(gate_delta, expert_delta)` of expert `j` of any family.
pub fn materialize(p: &FamilyParams, j: usize) -> Result<(Mat, Mat)> {
    p.materialize(j)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_with_zero_b_q_has_zero_gate() {
        let mut rng = RngStream::new(1, 0);
        let mut p = FreeLowRank::sample(3, 2, 1, &mut rng, 1.0);
        p.experts[0].b_q = Mat::zeros(3, 2);
        let (gate, expert) = FamilyParams::FreeLowRank(p).materialize(0).unwrap();
        assert_eq!(gate, Mat::zeros(3, 3));
        assert!(expert.frobenius_norm() > 0.0);
    }

    #[test]
    fn linear_identity_chain_is_identity() {
        let e = LinearExpert {
            c: 0.0,
            w2: Mat::identity(3),
            b: Mat::identity(3),
            w1: Mat::identity(3),
            a: Mat::identity(3),
        };
        let p = FamilyParams::LinearShared(LinearShared::new(vec![e]).unwrap());
        let (g, x) = p.materialize(0).unwrap();
        assert_eq!(g, Mat::identity(3));
        assert_eq!(x, Mat::identity(3));
    }

    #[test]
    fn nonlinear_sigmoid_at_zero_is_quarter_ones() {
        let e = NonlinearExpert {
            c: 0.0,
            w2b: Mat::zeros(2, 1),
            w1a: Mat::zeros(1, 2),
        };
        let p = NonlinearShared::new(Activation::SIGMOID, Activation::SIGMOID, vec![e]).unwrap();
        let (g, x) = FamilyParams::NonlinearShared(p).materialize(0).unwrap();
        assert_eq!(g, Mat::filled(2, 2, 0.25));
        assert_eq!(g, x);
    }

    #[test]
    fn shape_errors_are_reported() {
        let bad = FreeExpert {
            c: 0.0,
            b_q: Mat::zeros(3, 2),
            a_q: Mat::zeros(3, 3),
            b_v: Mat::zeros(3, 2),
            a_v: Mat::zeros(2, 3),
        };
        assert!(matches!(FreeLowRank::new(vec![bad]), Err(Error::Shape { .. })));
        assert!(matches!(
            FamilySpec::new(Family::LinearShared, 2, 3, 1).validate(),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn unknown_activation_in_json_is_rejected() {
        let json = r#"{"family":"nonlinear_shared","act1":"swishy","act2":"sigmoid",
            "experts":[{"c":0.0,"w2b":{"rows":1,"cols":1,"data":[0.0]},
            "w1a":{"rows":1,"cols":1,"data":[0.0]}}]}"#;
        assert!(FamilyParams::from_json(json).is_err());
    }

    #[test]
    fn free_materialization_has_rank_at_most_r() {
        let mut rng = RngStream::new(8, 3);
        for _ in 0..20 {
            let p = FamilySpec::new(Family::FreeLowRank, 5, 2, 3)
                .sample(&mut rng, 1.0)
                .unwrap();
            for j in 0..3 {
                let (g, e) = p.materialize(j).unwrap();
                for m in [g, e] {
                    let sv = m.singular_values();
                    assert!(sv[2..].iter().all(|&s| s < 1e-10), "{sv:?}");
                }
            }
        }
    }

    #[test]
    fn shared_families_have_equal_deltas() {
        let mut rng = RngStream::new(2, 9);
        for fam in [Family::LinearShared, Family::NonlinearShared] {
            let p = FamilySpec::new(fam, 3, 2, 4).sample(&mut rng, 2.0).unwrap();
            for j in 0..4 {
                let (g, e) = p.materialize(j).unwrap();
                assert_eq!(g, e);
            }
        }
    }

    #[test]
    fn json_roundtrip_every_family() {
        let mut rng = RngStream::new(4, 4);
        for fam in Family::ALL {
            let mut spec = FamilySpec::new(fam, 3, 2, 2);
            spec.hidden = 5;
            let p = spec.sample(&mut rng, 1.0).unwrap();
            let json = p.to_json().unwrap();
            assert!(json.contains(&format!("\"family\": \"{}\"", fam.as_str())));
            assert_eq!(FamilyParams::from_json(&json).unwrap(), p);
        }
    }

    #[test]
    fn flat_roundtrip_and_projection() {
        let mut rng = RngStream::new(6, 1);
        let p = FamilySpec::new(Family::LinearShared, 2, 1, 2)
            .sample(&mut rng, 30.0)
            .unwrap();
        let flat = p.flatten();
        assert_eq!(p.with_flat(&flat).unwrap(), p);
        let mut q = p.clone();
        q.project_box(DEFAULT_THETA_BOX);
        assert!(q.within_box(DEFAULT_THETA_BOX));
        assert!(!p.within_box(DEFAULT_THETA_BOX));
    }
}
