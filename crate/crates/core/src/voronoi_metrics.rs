//! Voronoi cells of fitted atoms around true atoms, the Voronoi losses
//! `D1_r`, `D2`, `D3`, and the PPT score.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe_regression::{l2_mu_distance, FixedBackbone, InputDist};
use crate::numerics::Mat;
use crate::parameterization::{Family, FamilyParams};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoronoiAssignment {
    /// True-atom index of every fitted atom.
    pub cell_of: Vec<usize>,
    /// Fitted indices of every true atom, ascending.
    pub cells: Vec<Vec<usize>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest-neighbour assignment on arbitrary coordinate vectors; ties go to
/// the smallest true index.
pub fn assign_coordinates(fitted: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<VoronoiAssignment> {
    if truth.is_empty() {
        return Err(Error::arg("truth must have at least one atom"));
    }
    let dim = truth[0].len();
    if let Some(bad) = fitted.iter().chain(truth).find(|v| v.len() != dim) {
        return Err(Error::shape("assign_coordinates", dim, bad.len()));
    }
    let mut cells = vec![Vec::new(); truth.len()];
    let mut cell_of = Vec::with_capacity(fitted.len());
    for (i, f) in fitted.iter().enumerate() {
        let mut best = 0;
        let mut best_d = sq_dist(f, &truth[0]);
        for (j, t) in truth.iter().enumerate().skip(1) {
            let d = sq_dist(f, t);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        cell_of.push(best);
        cells[best].push(i);
    }
    Ok(VoronoiAssignment { cell_of, cells })
}

fn check_families(fitted: &FamilyParams, truth: &FamilyParams, want: Option<Family>) -> Result<()> {
    if fitted.family() != truth.family() {
        return Err(Error::arg(format!(
            "family mismatch: fitted {} vs truth {}",
            fitted.family(),
            truth.family()
        )));
    }
    if let Some(w) = want {
        if fitted.family() != w {
            return Err(Error::arg(format!("loss needs family {w}, got {}", fitted.family())));
        }
    }
    if fitted.dim() != truth.dim() || fitted.rank() != truth.rank() {
        return Err(Error::shape(
            "voronoi",
            format!("d={} r={}", truth.dim(), truth.rank()),
            format!("d={} r={}", fitted.dim(), fitted.rank()),
        ));
    }
    Ok(())
}

fn coordinates(p: &FamilyParams) -> Result<Vec<Vec<f64>>> {
    (0..p.num_experts()).map(|j| p.atom_coordinates(j)).collect()
}

/// Cells using the family's atom coordinates: free `(B_Q, A_Q, B_V, A_V)`,
/// linear `Z`, non-linear `(W2B, W1A)`, RepLoRA the merged factors.
pub fn assign_cells(fitted: &FamilyParams, truth: &FamilyParams) -> Result<VoronoiAssignment> {
    check_families(fitted, truth, None)?;
    assign_coordinates(&coordinates(fitted)?, &coordinates(truth)?)
}

/// Order-independent sum: ascending order, so permuted inputs give
/// bit-identical results.
fn canonical_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossName {
    D1,
    D2,
    D3,
}

impl fmt::Display for LossName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossName::D1 => "D1",
            LossName::D2 => "D2",
            LossName::D3 => "D3",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss_name: LossName,
    /// Exponent of `D1_r`; `None` for `D2`/`D3`.
    pub r_exp: Option<u32>,
    pub value: f64,
    pub weight_term: f64,
    /// Parameter term of each true atom's cell.
    pub per_cell_terms: Vec<f64>,
    /// Exponent applied inside each cell.
    pub exponents_used: Vec<u32>,
    pub assignment: VoronoiAssignment,
}

impl LossReport {
    /// Short label such as `D1_2` or `D3`.
    pub fn label(&self) -> String {
        match self.r_exp {
            Some(r) => format!("{}_{r}", self.loss_name),
            None => self.loss_name.to_string(),
        }
    }

    pub const CSV_HEADER: &'static str = "loss_name,r_exp,value,weight_term";

    /// `loss_name,r_exp,value,weight_term`; `r_exp` is empty for D2/D3.
    pub fn csv_row(&self) -> String {
        let r = self.r_exp.map(|r| r.to_string()).unwrap_or_default();
        format!("{},{r},{:?},{:?}", self.loss_name, self.value, self.weight_term)
    }
}

/// Shared skeleton: weight term plus per-cell sums of `atom_term(i, j, singleton)`.
fn voronoi_loss(
    name: LossName,
    r_exp: Option<u32>,
    fitted: &FamilyParams,
    truth: &FamilyParams,
    exponent: impl Fn(bool) -> u32,
    atom_term: impl Fn(usize, usize, u32) -> Result<f64>,
) -> Result<LossReport> {
    let assignment = assign_cells(fitted, truth)?;
    let mut weight_parts = Vec::with_capacity(truth.num_experts());
    let mut per_cell_terms = Vec::with_capacity(truth.num_experts());
    let mut exponents_used = Vec::with_capacity(truth.num_experts());
    for (j, cell) in assignment.cells.iter().enumerate() {
        let mass = canonical_sum(cell.iter().map(|&i| fitted.log_weight(i).exp()).collect());
        weight_parts.push((mass - truth.log_weight(j).exp()).abs());
        let e = exponent(cell.len() == 1);
        let terms = cell
            .iter()
            .map(|&i| Ok(fitted.log_weight(i).exp() * atom_term(i, j, e)?))
            .collect::<Result<Vec<_>>>()?;
        per_cell_terms.push(canonical_sum(terms));
        exponents_used.push(e);
    }
    let weight_term = canonical_sum(weight_parts);
    let value = weight_term + canonical_sum(per_cell_terms.clone());
    Ok(LossReport {
        loss_name: name,
        r_exp,
        value,
        weight_term,
        per_cell_terms,
        exponents_used,
        assignment,
    })
}

fn diff_norm(a: &Mat, b: &Mat) -> Result<f64> {
    Ok(a.sub(b)?.frobenius_norm())
}

/// `D1_r` for the free low-rank family.
pub fn loss_d1(fitted: &FamilyParams, truth: &FamilyParams, r_exp: u32) -> Result<LossReport> {
    if r_exp < 1 {
        return Err(Error::arg("r_exp must be >= 1"));
    }
    check_families(fitted, truth, Some(Family::FreeLowRank))?;
    let (FamilyParams::FreeLowRank(f), FamilyParams::FreeLowRank(t)) = (fitted, truth) else {
        unreachable!("family checked above")
    };
    voronoi_loss(
        LossName::D1,
        Some(r_exp),
        fitted,
        truth,
        |_| r_exp,
        |i, j, e| {
            let (a, b) = (&f.experts[i], &t.experts[j]);
            let norms = [
                diff_norm(&a.b_q, &b.b_q)?,
                diff_norm(&a.a_q, &b.a_q)?,
                diff_norm(&a.b_v, &b.b_v)?,
                diff_norm(&a.a_v, &b.a_v)?,
            ];
            Ok(norms.iter().map(|v| v.powi(e as i32)).sum())
        },
    )
}

/// `D2` for the linear shared family, on the materialized `Z`.
pub fn loss_d2(fitted: &FamilyParams, truth: &FamilyParams) -> Result<LossReport> {
    check_families(fitted, truth, Some(Family::LinearShared))?;
    let (FamilyParams::LinearShared(f), FamilyParams::LinearShared(t)) = (fitted, truth) else {
        unreachable!("family checked above")
    };
    let zf = f.experts.iter().map(|e| e.z()).collect::<Result<Vec<_>>>()?;
    let zt = t.experts.iter().map(|e| e.z()).collect::<Result<Vec<_>>>()?;
    voronoi_loss(
        LossName::D2,
        None,
        fitted,
        truth,
        |single| if single { 1 } else { 2 },
        |i, j, e| Ok(diff_norm(&zf[i], &zt[j])?.powi(e as i32)),
    )
}

/// `D3` for the non-linear shared family, on the pair `(W2B, W1A)`.
pub fn loss_d3(fitted: &FamilyParams, truth: &FamilyParams) -> Result<LossReport> {
    check_families(fitted, truth, Some(Family::NonlinearShared))?;
    let (FamilyParams::NonlinearShared(f), FamilyParams::NonlinearShared(t)) = (fitted, truth) else {
        unreachable!("family checked above")
    };
    voronoi_loss(
        LossName::D3,
        None,
        fitted,
        truth,
        |single| if single { 1 } else { 2 },
        |i, j, e| {
            let (a, b) = (&f.experts[i], &t.experts[j]);
            Ok(diff_norm(&a.w2b, &b.w2b)?.powi(e as i32) + diff_norm(&a.w1a, &b.w1a)?.powi(e as i32))
        },
    )
}

/// The loss matching the family: `D1_{r_exp}` for free low-rank (and for
/// RepLoRA, on its merged factors), `D2` for linear, `D3` for non-linear.
pub fn family_loss(fitted: &FamilyParams, truth: &FamilyParams, r_exp: u32) -> Result<LossReport> {
    check_families(fitted, truth, None)?;
    match (fitted, truth) {
        (FamilyParams::LinearShared(_), _) => loss_d2(fitted, truth),
        (FamilyParams::NonlinearShared(_), _) => loss_d3(fitted, truth),
        (FamilyParams::FreeLowRank(_), _) => loss_d1(fitted, truth, r_exp),
        (FamilyParams::RepLora(f), FamilyParams::RepLora(t)) => loss_d1(
            &FamilyParams::FreeLowRank(f.to_free_low_rank()?),
            &FamilyParams::FreeLowRank(t.to_free_low_rank()?),
            r_exp,
        ),
        _ => unreachable!("families checked above"),
    }
}

/// `||f_fitted - f_truth||_{L2(mu)}` by Monte Carlo.
pub fn l2_mu_error(
    backbone: &FixedBackbone,
    fitted: &FamilyParams,
    truth: &FamilyParams,
    m_samples: usize,
    input_dist: InputDist,
    seed: u64,
) -> Result<f64> {
    l2_mu_distance(
        backbone,
        &fitted.to_measure()?,
        &truth.to_measure()?,
        m_samples,
        input_dist,
        seed,
    )
}

/// `performance * exp(-log10(trainable_params / c_norm + 1))`.
pub fn ppt(performance: f64, trainable_params: f64, c_norm: f64) -> Result<f64> {
    if !(c_norm > 0.0) {
        return Err(Error::arg(format!("normalization constant must be > 0, got {c_norm}")));
    }
    if !(trainable_params >= 0.0) {
        return Err(Error::arg(format!(
            "trainable parameter count must be >= 0, got {trainable_params}"
        )));
    }
    Ok(performance * (-(trainable_params / c_norm + 1.0).log10()).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::parameterization::{FamilySpec, FreeExpert, FreeLowRank, LinearExpert, LinearShared, NonlinearExpert, NonlinearShared, Activation};

    fn s(v: f64) -> Mat {
        Mat::filled(1, 1, v)
    }

    fn linear_scalar(atoms: &[(f64, f64)]) -> FamilyParams {
        FamilyParams::LinearShared(
            LinearShared::new(
                atoms
                    .iter()
                    .map(|&(c, z)| LinearExpert {
                        c,
                        w2: s(z),
                        b: s(1.0),
                        w1: s(1.0),
                        a: s(1.0),
                    })
                    .collect(),
            )
            .unwrap(),
        )
    }

    fn nonlinear_scalar(atoms: &[(f64, f64, f64)]) -> FamilyParams {
        FamilyParams::NonlinearShared(
            NonlinearShared::new(
                Activation::SIGMOID,
                Activation::SIGMOID,
                atoms
                    .iter()
                    .map(|&(c, u, v)| NonlinearExpert {
                        c,
                        w2b: s(u),
                        w1a: s(v),
                    })
                    .collect(),
            )
            .unwrap(),
        )
    }

    fn free_scalar(c: f64, bq: f64) -> FamilyParams {
        FamilyParams::FreeLowRank(
            FreeLowRank::new(vec![FreeExpert {
                c,
                b_q: s(bq),
                a_q: s(1.0),
                b_v: s(-0.5),
                a_v: s(0.25),
            }])
            .unwrap(),
        )
    }

    #[test]
    fn cells_by_hand() {
        let truth = linear_scalar(&[(0.0, 0.0), (0.0, 1.0)]);
        let fitted = linear_scalar(&[(0.0, 0.1), (0.0, 0.4), (0.0, 0.9)]);
        let a = assign_cells(&fitted, &truth).unwrap();
        assert_eq!(a.cells, vec![vec![0, 1], vec![2]]);
        assert_eq!(a.cell_of, vec![0, 0, 1]);
        let tie = linear_scalar(&[(0.0, 0.5)]);
        assert_eq!(assign_cells(&tie, &truth).unwrap().cell_of, vec![0]);
        assert_eq!(assign_cells(&truth, &truth).unwrap().cells, vec![vec![0], vec![1]]);
    }

    #[test]
    fn d1_by_hand() {
        let truth = free_scalar(0.0, 1.0);
        let fitted = free_scalar(0.0, 1.2);
        assert!((loss_d1(&fitted, &truth, 1).unwrap().value - 0.2).abs() <= 1e-12);
        assert!((loss_d1(&fitted, &truth, 2).unwrap().value - 0.04).abs() <= 1e-12);
        let heavier = free_scalar(1.5f64.ln(), 1.0);
        let r = loss_d1(&heavier, &truth, 1).unwrap();
        assert!((r.value - 0.5).abs() <= 1e-12);
        assert!((r.weight_term - 0.5).abs() <= 1e-12);
        for e in [1, 2, 4] {
            assert_eq!(loss_d1(&truth, &truth, e).unwrap().value, 0.0);
        }
        assert!(loss_d1(&truth, &truth, 0).is_err());
    }

    #[test]
    fn d2_by_hand() {
        let truth = linear_scalar(&[(0.0, 1.0)]);
        let single = linear_scalar(&[(1.5f64.ln(), 1.2)]);
        assert!((loss_d2(&single, &truth).unwrap().value - 0.8).abs() <= 1e-12);
        let split = linear_scalar(&[(0.5f64.ln(), 1.1), (0.5f64.ln(), 0.7)]);
        let r = loss_d2(&split, &truth).unwrap();
        assert!((r.value - 0.05).abs() <= 1e-12, "{}", r.value);
        assert_eq!(r.exponents_used, vec![2]);
        assert_eq!(loss_d2(&truth, &truth).unwrap().value, 0.0);
    }

    #[test]
    fn d3_by_hand() {
        let truth = nonlinear_scalar(&[(0.0, 0.3, -0.2)]);
        let single = nonlinear_scalar(&[(0.0, 0.4, 0.0)]);
        assert!((loss_d3(&single, &truth).unwrap().value - 0.3).abs() <= 1e-12);
        let h = 0.5f64.ln();
        let double = nonlinear_scalar(&[(h, 0.4, 0.0), (h, 0.2, -0.4)]);
        assert!((loss_d3(&double, &truth).unwrap().value - 0.05).abs() <= 1e-12);
        assert_eq!(loss_d3(&truth, &truth).unwrap().value, 0.0);
    }

    #[test]
    fn wrong_family_is_rejected() {
        let lin = linear_scalar(&[(0.0, 1.0)]);
        let free = free_scalar(0.0, 1.0);
        assert!(matches!(loss_d2(&free, &free), Err(Error::Argument(_))));
        assert!(matches!(assign_cells(&lin, &free), Err(Error::Argument(_))));
        assert!(loss_d3(&lin, &lin).is_err());
        assert!(loss_d1(&lin, &lin, 1).is_err());
    }

    #[test]
    fn ppt_cases() {
        assert_eq!(ppt(74.1, 0.0, 1e6).unwrap(), 74.1);
        assert_eq!(ppt(0.0, 5e6, 1e6).unwrap(), 0.0);
        let v = ppt(74.1, 9.0, 1.0).unwrap();
        assert!((v - 74.1 * (-1.0f64).exp()).abs() <= 1e-9);
        assert!((v - 27.259_866_590_803_874).abs() <= 1e-9);
        assert!(ppt(1.0, 1.0, 0.0).is_err());
    }

    fn all_losses(f: &FamilyParams, t: &FamilyParams) -> Vec<f64> {
        match f.family() {
            Family::FreeLowRank => [1, 2, 4].iter().map(|&r| loss_d1(f, t, r).unwrap().value).collect(),
            _ => vec![family_loss(f, t, 2).unwrap().value],
        }
    }

    #[test]
    fn permutation_invariance_and_decomposition() {
        let mut rng = RngStream::new(12, 0);
        for fam in [Family::FreeLowRank, Family::LinearShared, Family::NonlinearShared, Family::RepLora] {
            let spec = FamilySpec {
                hidden: 4,
                ..FamilySpec::new(fam, 3, 2, 3)
            };
            let truth = spec.sample(&mut rng, 1.0).unwrap();
            let mut fitted = spec.with_experts(4).sample(&mut rng, 1.0).unwrap();
            if let (FamilyParams::RepLora(f), FamilyParams::RepLora(t)) = (&mut fitted, &truth) {
                f.net = t.net.clone();
            }
            let base = all_losses(&fitted, &truth);
            let pf = fitted.permute_experts(&[3, 1, 0, 2]);
            let pt = truth.permute_experts(&[2, 0, 1]);
            assert_eq!(all_losses(&pf, &truth), base);
            assert_eq!(all_losses(&fitted, &pt), base);
            let r = family_loss(&fitted, &truth, 2).unwrap();
            let mut terms = r.per_cell_terms.clone();
            terms.sort_by(f64::total_cmp);
            assert_eq!(r.value, r.weight_term + terms.iter().sum::<f64>());
            assert!(r.per_cell_terms.iter().all(|v| *v >= 0.0) && r.weight_term >= 0.0);
        }
    }

    #[test]
    fn shrinking_deltas_never_increases_loss() {
        let mut rng = RngStream::new(13, 0);
        for fam in [Family::FreeLowRank, Family::NonlinearShared] {
            let spec = FamilySpec::new(fam, 2, 1, 2);
            let truth = spec.sample(&mut rng, 1.0).unwrap();
            let mut off = truth.clone();
            off.visit_mut(&mut |s| {
                for v in s.iter_mut() {
                    *v += 0.3;
                }
            });
            let (t0, f0) = (truth.flatten(), off.flatten());
            let mut prev = f64::INFINITY;
            for t in [1.0, 0.8, 0.5, 0.2, 0.05] {
                let mut x: Vec<f64> = t0.iter().zip(&f0).map(|(a, b)| a + t * (b - a)).collect();
                // weights held exact
                let mut at = 0;
                truth.visit(&mut |s| {
                    if s.len() == 1 {
                        x[at] = s[0];
                    }
                    at += s.len();
                });
                let p = truth.with_flat(&x).unwrap();
                let v = family_loss(&p, &truth, 2).unwrap().value;
                assert!(v <= prev, "{fam}: {v} > {prev}");
                prev = v;
            }
        }
    }

    #[test]
    fn csv_row_format() {
        let t = free_scalar(0.0, 1.0);
        let r = loss_d1(&free_scalar(0.0, 1.5), &t, 2).unwrap();
        assert_eq!(r.csv_row(), "D1,2,0.25,0.0");
        assert_eq!(r.label(), "D1_2");
        let l = linear_scalar(&[(0.0, 1.0)]);
        assert_eq!(loss_d2(&l, &l).unwrap().csv_row(), "D2,,0.0,0.0");
    }
}
