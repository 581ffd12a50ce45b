//! Numerical probes of the three activation conditions required by the
//! non-linear shared family: algebraic independence, uniform Lipschitz
//! derivatives and strong identifiability.
//!
//! These are finite probes, not proofs. Each returns the measured quantity,
//! the threshold it was compared with, and a witness when it fails.

use serde::{Deserialize, Serialize};

use super::Activation;
use crate::error::{Error, Result};
use crate::numerics::{Mat, RngStream};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssumptionProbe {
    pub dim: usize,
    pub rank: usize,
    /// Number of distinct parameter tuples in the identifiability check.
    pub atoms: usize,
    pub pairs: usize,
    pub param_bound: f64,
    pub seed: u64,
    /// Products closer than this count as equal.
    pub collision_tol: f64,
    /// Parameters farther apart than this count as distinct.
    pub distinct_tol: f64,
    pub lipschitz_bound: f64,
    pub gram_tol: f64,
}

impl Default for AssumptionProbe {
    fn default() -> Self {
        AssumptionProbe {
            dim: 2,
            rank: 1,
            atoms: 2,
            pairs: 200,
            param_bound: 2.0,
            seed: 0x5eed,
            collision_tol: 1e-10,
            distinct_tol: 1e-8,
            lipschitz_bound: 1e6,
            gram_tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub witness: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub act1: Activation,
    pub act2: Activation,
    pub algebraic_independence: ProbeOutcome,
    pub uniform_lipschitz: ProbeOutcome,
    pub strong_identifiability: ProbeOutcome,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes().iter().all(|o| o.passed)
    }

    pub fn outcomes(&self) -> [&ProbeOutcome; 3] {
        [
            &self.algebraic_independence,
            &self.uniform_lipschitz,
            &self.strong_identifiability,
        ]
    }
}

pub fn check_assumptions(act1: Activation, act2: Activation) -> Result<AssumptionReport> {
    check_assumptions_with(act1, act2, &AssumptionProbe::default())
}

pub fn check_assumptions_with(
    act1: Activation,
    act2: Activation,
    probe: &AssumptionProbe,
) -> Result<AssumptionReport> {
    for act in [act1, act2] {
        act.first_derivative()?;
        act.second_derivative()?;
    }
    if probe.dim == 0 || probe.rank == 0 || probe.atoms == 0 || probe.pairs == 0 {
        return Err(Error::arg("probe sizes must be positive"));
    }
    let mut rng = RngStream::new(probe.seed, 0);
    Ok(AssumptionReport {
        act1,
        act2,
        algebraic_independence: algebraic_independence(act1, act2, probe, &mut rng.fork(1)),
        uniform_lipschitz: uniform_lipschitz(act1, act2, probe, &mut rng)?,
        strong_identifiability: strong_identifiability(act1, act2, probe, &mut rng.fork(3)),
    })
}

fn product(act1: Activation, act2: Activation, b: &Mat, a: &Mat) -> Mat {
    let s2 = b.map(|v| act2.apply(v));
    let s1 = a.map(|v| act1.apply(v));
    s2.matmul(&s1).expect("probe shapes are consistent")
}

fn max_abs_concat_diff(x: (&Mat, &Mat), y: (&Mat, &Mat)) -> f64 {
    x.0.max_abs_diff(y.0)
        .unwrap()
        .max(x.1.max_abs_diff(y.1).unwrap())
}

fn invert_small(t: &Mat) -> Option<Mat> {
    let n = t.rows();
    let m = nalgebra::DMatrix::from_row_slice(n, n, t.data());
    let inv = m.try_inverse()?;
    let data: Vec<f64> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| inv[(i, j)]).collect();
    Mat::from_vec(n, n, data).ok()
}

/// Equal products must imply equal parameters. Partners for each random
/// `(B, A)` are: an independent draw, the rescalings `(cB, A/c)`, a
/// random `GL(r)` twist `(BT, T^-1 A)`, and a small perturbation.
fn algebraic_independence(
    act1: Activation,
    act2: Activation,
    probe: &AssumptionProbe,
    rng: &mut RngStream,
) -> ProbeOutcome {
    let (d, r, bound) = (probe.dim, probe.rank, probe.param_bound);
    let mut closest = f64::INFINITY;
    let mut witness = None;
    for _ in 0..probe.pairs {
        let b = rng.uniform_mat(-bound, bound, (d, r));
        let a = rng.uniform_mat(-bound, bound, (r, d));
        let mut partners = vec![(
            rng.uniform_mat(-bound, bound, (d, r)),
            rng.uniform_mat(-bound, bound, (r, d)),
        )];
        for c in [2.0, 0.5, -1.0] {
            partners.push((b.scale(c), a.scale(1.0 / c)));
        }
        let t = Mat::from_fn(r, r, |i, j| {
            let base = if i == j { 1.0 } else { 0.0 };
            base + rng.uniform(-0.5, 0.5)
        });
        if let Some(t_inv) = invert_small(&t) {
            partners.push((b.matmul(&t).unwrap(), t_inv.matmul(&a).unwrap()));
        }
        let noise = rng.uniform_mat(-1e-3, 1e-3, (d, r));
        partners.push((b.add(&noise).unwrap(), a.clone()));

        let base = product(act1, act2, &b, &a);
        for (b2, a2) in partners {
            let dist = max_abs_concat_diff((&b, &a), (&b2, &a2));
            if dist <= probe.distinct_tol {
                continue;
            }
            let gap = base.max_abs_diff(&product(act1, act2, &b2, &a2)).unwrap();
            if gap < closest {
                closest = gap;
            }
            if gap <= probe.collision_tol && witness.is_none() {
                witness = Some(format!(
                    "B={:?} A={:?} vs B'={:?} A'={:?}: product gap {gap:.3e}, parameter gap {dist:.3e}",
                    b.data(),
                    a.data(),
                    b2.data(),
                    a2.data()
                ));
            }
        }
    }
    ProbeOutcome {
        name: "algebraic_independence".into(),
        passed: witness.is_none(),
        measured: closest,
        threshold: probe.collision_tol,
        witness,
    }
}

/// Value, Jacobian and Hessian of
/// `F(X; B, A) = exp(X^T (M_Q + Z) X) (M_V + Z) X`, `Z = act2(B) act1(A)`,
/// with parameters ordered `(B row-major, A row-major)`.
pub(crate) struct LipschitzBundle {
    #[cfg_attr(not(test), allow(dead_code))]
    pub value: Vec<f64>,
    /// d x P
    pub jacobian: Vec<f64>,
    /// d x P x P
    pub hessian: Vec<f64>,
}

pub(crate) fn derivative_bundle(
    act1: Activation,
    act2: Activation,
    m_q: &Mat,
    m_v: &Mat,
    b: &Mat,
    a: &Mat,
    x: &[f64],
) -> Result<LipschitzBundle> {
    let (d, r) = b.shape();
    let np = 2 * d * r;
    let (f1, f2) = (act1.first_derivative()?, act1.second_derivative()?);
    let (g1, g2) = (act2.first_derivative()?, act2.second_derivative()?);
    let b_idx = |a_: usize, k: usize| a_ * r + k;
    let a_idx = |k: usize, c: usize| d * r + k * d + c;

    let z = product(act1, act2, b, a);
    let mq_z = m_q.add(&z)?;
    let s: f64 = (0..d)
        .map(|i| x[i] * (0..d).map(|j| mq_z.get(i, j) * x[j]).sum::<f64>())
        .sum();
    let e = m_v.add(&z)?.matvec(x)?;
    let ex = s.exp();

    // Jacobian and Hessian of Z, entry (a_, c) -> sparse lists.
    let mut jz = vec![0.0; d * d * np];
    let mut hz = vec![0.0; d * d * np * np];
    for a_ in 0..d {
        for c in 0..d {
            let row = a_ * d + c;
            for k in 0..r {
                let (bv, av) = (b.get(a_, k), a.get(k, c));
                let (pb, pa) = (b_idx(a_, k), a_idx(k, c));
                jz[row * np + pb] += g1(bv) * act1.apply(av);
                jz[row * np + pa] += act2.apply(bv) * f1(av);
                let h = &mut hz[row * np * np..(row + 1) * np * np];
                h[pb * np + pb] += g2(bv) * act1.apply(av);
                h[pa * np + pa] += act2.apply(bv) * f2(av);
                h[pb * np + pa] += g1(bv) * f1(av);
                h[pa * np + pb] += g1(bv) * f1(av);
            }
        }
    }
    // ds/dp and de_i/dp.
    let mut gs = vec![0.0; np];
    let mut he = vec![0.0; d * np];
    for a_ in 0..d {
        for c in 0..d {
            let row = a_ * d + c;
            for p in 0..np {
                let jzv = jz[row * np + p];
                gs[p] += x[a_] * x[c] * jzv;
                he[a_ * np + p] += x[c] * jzv;
            }
        }
    }
    let value: Vec<f64> = e.iter().map(|ei| ex * ei).collect();
    let mut jacobian = vec![0.0; d * np];
    for i in 0..d {
        for p in 0..np {
            jacobian[i * np + p] = ex * (gs[p] * e[i] + he[i * np + p]);
        }
    }
    let mut hessian = vec![0.0; d * np * np];
    for i in 0..d {
        for p in 0..np {
            for q in 0..np {
                let mut v = gs[p] * gs[q] * e[i] + gs[p] * he[i * np + q] + gs[q] * he[i * np + p];
                for a_ in 0..d {
                    for c in 0..d {
                        let row = a_ * d + c;
                        let hzv = hz[row * np * np + p * np + q];
                        if hzv != 0.0 {
                            let mut w = x[a_] * x[c] * e[i];
                            if a_ == i {
                                w += x[c];
                            }
                            v += w * hzv;
                        }
                    }
                }
                hessian[(i * np + p) * np + q] = ex * v;
            }
        }
    }
    Ok(LipschitzBundle {
        value,
        jacobian,
        hessian,
    })
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Largest observed ratio `|D^k F(p) - D^k F(p')| / |p - p'|`, k = 1, 2,
/// over random parameter pairs and random inputs in the support.
fn uniform_lipschitz(
    act1: Activation,
    act2: Activation,
    probe: &AssumptionProbe,
    rng: &mut RngStream,
) -> Result<ProbeOutcome> {
    let (d, r, bound) = (probe.dim, probe.rank, probe.param_bound);
    let scale = 1.0 / (d as f64).sqrt();
    let m_q = rng.gaussian(0.0, scale, (d, d))?;
    let m_v = rng.gaussian(0.0, scale, (d, d))?;
    let mut worst: f64 = 0.0;
    let mut witness = None;
    for _ in 0..probe.pairs {
        let b = rng.uniform_mat(-bound, bound, (d, r));
        let a = rng.uniform_mat(-bound, bound, (r, d));
        let b2 = rng.uniform_mat(-bound, bound, (d, r));
        let a2 = rng.uniform_mat(-bound, bound, (r, d));
        let x = rng.uniform_vec(-1.0, 1.0, d);
        let p1: Vec<f64> = b.data().iter().chain(a.data()).copied().collect();
        let p2: Vec<f64> = b2.data().iter().chain(a2.data()).copied().collect();
        let dp = l2_diff(&p1, &p2);
        let u = derivative_bundle(act1, act2, &m_q, &m_v, &b, &a, &x)?;
        let v = derivative_bundle(act1, act2, &m_q, &m_v, &b2, &a2, &x)?;
        let ratio = (l2_diff(&u.jacobian, &v.jacobian) / dp).max(l2_diff(&u.hessian, &v.hessian) / dp);
        if !ratio.is_finite() || ratio > worst {
            worst = if ratio.is_finite() { ratio } else { f64::INFINITY };
            if !(ratio <= probe.lipschitz_bound) {
                witness = Some(format!("ratio {ratio:.3e} at B={:?} A={:?} x={x:?}", b.data(), a.data()));
            }
        }
    }
    Ok(ProbeOutcome {
        name: "uniform_lipschitz".into(),
        passed: worst.is_finite() && worst <= probe.lipschitz_bound,
        measured: worst,
        threshold: probe.lipschitz_bound,
        witness,
    })
}

/// One group of the identifiability family: functions that differ only in
/// the parameter index `j`, each vector valued.
struct Group {
    label: String,
    /// per function, per sample, the output vector flattened
    values: Vec<Vec<f64>>,
}

/// Evaluates the listed families of functions at random inputs and, within
/// each group of same-shaped functions (fixed type and input indices
/// `u, v`), requires the Gram matrix over the distinct parameters to be
/// non-singular. Columns are normalized so the tolerance is scale free.
fn strong_identifiability(
    act1: Activation,
    act2: Activation,
    probe: &AssumptionProbe,
    rng: &mut RngStream,
) -> ProbeOutcome {
    let (d, r, l, bound) = (probe.dim, probe.rank, probe.atoms, probe.param_bound);
    let params: Vec<(Mat, Mat)> = (0..l)
        .map(|_| {
            let b = rng.uniform_mat(-bound, bound, (d, r));
            let a = rng.uniform_mat(-bound, bound, (r, d));
            (b.map(|v| act2.apply(v)), a.map(|v| act1.apply(v)))
        })
        .collect();
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|u| (u..d).map(move |v| (u, v))).collect();

    let n_functions = d + pairs.len() + l * (2 * d + 2 + 3 * pairs.len());
    let samples = (5 * n_functions).max(256);
    let xs: Vec<Vec<f64>> = (0..samples).map(|_| rng.uniform_vec(-1.0, 1.0, d)).collect();

    // Per sample and parameter: X^T s2 (len r), s1 X (len r), X^T s2 s1 X.
    let feats: Vec<Vec<(Vec<f64>, Vec<f64>, f64)>> = xs
        .iter()
        .map(|x| {
            params
                .iter()
                .map(|(s2, s1)| {
                    let xb: Vec<f64> = (0..r).map(|k| (0..d).map(|a| x[a] * s2.get(a, k)).sum()).collect();
                    let ax: Vec<f64> = s1.matvec(x).unwrap();
                    let q = xb.iter().zip(&ax).map(|(p, q)| p * q).sum();
                    (xb, ax, q)
                })
                .collect()
        })
        .collect();

    let mut groups: Vec<Group> = Vec::new();
    let mut push = |label: String, f: &dyn Fn(usize, usize) -> Vec<f64>, count: usize| {
        groups.push(Group {
            label,
            values: (0..count).map(|j| (0..samples).flat_map(|s| f(s, j)).collect()).collect(),
        });
    };
    push("X_u".into(), &|s, u| vec![xs[s][u]], d);
    push("X_u X_v".into(), &|s, k| vec![xs[s][pairs[k].0] * xs[s][pairs[k].1]], pairs.len());
    push("X^T s2(B_j)".into(), &|s, j| feats[s][j].0.clone(), l);
    push("s1(A_j) X".into(), &|s, j| feats[s][j].1.clone(), l);
    for u in 0..d {
        push(format!("X_{u} X^T s2(B_j)"), &|s, j| feats[s][j].0.iter().map(|v| xs[s][u] * v).collect(), l);
        push(format!("X_{u} s1(A_j) X"), &|s, j| feats[s][j].1.iter().map(|v| xs[s][u] * v).collect(), l);
    }
    for &(u, v) in &pairs {
        let w = |s: usize| xs[s][u] * xs[s][v];
        push(
            format!("X_{u} X_{v} [X^T s2(B_j)]^2"),
            &|s, j| feats[s][j].0.iter().map(|t| w(s) * t * t).collect(),
            l,
        );
        push(
            format!("X_{u} X_{v} [s1(A_j) X]^2"),
            &|s, j| feats[s][j].1.iter().map(|t| w(s) * t * t).collect(),
            l,
        );
        push(format!("X_{u} X_{v} X^T s2 s1 X"), &|s, j| vec![w(s) * feats[s][j].2], l);
    }

    let mut worst = f64::INFINITY;
    let mut witness = None;
    for g in &groups {
        let smallest = min_normalized_gram_singular_value(&g.values);
        if smallest < worst {
            worst = smallest;
            if smallest <= probe.gram_tol {
                witness = Some(format!("group `{}`: smallest singular value {smallest:.3e}", g.label));
            }
        }
    }
    ProbeOutcome {
        name: "strong_identifiability".into(),
        passed: worst > probe.gram_tol,
        measured: worst,
        threshold: probe.gram_tol,
        witness,
    }
}

fn min_normalized_gram_singular_value(values: &[Vec<f64>]) -> f64 {
    let k = values.len();
    let norms: Vec<f64> = values.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    if norms.iter().any(|&n| n == 0.0 || !n.is_finite()) {
        return 0.0;
    }
    let gram = nalgebra::DMatrix::from_fn(k, k, |i, j| {
        values[i].iter().zip(&values[j]).map(|(a, b)| a * b).sum::<f64>() / (norms[i] * norms[j])
    });
    gram.singular_values().iter().copied().fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_pair_passes_every_probe() {
        let rep = check_assumptions(Activation::SIGMOID, Activation::SIGMOID).unwrap();
        for o in rep.outcomes() {
            assert!(o.passed, "{o:?}");
        }
    }

    #[test]
    fn identity_fails_algebraic_independence_with_witness() {
        let rep = check_assumptions(Activation::IDENTITY, Activation::IDENTITY).unwrap();
        assert!(!rep.algebraic_independence.passed);
        assert!(rep.algebraic_independence.witness.is_some());
    }

    #[test]
    fn constant_activation_fails_identifiability() {
        let konst = Activation::custom("constant", |_| 0.7, Some(|_| 0.0), Some(|_| 0.0));
        let rep = check_assumptions(konst, konst).unwrap();
        assert!(!rep.strong_identifiability.passed);
        assert!(rep.strong_identifiability.witness.is_some());
    }

    #[test]
    fn missing_derivative_is_argument_error() {
        let bare = Activation::custom("bare", f64::sin, Some(f64::cos), None);
        assert!(matches!(
            check_assumptions(bare, Activation::SIGMOID),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn derivative_bundle_matches_finite_differences() {
        let mut rng = RngStream::new(31, 0);
        let (d, r) = (2, 1);
        let m_q = rng.gaussian(0.0, 0.7, (d, d)).unwrap();
        let m_v = rng.gaussian(0.0, 0.7, (d, d)).unwrap();
        let h = 1e-5;
        for act in [Activation::SIGMOID, Activation::TANH] {
            let b = rng.uniform_mat(-1.0, 1.0, (d, r));
            let a = rng.uniform_mat(-1.0, 1.0, (r, d));
            let x = rng.uniform_vec(-1.0, 1.0, d);
            let base = derivative_bundle(act, act, &m_q, &m_v, &b, &a, &x).unwrap();
            let np = 2 * d * r;
            for p in 0..np {
                let bump = |delta: f64| {
                    let mut b2 = b.clone();
                    let mut a2 = a.clone();
                    if p < d * r {
                        b2.data_mut()[p] += delta;
                    } else {
                        a2.data_mut()[p - d * r] += delta;
                    }
                    derivative_bundle(act, act, &m_q, &m_v, &b2, &a2, &x).unwrap()
                };
                let (up, down) = (bump(h), bump(-h));
                for i in 0..d {
                    let fd = (up.value[i] - down.value[i]) / (2.0 * h);
                    assert!((fd - base.jacobian[i * np + p]).abs() < 1e-7);
                    for q in 0..np {
                        let fd2 = (up.jacobian[i * np + q] - down.jacobian[i * np + q]) / (2.0 * h);
                        assert!((fd2 - base.hessian[(i * np + q) * np + p]).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
