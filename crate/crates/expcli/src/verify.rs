use std::fmt;
use std::time::Instant;

use replora_core::attention_moe::{
    attention_heads, lora_msa_forward, merge_adapter, moe_head_forward, moe_head_gates, msa_forward, HeadAdapter,
    MsaWeights, TokenSequence,
};
use replora_core::estimation::{fd_gradient, gradient, gradient_without, GradientTerm, LsProblem};
use replora_core::parameterization::{
    check_assumptions, merge_and_discard, FreeExpert, FreeLowRank, LinearExpert, LinearShared, LowRankFactors,
    NonlinearExpert, NonlinearShared, RepLoraMlp,
};
use replora_core::voronoi_metrics::{assign_cells, loss_d1, loss_d2, loss_d3, ppt};
use replora_core::{gen_dataset, Activation, Family, FamilyParams, FamilySpec, FixedBackbone, InputDist, Mat, RngStream};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    MoeEquivalence,
    Merge,
    Losses,
    Assumptions,
    Ppt,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Gradients,
        Suite::MoeEquivalence,
        Suite::Merge,
        Suite::Losses,
        Suite::Assumptions,
        Suite::Ppt,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Gradients => "gradients",
            Suite::MoeEquivalence => "moe-equivalence",
            Suite::Merge => "merge",
            Suite::Losses => "losses",
            Suite::Assumptions => "assumptions",
            Suite::Ppt => "ppt",
        }
    }

    /// A suite name, or `all`.
    pub fn select(name: &str) -> Result<Vec<Suite>> {
        if name == "all" {
            return Ok(Suite::ALL.to_vec());
        }
        Suite::ALL
            .iter()
            .find(|s| s.name() == name)
            .map(|s| vec![*s])
            .ok_or_else(|| {
                let names: Vec<_> = Suite::ALL.iter().map(|s| s.name()).collect();
                CliError::Usage(format!("unknown suite `{name}`; expected all, {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub note: Option<String>,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:4} {}/{} measured={:.3e} tol={:.1e}",
            if self.passed { "pass" } else { "FAIL" },
            self.suite,
            self.name,
            self.measured,
            self.tolerance
        )?;
        if let Some(n) = &self.note {
            write!(f, " ({n})")?;
        }
        Ok(())
    }
}

fn at_most(suite: &'static str, name: impl Into<String>, measured: f64, tolerance: f64) -> Check {
    Check {
        suite,
        name: name.into(),
        measured,
        tolerance,
        passed: measured <= tolerance,
        note: None,
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    /// Drop one analytic gradient term; the gradient suite must then fail.
    pub mutate_gradient: Option<GradientTerm>,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn verify(suites: &[Suite], opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    for s in suites {
        let checks = match s {
            Suite::Gradients => gradients(opts.mutate_gradient, 20)?,
            Suite::MoeEquivalence => moe_equivalence()?,
            Suite::Merge => merge(20)?,
            Suite::Losses => losses()?,
            Suite::Assumptions => assumptions()?,
            Suite::Ppt => ppt_checks()?,
        };
        report.checks.extend(checks);
    }
    Ok(report)
}

/// `||a - b|| / ||b||`, Euclidean over all coordinates.
fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

/// Analytic vs central-difference gradients (h = 1e-5) on `configs` random
/// problems per family, d = 3, L' = 3, r = 2, n = 50.
pub fn gradients(mutation: Option<GradientTerm>, configs: usize) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for fam in Family::ALL {
        let start = Instant::now();
        let mut worst: f64 = 0.0;
        for c in 0..configs {
            let seed = 1000 + c as u64;
            let backbone = FixedBackbone::random(3, seed, false)?;
            let spec = FamilySpec::new(fam, 3, 2, 3);
            let mut rng = RngStream::new(seed, 1);
            let truth = spec.sample(&mut rng, 1.0)?;
            let data = gen_dataset(&backbone, &truth.to_measure()?, 50, 0.1, InputDist::default(), seed)?;
            let problem = LsProblem::new(backbone, data, spec.clone(), 10.0)?;
            let params = spec.sample(&mut rng, 1.0)?;
            let analytic = match mutation {
                None => gradient(&problem, &params)?,
                Some(t) => gradient_without(&problem, &params, t)?,
            };
            let fd = fd_gradient(&problem, &params, 1e-5)?;
            worst = worst.max(relative_error(&analytic.flatten(), &fd.flatten()));
        }
        let mut check = at_most("gradients", format!("{fam} x{configs}"), worst, 1e-6);
        check.note = Some(format!("{:.2}s", start.elapsed().as_secs_f64()));
        out.push(check);
    }
    Ok(out)
}

/// Attention heads vs their token-by-token MoE reading, with and without
/// adapters, over N in 1..=6 and m in {1, 2, 4}.
pub fn moe_equivalence() -> Result<Vec<Check>> {
    let mut rng = RngStream::new(0xA77, 0);
    let (mut plain, mut adapted, mut gate_sum, mut perm_dev) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut instances = 0;
    for n in 1..=6 {
        for m in [1, 2, 4] {
            for _ in 0..3 {
                let d = 8;
                let w = MsaWeights::random(d, m, &mut rng)?;
                let x = TokenSequence::random(n, d, &mut rng)?;
                let rank = 1 + (instances % 2).min(d / m - 1);
                let ad: Vec<_> = (0..m).map(|_| HeadAdapter::random(d, d / m, rank, &mut rng)).collect();
                let heads = attention_heads(&x, &w, None)?;
                let heads_ad = attention_heads(&x, &w, Some(&ad))?;
                for l in 0..m {
                    plain = plain.max(moe_head_forward(&x, &w, l, None)?.max_abs_diff(&heads[l])?);
                    adapted = adapted.max(moe_head_forward(&x, &w, l, Some(&ad[l]))?.max_abs_diff(&heads_ad[l])?);
                    let g = moe_head_gates(&x, &w, l, Some(&ad[l]))?;
                    for i in 0..n {
                        gate_sum = gate_sum.max((g.row(i).iter().sum::<f64>() - 1.0).abs());
                    }
                }
                let order: Vec<usize> = (0..n).rev().collect();
                let xp = TokenSequence::new(Mat::from_fn(n, d, |i, c| x.x.get(order[i], c)))?;
                let y = lora_msa_forward(&x, &w, &ad)?;
                let yp = lora_msa_forward(&xp, &w, &ad)?;
                perm_dev = perm_dev.max(yp.max_abs_diff(&Mat::from_fn(n, d, |i, c| y.get(order[i], c)))?);
                instances += 1;
            }
        }
    }
    Ok(vec![
        at_most("moe-equivalence", format!("plain x{instances}"), plain, 1e-12),
        at_most("moe-equivalence", format!("adapted x{instances}"), adapted, 1e-12),
        at_most("moe-equivalence", "gate row sums", gate_sum, 1e-12),
        at_most("moe-equivalence", "permutation equivariance", perm_dev, 1e-12),
    ])
}

/// RepLoRA-backed adapters vs their merged (and JSON round-tripped)
/// matrices, and adapted forwards vs merged base weights.
pub fn merge(instances: usize) -> Result<Vec<Check>> {
    let mut rng = RngStream::new(0x3E6, 0);
    let (mut params_dev, mut mlp_vs_merged, mut base_merge) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..instances {
        let (d, m) = if k % 2 == 0 { (8, 2) } else { (6, 3) };
        let dh = d / m;
        let w = MsaWeights::random(d, m, &mut rng)?;
        let x = TokenSequence::random(1 + k % 5, d, &mut rng)?;
        let nets: Vec<_> = (0..m)
            .map(|_| RepLoraMlp::sample(2.min(dh), d, dh, 64, Activation::SIGMOID, &mut rng))
            .collect();
        let mut from_mlp = Vec::new();
        let mut from_merged = Vec::new();
        for p in &nets {
            let a = HeadAdapter::from_replora(p, 1.0)?;
            let f = LowRankFactors::from_json(&merge_and_discard(p)?.to_json()?)?;
            for (u, v) in [(&a.a_q, &f.a_q), (&a.a_v, &f.a_v), (&a.b_q, &f.b_q), (&a.b_v, &f.b_v)] {
                params_dev = params_dev.max(u.max_abs_diff(v)?);
            }
            from_merged.push(HeadAdapter {
                b_q: f.b_q,
                a_q: f.a_q,
                b_v: f.b_v,
                a_v: f.a_v,
                scale: 1.0,
            });
            from_mlp.push(a);
        }
        let y = lora_msa_forward(&x, &w, &from_mlp)?;
        mlp_vs_merged = mlp_vs_merged.max(y.max_abs_diff(&lora_msa_forward(&x, &w, &from_merged)?)?);
        base_merge = base_merge.max(y.max_abs_diff(&msa_forward(&x, &merge_adapter(&w, &from_merged)?)?)?);
    }
    Ok(vec![
        at_most("merge", "merged factors", params_dev, 0.0),
        at_most("merge", format!("mlp vs merged forward x{instances}"), mlp_vs_merged, 1e-12),
        at_most("merge", format!("merged base weights x{instances}"), base_merge, 1e-12),
    ])
}

fn s(v: f64) -> Mat {
    Mat::filled(1, 1, v)
}

fn free_scalar(c: f64, b_q: f64) -> Result<FamilyParams> {
    Ok(FamilyParams::FreeLowRank(FreeLowRank::new(vec![FreeExpert {
        c,
        b_q: s(b_q),
        a_q: s(1.0),
        b_v: s(-0.5),
        a_v: s(0.25),
    }])?))
}

fn linear_scalar(atoms: &[(f64, f64)]) -> Result<FamilyParams> {
    let experts = atoms
        .iter()
        .map(|&(c, z)| LinearExpert {
            c,
            w2: s(z),
            b: s(1.0),
            w1: s(1.0),
            a: s(1.0),
        })
        .collect();
    Ok(FamilyParams::LinearShared(LinearShared::new(experts)?))
}

fn nonlinear_scalar(atoms: &[(f64, f64, f64)]) -> Result<FamilyParams> {
    let experts = atoms
        .iter()
        .map(|&(c, u, v)| NonlinearExpert {
            c,
            w2b: s(u),
            w1a: s(v),
        })
        .collect();
    Ok(FamilyParams::NonlinearShared(NonlinearShared::new(
        Activation::SIGMOID,
        Activation::SIGMOID,
        experts,
    )?))
}

/// Zero loss at the truth, and the hand-evaluated examples.
pub fn losses() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut rng = RngStream::new(0x1055, 0);
    let mut self_loss: f64 = 0.0;
    for _ in 0..10 {
        let free = FamilySpec::new(Family::FreeLowRank, 3, 2, 3).sample(&mut rng, 1.0)?;
        for r in [1, 2, 4] {
            self_loss = self_loss.max(loss_d1(&free, &free, r)?.value);
        }
        let lin = FamilySpec::new(Family::LinearShared, 3, 2, 3).sample(&mut rng, 1.0)?;
        self_loss = self_loss.max(loss_d2(&lin, &lin)?.value);
        let non = FamilySpec::new(Family::NonlinearShared, 3, 2, 3).sample(&mut rng, 1.0)?;
        self_loss = self_loss.max(loss_d3(&non, &non)?.value);
    }
    out.push(at_most("losses", "D1_{1,2,4}, D2, D3 at truth", self_loss, 0.0));

    let truth = free_scalar(0.0, 1.0)?;
    let off = free_scalar(0.0, 1.2)?;
    let one = linear_scalar(&[(0.0, 1.0)])?;
    let nl = nonlinear_scalar(&[(0.0, 0.3, -0.2)])?;
    let h = 0.5f64.ln();
    let examples: [(&str, f64, f64); 7] = [
        ("D1_1 parameter gap", loss_d1(&off, &truth, 1)?.value, 0.2),
        ("D1_2 parameter gap", loss_d1(&off, &truth, 2)?.value, 0.04),
        ("D1 weight gap", loss_d1(&free_scalar(1.5f64.ln(), 1.0)?, &truth, 1)?.value, 0.5),
        ("D2 singleton", loss_d2(&linear_scalar(&[(1.5f64.ln(), 1.2)])?, &one)?.value, 0.8),
        ("D2 two-atom cell", loss_d2(&linear_scalar(&[(h, 1.1), (h, 0.7)])?, &one)?.value, 0.05),
        ("D3 singleton", loss_d3(&nonlinear_scalar(&[(0.0, 0.4, 0.0)])?, &nl)?.value, 0.3),
        (
            "D3 two-atom cell",
            loss_d3(&nonlinear_scalar(&[(h, 0.4, 0.0), (h, 0.2, -0.4)])?, &nl)?.value,
            0.05,
        ),
    ];
    for (name, got, want) in examples {
        out.push(at_most("losses", name, (got - want).abs(), 1e-12));
    }
    let cells = assign_cells(
        &linear_scalar(&[(0.0, 0.1), (0.0, 0.4), (0.0, 0.9)])?,
        &linear_scalar(&[(0.0, 0.0), (0.0, 1.0)])?,
    )?;
    let mut c = at_most("losses", "voronoi cells by hand", 0.0, 0.0);
    c.passed = cells.cells == vec![vec![0, 1], vec![2]];
    out.push(c);
    Ok(out)
}

pub fn assumptions() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let sig = check_assumptions(Activation::SIGMOID, Activation::SIGMOID)?;
    for o in sig.outcomes() {
        out.push(Check {
            suite: "assumptions",
            name: format!("sigmoid/sigmoid {}", o.name),
            measured: o.measured,
            tolerance: o.threshold,
            passed: o.passed,
            note: o.witness.clone(),
        });
    }
    let id = check_assumptions(Activation::IDENTITY, Activation::IDENTITY)?;
    let a1 = &id.algebraic_independence;
    out.push(Check {
        suite: "assumptions",
        name: format!("identity/identity {} fails with witness", a1.name),
        measured: a1.measured,
        tolerance: a1.threshold,
        passed: !a1.passed && a1.witness.is_some(),
        note: a1.witness.clone(),
    });
    Ok(out)
}

pub fn ppt_checks() -> Result<Vec<Check>> {
    let reference = 74.1 * (-1.0f64).exp();
    Ok(vec![
        at_most("ppt", "no trainable parameters", (ppt(74.1, 0.0, 1e6)? - 74.1).abs(), 0.0),
        at_most("ppt", "74.1 at P/C = 9", (ppt(74.1, 9.0, 1.0)? - reference).abs(), 1e-9),
    ])
}
