//! Least-squares estimation of a mixing measure: objective, analytic and
//! finite-difference gradients, and a multi-restart Adam fitter.

use std::io::Write;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe_regression::{Dataset, FixedBackbone, MixingMeasure};
use crate::numerics::{Mat, RngStream};
use crate::parameterization::{FamilyParams, FamilySpec, DEFAULT_THETA_BOX};

/// Data, frozen backbone and the family/size of the fitted model, with the
/// per-sample backbone quantities precomputed.
#[derive(Clone, Debug)]
pub struct LsProblem {
    backbone: FixedBackbone,
    dataset: Dataset,
    spec: FamilySpec,
    theta_box: f64,
    /// `M_K x_i`, n x d
    keys: Vec<f64>,
    /// `x_i^T M_Q M_K x_i`
    base_scores: Vec<f64>,
    /// `M_V x_i`, n x d
    base_values: Vec<f64>,
}

impl LsProblem {
    /// `spec.experts` is the number of fitted atoms `L'`.
    pub fn new(backbone: FixedBackbone, dataset: Dataset, spec: FamilySpec, theta_box: f64) -> Result<Self> {
        spec.validate()?;
        let d = backbone.dim();
        if dataset.dim() != d || spec.dim != d {
            return Err(Error::shape(
                "LsProblem",
                format!("dimension {d}"),
                format!("data {} / spec {}", dataset.dim(), spec.dim),
            ));
        }
        if !(theta_box > 0.0) {
            return Err(Error::arg(format!("theta box must be positive, got {theta_box}")));
        }
        let n = dataset.len();
        let mut keys = Vec::with_capacity(n * d);
        let mut base_scores = Vec::with_capacity(n);
        let mut base_values = Vec::with_capacity(n * d);
        for i in 0..n {
            let x = dataset.xs.row(i);
            let k = backbone.m_k.matvec(x)?;
            let qk = backbone.m_q.matvec(&k)?;
            base_scores.push(dot(x, &qk));
            keys.extend_from_slice(&k);
            base_values.extend(backbone.m_v.matvec(x)?);
        }
        Ok(LsProblem {
            backbone,
            dataset,
            spec,
            theta_box,
            keys,
            base_scores,
            base_values,
        })
    }

    pub fn backbone(&self) -> &FixedBackbone {
        &self.backbone
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn spec(&self) -> &FamilySpec {
        &self.spec
    }

    pub fn theta_box(&self) -> f64 {
        self.theta_box
    }

    pub fn fitted_experts(&self) -> usize {
        self.spec.experts
    }

    fn check_params(&self, p: &FamilyParams) -> Result<()> {
        if p.family() != self.spec.family {
            return Err(Error::arg(format!(
                "parameters of family {} for a {} problem",
                p.family(),
                self.spec.family
            )));
        }
        if p.num_experts() != self.spec.experts || p.dim() != self.spec.dim || p.rank() != self.spec.rank {
            return Err(Error::shape(
                "LsProblem",
                format!("L'={} d={} r={}", self.spec.experts, self.spec.dim, self.spec.rank),
                format!("L'={} d={} r={}", p.num_experts(), p.dim(), p.rank()),
            ));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Which analytic gradient term to drop. Only used to check that the
/// gradient verification catches a broken chain rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientTerm {
    GateScore,
    ExpertValue,
    LogWeight,
}

struct Materialized {
    c: Vec<f64>,
    gate: Vec<Mat>,
    expert: Vec<Mat>,
}

fn materialize_all(p: &FamilyParams) -> Result<Materialized> {
    let l = p.num_experts();
    let mut m = Materialized {
        c: p.log_weights(),
        gate: Vec::with_capacity(l),
        expert: Vec::with_capacity(l),
    };
    for j in 0..l {
        let (g, e) = p.materialize(j)?;
        m.gate.push(g);
        m.expert.push(e);
    }
    Ok(m)
}

struct Grads {
    c: Vec<f64>,
    gate: Vec<Mat>,
    expert: Vec<Mat>,
}

/// Sum of squared residuals, and optionally its gradient w.r.t. the
/// materialized `(c_j, gate_delta_j, expert_delta_j)`.
fn evaluate(problem: &LsProblem, m: &Materialized, want_grad: bool, drop: Option<GradientTerm>) -> (f64, Option<Grads>) {
    let d = problem.spec.dim;
    let l = m.c.len();
    let n = problem.dataset.len();
    let mut grads = want_grad.then(|| Grads {
        c: vec![0.0; l],
        gate: vec![Mat::zeros(d, d); l],
        expert: vec![Mat::zeros(d, d); l],
    });
    let mut s = vec![0.0; l];
    let mut e = vec![0.0; l * d];
    let mut f = vec![0.0; d];
    let mut r = vec![0.0; d];
    let mut total = 0.0;
    for i in 0..n {
        let x = problem.dataset.xs.row(i);
        let y = problem.dataset.ys.row(i);
        let k = &problem.keys[i * d..(i + 1) * d];
        let v0 = &problem.base_values[i * d..(i + 1) * d];
        let s0 = problem.base_scores[i];
        let mut smax = f64::NEG_INFINITY;
        for j in 0..l {
            let g = m.gate[j].data();
            let ev = m.expert[j].data();
            let mut sj = s0 + m.c[j];
            for a in 0..d {
                let row = &g[a * d..(a + 1) * d];
                sj += x[a] * dot(row, k);
                e[j * d + a] = v0[a] + dot(&ev[a * d..(a + 1) * d], x);
            }
            s[j] = sj;
            smax = smax.max(sj);
        }
        let mut z = 0.0;
        for sj in s.iter_mut() {
            *sj = (*sj - smax).exp();
            z += *sj;
        }
        f.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..l {
            s[j] /= z;
            for a in 0..d {
                f[a] += s[j] * e[j * d + a];
            }
        }
        for a in 0..d {
            r[a] = f[a] - y[a];
        }
        total += dot(&r, &r);
        let Some(gr) = grads.as_mut() else { continue };
        let rf = dot(&r, &f);
        for j in 0..l {
            let w = s[j];
            // d/ds_j of |f - y|^2 = 2 w_j r^T (e_j - f)
            let g_s = 2.0 * w * (dot(&r, &e[j * d..(j + 1) * d]) - rf);
            if drop != Some(GradientTerm::LogWeight) {
                gr.c[j] += g_s;
            }
            if drop != Some(GradientTerm::GateScore) {
                let dg = gr.gate[j].data_mut();
                for a in 0..d {
                    let ga = g_s * x[a];
                    for b in 0..d {
                        dg[a * d + b] += ga * k[b];
                    }
                }
            }
            if drop != Some(GradientTerm::ExpertValue) {
                let de = gr.expert[j].data_mut();
                for a in 0..d {
                    let ra = 2.0 * w * r[a];
                    for b in 0..d {
                        de[a * d + b] += ra * x[b];
                    }
                }
            }
        }
    }
    (total, grads)
}

/// `sum_i |Y_i - f_G(X_i)|^2`.
pub fn objective(problem: &LsProblem, params: &FamilyParams) -> Result<f64> {
    problem.check_params(params)?;
    let m = materialize_all(params)?;
    Ok(evaluate(problem, &m, false, None).0)
}

/// Objective and its analytic gradient, in the layout of `params`.
pub fn objective_and_gradient(problem: &LsProblem, params: &FamilyParams) -> Result<(f64, FamilyParams)> {
    objective_and_gradient_inner(problem, params, None)
}

fn objective_and_gradient_inner(
    problem: &LsProblem,
    params: &FamilyParams,
    drop: Option<GradientTerm>,
) -> Result<(f64, FamilyParams)> {
    problem.check_params(params)?;
    let m = materialize_all(params)?;
    let (obj, grads) = evaluate(problem, &m, true, drop);
    let g = grads.expect("gradient requested");
    Ok((obj, params.backprop(&g.c, &g.gate, &g.expert)?))
}

pub fn gradient(problem: &LsProblem, params: &FamilyParams) -> Result<FamilyParams> {
    Ok(objective_and_gradient(problem, params)?.1)
}

/// Analytic gradient with one chain-rule term removed.
pub fn gradient_without(problem: &LsProblem, params: &FamilyParams, term: GradientTerm) -> Result<FamilyParams> {
    Ok(objective_and_gradient_inner(problem, params, Some(term))?.1)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_difference(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::arg(format!("step h must be > 0, got {h}")));
    }
    let mut p = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = f(&p)?;
        p[i] = x[i] - h;
        let down = f(&p)?;
        p[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

pub fn fd_gradient(problem: &LsProblem, params: &FamilyParams, h: f64) -> Result<FamilyParams> {
    problem.check_params(params)?;
    let flat = params.flatten();
    let mut scratch = params.clone();
    let g = central_difference(
        |p| {
            let mut q = scratch.clone();
            q.assign_flat(p)?;
            objective(problem, &q)
        },
        &flat,
        h,
    )?;
    scratch.assign_flat(&g)?;
    Ok(scratch)
}

/// Shifts all log-weights so that `logsumexp(c) = 0`. The regression
/// function is unchanged; only the softmax gauge is fixed.
pub fn normalize_log_weights(p: &mut FamilyParams) {
    let c = p.log_weights();
    let max = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + c.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (j, v) in c.iter().enumerate() {
        p.set_log_weight(j, v - lse);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InitMode {
    /// Uniform in `[-box/10, box/10]`.
    Random,
    /// Start at the given parameters; extra fitted atoms are random.
    Oracle { truth: FamilyParams },
    /// Truth plus `N(0, delta^2)` on every parameter; extra atoms random.
    Warm { truth: FamilyParams, delta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub step: f64,
    pub steps: usize,
    pub restarts: usize,
    pub init: InitMode,
    pub seed: u64,
    /// Final learning rate as a fraction of `step` (cosine schedule).
    #[serde(default = "default_final_lr")]
    pub final_lr_fraction: f64,
    #[serde(default = "default_true")]
    pub normalize_weights: bool,
}

fn default_final_lr() -> f64 {
    0.01
}

fn default_true() -> bool {
    true
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            step: 1e-2,
            steps: 5000,
            restarts: 10,
            init: InitMode::Random,
            seed: 0,
            final_lr_fraction: default_final_lr(),
            normalize_weights: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub measure: MixingMeasure,
    pub raw_params: FamilyParams,
    /// Best objective seen so far, one entry per step plus the final value.
    pub objective_trace: Vec<f64>,
    pub final_objective: f64,
    pub restarts_used: usize,
    pub restarts_discarded: usize,
    pub best_restart: usize,
    pub seed: u64,
}

impl FitResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// `step,objective` rows.
    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,objective")?;
        for (i, v) in self.objective_trace.iter().enumerate() {
            writeln!(w, "{i},{v:?}")?;
        }
        Ok(())
    }
}

/// Stream id of restart `k`; restarts never share a stream.
const RESTART_STREAM_BASE: u64 = 0x1000;

/// Initial parameters of restart `k`.
pub fn initial_params(problem: &LsProblem, opts: &FitOptions, k: usize) -> Result<FamilyParams> {
    let spec = &problem.spec;
    let mut rng = RngStream::new(opts.seed, RESTART_STREAM_BASE + k as u64);
    let scale = problem.theta_box / 10.0;
    let mut p = match &opts.init {
        InitMode::Random => spec.sample(&mut rng, scale)?,
        InitMode::Oracle { truth } | InitMode::Warm { truth, .. } => {
            if truth.family() != spec.family {
                return Err(Error::arg(format!(
                    "initial truth of family {} for a {} problem",
                    truth.family(),
                    spec.family
                )));
            }
            let l = truth.num_experts();
            if l > spec.experts {
                return Err(Error::arg(format!(
                    "truth has {l} atoms but only {} are fitted",
                    spec.experts
                )));
            }
            // Extra atoms split true atoms round-robin; copies share the weight.
            let order: Vec<usize> = (0..spec.experts).map(|j| j % l).collect();
            let mut p = truth.permute_experts(&order);
            for (j, &src) in order.iter().enumerate() {
                let copies = order.iter().filter(|&&o| o == src).count();
                p.set_log_weight(j, truth.log_weight(src) - (copies as f64).ln());
            }
            if let InitMode::Warm { delta, .. } = opts.init {
                if !(delta >= 0.0) {
                    return Err(Error::arg(format!("warm-start delta must be >= 0, got {delta}")));
                }
                p.visit_mut(&mut |s| {
                    for v in s.iter_mut() {
                        *v += delta * rng.standard_normal();
                    }
                });
            }
            p
        }
    };
    p.project_box(problem.theta_box);
    p.validate()?;
    Ok(p)
}

struct RestartOutcome {
    params: FamilyParams,
    trace: Vec<f64>,
    best: f64,
}

fn cosine_lr(base: f64, floor: f64, t: usize, total: usize) -> f64 {
    let progress = if total <= 1 { 0.0 } else { t as f64 / (total - 1) as f64 };
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

fn run_restart(problem: &LsProblem, opts: &FitOptions, k: usize) -> Result<Option<RestartOutcome>> {
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut p = initial_params(problem, opts, k)?;
    if opts.normalize_weights {
        normalize_log_weights(&mut p);
        p.project_box(problem.theta_box);
    }
    let mut x = p.flatten();
    let mut m1 = vec![0.0; x.len()];
    let mut m2 = vec![0.0; x.len()];
    let mut best = f64::INFINITY;
    let mut best_x = x.clone();
    let mut trace = Vec::with_capacity(opts.steps + 1);
    for t in 0..opts.steps {
        p.assign_flat(&x)?;
        let (obj, g) = objective_and_gradient(problem, &p)?;
        if !obj.is_finite() {
            warn!("restart {k} diverged at step {t}; discarding it");
            return Ok(None);
        }
        if obj < best {
            best = obj;
            best_x.copy_from_slice(&x);
        }
        trace.push(best);
        let g = g.flatten();
        let lr = cosine_lr(opts.step, opts.final_lr_fraction, t, opts.steps);
        let (c1, c2) = (1.0 - b1.powi(t as i32 + 1), 1.0 - b2.powi(t as i32 + 1));
        for i in 0..x.len() {
            m1[i] = b1 * m1[i] + (1.0 - b1) * g[i];
            m2[i] = b2 * m2[i] + (1.0 - b2) * g[i] * g[i];
            x[i] -= lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
        }
        p.assign_flat(&x)?;
        if opts.normalize_weights {
            normalize_log_weights(&mut p);
        }
        p.project_box(problem.theta_box);
        x = p.flatten();
    }
    p.assign_flat(&x)?;
    let obj = objective(problem, &p)?;
    if !obj.is_finite() {
        warn!("restart {k} ended with a non-finite objective; discarding it");
        return Ok(None);
    }
    if obj < best {
        best = obj;
        best_x.copy_from_slice(&x);
    }
    trace.push(best);
    p.assign_flat(&best_x)?;
    debug!("restart {k}: objective {best:e}");
    Ok(Some(RestartOutcome { params: p, trace, best }))
}

/// Multi-restart Adam with cosine decay and projection onto the parameter
/// box. Returns the restart with the lowest objective (earliest on ties).
pub fn fit(problem: &LsProblem, opts: &FitOptions) -> Result<FitResult> {
    if opts.steps == 0 || opts.restarts == 0 {
        return Err(Error::arg("steps and restarts must both be >= 1"));
    }
    if !(opts.step > 0.0) || !(0.0..=1.0).contains(&opts.final_lr_fraction) {
        return Err(Error::arg("step must be > 0 and final_lr_fraction within [0, 1]"));
    }
    let outcomes = (0..opts.restarts)
        .into_par_iter()
        .map(|k| run_restart(problem, opts, k))
        .collect::<Result<Vec<_>>>()?;
    let discarded = outcomes.iter().filter(|o| o.is_none()).count();
    let (best_restart, best) = outcomes
        .into_iter()
        .enumerate()
        .filter_map(|(k, o)| o.map(|o| (k, o)))
        .reduce(|a, b| if b.1.best < a.1.best { b } else { a })
        .ok_or_else(|| Error::Optimization(format!("all {} restarts diverged", opts.restarts)))?;
    Ok(FitResult {
        measure: best.params.to_measure()?,
        final_objective: best.best,
        raw_params: best.params,
        objective_trace: best.trace,
        restarts_used: opts.restarts,
        restarts_discarded: discarded,
        best_restart,
        seed: opts.seed,
    })
}

/// Problem with the default parameter box.
pub fn problem(backbone: FixedBackbone, dataset: Dataset, spec: FamilySpec) -> Result<LsProblem> {
    LsProblem::new(backbone, dataset, spec, DEFAULT_THETA_BOX)
}
