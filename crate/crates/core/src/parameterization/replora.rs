//! Reparameterized low-rank adapters: the factors are produced by two small
//! MLPs (one for `A`, one for `B`), each with a shared trunk and separate
//! query/value heads, fed by learnable diagonal inputs.

use serde::{Deserialize, Serialize};

use super::{Activation, FreeExpert, FreeLowRank};
use crate::error::{Error, Result};
use crate::numerics::{Mat, RngStream};

pub const DEFAULT_HIDDEN: usize = 64;

/// `y = w x + b` with `w` of shape out x in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Affine {
    pub fn zeros(input: usize, output: usize) -> Self {
        Affine {
            w: Mat::zeros(output, input),
            b: vec![0.0; output],
        }
    }

    fn sample(input: usize, output: usize, rng: &mut RngStream, scale: f64) -> Self {
        let bound = scale / (input as f64).sqrt();
        Affine {
            w: rng.uniform_mat(-bound, bound, (output, input)),
            b: rng.uniform_vec(-bound, bound, output),
        }
    }

    fn input_dim(&self) -> usize {
        self.w.cols()
    }


    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.clone();
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += self.w.row(i).iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Affine) -> Vec<f64> {
        let input = self.input_dim();
        let mut dx = vec![0.0; input];
        for (i, &g) in dy.iter().enumerate() {
            grad.b[i] += g;
            let gw = &mut grad.w.data_mut()[i * input..(i + 1) * input];
            for k in 0..input {
                gw[k] += g * x[k];
                dx[k] += g * self.w.get(i, k);
            }
        }
        dx
    }

    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.w.data());
        f(&self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.w.data_mut());
        f(&mut self.b);
    }

    fn check(&self, input: usize, output: usize, name: &str) -> Result<()> {
        if self.w.shape() != (output, input) || self.b.len() != output {
            return Err(Error::arg(format!(
                "layer {name}: expected {output}x{input} weights and {output} biases, got {}x{} and {}",
                self.w.rows(),
                self.w.cols(),
                self.b.len()
            )));
        }
        Ok(())
    }
}

/// The four low-rank factors of a query/value adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankFactors {
    /// r x n_out
    pub a_q: Mat,
    /// r x n_out
    pub a_v: Mat,
    /// m_out x r
    pub b_q: Mat,
    /// m_out x r
    pub b_v: Mat,
}

/// Plain matrices left after discarding the reparameterizing MLPs.
pub type MergedAdapter = LowRankFactors;

impl LowRankFactors {
    pub fn gate_delta(&self) -> Result<Mat> {
        self.b_q.matmul(&self.a_q)
    }

    pub fn expert_delta(&self) -> Result<Mat> {
        self.b_v.matmul(&self.a_v)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: LowRankFactors = serde_json::from_str(s)?;
        let (r, n) = f.a_q.shape();
        let m = f.b_q.rows();
        if f.a_v.shape() != (r, n) || f.b_q.shape() != (m, r) || f.b_v.shape() != (m, r) {
            return Err(Error::arg("inconsistent adapter factor shapes"));
        }
        Ok(f)
    }
}

/// Reparameterizing network: trunk + two heads for `A`, trunk + two heads
/// for `B`. Pure function of its weights; the diagonal inputs live outside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepLoraNet {
    pub rank: usize,
    pub m_out: usize,
    pub n_out: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub trunk_a: Affine,
    pub trunk_b: Affine,
    pub head_aq: Affine,
    pub head_av: Affine,
    pub head_bq: Affine,
    pub head_bv: Affine,
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct NetCache {
    pre_a: Vec<f64>,
    hid_a: Vec<f64>,
    pre_b: Vec<f64>,
    hid_b: Vec<f64>,
}

impl RepLoraNet {
    pub fn zeros(rank: usize, m_out: usize, n_out: usize, hidden: usize, activation: Activation) -> Self {
        RepLoraNet {
            rank,
            m_out,
            n_out,
            hidden,
            activation,
            trunk_a: Affine::zeros(rank, hidden),
            trunk_b: Affine::zeros(rank, hidden),
            head_aq: Affine::zeros(hidden, rank * n_out),
            head_av: Affine::zeros(hidden, rank * n_out),
            head_bq: Affine::zeros(hidden, m_out * rank),
            head_bv: Affine::zeros(hidden, m_out * rank),
        }
    }

    /// Uniform fan-in scaled initialization.
    pub fn sample(
        rank: usize,
        m_out: usize,
        n_out: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut RngStream,
        scale: f64,
    ) -> Self {
        RepLoraNet {
            rank,
            m_out,
            n_out,
            hidden,
            activation,
            trunk_a: Affine::sample(rank, hidden, rng, scale),
            trunk_b: Affine::sample(rank, hidden, rng, scale),
            head_aq: Affine::sample(hidden, rank * n_out, rng, scale),
            head_av: Affine::sample(hidden, rank * n_out, rng, scale),
            head_bq: Affine::sample(hidden, m_out * rank, rng, scale),
            head_bv: Affine::sample(hidden, m_out * rank, rng, scale),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (r, h) = (self.rank, self.hidden);
        if r == 0 || h == 0 {
            return Err(Error::arg("rank and hidden width must be positive"));
        }
        self.trunk_a.check(r, h, "trunk_a")?;
        self.trunk_b.check(r, h, "trunk_b")?;
        self.head_aq.check(h, r * self.n_out, "head_aq")?;
        self.head_av.check(h, r * self.n_out, "head_av")?;
        self.head_bq.check(h, self.m_out * r, "head_bq")?;
        self.head_bv.check(h, self.m_out * r, "head_bv")?;
        Ok(())
    }

    pub(crate) fn forward(&self, a_diag: &[f64], b_diag: &[f64]) -> Result<(LowRankFactors, NetCache)> {
        if a_diag.len() != self.rank || b_diag.len() != self.rank {
            return Err(Error::shape(
                "RepLoraNet::forward",
                self.rank,
                format!("{} / {}", a_diag.len(), b_diag.len()),
            ));
        }
        let act = self.activation;
        let pre_a = self.trunk_a.apply(a_diag);
        let hid_a: Vec<f64> = pre_a.iter().map(|&v| act.apply(v)).collect();
        let pre_b = self.trunk_b.apply(b_diag);
        let hid_b: Vec<f64> = pre_b.iter().map(|&v| act.apply(v)).collect();
        let (r, m, n) = (self.rank, self.m_out, self.n_out);
        let factors = LowRankFactors {
            a_q: Mat::from_vec(r, n, self.head_aq.apply(&hid_a))?,
            a_v: Mat::from_vec(r, n, self.head_av.apply(&hid_a))?,
            b_q: Mat::from_vec(m, r, self.head_bq.apply(&hid_b))?,
            b_v: Mat::from_vec(m, r, self.head_bv.apply(&hid_b))?,
        };
        Ok((
            factors,
            NetCache {
                pre_a,
                hid_a,
                pre_b,
                hid_b,
            },
        ))
    }

    /// Vector-Jacobian product: accumulates weight gradients into `grad`
    /// and returns the gradients of the two diagonal inputs.
    pub(crate) fn backward(
        &self,
        a_diag: &[f64],
        b_diag: &[f64],
        cache: &NetCache,
        d: &LowRankFactors,
        grad: &mut RepLoraNet,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let d_act = self.activation.first_derivative()?;
        let mut d_hid_a = self.head_aq.backward(&cache.hid_a, d.a_q.data(), &mut grad.head_aq);
        let from_av = self.head_av.backward(&cache.hid_a, d.a_v.data(), &mut grad.head_av);
        for (x, y) in d_hid_a.iter_mut().zip(from_av) {
            *x += y;
        }
        let d_pre_a: Vec<f64> = d_hid_a
            .iter()
            .zip(&cache.pre_a)
            .map(|(g, &p)| g * d_act(p))
            .collect();
        let d_a_diag = self.trunk_a.backward(a_diag, &d_pre_a, &mut grad.trunk_a);

        let mut d_hid_b = self.head_bq.backward(&cache.hid_b, d.b_q.data(), &mut grad.head_bq);
        let from_bv = self.head_bv.backward(&cache.hid_b, d.b_v.data(), &mut grad.head_bv);
        for (x, y) in d_hid_b.iter_mut().zip(from_bv) {
            *x += y;
        }
        let d_pre_b: Vec<f64> = d_hid_b
            .iter()
            .zip(&cache.pre_b)
            .map(|(g, &p)| g * d_act(p))
            .collect();
        let d_b_diag = self.trunk_b.backward(b_diag, &d_pre_b, &mut grad.trunk_b);
        Ok((d_a_diag, d_b_diag))
    }

    fn zeros_like(&self) -> RepLoraNet {
        RepLoraNet::zeros(self.rank, self.m_out, self.n_out, self.hidden, self.activation)
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for layer in [
            &self.trunk_a,
            &self.trunk_b,
            &self.head_aq,
            &self.head_av,
            &self.head_bq,
            &self.head_bv,
        ] {
            layer.visit(f);
        }
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for layer in [
            &mut self.trunk_a,
            &mut self.trunk_b,
            &mut self.head_aq,
            &mut self.head_av,
            &mut self.head_bq,
            &mut self.head_bv,
        ] {
            layer.visit_mut(f);
        }
    }
}

/// A single RepLoRA adapter (e.g. for one attention head).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepLoraMlp {
    pub a_diag: Vec<f64>,
    pub b_diag: Vec<f64>,
    pub net: RepLoraNet,
}

impl RepLoraMlp {
    pub fn new(a_diag: Vec<f64>, b_diag: Vec<f64>, net: RepLoraNet) -> Result<Self> {
        net.validate()?;
        if a_diag.len() != net.rank || b_diag.len() != net.rank {
            return Err(Error::shape("RepLoraMlp", net.rank, a_diag.len().max(b_diag.len())));
        }
        Ok(RepLoraMlp { a_diag, b_diag, net })
    }

    pub fn sample(
        rank: usize,
        m_out: usize,
        n_out: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut RngStream,
    ) -> Self {
        let a_diag = rng.uniform_vec(-1.0, 1.0, rank);
        let b_diag = rng.uniform_vec(-1.0, 1.0, rank);
        let net = RepLoraNet::sample(rank, m_out, n_out, hidden, activation, rng, 1.0);
        RepLoraMlp { a_diag, b_diag, net }
    }

    /// Vector-Jacobian product of [`replora_materialize`] for every
    /// parameter, laid out as `(d_a_diag, d_b_diag, d_net)`.
    pub fn vjp(&self, d: &LowRankFactors) -> Result<(Vec<f64>, Vec<f64>, RepLoraNet)> {
        let (_, cache) = self.net.forward(&self.a_diag, &self.b_diag)?;
        let mut grad = self.net.zeros_like();
        let (da, db) = self.net.backward(&self.a_diag, &self.b_diag, &cache, d, &mut grad)?;
        Ok((da, db, grad))
    }

    pub fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(&self.a_diag);
        f(&self.b_diag);
        self.net.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.a_diag);
        f(&mut self.b_diag);
        self.net.visit_mut(f);
    }
}

/// Runs both MLPs and returns `(a_q, a_v, b_q, b_v)`.
pub fn replora_materialize(p: &RepLoraMlp) -> Result<LowRankFactors> {
    Ok(p.net.forward(&p.a_diag, &p.b_diag)?.0)
}

/// Materializes the adapter into plain matrices; the MLPs are no longer
/// needed afterwards.
pub fn merge_and_discard(p: &RepLoraMlp) -> Result<MergedAdapter> {
    replora_materialize(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepLoraExpert {
    pub c: f64,
    pub a_diag: Vec<f64>,
    pub b_diag: Vec<f64>,
}

/// RepLoRA as a regression family: one reparameterizing network shared by
/// all experts, each expert owning its diagonal inputs and log-weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepLoraExperts {
    pub net: RepLoraNet,
    pub experts: Vec<RepLoraExpert>,
}

impl RepLoraExperts {
    pub fn sample(
        dim: usize,
        rank: usize,
        experts: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut RngStream,
        scale: f64,
    ) -> Self {
        let net = RepLoraNet::sample(rank, dim, dim, hidden, activation, rng, scale);
        let experts = (0..experts)
            .map(|_| RepLoraExpert {
                c: rng.uniform(-scale, scale),
                a_diag: rng.uniform_vec(-scale, scale, rank),
                b_diag: rng.uniform_vec(-scale, scale, rank),
            })
            .collect();
        RepLoraExperts { net, experts }
    }

    pub fn dim(&self) -> usize {
        self.net.m_out
    }

    pub fn rank(&self) -> usize {
        self.net.rank
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.net.m_out != self.net.n_out {
            return Err(Error::arg("regression adapters must be square"));
        }
        if self.net.rank > self.net.m_out {
            return Err(Error::arg("rank exceeds dimension"));
        }
        if self.experts.is_empty() {
            return Err(Error::arg("RepLoRA family needs at least one expert"));
        }
        for e in &self.experts {
            if e.a_diag.len() != self.net.rank || e.b_diag.len() != self.net.rank {
                return Err(Error::shape("RepLoraExperts", self.net.rank, e.a_diag.len()));
            }
        }
        Ok(())
    }

    pub fn factors(&self, j: usize) -> Result<LowRankFactors> {
        let e = &self.experts[j];
        Ok(self.net.forward(&e.a_diag, &e.b_diag)?.0)
    }

    pub fn materialize(&self, j: usize) -> Result<(Mat, Mat)> {
        let f = self.factors(j)?;
        Ok((f.gate_delta()?, f.expert_delta()?))
    }

    /// Merged view as free factors, with the networks discarded.
    pub fn to_free_low_rank(&self) -> Result<FreeLowRank> {
        let experts = (0..self.experts.len())
            .map(|j| {
                let f = self.factors(j)?;
                Ok(FreeExpert {
                    c: self.experts[j].c,
                    b_q: f.b_q,
                    a_q: f.a_q,
                    b_v: f.b_v,
                    a_v: f.a_v,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FreeLowRank { experts })
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.net.visit(f);
        for e in &self.experts {
            f(std::slice::from_ref(&e.c));
            f(&e.a_diag);
            f(&e.b_diag);
        }
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.net.visit_mut(f);
        for e in &mut self.experts {
            f(std::slice::from_mut(&mut e.c));
            f(&mut e.a_diag);
            f(&mut e.b_diag);
        }
    }

    pub(crate) fn backprop(&self, d_c: &[f64], d_gate: &[Mat], d_expert: &[Mat]) -> Result<Self> {
        let mut grad_net = self.net.zeros_like();
        let mut experts = Vec::with_capacity(self.experts.len());
        for (j, e) in self.experts.iter().enumerate() {
            let (f, cache) = self.net.forward(&e.a_diag, &e.b_diag)?;
            let d = LowRankFactors {
                a_q: f.b_q.transpose().matmul(&d_gate[j])?,
                b_q: d_gate[j].matmul(&f.a_q.transpose())?,
                a_v: f.b_v.transpose().matmul(&d_expert[j])?,
                b_v: d_expert[j].matmul(&f.a_v.transpose())?,
            };
            let (da, db) = self.net.backward(&e.a_diag, &e.b_diag, &cache, &d, &mut grad_net)?;
            experts.push(RepLoraExpert {
                c: d_c[j],
                a_diag: da,
                b_diag: db,
            });
        }
        Ok(RepLoraExperts {
            net: grad_net,
            experts,
        })
    }
}
