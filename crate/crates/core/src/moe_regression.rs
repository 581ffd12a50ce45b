//! Ground-truth gated regression model: a frozen attention backbone, a
//! mixing measure of weighted expert atoms, synthetic data generation and
//! Monte-Carlo `L2(mu)` distances between regression functions.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Mat, RngStream};
use crate::parameterization::Family;

/// Frozen query/key/value matrices, all `d x d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedBackbone {
    pub m_q: Mat,
    pub m_k: Mat,
    pub m_v: Mat,
}

impl FixedBackbone {
    pub fn new(m_q: Mat, m_k: Mat, m_v: Mat) -> Result<Self> {
        let d = m_q.rows();
        for m in [&m_q, &m_k, &m_v] {
            if m.shape() != (d, d) {
                return Err(Error::shape(
                    "FixedBackbone",
                    format!("{d}x{d}"),
                    format!("{}x{}", m.rows(), m.cols()),
                ));
            }
        }
        Ok(FixedBackbone { m_q, m_k, m_v })
    }

    /// Entries i.i.d. `N(0, 1/d)`, drawn once from `seed`. With
    /// `identity_key` the key matrix is replaced by the identity.
    pub fn random(dim: usize, seed: u64, identity_key: bool) -> Result<Self> {
        let mut rng = RngStream::new(seed, 0);
        let std = 1.0 / (dim as f64).sqrt();
        let m_q = rng.gaussian(0.0, std, (dim, dim))?;
        let m_k = rng.gaussian(0.0, std, (dim, dim))?;
        let m_v = rng.gaussian(0.0, std, (dim, dim))?;
        let m_k = if identity_key { Mat::identity(dim) } else { m_k };
        FixedBackbone::new(m_q, m_k, m_v)
    }

    pub fn dim(&self) -> usize {
        self.m_q.rows()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let b: FixedBackbone = serde_json::from_str(s)?;
        FixedBackbone::new(b.m_q, b.m_k, b.m_v)
    }
}

/// One weighted expert: log-weight (gate bias) and materialized deltas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertAtom {
    pub log_weight: f64,
    pub gate_delta: Mat,
    pub expert_delta: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingMeasure {
    atoms: Vec<ExpertAtom>,
    family: Family,
}

impl MixingMeasure {
    pub fn new(atoms: Vec<ExpertAtom>, family: Family) -> Result<Self> {
        let first = atoms
            .first()
            .ok_or_else(|| Error::arg("a mixing measure needs at least one atom"))?;
        let d = first.gate_delta.rows();
        for a in &atoms {
            for m in [&a.gate_delta, &a.expert_delta] {
                if m.shape() != (d, d) {
                    return Err(Error::shape(
                        "MixingMeasure",
                        format!("{d}x{d}"),
                        format!("{}x{}", m.rows(), m.cols()),
                    ));
                }
            }
            if !a.log_weight.is_finite() {
                return Err(Error::arg("log-weight is not finite"));
            }
            if family.is_shared() && a.gate_delta != a.expert_delta {
                return Err(Error::arg(format!(
                    "family {family} requires gate_delta == expert_delta"
                )));
            }
        }
        Ok(MixingMeasure { atoms, family })
    }

    pub fn atoms(&self) -> &[ExpertAtom] {
        &self.atoms
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].gate_delta.rows()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: MixingMeasure = serde_json::from_str(s)?;
        MixingMeasure::new(m.atoms, m.family)
    }
}

fn check_dims(backbone: &FixedBackbone, g: &MixingMeasure, x: &[f64]) -> Result<()> {
    let d = backbone.dim();
    if g.dim() != d {
        return Err(Error::shape("regression_fn", format!("measure dim {d}"), g.dim()));
    }
    if x.len() != d {
        return Err(Error::shape("regression_fn", format!("input dim {d}"), x.len()));
    }
    Ok(())
}

/// Gate scores `x^T (M_Q + gate_delta_j) M_K x + c_j` and expert outputs
/// `(M_V + expert_delta_j) x`.
fn scores_and_experts(backbone: &FixedBackbone, g: &MixingMeasure, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let k = backbone.m_k.matvec(x)?;
    let mut scores = Vec::with_capacity(g.len());
    let mut experts = Vec::with_capacity(g.len());
    for atom in g.atoms() {
        let gate = backbone.m_q.add(&atom.gate_delta)?;
        let gk = gate.matvec(&k)?;
        let s: f64 = x.iter().zip(&gk).map(|(a, b)| a * b).sum::<f64>() + atom.log_weight;
        if !s.is_finite() {
            return Err(Error::Internal(format!("non-finite gate score {s}")));
        }
        scores.push(s);
        experts.push(backbone.m_v.add(&atom.expert_delta)?.matvec(x)?);
    }
    Ok((scores, experts))
}

/// Softmax gating weights over the atoms at input `x`.
pub fn gate_weights(backbone: &FixedBackbone, g: &MixingMeasure, x: &[f64]) -> Result<Vec<f64>> {
    check_dims(backbone, g, x)?;
    let (mut s, _) = scores_and_experts(backbone, g, x)?;
    softmax_in_place(&mut s);
    Ok(s)
}

/// `f_G(x) = sum_j softmax_j(score) * (M_V + expert_delta_j) x`.
pub fn regression_fn(backbone: &FixedBackbone, g: &MixingMeasure, x: &[f64]) -> Result<Vec<f64>> {
    check_dims(backbone, g, x)?;
    let (mut s, experts) = scores_and_experts(backbone, g, x)?;
    softmax_in_place(&mut s);
    let mut out = vec![0.0; x.len()];
    for (w, e) in s.iter().zip(&experts) {
        for (o, v) in out.iter_mut().zip(e) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Input distribution with bounded support.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputDist {
    /// Independent coordinates, uniform on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
}

impl Default for InputDist {
    fn default() -> Self {
        InputDist::Uniform { lo: -1.0, hi: 1.0 }
    }
}

impl InputDist {
    pub fn validate(&self) -> Result<()> {
        match *self {
            InputDist::Uniform { lo, hi } if lo.is_finite() && hi.is_finite() && lo < hi => Ok(()),
            _ => Err(Error::arg(format!("invalid input distribution {self:?}"))),
        }
    }

    pub fn sample(&self, rng: &mut RngStream, n: usize, d: usize) -> Mat {
        match *self {
            InputDist::Uniform { lo, hi } => rng.uniform_mat(lo, hi, (n, d)),
        }
    }

    /// `E ||x||^2` under the distribution.
    pub fn mean_sq_norm(&self, d: usize) -> f64 {
        match *self {
            InputDist::Uniform { lo, hi } => d as f64 * (lo * lo + lo * hi + hi * hi) / 3.0,
        }
    }
}

/// `n` samples `y_i = f_{G*}(x_i) + eps_i`, `eps_i ~ N(0, nu^2 I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub xs: Mat,
    pub ys: Mat,
    pub noise_std: f64,
    pub seed: u64,
}

const INPUT_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

impl Dataset {
    pub fn len(&self) -> usize {
        self.xs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.xs.cols()
    }

    /// Concatenates another dataset of the same dimension.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if other.dim() != self.dim() {
            return Err(Error::shape("Dataset::concat", self.dim(), other.dim()));
        }
        let d = self.dim();
        let n = self.len() + other.len();
        let xs = Mat::from_vec(n, d, [self.xs.data(), other.xs.data()].concat())?;
        let ys = Mat::from_vec(n, d, [self.ys.data(), other.ys.data()].concat())?;
        Ok(Dataset {
            xs,
            ys,
            noise_std: self.noise_std,
            seed: self.seed,
        })
    }

    /// CSV with header `x_0..x_{d-1},y_0..y_{d-1}`, one row per sample.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let d = self.dim();
        let mut out = csv::Writer::from_writer(w);
        let header: Vec<String> = (0..d)
            .map(|i| format!("x_{i}"))
            .chain((0..d).map(|i| format!("y_{i}")))
            .collect();
        out.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let row: Vec<String> = self
                .xs
                .row(i)
                .iter()
                .chain(self.ys.row(i))
                .map(|v| format!("{v:?}"))
                .collect();
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`Dataset::write_csv`]; noise level and seed
    /// are not part of the file and must be supplied.
    pub fn read_csv<R: Read>(r: R, noise_std: f64, seed: u64) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers().map_err(csv_err)?.clone();
        if header.len() % 2 != 0 || header.is_empty() {
            return Err(Error::arg("dataset header must have 2d columns"));
        }
        let d = header.len() / 2;
        for i in 0..d {
            if header[i] != *format!("x_{i}") || header[d + i] != *format!("y_{i}") {
                return Err(Error::arg(format!("unexpected dataset header {header:?}")));
            }
        }
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != 2 * d {
                return Err(Error::shape("Dataset::read_csv", 2 * d, rec.len()));
            }
            for (i, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::arg(format!("bad number `{field}`")))?;
                if i < d {
                    xs.push(v)
                } else {
                    ys.push(v)
                }
            }
        }
        let n = xs.len() / d;
        if n == 0 {
            return Err(Error::arg("dataset is empty"));
        }
        Ok(Dataset {
            xs: Mat::from_vec(n, d, xs)?,
            ys: Mat::from_vec(n, d, ys)?,
            noise_std,
            seed,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::arg(format!("CSV error: {other:?}")),
    }
}

pub fn gen_dataset(
    backbone: &FixedBackbone,
    g_star: &MixingMeasure,
    n: usize,
    noise_std: f64,
    input_dist: InputDist,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::arg("dataset size must be >= 1"));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::arg(format!("noise std must be >= 0, got {noise_std}")));
    }
    input_dist.validate()?;
    let d = backbone.dim();
    if g_star.dim() != d {
        return Err(Error::shape("gen_dataset", d, g_star.dim()));
    }
    let xs = input_dist.sample(&mut RngStream::new(seed, INPUT_STREAM), n, d);
    let noise = RngStream::new(seed, NOISE_STREAM).gaussian(0.0, noise_std, (n, d))?;
    let mut ys = Vec::with_capacity(n * d);
    for i in 0..n {
        let f = regression_fn(backbone, g_star, xs.row(i))?;
        ys.extend(f.iter().zip(noise.row(i)).map(|(a, b)| a + b));
    }
    Ok(Dataset {
        xs,
        ys: Mat::from_vec(n, d, ys)?,
        noise_std,
        seed,
    })
}

/// Monte-Carlo estimate of `||f_{g1} - f_{g2}||_{L2(mu)}` from `m_samples`
/// inputs drawn from `input_dist`.
pub fn l2_mu_distance(
    backbone: &FixedBackbone,
    g1: &MixingMeasure,
    g2: &MixingMeasure,
    m_samples: usize,
    input_dist: InputDist,
    seed: u64,
) -> Result<f64> {
    Ok(l2_mu_distance_with_stderr(backbone, g1, g2, m_samples, input_dist, seed)?.0)
}

/// Same as [`l2_mu_distance`], also returning the standard error of the
/// mean squared gap.
pub fn l2_mu_distance_with_stderr(
    backbone: &FixedBackbone,
    g1: &MixingMeasure,
    g2: &MixingMeasure,
    m_samples: usize,
    input_dist: InputDist,
    seed: u64,
) -> Result<(f64, f64)> {
    if m_samples == 0 {
        return Err(Error::arg("m_samples must be >= 1"));
    }
    if g1.dim() != g2.dim() {
        return Err(Error::shape("l2_mu_distance", g1.dim(), g2.dim()));
    }
    let d = backbone.dim();
    let xs = input_dist.sample(&mut RngStream::new(seed, INPUT_STREAM), m_samples, d);
    let mut sq = Vec::with_capacity(m_samples);
    for i in 0..m_samples {
        let a = regression_fn(backbone, g1, xs.row(i))?;
        let b = regression_fn(backbone, g2, xs.row(i))?;
        sq.push(a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>());
    }
    let m = m_samples as f64;
    let mean = sq.iter().sum::<f64>() / m;
    let var = if m_samples > 1 {
        sq.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    Ok((mean.sqrt(), (var / m).sqrt()))
}
