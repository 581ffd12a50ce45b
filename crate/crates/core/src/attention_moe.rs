//! Multi-head self-attention, its LoRA-adapted form, and the per-head
//! mixture-of-experts reading of the same computation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Mat, RngStream};
use crate::parameterization::{replora_materialize, RepLoraMlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    /// d x d_k
    pub w_q: Mat,
    /// d x d_k
    pub w_k: Mat,
    /// d x d_v
    pub w_v: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsaWeights {
    pub heads: Vec<HeadWeights>,
    /// (m d_v) x d
    pub w_o: Mat,
}

impl MsaWeights {
    pub fn new(heads: Vec<HeadWeights>, w_o: Mat) -> Result<Self> {
        let w = MsaWeights { heads, w_o };
        w.validate()?;
        Ok(w)
    }

    /// Entries i.i.d. `N(0, 1/d)`.
    pub fn random(d: usize, m: usize, rng: &mut RngStream) -> Result<Self> {
        if m == 0 || d % m != 0 {
            return Err(Error::arg(format!("model width {d} is not divisible by {m} heads")));
        }
        let dh = d / m;
        let std = 1.0 / (d as f64).sqrt();
        let heads = (0..m)
            .map(|_| {
                Ok(HeadWeights {
                    w_q: rng.gaussian(0.0, std, (d, dh))?,
                    w_k: rng.gaussian(0.0, std, (d, dh))?,
                    w_v: rng.gaussian(0.0, std, (d, dh))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MsaWeights::new(heads, rng.gaussian(0.0, std, (d, d))?)
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn model_dim(&self) -> usize {
        self.w_o.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.num_heads().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.heads.len();
        let d = self.w_o.cols();
        if m == 0 || d % m != 0 {
            return Err(Error::arg(format!("model width {d} is not divisible by {m} heads")));
        }
        let dh = d / m;
        if self.w_o.rows() != m * dh {
            return Err(Error::shape("MsaWeights w_o", format!("{}x{d}", m * dh), self.w_o.rows()));
        }
        for h in &self.heads {
            for w in [&h.w_q, &h.w_k, &h.w_v] {
                if w.shape() != (d, dh) {
                    return Err(Error::shape(
                        "MsaWeights head",
                        format!("{d}x{dh}"),
                        format!("{}x{}", w.rows(), w.cols()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let w: MsaWeights = serde_json::from_str(s)?;
        w.validate()?;
        Ok(w)
    }
}

/// Query/value adapter of one head: `W_Q + scale B_Q A_Q`,
/// `W_V + scale B_V A_V`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadAdapter {
    /// d x r
    pub b_q: Mat,
    /// r x d_k
    pub a_q: Mat,
    /// d x r
    pub b_v: Mat,
    /// r x d_v
    pub a_v: Mat,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl HeadAdapter {
    pub fn zeros(d: usize, dh: usize, r: usize) -> Self {
        HeadAdapter {
            b_q: Mat::zeros(d, r),
            a_q: Mat::zeros(r, dh),
            b_v: Mat::zeros(d, r),
            a_v: Mat::zeros(r, dh),
            scale: 1.0,
        }
    }

    pub fn random(d: usize, dh: usize, r: usize, rng: &mut RngStream) -> Self {
        HeadAdapter {
            b_q: rng.uniform_mat(-1.0, 1.0, (d, r)),
            a_q: rng.uniform_mat(-1.0, 1.0, (r, dh)),
            b_v: rng.uniform_mat(-1.0, 1.0, (d, r)),
            a_v: rng.uniform_mat(-1.0, 1.0, (r, dh)),
            scale: 1.0,
        }
    }

    /// Adapter whose factors come from a RepLoRA network with
    /// `m_out = d` and `n_out = d_k`.
    pub fn from_replora(p: &RepLoraMlp, scale: f64) -> Result<Self> {
        let f = replora_materialize(p)?;
        Ok(HeadAdapter {
            b_q: f.b_q,
            a_q: f.a_q,
            b_v: f.b_v,
            a_v: f.a_v,
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.b_q.cols()
    }

    fn check(&self, d: usize, dh: usize) -> Result<()> {
        let r = self.rank();
        if r > d.min(dh) {
            return Err(Error::arg(format!("adapter rank {r} exceeds min({d}, {dh})")));
        }
        for (m, want) in [
            (&self.b_q, (d, r)),
            (&self.a_q, (r, dh)),
            (&self.b_v, (d, r)),
            (&self.a_v, (r, dh)),
        ] {
            if m.shape() != want {
                return Err(Error::shape(
                    "HeadAdapter",
                    format!("{}x{}", want.0, want.1),
                    format!("{}x{}", m.rows(), m.cols()),
                ));
            }
        }
        if !self.scale.is_finite() {
            return Err(Error::arg("adapter scale is not finite"));
        }
        Ok(())
    }

    fn query_delta(&self) -> Result<Mat> {
        Ok(self.b_q.matmul(&self.a_q)?.scale(self.scale))
    }

    fn value_delta(&self) -> Result<Mat> {
        Ok(self.b_v.matmul(&self.a_v)?.scale(self.scale))
    }
}

/// N tokens of width d, one per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub x: Mat,
}

impl TokenSequence {
    pub fn new(x: Mat) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::arg("a token sequence needs at least one token"));
        }
        Ok(TokenSequence { x })
    }

    pub fn random(n: usize, d: usize, rng: &mut RngStream) -> Result<Self> {
        TokenSequence::new(rng.uniform_mat(-1.0, 1.0, (n, d)))
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

fn check_input(x: &TokenSequence, w: &MsaWeights) -> Result<()> {
    if x.x.cols() != w.model_dim() {
        return Err(Error::shape("attention input", w.model_dim(), x.x.cols()));
    }
    Ok(())
}

fn check_adapters(w: &MsaWeights, adapters: &[HeadAdapter]) -> Result<()> {
    if adapters.len() != w.num_heads() {
        return Err(Error::arg(format!(
            "{} adapters for {} heads",
            adapters.len(),
            w.num_heads()
        )));
    }
    for a in adapters {
        a.check(w.model_dim(), w.head_dim())?;
    }
    Ok(())
}

fn row_softmax(mut s: Mat) -> Mat {
    let cols = s.cols();
    for row in s.data_mut().chunks_mut(cols) {
        softmax_in_place(row);
    }
    s
}

/// `softmax(Q K^T / sqrt(d_v)) V` for one head.
fn attend(q: &Mat, k: &Mat, v: &Mat) -> Result<Mat> {
    let scale = 1.0 / (v.cols() as f64).sqrt();
    row_softmax(q.matmul(&k.transpose())?.scale(scale)).matmul(v)
}

/// Per-head outputs (N x d_v each) before the output projection. With
/// adapters, the low-rank paths are applied unmerged: `X W + s (X B) A`.
pub fn attention_heads(x: &TokenSequence, w: &MsaWeights, adapters: Option<&[HeadAdapter]>) -> Result<Vec<Mat>> {
    check_input(x, w)?;
    if let Some(a) = adapters {
        check_adapters(w, a)?;
    }
    w.heads
        .iter()
        .enumerate()
        .map(|(l, h)| {
            let mut q = x.x.matmul(&h.w_q)?;
            let k = x.x.matmul(&h.w_k)?;
            let mut v = x.x.matmul(&h.w_v)?;
            if let Some(a) = adapters.map(|a| &a[l]) {
                q.add_scaled(a.scale, &x.x.matmul(&a.b_q)?.matmul(&a.a_q)?)?;
                v.add_scaled(a.scale, &x.x.matmul(&a.b_v)?.matmul(&a.a_v)?)?;
            }
            attend(&q, &k, &v)
        })
        .collect()
}

fn project(heads: &[Mat], w_o: &Mat) -> Result<Mat> {
    let n = heads[0].rows();
    let dh = heads[0].cols();
    let concat = Mat::from_fn(n, dh * heads.len(), |i, c| heads[c / dh].get(i, c % dh));
    concat.matmul(w_o)
}

pub fn msa_forward(x: &TokenSequence, w: &MsaWeights) -> Result<Mat> {
    project(&attention_heads(x, w, None)?, &w.w_o)
}

pub fn lora_msa_forward(x: &TokenSequence, w: &MsaWeights, adapters: &[HeadAdapter]) -> Result<Mat> {
    project(&attention_heads(x, w, Some(adapters))?, &w.w_o)
}

/// Gating weights `softmax_j(s_{i,j})` of head `l` read as an MoE: one row
/// per token `i`, one column per expert `j`.
pub fn moe_head_gates(x: &TokenSequence, w: &MsaWeights, l: usize, adapter: Option<&HeadAdapter>) -> Result<Mat> {
    Ok(moe_head_parts(x, w, l, adapter)?.0)
}

fn moe_head_parts(
    x: &TokenSequence,
    w: &MsaWeights,
    l: usize,
    adapter: Option<&HeadAdapter>,
) -> Result<(Mat, Mat)> {
    check_input(x, w)?;
    let h = w
        .heads
        .get(l)
        .ok_or_else(|| Error::arg(format!("head {l} out of range ({} heads)", w.num_heads())))?;
    let (mut wq, mut wv) = (h.w_q.clone(), h.w_v.clone());
    if let Some(a) = adapter {
        a.check(w.model_dim(), w.head_dim())?;
        wq.add_scaled(1.0, &a.query_delta()?)?;
        wv.add_scaled(1.0, &a.value_delta()?)?;
    }
    let n = x.len();
    let dv = wv.cols();
    // Score matrix W_Q W_K^T (d x d) and the experts f_j = W_V^T x_j.
    let score = wq.matmul(&h.w_k.transpose())?;
    let wvt = wv.transpose();
    let experts: Vec<Vec<f64>> = (0..n).map(|j| wvt.matvec(x.x.row(j))).collect::<Result<_>>()?;
    let inv = 1.0 / (dv as f64).sqrt();
    let mut gates = Mat::zeros(n, n);
    for i in 0..n {
        let sx = score.transpose().matvec(x.x.row(i))?;
        let mut s: Vec<f64> = (0..n)
            .map(|j| x.x.row(j).iter().zip(&sx).map(|(a, b)| a * b).sum::<f64>() * inv)
            .collect();
        softmax_in_place(&mut s);
        for (j, v) in s.into_iter().enumerate() {
            gates.set(i, j, v);
        }
    }
    let out = Mat::from_fn(n, dv, |i, c| (0..n).map(|j| gates.get(i, j) * experts[j][c]).sum());
    Ok((gates, out))
}

/// Head `l` computed token by token as a mixture of `N` experts
/// `f_j = W_V^T x_j` with scores `x_i^T W_Q W_K^T x_j / sqrt(d_v)`.
pub fn moe_head_forward(x: &TokenSequence, w: &MsaWeights, l: usize, adapter: Option<&HeadAdapter>) -> Result<Mat> {
    Ok(moe_head_parts(x, w, l, adapter)?.1)
}

/// Base weights with `scale B A` added to every query and value matrix.
/// Merging twice adds the deltas twice.
pub fn merge_adapter(w: &MsaWeights, adapters: &[HeadAdapter]) -> Result<MsaWeights> {
    check_adapters(w, adapters)?;
    let heads = w
        .heads
        .iter()
        .zip(adapters)
        .map(|(h, a)| {
            Ok(HeadWeights {
                w_q: h.w_q.add(&a.query_delta()?)?,
                w_k: h.w_k.clone(),
                w_v: h.w_v.add(&a.value_delta()?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MsaWeights::new(heads, w.w_o.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct triple-loop evaluation of multi-head attention.
    fn naive_msa(x: &Mat, w: &MsaWeights) -> Mat {
        let (n, d) = x.shape();
        let m = w.num_heads();
        let dh = d / m;
        let mut concat = vec![vec![0.0; m * dh]; n];
        for (l, h) in w.heads.iter().enumerate() {
            let proj = |mat: &Mat, i: usize, c: usize| (0..d).map(|a| x.get(i, a) * mat.get(a, c)).sum::<f64>();
            for i in 0..n {
                let mut scores = vec![0.0; n];
                for j in 0..n {
                    for c in 0..dh {
                        scores[j] += proj(&h.w_q, i, c) * proj(&h.w_k, j, c);
                    }
                    scores[j] /= (dh as f64).sqrt();
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..n {
                    let p = (scores[j] - mx).exp() / z;
                    for c in 0..dh {
                        concat[i][l * dh + c] += p * proj(&h.w_v, j, c);
                    }
                }
            }
        }
        Mat::from_fn(n, d, |i, c| (0..m * dh).map(|k| concat[i][k] * w.w_o.get(k, c)).sum())
    }

    #[test]
    fn single_token_head_is_value_projection() {
        let mut rng = RngStream::new(1, 0);
        let w = MsaWeights::random(4, 2, &mut rng).unwrap();
        let x = TokenSequence::random(1, 4, &mut rng).unwrap();
        let heads = attention_heads(&x, &w, None).unwrap();
        let want = w.heads[0].w_v.transpose().matvec(x.x.row(0)).unwrap();
        assert!(heads[0].row(0).iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-15));
        let moe = moe_head_forward(&x, &w, 0, None).unwrap();
        assert!(moe.row(0).iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-15));
    }

    #[test]
    fn zero_query_gives_uniform_weights() {
        let mut rng = RngStream::new(2, 0);
        let mut w = MsaWeights::random(4, 1, &mut rng).unwrap();
        w.heads[0].w_q = Mat::zeros(4, 4);
        let x = TokenSequence::random(5, 4, &mut rng).unwrap();
        let g = moe_head_gates(&x, &w, 0, None).unwrap();
        assert!(g.data().iter().all(|&v| (v - 0.2).abs() <= 1e-15));
    }

    #[test]
    fn matches_naive_implementation() {
        let mut rng = RngStream::new(3, 0);
        let w = MsaWeights::random(8, 2, &mut rng).unwrap();
        let x = TokenSequence::random(4, 8, &mut rng).unwrap();
        let diff = msa_forward(&x, &w).unwrap().max_abs_diff(&naive_msa(&x.x, &w)).unwrap();
        assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn trivial_adapters_change_nothing() {
        let mut rng = RngStream::new(4, 0);
        let w = MsaWeights::random(8, 4, &mut rng).unwrap();
        let x = TokenSequence::random(3, 8, &mut rng).unwrap();
        let base = msa_forward(&x, &w).unwrap();
        let zeros = vec![HeadAdapter::zeros(8, 2, 2); 4];
        assert!(lora_msa_forward(&x, &w, &zeros).unwrap().max_abs_diff(&base).unwrap() <= 1e-15);
        let off: Vec<_> = (0..4)
            .map(|_| HeadAdapter {
                scale: 0.0,
                ..HeadAdapter::random(8, 2, 2, &mut rng)
            })
            .collect();
        assert!(lora_msa_forward(&x, &w, &off).unwrap().max_abs_diff(&base).unwrap() <= 1e-15);
        assert_eq!(merge_adapter(&w, &zeros).unwrap(), w);
    }

    #[test]
    fn merge_identity_and_double_merge() {
        let mut rng = RngStream::new(5, 0);
        let w = MsaWeights::random(6, 2, &mut rng).unwrap();
        let x = TokenSequence::random(5, 6, &mut rng).unwrap();
        let ad: Vec<_> = (0..2).map(|_| HeadAdapter::random(6, 3, 2, &mut rng)).collect();
        let merged = merge_adapter(&w, &ad).unwrap();
        let diff = lora_msa_forward(&x, &w, &ad)
            .unwrap()
            .max_abs_diff(&msa_forward(&x, &merged).unwrap())
            .unwrap();
        assert!(diff <= 1e-12, "{diff}");
        let twice = merge_adapter(&merged, &ad).unwrap();
        let delta = ad[0].b_q.matmul(&ad[0].a_q).unwrap();
        let expect = w.heads[0].w_q.add(&delta.scale(2.0)).unwrap();
        assert!(twice.heads[0].w_q.max_abs_diff(&expect).unwrap() <= 1e-14);
        assert_ne!(twice, merged);
    }

    #[test]
    fn moe_equivalence_and_gate_sums() {
        let mut rng = RngStream::new(6, 0);
        for n in 1..=6 {
            for m in [1, 2, 4] {
                let w = MsaWeights::random(8, m, &mut rng).unwrap();
                let x = TokenSequence::random(n, 8, &mut rng).unwrap();
                let ad: Vec<_> = (0..m).map(|_| HeadAdapter::random(8, 8 / m, 1, &mut rng)).collect();
                let plain = attention_heads(&x, &w, None).unwrap();
                let adapted = attention_heads(&x, &w, Some(&ad)).unwrap();
                for l in 0..m {
                    let a = moe_head_forward(&x, &w, l, None).unwrap();
                    assert!(a.max_abs_diff(&plain[l]).unwrap() <= 1e-12);
                    let b = moe_head_forward(&x, &w, l, Some(&ad[l])).unwrap();
                    assert!(b.max_abs_diff(&adapted[l]).unwrap() <= 1e-12);
                    let g = moe_head_gates(&x, &w, l, Some(&ad[l])).unwrap();
                    for i in 0..n {
                        assert!((g.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let mut rng = RngStream::new(7, 0);
        let w = MsaWeights::random(4, 2, &mut rng).unwrap();
        let row = rng.uniform_vec(-1.0, 1.0, 4);
        let x = TokenSequence::new(Mat::from_fn(3, 4, |_, c| row[c])).unwrap();
        let out = moe_head_forward(&x, &w, 1, None).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(1), out.row(2));
    }

    #[test]
    fn permuting_tokens_permutes_outputs() {
        let mut rng = RngStream::new(8, 0);
        let w = MsaWeights::random(8, 2, &mut rng).unwrap();
        let x = TokenSequence::random(5, 8, &mut rng).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let xp = TokenSequence::new(Mat::from_fn(5, 8, |i, c| x.x.get(perm[i], c))).unwrap();
        let y = msa_forward(&x, &w).unwrap();
        let yp = msa_forward(&xp, &w).unwrap();
        let want = Mat::from_fn(5, 8, |i, c| y.get(perm[i], c));
        assert!(yp.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn shape_errors() {
        let mut rng = RngStream::new(9, 0);
        let w = MsaWeights::random(4, 2, &mut rng).unwrap();
        let x = TokenSequence::random(2, 3, &mut rng).unwrap();
        assert!(matches!(msa_forward(&x, &w), Err(Error::Shape { .. })));
        let x = TokenSequence::random(2, 4, &mut rng).unwrap();
        let one = vec![HeadAdapter::zeros(4, 2, 1)];
        assert!(matches!(lora_msa_forward(&x, &w, &one), Err(Error::Argument(_))));
        assert!(MsaWeights::random(5, 2, &mut rng).is_err());
        assert!(TokenSequence::new(Mat::zeros(0, 4)).is_err());
    }

    #[test]
    fn replora_adapter_matches_merged_factors() {
        use crate::parameterization::{merge_and_discard, Activation, LowRankFactors};
        let mut rng = RngStream::new(10, 0);
        let w = MsaWeights::random(8, 2, &mut rng).unwrap();
        let x = TokenSequence::random(4, 8, &mut rng).unwrap();
        let nets: Vec<_> = (0..2)
            .map(|_| RepLoraMlp::sample(2, 8, 4, 16, Activation::SIGMOID, &mut rng))
            .collect();
        let mlp: Vec<_> = nets.iter().map(|p| HeadAdapter::from_replora(p, 0.5).unwrap()).collect();
        let merged: Vec<_> = nets
            .iter()
            .map(|p| {
                let json = merge_and_discard(p).unwrap().to_json().unwrap();
                let f = LowRankFactors::from_json(&json).unwrap();
                HeadAdapter {
                    b_q: f.b_q,
                    a_q: f.a_q,
                    b_v: f.b_v,
                    a_v: f.a_v,
                    scale: 0.5,
                }
            })
            .collect();
        let a = lora_msa_forward(&x, &w, &mlp).unwrap();
        let b = lora_msa_forward(&x, &w, &merged).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn weights_json_roundtrip() {
        let mut rng = RngStream::new(11, 0);
        let w = MsaWeights::random(4, 2, &mut rng).unwrap();
        assert_eq!(MsaWeights::from_json(&w.to_json().unwrap()).unwrap(), w);
    }
}
