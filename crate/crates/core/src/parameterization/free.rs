use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Mat, RngStream};

/// One expert of the unshared family: independent query and value factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeExpert {
    pub c: f64,
    pub b_q: Mat,
    pub a_q: Mat,
    pub b_v: Mat,
    pub a_v: Mat,
}

/// Free low-rank factors, no structure shared between query and value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeLowRank {
    pub experts: Vec<FreeExpert>,
}

impl FreeExpert {
    pub fn gate_delta(&self) -> Result<Mat> {
        self.b_q.matmul(&self.a_q)
    }

    pub fn expert_delta(&self) -> Result<Mat> {
        self.b_v.matmul(&self.a_v)
    }
}

impl FreeLowRank {
    pub fn new(experts: Vec<FreeExpert>) -> Result<Self> {
        let p = FreeLowRank { experts };
        p.validate()?;
        Ok(p)
    }

    pub fn sample(dim: usize, rank: usize, experts: usize, rng: &mut RngStream, scale: f64) -> Self {
        let experts = (0..experts)
            .map(|_| FreeExpert {
                c: rng.uniform(-scale, scale),
                b_q: rng.uniform_mat(-scale, scale, (dim, rank)),
                a_q: rng.uniform_mat(-scale, scale, (rank, dim)),
                b_v: rng.uniform_mat(-scale, scale, (dim, rank)),
                a_v: rng.uniform_mat(-scale, scale, (rank, dim)),
            })
            .collect();
        FreeLowRank { experts }
    }

    pub fn dim(&self) -> usize {
        self.experts[0].b_q.rows()
    }

    pub fn rank(&self) -> usize {
        self.experts[0].b_q.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .experts
            .first()
            .ok_or_else(|| Error::arg("free low-rank family needs at least one expert"))?;
        let (d, r) = first.b_q.shape();
        if r > d {
            return Err(Error::arg(format!("rank {r} exceeds dimension {d}")));
        }
        for e in &self.experts {
            for (m, want) in [
                (&e.b_q, (d, r)),
                (&e.a_q, (r, d)),
                (&e.b_v, (d, r)),
                (&e.a_v, (r, d)),
            ] {
                if m.shape() != want {
                    return Err(Error::shape(
                        "FreeLowRank",
                        format!("{}x{}", want.0, want.1),
                        format!("{}x{}", m.rows(), m.cols()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn materialize(&self, j: usize) -> Result<(Mat, Mat)> {
        let e = &self.experts[j];
        Ok((e.gate_delta()?, e.expert_delta()?))
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for e in &self.experts {
            f(std::slice::from_ref(&e.c));
            f(e.b_q.data());
            f(e.a_q.data());
            f(e.b_v.data());
            f(e.a_v.data());
        }
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for e in &mut self.experts {
            f(std::slice::from_mut(&mut e.c));
            f(e.b_q.data_mut());
            f(e.a_q.data_mut());
            f(e.b_v.data_mut());
            f(e.a_v.data_mut());
        }
    }

    /// Chain rule from per-atom gradients of the gate and expert deltas.
    pub(crate) fn backprop(&self, d_c: &[f64], d_gate: &[Mat], d_expert: &[Mat]) -> Result<Self> {
        let experts = self
            .experts
            .iter()
            .enumerate()
            .map(|(j, e)| {
                Ok(FreeExpert {
                    c: d_c[j],
                    b_q: d_gate[j].matmul(&e.a_q.transpose())?,
                    a_q: e.b_q.transpose().matmul(&d_gate[j])?,
                    b_v: d_expert[j].matmul(&e.a_v.transpose())?,
                    a_v: e.b_v.transpose().matmul(&d_expert[j])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FreeLowRank { experts })
    }
}
