//! Shared-structure families: query and value use the same low-rank delta.

use serde::{Deserialize, Serialize};

use super::Activation;
use crate::error::{Error, Result};
use crate::numerics::{Mat, RngStream};

/// One expert of the linear family, delta `Z = w2 * b * w1 * a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearExpert {
    pub c: f64,
    /// d x r
    pub w2: Mat,
    /// r x r
    pub b: Mat,
    /// r x r
    pub w1: Mat,
    /// r x d
    pub a: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearShared {
    pub experts: Vec<LinearExpert>,
}

impl LinearExpert {
    pub fn z(&self) -> Result<Mat> {
        self.w2.matmul(&self.b)?.matmul(&self.w1)?.matmul(&self.a)
    }
}

impl LinearShared {
    pub fn new(experts: Vec<LinearExpert>) -> Result<Self> {
        let p = LinearShared { experts };
        p.validate()?;
        Ok(p)
    }

    pub fn sample(dim: usize, rank: usize, experts: usize, rng: &mut RngStream, scale: f64) -> Self {
        let experts = (0..experts)
            .map(|_| LinearExpert {
                c: rng.uniform(-scale, scale),
                w2: rng.uniform_mat(-scale, scale, (dim, rank)),
                b: rng.uniform_mat(-scale, scale, (rank, rank)),
                w1: rng.uniform_mat(-scale, scale, (rank, rank)),
                a: rng.uniform_mat(-scale, scale, (rank, dim)),
            })
            .collect();
        LinearShared { experts }
    }

    pub fn dim(&self) -> usize {
        self.experts[0].w2.rows()
    }

    pub fn rank(&self) -> usize {
        self.experts[0].w2.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .experts
            .first()
            .ok_or_else(|| Error::arg("linear family needs at least one expert"))?;
        let (d, r) = first.w2.shape();
        if r > d {
            return Err(Error::arg(format!("rank {r} exceeds dimension {d}")));
        }
        for e in &self.experts {
            for (m, want) in [(&e.w2, (d, r)), (&e.b, (r, r)), (&e.w1, (r, r)), (&e.a, (r, d))] {
                if m.shape() != want {
                    return Err(Error::shape(
                        "LinearShared",
                        format!("{}x{}", want.0, want.1),
                        format!("{}x{}", m.rows(), m.cols()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn materialize(&self, j: usize) -> Result<(Mat, Mat)> {
        let z = self.experts[j].z()?;
        Ok((z.clone(), z))
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for e in &self.experts {
            f(std::slice::from_ref(&e.c));
            f(e.w2.data());
            f(e.b.data());
            f(e.w1.data());
            f(e.a.data());
        }
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for e in &mut self.experts {
            f(std::slice::from_mut(&mut e.c));
            f(e.w2.data_mut());
            f(e.b.data_mut());
            f(e.w1.data_mut());
            f(e.a.data_mut());
        }
    }

    pub(crate) fn backprop(&self, d_c: &[f64], d_gate: &[Mat], d_expert: &[Mat]) -> Result<Self> {
        let experts = self
            .experts
            .iter()
            .enumerate()
            .map(|(j, e)| {
                let dz = d_gate[j].add(&d_expert[j])?;
                let w1a = e.w1.matmul(&e.a)?;
                let bw1a = e.b.matmul(&w1a)?;
                let w2b = e.w2.matmul(&e.b)?;
                let w2bw1 = w2b.matmul(&e.w1)?;
                Ok(LinearExpert {
                    c: d_c[j],
                    w2: dz.matmul(&bw1a.transpose())?,
                    b: e.w2.transpose().matmul(&dz)?.matmul(&w1a.transpose())?,
                    w1: w2b.transpose().matmul(&dz)?.matmul(&e.a.transpose())?,
                    a: w2bw1.transpose().matmul(&dz)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LinearShared { experts })
    }
}

/// One expert of the non-linear family. The atoms are the pre-activation
/// products `w2b = W2 B` (d x r) and `w1a = W1 A` (r x d).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearExpert {
    pub c: f64,
    pub w2b: Mat,
    pub w1a: Mat,
}

/// Delta `act2(w2b) * act1(w1a)`, shared by query and value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearShared {
    pub act1: Activation,
    pub act2: Activation,
    pub experts: Vec<NonlinearExpert>,
}

impl NonlinearShared {
    pub fn new(act1: Activation, act2: Activation, experts: Vec<NonlinearExpert>) -> Result<Self> {
        let p = NonlinearShared {
            act1,
            act2,
            experts,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn sample(
        dim: usize,
        rank: usize,
        experts: usize,
        act1: Activation,
        act2: Activation,
        rng: &mut RngStream,
        scale: f64,
    ) -> Self {
        let experts = (0..experts)
            .map(|_| NonlinearExpert {
                c: rng.uniform(-scale, scale),
                w2b: rng.uniform_mat(-scale, scale, (dim, rank)),
                w1a: rng.uniform_mat(-scale, scale, (rank, dim)),
            })
            .collect();
        NonlinearShared {
            act1,
            act2,
            experts,
        }
    }

    pub fn dim(&self) -> usize {
        self.experts[0].w2b.rows()
    }

    pub fn rank(&self) -> usize {
        self.experts[0].w2b.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .experts
            .first()
            .ok_or_else(|| Error::arg("non-linear family needs at least one expert"))?;
        let (d, r) = first.w2b.shape();
        if r > d {
            return Err(Error::arg(format!("rank {r} exceeds dimension {d}")));
        }
        for e in &self.experts {
            for (m, want) in [(&e.w2b, (d, r)), (&e.w1a, (r, d))] {
                if m.shape() != want {
                    return Err(Error::shape(
                        "NonlinearShared",
                        format!("{}x{}", want.0, want.1),
                        format!("{}x{}", m.rows(), m.cols()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn delta(&self, j: usize) -> Result<Mat> {
        let e = &self.experts[j];
        let s2 = e.w2b.map(|v| self.act2.apply(v));
        let s1 = e.w1a.map(|v| self.act1.apply(v));
        s2.matmul(&s1)
    }

    pub fn materialize(&self, j: usize) -> Result<(Mat, Mat)> {
        let z = self.delta(j)?;
        Ok((z.clone(), z))
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for e in &self.experts {
            f(std::slice::from_ref(&e.c));
            f(e.w2b.data());
            f(e.w1a.data());
        }
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for e in &mut self.experts {
            f(std::slice::from_mut(&mut e.c));
            f(e.w2b.data_mut());
            f(e.w1a.data_mut());
        }
    }

    pub(crate) fn backprop(&self, d_c: &[f64], d_gate: &[Mat], d_expert: &[Mat]) -> Result<Self> {
        let d_act1 = self.act1.first_derivative()?;
        let d_act2 = self.act2.first_derivative()?;
        let experts = self
            .experts
            .iter()
            .enumerate()
            .map(|(j, e)| {
                let dz = d_gate[j].add(&d_expert[j])?;
                let s2 = e.w2b.map(|v| self.act2.apply(v));
                let s1 = e.w1a.map(|v| self.act1.apply(v));
                let d_s2 = dz.matmul(&s1.transpose())?;
                let d_s1 = s2.transpose().matmul(&dz)?;
                Ok(NonlinearExpert {
                    c: d_c[j],
                    w2b: d_s2.hadamard(&e.w2b.map(d_act2))?,
                    w1a: d_s1.hadamard(&e.w1a.map(d_act1))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NonlinearShared {
            act1: self.act1,
            act2: self.act2,
            experts,
        })
    }
}
