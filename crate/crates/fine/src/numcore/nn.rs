//! Small neural building blocks shared by the model modules.
//!
//! Weight init everywhere: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)),
//! sampled in f64 and cast, so parameter streams are identical across
//! precision modes for a given seed.

use rand::Rng as _;

use crate::Result;

use super::tensor::Tensor;
use super::{Rng, Scalar};

pub fn uniform_init<S: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::leaf(shape.to_vec(), data, true)
}

/// Named parameter list; names key checkpoint storage.
pub type Params<S> = Vec<(String, Tensor<S>)>;

pub struct Linear<S: Scalar> {
    pub w: Tensor<S>,
    /// None for projections whose bias would be a softmax no-op
    /// (attention keys, routing logits).
    pub b: Option<Tensor<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(rng: &mut Rng, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: uniform_init(rng, &[d_in, d_out], d_in),
            b: Some(uniform_init(rng, &[d_out], d_in)),
        }
    }

    pub fn new_unbiased(rng: &mut Rng, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: uniform_init(rng, &[d_in, d_out], d_in),
            b: None,
        }
    }

    pub fn bias(&self) -> &Tensor<S> {
        self.b.as_ref().expect("layer has no bias")
    }

    /// Applies to the last axis of a 2-D or 3-D input.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let d_in = self.w.shape()[0];
        let d_out = self.w.shape()[1];
        let x2 = match x.ndim() {
            2 => x.clone(),
            3 => x.reshape(&[x.shape()[0] * x.shape()[1], d_in])?,
            _ => return Err(crate::Error::shape("linear", format!("{:?}", x.shape()))),
        };
        let mut y = x2.matmul(&self.w)?;
        if let Some(b) = &self.b {
            y = y.add_row(b)?;
        }
        if x.ndim() == 3 {
            y = y.reshape(&[x.shape()[0], x.shape()[1], d_out])?;
        }
        Ok(y)
    }

    pub fn collect(&self, prefix: &str, out: &mut Params<S>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        if let Some(b) = &self.b {
            out.push((format!("{prefix}.b"), b.clone()));
        }
    }
}

/// Two-layer perceptron with a GELU between the layers.
pub struct Mlp2<S: Scalar> {
    pub l1: Linear<S>,
    pub l2: Linear<S>,
}

impl<S: Scalar> Mlp2<S> {
    pub fn new(rng: &mut Rng, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Mlp2 {
            l1: Linear::new(rng, d_in, d_hidden),
            l2: Linear::new(rng, d_hidden, d_out),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.l2.forward(&self.l1.forward(x)?.gelu())
    }

    pub fn collect(&self, prefix: &str, out: &mut Params<S>) {
        self.l1.collect(&format!("{prefix}.l1"), out);
        self.l2.collect(&format!("{prefix}.l2"), out);
    }
}

pub struct LayerNorm<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub eps: S,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Tensor::leaf(vec![d], vec![S::one(); d], true),
            beta: Tensor::leaf(vec![d], vec![S::zero(); d], true),
            eps: S::from_f64(1e-5),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }

    pub fn collect(&self, prefix: &str, out: &mut Params<S>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}
