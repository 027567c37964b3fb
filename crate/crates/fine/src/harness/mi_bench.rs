//! Estimator benchmark on correlated Gaussians with closed-form MI.
//!
//! For per-dimension correlation rho, the true mutual information is
//! -(dim/2) ln(1 - rho^2) nats. A fresh critic is trained by InfoNCE on
//! sampled pairs, then the shifted InfoNCE estimate and the NCE-CLUB
//! estimate are averaged over evaluation batches.

use rand_distr::{Distribution, StandardNormal};

use crate::ftre::{
    critic_infonce_loss, infonce_lower, infonce_shift, nce_club_upper, rotation_shuffle, Critic,
    FtreConfig,
};
use crate::numcore::nn::Params;
use crate::numcore::{rng_from_seed, Rng, Scalar, Tensor};
use crate::Result;

use super::opt::AdamW;

#[derive(Debug, Clone, serde::Serialize)]
pub struct MiBenchCell {
    pub rho: f64,
    pub dim: usize,
    pub true_mi: f64,
    pub infonce: f64,
    pub club: f64,
}

pub fn true_gaussian_mi(rho: f64, dim: usize) -> f64 {
    -(dim as f64 / 2.0) * (1.0 - rho * rho).ln()
}

fn sample_pair<S: Scalar>(rng: &mut Rng, batch: usize, dim: usize, rho: f64) -> (Tensor<S>, Tensor<S>) {
    let mut a = Vec::with_capacity(batch * dim);
    let mut b = Vec::with_capacity(batch * dim);
    let noise = (1.0 - rho * rho).sqrt();
    for _ in 0..batch * dim {
        let x: f64 = StandardNormal.sample(rng);
        let e: f64 = StandardNormal.sample(rng);
        a.push(S::from_f64(x));
        b.push(S::from_f64(rho * x + noise * e));
    }
    (
        Tensor::leaf(vec![batch, dim], a, false),
        Tensor::leaf(vec![batch, dim], b, false),
    )
}

/// Train a critic on one (rho, dim) cell and report averaged estimates.
pub fn run_cell<S: Scalar>(
    rho: f64,
    dim: usize,
    steps: usize,
    batch: usize,
    eval_batches: usize,
    seed: u64,
) -> Result<MiBenchCell> {
    if !(-1.0..1.0).contains(&rho) {
        return Err(crate::Error::Config(format!("|rho| must be < 1, got {rho}")));
    }
    let mut rng = rng_from_seed(seed);
    let cfg = FtreConfig {
        reduction_ratio: 0.5,
        critic_dim: 64,
        critic_temperature: 0.1,
        critic_hidden: 64,
    };
    let critic = Critic::<S>::new(&mut rng, dim, dim, &cfg);
    let mut params = Params::new();
    critic.collect("critic", &mut params);
    let mut opt = AdamW::new(params.into_iter().map(|(_, t)| t).collect(), 1e-3, 0.0);

    for _ in 0..steps {
        let (a, b) = sample_pair::<S>(&mut rng, batch, dim, rho);
        opt.zero_grad();
        let loss = critic_infonce_loss(&a, &b, &critic)?;
        loss.backward()?;
        opt.step(1.0);
    }

    let mut nce_sum = 0.0;
    let mut club_sum = 0.0;
    for i in 0..eval_batches {
        let (a, b) = sample_pair::<S>(&mut rng, batch, dim, rho);
        let nce = infonce_lower(&a, &b, &critic)?.item().as_f64() + infonce_shift(batch);
        let club = nce_club_upper(&a, &b, &critic, &rotation_shuffle(batch, i))?
            .item()
            .as_f64();
        nce_sum += nce;
        club_sum += club;
    }

    Ok(MiBenchCell {
        rho,
        dim,
        true_mi: true_gaussian_mi(rho, dim),
        infonce: nce_sum / eval_batches as f64,
        club: club_sum / eval_batches as f64,
    })
}

/// The full benchmark table over the cross product of rhos and dims.
pub fn mi_bench(
    rhos: &[f64],
    dims: &[usize],
    steps: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<MiBenchCell>> {
    let mut cells = Vec::new();
    for &rho in rhos {
        for &dim in dims {
            cells.push(run_cell::<f64>(rho, dim, steps, batch, 50, seed)?);
        }
    }
    Ok(cells)
}
