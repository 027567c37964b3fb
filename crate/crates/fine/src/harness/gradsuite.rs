//! Registered finite-difference gradient checks for every differentiable
//! operation, runnable from the CLI and the acceptance suite.
//!
//! Each check builds a random small instance from a seed and compares
//! reverse-mode gradients against central differences at h = 1e-5,
//! tolerance 1e-4, in double precision. Losses are kept at modest
//! magnitude so f64 rounding noise in the differences stays below the
//! 1e-8 absolute floor of the comparison.

use rand::Rng as _;

use crate::dcq::{accon_loss, AcconConfig, QueueState};
use crate::ftre::{
    conditional_nce_club, infonce_lower, mi_loss, nce_club_upper, rotation_shuffle, Critic,
    CriticBank, FactorizedFeatures, FtreConfig, FtreModality, LabelEncoders,
};
use crate::fusion::{total_loss, FusionConfig, FusionModel, LossWeights, UnimodalDecoder};
use crate::moq::{aux_loss, MoqLayer, QFormerExpert};
use crate::numcore::nn::{LayerNorm, Linear, Mlp2, Params};
use crate::numcore::ops;
use crate::numcore::{gradcheck_multi, rng_from_seed, GradcheckReport, Rng, Tensor};
use crate::Result;

pub struct CheckOutcome {
    pub name: &'static str,
    pub module: &'static str,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

type CheckFn = fn(u64) -> Result<GradcheckReport>;

pub const TOL: f64 = 1e-4;
pub const H: f64 = 1e-5;

fn t_rand(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn probe(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dims(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

// ---- numcore ----

fn check_elementwise_chain(seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from_seed(seed);
    let n = dims(&mut rng, 2, 6);
    let a = t_rand(&mut rng, &[n], -0.9, 0.9);
    let b = t_rand(&mut rng, &[n], -0.9, 0.9);
    gradcheck_multi(
        |xs| {
            let sum = xs[0].add(&xs[1])?;
            let prod = xs[0].mul(&xs[1])?;
            let mix = sum.sub(&prod)?.tanh_elem().gelu().square();
            let expd = xs[0].scale(0.3).exp()?;
            let safe = xs[1].square().add_scalar(0.5).ln_elem()?;
            let root = xs[0].square().add_scalar(0.25).sqrt_elem()?;
            Ok(mix.add(&expd)?.add(&safe)?.add(&root)?.mean_all().scale(0.02))
        },
        &[a, b],
        H,
        TOL,
    )
}

fn check_matmul_family(seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from_seed(seed);
    let (m, k, n) = (dims(&mut rng, 2, 4), dims(&mut rng, 2, 4), dims(&mut rng, 2, 4));
    let a = t_rand(&mut rng, &[m, k], -1.0, 1.0);
    let b = t_rand(&mut rng, &[k, n], -1.0, 1.0);
    let c = t_rand(&mut rng, &[n, k], -1.0, 1.0);
    let bb = dims(&mut rng, 2, 3);
    let x3 = t_rand(&mut rng, &[bb, m, k], -1.0, 1.0);
    let y3 = t_rand(&mut rng, &[bb, k, n], -1.0, 1.0);
    let z3 = t_rand(&mut rng, &[bb, n, k], -1.0, 1.0);
    gradcheck_multi(
        |xs| {
            let two_d = xs[0].matmul(&xs[1])?.add(&xs[0].matmul_nt(&xs[2])?)?;
            let three_d = xs[3].bmm(&xs[4])?.add(&xs[3].bmm_nt(&xs[5])?)?;
            Ok(two_d.square().mean_all().add(&three_d.square().mean_all())?.scale(0.02))
        },
        &[a, b, c, x3, y3, z3],
        H,
        TOL,
    )
}

fn check_shape_ops(seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from_seed(seed);
    let (r, c) = (dims(&mut rng, 2, 4), dims(&mut rng, 3, 5));
    let a = t_rand(&mut rng, &[r, c], -1.0, 1.0);
    let b = t_rand(&mut rng, &[r, c], -1.0, 1.0);
    let idx: Vec<usize> = (0..r + 1).map(|_| rng.gen_range(0..r)).collect();
    let pr = probe(&mut rng, &[r + 1, 2 * c]);
    gradcheck_multi(
        move |xs| {
            let cat = ops::concat(1, &[xs[0].clone(), xs[1].clone()])?;
            let narrowed = cat.narrow(1, 1, c)?;
            let stacked = ops::stack0(&[narrowed.clone(), narrowed])?;
            let flat = stacked.reshape(&[2 * r, c])?;
            let gathered = cat.gather_rows(&idx)?;
            Ok(flat
                .square()
                .mean_all()
                .add(&gathered.mul(&pr)?.mean_all())?
                .scale(0.02))
        },
        &[a, b],
        H,
        TOL,
    )
}

fn check_reductions_broadcasts(seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from_seed(seed);
    let (b, t, d) = (dims(&mut rng, 2, 3), dims(&mut rng, 2, 4), dims(&mut rng, 2, 4));
    let x = t_rand(&mut rng, &[b, t, d], -1.0, 1.0);
    let bias = t_rand(&mut rng, &[d], -0.5, 0.5);
    let col = t_rand(&mut rng, &[b], -0.5, 0.5);
    let s = t_rand(&mut rng, &[1], 0.3, 1.2);
    gradcheck_multi(
        |xs| {
            let withbias = xs[0].add_row(&xs[1])?;
            let red = withbias.sum_axis(1)?.mean_axis(1)?; // [b]
            let mixed = red
                .reshape(&[xs[2].numel(), 1])?
                .add_col(&xs[2])?
                .scale_by(&xs[3])?;
            let one = mixed.index_scalar(0)?;
            Ok(mixed.square().mean_all().add(&one.square())?.scale(0.02))
        },
        &[x, bias, col, s],
        H,
        TOL,
    )
}

fn check_softmax_paths(seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from_seed(seed);
    let (r, c) = (dims(&mut rng, 2, 4), dims(&mut rng, 2, 5));
    let x = t_rand(&mut rng, &[r, c], -2.0, 2.0);
    let sq = t_rand(&mut rng, &[c, c], -1.5, 1.5);
    let pr = probe(&mut rng, &[r, c]);
    let pd = probe(&mut rng, &[c]);
    gradcheck_multi(
        |xs| {
            let sm = xs[0].softmax(1)?.mul(&pr)?.mean_all();
            let lse = xs[0].logsumexp_last()?.mean_all();
            let dg = xs[1].diag()?.mul(&Tensor::from_vec(&[pd.numel()], pd.to_vec())?)?.mean_all();
            Ok(sm.add(&lse)?.add(&dg)?.scale(0.02))
        },
        &[x, sq],
        H,
        TOL,
    )
}

fn check_attention(seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from_seed(seed);
    let (lq, lk, d) = (dims(&mut rng, 1, 3), dims(&mut rng, 2, 4), dims(&mut rng, 2, 4));
    let q = t_rand(&mut rng, &[lq, d], -1.0, 1.0);
    let k = t_rand(&mut rng, &[lk, d], -1.0, 1.0);
    let v = t_rand(&mut rng, &[lk, d], -1.0, 1.0);
    let mut key_valid: Vec<bool> = (0..lk).map(|_| rng.gen_bool(0.7)).collect();
    key_valid[0] = true;
    let pr = probe(&mut rng, &[lq, d]);
    gradcheck_multi(
        move |xs| {
            let out = ops::scaled_dot_attention(&xs[0], &xs[1], &xs[2], &key_valid, None)?;
            Ok(out.mul(&pr)?.mean_all().scale(0.02))
        },
        &[q, k, v],
        H,
        TOL,
    )
}

fn check_norms(seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from_seed(seed);
    let (r, d) = (dims(&mut rng, 2, 4), dims(&mut rng, 3, 5));
    let x = t_rand(&mut rng, &[r, d], -1.2, 1.2);
    let ln = LayerNorm::<f64>::new(d);
    let pr = probe(&mut rng, &[r, d]);
    let lens: Vec<usize> = (0..r).map(|_| rng.gen_range(1..=3usize)).collect();
    let x3 = t_rand(&mut rng, &[r, 3, d], -1.0, 1.0);
    gradcheck_multi(
        move |xs| {
            let normed = xs[0].l2_normalize_rows(1e-12)?.mul(&pr)?.mean_all();
            let lnout = xs[0].layer_norm(&xs[1], &xs[2], 1e-5)?.square().mean_all();
            let pooled = xs[3].masked_mean_time(&lens)?.square().mean_all();
            Ok(normed.add(&lnout)?.add(&pooled)?.scale(0.02))
        },
        &[x, ln.gamma.clone(), ln.beta.clone(), x3],
        H,
        TOL,
    )
}

fn check_compensated_cosine_op(seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from_seed(seed);
    let n = dims(&mut rng, 3, 8);
    // cosines away from the +-1 boundary where the smoothing derivative blows up
    let c = t_rand(&mut rng, &[n], -0.95, 0.95);
    let cos_phi: Vec<f64> = (0..n)
        .map(|_| {
            let phi = rng.gen_range(0.0..std::f64::consts::PI);
            phi.cos()
        })
        .collect();
    let sin_phi: Vec<f64> = cos_phi.iter().map(|c| (1.0 - c * c).sqrt()).collect();
    gradcheck_multi(
        move |xs| {
            Ok(xs[0]
                .compensated_cosine(&cos_phi, &sin_phi, 1e-8)?
                .square()
                .mean_all()
                .scale(0.05))
        },
        &[c],
        H,
        TOL,
    )
}

// ---- moq ----

fn check_qformer(seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from_seed(seed);
    let (t, d_in, d, l) = (
        dims(&mut rng, 2, 4),
        dims(&mut rng, 2, 3),
        dims(&mut rng, 2, 4),
        dims(&mut rng, 1, 3),
    );
    let expert = QFormerExpert::<f64>::new(&mut rng, d_in, d, l);
    let len = rng.gen_range(1..=t);
    let x = t_rand(&mut rng, &[t, d_in], -0.8, 0.8);
    let mut params = Params::new();
    expert.collect("e", &mut params);
    let mut inputs = vec![x.clone()];
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    gradcheck_multi(
        move |xs| Ok(expert.forward(&xs[0], len)?.square().mean_all().scale(0.05)),
        &inputs,
        H,
        TOL,
    )
}

fn check_moq_forward(seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from_seed(seed);
    let b = dims(&mut rng, 2, 3);
    let layer = MoqLayer::<f64>::new(&mut rng, 2, 3, 2, 2, 1).unwrap();
    let x = t_rand(&mut rng, &[b, 2, 2], -0.8, 0.8);
    let lens: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=2usize)).collect();
    let mut params = Params::new();
    layer.collect("moq", &mut params);
    let mut inputs = vec![x.clone()];
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    gradcheck_multi(
        move |xs| {
            let (out, d) = layer.forward(&xs[0], &lens)?;
            let aux = aux_loss(&d.dispatch_fraction, &d.mean_gate_prob)?;
            Ok(out.square().mean_all().add(&aux)?.scale(0.02))
        },
        &inputs,
        H,
        TOL,
    )
}

// ---- ftre ----

fn small_ftre_cfg() -> FtreConfig {
    FtreConfig {
        reduction_ratio: 0.5,
        critic_dim: 4,
        // unit temperature: sharp scores saturate the softmax and push
        // central-difference truncation error above tolerance
        critic_temperature: 1.0,
        critic_hidden: 4,
    }
}

fn check_ftre_forward(seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from_seed(seed);
    let d_model = 2 * dims(&mut rng, 1, 2);
    let b = dims(&mut rng, 2, 3);
    let l = dims(&mut rng, 1, 2);
    let m = FtreModality::<f64>::new(&mut rng, d_model, 2, &small_ftre_cfg());
    let x = t_rand(&mut rng, &[b, l, d_model], -0.8, 0.8);
    let mut params = Params::new();
    m.collect("f", &mut params);
    let mut inputs = vec![x.clone()];
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    gradcheck_multi(
        move |xs| {
            let f = m.forward(&xs[0])?;
            Ok(f.x_str
                .square()
                .mean_all()
                .add(&f.x_utr.square().mean_all())?
                .add(&f.l_recon)?
                .add(&f.x_s.square().mean_all())?
                .add(&f.x_u.square().mean_all())?
                .scale(0.02))
        },
        &inputs,
        H,
        TOL,
    )
}

fn check_label_encoders(seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from_seed(seed);
    let b = dims(&mut rng, 2, 4);
    let enc = LabelEncoders::<f64>::new(&mut rng, 3, -3.0, 3.0);
    let y = t_rand(&mut rng, &[b], -2.8, 2.8);
    let mut params = Params::new();
    enc.collect("lab", &mut params);
    let mut inputs = vec![y.clone()];
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    gradcheck_multi(
        move |xs| {
            let emb = enc.encode(&xs[0])?;
            let mut total = emb.y_str.square().mean_all();
            for u in &emb.y_utr {
                total = total.add(&u.square().mean_all())?;
            }
            Ok(total.scale(0.02))
        },
        &inputs,
        H,
        TOL,
    )
}

fn check_estimators(seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from_seed(seed);
    let b = dims(&mut rng, 3, 5);
    let d = dims(&mut rng, 2, 3);
    let critic = Critic::<f64>::new(&mut rng, d, d, &small_ftre_cfg());
    let cond = Critic::<f64>::new(&mut rng, d + 2, d + 2, &small_ftre_cfg());
    let a = t_rand(&mut rng, &[b, d], -0.8, 0.8);
    let bb = t_rand(&mut rng, &[b, d], -0.8, 0.8);
    let y = t_rand(&mut rng, &[b, 2], -0.8, 0.8);
    let shuffle = rotation_shuffle(b, rng.gen_range(0..b));
    // gradients flow to the features; critics are frozen as in the
    // encoder pass of training
    gradcheck_multi(
        move |xs| {
            let nce = infonce_lower(&xs[0], &xs[1], &critic.frozen())?;
            let club = nce_club_upper(&xs[0], &xs[1], &critic.frozen(), &shuffle)?;
            let cnd = conditional_nce_club(&xs[0], &xs[1], &xs[2], &cond.frozen(), &shuffle)?;
            Ok(nce.neg().add(&club)?.add(&cnd)?.scale(0.02))
        },
        &[a, bb, y],
        H,
        TOL,
    )
}

fn check_critic_params_grad(seed: u64) -> Result<GradcheckReport> {
    // the critic pass: gradients w.r.t. critic parameters on detached inputs
    let mut rng = rng_from_seed(seed);
    let b = dims(&mut rng, 3, 4);
    let d = dims(&mut rng, 2, 3);
    let critic = Critic::<f64>::new(&mut rng, d, d, &small_ftre_cfg());
    let a = probe(&mut rng, &[b, d]);
    let bb = probe(&mut rng, &[b, d]);
    let mut params = Params::new();
    critic.collect("c", &mut params);
    let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    gradcheck_multi(
        move |_| Ok(crate::ftre::critic_infonce_loss(&a, &bb, &critic)?.scale(0.05)),
        &inputs,
        H,
        TOL,
    )
}

fn check_mi_loss(seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from_seed(seed);
    let cfg = small_ftre_cfg();
    let d_model = 4;
    let h = 2;
    let b = 4;
    let mods: Vec<FtreModality<f64>> = (0..3)
        .map(|_| FtreModality::new(&mut rng, d_model, h, &cfg))
        .collect();
    let labels = LabelEncoders::new(&mut rng, h, -3.0, 3.0);
    let bank = CriticBank::new(&mut rng, [h; 3], h, &cfg);
    let xs: Vec<Tensor<f64>> = (0..3).map(|_| t_rand(&mut rng, &[b, 2, d_model], -0.8, 0.8)).collect();
    let y = t_rand(&mut rng, &[b], -2.5, 2.5);
    let shuffle = rotation_shuffle(b, rng.gen_range(0..b));
    let mut params = Params::new();
    for (i, m) in mods.iter().enumerate() {
        m.collect(&format!("m{i}"), &mut params);
    }
    labels.collect("lab", &mut params);
    let mut inputs = xs.clone();
    inputs.push(y.clone());
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    gradcheck_multi(
        move |ins| {
            let feats: Vec<FactorizedFeatures<f64>> = (0..3)
                .map(|m| mods[m].forward(&ins[m]))
                .collect::<Result<_>>()?;
            let feats: [FactorizedFeatures<f64>; 3] =
                feats.try_into().map_err(|_| crate::Error::Config("3".into()))?;
            let emb = labels.encode(&ins[3])?;
            Ok(mi_loss(&feats, &emb, &bank, &shuffle)?.total.scale(0.002))
        },
        &inputs,
        H,
        TOL,
    )
}

// ---- dcq ----

fn check_accon(seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from_seed(seed);
    let cfg = AcconConfig::default();
    let d = dims(&mut rng, 2, 4);
    let b = dims(&mut rng, 2, 4);
    let mut queue = QueueState::<f64>::new(cfg.clone(), &[3; 7]).unwrap();
    let nq = dims(&mut rng, 2, 5);
    let qz = t_rand(&mut rng, &[nq, d], -1.0, 1.0).detach();
    let qy: Vec<f64> = (0..nq).map(|_| rng.gen_range(-3.0..3.0)).collect();
    queue.update(&qz, &qy).unwrap();
    let raw = t_rand(&mut rng, &[b, d], -1.0, 1.0);
    let y: Vec<f64> = (0..b).map(|_| rng.gen_range(-3.0..3.0)).collect();
    gradcheck_multi(
        move |xs| {
            let z = xs[0].l2_normalize_rows(1e-12)?;
            Ok(accon_loss(&z, &y, &queue, &cfg)?.0.scale(0.02))
        },
        &[raw],
        H,
        TOL,
    )
}

// ---- fusion ----

fn check_fusion(seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from_seed(seed);
    let d_task = dims(&mut rng, 2, 3);
    let model = FusionModel::<f64>::new(
        &mut rng,
        d_task,
        FusionConfig {
            layers: 1,
            heads: 2,
            d_model: 4,
            ffn_mult: 2,
            decoder_queries: 2,
        },
    )
    .unwrap();
    let b = dims(&mut rng, 2, 3);
    let xs: Vec<Tensor<f64>> = (0..6).map(|_| t_rand(&mut rng, &[b, d_task], -0.8, 0.8)).collect();
    let pr = probe(&mut rng, &[b, 12]);
    let mut params = Params::new();
    model.collect("fusion", &mut params);
    let mut inputs = xs.clone();
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    gradcheck_multi(
        move |ins| {
            let blocks: [(Tensor<f64>, Tensor<f64>); 3] =
                std::array::from_fn(|m| (ins[2 * m].clone(), ins[2 * m + 1].clone()));
            let (y, z) = model.fuse_predict(&blocks)?;
            Ok(y.square().mean_all().add(&z.mul(&pr)?.mean_all())?.scale(0.02))
        },
        &inputs,
        H,
        TOL,
    )
}

fn check_unimodal(seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from_seed(seed);
    let d = dims(&mut rng, 2, 4);
    let nq = dims(&mut rng, 1, 3);
    let dec = UnimodalDecoder::<f64>::new(&mut rng, d, nq);
    let b = dims(&mut rng, 2, 3);
    let x_str = t_rand(&mut rng, &[b, d], -0.8, 0.8);
    let x_utr = t_rand(&mut rng, &[b, d], -0.8, 0.8);
    let mut params = Params::new();
    dec.collect("dec", &mut params);
    let mut inputs = vec![x_str, x_utr];
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    gradcheck_multi(
        move |ins| Ok(dec.forward(&ins[0], &ins[1])?.square().mean_all().scale(0.05)),
        &inputs,
        H,
        TOL,
    )
}

fn check_total_loss(seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from_seed(seed);
    let b = dims(&mut rng, 2, 4);
    let y_hat = t_rand(&mut rng, &[b], -1.0, 1.0);
    let yu: Vec<Tensor<f64>> = (0..3).map(|_| t_rand(&mut rng, &[b], -1.0, 1.0)).collect();
    let y = probe(&mut rng, &[b]);
    let l_cl = t_rand(&mut rng, &[1], 0.0, 1.0);
    let l_aux = t_rand(&mut rng, &[1], 0.0, 1.0);
    let l_mi = t_rand(&mut rng, &[1], -1.0, 1.0);
    let w = LossWeights {
        lambda_up: 0.5,
        lambda_cl: 3.0,
        lambda_aux: 1.0,
        beta_mi: 0.5,
    };
    let bd = crate::ftre::MiLossBreakdown {
        i_sha: 0.0,
        i_uni: 0.0,
        i_str: 0.0,
        i_utr: 0.0,
        l_recon: 0.0,
        l_mi: 0.0,
    };
    let inputs = vec![y_hat, yu[0].clone(), yu[1].clone(), yu[2].clone(), l_cl, l_aux, l_mi];
    gradcheck_multi(
        move |ins| {
            Ok(total_loss(
                &ins[0],
                &[ins[1].clone(), ins[2].clone(), ins[3].clone()],
                &y,
                &ins[4],
                &ins[5],
                &ins[6],
                bd,
                &w,
            )?
            .total
            .scale(0.05))
        },
        &inputs,
        H,
        TOL,
    )
}

/// The registry: (module, op name, check).
pub fn registry() -> Vec<(&'static str, &'static str, CheckFn)> {
    vec![
        ("numcore", "elementwise_chain", check_elementwise_chain),
        ("numcore", "matmul_family", check_matmul_family),
        ("numcore", "shape_ops", check_shape_ops),
        ("numcore", "reductions_broadcasts", check_reductions_broadcasts),
        ("numcore", "softmax_logsumexp_diag", check_softmax_paths),
        ("numcore", "scaled_dot_attention", check_attention),
        ("numcore", "norms_and_masked_mean", check_norms),
        ("numcore", "compensated_cosine", check_compensated_cosine_op),
        ("moq", "qformer_forward", check_qformer),
        ("moq", "moq_forward_with_aux", check_moq_forward),
        ("ftre", "factorize_forward", check_ftre_forward),
        ("ftre", "label_encoders", check_label_encoders),
        ("ftre", "estimators_frozen_critic", check_estimators),
        ("ftre", "critic_infonce_params", check_critic_params_grad),
        ("ftre", "mi_loss_full", check_mi_loss),
        ("dcq", "accon_loss", check_accon),
        ("fusion", "fuse_predict", check_fusion),
        ("fusion", "unimodal_decoder", check_unimodal),
        ("fusion", "total_loss", check_total_loss),
    ]
}

/// Run checks (optionally filtered by module), `seeds` seeds per op.
pub fn run_suite(module_filter: Option<&str>, seeds: usize) -> Result<Vec<CheckOutcome>> {
    let mut outcomes = Vec::new();
    for (module, name, check) in registry() {
        if let Some(f) = module_filter {
            if f != module {
                continue;
            }
        }
        let mut max_rel = 0.0f64;
        let mut pass = true;
        for s in 0..seeds {
            let report = check(1000 * (s as u64) + 17)?;
            max_rel = max_rel.max(report.max_rel_err);
            pass &= report.pass;
        }
        outcomes.push(CheckOutcome {
            name,
            module,
            seeds,
            max_rel_err: max_rel,
            pass,
        });
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_check_passes_once() {
        for (module, name, check) in registry() {
            let report = check(42).unwrap_or_else(|e| panic!("{module}/{name}: {e}"));
            assert!(
                report.pass,
                "{module}/{name}: max rel err {}",
                report.max_rel_err
            );
        }
    }
}
