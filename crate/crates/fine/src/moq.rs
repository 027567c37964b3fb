//! Mixture of Q-Formers: a top-k gated set of query-token cross-attention
//! experts per modality, plus the auxiliary load-balancing loss.
//!
//! Routing is per sample: the router scores the masked time-average of the
//! sequence, gate weights are the raw softmax probabilities of the top-k
//! experts (no renormalization), and only selected experts are evaluated.
//! The dispatch fractions f are hard counts and carry no gradient; the
//! load-balancing loss reaches the router through the mean gate
//! probabilities P alone.

use crate::numcore::nn::{LayerNorm, Linear, Mlp2, Params};
use crate::numcore::{Rng, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MoqConfig {
    pub num_experts: usize,
    pub top_k_ratio: f64,
    pub num_query_tokens: usize,
    /// Q-Former output width per modality (text, audio, video).
    pub dims: [usize; 3],
}

impl MoqConfig {
    /// k = max(1, round(ratio * N)); must not exceed N.
    pub fn top_k(&self) -> Result<usize> {
        let k = ((self.top_k_ratio * self.num_experts as f64).round() as usize).max(1);
        if k > self.num_experts {
            return Err(Error::Config(format!(
                "top-k {} exceeds expert count {}",
                k, self.num_experts
            )));
        }
        Ok(k)
    }
}

/// One Q-Former expert: learnable query tokens cross-attend to the
/// projected input sequence, then a pre-norm feed-forward block.
pub struct QFormerExpert<S: Scalar> {
    pub queries: Tensor<S>,
    ln_attn: LayerNorm<S>,
    wq: Linear<S>,
    wk: Linear<S>,
    wv: Linear<S>,
    wo: Linear<S>,
    ln_ffn: LayerNorm<S>,
    ffn: Mlp2<S>,
}

impl<S: Scalar> QFormerExpert<S> {
    pub fn new(rng: &mut Rng, d_in: usize, d_model: usize, n_queries: usize) -> Self {
        QFormerExpert {
            queries: crate::numcore::nn::uniform_init(rng, &[n_queries, d_model], d_model),
            ln_attn: LayerNorm::new(d_model),
            wq: Linear::new(rng, d_model, d_model),
            wk: Linear::new_unbiased(rng, d_in, d_model),
            wv: Linear::new(rng, d_in, d_model),
            wo: Linear::new(rng, d_model, d_model),
            ln_ffn: LayerNorm::new(d_model),
            ffn: Mlp2::new(rng, d_model, 4 * d_model, d_model),
        }
    }

    /// One sample: x is [T x d_in]; output is [l x d_model] and never
    /// depends on positions at or beyond `length`.
    pub fn forward(&self, x: &Tensor<S>, length: usize) -> Result<Tensor<S>> {
        if x.ndim() != 2 {
            return Err(Error::shape("qformer", format!("{:?}", x.shape())));
        }
        let t = x.shape()[0];
        if length == 0 || length > t {
            return Err(Error::input(
                "qformer",
                format!("length {length} for sequence of {t}"),
            ));
        }
        let key_valid: Vec<bool> = (0..t).map(|i| i < length).collect();
        let q = self.wq.forward(&self.ln_attn.forward(&self.queries)?)?;
        let k = self.wk.forward(x)?;
        let v = self.wv.forward(x)?;
        let ctx = crate::numcore::ops::scaled_dot_attention(&q, &k, &v, &key_valid, None)?;
        let y = self.queries.add(&self.wo.forward(&ctx)?)?;
        y.add(&self.ffn.forward(&self.ln_ffn.forward(&y)?)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut Params<S>) {
        out.push((format!("{prefix}.queries"), self.queries.clone()));
        self.ln_attn.collect(&format!("{prefix}.ln_attn"), out);
        self.wq.collect(&format!("{prefix}.wq"), out);
        self.wk.collect(&format!("{prefix}.wk"), out);
        self.wv.collect(&format!("{prefix}.wv"), out);
        self.wo.collect(&format!("{prefix}.wo"), out);
        self.ln_ffn.collect(&format!("{prefix}.ln_ffn"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
    }
}

/// Routing outcome for one batch.
pub struct RoutingDecision<S: Scalar> {
    /// Full softmax over experts, [B x N], graph-connected.
    pub gate_probs: Tensor<S>,
    /// Selected expert indices per sample, highest probability first,
    /// ties broken toward the lower index.
    pub selected: Vec<Vec<usize>>,
    /// Dense gate weights G, equal to gate_probs on selected entries and
    /// zero elsewhere (plain values, B x N row-major).
    pub weights: Vec<S>,
    /// Dispatch fraction f per expert (hard count / B); sums to k.
    pub dispatch_fraction: Vec<S>,
    /// Mean gate probability P per expert, [N], graph-connected; sums to 1.
    pub mean_gate_prob: Tensor<S>,
}

/// N * sum_i f_i * P_i. Gradient flows through P only; f is data.
pub fn aux_loss<S: Scalar>(
    dispatch_fraction: &[S],
    mean_gate_prob: &Tensor<S>,
) -> Result<Tensor<S>> {
    let n = dispatch_fraction.len();
    if mean_gate_prob.shape() != [n] {
        return Err(Error::shape(
            "aux_loss",
            format!("f has {n} entries, P is {:?}", mean_gate_prob.shape()),
        ));
    }
    let f = Tensor::from_vec(&[n], dispatch_fraction.to_vec())?;
    Ok(mean_gate_prob.mul(&f)?.sum_all().scale(S::from_f64(n as f64)))
}

/// Per-modality mixture: router plus N experts.
pub struct MoqLayer<S: Scalar> {
    pub num_experts: usize,
    pub top_k: usize,
    pub router: Linear<S>,
    pub experts: Vec<QFormerExpert<S>>,
}

impl<S: Scalar> MoqLayer<S> {
    pub fn new(
        rng: &mut Rng,
        d_in: usize,
        d_model: usize,
        n_queries: usize,
        num_experts: usize,
        top_k: usize,
    ) -> Result<Self> {
        if top_k == 0 || top_k > num_experts {
            return Err(Error::Config(format!(
                "top-k {top_k} out of range for {num_experts} experts"
            )));
        }
        Ok(MoqLayer {
            num_experts,
            top_k,
            router: Linear::new_unbiased(rng, d_in, num_experts),
            experts: (0..num_experts)
                .map(|_| QFormerExpert::new(rng, d_in, d_model, n_queries))
                .collect(),
        })
    }

    /// Score experts from the masked time-average of each sequence.
    pub fn route(&self, x: &Tensor<S>, lengths: &[usize]) -> Result<RoutingDecision<S>> {
        let pooled = x.masked_mean_time(lengths)?;
        let gate_probs = self.router.forward(&pooled)?.softmax(1)?;
        let b = x.shape()[0];
        let n = self.num_experts;

        let probs = gate_probs.to_vec();
        let mut selected = Vec::with_capacity(b);
        let mut weights = vec![S::zero(); b * n];
        let mut counts = vec![0usize; n];
        for i in 0..b {
            let row = &probs[i * n..(i + 1) * n];
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &c| {
                row[c]
                    .partial_cmp(&row[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&c))
            });
            let chosen: Vec<usize> = order[..self.top_k].to_vec();
            for &j in &chosen {
                weights[i * n + j] = row[j];
                counts[j] += 1;
            }
            selected.push(chosen);
        }

        let dispatch_fraction: Vec<S> = counts
            .iter()
            .map(|&c| S::from_f64(c as f64 / b as f64))
            .collect();
        let mean_gate_prob = gate_probs.mean_axis(0)?;

        Ok(RoutingDecision {
            gate_probs,
            selected,
            weights,
            dispatch_fraction,
            mean_gate_prob,
        })
    }

    /// Weighted sum of the selected experts' outputs per sample.
    /// Unselected experts are never evaluated.
    pub fn forward(
        &self,
        x: &Tensor<S>,
        lengths: &[usize],
    ) -> Result<(Tensor<S>, RoutingDecision<S>)> {
        let decision = self.route(x, lengths)?;
        let b = x.shape()[0];
        let t = x.shape()[1];
        let d_in = x.shape()[2];
        let n = self.num_experts;

        let mut per_sample = Vec::with_capacity(b);
        for i in 0..b {
            let xi = x.narrow(0, i, 1)?.reshape(&[t, d_in])?;
            let mut terms = Vec::with_capacity(self.top_k);
            for &j in &decision.selected[i] {
                let out = self.experts[j].forward(&xi, lengths[i])?;
                let gate = decision.gate_probs.index_scalar(i * n + j)?;
                terms.push(out.scale_by(&gate)?);
            }
            per_sample.push(crate::numcore::ops::sum_tensors(&terms)?);
        }
        Ok((crate::numcore::ops::stack0(&per_sample)?, decision))
    }

    pub fn collect(&self, prefix: &str, out: &mut Params<S>) {
        self.router.collect(&format!("{prefix}.router"), out);
        for (i, e) in self.experts.iter().enumerate() {
            e.collect(&format!("{prefix}.expert{i}"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{gradcheck_multi, rng_from_seed};
    use rand::Rng as _;

    fn random_seq(rng: &mut Rng, b: usize, t: usize, d: usize) -> Tensor<f64> {
        let data: Vec<f64> = (0..b * t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[b, t, d], data).unwrap()
    }

    #[test]
    fn top_k_from_ratio() {
        let cfg = MoqConfig {
            num_experts: 8,
            top_k_ratio: 0.75,
            num_query_tokens: 8,
            dims: [256; 3],
        };
        assert_eq!(cfg.top_k().unwrap(), 6);
        let bad = MoqConfig {
            top_k_ratio: 1.5,
            ..cfg
        };
        assert!(bad.top_k().is_err());
    }

    #[test]
    fn identical_logits_route_uniform_with_low_index_ties() {
        let mut rng = rng_from_seed(1);
        let layer = MoqLayer::<f64>::new(&mut rng, 3, 4, 2, 8, 3).unwrap();
        // zero router -> identical logits for every expert
        layer.router.w.set_data(vec![0.0; 3 * 8]);
        let x = random_seq(&mut rng, 5, 4, 3);
        let d = layer.route(&x, &[4, 4, 3, 2, 4]).unwrap();
        for v in d.gate_probs.to_vec() {
            assert!((v - 0.125).abs() < 1e-12);
        }
        for sel in &d.selected {
            assert_eq!(sel, &vec![0, 1, 2]);
        }
    }

    #[test]
    fn routing_invariants_hold() {
        let mut rng = rng_from_seed(2);
        let layer = MoqLayer::<f64>::new(&mut rng, 3, 4, 2, 4, 3).unwrap();
        let b = 16;
        let x = random_seq(&mut rng, b, 5, 3);
        let lens = vec![5; b];
        let d = layer.route(&x, &lens).unwrap();
        // sum f = k exactly (counts / B sum to kB/B)
        let f_sum: f64 = d.dispatch_fraction.iter().sum();
        assert_eq!(f_sum, 3.0);
        // sum P = 1 within 1e-6
        let p_sum: f64 = d.mean_gate_prob.to_vec().iter().sum();
        assert!((p_sum - 1.0).abs() < 1e-6);
        // G has exactly k nonzeros per row, equal to gate_probs there
        let probs = d.gate_probs.to_vec();
        for i in 0..b {
            let nz: Vec<usize> = (0..4).filter(|j| d.weights[i * 4 + j] != 0.0).collect();
            assert_eq!(nz.len(), 3);
            for j in nz {
                assert_eq!(d.weights[i * 4 + j], probs[i * 4 + j]);
            }
        }
    }

    #[test]
    fn argmax_invariant_to_logit_shift() {
        // A constant input column whose router weights are all-ones adds
        // the same value to every expert logit; scaling that column shifts
        // all logits uniformly and must not move the argmax.
        let mut rng = rng_from_seed(3);
        let layer = MoqLayer::<f64>::new(&mut rng, 4, 4, 2, 4, 1).unwrap();
        let mut w = layer.router.w.to_vec();
        for j in 0..4 {
            w[3 * 4 + j] = 1.0; // last input dim feeds every logit equally
        }
        layer.router.w.set_data(w);
        let lens = vec![5; 6];
        let route_with_shift = |c: f64| {
            let mut data = Vec::new();
            let mut r2 = rng_from_seed(99);
            for _ in 0..6 * 5 {
                for _ in 0..3 {
                    data.push(r2.gen_range(-1.0..1.0));
                }
                data.push(c);
            }
            let x = Tensor::from_vec(&[6, 5, 4], data).unwrap();
            layer.route(&x, &lens).unwrap()
        };
        let base = route_with_shift(0.0);
        let shifted = route_with_shift(7.5);
        for (a, b) in base.selected.iter().zip(shifted.selected.iter()) {
            assert_eq!(a[0], b[0]);
        }
    }

    #[test]
    fn balanced_random_routing_has_binomial_dispatch() {
        // k=1 over N=4 with an identity router on iid inputs: every sample
        // picks an expert uniformly at random, so with 64 samples each
        // dispatch fraction sits within 3 binomial sigma of 1/N. Fixed
        // seed keeps this deterministic.
        let mut rng = rng_from_seed(40);
        let n = 4;
        let b = 64;
        let layer = MoqLayer::<f64>::new(&mut rng, n, 4, 2, n, 1).unwrap();
        let mut eye = vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = 4.0;
        }
        layer.router.w.set_data(eye);
        let x = random_seq(&mut rng, b, 5, n);
        let d = layer.route(&x, &vec![5; b]).unwrap();
        let p = 1.0 / n as f64;
        let sigma = (p * (1.0 - p) / b as f64).sqrt();
        for &f in &d.dispatch_fraction {
            assert!(
                (f - p).abs() <= 3.0 * sigma,
                "dispatch {f} outside 3 sigma of {p}"
            );
        }
    }

    #[test]
    fn qformer_output_shape_is_fixed() {
        let mut rng = rng_from_seed(4);
        let expert = QFormerExpert::<f64>::new(&mut rng, 10, 256, 8);
        for t in [1, 3, 17] {
            let x = random_seq(&mut rng, 1, t, 10).reshape(&[t, 10]).unwrap();
            let out = expert.forward(&x, t).unwrap();
            assert_eq!(out.shape(), &[8, 256]);
        }
    }

    #[test]
    fn qformer_ignores_trailing_padding() {
        let mut rng = rng_from_seed(5);
        let expert = QFormerExpert::<f64>::new(&mut rng, 6, 8, 3);
        let t = 7;
        let len = 4;
        let mut data: Vec<f64> = (0..t * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // poison the padded region
        for v in data[len * 6..].iter_mut() {
            *v = 99.0;
        }
        let padded = Tensor::from_vec(&[t, 6], data.clone()).unwrap();
        let truncated = Tensor::from_vec(&[len, 6], data[..len * 6].to_vec()).unwrap();
        let a = expert.forward(&padded, len).unwrap().to_vec();
        let b = expert.forward(&truncated, len).unwrap().to_vec();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn qformer_zero_length_errors() {
        let mut rng = rng_from_seed(6);
        let expert = QFormerExpert::<f64>::new(&mut rng, 4, 8, 2);
        let x = random_seq(&mut rng, 1, 3, 4).reshape(&[3, 4]).unwrap();
        assert!(expert.forward(&x, 0).is_err());
    }

    #[test]
    fn qformer_single_timestep_matches_loop_oracle() {
        let mut rng = rng_from_seed(7);
        let d_in = 3;
        let d = 4;
        let l = 2;
        let expert = QFormerExpert::<f64>::new(&mut rng, d_in, d, l);
        let x = random_seq(&mut rng, 1, 1, d_in).reshape(&[1, d_in]).unwrap();
        let got = expert.forward(&x, 1).unwrap().to_vec();

        // Loop oracle: with one key the attention weight is exactly 1, so
        // each query token receives the single projected value row.
        let lin = |w: &Tensor<f64>, b: &Tensor<f64>, row: &[f64]| -> Vec<f64> {
            let (din, dout) = (w.shape()[0], w.shape()[1]);
            let wd = w.to_vec();
            let bd = b.to_vec();
            (0..dout)
                .map(|j| (0..din).map(|i| row[i] * wd[i * dout + j]).sum::<f64>() + bd[j])
                .collect()
        };
        let ln = |gamma: &Tensor<f64>, beta: &Tensor<f64>, row: &[f64]| -> Vec<f64> {
            let dd = row.len() as f64;
            let mu = row.iter().sum::<f64>() / dd;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / dd;
            let istd = 1.0 / (var + 1e-5).sqrt();
            let g = gamma.to_vec();
            let be = beta.to_vec();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) * istd * g[i] + be[i])
                .collect()
        };
        let gelu = |x: f64| {
            let u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        };
        let xv = x.to_vec();
        let value = lin(&expert.wv.w, expert.wv.bias(), &xv);
        let queries = expert.queries.to_vec();
        for qi in 0..l {
            let qrow = &queries[qi * d..(qi + 1) * d];
            let ctx_proj = lin(&expert.wo.w, expert.wo.bias(), &value);
            let y: Vec<f64> = qrow.iter().zip(ctx_proj.iter()).map(|(a, b)| a + b).collect();
            let yn = ln(&expert.ln_ffn.gamma, &expert.ln_ffn.beta, &y);
            let h: Vec<f64> = lin(&expert.ffn.l1.w, expert.ffn.l1.bias(), &yn)
                .into_iter()
                .map(gelu)
                .collect();
            let f = lin(&expert.ffn.l2.w, expert.ffn.l2.bias(), &h);
            for j in 0..d {
                let expect = y[j] + f[j];
                assert!(
                    (got[qi * d + j] - expect).abs() < 1e-10,
                    "token {qi} dim {j}: {} vs {expect}",
                    got[qi * d + j]
                );
            }
        }
    }

    #[test]
    fn moq_forward_k1_is_gated_single_expert() {
        let mut rng = rng_from_seed(8);
        let layer = MoqLayer::<f64>::new(&mut rng, 3, 4, 2, 3, 1).unwrap();
        let x = random_seq(&mut rng, 2, 4, 3);
        let lens = vec![4, 3];
        let (out, d) = layer.forward(&x, &lens).unwrap();
        assert_eq!(out.shape(), &[2, 2, 4]);
        let probs = d.gate_probs.to_vec();
        for i in 0..2 {
            let j = d.selected[i][0];
            let xi = x.narrow(0, i, 1).unwrap().reshape(&[4, 3]).unwrap();
            let alone = layer.experts[j].forward(&xi, lens[i]).unwrap().to_vec();
            let got = out.narrow(0, i, 1).unwrap().to_vec();
            for (g, a) in got.iter().zip(alone.iter()) {
                assert!((g - a * probs[i * 3 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_experts_collapse_to_gate_sum() {
        let mut rng = rng_from_seed(9);
        let layer = MoqLayer::<f64>::new(&mut rng, 3, 4, 2, 3, 2).unwrap();
        // copy expert 0's parameters into the others
        let mut reference = Params::new();
        layer.experts[0].collect("e", &mut reference);
        for e in &layer.experts[1..] {
            let mut tgt = Params::new();
            e.collect("e", &mut tgt);
            for ((_, src), (_, dst)) in reference.iter().zip(tgt.iter()) {
                dst.set_data(src.to_vec());
            }
        }
        let x = random_seq(&mut rng, 2, 4, 3);
        let lens = vec![4, 4];
        let (out, d) = layer.forward(&x, &lens).unwrap();
        let probs = d.gate_probs.to_vec();
        for i in 0..2 {
            let gate_sum: f64 = d.selected[i].iter().map(|&j| probs[i * 3 + j]).sum();
            let xi = x.narrow(0, i, 1).unwrap().reshape(&[4, 3]).unwrap();
            let shared = layer.experts[0].forward(&xi, lens[i]).unwrap().to_vec();
            let got = out.narrow(0, i, 1).unwrap().to_vec();
            for (g, s) in got.iter().zip(shared.iter()) {
                assert!((g - s * gate_sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aux_loss_plugin_values() {
        // N=8, k=1, uniform: f_i = P_i = 1/8 -> 1
        let f = vec![0.125f64; 8];
        let p = Tensor::from_vec(&[8], vec![0.125; 8]).unwrap();
        assert!((aux_loss(&f, &p).unwrap().item() - 1.0).abs() < 1e-12);
        // all mass on one expert -> N
        let mut f = vec![0.0f64; 8];
        f[0] = 1.0;
        let mut pv = vec![0.0f64; 8];
        pv[0] = 1.0;
        let p = Tensor::from_vec(&[8], pv).unwrap();
        assert!((aux_loss(&f, &p).unwrap().item() - 8.0).abs() < 1e-12);
        // N=8, k=6, uniform: f_i = 6/8, P_i = 1/8 -> 6
        let f = vec![0.75f64; 8];
        let p = Tensor::from_vec(&[8], vec![0.125; 8]).unwrap();
        assert!((aux_loss(&f, &p).unwrap().item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn aux_loss_gradient_reaches_router_through_p_only() {
        let mut rng = rng_from_seed(10);
        let layer = MoqLayer::<f64>::new(&mut rng, 3, 4, 2, 4, 2).unwrap();
        let x = random_seq(&mut rng, 3, 4, 3);
        let d = layer.route(&x, &[4, 4, 4]).unwrap();
        let loss = aux_loss(&d.dispatch_fraction, &d.mean_gate_prob).unwrap();
        layer.router.w.zero_grad();
        loss.backward().unwrap();
        let gnorm: f64 = layer.router.w.grad().iter().map(|g| g * g).sum();
        assert!(gnorm > 0.0, "router should receive gradient through P");
    }

    #[test]
    fn moq_forward_gradcheck() {
        let mut rng = rng_from_seed(11);
        let layer = MoqLayer::<f64>::new(&mut rng, 2, 3, 2, 2, 1).unwrap();
        let x = Tensor::param(
            &[3, 2, 2],
            (0..12).map(|_| rng.gen_range(-0.8..0.8)).collect(),
        )
        .unwrap();
        let lens = vec![2, 1, 2];
        let mut params = Params::new();
        layer.collect("moq", &mut params);
        let mut inputs = vec![x.clone()];
        inputs.extend(params.iter().map(|(_, t)| t.clone()));
        let report = gradcheck_multi(
            |xs| {
                let (out, d) = layer.forward(&xs[0], &lens)?;
                let aux = aux_loss(&d.dispatch_fraction, &d.mean_gate_prob)?;
                Ok(out.square().mean_all().add(&aux)?.scale(0.02))
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "rel err {}", report.max_rel_err);
    }
}
