//! Factorized task-relevant encoding: shared/unique disentanglement,
//! reconstruction, task-relevance filtering, and the four mutual-information
//! estimators composing the MI loss.
//!
//! Estimator kernels are separated from critic plumbing so tests can drive
//! them with hand-built score matrices:
//!
//! - InfoNCE (lower bound): mean_i [S_ii - logsumexp_j S_ij], reported
//!   without the +log B shift when used as a loss; the shift is a constant
//!   with respect to parameters.
//! - NCE-CLUB (upper-bound style): mean positive score minus mean
//!   shuffled-pair score, with the critic trained separately by InfoNCE.
//!
//! Critic protocol per training step: (a) a critic pass maximizes InfoNCE
//! on detached features, (b) the encoder pass evaluates all estimates with
//! critic parameters frozen, so bound gradients reach only the encoders.

use crate::data::MODALITY_PAIRS;
use crate::numcore::nn::{Linear, Mlp2, Params};
use crate::numcore::ops::{concat, mse};
use crate::numcore::{Rng, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FtreConfig {
    /// Hidden width of the shared/unique encoders as a fraction of the
    /// Q-Former output width; also sets the task-relevant dimension d.
    pub reduction_ratio: f64,
    /// Critic projection space dimension.
    pub critic_dim: usize,
    /// Critic score temperature (scores are dot products divided by this).
    pub critic_temperature: f64,
    /// Hidden width of the critic projection heads.
    pub critic_hidden: usize,
}

impl FtreConfig {
    pub fn hidden_width(&self, d_model: usize) -> usize {
        ((d_model as f64 * self.reduction_ratio).round() as usize).max(1)
    }
}

// ---- estimator kernels ----

/// Unshifted InfoNCE from a full score matrix (rows = anchors): the
/// positive sits on the diagonal, every column is a candidate. Add
/// ln(B) for the mutual-information estimate, which then lies in
/// (-inf, ln B].
pub fn infonce_from_scores<S: Scalar>(scores: &Tensor<S>) -> Result<Tensor<S>> {
    if scores.ndim() != 2 || scores.shape()[0] != scores.shape()[1] {
        return Err(Error::shape(
            "infonce_from_scores",
            format!("{:?}", scores.shape()),
        ));
    }
    let b = scores.shape()[0];
    if b < 2 {
        return Err(Error::EstimatorBatch(b));
    }
    let pos = scores.diag()?;
    let lse = scores.logsumexp_last()?;
    Ok(pos.sub(&lse)?.mean_all())
}

/// The +ln(B) shift that turns the InfoNCE loss value into the estimate.
pub fn infonce_shift(batch: usize) -> f64 {
    (batch as f64).ln()
}

/// CLUB-style estimate from positive and shuffled-pair scores.
pub fn club_from_pos_neg<S: Scalar>(pos: &Tensor<S>, neg: &Tensor<S>) -> Result<Tensor<S>> {
    if pos.shape() != neg.shape() {
        return Err(Error::shape(
            "club_from_pos_neg",
            format!("{:?} vs {:?}", pos.shape(), neg.shape()),
        ));
    }
    if pos.numel() < 2 {
        return Err(Error::EstimatorBatch(pos.numel()));
    }
    pos.mean_all().sub(&neg.mean_all())
}

/// Derangement-like in-batch shuffle: rotation by `offset` (1..b).
pub fn rotation_shuffle(b: usize, offset: usize) -> Vec<usize> {
    let r = 1 + offset % (b.saturating_sub(1)).max(1);
    (0..b).map(|i| (i + r) % b).collect()
}

// ---- critics ----

/// One projection head into the critic space: a 2-layer MLP, or a single
/// linear map when `hidden` is 0 (linear heads tie the InfoNCE objective
/// more directly to feature-space alignment).
pub struct CriticHead<S: Scalar> {
    l1: Linear<S>,
    l2: Option<Linear<S>>,
}

impl<S: Scalar> CriticHead<S> {
    fn new(rng: &mut Rng, d_in: usize, hidden: usize, d_out: usize) -> Self {
        if hidden == 0 {
            CriticHead {
                l1: Linear::new(rng, d_in, d_out),
                l2: None,
            }
        } else {
            CriticHead {
                l1: Linear::new(rng, d_in, hidden),
                l2: Some(Linear::new(rng, hidden, d_out)),
            }
        }
    }

    fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        match &self.l2 {
            Some(l2) => l2.forward(&self.l1.forward(x)?.gelu()),
            None => self.l1.forward(x),
        }
    }

    fn frozen(&self) -> CriticHead<S> {
        let det = |l: &Linear<S>| Linear {
            w: l.w.detach(),
            b: l.b.as_ref().map(|b| b.detach()),
        };
        CriticHead {
            l1: det(&self.l1),
            l2: self.l2.as_ref().map(det),
        }
    }

    fn collect(&self, prefix: &str, out: &mut Params<S>) {
        self.l1.collect(&format!("{prefix}.l1"), out);
        if let Some(l2) = &self.l2 {
            l2.collect(&format!("{prefix}.l2"), out);
        }
    }
}

/// Two projection heads into a common space; the score of a pair is the
/// dot product of the projections divided by the temperature. A critic
/// built with [`Critic::new_symmetric`] shares one head for both sides,
/// coupling the score directly to alignment in the projected space.
pub struct Critic<S: Scalar> {
    pub head_a: CriticHead<S>,
    /// None = symmetric critic (head_a used for both sides).
    pub head_b: Option<CriticHead<S>>,
    pub temperature: S,
}

impl<S: Scalar> Critic<S> {
    pub fn new(rng: &mut Rng, d_a: usize, d_b: usize, cfg: &FtreConfig) -> Self {
        Critic {
            head_a: CriticHead::new(rng, d_a, cfg.critic_hidden, cfg.critic_dim),
            head_b: Some(CriticHead::new(rng, d_b, cfg.critic_hidden, cfg.critic_dim)),
            temperature: S::from_f64(cfg.critic_temperature),
        }
    }

    /// Shared-head critic for same-width pairs.
    pub fn new_symmetric(rng: &mut Rng, d: usize, cfg: &FtreConfig) -> Self {
        Critic {
            head_a: CriticHead::new(rng, d, cfg.critic_hidden, cfg.critic_dim),
            head_b: None,
            temperature: S::from_f64(cfg.critic_temperature),
        }
    }

    fn b_head(&self) -> &CriticHead<S> {
        self.head_b.as_ref().unwrap_or(&self.head_a)
    }

    /// Same critic with parameters detached from the graph.
    pub fn frozen(&self) -> Critic<S> {
        Critic {
            head_a: self.head_a.frozen(),
            head_b: self.head_b.as_ref().map(|h| h.frozen()),
            temperature: self.temperature,
        }
    }

    /// Full [B x B] score matrix: rows anchor a_i, columns candidate b_j.
    pub fn pair_scores(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let ha = self.head_a.forward(a)?;
        let hb = self.b_head().forward(b)?;
        Ok(ha.matmul_nt(&hb)?.scale(S::one() / self.temperature))
    }

    /// Positive scores f(a_i, b_i) and shuffled scores f(a_i, b_sigma(i)).
    pub fn pos_neg_scores(
        &self,
        a: &Tensor<S>,
        b: &Tensor<S>,
        shuffle: &[usize],
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let ha = self.head_a.forward(a)?;
        let hb = self.b_head().forward(b)?;
        let inv_t = S::one() / self.temperature;
        let pos = ha.mul(&hb)?.sum_axis(1)?.scale(inv_t);
        let neg = ha
            .mul(&hb.gather_rows(shuffle)?)?
            .sum_axis(1)?
            .scale(inv_t);
        Ok((pos, neg))
    }

    /// Conditional score matrix S_ij = f([a_i; y_i], [b_j; y_i]): the
    /// anchor's condition rides along on both sides.
    pub fn pair_scores_cond(
        &self,
        a: &Tensor<S>,
        b: &Tensor<S>,
        y: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let bsz = a.shape()[0];
        let ha = self.head_a.forward(&concat(1, &[a.clone(), y.clone()])?)?;
        // Expanded pairs: row i*B+j holds [b_j; y_i].
        let tile: Vec<usize> = (0..bsz).flat_map(|_| 0..bsz).collect();
        let rep: Vec<usize> = (0..bsz).flat_map(|i| std::iter::repeat(i).take(bsz)).collect();
        let b_exp = b.gather_rows(&tile)?;
        let y_exp = y.gather_rows(&rep)?;
        let hb = self.b_head().forward(&concat(1, &[b_exp, y_exp])?)?;
        let ha_exp = ha.gather_rows(&rep)?;
        let scores = ha_exp
            .mul(&hb)?
            .sum_axis(1)?
            .reshape(&[bsz, bsz])?
            .scale(S::one() / self.temperature);
        Ok(scores)
    }

    /// Conditional positive/shuffled scores with the anchor's condition.
    pub fn pos_neg_scores_cond(
        &self,
        a: &Tensor<S>,
        b: &Tensor<S>,
        y: &Tensor<S>,
        shuffle: &[usize],
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let ha = self.head_a.forward(&concat(1, &[a.clone(), y.clone()])?)?;
        let hb_pos = self.b_head().forward(&concat(1, &[b.clone(), y.clone()])?)?;
        let hb_neg = self
            .b_head()
            .forward(&concat(1, &[b.gather_rows(shuffle)?, y.clone()])?)?;
        let inv_t = S::one() / self.temperature;
        let pos = ha.mul(&hb_pos)?.sum_axis(1)?.scale(inv_t);
        let neg = ha.mul(&hb_neg)?.sum_axis(1)?.scale(inv_t);
        Ok((pos, neg))
    }

    pub fn collect(&self, prefix: &str, out: &mut Params<S>) {
        self.head_a.collect(&format!("{prefix}.head_a"), out);
        if let Some(hb) = &self.head_b {
            hb.collect(&format!("{prefix}.head_b"), out);
        }
    }
}

// ---- estimators over critics ----

/// InfoNCE lower bound (unshifted) with same-index positives and all other
/// batch entries as negatives; the denominator includes the positive.
pub fn infonce_lower<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    critic: &Critic<S>,
) -> Result<Tensor<S>> {
    infonce_from_scores(&critic.pair_scores(a, b)?)
}

/// NCE-CLUB upper-bound-style estimate: mean positive critic score minus
/// mean score over a derangement-like in-batch shuffle.
pub fn nce_club_upper<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    critic: &Critic<S>,
    shuffle: &[usize],
) -> Result<Tensor<S>> {
    let (pos, neg) = critic.pos_neg_scores(a, b, shuffle)?;
    club_from_pos_neg(&pos, &neg)
}

/// Conditional NCE-CLUB: pairs carry the anchor's condition embedding,
/// negatives shuffle only the second feature.
pub fn conditional_nce_club<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    y: &Tensor<S>,
    critic: &Critic<S>,
    shuffle: &[usize],
) -> Result<Tensor<S>> {
    let (pos, neg) = critic.pos_neg_scores_cond(a, b, y, shuffle)?;
    club_from_pos_neg(&pos, &neg)
}

/// InfoNCE training loss for a critic (to minimize). Inputs should be
/// detached by the caller for the critic pass.
pub fn critic_infonce_loss<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    critic: &Critic<S>,
) -> Result<Tensor<S>> {
    Ok(infonce_from_scores(&critic.pair_scores(a, b)?)?.neg())
}

/// InfoNCE training loss for a conditional critic.
pub fn critic_infonce_loss_cond<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    y: &Tensor<S>,
    critic: &Critic<S>,
) -> Result<Tensor<S>> {
    Ok(infonce_from_scores(&critic.pair_scores_cond(a, b, y)?)?.neg())
}

// ---- encoders ----

/// Shared/unique factorization of one modality: SUEncoder pair, decoder,
/// and the two task encoders.
pub struct FtreModality<S: Scalar> {
    pub su_shared: Mlp2<S>,
    pub su_unique: Mlp2<S>,
    pub decoder: Mlp2<S>,
    pub task_shared: Mlp2<S>,
    pub task_unique: Mlp2<S>,
}

impl<S: Scalar> FtreModality<S> {
    /// `d_task` is the common width of x_str / x_utr across modalities.
    pub fn new(rng: &mut Rng, d_model: usize, d_task: usize, cfg: &FtreConfig) -> Self {
        let h = cfg.hidden_width(d_model);
        FtreModality {
            su_shared: Mlp2::new(rng, d_model, h, h),
            su_unique: Mlp2::new(rng, d_model, h, h),
            decoder: Mlp2::new(rng, 2 * h, d_model, d_model),
            task_shared: Mlp2::new(rng, h, h, d_task),
            task_unique: Mlp2::new(rng, h, h, d_task),
        }
    }

    /// Split [B x l x d'] into shared and unique token representations.
    pub fn su_encode(&self, x_hat: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        Ok((self.su_shared.forward(x_hat)?, self.su_unique.forward(x_hat)?))
    }

    /// Decode concat(x_s, x_u) back toward x_hat; returns the
    /// reconstruction and its mean-squared error.
    pub fn reconstruct(
        &self,
        x_s: &Tensor<S>,
        x_u: &Tensor<S>,
        x_hat: &Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let joint = concat(2, &[x_s.clone(), x_u.clone()])?;
        let recon = self.decoder.forward(&joint)?;
        let loss = mse(&recon, x_hat)?;
        Ok((recon, loss))
    }

    /// Mean-pool token positions, then filter into the task-relevant
    /// shared/unique vectors.
    pub fn task_encode(&self, x_s: &Tensor<S>, x_u: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let s_pooled = x_s.mean_axis(1)?;
        let u_pooled = x_u.mean_axis(1)?;
        Ok((
            self.task_shared.forward(&s_pooled)?,
            self.task_unique.forward(&u_pooled)?,
        ))
    }

    pub fn forward(&self, x_hat: &Tensor<S>) -> Result<FactorizedFeatures<S>> {
        let (x_s, x_u) = self.su_encode(x_hat)?;
        let (x_recon, l_recon) = self.reconstruct(&x_s, &x_u, x_hat)?;
        let (x_str, x_utr) = self.task_encode(&x_s, &x_u)?;
        Ok(FactorizedFeatures {
            x_s,
            x_u,
            x_str,
            x_utr,
            x_recon,
            l_recon,
        })
    }

    pub fn collect(&self, prefix: &str, out: &mut Params<S>) {
        self.su_shared.collect(&format!("{prefix}.su_shared"), out);
        self.su_unique.collect(&format!("{prefix}.su_unique"), out);
        self.decoder.collect(&format!("{prefix}.decoder"), out);
        self.task_shared.collect(&format!("{prefix}.task_shared"), out);
        self.task_unique.collect(&format!("{prefix}.task_unique"), out);
    }
}

/// Per-modality factorization outputs.
pub struct FactorizedFeatures<S: Scalar> {
    /// Shared tokens, [B x l x h].
    pub x_s: Tensor<S>,
    /// Unique tokens, [B x l x h].
    pub x_u: Tensor<S>,
    /// Shared task-relevant vector, [B x d].
    pub x_str: Tensor<S>,
    /// Unique task-relevant vector, [B x d].
    pub x_utr: Tensor<S>,
    /// Decoder output, [B x l x d'].
    pub x_recon: Tensor<S>,
    /// MSE between x_recon and the encoder input.
    pub l_recon: Tensor<S>,
}

impl<S: Scalar> FactorizedFeatures<S> {
    /// Token-pooled shared and unique vectors for the pair estimators.
    pub fn pooled(&self) -> Result<(Tensor<S>, Tensor<S>)> {
        Ok((self.x_s.mean_axis(1)?, self.x_u.mean_axis(1)?))
    }
}

/// Label embeddings: one shared, one per modality, from the normalized label.
pub struct LabelEmbeddings<S: Scalar> {
    pub y_str: Tensor<S>,
    pub y_utr: [Tensor<S>; 3],
}

/// The four label perceptrons (one shared, three unique).
pub struct LabelEncoders<S: Scalar> {
    pub shared: Mlp2<S>,
    pub unique: [Mlp2<S>; 3],
    pub label_min: f64,
    pub label_max: f64,
}

impl<S: Scalar> LabelEncoders<S> {
    pub fn new(rng: &mut Rng, d: usize, label_min: f64, label_max: f64) -> Self {
        LabelEncoders {
            shared: Mlp2::new(rng, 1, d, d),
            unique: [
                Mlp2::new(rng, 1, d, d),
                Mlp2::new(rng, 1, d, d),
                Mlp2::new(rng, 1, d, d),
            ],
            label_min,
            label_max,
        }
    }

    /// Affine map of the label range onto [-1, 1].
    pub fn normalize(&self, y: f64) -> f64 {
        2.0 * (y - self.label_min) / (self.label_max - self.label_min) - 1.0
    }

    pub fn encode(&self, labels: &Tensor<S>) -> Result<LabelEmbeddings<S>> {
        let b = labels.numel();
        let scale = S::from_f64(2.0 / (self.label_max - self.label_min));
        let offset = S::from_f64(self.label_min);
        let col = labels
            .add_scalar(-offset)
            .scale(scale)
            .add_scalar(-S::one())
            .reshape(&[b, 1])?;
        Ok(LabelEmbeddings {
            y_str: self.shared.forward(&col)?,
            y_utr: [
                self.unique[0].forward(&col)?,
                self.unique[1].forward(&col)?,
                self.unique[2].forward(&col)?,
            ],
        })
    }

    pub fn collect(&self, prefix: &str, out: &mut Params<S>) {
        self.shared.collect(&format!("{prefix}.shared"), out);
        for (i, u) in self.unique.iter().enumerate() {
            u.collect(&format!("{prefix}.unique{i}"), out);
        }
    }
}

/// The twelve critics: one per estimator instance.
pub struct CriticBank<S: Scalar> {
    /// Shared-pair critics, indexed like MODALITY_PAIRS.
    pub sha: [Critic<S>; 3],
    /// Unique-pair critics.
    pub uni: [Critic<S>; 3],
    /// Conditional critics over (x_str, x_str | y_str).
    pub cond: [Critic<S>; 3],
    /// Label critics over (x_utr, y_utr).
    pub utr: [Critic<S>; 3],
}

impl<S: Scalar> CriticBank<S> {
    /// `h` holds the shared/unique token width per modality, `d` the
    /// common task-relevant width.
    pub fn new(rng: &mut Rng, h: [usize; 3], d: usize, cfg: &FtreConfig) -> Self {
        let mk = |rng: &mut Rng, da, db| Critic::new(rng, da, db, cfg);
        let pair = |pi: usize| {
            let (a, b) = (MODALITY_PAIRS[pi].0.index(), MODALITY_PAIRS[pi].1.index());
            (h[a], h[b])
        };
        let mut mk_pair = |rng: &mut Rng| -> [Critic<S>; 3] {
            std::array::from_fn(|pi| {
                let (da, db) = pair(pi);
                if da == db {
                    Critic::new_symmetric(rng, da, cfg)
                } else {
                    mk(rng, da, db)
                }
            })
        };
        let sha = mk_pair(rng);
        let uni = mk_pair(rng);
        CriticBank {
            sha,
            uni,
            cond: [
                mk(rng, 2 * d, 2 * d),
                mk(rng, 2 * d, 2 * d),
                mk(rng, 2 * d, 2 * d),
            ],
            utr: [mk(rng, d, d), mk(rng, d, d), mk(rng, d, d)],
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Params<S>) {
        for (name, group) in [
            ("sha", &self.sha),
            ("uni", &self.uni),
            ("cond", &self.cond),
            ("utr", &self.utr),
        ] {
            for (i, c) in group.iter().enumerate() {
                c.collect(&format!("{prefix}.{name}{i}"), out);
            }
        }
    }
}

/// Scalar view of the MI loss terms.
///
/// The total is computed as (((-i_sha + i_uni) + l_recon) + i_str) - i_utr,
/// in that order, both here and in the tensor graph, so the identity holds
/// bit-exactly.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MiLossBreakdown {
    pub i_sha: f64,
    pub i_uni: f64,
    pub i_str: f64,
    pub i_utr: f64,
    pub l_recon: f64,
    pub l_mi: f64,
}

pub fn combine_mi_terms(i_sha: f64, i_uni: f64, l_recon: f64, i_str: f64, i_utr: f64) -> f64 {
    (((-i_sha + i_uni) + l_recon) + i_str) - i_utr
}

/// MI loss tensor plus its scalar breakdown.
pub struct MiLoss<S: Scalar> {
    pub total: Tensor<S>,
    pub breakdown: MiLossBreakdown,
}

/// Assemble the MI loss from factorized features of the three modalities.
///
/// Pairwise sums run over the three unordered modality pairs and are
/// summed, not averaged. Critics are used frozen: their parameters are
/// detached so gradients reach only the feature and label encoders.
pub fn mi_loss<S: Scalar>(
    features: &[FactorizedFeatures<S>; 3],
    labels: &LabelEmbeddings<S>,
    critics: &CriticBank<S>,
    shuffle: &[usize],
) -> Result<MiLoss<S>> {
    let pooled: Vec<(Tensor<S>, Tensor<S>)> = features
        .iter()
        .map(|f| f.pooled())
        .collect::<Result<_>>()?;

    let mut i_sha_terms = Vec::with_capacity(3);
    let mut i_uni_terms = Vec::with_capacity(3);
    let mut i_str_terms = Vec::with_capacity(3);
    for (pi, (ma, mb)) in MODALITY_PAIRS.iter().enumerate() {
        let (a, b) = (ma.index(), mb.index());
        i_sha_terms.push(infonce_lower(
            &pooled[a].0,
            &pooled[b].0,
            &critics.sha[pi].frozen(),
        )?);
        i_uni_terms.push(nce_club_upper(
            &pooled[a].1,
            &pooled[b].1,
            &critics.uni[pi].frozen(),
            shuffle,
        )?);
        i_str_terms.push(conditional_nce_club(
            &features[a].x_str,
            &features[b].x_str,
            &labels.y_str,
            &critics.cond[pi].frozen(),
            shuffle,
        )?);
    }
    let mut i_utr_terms = Vec::with_capacity(3);
    for m in 0..3 {
        i_utr_terms.push(infonce_lower(
            &features[m].x_utr,
            &labels.y_utr[m],
            &critics.utr[m].frozen(),
        )?);
    }

    let i_sha = crate::numcore::ops::sum_tensors(&i_sha_terms)?;
    let i_uni = crate::numcore::ops::sum_tensors(&i_uni_terms)?;
    let i_str = crate::numcore::ops::sum_tensors(&i_str_terms)?;
    let i_utr = crate::numcore::ops::sum_tensors(&i_utr_terms)?;
    let l_recon = features[0]
        .l_recon
        .add(&features[1].l_recon)?
        .add(&features[2].l_recon)?
        .scale(S::from_f64(1.0 / 3.0));

    let total = i_sha
        .neg()
        .add(&i_uni)?
        .add(&l_recon)?
        .add(&i_str)?
        .sub(&i_utr)?;

    let breakdown = MiLossBreakdown {
        i_sha: i_sha.item().as_f64(),
        i_uni: i_uni.item().as_f64(),
        i_str: i_str.item().as_f64(),
        i_utr: i_utr.item().as_f64(),
        l_recon: l_recon.item().as_f64(),
        l_mi: total.item().as_f64(),
    };
    Ok(MiLoss { total, breakdown })
}

/// InfoNCE training loss for every critic in the bank, on detached
/// features (the critic pass of the two-pass protocol).
pub fn critic_bank_loss<S: Scalar>(
    features: &[FactorizedFeatures<S>; 3],
    labels: &LabelEmbeddings<S>,
    critics: &CriticBank<S>,
) -> Result<Tensor<S>> {
    let pooled: Vec<(Tensor<S>, Tensor<S>)> = features
        .iter()
        .map(|f| Ok((f.x_s.mean_axis(1)?.detach(), f.x_u.mean_axis(1)?.detach())))
        .collect::<Result<_>>()?;
    let y_str = labels.y_str.detach();
    let mut terms = Vec::with_capacity(12);
    for (pi, (ma, mb)) in MODALITY_PAIRS.iter().enumerate() {
        let (a, b) = (ma.index(), mb.index());
        terms.push(critic_infonce_loss(
            &pooled[a].0,
            &pooled[b].0,
            &critics.sha[pi],
        )?);
        terms.push(critic_infonce_loss(
            &pooled[a].1,
            &pooled[b].1,
            &critics.uni[pi],
        )?);
        terms.push(critic_infonce_loss_cond(
            &features[a].x_str.detach(),
            &features[b].x_str.detach(),
            &y_str,
            &critics.cond[pi],
        )?);
    }
    for m in 0..3 {
        terms.push(critic_infonce_loss(
            &features[m].x_utr.detach(),
            &labels.y_utr[m].detach(),
            &critics.utr[m],
        )?);
    }
    crate::numcore::ops::sum_tensors(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{gradcheck_multi, rng_from_seed};
    use rand::Rng as _;

    fn cfg() -> FtreConfig {
        FtreConfig {
            reduction_ratio: 0.5,
            critic_dim: 8,
            // unit temperature keeps score curvature moderate, which the
            // finite-difference checks in this module rely on
            critic_temperature: 1.0,
            critic_hidden: 8,
        }
    }

    fn random_t(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn hidden_width_follows_reduction_ratio() {
        assert_eq!(cfg().hidden_width(256), 128);
        let mut rng = rng_from_seed(1);
        let m = FtreModality::<f64>::new(&mut rng, 256, 128, &cfg());
        assert_eq!(m.su_shared.l1.w.shape(), &[256, 128]);
        assert_eq!(m.su_shared.l2.w.shape(), &[128, 128]);
    }

    #[test]
    fn zero_input_takes_bias_path() {
        let mut rng = rng_from_seed(2);
        let m = FtreModality::<f64>::new(&mut rng, 6, 3, &cfg());
        let x = Tensor::from_vec(&[1, 2, 6], vec![0.0; 12]).unwrap();
        let (x_s, _) = m.su_encode(&x).unwrap();
        // bias path: l2(gelu(b1))
        let b1 = m.su_shared.l1.bias().to_vec();
        let gelu = |x: f64| {
            let u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        };
        let h: Vec<f64> = b1.iter().map(|&v| gelu(v)).collect();
        let w2 = m.su_shared.l2.w.to_vec();
        let b2 = m.su_shared.l2.bias().to_vec();
        let hdim = h.len();
        let expect: Vec<f64> = (0..3)
            .map(|j| (0..hdim).map(|i| h[i] * w2[i * 3 + j]).sum::<f64>() + b2[j])
            .collect();
        let got = x_s.to_vec();
        for tok in 0..2 {
            for j in 0..3 {
                assert!((got[tok * 3 + j] - expect[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reconstruction_loss_identities() {
        let mut rng = rng_from_seed(3);
        let x = random_t(&mut rng, &[2, 3, 4]);
        assert_eq!(mse(&x, &x).unwrap().item(), 0.0);
        let shifted = x.add_scalar(1.0);
        assert!((mse(&shifted, &x).unwrap().item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_mse_matches_loop_oracle() {
        let mut rng = rng_from_seed(4);
        let m = FtreModality::<f64>::new(&mut rng, 6, 3, &cfg());
        let x = random_t(&mut rng, &[2, 2, 6]);
        let (x_s, x_u) = m.su_encode(&x).unwrap();
        let (recon, loss) = m.reconstruct(&x_s, &x_u, &x).unwrap();
        let rv = recon.to_vec();
        let xv = x.to_vec();
        let expect: f64 =
            rv.iter().zip(xv.iter()).map(|(r, x)| (r - x) * (r - x)).sum::<f64>() / rv.len() as f64;
        let rel = (loss.item() - expect).abs() / expect.abs().max(1e-300);
        assert!(rel < 1e-12);
    }

    #[test]
    fn task_encode_pooling_identities() {
        let mut rng = rng_from_seed(5);
        let m = FtreModality::<f64>::new(&mut rng, 6, 3, &cfg());
        // l = 1: pooling is identity
        let x1 = random_t(&mut rng, &[2, 1, 6]);
        let (s1, u1) = m.su_encode(&x1).unwrap();
        let (str1, _) = m.task_encode(&s1, &u1).unwrap();
        let direct = m
            .task_shared
            .forward(&s1.reshape(&[2, 3]).unwrap())
            .unwrap();
        for (a, b) in str1.to_vec().iter().zip(direct.to_vec().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // constant tokens: pool equals any single token
        let row: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut buf = Vec::new();
        for _ in 0..4 {
            buf.extend_from_slice(&row);
        }
        let xs = Tensor::from_vec(&[1, 4, 3], buf).unwrap();
        let pooled = xs.mean_axis(1).unwrap().to_vec();
        for (p, r) in pooled.iter().zip(row.iter()) {
            assert!((p - r).abs() < 1e-12);
        }
    }

    #[test]
    fn label_normalization_endpoints_and_monotonicity() {
        let mut rng = rng_from_seed(6);
        let enc = LabelEncoders::<f64>::new(&mut rng, 4, -3.0, 3.0);
        assert_eq!(enc.normalize(-3.0), -1.0);
        assert_eq!(enc.normalize(0.0), 0.0);
        assert_eq!(enc.normalize(3.0), 1.0);
        let ys = [-3.0, -1.5, 0.0, 0.4, 2.9];
        let normed: Vec<f64> = ys.iter().map(|&y| enc.normalize(y)).collect();
        for w in normed.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn infonce_constant_scores_give_minus_log_b() {
        let b = 5;
        let scores = Tensor::from_vec(&[b, b], vec![2.5; b * b]).unwrap();
        let est = infonce_from_scores(&scores).unwrap().item();
        assert!((est + (b as f64).ln()).abs() < 1e-12);
        assert!((est + infonce_shift(b)).abs() < 1e-12);
    }

    #[test]
    fn infonce_margin_scores_approach_log_b() {
        // +20 on positives, -20 on negatives, B = 4
        let b = 4;
        let mut sv = vec![-20.0; b * b];
        for i in 0..b {
            sv[i * b + i] = 20.0;
        }
        let scores = Tensor::from_vec(&[b, b], sv).unwrap();
        let shifted = infonce_from_scores(&scores).unwrap().item() + infonce_shift(b);
        assert!((shifted - (4.0f64).ln()).abs() < 1e-6, "{shifted}");
    }

    #[test]
    fn infonce_shifted_never_exceeds_log_b() {
        let mut rng = rng_from_seed(7);
        for _ in 0..50 {
            let b = rng.gen_range(2..9);
            let scores = random_t(&mut rng, &[b, b]).scale(rng.gen_range(0.1..30.0));
            let shifted = infonce_from_scores(&scores).unwrap().item() + infonce_shift(b);
            assert!(shifted <= (b as f64).ln() + 1e-6);
        }
    }

    #[test]
    fn infonce_rejects_tiny_batch() {
        let scores = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
        assert!(matches!(
            infonce_from_scores(&scores),
            Err(Error::EstimatorBatch(1))
        ));
    }

    #[test]
    fn club_constant_critic_gives_zero() {
        let mut rng = rng_from_seed(8);
        let mut critic = Critic::<f64>::new(&mut rng, 3, 3, &cfg());
        // zero the output layers -> constant (bias-only) projections give
        // identical pos and neg scores
        critic.head_a.l2.as_ref().unwrap().w.set_data(vec![0.0; 8 * 8]);
        critic
            .head_b
            .as_ref()
            .unwrap()
            .l2
            .as_ref()
            .unwrap()
            .w
            .set_data(vec![0.0; 8 * 8]);
        let a = random_t(&mut rng, &[4, 3]);
        let b = random_t(&mut rng, &[4, 3]);
        let est = nce_club_upper(&a, &b, &critic, &rotation_shuffle(4, 0)).unwrap();
        assert!(est.item().abs() < 1e-12);
    }

    #[test]
    fn club_matches_definitional_loop_oracle() {
        let mut rng = rng_from_seed(9);
        let critic = Critic::<f64>::new(&mut rng, 3, 3, &cfg());
        let b = 6;
        let a = random_t(&mut rng, &[b, 3]);
        let bb = random_t(&mut rng, &[b, 3]);
        let shuffle = rotation_shuffle(b, 2);
        let est = nce_club_upper(&a, &bb, &critic, &shuffle).unwrap().item();
        // loop oracle over the same critic scores
        let scores = critic.pair_scores(&a, &bb).unwrap().to_vec();
        let mut pos = 0.0;
        let mut neg = 0.0;
        for i in 0..b {
            pos += scores[i * b + i];
            neg += scores[i * b + shuffle[i]];
        }
        let expect = pos / b as f64 - neg / b as f64;
        let rel = (est - expect).abs() / expect.abs().max(1e-12);
        assert!(rel < 1e-10, "est {est} vs oracle {expect}");
    }

    #[test]
    fn conditional_club_matches_loop_oracle() {
        let mut rng = rng_from_seed(10);
        let critic = Critic::<f64>::new(&mut rng, 4 + 2, 4 + 2, &cfg());
        let b = 5;
        let a = random_t(&mut rng, &[b, 4]);
        let bb = random_t(&mut rng, &[b, 4]);
        let y = random_t(&mut rng, &[b, 2]);
        let shuffle = rotation_shuffle(b, 1);
        let est = conditional_nce_club(&a, &bb, &y, &critic, &shuffle)
            .unwrap()
            .item();
        let scores = critic.pair_scores_cond(&a, &bb, &y).unwrap().to_vec();
        let mut expect = 0.0;
        for i in 0..b {
            expect += (scores[i * b + i] - scores[i * b + shuffle[i]]) / b as f64;
        }
        let rel = (est - expect).abs() / expect.abs().max(1e-12);
        assert!(rel < 1e-10);
    }

    #[test]
    fn conditional_with_constant_y_reduces_to_unconditional() {
        let mut rng = rng_from_seed(11);
        let critic = Critic::<f64>::new(&mut rng, 3 + 2, 3 + 2, &cfg());
        let b = 6;
        let a = random_t(&mut rng, &[b, 3]);
        let bb = random_t(&mut rng, &[b, 3]);
        // identical condition rows
        let row = [0.3, -0.7];
        let y = Tensor::from_vec(&[b, 2], (0..b).flat_map(|_| row).collect()).unwrap();
        let shuffle = rotation_shuffle(b, 3);
        let cond = conditional_nce_club(&a, &bb, &y, &critic, &shuffle)
            .unwrap()
            .item();
        // unconditional with y baked into the inputs as constant columns
        let au = concat(1, &[a.clone(), y.clone()]).unwrap();
        let bu = concat(1, &[bb.clone(), y.clone()]).unwrap();
        let uncond = nce_club_upper(&au, &bu, &critic, &shuffle).unwrap().item();
        assert!((cond - uncond).abs() < 1e-10, "{cond} vs {uncond}");
    }

    #[test]
    fn mi_breakdown_plugin_arithmetic() {
        let v = combine_mi_terms(1.2, 0.3, 0.1, 0.2, 0.8);
        assert_eq!(v, -1.4);
    }

    #[test]
    fn mi_loss_breakdown_identity_holds_exactly() {
        let mut rng = rng_from_seed(12);
        let c = cfg();
        let d_model = 6;
        let h = c.hidden_width(d_model);
        let mods: Vec<FtreModality<f64>> = (0..3)
            .map(|_| FtreModality::new(&mut rng, d_model, h, &c))
            .collect();
        let labels_enc = LabelEncoders::new(&mut rng, h, -3.0, 3.0);
        let bank = CriticBank::new(&mut rng, [h; 3], h, &c);
        let b = 4;
        let feats: Vec<FactorizedFeatures<f64>> = (0..3)
            .map(|m| mods[m].forward(&random_t(&mut rng, &[b, 2, d_model])).unwrap())
            .collect();
        let feats: [FactorizedFeatures<f64>; 3] = feats.try_into().map_err(|_| ()).unwrap();
        let y = random_t(&mut rng, &[b]);
        let emb = labels_enc.encode(&y).unwrap();
        let mi = mi_loss(&feats, &emb, &bank, &rotation_shuffle(b, 1)).unwrap();
        let bd = mi.breakdown;
        let recombined = combine_mi_terms(bd.i_sha, bd.i_uni, bd.l_recon, bd.i_str, bd.i_utr);
        assert_eq!(recombined.to_bits(), bd.l_mi.to_bits());
        assert_eq!(mi.total.item().to_bits(), bd.l_mi.to_bits());
    }

    #[test]
    fn su_and_task_encoders_gradcheck() {
        let mut rng = rng_from_seed(13);
        let c = cfg();
        let m = FtreModality::<f64>::new(&mut rng, 4, 2, &c);
        let x = Tensor::param(&[2, 2, 4], (0..16).map(|_| rng.gen_range(-0.8..0.8)).collect())
            .unwrap();
        let mut params = Params::new();
        m.collect("ftre", &mut params);
        let mut inputs = vec![x.clone()];
        inputs.extend(params.iter().map(|(_, t)| t.clone()));
        let report = gradcheck_multi(
            |xs| {
                let f = m.forward(&xs[0])?;
                Ok(f
                    .x_str
                    .square()
                    .mean_all()
                    .add(&f.x_utr.square().mean_all())?
                    .add(&f.l_recon)?
                    .scale(0.02))
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn mi_loss_gradcheck_with_frozen_critics() {
        let mut rng = rng_from_seed(14);
        let c = cfg();
        let d_model = 4;
        let h = c.hidden_width(d_model);
        let mods: Vec<FtreModality<f64>> = (0..3)
            .map(|_| FtreModality::new(&mut rng, d_model, h, &c))
            .collect();
        let labels_enc = LabelEncoders::new(&mut rng, h, -3.0, 3.0);
        let bank = CriticBank::new(&mut rng, [h; 3], h, &c);
        let b = 4;
        let xs: Vec<Tensor<f64>> = (0..3)
            .map(|_| {
                Tensor::param(
                    &[b, 2, d_model],
                    (0..b * 2 * d_model).map(|_| rng.gen_range(-0.8..0.8)).collect(),
                )
                .unwrap()
            })
            .collect();
        let y = Tensor::param(&[b], (0..b).map(|_| rng.gen_range(-2.5..2.5)).collect()).unwrap();
        let shuffle = rotation_shuffle(b, 2);

        let mut params = Params::new();
        for (i, m) in mods.iter().enumerate() {
            m.collect(&format!("m{i}"), &mut params);
        }
        labels_enc.collect("labels", &mut params);

        let mut inputs = xs.clone();
        inputs.push(y.clone());
        inputs.extend(params.iter().map(|(_, t)| t.clone()));
        let report = gradcheck_multi(
            |ins| {
                let feats: Vec<FactorizedFeatures<f64>> = (0..3)
                    .map(|m| mods[m].forward(&ins[m]))
                    .collect::<Result<_>>()?;
                let feats: [FactorizedFeatures<f64>; 3] =
                    feats.try_into().map_err(|_| Error::Config("3".into()))?;
                let emb = labels_enc.encode(&ins[3])?;
                Ok(mi_loss(&feats, &emb, &bank, &shuffle)?.total.scale(0.002))
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn critic_pass_leaves_encoder_gradients_untouched() {
        let mut rng = rng_from_seed(15);
        let c = cfg();
        let d_model = 4;
        let h = c.hidden_width(d_model);
        let mods: Vec<FtreModality<f64>> = (0..3)
            .map(|_| FtreModality::new(&mut rng, d_model, h, &c))
            .collect();
        let labels_enc = LabelEncoders::new(&mut rng, h, -3.0, 3.0);
        let bank = CriticBank::new(&mut rng, [h; 3], h, &c);
        let b = 4;
        let feats: Vec<FactorizedFeatures<f64>> = (0..3)
            .map(|m| mods[m].forward(&random_t(&mut rng, &[b, 2, d_model])).unwrap())
            .collect();
        let feats: [FactorizedFeatures<f64>; 3] = feats.try_into().map_err(|_| ()).unwrap();
        let y = random_t(&mut rng, &[b]);
        let emb = labels_enc.encode(&y).unwrap();

        let mut enc_params = Params::new();
        for (i, m) in mods.iter().enumerate() {
            m.collect(&format!("m{i}"), &mut enc_params);
        }
        let mut critic_params = Params::new();
        bank.collect("bank", &mut critic_params);
        for (_, p) in enc_params.iter().chain(critic_params.iter()) {
            p.zero_grad();
        }

        let loss = critic_bank_loss(&feats, &emb, &bank).unwrap();
        loss.backward().unwrap();

        let enc_norm: f64 = enc_params
            .iter()
            .flat_map(|(_, p)| p.grad())
            .map(|g| g * g)
            .sum();
        let critic_norm: f64 = critic_params
            .iter()
            .flat_map(|(_, p)| p.grad())
            .map(|g| g * g)
            .sum();
        assert_eq!(enc_norm, 0.0, "encoder params must not see critic-pass grads");
        assert!(critic_norm > 0.0, "critic params must be trained");
    }

    #[test]
    fn frozen_critics_receive_no_gradient_from_mi_loss() {
        let mut rng = rng_from_seed(16);
        let c = cfg();
        let d_model = 4;
        let h = c.hidden_width(d_model);
        let mods: Vec<FtreModality<f64>> = (0..3)
            .map(|_| FtreModality::new(&mut rng, d_model, h, &c))
            .collect();
        let labels_enc = LabelEncoders::new(&mut rng, h, -3.0, 3.0);
        let bank = CriticBank::new(&mut rng, [h; 3], h, &c);
        let b = 4;
        let feats: Vec<FactorizedFeatures<f64>> = (0..3)
            .map(|m| mods[m].forward(&random_t(&mut rng, &[b, 2, d_model])).unwrap())
            .collect();
        let feats: [FactorizedFeatures<f64>; 3] = feats.try_into().map_err(|_| ()).unwrap();
        let y = random_t(&mut rng, &[b]);
        let emb = labels_enc.encode(&y).unwrap();

        let mut critic_params = Params::new();
        bank.collect("bank", &mut critic_params);
        for (_, p) in critic_params.iter() {
            p.zero_grad();
        }
        let mi = mi_loss(&feats, &emb, &bank, &rotation_shuffle(b, 1)).unwrap();
        mi.total.backward().unwrap();
        let critic_norm: f64 = critic_params
            .iter()
            .flat_map(|(_, p)| p.grad())
            .map(|g| g * g)
            .sum();
        assert_eq!(critic_norm, 0.0);
    }
}
