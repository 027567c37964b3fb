//! Dynamic contrastive queue: label-binned FIFO sub-queues with adaptive
//! capacity, plus the angle-compensated contrastive loss over the
//! candidate pool batch-union-queue.
//!
//! Stored entries are unit-normalized and never carry gradients; only the
//! current batch anchors are differentiable. Labels outside the declared
//! range are clamped into the boundary bin and counted in the diagnostics.

use std::collections::VecDeque;

use crate::numcore::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AcconConfig {
    /// Contrastive temperature tau.
    pub tau: f64,
    /// Smoothing term inside the compensated-cosine square root.
    pub epsilon: f64,
    pub label_min: f64,
    pub label_max: f64,
    /// Capacity adjustment factor, in (0, 1].
    pub alpha: f64,
    /// Minimum sub-queue capacity.
    pub s_min: usize,
    /// Number of label bins K.
    pub bins: usize,
}

impl AcconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config("accon: tau must be > 0".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("accon: epsilon must be > 0".into()));
        }
        if self.bins < 2 {
            return Err(Error::Config("accon: need at least 2 bins".into()));
        }
        if self.label_max <= self.label_min {
            return Err(Error::Config("accon: empty label range".into()));
        }
        if !(0.0 < self.alpha && self.alpha <= 1.0) {
            return Err(Error::Config("accon: alpha must be in (0, 1]".into()));
        }
        if self.s_min == 0 {
            return Err(Error::Config("accon: s_min must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for AcconConfig {
    fn default() -> Self {
        AcconConfig {
            tau: 0.1,
            epsilon: 1e-8,
            label_min: -3.0,
            label_max: 3.0,
            alpha: 0.3,
            s_min: 64,
            bins: 7,
        }
    }
}

/// Capacity rule: max(ceil(alpha * N_i), S_min).
pub fn subqueue_capacity(n_i: usize, alpha: f64, s_min: usize) -> Result<usize> {
    if !(0.0 < alpha && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha {alpha} outside (0, 1]")));
    }
    if s_min == 0 {
        return Err(Error::Config("s_min must be >= 1".into()));
    }
    Ok(((alpha * n_i as f64).ceil() as usize).max(s_min))
}

/// Compensation angle for a negative pair: pi * (1 - |gap| / range),
/// clamped into [0, pi]. The absolute gap keeps the angle valid when the
/// negative's label is below the anchor's.
pub fn compensation_angle(y_anc: f64, y_neg: f64, y_min: f64, y_max: f64) -> Result<f64> {
    if y_max <= y_min {
        return Err(Error::Config("compensation_angle: empty label range".into()));
    }
    let gap = (y_neg - y_anc).abs();
    let phi = std::f64::consts::PI * (1.0 - gap / (y_max - y_min));
    Ok(phi.clamp(0.0, std::f64::consts::PI))
}

/// cos(theta + phi) with smoothing: c*cos(phi) - |sin(phi)|*sqrt(1 - c^2 + eps).
/// Rejects |c| > 1 + 1e-6; values inside the tolerance band clamp to [-1, 1].
pub fn compensated_cosine(c: f64, phi: f64, eps: f64) -> Result<f64> {
    if c.abs() > 1.0 + 1e-6 {
        return Err(Error::input(
            "compensated_cosine",
            format!("|cosine| = {} > 1 + 1e-6", c.abs()),
        ));
    }
    let c = c.clamp(-1.0, 1.0);
    let rad = (1.0 - c * c + eps).max(0.0);
    Ok(c * phi.cos() - phi.sin().abs() * rad.sqrt())
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct QueueDiagnostics {
    /// Labels clamped into a boundary bin during updates.
    pub out_of_range: u64,
    /// Anchors skipped for lack of positives.
    pub skipped_anchors: u64,
    /// Loss calls where no anchor had a positive.
    pub empty_pool_events: u64,
    /// Total queue updates.
    pub updates: u64,
}

/// K label-binned FIFO sub-queues of (unit embedding, label) entries.
pub struct QueueState<S: Scalar> {
    cfg: AcconConfig,
    queues: Vec<VecDeque<(Vec<S>, f64)>>,
    capacities: Vec<usize>,
    pub diag: QueueDiagnostics,
}

impl<S: Scalar> QueueState<S> {
    /// Capacities derive from the per-bin training-set counts.
    pub fn new(cfg: AcconConfig, bin_counts: &[usize]) -> Result<Self> {
        cfg.validate()?;
        if bin_counts.len() != cfg.bins {
            return Err(Error::Config(format!(
                "{} bin counts for {} bins",
                bin_counts.len(),
                cfg.bins
            )));
        }
        let capacities = bin_counts
            .iter()
            .map(|&n| subqueue_capacity(n, cfg.alpha, cfg.s_min))
            .collect::<Result<Vec<_>>>()?;
        Ok(QueueState {
            queues: vec![VecDeque::new(); cfg.bins],
            capacities,
            cfg,
            diag: QueueDiagnostics::default(),
        })
    }

    pub fn config(&self) -> &AcconConfig {
        &self.cfg
    }

    pub fn capacities(&self) -> &[usize] {
        &self.capacities
    }

    pub fn len(&self, bin: usize) -> usize {
        self.queues[bin].len()
    }

    pub fn total_len(&self) -> usize {
        self.queues.iter().map(|q| q.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    /// Bin index of a label; out-of-range labels go to the boundary bin.
    pub fn bin_of(&self, y: f64) -> (usize, bool) {
        let k = self.cfg.bins as f64;
        let span = self.cfg.label_max - self.cfg.label_min;
        let raw = ((y - self.cfg.label_min) / span * k).floor() as i64;
        if raw < 0 {
            (0, true)
        } else if raw >= self.cfg.bins as i64 {
            // label_max itself belongs to the last bin, not out of range
            (self.cfg.bins - 1, y > self.cfg.label_max)
        } else {
            (raw as usize, false)
        }
    }

    /// Append a batch of embeddings; rows are normalized here. Oldest
    /// entries are evicted once a sub-queue exceeds its capacity.
    pub fn update(&mut self, z: &Tensor<S>, labels: &[f64]) -> Result<()> {
        if z.ndim() != 2 || z.shape()[0] != labels.len() {
            return Err(Error::shape(
                "queue_update",
                format!("{:?} with {} labels", z.shape(), labels.len()),
            ));
        }
        let d = z.shape()[1];
        let data = z.to_vec();
        for (i, &y) in labels.iter().enumerate() {
            let row = &data[i * d..(i + 1) * d];
            let norm = row
                .iter()
                .map(|&v| v * v)
                .sum::<S>()
                .sqrt()
                .max(S::from_f64(1e-12));
            let unit: Vec<S> = row.iter().map(|&v| v / norm).collect();
            let (bin, clamped) = self.bin_of(y);
            if clamped {
                self.diag.out_of_range += 1;
            }
            let q = &mut self.queues[bin];
            q.push_back((unit, y));
            while q.len() > self.capacities[bin] {
                q.pop_front();
            }
        }
        self.diag.updates += 1;
        Ok(())
    }

    /// Entries flattened in bin-then-FIFO order: (matrix rows, labels).
    pub fn flattened(&self, d: usize) -> (Vec<S>, Vec<f64>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for q in &self.queues {
            for (z, y) in q {
                debug_assert_eq!(z.len(), d);
                rows.extend_from_slice(z);
                labels.push(*y);
            }
        }
        (rows, labels)
    }

    /// Entry iterator for property checks: (bin, position, embedding, label).
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, &[S], f64)> {
        self.queues.iter().enumerate().flat_map(|(b, q)| {
            q.iter()
                .enumerate()
                .map(move |(i, (z, y))| (b, i, z.as_slice(), *y))
        })
    }

    /// Serializable snapshot (f64) for checkpoints.
    pub fn snapshot(&self) -> QueueSnapshot {
        QueueSnapshot {
            queues: self
                .queues
                .iter()
                .map(|q| {
                    q.iter()
                        .map(|(z, y)| (z.iter().map(|v| v.as_f64()).collect(), *y))
                        .collect()
                })
                .collect(),
            diag: self.diag.clone(),
        }
    }

    pub fn restore(&mut self, snap: &QueueSnapshot) -> Result<()> {
        if snap.queues.len() != self.cfg.bins {
            return Err(Error::Config("queue snapshot bin count mismatch".into()));
        }
        self.queues = snap
            .queues
            .iter()
            .map(|q| {
                q.iter()
                    .map(|(z, y)| (z.iter().map(|&v| S::from_f64(v)).collect(), *y))
                    .collect()
            })
            .collect();
        self.diag = snap.diag.clone();
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct QueueSnapshot {
    pub queues: Vec<Vec<(Vec<f64>, f64)>>,
    pub diag: QueueDiagnostics,
}

/// Side information from one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AcconStats {
    pub contributing_anchors: usize,
    pub skipped_anchors: usize,
    pub pool_size: usize,
}

/// Angle-compensated contrastive loss over batch-union-queue.
///
/// Anchors are the rows of `z` (must be unit-normalized; gradients flow
/// through them). Positives are candidates in the anchor's label bin,
/// negatives everything else; the anchor itself is excluded. Per anchor:
/// -1/|P| sum_p log( exp(s_ip/tau) / (sum_P exp(s/tau) + sum_N
/// exp(comp/tau)) ), which reduces to log denom - mean_P(s)/tau. Anchors
/// without positives are skipped and counted; an entirely positive-free
/// batch returns zero with a diagnostic flag.
pub fn accon_loss<S: Scalar>(
    z: &Tensor<S>,
    labels: &[f64],
    state: &QueueState<S>,
    cfg: &AcconConfig,
) -> Result<(Tensor<S>, AcconStats)> {
    cfg.validate()?;
    if z.ndim() != 2 || z.shape()[0] != labels.len() {
        return Err(Error::shape(
            "accon_loss",
            format!("{:?} with {} labels", z.shape(), labels.len()),
        ));
    }
    let b = labels.len();
    if b == 0 {
        return Err(Error::input("accon_loss", "empty batch"));
    }
    let d = z.shape()[1];
    {
        let zd = z.data();
        for i in 0..b {
            let n: S = zd[i * d..(i + 1) * d].iter().map(|&v| v * v).sum();
            if (n.as_f64() - 1.0).abs() > 1e-6 {
                return Err(Error::input(
                    "accon_loss",
                    format!("anchor {i} is not unit-norm (|z|^2 = {})", n.as_f64()),
                ));
            }
        }
    }

    let anchor_bins: Vec<usize> = labels.iter().map(|&y| state.bin_of(y).0).collect();
    let (q_rows, q_labels) = state.flattened(d);
    let nq = q_labels.len();
    let q_bins: Vec<usize> = q_labels.iter().map(|&y| state.bin_of(y).0).collect();

    // Candidate similarity blocks.
    let sims_bb = z.matmul_nt(z)?;
    let sims_bq = if nq > 0 {
        Some(z.matmul_nt(&Tensor::leaf(vec![nq, d], q_rows, false))?)
    } else {
        None
    };

    // Masks and compensation constants.
    let span = cfg.label_max - cfg.label_min;
    let mut pos_bb = vec![S::zero(); b * b];
    let mut neg_bb = vec![S::zero(); b * b];
    let mut cos_bb = vec![S::one(); b * b];
    let mut sin_bb = vec![S::zero(); b * b];
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            if anchor_bins[i] == anchor_bins[j] {
                pos_bb[i * b + j] = S::one();
            } else {
                neg_bb[i * b + j] = S::one();
                let phi = std::f64::consts::PI * (1.0 - (labels[j] - labels[i]).abs() / span);
                let phi = phi.clamp(0.0, std::f64::consts::PI);
                cos_bb[i * b + j] = S::from_f64(phi.cos());
                sin_bb[i * b + j] = S::from_f64(phi.sin().abs());
            }
        }
    }
    let mut pos_bq = vec![S::zero(); b * nq];
    let mut neg_bq = vec![S::zero(); b * nq];
    let mut cos_bq = vec![S::one(); b * nq];
    let mut sin_bq = vec![S::zero(); b * nq];
    for i in 0..b {
        for j in 0..nq {
            if anchor_bins[i] == q_bins[j] {
                pos_bq[i * nq + j] = S::one();
            } else {
                neg_bq[i * nq + j] = S::one();
                let phi = std::f64::consts::PI * (1.0 - (q_labels[j] - labels[i]).abs() / span);
                let phi = phi.clamp(0.0, std::f64::consts::PI);
                cos_bq[i * nq + j] = S::from_f64(phi.cos());
                sin_bq[i * nq + j] = S::from_f64(phi.sin().abs());
            }
        }
    }

    // Per-anchor positive counts and contribution weights.
    let mut pos_counts = vec![0usize; b];
    for i in 0..b {
        let row_p = pos_bb[i * b..(i + 1) * b]
            .iter()
            .filter(|&&v| v == S::one())
            .count();
        let q_p = pos_bq[i * nq..(i + 1) * nq]
            .iter()
            .filter(|&&v| v == S::one())
            .count();
        pos_counts[i] = row_p + q_p;
    }
    let contributing: Vec<bool> = pos_counts.iter().map(|&c| c > 0).collect();
    let n_contrib = contributing.iter().filter(|&&c| c).count();
    let stats = AcconStats {
        contributing_anchors: n_contrib,
        skipped_anchors: b - n_contrib,
        pool_size: b + nq,
    };
    if n_contrib == 0 {
        return Ok((Tensor::scalar(S::zero()), stats));
    }

    let inv_tau = S::from_f64(1.0 / cfg.tau);
    let eps = S::from_f64(cfg.epsilon);
    let mk = |v: Vec<S>, r: usize, c: usize| Tensor::leaf(vec![r, c], v, false);

    // exp(s/tau) on positives, exp(comp(s)/tau) on negatives, masked.
    let e_pos_bb = sims_bb
        .scale(inv_tau)
        .exp()?
        .mul(&mk(pos_bb.clone(), b, b))?;
    let comp_bb = sims_bb.compensated_cosine(&cos_bb, &sin_bb, eps)?;
    let e_neg_bb = comp_bb.scale(inv_tau).exp()?.mul(&mk(neg_bb, b, b))?;
    let mut denom = e_pos_bb.sum_axis(1)?.add(&e_neg_bb.sum_axis(1)?)?;
    let mut pos_sum = sims_bb.mul(&mk(pos_bb, b, b))?.sum_axis(1)?;

    if let Some(sims_bq) = &sims_bq {
        let e_pos_bq = sims_bq
            .scale(inv_tau)
            .exp()?
            .mul(&mk(pos_bq.clone(), b, nq))?;
        let comp_bq = sims_bq.compensated_cosine(&cos_bq, &sin_bq, eps)?;
        let e_neg_bq = comp_bq.scale(inv_tau).exp()?.mul(&mk(neg_bq, b, nq))?;
        denom = denom
            .add(&e_pos_bq.sum_axis(1)?)?
            .add(&e_neg_bq.sum_axis(1)?)?;
        pos_sum = pos_sum.add(&sims_bq.mul(&mk(pos_bq, b, nq))?.sum_axis(1)?)?;
    }

    // Guard skipped anchors: give them a denominator of 1 (ln -> 0) and a
    // zero weight so they contribute nothing, exactly.
    let guard: Vec<S> = contributing
        .iter()
        .map(|&c| if c { S::zero() } else { S::one() })
        .collect();
    let weights: Vec<S> = contributing
        .iter()
        .map(|&c| if c { S::one() } else { S::zero() })
        .collect();
    let inv_counts: Vec<S> = pos_counts
        .iter()
        .map(|&c| S::from_f64(1.0 / c.max(1) as f64))
        .collect();

    let denom_guarded = denom.add(&Tensor::leaf(vec![b], guard, false))?;
    let mean_pos = pos_sum
        .mul(&Tensor::leaf(vec![b], inv_counts, false))?
        .scale(inv_tau);
    let per_anchor = denom_guarded.ln_elem()?.sub(&mean_pos)?;
    let loss = per_anchor
        .mul(&Tensor::leaf(vec![b], weights, false))?
        .sum_all()
        .scale(S::from_f64(1.0 / n_contrib as f64));
    Ok((loss, stats))
}
