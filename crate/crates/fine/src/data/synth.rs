//! Generator for tri-modal sequences with known shared/unique latents.
//!
//! Per sample: a shared latent z_s and one unique latent z_m per modality
//! are drawn from standard normals. The label is a clamped linear readout
//! of all latents plus sigma-scaled noise. Each modality renders a fixed
//! linear image of [z_s; z_m] into its signal dimensions over a time
//! window placed at a random per-modality shift (asynchrony), adds
//! sigma-scaled measurement noise, and fills its distractor dimensions
//! with pure noise at 10x sigma. Positions at or beyond the sample length
//! are exactly zero.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::numcore::{rng_from_seed, Rng};
use crate::{Error, Result};

/// Sequence length and feature width of one modality.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ModalityShape {
    pub t: usize,
    pub d: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub text: ModalityShape,
    pub audio: ModalityShape,
    pub video: ModalityShape,
    /// Shared latent dimension (q_s).
    pub shared_dim: usize,
    /// Unique latent dimension per modality (q_m).
    pub unique_dim: usize,
    /// Noise scale sigma; label noise and feature noise are sigma-scaled,
    /// distractor noise is 10x sigma.
    pub sigma: f64,
    /// Max temporal shift of the signal window (asynchrony).
    pub shift_range: usize,
    pub label_min: f64,
    pub label_max: f64,
    /// Fraction of each d_m filled with pure-noise distractor dimensions.
    pub distractor_frac: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_samples: 2000,
            text: ModalityShape { t: 12, d: 16 },
            audio: ModalityShape { t: 10, d: 12 },
            video: ModalityShape { t: 14, d: 20 },
            shared_dim: 4,
            unique_dim: 2,
            sigma: 0.1,
            shift_range: 3,
            label_min: -3.0,
            label_max: 3.0,
            distractor_frac: 0.5,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn shapes(&self) -> [ModalityShape; 3] {
        [self.text, self.audio, self.video]
    }

    pub fn validate(&self) -> Result<()> {
        let min_t = self.shapes().iter().map(|s| s.t).min().unwrap_or(0);
        if self.n_samples == 0
            || self.shared_dim == 0
            || self.unique_dim == 0
            || self.shapes().iter().any(|s| s.t == 0 || s.d == 0)
        {
            return Err(Error::Config("synthetic spec: all dims must be positive".into()));
        }
        if self.sigma < 0.0 {
            return Err(Error::Config("synthetic spec: sigma must be >= 0".into()));
        }
        if self.shift_range >= min_t {
            return Err(Error::Config(format!(
                "synthetic spec: shift_range {} must be < min T_m {}",
                self.shift_range, min_t
            )));
        }
        if !(0.0..1.0).contains(&self.distractor_frac) {
            return Err(Error::Config("synthetic spec: distractor_frac in [0, 1)".into()));
        }
        if self.label_max <= self.label_min {
            return Err(Error::Config("synthetic spec: empty label range".into()));
        }
        let latent = self.shared_dim + self.unique_dim;
        for s in self.shapes() {
            let d_sig = signal_dims(s.d, self.distractor_frac);
            if d_sig < latent {
                return Err(Error::Config(format!(
                    "synthetic spec: {} signal dims cannot carry {} latent dims",
                    d_sig, latent
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn signal_dims(d: usize, distractor_frac: f64) -> usize {
    d - (d as f64 * distractor_frac).floor() as usize
}

/// In-memory result of generation; latents are kept for oracle checks.
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    /// Per modality, flat n x T_m x d_m, row-major.
    pub feats: [Vec<f64>; 3],
    pub lens: [Vec<usize>; 3],
    pub labels: Vec<f64>,
    /// n x shared_dim.
    pub z_shared: Vec<f64>,
    /// Per modality, n x unique_dim.
    pub z_unique: [Vec<f64>; 3],
    /// Shuffled index lists: 70% train, 15% val, 15% test.
    pub split: [Vec<usize>; 3],
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Render one modality sequence from its signal vector.
///
/// Signal dims carry `v` inside [shift, shift+window) plus sigma-noise over
/// all valid steps; distractor dims are pure noise at `distractor_std`;
/// steps at or beyond `length` stay exactly zero.
pub(crate) fn render_sequence(
    v: &[f64],
    shape: ModalityShape,
    length: usize,
    shift: usize,
    window: usize,
    sigma: f64,
    distractor_std: f64,
    rng: &mut Rng,
) -> Vec<f64> {
    let d_sig = v.len();
    let mut out = vec![0.0; shape.t * shape.d];
    for t in 0..length {
        let in_window = t >= shift && t < shift + window;
        for j in 0..shape.d {
            let val = if j < d_sig {
                let base = if in_window { v[j] } else { 0.0 };
                base + sigma * normal(rng)
            } else {
                distractor_std * normal(rng)
            };
            out[t * shape.d + j] = val;
        }
    }
    out
}

/// Deterministic generation from the spec seed.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let n = spec.n_samples;
    let q_s = spec.shared_dim;
    let q_u = spec.unique_dim;
    let shapes = spec.shapes();

    // Fixed readout matrices and label weights. Label weight norms are set
    // so the raw label has std ~1.2: half the variance from the shared
    // latent, half split across the three unique latents.
    let mut readouts: Vec<Vec<f64>> = Vec::new();
    for s in shapes {
        let d_sig = signal_dims(s.d, spec.distractor_frac);
        let scale = 1.0 / ((q_s + q_u) as f64).sqrt();
        readouts.push(
            (0..(q_s + q_u) * d_sig)
                .map(|_| scale * normal(&mut rng))
                .collect(),
        );
    }
    let w_shared = unit_scaled(&mut rng, q_s, 0.72f64.sqrt());
    let w_unique: Vec<Vec<f64>> = (0..3)
        .map(|_| unit_scaled(&mut rng, q_u, 0.24f64.sqrt()))
        .collect();

    let mut feats: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut lens: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut labels = Vec::with_capacity(n);
    let mut z_shared = Vec::with_capacity(n * q_s);
    let mut z_unique: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];

    for _ in 0..n {
        let zs: Vec<f64> = (0..q_s).map(|_| normal(&mut rng)).collect();
        let zu: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..q_u).map(|_| normal(&mut rng)).collect())
            .collect();

        let mut y = dot(&w_shared, &zs);
        for m in 0..3 {
            y += dot(&w_unique[m], &zu[m]);
        }
        y += spec.sigma * normal(&mut rng);
        labels.push(y.clamp(spec.label_min, spec.label_max));

        for m in 0..3 {
            let shape = shapes[m];
            let d_sig = signal_dims(shape.d, spec.distractor_frac);
            // v = R^T [z_s; z_u]
            let mut v = vec![0.0; d_sig];
            for (li, &z) in zs.iter().chain(zu[m].iter()).enumerate() {
                for j in 0..d_sig {
                    v[j] += readouts[m][li * d_sig + j] * z;
                }
            }
            let len_jitter = (shape.t - spec.shift_range - 1).min(2);
            let window = shape.t - spec.shift_range - len_jitter;
            let length = shape.t - rng.gen_range(0..=len_jitter);
            let shift = rng.gen_range(0..=spec.shift_range);
            let seq = render_sequence(
                &v,
                shape,
                length,
                shift,
                window,
                spec.sigma,
                10.0 * spec.sigma,
                &mut rng,
            );
            feats[m].extend_from_slice(&seq);
            lens[m].push(length);
        }

        z_shared.extend_from_slice(&zs);
        for m in 0..3 {
            z_unique[m].extend_from_slice(&zu[m]);
        }
    }

    // 70/15/15 split over a seeded shuffle of the sample indices.
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (n as f64 * 0.70).floor() as usize;
    let n_val = (n as f64 * 0.15).floor() as usize;
    let split = [
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..].to_vec(),
    ];

    Ok(SyntheticData {
        spec: spec.clone(),
        feats,
        lens,
        labels,
        z_shared,
        z_unique,
        split,
    })
}

fn unit_scaled(rng: &mut Rng, n: usize, norm: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    let cur = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    raw.into_iter().map(|v| v * norm / cur).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_latents_and_zero_sigma_render_all_zero() {
        let mut rng = rng_from_seed(0);
        let shape = ModalityShape { t: 6, d: 4 };
        let v = vec![0.0; 2];
        let seq = render_sequence(&v, shape, 5, 1, 3, 0.0, 0.0, &mut rng);
        assert!(seq.iter().all(|&x| x == 0.0));
        // and the label of a zero-latent sample is w . 0 + 0 = 0
        let w = unit_scaled(&mut rng, 3, 1.0);
        assert_eq!(dot(&w, &[0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SyntheticSpec {
            n_samples: 8,
            ..SyntheticSpec::default()
        };
        let a = synthesize(&spec).unwrap();
        let b = synthesize(&spec).unwrap();
        for m in 0..3 {
            assert_eq!(a.feats[m], b.feats[m]);
            assert_eq!(a.lens[m], b.lens[m]);
        }
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.split, b.split);
    }

    #[test]
    fn padded_positions_are_exactly_zero() {
        let spec = SyntheticSpec {
            n_samples: 16,
            ..SyntheticSpec::default()
        };
        let data = synthesize(&spec).unwrap();
        let shapes = spec.shapes();
        for m in 0..3 {
            let (t, d) = (shapes[m].t, shapes[m].d);
            for i in 0..spec.n_samples {
                for ti in data.lens[m][i]..t {
                    for j in 0..d {
                        assert_eq!(data.feats[m][(i * t + ti) * d + j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn labels_respect_range() {
        let spec = SyntheticSpec {
            n_samples: 200,
            sigma: 2.0,
            ..SyntheticSpec::default()
        };
        let data = synthesize(&spec).unwrap();
        assert!(data
            .labels
            .iter()
            .all(|&y| (spec.label_min..=spec.label_max).contains(&y)));
    }

    #[test]
    fn validate_rejects_large_shift() {
        let spec = SyntheticSpec {
            shift_range: 10,
            audio: ModalityShape { t: 10, d: 12 },
            ..SyntheticSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn split_is_70_15_15_partition() {
        let spec = SyntheticSpec {
            n_samples: 100,
            ..SyntheticSpec::default()
        };
        let data = synthesize(&spec).unwrap();
        assert_eq!(data.split[0].len(), 70);
        assert_eq!(data.split[1].len(), 15);
        assert_eq!(data.split[2].len(), 15);
        let mut all: Vec<usize> = data.split.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
