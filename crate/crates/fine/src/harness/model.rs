//! Full model assembly: extractors, factorization, fusion, unimodal
//! decoders, plus the ablation variants that swap components for plain
//! projections.

use crate::data::{Manifest, ModalityBatch, Modality};
use crate::dcq::AcconConfig;
use crate::ftre::{
    critic_bank_loss, mi_loss, CriticBank, FactorizedFeatures, FtreConfig, LabelEmbeddings,
    LabelEncoders, FtreModality, MiLossBreakdown,
};
use crate::fusion::{FusionConfig, FusionModel, LossWeights, UnimodalDecoder};
use crate::moq::{aux_loss, MoqLayer, RoutingDecision};
use crate::numcore::nn::{Linear, Mlp2, Params};
use crate::numcore::ops::{concat, sum_tensors};
use crate::numcore::{Rng, Scalar, Tensor};
use crate::{Error, Result};

use super::config::RunConfig;

/// Resolved widths shared by every component.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub d_in: [usize; 3],
    pub d_model: [usize; 3],
    pub n_queries: usize,
    pub top_k: usize,
    pub h: [usize; 3],
    pub d_task: usize,
}

impl ModelDims {
    pub fn from_config(cfg: &RunConfig, manifest: &Manifest) -> Result<Self> {
        let moq_cfg = crate::moq::MoqConfig {
            num_experts: cfg.moq_num_experts,
            top_k_ratio: cfg.moq_top_k_ratio,
            num_query_tokens: cfg.moq_num_query_tokens,
            dims: [cfg.moq_dim_text, cfg.moq_dim_audio, cfg.moq_dim_video],
        };
        let top_k = moq_cfg.top_k()?;
        let d_in = [
            manifest.modalities["text"].d,
            manifest.modalities["audio"].d,
            manifest.modalities["video"].d,
        ];
        let ftre = FtreConfig {
            reduction_ratio: cfg.ftre_reduction_ratio,
            critic_dim: cfg.ftre_critic_dim,
            critic_temperature: cfg.ftre_critic_temperature,
            critic_hidden: cfg.ftre_critic_hidden,
        };
        let h = [
            ftre.hidden_width(moq_cfg.dims[0]),
            ftre.hidden_width(moq_cfg.dims[1]),
            ftre.hidden_width(moq_cfg.dims[2]),
        ];
        // Common task-relevant width: the reduction of the widest modality.
        let d_task = *h.iter().max().unwrap();
        Ok(ModelDims {
            d_in,
            d_model: moq_cfg.dims,
            n_queries: cfg.moq_num_query_tokens,
            top_k,
            h,
            d_task,
        })
    }
}

/// Sequence-to-tokens stage: the expert mixture, or a plain projection of
/// the pooled sequence when MoQ is ablated.
pub enum Extractor<S: Scalar> {
    Moq(MoqLayer<S>),
    Identity { proj: Linear<S>, n_tokens: usize },
}

impl<S: Scalar> Extractor<S> {
    fn forward(
        &self,
        x: &Tensor<S>,
        lens: &[usize],
    ) -> Result<(Tensor<S>, Option<RoutingDecision<S>>)> {
        match self {
            Extractor::Moq(layer) => {
                let (out, decision) = layer.forward(x, lens)?;
                Ok((out, Some(decision)))
            }
            Extractor::Identity { proj, n_tokens } => {
                let pooled = proj.forward(&x.masked_mean_time(lens)?)?;
                let b = pooled.shape()[0];
                let d = pooled.shape()[1];
                let row = pooled.reshape(&[b, 1, d])?;
                let tokens = concat(1, &vec![row; *n_tokens])?;
                Ok((tokens, None))
            }
        }
    }

    fn collect(&self, prefix: &str, out: &mut Params<S>) {
        match self {
            Extractor::Moq(layer) => layer.collect(prefix, out),
            Extractor::Identity { proj, .. } => proj.collect(&format!("{prefix}.proj"), out),
        }
    }
}

/// Simple replacement for the factorized encoder when FTRE is ablated:
/// two projections of the pooled tokens, no MI machinery.
pub struct PassThroughEnc<S: Scalar> {
    to_str: Mlp2<S>,
    to_utr: Mlp2<S>,
}

pub enum Factorizer<S: Scalar> {
    Full {
        mods: [FtreModality<S>; 3],
        labels: LabelEncoders<S>,
        critics: CriticBank<S>,
    },
    PassThrough([PassThroughEnc<S>; 3]),
}

/// One forward pass over a batch.
pub struct StepForward<S: Scalar> {
    pub y_hat: Tensor<S>,
    pub y_unimodal: [Tensor<S>; 3],
    /// Unit-normalized queue embedding, [B x 3*d_fusion].
    pub z: Tensor<S>,
    pub l_aux: Tensor<S>,
    pub l_mi: Tensor<S>,
    pub mi_breakdown: MiLossBreakdown,
    /// Present only for the full factorizer on batches of >= 2 samples.
    pub features: Option<[FactorizedFeatures<S>; 3]>,
    pub label_emb: Option<LabelEmbeddings<S>>,
    /// The (x_str, x_utr) pair per modality fed into fusion.
    pub blocks: [(Tensor<S>, Tensor<S>); 3],
}

pub struct FineModel<S: Scalar> {
    pub dims: ModelDims,
    pub extractors: [Extractor<S>; 3],
    pub factorizer: Factorizer<S>,
    pub fusion: FusionModel<S>,
    pub unimodal: [UnimodalDecoder<S>; 3],
    pub weights: LossWeights,
    pub accon: AcconConfig,
    pub disable_dcq: bool,
}

impl<S: Scalar> FineModel<S> {
    pub fn new(cfg: &RunConfig, manifest: &Manifest, rng: &mut Rng) -> Result<Self> {
        let dims = ModelDims::from_config(cfg, manifest)?;
        let ftre_cfg = FtreConfig {
            reduction_ratio: cfg.ftre_reduction_ratio,
            critic_dim: cfg.ftre_critic_dim,
            critic_temperature: cfg.ftre_critic_temperature,
            critic_hidden: cfg.ftre_critic_hidden,
        };

        let extractors: [Extractor<S>; 3] = if cfg.disable_moq {
            std::array::from_fn(|m| Extractor::Identity {
                proj: Linear::new(rng, dims.d_in[m], dims.d_model[m]),
                n_tokens: dims.n_queries,
            })
        } else {
            let mut make = |m: usize| -> Result<Extractor<S>> {
                Ok(Extractor::Moq(MoqLayer::new(
                    rng,
                    dims.d_in[m],
                    dims.d_model[m],
                    dims.n_queries,
                    cfg.moq_num_experts,
                    dims.top_k,
                )?))
            };
            [make(0)?, make(1)?, make(2)?]
        };

        let factorizer = if cfg.disable_ftre {
            Factorizer::PassThrough(std::array::from_fn(|m| PassThroughEnc {
                to_str: Mlp2::new(rng, dims.d_model[m], dims.h[m], dims.d_task),
                to_utr: Mlp2::new(rng, dims.d_model[m], dims.h[m], dims.d_task),
            }))
        } else {
            Factorizer::Full {
                mods: std::array::from_fn(|m| {
                    FtreModality::new(rng, dims.d_model[m], dims.d_task, &ftre_cfg)
                }),
                labels: LabelEncoders::new(
                    rng,
                    dims.d_task,
                    manifest.label_min,
                    manifest.label_max,
                ),
                critics: CriticBank::new(rng, dims.h, dims.d_task, &ftre_cfg),
            }
        };

        let fusion = FusionModel::new(
            rng,
            dims.d_task,
            FusionConfig {
                layers: cfg.fusion_layers,
                heads: cfg.fusion_heads,
                d_model: 2 * dims.d_task,
                ffn_mult: cfg.fusion_ffn_mult,
                decoder_queries: cfg.fusion_decoder_queries,
            },
        )?;
        let unimodal: [UnimodalDecoder<S>; 3] =
            std::array::from_fn(|_| UnimodalDecoder::new(rng, dims.d_task, cfg.fusion_decoder_queries));

        let weights = LossWeights {
            lambda_up: cfg.lambda_up,
            lambda_cl: cfg.lambda_cl,
            lambda_aux: cfg.lambda_aux,
            beta_mi: cfg.beta_mi,
        };
        let accon = AcconConfig {
            tau: cfg.dcq_tau,
            epsilon: cfg.dcq_epsilon,
            label_min: manifest.label_min,
            label_max: manifest.label_max,
            alpha: cfg.dcq_alpha,
            s_min: cfg.dcq_s_min,
            bins: cfg.dcq_bins,
        };
        accon.validate()?;

        Ok(FineModel {
            dims,
            extractors,
            factorizer,
            fusion,
            unimodal,
            weights,
            accon,
            disable_dcq: cfg.disable_dcq,
        })
    }

    /// Forward through extraction, factorization, fusion and the unimodal
    /// heads. `shuffle` drives the in-batch negatives of the CLUB
    /// estimators; it must be a valid index permutation for the batch.
    pub fn forward(&self, batch: &ModalityBatch<S>, shuffle: &[usize]) -> Result<StepForward<S>> {
        let b = batch.batch_size();

        let mut xhat = Vec::with_capacity(3);
        let mut aux_terms = Vec::new();
        for m in Modality::ALL {
            let i = m.index();
            let (tokens, decision) = self.extractors[i].forward(&batch.feats[i], &batch.lens[i])?;
            if let Some(d) = decision {
                aux_terms.push(aux_loss(&d.dispatch_fraction, &d.mean_gate_prob)?);
            }
            xhat.push(tokens);
        }
        let l_aux = if aux_terms.is_empty() {
            Tensor::scalar(S::zero())
        } else {
            sum_tensors(&aux_terms)?.scale(S::from_f64(1.0 / aux_terms.len() as f64))
        };

        let zero_breakdown = MiLossBreakdown {
            i_sha: 0.0,
            i_uni: 0.0,
            i_str: 0.0,
            i_utr: 0.0,
            l_recon: 0.0,
            l_mi: 0.0,
        };

        let (blocks, l_mi, mi_breakdown, features, label_emb) = match &self.factorizer {
            Factorizer::PassThrough(encs) => {
                let mut blocks = Vec::with_capacity(3);
                for m in 0..3 {
                    let pooled = xhat[m].mean_axis(1)?;
                    blocks.push((encs[m].to_str.forward(&pooled)?, encs[m].to_utr.forward(&pooled)?));
                }
                (
                    blocks,
                    Tensor::scalar(S::zero()),
                    zero_breakdown,
                    None,
                    None,
                )
            }
            Factorizer::Full {
                mods,
                labels,
                critics,
            } => {
                let feats: Vec<FactorizedFeatures<S>> = (0..3)
                    .map(|m| mods[m].forward(&xhat[m]))
                    .collect::<Result<_>>()?;
                let feats: [FactorizedFeatures<S>; 3] =
                    feats.try_into().map_err(|_| Error::Config("3 modalities".into()))?;
                let blocks: Vec<(Tensor<S>, Tensor<S>)> = feats
                    .iter()
                    .map(|f| (f.x_str.clone(), f.x_utr.clone()))
                    .collect();
                if b >= 2 {
                    let emb = labels.encode(&batch.labels)?;
                    let mi = mi_loss(&feats, &emb, critics, shuffle)?;
                    (blocks, mi.total, mi.breakdown, Some(feats), Some(emb))
                } else {
                    // estimators need in-batch negatives; a singleton batch
                    // contributes reconstruction only
                    let l_recon = feats[0]
                        .l_recon
                        .add(&feats[1].l_recon)?
                        .add(&feats[2].l_recon)?
                        .scale(S::from_f64(1.0 / 3.0));
                    let bd = MiLossBreakdown {
                        l_recon: l_recon.item().as_f64(),
                        l_mi: l_recon.item().as_f64(),
                        ..zero_breakdown
                    };
                    (blocks, l_recon, bd, Some(feats), None)
                }
            }
        };
        let blocks: [(Tensor<S>, Tensor<S>); 3] =
            blocks.try_into().map_err(|_| Error::Config("3 modalities".into()))?;

        let (y_hat, z) = self.fusion.fuse_predict(&blocks)?;
        let y_unimodal: [Tensor<S>; 3] = [
            self.unimodal[0].forward(&blocks[0].0, &blocks[0].1)?,
            self.unimodal[1].forward(&blocks[1].0, &blocks[1].1)?,
            self.unimodal[2].forward(&blocks[2].0, &blocks[2].1)?,
        ];

        Ok(StepForward {
            y_hat,
            y_unimodal,
            z,
            l_aux,
            l_mi,
            mi_breakdown,
            features,
            label_emb,
            blocks,
        })
    }

    /// InfoNCE loss trained by the critic pass, when the full factorizer
    /// is active and the batch supports in-batch negatives.
    pub fn critic_loss(&self, step: &StepForward<S>) -> Result<Option<Tensor<S>>> {
        if let (Factorizer::Full { critics, .. }, Some(features), Some(emb)) =
            (&self.factorizer, &step.features, &step.label_emb)
        {
            Ok(Some(critic_bank_loss(features, emb, critics)?))
        } else {
            Ok(None)
        }
    }

    /// Parameters updated by the model optimizer.
    pub fn model_params(&self) -> Params<S> {
        let mut out = Params::new();
        for (m, e) in self.extractors.iter().enumerate() {
            e.collect(&format!("extractor{m}"), &mut out);
        }
        match &self.factorizer {
            Factorizer::Full { mods, labels, .. } => {
                for (m, f) in mods.iter().enumerate() {
                    f.collect(&format!("ftre{m}"), &mut out);
                }
                labels.collect("labels", &mut out);
            }
            Factorizer::PassThrough(encs) => {
                for (m, e) in encs.iter().enumerate() {
                    e.to_str.collect(&format!("pass{m}.to_str"), &mut out);
                    e.to_utr.collect(&format!("pass{m}.to_utr"), &mut out);
                }
            }
        }
        self.fusion.collect("fusion", &mut out);
        for (m, d) in self.unimodal.iter().enumerate() {
            d.collect(&format!("unimodal{m}"), &mut out);
        }
        out
    }

    /// Parameters updated by the critic optimizer.
    pub fn critic_params(&self) -> Params<S> {
        let mut out = Params::new();
        if let Factorizer::Full { critics, .. } = &self.factorizer {
            critics.collect("critics", &mut out);
        }
        out
    }
}
