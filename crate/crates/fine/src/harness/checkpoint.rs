//! Checkpoint serialization: parameters, optimizer state, queue snapshot,
//! position, and RNG state, all as JSON with exact f64 round-tripping.

use std::collections::BTreeMap;
use std::path::Path;

use crate::dcq::QueueSnapshot;
use crate::numcore::nn::Params;
use crate::numcore::{RngState, Scalar};
use crate::{Error, Result};

use super::config::RunConfig;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ParamBlob {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OptState {
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    /// Completed epochs before the current position.
    pub epoch: usize,
    /// Batches already consumed inside `epoch`.
    pub step_in_epoch: usize,
    pub global_step: u64,
    pub rng: RngState,
    pub queue: QueueSnapshot,
    pub params: BTreeMap<String, ParamBlob>,
    pub model_opt: OptState,
    pub critic_opt: OptState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub fn params_to_blobs<S: Scalar>(params: &Params<S>) -> BTreeMap<String, ParamBlob> {
    params
        .iter()
        .map(|(name, t)| {
            (
                name.clone(),
                ParamBlob {
                    shape: t.shape().to_vec(),
                    data: t.to_vec().iter().map(|v| v.as_f64()).collect(),
                },
            )
        })
        .collect()
}

/// Write checkpointed values back into live parameter handles by name.
pub fn restore_params<S: Scalar>(
    params: &Params<S>,
    blobs: &BTreeMap<String, ParamBlob>,
) -> Result<()> {
    if params.len() != blobs.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, model has {}",
            blobs.len(),
            params.len()
        )));
    }
    for (name, t) in params {
        let blob = blobs
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint missing parameter {name}")))?;
        if blob.shape != t.shape() {
            return Err(Error::Config(format!(
                "parameter {name}: checkpoint shape {:?} vs model {:?}",
                blob.shape,
                t.shape()
            )));
        }
        t.set_data(blob.data.iter().map(|&v| S::from_f64(v)).collect());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    #[test]
    fn f64_values_roundtrip_bit_exactly_through_json() {
        let values = vec![
            std::f64::consts::PI,
            1.0 / 3.0,
            -2.2250738585072014e-308,
            6.02214076e23,
            -0.1,
        ];
        let blob = ParamBlob {
            shape: vec![5],
            data: values.clone(),
        };
        let json = serde_json::to_string(&blob).unwrap();
        let back: ParamBlob = serde_json::from_str(&json).unwrap();
        for (a, b) in values.iter().zip(back.data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn restore_rejects_name_and_shape_mismatches() {
        let params: Params<f64> = vec![(
            "w".to_string(),
            Tensor::param(&[2], vec![1.0, 2.0]).unwrap(),
        )];
        let mut blobs = params_to_blobs(&params);
        blobs.insert(
            "other".into(),
            ParamBlob {
                shape: vec![1],
                data: vec![0.0],
            },
        );
        assert!(restore_params(&params, &blobs).is_err());
    }
}
