//! JSON checkpoints of trained networks. Floats are written in shortest
//! round-trip form, so loading reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{MapParams, MlpSpec, Normalization};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub spec: MlpSpec,
    /// Per layer, `out` rows of `in` weights.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub norm_in: Normalization,
    pub norm_out: Normalization,
    #[serde(default)]
    pub alpha: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
    /// Training method that produced the weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
}

impl Checkpoint {
    pub fn from_params(params: &MapParams, alpha: Option<f64>, config_hash: &str, seed: u64) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            spec: params.spec.clone(),
            weights: params
                .weights
                .iter()
                .map(|w| w.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
            biases: params.biases.iter().map(|b| b.to_vec()).collect(),
            norm_in: params.norm_in.clone(),
            norm_out: params.norm_out.clone(),
            alpha,
            config_hash: config_hash.to_string(),
            seed,
            method: None,
        }
    }

    pub fn with_method(mut self, method: &str) -> Self {
        self.method = Some(method.to_string());
        self
    }

    pub fn params(&self) -> Result<MapParams> {
        self.spec.validate()?;
        let shapes = self.spec.layer_shapes();
        if self.weights.len() != shapes.len() || self.biases.len() != shapes.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} weight and {} bias layers, the network needs {}",
                self.weights.len(),
                self.biases.len(),
                shapes.len()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, ((out, inp), (w, b))) in shapes.iter().zip(self.weights.iter().zip(&self.biases)).enumerate() {
            if w.len() != *out || w.iter().any(|r| r.len() != *inp) || b.len() != *out {
                return Err(Error::Format(format!("layer {l} does not match the network layout ({out}x{inp})")));
            }
            weights.push(Array2::from_shape_fn((*out, *inp), |(i, j)| w[i][j]));
            biases.push(Array1::from(b.clone()));
        }
        let norms_ok = self.norm_in.mean.len() == self.spec.in_dim
            && self.norm_in.std.len() == self.spec.in_dim
            && self.norm_out.mean.len() == self.spec.out_dim
            && self.norm_out.std.len() == self.spec.out_dim;
        if !norms_ok {
            return Err(Error::Format("normalization statistics do not match the network layout".into()));
        }
        Ok(MapParams {
            spec: self.spec.clone(),
            weights,
            biases,
            norm_in: self.norm_in.clone(),
            norm_out: self.norm_out.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let version = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format(format!("{}: missing format_version", path.display())))?;
        if version > CHECKPOINT_VERSION as u64 {
            return Err(Error::Format(format!(
                "{}: format version {version} is newer than supported ({CHECKPOINT_VERSION})",
                path.display()
            )));
        }
        Ok(serde_json::from_value(value)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use proptest::prelude::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut p = init_params(&MlpSpec::new(2, 5), 3).unwrap();
        p.norm_in = Normalization { mean: vec![0.1, -1.0 / 3.0], std: vec![1e-8, 7.0 / 9.0] };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.ckpt.json");
        Checkpoint::from_params(&p, Some(0.0123), "abc", 7).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.params().unwrap(), p);
        assert_eq!(back.alpha, Some(0.0123));
        assert_eq!(back.seed, 7);
    }

    #[test]
    fn newer_version_is_rejected() {
        let p = init_params(&MlpSpec::new(2, 1).with_hidden(vec![2]), 0).unwrap();
        let mut c = Checkpoint::from_params(&p, None, "h", 0);
        c.format_version = CHECKPOINT_VERSION + 1;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        c.save(&path).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("newer"), "{err}");
    }

    #[test]
    fn malformed_layers_are_rejected() {
        let p = init_params(&MlpSpec::new(2, 1).with_hidden(vec![2]), 0).unwrap();
        let mut c = Checkpoint::from_params(&p, None, "h", 0);
        c.weights[0].pop();
        assert!(c.params().is_err());
    }

    proptest! {
        #[test]
        fn any_finite_weight_survives_json(vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 6)) {
            let mut p = init_params(&MlpSpec::new(2, 1).with_hidden(vec![2]), 0).unwrap();
            p.weights[0] = Array2::from_shape_vec((2, 2), vals[..4].to_vec()).unwrap();
            p.weights[1] = Array2::from_shape_vec((1, 2), vals[4..].to_vec()).unwrap();
            let c = Checkpoint::from_params(&p, None, "h", 0);
            let text = serde_json::to_string(&c).unwrap();
            let back: Checkpoint = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back.params().unwrap(), p);
        }
    }
}
