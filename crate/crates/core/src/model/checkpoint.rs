use std::path::Path;

use serde_json::{json, Value};

use crate::container::Container;
use crate::error::{PktError, Result};
use crate::numerics::Tensor;

use super::params::{LayerParams, ModelConfig, TransformerParams};

impl TransformerParams<f32> {
    pub fn to_container(&self, provenance: Value) -> Container {
        let mut c = Container::new(json!({
            "kind": "model",
            "config": self.config,
            "provenance": provenance,
        }));
        for (name, t) in self.named() {
            c.push(name, t.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            c.metadata.get("config").cloned().ok_or_else(|| PktError::container("metadata.config", "missing"))?,
        )
        .map_err(|e| PktError::container("metadata.config", e.to_string()))?;
        config.validate().map_err(|e| PktError::container("metadata.config", e.to_string()))?;
        let (b, d, n) = (config.vocab, config.d_model, config.n_ffn);
        let take = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
            let t = c.require(name)?;
            if t.shape() != shape {
                return Err(PktError::container(name, format!("shape {:?}, config implies {:?}", t.shape(), shape)));
            }
            Ok(t.clone())
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            layers.push(LayerParams {
                wq: take(&p("wq"), &[d, d])?,
                wk: take(&p("wk"), &[d, d])?,
                wv: take(&p("wv"), &[d, d])?,
                wo: take(&p("wo"), &[d, d])?,
                w_up: take(&p("w_up"), &[n, d])?,
                w_down: take(&p("w_down"), &[d, n])?,
            });
        }
        let params = TransformerParams {
            config,
            embed: take("embed", &[b, d])?,
            unembed: take("unembed", &[b, d])?,
            layers,
            final_norm: take("final_norm", &[d])?,
        };
        if c.tensors.len() != params.named().len() {
            return Err(PktError::container("tensor table", "unexpected extra tensors"));
        }
        Ok(params)
    }
}

pub fn save_checkpoint(params: &TransformerParams<f32>, path: &Path, provenance: Value) -> Result<()> {
    params.to_container(provenance).write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<TransformerParams<f32>> {
    Ok(load_checkpoint_with_metadata(path)?.0)
}

pub fn load_checkpoint_with_metadata(path: &Path) -> Result<(TransformerParams<f32>, Value)> {
    let c = Container::read(path)?;
    let p = TransformerParams::from_container(&c)?;
    Ok((p, c.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn save_then_load_is_bitwise() {
        let cfg = ModelConfig { layers: 2, d_model: 8, n_ffn: 16, heads: 2, vocab: 10, max_len: 4, seed: 7 };
        let p = TransformerParams::<f32>::init(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pktc");
        save_checkpoint(&p, &path, json!({"seed": 7})).unwrap();
        let (q, meta) = load_checkpoint_with_metadata(&path).unwrap();
        assert!(p.bitwise_eq(&q));
        assert_eq!(meta["provenance"]["seed"], 7);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(PktError::Container { .. })));
    }
}
