//! Versioned JSON checkpoints. Weight matrices are stored either dense or as
//! quantized codes; the loader accepts both.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{is_bias, ModelDims, ModelParams, Result, SeqModelError, Vocabulary};
use crate::compress::{QuantizedMatrix, QuantizedModel};
use crate::event_model::parse_event_code;

pub const FORMAT: &str = "parceltrace-seq-model";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tensor {
    /// Row-major values.
    Dense { shape: Vec<usize>, values: Vec<f64> },
    Quantized(QuantizedMatrix),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dims: ModelDims,
    /// Event codes in vocabulary order (specials excluded).
    pub vocab: Vec<String>,
    /// Quantization bit width when the matrices are stored as codes.
    #[serde(default)]
    pub bits: Option<u32>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn dense(shape: Vec<usize>, values: &[f64]) -> Tensor {
    Tensor::Dense {
        shape,
        values: values.to_vec(),
    }
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams, vocab: &Vocabulary) -> Self {
        let shapes: BTreeMap<String, Vec<usize>> = params
            .matrices()
            .into_iter()
            .map(|(n, m)| (n, vec![m.nrows(), m.ncols()]))
            .collect();
        let tensors = params
            .tensors()
            .into_iter()
            .map(|(n, v)| {
                let shape = shapes.get(&n).cloned().unwrap_or_else(|| vec![v.len()]);
                (n, dense(shape, v))
            })
            .collect();
        Self::new(params.dims, vocab, None, tensors)
    }

    pub fn from_quantized(model: &QuantizedModel, vocab: &Vocabulary) -> Self {
        let mut tensors: BTreeMap<String, Tensor> = model
            .matrices
            .iter()
            .map(|(n, q)| (n.clone(), Tensor::Quantized(q.clone())))
            .collect();
        for (n, b) in &model.biases {
            tensors.insert(n.clone(), dense(vec![b.len()], b));
        }
        Self::new(model.dims, vocab, Some(model.bits), tensors)
    }

    fn new(dims: ModelDims, vocab: &Vocabulary, bits: Option<u32>, tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            dims,
            vocab: vocab.codes().iter().map(|c| c.raw()).collect(),
            bits,
            tensors,
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let codes = self
            .vocab
            .iter()
            .map(|s| parse_event_code(s).map_err(|e| SeqModelError::Checkpoint(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_codes(codes);
        if vocab.codes().iter().map(|c| c.raw()).collect::<Vec<_>>() != self.vocab {
            return Err(SeqModelError::Checkpoint("vocabulary must be sorted and unique".into()));
        }
        if vocab.size() != self.dims.vocab_size {
            return Err(SeqModelError::Checkpoint(format!(
                "{} vocabulary entries for a model of {}",
                vocab.size(),
                self.dims.vocab_size
            )));
        }
        Ok(vocab)
    }

    /// Full-precision parameters; quantized matrices are dequantized.
    pub fn params(&self) -> Result<ModelParams> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(SeqModelError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        self.dims.validate()?;
        let mut p = ModelParams::zeros(self.dims);
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.tensors.len() {
            return Err(SeqModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                names.len(),
                self.tensors.len()
            )));
        }
        for name in names {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| SeqModelError::Checkpoint(format!("missing tensor {name}")))?;
            let values: Vec<f64> = match t {
                Tensor::Dense { values, .. } => values.clone(),
                Tensor::Quantized(q) if !is_bias(&name) => q.dequantize().iter().copied().collect(),
                Tensor::Quantized(_) => return Err(SeqModelError::Checkpoint(format!("bias {name} must be dense"))),
            };
            let target = p
                .tensors_mut()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, s)| s)
                .expect("name comes from the same layout");
            if target.len() != values.len() {
                return Err(SeqModelError::ShapeMismatch(format!(
                    "{name}: {} values, expected {}",
                    values.len(),
                    target.len()
                )));
            }
            target.copy_from_slice(&values);
        }
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn save_params(path: &Path, params: &ModelParams, vocab: &Vocabulary) -> Result<()> {
    Checkpoint::from_params(params, vocab).save(path)
}

/// Loads a dense or quantized checkpoint as full-precision parameters.
pub fn load_params(path: &Path) -> Result<(ModelParams, Vocabulary)> {
    let ckpt = Checkpoint::read(path)?;
    Ok((ckpt.params()?, ckpt.vocabulary()?))
}
