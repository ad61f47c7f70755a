//! Post-training uniform affine quantization and low-rank adapters.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::seq_model::{
    is_bias, sequence_loss_and_grad, AdamW, BatchSampler, LossTrace, Matrix, ModelDims, ModelParams, SeqModelError,
    TrainConfig, TrainingSequence, Vocabulary,
};

pub const MAX_BITS: u32 = 32;
pub const DEFAULT_RANK: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum CompressError {
    #[error("bit width must lie in 1..={MAX_BITS}, got {0}")]
    InvalidBitWidth(u32),
    #[error("cannot quantize an empty matrix")]
    EmptyMatrix,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid rank {rank} for a {d}x{k} matrix")]
    InvalidRank { rank: usize, d: usize, k: usize },
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error(transparent)]
    Model(#[from] SeqModelError),
}

type Result<T> = std::result::Result<T, CompressError>;

/// `b`-bit codes on the grid `w_min + code * delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMatrix {
    pub shape: (usize, usize),
    pub bits: u32,
    pub w_min: f64,
    pub delta: f64,
    pub codes: Vec<u32>,
}

impl QuantizedMatrix {
    pub fn max_code(bits: u32) -> u64 {
        (1u64 << bits) - 1
    }

    /// Worst-case reconstruction error, `delta / 2`.
    pub fn error_bound(&self) -> f64 {
        self.delta / 2.0
    }

    pub fn dequantize(&self) -> Matrix {
        let values = self.codes.iter().map(|&c| c as f64 * self.delta + self.w_min).collect();
        Array2::from_shape_vec(self.shape, values).expect("code count matches shape")
    }
}

/// Step size `(max - min) / (2^b - 1)`; zero for a constant matrix.
pub fn step_size(w_min: f64, w_max: f64, bits: u32) -> f64 {
    if w_max == w_min {
        0.0
    } else {
        (w_max - w_min) / QuantizedMatrix::max_code(bits) as f64
    }
}

/// Codes are `round((w - min) / delta)` with halves rounded away from zero.
pub fn quantize(w: &Matrix, bits: u32) -> Result<QuantizedMatrix> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(CompressError::InvalidBitWidth(bits));
    }
    if w.is_empty() {
        return Err(CompressError::EmptyMatrix);
    }
    let w_min = w.iter().copied().fold(f64::INFINITY, f64::min);
    let w_max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let delta = step_size(w_min, w_max, bits);
    let top = QuantizedMatrix::max_code(bits) as f64;
    let codes = w
        .iter()
        .map(|&x| if delta == 0.0 { 0 } else { ((x - w_min) / delta).round().clamp(0.0, top) as u32 })
        .collect();
    Ok(QuantizedMatrix {
        shape: w.dim(),
        bits,
        w_min,
        delta,
        codes,
    })
}

pub fn dequantize(q: &QuantizedMatrix) -> Matrix {
    q.dequantize()
}

/// Every weight matrix quantized; biases kept at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub dims: ModelDims,
    pub bits: u32,
    pub matrices: BTreeMap<String, QuantizedMatrix>,
    pub biases: BTreeMap<String, Vec<f64>>,
}

impl QuantizedModel {
    pub fn dequantize(&self) -> Result<ModelParams> {
        let mut p = ModelParams::zeros(self.dims);
        for (name, q) in &self.matrices {
            let m = p
                .matrix_mut(name)
                .ok_or_else(|| CompressError::ShapeMismatch(format!("unknown matrix {name}")))?;
            if m.dim() != q.shape {
                return Err(CompressError::ShapeMismatch(format!("{name}: {:?} vs {:?}", q.shape, m.dim())));
            }
            *m = q.dequantize();
        }
        for (name, values) in p.tensors_mut() {
            if let Some(b) = self.biases.get(&name) {
                if b.len() != values.len() {
                    return Err(CompressError::ShapeMismatch(format!("{name}: bias length {}", b.len())));
                }
                values.copy_from_slice(b);
            }
        }
        Ok(p)
    }

    /// Payload size in bits: packed codes plus full-precision scalars and biases.
    pub fn storage_bits(&self) -> usize {
        let codes: usize = self.matrices.values().map(|q| q.codes.len() * q.bits as usize + 128).sum();
        let biases: usize = self.biases.values().map(|b| b.len() * 64).sum();
        codes + biases
    }
}

pub fn quantize_model(params: &ModelParams, bits: u32) -> Result<QuantizedModel> {
    let mut matrices = BTreeMap::new();
    for (name, m) in params.matrices() {
        matrices.insert(name, quantize(m, bits)?);
    }
    let biases = params
        .tensors()
        .into_iter()
        .filter(|(n, _)| is_bias(n))
        .map(|(n, v)| (n, v.to_vec()))
        .collect();
    Ok(QuantizedModel {
        dims: params.dims,
        bits,
        matrices,
        biases,
    })
}

/// `W ≈ W0 + A B`, with `A: d x r` and `B: r x k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoRAAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub rank: usize,
}

impl LoRAAdapter {
    /// `A ~ U(-0.01, 0.01)`, `B = 0`, so the initial update is zero.
    pub fn init<R: Rng>(d: usize, k: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank < 1 || rank >= d.min(k) {
            return Err(CompressError::InvalidRank { rank, d, k });
        }
        let a = Array2::from_shape_simple_fn((d, rank), || rng.gen_range(-0.01..0.01));
        Ok(Self {
            a,
            b: Matrix::zeros((rank, k)),
            rank,
        })
    }

    pub fn from_parts(a: Matrix, b: Matrix) -> Result<Self> {
        if a.ncols() != b.nrows() {
            return Err(CompressError::ShapeMismatch(format!("A {:?} and B {:?}", a.dim(), b.dim())));
        }
        let rank = a.ncols();
        Ok(Self { a, b, rank })
    }

    pub fn delta(&self) -> Matrix {
        self.a.dot(&self.b)
    }

    pub fn trainable_params(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

pub fn effective_weight(w0: &Matrix, adapter: &LoRAAdapter) -> Result<Matrix> {
    if adapter.a.nrows() != w0.nrows() || adapter.b.ncols() != w0.ncols() || adapter.a.ncols() != adapter.b.nrows() {
        return Err(CompressError::ShapeMismatch(format!(
            "W0 {:?} with A {:?} and B {:?}",
            w0.dim(),
            adapter.a.dim(),
            adapter.b.dim()
        )));
    }
    // parameters are kept in standard layout so they can be viewed as flat slices
    Ok((w0 + &adapter.delta()).as_standard_layout().into_owned())
}

/// `r (d + k)`, the adapter size replacing `d k` trainable weights.
pub fn trainable_param_count(d: usize, k: usize, r: usize) -> usize {
    r * (d + k)
}

/// Adapters keyed by parameter-matrix name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSet {
    pub adapters: BTreeMap<String, LoRAAdapter>,
}

impl LoraSet {
    /// Matrices that get adapters: the per-head query/key/value projections
    /// and the output head. The feed-forward block stays frozen.
    pub fn target_names(dims: &ModelDims) -> Vec<String> {
        let mut out = Vec::new();
        for kind in ["w_q", "w_k", "w_v"] {
            for h in 0..dims.heads {
                out.push(format!("{kind}.{h}"));
            }
        }
        out.push("w_out".into());
        out
    }

    pub fn init(base: &ModelParams, rank: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adapters = BTreeMap::new();
        for name in Self::target_names(&base.dims) {
            let (d, k) = base.matrix(&name).expect("target names exist").dim();
            adapters.insert(name, LoRAAdapter::init(d, k, rank, &mut rng)?);
        }
        Ok(Self { adapters })
    }

    pub fn trainable_params(&self) -> usize {
        self.adapters.values().map(LoRAAdapter::trainable_params).sum()
    }

    /// Base parameters with every adapted matrix replaced by `W0 + A B`.
    pub fn apply(&self, base: &ModelParams) -> Result<ModelParams> {
        let mut p = base.clone();
        for (name, adapter) in &self.adapters {
            let m = p
                .matrix_mut(name)
                .ok_or_else(|| CompressError::ShapeMismatch(format!("unknown matrix {name}")))?;
            *m = effective_weight(m, adapter)?;
        }
        Ok(p)
    }

    fn slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (name, ad) in self.adapters.iter_mut() {
            out.push((format!("{name}.A"), ad.a.as_slice_mut().expect("standard layout")));
            out.push((format!("{name}.B"), ad.b.as_slice_mut().expect("standard layout")));
        }
        out
    }
}

/// Trains only the adapters; `base` is borrowed immutably and never touched.
/// The loss is evaluated with effective weights `W0 + A B`, and the adapter
/// gradients follow from the full-matrix gradient `G`: `dA = G Bᵀ`, `dB = Aᵀ G`.
pub fn finetune_lora(
    base: &ModelParams,
    mut adapters: LoraSet,
    train_set: &[TrainingSequence],
    config: &TrainConfig,
    vocab: &Vocabulary,
) -> Result<(LoraSet, LossTrace)> {
    if train_set.is_empty() {
        return Err(CompressError::EmptyTrainSet);
    }
    if config.total_steps == 0 {
        return Ok((adapters, LossTrace::from_losses(Vec::new(), None)));
    }
    config.validate()?;
    let encoded = train_set
        .iter()
        .map(|s| s.encode(vocab, base.dims.max_positions))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let shapes: Vec<usize> = adapters.slices_mut().iter().map(|(_, s)| s.len()).collect();
    let mut opt = AdamW::new(config.optimizer, &shapes);
    let mut sampler = BatchSampler::new(encoded.len(), config.seed);
    let mut losses = Vec::with_capacity(config.total_steps);
    for step in 0..config.total_steps {
        let effective = adapters.apply(base)?;
        let batch: Vec<usize> = (0..config.effective_batch()).map(|_| sampler.next_index()).collect();
        let n_targets: usize = batch
            .iter()
            .map(|&i| encoded[i].1.iter().filter(|t| t.is_some()).count())
            .sum();
        let weight = 1.0 / n_targets.max(1) as f64;
        let mut grads = ModelParams::zeros(base.dims);
        let mut loss_sum = 0.0;
        for &i in &batch {
            let (tokens, targets) = &encoded[i];
            loss_sum += sequence_loss_and_grad(tokens, targets, &effective, weight, &mut grads).loss_sum;
        }
        losses.push(loss_sum * weight);
        let mut adapter_grads: Vec<(String, Vec<f64>)> = Vec::new();
        for (name, ad) in &adapters.adapters {
            let g = grads.matrix(name).expect("adapter targets exist");
            let da = g.dot(&ad.b.t());
            let db = ad.a.t().dot(g);
            adapter_grads.push((format!("{name}.A"), da.iter().copied().collect()));
            adapter_grads.push((format!("{name}.B"), db.iter().copied().collect()));
        }
        let grad_refs: Vec<(String, &[f64])> = adapter_grads.iter().map(|(n, g)| (n.clone(), g.as_slice())).collect();
        opt.step(config.lr_at(step), adapters.slices_mut(), grad_refs);
    }
    Ok((adapters, LossTrace::from_losses(losses, None)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use proptest::prelude::*;

    fn random_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = rng.gen_range(0.01..10.0);
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-scale..scale))
    }

    fn max_err(a: &Matrix, b: &Matrix) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn one_bit_endpoints() {
        let w = array![[0.0, 1.0]];
        let q = quantize(&w, 1).unwrap();
        assert_eq!(q.delta, 1.0);
        assert_eq!(q.codes, vec![0, 1]);
        assert_eq!(q.dequantize(), w);
    }

    #[test]
    fn eight_bit_step() {
        let q = quantize(&array![[-1.0, 0.0, 1.0]], 8).unwrap();
        // 2 / 255 by hand
        assert!((q.delta - 0.0078431).abs() < 1e-7);
    }

    #[test]
    fn constant_matrix_is_exact() {
        let w = Matrix::from_elem((3, 2), 0.25);
        let q = quantize(&w, 4).unwrap();
        assert_eq!(q.delta, 0.0);
        assert!(q.codes.iter().all(|&c| c == 0));
        assert_eq!(q.dequantize(), w);
    }

    #[test]
    fn two_bit_hand_value() {
        let q = quantize(&array![[0.0, 0.3, 1.0]], 2).unwrap();
        assert_eq!(q.codes[1], 1);
        assert!((q.dequantize()[[0, 1]] - 0.3333).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(quantize(&array![[1.0]], 0), Err(CompressError::InvalidBitWidth(0))));
        assert!(matches!(quantize(&array![[1.0]], 33), Err(CompressError::InvalidBitWidth(33))));
        assert!(matches!(quantize(&Matrix::zeros((0, 3)), 4), Err(CompressError::EmptyMatrix)));
    }

    #[test]
    fn midpoints_round_away_from_zero() {
        // grid step 1 over [0, 3]; 1.5 sits exactly between codes 1 and 2
        let q = quantize(&array![[0.0, 1.5, 3.0]], 2).unwrap();
        assert_eq!(q.codes, vec![0, 2, 3]);
    }

    #[test]
    fn error_bound_over_seeded_matrices() {
        for seed in 0..100 {
            let w = random_matrix(seed, 7, 5);
            for bits in [2, 4, 8, 16] {
                let q = quantize(&w, bits).unwrap();
                assert!(max_err(&w, &q.dequantize()) <= q.error_bound() + 1e-12);
            }
        }
    }

    #[test]
    fn step_and_error_shrink_with_bits() {
        let w = random_matrix(7, 16, 16);
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for bits in 1..=16 {
            let q = quantize(&w, bits).unwrap();
            let err = max_err(&w, &q.dequantize());
            assert!(q.delta <= prev.0);
            assert!(err <= prev.1 + 1e-15, "bits {bits}: {err} > {}", prev.1);
            prev = (q.delta, err);
        }
    }

    fn tiny_params(seed: u64) -> ModelParams {
        let dims = ModelDims {
            vocab_size: 8,
            d_model: 8,
            heads: 2,
            d_ff: 12,
            max_positions: 6,
        };
        let mut p = ModelParams::init_uniform(dims, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        p.b_1.fill(0.1);
        p.b_out.fill(-0.2);
        p
    }

    #[test]
    fn quantized_model_round_trip() {
        let p = tiny_params(3);
        let qm = quantize_model(&p, 6).unwrap();
        let back = qm.dequantize().unwrap();
        for (name, m) in p.matrices() {
            let q = &qm.matrices[&name];
            assert!(max_err(m, back.matrix(&name).unwrap()) <= q.error_bound() + 1e-12);
        }
        assert_eq!(back.b_1, p.b_1);
        assert_eq!(back.b_out, p.b_out);
        assert!(qm.storage_bits() < p.parameter_count() * 64);
    }

    #[test]
    fn lora_hand_product() {
        let ad = LoRAAdapter::from_parts(array![[1.0], [2.0]], array![[3.0, 4.0]]).unwrap();
        let w0 = Matrix::zeros((2, 2));
        assert_eq!(effective_weight(&w0, &ad).unwrap(), array![[3.0, 4.0], [6.0, 8.0]]);
        let zero_b = LoRAAdapter::from_parts(array![[1.0], [2.0]], Matrix::zeros((1, 2))).unwrap();
        let w0 = array![[0.5, -1.5], [2.0, 7.0]];
        assert_eq!(effective_weight(&w0, &zero_b).unwrap(), w0);
        let zero_a = LoRAAdapter::from_parts(Matrix::zeros((2, 1)), array![[3.0, 4.0]]).unwrap();
        assert_eq!(effective_weight(&w0, &zero_a).unwrap(), w0);
        let wrong = LoRAAdapter::from_parts(Matrix::zeros((3, 1)), array![[3.0, 4.0]]).unwrap();
        assert!(matches!(effective_weight(&w0, &wrong), Err(CompressError::ShapeMismatch(_))));
    }

    #[test]
    fn param_counts() {
        assert_eq!(trainable_param_count(8, 8, 2), 32);
        assert_eq!(trainable_param_count(4096, 4096, 8), 65_536);
        assert_eq!(4096 * 4096, 16_777_216);
        assert_eq!(trainable_param_count(10, 6, 1), 16);
    }

    #[test]
    fn rank_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(LoRAAdapter::init(4, 4, 0, &mut rng).is_err());
        assert!(LoRAAdapter::init(4, 6, 4, &mut rng).is_err());
        let ad = LoRAAdapter::init(4, 6, 3, &mut rng).unwrap();
        assert!(ad.b.iter().all(|&v| v == 0.0));
        assert!(ad.a.iter().all(|&v| v.abs() < 0.01));
    }

    proptest! {
        #[test]
        fn effective_weight_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = |r, c| Array2::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0));
            let (w0, a1, a2, b) = (m(4, 5), m(4, 2), m(4, 2), m(2, 5));
            let f = |a: &Matrix| effective_weight(&w0, &LoRAAdapter::from_parts(a.clone(), b.clone()).unwrap()).unwrap() - &w0;
            let lhs = f(&(&a1 + &(&a2 * alpha)));
            let rhs = f(&a1) + f(&a2) * alpha;
            prop_assert!(max_err(&lhs, &rhs) < 1e-12);
        }

        #[test]
        fn lora_is_smaller_below_threshold(d in 1usize..300, k in 1usize..300, r in 1usize..64) {
            if (r as f64) < (d * k) as f64 / (d + k) as f64 {
                prop_assert!(trainable_param_count(d, k, r) < d * k);
            }
        }

        #[test]
        fn quantization_codes_in_range(seed in 0u64..500, bits in 1u32..=12) {
            let w = random_matrix(seed, 3, 4);
            let q = quantize(&w, bits).unwrap();
            prop_assert!(q.codes.iter().all(|&c| (c as u64) <= QuantizedMatrix::max_code(bits)));
            prop_assert!(q.delta >= 0.0);
        }
    }
}
