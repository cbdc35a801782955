use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};

use super::ModelConfig;

const LAYER_FIELDS: [&str; 15] = [
    "attn_norm.gain",
    "attn_norm.bias",
    "attn.query.weight",
    "attn.query.bias",
    "attn.key.weight",
    "attn.value.weight",
    "attn.value.bias",
    "attn.out.weight",
    "attn.out.bias",
    "ffn_norm.gain",
    "ffn_norm.bias",
    "ffn.in.weight",
    "ffn.in.bias",
    "ffn.out.weight",
    "ffn.out.bias",
];

/// One pre-norm transformer block. Weight matrices are stored `[in, out]`.
///
/// The key projection has no bias: a shared shift of every score leaves the
/// attention softmax unchanged, so such a bias never receives gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm_gain: T,
    pub attn_norm_bias: T,
    pub query_weight: T,
    pub query_bias: T,
    pub key_weight: T,
    pub value_weight: T,
    pub value_bias: T,
    pub out_weight: T,
    pub out_bias: T,
    pub ffn_norm_gain: T,
    pub ffn_norm_bias: T,
    pub ffn_in_weight: T,
    pub ffn_in_bias: T,
    pub ffn_out_weight: T,
    pub ffn_out_bias: T,
}

impl<T> LayerWeights<T> {
    fn as_array(&self) -> [&T; 15] {
        [
            &self.attn_norm_gain,
            &self.attn_norm_bias,
            &self.query_weight,
            &self.query_bias,
            &self.key_weight,
            &self.value_weight,
            &self.value_bias,
            &self.out_weight,
            &self.out_bias,
            &self.ffn_norm_gain,
            &self.ffn_norm_bias,
            &self.ffn_in_weight,
            &self.ffn_in_bias,
            &self.ffn_out_weight,
            &self.ffn_out_bias,
        ]
    }

    fn as_array_mut(&mut self) -> [&mut T; 15] {
        [
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.query_weight,
            &mut self.query_bias,
            &mut self.key_weight,
            &mut self.value_weight,
            &mut self.value_bias,
            &mut self.out_weight,
            &mut self.out_bias,
            &mut self.ffn_norm_gain,
            &mut self.ffn_norm_bias,
            &mut self.ffn_in_weight,
            &mut self.ffn_in_bias,
            &mut self.ffn_out_weight,
            &mut self.ffn_out_bias,
        ]
    }

    fn from_array(a: [T; 15]) -> Self {
        let [attn_norm_gain, attn_norm_bias, query_weight, query_bias, key_weight, value_weight, value_bias, out_weight, out_bias, ffn_norm_gain, ffn_norm_bias, ffn_in_weight, ffn_in_bias, ffn_out_weight, ffn_out_bias] =
            a;
        LayerWeights {
            attn_norm_gain,
            attn_norm_bias,
            query_weight,
            query_bias,
            key_weight,
            value_weight,
            value_bias,
            out_weight,
            out_bias,
            ffn_norm_gain,
            ffn_norm_bias,
            ffn_in_weight,
            ffn_in_bias,
            ffn_out_weight,
            ffn_out_bias,
        }
    }
}

/// Every named parameter slot of the encoder, generic over what is stored
/// in a slot (tensors, graph handles, shapes, optimizer moments).
///
/// The MLM head projects back through `token_embedding`; only its output
/// bias is separate.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm_gain: T,
    pub final_norm_bias: T,
    pub head_dense_weight: T,
    pub head_dense_bias: T,
    pub head_norm_gain: T,
    pub head_norm_bias: T,
    pub head_output_bias: T,
}

/// Concrete encoder weights.
pub type Parameters = Weights<Tensor>;

const HEAD_FIELDS: [&str; 7] = [
    "final_norm.gain",
    "final_norm.bias",
    "head.dense.weight",
    "head.dense.bias",
    "head.norm.gain",
    "head.norm.bias",
    "head.output_bias",
];

impl<T> Weights<T> {
    /// Slot names in storage order.
    pub fn names(layers: usize) -> Vec<String> {
        let mut names = vec!["token_embedding".to_string(), "position_embedding".to_string()];
        for l in 0..layers {
            names.extend(LAYER_FIELDS.iter().map(|f| format!("layer{l}.{f}")));
        }
        names.extend(HEAD_FIELDS.iter().map(|s| s.to_string()));
        names
    }

    /// All slots in storage order.
    pub fn values(&self) -> Vec<&T> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for layer in &self.layers {
            out.extend(layer.as_array());
        }
        out.extend([
            &self.final_norm_gain,
            &self.final_norm_bias,
            &self.head_dense_weight,
            &self.head_dense_bias,
            &self.head_norm_gain,
            &self.head_norm_bias,
            &self.head_output_bias,
        ]);
        out
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.as_array_mut());
        }
        out.extend([
            &mut self.final_norm_gain,
            &mut self.final_norm_bias,
            &mut self.head_dense_weight,
            &mut self.head_dense_bias,
            &mut self.head_norm_gain,
            &mut self.head_norm_bias,
            &mut self.head_output_bias,
        ]);
        out
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        Self::names(self.layers.len()).into_iter().zip(self.values()).collect()
    }

    /// Rebuilds the structure from slots in storage order.
    pub fn from_values(layers: usize, values: Vec<T>) -> Result<Self> {
        let expected = 2 + LAYER_FIELDS.len() * layers + HEAD_FIELDS.len();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} weight slots, got {}",
                values.len()
            )));
        }
        let mut it = values.into_iter();
        let mut next = || it.next().expect("length checked");
        let token_embedding = next();
        let position_embedding = next();
        let layers = (0..layers)
            .map(|_| LayerWeights::from_array(std::array::from_fn(|_| next())))
            .collect();
        Ok(Weights {
            token_embedding,
            position_embedding,
            layers,
            final_norm_gain: next(),
            final_norm_bias: next(),
            head_dense_weight: next(),
            head_dense_bias: next(),
            head_norm_gain: next(),
            head_norm_bias: next(),
            head_output_bias: next(),
        })
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<Weights<U>> {
        let values = self
            .named()
            .into_iter()
            .map(|(name, v)| f(&name, v))
            .collect::<Result<Vec<_>>>()?;
        Weights::from_values(self.layers.len(), values)
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        Weights::from_values(self.layers.len(), self.values().into_iter().map(&mut f).collect()).expect("same layout")
    }
}

impl Weights<Vec<usize>> {
    /// Shape of every slot under `cfg`.
    pub fn shapes(cfg: &ModelConfig) -> Self {
        let (d, f) = (cfg.hidden, cfg.ffn);
        let layer = || LayerWeights {
            attn_norm_gain: vec![d],
            attn_norm_bias: vec![d],
            query_weight: vec![d, d],
            query_bias: vec![d],
            key_weight: vec![d, d],
            value_weight: vec![d, d],
            value_bias: vec![d],
            out_weight: vec![d, d],
            out_bias: vec![d],
            ffn_norm_gain: vec![d],
            ffn_norm_bias: vec![d],
            ffn_in_weight: vec![d, f],
            ffn_in_bias: vec![f],
            ffn_out_weight: vec![f, d],
            ffn_out_bias: vec![d],
        };
        Weights {
            token_embedding: vec![cfg.vocab, d],
            position_embedding: vec![cfg.max_positions, d],
            layers: (0..cfg.layers).map(|_| layer()).collect(),
            final_norm_gain: vec![d],
            final_norm_bias: vec![d],
            head_dense_weight: vec![d, d],
            head_dense_bias: vec![d],
            head_norm_gain: vec![d],
            head_norm_bias: vec![d],
            head_output_bias: vec![cfg.vocab],
        }
    }
}

impl Parameters {
    /// Gains start at 1, biases at 0, everything else from N(0, std²).
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, std: f64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(format!("init std {std}: {e}")))?;
        Weights::shapes(cfg).try_map(|name, shape| {
            Ok(if name.ends_with("gain") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with("bias") {
                Tensor::zeros(shape)
            } else {
                let n = shape.iter().product();
                Tensor::new(shape.clone(), (0..n).map(|_| normal.sample(rng)).collect())?
            })
        })
    }

    pub fn num_params(&self) -> usize {
        self.values().iter().map(|t| t.numel()).sum()
    }

    /// Places every tensor in `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Weights<Var> {
        self.map(|t| {
            let copy = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
            if trainable {
                g.param(copy)
            } else {
                g.constant(copy)
            }
        })
    }

    /// Adds `scale * d(root)/d(slot)` from the last backward pass into each
    /// tensor's gradient buffer.
    pub fn accumulate_grads(&mut self, bound: &Weights<Var>, g: &Graph, scale: f64) {
        for (t, &v) in self.values_mut().into_iter().zip(bound.values()) {
            match g.grad(v) {
                Some(grad) => t.accumulate_grad(grad, scale),
                None => {
                    let n = t.numel();
                    t.grad.get_or_insert_with(|| vec![0.0; n]);
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in self.values_mut() {
            t.zero_grad();
        }
    }

    /// Flat copy of every value, in storage order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Overwrites every value from a flat vector produced by [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat vector of {} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.values_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Flat gradient buffer; slots without a gradient contribute zeros.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.values()
            .iter()
            .flat_map(|t| t.grad.clone().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|t| t.is_finite())
    }
}
