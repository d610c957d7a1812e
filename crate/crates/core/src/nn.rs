//! Small multilayer-perceptron classifier with hand-written backpropagation.
//!
//! The network doubles as the representation extractor: the post-activation
//! output of one hidden layer (`repr_index`, by default the last hidden
//! layer) is the embedding used as datastore key.
//!
//! Parameters are stored flat, layer after layer, each layer as an
//! `output_dim x input_dim` row-major weight block followed by its biases.

use rand::Rng as _;

use crate::data::Sample;
use crate::error::{config_err, input_err, FedError, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        LayerSpec { input_dim, output_dim, activation }
    }

    fn num_params(&self) -> usize {
        (self.input_dim + 1) * self.output_dim
    }
}

/// Gradient with the same flat layout as [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub repr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<LayerSpec>,
    params: Vec<f64>,
    repr_index: usize,
}

fn validate_layers(layers: &[LayerSpec], repr_index: usize) -> Result<()> {
    if layers.is_empty() {
        return config_err("model needs at least one layer");
    }
    for (i, l) in layers.iter().enumerate() {
        if l.input_dim == 0 || l.output_dim == 0 {
            return config_err(format!("layer {i} has a zero dimension"));
        }
    }
    for (i, pair) in layers.windows(2).enumerate() {
        if pair[0].output_dim != pair[1].input_dim {
            return config_err(format!(
                "layer {i} outputs {} values but layer {} expects {}",
                pair[0].output_dim,
                i + 1,
                pair[1].input_dim
            ));
        }
    }
    if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
        return config_err("final layer must use the identity activation");
    }
    if repr_index >= layers.len() {
        return config_err(format!(
            "representation layer {repr_index} out of range for {} layers",
            layers.len()
        ));
    }
    Ok(())
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

const PROB_FLOOR: f64 = 1e-12;

const MODEL_MAGIC: &[u8; 4] = b"FMNN";
const MODEL_VERSION: u32 = 1;

impl Model {
    /// Seeded init: weights uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn init(layers: Vec<LayerSpec>, repr_index: usize, seed: u64) -> Result<Self> {
        validate_layers(&layers, repr_index)?;
        let mut rng = seed::rng(seed);
        let mut params = Vec::with_capacity(layers.iter().map(LayerSpec::num_params).sum());
        for l in &layers {
            let bound = 1.0 / (l.input_dim as f64).sqrt();
            for _ in 0..l.input_dim * l.output_dim {
                params.push(rng.random_range(-bound..bound));
            }
            params.extend(std::iter::repeat(0.0).take(l.output_dim));
        }
        Ok(Model { layers, params, repr_index })
    }

    pub fn from_params(layers: Vec<LayerSpec>, repr_index: usize, params: Vec<f64>) -> Result<Self> {
        validate_layers(&layers, repr_index)?;
        let expected: usize = layers.iter().map(LayerSpec::num_params).sum();
        if params.len() != expected {
            return config_err(format!("expected {expected} parameters, got {}", params.len()));
        }
        Ok(Model { layers, params, repr_index })
    }

    /// ReLU MLP through `dims` (input, hidden..., classes). The
    /// representation is the last hidden layer, or the logits when there is
    /// no hidden layer.
    pub fn mlp(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return config_err("an MLP needs at least input and output dimensions");
        }
        let n = dims.len() - 1;
        let layers: Vec<LayerSpec> = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::Identity } else { Activation::Relu };
                LayerSpec::new(dims[i], dims[i + 1], act)
            })
            .collect();
        let repr = n.saturating_sub(2);
        Model::init(layers, repr, seed)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn repr_index(&self) -> usize {
        self.repr_index
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim
    }

    pub fn repr_dim(&self) -> usize {
        self.layers[self.repr_index].output_dim
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn same_layout(&self, other: &Model) -> bool {
        self.layers == other.layers && self.params.len() == other.params.len()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return input_err(format!("expected {} features, got {}", self.input_dim(), x.len()));
        }
        Ok(())
    }

    /// Post-activation outputs of every layer (index 0 is the input).
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let mut offset = 0;
        for l in &self.layers {
            let (w, rest) = self.params[offset..].split_at(l.input_dim * l.output_dim);
            let b = &rest[..l.output_dim];
            let input = acts.last().unwrap();
            let out: Vec<f64> = (0..l.output_dim)
                .map(|o| {
                    let row = &w[o * l.input_dim..(o + 1) * l.input_dim];
                    let z = row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + b[o];
                    l.activation.apply(z)
                })
                .collect();
            acts.push(out);
            offset += l.num_params();
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        self.check_input(x)?;
        let mut acts = self.activations(x);
        let logits = acts.pop().unwrap();
        let repr = if self.repr_index + 1 == self.layers.len() {
            logits.clone()
        } else {
            acts.swap_remove(self.repr_index + 1)
        };
        Ok(Forward { logits, repr })
    }

    /// The representation used as datastore key.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.repr)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward(x)?.logits))
    }

    /// Mean cross-entropy over the batch and its gradient.
    pub fn loss_and_grad<'a, I>(&self, batch: I) -> Result<(f64, Gradient)>
    where
        I: IntoIterator<Item = &'a Sample>,
    {
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        let mut count = 0usize;
        let classes = self.num_classes();
        // Start offset of each layer inside the flat parameter vector.
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, l| {
                let o = *acc;
                *acc += l.num_params();
                Some(o)
            })
            .collect();

        let mut samples = Vec::new();
        for s in batch {
            self.check_input(&s.x)?;
            if s.y >= classes {
                return input_err(format!("label {} out of range for {classes} classes", s.y));
            }
            samples.push(s);
        }
        if samples.is_empty() {
            return input_err("empty batch");
        }
        let scale = 1.0 / samples.len() as f64;

        for s in samples {
            let acts = self.activations(&s.x);
            let probs = softmax(acts.last().unwrap());
            total -= probs[s.y].max(PROB_FLOOR).ln();
            count += 1;

            let mut delta: Vec<f64> = probs;
            delta[s.y] -= 1.0;
            delta.iter_mut().for_each(|d| *d *= scale);

            for li in (0..self.layers.len()).rev() {
                let l = &self.layers[li];
                let off = offsets[li];
                let input = &acts[li];
                let wlen = l.input_dim * l.output_dim;
                for o in 0..l.output_dim {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let g = &mut grad[off + o * l.input_dim..off + (o + 1) * l.input_dim];
                    g.iter_mut().zip(input).for_each(|(g, a)| *g += d * a);
                    grad[off + wlen + o] += d;
                }
                if li == 0 {
                    break;
                }
                let prev = &self.layers[li - 1];
                let w = &self.params[off..off + wlen];
                let mut next = vec![0.0; l.input_dim];
                for o in 0..l.output_dim {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &w[o * l.input_dim..(o + 1) * l.input_dim];
                    next.iter_mut().zip(row).for_each(|(n, w)| *n += w * d);
                }
                if prev.activation == Activation::Relu {
                    next.iter_mut()
                        .zip(input)
                        .for_each(|(n, &a)| if a <= 0.0 { *n = 0.0 });
                }
                delta = next;
            }
        }
        Ok((total / count as f64, Gradient { values: grad }))
    }

    /// Mean cross-entropy without the gradient.
    pub fn loss<'a, I>(&self, batch: I) -> Result<f64>
    where
        I: IntoIterator<Item = &'a Sample>,
    {
        let mut total = 0.0;
        let mut count = 0usize;
        for s in batch {
            let p = self.predict_proba(&s.x)?;
            if s.y >= p.len() {
                return input_err(format!("label {} out of range", s.y));
            }
            total -= p[s.y].max(PROB_FLOOR).ln();
            count += 1;
        }
        if count == 0 {
            return input_err("empty batch");
        }
        Ok(total / count as f64)
    }

    /// `params <- params - lr * grad`.
    pub fn sgd_step(&mut self, grad: &Gradient, lr: f64) -> Result<()> {
        if grad.values.len() != self.params.len() {
            return config_err("gradient layout does not match model");
        }
        if lr == 0.0 {
            return Ok(());
        }
        self.params
            .iter_mut()
            .zip(&grad.values)
            .for_each(|(p, g)| *p -= lr * g);
        Ok(())
    }

    /// Little-endian binary encoding. Parameters are written as f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.layers.len() * 9 + self.params.len() * 4);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.input_dim as u32).to_le_bytes());
            out.extend_from_slice(&(l.output_dim as u32).to_le_bytes());
            out.push(l.activation.code());
        }
        for p in &self.params {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        out
    }

    /// Decodes [`Model::to_bytes`] output. The format does not carry the
    /// representation layer, so the last hidden layer is used.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::io::Reader::new(bytes);
        if r.take(4)? != MODEL_MAGIC {
            return Err(FedError::Format("bad model magic".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(FedError::Format(format!("unsupported model version {version}")));
        }
        let n = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let input = r.u32()? as usize;
            let output = r.u32()? as usize;
            let act = Activation::from_code(r.u8()?)
                .ok_or_else(|| FedError::Format("unknown activation code".into()))?;
            layers.push(LayerSpec::new(input, output, act));
        }
        let count: usize = layers.iter().map(LayerSpec::num_params).sum();
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            params.push(f64::from(r.f32()?));
        }
        r.finish()?;
        let repr = layers.len().saturating_sub(2);
        Model::from_params(layers, repr, params).map_err(|e| FedError::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> Vec<LayerSpec> {
        vec![
            LayerSpec::new(2, 3, Activation::Relu),
            LayerSpec::new(3, 2, Activation::Identity),
        ]
    }

    fn sample(x: &[f64], y: usize) -> Sample {
        Sample { x: x.to_vec(), y }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(small(), 0, 7).unwrap();
        let b = Model::init(small(), 0, 7).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.num_params(), 3 * 3 + 4 * 2);
        // biases start at zero
        assert!(a.params()[6..9].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_rejects_bad_specs() {
        assert!(matches!(Model::init(small(), 2, 1), Err(FedError::Config(_))));
        let broken = vec![
            LayerSpec::new(2, 3, Activation::Relu),
            LayerSpec::new(4, 2, Activation::Identity),
        ];
        assert!(matches!(Model::init(broken, 0, 1), Err(FedError::Config(_))));
        let relu_last = vec![LayerSpec::new(2, 2, Activation::Relu)];
        assert!(Model::init(relu_last, 0, 1).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let layers = vec![LayerSpec::new(4, 4, Activation::Identity)];
        let m = Model::from_params(layers, 0, vec![0.0; 20]).unwrap();
        let f = m.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(f.logits, vec![0.0; 4]);
        assert_eq!(m.predict_proba(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn identity_network_passes_input_through() {
        // 2->2 identity blocks, zero biases, relu hidden then identity out.
        let layers = vec![
            LayerSpec::new(2, 2, Activation::Relu),
            LayerSpec::new(2, 2, Activation::Identity),
        ];
        let eye = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let params = [eye, eye].concat();
        let m = Model::from_params(layers, 0, params).unwrap();
        let f = m.forward(&[1.0, 2.0]).unwrap();
        assert_eq!(f.logits, vec![1.0, 2.0]);
        assert_eq!(f.repr, vec![1.0, 2.0]);
        // negative pre-activation is clipped in the representation only
        let f = m.forward(&[-1.0, 2.0]).unwrap();
        assert_eq!(f.repr, vec![0.0, 2.0]);
        assert_eq!(f.logits, vec![0.0, 2.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = Model::init(small(), 0, 1).unwrap();
        assert!(matches!(m.forward(&[1.0]), Err(FedError::Input(_))));
    }

    #[test]
    fn softmax_hand_values() {
        let p = softmax(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_logits_loss_is_ln_classes() {
        let layers = vec![LayerSpec::new(3, 5, Activation::Identity)];
        let m = Model::from_params(layers, 0, vec![0.0; 20]).unwrap();
        let batch = [sample(&[1.0, 2.0, 3.0], 2), sample(&[0.0, -1.0, 1.0], 4)];
        let (loss, _) = m.loss_and_grad(&batch).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_prediction_has_near_zero_loss() {
        let layers = vec![LayerSpec::new(1, 2, Activation::Identity)];
        let m = Model::from_params(layers, 0, vec![0.0, 0.0, 50.0, -50.0]).unwrap();
        let (loss, _) = m.loss_and_grad(&[sample(&[1.0], 0)]).unwrap();
        assert!(loss < 1e-30);
    }

    #[test]
    fn empty_batch_and_bad_label_are_errors() {
        let m = Model::init(small(), 0, 1).unwrap();
        let none: [Sample; 0] = [];
        assert!(matches!(m.loss_and_grad(&none), Err(FedError::Input(_))));
        assert!(matches!(m.loss_and_grad(&[sample(&[0.0, 0.0], 5)]), Err(FedError::Input(_))));
    }

    #[test]
    fn sgd_step_arithmetic() {
        let layers = vec![LayerSpec::new(1, 1, Activation::Identity)];
        let mut m = Model::from_params(layers, 0, vec![1.0, 1.0]).unwrap();
        let g = Gradient { values: vec![2.0, -2.0] };
        let before = m.clone();
        m.sgd_step(&g, 0.0).unwrap();
        assert_eq!(m, before);
        m.sgd_step(&Gradient { values: vec![0.0, 0.0] }, 0.3).unwrap();
        assert_eq!(m, before);
        m.sgd_step(&g, 0.5).unwrap();
        assert_eq!(m.params(), &[0.0, 2.0]);
    }

    #[test]
    fn bytes_round_trip_and_bad_magic() {
        let m = Model::mlp(&[3, 5, 4, 2], 11).unwrap();
        let bytes = m.to_bytes();
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back.layers(), m.layers());
        assert_eq!(back.repr_index(), 1);
        for (a, b) in back.params().iter().zip(m.params()) {
            assert_eq!(*a, f64::from(*b as f32));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Model::from_bytes(&bad), Err(FedError::Format(_))));
        assert!(matches!(Model::from_bytes(&bytes[..bytes.len() - 1]), Err(FedError::Format(_))));
    }

    proptest! {
        #[test]
        fn predict_proba_on_simplex(seed in any::<u64>(), x in prop::collection::vec(-5.0f64..5.0, 3)) {
            let m = Model::mlp(&[3, 6, 4], seed).unwrap();
            let p = m.predict_proba(&x).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            // pure: identical call, identical bits
            prop_assert_eq!(p, m.predict_proba(&x).unwrap());
        }
    }
}
