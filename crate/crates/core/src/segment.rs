//! A contiguous stack of layers owned by one party, with a cached forward pass
//! and a reverse sweep that can be seeded by a loss or by a received gradient.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::layer::{layer_backward, layer_forward, Activation, LayerParams, LayerSpec, Residue};
use crate::tensor::Tensor;

static NEXT_SEGMENT_ID: AtomicU64 = AtomicU64::new(1);

/// Which part of the network a segment is.
///
/// `A` holds the raw inputs, `C` the labels, `B` neither. `Monolithic` is the
/// unsplit network used as the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    A,
    B,
    C,
    Monolithic,
}

impl Role {
    /// Whether a loss over labels may seed this segment's backward sweep.
    pub fn holds_labels(self) -> bool {
        matches!(self, Role::C | Role::Monolithic)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::A => "A",
            Role::B => "B",
            Role::C => "C",
            Role::Monolithic => "monolithic",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lr: f64,
    pub batch_size: usize,
}

impl HyperParams {
    pub fn new(lr: f64, batch_size: usize) -> Result<Self> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self { lr, batch_size })
    }
}

#[derive(Debug, Clone)]
struct Layer {
    spec: LayerSpec,
    out_shape: Vec<usize>,
    params: Option<LayerParams>,
}

/// Per-layer parameter gradients; `None` for parameter-free layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<LayerParams>>,
}

impl Gradients {
    pub fn scale(&self, k: f64) -> Self {
        Self {
            layers: self.layers.iter().map(|l| l.as_ref().map(|p| p.scale(k))).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Gradients) -> Option<f64> {
        if self.layers.len() != other.layers.len() {
            return None;
        }
        self.layers
            .iter()
            .zip(&other.layers)
            .try_fold(0.0f64, |m, pair| match pair {
                (Some(a), Some(b)) => Some(m.max(a.max_abs_diff(b)?)),
                (None, None) => Some(m),
                _ => None,
            })
    }

    /// Every gradient value, in layer order (weights then bias).
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| p.weight.data().iter().chain(p.bias.data()).copied())
            .collect()
    }
}

/// Activations from one forward pass, valid for exactly one backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    segment_id: u64,
    version: u64,
    batch: usize,
    /// `acts[i]` is layer `i`'s input; the last entry is the segment output.
    entries: Option<(Vec<Tensor>, Vec<Residue>)>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn is_consumed(&self) -> bool {
        self.entries.is_none()
    }

    /// The segment output recorded by the forward pass.
    pub fn output(&self) -> Option<&Tensor> {
        self.entries.as_ref().and_then(|(acts, _)| acts.last())
    }
}

#[derive(Debug)]
pub struct Segment {
    id: u64,
    version: u64,
    role: Role,
    first_layer: usize,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl Clone for Segment {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_SEGMENT_ID.fetch_add(1, Ordering::Relaxed),
            version: self.version,
            role: self.role,
            first_layer: self.first_layer,
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
        }
    }
}

impl Segment {
    /// Builds a segment and initializes its parameters.
    ///
    /// `first_layer` is the global index of the first layer in the full
    /// network; it selects the parameter streams, so the same layer is
    /// initialized identically whichever segment it lands in.
    pub fn new(
        role: Role,
        specs: &[LayerSpec],
        input_shape: &[usize],
        first_layer: usize,
        seed: u64,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Plan(format!("segment {role} has no layers")));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape.to_vec();
        for (i, spec) in specs.iter().enumerate() {
            if spec.activation() == Activation::Softmax {
                if i + 1 != specs.len() {
                    return Err(Error::Plan("softmax is only allowed on the final layer".into()));
                }
                if !matches!(spec, LayerSpec::Dense { .. }) {
                    return Err(Error::Plan("softmax is only supported on dense layers".into()));
                }
            }
            let out = spec
                .output_shape(&shape)
                .map_err(|e| Error::Plan(format!("layer {} ({spec:?}): {e}", first_layer + i + 1)))?;
            let params = spec.init_params(&shape, first_layer + i, seed);
            layers.push(Layer {
                spec: spec.clone(),
                out_shape: out.clone(),
                params,
            });
            shape = out;
        }
        Ok(Self {
            id: NEXT_SEGMENT_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            role,
            first_layer,
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn first_layer(&self) -> usize {
        self.first_layer
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.layers.last().expect("non-empty").out_shape
    }

    /// Per-sample output shape of every layer.
    pub fn layer_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.out_shape.clone()).collect()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn params(&self) -> Vec<Option<&LayerParams>> {
        self.layers.iter().map(|l| l.params.as_ref()).collect()
    }

    /// Owned copy of all parameters, for trajectory recording.
    pub fn snapshot(&self) -> Vec<Option<LayerParams>> {
        self.layers.iter().map(|l| l.params.clone()).collect()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut LayerParams> {
        self.version += 1;
        self.layers.iter_mut().filter_map(|l| l.params.as_mut())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params.as_ref())
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.rank() != self.input_shape.len() + 1 || input.shape()[1..] != self.input_shape[..] {
            let mut want = vec![input.shape().first().copied().unwrap_or(0)];
            want.extend_from_slice(&self.input_shape);
            return Err(Error::dim("segment forward", input.shape(), &want));
        }
        Ok(())
    }

    /// Runs every layer in order, keeping what the backward sweep needs.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.check_input(input)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut residues = Vec::with_capacity(self.layers.len());
        acts.push(input.clone());
        for layer in &self.layers {
            let x = acts.last().expect("non-empty");
            let (y, r) = layer_forward(&layer.spec, layer.params.as_ref(), x, &layer.out_shape)?;
            acts.push(y);
            residues.push(r);
        }
        let out = acts.last().expect("non-empty").clone();
        let cache = ForwardCache {
            segment_id: self.id,
            version: self.version,
            batch: input.batch(),
            entries: Some((acts, residues)),
        };
        Ok((out, cache))
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        self.forward(input).map(|(y, _)| y)
    }

    /// Reverse sweep seeded with `grad_out`, the gradient w.r.t. this segment's
    /// output. Consumes the cache.
    pub(crate) fn backward_seeded(
        &self,
        cache: &mut ForwardCache,
        grad_out: &Tensor,
    ) -> Result<(Gradients, Tensor)> {
        if cache.segment_id != self.id {
            return Err(Error::State("forward cache was produced by a different segment".into()));
        }
        if cache.version != self.version {
            return Err(Error::State(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        let (acts, residues) = cache
            .entries
            .take()
            .ok_or_else(|| Error::State("forward cache already consumed by a backward pass".into()))?;
        let out_shape = acts.last().expect("non-empty").shape().to_vec();
        if out_shape != grad_out.shape() {
            cache.entries = Some((acts, residues));
            return Err(Error::dim("backward seed", grad_out.shape(), &out_shape));
        }

        let mut grads = vec![None; self.layers.len()];
        let mut dy = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (g, dx) = layer_backward(
                &layer.spec,
                layer.params.as_ref(),
                &acts[i],
                &acts[i + 1],
                &residues[i],
                &dy,
            )?;
            grads[i] = g;
            dy = dx;
        }
        dy.debug_check_finite("backward");
        Ok((Gradients { layers: grads }, dy))
    }

    /// Backward pass seeded by the gradient of a loss over labels.
    ///
    /// Only label-holding segments (`C` or monolithic) may call this; the
    /// returned input gradient is the boundary gradient for the segment upstream.
    pub fn backward_from_loss(
        &self,
        cache: &mut ForwardCache,
        grad_wrt_output: &Tensor,
    ) -> Result<(Gradients, Tensor)> {
        if !self.role.holds_labels() {
            return Err(Error::Role(format!(
                "segment {} holds no labels; use the auxiliary backward pass",
                self.role
            )));
        }
        self.backward_seeded(cache, grad_wrt_output)
    }

    /// Plain SGD: every parameter `p` becomes `p - lr * g`.
    pub fn sgd_step(&mut self, grads: &Gradients, hp: &HyperParams) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::dim(
                "sgd_step",
                &[grads.layers.len()],
                &[self.layers.len()],
            ));
        }
        for (layer, g) in self.layers.iter().zip(&grads.layers) {
            match (&layer.params, g) {
                (Some(p), Some(g)) => {
                    if p.weight.shape() != g.weight.shape() || p.bias.shape() != g.bias.shape() {
                        return Err(Error::dim("sgd_step", g.weight.shape(), p.weight.shape()));
                    }
                }
                (None, None) => {}
                _ => return Err(Error::Shape("gradient layout does not match segment".into())),
            }
        }
        let lr = hp.lr;
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            if let (Some(p), Some(g)) = (layer.params.as_mut(), g) {
                for (w, d) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
                    *w -= lr * d;
                }
                for (b, d) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
                    *b -= lr * d;
                }
            }
        }
        self.version += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(units: usize, activation: Activation) -> LayerSpec {
        LayerSpec::Dense { units, activation }
    }

    #[test]
    fn identity_dense_layer_is_identity() {
        let mut seg = Segment::new(Role::Monolithic, &[dense(2, Activation::Identity)], &[2], 0, 1).unwrap();
        for p in seg.params_mut() {
            p.weight = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        }
        let x = Tensor::from_rows(&[&[0.25, -3.0], &[7.0, 1.5]]).unwrap();
        assert_eq!(seg.predict(&x).unwrap(), x);
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let seg = Segment::new(
            Role::C,
            &[dense(5, Activation::Relu), dense(3, Activation::Identity)],
            &[4],
            0,
            3,
        )
        .unwrap();
        let x = Tensor::full(&[2, 4], 0.3);
        let (y, mut cache) = seg.forward(&x).unwrap();
        let (g, dx) = seg.backward_from_loss(&mut cache, &Tensor::zeros(y.shape())).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cache_is_single_use() {
        let seg = Segment::new(Role::C, &[dense(2, Activation::Identity)], &[2], 0, 3).unwrap();
        let (y, mut cache) = seg.forward(&Tensor::full(&[1, 2], 1.0)).unwrap();
        seg.backward_from_loss(&mut cache, &y).unwrap();
        assert!(cache.is_consumed());
        assert!(matches!(seg.backward_from_loss(&mut cache, &y), Err(Error::State(_))));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut seg = Segment::new(Role::C, &[dense(2, Activation::Identity)], &[2], 0, 3).unwrap();
        let (y, mut cache) = seg.forward(&Tensor::full(&[1, 2], 1.0)).unwrap();
        let grads = Gradients { layers: vec![seg.params()[0].map(|p| p.zeros_like())] };
        seg.sgd_step(&grads, &HyperParams::new(0.1, 1).unwrap()).unwrap();
        assert!(matches!(seg.backward_from_loss(&mut cache, &y), Err(Error::State(_))));

        let other = seg.clone();
        let (y, mut cache) = other.forward(&Tensor::full(&[1, 2], 1.0)).unwrap();
        assert!(matches!(seg.backward_from_loss(&mut cache, &y), Err(Error::State(_))));
    }

    #[test]
    fn labelless_roles_cannot_backprop_a_loss() {
        for role in [Role::A, Role::B] {
            let seg = Segment::new(role, &[dense(2, Activation::Identity)], &[2], 0, 3).unwrap();
            let (y, mut cache) = seg.forward(&Tensor::full(&[1, 2], 1.0)).unwrap();
            assert!(matches!(seg.backward_from_loss(&mut cache, &y), Err(Error::Role(_))));
        }
    }

    #[test]
    fn two_dense_layers_chain_rule_by_hand() {
        // x = [1, 2]; W1 = [[1, 2], [3, 4]], W2 = [[1, 0], [1, 1]]; identity activations.
        // y = (x W1) W2 and dL/dx = g W2^T W1^T with seed g = [1, -1].
        let mut seg = Segment::new(
            Role::Monolithic,
            &[dense(2, Activation::Identity), dense(2, Activation::Identity)],
            &[2],
            0,
            0,
        )
        .unwrap();
        let ws = [
            Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap(),
            Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 1.0]]).unwrap(),
        ];
        for (p, w) in seg.params_mut().zip(ws) {
            p.weight = w;
        }
        let x = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let (y, mut cache) = seg.forward(&x).unwrap();
        // x W1 = [7, 10]; [7, 10] W2 = [17, 10]
        assert_eq!(y.data(), &[17.0, 10.0]);
        let seed = Tensor::from_rows(&[&[1.0, -1.0]]).unwrap();
        let (g, dx) = seg.backward_from_loss(&mut cache, &seed).unwrap();
        // g W2^T = [1, 0]; [1, 0] W1^T = [1, 3]
        assert_eq!(dx.data(), &[1.0, 3.0]);
        // dW2 = h^T g with h = [7, 10]; dW1 = x^T [1, 0]
        assert_eq!(g.layers[1].as_ref().unwrap().weight.data(), &[7.0, -7.0, 10.0, -10.0]);
        assert_eq!(g.layers[0].as_ref().unwrap().weight.data(), &[1.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn sgd_arithmetic() {
        let mut seg = Segment::new(Role::C, &[dense(1, Activation::Identity)], &[1], 0, 0).unwrap();
        for p in seg.params_mut() {
            p.weight = Tensor::from_rows(&[&[1.0]]).unwrap();
        }
        let g = Gradients {
            layers: vec![Some(LayerParams {
                weight: Tensor::from_rows(&[&[0.5]]).unwrap(),
                bias: Tensor::zeros(&[1]),
            })],
        };
        let before = seg.snapshot();
        seg.sgd_step(&g, &HyperParams::new(0.0, 1).unwrap()).unwrap();
        assert_eq!(seg.snapshot(), before);
        seg.sgd_step(&g.scale(0.0), &HyperParams::new(0.1, 1).unwrap()).unwrap();
        assert_eq!(seg.snapshot(), before);
        seg.sgd_step(&g, &HyperParams::new(0.1, 1).unwrap()).unwrap();
        assert_eq!(seg.params()[0].unwrap().weight.data(), &[0.95]);
    }

    #[test]
    fn softmax_must_be_last() {
        let specs = [dense(3, Activation::Softmax), dense(2, Activation::Identity)];
        assert!(Segment::new(Role::C, &specs, &[2], 0, 0).is_err());
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let seg = Segment::new(Role::A, &[dense(2, Activation::Identity)], &[3], 0, 0).unwrap();
        assert!(matches!(seg.forward(&Tensor::zeros(&[1, 2])), Err(Error::Dimension { .. })));
    }
}
