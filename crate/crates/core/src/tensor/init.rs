use super::{Rng, Tensor};

/// Scaled-uniform weight initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// `U(-sqrt(6 / fan_in), +sqrt(6 / fan_in))`, for ReLU layers.
    He,
    /// `U(-sqrt(6 / (fan_in + fan_out)), +...)`, for everything else.
    Xavier,
}

impl InitScheme {
    pub fn limit(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            InitScheme::He => (6.0 / fan_in as f64).sqrt(),
            InitScheme::Xavier => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        }
    }
}

/// Draws a weight tensor of `weight_shape` and a zero bias of length `bias_len`.
pub fn init_params(
    weight_shape: &[usize],
    bias_len: usize,
    fan_in: usize,
    fan_out: usize,
    scheme: InitScheme,
    rng: &mut Rng,
) -> (Tensor, Tensor) {
    let limit = scheme.limit(fan_in, fan_out);
    let n: usize = weight_shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-limit, limit)).collect();
    let weight = Tensor::new(weight_shape.to_vec(), data).expect("element count matches shape");
    (weight, Tensor::zeros(&[bias_len]))
}
