//! Auxiliary-label backpropagation for segments that hold no labels.
//!
//! A segment whose output `c` fed the rest of the network receives
//! `g = dL/dc`. It builds the auxiliary target `ĉ = c + g` and minimizes
//! `½ Σ (ĉ - c)²`, whose gradient w.r.t. `c` has magnitude `ĉ - c = g`. The
//! reverse sweep is seeded with exactly the received `g`, so every parameter
//! gets the same update it would get in the unsplit network.

use crate::error::{Error, Result};
use crate::segment::{ForwardCache, Gradients, Segment};
use crate::tensor::Tensor;

/// `dL/d(output)` received from the downstream party for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryGradient {
    pub tensor: Tensor,
    pub step_id: u64,
}

impl BoundaryGradient {
    pub fn new(tensor: Tensor, step_id: u64) -> Self {
        Self { tensor, step_id }
    }
}

/// Auxiliary label `ĉ = c + g`, together with the residual it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryTarget {
    target: Tensor,
    residual: Tensor,
}

impl AuxiliaryTarget {
    /// `ĉ`.
    pub fn target(&self) -> &Tensor {
        &self.target
    }

    /// The received gradient `g`. Recomputing `ĉ - c` in floating point can
    /// lose low bits of `g` when `|c| ≫ |g|`; this is the exact value.
    pub fn residual(&self) -> &Tensor {
        &self.residual
    }
}

pub fn make_auxiliary_target(c: &Tensor, g: &BoundaryGradient) -> Result<AuxiliaryTarget> {
    if c.shape() != g.tensor.shape() {
        return Err(Error::Desync(format!(
            "boundary gradient for step {} has shape {:?} but the cached output is {:?}; a step was lost or reordered",
            g.step_id,
            g.tensor.shape(),
            c.shape()
        )));
    }
    Ok(AuxiliaryTarget {
        target: c.add(&g.tensor)?,
        residual: g.tensor.clone(),
    })
}

/// How the auxiliary loss reduces over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AuxReduction {
    /// `½ Σ (ĉ - c)²`, no division by the batch size.
    #[default]
    Rsse,
    /// `1/N · ½ Σ (ĉ - c)²`. Shrinks every update by `1/N`; kept for comparison.
    Mean,
}

/// `½ Σ (ĉ - c)²` (residual sum of squares, not divided by the batch size).
pub fn auxiliary_loss(c: &Tensor, c_hat: &AuxiliaryTarget) -> Result<f64> {
    auxiliary_loss_with(c, c_hat, AuxReduction::Rsse)
}

pub fn auxiliary_loss_with(c: &Tensor, c_hat: &AuxiliaryTarget, reduction: AuxReduction) -> Result<f64> {
    let r = c_hat.target.sub(c)?;
    let rss = 0.5 * r.data().iter().map(|v| v * v).sum::<f64>();
    Ok(match reduction {
        AuxReduction::Rsse => rss,
        AuxReduction::Mean => rss / c.batch() as f64,
    })
}

/// Backward pass of a label-free segment (`A` or `B`) driven by its boundary gradient.
///
/// Returns the parameter gradients and the gradient w.r.t. the segment input,
/// which is the boundary gradient for the next segment upstream.
pub fn auxiliary_backward(
    segment: &Segment,
    cache: &mut ForwardCache,
    g: &BoundaryGradient,
) -> Result<(Gradients, Tensor)> {
    auxiliary_backward_with(segment, cache, g, AuxReduction::Rsse)
}

pub fn auxiliary_backward_with(
    segment: &Segment,
    cache: &mut ForwardCache,
    g: &BoundaryGradient,
    reduction: AuxReduction,
) -> Result<(Gradients, Tensor)> {
    if segment.role().holds_labels() {
        return Err(Error::Role(format!(
            "segment {} holds labels; seed it from the loss instead",
            segment.role()
        )));
    }
    if cache.is_consumed() {
        return Err(Error::State("forward cache already consumed by a backward pass".into()));
    }
    let c = cache
        .output()
        .ok_or_else(|| Error::State("forward cache has no output".into()))?;
    let aux = make_auxiliary_target(c, g)?;
    let seed = match reduction {
        AuxReduction::Rsse => aux.residual,
        AuxReduction::Mean => aux.residual.scale(1.0 / c.batch() as f64),
    };
    segment.backward_seeded(cache, &seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{Activation, LayerSpec};
    use crate::segment::Role;
    use crate::tensor::Rng;

    fn bg(data: &[f64]) -> BoundaryGradient {
        BoundaryGradient::new(Tensor::new(vec![1, data.len()], data.to_vec()).unwrap(), 1)
    }

    #[test]
    fn target_is_elementwise_sum() {
        let c = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let t = make_auxiliary_target(&c, &bg(&[0.5, -0.5])).unwrap();
        assert_eq!(t.target().data(), &[1.5, 1.5]);
        assert_eq!(auxiliary_loss(&c, &t).unwrap(), 0.25);
        let same = make_auxiliary_target(&c, &bg(&[0.0, 0.0])).unwrap();
        assert_eq!(same.target(), &c);
        assert_eq!(auxiliary_loss(&c, &same).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_a_desync() {
        let c = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        assert!(matches!(make_auxiliary_target(&c, &bg(&[1.0])), Err(Error::Desync(_))));
    }

    #[test]
    fn residual_recovers_gradient_on_exact_grid() {
        // Dyadic values with bounded exponent range: c + g is exact, hence so is ĉ - c.
        let mut rng = Rng::new(4);
        let grid = |rng: &mut Rng| (rng.below(1 << 16) as f64 - 32768.0) / 1024.0;
        let c: Vec<f64> = (0..64).map(|_| grid(&mut rng)).collect();
        let g: Vec<f64> = (0..64).map(|_| grid(&mut rng)).collect();
        let c = Tensor::new(vec![8, 8], c).unwrap();
        let g = BoundaryGradient::new(Tensor::new(vec![8, 8], g).unwrap(), 1);
        let t = make_auxiliary_target(&c, &g).unwrap();
        assert_eq!(t.target().sub(&c).unwrap(), g.tensor);
        assert_eq!(t.residual(), &g.tensor);
    }

    #[test]
    fn residual_is_exact_even_when_subtraction_is_not() {
        let c = Tensor::from_rows(&[&[0.1, 1e8]]).unwrap();
        let g = bg(&[0.2, 1e-9]);
        let t = make_auxiliary_target(&c, &g).unwrap();
        assert_ne!(t.target().sub(&c).unwrap(), g.tensor);
        assert_eq!(t.residual(), &g.tensor);
        // Still within one ulp of ĉ.
        for ((h, c), g) in t.target().data().iter().zip(c.data()).zip(g.tensor.data()) {
            assert!(((h - c) - g).abs() <= h.abs() * f64::EPSILON);
        }
    }

    #[test]
    fn rsse_is_batch_times_mean() {
        let mut rng = Rng::new(8);
        let c = Tensor::new(vec![4, 3], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let g = BoundaryGradient::new(Tensor::new(vec![4, 3], (0..12).map(|_| rng.normal()).collect()).unwrap(), 0);
        let t = make_auxiliary_target(&c, &g).unwrap();
        let rsse = auxiliary_loss(&c, &t).unwrap();
        let mean = auxiliary_loss_with(&c, &t, AuxReduction::Mean).unwrap();
        assert!((rsse - 4.0 * mean).abs() <= 1e-15 * rsse);
    }

    #[test]
    fn zero_gradient_zero_update() {
        let seg = Segment::new(
            Role::B,
            &[
                LayerSpec::Dense { units: 3, activation: Activation::Relu },
                LayerSpec::Dense { units: 2, activation: Activation::Identity },
            ],
            &[2],
            1,
            5,
        )
        .unwrap();
        let (y, mut cache) = seg.forward(&Tensor::full(&[2, 2], 0.7)).unwrap();
        let g = BoundaryGradient::new(Tensor::zeros(y.shape()), 1);
        let (grads, dx) = auxiliary_backward(&seg, &mut cache, &g).unwrap();
        assert!(grads.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_dense_layer_by_hand() {
        // c = b W (identity activation, zero bias), so dL/dW = bᵀ g.
        let mut seg = Segment::new(
            Role::B,
            &[LayerSpec::Dense { units: 2, activation: Activation::Identity }],
            &[2],
            0,
            0,
        )
        .unwrap();
        for p in seg.params_mut() {
            p.weight = Tensor::from_rows(&[&[2.0, 0.0], &[1.0, 3.0]]).unwrap();
        }
        let b = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let (c, mut cache) = seg.forward(&b).unwrap();
        assert_eq!(c.data(), &[4.0, 6.0]);
        let g = BoundaryGradient::new(Tensor::from_rows(&[&[0.5, -1.0]]).unwrap(), 1);
        let (grads, db) = auxiliary_backward(&seg, &mut cache, &g).unwrap();
        let w = &grads.layers[0].as_ref().unwrap();
        assert_eq!(w.weight.data(), &[0.5, -1.0, 1.0, -2.0]);
        assert_eq!(w.bias.data(), &[0.5, -1.0]);
        // g Wᵀ = [0.5*2 + -1*0, 0.5*1 + -1*3]
        assert_eq!(db.data(), &[1.0, -2.5]);
    }

    #[test]
    fn label_holders_cannot_use_auxiliary_pass() {
        let seg = Segment::new(
            Role::C,
            &[LayerSpec::Dense { units: 2, activation: Activation::Identity }],
            &[2],
            0,
            0,
        )
        .unwrap();
        let (y, mut cache) = seg.forward(&Tensor::full(&[1, 2], 1.0)).unwrap();
        let g = BoundaryGradient::new(y, 1);
        assert!(matches!(auxiliary_backward(&seg, &mut cache, &g), Err(Error::Role(_))));
    }
}
