#![allow(dead_code)]

use splitlearn::tensor::{Padding, Rng};
use splitlearn::{Activation, LayerSpec, Role, Segment, Tensor};

pub const EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-5;
/// Differences below this are round-off in the loss, not gradient error.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Default)]
pub struct GradCheck {
    pub params_checked: usize,
    pub inputs_checked: usize,
    pub max_rel: f64,
    pub failures: Vec<String>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// `L = Σ w·f(x)` for a fixed random `w`, so `dL/dy = w`.
fn objective(seg: &Segment, x: &Tensor, w: &Tensor) -> f64 {
    let y = seg.predict(x).unwrap();
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn compare(analytic: f64, numeric: f64, what: String, out: &mut GradCheck) {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    let rel = diff / scale.max(f64::MIN_POSITIVE);
    if scale > ABS_FLOOR {
        out.max_rel = out.max_rel.max(rel);
    }
    // Entries that agree to within the absolute floor pass regardless of scale.
    if diff > ABS_FLOOR && rel > REL_TOL {
        out.failures.push(format!("{what}: analytic {analytic:e}, numeric {numeric:e}, rel {rel:e}"));
    }
}

/// Central-difference check of every parameter gradient (up to `max_params`,
/// evenly spread) and of up to `max_inputs` input gradients.
pub fn check_segment(
    specs: &[LayerSpec],
    input_shape: &[usize],
    batch: usize,
    seed: u64,
    max_params: usize,
    max_inputs: usize,
) -> GradCheck {
    let mut seg = Segment::new(Role::Monolithic, specs, input_shape, 0, seed).unwrap();
    let mut rng = Rng::with_stream(seed, 999);
    // Non-zero biases so that every bias gradient path is exercised.
    for p in seg.params_mut() {
        for b in p.bias.data_mut() {
            *b = 0.1 * rng.normal();
        }
    }
    let mut xshape = vec![batch];
    xshape.extend_from_slice(input_shape);
    let x = randn(&xshape, &mut rng);
    let mut yshape = vec![batch];
    yshape.extend_from_slice(seg.output_shape());
    let w = randn(&yshape, &mut rng);

    let (_, mut cache) = seg.forward(&x).unwrap();
    let (grads, dx) = seg.backward_from_loss(&mut cache, &w).unwrap();
    let analytic: Vec<f64> = grads.flatten();
    let total = analytic.len();
    let mut out = GradCheck::default();

    let picks: Vec<usize> = if total <= max_params {
        (0..total).collect()
    } else {
        (0..max_params).map(|i| i * total / max_params).collect()
    };
    for &k in &picks {
        let eval = |delta: f64| {
            let mut s = seg.clone();
            perturb(&mut s, k, delta);
            objective(&s, &x, &w)
        };
        let numeric = (eval(EPS) - eval(-EPS)) / (2.0 * EPS);
        compare(analytic[k], numeric, format!("param {k}"), &mut out);
        out.params_checked += 1;
    }

    let n_in = x.len();
    let in_picks: Vec<usize> = (0..max_inputs.min(n_in)).map(|i| i * n_in / max_inputs.min(n_in)).collect();
    for &k in &in_picks {
        let f = |delta: f64| {
            let mut xp = x.clone();
            xp.data_mut()[k] += delta;
            objective(&seg, &xp, &w)
        };
        let numeric = (f(EPS) - f(-EPS)) / (2.0 * EPS);
        compare(dx.data()[k], numeric, format!("input {k}"), &mut out);
        out.inputs_checked += 1;
    }
    out
}

/// Adds `delta` to the `k`-th value in `Gradients::flatten` order.
fn perturb(seg: &mut Segment, mut k: usize, delta: f64) {
    for p in seg.params_mut() {
        for t in [&mut p.weight, &mut p.bias] {
            if k < t.len() {
                t.data_mut()[k] += delta;
                return;
            }
            k -= t.len();
        }
    }
    panic!("parameter index out of range");
}

/// One small network per layer kind.
pub fn layer_kind_cases() -> Vec<(&'static str, Vec<LayerSpec>, Vec<usize>)> {
    use Activation::*;
    let dense = |units, activation| LayerSpec::Dense { units, activation };
    let conv = |filters, k, stride, padding, activation| LayerSpec::Conv2d {
        filters,
        kernel: (k, k),
        stride,
        padding,
        activation,
    };
    vec![
        ("dense relu", vec![dense(12, Relu)], vec![10]),
        ("dense identity", vec![dense(12, Identity)], vec![10]),
        ("dense softmax", vec![dense(6, Softmax)], vec![20]),
        ("conv2d valid relu", vec![conv(4, 3, 1, Padding::Valid, Relu)], vec![6, 6, 3]),
        ("conv2d same stride 2", vec![conv(5, 3, 2, Padding::Same, Identity)], vec![7, 7, 3]),
        ("conv2d 1x1", vec![conv(16, 1, 1, Padding::Valid, Relu)], vec![5, 5, 8]),
        (
            "maxpool",
            vec![conv(4, 3, 1, Padding::Same, Identity), LayerSpec::MaxPool { window: 3, stride: 2 }],
            vec![7, 7, 3],
        ),
        (
            "flatten",
            vec![conv(4, 3, 1, Padding::Valid, Relu), LayerSpec::Flatten, dense(3, Softmax)],
            vec![5, 5, 2],
        ),
    ]
}
