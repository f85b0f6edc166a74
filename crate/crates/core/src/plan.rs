//! Split plans: a full layer list plus the cut positions that assign layers
//! to parties. See `docs/plan-format.md` for the file grammar.

use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layer::{Activation, LayerSpec};
use crate::loss::LossKind;
use crate::segment::{Role, Segment};
use crate::tensor::Padding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    NoSplit,
    SingleSplit,
    DoubleSplit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub name: String,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub loss: LossKind,
    pub layers: Vec<LayerSpec>,
    /// Cut after layer `k` (1-based): layers `1..=k` go upstream.
    pub cuts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSpec {
    pub role: Role,
    /// Global 0-based index of the first layer.
    pub first_layer: usize,
    pub layers: Vec<LayerSpec>,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

impl SegmentSpec {
    pub fn build(&self, seed: u64) -> Result<Segment> {
        Segment::new(self.role, &self.layers, &self.input_shape, self.first_layer, seed)
    }
}

/// A plan whose shape chain and cuts have been checked.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedPlan {
    pub plan: SplitPlan,
    pub mode: SplitMode,
    pub segments: Vec<SegmentSpec>,
    /// Per-sample output shape of every layer, in order.
    pub layer_shapes: Vec<Vec<usize>>,
}

impl ValidatedPlan {
    /// Per-sample shapes of the tensors crossing each cut.
    pub fn boundary_shapes(&self) -> Vec<Vec<usize>> {
        self.plan.cuts.iter().map(|&k| self.layer_shapes[k - 1].clone()).collect()
    }

    /// Per-sample element counts at each cut (`R·C·F` or `E`).
    pub fn boundary_elements(&self) -> Vec<usize> {
        self.boundary_shapes().iter().map(|s| s.iter().product()).collect()
    }

    pub fn segment(&self, role: Role) -> Option<&SegmentSpec> {
        self.segments.iter().find(|s| s.role == role)
    }

    pub fn output_classes(&self) -> usize {
        self.layer_shapes.last().map_or(0, |s| s.iter().product())
    }
}

impl SplitPlan {
    pub fn mode(&self) -> SplitMode {
        match self.cuts.len() {
            0 => SplitMode::NoSplit,
            1 => SplitMode::SingleSplit,
            _ => SplitMode::DoubleSplit,
        }
    }

    pub fn with_cuts(&self, cuts: &[usize]) -> SplitPlan {
        SplitPlan {
            cuts: cuts.to_vec(),
            ..self.clone()
        }
    }

    /// The plan as run in `mode`. A two-cut plan run as a single split keeps
    /// only its first cut; the server then holds everything after it.
    pub fn for_mode(&self, mode: SplitMode) -> Result<SplitPlan> {
        let cuts = match (mode, self.cuts.len()) {
            (SplitMode::NoSplit, _) => vec![],
            (SplitMode::SingleSplit, n) if n >= 1 => vec![self.cuts[0]],
            (SplitMode::DoubleSplit, 2) => self.cuts.clone(),
            (m, n) => {
                return Err(Error::Plan(format!(
                    "plan `{}` has {n} cut(s); {m:?} needs {}",
                    self.name,
                    if m == SplitMode::DoubleSplit { "two" } else { "at least one" }
                )))
            }
        };
        Ok(self.with_cuts(&cuts))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Plan(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut name = None;
        let mut input = None;
        let mut loss = None;
        let mut cuts = None;
        let mut layers = Vec::new();
        let mut in_layers = false;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Plan(format!("line {}: {msg}", lineno + 1));
            if in_layers {
                layers.push(parse_layer(line).map_err(|e| at(e.to_string()))?);
                continue;
            }
            if line == "layers:" {
                in_layers = true;
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let value = value.trim();
            match key.trim() {
                "name" => name = Some(value.to_string()),
                "input" => input = Some(parse_dims(value).map_err(|e| at(e.to_string()))?),
                "loss" => loss = Some(value.parse::<LossKind>().map_err(|e| at(e.to_string()))?),
                "cuts" => cuts = Some(parse_cuts(value).map_err(|e| at(e.to_string()))?),
                other => return Err(at(format!("unknown key `{other}`"))),
            }
        }
        Ok(SplitPlan {
            name: name.unwrap_or_else(|| "unnamed".into()),
            input_shape: input.ok_or_else(|| Error::Plan("missing `input`".into()))?,
            loss: loss.ok_or_else(|| Error::Plan("missing `loss`".into()))?,
            layers,
            cuts: cuts.unwrap_or_default(),
        })
    }

    /// Canonical text form; parsing it yields an equal plan.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let dims: Vec<String> = self.input_shape.iter().map(|d| d.to_string()).collect();
        let cuts: Vec<String> = self.cuts.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "input = {}", dims.join("x"));
        let _ = writeln!(s, "loss = {}", self.loss);
        let _ = writeln!(s, "cuts = {}", if cuts.is_empty() { "none".into() } else { cuts.join(", ") });
        s.push_str("layers:\n");
        for l in &self.layers {
            let line = match l {
                LayerSpec::Dense { units, activation } => format!("dense units={units} activation={activation}"),
                LayerSpec::Conv2d {
                    filters,
                    kernel: (kh, kw),
                    stride,
                    padding,
                    activation,
                } => format!(
                    "conv2d filters={filters} kernel={kh}x{kw} stride={stride} padding={} activation={activation}",
                    match padding {
                        Padding::Valid => "valid",
                        Padding::Same => "same",
                    }
                ),
                LayerSpec::MaxPool { window, stride } => format!("maxpool window={window} stride={stride}"),
                LayerSpec::Flatten => "flatten".into(),
            };
            s.push_str(&line);
            s.push('\n');
        }
        s
    }

    /// SHA-256 of the canonical form; both peers must agree on it.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.render().as_bytes()).into()
    }

    pub fn validate(&self) -> Result<ValidatedPlan> {
        validate_plan(self)
    }
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    let dims = s
        .split(['x', '*', ','])
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Plan(format!("bad dimension list `{s}`")))?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::Plan(format!("dimensions must be positive: `{s}`")));
    }
    Ok(dims)
}

fn parse_cuts(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|c| c.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Plan(format!("bad cut list `{s}`")))
}

fn parse_layer(line: &str) -> Result<LayerSpec> {
    let mut words = line.split_whitespace();
    let kind = words.next().unwrap_or_default();
    let mut units = None;
    let mut filters = None;
    let mut kernel = None;
    let mut window = None;
    let mut stride = 1;
    let mut padding = Padding::Valid;
    let mut activation = Activation::Identity;
    for w in words {
        let (k, v) = w
            .split_once('=')
            .ok_or_else(|| Error::Plan(format!("expected key=value, got `{w}`")))?;
        let num = || {
            v.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Plan(format!("`{k}` must be a positive integer, got `{v}`")))
        };
        match k {
            "units" => units = Some(num()?),
            "filters" => filters = Some(num()?),
            "window" => window = Some(num()?),
            "stride" => stride = num()?,
            "kernel" => {
                let d = parse_dims(v)?;
                kernel = Some(match d[..] {
                    [k] => (k, k),
                    [h, w] => (h, w),
                    _ => return Err(Error::Plan(format!("kernel must be `k` or `HxW`, got `{v}`"))),
                });
            }
            "padding" => {
                padding = match v {
                    "valid" => Padding::Valid,
                    "same" => Padding::Same,
                    _ => return Err(Error::Plan(format!("unknown padding `{v}`"))),
                }
            }
            "activation" => {
                activation = match v {
                    "relu" => Activation::Relu,
                    "identity" | "linear" => Activation::Identity,
                    "softmax" => Activation::Softmax,
                    _ => return Err(Error::Plan(format!("unknown activation `{v}`"))),
                }
            }
            _ => return Err(Error::Plan(format!("unknown layer attribute `{k}`"))),
        }
    }
    let need = |v: Option<usize>, what: &str| v.ok_or_else(|| Error::Plan(format!("{kind} needs `{what}`")));
    Ok(match kind {
        "dense" => LayerSpec::Dense {
            units: need(units, "units")?,
            activation,
        },
        "conv2d" => LayerSpec::Conv2d {
            filters: need(filters, "filters")?,
            kernel: kernel.ok_or_else(|| Error::Plan("conv2d needs `kernel`".into()))?,
            stride,
            padding,
            activation,
        },
        "maxpool" => LayerSpec::MaxPool {
            window: need(window, "window")?,
            stride,
        },
        "flatten" => LayerSpec::Flatten,
        other => return Err(Error::Plan(format!("unknown layer kind `{other}`"))),
    })
}

/// Checks cuts and the shape chain, and assigns layers to segments.
pub fn validate_plan(plan: &SplitPlan) -> Result<ValidatedPlan> {
    let n = plan.layers.len();
    if n == 0 {
        return Err(Error::Plan("plan has no layers".into()));
    }
    if plan.cuts.len() > 2 {
        return Err(Error::Plan(format!("at most two cuts are supported, got {}", plan.cuts.len())));
    }
    for &k in &plan.cuts {
        if k == 0 || k >= n {
            return Err(Error::Plan(format!(
                "cut {k} must lie strictly inside the {n}-layer network (1..={})",
                n.saturating_sub(1)
            )));
        }
    }
    if plan.cuts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Plan(format!("cuts must be strictly increasing, got {:?}", plan.cuts)));
    }

    let mut shapes = Vec::with_capacity(n);
    let mut shape = plan.input_shape.clone();
    for (i, l) in plan.layers.iter().enumerate() {
        if l.activation() == Activation::Softmax && (i + 1 != n || !matches!(l, LayerSpec::Dense { .. })) {
            return Err(Error::Plan(format!(
                "layer {}: softmax is only allowed on a final dense layer",
                i + 1
            )));
        }
        shape = l
            .output_shape(&shape)
            .map_err(|e| Error::Plan(format!("layer {}: {e}", i + 1)))?;
        shapes.push(shape.clone());
    }
    if plan.loss == LossKind::CrossEntropy
        && (plan.layers[n - 1].activation() != Activation::Softmax || shapes[n - 1].len() != 1)
    {
        return Err(Error::Plan("cross-entropy loss needs a final softmax dense layer".into()));
    }

    let roles: &[Role] = match plan.cuts.len() {
        0 => &[Role::Monolithic],
        1 => &[Role::A, Role::C],
        _ => &[Role::A, Role::B, Role::C],
    };
    let mut bounds = vec![0];
    bounds.extend_from_slice(&plan.cuts);
    bounds.push(n);
    let segments = roles
        .iter()
        .zip(bounds.windows(2))
        .map(|(&role, w)| SegmentSpec {
            role,
            first_layer: w[0],
            layers: plan.layers[w[0]..w[1]].to_vec(),
            input_shape: if w[0] == 0 {
                plan.input_shape.clone()
            } else {
                shapes[w[0] - 1].clone()
            },
            output_shape: shapes[w[1] - 1].clone(),
        })
        .collect();

    Ok(ValidatedPlan {
        plan: plan.clone(),
        mode: plan.mode(),
        segments,
        layer_shapes: shapes,
    })
}
