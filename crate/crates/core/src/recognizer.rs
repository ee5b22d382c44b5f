//! Small segment classifier fed with either dynamic appearances or raw
//! per-segment temporal means.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numeric::{xavier_uniform, ConvGeometry, Graph, ParamSet, Rng, Tensor, Var};

pub const CONV1_WIDTH: usize = 16;
pub const CONV2_WIDTH: usize = 32;
const KERNEL: usize = 3;
/// Variance floor of the input standardization.
pub const INPUT_EPS: f64 = 1e-10;

/// What the recognizer sees for each segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMode {
    /// Dynamic appearance from the projector.
    Da,
    /// Temporal mean of the raw frames.
    RgbBaseline,
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::Da => "da",
            InputMode::RgbBaseline => "rgb",
        })
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "da" => Ok(InputMode::Da),
            "rgb" | "rgb_baseline" => Ok(InputMode::RgbBaseline),
            _ => Err(Error::InvalidConfig(format!("unknown input mode {s:?}"))),
        }
    }
}

/// Input standardization → conv 3×3 (C→16) → GELU → conv 3×3 stride 2 (16→32) → GELU → spatial mean → linear.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_weight: Tensor,
    pub conv2_bias: Tensor,
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub conv1: (Var, Var),
    pub conv2: (Var, Var),
    pub fc: (Var, Var),
}

impl HeadVars {
    pub fn trainable(&self) -> Vec<Var> {
        vec![
            self.conv1.0,
            self.conv1.1,
            self.conv2.0,
            self.conv2.1,
            self.fc.0,
            self.fc.1,
        ]
    }
}

const NAMES: [&str; 6] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "fc.weight",
    "fc.bias",
];

impl HeadParams {
    pub fn init(channels: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidConfig(
                "head needs at least one input channel".into(),
            ));
        }
        if classes < 2 {
            return Err(Error::InvalidConfig(
                "head needs at least two classes".into(),
            ));
        }
        let kk = KERNEL * KERNEL;
        Ok(Self {
            conv1_weight: xavier_uniform(
                rng,
                &[KERNEL, KERNEL, channels, CONV1_WIDTH],
                kk * channels,
                kk * CONV1_WIDTH,
            ),
            conv1_bias: Tensor::zeros(&[CONV1_WIDTH]),
            conv2_weight: xavier_uniform(
                rng,
                &[KERNEL, KERNEL, CONV1_WIDTH, CONV2_WIDTH],
                kk * CONV1_WIDTH,
                kk * CONV2_WIDTH,
            ),
            conv2_bias: Tensor::zeros(&[CONV2_WIDTH]),
            fc_weight: xavier_uniform(rng, &[CONV2_WIDTH, classes], CONV2_WIDTH, classes),
            fc_bias: Tensor::zeros(&[classes]),
        })
    }

    /// All-zero parameters.
    pub fn zeros(channels: usize, classes: usize) -> Self {
        Self {
            conv1_weight: Tensor::zeros(&[KERNEL, KERNEL, channels, CONV1_WIDTH]),
            conv1_bias: Tensor::zeros(&[CONV1_WIDTH]),
            conv2_weight: Tensor::zeros(&[KERNEL, KERNEL, CONV1_WIDTH, CONV2_WIDTH]),
            conv2_bias: Tensor::zeros(&[CONV2_WIDTH]),
            fc_weight: Tensor::zeros(&[CONV2_WIDTH, classes]),
            fc_bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1_weight.shape()[2]
    }

    pub fn classes(&self) -> usize {
        self.fc_bias.len()
    }

    fn refs(&self) -> [&Tensor; 6] {
        [
            &self.conv1_weight,
            &self.conv1_bias,
            &self.conv2_weight,
            &self.conv2_bias,
            &self.fc_weight,
            &self.fc_bias,
        ]
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1_weight,
            &mut self.conv1_bias,
            &mut self.conv2_weight,
            &mut self.conv2_bias,
            &mut self.fc_weight,
            &mut self.fc_bias,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.refs().iter().map(|t| t.len()).sum()
    }

    pub fn to_param_set(&self) -> ParamSet {
        NAMES
            .iter()
            .zip(self.refs())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    pub fn from_param_set(set: &ParamSet) -> Result<Self> {
        let get = |n: &str| set.require(n).cloned();
        let p = Self {
            conv1_weight: get("conv1.weight")?,
            conv1_bias: get("conv1.bias")?,
            conv2_weight: get("conv2.weight")?,
            conv2_bias: get("conv2.bias")?,
            fc_weight: get("fc.weight")?,
            fc_bias: get("fc.bias")?,
        };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        let c = self.conv1_weight.shape().get(2).copied().unwrap_or(0);
        let k = self.fc_bias.len();
        let want: [(&Tensor, Vec<usize>); 6] = [
            (&self.conv1_weight, vec![KERNEL, KERNEL, c, CONV1_WIDTH]),
            (&self.conv1_bias, vec![CONV1_WIDTH]),
            (
                &self.conv2_weight,
                vec![KERNEL, KERNEL, CONV1_WIDTH, CONV2_WIDTH],
            ),
            (&self.conv2_bias, vec![CONV2_WIDTH]),
            (&self.fc_weight, vec![CONV2_WIDTH, k]),
            (&self.fc_bias, vec![k]),
        ];
        for ((t, shape), name) in want.iter().zip(NAMES) {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> HeadVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        HeadVars {
            conv1: (leaf(&self.conv1_weight), leaf(&self.conv1_bias)),
            conv2: (leaf(&self.conv2_weight), leaf(&self.conv2_bias)),
            fc: (leaf(&self.fc_weight), leaf(&self.fc_bias)),
        }
    }
}

/// Logits `[B, K]` for segment inputs `[B, S, H, W, C]`, averaged over segments.
///
/// Each segment passes standardization, conv1, GELU, conv2, GELU, a global
/// spatial mean and the linear classifier.
pub fn head_graph(g: &mut Graph, vars: &HeadVars, inputs: Var) -> Result<Var> {
    let shape = g.shape(inputs).to_vec();
    let [b, s, h, w, c] = shape[..] else {
        return Err(Error::ShapeMismatch(format!(
            "head expects [B, S, H, W, C], got {shape:?}"
        )));
    };
    let want_c = g.shape(vars.conv1.0)[2];
    if c != want_c {
        return Err(Error::ShapeMismatch(format!(
            "head expects {want_c} channels, got {c}"
        )));
    }
    if b == 0 || s == 0 || h == 0 || w == 0 {
        return Err(Error::ShapeMismatch(format!("empty head input {shape:?}")));
    }
    let k = g.shape(vars.fc.1)[0];
    // Each segment input is standardized over H×W×C so the recognizer sees the
    // same scale whatever the magnitude of its input.
    let x = g.reshape(inputs, &[b * s, h * w * c]);
    let x = g.standardize(x, INPUT_EPS);
    let x = g.reshape(x, &[b * s, h, w, c]);
    let x = g.conv2d(
        x,
        vars.conv1.0,
        Some(vars.conv1.1),
        ConvGeometry::new(KERNEL, 1),
    );
    let x = g.gelu(x);
    let x = g.conv2d(
        x,
        vars.conv2.0,
        Some(vars.conv2.1),
        ConvGeometry::new(KERNEL, 2),
    );
    let x = g.gelu(x);
    let x = g.mean_axis(x, 1);
    let x = g.mean_axis(x, 1);
    let logits = g.linear(x, vars.fc.0, Some(vars.fc.1));
    let logits = g.reshape(logits, &[b, s, k]);
    Ok(g.consensus(logits))
}

/// Logits for one clip's segment inputs `[S, H, W, C]`.
pub fn head_forward(inputs: &Tensor, params: &HeadParams) -> Result<Vec<f64>> {
    let mut shape = vec![1];
    shape.extend_from_slice(inputs.shape());
    let x = inputs.clone().reshape(&shape)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(x);
    let logits = head_graph(&mut g, &vars, x)?;
    Ok(g.value(logits).data().to_vec())
}

/// Argmax, lowest index on ties.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

/// Per-segment temporal mean of a `[S, T, H, W, C]` clip, `[S, H, W, C]`.
pub fn temporal_mean(clip: &Tensor) -> Result<Tensor> {
    let [s, t, h, w, c] = *clip.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "expected [S, T, H, W, C], got {:?}",
            clip.shape()
        )));
    };
    let frame = h * w * c;
    let mut out = vec![0.0; s * frame];
    for si in 0..s {
        let dst = &mut out[si * frame..(si + 1) * frame];
        for ti in 0..t {
            let base = (si * t + ti) * frame;
            for (o, v) in dst.iter_mut().zip(&clip.data()[base..base + frame]) {
                *o += v;
            }
        }
        dst.iter_mut().for_each(|v| *v /= t as f64);
    }
    Tensor::new(&[s, h, w, c], out)
}
