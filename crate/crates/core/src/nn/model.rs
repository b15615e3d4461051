use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    FullyConnected,
    /// Stride-1 convolution with "same" zero padding, optionally followed
    /// by a 2x2 max-pool.
    Convolutional { pool: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub kind: LayerKind,
    /// `[F_out, F_in]` or `[C_out, C_in, K_h, K_w]`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub activation: Activation,
}

impl LayerParams {
    pub fn out_size(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Input features (FC) or input channels (conv).
    pub fn in_size(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1..].iter().product()
    }

    fn validate(&self, index: usize) -> Result<()> {
        let key = format!("layer[{index}]");
        let want_dims = match self.kind {
            LayerKind::FullyConnected => 2,
            LayerKind::Convolutional { .. } => 4,
        };
        if self.weight.ndim() != want_dims {
            return Err(Error::config(
                key,
                format!(
                    "{:?} weight must be {want_dims}-D, got shape {:?}",
                    self.kind,
                    self.weight.shape()
                ),
            ));
        }
        if let LayerKind::Convolutional { .. } = self.kind {
            let s = self.weight.shape();
            if s[2] % 2 == 0 || s[3] % 2 == 0 {
                return Err(Error::config(key, "conv kernel sizes must be odd"));
            }
        }
        if let Some(b) = &self.bias {
            if b.shape() != [self.out_size()] {
                return Err(Error::config(
                    key,
                    format!("bias shape {:?} != [{}]", b.shape(), self.out_size()),
                ));
            }
        }
        Ok(())
    }
}

/// Role of one entry in the flattened parameter-group list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupRole {
    Weight { layer: usize },
    Bias { layer: usize },
}

impl GroupRole {
    pub fn is_weight(self) -> bool {
        matches!(self, GroupRole::Weight { .. })
    }

    pub fn layer(self) -> usize {
        match self {
            GroupRole::Weight { layer } | GroupRole::Bias { layer } => layer,
        }
    }
}

/// Ordered layers of a network plus the per-sample input shape.
///
/// Parameter groups are flattened in forward order as
/// `weight_0, bias_0, weight_1, bias_1, ...`; gradients, velocities and
/// update deltas all use this ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerParams>) -> Result<Self> {
        let model = Self {
            input_shape,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    /// Number of weight-bearing groups (`L`).
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, LayerParams::out_size)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn group_roles(&self) -> Vec<GroupRole> {
        let mut roles = Vec::with_capacity(self.layers.len() * 2);
        for (layer, l) in self.layers.iter().enumerate() {
            roles.push(GroupRole::Weight { layer });
            if l.bias.is_some() {
                roles.push(GroupRole::Bias { layer });
            }
        }
        roles
    }

    pub fn groups(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(&l.weight);
            if let Some(b) = &l.bias {
                out.push(b);
            }
        }
        out
    }

    pub fn groups_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(&mut l.weight);
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
        }
        out
    }

    pub fn to_groups(&self) -> Vec<Tensor> {
        self.groups().into_iter().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.groups().iter().map(|t| t.len()).sum()
    }

    /// Zero tensors mirroring every parameter group.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.groups().iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    pub fn check_groups(&self, groups: &[Tensor], context: &str) -> Result<()> {
        let mine = self.groups();
        if mine.len() != groups.len() {
            return Err(Error::shape(context, &[mine.len()], &[groups.len()]));
        }
        for (a, b) in mine.iter().zip(groups) {
            if a.shape() != b.shape() {
                return Err(Error::shape(context, a.shape(), b.shape()));
            }
        }
        Ok(())
    }

    /// `w += alpha * delta` for every group.
    pub fn add_scaled(&mut self, alpha: f64, delta: &[Tensor]) -> Result<()> {
        self.check_groups(delta, "ModelParams::add_scaled")?;
        for (p, d) in self.groups_mut().into_iter().zip(delta) {
            p.axpy(alpha, d)?;
        }
        Ok(())
    }

    /// `self - other`, group by group.
    pub fn diff(&self, other: &ModelParams) -> Result<Vec<Tensor>> {
        let theirs = other.groups();
        if theirs.len() != self.groups().len() {
            return Err(Error::shape("ModelParams::diff", &[self.groups().len()], &[theirs.len()]));
        }
        self.groups()
            .iter()
            .zip(theirs)
            .map(|(a, b)| a.sub(b))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|t| t.is_finite())
    }

    /// Per-sample shape produced by each layer (after pooling).
    pub fn layer_output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match layer.kind {
                LayerKind::FullyConnected => {
                    let inp: usize = shape.iter().product();
                    if inp != layer.in_size() {
                        return Err(Error::config(
                            format!("layer[{i}]"),
                            format!("expects {} input features, receives {inp}", layer.in_size()),
                        ));
                    }
                    vec![layer.out_size()]
                }
                LayerKind::Convolutional { pool } => {
                    if shape.len() != 3 || shape[0] != layer.in_size() {
                        return Err(Error::config(
                            format!("layer[{i}]"),
                            format!(
                                "conv expects [{}, H, W] input, receives {shape:?}",
                                layer.in_size()
                            ),
                        ));
                    }
                    let (h, w) = if pool {
                        (shape[1] / 2, shape[2] / 2)
                    } else {
                        (shape[1], shape[2])
                    };
                    if h == 0 || w == 0 {
                        return Err(Error::config(format!("layer[{i}]"), "spatial size pooled to zero"));
                    }
                    vec![layer.out_size(), h, w]
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("model", "at least one layer required"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(i)?;
        }
        self.layer_output_shapes()?;
        Ok(())
    }
}

/// Network architecture, as written in the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchSpec {
    /// A single fully-connected layer `[input, classes]`.
    Linear { input: usize, classes: usize },
    /// Fully-connected widths, input first and classes last.
    Mlp { widths: Vec<usize> },
    /// Conv blocks (conv + ReLU + 2x2 max-pool) followed by FC layers.
    Cnn {
        /// `[C, H, W]`
        input: Vec<usize>,
        channels: Vec<usize>,
        kernel: usize,
        /// Hidden FC widths between the conv stack and the classifier.
        hidden: Vec<usize>,
        classes: usize,
    },
}

impl ArchSpec {
    /// The two-conv, two-FC network used for image tasks.
    pub fn default_cnn(input: [usize; 3], classes: usize) -> Self {
        ArchSpec::Cnn {
            input: input.to_vec(),
            channels: vec![32, 64],
            kernel: 5,
            hidden: vec![512],
            classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ArchSpec::Linear { classes, .. } | ArchSpec::Cnn { classes, .. } => *classes,
            ArchSpec::Mlp { widths } => widths.last().copied().unwrap_or(0),
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            ArchSpec::Linear { input, .. } => *input,
            ArchSpec::Mlp { widths } => widths.first().copied().unwrap_or(0),
            ArchSpec::Cnn { input, .. } => input.iter().product(),
        }
    }
}

/// Build a network with weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
/// and zero biases.
pub fn build_model<R: Rng + ?Sized>(arch: &ArchSpec, rng: &mut R) -> Result<ModelParams> {
    let positive = |key: &str, v: &[usize]| -> Result<()> {
        if v.is_empty() || v.iter().any(|&x| x == 0) {
            return Err(Error::config(key, format!("widths must be positive, got {v:?}")));
        }
        Ok(())
    };

    let fc = |rng: &mut R, fan_in: usize, out: usize, act: Activation| -> LayerParams {
        let bound = 1.0 / (fan_in as f64).sqrt();
        LayerParams {
            kind: LayerKind::FullyConnected,
            weight: Tensor::from_fn(&[out, fan_in], |_| rng.random_range(-bound..=bound)),
            bias: Some(Tensor::zeros(&[out])),
            activation: act,
        }
    };

    match arch {
        ArchSpec::Linear { input, classes } => {
            positive("model.input/classes", &[*input, *classes])?;
            let layer = fc(rng, *input, *classes, Activation::Identity);
            ModelParams::new(vec![*input], vec![layer])
        }
        ArchSpec::Mlp { widths } => {
            positive("model.widths", widths)?;
            if widths.len() < 2 {
                return Err(Error::config("model.widths", "need at least input and output widths"));
            }
            let n = widths.len() - 1;
            let layers = widths
                .windows(2)
                .enumerate()
                .map(|(i, w)| {
                    let act = if i + 1 == n { Activation::Identity } else { Activation::Relu };
                    fc(rng, w[0], w[1], act)
                })
                .collect();
            ModelParams::new(vec![widths[0]], layers)
        }
        ArchSpec::Cnn {
            input,
            channels,
            kernel,
            hidden,
            classes,
        } => {
            if input.len() != 3 {
                return Err(Error::config("model.input", "CNN input must be [C, H, W]"));
            }
            positive("model.input", input)?;
            positive("model.channels", channels)?;
            positive("model.kernel", &[*kernel])?;
            positive("model.classes", &[*classes])?;
            if hidden.iter().any(|&h| h == 0) {
                return Err(Error::config("model.hidden", "widths must be positive"));
            }
            if kernel % 2 == 0 {
                return Err(Error::config("model.kernel", "kernel size must be odd"));
            }
            let mut layers = Vec::new();
            let (mut c, mut h, mut w) = (input[0], input[1], input[2]);
            for &out in channels {
                let fan_in = c * kernel * kernel;
                let bound = 1.0 / (fan_in as f64).sqrt();
                layers.push(LayerParams {
                    kind: LayerKind::Convolutional { pool: true },
                    weight: Tensor::from_fn(&[out, c, *kernel, *kernel], |_| {
                        rng.random_range(-bound..=bound)
                    }),
                    bias: Some(Tensor::zeros(&[out])),
                    activation: Activation::Relu,
                });
                c = out;
                h /= 2;
                w /= 2;
                if h == 0 || w == 0 {
                    return Err(Error::config("model.input", "too many pooling stages for input size"));
                }
            }
            let mut fan_in = c * h * w;
            for &width in hidden {
                layers.push(fc(rng, fan_in, width, Activation::Relu));
                fan_in = width;
            }
            layers.push(fc(rng, fan_in, *classes, Activation::Identity));
            ModelParams::new(input.clone(), layers)
        }
    }
}
