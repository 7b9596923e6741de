use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ops::{self, ConvShape};
use super::params::{Layout, LayoutEntry, ModelParams, Tensor};
use crate::rngkit::RngStream;
use crate::{Error, Result};

const CONV1_CHANNELS: usize = 16;
const CONV2_CHANNELS: usize = 32;
const CONV_KERNEL: usize = 3;
const CONV_PADDING: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// flatten -> dense(hidden) -> ReLU -> dropout -> dense(n_classes)
    Mlp,
    /// conv3x3(16) -> ReLU -> pool2 -> conv3x3(32) -> ReLU -> pool2 -> dense(n_classes)
    SmallCnn,
    /// `Mlp` plus a dense block that never touches the output. It only
    /// inflates the parameter count, for transport benchmarks.
    WidePayload,
}

fn default_hidden() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// `[channels, height, width]`
    pub input_shape: [usize; 3],
    pub n_classes: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub payload_width: usize,
}

impl ModelSpec {
    pub fn mlp(input_shape: [usize; 3], hidden: usize, n_classes: usize, dropout_rate: f64) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_shape,
            n_classes,
            hidden,
            dropout_rate,
            payload_width: 0,
        }
    }

    pub fn small_cnn(input_shape: [usize; 3], n_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::SmallCnn,
            input_shape,
            n_classes,
            hidden: default_hidden(),
            dropout_rate: 0.0,
            payload_width: 0,
        }
    }

    pub fn wide_payload(input_shape: [usize; 3], hidden: usize, n_classes: usize, payload_width: usize) -> Self {
        ModelSpec {
            kind: ModelKind::WidePayload,
            payload_width,
            ..Self::mlp(input_shape, hidden, n_classes, 0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid("n_classes must be at least 2"));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::invalid("input_shape dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate must lie in [0, 1)"));
        }
        match self.kind {
            ModelKind::Mlp | ModelKind::WidePayload if self.hidden == 0 => {
                return Err(Error::invalid("hidden must be at least 1"))
            }
            ModelKind::WidePayload if self.payload_width == 0 => {
                return Err(Error::invalid("payload_width must be at least 1"))
            }
            ModelKind::SmallCnn if self.input_shape[1] < 4 || self.input_shape[2] < 4 => {
                return Err(Error::invalid("SmallCnn needs inputs of at least 4x4"))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Spatial size after the two pooling stages.
    fn pooled_hw(&self) -> (usize, usize) {
        (self.input_shape[1] / 2 / 2, self.input_shape[2] / 2 / 2)
    }

    /// Parameter layout in definition order.
    pub fn layout(&self) -> Layout {
        let [c, _, _] = self.input_shape;
        let n = self.n_classes;
        let entries = match self.kind {
            ModelKind::Mlp | ModelKind::WidePayload => {
                let mut e = vec![
                    LayoutEntry::new("fc1.weight", vec![self.hidden, self.input_len()]),
                    LayoutEntry::new("fc1.bias", vec![self.hidden]),
                    LayoutEntry::new("fc2.weight", vec![n, self.hidden]),
                    LayoutEntry::new("fc2.bias", vec![n]),
                ];
                if self.kind == ModelKind::WidePayload {
                    e.push(LayoutEntry::new("payload.weight", vec![self.payload_width, self.hidden]));
                    e.push(LayoutEntry::new("payload.bias", vec![self.payload_width]));
                }
                e
            }
            ModelKind::SmallCnn => {
                let (ph, pw) = self.pooled_hw();
                vec![
                    LayoutEntry::new("conv1.weight", vec![CONV1_CHANNELS, c, CONV_KERNEL, CONV_KERNEL]),
                    LayoutEntry::new("conv1.bias", vec![CONV1_CHANNELS]),
                    LayoutEntry::new(
                        "conv2.weight",
                        vec![CONV2_CHANNELS, CONV1_CHANNELS, CONV_KERNEL, CONV_KERNEL],
                    ),
                    LayoutEntry::new("conv2.bias", vec![CONV2_CHANNELS]),
                    LayoutEntry::new("fc.weight", vec![n, CONV2_CHANNELS * ph * pw]),
                    LayoutEntry::new("fc.bias", vec![n]),
                ]
            }
        };
        Layout::new(entries)
    }

    fn conv1_shape(&self, batch: usize) -> ConvShape {
        ConvShape {
            batch,
            in_channels: self.input_shape[0],
            height: self.input_shape[1],
            width: self.input_shape[2],
            out_channels: CONV1_CHANNELS,
            kernel: CONV_KERNEL,
            padding: CONV_PADDING,
        }
    }

    fn conv2_shape(&self, batch: usize) -> ConvShape {
        ConvShape {
            batch,
            in_channels: CONV1_CHANNELS,
            height: self.input_shape[1] / 2,
            width: self.input_shape[2] / 2,
            out_channels: CONV2_CHANNELS,
            kernel: CONV_KERNEL,
            padding: CONV_PADDING,
        }
    }
}

/// He-uniform weights (`bound = sqrt(6 / fan_in)`) and zero biases. Draws are
/// taken tensor by tensor in layout order; biases take none.
pub fn init_params(spec: &ModelSpec, stream: &mut RngStream) -> Result<ModelParams> {
    spec.validate()?;
    let layout = Arc::new(spec.layout());
    let mut params = ModelParams::zeros(layout.clone());
    for (entry, values) in layout.entries().iter().zip(params.tensors_mut()) {
        if entry.shape.len() < 2 {
            continue;
        }
        let fan_in: usize = entry.shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        for v in values.iter_mut() {
            *v = ((2.0 * stream.next_uniform() - 1.0) * bound) as f32;
        }
    }
    Ok(params)
}

#[derive(Debug, Clone)]
enum Cache {
    Dense {
        hidden_pre: Vec<f32>,
        hidden_out: Vec<f32>,
        mask: Option<Vec<f32>>,
    },
    Conv {
        c1_pre: Vec<f32>,
        pool1: Vec<f32>,
        pool1_idx: Vec<usize>,
        c2_pre: Vec<f32>,
        pool2: Vec<f32>,
        pool2_idx: Vec<usize>,
    },
}

/// Logits plus the activations the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Tensor,
    cache: Cache,
}

impl ForwardPass {
    /// Per-unit dropout multipliers (`0` or `1 / keep`), batch-major, when
    /// dropout was applied.
    pub fn dropout_mask(&self) -> Option<&[f32]> {
        match &self.cache {
            Cache::Dense { mask, .. } => mask.as_deref(),
            Cache::Conv { .. } => None,
        }
    }
}

fn check_inputs(spec: &ModelSpec, params: &ModelParams, batch: &Tensor) -> Result<usize> {
    spec.validate()?;
    let shape = batch.shape();
    if shape.len() != 4 || shape[1..] != spec.input_shape {
        return Err(Error::invalid(format!(
            "batch shape {shape:?} does not match model input [B, {}, {}, {}]",
            spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]
        )));
    }
    if params.layout().as_ref() != &spec.layout() {
        return Err(Error::invalid("parameter layout does not match the model spec"));
    }
    Ok(shape[0])
}

/// Runs the network. With `dropout` present the pass is in training mode and
/// draws one uniform per hidden unit (batch-major), whatever the input values.
pub fn forward(
    spec: &ModelSpec,
    params: &ModelParams,
    batch: &Tensor,
    dropout: Option<&mut RngStream>,
) -> Result<ForwardPass> {
    let b = check_inputs(spec, params, batch)?;
    let x = batch.data();
    let n = spec.n_classes;
    match spec.kind {
        ModelKind::Mlp | ModelKind::WidePayload => {
            let (d, h) = (spec.input_len(), spec.hidden);
            let hidden_pre = ops::dense_forward(x, b, d, params.tensor(0), params.tensor(1), h);
            let mut hidden_out = hidden_pre.clone();
            ops::relu_in_place(&mut hidden_out);
            let mask = dropout.filter(|_| spec.dropout_rate > 0.0).map(|stream| {
                let keep = 1.0 - spec.dropout_rate;
                let scale = (1.0 / keep) as f32;
                let mask: Vec<f32> = (0..hidden_out.len())
                    .map(|_| if stream.next_uniform() < keep { scale } else { 0.0 })
                    .collect();
                for (v, m) in hidden_out.iter_mut().zip(&mask) {
                    *v *= m;
                }
                mask
            });
            let logits = ops::dense_forward(&hidden_out, b, h, params.tensor(2), params.tensor(3), n);
            Ok(ForwardPass {
                logits: Tensor::new(vec![b, n], logits)?,
                cache: Cache::Dense {
                    hidden_pre,
                    hidden_out,
                    mask,
                },
            })
        }
        ModelKind::SmallCnn => {
            let s1 = spec.conv1_shape(b);
            let c1_pre = ops::conv2d_forward(x, params.tensor(0), params.tensor(1), s1);
            let mut r1 = c1_pre.clone();
            ops::relu_in_place(&mut r1);
            let (pool1, pool1_idx) = ops::maxpool2_forward(&r1, b * CONV1_CHANNELS, s1.height, s1.width);

            let s2 = spec.conv2_shape(b);
            let c2_pre = ops::conv2d_forward(&pool1, params.tensor(2), params.tensor(3), s2);
            let mut r2 = c2_pre.clone();
            ops::relu_in_place(&mut r2);
            let (pool2, pool2_idx) = ops::maxpool2_forward(&r2, b * CONV2_CHANNELS, s2.height, s2.width);

            let flat = pool2.len() / b;
            let logits = ops::dense_forward(&pool2, b, flat, params.tensor(4), params.tensor(5), n);
            Ok(ForwardPass {
                logits: Tensor::new(vec![b, n], logits)?,
                cache: Cache::Conv {
                    c1_pre,
                    pool1,
                    pool1_idx,
                    c2_pre,
                    pool2,
                    pool2_idx,
                },
            })
        }
    }
}

/// Mean softmax cross-entropy and its gradient, by manual backpropagation
/// through the activations of a single forward pass.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ModelParams,
    batch: &Tensor,
    labels: &[usize],
    dropout: Option<&mut RngStream>,
) -> Result<(f64, ModelParams)> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= spec.n_classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            spec.n_classes
        )));
    }
    if labels.len() != batch.shape().first().copied().unwrap_or(0) {
        return Err(Error::invalid("labels and batch disagree on batch size"));
    }
    let pass = forward(spec, params, batch, dropout)?;
    let b = labels.len();
    let n = spec.n_classes;
    let (loss, dlogits) = ops::softmax_cross_entropy(pass.logits.data(), labels, n);

    let mut grad = ModelParams::zeros(params.layout().clone());
    let mut g = grad.tensors_mut();
    match pass.cache {
        Cache::Dense {
            hidden_pre,
            hidden_out,
            mask,
        } => {
            let (d, h) = (spec.input_len(), spec.hidden);
            let (g_head, g_tail) = g.split_at_mut(2);
            let [dw2, db2] = &mut g_tail[..2] else { unreachable!() };
            let mut dhidden = ops::dense_backward(&hidden_out, &dlogits, b, h, params.tensor(2), n, dw2, db2, true)
                .expect("input gradient requested");
            if let Some(mask) = &mask {
                for (gv, m) in dhidden.iter_mut().zip(mask) {
                    *gv *= m;
                }
            }
            ops::relu_backward_in_place(&mut dhidden, &hidden_pre);
            let [dw1, db1] = g_head else { unreachable!() };
            ops::dense_backward(batch.data(), &dhidden, b, d, params.tensor(0), h, dw1, db1, false);
            // payload tensors, if any, stay zero: they never reach the loss
        }
        Cache::Conv {
            c1_pre,
            pool1,
            pool1_idx,
            c2_pre,
            pool2,
            pool2_idx,
        } => {
            let [dw1, db1, dw2, db2, dw3, db3] = &mut g[..] else { unreachable!() };
            let flat = pool2.len() / b;
            let dpool2 = ops::dense_backward(&pool2, &dlogits, b, flat, params.tensor(4), n, dw3, db3, true)
                .expect("input gradient requested");
            let mut dc2 = ops::maxpool2_backward(&dpool2, &pool2_idx, c2_pre.len());
            ops::relu_backward_in_place(&mut dc2, &c2_pre);
            let s2 = spec.conv2_shape(b);
            let dpool1 = ops::conv2d_backward(&pool1, params.tensor(2), &dc2, s2, dw2, db2, true)
                .expect("input gradient requested");
            let mut dc1 = ops::maxpool2_backward(&dpool1, &pool1_idx, c1_pre.len());
            ops::relu_backward_in_place(&mut dc1, &c1_pre);
            let s1 = spec.conv1_shape(b);
            ops::conv2d_backward(batch.data(), params.tensor(0), &dc1, s1, dw1, db1, false);
        }
    }
    Ok((loss, grad))
}
