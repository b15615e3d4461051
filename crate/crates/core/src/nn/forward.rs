//! Forward and backward passes, softmax cross-entropy and the proximal term.

use crate::error::{Error, Result};
use crate::nn::model::{Activation, LayerKind, LayerParams, ModelParams};
use crate::tensor::Tensor;

/// Per-layer values kept for the backward pass.
struct LayerCache {
    input: Tensor,
    pre_act: Tensor,
    /// Flat index into the post-activation tensor selected by each pooled cell.
    pool_argmax: Option<Vec<usize>>,
    post_act_shape: Vec<usize>,
}

/// Proximal anchor for FedProx: adds `mu/2 * ||w - anchor||^2` to the loss.
#[derive(Debug, Clone, Copy)]
pub struct Prox<'a> {
    pub mu: f64,
    pub anchor: &'a ModelParams,
}

fn check_batch(model: &ModelParams, batch: &Tensor) -> Result<usize> {
    let shape = batch.shape();
    if shape.is_empty() || shape[1..] != model.input_shape[..] {
        let mut expected = vec![shape.first().copied().unwrap_or(0)];
        expected.extend_from_slice(&model.input_shape);
        return Err(Error::config(
            "layer[0]",
            format!("batch shape {shape:?} does not match model input {expected:?}"),
        ));
    }
    Ok(shape[0])
}

fn fc_forward(layer: &LayerParams, x: &[f64], batch: usize) -> Vec<f64> {
    let (out, inp) = (layer.out_size(), layer.in_size());
    let w = layer.weight.data();
    let mut z = vec![0.0; batch * out];
    for b in 0..batch {
        let xb = &x[b * inp..(b + 1) * inp];
        let zb = &mut z[b * out..(b + 1) * out];
        for (o, zo) in zb.iter_mut().enumerate() {
            let wo = &w[o * inp..(o + 1) * inp];
            *zo = xb.iter().zip(wo).map(|(a, c)| a * c).sum();
        }
        if let Some(bias) = &layer.bias {
            for (zo, bo) in zb.iter_mut().zip(bias.data()) {
                *zo += bo;
            }
        }
    }
    z
}

fn conv_forward(layer: &LayerParams, x: &Tensor) -> Vec<f64> {
    let ws = layer.weight.shape();
    let (co_n, ci_n, kh_n, kw_n) = (ws[0], ws[1], ws[2], ws[3]);
    let xs = x.shape();
    let (batch, h_n, w_n) = (xs[0], xs[2], xs[3]);
    let (ph, pw) = (kh_n / 2, kw_n / 2);
    let xd = x.data();
    let wd = layer.weight.data();
    let mut z = vec![0.0; batch * co_n * h_n * w_n];
    for b in 0..batch {
        for co in 0..co_n {
            let bias = layer.bias.as_ref().map_or(0.0, |t| t.data()[co]);
            for h in 0..h_n {
                for w in 0..w_n {
                    let mut acc = bias;
                    for ci in 0..ci_n {
                        for kh in 0..kh_n {
                            let ih = h + kh;
                            if ih < ph || ih - ph >= h_n {
                                continue;
                            }
                            let ih = ih - ph;
                            for kw in 0..kw_n {
                                let iw = w + kw;
                                if iw < pw || iw - pw >= w_n {
                                    continue;
                                }
                                let iw = iw - pw;
                                acc += wd[((co * ci_n + ci) * kh_n + kh) * kw_n + kw]
                                    * xd[((b * ci_n + ci) * h_n + ih) * w_n + iw];
                            }
                        }
                    }
                    z[((b * co_n + co) * h_n + h) * w_n + w] = acc;
                }
            }
        }
    }
    z
}

/// 2x2 max-pool over `[B, C, H, W]`; returns pooled values and argmax flat indices.
fn max_pool(x: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let (batch, c_n, h_n, w_n) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h_n / 2, w_n / 2);
    let mut out = Vec::with_capacity(batch * c_n * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for b in 0..batch {
        for c in 0..c_n {
            let base = (b * c_n + c) * h_n * w_n;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + (2 * i) * w_n + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w_n + 2 * j + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg, vec![batch, c_n, oh, ow])
}

fn activate(act: Activation, z: &[f64]) -> Vec<f64> {
    match act {
        Activation::Relu => z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        Activation::Identity => z.to_vec(),
    }
}

fn forward_impl(
    model: &ModelParams,
    batch: &Tensor,
    mut caches: Option<&mut Vec<LayerCache>>,
    mut taps: Option<&mut Vec<Tensor>>,
) -> Result<Tensor> {
    let n = check_batch(model, batch)?;
    let shapes = model.layer_output_shapes()?;
    let mut x = batch.clone();
    for (layer, out_shape) in model.layers.iter().zip(&shapes) {
        let (pre, pre_shape) = match layer.kind {
            LayerKind::FullyConnected => {
                let z = fc_forward(layer, x.data(), n);
                (z, vec![n, layer.out_size()])
            }
            LayerKind::Convolutional { .. } => {
                let z = conv_forward(layer, &x);
                let xs = x.shape();
                (z, vec![n, layer.out_size(), xs[2], xs[3]])
            }
        };
        let post = activate(layer.activation, &pre);
        let (next, argmax) = match layer.kind {
            LayerKind::Convolutional { pool: true } => {
                let (pooled, arg, _) = max_pool(&post, &pre_shape);
                (pooled, Some(arg))
            }
            _ => (post, None),
        };
        let mut next_shape = vec![n];
        next_shape.extend_from_slice(out_shape);
        let next = Tensor::new(next_shape, next)?;
        if let Some(t) = taps.as_deref_mut() {
            t.push(next.clone().reshape(&[n, next.len() / n.max(1)])?);
        }
        if let Some(c) = caches.as_deref_mut() {
            c.push(LayerCache {
                input: x,
                pre_act: Tensor::new(pre_shape.clone(), pre)?,
                pool_argmax: argmax,
                post_act_shape: pre_shape,
            });
        }
        x = next;
    }
    let classes = model.num_classes();
    x.reshape(&[n, classes])
}

/// Logits `[batch, num_classes]`. The model is not modified.
pub fn forward(model: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    forward_impl(model, batch, None, None)
}

/// Output of every layer (after activation and pooling), each flattened to
/// `[batch, features]`. The last entry is the logits.
pub fn layer_activations(model: &ModelParams, batch: &Tensor) -> Result<Vec<Tensor>> {
    let mut taps = Vec::with_capacity(model.layers.len());
    forward_impl(model, batch, None, Some(&mut taps))?;
    Ok(taps)
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape("labels", &[n], &[labels.len()]));
    }
    if let Some(pos) = labels.iter().position(|&y| y >= classes) {
        return Err(Error::Data {
            position: pos,
            msg: format!("label {} outside [0, {classes})", labels[pos]),
        });
    }
    Ok(())
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    check_labels(labels, n, k)?;
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits.data()[b * k..(b + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        for (j, g) in grad[b * k..(b + 1) * k].iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            *g = (p - if j == y { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((loss * inv_n, Tensor::new(vec![n, k], grad)?))
}

fn loss_only(model: &ModelParams, batch: &Tensor, labels: &[usize], prox: Option<Prox<'_>>) -> Result<f64> {
    let logits = forward(model, batch)?;
    let (mut loss, _) = softmax_cross_entropy(&logits, labels)?;
    if let Some(p) = prox {
        loss += prox_penalty(model, p)?;
    }
    Ok(loss)
}

fn prox_penalty(model: &ModelParams, prox: Prox<'_>) -> Result<f64> {
    let d = model.diff(prox.anchor)?;
    Ok(0.5 * prox.mu * d.iter().map(Tensor::sum_sq).sum::<f64>())
}

/// Loss and exact gradients, one tensor per parameter group (forward order).
pub fn loss_and_grad(
    model: &ModelParams,
    batch: &Tensor,
    labels: &[usize],
    prox: Option<Prox<'_>>,
) -> Result<(f64, Vec<Tensor>)> {
    if let Some(p) = prox {
        model.check_groups(&p.anchor.to_groups(), "prox anchor")?;
    }
    let n = check_batch(model, batch)?;
    check_labels(labels, n, model.num_classes())?;

    let mut caches = Vec::with_capacity(model.layers.len());
    let logits = forward_impl(model, batch, Some(&mut caches), None)?;
    let (mut loss, dlogits) = softmax_cross_entropy(&logits, labels)?;

    // grads per layer: (weight, bias)
    let mut per_layer: Vec<(Tensor, Option<Tensor>)> = Vec::with_capacity(model.layers.len());
    let mut upstream = dlogits.into_data();
    for (layer, cache) in model.layers.iter().zip(caches).rev() {
        // Undo pooling.
        let mut d_post = match &cache.pool_argmax {
            Some(arg) => {
                let mut d = vec![0.0; cache.post_act_shape.iter().product()];
                for (g, &idx) in upstream.iter().zip(arg) {
                    d[idx] += g;
                }
                d
            }
            None => upstream,
        };
        if layer.activation == Activation::Relu {
            for (d, &z) in d_post.iter_mut().zip(cache.pre_act.data()) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let dz = d_post;
        let (gw, gb, dx) = match layer.kind {
            LayerKind::FullyConnected => fc_backward(layer, &cache.input, &dz, n),
            LayerKind::Convolutional { .. } => conv_backward(layer, &cache.input, &dz),
        };
        per_layer.push((gw, gb));
        upstream = dx;
    }
    per_layer.reverse();

    let mut grads = Vec::with_capacity(per_layer.len() * 2);
    for (gw, gb) in per_layer {
        grads.push(gw);
        if let Some(gb) = gb {
            grads.push(gb);
        }
    }

    if let Some(p) = prox {
        if p.mu != 0.0 {
            loss += prox_penalty(model, p)?;
            for ((g, w), a) in grads.iter_mut().zip(model.groups()).zip(p.anchor.groups()) {
                let d = w.sub(a)?;
                g.axpy(p.mu, &d)?;
            }
        }
    }
    Ok((loss, grads))
}

fn fc_backward(layer: &LayerParams, input: &Tensor, dz: &[f64], n: usize) -> (Tensor, Option<Tensor>, Vec<f64>) {
    let (out, inp) = (layer.out_size(), layer.in_size());
    let x = input.data();
    let w = layer.weight.data();
    let mut gw = vec![0.0; out * inp];
    let mut dx = vec![0.0; n * inp];
    for b in 0..n {
        let xb = &x[b * inp..(b + 1) * inp];
        let dzb = &dz[b * out..(b + 1) * out];
        let dxb = &mut dx[b * inp..(b + 1) * inp];
        for (o, &g) in dzb.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &mut gw[o * inp..(o + 1) * inp];
            for (r, &xv) in row.iter_mut().zip(xb) {
                *r += g * xv;
            }
            for (d, &wv) in dxb.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                *d += g * wv;
            }
        }
    }
    let gb = layer.bias.as_ref().map(|_| {
        let mut s = vec![0.0; out];
        for b in 0..n {
            for (acc, &g) in s.iter_mut().zip(&dz[b * out..(b + 1) * out]) {
                *acc += g;
            }
        }
        Tensor::new(vec![out], s).expect("bias shape")
    });
    (
        Tensor::new(vec![out, inp], gw).expect("weight shape"),
        gb,
        dx,
    )
}

fn conv_backward(layer: &LayerParams, input: &Tensor, dz: &[f64]) -> (Tensor, Option<Tensor>, Vec<f64>) {
    let ws = layer.weight.shape();
    let (co_n, ci_n, kh_n, kw_n) = (ws[0], ws[1], ws[2], ws[3]);
    let xs = input.shape();
    let (batch, h_n, w_n) = (xs[0], xs[2], xs[3]);
    let (ph, pw) = (kh_n / 2, kw_n / 2);
    let xd = input.data();
    let wd = layer.weight.data();
    let mut gw = vec![0.0; wd.len()];
    let mut gb = vec![0.0; co_n];
    let mut dx = vec![0.0; xd.len()];
    for b in 0..batch {
        for co in 0..co_n {
            for h in 0..h_n {
                for w in 0..w_n {
                    let g = dz[((b * co_n + co) * h_n + h) * w_n + w];
                    if g == 0.0 {
                        continue;
                    }
                    gb[co] += g;
                    for ci in 0..ci_n {
                        for kh in 0..kh_n {
                            let ih = h + kh;
                            if ih < ph || ih - ph >= h_n {
                                continue;
                            }
                            let ih = ih - ph;
                            for kw in 0..kw_n {
                                let iw = w + kw;
                                if iw < pw || iw - pw >= w_n {
                                    continue;
                                }
                                let iw = iw - pw;
                                let wi = ((co * ci_n + ci) * kh_n + kh) * kw_n + kw;
                                let xi = ((b * ci_n + ci) * h_n + ih) * w_n + iw;
                                gw[wi] += g * xd[xi];
                                dx[xi] += g * wd[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(ws.to_vec(), gw).expect("weight shape"),
        layer.bias.as_ref().map(|_| Tensor::new(vec![co_n], gb).expect("bias shape")),
        dx,
    )
}

/// Central finite differences `(l(w + eps e_i) - l(w - eps e_i)) / 2 eps`
/// for every coordinate of every parameter group. Test oracle only.
pub fn finite_diff_grad(
    model: &ModelParams,
    batch: &Tensor,
    labels: &[usize],
    eps: f64,
    prox: Option<Prox<'_>>,
) -> Result<Vec<Tensor>> {
    let mut probe = model.clone();
    let mut grads = model.zeros_like();
    for (g_idx, grad) in grads.iter_mut().enumerate() {
        for i in 0..grad.len() {
            let orig = probe.groups()[g_idx].data()[i];
            probe.groups_mut()[g_idx].data_mut()[i] = orig + eps;
            let plus = loss_only(&probe, batch, labels, prox)?;
            probe.groups_mut()[g_idx].data_mut()[i] = orig - eps;
            let minus = loss_only(&probe, batch, labels, prox)?;
            probe.groups_mut()[g_idx].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(grads)
}
