//! Stage one: the coarse harmonization encoder-decoder.

use super::params::{init_uniform, ModelParameters, ParamBinding};
use super::{BaseNetConfig, KERNEL, PADDING, STRIDE};
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, NodeId};
use crate::tensor::Element;
use rand_chacha::ChaCha8Rng;

/// Per-layer channel widths derived from the config.
pub(super) struct BaseLayout {
    pub enc_in: Vec<usize>,
    pub enc_out: Vec<usize>,
    pub dec_in: Vec<usize>,
    pub dec_out: Vec<usize>,
}

impl BaseLayout {
    pub fn scalar_count(&self) -> usize {
        let conv = |i: &usize, o: &usize| o * i * KERNEL * KERNEL + o;
        self.enc_in
            .iter()
            .zip(&self.enc_out)
            .map(|(i, o)| conv(i, o))
            .chain(self.dec_in.iter().zip(&self.dec_out).map(|(i, o)| conv(i, o)))
            .sum()
    }
}

pub(super) fn layout(cfg: &BaseNetConfig) -> BaseLayout {
    let e = &cfg.encoder_channels;
    let depth = e.len();
    // encoder input is the 4-channel concat of composite and mask
    let mut enc_in = vec![4];
    enc_in.extend_from_slice(&e[..depth - 1]);
    let enc_out = e.clone();

    // decoder level i consumes concat(previous output, mirrored encoder
    // feature); the bottleneck doubles as the level-1 "previous output"
    let dec_out: Vec<usize> = (1..=depth)
        .map(|i| if i < depth { e[depth - 1 - i] } else { 3 })
        .collect();
    let dec_in: Vec<usize> = (1..=depth)
        .map(|i| {
            let prev = if i == 1 { e[depth - 1] } else { dec_out[i - 2] };
            prev + e[depth - i]
        })
        .collect();
    BaseLayout {
        enc_in,
        enc_out,
        dec_in,
        dec_out,
    }
}

pub(super) fn build(cfg: &BaseNetConfig, rng: &mut ChaCha8Rng) -> Result<ModelParameters> {
    let l = layout(cfg);
    let mut params = ModelParameters::new();
    for i in 0..cfg.depth() {
        let fan_in = l.enc_in[i] * KERNEL * KERNEL;
        params.insert(
            format!("base.enc.{}.w", i + 1),
            init_uniform(rng, vec![l.enc_out[i], l.enc_in[i], KERNEL, KERNEL], fan_in),
        )?;
        params.insert(
            format!("base.enc.{}.b", i + 1),
            crate::tensor::Tensor::zeros(vec![l.enc_out[i]]),
        )?;
    }
    for i in 0..cfg.depth() {
        let fan_in = l.dec_in[i] * KERNEL * KERNEL;
        params.insert(
            format!("base.dec.{}.w", i + 1),
            init_uniform(rng, vec![l.dec_in[i], l.dec_out[i], KERNEL, KERNEL], fan_in),
        )?;
        params.insert(
            format!("base.dec.{}.b", i + 1),
            crate::tensor::Tensor::zeros(vec![l.dec_out[i]]),
        )?;
    }
    Ok(params)
}

/// Coarse image plus the per-level encoder features for the cascade.
pub struct BaseForward {
    pub coarse: NodeId,
    pub encoder_feats: Vec<NodeId>,
}

pub fn forward_coarse<E: Element>(
    graph: &mut Graph<E>,
    binding: &ParamBinding,
    cfg: &BaseNetConfig,
    composite: NodeId,
    mask: NodeId,
) -> Result<BaseForward> {
    let r = cfg.input_resolution;
    let (c, h, w) = graph.value(composite).dims3()?;
    if c != 3 || h != r || w != r {
        return Err(Error::invalid(format!(
            "forward_coarse: composite must be 3x{r}x{r}, got {c}x{h}x{w}"
        )));
    }
    let (mc, mh, mw) = graph.value(mask).dims3()?;
    if mc != 1 || mh != r || mw != r {
        return Err(Error::invalid(format!(
            "forward_coarse: mask must be 1x{r}x{r}, got {mc}x{mh}x{mw}"
        )));
    }
    let depth = cfg.depth();

    let mut x = graph.concat(&[composite, mask])?;
    let mut encoder_feats = Vec::with_capacity(depth);
    for i in 1..=depth {
        let w = binding.id(&format!("base.enc.{i}.w"));
        let b = binding.id(&format!("base.enc.{i}.b"));
        x = graph.conv2d(x, w, b, STRIDE, PADDING)?;
        x = graph.activation(x, Activation::LeakyRect(0.2));
        encoder_feats.push(x);
    }

    let mut d = encoder_feats[depth - 1];
    for i in 1..=depth {
        let skip = encoder_feats[depth - i];
        let inp = graph.concat(&[d, skip])?;
        let w = binding.id(&format!("base.dec.{i}.w"));
        let b = binding.id(&format!("base.dec.{i}.b"));
        d = graph.conv_transpose2d(inp, w, b, STRIDE, PADDING)?;
        d = if i < depth {
            graph.activation(d, Activation::Rect)
        } else {
            graph.activation(d, Activation::Sigmoid)
        };
    }
    Ok(BaseForward {
        coarse: d,
        encoder_feats,
    })
}
