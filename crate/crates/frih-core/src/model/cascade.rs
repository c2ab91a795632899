//! Stage two: the lightweight cascaded module and fusion prediction head.

use super::params::{init_uniform, ModelParameters, ParamBinding};
use super::{BaseNetConfig, CascadeConfig, KERNEL, PADDING, STRIDE};
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, NodeId};
use crate::tensor::{Element, Tensor};
use rand_chacha::ChaCha8Rng;

pub(super) struct CascadeLayout {
    pub enc_in: Vec<usize>,
    pub enc_out: Vec<usize>,
    /// Transfer width per decoder level (both 3x3 convs emit this).
    pub trans_in: Vec<usize>,
    pub trans_out: Vec<usize>,
    pub fuse_in: Vec<usize>,
    pub fuse_out: Vec<usize>,
    /// Decoder output channels per level.
    pub dc_out: Vec<usize>,
    pub head_in: usize,
    pub head_mid: usize,
}

impl CascadeLayout {
    pub fn scalar_count(&self) -> usize {
        let depth = self.enc_in.len();
        let mut n = 0;
        for i in 0..depth {
            n += self.enc_out[i] * self.enc_in[i] * KERNEL * KERNEL + self.enc_out[i];
            n += self.trans_out[i] * self.trans_in[i] * 9 + self.trans_out[i];
            n += self.trans_out[i] * self.trans_out[i] * 9 + self.trans_out[i];
            n += self.fuse_out[i] * self.fuse_in[i] + self.fuse_out[i];
            n += self.fuse_out[i] * self.dc_out[i] * KERNEL * KERNEL + self.dc_out[i];
        }
        n += self.head_mid * self.head_in * 9 + self.head_mid;
        n += self.head_mid * self.head_mid * 9 + self.head_mid;
        n += 3 * self.head_mid + 3;
        n
    }
}

pub(super) fn layout(base: &BaseNetConfig, cfg: &CascadeConfig) -> CascadeLayout {
    let e = &base.encoder_channels;
    let c = &cfg.encoder_channels;
    let depth = c.len();

    let mut enc_in = vec![4]; // coarse image + one submask
    enc_in.extend_from_slice(&c[..depth - 1]);
    let enc_out = c.clone();

    // decoder level i mirrors encoder level m = depth + 1 - i
    let mirror = |i: usize| depth - i; // 0-indexed mirrored level for 1-based i
    let trans_in: Vec<usize> = (1..=depth).map(|i| e[mirror(i)]).collect();
    let trans_out: Vec<usize> = (1..=depth).map(|i| c[mirror(i)]).collect();

    let dc_out: Vec<usize> = (1..=depth)
        .map(|i| if i < depth { c[depth - 1 - i] } else { c[0] })
        .collect();
    let fuse_in: Vec<usize> = (1..=depth)
        .map(|i| {
            let prev = if i == 1 { c[depth - 1] } else { dc_out[i - 2] };
            prev + trans_out[i - 1] + c[mirror(i)]
        })
        .collect();
    let fuse_out = trans_out.clone();

    CascadeLayout {
        enc_in,
        enc_out,
        trans_in,
        trans_out,
        fuse_in,
        fuse_out,
        head_in: dc_out.iter().sum(),
        head_mid: cfg.fusion_head_channels,
        dc_out,
    }
}

pub(super) fn build(
    base: &BaseNetConfig,
    cfg: &CascadeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ModelParameters> {
    let l = layout(base, cfg);
    let depth = cfg.encoder_channels.len();
    let mut params = ModelParameters::new();
    for i in 0..depth {
        let fan_in = l.enc_in[i] * KERNEL * KERNEL;
        params.insert(
            format!("cascade.enc.{}.w", i + 1),
            init_uniform(rng, vec![l.enc_out[i], l.enc_in[i], KERNEL, KERNEL], fan_in),
        )?;
        params.insert(
            format!("cascade.enc.{}.b", i + 1),
            Tensor::zeros(vec![l.enc_out[i]]),
        )?;
    }
    for i in 0..depth {
        params.insert(
            format!("cascade.trans.{}.w1", i + 1),
            init_uniform(
                rng,
                vec![l.trans_out[i], l.trans_in[i], 3, 3],
                l.trans_in[i] * 9,
            ),
        )?;
        params.insert(
            format!("cascade.trans.{}.b1", i + 1),
            Tensor::zeros(vec![l.trans_out[i]]),
        )?;
        params.insert(
            format!("cascade.trans.{}.w2", i + 1),
            init_uniform(
                rng,
                vec![l.trans_out[i], l.trans_out[i], 3, 3],
                l.trans_out[i] * 9,
            ),
        )?;
        params.insert(
            format!("cascade.trans.{}.b2", i + 1),
            Tensor::zeros(vec![l.trans_out[i]]),
        )?;
        params.insert(
            format!("cascade.fuse.{}.w", i + 1),
            init_uniform(rng, vec![l.fuse_out[i], l.fuse_in[i], 1, 1], l.fuse_in[i]),
        )?;
        params.insert(
            format!("cascade.fuse.{}.b", i + 1),
            Tensor::zeros(vec![l.fuse_out[i]]),
        )?;
        params.insert(
            format!("cascade.up.{}.w", i + 1),
            init_uniform(
                rng,
                vec![l.fuse_out[i], l.dc_out[i], KERNEL, KERNEL],
                l.fuse_out[i] * KERNEL * KERNEL,
            ),
        )?;
        params.insert(
            format!("cascade.up.{}.b", i + 1),
            Tensor::zeros(vec![l.dc_out[i]]),
        )?;
    }
    params.insert(
        "fusion.conv1.w",
        init_uniform(rng, vec![l.head_mid, l.head_in, 3, 3], l.head_in * 9),
    )?;
    params.insert("fusion.conv1.b", Tensor::zeros(vec![l.head_mid]))?;
    params.insert(
        "fusion.conv2.w",
        init_uniform(rng, vec![l.head_mid, l.head_mid, 3, 3], l.head_mid * 9),
    )?;
    params.insert("fusion.conv2.b", Tensor::zeros(vec![l.head_mid]))?;
    params.insert(
        "fusion.conv3.w",
        init_uniform(rng, vec![3, l.head_mid, 1, 1], l.head_mid),
    )?;
    params.insert("fusion.conv3.b", Tensor::zeros(vec![3]))?;
    Ok(params)
}

/// One cascade pass: returns the decoder outputs DC_1..DC_depth, coarsest
/// first. Level i fuses the previous decoder output, the transferred
/// stage-one encoder feature, and the mirrored cascade encoder feature.
pub fn forward_cascade<E: Element>(
    graph: &mut Graph<E>,
    binding: &ParamBinding,
    base: &BaseNetConfig,
    cfg: &CascadeConfig,
    coarse: NodeId,
    submask: NodeId,
    base_encoder_feats: &[NodeId],
) -> Result<Vec<NodeId>> {
    let depth = cfg.encoder_channels.len();
    if base_encoder_feats.len() != depth {
        return Err(Error::invalid(format!(
            "forward_cascade: got {} encoder features for depth {}",
            base_encoder_feats.len(),
            depth
        )));
    }
    let _ = base;

    let mut x = graph.concat(&[coarse, submask])?;
    let mut cascade_feats = Vec::with_capacity(depth);
    for i in 1..=depth {
        let w = binding.id(&format!("cascade.enc.{i}.w"));
        let b = binding.id(&format!("cascade.enc.{i}.b"));
        x = graph.conv2d(x, w, b, STRIDE, PADDING)?;
        x = graph.activation(x, Activation::LeakyRect(0.2));
        cascade_feats.push(x);
    }

    let mut dcs = Vec::with_capacity(depth);
    let mut prev = cascade_feats[depth - 1];
    for i in 1..=depth {
        let mirror = depth - i; // 0-indexed encoder level feeding this decoder level
        let w1 = binding.id(&format!("cascade.trans.{i}.w1"));
        let b1 = binding.id(&format!("cascade.trans.{i}.b1"));
        let w2 = binding.id(&format!("cascade.trans.{i}.w2"));
        let b2 = binding.id(&format!("cascade.trans.{i}.b2"));
        let mut et = graph.conv2d(base_encoder_feats[mirror], w1, b1, 1, 1)?;
        et = graph.activation(et, Activation::Rect);
        et = graph.conv2d(et, w2, b2, 1, 1)?;
        et = graph.activation(et, Activation::Rect);

        let fused_in = graph.concat(&[prev, et, cascade_feats[mirror]])?;
        let wf = binding.id(&format!("cascade.fuse.{i}.w"));
        let bf = binding.id(&format!("cascade.fuse.{i}.b"));
        let mut f = graph.conv2d(fused_in, wf, bf, 1, 0)?;
        f = graph.activation(f, Activation::Rect);

        let wu = binding.id(&format!("cascade.up.{i}.w"));
        let bu = binding.id(&format!("cascade.up.{i}.b"));
        let mut dc = graph.conv_transpose2d(f, wu, bu, STRIDE, PADDING)?;
        dc = graph.activation(dc, Activation::Rect);
        dcs.push(dc);
        prev = dc;
    }
    Ok(dcs)
}

/// Predict the refined image from every decoder level: upsample all to full
/// resolution, concatenate in level order, two 3x3 convs, one 1x1 conv,
/// bounded into (0, 1).
pub fn fusion_predict<E: Element>(
    graph: &mut Graph<E>,
    binding: &ParamBinding,
    cfg: &CascadeConfig,
    decoder_feats: &[NodeId],
    resolution: usize,
) -> Result<NodeId> {
    let depth = cfg.encoder_channels.len();
    if decoder_feats.len() != depth {
        return Err(Error::invalid(format!(
            "fusion_predict: expected {depth} decoder features, got {}",
            decoder_feats.len()
        )));
    }
    let mut ups = Vec::with_capacity(depth);
    for &dc in decoder_feats {
        ups.push(graph.upsample(dc, resolution, resolution)?);
    }
    let cat = graph.concat(&ups)?;
    let w1 = binding.id("fusion.conv1.w");
    let b1 = binding.id("fusion.conv1.b");
    let mut x = graph.conv2d(cat, w1, b1, 1, 1)?;
    x = graph.activation(x, Activation::Rect);
    let w2 = binding.id("fusion.conv2.w");
    let b2 = binding.id("fusion.conv2.b");
    x = graph.conv2d(x, w2, b2, 1, 1)?;
    x = graph.activation(x, Activation::Rect);
    let w3 = binding.id("fusion.conv3.w");
    let b3 = binding.id("fusion.conv3.b");
    x = graph.conv2d(x, w3, b3, 1, 0)?;
    Ok(graph.activation(x, Activation::Sigmoid))
}
