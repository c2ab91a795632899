//! The two-stage harmonization network.
//!
//! Stage one is an encoder-decoder with skip connections producing the
//! coarsely adjusted image plus one feature map per encoder level. Stage two
//! runs a slim cascaded encoder-decoder once per submask, fusing three
//! feature sources per decoder level, and predicts each refined image from
//! all decoder levels jointly. Refined images are recombined by submask.

mod base;
mod cascade;
mod params;

pub use base::{forward_coarse, BaseForward};
pub use cascade::{forward_cascade, fusion_predict};
pub use params::{init_uniform, ModelParameters, ParamBinding};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::submask::{extract_submasks, SubmaskSet};
use crate::tensor::{Element, Mask, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;

/// Stage-one network shape.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BaseNetConfig {
    /// Side length of the square input; must be a power of two.
    pub input_resolution: usize,
    /// Output channels per encoder level; the length sets the depth.
    pub encoder_channels: Vec<usize>,
}

impl Default for BaseNetConfig {
    fn default() -> Self {
        BaseNetConfig {
            input_resolution: 256,
            encoder_channels: vec![32, 64, 128, 256, 512, 512, 512],
        }
    }
}

impl BaseNetConfig {
    pub fn depth(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() {
            return Err(Error::Config {
                key: "base.encoder_channels".into(),
                reason: "must not be empty".into(),
            });
        }
        if self.encoder_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config {
                key: "base.encoder_channels".into(),
                reason: "channel widths must be >= 1".into(),
            });
        }
        if !self.input_resolution.is_power_of_two() {
            return Err(Error::Config {
                key: "resolution".into(),
                reason: format!("{} is not a power of two", self.input_resolution),
            });
        }
        if self.input_resolution < (1usize << self.depth()) {
            return Err(Error::Config {
                key: "resolution".into(),
                reason: format!(
                    "{} cannot be downsampled {} times",
                    self.input_resolution,
                    self.depth()
                ),
            });
        }
        Ok(())
    }
}

/// Stage-two network shape. Deliberately slim relative to the base.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CascadeConfig {
    /// Output channels per cascade encoder level; length must match the base depth.
    pub encoder_channels: Vec<usize>,
    /// Width of the two 3x3 layers in the fusion prediction head.
    pub fusion_head_channels: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            encoder_channels: vec![16, 32, 64, 96, 96, 96, 96],
            fusion_head_channels: 32,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self, base: &BaseNetConfig) -> Result<()> {
        if self.encoder_channels.len() != base.depth() {
            return Err(Error::Config {
                key: "cascade.encoder_channels".into(),
                reason: format!(
                    "length {} must match base depth {}",
                    self.encoder_channels.len(),
                    base.depth()
                ),
            });
        }
        if self.encoder_channels.iter().any(|&c| c == 0) || self.fusion_head_channels == 0 {
            return Err(Error::Config {
                key: "cascade.encoder_channels".into(),
                reason: "channel widths must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// Full model shape: base plus cascade at one resolution.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub base: BaseNetConfig,
    pub cascade: CascadeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base: BaseNetConfig::default(),
            cascade: CascadeConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn resolution(&self) -> usize {
        self.base.input_resolution
    }

    pub fn depth(&self) -> usize {
        self.base.depth()
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.cascade.validate(&self.base)?;
        let base_n = base::layout(&self.base).scalar_count();
        let casc_n = cascade::layout(&self.base, &self.cascade).scalar_count();
        if casc_n >= base_n {
            return Err(Error::Config {
                key: "cascade.encoder_channels".into(),
                reason: format!(
                    "cascade+fusion ({casc_n} scalars) must stay smaller than the base ({base_n})"
                ),
            });
        }
        Ok(())
    }
}

/// Build the full parameter set for `config`, deterministically from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelParameters> {
    config.validate()?;
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = base::build(&config.base, &mut rng)?;
    params.merge(cascade::build(&config.base, &config.cascade, &mut rng)?)?;
    Ok(params)
}

/// Build only the stage-one parameters (deterministic from `seed`).
pub fn build_base(config: &BaseNetConfig, seed: u64) -> Result<ModelParameters> {
    config.validate()?;
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    base::build(config, &mut rng)
}

/// Recombine refined images over their submasks; background pixels come
/// from the composite untouched.
pub fn combine_outputs<E: Element>(
    graph: &mut Graph<E>,
    refined: &[NodeId],
    submasks: &SubmaskSet,
    composite: NodeId,
) -> Result<NodeId> {
    if refined.len() != submasks.k() {
        return Err(Error::invalid(format!(
            "combine_outputs: {} refined images for {} submasks",
            refined.len(),
            submasks.k()
        )));
    }
    let background = submasks.union().complement();
    let bg = graph.constant(background.to_tensor_channels::<E>(3));
    let mut acc = graph.mul(composite, bg)?;
    for (&r, sm) in refined.iter().zip(&submasks.submasks) {
        let m = graph.constant(sm.to_tensor_channels::<E>(3));
        let term = graph.mul(r, m)?;
        acc = graph.add(acc, term)?;
    }
    Ok(acc)
}

/// All interesting nodes of one end-to-end pass.
pub struct PipelineNodes {
    pub coarse: NodeId,
    pub encoder_feats: Vec<NodeId>,
    pub refined: Vec<NodeId>,
    pub final_image: NodeId,
}

/// Wire the full two-stage forward pass for one sample in an existing graph.
/// The cascade parameters are shared across the K submask passes.
pub fn forward_pipeline<E: Element>(
    graph: &mut Graph<E>,
    binding: &ParamBinding,
    config: &ModelConfig,
    composite: NodeId,
    mask: NodeId,
    submasks: &SubmaskSet,
) -> Result<PipelineNodes> {
    let BaseForward {
        coarse,
        encoder_feats,
    } = forward_coarse(graph, binding, &config.base, composite, mask)?;
    let mut refined = Vec::with_capacity(submasks.k());
    for sm in &submasks.submasks {
        let sm_node = graph.constant(sm.to_tensor::<E>());
        let dcs = forward_cascade(
            graph,
            binding,
            &config.base,
            &config.cascade,
            coarse,
            sm_node,
            &encoder_feats,
        )?;
        let image = fusion_predict(
            graph,
            binding,
            &config.cascade,
            &dcs,
            config.resolution(),
        )?;
        refined.push(image);
    }
    let final_image = combine_outputs(graph, &refined, submasks, composite)?;
    Ok(PipelineNodes {
        coarse,
        encoder_feats,
        refined,
        final_image,
    })
}

/// End-to-end inference result.
pub struct HarmonizeResult {
    pub final_image: Tensor<f32>,
    pub coarse: Tensor<f32>,
    pub submasks: SubmaskSet,
}

/// Coarse pass, submask extraction, K refinement passes, recombination.
pub fn harmonize(
    composite: &Tensor<f32>,
    mask: &Mask,
    params: &ModelParameters,
    config: &ModelConfig,
    dc: f64,
) -> Result<HarmonizeResult> {
    let submasks = extract_submasks(composite, mask, dc)?;
    let mut graph = Graph::<f32>::new();
    let binding = ParamBinding::bind(&mut graph, params, |_| false);
    let comp = graph.constant(composite.clone());
    let m = graph.constant(mask.to_tensor());
    let nodes = forward_pipeline(&mut graph, &binding, config, comp, m, &submasks)?;
    Ok(HarmonizeResult {
        final_image: graph.value(nodes.final_image).clone(),
        coarse: graph.value(nodes.coarse).clone(),
        submasks,
    })
}
