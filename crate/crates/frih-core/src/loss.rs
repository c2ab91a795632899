//! Area-normalized training losses.
//!
//! Both losses divide by the (floored) foreground area so small foregrounds
//! are not drowned out: the coarse loss sums squared error over the whole
//! image and normalizes by the foreground area, the refine loss sums masked
//! squared error per submask and normalizes by each submask's area.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::submask::SubmaskSet;
use crate::tensor::{Element, Mask};

/// Floor for the normalizing area, in pixels.
pub const A_MIN_DEFAULT: usize = 100;

/// Scalar loss values for one sample.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LossBreakdown {
    pub l_coarse: f64,
    pub l_refine: f64,
    pub l_total: f64,
    pub per_submask: Vec<f64>,
}

fn check_pair<E: Element>(graph: &Graph<E>, pred: NodeId, target: NodeId) -> Result<(usize, usize)> {
    let (pc, ph, pw) = graph.value(pred).dims3()?;
    let (tc, th, tw) = graph.value(target).dims3()?;
    if (pc, ph, pw) != (tc, th, tw) || pc != 3 {
        return Err(Error::invalid(format!(
            "loss: prediction {pc}x{ph}x{pw} and target {tc}x{th}x{tw} must both be 3xHxW"
        )));
    }
    Ok((ph, pw))
}

/// Whole-image squared error normalized by the floored foreground area.
pub fn loss_coarse<E: Element>(
    graph: &mut Graph<E>,
    pred: NodeId,
    target: NodeId,
    mask: &Mask,
    a_min: usize,
) -> Result<NodeId> {
    let (h, w) = check_pair(graph, pred, target)?;
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::invalid(format!(
            "loss_coarse: mask {}x{} does not match image {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let diff = graph.sub(pred, target)?;
    let sq = graph.mul(diff, diff)?;
    let total = graph.sum(sq);
    let denom = mask.area().max(a_min) as f64;
    Ok(graph.scale(total, 1.0 / denom))
}

/// Per-submask masked squared error, each term normalized by the floored
/// submask area, summed over the K submasks.
pub fn loss_refine<E: Element>(
    graph: &mut Graph<E>,
    pred: NodeId,
    target: NodeId,
    submasks: &SubmaskSet,
    a_min: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let (h, w) = check_pair(graph, pred, target)?;
    if submasks.submasks.is_empty() {
        return Err(Error::invalid("loss_refine: no submasks"));
    }
    // Pairwise overlap is a contract violation, not a numeric edge case.
    let mut coverage = vec![0u32; h * w];
    for sm in &submasks.submasks {
        if (sm.height(), sm.width()) != (h, w) {
            return Err(Error::invalid("loss_refine: submask dims mismatch"));
        }
        for (c, &v) in coverage.iter_mut().zip(sm.data()) {
            *c += v as u32;
        }
    }
    if coverage.iter().any(|&c| c > 1) {
        return Err(Error::invalid("loss_refine: submasks overlap"));
    }

    let diff = graph.sub(pred, target)?;
    let sq = graph.mul(diff, diff)?;
    let mut terms = Vec::with_capacity(submasks.k());
    let mut acc: Option<NodeId> = None;
    for sm in &submasks.submasks {
        let m = graph.constant(sm.to_tensor_channels::<E>(3));
        let masked = graph.mul(sq, m)?;
        let s = graph.sum(masked);
        let denom = sm.area().max(a_min) as f64;
        let term = graph.scale(s, 1.0 / denom);
        terms.push(term);
        acc = Some(match acc {
            None => term,
            Some(a) => graph.add(a, term)?,
        });
    }
    Ok((acc.expect("at least one submask"), terms))
}

/// Build `l_total = l_coarse + l_refine` and collect the scalar values.
pub fn loss_total<E: Element>(
    graph: &mut Graph<E>,
    coarse_pred: NodeId,
    final_pred: NodeId,
    target: NodeId,
    mask: &Mask,
    submasks: &SubmaskSet,
    a_min: usize,
) -> Result<(NodeId, LossBreakdown)> {
    let lc = loss_coarse(graph, coarse_pred, target, mask, a_min)?;
    let (lr, terms) = loss_refine(graph, final_pred, target, submasks, a_min)?;
    let lt = graph.add(lc, lr)?;
    let breakdown = LossBreakdown {
        l_coarse: graph.value(lc).scalar_value()?.to_f64(),
        l_refine: graph.value(lr).scalar_value()?.to_f64(),
        l_total: graph.value(lt).scalar_value()?.to_f64(),
        per_submask: terms
            .iter()
            .map(|&t| graph.value(t).scalar_value().map(|v| v.to_f64()))
            .collect::<Result<_>>()?,
    };
    Ok((lt, breakdown))
}
