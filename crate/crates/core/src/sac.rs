//! Structured attention composition.
//!
//! Pipeline per video: embed both modalities, predict frame attention with a
//! temporal conv, pool the most salient frames to predict modality attention,
//! compose the two into a rank-1 `2 × T` map, and modulate the raw features.
//! During training the normalized attentions are justified against a learned
//! structure matrix by entropic optimal transport, with smoothness and
//! F-norm regularizers on that matrix.

use crate::error::{shape_err, Result};
use crate::graph::{Graph, NodeId};
use crate::ot::{ot_loss_node, SinkhornConfig};
use crate::params::{ParamSet, ParamSpec};
use crate::tensor::Tensor;

/// Appearance and motion features of one video, each `D × T`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub appearance: Tensor,
    pub motion: Tensor,
    pub frame_rate: f64,
}

impl FeatureSequence {
    pub fn new(appearance: Tensor, motion: Tensor, frame_rate: f64) -> Result<Self> {
        if appearance.rank() != 2 || appearance.shape() != motion.shape() {
            return shape_err(format!(
                "modalities must share a D x T shape: {:?} vs {:?}",
                appearance.shape(),
                motion.shape()
            ));
        }
        if appearance.cols() < 2 {
            return shape_err("a feature sequence needs at least two frames");
        }
        if !appearance.is_finite() || !motion.is_finite() {
            return shape_err("features must be finite");
        }
        Ok(Self {
            appearance,
            motion,
            frame_rate,
        })
    }

    pub fn dim(&self) -> usize {
        self.appearance.rows()
    }

    pub fn frames(&self) -> usize {
        self.appearance.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SacConfig {
    /// Channels per modality after embedding (D′).
    pub embed_width: usize,
    /// Fraction of frames kept by action-aware pooling; 1 is global average pooling.
    pub pool_ratio: f64,
    /// Fraction of neighbour differences averaged by the smoothness term.
    pub eta: f64,
    pub lambda_smooth: f64,
    pub lambda_fnorm: f64,
    pub sinkhorn: SinkhornConfig,
    /// Rank neighbour differences by magnitude instead of signed value.
    pub smooth_abs: bool,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            embed_width: 64,
            pool_ratio: 0.125,
            eta: 0.8,
            lambda_smooth: 0.10,
            lambda_fnorm: 0.01,
            sinkhorn: SinkhornConfig::default(),
            smooth_abs: false,
        }
    }
}

pub const EMBED_KERNEL: usize = 3;
pub const HEAD_KERNEL: usize = 3;

/// Parameter layout of the attention module for `D`-dimensional inputs.
pub fn param_specs(dim: usize, cfg: &SacConfig) -> Vec<ParamSpec> {
    let w = cfg.embed_width;
    let mut specs = Vec::new();
    for m in ["app", "mot"] {
        specs.extend(ParamSpec::conv(&format!("sac.embed.{m}.0"), dim, w, EMBED_KERNEL));
        specs.extend(ParamSpec::conv(&format!("sac.embed.{m}.1"), w, w, EMBED_KERNEL));
    }
    specs.extend(ParamSpec::conv("sac.frame", 2 * w, 1, HEAD_KERNEL));
    specs.extend(ParamSpec::conv("sac.modality", 2 * w, 2, 1));
    specs.extend(ParamSpec::conv("sac.structure", 2 * w, 2, HEAD_KERNEL));
    specs
}

fn conv(g: &mut Graph, params: &ParamSet, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = params.node(g, &format!("{prefix}.weight"))?;
    let b = params.node(g, &format!("{prefix}.bias"))?;
    g.conv1d(x, w, b)
}

/// `F^v = [Θ^a(F^a); Θ^m(F^m)]`, each Θ being conv → ReLU → conv.
pub fn embed(g: &mut Graph, params: &ParamSet, appearance: NodeId, motion: NodeId) -> Result<NodeId> {
    let mut branches = [appearance, motion];
    for (branch, m) in branches.iter_mut().zip(["app", "mot"]) {
        let h = conv(g, params, &format!("sac.embed.{m}.0"), *branch)?;
        let h = g.relu(h);
        *branch = conv(g, params, &format!("sac.embed.{m}.1"), h)?;
    }
    g.concat_rows(branches[0], branches[1])
}

/// `1 × T` frame attention in `(0, 1)`.
pub fn frame_attention(g: &mut Graph, params: &ParamSet, video: NodeId) -> Result<NodeId> {
    let logits = conv(g, params, "sac.frame", video)?;
    Ok(g.sigmoid(logits))
}

/// Number of frames kept for a ratio: `floor(T·k)`, at least 1.
pub fn pooled_count(frames: usize, ratio: f64) -> usize {
    ((frames as f64 * ratio).floor() as usize).clamp(1, frames)
}

/// Frame indices ordered by descending column norm, ties to the lower index.
pub fn rank_by_norm(norms: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..norms.len()).collect();
    idx.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    idx
}

/// Mean of the `floor(T·k)` columns with the largest Euclidean norms, as a column vector.
pub fn action_aware_pool(g: &mut Graph, video: NodeId, ratio: f64) -> Result<NodeId> {
    let frames = g.shape(video)[1];
    let norms = g.col_norm(video)?;
    let order = rank_by_norm(g.value(norms).data());
    let keep = &order[..pooled_count(frames, ratio)];
    let picked = g.gather(video, 1, keep)?;
    g.mean_axis(picked, 1)
}

/// `2 × 1` softmax modality attention from a pooled `2D′ × 1` descriptor.
pub fn modality_attention(g: &mut Graph, params: &ParamSet, pooled: NodeId) -> Result<NodeId> {
    let logits = conv(g, params, "sac.modality", pooled)?;
    g.softmax(logits, 0)
}

/// `A = a^m × a^f`.
pub fn compose(g: &mut Graph, modality: NodeId, frame: NodeId) -> Result<NodeId> {
    g.outer(modality, frame)
}

/// Rescale both attentions to total mass `T`: `T·a^m` and `T·a^f / (Σ a^f + γ)`.
pub fn normalize_mass(
    g: &mut Graph,
    modality: NodeId,
    frame: NodeId,
    gamma: f64,
) -> Result<(NodeId, NodeId)> {
    let frames = g.value(frame).len();
    let t = frames as f64;
    let modality_norm = g.scale(modality, t);
    let total = g.sum(frame);
    let total = g.offset(total, gamma);
    let inv = g.recip(total);
    let inv = g.broadcast(inv, 1, frames)?;
    let frame_row = g.reshape(frame, &[1, frames])?;
    let share = g.mul(frame_row, inv)?;
    let frame_norm = g.scale(share, t);
    Ok((modality_norm, frame_norm))
}

/// `2 × T` structure matrix with entries in `(0, 1)`.
pub fn structure_head(g: &mut Graph, params: &ParamSet, video: NodeId) -> Result<NodeId> {
    let logits = conv(g, params, "sac.structure", video)?;
    Ok(g.sigmoid(logits))
}

/// Count of neighbour differences averaged: `floor(T·η)` clamped to `[1, T−1]`.
pub fn smooth_count(frames: usize, eta: f64) -> usize {
    ((frames as f64 * eta).floor() as usize).clamp(1, frames - 1)
}

/// `−ln(max(1 − q, γ))` where `q` averages the smallest neighbour differences
/// of the column-wise max of `S`.
pub fn smoothness_loss(
    g: &mut Graph,
    structure: NodeId,
    eta: f64,
    gamma: f64,
    abs_mode: bool,
) -> Result<NodeId> {
    let frames = g.shape(structure)[1];
    if frames < 2 {
        return shape_err("smoothness needs at least two frames");
    }
    let peak = g.max_rows(structure)?;
    let later: Vec<usize> = (1..frames).collect();
    let earlier: Vec<usize> = (0..frames - 1).collect();
    let next = g.gather(peak, 1, &later)?;
    let prev = g.gather(peak, 1, &earlier)?;
    let mut diff = g.sub(next, prev)?;
    if abs_mode {
        let pos = g.relu(diff);
        let flipped = g.neg(diff);
        let neg = g.relu(flipped);
        diff = g.add(pos, neg)?;
    }
    let d = g.value(diff).data();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    order.truncate(smooth_count(frames, eta));
    let smallest = g.gather(diff, 1, &order)?;
    let q = g.mean(smallest);
    let one_minus = g.neg(q);
    let one_minus = g.offset(one_minus, 1.0);
    let guarded = g.clamp_min(one_minus, gamma);
    let log = g.log(guarded);
    Ok(g.neg(log))
}

/// `−‖S‖_F / (2T)`.
pub fn fnorm_loss(g: &mut Graph, structure: NodeId) -> Result<NodeId> {
    let frames = g.shape(structure)[1];
    let sq = g.mul(structure, structure)?;
    let total = g.sum(sq);
    let norm = g.sqrt(total);
    Ok(g.scale(norm, -1.0 / (2.0 * frames as f64)))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct LossBundle {
    pub ot: f64,
    pub smooth: f64,
    pub fnorm: f64,
    pub total: f64,
    pub lambda_smooth: f64,
    pub lambda_fnorm: f64,
}

/// `L = L_OT + λ_s·L_s + λ_F·L_F`.
pub fn sac_loss(ot: f64, smooth: f64, fnorm: f64, lambda_smooth: f64, lambda_fnorm: f64) -> LossBundle {
    LossBundle {
        ot,
        smooth,
        fnorm,
        total: ot + lambda_smooth * smooth + lambda_fnorm * fnorm,
        lambda_smooth,
        lambda_fnorm,
    }
}

/// Graph form of [`sac_loss`]; evaluates in the same order so the totals agree bit for bit.
pub fn sac_loss_node(
    g: &mut Graph,
    ot: NodeId,
    smooth: NodeId,
    fnorm: NodeId,
    lambda_smooth: f64,
    lambda_fnorm: f64,
) -> Result<NodeId> {
    let s = g.scale(smooth, lambda_smooth);
    let f = g.scale(fnorm, lambda_fnorm);
    let partial = g.add(ot, s)?;
    g.add(partial, f)
}

/// Scale each modality's frames by its row of `A`: `H^a = F^a·A[0,:]`, `H^m = F^m·A[1,:]`.
pub fn modulate(
    g: &mut Graph,
    appearance: NodeId,
    motion: NodeId,
    attention: NodeId,
) -> Result<(NodeId, NodeId)> {
    let (d, t) = (g.shape(appearance)[0], g.shape(appearance)[1]);
    if g.shape(attention) != [2, t] || g.shape(motion) != g.shape(appearance) {
        return shape_err(format!(
            "modulate: features {:?}/{:?} with attention {:?}",
            g.shape(appearance),
            g.shape(motion),
            g.shape(attention)
        ));
    }
    let mut out = [appearance, motion];
    for (row, feat) in out.iter_mut().enumerate() {
        let a = g.gather(attention, 0, &[row])?;
        let a = g.broadcast(a, d, t)?;
        *feat = g.mul(*feat, a)?;
    }
    Ok((out[0], out[1]))
}

/// Graph handles for every intermediate of one SAC forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SacNodes {
    pub video: NodeId,
    pub frame: NodeId,
    pub modality: NodeId,
    pub composed: NodeId,
    pub frame_norm: NodeId,
    pub modality_norm: NodeId,
    pub structure: NodeId,
    pub modulated_appearance: NodeId,
    pub modulated_motion: NodeId,
    pub ot: NodeId,
    pub smooth: NodeId,
    pub fnorm: NodeId,
    pub total: NodeId,
}

/// Attention values read back from a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    pub frame: Vec<f64>,
    pub modality: [f64; 2],
    pub composed: Tensor,
    pub frame_norm: Vec<f64>,
    pub modality_norm: [f64; 2],
}

impl SacNodes {
    pub fn attention(&self, g: &Graph) -> AttentionState {
        let m = g.value(self.modality).data();
        let mn = g.value(self.modality_norm).data();
        AttentionState {
            frame: g.value(self.frame).data().to_vec(),
            modality: [m[0], m[1]],
            composed: g.value(self.composed).clone(),
            frame_norm: g.value(self.frame_norm).data().to_vec(),
            modality_norm: [mn[0], mn[1]],
        }
    }

    pub fn losses(&self, g: &Graph, cfg: &SacConfig) -> LossBundle {
        LossBundle {
            ot: g.value(self.ot).item(),
            smooth: g.value(self.smooth).item(),
            fnorm: g.value(self.fnorm).item(),
            total: g.value(self.total).item(),
            lambda_smooth: cfg.lambda_smooth,
            lambda_fnorm: cfg.lambda_fnorm,
        }
    }
}

/// Full module: embed → heads → compose → modulate, plus the SAC loss terms.
pub fn sac_forward(
    g: &mut Graph,
    params: &ParamSet,
    appearance: NodeId,
    motion: NodeId,
    cfg: &SacConfig,
) -> Result<SacNodes> {
    let video = embed(g, params, appearance, motion)?;
    let frame = frame_attention(g, params, video)?;
    let pooled = action_aware_pool(g, video, cfg.pool_ratio)?;
    let modality = modality_attention(g, params, pooled)?;
    let composed = compose(g, modality, frame)?;
    let (modulated_appearance, modulated_motion) = modulate(g, appearance, motion, composed)?;

    let (modality_norm, frame_norm) = normalize_mass(g, modality, frame, cfg.sinkhorn.gamma)?;
    let structure = structure_head(g, params, video)?;
    let ot = ot_loss_node(g, structure, modality_norm, frame_norm, &cfg.sinkhorn)?;
    let smooth = smoothness_loss(g, structure, cfg.eta, cfg.sinkhorn.gamma, cfg.smooth_abs)?;
    let fnorm = fnorm_loss(g, structure)?;
    let total = sac_loss_node(g, ot, smooth, fnorm, cfg.lambda_smooth, cfg.lambda_fnorm)?;

    Ok(SacNodes {
        video,
        frame,
        modality,
        composed,
        frame_norm,
        modality_norm,
        structure,
        modulated_appearance,
        modulated_motion,
        ot,
        smooth,
        fnorm,
        total,
    })
}
