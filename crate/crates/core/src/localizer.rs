//! A frame-scoring temporal action localizer that the attention module plugs
//! into, with the attention-mode ablations and a deterministic SGD loop.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::datagen::{Dataset, Split, Video};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::metrics::{Detection, Segment};
use crate::params::{ParamSet, ParamSpec};
use crate::rng::SplitMix64;
use crate::sac::{self, AttentionState, FeatureSequence, LossBundle, SacConfig, SacNodes};
use crate::tensor::Tensor;


/// How frame-modality attention is produced before the features reach the scorer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Raw concatenated features.
    None,
    /// One conv on the embedded video predicts a `2 × T` sigmoid map directly.
    Predicted,
    /// Softmax modality attention broadcast over frames.
    ModalityOnly,
    /// Sigmoid frame attention shared by both modalities.
    FrameOnly,
    /// Rank-1 composition of the two, no transport terms.
    Composed,
    /// Composition with action-aware pooling and the full transport loss.
    Sac,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 6] = [
        AttentionMode::None,
        AttentionMode::Predicted,
        AttentionMode::ModalityOnly,
        AttentionMode::FrameOnly,
        AttentionMode::Composed,
        AttentionMode::Sac,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::None => "none",
            AttentionMode::Predicted => "predicted",
            AttentionMode::ModalityOnly => "modality_only",
            AttentionMode::FrameOnly => "frame_only",
            AttentionMode::Composed => "composed",
            AttentionMode::Sac => "sac",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizerConfig {
    pub mode: AttentionMode,
    pub classes: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Videos per update; gradients inside a batch are averaged in batch order.
    pub batch_size: usize,
    /// Worker threads for gradients within a batch; results do not depend on it.
    pub threads: usize,
    /// Foreground probability needed to open a segment.
    pub threshold: f64,
    /// Rescale each update's gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    pub sac: SacConfig,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            mode: AttentionMode::Sac,
            classes: 4,
            hidden: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 30,
            seed: 0,
            batch_size: 1,
            threads: 1,
            threshold: 0.5,
            grad_clip: Some(1.0),
            sac: SacConfig::default(),
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config("classes, hidden and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "learning rate {} / momentum {} out of range",
                self.learning_rate, self.momentum
            )));
        }
        self.sac.sinkhorn.validate()
    }

    /// Attention settings for this mode: only `sac` uses action-aware pooling.
    pub fn attention_cfg(&self) -> SacConfig {
        let mut c = self.sac.clone();
        if self.mode != AttentionMode::Sac {
            c.pool_ratio = 1.0;
        }
        c
    }
}

pub const SCORE_KERNEL: usize = 3;

/// Parameters used by `cfg.mode` for `dim`-channel modalities.
pub fn param_specs(dim: usize, cfg: &LocalizerConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    specs.extend(ParamSpec::conv("loc.conv0", 2 * dim, cfg.hidden, SCORE_KERNEL));
    specs.extend(ParamSpec::conv("loc.conv1", cfg.hidden, cfg.classes + 1, SCORE_KERNEL));
    let all_sac = sac::param_specs(dim, &cfg.sac);
    let keep = |name: &str| -> bool {
        let embed = name.starts_with("sac.embed.");
        match cfg.mode {
            AttentionMode::None => false,
            AttentionMode::Predicted => embed,
            AttentionMode::ModalityOnly => embed || name.starts_with("sac.modality."),
            AttentionMode::FrameOnly => embed || name.starts_with("sac.frame."),
            AttentionMode::Composed => !name.starts_with("sac.structure."),
            AttentionMode::Sac => true,
        }
    };
    specs.extend(all_sac.into_iter().filter(|s| keep(&s.name)));
    if cfg.mode == AttentionMode::Predicted {
        specs.extend(ParamSpec::conv("att.predicted", 2 * cfg.sac.embed_width, 2, sac::HEAD_KERNEL));
    }
    specs
}

pub fn init_params(dim: usize, cfg: &LocalizerConfig) -> ParamSet {
    let mut rng = SplitMix64::new(cfg.seed).split(0x1417);
    ParamSet::init_uniform(&param_specs(dim, cfg), &mut rng)
}

/// Class logits and column-stochastic probabilities, `(C+1) × T`, from modulated features.
pub fn score_frames(
    g: &mut Graph,
    params: &ParamSet,
    appearance: NodeId,
    motion: NodeId,
) -> Result<(NodeId, NodeId)> {
    let x = g.concat_rows(appearance, motion)?;
    let w0 = params.node(g, "loc.conv0.weight")?;
    let b0 = params.node(g, "loc.conv0.bias")?;
    let h = g.conv1d(x, w0, b0)?;
    let h = g.relu(h);
    let w1 = params.node(g, "loc.conv1.weight")?;
    let b1 = params.node(g, "loc.conv1.bias")?;
    let logits = g.conv1d(h, w1, b1)?;
    let probs = g.softmax(logits, 0)?;
    Ok((logits, probs))
}

/// Node handles of one localizer forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub logits: NodeId,
    pub probs: NodeId,
    /// `2 × T` map used for modulation, absent in mode `none`.
    pub attention: Option<NodeId>,
    /// `2 × 1` modality attention when the mode predicts one.
    pub modality: Option<NodeId>,
    pub sac: Option<SacNodes>,
}

pub fn forward(
    g: &mut Graph,
    params: &ParamSet,
    features: &FeatureSequence,
    cfg: &LocalizerConfig,
) -> Result<Forward> {
    let a = g.leaf(features.appearance.clone());
    let m = g.leaf(features.motion.clone());
    let t = features.frames();
    let att_cfg = cfg.attention_cfg();

    let mut out = Forward {
        logits: a,
        probs: a,
        attention: None,
        modality: None,
        sac: None,
    };
    let (ha, hm) = match cfg.mode {
        AttentionMode::None => (a, m),
        AttentionMode::Sac => {
            let nodes = sac::sac_forward(g, params, a, m, &att_cfg)?;
            out.attention = Some(nodes.composed);
            out.modality = Some(nodes.modality);
            out.sac = Some(nodes);
            (nodes.modulated_appearance, nodes.modulated_motion)
        }
        mode => {
            let video = sac::embed(g, params, a, m)?;
            let attention = match mode {
                AttentionMode::Predicted => {
                    let w = params.node(g, "att.predicted.weight")?;
                    let b = params.node(g, "att.predicted.bias")?;
                    let logits = g.conv1d(video, w, b)?;
                    g.sigmoid(logits)
                }
                AttentionMode::ModalityOnly => {
                    let pooled = sac::action_aware_pool(g, video, att_cfg.pool_ratio)?;
                    let am = sac::modality_attention(g, params, pooled)?;
                    out.modality = Some(am);
                    g.broadcast(am, 2, t)?
                }
                AttentionMode::FrameOnly => {
                    let af = sac::frame_attention(g, params, video)?;
                    g.broadcast(af, 2, t)?
                }
                AttentionMode::Composed => {
                    let af = sac::frame_attention(g, params, video)?;
                    let pooled = sac::action_aware_pool(g, video, att_cfg.pool_ratio)?;
                    let am = sac::modality_attention(g, params, pooled)?;
                    out.modality = Some(am);
                    sac::compose(g, am, af)?
                }
                AttentionMode::None | AttentionMode::Sac => unreachable!(),
            };
            out.attention = Some(attention);
            sac::modulate(g, a, m, attention)?
        }
    };
    let (logits, probs) = score_frames(g, params, ha, hm)?;
    out.logits = logits;
    out.probs = probs;
    Ok(out)
}

/// One-hot `(C+1) × T` frame targets; class 0 is background.
pub fn frame_targets(annotations: &[Segment], classes: usize, frames: usize) -> Result<Tensor> {
    let mut y = Tensor::zeros(&[classes + 1, frames]);
    let mut label = vec![0usize; frames];
    for s in annotations {
        if s.end >= frames || s.label > classes {
            return Err(Error::Contract(format!("annotation {s:?} outside {classes} classes x {frames} frames")));
        }
        label[s.start..=s.end].iter_mut().for_each(|l| *l = s.label);
    }
    for (t, &c) in label.iter().enumerate() {
        y.set(c, t, 1.0);
    }
    Ok(y)
}

/// Mean per-frame cross-entropy of `logits` against one-hot `targets`.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
    let y = g.leaf(targets.clone());
    let lse = g.logsumexp(logits, 0)?;
    let picked = g.mul(logits, y)?;
    let picked = g.sum_axis(picked, 0)?;
    let nll = g.sub(lse, picked)?;
    Ok(g.mean(nll))
}

/// Loss terms of one video.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VideoLoss {
    pub cross_entropy: f64,
    pub sac: Option<LossBundle>,
    pub total: f64,
}

/// Training objective: frame cross-entropy, plus the SAC loss in mode `sac`.
pub fn video_objective(
    g: &mut Graph,
    params: &ParamSet,
    video: &Video,
    cfg: &LocalizerConfig,
) -> Result<(NodeId, Forward)> {
    let fwd = forward(g, params, &video.features, cfg)?;
    let targets = frame_targets(&video.annotations, cfg.classes, video.features.frames())?;
    let ce = cross_entropy(g, fwd.logits, &targets)?;
    let total = match &fwd.sac {
        Some(nodes) => g.add(ce, nodes.total)?,
        None => ce,
    };
    Ok((total, fwd))
}

fn video_loss(g: &Graph, total: NodeId, fwd: &Forward, cfg: &LocalizerConfig) -> VideoLoss {
    let sac = fwd.sac.map(|n| n.losses(g, &cfg.attention_cfg()));
    let t = g.value(total).item();
    VideoLoss {
        cross_entropy: t - sac.map_or(0.0, |s| s.total),
        sac,
        total: t,
    }
}

fn check_finite(loss: &VideoLoss, epoch: usize, video: &str) -> Result<()> {
    let mut terms = vec![("cross_entropy", loss.cross_entropy)];
    if let Some(s) = loss.sac {
        terms.extend([("ot", s.ot), ("smooth", s.smooth), ("fnorm", s.fnorm)]);
    }
    terms.push(("total", loss.total));
    match terms.into_iter().find(|(_, v)| !v.is_finite()) {
        Some((term, _)) => Err(Error::NanLoss {
            term: term.to_string(),
            epoch,
            video: video.to_string(),
        }),
        None => Ok(()),
    }
}

/// Loss and parameter gradients of one video.
pub fn video_gradient(params: &ParamSet, video: &Video, cfg: &LocalizerConfig) -> Result<(VideoLoss, ParamSet)> {
    let mut g = Graph::new();
    let (total, fwd) = video_objective(&mut g, params, video, cfg)?;
    let loss = video_loss(&g, total, &fwd, cfg);
    let grads = params.gradients_from(&g.backward(total)?);
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub cross_entropy: f64,
    pub sac: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub log: Vec<EpochLog>,
}

fn batch_gradients(
    params: &ParamSet,
    batch: &[&Video],
    cfg: &LocalizerConfig,
) -> Vec<Result<(VideoLoss, ParamSet)>> {
    if cfg.threads <= 1 || batch.len() <= 1 {
        return batch.iter().map(|v| video_gradient(params, v, cfg)).collect();
    }
    let chunk = batch.len().div_ceil(cfg.threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|v| video_gradient(params, v, cfg)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("gradient worker panicked"))
            .collect()
    })
}

/// SGD with momentum over the training split.
///
/// Video order is reshuffled every epoch from the seeded stream; the result is
/// a pure function of `(dataset, cfg)`.
pub fn train(dataset: &Dataset, cfg: &LocalizerConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let videos: Vec<&Video> = dataset.split(Split::Train).collect();
    let dim = videos
        .first()
        .map(|v| v.features.dim())
        .ok_or_else(|| Error::Contract("no training videos".into()))?;
    let mut params = init_params(dim, cfg);
    let mut velocity = ParamSet::zeros(&param_specs(dim, cfg));
    let mut order_rng = SplitMix64::new(cfg.seed).split(0x5EED);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..videos.len()).collect();
        order_rng.shuffle(&mut order);
        let (mut sum_total, mut sum_ce, mut sum_sac) = (0.0, 0.0, 0.0);

        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Video> = batch_idx.iter().map(|&i| videos[i]).collect();
            let results = batch_gradients(&params, &batch, cfg);
            let mut acc: Option<ParamSet> = None;
            for (video, res) in batch.iter().zip(results) {
                let (loss, grads) = res?;
                check_finite(&loss, epoch, &video.id)?;
                sum_total += loss.total;
                sum_ce += loss.cross_entropy;
                sum_sac += loss.sac.map_or(0.0, |s| s.total);
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (name, t) in a.iter_mut() {
                            t.add_assign(grads.get(name)?);
                        }
                    }
                }
            }
            let grads = acc.expect("non-empty batch");
            let mut scale = 1.0 / batch.len() as f64;
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.iter().flat_map(|(_, t)| t.data()).map(|x| x * x).sum::<f64>().sqrt() * scale;
                if norm > clip {
                    scale *= clip / norm;
                }
            }
            for (name, p) in params.iter_mut() {
                let g = grads.get(name)?;
                let v = velocity.get_mut(name).expect("velocity mirrors params");
                for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                    *vi = cfg.momentum * *vi + gi * scale;
                    *pi -= cfg.learning_rate * *vi;
                }
            }
        }
        let n = videos.len() as f64;
        log.push(EpochLog {
            epoch,
            loss: sum_total / n,
            cross_entropy: sum_ce / n,
            sac: sum_sac / n,
        });
    }
    Ok(TrainOutcome { params, log })
}

/// Maximal runs of `prob[c, t] ≥ threshold` for every foreground class,
/// scored by their mean probability, best first.
pub fn decode_segments(probs: &Tensor, threshold: f64) -> Vec<Segment> {
    let (rows, frames) = (probs.rows(), probs.cols());
    let mut out = Vec::new();
    for c in 1..rows {
        let mut t = 0;
        while t < frames {
            if probs.at(c, t) < threshold {
                t += 1;
                continue;
            }
            let start = t;
            let mut sum = 0.0;
            while t < frames && probs.at(c, t) >= threshold {
                sum += probs.at(c, t);
                t += 1;
            }
            out.push(Segment::new(start, t - 1, c, sum / (t - start) as f64));
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.start.cmp(&b.start)).then(a.label.cmp(&b.label)));
    out
}

/// Per-video inference output.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Tensor,
    pub segments: Vec<Segment>,
    pub attention: Option<AttentionState>,
    pub modality: Option<[f64; 2]>,
}

pub fn predict(params: &ParamSet, features: &FeatureSequence, cfg: &LocalizerConfig) -> Result<Prediction> {
    let mut g = Graph::new();
    let fwd = forward(&mut g, params, features, cfg)?;
    let probs = g.value(fwd.probs).clone();
    let segments = decode_segments(&probs, cfg.threshold);
    Ok(Prediction {
        segments,
        attention: fwd.sac.map(|n| n.attention(&g)),
        modality: fwd.modality.map(|m| {
            let d = g.value(m).data();
            [d[0], d[1]]
        }),
        probs,
    })
}

/// Detections for every video of `split`, in dataset order.
pub fn detect(dataset: &Dataset, split: Split, params: &ParamSet, cfg: &LocalizerConfig) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for v in dataset.split(split) {
        for segment in predict(params, &v.features, cfg)?.segments {
            out.push(Detection {
                video: v.id.clone(),
                segment,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SynthConfig};

    fn tiny_data() -> Dataset {
        generate(&SynthConfig {
            train_videos: 4,
            test_videos: 2,
            frames: 24,
            dim: 4,
            action_len: (3, 6),
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_cfg(mode: AttentionMode) -> LocalizerConfig {
        LocalizerConfig {
            mode,
            hidden: 6,
            epochs: 2,
            sac: SacConfig {
                embed_width: 4,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn decode_examples() {
        let mut p = Tensor::zeros(&[2, 4]);
        for (t, v) in [0.1, 0.9, 0.9, 0.1].into_iter().enumerate() {
            p.set(1, t, v);
            p.set(0, t, 1.0 - v);
        }
        let s = decode_segments(&p, 0.5);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].start, s[0].end, s[0].label), (1, 2, 1));
        assert!((s[0].score - 0.9).abs() < 1e-15);

        let mut bg = Tensor::zeros(&[3, 5]);
        (0..5).for_each(|t| bg.set(0, t, 1.0));
        assert!(decode_segments(&bg, 0.5).is_empty());

        let mut fg = Tensor::zeros(&[2, 5]);
        (0..5).for_each(|t| fg.set(1, t, 1.0));
        let s = decode_segments(&fg, 0.5);
        assert_eq!((s[0].start, s[0].end, s[0].score), (0, 4, 1.0));
    }

    #[test]
    fn zero_params_score_uniform() {
        let data = tiny_data();
        let cfg = tiny_cfg(AttentionMode::None);
        let params = ParamSet::zeros(&param_specs(4, &cfg));
        let p = predict(&params, &data.videos[0].features, &cfg).unwrap();
        assert!(p.probs.data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in AttentionMode::ALL {
            assert_eq!(m.as_str().parse::<AttentionMode>().unwrap(), m);
        }
        assert!("nope".parse::<AttentionMode>().is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let data = tiny_data();
        let cfg = LocalizerConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..tiny_cfg(AttentionMode::Sac)
        };
        let out = train(&data, &cfg).unwrap();
        assert_eq!(out.params, init_params(4, &cfg));
    }

    #[test]
    fn every_mode_trains_and_is_deterministic() {
        let data = tiny_data();
        for mode in AttentionMode::ALL {
            let cfg = tiny_cfg(mode);
            let a = train(&data, &cfg).unwrap();
            let b = train(&data, &cfg).unwrap();
            assert_eq!(a, b, "{mode}");
            assert!(a.log.iter().all(|l| l.loss.is_finite()));
            assert_eq!(a.log[0].sac != 0.0, mode == AttentionMode::Sac);
        }
    }

    #[test]
    fn threads_do_not_change_results() {
        let data = tiny_data();
        let base = LocalizerConfig {
            batch_size: 3,
            ..tiny_cfg(AttentionMode::Sac)
        };
        let one = train(&data, &base).unwrap();
        let four = train(&data, &LocalizerConfig { threads: 4, ..base }).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn nan_features_name_the_term() {
        let mut data = tiny_data();
        let v = &mut data.videos[0];
        let mut a = v.features.appearance.clone();
        a.data_mut()[0] = 1e300;
        v.features.appearance = a.map(|x| x * 1e10);
        let err = train(&data, &tiny_cfg(AttentionMode::None)).unwrap_err();
        assert!(matches!(err, Error::NanLoss { .. }), "{err}");
    }

    #[test]
    fn targets_mark_background_as_zero() {
        let y = frame_targets(&[Segment::new(1, 2, 2, 1.0)], 2, 4).unwrap();
        assert_eq!(y.row_slice(0), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(y.row_slice(2), &[0.0, 1.0, 1.0, 0.0]);
        assert!(frame_targets(&[Segment::new(1, 5, 1, 1.0)], 2, 4).is_err());
    }
}
