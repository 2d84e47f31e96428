//! Central finite-difference checks of reverse-mode gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ot::{ot_loss_node, SinkhornConfig};
use crate::params::ParamSet;
use crate::rng::SplitMix64;
use crate::sac::{self, FeatureSequence, SacConfig, SacNodes};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Coordinates whose analytic gradient is smaller than this are not scored.
pub const GRAD_FLOOR: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|)` over scored coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    pub fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        if analytic.abs() <= GRAD_FLOOR {
            self.skipped += 1;
            return;
        }
        self.checked += 1;
        let rel = relative_error(analytic, numeric);
        if rel > self.max_rel_error || rel.is_nan() {
            self.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            self.worst = Some((name.to_string(), index, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// One finite-difference direction: `(parameter, flat index, weight)` entries.
pub type Direction = Vec<(String, usize, f64)>;

/// Evaluate `build`'s scalar output in plain `f64`.
pub fn graph_value<F>(build: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let l = build(&mut g, params)?;
    Ok(g.value(l).item())
}

/// Unit directions for every coordinate of every parameter.
pub fn coordinate_directions(params: &ParamSet) -> Vec<Direction> {
    params
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| vec![(name.clone(), i, 1.0)]))
        .collect()
}

/// Compare analytic gradients of `build`'s scalar output against central
/// differences for every coordinate of every parameter in `params`.
pub fn check_params<F>(params: &ParamSet, step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<NodeId>,
{
    check_directions(params, &coordinate_directions(params), step, build)
}

/// Like [`check_params`], but along caller-supplied directions.
///
/// The analytic side is the matching weighted sum of gradient coordinates.
/// Used where single-coordinate moves would leave the function's domain, such
/// as mass-balanced transport marginals.
pub fn check_directions<F>(params: &ParamSet, directions: &[Direction], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<NodeId>,
{
    check_directions_with(params, directions, step, &build, |p| graph_value(&build, p))
}

/// Directional check whose numeric side comes from `eval`, which must compute
/// the same function as `build` (possibly at higher precision).
pub fn check_directions_with<F, E>(
    params: &ParamSet,
    directions: &[Direction],
    step: f64,
    build: &F,
    eval: E,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<NodeId>,
    E: Fn(&ParamSet) -> Result<f64>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let grads = params.gradients_from(&g.backward(loss)?);

    let shifted = |sign: f64, dir: &[(String, usize, f64)]| -> Result<f64> {
        let mut p = params.clone();
        for (name, i, w) in dir {
            let t = p.get_mut(name).ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
            t.data_mut()[*i] += sign * step * w;
        }
        eval(&p)
    };

    let mut report = GradCheckReport::default();
    for dir in directions {
        let mut analytic = 0.0;
        for (name, i, w) in dir {
            analytic += w * grads.get(name)?.data()[*i];
        }
        let numeric = (shifted(1.0, dir)? - shifted(-1.0, dir)?) / (2.0 * step);
        let (name, index) = dir.first().map(|d| (d.0.as_str(), d.1)).unwrap_or(("direction", 0));
        report.record(name, index, analytic, numeric);
    }
    Ok(report)
}

/// Random transport instance as parameters `S` (`2 × T`, uniform in `[0, 1)`),
/// `a_m` (`2 × 1`) and `a_f` (`1 × T`), both marginals of mass exactly `T`
/// up to rounding of the last supplier entry.
pub fn random_ot_instance(seed: u64, frames: usize) -> ParamSet {
    let mut r = SplitMix64::new(seed);
    let t = frames as f64;
    let s: Vec<f64> = (0..2 * frames).map(|_| r.uniform()).collect();
    let mut am: Vec<f64> = (0..2).map(|_| r.uniform_in(0.2, 1.0)).collect();
    let mut af: Vec<f64> = (0..frames).map(|_| r.uniform_in(0.2, 1.0)).collect();
    let (sm, sf): (f64, f64) = (am.iter().sum(), af.iter().sum());
    am.iter_mut().for_each(|x| *x *= t / sm);
    af.iter_mut().for_each(|x| *x *= t / sf);
    am[1] += af.iter().sum::<f64>() - am.iter().sum::<f64>();
    let mut p = ParamSet::new();
    p.insert("S", Tensor::matrix(2, frames, s).expect("2 x T"));
    p.insert("a_m", Tensor::column(&am));
    p.insert("a_f", Tensor::row(&af));
    p
}

/// Every entry of `S`, plus mass-preserving marginal moves: `e_t(a_f) + e_0(a_m)`
/// for each frame and `e_0(a_f) + e_1(a_m)`.
pub fn ot_directions(frames: usize) -> Vec<Direction> {
    let mut dirs: Vec<Direction> = (0..2 * frames).map(|i| vec![("S".to_string(), i, 1.0)]).collect();
    dirs.extend((0..frames).map(|t| vec![("a_f".to_string(), t, 1.0), ("a_m".to_string(), 0, 1.0)]));
    dirs.push(vec![("a_f".to_string(), 0, 1.0), ("a_m".to_string(), 1, 1.0)]);
    dirs
}

/// Unrolled transport loss over a [`random_ot_instance`] parameter set.
pub fn ot_build(cfg: SinkhornConfig) -> impl Fn(&mut Graph, &ParamSet) -> Result<NodeId> {
    move |g, p| {
        let s = p.node(g, "S")?;
        let am = p.node(g, "a_m")?;
        let af = p.node(g, "a_f")?;
        ot_loss_node(g, s, am, af, &cfg)
    }
}

/// Random features and freshly initialised attention parameters.
#[derive(Clone, Debug)]
pub struct SacCase {
    pub features: FeatureSequence,
    pub params: ParamSet,
    pub cfg: SacConfig,
}

pub fn random_sac_case(seed: u64, dim: usize, frames: usize, cfg: SacConfig) -> SacCase {
    let mut r = SplitMix64::new(seed);
    let mut draw = || Tensor::matrix(dim, frames, (0..dim * frames).map(|_| r.gaussian()).collect()).expect("D x T");
    let (a, m) = (draw(), draw());
    let features = FeatureSequence::new(a, m, 25.0).expect("finite features");
    let params = ParamSet::init_uniform(&sac::param_specs(dim, &cfg), &mut r);
    SacCase { features, params, cfg }
}

impl SacCase {
    /// Graph builder for the total SAC loss as a function of the parameters.
    pub fn build(&self) -> impl Fn(&mut Graph, &ParamSet) -> Result<NodeId> + '_ {
        move |g, p| Ok(self.forward(g, p)?.total)
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet) -> Result<SacNodes> {
        let a = g.leaf(self.features.appearance.clone());
        let m = g.leaf(self.features.motion.clone());
        sac::sac_forward(g, params, a, m, &self.cfg)
    }
}

/// Transport suite for one seed, scored with `f64` differences.
pub fn ot_suite(seed: u64, frames: usize, cfg: &SinkhornConfig, step: f64) -> Result<GradCheckReport> {
    let p = random_ot_instance(seed, frames);
    check_directions(&p, &ot_directions(frames), step, ot_build(*cfg))
}

/// Full attention-module suite for one seed, scored with `f64` differences.
pub fn sac_suite(seed: u64, dim: usize, frames: usize, cfg: &SacConfig, step: f64) -> Result<GradCheckReport> {
    let case = random_sac_case(seed, dim, frames, cfg.clone());
    check_params(&case.params, step, case.build())
}
