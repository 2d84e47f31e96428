//! Shared helpers for integration tests: a multiprecision transport
//! evaluator used as the numeric side of finite-difference checks.
#![allow(dead_code)]

use rug::Float;
use sac_core::gradcheck::SacCase;
use sac_core::ot::SinkhornConfig;
use sac_core::params::ParamSet;
use sac_core::{Graph, Result, Tensor};

/// Bits of mantissa for the reference evaluation.
pub const PRECISION: u32 = 128;

fn f(x: f64) -> Float {
    Float::with_val(PRECISION, x)
}

fn logsumexp(xs: &[Float]) -> Float {
    let mut max = xs[0].clone();
    for x in &xs[1..] {
        if *x > max {
            max = x.clone();
        }
    }
    let mut acc = f(0.0);
    for x in xs {
        acc += Float::with_val(PRECISION, x - &max).exp();
    }
    acc.ln() + max
}

/// The fixed-iteration log-domain transport loss, evaluated at `PRECISION` bits
/// from the same `f64` inputs.
pub fn transport_loss(s: &Tensor, supplier: &[f64], receiver: &[f64], cfg: &SinkhornConfig) -> f64 {
    transport_loss_mp(s, supplier, receiver, cfg).to_f64()
}

fn transport_loss_mp(s: &Tensor, supplier: &[f64], receiver: &[f64], cfg: &SinkhornConfig) -> Float {
    let frames = s.cols();
    let eps = f(cfg.epsilon);
    let gamma = f(cfg.gamma);
    let log_am: Vec<Float> = supplier.iter().map(|&a| (f(a) + &gamma).ln()).collect();
    let log_af: Vec<Float> = receiver.iter().map(|&a| (f(a) + &gamma).ln()).collect();
    let cost: Vec<Vec<Float>> = (0..2).map(|m| (0..frames).map(|t| f(s.at(m, t))).collect()).collect();
    let mut u = vec![f(1.0); 2];
    let mut v = vec![f(1.0); frames];
    let kernel = |u: &[Float], v: &[Float], m: usize, t: usize| -> Float {
        (Float::with_val(PRECISION, &u[m] + &v[t]) - &cost[m][t]) / &eps
    };
    for _ in 0..cfg.iterations {
        for t in 0..frames {
            let col: Vec<Float> = (0..2).map(|m| kernel(&u, &v, m, t)).collect();
            v[t] += Float::with_val(PRECISION, &log_af[t] - logsumexp(&col)) * &eps;
        }
        for m in 0..2 {
            let row: Vec<Float> = (0..frames).map(|t| kernel(&u, &v, m, t)).collect();
            u[m] += Float::with_val(PRECISION, &log_am[m] - logsumexp(&row)) * &eps;
        }
    }
    let mut loss = f(0.0);
    for m in 0..2 {
        for t in 0..frames {
            loss += kernel(&u, &v, m, t).exp() * &cost[m][t];
        }
    }
    loss
}

/// Reference value of the transport loss over a `random_ot_instance` parameter set.
pub fn ot_value(p: &ParamSet, cfg: &SinkhornConfig) -> Result<f64> {
    Ok(transport_loss(p.get("S")?, p.get("a_m")?.data(), p.get("a_f")?.data(), cfg))
}

/// Total attention loss whose transport term is evaluated at high precision;
/// everything upstream of the solver stays in `f64`.
pub fn sac_value(case: &SacCase, p: &ParamSet) -> Result<f64> {
    let mut g = Graph::new();
    let n = case.forward(&mut g, p)?;
    let ot = transport_loss_mp(
        g.value(n.structure),
        g.value(n.modality_norm).data(),
        g.value(n.frame_norm).data(),
        &case.cfg.sinkhorn,
    );
    let smooth = g.value(n.smooth).item();
    let fnorm = g.value(n.fnorm).item();
    let total = ot + f(case.cfg.lambda_smooth) * f(smooth) + f(case.cfg.lambda_fnorm) * f(fnorm);
    Ok(total.to_f64())
}
