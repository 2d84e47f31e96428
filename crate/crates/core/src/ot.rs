//! Two-supplier attention assignment: log-domain Sinkhorn, its unrolled
//! differentiable form, and an exact transportation solver for checking it.
//!
//! The dual potentials `u` (per modality) and `v` (per frame) live in cost
//! units. Both start at 1 and are updated frames-first:
//!
//! ```text
//! v += ε (ln(a_f + γ) − logsumexp_m((−S + u + v) / ε))
//! u += ε (ln(a_m + γ) − logsumexp_t((−S + u + v) / ε))
//! Ψ  = exp((−S + u + v) / ε),   loss = Σ S ⊙ Ψ
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{logsumexp, Tensor};

/// Largest tolerated `|Σ a_m − Σ a_f|`.
pub const MASS_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentInstance {
    /// `2 × T` cost of moving unit attention from modality `m` to frame `t`.
    pub structure: Tensor,
    /// Modality masses, length 2.
    pub supplier: Vec<f64>,
    /// Frame masses, length `T`.
    pub receiver: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub gamma: f64,
    pub iterations: usize,
    /// When set, stop early once `max(|Δu|, |Δv|)` drops below this value.
    pub stop_tolerance: Option<f64>,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            gamma: 1e-8,
            iterations: 50,
            stop_tolerance: None,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::Config(format!(
                "sinkhorn epsilon and gamma must be positive (got {}, {})",
                self.epsilon, self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransportResult {
    pub plan: Vec<Vec<f64>>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub loss: f64,
    pub iterations: usize,
}

impl TransportResult {
    pub fn plan_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.plan)
    }
}

/// On-disk instance layout: `{"S": [[..], [..]], "a_m": [..], "a_f": [..]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceFile {
    #[serde(rename = "S")]
    pub s: Vec<Vec<f64>>,
    pub a_m: Vec<f64>,
    pub a_f: Vec<f64>,
}

impl AssignmentInstance {
    pub fn new(structure: Tensor, supplier: Vec<f64>, receiver: Vec<f64>) -> Result<Self> {
        let inst = Self {
            structure,
            supplier,
            receiver,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn frames(&self) -> usize {
        self.receiver.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.receiver.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInstance(msg));
        let s = &self.structure;
        if s.rank() != 2 || s.rows() != 2 {
            return bad(format!("structure must be 2 x T, got {:?}", s.shape()));
        }
        if self.supplier.len() != 2 || self.receiver.len() != s.cols() {
            return bad(format!(
                "marginal lengths {} and {} do not match a 2 x {} structure",
                self.supplier.len(),
                self.receiver.len(),
                s.cols()
            ));
        }
        if !s.is_finite() {
            return bad("structure has non-finite entries".into());
        }
        let all = self.supplier.iter().chain(&self.receiver);
        if all.clone().any(|x| !x.is_finite() || *x < 0.0) {
            return bad("marginals must be finite and non-negative".into());
        }
        let (ms, mf): (f64, f64) = (self.supplier.iter().sum(), self.receiver.iter().sum());
        if !(mf > 0.0) {
            return bad("total mass is zero".into());
        }
        if (ms - mf).abs() > MASS_TOLERANCE {
            return bad(format!("mass mismatch: suppliers {ms}, receivers {mf}"));
        }
        Ok(())
    }

    pub fn from_file(f: &InstanceFile) -> Result<Self> {
        if f.s.len() != 2 || f.s.iter().any(|r| r.len() != f.s[0].len()) || f.s[0].is_empty() {
            return Err(Error::InvalidInstance("S must be two equal-length rows".into()));
        }
        Self::new(Tensor::from_rows(&f.s), f.a_m.clone(), f.a_f.clone())
    }

    pub fn to_file(&self) -> InstanceFile {
        InstanceFile {
            s: (0..2).map(|m| self.structure.row_slice(m).to_vec()).collect(),
            a_m: self.supplier.clone(),
            a_f: self.receiver.clone(),
        }
    }
}

fn scaled_kernel(s: &Tensor, u: &[f64], v: &[f64], eps: f64, m: usize, t: usize) -> f64 {
    (-s.at(m, t) + u[m] + v[t]) / eps
}

/// Run the fixed-order log-domain Sinkhorn iteration.
pub fn sinkhorn_solve(inst: &AssignmentInstance, cfg: &SinkhornConfig) -> Result<TransportResult> {
    inst.validate()?;
    cfg.validate()?;
    let (s, eps, t_len) = (&inst.structure, cfg.epsilon, inst.frames());
    let log_af: Vec<f64> = inst.receiver.iter().map(|a| (a + cfg.gamma).ln()).collect();
    let log_am: Vec<f64> = inst.supplier.iter().map(|a| (a + cfg.gamma).ln()).collect();
    let mut u = vec![1.0; 2];
    let mut v = vec![1.0; t_len];
    let mut done = 0;

    for it in 1..=cfg.iterations {
        let mut delta = 0.0_f64;
        for t in 0..t_len {
            let lse = logsumexp((0..2).map(|m| scaled_kernel(s, &u, &v, eps, m, t)));
            let step = eps * (log_af[t] - lse);
            v[t] += step;
            delta = delta.max(step.abs());
        }
        for m in 0..2 {
            let lse = logsumexp((0..t_len).map(|t| scaled_kernel(s, &u, &v, eps, m, t)));
            let step = eps * (log_am[m] - lse);
            u[m] += step;
            delta = delta.max(step.abs());
        }
        done = it;
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::Numerical {
                iteration: it,
                what: "non-finite dual potential".into(),
            });
        }
        if cfg.stop_tolerance.is_some_and(|tol| delta < tol) {
            break;
        }
    }

    let plan: Vec<Vec<f64>> = (0..2)
        .map(|m| {
            (0..t_len)
                .map(|t| scaled_kernel(s, &u, &v, eps, m, t).exp())
                .collect()
        })
        .collect();
    let loss = (0..2)
        .flat_map(|m| (0..t_len).map(move |t| (m, t)))
        .map(|(m, t)| s.at(m, t) * plan[m][t])
        .sum::<f64>();
    // with no iterations the initial potentials are reported as they are
    if !loss.is_finite() && done > 0 {
        return Err(Error::Numerical {
            iteration: done,
            what: "non-finite transport loss".into(),
        });
    }
    Ok(TransportResult {
        plan,
        u,
        v,
        loss,
        iterations: done,
    })
}

/// Unrolled Sinkhorn inside `graph`; returns the scalar transport loss node.
///
/// `structure` is `2 × T`, `supplier` holds 2 values and `receiver` holds `T`
/// values (any layout). Gradients reach all three through every iteration.
pub fn ot_loss_node(
    graph: &mut Graph,
    structure: NodeId,
    supplier: NodeId,
    receiver: NodeId,
    cfg: &SinkhornConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let inst = AssignmentInstance {
        structure: graph.value(structure).clone(),
        supplier: graph.value(supplier).data().to_vec(),
        receiver: graph.value(receiver).data().to_vec(),
    };
    inst.validate()?;
    let t_len = inst.frames();
    let eps = cfg.epsilon;

    let am = graph.reshape(supplier, &[2, 1])?;
    let af = graph.reshape(receiver, &[1, t_len])?;
    let am = graph.offset(am, cfg.gamma);
    let log_am = graph.log(am);
    let af = graph.offset(af, cfg.gamma);
    let log_af = graph.log(af);
    let neg_s = graph.neg(structure);

    let mut u = graph.leaf(Tensor::full(&[2, 1], 1.0));
    let mut v = graph.leaf(Tensor::full(&[1, t_len], 1.0));

    let kernel = |g: &mut Graph, u: NodeId, v: NodeId| -> Result<NodeId> {
        let ub = g.broadcast(u, 2, t_len)?;
        let vb = g.broadcast(v, 2, t_len)?;
        let k = g.add(neg_s, ub)?;
        let k = g.add(k, vb)?;
        Ok(g.scale(k, 1.0 / eps))
    };

    for it in 1..=cfg.iterations {
        let (u_prev, v_prev) = (graph.value(u).clone(), graph.value(v).clone());

        let k = kernel(graph, u, v)?;
        let lse = graph.logsumexp(k, 0)?;
        let diff = graph.sub(log_af, lse)?;
        let step = graph.scale(diff, eps);
        v = graph.add(v, step)?;

        let k = kernel(graph, u, v)?;
        let lse = graph.logsumexp(k, 1)?;
        let diff = graph.sub(log_am, lse)?;
        let step = graph.scale(diff, eps);
        u = graph.add(u, step)?;

        if !graph.value(u).is_finite() || !graph.value(v).is_finite() {
            return Err(Error::Numerical {
                iteration: it,
                what: "non-finite dual potential".into(),
            });
        }
        if let Some(tol) = cfg.stop_tolerance {
            let du = graph.value(u).zip_map(&u_prev, |a, b| a - b).max_abs();
            let dv = graph.value(v).zip_map(&v_prev, |a, b| a - b).max_abs();
            if du.max(dv) < tol {
                break;
            }
        }
    }

    let k = kernel(graph, u, v)?;
    let plan = graph.exp(k);
    let cost = graph.mul(structure, plan)?;
    let loss = graph.sum(cost);
    if !graph.value(loss).item().is_finite() {
        return Err(Error::Numerical {
            iteration: cfg.iterations,
            what: "non-finite transport loss".into(),
        });
    }
    Ok(loss)
}

/// Exact minimizer of the unregularized problem.
///
/// With two suppliers the second row is determined by the first
/// (`ψ₂ₜ = a_f,t − ψ₁ₜ`), so the problem is a fractional knapsack over frames
/// ordered by `s₁ₜ − s₂ₜ` (ties to the lower frame).
pub fn exact_oracle(inst: &AssignmentInstance) -> Result<(Tensor, f64)> {
    inst.validate()?;
    let s = &inst.structure;
    let t_len = inst.frames();
    let mut order: Vec<usize> = (0..t_len).collect();
    order.sort_by(|&a, &b| {
        let da = s.at(0, a) - s.at(1, a);
        let db = s.at(0, b) - s.at(1, b);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let mut first = vec![0.0; t_len];
    let mut remaining = inst.supplier[0];
    for t in order {
        if remaining <= 0.0 {
            break;
        }
        let take = inst.receiver[t].min(remaining);
        first[t] = take;
        remaining -= take;
    }
    let mut plan = Tensor::zeros(&[2, t_len]);
    let mut loss = 0.0;
    for t in 0..t_len {
        let second = (inst.receiver[t] - first[t]).max(0.0);
        plan.set(0, t, first[t]);
        plan.set(1, t, second);
        loss += s.at(0, t) * first[t] + s.at(1, t) * second;
    }
    Ok((plan, loss))
}

/// `(row, column)` max absolute marginal deviation, each divided by total mass.
pub fn marginal_residuals(plan: &Tensor, inst: &AssignmentInstance) -> (f64, f64) {
    let total = inst.total_mass();
    let row = (0..plan.rows())
        .map(|m| (plan.row_slice(m).iter().sum::<f64>() - inst.supplier[m]).abs())
        .fold(0.0, f64::max);
    let col = (0..plan.cols())
        .map(|t| ((0..plan.rows()).map(|m| plan.at(m, t)).sum::<f64>() - inst.receiver[t]).abs())
        .fold(0.0, f64::max);
    (row / total, col / total)
}

/// Upper bound on `|regularized loss − exact loss|` used for checking solver output.
pub fn entropic_gap_bound(eps: f64, frames: usize) -> f64 {
    let t = frames as f64;
    eps * t * (2.0 * t).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(s: &[[f64; 2]; 2], am: &[f64], af: &[f64]) -> AssignmentInstance {
        AssignmentInstance::new(Tensor::from_rows(s), am.to_vec(), af.to_vec()).unwrap()
    }

    #[test]
    fn constant_cost_gives_product_plan() {
        let i = inst(&[[0.5, 0.5], [0.5, 0.5]], &[1.0, 1.0], &[1.0, 1.0]);
        let r = sinkhorn_solve(&i, &SinkhornConfig::default()).unwrap();
        for row in &r.plan {
            for &p in row {
                assert!((p - 0.5).abs() < 1e-7, "{p}");
            }
        }
        assert!((r.loss - 1.0).abs() < 1e-7);
        assert_eq!(r.iterations, 50);
    }

    #[test]
    fn anti_diagonal_cost_is_nearly_free() {
        let i = inst(&[[0.0, 1.0], [1.0, 0.0]], &[1.0, 1.0], &[1.0, 1.0]);
        let r = sinkhorn_solve(&i, &SinkhornConfig::default()).unwrap();
        assert!(r.loss <= 0.01, "{}", r.loss);
        let (plan, loss) = exact_oracle(&i).unwrap();
        assert_eq!(plan, Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn oracle_three_frames() {
        let s = Tensor::from_rows(&[[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]]);
        let i = AssignmentInstance::new(s, vec![2.0, 1.0], vec![1.0; 3]).unwrap();
        let (plan, loss) = exact_oracle(&i).unwrap();
        assert_eq!(plan.row_slice(0), &[1.0, 1.0, 0.0]);
        assert_eq!(loss, 4.0);
    }

    #[test]
    fn oracle_forced_allocation() {
        let s = Tensor::from_rows(&[[0.2, 0.9, 0.4], [0.1, 0.1, 0.1]]);
        let af = [0.5, 2.0, 0.5];
        let i = AssignmentInstance::new(s.clone(), vec![3.0, 0.0], af.to_vec()).unwrap();
        let (plan, loss) = exact_oracle(&i).unwrap();
        assert_eq!(plan.row_slice(1), &[0.0; 3]);
        let expect: f64 = (0..3).map(|t| s.at(0, t) * af[t]).sum();
        assert!((loss - expect).abs() < 1e-15);
        assert_eq!(marginal_residuals(&plan, &i), (0.0, 0.0));
    }

    #[test]
    fn rejects_bad_instances() {
        let s = Tensor::from_rows(&[[0.5, 0.5], [0.5, 0.5]]);
        let e = AssignmentInstance::new(s.clone(), vec![1.0, 1.0], vec![1.0, 2.0]);
        assert!(matches!(e, Err(Error::InvalidInstance(_))));
        let e = AssignmentInstance::new(s.clone(), vec![0.0, 0.0], vec![0.0, 0.0]);
        assert!(matches!(e, Err(Error::InvalidInstance(_))));
        let e = AssignmentInstance::new(s, vec![-1.0, 3.0], vec![1.0, 1.0]);
        assert!(matches!(e, Err(Error::InvalidInstance(_))));
    }

    #[test]
    fn zero_iterations_reports_residuals() {
        let i = inst(&[[0.2, 0.7], [0.6, 0.1]], &[1.5, 0.5], &[1.0, 1.0]);
        let cfg = SinkhornConfig {
            iterations: 0,
            ..Default::default()
        };
        let r = sinkhorn_solve(&i, &cfg).unwrap();
        let (row, col) = marginal_residuals(&r.plan_tensor(), &i);
        assert!(row > 0.0 || col > 0.0);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn early_stop_mode() {
        let i = inst(&[[0.5, 0.5], [0.5, 0.5]], &[1.0, 1.0], &[1.0, 1.0]);
        let cfg = SinkhornConfig {
            iterations: 1000,
            stop_tolerance: Some(1e-9),
            ..Default::default()
        };
        let r = sinkhorn_solve(&i, &cfg).unwrap();
        assert!(r.iterations < 1000);
        assert!((r.loss - 1.0).abs() < 1e-7);
    }

    #[test]
    fn graph_matches_direct_solver() {
        let i = inst(&[[0.1, 0.8], [0.4, 0.3]], &[0.7, 1.3], &[1.2, 0.8]);
        let direct = sinkhorn_solve(&i, &SinkhornConfig::default()).unwrap();
        let mut g = Graph::new();
        let s = g.leaf(i.structure.clone());
        let am = g.leaf(Tensor::column(&i.supplier));
        let af = g.leaf(Tensor::row(&i.receiver));
        let l = ot_loss_node(&mut g, s, am, af, &SinkhornConfig::default()).unwrap();
        assert!((g.value(l).item() - direct.loss).abs() < 1e-12);
    }

    #[test]
    fn graph_rejects_zero_mass() {
        let mut g = Graph::new();
        let s = g.leaf(Tensor::full(&[2, 2], 0.5));
        let am = g.leaf(Tensor::column(&[0.0, 0.0]));
        let af = g.leaf(Tensor::row(&[0.0, 0.0]));
        let r = ot_loss_node(&mut g, s, am, af, &SinkhornConfig::default());
        assert!(matches!(r, Err(Error::InvalidInstance(_))));
    }

    #[test]
    fn instance_file_roundtrip() {
        let json = r#"{"S": [[0.5, 0.5], [0.5, 0.5]], "a_m": [1, 1], "a_f": [1, 1]}"#;
        let f: InstanceFile = serde_json::from_str(json).unwrap();
        let i = AssignmentInstance::from_file(&f).unwrap();
        assert_eq!(i.frames(), 2);
        let back = AssignmentInstance::from_file(&i.to_file()).unwrap();
        assert_eq!(back, i);
    }
}
