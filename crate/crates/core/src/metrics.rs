//! Error metrics, evaluation and rollout diagnostics.
//!
//! All metrics are computed per sample on scaled fields (strains divided by
//! `‖ε̄‖`, stiffness by `‖C⁰‖_F`) and then averaged. Percentages:
//!
//! * `err_homog`  `|C̄(ε*) − C̄(ε̂)| / C̄(ε*)` with `C̄(ε) = ⟨C:ε⟩₁₁ / ε̄₁₁`,
//!   only for pure x-x loading;
//! * `err_vm`     `⟨|σ_eq(ε*) − σ_eq(ε̂)|⟩ / ⟨|σ_eq(ε*)|⟩`;
//! * `err_l2_strain`  `sqrt⟨‖ε* − ε̂‖²⟩`;
//! * `err_l2_stress`  `sqrt⟨‖C:(ε* − ε̂)‖²⟩`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledProblem;
use crate::deq::normalized_residual;
use crate::error::{ensure, Result};
use crate::field::{Field, StiffnessField};
use crate::loss::{loss, LossMode};
use crate::mandel::SymTensor2;
use crate::operators::{Model, Phase, Problem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: u64,
    pub err_homog: Option<f64>,
    pub err_vm: f64,
    pub err_l2_strain: f64,
    pub err_l2_stress: f64,
    pub total_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub samples: usize,
    pub err_homog: Option<f64>,
    pub err_vm: f64,
    pub err_l2_strain: f64,
    pub err_l2_stress: f64,
    pub total_loss: f64,
    /// Mean wall-clock seconds per prediction, batch size 1.
    pub seconds_per_sample: f64,
    pub per_sample: Vec<SampleMetrics>,
}

fn effective_xx(c: &StiffnessField, eps: &Field, eps_bar: &SymTensor2) -> f64 {
    let n = eps.voxels();
    let s11: f64 = (0..n).map(|v| c.at(v).apply(&eps.tensor_at(v)).0[0]).sum::<f64>() / n as f64;
    s11 / eps_bar.0[0]
}

/// Metrics of one prediction against its reference, in percent.
pub fn sample_metrics(problem: &Problem, target: &Field, pred: &Field, uniaxial_xx: bool) -> Result<SampleMetrics> {
    ensure!(target.channels() == 6 && pred.channels() == 6, Shape, "metrics compare six-channel strain fields");
    ensure!(target.grid() == pred.grid() && target.grid() == problem.grid(), Shape, "metric operands live on different grids");
    let c = &problem.stiffness;
    let n = target.voxels();
    let (mut e2, mut s2, mut vm_err, mut vm_ref) = (0.0, 0.0, 0.0, 0.0);
    for v in 0..n {
        let (t, p) = (target.tensor_at(v), pred.tensor_at(v));
        let e = SymTensor2(std::array::from_fn(|k| t.0[k] - p.0[k]));
        let (st, sp) = (c.at(v).apply(&t), c.at(v).apply(&p));
        let se = c.at(v).apply(&e);
        e2 += e.dot(&e);
        s2 += se.dot(&se);
        let q = st.equivalent_stress();
        vm_err += (q - sp.equivalent_stress()).abs();
        vm_ref += q.abs();
    }
    let nf = n as f64;
    let err_homog = if uniaxial_xx {
        let ct = effective_xx(c, target, &problem.eps_bar);
        let cp = effective_xx(c, pred, &problem.eps_bar);
        Some(100.0 * (ct - cp).abs() / ct.abs())
    } else {
        None
    };
    let m = SampleMetrics {
        id: 0,
        err_homog,
        err_vm: 100.0 * vm_err / vm_ref.max(f64::MIN_POSITIVE),
        err_l2_strain: 100.0 * (e2 / nf).sqrt(),
        err_l2_stress: 100.0 * (s2 / nf).sqrt(),
        total_loss: loss(target, pred, c, LossMode::Total)?,
        seconds: 0.0,
    };
    ensure!(
        m.err_vm.is_finite() && m.err_l2_strain.is_finite() && m.err_l2_stress.is_finite(),
        Numerical,
        "non-finite metrics"
    );
    Ok(m)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Evaluate an arbitrary predictor over `samples`.
pub fn evaluate_with<F>(name: &str, samples: &[LabeledProblem], mut predict: F) -> Result<MetricsReport>
where
    F: FnMut(&Problem) -> Result<Field>,
{
    ensure!(!samples.is_empty(), InvalidArgument, "evaluation split is empty");
    let mut per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        let t0 = Instant::now();
        let pred = predict(&s.problem)?;
        let seconds = t0.elapsed().as_secs_f64();
        let mut m = sample_metrics(&s.problem, &s.target, &pred, s.uniaxial_xx)?;
        m.id = s.id;
        m.seconds = seconds;
        per_sample.push(m);
    }
    let homog = per_sample.iter().all(|m| m.err_homog.is_some());
    Ok(MetricsReport {
        model: name.to_string(),
        samples: per_sample.len(),
        err_homog: homog.then(|| mean(per_sample.iter().filter_map(|m| m.err_homog))),
        err_vm: mean(per_sample.iter().map(|m| m.err_vm)),
        err_l2_strain: mean(per_sample.iter().map(|m| m.err_l2_strain)),
        err_l2_stress: mean(per_sample.iter().map(|m| m.err_l2_stress)),
        total_loss: mean(per_sample.iter().map(|m| m.total_loss)),
        seconds_per_sample: mean(per_sample.iter().map(|m| m.seconds)),
        per_sample,
    })
}

pub fn evaluate(model: &Model, samples: &[LabeledProblem]) -> Result<MetricsReport> {
    evaluate_with(model.kind().name(), samples, |p| model.predict(p))
}

/// The zero-fluctuation predictor `ε̂ ≡ ε̄`.
pub fn evaluate_mean_field(samples: &[LabeledProblem]) -> Result<MetricsReport> {
    evaluate_with("mean-field", samples, |p| Ok(p.eps_bar_field()))
}

impl MetricsReport {
    /// One row per sample, without timings so repeated runs match byte for
    /// byte.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,err_homog,err_vm,err_l2_strain,err_l2_stress,total_loss\n");
        let f = |x: f64| format!("{x:.9e}");
        for m in &self.per_sample {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                m.id,
                m.err_homog.map(f).unwrap_or_default(),
                f(m.err_vm),
                f(m.err_l2_strain),
                f(m.err_l2_stress),
                f(m.total_loss)
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        let homog = self.err_homog.map(|h| format!("{h:.3}%")).unwrap_or_else(|| "n/a".into());
        format!(
            "{:<12} n={:<4} homog {:>9} vm {:>8.3}% l2-strain {:>8.3}% l2-stress {:>8.3}% total-loss {:.4e} ({:.1} ms/sample)",
            self.model,
            self.samples,
            homog,
            self.err_vm,
            self.err_l2_strain,
            self.err_l2_stress,
            self.total_loss,
            1e3 * self.seconds_per_sample
        )
    }
}

/// Per-iteration record of an iterative model. Entry `i` describes the
/// state after `i + 1` map applications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub id: u64,
    /// `‖f(h) − h‖ / ‖h‖`, NaN where `‖h‖ = 0`.
    pub residuals: Vec<f64>,
    /// Cosine between the step `Q(f(h)) − Q(h)` and the error `ε* − Q(h)`,
    /// NaN where either vanishes.
    pub alignments: Vec<f64>,
    pub err_l2_strain: Vec<f64>,
    pub err_l2_stress: Vec<f64>,
    #[serde(skip)]
    pub strains: Vec<Field>,
}

fn cosine(a: &Field, b: &Field) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return f64::NAN;
    }
    let d: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    (d / (na * nb)).clamp(-1.0, 1.0)
}

fn diff(a: &Field, b: &Field) -> Field {
    let mut out = a.clone();
    out.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x -= y);
    out
}

/// Plain iteration of the model's own update from its evaluation initial
/// state (the lifted input for `ifno`).
pub fn rollout(model: &Model, sample: &LabeledProblem, iters: usize, keep_strains: bool) -> Result<RolloutTrace> {
    ensure!(iters >= 1, InvalidArgument, "rollout needs at least one iteration");
    let p = &sample.problem;
    let map = model.iteration_map(p)?;
    let mut h = if model.kind().is_fixed_point() {
        model.initial_state(p, Phase::Eval)?
    } else {
        map.lifted_field().clone()
    };
    h = map.step(&h)?;
    let mut q = model.decode(p, &h)?;
    let mut trace = RolloutTrace {
        id: sample.id,
        residuals: Vec::with_capacity(iters),
        alignments: Vec::with_capacity(iters),
        err_l2_strain: Vec::with_capacity(iters),
        err_l2_stress: Vec::with_capacity(iters),
        strains: Vec::new(),
    };
    for _ in 0..iters {
        let fh = map.step(&h)?;
        let fq = model.decode(p, &fh)?;
        let hn = h.norm();
        trace.residuals.push(if hn == 0.0 { f64::NAN } else { normalized_residual(h.data(), fh.data()) });
        trace.alignments.push(cosine(&diff(&fq, &q), &diff(&sample.target, &q)));
        let m = sample_metrics(p, &sample.target, &q, false)?;
        trace.err_l2_strain.push(m.err_l2_strain);
        trace.err_l2_stress.push(m.err_l2_stress);
        if keep_strains {
            trace.strains.push(q);
        }
        h = fh;
        q = fq;
    }
    Ok(trace)
}

impl RolloutTrace {
    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }
}

/// Long-format CSV over several traces.
pub fn rollout_csv(traces: &[RolloutTrace]) -> String {
    let mut out = String::from("id,iteration,residual,alignment,err_l2_strain,err_l2_stress\n");
    for t in traces {
        for i in 0..t.len() {
            out.push_str(&format!(
                "{},{},{:.9e},{:.9e},{:.9e},{:.9e}\n",
                t.id,
                i + 1,
                t.residuals[i],
                t.alignments[i],
                t.err_l2_strain[i],
                t.err_l2_stress[i]
            ));
        }
    }
    out
}
