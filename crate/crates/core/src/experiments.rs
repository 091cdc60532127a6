//! Contrast extrapolation and figure slices.

use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledProblem, Sample};
use crate::error::{ensure, Result};
use crate::field::{Field, StiffnessField};
use crate::metrics::{evaluate, MetricsReport};
use crate::operators::Model;
use crate::oracle::SolveOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub err_homog: Option<f64>,
    pub err_vm: f64,
    pub err_l2_strain: f64,
    pub err_l2_stress: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationReport {
    pub reference_kappa: f64,
    pub target_kappa: f64,
    pub reference: MetricsReport,
    pub target: MetricsReport,
    /// Target error divided by reference error, per metric.
    pub degradation: Degradation,
}

/// Relabel `samples` at a fixed contrast. Each problem is rescaled from its
/// new contrast and loading alone.
pub fn relabel_at_contrast(samples: &[&Sample], kappa: f64, oracle: &SolveOptions) -> Result<Vec<LabeledProblem>> {
    ensure!(kappa > 0.0, InvalidArgument, "contrast must be positive, got {kappa}");
    samples
        .iter()
        .map(|s| {
            let mut t = s.with_contrast(kappa);
            t.solve(oracle)?;
            t.labeled()
        })
        .collect()
}

/// Evaluate `model` on the same structures at an in-distribution and an
/// out-of-distribution contrast.
pub fn extrapolate(model: &Model, samples: &[&Sample], reference_kappa: f64, target_kappa: f64, oracle: &SolveOptions) -> Result<ExtrapolationReport> {
    ensure!(!samples.is_empty(), InvalidArgument, "no samples to extrapolate on");
    let reference = evaluate(model, &relabel_at_contrast(samples, reference_kappa, oracle)?)?;
    let target = evaluate(model, &relabel_at_contrast(samples, target_kappa, oracle)?)?;
    let ratio = |a: f64, b: f64| a / b;
    let degradation = Degradation {
        err_homog: target.err_homog.zip(reference.err_homog).map(|(a, b)| ratio(a, b)),
        err_vm: ratio(target.err_vm, reference.err_vm),
        err_l2_strain: ratio(target.err_l2_strain, reference.err_l2_strain),
        err_l2_stress: ratio(target.err_l2_stress, reference.err_l2_stress),
    };
    Ok(ExtrapolationReport {
        reference_kappa,
        target_kappa,
        reference,
        target,
        degradation,
    })
}

/// A scalar map on one constant-z plane; `values[x * ny + y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub name: String,
    pub z: usize,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

fn plane(values: &[f64], f: &Field, z: usize, name: &str) -> Slice {
    let g = f.grid();
    let mut out = Vec::with_capacity(g.nx * g.ny);
    for x in 0..g.nx {
        for y in 0..g.ny {
            out.push(values[g.index(x, y, z)]);
        }
    }
    Slice {
        name: name.to_string(),
        z,
        nx: g.nx,
        ny: g.ny,
        values: out,
    }
}

/// Equivalent strain and equivalent stress on the plane `z`.
pub fn equivalent_slices(strain: &Field, c: &StiffnessField, z: usize, prefix: &str) -> Result<[Slice; 2]> {
    ensure!(strain.channels() == 6, Shape, "slices need a six-channel strain field");
    ensure!(strain.grid() == c.grid(), Shape, "strain grid {} vs stiffness grid {}", strain.grid(), c.grid());
    ensure!(z < strain.grid().nz, InvalidArgument, "slice z = {z} outside the grid {}", strain.grid());
    let n = strain.voxels();
    let mut eq_strain = Vec::with_capacity(n);
    let mut eq_stress = Vec::with_capacity(n);
    for v in 0..n {
        let e = strain.tensor_at(v);
        eq_strain.push(e.equivalent_strain());
        eq_stress.push(c.at(v).apply(&e).equivalent_stress());
    }
    Ok([
        plane(&eq_strain, strain, z, &format!("{prefix}_eq_strain")),
        plane(&eq_stress, strain, z, &format!("{prefix}_eq_stress")),
    ])
}

impl Slice {
    /// `nx` rows of `ny` comma-separated values.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.ny) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Plain (P2) greyscale image, min-max scaled to 0..=255, one image row
    /// per x index.
    pub fn to_pgm(&self) -> String {
        let (lo, hi) = self.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut out = format!("P2\n# {} z={} min={lo:.6e} max={hi:.6e}\n{} {}\n255\n", self.name, self.z, self.ny, self.nx);
        for row in self.values.chunks(self.ny) {
            let px: Vec<String> = row.iter().map(|v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0).to_string()).collect();
            out.push_str(&px.join(" "));
            out.push('\n');
        }
        out
    }
}
