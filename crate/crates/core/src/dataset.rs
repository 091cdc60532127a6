//! In-memory datasets: generation specs, split assignment and oracle labels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::field::{Field, Grid};
use crate::mandel::{PhaseParams, ScaleSet, SymTensor2};
use crate::microgen::{grf_microstructure, random_loading, rng_for, sample_gen_params, GenParams, GenRanges, Microstructure};
use crate::operators::Problem;
use crate::oracle::{ls_solve, SolveOptions, SolveReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ContrastSpec {
    Fixed { kappa: f64 },
    /// Uniform choice per sample.
    Choice { values: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LoadingSpec {
    UniaxialXx { magnitude: f64 },
    /// Direction uniform on the unit sphere of Mandel vectors.
    Random6Sphere { magnitude: f64 },
}

impl LoadingSpec {
    pub fn is_uniaxial_xx(&self) -> bool {
        matches!(self, LoadingSpec::UniaxialXx { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub samples: usize,
    pub grid: usize,
    pub seed: u64,
    pub contrast: ContrastSpec,
    pub loading: LoadingSpec,
    /// Generator design ranges; the grid-dependent default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranges: Option<GenRanges>,
    pub e1: f64,
    pub nu1: f64,
    pub nu2: f64,
    pub oracle: SolveOptions,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::desk(160, 0)
    }
}

impl DatasetSpec {
    /// 16³, κ = 10, 0.1% x-x loading.
    pub fn desk(samples: usize, seed: u64) -> Self {
        let grid = 16;
        Self {
            samples,
            grid,
            seed,
            contrast: ContrastSpec::Fixed { kappa: 10.0 },
            loading: LoadingSpec::UniaxialXx { magnitude: 1e-3 },
            ranges: None,
            e1: 120.0,
            nu1: 0.3,
            nu2: 0.3,
            oracle: SolveOptions::default(),
        }
    }

    pub fn grid(&self) -> Grid {
        Grid::cubic(self.grid)
    }

    pub fn ranges(&self) -> GenRanges {
        self.ranges.unwrap_or_else(|| GenRanges::default_for(self.grid()))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.samples >= 1, InvalidArgument, "dataset needs at least one sample");
        ensure!(self.grid >= 4, InvalidArgument, "grid must be at least 4, got {}", self.grid);
        match &self.contrast {
            ContrastSpec::Fixed { kappa } => ensure!(*kappa > 0.0, InvalidArgument, "contrast must be positive"),
            ContrastSpec::Choice { values } => {
                ensure!(!values.is_empty(), InvalidArgument, "contrast choice list is empty");
                ensure!(values.iter().all(|k| *k > 0.0), InvalidArgument, "contrasts must be positive");
            }
        }
        let m = match self.loading {
            LoadingSpec::UniaxialXx { magnitude } | LoadingSpec::Random6Sphere { magnitude } => magnitude,
        };
        ensure!(m > 0.0 && m.is_finite(), InvalidArgument, "loading magnitude must be positive");
        PhaseParams::new(self.e1, self.nu1, self.nu2, 1.0)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| crate::Error::InvalidArgument(format!("unknown split '{s}'")))
    }
}

/// 40/20/40 split of `n` indices, ordered by a stable hash of the index.
pub fn assign_splits(n: usize) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (crate::format::fnv1a64(&(i as u64).to_le_bytes()), i));
    let n_train = (0.4 * n as f64).round() as usize;
    let n_val = ((0.2 * n as f64).round() as usize).min(n - n_train);
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: u64,
    pub split: Split,
    pub kappa: f64,
    pub eps_bar: [f64; 6],
    pub feature_sizes: [f64; 3],
    pub volume_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub meta: SampleMeta,
    pub microstructure: Microstructure,
    /// Oracle strain field in physical units.
    pub strain: Option<Field>,
    pub report: Option<SolveReport>,
}

/// A scaled problem with its scaled reference strain.
#[derive(Debug, Clone)]
pub struct LabeledProblem {
    pub id: u64,
    pub problem: Problem,
    pub target: Field,
    pub scales: ScaleSet,
    /// Whether the loading is pure x-x, which makes the effective modulus
    /// well defined.
    pub uniaxial_xx: bool,
}

impl Sample {
    pub fn eps_bar(&self) -> SymTensor2 {
        SymTensor2(self.meta.eps_bar)
    }

    /// Scales from the contrast and loading only, never from the realized
    /// structure or its labels.
    pub fn scales(&self) -> Result<ScaleSet> {
        ScaleSet::for_phases(&self.eps_bar(), &self.microstructure.params)
    }

    pub fn problem(&self) -> Result<Problem> {
        let s = self.scales()?;
        let c = self.microstructure.to_stiffness()?;
        Ok(Problem::new(s.scale_stiffness(&c), self.eps_bar().scaled(1.0 / s.strain_scale)))
    }

    pub fn labeled(&self) -> Result<LabeledProblem> {
        let strain = self
            .strain
            .as_ref()
            .ok_or_else(|| crate::Error::Data(format!("sample {} has no strain label", self.meta.id)))?;
        let scales = self.scales()?;
        let problem = self.problem()?;
        let e = self.eps_bar();
        let uniaxial_xx = e.0[0] != 0.0 && e.0[1..].iter().all(|x| *x == 0.0);
        Ok(LabeledProblem {
            id: self.meta.id,
            target: scales.scale_field(strain, crate::mandel::Quantity::Strain),
            problem,
            scales,
            uniaxial_xx,
        })
    }

    /// Same structure and loading at another contrast, without a label.
    pub fn with_contrast(&self, kappa: f64) -> Sample {
        let mut s = self.clone();
        s.microstructure = self.microstructure.with_contrast(kappa);
        s.meta.kappa = kappa;
        s.strain = None;
        s.report = None;
        s
    }

    pub fn solve(&mut self, opts: &SolveOptions) -> Result<()> {
        let c = self.microstructure.to_stiffness()?;
        let (eps, report) = ls_solve(&c, &self.eps_bar(), opts)?;
        if !report.converged {
            log::warn!(
                "oracle for sample {} stopped at residual {:.3e} after {} iterations",
                self.meta.id,
                report.residuals.last().copied().unwrap_or(f64::NAN),
                report.iterations
            );
        }
        self.strain = Some(eps);
        self.report = Some(report);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

/// Draw structures, contrasts and loadings. Labels are attached by
/// [`Dataset::solve_labels`].
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let grid = spec.grid();
    let gens = sample_gen_params(spec.samples, &spec.ranges(), spec.seed)?;
    let splits = assign_splits(spec.samples);
    let samples = gens
        .par_iter()
        .enumerate()
        .map(|(i, gen)| build_sample(spec, grid, i, gen, splits[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { spec: spec.clone(), samples })
}

fn build_sample(spec: &DatasetSpec, grid: Grid, i: usize, gen: &GenParams, split: Split) -> Result<Sample> {
    use rand::Rng;
    let mut rng = rng_for(spec.seed, i as u64);
    let kappa = match &spec.contrast {
        ContrastSpec::Fixed { kappa } => *kappa,
        ContrastSpec::Choice { values } => values[rng.random_range(0..values.len())],
    };
    let eps_bar = match spec.loading {
        LoadingSpec::UniaxialXx { magnitude } => SymTensor2::uniaxial_xx(magnitude),
        LoadingSpec::Random6Sphere { magnitude } => random_loading(&mut rng, magnitude),
    };
    // 63 bits so the seed survives formats with signed integers
    let seed: u64 = rng.random::<u64>() >> 1;
    let params = PhaseParams::new(spec.e1, spec.nu1, spec.nu2, kappa)?;
    let ms = grf_microstructure(gen, grid, params, seed)?;
    Ok(Sample {
        meta: SampleMeta {
            id: i as u64,
            split,
            kappa,
            eps_bar: eps_bar.0,
            feature_sizes: gen.feature_sizes,
            volume_fraction: gen.volume_fraction,
            seed,
        },
        microstructure: ms,
        strain: None,
        report: None,
    })
}

impl Dataset {
    pub fn grid(&self) -> Grid {
        self.spec.grid()
    }

    /// Solve every unlabeled sample. Output order never depends on threading.
    pub fn solve_labels(&mut self) -> Result<()> {
        let opts = self.spec.oracle;
        self.samples
            .par_iter_mut()
            .filter(|s| s.strain.is_none())
            .try_for_each(|s| s.solve(&opts))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.meta.split == split)
    }

    pub fn labeled(&self, split: Split) -> Result<Vec<LabeledProblem>> {
        self.split(split).map(Sample::labeled).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u64> = self.samples.iter().map(|s| s.meta.id).collect();
        ids.sort_unstable();
        ids.dedup();
        ensure!(ids.len() == self.samples.len(), Data, "duplicate sample ids");
        for s in &self.samples {
            ensure!(s.microstructure.grid == self.grid(), Data, "sample {} lives on {} instead of {}", s.meta.id, s.microstructure.grid, self.grid());
            if let Some(e) = &s.strain {
                ensure!(e.channels() == 6 && e.grid() == self.grid(), Data, "sample {} has a malformed strain label", s.meta.id);
            }
        }
        Ok(())
    }
}
