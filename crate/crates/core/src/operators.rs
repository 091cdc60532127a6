//! Operator architectures for elastic localization.
//!
//! All six kinds share one [`Network`] (lifting `P`, body `B_n`, projection
//! `Q`) and differ in what they feed it and how often:
//!
//! | kind          | input channels               | solve                                   |
//! |---------------|------------------------------|-----------------------------------------|
//! | `fno`         | `[C (21), ε̄ (6)]`            | `Q(B(P(a)))` once                        |
//! | `big-fno`     | same, wider and deeper       | same                                    |
//! | `ifno`        | same                         | `h ← h + B(h)/m`, `m` times              |
//! | `fno-deq`     | same                         | `h = P(a) + B(h)` in latent space        |
//! | `mod-fno-deq` | `[ε (6), C (21), ε̄ (6)]`     | `ε = mean(Q(B(P(x(ε)))))` in strain space |
//! | `therino`     | `[ε, C:ε, ε:C:ε]` (13)       | same, with the thermodynamic encoding    |
//!
//! Every decoded strain has its volume average reset to `ε̄`.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deq::{fixed_point_solve, ift_backward, normalized_residual, AdjointReport, AndersonConfig, DeqConfig, FixedPointMap, Linearized, SolveMode};
use crate::error::{ensure, Error, Result};
use crate::field::{Field, Grid, StiffnessField};
use crate::loss::{loss_grad, LossMode};
use crate::mandel::SymTensor2;
use crate::nn::{BodyCache, LiftCache, NetConfig, Network, ParamSlot, Params, ProjCache};

pub const THERMO_CHANNELS: usize = 13;
const STIFFNESS_CHANNELS: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorKind {
    Fno,
    BigFno,
    Ifno,
    FnoDeq,
    ModFnoDeq,
    Therino,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 6] = [
        OperatorKind::Fno,
        OperatorKind::BigFno,
        OperatorKind::Ifno,
        OperatorKind::FnoDeq,
        OperatorKind::ModFnoDeq,
        OperatorKind::Therino,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OperatorKind::Fno => "fno",
            OperatorKind::BigFno => "big-fno",
            OperatorKind::Ifno => "ifno",
            OperatorKind::FnoDeq => "fno-deq",
            OperatorKind::ModFnoDeq => "mod-fno-deq",
            OperatorKind::Therino => "therino",
        }
    }

    /// Defined by the fixed point of an update rule.
    pub fn is_fixed_point(&self) -> bool {
        matches!(self, OperatorKind::FnoDeq | OperatorKind::ModFnoDeq | OperatorKind::Therino)
    }

    pub fn is_iterative(&self) -> bool {
        self.is_fixed_point() || *self == OperatorKind::Ifno
    }

    /// Iterates directly on strain fields rather than a latent space.
    pub fn is_strain_space(&self) -> bool {
        matches!(self, OperatorKind::ModFnoDeq | OperatorKind::Therino)
    }

    pub fn input_channels(&self) -> usize {
        match self {
            OperatorKind::Fno | OperatorKind::BigFno | OperatorKind::Ifno | OperatorKind::FnoDeq => STIFFNESS_CHANNELS + 6,
            OperatorKind::ModFnoDeq => 6 + STIFFNESS_CHANNELS + 6,
            OperatorKind::Therino => THERMO_CHANNELS,
        }
    }
}

impl std::fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OperatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown operator kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: OperatorKind,
    pub width: usize,
    pub depth: usize,
    /// Training grid; fixes the stored spectral modes.
    pub grid: Grid,
    pub alpha: f64,
    /// Latent updates of the `ifno` kind.
    pub ifno_iters: usize,
    pub deq: DeqConfig,
}

impl ModelConfig {
    /// Desk-scale defaults: width 12, depth 2 (`big-fno`: width 48, depth 4).
    pub fn new(kind: OperatorKind, grid: Grid) -> Self {
        let (width, depth) = if kind == OperatorKind::BigFno { (48, 4) } else { (12, 2) };
        Self {
            kind,
            width,
            depth,
            grid,
            alpha: 0.1,
            ifno_iters: 16,
            deq: DeqConfig::default(),
        }
    }

    pub fn net_config(&self) -> NetConfig {
        let mut c = NetConfig::new(self.kind.input_channels(), self.width, self.depth, self.grid);
        c.alpha = self.alpha;
        c
    }

    pub fn param_count(&self) -> usize {
        self.net_config().param_count()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.width >= 1 && self.depth >= 1, InvalidArgument, "width and depth must be positive");
        ensure!(self.ifno_iters >= 1, InvalidArgument, "ifno needs at least one iteration");
        ensure!(self.alpha > 0.0, InvalidArgument, "alpha must be positive");
        self.deq.validate()
    }
}

/// One localization problem in scaled units.
#[derive(Debug, Clone)]
pub struct Problem {
    pub stiffness: StiffnessField,
    pub eps_bar: SymTensor2,
    c_flat: Field,
}

impl Problem {
    pub fn new(stiffness: StiffnessField, eps_bar: SymTensor2) -> Self {
        let c_flat = stiffness.flatten_upper();
        Self {
            stiffness,
            eps_bar,
            c_flat,
        }
    }

    pub fn grid(&self) -> Grid {
        self.stiffness.grid()
    }

    pub fn c_flat(&self) -> &Field {
        &self.c_flat
    }

    pub fn eps_bar_field(&self) -> Field {
        Field::constant_tensor(&self.eps_bar, self.grid())
    }
}

/// `[ε, C:ε, ε:C:ε]` per voxel.
pub fn thermo_encode(eps: &Field, c: &StiffnessField) -> Result<Field> {
    ensure!(eps.channels() == 6, Shape, "encoding expects a six-channel strain");
    ensure!(eps.grid() == c.grid(), Shape, "strain grid {} vs stiffness grid {}", eps.grid(), c.grid());
    let n = eps.voxels();
    let mut z = Field::zeros(THERMO_CHANNELS, eps.grid());
    z.data_mut()[..6 * n].copy_from_slice(eps.data());
    for v in 0..n {
        let e = eps.tensor_at(v);
        let s = c.at(v).apply(&e);
        let d = z.data_mut();
        for k in 0..6 {
            d[(6 + k) * n + v] = s.0[k];
        }
        d[12 * n + v] = e.dot(&s);
    }
    Ok(z)
}

/// Pulls a gradient on the encoding back to the strain.
pub fn thermo_encode_backward(eps: &Field, c: &StiffnessField, gz: &Field) -> Field {
    let n = eps.voxels();
    let mut g = Field::zeros(6, eps.grid());
    for v in 0..n {
        let cv = c.at(v);
        let gs = SymTensor2(std::array::from_fn(|k| gz.get(6 + k, v)));
        let a = cv.apply(&gs);
        let s = cv.apply(&eps.tensor_at(v));
        let gw = gz.get(12, v);
        g.set_tensor(v, &SymTensor2(std::array::from_fn(|k| gz.get(k, v) + a.0[k] + 2.0 * gw * s.0[k])));
    }
    g
}

/// Replace the volume average of each component by `eps_bar`.
pub fn enforce_mean_strain(eps: &Field, eps_bar: &SymTensor2) -> Result<Field> {
    ensure!(eps.channels() == 6, Shape, "mean enforcement expects a six-channel strain");
    let means = eps.channel_means();
    let mut out = eps.clone();
    for c in 0..6 {
        let shift = eps_bar.0[c] - means[c];
        out.channel_mut(c).iter_mut().for_each(|x| *x += shift);
    }
    Ok(out)
}

fn subtract_mean(g: &mut Field) {
    let means = g.channel_means();
    for (c, m) in means.into_iter().enumerate() {
        g.channel_mut(c).iter_mut().for_each(|x| *x -= m);
    }
}

fn add_into(a: &mut Field, b: &Field) {
    a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Train,
    Eval,
}

/// How one training gradient is formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradOptions {
    /// Map evaluations in the forward rollout of fixed-point kinds.
    pub depth: usize,
    pub mode: SolveMode,
    pub forward_tol: Option<f64>,
    pub backward_tol: f64,
    pub backward_max_iters: usize,
    pub phase: Phase,
    pub anderson: AndersonConfig,
}

impl GradOptions {
    /// Plain rollout of the given depth from the training initial state.
    pub fn training(cfg: &DeqConfig, depth: usize) -> Self {
        Self {
            depth,
            mode: SolveMode::Plain,
            forward_tol: None,
            backward_tol: cfg.backward_tol,
            backward_max_iters: cfg.backward_max_iters,
            phase: Phase::Train,
            anderson: cfg.anderson,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub loss: f64,
    pub forward_residual: Option<f64>,
    pub adjoint: Option<AdjointReport>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    net: Network,
    params: Params,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let net = Network::new(config.net_config(), &mut params)?;
        net.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { config, net, params })
    }

    /// Rebuild a model from stored parameters.
    pub fn from_parts(config: ModelConfig, slots: &[ParamSlot], data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let net = Network::new(config.net_config(), &mut params)?;
        params.load(slots, data)?;
        Ok(Self { config, net, params })
    }

    pub fn kind(&self) -> OperatorKind {
        self.config.kind
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// Latent or strain state used to start a fixed-point solve.
    pub fn initial_state(&self, problem: &Problem, phase: Phase) -> Result<Field> {
        let kind = self.kind();
        ensure!(kind.is_fixed_point(), InvalidArgument, "{kind} has no fixed-point state");
        let g = problem.grid();
        Ok(match (kind, phase) {
            (OperatorKind::FnoDeq, _) => Field::zeros(self.config.width, g),
            (_, Phase::Train) => problem.eps_bar_field(),
            (_, Phase::Eval) => Field::zeros(6, g),
        })
    }

    fn static_input(&self, problem: &Problem) -> Result<Field> {
        Field::concat(&[problem.c_flat(), &problem.eps_bar_field()])
    }

    fn strain_input(&self, problem: &Problem, eps: &Field) -> Result<Field> {
        match self.kind() {
            OperatorKind::Therino => thermo_encode(eps, &problem.stiffness),
            OperatorKind::ModFnoDeq => Field::concat(&[eps, problem.c_flat(), &problem.eps_bar_field()]),
            k => Err(Error::InvalidArgument(format!("{k} does not iterate on strains"))),
        }
    }

    /// The iteration map of an iterative kind (`ifno` included).
    pub fn iteration_map<'a>(&'a self, problem: &'a Problem) -> Result<UpdateMap<'a>> {
        let kind = self.kind();
        ensure!(kind.is_iterative(), InvalidArgument, "{kind} is a feed-forward operator");
        let lifted = if kind.is_strain_space() {
            None
        } else {
            Some(self.net.lift(&self.params, &self.static_input(problem)?)?)
        };
        let channels = if kind.is_strain_space() { 6 } else { self.config.width };
        Ok(UpdateMap {
            model: self,
            problem,
            lifted,
            channels,
        })
    }

    /// One application of the update rule of a fixed-point kind.
    pub fn update(&self, problem: &Problem, h: &Field) -> Result<Field> {
        let kind = self.kind();
        ensure!(kind.is_fixed_point(), InvalidArgument, "{kind} is not a fixed-point model");
        self.iteration_map(problem)?.step(h)
    }

    /// Decoded strain of a state.
    pub fn decode(&self, problem: &Problem, h: &Field) -> Result<Field> {
        if self.kind().is_strain_space() {
            enforce_mean_strain(h, &problem.eps_bar)
        } else {
            let y = self.net.project_only(&self.params, h)?;
            enforce_mean_strain(&y, &problem.eps_bar)
        }
    }

    /// Evaluation-mode prediction in scaled units.
    pub fn predict(&self, problem: &Problem) -> Result<Field> {
        match self.kind() {
            OperatorKind::Fno | OperatorKind::BigFno => {
                let y = self.net.forward(&self.params, &self.static_input(problem)?)?;
                enforce_mean_strain(&y, &problem.eps_bar)
            }
            OperatorKind::Ifno => {
                let map = self.iteration_map(problem)?;
                let mut h = map.lifted_field().clone();
                for _ in 0..self.config.ifno_iters {
                    h = map.step(&h)?;
                }
                self.decode(problem, &h)
            }
            _ => {
                let deq = &self.config.deq;
                let map = self.iteration_map(problem)?;
                let h0 = self.initial_state(problem, Phase::Eval)?;
                let (h, _) = map.solve(h0, deq.eval_iters, deq.eval_mode, &deq.anderson, deq.forward_tol)?;
                self.decode(problem, &h)
            }
        }
    }

    /// Loss against `target` and its parameter gradient, accumulated into
    /// `grads`.
    pub fn gradient(&self, problem: &Problem, target: &Field, mode: LossMode, opts: &GradOptions, grads: &mut [f64]) -> Result<GradReport> {
        ensure!(grads.len() == self.params.len(), Shape, "gradient buffer has {} entries, model has {}", grads.len(), self.params.len());
        let p = &self.params;
        let net = &self.net;
        match self.kind() {
            OperatorKind::Fno | OperatorKind::BigFno => {
                let x = self.static_input(problem)?;
                let (lifted, lc) = net.lift(p, &x)?;
                let (h, bc) = net.body(p, &lifted, &lifted)?;
                let (y, pc) = net.project(p, &h)?;
                let pred = enforce_mean_strain(&y, &problem.eps_bar)?;
                let (loss, mut g) = loss_grad(target, &pred, &problem.stiffness, mode)?;
                subtract_mean(&mut g);
                let gh = net.project_backward(p, &pc, &g, Some(grads));
                let (mut glift, ginj) = net.body_backward(p, &bc, &lifted, &gh, Some(grads));
                add_into(&mut glift, &ginj);
                net.lift_backward(p, &lc, &glift, Some(grads));
                Ok(GradReport {
                    loss,
                    forward_residual: None,
                    adjoint: None,
                })
            }
            OperatorKind::Ifno => {
                let x = self.static_input(problem)?;
                let (lifted, lc) = net.lift(p, &x)?;
                let m = self.config.ifno_iters;
                let scale = 1.0 / m as f64;
                let mut h = lifted.clone();
                let mut caches = Vec::with_capacity(m);
                for _ in 0..m {
                    let (b, c) = net.body(p, &h, &lifted)?;
                    h.data_mut().iter_mut().zip(b.data()).for_each(|(a, b)| *a += scale * b);
                    caches.push(c);
                }
                let (y, pc) = net.project(p, &h)?;
                let pred = enforce_mean_strain(&y, &problem.eps_bar)?;
                let (loss, mut g) = loss_grad(target, &pred, &problem.stiffness, mode)?;
                subtract_mean(&mut g);
                let mut gh = net.project_backward(p, &pc, &g, Some(grads));
                let mut ginj_total = Field::zeros(lifted.channels(), lifted.grid());
                for c in caches.iter().rev() {
                    let mut gb_in = gh.clone();
                    gb_in.data_mut().iter_mut().for_each(|v| *v *= scale);
                    let (gb, ginj) = net.body_backward(p, c, &lifted, &gb_in, Some(grads));
                    add_into(&mut gh, &gb);
                    add_into(&mut ginj_total, &ginj);
                }
                add_into(&mut gh, &ginj_total);
                net.lift_backward(p, &lc, &gh, Some(grads));
                Ok(GradReport {
                    loss,
                    forward_residual: None,
                    adjoint: None,
                })
            }
            _ => {
                ensure!(opts.depth >= 1, InvalidArgument, "rollout depth must be at least 1");
                let map = self.iteration_map(problem)?;
                let h0 = self.initial_state(problem, opts.phase)?;
                let pre = if opts.depth > 1 {
                    map.solve(h0, opts.depth - 1, opts.mode, &opts.anderson, opts.forward_tol)?.0
                } else {
                    h0
                };
                let (out, lin) = map.linearize(&pre)?;
                let forward_residual = normalized_residual(pre.data(), out.data());
                let (loss, g_state) = if self.kind().is_strain_space() {
                    loss_grad(target, &out, &problem.stiffness, mode)?
                } else {
                    let (y, pc) = net.project(p, &out)?;
                    let pred = enforce_mean_strain(&y, &problem.eps_bar)?;
                    let (loss, mut g) = loss_grad(target, &pred, &problem.stiffness, mode)?;
                    subtract_mean(&mut g);
                    (loss, net.project_backward(p, &pc, &g, Some(grads)))
                };
                let (_, adjoint) = ift_backward(&lin, g_state.data(), opts.backward_tol, opts.backward_max_iters, &opts.anderson, grads)?;
                Ok(GradReport {
                    loss,
                    forward_residual: Some(forward_residual),
                    adjoint: Some(adjoint),
                })
            }
        }
    }
}

/// Update rule of an iterative model bound to one problem.
pub struct UpdateMap<'a> {
    model: &'a Model,
    problem: &'a Problem,
    lifted: Option<(Field, LiftCache)>,
    channels: usize,
}

enum LinCache {
    Latent(BodyCache),
    Strain {
        eps: Field,
        lift: LiftCache,
        lifted: Field,
        body: BodyCache,
        proj: ProjCache,
    },
}

/// The update rule linearized at one state.
pub struct UpdateLin<'m, 'a> {
    map: &'m UpdateMap<'a>,
    cache: LinCache,
}

impl<'a> UpdateMap<'a> {
    pub fn state_channels(&self) -> usize {
        self.channels
    }

    pub fn lifted_field(&self) -> &Field {
        &self.lifted.as_ref().expect("latent kinds carry a lifted input").0
    }

    fn as_field(&self, h: &[f64]) -> Result<Field> {
        Field::from_vec(self.channels, self.problem.grid(), h.to_vec())
    }

    pub fn step(&self, h: &Field) -> Result<Field> {
        ensure!(h.channels() == self.channels && h.grid() == self.problem.grid(), Shape, "state does not match the update map");
        let (m, p) = (self.model, &self.model.params);
        match m.kind() {
            OperatorKind::FnoDeq => {
                let lifted = self.lifted_field();
                let (mut b, _) = m.net.body(p, h, lifted)?;
                add_into(&mut b, lifted);
                Ok(b)
            }
            OperatorKind::Ifno => {
                let (b, _) = m.net.body(p, h, self.lifted_field())?;
                let scale = 1.0 / m.config.ifno_iters as f64;
                let mut out = h.clone();
                out.data_mut().iter_mut().zip(b.data()).for_each(|(a, b)| *a += scale * b);
                Ok(out)
            }
            _ => {
                let x = m.strain_input(self.problem, h)?;
                let (lifted, _) = m.net.lift(p, &x)?;
                let (b, _) = m.net.body(p, &lifted, &lifted)?;
                let y = m.net.project_only(p, &b)?;
                enforce_mean_strain(&y, &self.problem.eps_bar)
            }
        }
    }

    /// Evaluate the update at `h`, keeping what the adjoint needs.
    pub fn linearize(&self, h: &Field) -> Result<(Field, UpdateLin<'_, 'a>)> {
        let (m, p) = (self.model, &self.model.params);
        match m.kind() {
            OperatorKind::FnoDeq => {
                let lifted = self.lifted_field();
                let (mut b, body) = m.net.body(p, h, lifted)?;
                add_into(&mut b, lifted);
                Ok((
                    b,
                    UpdateLin {
                        map: self,
                        cache: LinCache::Latent(body),
                    },
                ))
            }
            OperatorKind::ModFnoDeq | OperatorKind::Therino => {
                let x = m.strain_input(self.problem, h)?;
                let (lifted, lift) = m.net.lift(p, &x)?;
                let (b, body) = m.net.body(p, &lifted, &lifted)?;
                let (y, proj) = m.net.project(p, &b)?;
                let out = enforce_mean_strain(&y, &self.problem.eps_bar)?;
                Ok((
                    out,
                    UpdateLin {
                        map: self,
                        cache: LinCache::Strain {
                            eps: h.clone(),
                            lift,
                            lifted,
                            body,
                            proj,
                        },
                    },
                ))
            }
            k => Err(Error::InvalidArgument(format!("{k} has no implicit update to linearize"))),
        }
    }

    pub fn solve(&self, h0: Field, iters: usize, mode: SolveMode, anderson: &AndersonConfig, tol: Option<f64>) -> Result<(Field, Vec<f64>)> {
        let res = fixed_point_solve(self, h0.into_vec(), iters, mode, anderson, tol)?;
        Ok((self.as_field(&res.state)?, res.residuals))
    }
}

impl FixedPointMap for UpdateMap<'_> {
    fn apply(&self, h: &[f64]) -> Result<Vec<f64>> {
        Ok(self.step(&self.as_field(h)?)?.into_vec())
    }
}

impl UpdateLin<'_, '_> {
    fn backprop(&self, w: &[f64], mut grads: Option<&mut [f64]>) -> Vec<f64> {
        let map = self.map;
        let (m, p) = (map.model, &map.model.params);
        let wf = map.as_field(w).expect("adjoint vector matches the state shape");
        match &self.cache {
            LinCache::Latent(body) => {
                let lifted = map.lifted_field();
                let (gh, ginj) = m.net.body_backward(p, body, lifted, &wf, grads.as_deref_mut());
                if let Some(grads) = grads {
                    let mut glift = wf;
                    add_into(&mut glift, &ginj);
                    let lc = &map.lifted.as_ref().expect("latent kinds carry a lifted input").1;
                    m.net.lift_backward(p, lc, &glift, Some(grads));
                }
                gh.into_vec()
            }
            LinCache::Strain {
                eps,
                lift,
                lifted,
                body,
                proj,
            } => {
                let mut g = wf;
                subtract_mean(&mut g);
                let gh = m.net.project_backward(p, proj, &g, grads.as_deref_mut());
                let (mut glift, ginj) = m.net.body_backward(p, body, lifted, &gh, grads.as_deref_mut());
                add_into(&mut glift, &ginj);
                let gx = m.net.lift_backward(p, lift, &glift, grads);
                if m.kind() == OperatorKind::Therino {
                    thermo_encode_backward(eps, &map.problem.stiffness, &gx).into_vec()
                } else {
                    gx.data()[..6 * eps.voxels()].to_vec()
                }
            }
        }
    }
}

impl Linearized for UpdateLin<'_, '_> {
    fn vjp_state(&self, w: &[f64]) -> Vec<f64> {
        self.backprop(w, None)
    }

    fn vjp_params(&self, w: &[f64], grads: &mut [f64]) {
        self.backprop(w, Some(grads));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mandel::{PhaseParams, ScaleSet};
    use crate::microgen::{grf_microstructure, GenParams};
    use rand::Rng;

    fn problem(grid: Grid, seed: u64) -> Problem {
        let params = PhaseParams::with_contrast(10.0);
        let gen = GenParams {
            feature_sizes: [1.5, 1.5, 1.5],
            volume_fraction: 0.5,
        };
        let ms = grf_microstructure(&gen, grid, params, seed).unwrap();
        let eps_bar = SymTensor2([0.001, 0.0003, -0.0002, 0.0001, 0.0, 0.0002]);
        let scales = ScaleSet::for_phases(&eps_bar, &params).unwrap();
        Problem::new(scales.scale_stiffness(&ms.to_stiffness().unwrap()), eps_bar.scaled(1.0 / scales.strain_scale))
    }

    #[test]
    fn encoding_channels() {
        let g = Grid::cubic(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = Field::from_vec(6, g, (0..6 * g.voxels()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let id = StiffnessField::uniform(crate::mandel::SymTensor4::identity(), g);
        let z = thermo_encode(&eps, &id).unwrap();
        for v in 0..g.voxels() {
            for k in 0..6 {
                assert_eq!(z.get(k, v), z.get(6 + k, v));
            }
            assert!((z.get(12, v) - eps.tensor_at(v).norm().powi(2)).abs() < 1e-12);
        }
        assert!(thermo_encode(&Field::zeros(6, g), &id).unwrap().data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn encoding_gradient() {
        let g = Grid::cubic(4);
        let pr = problem(g, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eps: Vec<f64> = (0..6 * g.voxels()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe = Field::from_vec(13, g, (0..13 * g.voxels()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let err = crate::nn::grad_check(
            |v| {
                let z = thermo_encode(&Field::from_vec(6, g, v.to_vec()).unwrap(), &pr.stiffness).unwrap();
                z.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            },
            |v| thermo_encode_backward(&Field::from_vec(6, g, v.to_vec()).unwrap(), &pr.stiffness, &probe).into_vec(),
            &eps,
            6,
            1e-5,
            &mut rng,
        );
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn mean_enforcement() {
        let g = Grid::cubic(4);
        let bar = SymTensor2([1.0, 0.5, 0.0, 0.2, -0.1, 0.3]);
        let z = enforce_mean_strain(&Field::zeros(6, g), &bar).unwrap();
        assert_eq!(z, Field::constant_tensor(&bar, g));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Field::from_vec(6, g, (0..6 * g.voxels()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let once = enforce_mean_strain(&x, &bar).unwrap();
        let twice = enforce_mean_strain(&once, &bar).unwrap();
        assert!(once.max_abs_diff(&twice) < 1e-15);
        for (m, b) in once.channel_means().iter().zip(bar.0) {
            assert!((m - b).abs() < 1e-14);
        }
    }

    #[test]
    fn initial_states() {
        let g = Grid::cubic(4);
        let pr = problem(g, 1);
        let t = Model::new(ModelConfig::new(OperatorKind::Therino, g), 0).unwrap();
        assert_eq!(t.initial_state(&pr, Phase::Train).unwrap(), Field::constant_tensor(&pr.eps_bar, g));
        assert_eq!(t.initial_state(&pr, Phase::Eval).unwrap(), Field::zeros(6, g));
        let d = Model::new(ModelConfig::new(OperatorKind::FnoDeq, g), 0).unwrap();
        assert_eq!(d.initial_state(&pr, Phase::Train).unwrap(), Field::zeros(12, g));
        let f = Model::new(ModelConfig::new(OperatorKind::Fno, g), 0).unwrap();
        assert!(f.initial_state(&pr, Phase::Eval).is_err());
        assert!(f.update(&pr, &Field::zeros(6, g)).is_err());
    }

    #[test]
    fn one_update_is_one_body_call() {
        let g = Grid::cubic(4);
        let pr = problem(g, 1);
        for kind in [OperatorKind::FnoDeq, OperatorKind::ModFnoDeq, OperatorKind::Therino] {
            let m = Model::new(ModelConfig::new(kind, g), 0).unwrap();
            let h = m.initial_state(&pr, Phase::Train).unwrap();
            let before = m.network().body_calls();
            m.update(&pr, &h).unwrap();
            assert_eq!(m.network().body_calls() - before, 1, "{kind}");
        }
    }

    #[test]
    fn parameter_counts_differ_only_by_input_width() {
        let g = Grid::cubic(16);
        let base = ModelConfig::new(OperatorKind::Fno, g).param_count();
        for kind in [OperatorKind::Ifno, OperatorKind::FnoDeq, OperatorKind::ModFnoDeq, OperatorKind::Therino] {
            let c = ModelConfig::new(kind, g);
            let diff = c.param_count() as i64 - base as i64;
            // GroupNorm (2 per channel) plus one lifting weight column
            let dc = c.kind.input_channels() as i64 - 27;
            assert_eq!(diff, dc * (2 + c.width as i64), "{kind}");
            let m = Model::new(c, 0).unwrap();
            assert_eq!(m.params().len(), c.param_count());
        }
    }

    #[test]
    fn gradients_match_finite_differences_for_explicit_kinds() {
        let g = Grid::cubic(4);
        let pr = problem(g, 5);
        let target = enforce_mean_strain(&Field::constant_tensor(&SymTensor2([0.3, -0.2, 0.1, 0.0, 0.2, -0.1]), g), &pr.eps_bar).unwrap();
        for kind in [OperatorKind::Fno, OperatorKind::Ifno] {
            let mut cfg = ModelConfig::new(kind, g);
            cfg.width = 4;
            cfg.ifno_iters = 3;
            let model = Model::new(cfg, 7).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let opts = GradOptions::training(&cfg.deq, 1);
            let err = crate::nn::grad_check(
                |v| {
                    let mut m = model.clone();
                    m.params_mut().data_mut().copy_from_slice(v);
                    crate::loss::loss(&target, &m.predict(&pr).unwrap(), &pr.stiffness, LossMode::Total).unwrap()
                },
                |v| {
                    let mut m = model.clone();
                    m.params_mut().data_mut().copy_from_slice(v);
                    let mut gr = m.params().zeros_like();
                    m.gradient(&pr, &target, LossMode::Total, &opts, &mut gr).unwrap();
                    gr
                },
                model.params().data(),
                4,
                1e-5,
                &mut rng,
            );
            assert!(err < 1e-5, "{kind}: {err}");
        }
    }

    /// Converged implicit gradients versus finite differences of the
    /// converged prediction.
    #[test]
    fn implicit_gradients_match_finite_differences() {
        let g = Grid::cubic(4);
        let pr = problem(g, 6);
        let target = enforce_mean_strain(&Field::constant_tensor(&SymTensor2([0.3, -0.2, 0.1, 0.0, 0.2, -0.1]), g), &pr.eps_bar).unwrap();
        for kind in [OperatorKind::FnoDeq, OperatorKind::ModFnoDeq, OperatorKind::Therino] {
            let mut cfg = ModelConfig::new(kind, g);
            cfg.width = 4;
            cfg.deq.eval_iters = 400;
            cfg.deq.forward_tol = Some(1e-13);
            let mut model = Model::new(cfg, 9).unwrap();
            // shrink the update so the map is a contraction
            let id = model.params().find(if kind == OperatorKind::FnoDeq { "layer1.w.g" } else { "proj.out.g" }).unwrap();
            model.params_mut().get_mut(id).iter_mut().for_each(|v| *v *= 0.1);
            let opts = GradOptions {
                depth: 400,
                mode: SolveMode::Anderson,
                forward_tol: Some(1e-13),
                backward_tol: 1e-12,
                backward_max_iters: 400,
                phase: Phase::Eval,
                anderson: cfg.deq.anderson,
            };
            let mut gr = model.params().zeros_like();
            let rep = model.gradient(&pr, &target, LossMode::Total, &opts, &mut gr).unwrap();
            assert!(rep.forward_residual.unwrap() < 1e-6);
            assert!(rep.adjoint.as_ref().unwrap().converged);
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let err = crate::nn::grad_check(
                |v| {
                    let mut m = model.clone();
                    m.params_mut().data_mut().copy_from_slice(v);
                    crate::loss::loss(&target, &m.predict(&pr).unwrap(), &pr.stiffness, LossMode::Total).unwrap()
                },
                |_| gr.clone(),
                model.params().data(),
                4,
                1e-5,
                &mut rng,
            );
            assert!(err < 1e-3, "{kind}: {err}");
        }
    }
}
