//! Weighted quadratic strain-error norms.
//!
//! With `e = ε̂ − ε*` in scaled units, every mode is the voxel average of
//! `e · A e` for a per-voxel weight `A`: `I` (strain), `C` (energy),
//! `C:C` (stress) or `I + C:C` (total).

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::field::{Field, StiffnessField};
use crate::mandel::SymTensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    Strain,
    Energy,
    Stress,
    Total,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [LossMode::Strain, LossMode::Energy, LossMode::Stress, LossMode::Total];

    pub fn name(&self) -> &'static str {
        match self {
            LossMode::Strain => "strain",
            LossMode::Energy => "energy",
            LossMode::Stress => "stress",
            LossMode::Total => "total",
        }
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss mode '{s}'")))
    }
}

fn weighted(e: &SymTensor2, c: &crate::mandel::SymTensor4, mode: LossMode) -> SymTensor2 {
    match mode {
        LossMode::Strain => *e,
        LossMode::Energy => c.apply(e),
        LossMode::Stress => c.apply(&c.apply(e)),
        LossMode::Total => {
            let s = c.apply(&c.apply(e));
            SymTensor2(std::array::from_fn(|k| e.0[k] + s.0[k]))
        }
    }
}

fn check(eps_true: &Field, eps_pred: &Field, c: &StiffnessField) -> Result<()> {
    ensure!(eps_true.channels() == 6 && eps_pred.channels() == 6, Shape, "losses compare six-channel strain fields");
    ensure!(
        eps_true.grid() == eps_pred.grid() && eps_true.grid() == c.grid(),
        Shape,
        "loss operands live on different grids"
    );
    Ok(())
}

pub fn loss(eps_true: &Field, eps_pred: &Field, c: &StiffnessField, mode: LossMode) -> Result<f64> {
    check(eps_true, eps_pred, c)?;
    let n = eps_true.voxels();
    let mut acc = 0.0;
    for v in 0..n {
        let e = SymTensor2(std::array::from_fn(|k| eps_pred.get(k, v) - eps_true.get(k, v)));
        acc += e.dot(&weighted(&e, c.at(v), mode));
    }
    let l = acc / n as f64;
    ensure!(l.is_finite(), Numerical, "non-finite {} loss", mode.name());
    Ok(l)
}

/// Loss and its gradient with respect to `eps_pred`.
pub fn loss_grad(eps_true: &Field, eps_pred: &Field, c: &StiffnessField, mode: LossMode) -> Result<(f64, Field)> {
    check(eps_true, eps_pred, c)?;
    let n = eps_true.voxels();
    let mut acc = 0.0;
    let mut g = Field::zeros(6, eps_true.grid());
    for v in 0..n {
        let e = SymTensor2(std::array::from_fn(|k| eps_pred.get(k, v) - eps_true.get(k, v)));
        let ae = weighted(&e, c.at(v), mode);
        acc += e.dot(&ae);
        g.set_tensor(v, &ae.scaled(2.0 / n as f64));
    }
    let l = acc / n as f64;
    ensure!(l.is_finite(), Numerical, "non-finite {} loss", mode.name());
    Ok((l, g))
}
