//! Named analytic coefficient fields.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use pmelab::grid::{BoundaryTrace, Grid};
use pmelab::Field;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Phantom {
    Constant { value: f64 },
    /// `base + slope . x`.
    Affine { base: f64, slope: [f64; 2] },
    /// `base + amplitude exp(-|x - center|^2 / width^2)`.
    GaussianBump { center: [f64; 2], width: f64, amplitude: f64, base: f64 },
    /// `base + amplitude (1 - |x - center|^2 / radius^2)^3`, zero outside.
    CompactBump { center: [f64; 2], radius: f64, amplitude: f64, base: f64 },
}

impl Phantom {
    pub fn one() -> Self {
        Phantom::Constant { value: 1.0 }
    }
    pub fn zero() -> Self {
        Phantom::Constant { value: 0.0 }
    }
    pub fn compact(center: [f64; 2], radius: f64, amplitude: f64) -> Self {
        Phantom::CompactBump { center, radius, amplitude, base: 0.0 }
    }

    pub fn validate(&self) -> Result<(), String> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match *self {
            Phantom::Constant { value } if !value.is_finite() => Err("value must be finite".into()),
            Phantom::Affine { base, slope } if !finite(&[base, slope[0], slope[1]]) => Err("affine parameters must be finite".into()),
            Phantom::GaussianBump { width, .. } if !(width > 0.0) => Err(format!("gaussian-bump width must be positive, got {width}")),
            Phantom::CompactBump { radius, .. } if !(radius > 0.0) => Err(format!("compact-bump radius must be positive, got {radius}")),
            _ => Ok(()),
        }
    }

    /// A lower bound valid for bumps everywhere and for affine fields on the
    /// unit box; used to reject nonpositive coefficients before a run.
    pub fn lower_bound(&self) -> f64 {
        match *self {
            Phantom::Constant { value } => value,
            Phantom::Affine { base, slope } => base + slope[0].min(0.0) + slope[1].min(0.0),
            Phantom::GaussianBump { amplitude, base, .. } | Phantom::CompactBump { amplitude, base, .. } => base + amplitude.min(0.0),
        }
    }

    pub fn eval(&self, x: [f64; 2]) -> f64 {
        match *self {
            Phantom::Constant { value } => value,
            Phantom::Affine { base, slope } => base + slope[0] * x[0] + slope[1] * x[1],
            Phantom::GaussianBump { center, width, amplitude, base } => {
                let r2 = (x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2);
                base + amplitude * (-r2 / (width * width)).exp()
            }
            Phantom::CompactBump { center, radius, amplitude, base } => {
                let q = ((x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2)) / (radius * radius);
                base + if q < 1.0 { amplitude * (1.0 - q).powi(3) } else { 0.0 }
            }
        }
    }

    pub fn field(&self, grid: &Arc<Grid<f64>>) -> Result<Field, String> {
        self.validate()?;
        Ok(Field::from_fn(grid, |x| self.eval(x)))
    }

    pub fn trace(&self, grid: &Arc<Grid<f64>>) -> Result<BoundaryTrace<f64>, String> {
        self.validate()?;
        Ok(BoundaryTrace::from_fn(grid, |x| self.eval(x)))
    }
}

/// Looks up a phantom by name with positional parameters, e.g.
/// `("gaussian-bump", [cx, cy, width, amplitude, base])`.
pub fn phantom(name: &str, params: &[f64], grid: &Arc<Grid<f64>>) -> Result<Field, String> {
    let want = |n: usize| if params.len() == n { Ok(()) } else { Err(format!("{name} takes {n} parameters, got {}", params.len())) };
    let p = match name {
        "constant" => {
            want(1)?;
            Phantom::Constant { value: params[0] }
        }
        "affine" => {
            want(3)?;
            Phantom::Affine { base: params[0], slope: [params[1], params[2]] }
        }
        "gaussian-bump" => {
            want(5)?;
            Phantom::GaussianBump { center: [params[0], params[1]], width: params[2], amplitude: params[3], base: params[4] }
        }
        "compact-bump" => {
            want(5)?;
            Phantom::CompactBump { center: [params[0], params[1]], radius: params[2], amplitude: params[3], base: params[4] }
        }
        other => return Err(format!("unknown phantom \"{other}\"")),
    };
    p.field(grid)
}
