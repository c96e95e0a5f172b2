//! Grid-normalized densities, the 8-Gaussian target, and density-quality
//! metrics for two-dimensional models.

mod export;
mod mixture;

pub use export::{write_grid_csv, write_pgm16};
pub use mixture::MixtureOfGaussians;

use serde::{Deserialize, Serialize};

use crate::diff::{logsumexp, Tensor};
use crate::error::{Error, Result};
use crate::model::Energy;

/// Default radius for the spurious-mass audit: half the smallest gap
/// between neighbouring modes, rounded.
pub const SPURIOUS_RADIUS: f64 = 1.5;

/// Axis-aligned box split into `resolution^d` equal cells, evaluated at midpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub domain: Vec<(f64, f64)>,
    pub resolution: usize,
}

impl GridSpec {
    /// `[lo, hi]^dim` at the given resolution.
    pub fn square(dim: usize, lo: f64, hi: f64, resolution: usize) -> Self {
        Self {
            domain: vec![(lo, hi); dim],
            resolution,
        }
    }

    /// `[-4, 4]²` at resolution 256.
    pub fn default_2d() -> Self {
        Self::square(2, -4.0, 4.0, 256)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::invalid(format!("grid resolution must be >= 2, got {}", self.resolution)));
        }
        if self.domain.is_empty() || self.domain.iter().any(|&(lo, hi)| !(lo < hi && lo.is_finite() && hi.is_finite())) {
            return Err(Error::invalid(format!("invalid grid domain {:?}", self.domain)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.domain.len()
    }

    pub fn cell_count(&self) -> usize {
        self.resolution.pow(self.dim() as u32)
    }

    pub fn cell_widths(&self) -> Vec<f64> {
        self.domain
            .iter()
            .map(|&(lo, hi)| (hi - lo) / self.resolution as f64)
            .collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_widths().iter().product()
    }

    /// Midpoint of cell `index`; the last axis varies fastest.
    pub fn midpoint(&self, index: usize) -> Vec<f64> {
        let widths = self.cell_widths();
        let mut rem = index;
        let mut out = vec![0.0; self.dim()];
        for k in (0..self.dim()).rev() {
            let i = rem % self.resolution;
            rem /= self.resolution;
            out[k] = self.domain[k].0 + (i as f64 + 0.5) * widths[k];
        }
        out
    }

    /// All midpoints as `[cells, dim]`.
    pub fn midpoints(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.cell_count() * self.dim());
        for c in 0..self.cell_count() {
            data.extend(self.midpoint(c));
        }
        Tensor::new(vec![self.cell_count(), self.dim()], data).expect("sized")
    }
}

/// Per-cell energies of one model on a grid, with the integrated `log Ω`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub spec: GridSpec,
    pub energies: Vec<f64>,
    pub temperature: f64,
    /// `log Σ_cells exp(-E/T) · cell_volume`.
    pub log_omega: f64,
    /// Fingerprint of the model the grid was built for.
    pub fingerprint: u64,
}

fn energies_naming_cell<E: Energy + ?Sized>(energy: &E, pts: &Tensor, spec: &GridSpec) -> Result<Vec<f64>> {
    let bad_cell = |i: usize| Error::NonFinite {
        op: format!("energy at grid cell {i} {:?}", spec.midpoint(i)),
    };
    match energy.energies(pts) {
        Ok(e) => match e.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(bad_cell(i)),
            None => Ok(e),
        },
        Err(Error::NonFinite { .. }) => {
            for i in 0..pts.rows() {
                let row = Tensor::vector(pts.row(i).to_vec());
                if energy.energies(&row).map(|e| !e[0].is_finite()).unwrap_or(true) {
                    return Err(bad_cell(i));
                }
            }
            Err(Error::NonFinite { op: "grid energy".into() })
        }
        Err(e) => Err(e),
    }
}

/// Evaluates the energy at every cell midpoint and integrates `exp(-E/T)`.
pub fn compute_log_omega<E: Energy + ?Sized>(energy: &E, spec: &GridSpec) -> Result<DensityGrid> {
    spec.validate()?;
    if energy.input_dim() != spec.dim() {
        return Err(Error::Shape {
            op: "density_grid",
            lhs: vec![energy.input_dim()],
            rhs: vec![spec.dim()],
        });
    }
    let energies = energies_naming_cell(energy, &spec.midpoints(), spec)?;
    let t = energy.temperature();
    let logits: Vec<f64> = energies.iter().map(|e| -e / t).collect();
    let log_omega = logsumexp(&logits) + spec.cell_volume().ln();
    Ok(DensityGrid {
        spec: spec.clone(),
        energies,
        temperature: t,
        log_omega,
        fingerprint: energy.fingerprint(),
    })
}

impl DensityGrid {
    /// Normalized log-density at every cell midpoint.
    pub fn cell_log_density(&self) -> Vec<f64> {
        self.energies
            .iter()
            .map(|e| -e / self.temperature - self.log_omega)
            .collect()
    }

    /// Probability mass of every cell (sums to 1).
    pub fn cell_mass(&self) -> Vec<f64> {
        let v = self.spec.cell_volume();
        self.cell_log_density().iter().map(|l| l.exp() * v).collect()
    }
}

/// `-E(x)/T - log Ω` for each row of `xs`.
pub fn log_density<E: Energy + ?Sized>(energy: &E, xs: &Tensor, grid: &DensityGrid) -> Result<Vec<f64>> {
    if energy.fingerprint() != grid.fingerprint {
        return Err(Error::StaleGrid);
    }
    let t = energy.temperature();
    Ok(energy
        .energies(xs)?
        .iter()
        .map(|e| -e / t - grid.log_omega)
        .collect())
}

/// `|log Ω(resolution) - log Ω(2·resolution)|`.
pub fn resolution_self_check<E: Energy + ?Sized>(energy: &E, spec: &GridSpec) -> Result<f64> {
    let a = compute_log_omega(energy, spec)?;
    let fine = GridSpec {
        resolution: spec.resolution * 2,
        ..spec.clone()
    };
    let b = compute_log_omega(energy, &fine)?;
    Ok((a.log_omega - b.log_omega).abs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityMetrics {
    pub heldout_avg_loglik: f64,
    pub grid_kl: f64,
    pub spurious_mass: f64,
}

/// Held-out log-likelihood, grid KL(p_data ‖ p_model) and spurious mass.
///
/// The mixture is renormalized on the same grid so both densities are
/// compared on equal footing.
pub fn density_metrics<E: Energy + ?Sized>(
    energy: &E,
    grid: &DensityGrid,
    mix: &MixtureOfGaussians,
    heldout: &Tensor,
    spurious_radius: f64,
) -> Result<DensityMetrics> {
    let ll = log_density(energy, heldout, grid)?;
    if ll.is_empty() {
        return Err(Error::invalid("held-out set is empty"));
    }
    let heldout_avg_loglik = ll.iter().sum::<f64>() / ll.len() as f64;

    let cells = grid.spec.cell_count();
    let area = grid.spec.cell_volume();
    let model_log = grid.cell_log_density();
    let mut data_log: Vec<f64> = (0..cells).map(|c| mix.logpdf(&grid.spec.midpoint(c))).collect();
    let data_norm = logsumexp(&data_log) + area.ln();
    data_log.iter_mut().for_each(|l| *l -= data_norm);
    let grid_kl = data_log
        .iter()
        .zip(&model_log)
        .map(|(ld, lm)| ld.exp() * (ld - lm) * area)
        .sum();

    let spurious_mass = (0..cells)
        .filter(|&c| mix.nearest_mean_distance(&grid.spec.midpoint(c)) > spurious_radius)
        .map(|c| model_log[c].exp() * area)
        .sum();
    Ok(DensityMetrics {
        heldout_avg_loglik,
        grid_kl,
        spurious_mass,
    })
}
