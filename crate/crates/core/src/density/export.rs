use std::io::Write;

use super::DensityGrid;
use crate::error::{Error, Result};

fn io_err(e: std::io::Error) -> Error {
    Error::Parse(format!("write failed: {e}"))
}

/// One row per cell: the midpoint coordinates, energy and log-density.
pub fn write_grid_csv<W: Write>(grid: &DensityGrid, mut out: W) -> Result<()> {
    let dim = grid.spec.dim();
    let header: Vec<String> = (0..dim).map(|k| format!("x{k}")).collect();
    writeln!(out, "{},energy,log_density", header.join(",")).map_err(io_err)?;
    for (c, (e, ld)) in grid.energies.iter().zip(grid.cell_log_density()).enumerate() {
        let p: Vec<String> = grid.spec.midpoint(c).iter().map(f64::to_string).collect();
        writeln!(out, "{},{e},{ld}", p.join(",")).map_err(io_err)?;
    }
    Ok(())
}

/// Binary 16-bit PGM of the density, min-max scaled. `x0` runs left to
/// right and `x1` bottom to top. A flat density renders black.
pub fn write_pgm16<W: Write>(grid: &DensityGrid, mut out: W) -> Result<()> {
    if grid.spec.dim() != 2 {
        return Err(Error::invalid("heat maps need a two-dimensional grid"));
    }
    let n = grid.spec.resolution;
    let dens: Vec<f64> = grid.cell_log_density().iter().map(|l| l.exp()).collect();
    let lo = dens.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = dens.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    write!(out, "P5\n{n} {n}\n65535\n").map_err(io_err)?;
    let mut buf = Vec::with_capacity(2 * n * n);
    for r in 0..n {
        for c in 0..n {
            let v = dens[c * n + (n - 1 - r)];
            let level = if range > 0.0 { ((v - lo) / range * 65535.0).round() as u16 } else { 0 };
            buf.extend_from_slice(&level.to_be_bytes());
        }
    }
    out.write_all(&buf).map_err(io_err)
}
