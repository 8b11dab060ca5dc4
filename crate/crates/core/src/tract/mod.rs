//! ODF estimation, peak extraction and deterministic streamline tracking.

mod peaks;
mod tessellation;
mod tracking;

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::par::{self, CHUNK};
use crate::sphere::{n_coeffs, sh_basis, ShExpansion, ShFitter};
use crate::volume::DwiVolume;

pub use peaks::{find_peaks, Peak, PeakField, PeakFinder, PeakParams};
pub use tessellation::{hemisphere_tessellation, Tessellation};
pub use tracking::{
    seeds_from_mask, track_from, track_streamlines, Point, TrackParams, Tractogram,
};

/// Clamp applied to `S/S0` before the double logarithm.
pub const SIGNAL_CLAMP: f64 = 1e-4;

/// Per-voxel SH coefficients (row-major `voxels × R`) of the ODF.
#[derive(Clone, Debug, PartialEq)]
pub struct OdfField {
    pub dims: [usize; 3],
    pub order: usize,
    pub coeffs: Vec<f64>,
}

impl OdfField {
    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn n_coeffs(&self) -> usize {
        n_coeffs(self.order)
    }

    pub fn voxel(&self, idx: usize) -> &[f64] {
        let r = self.n_coeffs();
        &self.coeffs[idx * r..(idx + 1) * r]
    }

    pub fn expansion(&self, idx: usize) -> ShExpansion {
        ShExpansion {
            order: self.order,
            coeffs: self.voxel(idx).to_vec(),
        }
    }

    pub fn gfa_map(&self) -> Vec<f64> {
        (0..self.n_voxels()).map(|i| gfa_coeffs(self.voxel(i))).collect()
    }
}

/// P_l(0) for even l.
fn legendre_at_zero(l: usize) -> f64 {
    let mut p = 1.0;
    let mut k = 2;
    while k <= l {
        p *= -((k - 1) as f64) / k as f64;
        k += 2;
    }
    p
}

/// Multipliers taking SH coefficients of `ln(-ln(S/S0))` to ODF coefficients
/// (the l = 0 entry is unused).
fn csa_factors(order: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_coeffs(order));
    for l in (0..=order).step_by(2) {
        let f = -legendre_at_zero(l) * (l * (l + 1)) as f64 / (8.0 * PI);
        out.extend(std::iter::repeat_n(f, 2 * l + 1));
    }
    out
}

/// Constant-solid-angle ODF of every voxel. The l = 0 coefficient is fixed
/// at `1/(2√π)` so every ODF integrates to one.
pub fn csa_odf(x: &DwiVolume, order: usize, lambda: f64) -> Result<OdfField> {
    let r = n_coeffs(order);
    if x.channels() < r {
        return Err(Error::TooFewDirections {
            needed: r,
            available: x.channels(),
        });
    }
    let fitter = ShFitter::new(&sh_basis(order, &x.dirs)?, lambda)?;
    let factors = csa_factors(order);
    let d = x.channels();
    let c0 = 0.5 / PI.sqrt();
    let chunks = par::map_chunks(&x.data, d * CHUNK, |start, block| {
        let first = start / d;
        let mut out = vec![0.0; block.len() / d * r];
        let mut t = vec![0.0; d];
        for (k, (s, o)) in block.chunks_exact(d).zip(out.chunks_exact_mut(r)).enumerate() {
            let b0 = x.b0[first + k];
            for (ti, &si) in t.iter_mut().zip(s) {
                let e = if b0 > 0.0 { si / b0 } else { 1.0 };
                let e = e.clamp(SIGNAL_CLAMP, 1.0 - SIGNAL_CLAMP);
                *ti = (-e.ln()).ln();
            }
            fitter.fit_into(&t, o);
            for (oj, f) in o.iter_mut().zip(&factors) {
                *oj *= f;
            }
            o[0] = c0;
        }
        out
    });
    Ok(OdfField {
        dims: x.dims,
        order,
        coeffs: chunks.concat(),
    })
}

fn gfa_coeffs(c: &[f64]) -> f64 {
    let total: f64 = c.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return 0.0;
    }
    (1.0 - c[0] * c[0] / total).max(0.0).sqrt()
}

/// Generalized fractional anisotropy from SH coefficients.
pub fn gfa(odf: &ShExpansion) -> f64 {
    gfa_coeffs(&odf.coeffs)
}
