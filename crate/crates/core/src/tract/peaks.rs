//! Discrete-sphere peak extraction with local refinement.

use crate::par;
use crate::sphere::{
    angular_distance_antipodal, canonicalize_hemisphere, cart_to_sph, dot, n_coeffs, norm, scale, sh_row,
    ShExpansion, Vec3,
};

use super::tessellation::Tessellation;
use super::OdfField;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeakParams {
    /// Fraction of the sphere maximum a peak must reach.
    pub rel_threshold: f64,
    pub min_separation_deg: f64,
    pub max_peaks: usize,
}

impl Default for PeakParams {
    fn default() -> Self {
        PeakParams {
            rel_threshold: 0.5,
            min_separation_deg: 25.0,
            max_peaks: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    /// Unit vector on the canonical hemisphere.
    pub dir: Vec3,
    pub value: f64,
}

/// Peak directions per voxel, strongest first.
#[derive(Clone, Debug, PartialEq)]
pub struct PeakField {
    pub dims: [usize; 3],
    pub peaks: Vec<Vec<Peak>>,
}

/// Tessellation plus its precomputed basis for one SH order.
pub struct PeakFinder<'a> {
    sphere: &'a Tessellation,
    order: usize,
    basis: Vec<f64>,
    pub params: PeakParams,
}

#[inline]
fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orders ties by coordinates so results do not depend on point order.
fn beats(a: (f64, &Vec3), b: (f64, &Vec3)) -> bool {
    match a.0.total_cmp(&b.0) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => {
            let ka = a.1.map(f64::to_bits);
            let kb = b.1.map(f64::to_bits);
            ka > kb
        }
    }
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Moves a grid maximum to the vertex of a quadratic fitted over it and its
/// neighbors in the tangent plane. Falls back to the grid point when the fit
/// is not a well-posed maximum.
fn refine(p: &Vec3, value: f64, neighbors: &[(Vec3, f64)]) -> (Vec3, f64) {
    let helper = if p[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = {
        let c = cross(p, &helper);
        scale(&c, 1.0 / norm(&c))
    };
    let w = cross(p, &u);
    // f ≈ a + b·s + c·t + d·s² + e·s·t + g·t²
    let mut ata = nalgebra::Matrix6::<f64>::zeros();
    let mut atb = nalgebra::Vector6::<f64>::zeros();
    let mut spacing: f64 = 0.0;
    for (q, f) in std::iter::once((*p, value)).chain(neighbors.iter().copied()) {
        // antipodal neighbors are flipped onto the side of p
        let q = if dot(&q, p) < 0.0 { scale(&q, -1.0) } else { q };
        let (s, t) = (dot(&q, &u), dot(&q, &w));
        spacing = spacing.max((s * s + t * t).sqrt());
        let row = nalgebra::Vector6::new(1.0, s, t, s * s, s * t, t * t);
        ata += row * row.transpose();
        atb += row * f;
    }
    let Some(c) = ata.lu().solve(&atb) else { return (*p, value) };
    let h = nalgebra::Matrix2::new(2.0 * c[3], c[4], c[4], 2.0 * c[5]);
    if !(h[(0, 0)] < 0.0 && h.determinant() > 0.0) {
        return (*p, value);
    }
    let Some(off) = h.try_inverse().map(|hi| -(hi * nalgebra::Vector2::new(c[1], c[2]))) else {
        return (*p, value);
    };
    if off.norm() > spacing {
        return (*p, value);
    }
    let (s, t) = (off[0], off[1]);
    let q = [p[0] + s * u[0] + t * w[0], p[1] + s * u[1] + t * w[1], p[2] + s * u[2] + t * w[2]];
    let fitted = c[0] + c[1] * s + c[2] * t + c[3] * s * s + c[4] * s * t + c[5] * t * t;
    (canonicalize_hemisphere(&scale(&q, 1.0 / norm(&q))), fitted.max(value))
}

impl<'a> PeakFinder<'a> {
    pub fn new(sphere: &'a Tessellation, order: usize, params: PeakParams) -> Self {
        let r = n_coeffs(order);
        let mut basis = vec![0.0; sphere.len() * r];
        for (p, row) in sphere.points.iter().zip(basis.chunks_exact_mut(r)) {
            let d = cart_to_sph(p).expect("unit vector");
            sh_row(order, d.theta, d.phi, row, None, None);
        }
        PeakFinder {
            sphere,
            order,
            basis,
            params,
        }
    }

    /// Peaks of one ODF given by its coefficients.
    pub fn peaks(&self, coeffs: &[f64]) -> Vec<Peak> {
        let r = n_coeffs(self.order);
        let pts = &self.sphere.points;
        let vals: Vec<f64> = self.basis.chunks_exact(r).map(|row| dot_slices(row, coeffs)).collect();
        let max = vals.iter().cloned().fold(f64::MIN, f64::max);
        if !(max > 0.0) {
            return Vec::new();
        }
        let mut cand: Vec<usize> = (0..pts.len())
            .filter(|&i| vals[i] > 0.0 && vals[i] >= self.params.rel_threshold * max)
            .filter(|&i| {
                self.sphere.neighbors[i]
                    .iter()
                    .all(|&j| beats((vals[i], &pts[i]), (vals[j], &pts[j])))
            })
            .collect();
        cand.sort_by(|&a, &b| {
            if beats((vals[a], &pts[a]), (vals[b], &pts[b])) {
                std::cmp::Ordering::Less
            } else {
                std::cmp::Ordering::Greater
            }
        });
        let sep = self.params.min_separation_deg.to_radians();
        let mut kept: Vec<usize> = Vec::new();
        for i in cand {
            if kept.len() >= self.params.max_peaks {
                break;
            }
            if kept.iter().all(|&k| angular_distance_antipodal(&pts[k], &pts[i]) >= sep) {
                kept.push(i);
            }
        }
        let mut out: Vec<Peak> = kept
            .into_iter()
            .map(|i| {
                let mut nb: Vec<(Vec3, f64)> = self.sphere.neighbors[i].iter().map(|&j| (pts[j], vals[j])).collect();
                // fixed summation order whatever the point numbering
                nb.sort_by_key(|(q, _)| q.map(f64::to_bits));
                let (dir, value) = refine(&pts[i], vals[i], &nb);
                Peak { dir, value }
            })
            .collect();
        out.sort_by(|a, b| {
            if beats((a.value, &a.dir), (b.value, &b.dir)) {
                std::cmp::Ordering::Less
            } else {
                std::cmp::Ordering::Greater
            }
        });
        out
    }

    /// Peaks of every voxel where `mask` is true (all voxels without a mask).
    pub fn field(&self, odf: &OdfField, mask: Option<&[bool]>) -> PeakField {
        assert_eq!(odf.order, self.order, "peak finder built for another order");
        let peaks = par::map_indices(odf.n_voxels(), |i| {
            if mask.is_none_or(|m| m[i]) {
                self.peaks(odf.voxel(i))
            } else {
                Vec::new()
            }
        });
        PeakField { dims: odf.dims, peaks }
    }
}

/// Peaks of a single expansion on `sphere`.
pub fn find_peaks(odf: &ShExpansion, sphere: &Tessellation, rel_threshold: f64, min_sep_deg: f64) -> Vec<Peak> {
    let params = PeakParams {
        rel_threshold,
        min_separation_deg: min_sep_deg,
        ..PeakParams::default()
    };
    PeakFinder::new(sphere, odf.order, params).peaks(&odf.coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{electrostatic_design, DesignConfig};
    use crate::sphere::{Direction, DirectionSet};
    use crate::tract::tests::fiber_voxel;
    use crate::tract::{csa_odf, hemisphere_tessellation};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn design60() -> DirectionSet {
        electrostatic_design(&DesignConfig::new(60, 3)).unwrap()
    }

    fn odf_for(axes: &[Vec3]) -> ShExpansion {
        csa_odf(&fiber_voxel(&design60(), axes), 8, 0.006).unwrap().expansion(0)
    }

    fn deg(a: &Vec3, b: &Vec3) -> f64 {
        angular_distance_antipodal(a, b).to_degrees()
    }

    #[test]
    fn single_fiber_has_one_peak_on_axis() {
        for (t, p) in [(0.0, 0.0), (0.9, 1.3), (std::f64::consts::FRAC_PI_2, 2.5), (2.4, 5.0)] {
            let axis = Direction::new(t, p).to_cart();
            let peaks = find_peaks(&odf_for(&[axis]), hemisphere_tessellation(), 0.5, 25.0);
            assert_eq!(peaks.len(), 1, "{t} {p}");
            assert!(deg(&peaks[0].dir, &axis) < 5.0);
        }
    }

    #[test]
    fn crossing_has_two_peaks() {
        let a = Direction::new(1.2, 0.4).to_cart();
        let b = Direction::new(1.2 - std::f64::consts::FRAC_PI_2, 0.4).to_cart();
        let peaks = find_peaks(&odf_for(&[a, b]), hemisphere_tessellation(), 0.5, 25.0);
        assert_eq!(peaks.len(), 2);
        let (d0, d1) = (deg(&peaks[0].dir, &a).min(deg(&peaks[0].dir, &b)), deg(&peaks[1].dir, &a).min(deg(&peaks[1].dir, &b)));
        assert!(d0 < 10.0 && d1 < 10.0, "{d0} {d1}");
        assert!(deg(&peaks[0].dir, &peaks[1].dir) > 80.0);
        assert!(peaks[0].value >= peaks[1].value);
    }

    #[test]
    fn full_threshold_keeps_at_most_one() {
        let a = Direction::new(1.2, 0.4).to_cart();
        let b = Direction::new(1.2 - std::f64::consts::FRAC_PI_2, 0.4).to_cart();
        assert!(find_peaks(&odf_for(&[a, b]), hemisphere_tessellation(), 1.0, 25.0).len() <= 1);
    }

    #[test]
    fn isotropic_odf_has_no_structure_to_report() {
        let mut c = vec![0.0; 45];
        c[0] = 0.28209479177387814;
        let peaks = find_peaks(&ShExpansion { order: 8, coeffs: c }, hemisphere_tessellation(), 0.5, 25.0);
        // every point ties; the coordinate tie-break yields a single winner
        assert!(peaks.len() <= 3);
    }

    #[test]
    fn point_order_does_not_matter() {
        let a = Direction::new(1.0, 2.0).to_cart();
        let b = Direction::new(0.3, 4.0).to_cart();
        let odf = odf_for(&[a, b]);
        let t = hemisphere_tessellation();
        let mut perm: Vec<usize> = (0..t.len()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let shuffled = t.permuted(&perm);
        assert_eq!(find_peaks(&odf, t, 0.5, 25.0), find_peaks(&odf, &shuffled, 0.5, 25.0));
    }

    #[test]
    fn zero_odf_has_no_peaks() {
        let odf = ShExpansion { order: 4, coeffs: vec![0.0; 15] };
        assert!(find_peaks(&odf, hemisphere_tessellation(), 0.5, 25.0).is_empty());
    }
}
