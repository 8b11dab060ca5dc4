//! Spherical geometry, direction sets and their CSV exchange format.

mod harmonics;

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub(crate) use harmonics::{cholesky_checked, regularized_gram};
pub use harmonics::{
    default_order, eval_sh, fit_sh, laplace_beltrami, n_coeffs, order_from_coeffs, sh_basis,
    sh_basis_derivatives, sh_row, ShBasis, ShExpansion, ShFitter, DEFAULT_LAMBDA, MAX_DEFAULT_ORDER,
};

pub type Vec3 = [f64; 3];

const TWO_PI: f64 = 2.0 * PI;

#[inline]
pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn scale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// A diffusion-encoding direction: elevation `theta` in [0, π], azimuth `phi` in [0, 2π).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Direction {
    pub theta: f64,
    pub phi: f64,
}

impl Direction {
    /// Builds a direction, folding arbitrary angles into the canonical ranges.
    pub fn new(theta: f64, phi: f64) -> Self {
        let (theta, phi) = wrap_angles(theta, phi);
        Direction { theta, phi }
    }

    pub fn to_cart(&self) -> Vec3 {
        sph_to_cart(self)
    }
}

pub fn sph_to_cart(d: &Direction) -> Vec3 {
    let (st, ct) = d.theta.sin_cos();
    let (sp, cp) = d.phi.sin_cos();
    [st * cp, st * sp, ct]
}

/// Inverse of [`sph_to_cart`]. Inputs within 1e-3 of unit norm are normalized first.
pub fn cart_to_sph(v: &Vec3) -> Result<Direction> {
    let n = norm(v);
    if !n.is_finite() || (n - 1.0).abs() > 1e-3 {
        return Err(Error::NotUnit(n));
    }
    let u = scale(v, 1.0 / n);
    let rho = u[0].hypot(u[1]);
    let theta = rho.atan2(u[2]);
    let phi = if rho == 0.0 {
        0.0
    } else {
        let p = u[1].atan2(u[0]);
        if p < 0.0 {
            p + TWO_PI
        } else {
            p
        }
    };
    // atan2 can round 2π - tiny up to exactly 2π
    let phi = if phi >= TWO_PI { 0.0 } else { phi };
    Ok(Direction { theta, phi })
}

/// Picks the representative of `{v, -v}` in the upper hemisphere, with ties on
/// the equator broken towards +x and then +y.
pub fn canonicalize_hemisphere(v: &Vec3) -> Vec3 {
    let flip = if v[2] != 0.0 {
        v[2] < 0.0
    } else if v[0] != 0.0 {
        v[0] < 0.0
    } else {
        v[1] < 0.0
    };
    if flip {
        [-v[0], -v[1], -v[2]]
    } else {
        [v[0], v[1], v[2]]
    }
}

/// Angle between the axes through `u` and `v`, in [0, π/2].
pub fn angular_distance_antipodal(u: &Vec3, v: &Vec3) -> f64 {
    dot(u, v).abs().min(1.0).acos()
}

/// Reflects `theta` into [0, π] (adding π to `phi` per reflection) and wraps
/// `phi` into [0, 2π). The Cartesian direction is unchanged.
pub fn wrap_angles(theta: f64, phi: f64) -> (f64, f64) {
    let mut t = theta.rem_euclid(TWO_PI);
    let mut p = phi;
    if t > PI {
        t = TWO_PI - t;
        p += PI;
    }
    let mut p = p.rem_euclid(TWO_PI);
    if p >= TWO_PI {
        p = 0.0;
    }
    (t, p)
}

/// An ordered set of encoding directions.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DirectionSet {
    pub dirs: Vec<Direction>,
}

impl DirectionSet {
    pub fn new(dirs: Vec<Direction>) -> Result<Self> {
        if dirs.is_empty() {
            return Err(Error::Empty("direction set"));
        }
        Ok(DirectionSet { dirs })
    }

    pub fn from_cartesian(vs: &[Vec3]) -> Result<Self> {
        let dirs = vs.iter().map(cart_to_sph).collect::<Result<Vec<_>>>()?;
        Self::new(dirs)
    }

    pub fn from_angles(theta: &[f64], phi: &[f64]) -> Result<Self> {
        if theta.len() != phi.len() {
            return Err(Error::Shape(format!(
                "{} elevations vs {} azimuths",
                theta.len(),
                phi.len()
            )));
        }
        Self::new(
            theta
                .iter()
                .zip(phi)
                .map(|(&t, &p)| Direction::new(t, p))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.dirs.iter().map(|d| d.theta).collect()
    }

    pub fn phis(&self) -> Vec<f64> {
        self.dirs.iter().map(|d| d.phi).collect()
    }

    pub fn to_cartesian(&self) -> Vec<Vec3> {
        self.dirs.iter().map(sph_to_cart).collect()
    }

    /// Uniform (area-preserving) samples on the upper hemisphere: z = u, φ = 2πv.
    pub fn uniform_hemisphere<R: Rng>(n: usize, rng: &mut R) -> Result<Self> {
        let dirs = (0..n)
            .map(|_| {
                let z: f64 = rng.gen();
                let v: f64 = rng.gen();
                Direction::new(z.clamp(-1.0, 1.0).acos(), TWO_PI * v)
            })
            .collect();
        Self::new(dirs)
    }

    /// Every direction replaced by its upper-hemisphere representative.
    pub fn canonicalized(&self) -> Self {
        let dirs = self
            .dirs
            .iter()
            .map(|d| {
                let c = canonicalize_hemisphere(&sph_to_cart(d));
                // canonical vectors are unit by construction
                cart_to_sph(&c).unwrap_or(*d)
            })
            .collect();
        DirectionSet { dirs }
    }

    /// Smallest antipodal angle between any two members and the pair achieving it.
    pub fn min_separation(&self) -> Option<(f64, usize, usize)> {
        let cart = self.to_cartesian();
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..cart.len() {
            for j in (i + 1)..cart.len() {
                let a = angular_distance_antipodal(&cart[i], &cart[j]);
                if best.is_none_or(|b| a < b.0) {
                    best = Some((a, i, j));
                }
            }
        }
        best
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("theta,phi\n");
        for d in &self.dirs {
            let _ = writeln!(s, "{},{}", d.theta, d.phi);
        }
        s
    }

    pub fn from_csv(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next().map(str::trim) {
            Some("theta,phi") => {}
            other => {
                return Err(Error::parse(
                    origin,
                    format!("expected header 'theta,phi', found {other:?}"),
                ))
            }
        }
        let mut dirs = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut fields = line.trim().split(',');
            let mut next = |name: &str| -> Result<f64> {
                fields
                    .next()
                    .ok_or_else(|| Error::parse(origin, format!("row {}: missing {name}", i + 1)))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(origin, format!("row {}: {name}: {e}", i + 1)))
            };
            let theta = next("theta")?;
            let phi = next("phi")?;
            if !(0.0..=PI).contains(&theta) || !phi.is_finite() {
                return Err(Error::parse(
                    origin,
                    format!("row {}: angles out of range", i + 1),
                ));
            }
            dirs.push(Direction::new(theta, phi));
        }
        DirectionSet::new(dirs).map_err(|_| Error::parse(origin, "no directions"))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, path)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
