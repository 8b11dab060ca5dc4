//! Electrostatic-repulsion direction design.
//!
//! Each direction and its antipode carry a unit charge; the design minimizes
//! the resulting Coulomb energy by gradient descent directly on the
//! elevation/azimuth angles with a backtracking line search.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sphere::{wrap_angles, Direction, DirectionSet, Vec3};

/// Consecutive low-progress iterations before the descent stops.
const STALL_WINDOW: usize = 50;
const MAX_HALVINGS: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct DesignConfig {
    pub n: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub step_init: f64,
    /// Relative energy decrease below which an iteration counts as stalled.
    pub tol: f64,
}

impl DesignConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        DesignConfig {
            n,
            seed,
            max_iters: 5000,
            step_init: 0.05,
            tol: 1e-10,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Invalid("design needs n >= 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Invalid("max_iters must be >= 1".into()));
        }
        if !(self.step_init > 0.0) {
            return Err(Error::Invalid("step_init must be > 0".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Invalid("tol must be >= 0".into()));
        }
        Ok(())
    }
}

fn pair_terms(a: &Vec3, b: &Vec3) -> (f64, f64) {
    let dm = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let dp = ((a[0] + b[0]).powi(2) + (a[1] + b[1]).powi(2) + (a[2] + b[2]).powi(2)).sqrt();
    (dm, dp)
}

const COINCIDENT: f64 = 1e-12;

/// `Σ_{i<j} 1/‖gᵢ−gⱼ‖ + 1/‖gᵢ+gⱼ‖`.
pub fn coulomb_energy(dirs: &DirectionSet) -> Result<f64> {
    energy_of(&dirs.to_cartesian())
}

fn energy_of(g: &[Vec3]) -> Result<f64> {
    let mut e = 0.0;
    for i in 0..g.len() {
        for j in (i + 1)..g.len() {
            let (dm, dp) = pair_terms(&g[i], &g[j]);
            if dm < COINCIDENT || dp < COINCIDENT {
                return Err(Error::CoincidentDirections(i, j));
            }
            e += 1.0 / dm + 1.0 / dp;
        }
    }
    Ok(e)
}

/// Analytic `(∂E/∂θᵢ, ∂E/∂φᵢ)` for every direction.
pub fn coulomb_gradient(dirs: &DirectionSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = dirs.to_cartesian();
    let n = g.len();
    let mut grad_cart = vec![[0.0; 3]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (dm, dp) = pair_terms(&g[i], &g[j]);
            if dm < COINCIDENT || dp < COINCIDENT {
                return Err(Error::CoincidentDirections(i, j));
            }
            let (cm, cp) = (1.0 / (dm * dm * dm), 1.0 / (dp * dp * dp));
            for k in 0..3 {
                let diff = g[i][k] - g[j][k];
                let sum = g[i][k] + g[j][k];
                // d/dgᵢ of 1/|gᵢ-gⱼ| + 1/|gᵢ+gⱼ|
                grad_cart[i][k] += -diff * cm - sum * cp;
                grad_cart[j][k] += diff * cm - sum * cp;
            }
        }
    }
    let mut gt = Vec::with_capacity(n);
    let mut gp = Vec::with_capacity(n);
    for (d, gc) in dirs.dirs.iter().zip(&grad_cart) {
        let (st, ct) = d.theta.sin_cos();
        let (sp, cp) = d.phi.sin_cos();
        let dtheta = [ct * cp, ct * sp, -st];
        let dphi = [-st * sp, st * cp, 0.0];
        gt.push(gc[0] * dtheta[0] + gc[1] * dtheta[1] + gc[2] * dtheta[2]);
        gp.push(gc[0] * dphi[0] + gc[1] * dphi[1]);
    }
    Ok((gt, gp))
}

/// Result of a design run, including the energy of every accepted iterate.
#[derive(Clone, Debug)]
pub struct DesignTrace {
    pub dirs: DirectionSet,
    pub energy: f64,
    pub energies: Vec<f64>,
    pub iterations: usize,
}

/// Electrostatic design canonicalized to the upper hemisphere and sorted by (θ, φ).
pub fn electrostatic_design(cfg: &DesignConfig) -> Result<DirectionSet> {
    Ok(electrostatic_design_traced(cfg)?.dirs)
}

pub fn electrostatic_design_traced(cfg: &DesignConfig) -> Result<DesignTrace> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dirs = DirectionSet::uniform_hemisphere(cfg.n, &mut rng)?;
    // Random draws coincide with probability zero; the energy check still guards it.
    let mut energy = coulomb_energy(&dirs)?;
    let mut energies = vec![energy];
    let mut step = cfg.step_init;
    let mut stalled = 0;
    let mut iterations = 0;

    while iterations < cfg.max_iters && cfg.n > 1 {
        iterations += 1;
        let (gt, gp) = coulomb_gradient(&dirs)?;
        let mut accepted = None;
        let mut s = step;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<Direction> = dirs
                .dirs
                .iter()
                .zip(gt.iter().zip(&gp))
                .map(|(d, (t, p))| {
                    let (theta, phi) = wrap_angles(d.theta - s * t, d.phi - s * p);
                    Direction { theta, phi }
                })
                .collect();
            let cand = DirectionSet { dirs: cand };
            if let Ok(e) = coulomb_energy(&cand) {
                if e < energy {
                    accepted = Some((cand, e));
                    break;
                }
            }
            s *= 0.5;
        }
        let Some((cand, e)) = accepted else { break };
        let rel = (energy - e) / energy;
        dirs = cand;
        energy = e;
        energies.push(e);
        step = s * 2.0;
        if rel < cfg.tol {
            stalled += 1;
            if stalled >= STALL_WINDOW {
                break;
            }
        } else {
            stalled = 0;
        }
    }

    let mut canon = dirs.canonicalized().dirs;
    canon.sort_by(|a, b| a.theta.total_cmp(&b.theta).then(a.phi.total_cmp(&b.phi)));
    let dirs = DirectionSet { dirs: canon };
    Ok(DesignTrace {
        energy: coulomb_energy(&dirs)?,
        dirs,
        energies,
        iterations,
    })
}
