//! The differentiable acquisition–reconstruction pipeline.
//!
//! A fully sampled volume `X` (N channels) is expanded once in spherical
//! harmonics; the sub-sampling layer evaluates that expansion at the n
//! learnable directions, a reconstruction operator maps the n channels back to
//! N, and the loss compares the result with `X`. Gradients with respect to the
//! direction angles flow through the basis derivatives.

mod adam;
mod engine;
mod train;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamGroup, AdamState};
pub use engine::{loss_gradients, ForwardConfig, Gradients, LossKind};
pub use train::{train_joint, train_joint_from, DirMode, EpochRecord, TrainConfig, TrainOutcome, CONFIG_KEYS};

use crate::error::{Error, Result};
use crate::sphere::{sh_basis, DirectionSet, ShFitter};
use crate::volume::DwiVolume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconMode {
    Identity,
    ShInterp,
    Linear,
}

impl std::str::FromStr for ReconMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(ReconMode::Identity),
            "sh-interp" => Ok(ReconMode::ShInterp),
            "linear" => Ok(ReconMode::Linear),
            _ => Err(Error::Invalid(format!("unknown reconstruction mode '{s}'"))),
        }
    }
}

impl std::fmt::Display for ReconMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReconMode::Identity => "identity",
            ReconMode::ShInterp => "sh-interp",
            ReconMode::Linear => "linear",
        })
    }
}

/// Learnable reconstruction parameters. `weights` is `N × n` row-major and,
/// with `bias`, is only populated in linear mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionParams {
    pub mode: ReconMode,
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ReconstructionParams {
    pub fn identity(n: usize) -> Self {
        ReconstructionParams {
            mode: ReconMode::Identity,
            n_in: n,
            n_out: n,
            weights: Vec::new(),
            bias: Vec::new(),
        }
    }

    pub fn sh_interp(n_in: usize, n_out: usize) -> Self {
        ReconstructionParams {
            mode: ReconMode::ShInterp,
            n_in,
            n_out,
            weights: Vec::new(),
            bias: Vec::new(),
        }
    }

    pub fn linear(n_in: usize, n_out: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != n_in * n_out || bias.len() != n_out {
            return Err(Error::Shape(format!(
                "linear map {n_out}x{n_in} needs {} weights and {n_out} biases, got {} and {}",
                n_in * n_out,
                weights.len(),
                bias.len()
            )));
        }
        Ok(ReconstructionParams {
            mode: ReconMode::Linear,
            n_in,
            n_out,
            weights,
            bias,
        })
    }

    /// Linear map initialized to SH interpolation from `from` to `to`.
    pub fn linear_from_interp(from: &DirectionSet, to: &DirectionSet, order: usize, lambda: f64) -> Result<Self> {
        let m = interp_matrix(from, to, order, lambda)?;
        let mut weights = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for k in 0..m.ncols() {
                weights.push(m[(i, k)]);
            }
        }
        Self::linear(from.len(), to.len(), weights, vec![0.0; to.len()])
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn from_json(text: &str, origin: &std::path::Path) -> Result<Self> {
        let p: ReconstructionParams =
            serde_json::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        if p.mode == ReconMode::Linear {
            Self::linear(p.n_in, p.n_out, p.weights, p.bias)
                .map_err(|e| Error::parse(origin, e.to_string()))
        } else {
            Ok(p)
        }
    }
}

/// `B(to) · (B(from)ᵀB(from) + λΛ²)⁻¹ B(from)ᵀ`, shape `|to| × |from|`.
pub fn interp_matrix(from: &DirectionSet, to: &DirectionSet, order: usize, lambda: f64) -> Result<DMatrix<f64>> {
    let fitter = ShFitter::new(&sh_basis(order, from)?, lambda)?;
    Ok(sh_basis(order, to)?.matrix * fitter.pinv)
}

fn apply_per_voxel(x: &DwiVolume, m: &DMatrix<f64>, clamp: bool) -> Vec<f64> {
    let (rows, cols) = m.shape();
    // row-major copy for the hot loop
    let mr: Vec<f64> = (0..rows).flat_map(|i| (0..cols).map(move |k| (i, k))).map(|ik| m[ik]).collect();
    let chunks = crate::par::map_chunks(&x.data, cols * crate::par::CHUNK, |_, block| {
        let mut out = Vec::with_capacity(block.len() / cols * rows);
        for v in block.chunks_exact(cols) {
            for i in 0..rows {
                let row = &mr[i * cols..(i + 1) * cols];
                let s: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
                out.push(if clamp { s.max(0.0) } else { s });
            }
        }
        out
    });
    chunks.concat()
}

/// Resamples `x` at `dirs_out` through a regularized SH fit of order `order`.
/// Output samples are clamped at zero.
pub fn subsample(x: &DwiVolume, dirs_out: &DirectionSet, order: usize, lambda: f64) -> Result<DwiVolume> {
    let m = interp_matrix(&x.dirs, dirs_out, order, lambda)?;
    Ok(x.with_data(dirs_out.clone(), apply_per_voxel(x, &m, true)))
}

/// Unclamped resampled samples (layout as [`DwiVolume::data`]). The map is
/// linear in the data.
pub fn subsample_raw(x: &DwiVolume, dirs_out: &DirectionSet, order: usize, lambda: f64) -> Result<Vec<f64>> {
    let m = interp_matrix(&x.dirs, dirs_out, order, lambda)?;
    Ok(apply_per_voxel(x, &m, false))
}

/// Maps an n-channel volume back to `target_dirs`. Identity passes the data
/// through unchanged (the result keeps its n channels). Reconstructed samples
/// are clamped at zero when materialized as a volume.
pub fn reconstruct(
    xt: &DwiVolume,
    params: &ReconstructionParams,
    target_dirs: &DirectionSet,
    order: usize,
    lambda: f64,
) -> Result<DwiVolume> {
    match params.mode {
        ReconMode::Identity => Ok(xt.clone()),
        ReconMode::ShInterp => {
            let m = interp_matrix(&xt.dirs, target_dirs, order, lambda)?;
            Ok(xt.with_data(target_dirs.clone(), apply_per_voxel(xt, &m, true)))
        }
        ReconMode::Linear => {
            let (n, big_n) = (xt.channels(), target_dirs.len());
            if params.n_in != n || params.n_out != big_n {
                return Err(Error::Shape(format!(
                    "linear map is {}x{}, data needs {big_n}x{n}",
                    params.n_out, params.n_in
                )));
            }
            let mut data = Vec::with_capacity(xt.n_voxels() * big_n);
            for v in xt.data.chunks_exact(n) {
                for i in 0..big_n {
                    let row = &params.weights[i * n..(i + 1) * n];
                    let s: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() + params.bias[i];
                    data.push(s.max(0.0));
                }
            }
            Ok(xt.with_data(target_dirs.clone(), data))
        }
    }
}

/// `‖xhat − x‖₂` over masked voxels and all channels.
pub fn loss_l2(xhat: &DwiVolume, x: &DwiVolume, mask: &[bool]) -> Result<f64> {
    if xhat.dims != x.dims || xhat.channels() != x.channels() {
        return Err(Error::Shape(format!(
            "{:?}x{} vs {:?}x{}",
            xhat.dims,
            xhat.channels(),
            x.dims,
            x.channels()
        )));
    }
    if mask.len() != x.n_voxels() {
        return Err(Error::Shape("mask size differs from volume".into()));
    }
    let d = x.channels();
    let mut s = 0.0;
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for k in 0..d {
            let r = xhat.data[i * d + k] - x.data[i * d + k];
            s += r * r;
        }
    }
    Ok(s.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{electrostatic_design, DesignConfig};
    use crate::sphere::{eval_sh, n_coeffs, Direction, ShExpansion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Volume whose voxels are random order-`order` expansions sampled at `dirs`.
    pub(crate) fn band_limited(dims: [usize; 3], dirs: &DirectionSet, order: usize, seed: u64) -> DwiVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nv: usize = dims.iter().product();
        let mut data = Vec::new();
        for _ in 0..nv {
            let mut c: Vec<f64> = (0..n_coeffs(order)).map(|_| rng.gen_range(-0.05..0.05)).collect();
            c[0] = 2.0;
            data.extend(eval_sh(&ShExpansion::new(order, c).unwrap(), dirs));
        }
        DwiVolume::new(dims, [1.0; 3], 1000.0, dirs.clone(), data, vec![1.0; nv]).unwrap()
    }

    fn design(n: usize) -> DirectionSet {
        electrostatic_design(&DesignConfig::new(n, 5)).unwrap()
    }

    #[test]
    fn subsample_onto_same_dirs_is_projector() {
        let dirs = design(30);
        let x = band_limited([3, 3, 2], &dirs, 4, 1);
        let out = subsample(&x, &dirs, 4, 0.0).unwrap();
        let err = out.data.iter().zip(&x.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_volume_stays_constant() {
        let dirs = design(20);
        let x = DwiVolume::new([2, 2, 2], [1.0; 3], 1000.0, dirs.clone(), vec![0.37; 8 * 20], vec![1.0; 8]).unwrap();
        let out = subsample(&x, &design(7), 4, 0.006).unwrap();
        assert_eq!(out.channels(), 7);
        assert!(out.data.iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn subsample_is_linear_before_clamp() {
        let dirs = design(30);
        let a = band_limited([2, 2, 2], &dirs, 4, 2);
        let b = band_limited([2, 2, 2], &dirs, 4, 3);
        let combo: Vec<f64> = a.data.iter().zip(&b.data).map(|(p, q)| 0.3 * p + 1.7 * q).collect();
        let c = a.with_data(dirs.clone(), combo);
        let out_dirs = design(9);
        let sa = subsample_raw(&a, &out_dirs, 6, 0.006).unwrap();
        let sb = subsample_raw(&b, &out_dirs, 6, 0.006).unwrap();
        let sc = subsample_raw(&c, &out_dirs, 6, 0.006).unwrap();
        for i in 0..sc.len() {
            assert!((sc[i] - (0.3 * sa[i] + 1.7 * sb[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn subsample_then_interp_is_identity_for_band_limited() {
        let full = design(40);
        let x = band_limited([2, 2, 2], &full, 4, 4);
        let sub = design(20);
        let xt = subsample(&x, &sub, 4, 0.0).unwrap();
        let params = ReconstructionParams::sh_interp(20, 40);
        let back = reconstruct(&xt, &params, &full, 4, 0.0).unwrap();
        let err = back.data.iter().zip(&x.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn reconstruct_modes() {
        let dirs = design(10);
        let x = band_limited([2, 2, 1], &dirs, 2, 5);
        let same = reconstruct(&x, &ReconstructionParams::identity(10), &design(30), 2, 0.0).unwrap();
        assert_eq!(same, x);
        let zero = ReconstructionParams::linear(10, 30, vec![0.0; 300], vec![0.0; 30]).unwrap();
        let out = reconstruct(&x, &zero, &design(30), 2, 0.0).unwrap();
        assert_eq!(out.channels(), 30);
        assert!(out.data.iter().all(|&v| v == 0.0));
        let wrong = ReconstructionParams::linear(9, 30, vec![0.0; 270], vec![0.0; 30]).unwrap();
        assert!(matches!(reconstruct(&x, &wrong, &design(30), 2, 0.0), Err(Error::Shape(_))));
        assert!(ReconstructionParams::linear(9, 30, vec![0.0; 10], vec![0.0; 30]).is_err());
    }

    #[test]
    fn linear_init_reproduces_interp() {
        let from = design(12);
        let to = design(30);
        let x = band_limited([2, 1, 1], &from, 2, 6);
        let p = ReconstructionParams::linear_from_interp(&from, &to, 2, 0.006).unwrap();
        let a = reconstruct(&x, &p, &to, 2, 0.006).unwrap();
        let b = reconstruct(&x, &ReconstructionParams::sh_interp(12, 30), &to, 2, 0.006).unwrap();
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u - v).abs() < 1e-12);
        }
        let json = p.to_json();
        assert_eq!(ReconstructionParams::from_json(&json, std::path::Path::new("m")).unwrap(), p);
    }

    #[test]
    fn l2_loss_values() {
        let dirs = DirectionSet::new(vec![Direction::new(0.2, 0.0), Direction::new(1.0, 1.0)]).unwrap();
        let x = DwiVolume::new([2, 1, 1], [1.0; 3], 1000.0, dirs.clone(), vec![1.0, 1.0, 2.0, 2.0], vec![1.0; 2]).unwrap();
        assert_eq!(loss_l2(&x, &x, &[true, true]).unwrap(), 0.0);
        let y = x.with_data(dirs.clone(), vec![4.0, 5.0, 2.0, 2.0]);
        assert_eq!(loss_l2(&y, &x, &[true, true]).unwrap(), 5.0);
        assert_eq!(loss_l2(&y, &x, &[false, true]).unwrap(), 0.0);
        let z = x.with_data(DirectionSet::new(vec![Direction::new(0.2, 0.0)]).unwrap(), vec![1.0, 1.0]);
        assert!(loss_l2(&z, &x, &[true, true]).is_err());
    }

    #[test]
    fn l2_loss_matches_resummation() {
        let dirs = design(8);
        let a = band_limited([3, 2, 2], &dirs, 2, 7);
        let b = band_limited([3, 2, 2], &dirs, 2, 8);
        let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
        let got = loss_l2(&a, &b, &mask).unwrap();
        let mut acc = 0.0f64;
        for v in 0..12 {
            if mask[v] {
                for k in 0..8 {
                    acc += (a.data[v * 8 + k] - b.data[v * 8 + k]).powi(2);
                }
            }
        }
        assert!((got - acc.sqrt()).abs() / acc.sqrt() < 1e-12);
    }
}
