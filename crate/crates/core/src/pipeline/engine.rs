//! Batched forward pass and reverse-mode gradients of the pipeline loss.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ReconMode, ReconstructionParams};
use crate::error::{Error, Result};
use crate::par::{self, CHUNK};
use crate::sphere::{n_coeffs, sh_basis, sh_row, DirectionSet, ShFitter};
use crate::sphere::{cholesky_checked, regularized_gram};
use crate::volume::DwiVolume;

/// Residual norms below this are treated as exactly zero (zero gradient).
const ZERO_RESIDUAL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Un-squared Euclidean norm of the residual.
    L2,
    /// Mean squared residual.
    Mse,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(LossKind::L2),
            "mse" => Ok(LossKind::Mse),
            _ => Err(Error::Invalid(format!("unknown loss '{s}'"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::L2 => "l2",
            LossKind::Mse => "mse",
        })
    }
}

/// SH settings of the sub-sampling layer and of SH-interpolation reconstruction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardConfig {
    pub order: usize,
    pub lambda: f64,
    pub recon_order: usize,
    pub recon_lambda: f64,
    pub loss: LossKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    /// Linear mode only, `N × n` row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Per-voxel SH coefficients of a fully sampled volume.
pub(crate) struct Prepared {
    pub coeffs: Vec<f64>,
}

impl Prepared {
    pub fn new(x: &DwiVolume, order: usize, lambda: f64) -> Result<Self> {
        let fitter = ShFitter::new(&sh_basis(order, &x.dirs)?, lambda)?;
        let r = n_coeffs(order);
        let big_n = x.channels();
        let chunks = par::map_chunks(&x.data, big_n * CHUNK, |_, block| {
            let mut out = vec![0.0; block.len() / big_n * r];
            for (v, c) in block.chunks_exact(big_n).zip(out.chunks_exact_mut(r)) {
                fitter.fit_into(v, c);
            }
            out
        });
        Ok(Prepared {
            coeffs: chunks.concat(),
        })
    }
}

struct InterpOps {
    /// n × r basis at the acquired directions and its angle derivatives.
    bn: DMatrix<f64>,
    bn_dt: DMatrix<f64>,
    bn_dp: DMatrix<f64>,
    /// (BnᵀBn + λΛ²)⁻¹, r × r.
    ginv: DMatrix<f64>,
    /// ginv · Bnᵀ, r × n.
    q: DMatrix<f64>,
    /// N × r basis at the target directions.
    big_b: DMatrix<f64>,
}

/// Direction-dependent operators for one evaluation point.
pub(crate) struct Operators {
    r: usize,
    n: usize,
    big_n: usize,
    b_out: DMatrix<f64>,
    d_theta: DMatrix<f64>,
    d_phi: DMatrix<f64>,
    interp: Option<InterpOps>,
}

fn rows_with_derivs(order: usize, dirs: &DirectionSet) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let r = n_coeffs(order);
    let n = dirs.len();
    let (mut b, mut dt, mut dp) = (vec![0.0; n * r], vec![0.0; n * r], vec![0.0; n * r]);
    for (k, d) in dirs.dirs.iter().enumerate() {
        let s = k * r..(k + 1) * r;
        sh_row(order, d.theta, d.phi, &mut b[s.clone()], Some(&mut dt[s.clone()]), Some(&mut dp[s]));
    }
    (
        DMatrix::from_row_slice(n, r, &b),
        DMatrix::from_row_slice(n, r, &dt),
        DMatrix::from_row_slice(n, r, &dp),
    )
}

impl Operators {
    pub fn new(
        dirs: &DirectionSet,
        target: &DirectionSet,
        params: &ReconstructionParams,
        cfg: &ForwardConfig,
    ) -> Result<Self> {
        let n = dirs.len();
        let big_n = target.len();
        match params.mode {
            ReconMode::Identity if n != big_n => {
                return Err(Error::Shape(format!(
                    "identity reconstruction needs n = N, got {n} and {big_n}"
                )))
            }
            ReconMode::Linear if params.n_in != n || params.n_out != big_n => {
                return Err(Error::Shape(format!(
                    "linear map is {}x{}, pipeline needs {big_n}x{n}",
                    params.n_out, params.n_in
                )))
            }
            _ => {}
        }
        let (b_out, d_theta, d_phi) = rows_with_derivs(cfg.order, dirs);
        let interp = if params.mode == ReconMode::ShInterp {
            let basis = sh_basis(cfg.recon_order, dirs)?;
            let (gram, _) = regularized_gram(&basis, cfg.recon_lambda);
            let ginv = cholesky_checked(gram)?.inverse();
            let q = &ginv * basis.matrix.transpose();
            let (bn, bn_dt, bn_dp) = rows_with_derivs(cfg.recon_order, dirs);
            Some(InterpOps {
                bn,
                bn_dt,
                bn_dp,
                ginv,
                q,
                big_b: sh_basis(cfg.recon_order, target)?.matrix,
            })
        } else {
            None
        };
        Ok(Operators {
            r: n_coeffs(cfg.order),
            n,
            big_n,
            b_out,
            d_theta,
            d_phi,
            interp,
        })
    }
}

/// Accumulated forward/backward quantities for a set of voxels. Gradients
/// are those of ½‖r‖² and get rescaled once the total residual is known.
#[derive(Clone, Debug)]
pub(crate) struct Accum {
    pub sumsq: f64,
    pub count: usize,
    pub g_theta: Vec<f64>,
    pub g_phi: Vec<f64>,
    /// Row-major `N × n`, like the weights.
    pub g_w: Vec<f64>,
    pub g_b: Vec<f64>,
    g_bn: Option<DMatrix<f64>>,
}

impl Accum {
    fn new(ops: &Operators, params: &ReconstructionParams, grads: bool) -> Self {
        let z = |len: usize| if grads { vec![0.0; len] } else { Vec::new() };
        let linear = params.mode == ReconMode::Linear;
        Accum {
            sumsq: 0.0,
            count: 0,
            g_theta: z(ops.n),
            g_phi: z(ops.n),
            g_w: z(if linear { ops.big_n * ops.n } else { 0 }),
            g_b: z(if linear { ops.big_n } else { 0 }),
            g_bn: None,
        }
    }

    fn merge(&mut self, other: &Accum) {
        self.sumsq += other.sumsq;
        self.count += other.count;
        par::add_assign(&mut self.g_theta, &other.g_theta);
        par::add_assign(&mut self.g_phi, &other.g_phi);
        par::add_assign(&mut self.g_w, &other.g_w);
        par::add_assign(&mut self.g_b, &other.g_b);
        match (&mut self.g_bn, &other.g_bn) {
            (Some(a), Some(b)) => *a += b,
            (a @ None, Some(b)) => *a = Some(b.clone()),
            _ => {}
        }
    }
}

/// Forward (and optionally backward) pass over `voxels` of one volume.
/// Matrices hold one voxel per column.
pub(crate) fn evaluate(
    ops: &Operators,
    params: &ReconstructionParams,
    prep: &Prepared,
    target: &[f64],
    voxels: &[usize],
    grads: bool,
    learn_dirs: bool,
) -> Accum {
    let weights = (params.mode == ReconMode::Linear)
        .then(|| DMatrix::from_row_slice(params.n_out, params.n_in, &params.weights));
    let bias = DVector::from_column_slice(&params.bias);
    let partials = par::map_chunks(voxels, CHUNK, |_, chunk| {
        let mut acc = Accum::new(ops, params, grads);
        let (n, big_n, r, m) = (ops.n, ops.big_n, ops.r, chunk.len());
        let mut c = DMatrix::<f64>::zeros(r, m);
        let mut x = DMatrix::<f64>::zeros(big_n, m);
        for (j, &v) in chunk.iter().enumerate() {
            c.column_mut(j).copy_from_slice(&prep.coeffs[v * r..(v + 1) * r]);
            x.column_mut(j).copy_from_slice(&target[v * big_n..(v + 1) * big_n]);
        }
        let raw = &ops.b_out * &c;
        let xt = raw.map(|s| s.max(0.0));
        let mut cp = None;
        let xhat = match params.mode {
            ReconMode::Identity => xt.clone(),
            ReconMode::ShInterp => {
                let ip = ops.interp.as_ref().expect("interp operators");
                let coeffs = &ip.q * &xt;
                let out = &ip.big_b * &coeffs;
                cp = Some(coeffs);
                out
            }
            ReconMode::Linear => {
                let mut out = weights.as_ref().expect("linear weights") * &xt;
                for mut col in out.column_iter_mut() {
                    col += &bias;
                }
                out
            }
        };
        let res = xhat - x;
        acc.sumsq = res.iter().map(|e| e * e).sum();
        acc.count = big_n * m;
        if !grads {
            return acc;
        }
        let mut gxt = match params.mode {
            ReconMode::Identity => res.clone(),
            ReconMode::Linear => {
                let w = weights.as_ref().expect("linear weights");
                let gw = &res * xt.transpose();
                // transposed column-major storage is row-major
                acc.g_w.copy_from_slice(gw.transpose().as_slice());
                acc.g_b.copy_from_slice(res.column_sum().as_slice());
                w.transpose() * &res
            }
            ReconMode::ShInterp => {
                let ip = ops.interp.as_ref().expect("interp operators");
                let cp = cp.as_ref().expect("interp coefficients");
                let wv = &ip.ginv * (ip.big_b.transpose() * &res);
                let gxt = &ip.bn * &wv;
                if learn_dirs {
                    let fit_resid = &xt - &ip.bn * cp;
                    acc.g_bn = Some(fit_resid * wv.transpose() - &gxt * cp.transpose());
                }
                gxt
            }
        };
        if learn_dirs {
            for (g, s) in gxt.iter_mut().zip(raw.iter()) {
                if *s <= 0.0 {
                    *g = 0.0;
                }
            }
            let dt = &ops.d_theta * &c;
            let dp = &ops.d_phi * &c;
            for k in 0..n {
                acc.g_theta[k] = gxt.row(k).dot(&dt.row(k));
                acc.g_phi[k] = gxt.row(k).dot(&dp.row(k));
            }
        }
        acc
    });
    let mut total = Accum::new(ops, params, grads);
    for p in &partials {
        total.merge(p);
    }
    if grads && learn_dirs {
        if let (Some(ip), Some(g)) = (&ops.interp, &total.g_bn) {
            for k in 0..ops.n {
                total.g_theta[k] += g.row(k).dot(&ip.bn_dt.row(k));
                total.g_phi[k] += g.row(k).dot(&ip.bn_dp.row(k));
            }
        }
    }
    total
}

/// Loss value and the factor turning ½‖r‖² gradients into loss gradients.
pub(crate) fn finish(acc: &Accum, loss: LossKind) -> (f64, f64) {
    match loss {
        LossKind::L2 => {
            let norm = acc.sumsq.sqrt();
            (norm, if norm < ZERO_RESIDUAL { 0.0 } else { 1.0 / norm })
        }
        LossKind::Mse => {
            let c = acc.count.max(1) as f64;
            (acc.sumsq / c, 2.0 / c)
        }
    }
}

/// Loss of `reconstruct ∘ subsample` against `x` and its gradients with
/// respect to the direction angles and (linear mode) the reconstruction
/// parameters. Covers all brain-mask voxels of `x`.
pub fn loss_gradients(
    x: &DwiVolume,
    dirs: &DirectionSet,
    params: &ReconstructionParams,
    cfg: &ForwardConfig,
) -> Result<Gradients> {
    let prep = Prepared::new(x, cfg.order, cfg.lambda)?;
    let ops = Operators::new(dirs, &x.dirs, params, cfg)?;
    let voxels: Vec<usize> = x
        .brain_mask()
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.then_some(i))
        .collect();
    let acc = evaluate(&ops, params, &prep, &x.data, &voxels, true, true);
    let (loss, s) = finish(&acc, cfg.loss);
    let scale = |v: &[f64]| v.iter().map(|g| g * s).collect::<Vec<f64>>();
    Ok(Gradients {
        loss,
        theta: scale(&acc.g_theta),
        phi: scale(&acc.g_phi),
        weights: scale(&acc.g_w),
        bias: scale(&acc.g_b),
    })
}
