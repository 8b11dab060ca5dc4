//! Fixed-versus-learned acquisition grid on a synthetic phantom set:
//! training, validation PSNR, and no-reconstruction tractography distance.

use std::fmt::Write as _;

use crate::design::{electrostatic_design, DesignConfig};
use crate::error::{Error, Result};
use crate::phantom::{add_rician_noise, generate_phantom, PhantomSpec, PhantomTruth, Preset};
use crate::pipeline::{
    reconstruct, subsample, train_joint, DirMode, ReconMode, TrainConfig, TrainOutcome,
};
use crate::score::{assign_bundles, mean_bundle_distance, psnr, DEFAULT_BINS};
use crate::sphere::{angular_distance_antipodal, default_order, DirectionSet, DEFAULT_LAMBDA};
use crate::tract::{
    csa_odf, hemisphere_tessellation, seeds_from_mask, track_streamlines, PeakFinder, PeakParams, TrackParams,
    Tractogram,
};
use crate::volume::DwiVolume;

/// ODF order used for the fully sampled reference tractograms.
pub const REFERENCE_ODF_ORDER: usize = 8;
/// Epoch cap of the grid runs. Randomly initialized directions are still
/// improving after 50 epochs, so early stopping decides when runs end.
pub const GRID_EPOCHS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub dims: [usize; 3],
    pub n_full: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub snr: f64,
    pub afs: Vec<f64>,
    /// Acceleration factors also scored by tractography without reconstruction.
    pub bd_afs: Vec<f64>,
    pub seed: u64,
    /// Template for every run; `af` and `mode` are overwritten per run.
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: Preset::Crossing { angle_deg: 60.0 },
            dims: [32, 32, 32],
            n_full: 60,
            n_train: 8,
            n_val: 2,
            snr: 20.0,
            afs: vec![3.0, 5.0, 10.0],
            bd_afs: vec![5.0, 10.0],
            seed: 1,
            train: TrainConfig {
                recon: ReconMode::Linear,
                seed: 1,
                epochs: GRID_EPOCHS,
                ..TrainConfig::default()
            },
        }
    }
}

/// Noisy training and validation volumes sharing one geometry and one
/// direction set, plus their ground truth.
pub struct Dataset {
    pub train: Vec<DwiVolume>,
    pub val: Vec<DwiVolume>,
    pub truth: PhantomTruth,
}

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let spec = PhantomSpec::new(cfg.preset, cfg.dims, cfg.n_full, cfg.seed);
    let (clean, truth) = generate_phantom(&spec)?;
    let noisy = |k: u64| add_rician_noise(&clean, cfg.snr, cfg.seed.wrapping_mul(1000).wrapping_add(k));
    let train = (0..cfg.n_train as u64).map(noisy).collect::<Result<Vec<_>>>()?;
    let val = (0..cfg.n_val as u64).map(|k| noisy(500 + k)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { train, val, truth })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub af: f64,
    pub n: usize,
    pub mode: DirMode,
    pub outcome: TrainOutcome,
    /// Mean over validation volumes.
    pub psnr: f64,
    /// Mean bundle distance without reconstruction, when scored.
    pub bd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineResult {
    pub af: f64,
    pub n: usize,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub runs: Vec<RunResult>,
    pub baselines: Vec<BaselineResult>,
}

impl ExperimentResult {
    pub fn run(&self, af: f64, mode: DirMode) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.af == af && r.mode == mode)
    }

    pub fn baseline(&self, af: f64) -> Option<&BaselineResult> {
        self.baselines.iter().find(|b| b.af == af)
    }

    /// One row per run plus one per identity baseline.
    pub fn report_csv(&self) -> String {
        let mut s = String::from("af,n,mode,recon,psnr_db,bd,best_epoch,epochs_run,best_val_loss\n");
        for r in &self.runs {
            let best = r.outcome.history.iter().find(|h| h.epoch == r.outcome.best_epoch);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.af,
                r.n,
                r.mode,
                r.outcome.params.mode,
                r.psnr,
                r.bd.map_or(String::new(), |b| b.to_string()),
                r.outcome.best_epoch,
                r.outcome.history.len(),
                best.map_or(String::new(), |h| h.val_loss.to_string()),
            );
        }
        for b in &self.baselines {
            let _ = writeln!(s, "{},{},fixed,nearest,{},,,,", b.af, b.n, b.psnr);
        }
        s
    }

    /// Per-epoch losses of every run.
    pub fn loss_history_csv(&self) -> String {
        let mut s = String::from("af,mode,epoch,train_loss,val_loss\n");
        for r in &self.runs {
            for h in &r.outcome.history {
                let _ = writeln!(s, "{},{},{},{},{}", r.af, r.mode, h.epoch, h.train_loss, h.val_loss);
            }
        }
        s
    }

    /// Per-epoch direction angles of every run.
    pub fn direction_history_csv(&self) -> String {
        let mut s = String::from("af,mode,epoch,index,theta,phi\n");
        for r in &self.runs {
            for h in &r.outcome.history {
                for (k, d) in h.dirs.dirs.iter().enumerate() {
                    let _ = writeln!(s, "{},{},{},{k},{},{}", r.af, r.mode, h.epoch, d.theta, d.phi);
                }
            }
        }
        s
    }
}

/// Fills every target channel from the acquired channel nearest to it.
pub fn nearest_direction_fill(xt: &DwiVolume, target: &DirectionSet) -> DwiVolume {
    let acquired = xt.dirs.to_cartesian();
    let pick: Vec<usize> = target
        .to_cartesian()
        .iter()
        .map(|t| {
            (0..acquired.len())
                .min_by(|&a, &b| {
                    angular_distance_antipodal(t, &acquired[a]).total_cmp(&angular_distance_antipodal(t, &acquired[b]))
                })
                .expect("at least one acquired direction")
        })
        .collect();
    let n = xt.channels();
    let mut data = Vec::with_capacity(xt.n_voxels() * pick.len());
    for v in xt.data.chunks_exact(n) {
        data.extend(pick.iter().map(|&k| v[k]));
    }
    xt.with_data(target.clone(), data)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn validation_psnr(val: &[DwiVolume], dirs: &DirectionSet, outcome: &TrainOutcome) -> Result<f64> {
    let fwd = &outcome.forward;
    let mut out = Vec::new();
    for x in val {
        let xt = subsample(x, dirs, fwd.order, fwd.lambda)?;
        let xhat = reconstruct(&xt, &outcome.params, &x.dirs, fwd.recon_order, fwd.recon_lambda)?;
        out.push(psnr(&xhat, x, &x.brain_mask())?);
    }
    Ok(mean(&out))
}

/// Labeled tractogram of `x` from CSA peaks, seeded in every fiber voxel.
pub fn tractogram_for(x: &DwiVolume, truth: &PhantomTruth, odf_order: usize, params: &TrackParams) -> Result<Tractogram> {
    let odf = csa_odf(x, odf_order, DEFAULT_LAMBDA)?;
    let gfa = odf.gfa_map();
    let mask: Vec<bool> = gfa.iter().map(|&g| g >= params.gfa_thresh).collect();
    let finder = PeakFinder::new(hemisphere_tessellation(), odf_order, PeakParams::default());
    let peaks = finder.field(&odf, Some(&mask));
    let seeds = seeds_from_mask(&truth.fiber_mask(), truth.dims);
    let t = track_streamlines(&peaks, &gfa, &seeds, params)?;
    Ok(assign_bundles(&t, truth).0)
}

fn no_recon_distance(
    val: &[DwiVolume],
    references: &[Tractogram],
    truth: &PhantomTruth,
    dirs: &DirectionSet,
    outcome: &TrainOutcome,
) -> Result<f64> {
    let fwd = &outcome.forward;
    let mut out = Vec::new();
    for (x, reference) in val.iter().zip(references) {
        let xt = subsample(x, dirs, fwd.order, fwd.lambda)?;
        let t = tractogram_for(&xt, truth, default_order(dirs.len()), &TrackParams::default())?;
        out.push(mean_bundle_distance(&t, reference, truth, DEFAULT_BINS)?);
    }
    Ok(mean(&out))
}

/// Runs the fixed and learned arms at every acceleration factor on `data`.
pub fn run_experiment_on(cfg: &ExperimentConfig, data: &Dataset) -> Result<ExperimentResult> {
    if data.val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let references = if cfg.bd_afs.is_empty() {
        Vec::new()
    } else {
        data.val
            .iter()
            .map(|x| tractogram_for(x, &data.truth, REFERENCE_ODF_ORDER.min(default_order(x.channels())), &TrackParams::default()))
            .collect::<Result<Vec<_>>>()?
    };
    let mut runs = Vec::new();
    let mut baselines = Vec::new();
    for &af in &cfg.afs {
        let n = TrainConfig { af, ..cfg.train.clone() }.n_acquired(cfg.n_full)?;
        for mode in [DirMode::Fixed, DirMode::Learned] {
            let tc = TrainConfig { af, mode, ..cfg.train.clone() };
            let outcome = train_joint(&data.train, &data.val, &tc)?;
            let psnr = validation_psnr(&data.val, &outcome.dirs, &outcome)?;
            let bd = if cfg.bd_afs.contains(&af) {
                Some(no_recon_distance(&data.val, &references, &data.truth, &outcome.dirs, &outcome)?)
            } else {
                None
            };
            runs.push(RunResult {
                af,
                n,
                mode,
                outcome,
                psnr,
                bd,
            });
        }
        let fixed = electrostatic_design(&DesignConfig::new(n, cfg.train.seed))?;
        let fwd = TrainConfig { af, ..cfg.train.clone() }.forward_config(cfg.n_full, n);
        let mut vals = Vec::new();
        for x in &data.val {
            let xt = subsample(x, &fixed, fwd.order, fwd.lambda)?;
            let xhat = nearest_direction_fill(&xt, &x.dirs);
            vals.push(psnr(&xhat, x, &x.brain_mask())?);
        }
        baselines.push(BaselineResult { af, n, psnr: mean(&vals) });
    }
    Ok(ExperimentResult { runs, baselines })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment_on(cfg, &build_dataset(cfg)?)
}
