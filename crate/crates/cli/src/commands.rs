use std::path::{Path, PathBuf};

use serde::Serialize;

use qspace::design::{electrostatic_design, DesignConfig};
use qspace::phantom::{add_rician_noise, phantom_truth, synthesize, PhantomSpec, PhantomTruth, Preset};
use qspace::pipeline::{reconstruct, subsample, train_joint_from, ReconstructionParams, TrainConfig};
use qspace::score::{assign_bundles, connection_scores, format_db, mean_bundle_distance, psnr};
use qspace::sphere::{default_order, DirectionSet, MAX_DEFAULT_ORDER};
use qspace::tract::{
    csa_odf, hemisphere_tessellation, seeds_from_mask, track_streamlines, PeakFinder, PeakParams, TrackParams,
    Tractogram,
};
use qspace::volume::{DwiVolume, ScalarQvol};

use crate::manifest::{manifest_path, Manifest};
use crate::svg::{plot_dirs_svg, PlotSet, DEFAULT_COLORS};
use crate::{
    export_bvec, Cli, CliError, CliResult, Command, DesignArgs, ExportBvecArgs, PhantomArgs, PlotDirsArgs,
    ResampleArgs, ScoreBdArgs, ScoreConnectionsArgs, ScorePsnrArgs, TrackArgs, TrainArgs,
};

pub(crate) fn dispatch(cli: &Cli) -> CliResult<()> {
    let threads = qspace::par::current_threads();
    match &cli.command {
        Command::Design(a) => design(a, Manifest::new("design", threads, a)),
        Command::Phantom(a) => phantom(a, Manifest::new("phantom", threads, a)),
        Command::Train(a) => train(a, Manifest::new("train", threads, a)),
        Command::Resample(a) => resample(a, Manifest::new("resample", threads, a)),
        Command::Track(a) => track(a, Manifest::new("track", threads, a)),
        Command::ScorePsnr(a) => score_psnr(a, Manifest::new("score-psnr", threads, a)),
        Command::ScoreBd(a) => score_bd(a, Manifest::new("score-bd", threads, a)),
        Command::ScoreConnections(a) => score_connections(a, Manifest::new("score-connections", threads, a)),
        Command::ExportBvec(a) => export(a, Manifest::new("export-bvec", threads, a)),
        Command::PlotDirs(a) => plot(a, Manifest::new("plot-dirs", threads, a)),
    }
}

fn write_text(path: &Path, text: &str, m: &mut Manifest) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    m.output(path);
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

fn design(a: &DesignArgs, mut m: Manifest) -> CliResult<()> {
    let cfg = DesignConfig {
        max_iters: a.max_iters,
        tol: a.tol,
        ..DesignConfig::new(a.n, a.seed)
    };
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let dirs = electrostatic_design(&cfg)?;
    m.result("energy", qspace::design::coulomb_energy(&dirs)?);
    dirs.write_csv(&a.out)?;
    m.output(&a.out);
    m.write(&manifest_path(&a.out))
}

fn parse_dims(s: &str) -> CliResult<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("bad --dims '{s}', expected X,Y,Z")))?;
    match parts[..] {
        [x, y, z] => Ok([x, y, z]),
        _ => Err(usage(format!("bad --dims '{s}', expected X,Y,Z"))),
    }
}

fn phantom(a: &PhantomArgs, mut m: Manifest) -> CliResult<()> {
    let preset: Preset = a.preset.parse().map_err(usage)?;
    let dims = parse_dims(&a.dims)?;
    if let Some(snr) = a.snr {
        if !(snr > 0.0) {
            return Err(usage("--snr must be > 0"));
        }
    }
    let spec = PhantomSpec {
        radius: a.radius,
        b_value: a.b_value,
        voxel_size: [a.voxel_size; 3],
        ..PhantomSpec::new(preset, dims, a.n_dirs, a.seed)
    };
    let dirs = match &a.dirs {
        Some(p) => DirectionSet::read_csv(p)?,
        None => electrostatic_design(&DesignConfig::new(a.n_dirs, a.seed))?,
    };
    let truth = phantom_truth(&spec)?;
    let mut x = synthesize(&truth, &dirs, spec.b_value, spec.voxel_size)?;
    let noise_seed = a.noise_seed.unwrap_or(a.seed);
    if let Some(snr) = a.snr {
        x = add_rician_noise(&x, snr, noise_seed)?;
        m.effective("noise_seed", noise_seed);
    }
    m.effective("n_dirs", dirs.len());
    x.write_qvol(&a.out)?;
    m.output(&a.out);
    // endpoint ROIs as one label map: ROI k of the truth file is stored as k + 1
    let rois = ScalarQvol {
        dims: truth.dims,
        voxel_size: spec.voxel_size,
        b_value: 0.0,
        data: truth.roi_map().iter().map(|r| r.map_or(0.0, |k| (k + 1) as f64)).collect(),
    };
    let roi_path = sibling(&a.out, "_rois.qvol");
    rois.write(&roi_path)?;
    m.output(&roi_path);
    truth.write(&a.truth)?;
    m.output(&a.truth);
    m.write(&manifest_path(&a.out))
}

/// `dir/<stem of path><suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn read_volumes(paths: &[PathBuf]) -> CliResult<Vec<DwiVolume>> {
    Ok(paths.iter().map(|p| DwiVolume::read_qvol(p)).collect::<qspace::Result<Vec<_>>>()?)
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
}

fn train(a: &TrainArgs, mut m: Manifest) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    };
    for (k, v) in a.keys.pairs() {
        cfg.set(k, v).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    let train = read_volumes(&a.train)?;
    let val = read_volumes(&a.val)?;
    let init = a.init_dirs.as_deref().map(DirectionSet::read_csv).transpose()?;
    let outcome = train_joint_from(&train, &val, &cfg, init.as_ref())?;

    create_dir(&a.out_dir)?;
    let f = &outcome.forward;
    m.effective("config", &cfg);
    m.effective("n_full", train[0].channels());
    m.effective("n", outcome.dirs.len());
    m.effective("order", f.order);
    m.effective("recon_order", f.recon_order);
    m.result("best_epoch", outcome.best_epoch);
    let losses: Vec<LossRow> = outcome
        .history
        .iter()
        .map(|h| LossRow {
            epoch: h.epoch,
            train_loss: h.train_loss,
            val_loss: h.val_loss,
        })
        .collect();
    m.result("loss_history", &losses);

    let out = |name: &str| a.out_dir.join(name);
    write_text(&out("config.conf"), &cfg.to_text(), &mut m)?;
    outcome.dirs.write_csv(&out("dirs.csv"))?;
    m.output(&out("dirs.csv"));
    outcome.initial_dirs.write_csv(&out("initial_dirs.csv"))?;
    m.output(&out("initial_dirs.csv"));
    write_text(&out("params.json"), &outcome.params.to_json(), &mut m)?;
    let mut loss_csv = String::from("epoch,train_loss,val_loss\n");
    for r in &losses {
        loss_csv.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
    }
    write_text(&out("loss_history.csv"), &loss_csv, &mut m)?;
    let mut dir_csv = String::from("epoch,index,theta,phi\n");
    for h in &outcome.history {
        for (k, d) in h.dirs.dirs.iter().enumerate() {
            dir_csv.push_str(&format!("{},{k},{},{}\n", h.epoch, d.theta, d.phi));
        }
    }
    write_text(&out("direction_history.csv"), &dir_csv, &mut m)?;
    m.write(&out("manifest.json"))
}

fn resample(a: &ResampleArgs, mut m: Manifest) -> CliResult<()> {
    let x = DwiVolume::read_qvol(&a.input)?;
    let dirs = DirectionSet::read_csv(&a.dirs)?;
    let order = if a.order == 0 { default_order(x.channels()) } else { a.order };
    m.effective("order", order);
    let mut y = subsample(&x, &dirs, order, a.lambda)?;
    if let Some(p) = &a.params {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        let params = ReconstructionParams::from_json(&text, p)?;
        let target = match &a.target {
            Some(t) => DirectionSet::read_csv(t)?,
            None => x.dirs.clone(),
        };
        let recon_order = if a.recon_order == 0 { default_order(dirs.len()) } else { a.recon_order };
        m.effective("recon_order", recon_order);
        m.effective("recon_mode", params.mode);
        y = reconstruct(&y, &params, &target, recon_order, a.recon_lambda)?;
    }
    y.write_qvol(&a.out)?;
    m.output(&a.out);
    m.write(&manifest_path(&a.out))
}

fn track(a: &TrackArgs, mut m: Manifest) -> CliResult<()> {
    let x = DwiVolume::read_qvol(&a.input)?;
    let order = if a.order == 0 {
        default_order(x.channels()).min(MAX_DEFAULT_ORDER)
    } else {
        a.order
    };
    m.effective("order", order);
    let params = TrackParams {
        step_size: a.step,
        angle_deg: a.max_angle,
        gfa_thresh: a.gfa,
        max_len: a.max_len,
    };
    let peak_params = PeakParams {
        rel_threshold: a.rel_threshold,
        min_separation_deg: a.min_separation,
        max_peaks: a.max_peaks,
    };
    if !(a.step > 0.0) || a.max_peaks == 0 {
        return Err(usage("--step must be > 0 and --max-peaks at least 1"));
    }
    let truth = a.truth.as_deref().map(PhantomTruth::read).transpose()?;
    if let Some(t) = &truth {
        if t.dims != x.dims {
            return Err(qspace::Error::Shape(format!("truth dims {:?} differ from volume {:?}", t.dims, x.dims)).into());
        }
    }
    let odf = csa_odf(&x, order, a.lambda)?;
    let gfa = odf.gfa_map();
    let mask: Vec<bool> = gfa.iter().map(|&g| g >= a.gfa).collect();
    let peaks = PeakFinder::new(hemisphere_tessellation(), order, peak_params).field(&odf, Some(&mask));
    let seeds = match &truth {
        Some(t) => seeds_from_mask(&t.fiber_mask(), t.dims),
        None => seeds_from_mask(&mask, x.dims),
    };
    let mut t = track_streamlines(&peaks, &gfa, &seeds, &params)?;
    m.effective("n_seeds", seeds.len());
    m.result("n_streamlines", t.len());
    if let Some(truth) = &truth {
        t = assign_bundles(&t, truth).0;
    }
    t.write_qtrk(&a.out)?;
    m.output(&a.out);
    if let Some(csv) = t.labels_csv() {
        write_text(&a.out.with_extension("labels.csv"), &csv, &mut m)?;
    }
    m.write(&manifest_path(&a.out))
}

fn score_psnr(a: &ScorePsnrArgs, mut m: Manifest) -> CliResult<()> {
    let pred = DwiVolume::read_qvol(&a.pred)?;
    let reference = DwiVolume::read_qvol(&a.reference)?;
    let v = format_db(psnr(&pred, &reference, &reference.brain_mask())?);
    let report = format!("psnr_db = {v}\n");
    print!("{report}");
    m.result("psnr_db", &v);
    write_text(&a.out, &report, &mut m)?;
    m.write(&manifest_path(&a.out))
}

fn labeled(path: &Path, truth: &PhantomTruth) -> CliResult<Tractogram> {
    Ok(assign_bundles(&Tractogram::read_qtrk(path)?, truth).0)
}

fn score_bd(a: &ScoreBdArgs, mut m: Manifest) -> CliResult<()> {
    if a.bins == 0 {
        return Err(usage("--bins must be at least 1"));
    }
    let truth = PhantomTruth::read(&a.truth)?;
    let bd = mean_bundle_distance(&labeled(&a.candidate, &truth)?, &labeled(&a.reference, &truth)?, &truth, a.bins)?;
    let report = format!(
        "bd_variant = per-axis marginal histograms over the joint bounding box, -ln of the mean coefficient\nbins = {}\nmean_bd = {bd}\n",
        a.bins
    );
    print!("{report}");
    m.result("mean_bd", bd);
    write_text(&a.out, &report, &mut m)?;
    m.write(&manifest_path(&a.out))
}

fn score_connections(a: &ScoreConnectionsArgs, mut m: Manifest) -> CliResult<()> {
    let truth = PhantomTruth::read(&a.truth)?;
    let r = connection_scores(&labeled(&a.tractogram, &truth)?, &truth)?;
    let text = r.to_text();
    print!("{text}");
    write_text(&a.out, &text, &mut m)?;
    if let Some(csv) = &a.csv {
        write_text(csv, &r.to_csv(), &mut m)?;
    }
    m.result("vc", r.vc);
    m.result("ol", r.ol);
    m.result("or", r.or_);
    m.write(&manifest_path(&a.out))
}

fn export(a: &ExportBvecArgs, mut m: Manifest) -> CliResult<()> {
    if !(a.b > 0.0) {
        return Err(usage("--b must be > 0"));
    }
    let dirs = DirectionSet::read_csv(&a.dirs)?;
    let (bvecs, bvals) = export_bvec(&dirs, a.b, a.n_b0);
    create_dir(&a.out_dir)?;
    write_text(&a.out_dir.join("bvecs"), &bvecs, &mut m)?;
    write_text(&a.out_dir.join("bvals"), &bvals, &mut m)?;
    m.write(&a.out_dir.join("manifest.json"))
}

fn plot(a: &PlotDirsArgs, mut m: Manifest) -> CliResult<()> {
    let sets = a.dirs.iter().map(|p| DirectionSet::read_csv(p)).collect::<qspace::Result<Vec<_>>>()?;
    let plot_sets: Vec<PlotSet> = sets
        .iter()
        .enumerate()
        .map(|(k, d)| PlotSet {
            dirs: d,
            color: a.colors.get(k).map_or(DEFAULT_COLORS[k.min(1)], String::as_str),
            label: a.labels.get(k).map_or("", String::as_str),
        })
        .collect();
    let svg = plot_dirs_svg(&plot_sets).map_err(usage)?;
    write_text(&a.out, &svg, &mut m)?;
    m.write(&manifest_path(&a.out))
}
