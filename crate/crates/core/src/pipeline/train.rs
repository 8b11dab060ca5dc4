//! Slice-wise joint training of directions and reconstruction parameters.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamGroup, AdamState};
use super::engine::{evaluate, finish, ForwardConfig, LossKind, Operators, Prepared};
use super::{ReconMode, ReconstructionParams};
use crate::design::{electrostatic_design, DesignConfig};
use crate::error::{Error, Result};
use crate::sphere::{default_order, wrap_angles, Direction, DirectionSet, DEFAULT_LAMBDA};
use crate::volume::DwiVolume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirMode {
    Fixed,
    Learned,
}

impl std::str::FromStr for DirMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(DirMode::Fixed),
            "learned" => Ok(DirMode::Learned),
            _ => Err(Error::Invalid(format!("unknown direction mode '{s}'"))),
        }
    }
}

impl std::fmt::Display for DirMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DirMode::Fixed => "fixed",
            DirMode::Learned => "learned",
        })
    }
}

/// Training settings. `order` and `recon_order` of 0 select the default
/// order for the full and acquired direction counts respectively.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub af: f64,
    pub mode: DirMode,
    pub recon: ReconMode,
    pub lr_recon: f64,
    pub lr_dirs: f64,
    pub epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub order: usize,
    pub lambda: f64,
    pub recon_order: usize,
    pub recon_lambda: f64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            af: 5.0,
            mode: DirMode::Learned,
            recon: ReconMode::Linear,
            lr_recon: 1e-3,
            lr_dirs: 1e-4,
            epochs: 50,
            patience: 10,
            min_delta: 1e-5,
            seed: 0,
            order: 0,
            lambda: DEFAULT_LAMBDA,
            recon_order: 0,
            recon_lambda: DEFAULT_LAMBDA,
            loss: LossKind::L2,
        }
    }
}

pub const CONFIG_KEYS: [&str; 14] = [
    "af", "mode", "recon", "lr_recon", "lr_dirs", "epochs", "patience", "min_delta", "seed", "order",
    "lambda", "recon_order", "recon_lambda", "loss",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Invalid(format!("bad value '{value}' for '{key}'")))
}

impl TrainConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "af" => self.af = parse_value(key, v)?,
            "mode" => self.mode = v.parse()?,
            "recon" => self.recon = v.parse()?,
            "lr_recon" => self.lr_recon = parse_value(key, v)?,
            "lr_dirs" => self.lr_dirs = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "patience" => self.patience = parse_value(key, v)?,
            "min_delta" => self.min_delta = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "order" => self.order = parse_value(key, v)?,
            "lambda" => self.lambda = parse_value(key, v)?,
            "recon_order" => self.recon_order = parse_value(key, v)?,
            "recon_lambda" => self.recon_lambda = parse_value(key, v)?,
            "loss" => self.loss = v.parse()?,
            _ => return Err(Error::Invalid(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep their defaults.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, format!("line {}: expected key = value", no + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| Error::parse(origin, format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate().map_err(|e| Error::parse(origin, e.to_string()))?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "af = {}", self.af);
        let _ = writeln!(s, "mode = {}", self.mode);
        let _ = writeln!(s, "recon = {}", self.recon);
        let _ = writeln!(s, "lr_recon = {}", self.lr_recon);
        let _ = writeln!(s, "lr_dirs = {}", self.lr_dirs);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "min_delta = {}", self.min_delta);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "order = {}", self.order);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "recon_order = {}", self.recon_order);
        let _ = writeln!(s, "recon_lambda = {}", self.recon_lambda);
        let _ = writeln!(s, "loss = {}", self.loss);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.af >= 1.0) || !self.af.is_finite() {
            return Err(Error::Invalid(format!("af must be >= 1, got {}", self.af)));
        }
        if !(self.lr_recon > 0.0) || !(self.lr_dirs > 0.0) {
            return Err(Error::Invalid("learning rates must be > 0".into()));
        }
        if !(self.lambda >= 0.0) || !(self.recon_lambda >= 0.0) {
            return Err(Error::Invalid("lambda must be >= 0".into()));
        }
        if self.order % 2 == 1 {
            return Err(Error::OddOrder(self.order));
        }
        if self.recon_order % 2 == 1 {
            return Err(Error::OddOrder(self.recon_order));
        }
        Ok(())
    }

    /// Acquired direction count for `n_full` full-sampling directions.
    pub fn n_acquired(&self, n_full: usize) -> Result<usize> {
        let n = (n_full as f64 / self.af).round() as usize;
        if n == 0 {
            return Err(Error::Invalid(format!("af {} leaves no directions out of {n_full}", self.af)));
        }
        Ok(n)
    }

    pub fn forward_config(&self, n_full: usize, n: usize) -> ForwardConfig {
        ForwardConfig {
            order: if self.order == 0 { default_order(n_full) } else { self.order },
            lambda: self.lambda,
            recon_order: if self.recon_order == 0 { default_order(n) } else { self.recon_order },
            recon_lambda: self.recon_lambda,
            loss: self.loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-slice loss over the epoch's steps.
    pub train_loss: f64,
    /// Mean per-slice loss over the validation set after the epoch.
    pub val_loss: f64,
    pub dirs: DirectionSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub initial_dirs: DirectionSet,
    /// Best-validation snapshot.
    pub dirs: DirectionSet,
    pub params: ReconstructionParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub forward: ForwardConfig,
}

struct Example<'a> {
    volume: &'a DwiVolume,
    prep: Prepared,
    slices: Vec<Vec<usize>>,
}

impl<'a> Example<'a> {
    fn new(volume: &'a DwiVolume, fwd: &ForwardConfig) -> Result<Self> {
        let mask = volume.brain_mask();
        let slices = (0..volume.dims[2])
            .map(|z| volume.slice_indices(z).into_iter().filter(|&i| mask[i]).collect::<Vec<_>>())
            .filter(|s: &Vec<usize>| !s.is_empty())
            .collect();
        Ok(Example {
            volume,
            prep: Prepared::new(volume, fwd.order, fwd.lambda)?,
            slices,
        })
    }
}

fn check_dataset(set: &[DwiVolume], reference: &DwiVolume) -> Result<()> {
    for v in set {
        if v.dirs != reference.dirs || v.b_value != reference.b_value {
            return Err(Error::Shape("all volumes must share directions and b-value".into()));
        }
    }
    Ok(())
}

fn mean_slice_loss(
    examples: &[Example],
    ops: &Operators,
    params: &ReconstructionParams,
    loss: LossKind,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        for s in &ex.slices {
            let acc = evaluate(ops, params, &ex.prep, &ex.volume.data, s, false, false);
            total += finish(&acc, loss).0;
            count += 1;
        }
    }
    total / count.max(1) as f64
}

/// Trains on one axial slice per step. Validation uses `val` when non-empty,
/// otherwise the training set. Returns the best-validation snapshot.
pub fn train_joint(train: &[DwiVolume], val: &[DwiVolume], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_joint_from(train, val, cfg, None)
}

/// [`train_joint`] with the learned directions started from `init` instead
/// of a random draw. Fixed mode ignores `init`.
pub fn train_joint_from(
    train: &[DwiVolume],
    val: &[DwiVolume],
    cfg: &TrainConfig,
    init: Option<&DirectionSet>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = train.first().ok_or(Error::Empty("training set"))?;
    check_dataset(train, first)?;
    check_dataset(val, first)?;
    let full = &first.dirs;
    let big_n = full.len();
    let n = cfg.n_acquired(big_n)?;
    let fwd = cfg.forward_config(big_n, n);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial_dirs = match cfg.mode {
        DirMode::Fixed => electrostatic_design(&DesignConfig::new(n, cfg.seed))?,
        DirMode::Learned => {
            // drawn even when unused so the shuffle stream is the same
            let drawn = DirectionSet::uniform_hemisphere(n, &mut rng)?;
            match init {
                Some(d) if d.len() != n => {
                    return Err(Error::Shape(format!("initial directions: expected {n}, got {}", d.len())))
                }
                Some(d) => d.clone(),
                None => drawn,
            }
        }
    };
    let mut params = match cfg.recon {
        ReconMode::Identity => ReconstructionParams::identity(n),
        ReconMode::ShInterp => ReconstructionParams::sh_interp(n, big_n),
        ReconMode::Linear => {
            ReconstructionParams::linear_from_interp(&initial_dirs, full, fwd.recon_order, fwd.recon_lambda)?
        }
    };
    let learn_dirs = cfg.mode == DirMode::Learned;
    let mut theta = initial_dirs.thetas();
    let mut phi = initial_dirs.phis();

    let train_ex = train.iter().map(|v| Example::new(v, &fwd)).collect::<Result<Vec<_>>>()?;
    let val_ex = val.iter().map(|v| Example::new(v, &fwd)).collect::<Result<Vec<_>>>()?;
    let val_set = if val_ex.is_empty() { &train_ex } else { &val_ex };

    let mut steps: Vec<(usize, usize)> = train_ex
        .iter()
        .enumerate()
        .flat_map(|(e, ex)| (0..ex.slices.len()).map(move |s| (e, s)))
        .collect();
    if steps.is_empty() {
        return Err(Error::Empty("training voxels"));
    }

    let mut adam = AdamState::new(vec![
        AdamGroup::new(n, cfg.lr_dirs),
        AdamGroup::new(n, cfg.lr_dirs),
        AdamGroup::new(params.weights.len(), cfg.lr_recon),
        AdamGroup::new(params.bias.len(), cfg.lr_recon),
    ]);
    let current_dirs = |theta: &[f64], phi: &[f64]| -> Result<DirectionSet> {
        DirectionSet::new(theta.iter().zip(phi).map(|(&t, &p)| Direction::new(t, p)).collect())
    };

    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, initial_dirs.clone(), params.clone());
    let mut stale = 0usize;
    for epoch in 1..=cfg.epochs {
        steps.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &(e, s) in &steps {
            let dirs = current_dirs(&theta, &phi)?;
            let ops = Operators::new(&dirs, full, &params, &fwd)?;
            let ex = &train_ex[e];
            let acc = evaluate(&ops, &params, &ex.prep, &ex.volume.data, &ex.slices[s], true, learn_dirs);
            let (loss, scale) = finish(&acc, fwd.loss);
            epoch_loss += loss;
            let sc = |v: &[f64]| v.iter().map(|g| g * scale).collect::<Vec<f64>>();
            let (gt, gp) = if learn_dirs { (sc(&acc.g_theta), sc(&acc.g_phi)) } else { (vec![0.0; n], vec![0.0; n]) };
            let (gw, gb) = (sc(&acc.g_w), sc(&acc.g_b));
            if learn_dirs {
                adam.step(
                    &mut [&mut theta, &mut phi, &mut params.weights, &mut params.bias],
                    &[&gt, &gp, &gw, &gb],
                );
                for k in 0..n {
                    (theta[k], phi[k]) = wrap_angles(theta[k], phi[k]);
                }
            } else {
                // directions are frozen; their moments stay untouched
                let (mut t0, mut p0) = (theta.clone(), phi.clone());
                adam.step(&mut [&mut t0, &mut p0, &mut params.weights, &mut params.bias], &[&gt, &gp, &gw, &gb]);
            }
        }
        let dirs = current_dirs(&theta, &phi)?;
        let ops = Operators::new(&dirs, full, &params, &fwd)?;
        let val_loss = mean_slice_loss(val_set, &ops, &params, fwd.loss);
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / steps.len() as f64,
            val_loss,
            dirs: dirs.clone(),
        });
        if val_loss < best.0 - cfg.min_delta {
            best = (val_loss, epoch, dirs, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, dirs, params) = if history.is_empty() {
        (0.0, 0, initial_dirs.clone(), params)
    } else {
        best
    };
    Ok(TrainOutcome {
        initial_dirs,
        dirs,
        params,
        best_epoch,
        history,
        forward: fwd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::tests::band_limited;

    #[test]
    fn config_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.af = 3.0;
        cfg.mode = DirMode::Fixed;
        cfg.recon = ReconMode::ShInterp;
        cfg.loss = LossKind::Mse;
        cfg.seed = 17;
        let back = TrainConfig::parse(&cfg.to_text(), Path::new("c")).unwrap();
        assert_eq!(back, cfg);
        for key in CONFIG_KEYS {
            assert!(cfg.to_text().contains(&format!("{key} = ")), "{key}");
        }
    }

    #[test]
    fn config_rejects_bad_input() {
        let p = Path::new("c");
        assert!(TrainConfig::parse("af = 0.5\n", p).is_err());
        assert!(TrainConfig::parse("nope = 1\n", p).is_err());
        assert!(TrainConfig::parse("lr_dirs = -1\n", p).is_err());
        assert!(TrainConfig::parse("just text\n", p).is_err());
        let c = TrainConfig::parse("# comment\nepochs = 3 # trailing\n\n", p).unwrap();
        assert_eq!(c.epochs, 3);
    }

    #[test]
    fn acquired_counts() {
        let mut c = TrainConfig::default();
        for (af, n) in [(3.0, 20), (5.0, 12), (10.0, 6), (15.0, 4), (30.0, 2)] {
            c.af = af;
            assert_eq!(c.n_acquired(60).unwrap(), n);
        }
        c.af = 200.0;
        assert!(c.n_acquired(60).is_err());
    }

    fn small_design(n: usize) -> DirectionSet {
        electrostatic_design(&DesignConfig::new(n, 3)).unwrap()
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(train_joint(&[], &[], &TrainConfig::default()), Err(Error::Empty(_))));
    }

    #[test]
    fn fixed_mode_keeps_electrostatic_directions() {
        let full = small_design(20);
        let x = band_limited([3, 3, 2], &full, 4, 1);
        let cfg = TrainConfig { af: 2.0, mode: DirMode::Fixed, epochs: 3, seed: 5, ..Default::default() };
        let out = train_joint(std::slice::from_ref(&x), &[], &cfg).unwrap();
        let expected = electrostatic_design(&DesignConfig::new(10, 5)).unwrap();
        assert_eq!(out.dirs, expected);
        assert!(out.history.iter().all(|h| h.dirs == expected));
        assert_ne!(out.params.weights, ReconstructionParams::linear_from_interp(&expected, &full, 2, DEFAULT_LAMBDA).unwrap().weights);
    }

    #[test]
    fn full_sampling_interp_is_exact_on_band_limited_data() {
        let full = small_design(30);
        let x = band_limited([3, 3, 3], &full, 4, 2);
        let cfg = TrainConfig {
            af: 1.0,
            recon: ReconMode::ShInterp,
            mode: DirMode::Fixed,
            epochs: 2,
            order: 4,
            lambda: 0.0,
            recon_order: 4,
            recon_lambda: 0.0,
            ..Default::default()
        };
        let out = train_joint(&[x], &[], &cfg).unwrap();
        let last = out.history.last().unwrap();
        assert!(last.train_loss < 1e-6 && last.val_loss < 1e-6, "{last:?}");
    }

    #[test]
    fn learned_mode_moves_directions_and_is_deterministic() {
        let full = small_design(24);
        let train = [band_limited([4, 4, 3], &full, 4, 3), band_limited([4, 4, 3], &full, 4, 4)];
        let val = [band_limited([4, 4, 3], &full, 4, 5)];
        let cfg = TrainConfig { af: 3.0, epochs: 4, seed: 9, lr_dirs: 1e-2, ..Default::default() };
        let a = train_joint(&train, &val, &cfg).unwrap();
        assert_ne!(a.history.last().unwrap().dirs, a.initial_dirs);
        assert!(a.dirs.dirs.iter().all(|d| (0.0..=std::f64::consts::PI).contains(&d.theta)));
        let b = crate::par::with_threads(1, || train_joint(&train, &val, &cfg).unwrap());
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        assert_eq!(a.best_epoch, a.history.iter().min_by(|p, q| p.val_loss.total_cmp(&q.val_loss)).unwrap().epoch);
    }

    #[test]
    fn early_stopping_respects_patience() {
        let full = small_design(20);
        let x = band_limited([3, 3, 2], &full, 2, 6);
        let cfg = TrainConfig {
            af: 1.0,
            recon: ReconMode::ShInterp,
            mode: DirMode::Fixed,
            epochs: 30,
            patience: 2,
            ..Default::default()
        };
        // nothing is trainable, so validation never improves after epoch 1
        let out = train_joint(&[x], &[], &cfg).unwrap();
        assert_eq!(out.history.len(), 3);
        assert_eq!(out.best_epoch, 1);
    }
}
