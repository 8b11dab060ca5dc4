//! Signal-space PSNR, bundle Bhattacharyya distance and connection scores.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::phantom::PhantomTruth;
use crate::tract::{Point, Tractogram};
use crate::volume::DwiVolume;

pub const DEFAULT_BINS: usize = 32;
/// Distance reported when the mean Bhattacharyya coefficient underflows.
pub const BD_CAP: f64 = 50.0;
pub const LABEL_NON_CONNECTING: &str = "none";
const INVALID_PREFIX: &str = "invalid:";

/// Peak signal-to-noise ratio in dB, `f64::INFINITY` for a perfect match.
pub fn psnr(xhat: &DwiVolume, x: &DwiVolume, mask: &[bool]) -> Result<f64> {
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
    let (mut sq, mut count, mut peak) = (0.0, 0usize, f64::MIN);
    for v in (0..mask.len()).filter(|&v| mask[v]) {
        for k in v * d..(v + 1) * d {
            let r = xhat.data[k] - x.data[k];
            sq += r * r;
            peak = peak.max(x.data[k]);
        }
        count += d;
    }
    if count == 0 {
        return Err(Error::Empty("PSNR mask"));
    }
    let rmse = (sq / count as f64).sqrt();
    if rmse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / rmse).log10())
}

/// Formats a dB value, writing the perfect-match sentinel as `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

/// Bin counts over `[lo, hi]`; the top edge falls in the last bin.
fn histogram(values: impl Iterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    let width = hi - lo;
    for v in values {
        let b = if width > 0.0 { (((v - lo) / width) * bins as f64).floor() as usize } else { 0 };
        h[b.min(bins - 1)] += 1.0;
    }
    h
}

/// `−ln` of the mean per-axis Bhattacharyya coefficient between the point
/// clouds of two bundles, capped at [`BD_CAP`].
pub fn bhattacharyya_distance(a: &[Vec<Point>], b: &[Vec<Point>], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::Invalid("bins must be >= 1".into()));
    }
    let pa: Vec<&Point> = a.iter().flatten().collect();
    let pb: Vec<&Point> = b.iter().flatten().collect();
    if pa.is_empty() || pb.is_empty() {
        return Err(Error::Empty("bundle"));
    }
    let mut bc = 0.0;
    for axis in 0..3 {
        let (lo, hi) = pa.iter().chain(&pb).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| {
            (l.min(p[axis]), h.max(p[axis]))
        });
        let ha = histogram(pa.iter().map(|p| p[axis]), lo, hi, bins);
        let hb = histogram(pb.iter().map(|p| p[axis]), lo, hi, bins);
        // on raw counts so that identical clouds give exactly 1
        let overlap: f64 = ha.iter().zip(&hb).map(|(p, q)| (p * q).sqrt()).sum();
        bc += overlap / (pa.len() as f64 * pb.len() as f64).sqrt();
    }
    let mean = bc / 3.0;
    if mean <= 0.0 {
        return Ok(BD_CAP);
    }
    Ok((-mean.ln()).clamp(0.0, BD_CAP))
}

/// Streamlines of `t` carrying `label`.
pub fn bundle_streamlines(t: &Tractogram, label: &str) -> Vec<Vec<Point>> {
    match &t.labels {
        Some(labels) => t
            .streamlines
            .iter()
            .zip(labels)
            .filter(|(_, l)| l.as_str() == label)
            .map(|(s, _)| s.clone())
            .collect(),
        None => Vec::new(),
    }
}

/// Mean over ground-truth bundles of the distance between same-named
/// bundles of two labeled tractograms. A bundle missing on either side
/// scores [`BD_CAP`].
pub fn mean_bundle_distance(candidate: &Tractogram, reference: &Tractogram, truth: &PhantomTruth, bins: usize) -> Result<f64> {
    if truth.bundles.is_empty() {
        return Err(Error::Empty("ground-truth bundles"));
    }
    let mut total = 0.0;
    for b in &truth.bundles {
        let c = bundle_streamlines(candidate, &b.name);
        let r = bundle_streamlines(reference, &b.name);
        total += if c.is_empty() || r.is_empty() {
            BD_CAP
        } else {
            bhattacharyya_distance(&c, &r, bins)?
        };
    }
    Ok(total / truth.bundles.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamlineClass {
    Valid(usize),
    /// Sorted ROI pair.
    Invalid(usize, usize),
    NonConnecting,
}

fn voxel_of(p: &Point, dims: [usize; 3]) -> Option<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if !(p[a] >= -0.5 && p[a] <= dims[a] as f64 - 0.5) {
            return None;
        }
        out[a] = (p[a].round().max(0.0) as usize).min(dims[a] - 1);
    }
    Some(out)
}

/// Classifies every streamline by the ROIs holding its endpoints and
/// returns the tractogram labeled with bundle names, `invalid:<a>-<b>` ROI
/// pairs, or [`LABEL_NON_CONNECTING`].
pub fn assign_bundles(t: &Tractogram, truth: &PhantomTruth) -> (Tractogram, Vec<StreamlineClass>) {
    let roi_map = truth.roi_map();
    let roi_at = |p: &Point| voxel_of(p, truth.dims).and_then(|v| roi_map[truth.index(v)]);
    let classes: Vec<StreamlineClass> = t
        .streamlines
        .iter()
        .map(|s| {
            let (Some(a), Some(b)) = (s.first().and_then(roi_at), s.last().and_then(roi_at)) else {
                return StreamlineClass::NonConnecting;
            };
            let (ra, rb) = (&truth.rois[a], &truth.rois[b]);
            if ra.bundle == rb.bundle && ra.end != rb.end {
                StreamlineClass::Valid(ra.bundle)
            } else {
                StreamlineClass::Invalid(a.min(b), a.max(b))
            }
        })
        .collect();
    let labels = classes
        .iter()
        .map(|c| match c {
            StreamlineClass::Valid(b) => truth.bundles[*b].name.clone(),
            StreamlineClass::Invalid(a, b) => format!("{INVALID_PREFIX}{a}-{b}"),
            StreamlineClass::NonConnecting => LABEL_NON_CONNECTING.to_string(),
        })
        .collect();
    (
        Tractogram {
            streamlines: t.streamlines.clone(),
            labels: Some(labels),
        },
        classes,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConnectionReport {
    pub n_streamlines: usize,
    pub vc: f64,
    pub ic: f64,
    pub nc: f64,
    pub vb: usize,
    pub ib: usize,
    pub ol: f64,
    pub or_: f64,
    pub f1: f64,
    /// Bundles whose overreach exceeded 1 and was capped.
    pub or_capped: usize,
}

pub const CONNECTION_CSV_HEADER: &str = "n_streamlines,vc,ic,nc,vb,ib,ol,or,f1,or_capped";

impl ConnectionReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_streamlines = {}", self.n_streamlines);
        let _ = writeln!(s, "vc = {}", self.vc);
        let _ = writeln!(s, "ic = {}", self.ic);
        let _ = writeln!(s, "nc = {}", self.nc);
        let _ = writeln!(s, "vb = {}", self.vb);
        let _ = writeln!(s, "ib = {}", self.ib);
        let _ = writeln!(s, "ol = {}", self.ol);
        let _ = writeln!(s, "or = {}", self.or_);
        let _ = writeln!(s, "f1 = {}", self.f1);
        let _ = writeln!(s, "or_capped = {}", self.or_capped);
        s
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{CONNECTION_CSV_HEADER}\n{},{},{},{},{},{},{},{},{},{}\n",
            self.n_streamlines, self.vc, self.ic, self.nc, self.vb, self.ib, self.ol, self.or_, self.f1, self.or_capped
        )
    }
}

/// Tractometer-style scores of a labeled tractogram (see [`assign_bundles`]).
pub fn connection_scores(labeled: &Tractogram, truth: &PhantomTruth) -> Result<ConnectionReport> {
    let labels = labeled
        .labels
        .as_ref()
        .ok_or_else(|| Error::Invalid("tractogram has no labels".into()))?;
    if labels.len() != labeled.len() {
        return Err(Error::Shape("label count differs from streamline count".into()));
    }
    let n = labeled.len();
    if n == 0 {
        return Ok(ConnectionReport {
            n_streamlines: 0,
            vc: 0.0,
            ic: 0.0,
            nc: 1.0,
            vb: 0,
            ib: 0,
            ol: 0.0,
            or_: 0.0,
            f1: 0.0,
            or_capped: 0,
        });
    }
    let (mut valid, mut invalid) = (0usize, 0usize);
    let mut pairs = BTreeSet::new();
    for l in labels {
        if let Some(pair) = l.strip_prefix(INVALID_PREFIX) {
            invalid += 1;
            pairs.insert(pair);
        } else if l != LABEL_NON_CONNECTING {
            valid += 1;
        }
    }
    let nv = truth.n_voxels();
    let (mut vb, mut capped) = (0usize, 0usize);
    let (mut ol_sum, mut or_sum, mut f1_sum) = (0.0, 0.0, 0.0);
    for (b, bundle) in truth.bundles.iter().enumerate() {
        let mut visited = vec![false; nv];
        let mut any = false;
        for (s, l) in labeled.streamlines.iter().zip(labels) {
            if *l != bundle.name {
                continue;
            }
            any = true;
            for p in s {
                if let Some(v) = voxel_of(p, truth.dims) {
                    visited[truth.index(v)] = true;
                }
            }
        }
        if !any {
            continue;
        }
        vb += 1;
        let mask = truth.bundle_mask(b);
        let size = mask.iter().filter(|m| **m).count();
        let hit = visited.iter().zip(&mask).filter(|(v, m)| **v && **m).count();
        let stray = visited.iter().zip(&mask).filter(|(v, m)| **v && !**m).count();
        let n_visited = hit + stray;
        let ol = hit as f64 / size.max(1) as f64;
        let mut or = stray as f64 / size.max(1) as f64;
        if or > 1.0 {
            or = 1.0;
            capped += 1;
        }
        let precision = if n_visited == 0 { 0.0 } else { hit as f64 / n_visited as f64 };
        let f1 = if precision + ol == 0.0 { 0.0 } else { 2.0 * precision * ol / (precision + ol) };
        ol_sum += ol;
        or_sum += or;
        f1_sum += f1;
    }
    let mean = |s: f64| if vb == 0 { 0.0 } else { s / vb as f64 };
    let vc = valid as f64 / n as f64;
    let ic = invalid as f64 / n as f64;
    Ok(ConnectionReport {
        n_streamlines: n,
        vc,
        ic,
        nc: (n - valid - invalid) as f64 / n as f64,
        vb,
        ib: pairs.len(),
        ol: mean(ol_sum),
        or_: mean(or_sum),
        f1: mean(f1_sum),
        or_capped: capped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{phantom_truth, PhantomSpec, Preset};
    use crate::sphere::{Direction, DirectionSet};

    fn vol(data: Vec<f64>) -> DwiVolume {
        let dirs = DirectionSet::new(vec![Direction::new(0.3, 0.0), Direction::new(1.2, 1.0)]).unwrap();
        let nv = data.len() / 2;
        DwiVolume::new([nv, 1, 1], [1.0; 3], 1000.0, dirs, data, vec![1.0; nv]).unwrap()
    }

    #[test]
    fn psnr_values() {
        let x = vol(vec![1.0, 0.5, 0.2, 0.3]);
        assert_eq!(psnr(&x, &x, &[true, true]).unwrap(), f64::INFINITY);
        assert_eq!(format_db(f64::INFINITY), "inf");
        let y = vol(vec![1.1, 0.6, 0.3, 0.4]);
        assert!((psnr(&y, &x, &[true, true]).unwrap() - 20.0).abs() < 1e-9);
        let z = vol(vec![1.05, 0.55, 0.25, 0.35]);
        let gain = psnr(&z, &x, &[true, true]).unwrap() - psnr(&y, &x, &[true, true]).unwrap();
        assert!((gain - 20.0 * 2f64.log10()).abs() < 1e-9);
        assert!(matches!(psnr(&y, &x, &[false, false]), Err(Error::Empty(_))));
    }

    fn line(xs: &[f64]) -> Vec<Vec<Point>> {
        vec![xs.iter().map(|&x| [x, 1.0, 2.0]).collect()]
    }

    #[test]
    fn bd_hand_values() {
        let a = line(&[0.0, 1.0]);
        assert_eq!(bhattacharyya_distance(&a, &a, 32).unwrap(), 0.0);
        // two bins over [0, 1]: p = (0.5, 0.5), q = (1, 0)
        let b = line(&[0.0, 0.0]);
        let got = bhattacharyya_distance(&a, &b, 2).unwrap();
        let want = -((0.5f64.sqrt() + 2.0) / 3.0).ln();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.1027318).abs() < 1e-6);
        let far: Vec<Vec<Point>> = vec![vec![[10.0, 10.0, 10.0]; 2]];
        let near: Vec<Vec<Point>> = vec![vec![[0.0, 0.0, 0.0]; 2]];
        assert_eq!(bhattacharyya_distance(&near, &far, 32).unwrap(), BD_CAP);
        assert!(bhattacharyya_distance(&[], &a, 32).is_err());
    }

    fn straight() -> PhantomTruth {
        phantom_truth(&PhantomSpec::new(Preset::Straight, [16, 16, 16], 30, 1)).unwrap()
    }

    fn along_y(x: f64, y0: f64, y1: f64) -> Vec<Point> {
        let n = ((y1 - y0) / 0.5).round() as usize;
        (0..=n).map(|i| [x, y0 + 0.5 * i as f64, 7.5]).collect()
    }

    #[test]
    fn classification() {
        let truth = straight();
        let t = Tractogram {
            streamlines: vec![along_y(7.5, 0.0, 15.0), along_y(7.5, 0.0, 8.0), along_y(7.5, 0.0, 15.0).into_iter().rev().collect()],
            labels: None,
        };
        let (labeled, classes) = assign_bundles(&t, &truth);
        assert_eq!(classes[0], StreamlineClass::Valid(0));
        assert_eq!(classes[1], StreamlineClass::NonConnecting);
        assert_eq!(classes[2], StreamlineClass::Valid(0));
        let r = connection_scores(&labeled, &truth).unwrap();
        assert!((r.vc - 2.0 / 3.0).abs() < 1e-12 && (r.nc - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!((r.vb, r.ib), (1, 0));
    }

    #[test]
    fn same_roi_at_both_ends_is_invalid() {
        let truth = straight();
        let t = Tractogram {
            streamlines: vec![vec![[7.0, 0.0, 7.0], [7.0, 1.0, 7.0], [7.0, 0.0, 8.0]]],
            labels: None,
        };
        let (labeled, classes) = assign_bundles(&t, &truth);
        assert!(matches!(classes[0], StreamlineClass::Invalid(a, b) if a == b));
        let r = connection_scores(&labeled, &truth).unwrap();
        assert_eq!((r.ic, r.ib), (1.0, 1));
    }

    #[test]
    fn crossing_jump_is_invalid() {
        let truth = phantom_truth(&PhantomSpec::new(Preset::Crossing { angle_deg: 90.0 }, [16, 16, 16], 30, 1)).unwrap();
        // start at bundle 0's first end, finish at bundle 1's second end
        let a = truth.bundles[0].centerline[0];
        let b = *truth.bundles[1].centerline.last().unwrap();
        let s = vec![a, [7.5, 7.5, 7.5], b];
        let (_, classes) = assign_bundles(&Tractogram { streamlines: vec![s], labels: None }, &truth);
        assert!(matches!(classes[0], StreamlineClass::Invalid(x, y) if x != y), "{classes:?}");
    }

    #[test]
    fn perfect_coverage() {
        let truth = straight();
        let mask = truth.bundle_mask(0);
        let mut lines = Vec::new();
        for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            let z = i % 16;
            let x = i / 256;
            if (i / 16) % 16 == 0 {
                lines.push(along_y(x as f64, 0.0, 15.0).into_iter().map(|p| [p[0], p[1], z as f64]).collect());
            }
        }
        let (labeled, _) = assign_bundles(&Tractogram { streamlines: lines, labels: None }, &truth);
        let r = connection_scores(&labeled, &truth).unwrap();
        assert!((r.ol - 1.0).abs() < 1e-12 && r.or_ == 0.0 && (r.f1 - 1.0).abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn empty_tractogram() {
        let r = connection_scores(&Tractogram { streamlines: vec![], labels: Some(vec![]) }, &straight()).unwrap();
        assert_eq!((r.vc, r.ic, r.nc, r.vb, r.ib), (0.0, 0.0, 1.0, 0, 0));
        assert!(connection_scores(&Tractogram::default(), &straight()).is_err());
    }

    #[test]
    fn report_formats() {
        let r = connection_scores(&Tractogram { streamlines: vec![], labels: Some(vec![]) }, &straight()).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CONNECTION_CSV_HEADER);
        assert_eq!(lines[1].split(',').count(), CONNECTION_CSV_HEADER.split(',').count());
        assert!(r.to_text().contains("nc = 1\n"));
    }
}
