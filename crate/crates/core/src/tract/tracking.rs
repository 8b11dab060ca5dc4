//! Deterministic Euler-step streamline tracking over per-voxel peaks and the
//! QTRK tractogram format.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::par;
use crate::sphere::{dot, Vec3};

use super::PeakField;

pub type Point = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackParams {
    /// Step length in voxels.
    pub step_size: f64,
    pub angle_deg: f64,
    pub gfa_thresh: f64,
    /// Steps per half-track.
    pub max_len: usize,
}

impl Default for TrackParams {
    fn default() -> Self {
        TrackParams {
            step_size: 0.5,
            angle_deg: 60.0,
            gfa_thresh: 0.1,
            max_len: 1000,
        }
    }
}

/// Streamlines in voxel coordinates, with optional per-streamline labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tractogram {
    pub streamlines: Vec<Vec<Point>>,
    pub labels: Option<Vec<String>>,
}

/// Voxel-center seeds of every voxel where `mask` is true.
pub fn seeds_from_mask(mask: &[bool], dims: [usize; 3]) -> Vec<Point> {
    let mut out = Vec::new();
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let z = i % dims[2];
        let y = (i / dims[2]) % dims[1];
        let x = i / (dims[1] * dims[2]);
        out.push([x as f64, y as f64, z as f64]);
    }
    out
}

struct Field<'a> {
    peaks: &'a PeakField,
    gfa: &'a [f64],
    params: TrackParams,
    cos_thresh: f64,
}

impl Field<'_> {
    /// Index of the voxel nearest to `p`, or `None` outside the volume.
    fn voxel(&self, p: &Point) -> Option<usize> {
        let d = self.peaks.dims;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if !(p[a] >= -0.5 && p[a] <= d[a] as f64 - 0.5) {
                return None;
            }
            idx[a] = (p[a].round().max(0.0) as usize).min(d[a] - 1);
        }
        Some((idx[0] * d[1] + idx[1]) * d[2] + idx[2])
    }

    /// Peak at voxel `v` closest to `incoming`, signed to continue it.
    fn next_dir(&self, v: usize, incoming: &Vec3) -> Option<Vec3> {
        let mut best: Option<(f64, Vec3)> = None;
        for p in &self.peaks.peaks[v] {
            let c = dot(&p.dir, incoming);
            if best.is_none_or(|(b, _)| c.abs() > b) {
                let d = if c < 0.0 { p.dir.map(|x| -x) } else { p.dir };
                best = Some((c.abs(), d));
            }
        }
        best.filter(|(c, _)| *c >= self.cos_thresh).map(|(_, d)| d)
    }

    fn half(&self, seed: &Point, dir: Vec3) -> Vec<Point> {
        let mut out = Vec::new();
        let mut p = *seed;
        let mut d = dir;
        for _ in 0..self.params.max_len {
            let q = [
                p[0] + self.params.step_size * d[0],
                p[1] + self.params.step_size * d[1],
                p[2] + self.params.step_size * d[2],
            ];
            let Some(v) = self.voxel(&q) else { break };
            if self.gfa[v] < self.params.gfa_thresh {
                break;
            }
            out.push(q);
            p = q;
            match self.next_dir(v, &d) {
                Some(n) => d = n,
                None => break,
            }
        }
        out
    }

    fn track(&self, seed: &Point, dir: Vec3) -> Vec<Point> {
        let back = self.half(seed, dir.map(|x| -x));
        let fwd = self.half(seed, dir);
        let mut line: Vec<Point> = back.into_iter().rev().collect();
        line.push(*seed);
        line.extend(fwd);
        line
    }
}

/// Tracks one streamline from `seed` with initial direction `dir`
/// (returned even when shorter than two points).
pub fn track_from(peaks: &PeakField, gfa: &[f64], seed: Point, dir: Vec3, params: &TrackParams) -> Vec<Point> {
    let f = Field {
        peaks,
        gfa,
        params: *params,
        cos_thresh: params.angle_deg.to_radians().cos(),
    };
    f.track(&seed, dir)
}

/// Bidirectional tracking from every seed, started along the strongest peak
/// of the seed voxel. Streamlines keep seed order.
pub fn track_streamlines(peaks: &PeakField, gfa: &[f64], seeds: &[Point], params: &TrackParams) -> Result<Tractogram> {
    let nv: usize = peaks.dims.iter().product();
    if gfa.len() != nv || peaks.peaks.len() != nv {
        return Err(Error::Shape("peak field and GFA map sizes differ".into()));
    }
    if !(params.step_size > 0.0) {
        return Err(Error::Invalid("step size must be > 0".into()));
    }
    let f = Field {
        peaks,
        gfa,
        params: *params,
        cos_thresh: params.angle_deg.to_radians().cos(),
    };
    let lines = par::map_indices(seeds.len(), |i| {
        let s = &seeds[i];
        let v = f.voxel(s)?;
        if gfa[v] < params.gfa_thresh {
            return None;
        }
        let first = peaks.peaks[v].first()?;
        let line = f.track(s, first.dir);
        (line.len() >= 2).then_some(line)
    });
    Ok(Tractogram {
        streamlines: lines.into_iter().flatten().collect(),
        labels: None,
    })
}

impl Tractogram {
    pub fn len(&self) -> usize {
        self.streamlines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streamlines.is_empty()
    }

    pub fn to_qtrk(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"QTRK");
        out.extend_from_slice(&(self.streamlines.len() as u32).to_le_bytes());
        for s in &self.streamlines {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            for p in s {
                for c in p {
                    out.extend_from_slice(&(*c as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_qtrk(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |m: &str| Error::parse(origin, m.to_string());
        if bytes.len() < 8 || &bytes[..4] != b"QTRK" {
            return Err(bad("missing QTRK magic"));
        }
        let mut pos = 4;
        let u32_at = |pos: &mut usize| -> Result<u32> {
            let b = bytes.get(*pos..*pos + 4).ok_or_else(|| bad("truncated file"))?;
            *pos += 4;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
        };
        let count = u32_at(&mut pos)? as usize;
        let mut streamlines = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let n = u32_at(&mut pos)? as usize;
            let need = n.checked_mul(12).ok_or_else(|| bad("bad point count"))?;
            let raw = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated file"))?;
            pos += need;
            let pts = raw
                .chunks_exact(12)
                .map(|c| {
                    let f = |k: usize| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
                    [f(0), f(1), f(2)]
                })
                .collect();
            streamlines.push(pts);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after last streamline"));
        }
        Ok(Tractogram {
            streamlines,
            labels: None,
        })
    }

    pub fn write_qtrk(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_qtrk()).map_err(|e| Error::io(path, e))
    }

    pub fn read_qtrk(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_qtrk(&bytes, path)
    }

    pub fn labels_csv(&self) -> Option<String> {
        let labels = self.labels.as_ref()?;
        let mut s = String::from("index,label\n");
        for (i, l) in labels.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        Some(s)
    }

    /// Attaches labels from an `index,label` CSV.
    pub fn read_labels_csv(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut labels = vec![String::new(); self.len()];
        let mut seen = vec![false; self.len()];
        for (no, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let (i, l) = line
                .split_once(',')
                .ok_or_else(|| Error::parse(origin, format!("line {}: expected index,label", no + 1)))?;
            let i: usize = i
                .trim()
                .parse()
                .map_err(|_| Error::parse(origin, format!("line {}: bad index", no + 1)))?;
            if i >= labels.len() {
                return Err(Error::parse(origin, format!("line {}: index {i} out of range", no + 1)));
            }
            labels[i] = l.trim().to_string();
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::parse(origin, "not every streamline has a label"));
        }
        self.labels = Some(labels);
        Ok(())
    }
}
