//! Synthetic multi-tensor phantoms with known fiber geometry.
//!
//! Coordinates are in voxel units with voxel centers at integer indices, so
//! the volume spans `[-0.5, dim - 0.5]` on every axis.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::design::{electrostatic_design, DesignConfig};
use crate::error::{Error, Result};
use crate::par;
use crate::sphere::{dot, norm, scale, DirectionSet, Vec3};
use crate::volume::DwiVolume;

/// Default fiber eigenvalues in mm²/s.
pub const FIBER_EIGENVALUES: [f64; 3] = [1.7e-3, 0.3e-3, 0.3e-3];
pub const BACKGROUND_DIFFUSIVITY: f64 = 3.0e-3;
pub const DEFAULT_B_VALUE: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCompartment {
    /// λ₁ ≥ λ₂ ≥ λ₃ > 0.
    pub eigenvalues: [f64; 3],
    pub axis: Vec3,
    /// Eigenvector of λ₂, orthogonal to `axis`.
    pub second_axis: Vec3,
    pub fraction: f64,
}

impl TensorCompartment {
    /// A compartment with an arbitrary but deterministic second axis.
    pub fn new(eigenvalues: [f64; 3], axis: Vec3, fraction: f64) -> Self {
        let a = scale(&axis, 1.0 / norm(&axis));
        // least-aligned coordinate axis gives a well-conditioned cross product
        let k = (0..3)
            .min_by(|&i, &j| a[i].abs().total_cmp(&a[j].abs()))
            .unwrap_or(0);
        let mut e = [0.0; 3];
        e[k] = 1.0;
        let c = cross(&a, &e);
        TensorCompartment {
            eigenvalues,
            axis: a,
            second_axis: scale(&c, 1.0 / norm(&c)),
            fraction,
        }
    }

    pub fn isotropic(d: f64, fraction: f64) -> Self {
        Self::new([d; 3], [0.0, 0.0, 1.0], fraction)
    }

    /// `gᵀDg`.
    pub fn apparent_diffusivity(&self, g: &Vec3) -> f64 {
        let third = cross(&self.axis, &self.second_axis);
        let [l1, l2, l3] = self.eigenvalues;
        l1 * dot(g, &self.axis).powi(2) + l2 * dot(g, &self.second_axis).powi(2) + l3 * dot(g, &third).powi(2)
    }
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// `Σ fᵢ exp(−b gᵀDᵢg)`.
pub fn tensor_signal(g: &Vec3, b: f64, compartments: &[TensorCompartment]) -> f64 {
    compartments
        .iter()
        .map(|c| c.fraction * (-b * c.apparent_diffusivity(g)).exp())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Preset {
    /// One bundle along y.
    Straight,
    /// Two straight in-plane bundles crossing at the volume center.
    Crossing { angle_deg: f64 },
    /// A quarter-circle bundle in the axial plane.
    Arc,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    /// `straight`, `arc`, `crossing` (90°) or `crossing:<degrees>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight" => Ok(Preset::Straight),
            "arc" => Ok(Preset::Arc),
            "crossing" => Ok(Preset::Crossing { angle_deg: 90.0 }),
            _ => {
                if let Some(a) = s.strip_prefix("crossing:") {
                    let angle_deg = a
                        .parse::<f64>()
                        .map_err(|_| Error::Invalid(format!("bad crossing angle '{a}'")))?;
                    if !(angle_deg > 0.0 && angle_deg <= 90.0) {
                        return Err(Error::Invalid("crossing angle must be in (0, 90]".into()));
                    }
                    Ok(Preset::Crossing { angle_deg })
                } else {
                    Err(Error::Invalid(format!("unknown phantom preset '{s}'")))
                }
            }
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Preset::Straight => write!(f, "straight"),
            Preset::Arc => write!(f, "arc"),
            Preset::Crossing { angle_deg } => write!(f, "crossing:{angle_deg}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub preset: Preset,
    pub dims: [usize; 3],
    /// Number of encoding directions N.
    pub n_dirs: usize,
    pub seed: u64,
    pub b_value: f64,
    pub radius: f64,
    /// Centerline length covered by each endpoint ROI.
    pub roi_length: f64,
    pub voxel_size: [f64; 3],
}

impl PhantomSpec {
    pub fn new(preset: Preset, dims: [usize; 3], n_dirs: usize, seed: u64) -> Self {
        PhantomSpec {
            preset,
            dims,
            n_dirs,
            seed,
            b_value: DEFAULT_B_VALUE,
            radius: 3.0,
            roi_length: 3.0,
            voxel_size: [2.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub name: String,
    pub centerline: Vec<Vec3>,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub bundle: usize,
    /// 0 at the start of the centerline, 1 at its end.
    pub end: usize,
    pub voxels: Vec<[usize; 3]>,
}

/// Ground truth for scoring. Serialized as JSON:
///
/// ```text
/// { "dims": [X, Y, Z],
///   "background_diffusivity": 0.003,
///   "fiber_eigenvalues": [l1, l2, l3],
///   "bundles": [ { "name": "...", "radius": r, "centerline": [[x, y, z], …] }, … ],
///   "rois": [ { "bundle": k, "end": 0|1, "voxels": [[x, y, z], …] }, … ] }
/// ```
///
/// Per-voxel compartments are not stored; [`PhantomTruth::read`] rebuilds them
/// from the bundle geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub dims: [usize; 3],
    pub background_diffusivity: f64,
    pub fiber_eigenvalues: [f64; 3],
    pub bundles: Vec<Bundle>,
    pub rois: Vec<Roi>,
    #[serde(skip)]
    pub compartments: Vec<Vec<TensorCompartment>>,
    /// Per-voxel membership bitmask over bundles (bit k = bundle k).
    #[serde(skip)]
    pub membership: Vec<u32>,
}

impl PhantomTruth {
    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn index(&self, v: [usize; 3]) -> usize {
        (v[0] * self.dims[1] + v[1]) * self.dims[2] + v[2]
    }

    pub fn bundle_mask(&self, bundle: usize) -> Vec<bool> {
        self.membership.iter().map(|m| m & (1 << bundle) != 0).collect()
    }

    pub fn fiber_mask(&self) -> Vec<bool> {
        self.membership.iter().map(|&m| m != 0).collect()
    }

    /// ROI id of every voxel (`None` outside all ROIs).
    pub fn roi_map(&self) -> Vec<Option<usize>> {
        let mut map = vec![None; self.n_voxels()];
        for (r, roi) in self.rois.iter().enumerate() {
            for v in &roi.voxels {
                let i = self.index(*v);
                if map[i].is_none() {
                    map[i] = Some(r);
                }
            }
        }
        map
    }

    /// The ROI pair `(start, end)` of a bundle.
    pub fn bundle_rois(&self, bundle: usize) -> Option<(usize, usize)> {
        let a = self.rois.iter().position(|r| r.bundle == bundle && r.end == 0)?;
        let b = self.rois.iter().position(|r| r.bundle == bundle && r.end == 1)?;
        Some((a, b))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("truth serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut t: PhantomTruth =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        let (compartments, membership) =
            rasterize(t.dims, &t.bundles, t.fiber_eigenvalues, t.background_diffusivity);
        t.compartments = compartments;
        t.membership = membership;
        Ok(t)
    }
}

/// Nearest point on a polyline: `(distance, arclength, unit tangent)`.
fn nearest_on_polyline(p: &Vec3, line: &[Vec3]) -> (f64, f64, Vec3) {
    let mut best = (f64::INFINITY, 0.0, [0.0, 0.0, 1.0]);
    let mut walked = 0.0;
    for w in line.windows(2) {
        let seg = [w[1][0] - w[0][0], w[1][1] - w[0][1], w[1][2] - w[0][2]];
        let len = norm(&seg);
        if len == 0.0 {
            continue;
        }
        let t = scale(&seg, 1.0 / len);
        let rel = [p[0] - w[0][0], p[1] - w[0][1], p[2] - w[0][2]];
        let s = dot(&rel, &t).clamp(0.0, len);
        let q = [w[0][0] + s * t[0], w[0][1] + s * t[1], w[0][2] + s * t[2]];
        let d = norm(&[p[0] - q[0], p[1] - q[1], p[2] - q[2]]);
        if d < best.0 {
            best = (d, walked + s, t);
        }
        walked += len;
    }
    best
}

fn polyline_length(line: &[Vec3]) -> f64 {
    line.windows(2)
        .map(|w| norm(&[w[1][0] - w[0][0], w[1][1] - w[0][1], w[1][2] - w[0][2]]))
        .sum()
}

/// Clips the infinite line `c + t·d` to the volume box and returns its end points.
fn clip_line(c: Vec3, d: Vec3, dims: [usize; 3]) -> (Vec3, Vec3) {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            continue;
        }
        let t0 = (-0.5 - c[a]) / d[a];
        let t1 = (dims[a] as f64 - 0.5 - c[a]) / d[a];
        lo = lo.max(t0.min(t1));
        hi = hi.min(t0.max(t1));
    }
    (
        [c[0] + lo * d[0], c[1] + lo * d[1], c[2] + lo * d[2]],
        [c[0] + hi * d[0], c[1] + hi * d[1], c[2] + hi * d[2]],
    )
}

fn bundles_for(preset: Preset, dims: [usize; 3], radius: f64) -> Vec<Bundle> {
    let center = [
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    ];
    let straight = |name: &str, d: Vec3| {
        let (a, b) = clip_line(center, d, dims);
        Bundle {
            name: name.to_owned(),
            centerline: vec![a, b],
            radius,
        }
    };
    match preset {
        Preset::Straight => vec![straight("straight", [0.0, 1.0, 0.0])],
        Preset::Crossing { angle_deg } => {
            let h = angle_deg.to_radians() / 2.0;
            vec![
                straight("cross_a", [h.sin(), h.cos(), 0.0]),
                straight("cross_b", [-h.sin(), h.cos(), 0.0]),
            ]
        }
        Preset::Arc => {
            // quarter circle around the (x, y) = (-0.5, -0.5) corner
            let r = dims[0].min(dims[1]) as f64 / 2.0;
            let steps = 256;
            let centerline = (0..=steps)
                .map(|i| {
                    let t = PI / 2.0 * i as f64 / steps as f64;
                    [-0.5 + r * t.cos(), -0.5 + r * t.sin(), center[2]]
                })
                .collect();
            vec![Bundle {
                name: "arc".to_owned(),
                centerline,
                radius,
            }]
        }
    }
}

fn rasterize(
    dims: [usize; 3],
    bundles: &[Bundle],
    eigenvalues: [f64; 3],
    background: f64,
) -> (Vec<Vec<TensorCompartment>>, Vec<u32>) {
    let nv: usize = dims.iter().product();
    let per_voxel = par::map_indices(nv, |i| {
        let z = i % dims[2];
        let y = (i / dims[2]) % dims[1];
        let x = i / (dims[1] * dims[2]);
        let p = [x as f64, y as f64, z as f64];
        let mut tangents = Vec::new();
        let mut mask = 0u32;
        for (k, b) in bundles.iter().enumerate() {
            let (d, _, t) = nearest_on_polyline(&p, &b.centerline);
            if d <= b.radius {
                tangents.push(t);
                mask |= 1 << k;
            }
        }
        let comps = if tangents.is_empty() {
            vec![TensorCompartment::isotropic(background, 1.0)]
        } else {
            let f = 1.0 / tangents.len() as f64;
            tangents
                .into_iter()
                .map(|t| TensorCompartment::new(eigenvalues, t, f))
                .collect()
        };
        (comps, mask)
    });
    per_voxel.into_iter().unzip()
}

fn endpoint_rois(dims: [usize; 3], bundles: &[Bundle], membership: &[u32], roi_length: f64) -> Vec<Roi> {
    let mut rois = Vec::new();
    let mut taken = vec![false; membership.len()];
    for (k, b) in bundles.iter().enumerate() {
        let total = polyline_length(&b.centerline);
        let mut ends = [Vec::new(), Vec::new()];
        for (i, m) in membership.iter().enumerate() {
            if m & (1 << k) == 0 {
                continue;
            }
            let z = i % dims[2];
            let y = (i / dims[2]) % dims[1];
            let x = i / (dims[1] * dims[2]);
            let (_, s, _) = nearest_on_polyline(&[x as f64, y as f64, z as f64], &b.centerline);
            let end = if s <= roi_length {
                0
            } else if s >= total - roi_length {
                1
            } else {
                continue;
            };
            if !taken[i] {
                taken[i] = true;
                ends[end].push([x, y, z]);
            }
        }
        for (end, voxels) in ends.into_iter().enumerate() {
            rois.push(Roi {
                bundle: k,
                end,
                voxels,
            });
        }
    }
    rois
}

/// Builds the ground truth geometry for a spec without synthesizing signals.
pub fn phantom_truth(spec: &PhantomSpec) -> Result<PhantomTruth> {
    if spec.dims.iter().any(|&d| d < 8) {
        return Err(Error::Invalid("phantom dims must be at least 8 per axis".into()));
    }
    let bundles = bundles_for(spec.preset, spec.dims, spec.radius);
    let (compartments, membership) =
        rasterize(spec.dims, &bundles, FIBER_EIGENVALUES, BACKGROUND_DIFFUSIVITY);
    let rois = endpoint_rois(spec.dims, &bundles, &membership, spec.roi_length);
    Ok(PhantomTruth {
        dims: spec.dims,
        background_diffusivity: BACKGROUND_DIFFUSIVITY,
        fiber_eigenvalues: FIBER_EIGENVALUES,
        bundles,
        rois,
        compartments,
        membership,
    })
}

/// Noiseless signals of `truth` sampled at `dirs`.
pub fn synthesize(truth: &PhantomTruth, dirs: &DirectionSet, b_value: f64, voxel_size: [f64; 3]) -> Result<DwiVolume> {
    let g = dirs.to_cartesian();
    let d = g.len();
    let rows = par::map_indices(truth.n_voxels(), |i| {
        g.iter()
            .map(|gk| tensor_signal(gk, b_value, &truth.compartments[i]))
            .collect::<Vec<f64>>()
    });
    let mut data = Vec::with_capacity(truth.n_voxels() * d);
    for r in rows {
        data.extend(r);
    }
    DwiVolume::new(
        truth.dims,
        voxel_size,
        b_value,
        dirs.clone(),
        data,
        vec![1.0; truth.n_voxels()],
    )
}

/// Phantom volume and its ground truth; directions come from an electrostatic
/// design of `spec.n_dirs` points seeded with `spec.seed`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(DwiVolume, PhantomTruth)> {
    if spec.n_dirs < 6 {
        return Err(Error::Invalid("phantoms need at least 6 directions".into()));
    }
    let dirs = electrostatic_design(&DesignConfig::new(spec.n_dirs, spec.seed))?;
    let truth = phantom_truth(spec)?;
    let vol = synthesize(&truth, &dirs, spec.b_value, spec.voxel_size)?;
    Ok((vol, truth))
}

/// Rician noise `√((S+ε₁)² + ε₂²)` with `ε ~ N(0, 1/snr²)`. Each voxel draws
/// from its own ChaCha stream keyed by `(seed, voxel index)`, channel by
/// channel, so results do not depend on evaluation order. `snr = ∞` returns
/// an exact copy.
pub fn add_rician_noise(x: &DwiVolume, snr: f64, seed: u64) -> Result<DwiVolume> {
    if snr.is_infinite() && snr > 0.0 {
        return Ok(x.clone());
    }
    if !(snr > 0.0) {
        return Err(Error::Invalid(format!("snr must be > 0, got {snr}")));
    }
    let sigma = 1.0 / snr;
    let d = x.channels();
    let rows = par::map_indices(x.n_voxels(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        x.voxel(i)
            .iter()
            .map(|&s| {
                let e1: f64 = StandardNormal.sample(&mut rng);
                let e2: f64 = StandardNormal.sample(&mut rng);
                ((s + sigma * e1).powi(2) + (sigma * e2).powi(2)).sqrt()
            })
            .collect::<Vec<f64>>()
    });
    let mut data = Vec::with_capacity(x.data.len());
    for r in rows {
        data.extend(r);
    }
    debug_assert_eq!(data.len(), x.n_voxels() * d);
    Ok(x.with_data(x.dirs.clone(), data))
}
