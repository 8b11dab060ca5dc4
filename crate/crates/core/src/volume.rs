//! Diffusion-weighted volumes and the QVOL on-disk format.
//!
//! A QVOL is a UTF-8 header of `key = value` lines plus a raw file of
//! little-endian `f32` samples laid out as `((x·Y + y)·Z + z)·D + d`:
//!
//! ```text
//! QVOL 1
//! dims = 32 32 32
//! voxel_size = 2 2 2
//! b_value = 1000
//! channels = 60
//! byte_order = little
//! data_file = train0.raw
//! b0_file = train0_b0.qvol
//! direction = 0.7853981633974483 1.5707963267948966
//! …one `direction` line per channel (absent for scalar maps)
//! ```
//!
//! Paths in `data_file` and `b0_file` are relative to the header. The b0
//! reference is itself a single-channel QVOL without directions.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::sphere::{Direction, DirectionSet};

/// Fraction of the maximum b0 below which a voxel is outside the mask.
pub const MASK_FRACTION: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct DwiVolume {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub b_value: f64,
    pub dirs: DirectionSet,
    /// `X·Y·Z·D` samples normalized so that b0 = 1.
    pub data: Vec<f64>,
    /// `X·Y·Z` reference intensities.
    pub b0: Vec<f64>,
}

impl DwiVolume {
    pub fn new(
        dims: [usize; 3],
        voxel_size: [f64; 3],
        b_value: f64,
        dirs: DirectionSet,
        data: Vec<f64>,
        b0: Vec<f64>,
    ) -> Result<Self> {
        let nv = dims.iter().product::<usize>();
        if nv == 0 {
            return Err(Error::Shape("volume has a zero dimension".into()));
        }
        if data.len() != nv * dirs.len() {
            return Err(Error::Shape(format!(
                "{} samples for {} voxels x {} channels",
                data.len(),
                nv,
                dirs.len()
            )));
        }
        if b0.len() != nv {
            return Err(Error::Shape(format!("{} b0 values for {nv} voxels", b0.len())));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid("samples must be finite and non-negative".into()));
        }
        if b0.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid("b0 must be finite and non-negative".into()));
        }
        Ok(DwiVolume {
            dims,
            voxel_size,
            b_value,
            dirs,
            data,
            b0,
        })
    }

    /// Same geometry and b0 with new directions and samples (no clamp or checks
    /// beyond shapes; callers guarantee non-negativity).
    pub(crate) fn with_data(&self, dirs: DirectionSet, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.n_voxels() * dirs.len());
        DwiVolume {
            dims: self.dims,
            voxel_size: self.voxel_size,
            b_value: self.b_value,
            dirs,
            data,
            b0: self.b0.clone(),
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channels(&self) -> usize {
        self.dirs.len()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let z = idx % self.dims[2];
        let y = (idx / self.dims[2]) % self.dims[1];
        let x = idx / (self.dims[1] * self.dims[2]);
        [x, y, z]
    }

    pub fn voxel(&self, idx: usize) -> &[f64] {
        let d = self.channels();
        &self.data[idx * d..(idx + 1) * d]
    }

    /// Voxels with b0 above 5% of the volume maximum.
    pub fn brain_mask(&self) -> Vec<bool> {
        let max = self.b0.iter().cloned().fold(0.0_f64, f64::max);
        self.b0.iter().map(|&v| v > MASK_FRACTION * max).collect()
    }

    /// Voxel indices of the axial slice `z`, in (x, y) order.
    pub fn slice_indices(&self, z: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.dims[0] * self.dims[1]);
        for x in 0..self.dims[0] {
            for y in 0..self.dims[1] {
                out.push(self.index(x, y, z));
            }
        }
        out
    }

    /// Writes `<path>` (header), its raw data file and the b0 map beside it.
    pub fn write_qvol(&self, path: &Path) -> Result<()> {
        let stem = file_stem(path)?;
        let b0_header = path.with_file_name(format!("{stem}_b0.qvol"));
        let b0 = ScalarQvol {
            dims: self.dims,
            voxel_size: self.voxel_size,
            b_value: 0.0,
            data: self.b0.clone(),
        };
        b0.write(&b0_header)?;
        write_qvol_parts(
            path,
            self.dims,
            self.voxel_size,
            self.b_value,
            self.channels(),
            Some(&self.dirs),
            Some(&b0_header),
            &self.data,
        )
    }

    pub fn read_qvol(path: &Path) -> Result<Self> {
        let raw = read_qvol_parts(path)?;
        let dirs = raw
            .dirs
            .ok_or_else(|| Error::parse(path, "diffusion volume needs direction lines"))?;
        let b0 = match &raw.b0_file {
            Some(p) => {
                let s = ScalarQvol::read(p)?;
                if s.dims != raw.dims {
                    return Err(Error::parse(path, "b0 dims differ from data dims"));
                }
                s.data
            }
            None => vec![1.0; raw.dims.iter().product()],
        };
        DwiVolume::new(raw.dims, raw.voxel_size, raw.b_value, dirs, raw.data, b0)
            .map_err(|e| Error::parse(path, e.to_string()))
    }
}

/// A single-channel map (b0 references, masks).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarQvol {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub b_value: f64,
    pub data: Vec<f64>,
}

impl ScalarQvol {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_qvol_parts(
            path,
            self.dims,
            self.voxel_size,
            self.b_value,
            1,
            None,
            None,
            &self.data,
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        let raw = read_qvol_parts(path)?;
        if raw.channels != 1 {
            return Err(Error::parse(path, "expected a single-channel volume"));
        }
        Ok(ScalarQvol {
            dims: raw.dims,
            voxel_size: raw.voxel_size,
            b_value: raw.b_value,
            data: raw.data,
        })
    }
}

fn file_stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::Invalid(format!("bad output path {}", path.display())))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[allow(clippy::too_many_arguments)]
fn write_qvol_parts(
    path: &Path,
    dims: [usize; 3],
    voxel_size: [f64; 3],
    b_value: f64,
    channels: usize,
    dirs: Option<&DirectionSet>,
    b0: Option<&Path>,
    data: &[f64],
) -> Result<()> {
    let raw_path = path.with_extension("raw");
    let mut h = String::from("QVOL 1\n");
    let _ = writeln!(h, "dims = {} {} {}", dims[0], dims[1], dims[2]);
    let _ = writeln!(h, "voxel_size = {} {} {}", voxel_size[0], voxel_size[1], voxel_size[2]);
    let _ = writeln!(h, "b_value = {b_value}");
    let _ = writeln!(h, "channels = {channels}");
    let _ = writeln!(h, "byte_order = little");
    let _ = writeln!(h, "data_file = {}", file_name(&raw_path));
    if let Some(b0) = b0 {
        let _ = writeln!(h, "b0_file = {}", file_name(b0));
    }
    if let Some(dirs) = dirs {
        for d in &dirs.dirs {
            let _ = writeln!(h, "direction = {} {}", d.theta, d.phi);
        }
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    std::fs::write(path, h).map_err(|e| Error::io(path, e))
}

struct RawQvol {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    b_value: f64,
    channels: usize,
    dirs: Option<DirectionSet>,
    b0_file: Option<PathBuf>,
    data: Vec<f64>,
}

fn parse_list<T: std::str::FromStr, const N: usize>(path: &Path, key: &str, v: &str) -> Result<[T; N]>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = v
        .split_whitespace()
        .map(|t| t.parse::<T>().map_err(|e| Error::parse(path, format!("{key}: {e}"))))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::parse(path, format!("{key}: expected {N} values")))
}

fn read_qvol_parts(path: &Path) -> Result<RawQvol> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("QVOL 1") {
        return Err(Error::parse(path, "missing 'QVOL 1' magic line"));
    }
    let (mut dims, mut voxel_size, mut b_value, mut channels) = (None, None, None, None);
    let (mut data_file, mut b0_file) = (None, None);
    let mut dirs = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, format!("not a key = value line: {line}")))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "dims" => dims = Some(parse_list::<usize, 3>(path, k, v)?),
            "voxel_size" => voxel_size = Some(parse_list::<f64, 3>(path, k, v)?),
            "b_value" => {
                b_value = Some(v.parse::<f64>().map_err(|e| Error::parse(path, format!("b_value: {e}")))?)
            }
            "channels" => {
                channels = Some(v.parse::<usize>().map_err(|e| Error::parse(path, format!("channels: {e}")))?)
            }
            "byte_order" if v == "little" => {}
            "byte_order" => return Err(Error::parse(path, format!("unsupported byte order {v}"))),
            "data_file" => data_file = Some(v.to_owned()),
            "b0_file" => b0_file = Some(v.to_owned()),
            "direction" => {
                let [t, p] = parse_list::<f64, 2>(path, k, v)?;
                dirs.push(Direction::new(t, p));
            }
            other => return Err(Error::parse(path, format!("unknown key {other}"))),
        }
    }
    let dims = dims.ok_or_else(|| Error::parse(path, "missing dims"))?;
    let channels = channels.ok_or_else(|| Error::parse(path, "missing channels"))?;
    let data_file = data_file.ok_or_else(|| Error::parse(path, "missing data_file"))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let raw_path = dir.join(data_file);
    let bytes = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = dims.iter().product::<usize>() * channels * 4;
    if bytes.len() != expected {
        return Err(Error::parse(
            &raw_path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let dirs = if dirs.is_empty() {
        None
    } else if dirs.len() == channels {
        Some(DirectionSet { dirs })
    } else {
        return Err(Error::parse(
            path,
            format!("{} direction lines for {channels} channels", dirs.len()),
        ));
    };
    Ok(RawQvol {
        dims,
        voxel_size: voxel_size.unwrap_or([1.0; 3]),
        b_value: b_value.unwrap_or(0.0),
        channels,
        dirs,
        b0_file: b0_file.map(|f| dir.join(f)),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DwiVolume {
        let dirs = DirectionSet::new(vec![Direction::new(0.3, 0.1), Direction::new(1.2, 2.0)]).unwrap();
        let n = 2 * 3 * 4;
        let data: Vec<f64> = (0..n * 2).map(|i| (i as f64) * 0.125).collect();
        let mut b0 = vec![1.0; n];
        b0[5] = 0.01;
        DwiVolume::new([2, 3, 4], [2.0, 2.0, 2.5], 1000.0, dirs, data, b0).unwrap()
    }

    #[test]
    fn layout_and_indexing() {
        let v = small();
        let idx = v.index(1, 2, 3);
        assert_eq!(idx, (3 + 2) * 4 + 3);
        assert_eq!(v.coords(idx), [1, 2, 3]);
        assert_eq!(v.voxel(idx)[1], ((idx * 2 + 1) as f64) * 0.125);
        assert_eq!(v.slice_indices(2).len(), 6);
        let mask = v.brain_mask();
        assert!(!mask[5] && mask[4]);
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        let v = small();
        assert!(DwiVolume::new(v.dims, v.voxel_size, 1000.0, v.dirs.clone(), vec![0.0; 3], v.b0.clone()).is_err());
        let mut bad = v.data.clone();
        bad[0] = -1.0;
        assert!(DwiVolume::new(v.dims, v.voxel_size, 1000.0, v.dirs.clone(), bad, v.b0.clone()).is_err());
        let mut bad = v.data.clone();
        bad[1] = f64::NAN;
        assert!(DwiVolume::new(v.dims, v.voxel_size, 1000.0, v.dirs.clone(), bad, v.b0.clone()).is_err());
    }

    #[test]
    fn qvol_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vol.qvol");
        let v = small();
        v.write_qvol(&p).unwrap();
        assert!(dir.path().join("vol.raw").exists());
        assert!(dir.path().join("vol_b0.qvol").exists());
        let back = DwiVolume::read_qvol(&p).unwrap();
        // samples are exact in f32 here
        assert_eq!(back.data, v.data);
        assert_eq!(back.b0.len(), v.b0.len());
        assert_eq!(back.dims, v.dims);
        assert_eq!(back.dirs, v.dirs);
        let raw = std::fs::read(dir.path().join("vol.raw")).unwrap();
        assert_eq!(raw.len(), v.data.len() * 4);
        assert_eq!(f32::from_le_bytes([raw[4], raw[5], raw[6], raw[7]]), 0.125);
    }

    #[test]
    fn qvol_rejects_truncated_data() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vol.qvol");
        small().write_qvol(&p).unwrap();
        std::fs::write(dir.path().join("vol.raw"), [0u8; 8]).unwrap();
        assert!(matches!(DwiVolume::read_qvol(&p), Err(Error::Parse { .. })));
        std::fs::write(&p, "NOTQVOL\n").unwrap();
        assert!(DwiVolume::read_qvol(&p).is_err());
    }
}
