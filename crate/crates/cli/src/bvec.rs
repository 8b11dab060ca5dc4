//! FSL-style gradient tables.

use std::fmt::Write as _;

use qspace::sphere::{canonicalize_hemisphere, DirectionSet, Vec3};

const DECIMALS: i32 = 10;

/// Rounds to the written precision before picking the hemisphere, so that
/// near-equatorial vectors stay canonical once parsed back.
fn written_form(v: &Vec3) -> Vec3 {
    let s = 10f64.powi(DECIMALS);
    canonicalize_hemisphere(&v.map(|c| (c * s).round() / s + 0.0))
}

/// `bvecs` (three rows of x, y and z components) and `bvals` (one row) with
/// `n_b0` zero columns ahead of the diffusion-weighted directions, which are
/// written in their upper-hemisphere form.
pub fn export_bvec(dirs: &DirectionSet, b: f64, n_b0: usize) -> (String, String) {
    let vs: Vec<Vec3> = dirs.to_cartesian().iter().map(written_form).collect();
    let mut bvecs = String::new();
    for axis in 0..3 {
        let row: Vec<String> = std::iter::repeat_n("0.0".to_string(), n_b0)
            .chain(vs.iter().map(|v| format!("{:.*}", DECIMALS as usize, v[axis] + 0.0)))
            .collect();
        let _ = writeln!(bvecs, "{}", row.join(" "));
    }
    let bvals: Vec<String> = std::iter::repeat_n("0".to_string(), n_b0)
        .chain(std::iter::repeat_n(format!("{b}"), vs.len()))
        .collect();
    (bvecs, format!("{}\n", bvals.join(" ")))
}

/// Reads a three-row `bvecs` table back into column vectors.
pub fn parse_bvecs(text: &str) -> Result<Vec<Vec3>, String> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| format!("bad number '{t}'")))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    if rows.len() != 3 {
        return Err(format!("expected 3 rows, found {}", rows.len()));
    }
    if rows[1].len() != rows[0].len() || rows[2].len() != rows[0].len() {
        return Err("rows have different lengths".into());
    }
    Ok((0..rows[0].len()).map(|i| [rows[0][i], rows[1][i], rows[2][i]]).collect())
}
