//! Hemisphere point set from a subdivided icosahedron, with its neighbor graph.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::sphere::{canonicalize_hemisphere, norm, scale, Vec3};

/// Subdivision depth of the shared peak-search sphere.
pub const DEFAULT_SUBDIVISIONS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tessellation {
    /// Unit vectors on the canonical hemisphere.
    pub points: Vec<Vec3>,
    /// Sorted neighbor indices, antipodal wrap-around included.
    pub neighbors: Vec<Vec<usize>>,
}

fn key(v: &Vec3) -> [i64; 3] {
    v.map(|c| (c * 1e9).round() as i64)
}

fn unit(v: Vec3) -> Vec3 {
    scale(&v, 1.0 / norm(&v))
}

impl Tessellation {
    /// Icosahedron subdivided `levels` times, folded onto one hemisphere.
    pub fn subdivided_icosahedron(levels: usize) -> Self {
        let g = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<Vec3> = Vec::new();
        for &a in &[-1.0, 1.0] {
            for &b in &[-g, g] {
                verts.push([0.0, a, b]);
                verts.push([a, b, 0.0]);
                verts.push([b, 0.0, a]);
            }
        }
        let verts: Vec<Vec3> = verts.into_iter().map(unit).collect();
        // faces are the triples of mutually nearest vertices
        let edge = {
            let d = |i: usize, j: usize| norm(&[verts[i][0] - verts[j][0], verts[i][1] - verts[j][1], verts[i][2] - verts[j][2]]);
            let min = (1..12).map(|j| d(0, j)).fold(f64::INFINITY, f64::min);
            move |i: usize, j: usize| (d(i, j) - min).abs() < 1e-9
        };
        let mut faces = Vec::new();
        for i in 0..12 {
            for j in i + 1..12 {
                for k in j + 1..12 {
                    if edge(i, j) && edge(j, k) && edge(i, k) {
                        faces.push([i, j, k]);
                    }
                }
            }
        }
        let mut verts = verts;
        for _ in 0..levels {
            let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
            let mut next = Vec::with_capacity(faces.len() * 4);
            for f in &faces {
                let mut m = [0usize; 3];
                for e in 0..3 {
                    let (a, b) = (f[e], f[(e + 1) % 3]);
                    let k = (a.min(b), a.max(b));
                    m[e] = *mid.entry(k).or_insert_with(|| {
                        let (p, q) = (verts[a], verts[b]);
                        verts.push(unit([p[0] + q[0], p[1] + q[1], p[2] + q[2]]));
                        verts.len() - 1
                    });
                }
                next.push([f[0], m[0], m[2]]);
                next.push([f[1], m[1], m[0]]);
                next.push([f[2], m[2], m[1]]);
                next.push(m);
            }
            faces = next;
        }
        // fold antipodes onto one representative
        let mut index: HashMap<[i64; 3], usize> = HashMap::new();
        let mut points = Vec::new();
        let rep: Vec<usize> = verts
            .iter()
            .map(|v| {
                let c = canonicalize_hemisphere(v);
                *index.entry(key(&c)).or_insert_with(|| {
                    points.push(c);
                    points.len() - 1
                })
            })
            .collect();
        let mut neighbors = vec![Vec::new(); points.len()];
        for f in &faces {
            for e in 0..3 {
                let (a, b) = (rep[f[e]], rep[f[(e + 1) % 3]]);
                if a != b {
                    neighbors[a].push(b);
                    neighbors[b].push(a);
                }
            }
        }
        for n in &mut neighbors {
            n.sort_unstable();
            n.dedup();
        }
        Tessellation { points, neighbors }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same sphere with points reordered so that new point `i` is old `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        Tessellation {
            points: perm.iter().map(|&o| self.points[o]).collect(),
            neighbors: perm
                .iter()
                .map(|&o| {
                    let mut n: Vec<usize> = self.neighbors[o].iter().map(|&j| inverse[j]).collect();
                    n.sort_unstable();
                    n
                })
                .collect(),
        }
    }
}

/// The shared peak-search sphere, built on first use.
pub fn hemisphere_tessellation() -> &'static Tessellation {
    static SPHERE: OnceLock<Tessellation> = OnceLock::new();
    SPHERE.get_or_init(|| Tessellation::subdivided_icosahedron(DEFAULT_SUBDIVISIONS))
}
