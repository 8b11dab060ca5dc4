use std::path::Path;
use std::sync::OnceLock;

use proptest::prelude::*;

use qspace::design::{coulomb_energy, electrostatic_design, DesignConfig};
use qspace::phantom::{phantom_truth, tensor_signal, PhantomSpec, PhantomTruth, Preset, TensorCompartment, FIBER_EIGENVALUES};
use qspace::pipeline::subsample_raw;
use qspace::score::{assign_bundles, bhattacharyya_distance, connection_scores, psnr, BD_CAP};
use qspace::sphere::{
    angular_distance_antipodal, canonicalize_hemisphere, sph_to_cart, wrap_angles, Direction, DirectionSet, Vec3,
    DEFAULT_LAMBDA,
};
use qspace::tract::{Point, Tractogram};
use qspace::volume::DwiVolume;

fn unit() -> impl Strategy<Value = Vec3> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("away from the origin", |(x, y, z)| x * x + y * y + z * z > 1e-2)
        .prop_map(|(x, y, z)| {
            let n = (x * x + y * y + z * z).sqrt();
            [x / n, y / n, z / n]
        })
}

fn directions(min: usize, max: usize) -> impl Strategy<Value = DirectionSet> {
    prop::collection::vec((0.0f64..std::f64::consts::PI, 0.0f64..std::f64::consts::TAU), min..max)
        .prop_map(|v| DirectionSet::new(v.into_iter().map(|(t, p)| Direction::new(t, p)).collect()).unwrap())
}

fn streamline() -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((-0.5f64..11.5, -0.5f64..11.5, -0.5f64..11.5).prop_map(|(x, y, z)| [x, y, z]), 2..12)
}

fn bundle() -> impl Strategy<Value = Vec<Vec<Point>>> {
    prop::collection::vec(streamline(), 1..8)
}

/// Rotation by `angle` about unit `axis` (Rodrigues).
fn rotate(v: &Vec3, axis: &Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    let d = axis[0] * v[0] + axis[1] * v[1] + axis[2] * v[2];
    let cross = [
        axis[1] * v[2] - axis[2] * v[1],
        axis[2] * v[0] - axis[0] * v[2],
        axis[0] * v[1] - axis[1] * v[0],
    ];
    [0, 1, 2].map(|i| v[i] * c + cross[i] * s + axis[i] * d * (1.0 - c))
}

fn crossing_truth() -> &'static PhantomTruth {
    static TRUTH: OnceLock<PhantomTruth> = OnceLock::new();
    TRUTH.get_or_init(|| {
        phantom_truth(&PhantomSpec::new(Preset::Crossing { angle_deg: 90.0 }, [12, 12, 12], 6, 1)).unwrap()
    })
}

fn resampling_sets() -> &'static (DirectionSet, DirectionSet) {
    static SETS: OnceLock<(DirectionSet, DirectionSet)> = OnceLock::new();
    SETS.get_or_init(|| {
        let d = |n| electrostatic_design(&DesignConfig::new(n, 3)).unwrap();
        (d(15), d(7))
    })
}

fn volume(dirs: &DirectionSet, dims: [usize; 3], data: Vec<f64>) -> DwiVolume {
    let nv = dims.iter().product();
    DwiVolume::new(dims, [2.0; 3], 1000.0, dirs.clone(), data, vec![1.0; nv]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_signal_is_rotation_invariant(g in unit(), fiber in unit(), axis in unit(), angle in 0.0f64..6.3) {
        let comp = |a: Vec3| vec![TensorCompartment::new(FIBER_EIGENVALUES, a, 1.0)];
        let s = tensor_signal(&g, 1000.0, &comp(fiber));
        let r = tensor_signal(&rotate(&g, &axis, angle), 1000.0, &comp(rotate(&fiber, &axis, angle)));
        prop_assert!((s - r).abs() < 1e-12);
    }

    #[test]
    fn tensor_signal_is_antipodally_symmetric(g in unit(), fiber in unit()) {
        let comps = [TensorCompartment::new(FIBER_EIGENVALUES, fiber, 1.0)];
        let neg = [-g[0], -g[1], -g[2]];
        prop_assert!((tensor_signal(&g, 1000.0, &comps) - tensor_signal(&neg, 1000.0, &comps)).abs() < 1e-15);
    }

    #[test]
    fn wrapped_angles_keep_the_direction(theta in -20.0f64..20.0, phi in -20.0f64..20.0) {
        let (t, p) = wrap_angles(theta, phi);
        prop_assert!((0.0..=std::f64::consts::PI).contains(&t));
        prop_assert!((0.0..std::f64::consts::TAU).contains(&p));
        let a = sph_to_cart(&Direction::new(theta, phi));
        let b = sph_to_cart(&Direction::new(t, p));
        for i in 0..3 {
            prop_assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn canonical_hemisphere_is_idempotent(v in unit()) {
        let c = canonicalize_hemisphere(&v);
        prop_assert_eq!(canonicalize_hemisphere(&c), c);
        prop_assert!(c[2] >= 0.0);
        prop_assert!(angular_distance_antipodal(&c, &v) < 1e-7);
    }

    #[test]
    fn energy_ignores_sign_flips(d in directions(2, 10), flips in prop::collection::vec(any::<bool>(), 10)) {
        let flipped: Vec<Vec3> = d
            .to_cartesian()
            .iter()
            .zip(&flips)
            .map(|(v, &f)| if f { [-v[0], -v[1], -v[2]] } else { *v })
            .collect();
        let e0 = coulomb_energy(&d).unwrap();
        let e1 = coulomb_energy(&DirectionSet::from_cartesian(&flipped).unwrap()).unwrap();
        prop_assert!((e0 - e1).abs() <= 1e-9 * e0.abs().max(1.0));
    }

    #[test]
    fn direction_csv_round_trips(d in directions(1, 20)) {
        let back = DirectionSet::from_csv(&d.to_csv(), Path::new("dirs.csv")).unwrap();
        prop_assert_eq!(back, d);
    }

    #[test]
    fn resampling_is_linear(
        a in 0.0f64..2.0,
        b in 0.0f64..2.0,
        u in prop::collection::vec(0.0f64..1.0, 4 * 15),
        w in prop::collection::vec(0.0f64..1.0, 4 * 15),
    ) {
        let (from, to) = resampling_sets();
        let dims = [2, 2, 1];
        let mix: Vec<f64> = u.iter().zip(&w).map(|(p, q)| a * p + b * q).collect();
        let ru = subsample_raw(&volume(from, dims, u), to, 4, DEFAULT_LAMBDA).unwrap();
        let rw = subsample_raw(&volume(from, dims, w), to, 4, DEFAULT_LAMBDA).unwrap();
        let rm = subsample_raw(&volume(from, dims, mix), to, 4, DEFAULT_LAMBDA).unwrap();
        for i in 0..rm.len() {
            prop_assert!((rm[i] - (a * ru[i] + b * rw[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn psnr_drops_as_error_grows(
        x in prop::collection::vec(1.0f64..2.0, 8 * 3),
        e in prop::collection::vec(-0.1f64..0.1, 8 * 3),
        k in 1.01f64..10.0,
    ) {
        prop_assume!(e.iter().any(|v| v.abs() > 1e-6));
        let dirs = DirectionSet::from_cartesian(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let dims = [2, 2, 2];
        let truth = volume(&dirs, dims, x.clone());
        let near = volume(&dirs, dims, x.iter().zip(&e).map(|(a, b)| a + b).collect());
        let far = volume(&dirs, dims, x.iter().zip(&e).map(|(a, b)| a + k * b).collect());
        let mask = vec![true; 8];
        prop_assert!(psnr(&far, &truth, &mask).unwrap() < psnr(&near, &truth, &mask).unwrap());
        prop_assert_eq!(psnr(&truth, &truth, &mask).unwrap(), f64::INFINITY);
    }

    #[test]
    fn bundle_distance_is_symmetric_and_bounded(a in bundle(), b in bundle()) {
        let ab = bhattacharyya_distance(&a, &b, 32).unwrap();
        let ba = bhattacharyya_distance(&b, &a, 32).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=BD_CAP).contains(&ab));
        prop_assert_eq!(bhattacharyya_distance(&a, &a, 32).unwrap(), 0.0);
    }

    #[test]
    fn connection_fractions_partition(lines in prop::collection::vec(streamline(), 0..40)) {
        let truth = crossing_truth();
        let (labeled, classes) = assign_bundles(&Tractogram { streamlines: lines.clone(), labels: None }, truth);
        prop_assert_eq!(classes.len(), lines.len());
        let r = connection_scores(&labeled, truth).unwrap();
        prop_assert_eq!(r.n_streamlines, lines.len());
        if !lines.is_empty() {
            prop_assert!((r.vc + r.ic + r.nc - 1.0).abs() < 1e-12);
        }
        prop_assert!(r.or_ <= 1.0);
    }

    #[test]
    fn connection_scores_ignore_streamline_order(lines in prop::collection::vec(streamline(), 1..30), shift in 0usize..30) {
        let truth = crossing_truth();
        let mut rotated = lines.clone();
        rotated.rotate_left(shift % lines.len());
        rotated.reverse();
        let score = |l: Vec<Vec<Point>>| {
            let (labeled, _) = assign_bundles(&Tractogram { streamlines: l, labels: None }, truth);
            connection_scores(&labeled, truth).unwrap()
        };
        let (r0, r1) = (score(lines), score(rotated));
        prop_assert_eq!(r0.to_csv(), r1.to_csv());
    }

    #[test]
    fn tractogram_binary_round_trips(lines in prop::collection::vec(streamline(), 0..10)) {
        // coordinates are stored as f32
        let t = Tractogram { streamlines: lines, labels: None };
        let back = Tractogram::from_qtrk(&t.to_qtrk(), Path::new("t.qtrk")).unwrap();
        prop_assert_eq!(back.len(), t.len());
        for (s, r) in t.streamlines.iter().zip(&back.streamlines) {
            prop_assert_eq!(s.len(), r.len());
            for (p, q) in s.iter().zip(r) {
                for k in 0..3 {
                    prop_assert_eq!(q[k], p[k] as f32 as f64);
                }
            }
        }
        let again = Tractogram::from_qtrk(&back.to_qtrk(), Path::new("t.qtrk")).unwrap();
        prop_assert_eq!(again, back);
    }
}
