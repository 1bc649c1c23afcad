use proptest::prelude::*;

use imls::geometry::{Aabb, OrientedPointCloud, SdfGrid, Vec3};
use imls::imls::{eval_f, eval_grad, MlsPointSet};
use imls::io;
use imls::kdtree::KdTree;
use imls::metrics::{chamfer_l1, fscore, normal_consistency};
use imls::octree::{lattice_samples, level_threshold};

fn coord() -> impl Strategy<Value = f64> {
    -0.8f64..0.8
}

fn point() -> impl Strategy<Value = Vec3<f64>> {
    (coord(), coord(), coord()).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn unit() -> impl Strategy<Value = Vec3<f64>> {
    point().prop_filter_map("degenerate direction", |v| v.try_normalize(1e-3))
}

fn oriented(n: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<Vec3<f64>>, Vec<Vec3<f64>>)> {
    prop::collection::vec((point(), unit()), n).prop_map(|v| v.into_iter().unzip())
}

/// Quarter turn about z; exact in floating point.
fn quarter(v: Vec3<f64>) -> Vec3<f64> {
    Vec3::new(-v.y, v.x, v.z)
}

fn build(pos: &[Vec3<f64>], nrm: &[Vec3<f64>], r: f64) -> MlsPointSet<f64> {
    MlsPointSet::from_oriented(pos, nrm, &vec![r; pos.len()], 3).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn f_is_a_convex_combination_of_plane_distances((pos, nrm) in oriented(1..40), x in point(), r in 0.05f64..0.6) {
        let mls = build(&pos, &nrm, r);
        let nb = mls.neighbors(x);
        let v = eval_f(x, &mls);
        if nb.is_empty() {
            prop_assert!(!v.in_band);
        } else {
            let d: Vec<f64> = nb.iter().map(|&i| (x - pos[i]).dot(nrm[i])).collect();
            let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v.value >= lo - 1e-12 && v.value <= hi + 1e-12, "{} not in [{lo}, {hi}]", v.value);
        }
        if let Ok(g) = eval_grad(x, &mls) {
            prop_assert!(g.norm() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn f_commutes_with_a_quarter_turn((pos, nrm) in oriented(1..40), x in point(), r in 0.05f64..0.6) {
        let a = build(&pos, &nrm, r);
        let rp: Vec<_> = pos.iter().copied().map(quarter).collect();
        let rn: Vec<_> = nrm.iter().copied().map(quarter).collect();
        let b = build(&rp, &rn, r);
        let (fa, fb) = (eval_f(x, &a), eval_f(quarter(x), &b));
        prop_assert_eq!(fa.in_band, fb.in_band);
        if fa.in_band {
            prop_assert!((fa.value - fb.value).abs() <= 1e-12 * (1.0 + fa.value.abs()));
            let (ga, gb) = (eval_grad(x, &a).unwrap(), eval_grad(quarter(x), &b).unwrap());
            prop_assert!(quarter(ga).distance(gb) <= 1e-12);
        }
    }

    #[test]
    fn flipping_normals_negates_f((pos, nrm) in oriented(1..30), x in point()) {
        let a = build(&pos, &nrm, 0.3);
        let flipped: Vec<_> = nrm.iter().map(|&n| -n).collect();
        let b = build(&pos, &flipped, 0.3);
        let (fa, fb) = (eval_f(x, &a), eval_f(x, &b));
        prop_assert_eq!(fa.value, -fb.value);
    }

    #[test]
    fn chamfer_and_normal_consistency_are_symmetric((x, nx) in oriented(1..60), (y, ny) in oriented(1..60)) {
        prop_assert_eq!(chamfer_l1(&x, &y).unwrap(), chamfer_l1(&y, &x).unwrap());
        let a = normal_consistency(&x, &nx, &y, &ny).unwrap();
        let b = normal_consistency(&y, &ny, &x, &nx).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
    }

    #[test]
    fn metrics_are_rigid_invariant((x, nx) in oriented(1..60), (y, ny) in oriented(1..60), t in point()) {
        let rt = |v: &[Vec3<f64>]| v.iter().map(|&p| quarter(p) + t).collect::<Vec<_>>();
        let r = |v: &[Vec3<f64>]| v.iter().copied().map(quarter).collect::<Vec<_>>();
        let c0 = chamfer_l1(&x, &y).unwrap();
        let c1 = chamfer_l1(&rt(&x), &rt(&y)).unwrap();
        prop_assert!((c0 - c1).abs() <= 1e-9 * (1.0 + c0));
        let n0 = normal_consistency(&x, &nx, &y, &ny).unwrap();
        let n1 = normal_consistency(&r(&x), &r(&nx), &r(&y), &r(&ny)).unwrap();
        prop_assert!((n0 - n1).abs() <= 1e-12);
    }

    #[test]
    fn fscore_is_bounded_symmetric_and_perfect_on_self((x, _) in oriented(1..60), (y, _) in oriented(1..60), tau in 0.001f64..0.5) {
        let (f, p, r) = fscore(&x, &y, tau).unwrap();
        for v in [p, r, f] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let (f2, p2, r2) = fscore(&y, &x, tau).unwrap();
        prop_assert_eq!((p2, r2), (r, p));
        prop_assert!((f - f2).abs() <= 1e-15);
        prop_assert_eq!(fscore(&x, &x, tau).unwrap(), (1.0, 1.0, 1.0));
    }

    #[test]
    fn kdtree_nearest_matches_scan(pts in prop::collection::vec(point(), 1..200), q in point()) {
        let tree = KdTree::new(&pts);
        let (i, d2) = tree.nearest(q).unwrap();
        let best = pts.iter().map(|p| p.distance_squared(q)).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(d2, best);
        prop_assert_eq!(pts[i].distance_squared(q), best);
        let knn = tree.knn(q, 5);
        let mut order: Vec<(f64, usize)> = pts.iter().enumerate().map(|(j, p)| (p.distance_squared(q), j)).collect();
        order.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want: Vec<(usize, f64)> = order.iter().take(5).map(|&(d, j)| (j, d)).collect();
        prop_assert_eq!(knn, want);
    }

    #[test]
    fn lattice_samples_respect_threshold(seed_vals in prop::collection::vec(-0.3f64..0.3, 512), level in 6u8..9) {
        let grid = SdfGrid::new_unchecked(8, Aabb::unit_cube(), seed_vals.clone()).unwrap();
        let t = level_threshold::<f64>(level);
        let s = lattice_samples(&grid, 1, t, level);
        for smp in &s {
            prop_assert!(smp.value.abs() < t);
            prop_assert!((smp.gradient.norm() - 1.0).abs() < 1e-9);
        }
        prop_assert!(s.len() <= seed_vals.iter().filter(|v| v.abs() < t).count());
    }

    #[test]
    fn sdf_binary_round_trips(vals in prop::collection::vec(-2.0f32..2.0, 27)) {
        let values: Vec<f64> = vals.iter().map(|&v| f64::from(v)).collect();
        let grid = SdfGrid::new_unchecked(3, Aabb::unit_cube(), values).unwrap();
        let back: SdfGrid<f64> = io::decode_sdf(&io::encode_sdf(&grid)).unwrap();
        prop_assert_eq!(back.values(), grid.values());
        prop_assert_eq!(back.resolution(), 3);
    }

    #[test]
    fn sdf_decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = io::decode_sdf::<f64>(&bytes);
        let mut framed = b"IMLS\x01\x00\x00\x00".to_vec();
        framed.extend_from_slice(&bytes);
        let _ = io::decode_sdf::<f64>(&framed);
    }

    #[test]
    fn text_formats_round_trip_exactly((pos, nrm) in oriented(1..50)) {
        let cloud = OrientedPointCloud::new(pos.clone(), Some(nrm.clone())).unwrap();
        let back: OrientedPointCloud<f64> = io::parse_cloud(&io::format_cloud(&cloud)).unwrap();
        prop_assert_eq!(&back, &cloud);
        let mls = build(&pos, &nrm, 0.2);
        let again: MlsPointSet<f64> = io::parse_mls(&io::format_mls(&mls)).unwrap();
        prop_assert_eq!(again.points(), mls.points());
        prop_assert_eq!(again.octants(), mls.octants());
    }
}
