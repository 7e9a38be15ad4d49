mod common;

use common::*;
use lidarfuse_core::features::*;
use lidarfuse_core::geom::{axis_angle_matrix, rad, transform_cloud};
use lidarfuse_core::icp::{GicpCloud, GicpParams};
use lidarfuse_core::kdtree::KdTree;
use lidarfuse_core::preprocess::with_normals;
use lidarfuse_core::{Error, Point3, PointCloud, RigidTransform};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const UP: Point3 = Point3::new(0.0, 0.0, 20.0);

fn plane_with_box() -> (PointCloud, Point3, Vector3<f64>) {
    let center = Point3::new(0.5, -0.5, 0.75);
    let size = Vector3::new(2.0, 2.0, 1.5);
    let h = size / 2.0;
    let mut pts: Vec<Point3> = grid_plane(-8.0, 8.0, -8.0, 8.0, 0.0, 0.15)
        .into_iter()
        .filter(|p| (p.x - center.x).abs() > h.x || (p.y - center.y).abs() > h.y)
        .collect();
    pts.extend(box_surface(center, size, 0.15));
    (with_normals(&cloud(pts), 0.4, &UP), center, size)
}

#[test]
fn flat_plane_has_no_keypoints() {
    let c = with_normals(&cloud(grid_plane(-6.0, 6.0, -6.0, 6.0, 0.0, 0.15)), 0.4, &UP);
    assert!(detect_sift_keypoints(&c, &SiftParams::default()).unwrap().is_empty());
}

#[test]
fn keypoints_cluster_at_box() {
    let (c, center, size) = plane_with_box();
    let kps = detect_sift_keypoints(&c, &SiftParams::default()).unwrap();
    assert!(!kps.is_empty());
    let corners = box_corners(center, size);
    let near_corner = kps
        .iter()
        .filter(|k| corners.iter().any(|q| (k.position - q).norm() <= 0.5))
        .count();
    assert!(near_corner >= 1);
    for k in &kps {
        assert!(k.source_index < c.len());
        assert_eq!(k.position, c.points[k.source_index]);
    }
}

#[test]
fn keypoints_are_repeatable_under_rigid_motion() {
    let (c, _, _) = plane_with_box();
    let p = SiftParams::default();
    let t = RigidTransform::new(axis_angle_matrix(&Vector3::z(), rad(30.0)), Vector3::new(3.3, -1.7, 0.4));
    let a = detect_sift_keypoints(&c, &p).unwrap();
    let b = detect_sift_keypoints(&transform_cloud(&t, &c), &p).unwrap();
    let tb: Vec<Point3> = b.iter().map(|k| k.position).collect();
    let tree = KdTree::build(&tb);
    let radius = 2.0 * p.min_scale;
    let repeated = a
        .iter()
        .filter(|k| tree.nearest_within(&t.transform_point(&k.position), radius * radius).is_some())
        .count();
    let rate = repeated as f64 / a.len() as f64;
    assert!(rate >= 0.8, "repeatability {rate} ({repeated}/{})", a.len());
}

#[test]
fn keypoint_errors() {
    let p = SiftParams::default();
    assert!(matches!(detect_sift_keypoints(&cloud(vec![]), &p), Err(Error::Empty(_))));
    assert!(matches!(
        detect_sift_keypoints(&cloud(vec![Point3::zeros(); 4]), &p),
        Err(Error::MissingCurvature)
    ));
}

fn kp_at(c: &PointCloud, idx: &[usize]) -> Vec<Keypoint> {
    idx.iter()
        .map(|&i| Keypoint {
            position: c.points[i],
            source_index: i,
            scale: 0.2,
        })
        .collect()
}

/// Reference SPFH/FPFH by exhaustive search, written out independently.
fn reference_fpfh(c: &PointCloud, i: usize, radius: f64) -> [f64; 33] {
    let ns = c.normals.as_ref().unwrap();
    let nbrs = |i: usize| -> Vec<usize> {
        (0..c.len())
            .filter(|&j| j != i && (c.points[j] - c.points[i]).norm() <= radius)
            .collect()
    };
    let spfh = |i: usize| -> [f64; 33] {
        let mut h = [0.0; 33];
        let js = nbrs(i);
        let mut k = 0.0;
        for j in js {
            let (mut ps, mut pt, mut ns_, mut nt) = (c.points[i], c.points[j], ns[i], ns[j]);
            let dir = (pt - ps).normalize();
            if ns_.dot(&dir).abs() < nt.dot(&dir).abs() - 1e-10 {
                std::mem::swap(&mut ps, &mut pt);
                std::mem::swap(&mut ns_, &mut nt);
            }
            let d = (pt - ps).normalize();
            let u = ns_;
            let v = d.cross(&u);
            if v.norm() <= 1e-6 {
                continue;
            }
            let v = v.normalize();
            let w = u.cross(&v);
            let alpha = v.dot(&nt);
            let phi = u.dot(&d);
            let mut theta = if w.dot(&nt).hypot(u.dot(&nt)) <= 1e-6 { 0.0 } else { w.dot(&nt).atan2(u.dot(&nt)) };
            if theta > std::f64::consts::PI - 1e-10 {
                theta = -std::f64::consts::PI;
            }
            let b = |x: f64, lo: f64, hi: f64| (((x - lo) / (hi - lo) * 11.0).floor() as i64).clamp(0, 10) as usize;
            h[b(theta, -std::f64::consts::PI, std::f64::consts::PI)] += 1.0;
            h[11 + b(alpha, -1.0, 1.0)] += 1.0;
            h[22 + b(phi, -1.0, 1.0)] += 1.0;
            k += 1.0;
        }
        h.map(|x| if k > 0.0 { x * 100.0 / k } else { 0.0 })
    };
    let mut h = spfh(i);
    let js = nbrs(i);
    for &j in &js {
        let w = 1.0 / (js.len() as f64 * (c.points[j] - c.points[i]).norm());
        let s = spfh(j);
        for b in 0..33 {
            h[b] += w * s[b];
        }
    }
    for blk in 0..3 {
        let s: f64 = h[blk * 11..blk * 11 + 11].iter().sum();
        for b in 0..11 {
            h[blk * 11 + b] *= 100.0 / s;
        }
    }
    h
}

fn l1(a: &[f64; 33], b: &[f64; 33]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[test]
fn fpfh_planar_descriptors_are_identical() {
    let c = with_normals(&cloud(grid_plane(-4.0, 4.0, -4.0, 4.0, 0.0, 0.2)), 0.5, &UP);
    let kps = kp_at(&c, &[100, 400, 700, 820]);
    let d = compute_fpfh(&c, &kps, 1.0).unwrap();
    for x in &d {
        assert!(x.valid);
        for blk in x.histogram.chunks(11) {
            assert!((blk.iter().sum::<f64>() - 100.0).abs() < 1e-6);
        }
        for (a, b) in x.histogram.iter().zip(&d[0].histogram) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn fpfh_edge_differs_from_flat_and_matches_reference() {
    // An L-shaped wall corner: floor z = 0 and a wall at x = 0.
    let mut pts: Vec<Point3> = grid_plane(0.1, 4.0, -3.0, 3.0, 0.0, 0.2);
    for p in grid_plane(0.0, 3.0, -3.0, 3.0, 0.0, 0.2) {
        pts.push(Point3::new(0.0, p.y, p.x + 0.1));
    }
    let c = with_normals(&cloud(pts), 0.3, &Point3::new(3.0, 0.5, 3.0));
    let tree = KdTree::build(&c.points);
    let edge = tree.nearest(&Point3::new(0.1, 0.0, 0.0)).unwrap().index;
    let flat = tree.nearest(&Point3::new(3.1, 0.0, 0.0)).unwrap().index;
    let d = compute_fpfh(&c, &kp_at(&c, &[edge, flat]), 0.9).unwrap();
    assert!(l1(&d[0].histogram, &d[1].histogram) > 50.0);
    for (k, &i) in [edge, flat].iter().enumerate() {
        let r = reference_fpfh(&c, i, 0.9);
        for (a, b) in d[k].histogram.iter().zip(&r) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn fpfh_is_rigid_invariant() {
    let (c, _, _) = plane_with_box();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let idx: Vec<usize> = (0..40).map(|_| rng.gen_range(0..c.len())).collect();
    let t = random_transform(&mut rng, 20.0);
    let a = compute_fpfh(&c, &kp_at(&c, &idx), 1.0).unwrap();
    let moved = transform_cloud(&t, &c);
    let b = compute_fpfh(&moved, &kp_at(&moved, &idx), 1.0).unwrap();
    for (x, y) in a.iter().zip(&b) {
        for (u, v) in x.histogram.iter().zip(&y.histogram) {
            assert!((u - v).abs() < 1e-3, "{:?}\n{:?}", x.histogram, y.histogram);
        }
    }
}

#[test]
fn fpfh_isolated_keypoint_is_flagged() {
    let mut pts = grid_plane(0.0, 2.0, 0.0, 2.0, 0.0, 0.2);
    pts.push(Point3::new(50.0, 50.0, 0.0));
    let mut c = cloud(pts);
    c.normals = Some(vec![Vector3::z(); c.len()]);
    let d = compute_fpfh(&c, &kp_at(&c, &[c.len() - 1]), 1.0).unwrap();
    assert!(!d[0].valid);
    assert!(d[0].histogram.iter().all(|v| *v == 0.0));
    assert!(matches!(compute_fpfh(&cloud(vec![Point3::zeros()]), &[], 1.0), Err(Error::MissingNormals)));
}

fn random_descriptors(rng: &mut impl Rng, n: usize) -> Vec<FpfhDescriptor> {
    (0..n)
        .map(|_| {
            let mut h = [0.0; 33];
            h.iter_mut().for_each(|v| *v = rng.gen_range(0.0..10.0));
            FpfhDescriptor { histogram: h, valid: true }
        })
        .collect()
}

#[test]
fn matching_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tgt = random_descriptors(&mut rng, 60);
    let m = match_correspondences(&tgt, &tgt);
    assert!(m.iter().enumerate().all(|(i, c)| c.src_idx == i && c.tgt_idx == i && c.distance == 0.0));

    let mut perm: Vec<usize> = (0..60).collect();
    for i in (1..60).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let src: Vec<FpfhDescriptor> = perm.iter().map(|&j| tgt[j].clone()).collect();
    let m = match_correspondences(&src, &tgt);
    for (i, c) in m.iter().enumerate() {
        assert_eq!(c.tgt_idx, perm[i]);
    }

    // Noisy queries against a brute-force nearest neighbor.
    let noisy: Vec<FpfhDescriptor> = random_descriptors(&mut rng, 30);
    for c in match_correspondences(&noisy, &tgt) {
        let d = |j: usize| -> f64 {
            noisy[c.src_idx].histogram.iter().zip(&tgt[j].histogram).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        };
        let best = (0..tgt.len()).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap();
        assert_eq!(c.tgt_idx, best);
        assert!((c.distance - d(best)).abs() < 1e-9);
    }

    assert_eq!(match_correspondences(&tgt[..1], &tgt).len(), 1);
}

fn random_points(rng: &mut impl Rng, n: usize, extent: f64) -> Vec<Point3> {
    (0..n)
        .map(|_| Point3::new(rng.gen_range(-extent..extent), rng.gen_range(-extent..extent), rng.gen_range(-extent..extent)))
        .collect()
}

fn identity_corrs(n: usize) -> Vec<Correspondence> {
    (0..n).map(|i| Correspondence { src_idx: i, tgt_idx: i, distance: 0.0 }).collect()
}

#[test]
fn ransac_exact_correspondences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gt = random_transform(&mut rng, 10.0);
    let src = random_points(&mut rng, 20, 10.0);
    let tgt: Vec<Point3> = src.iter().map(|p| gt.transform_point(p)).collect();
    let p = RansacParams { inlier_threshold: 0.1, ..RansacParams::default() };
    let (inl, t) = ransac_filter(&identity_corrs(20), &src, &tgt, &p).unwrap();
    assert_eq!(inl.len(), 20);
    assert!(t.max_abs_diff(&gt) < 1e-6);
}

#[test]
fn ransac_rejects_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let gt = random_transform(&mut rng, 10.0);
    let src = random_points(&mut rng, 20, 10.0);
    let mut tgt: Vec<Point3> = src.iter().map(|p| gt.transform_point(p)).collect();
    for q in tgt.iter_mut().skip(12) {
        *q = random_points(&mut rng, 1, 20.0)[0];
    }
    let p = RansacParams { inlier_threshold: 0.1, ..RansacParams::default() };
    let (inl, t) = ransac_filter(&identity_corrs(20), &src, &tgt, &p).unwrap();
    let mut got: Vec<usize> = inl.iter().map(|c| c.src_idx).collect();
    got.sort();
    assert_eq!(got, (0..12).collect::<Vec<_>>());
    assert!(t.max_abs_diff(&gt) < 1e-6);
    // Same seed, same answer.
    let (inl2, t2) = ransac_filter(&identity_corrs(20), &src, &tgt, &p).unwrap();
    assert_eq!(inl, inl2);
    assert_eq!(t, t2);
}

#[test]
fn ransac_degenerate_and_insufficient() {
    let src: Vec<Point3> = (0..3).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
    let p = RansacParams { inlier_threshold: 0.1, max_iterations: 200, ..RansacParams::default() };
    assert!(ransac_filter(&identity_corrs(3), &src, &src, &p).is_err());
    assert!(matches!(
        ransac_filter(&identity_corrs(2), &src, &src, &p),
        Err(Error::InsufficientCorrespondences(2))
    ));
}

#[test]
fn svd_oracles() {
    let pts = [Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0), Point3::new(0.0, 0.0, 1.0)];
    let shift = Vector3::new(1.0, 2.0, 3.0);
    let t = estimate_transform_svd(&pts.iter().map(|p| (*p, p + shift)).collect::<Vec<_>>()).unwrap();
    assert!((t.translation - shift).norm() < 1e-12);
    assert!((t.rotation - nalgebra::Matrix3::identity()).norm() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let gt = random_transform(&mut rng, 30.0);
        let src = random_points(&mut rng, 10, 5.0);
        let pairs: Vec<_> = src.iter().map(|p| (*p, gt.transform_point(p))).collect();
        let t = estimate_transform_svd(&pairs).unwrap();
        assert!(t.max_abs_diff(&gt) < 1e-9);
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    let noise = Normal::new(0.0, 0.01).unwrap();
    for _ in 0..100 {
        let gt = random_transform(&mut rng, 30.0);
        let src = random_points(&mut rng, 30, 5.0);
        let pairs: Vec<_> = src
            .iter()
            .map(|p| (*p, gt.transform_point(p) + Vector3::from_fn(|_, _| noise.sample(&mut rng))))
            .collect();
        let t = estimate_transform_svd(&pairs).unwrap();
        let rms = (pairs.iter().map(|(s, q)| (t.transform_point(s) - q).norm_squared()).sum::<f64>() / pairs.len() as f64).sqrt();
        assert!(rms <= 0.03, "{rms}");
    }

    let line: Vec<_> = (0..5).map(|i| (Point3::new(i as f64, i as f64, 0.0), Point3::new(0.0, i as f64, 0.0))).collect();
    assert!(matches!(estimate_transform_svd(&line), Err(Error::Degenerate(_))));
    assert!(matches!(estimate_transform_svd(&line[..2]), Err(Error::InsufficientCorrespondences(2))));
}

#[test]
fn up_vector_examples() {
    assert!(check_up_vector(&RigidTransform::identity()));
    assert!(!check_up_vector(&RigidTransform::rot_x(std::f64::consts::PI)));
    assert!(check_up_vector(&RigidTransform::rot_x(rad(89.0))));
    // Translation is ignored.
    assert!(check_up_vector(&RigidTransform::from_translation(Vector3::new(0.0, 0.0, -100.0))));
}

#[test]
fn p2p_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = cloud(random_points(&mut rng, 200, 5.0));
    assert_eq!(p2p_error(&c, &c, &RigidTransform::identity(), 0.01), Some(0.0));
    let a = cloud(vec![Point3::zeros()]);
    let b = cloud(vec![Point3::new(0.05, 0.0, 0.0)]);
    assert!((p2p_error(&a, &b, &RigidTransform::identity(), 1.0).unwrap() - 0.05).abs() < 1e-12);
    let far = cloud(vec![Point3::new(2.0, 0.0, 0.0)]);
    assert_eq!(p2p_error(&a, &far, &RigidTransform::identity(), 1.0), None);
}

#[test]
fn coarse_identity_on_identical_clouds() {
    let (c, _, _) = plane_with_box();
    let p = CoarseParams::for_max_voxel(1.0);
    let r = coarse_register_pair(&c, &c, &p).unwrap();
    assert!(r.transform.max_abs_diff(&RigidTransform::identity()) < 1e-6, "{:?}", r.transform);
    assert!(r.p2p_error.unwrap() < 1e-9);
    assert!(r.inlier_count >= 3);
}

#[test]
fn validated_coarse_accepts_identical_clouds_in_one_round() {
    let (c, _, _) = plane_with_box();
    let p = CoarseParams::for_max_voxel(1.0);
    let f = FeatureCloud::new(c, None, &p).unwrap();
    let v = coarse_register_validated(&f, &f, &p, &CoarseValidation::default());
    assert!(v.accepted);
    assert_eq!(v.rounds, 1);
    assert_eq!(v.overlap, 1.0);
    assert!(v.result.unwrap().transform.max_abs_diff(&RigidTransform::identity()) < 1e-6);
}

#[test]
fn structure_overlap_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ground = GroundPlane {
        normal: Vector3::z(),
        offset: 2.0,
        support: 0,
    };
    let feature_cloud = |pts: Vec<Point3>| FeatureCloud {
        cloud: cloud(pts.clone()),
        keypoints: Vec::new(),
        descriptors: Vec::new(),
        refine: GicpCloud::new(pts, 10, 1e-3),
        ground: Some(ground),
    };
    let src: Vec<Point3> = (0..400)
        .map(|_| Point3::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-2.0..2.0)))
        .collect();
    let tgt: Vec<Point3> = (0..400)
        .map(|_| Point3::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-2.0..2.0)))
        .collect();
    let (fs, ft) = (feature_cloud(src.clone()), feature_cloud(tgt.clone()));
    for t in [RigidTransform::identity(), random_transform(&mut rng, 1.0)] {
        let above: Vec<&Point3> = src.iter().filter(|p| p.z + 2.0 > 0.5).collect();
        let hits = above
            .iter()
            .filter(|p| tgt.iter().any(|q| (t.transform_point(p) - q).norm() < 0.8))
            .count();
        let expected = hits as f64 / above.len() as f64;
        assert_eq!(structure_overlap(&fs, &ft, &t, 0.5, 0.8), expected);
    }
    // Ground points never count.
    let flat: Vec<Point3> = src.iter().map(|p| Point3::new(p.x, p.y, -2.0)).collect();
    assert_eq!(structure_overlap(&feature_cloud(flat.clone()), &feature_cloud(flat), &RigidTransform::identity(), 0.5, 0.8), 0.0);
}

/// A corridor that is almost symmetric under a half turn about z: the two
/// walls sit at slightly different distances from the axis.
fn corridor() -> Vec<Point3> {
    let mut pts = grid_plane(-20.0, 20.0, -3.0, 3.6, 0.0, 0.3);
    for p in grid_plane(-20.0, 20.0, 0.0, 3.0, 0.0, 0.3) {
        pts.push(Point3::new(p.x, 3.6, p.y));
        pts.push(Point3::new(p.x, -3.0, p.y));
    }
    for x in [-10.0, 0.0, 10.0] {
        pts.extend(box_surface(Point3::new(x, 0.3, 0.5), Vector3::new(1.0, 1.0, 1.0), 0.2));
    }
    pts
}

#[test]
fn outer_iteration_selects_lower_error_candidate() {
    let tgt = corridor();
    let truth = RigidTransform::new(axis_angle_matrix(&Vector3::z(), rad(2.0)), Vector3::new(0.4, 0.2, 0.0));
    let src: Vec<Point3> = tgt.iter().map(|p| truth.inverse().transform_point(p)).collect();
    let mirror = RigidTransform::rot_z(std::f64::consts::PI).compose(&truth);

    // More correspondences support the mirrored alignment than the true one.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut skp = Vec::new();
    let mut tkp = Vec::new();
    for i in 0..24 {
        let s = src[rng.gen_range(0..src.len())];
        skp.push(s);
        tkp.push(if i < 15 { mirror.transform_point(&s) } else { truth.transform_point(&s) });
    }
    let corrs = identity_corrs(24);
    let p = CoarseParams {
        ransac: RansacParams { inlier_threshold: 0.1, ..RansacParams::default() },
        r_c: 1.0,
        gicp: GicpParams::for_voxel(0.3),
        ..CoarseParams::for_max_voxel(1.0)
    };
    let (first, t_first) = ransac_filter(&corrs, &skp, &tkp, &p.ransac).unwrap();
    assert_eq!(first.len(), 15);
    assert!(t_first.max_abs_diff(&mirror) < 1e-6);

    let s = GicpCloud::new(src, 20, 1e-3);
    let t = GicpCloud::new(tgt, 20, 1e-3);
    let r = register_from_correspondences(&skp, &tkp, corrs, &s, &t, &p).unwrap();
    assert_eq!(r.iterations_used, 2);
    let err = truth.inverse().compose(&r.transform);
    assert!(err.angle() < rad(0.5), "{}", err.angle());
    assert!(err.translation.norm() < 0.2, "{}", err.translation.norm());
}

proptest! {
    #[test]
    fn svd_is_order_invariant(seed in 0u64..1000, shift in 0usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_transform(&mut rng, 10.0);
        let src = random_points(&mut rng, 20, 5.0);
        let pairs: Vec<_> = src.iter().map(|p| (*p, gt.transform_point(p) + Vector3::new(0.01, -0.02, 0.0) * rng.gen::<f64>())).collect();
        let mut rotated = pairs.clone();
        rotated.rotate_left(shift);
        rotated.reverse();
        prop_assert_eq!(estimate_transform_svd(&pairs).unwrap(), estimate_transform_svd(&rotated).unwrap());
    }

    #[test]
    fn up_vector_flip_xor(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_transform(&mut rng, 10.0);
        prop_assume!(t.rotation[(2, 2)].abs() > 1e-9);
        let flipped = RigidTransform::rot_x(std::f64::consts::PI).compose(&t);
        prop_assert!(check_up_vector(&t) ^ check_up_vector(&flipped));
    }

    #[test]
    fn p2p_of_cloud_with_itself_is_zero(seed in 0u64..1000, r_c in 0.001f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cloud(random_points(&mut rng, 50, 5.0));
        prop_assert_eq!(p2p_error(&c, &c, &RigidTransform::identity(), r_c), Some(0.0));
    }

    #[test]
    fn ransac_without_outliers_keeps_everything(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_transform(&mut rng, 10.0);
        let src = random_points(&mut rng, 10, 10.0);
        let tgt: Vec<Point3> = src.iter().map(|p| gt.transform_point(p)).collect();
        let p = RansacParams { inlier_threshold: 0.05, seed, ..RansacParams::default() };
        let (inl, _) = ransac_filter(&identity_corrs(10), &src, &tgt, &p).unwrap();
        prop_assert_eq!(inl.len(), 10);
    }
}

fn level_transform(yaw: f64, t: Vector3<f64>) -> RigidTransform {
    RigidTransform::new(axis_angle_matrix(&Vector3::z(), yaw), t)
}

#[test]
fn ground_plane_of_a_tilted_sensor() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // World ground z = 0 with clutter above it, seen from a sensor 6 m up
    // and pitched by 17°.
    let mut world = grid_plane(-20.0, 20.0, -20.0, 20.0, 0.0, 0.5);
    world.extend(box_surface(Point3::new(5.0, 3.0, 2.0), Vector3::new(2.0, 3.0, 4.0), 0.3));
    world.extend(random_points(&mut rng, 300, 15.0).into_iter().map(|p| p + Vector3::new(0.0, 0.0, 16.0)));
    let mount = RigidTransform::new(axis_angle_matrix(&Vector3::y(), rad(17.0)), Vector3::new(1.0, -2.0, 6.0));
    let local: Vec<Point3> = world.iter().map(|p| mount.inverse().transform_point(p)).collect();
    let g = estimate_ground_plane(&local, &GroundPrior::default(), 3).unwrap();
    let up = mount.rotation.transpose() * Vector3::z();
    assert!((g.normal - up).norm() < 1e-6, "{:?}", g.normal);
    assert!((g.offset - 6.0).abs() < 1e-6);
    let lev = g.leveling();
    for p in local.iter().take(500) {
        assert!(lev.transform_point(p).z.abs() < 1e-5);
        assert!((g.height(p) - lev.transform_point(p).z).abs() < 1e-9);
    }
    assert!((lev.transform_point(&Point3::zeros()) - Point3::new(0.0, 0.0, 6.0)).norm() < 1e-6);
}

#[test]
fn ground_plane_ignores_walls() {
    let wall: Vec<Point3> = grid_plane(-5.0, 5.0, -5.0, 5.0, 0.0, 0.25)
        .into_iter()
        .map(|p| Point3::new(8.0, p.x, p.y))
        .collect();
    assert!(estimate_ground_plane(&wall, &GroundPrior::default(), 1).is_none());
    assert!(estimate_ground_plane(&wall[..2], &GroundPrior::default(), 1).is_none());
}

#[test]
fn gated_matching_without_gate_is_top_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = random_descriptors(&mut rng, 30);
    let b = random_descriptors(&mut rng, 40);
    let ha = vec![0.0; 30];
    let hb: Vec<f64> = (0..40).map(|j| j as f64 * 0.1).collect();
    let all = match_correspondences_gated(&a, &b, &ha, &hb, f64::INFINITY, 3);
    assert_eq!(all.len(), 90);
    for i in 0..30 {
        let mut d: Vec<(f64, usize)> = (0..40)
            .map(|j| (a[i].histogram.iter().zip(&b[j].histogram).map(|(x, y)| (x - y).powi(2)).sum::<f64>(), j))
            .collect();
        d.sort_by(|x, y| x.0.total_cmp(&y.0));
        let got: Vec<usize> = all.iter().filter(|c| c.src_idx == i).map(|c| c.tgt_idx).collect();
        assert_eq!(got, d[..3].iter().map(|x| x.1).collect::<Vec<_>>());
    }
    // Only targets at height ≤ 0.5 are reachable.
    let gated = match_correspondences_gated(&a, &b, &ha, &hb, 0.55, 10);
    assert_eq!(gated.len(), 30 * 6);
    assert!(gated.iter().all(|c| c.tgt_idx <= 5));
}

#[test]
fn ransac_planar_with_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gt = level_transform(rad(-73.0), Vector3::new(12.0, -4.0, 0.3));
    let src = random_points(&mut rng, 40, 15.0);
    let mut tgt: Vec<Point3> = src.iter().map(|p| gt.transform_point(p)).collect();
    for q in tgt.iter_mut().skip(15) {
        *q = random_points(&mut rng, 1, 30.0)[0];
    }
    let p = RansacParams { inlier_threshold: 0.1, ..RansacParams::default() };
    let (inl, t) = ransac_planar(&identity_corrs(40), &src, &tgt, &p).unwrap();
    let mut got: Vec<usize> = inl.iter().map(|c| c.src_idx).collect();
    got.sort();
    assert_eq!(got, (0..15).collect::<Vec<_>>());
    assert!(t.max_abs_diff(&gt) < 1e-9);
    assert!(matches!(
        ransac_planar(&identity_corrs(2), &src, &tgt, &p),
        Err(Error::InsufficientCorrespondences(2))
    ));
}

proptest! {
    #[test]
    fn planar_transform_recovers_yaw_and_translation(
        yaw in -3.1f64..3.1, tx in -50.0f64..50.0, ty in -50.0f64..50.0, tz in -3.0f64..3.0, seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = level_transform(yaw, Vector3::new(tx, ty, tz));
        let pairs: Vec<(Point3, Point3)> = random_points(&mut rng, 6, 20.0).into_iter().map(|p| (p, gt.transform_point(&p))).collect();
        let t = estimate_planar_transform(&pairs).unwrap();
        prop_assert!(t.max_abs_diff(&gt) < 1e-9);
    }
}
