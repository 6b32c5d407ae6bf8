use super::*;

fn cam() -> CameraIntrinsics {
    CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap()
}

fn px(row: usize, col: usize, depth: f64, label: usize) -> SourcePixel {
    SourcePixel { row, col, depth, label }
}

#[test]
fn identity_round_trip() {
    let k = CameraIntrinsics::new(80.0, 90.0, 7.5, 4.0).unwrap();
    let pixels: Vec<SourcePixel> = (0..8)
        .flat_map(|r| (0..16).map(move |c| px(r, c, 1.0 + (r * 16 + c) as f64 * 0.1, r)))
        .collect();
    let (pts, stats) = proj(&pixels, &k, &RigidTransform::identity(), 8, 16).unwrap();
    assert_eq!(stats, ProjStats::default());
    for (p, s) in pts.iter().zip(&pixels) {
        assert_eq!((p.row, p.col, p.label), (s.row, s.col, s.label));
        assert!((p.depth - s.depth).abs() < 1e-12);
    }
}

#[test]
fn forward_translation_on_axis() {
    let (pts, _) = proj(&[px(50, 50, 10.0, 1)], &cam(), &RigidTransform::translation([0.0, 0.0, 2.5]), 100, 100).unwrap();
    assert_eq!((pts[0].row, pts[0].col), (50, 50));
    assert!((pts[0].depth - 12.5).abs() < 1e-12);
}

#[test]
fn hand_pinhole_example() {
    let (pts, _) = proj(&[px(50, 60, 10.0, 0)], &cam(), &RigidTransform::translation([0.0, 0.0, -5.0]), 100, 100).unwrap();
    assert!((pts[0].u - 70.0).abs() < 1e-12);
    assert_eq!((pts[0].row, pts[0].col), (50, 70));
    assert!((pts[0].depth - 5.0).abs() < 1e-12);
}

#[test]
fn drops_are_counted() {
    let pixels = [px(50, 50, 1.0, 0), px(50, 99, 10.0, 0)];
    let (pts, stats) = proj(&pixels, &cam(), &RigidTransform::translation([0.5, 0.0, -2.0]), 100, 100).unwrap();
    assert!(pts.is_empty());
    assert_eq!(stats, ProjStats { behind_camera: 1, off_frame: 1 });
}

#[test]
fn half_pixel_rounds_up() {
    let k = cam();
    // x = 0.05·10/… chosen so the target lands at exactly u = 50.5
    let h = RigidTransform::translation([0.05, 0.0, 0.0]);
    let (pts, _) = proj(&[px(50, 50, 10.0, 0)], &k, &h, 100, 100).unwrap();
    assert!((pts[0].u - 50.5).abs() < 1e-12);
    assert_eq!(pts[0].col, 51);
}

#[test]
fn singular_intrinsics_rejected() {
    assert!(CameraIntrinsics::from_matrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]).is_err());
    assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
}

#[test]
fn rotation_validated() {
    assert!(RigidTransform::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]], [0.0; 3]).is_err());
    let r = RigidTransform::from_yaw(0.3, [1.0, 2.0, 3.0]);
    assert!(RigidTransform::new(r.rotation, r.translation).is_ok());
    let id = r.compose(&r.inverse());
    let p = id.apply(&[0.4, -1.0, 7.0]);
    assert!((p[0] - 0.4).abs() < 1e-12 && (p[1] + 1.0).abs() < 1e-12 && (p[2] - 7.0).abs() < 1e-12);
}

fn pt(row: usize, col: usize, depth: f64, label: usize) -> ProjectedPoint {
    ProjectedPoint {
        row,
        col,
        u: col as f64,
        v: row as f64,
        depth,
        label,
    }
}

#[test]
fn zbuffer_min_rule_and_ties() {
    let (s, d) = zbuffer_scatter(&[pt(0, 0, 7.0, 1), pt(0, 0, 3.0, 2), pt(1, 1, 4.0, 5), pt(1, 1, 4.0, 6)], 2, 2);
    assert_eq!(s.label(0, 0), 2);
    assert_eq!(d.depth.at2(0, 0), 3.0);
    assert_eq!(s.label(1, 1), 5);
    assert!(!d.is_valid(0, 1) && !d.is_valid(1, 0));
}

fn frame(h: usize, w: usize, c_bg: usize, fg: impl Fn(usize, usize) -> bool) -> (DepthMap, SemanticMap) {
    let depth = Tensor::new(&[h, w], (0..h * w).map(|i| 5.0 + (i % 7) as f64).collect()).unwrap();
    let labels = (0..h * w).map(|i| if fg(i / w, i % w) { c_bg } else { i % c_bg }).collect();
    (DepthMap::dense(depth), SemanticMap::from_labels(h, w, labels, c_bg).unwrap())
}

#[test]
fn static_camera_reproduces_background() {
    let (d, s) = frame(6, 8, 3, |r, c| r == 2 && c < 3);
    let obs = FrameObservation {
        depth: &d,
        semantics: &s,
        pose: RigidTransform::from_yaw(0.2, [1.0, 0.0, 3.0]),
    };
    let out = build_reprojected_maps(&[obs.clone(), obs.clone()], &cam(), &obs.pose).unwrap();
    for (sem, dep) in out.frames.iter().chain(std::iter::once(&out.merged)) {
        for r in 0..6 {
            for c in 0..8 {
                let bg = !(r == 2 && c < 3);
                assert_eq!(dep.is_valid(r, c), bg);
                if bg {
                    assert_eq!(sem.label(r, c), s.label(r, c));
                    assert!((dep.depth.at2(r, c) - d.depth.at2(r, c)).abs() < 1e-12);
                }
            }
        }
    }
    assert_eq!(out.q.sum(), 45.0);
}

#[test]
fn all_foreground_gives_empty_maps() {
    let (d, s) = frame(4, 4, 2, |_, _| true);
    let obs = FrameObservation {
        depth: &d,
        semantics: &s,
        pose: RigidTransform::identity(),
    };
    let out = build_reprojected_maps(&[obs], &cam(), &RigidTransform::identity()).unwrap();
    assert_eq!(out.q.sum(), 0.0);
    assert_eq!(out.merged.1.valid.sum(), 0.0);
}
