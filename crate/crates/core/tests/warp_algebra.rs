//! Homography algebra, sampler bounds and resampling checked against
//! hand-rolled 3×3 arithmetic.

use descry::image::Image;
use descry::warp::{
    apply_color_jitter, homography_from_points, image_corners, make_affine, sample_crop_rect,
    sample_perspective, warp_image, ColorJitterParams, Homography, JitterOp, Point,
};
use descry::Rng;
use proptest::prelude::*;

type M3 = [[f64; 3]; 3];

fn mul(a: &M3, b: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn adjugate_inverse(m: &M3) -> M3 {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
        [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
        [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
    ];
    let det = m[0][0] * adj[0][0] + m[0][1] * adj[1][0] + m[0][2] * adj[2][0];
    adj.map(|r| r.map(|x| x / det))
}

fn project(m: &M3, p: Point) -> Point {
    let w = m[2][0] * p.0 + m[2][1] * p.1 + m[2][2];
    (
        (m[0][0] * p.0 + m[0][1] * p.1 + m[0][2]) / w,
        (m[1][0] * p.0 + m[1][1] * p.1 + m[1][2]) / w,
    )
}

/// Composition of the three augmentation families on a 128×128 canvas.
fn random_view(rng: &mut Rng) -> Homography {
    let c = (63.5, 63.5);
    let affine = make_affine(c, rng.uniform(0.0, 360.0), rng.uniform(0.5, 1.0)).unwrap();
    let (persp, _) = sample_perspective(128, 128, 0.5, rng).unwrap();
    let crop = sample_crop_rect(128, 128, (0.7, 1.0), (0.75, 4.0 / 3.0), rng).unwrap();
    let crop = descry::warp::crop_homography(crop, 128, 128).unwrap();
    crop.compose(&persp).unwrap().compose(&affine).unwrap()
}

pub fn composed_views_round_trip_points() {
    let mut rng = Rng::new(2, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let h = random_view(&mut rng);
        let inv = h.invert().unwrap();
        for _ in 0..10 {
            let p = (rng.uniform(0.0, 127.0), rng.uniform(0.0, 127.0));
            let back = inv.apply(h.apply(p).unwrap()).unwrap();
            worst = worst.max((back.0 - p.0).hypot(back.1 - p.1));
        }
    }
    assert!(worst < 1e-6, "round-trip error {worst}");
}

pub fn composed_views_obey_group_laws() {
    let mut rng = Rng::new(3, 0);
    let id = Homography::identity();
    for _ in 0..1000 {
        let (a, b, c) = (random_view(&mut rng), random_view(&mut rng), random_view(&mut rng));
        let left = a.compose(&b).unwrap().compose(&c).unwrap();
        let right = a.compose(&b.compose(&c).unwrap()).unwrap();
        assert!(left.max_abs_diff(&right) < 1e-9);
        assert!(a.compose(&a.invert().unwrap()).unwrap().max_abs_diff(&id) < 1e-9);
        assert!(a.invert().unwrap().compose(&a).unwrap().max_abs_diff(&id) < 1e-9);
        assert!(id.compose(&a).unwrap().max_abs_diff(&a) < 1e-9);
        assert!(a.compose(&id).unwrap().max_abs_diff(&a) < 1e-9);
    }
}

#[test]
fn compose_and_invert_match_manual_matrix_algebra() {
    let mut rng = Rng::new(4, 0);
    for _ in 0..100 {
        let (a, b) = (random_view(&mut rng), random_view(&mut rng));
        let prod = mul(&a.rows(), &b.rows());
        let ab = a.compose(&b).unwrap();
        let inv = adjugate_inverse(&a.rows());
        for _ in 0..5 {
            let p = (rng.uniform(0.0, 127.0), rng.uniform(0.0, 127.0));
            let (x, y) = (ab.apply(p).unwrap(), project(&prod, p));
            assert!((x.0 - y.0).abs() < 1e-8 && (x.1 - y.1).abs() < 1e-8);
            let q = a.apply(p).unwrap();
            let (x, y) = (a.invert().unwrap().apply(q).unwrap(), project(&inv, q));
            assert!((x.0 - y.0).abs() < 1e-8 && (x.1 - y.1).abs() < 1e-8);
        }
    }
}

#[test]
fn affine_matches_hand_composition() {
    // T(2,2)·S(0.5)·R(90°)·T(−2,−2) applied to (4,2): (2,0) → (0,2) → (0,1) → (2,3)
    let h = make_affine((2.0, 2.0), 90.0, 0.5).unwrap();
    let (u, v) = h.apply((4.0, 2.0)).unwrap();
    assert!((u - 2.0).abs() < 1e-12 && (v - 3.0).abs() < 1e-12);
}

/// Least-squares DLT through the SVD null vector of the 8×9 system.
fn dlt(src: &[Point; 4], dst: &[Point; 4]) -> M3 {
    let mut a = nalgebra::DMatrix::<f64>::zeros(9, 9);
    for i in 0..4 {
        let ((x, y), (u, v)) = (src[i], dst[i]);
        let r = 2 * i;
        let rows = [
            [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u],
            [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v],
        ];
        for (k, row) in rows.iter().enumerate() {
            for (j, &val) in row.iter().enumerate() {
                a[(r + k, j)] = val;
            }
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.unwrap();
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.partial_cmp(y.1).unwrap())
        .unwrap();
    let h = vt.row(idx);
    let s = h[8];
    [[h[0] / s, h[1] / s, h[2] / s], [h[3] / s, h[4] / s, h[5] / s], [h[6] / s, h[7] / s, 1.0]]
}

#[test]
fn perspective_agrees_with_independent_dlt() {
    let mut rng = Rng::new(17, 0);
    let (h, corners) = sample_perspective(64, 64, 0.4, &mut rng).unwrap();
    let src = image_corners(64, 64);
    let oracle = dlt(&src, &corners);
    for (p, target) in src.iter().zip(&corners) {
        let a = h.apply(*p).unwrap();
        let b = project(&oracle, *p);
        assert!((a.0 - b.0).abs() < 1e-6 && (a.1 - b.1).abs() < 1e-6);
        assert!((a.0 - target.0).abs() < 1e-6 && (a.1 - target.1).abs() < 1e-6);
    }
    let direct = homography_from_points(&src, &corners).unwrap();
    assert!(direct.max_abs_diff(&h) < 1e-9);
}

#[test]
fn ten_thousand_crops_stay_inside() {
    let mut rng = Rng::new(5, 0);
    for _ in 0..10_000 {
        let r = sample_crop_rect(128, 96, (0.7, 1.0), (0.75, 4.0 / 3.0), &mut rng).unwrap();
        assert!(r.x0 >= 0.0 && r.y0 >= 0.0);
        assert!(r.x0 + r.width <= 128.0 + 1e-9 && r.y0 + r.height <= 96.0 + 1e-9);
        let frac = r.width * r.height / (128.0 * 96.0);
        assert!((0.7 - 1e-9..=1.0 + 1e-9).contains(&frac), "area fraction {frac}");
    }
}

#[test]
fn quarter_turn_permutes_pixels() {
    let n = 16;
    let img = Image::from_fn(n, n, 3, |u, v, c| {
        let left = if u < n / 2 { 1.0 } else { 0.0 };
        let top = if v < 5 { 0.25 } else { 0.75 };
        [left, top, 0.5][c]
    });
    let c = (n as f64 - 1.0) / 2.0;
    let out = warp_image(&img, &make_affine((c, c), 90.0, 1.0).unwrap()).unwrap();
    for v in 0..n {
        for u in 0..n {
            let src = img.pixel(v, n - 1 - u);
            for ch in 0..3 {
                assert!((out.get(u, v, ch) - src[ch]).abs() < 1e-5, "({u},{v}) channel {ch}");
            }
        }
    }
}

#[test]
fn warp_then_unwarp_of_ramp_is_close() {
    let (w, h) = (64, 64);
    let img = Image::from_fn(w, h, 3, |u, v, c| {
        let x = u as f32 / (w - 1) as f32;
        let y = v as f32 / (h - 1) as f32;
        [x, y, 0.5 * (x + y)][c]
    });
    let mut rng = Rng::new(6, 0);
    let aff = make_affine((31.5, 31.5), 33.0, 0.8).unwrap();
    let (persp, _) = sample_perspective(w, h, 0.3, &mut rng).unwrap();
    let hm = persp.compose(&aff).unwrap();
    let inv = hm.invert().unwrap();
    let back = warp_image(&warp_image(&img, &hm).unwrap(), &inv).unwrap();
    let (mut sum, mut count) = (0.0f64, 0usize);
    for v in 0..h {
        for u in 0..w {
            // doubly-valid: the forward sample and the return sample are both interior
            let p = (u as f64, v as f64);
            let q = hm.apply(p).unwrap();
            let inside = |x: Point| x.0 >= 0.0 && x.1 >= 0.0 && x.0 <= (w - 1) as f64 && x.1 <= (h - 1) as f64;
            if !inside(q) {
                continue;
            }
            let fine = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)]
                .iter()
                .all(|d| inside(inv.apply((q.0.floor() + 0.5 + d.0 * 0.5, q.1.floor() + 0.5 + d.1 * 0.5)).unwrap()));
            if !fine {
                continue;
            }
            for c in 0..3 {
                sum += (back.get(u, v, c) - img.get(u, v, c)).abs() as f64;
                count += 1;
            }
        }
    }
    assert!(count > 3000);
    assert!(sum / (count as f64) < 0.02, "mean abs diff {}", sum / count as f64);
}

fn jitter_strategy() -> impl Strategy<Value = ColorJitterParams> {
    (0.5f64..1.5, 0.5f64..1.5, 0.0f64..2.0, -0.5f64..0.5, Just([
        JitterOp::Saturation,
        JitterOp::Hue,
        JitterOp::Brightness,
        JitterOp::Contrast,
    ]))
        .prop_map(|(brightness, contrast, saturation, hue, order)| ColorJitterParams {
            brightness,
            contrast,
            saturation,
            hue,
            order,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unit_scale_affine_preserves_distances(
        angle in -720.0f64..720.0,
        cu in -50.0f64..150.0, cv in -50.0f64..150.0,
        p in (0.0f64..128.0, 0.0f64..128.0), q in (0.0f64..128.0, 0.0f64..128.0),
    ) {
        let h = make_affine((cu, cv), angle, 1.0).unwrap();
        let (a, b) = (h.apply(p).unwrap(), h.apply(q).unwrap());
        let before = (p.0 - q.0).hypot(p.1 - q.1);
        let after = (a.0 - b.0).hypot(a.1 - b.1);
        prop_assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn jitter_output_is_clamped(params in jitter_strategy(), seed in 0u64..1000) {
        let mut rng = Rng::new(seed, 0);
        let img = Image::from_fn(8, 8, 3, |_, _, _| rng.uniform(0.0, 1.0) as f32);
        let out = apply_color_jitter(&img, &params).unwrap();
        prop_assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        let mut again = out.clone();
        again.clamp01();
        prop_assert_eq!(again, out);
    }

    #[test]
    fn photometric_part_never_moves_pixels(params in jitter_strategy(), angle in 0.0f64..360.0) {
        let geometry = make_affine((15.5, 15.5), angle, 0.9).unwrap();
        let plain = descry::warp::Warp { geometry, photometric: None };
        let tinted = descry::warp::Warp { geometry, photometric: Some(params) };
        let p = (3.0, 7.0);
        prop_assert_eq!(plain.geometry.apply(p).unwrap(), tinted.geometry.apply(p).unwrap());
        // a constant image stays constant, so no pixel was displaced
        let img = Image::filled(32, 32, 3, 0.4);
        let flat = apply_color_jitter(&img, &params).unwrap();
        let first = flat.pixel(0, 0).to_vec();
        prop_assert!((0..32).all(|v| (0..32).all(|u| flat.pixel(u, v) == first.as_slice())));
    }
}

/// Entry points for the test harness; the checks above are also run by the acceptance suite.
mod harness {
    #[test]
    fn composed_views_round_trip_points() {
        super::composed_views_round_trip_points()
    }

    #[test]
    fn composed_views_obey_group_laws() {
        super::composed_views_obey_group_laws()
    }
}
