use std::time::Instant;

use dynafuse::geometry::{Pose, Twist};
use dynafuse::odometry::{
    align_frames, linearize, residual_at, AlignmentParams, LossWeights, PreparedFrame,
};
use dynafuse::synthetic::{default_intrinsics, render, MovingBox, Scene};
use nalgebra::{Point3, Vector3, Vector6};
use rand::{Rng, SeedableRng};

/// Camera 2 relative to camera 1: 2 degrees about a skew axis, 1 cm shift.
fn ground_truth_camera() -> Pose {
    let axis = Vector3::new(0.3, 1.0, 0.2).normalize();
    let rot = Pose::exp(&Twist::new(Vector3::zeros(), axis * 2f64.to_radians()));
    Pose::new(rot.rotation, Vector3::new(0.008, -0.004, 0.0045)).unwrap()
}

fn errors(est: &Pose, truth: &Pose) -> (f64, f64) {
    let d = est.compose(&truth.inverse());
    (d.rotation_angle().to_degrees(), (est.translation - truth.translation).norm())
}

#[test]
fn recovers_motion_on_plane_and_sphere() {
    let k = default_intrinsics();
    let scene = Scene::plane_and_sphere();
    let c2 = ground_truth_camera();
    assert!((c2.translation.norm() - 0.01).abs() < 1e-3);
    let f1 = render(&scene, &k, &Pose::identity(), 0.0, 0.0).frame;
    let f2 = render(&scene, &k, &c2, 0.1, 0.1).frame;
    let truth = c2.inverse();

    let start = Instant::now();
    let r = align_frames(&f1, &f2, None, None, &k, &Pose::identity(), &AlignmentParams::default())
        .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let (rot_err, trans_err) = errors(&r.pose, &truth);
    let mean_depth = f1.depth.data.iter().sum::<f64>() / f1.depth.data.len() as f64;
    println!("rot {rot_err:.5} deg, trans {trans_err:.6} m, {elapsed:.2} s, {:?}", r.iterations_per_level);
    assert!(rot_err < 0.5);
    assert!(trans_err < 0.01 * mean_depth);
}

#[test]
fn jacobian_matches_finite_differences() {
    let k = default_intrinsics();
    let object = MovingBox {
        center: Point3::new(-0.2, 0.1, 1.2),
        half_extents: Vector3::new(0.1, 0.1, 0.1),
        velocity: Vector3::new(0.1, 0.0, 0.0),
        label: "person".into(),
    };
    let scenes = [
        Scene::plane_only(),
        Scene::plane_and_sphere(),
        Scene::plane_and_sphere().with_object(object),
    ];
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    let h = 1e-6;
    let mut checked = 0;
    for scene in &scenes {
        let c2 = ground_truth_camera();
        let f1 = render(scene, &k, &Pose::identity(), 0.0, 0.0).frame;
        let f2 = render(scene, &k, &c2, 0.0, 0.0).frame;
        let p1 = PreparedFrame::new(&f1, None, 1, 0).unwrap();
        let p2 = PreparedFrame::new(&f2, None, 1, 0).unwrap();
        // evaluate away from the solution so residuals are nonzero
        let t = Pose::exp(&Twist::new(Vector3::new(0.002, 0.001, -0.003), Vector3::new(0.001, -0.002, 0.0)))
            .compose(&c2.inverse());
        let samples = linearize(&p1, &p2, &t, &k, 0);
        let mut n = 0;
        while n < 40 {
            let s = samples[rng.gen_range(0..samples.len())];
            let (x, y) = (s.pixel.x as usize, s.pixel.y as usize);
            let mut fd_i = Vector6::zeros();
            let mut fd_z = Vector6::zeros();
            let mut ok = true;
            for j in 0..6 {
                let mut e = Vector6::zeros();
                e[j] = h;
                let plus = residual_at(&p1, &p2, &Pose::exp(&Twist::from_vector(&e)).compose(&t), &k, 0, x, y);
                let minus = residual_at(&p1, &p2, &Pose::exp(&Twist::from_vector(&-e)).compose(&t), &k, 0, x, y);
                match (plus, minus) {
                    (Some(a), Some(b)) => {
                        fd_i[j] = (a.0 - b.0) / (2.0 * h);
                        fd_z[j] = (a.1 - b.1) / (2.0 * h);
                    }
                    _ => ok = false,
                }
            }
            // skip samples whose stencil straddles a cell boundary; h moves the warp by up to ~4e-4 px
            let warped = {
                let p = t.transform_point(&Point3::new(
                    (s.pixel.x - k.ox) / k.fx * f1.depth.get(x, y),
                    (s.pixel.y - k.oy) / k.fy * f1.depth.get(x, y),
                    f1.depth.get(x, y),
                ));
                (p.x / p.z * k.fx + k.ox, p.y / p.z * k.fy + k.oy)
            };
            let frac = |v: f64| (v - v.round()).abs();
            if !ok || frac(warped.0) < 1e-3 || frac(warped.1) < 1e-3 {
                continue;
            }
            for (a, f) in [(s.j_i, fd_i), (s.j_z, fd_z)] {
                let scale = a.amax().max(f.amax()).max(1e-8);
                let rel = (a - f).amax() / scale;
                assert!(rel < 1e-4, "analytic {a:?} fd {f:?} rel {rel}");
            }
            n += 1;
        }
        checked += n;
    }
    assert!(checked >= 100);
}

#[test]
fn huber_weights_still_converge() {
    let k = default_intrinsics();
    let scene = Scene::plane_and_sphere();
    let c2 = ground_truth_camera();
    let f1 = render(&scene, &k, &Pose::identity(), 0.0, 0.0).frame;
    let f2 = render(&scene, &k, &c2, 0.0, 0.0).frame;
    let params = AlignmentParams {
        weights: LossWeights {
            huber: Some(Default::default()),
            ..Default::default()
        },
        ..Default::default()
    };
    let r = align_frames(&f1, &f2, None, None, &k, &Pose::identity(), &params).unwrap();
    let (rot_err, _) = errors(&r.pose, &c2.inverse());
    assert!(rot_err < 0.5);
}
