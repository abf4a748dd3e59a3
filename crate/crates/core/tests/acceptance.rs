//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use dynafuse::config::RawConfig;
use dynafuse::detection::BBox;
use dynafuse::geometry::{
    backproject, pose_to_quat, project, quat_to_pose, Intrinsics, Pixel, Pose, Twist, UnitQuaternion,
};
use dynafuse::odometry::{align_frames, linearize, residual_at, AlignmentParams, PreparedFrame};
use dynafuse::pipeline::run;
use dynafuse::segmentation::{
    assign_components, build_graph, compute_beta, data_term, grabcut, init_trimap, min_cut_labeling,
    smoothness_term, total_energy, AlphaMask, ColorImage, Gaussian, GmmModel, GrabcutParams, Mixture,
    Trimap, TrimapLabel,
};
use dynafuse::synthetic::{default_intrinsics, moving_person_sequence, render, write_dataset, MovingBox, Scene};
use nalgebra::{Matrix3, Point3, Vector3, Vector6};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const BIN: &str = env!("CARGO_BIN_EXE_dynafuse");

type Outcome = Result<String, String>;
type Criterion<'a> = (&'a str, Box<dyn Fn() -> Outcome>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn unit(rng: &mut StdRng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_twist(rng: &mut StdRng, max_angle: f64) -> Twist {
    let v = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    Twist::new(v, unit(rng) * rng.gen_range(0.0..max_angle))
}

fn geometry_round_trips() -> Outcome {
    let mut rng = StdRng::seed_from_u64(1);
    let n = 10_000;
    let start = Instant::now();
    let (mut e_proj, mut e_se3, mut e_quat) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n {
        let k = Intrinsics::new(
            rng.gen_range(200.0..800.0),
            rng.gen_range(200.0..800.0),
            rng.gen_range(100.0..400.0),
            rng.gen_range(80.0..300.0),
            640,
            480,
        )
        .unwrap();
        let x = Pixel::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
        let z = rng.gen_range(0.1..10.0);
        let q = project(&backproject(x, z, &k).unwrap(), &k).unwrap();
        e_proj = e_proj.max((q.x - x.x).abs()).max((q.y - x.y).abs());

        let xi = random_twist(&mut rng, 3.1);
        let back = Pose::exp(&xi).log().unwrap();
        e_se3 = e_se3.max((back.to_vector() - xi.to_vector()).norm());

        let t = Pose::exp(&random_twist(&mut rng, std::f64::consts::PI));
        let (q, tr) = pose_to_quat(&t);
        e_quat = e_quat.max((quat_to_pose(&q, tr).rotation - t.rotation).amax());
        let r = UnitQuaternion::from_rotation(&q.to_rotation());
        e_quat = e_quat.max(
            (r.qx - q.qx).abs().max((r.qy - q.qy).abs()).max((r.qz - q.qz).abs()).max((r.qw - q.qw).abs()),
        );
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        e_proj < 1e-9 && e_se3 < 1e-9 && e_quat < 1e-9 && secs < 1.0,
        format!("{n} samples: project {e_proj:.1e} px, se3 {e_se3:.1e}, quaternion {e_quat:.1e}, {secs:.3} s"),
    )
}

fn random_mixture(rng: &mut StdRng) -> Mixture {
    let n = rng.gen_range(1..4);
    let comps = (0..n)
        .map(|_| {
            let mean = Vector3::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            let a = unit(rng) * rng.gen_range(0.0..0.3);
            let cov = a * a.transpose() + Matrix3::identity() * rng.gen_range(0.005..0.05);
            Gaussian::new(1.0 / n as f64, mean, cov).unwrap()
        })
        .collect();
    Mixture::new(comps)
}

fn labeling_energy(img: &ColorImage, alpha: &AlphaMask, theta: &GmmModel, gamma: f64, beta: f64) -> f64 {
    total_energy(img, alpha, &assign_components(img, alpha, theta), theta, gamma, beta)
}

fn min_cut_optimality() -> Outcome {
    let mut rng = StdRng::seed_from_u64(2);
    let start = Instant::now();
    let (w, h) = (6, 6);
    let mut mismatches = 0;
    let mut max_unknown = 0;
    for _ in 0..200 {
        let img = ColorImage::new(
            w,
            h,
            (0..w * h).map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect(),
        )
        .unwrap();
        let mut trimap = Trimap::filled(w, h, TrimapLabel::DefiniteBackground);
        let unknown = rng.gen_range(1..=16);
        let mut order: Vec<usize> = (0..w * h).collect();
        for i in 0..order.len() {
            order.swap(i, rng.gen_range(i..w * h));
        }
        for &i in &order[..unknown] {
            trimap.labels[i] = TrimapLabel::Unknown;
        }
        for &i in &order[unknown..unknown + rng.gen_range(0..4)] {
            trimap.labels[i] = TrimapLabel::DefiniteForeground;
        }
        max_unknown = max_unknown.max(unknown);
        let theta = GmmModel {
            background: random_mixture(&mut rng),
            foreground: random_mixture(&mut rng),
        };
        let gamma = rng.gen_range(0.5..60.0);
        let beta = compute_beta(&img);

        let cut = min_cut_labeling(&build_graph(&img, &trimap, &theta, gamma, beta), w, h);
        let e_cut = labeling_energy(&img, &cut, &theta, gamma, beta);

        let fixed: Vec<u8> = trimap.labels.iter().map(|l| (*l == TrimapLabel::DefiniteForeground) as u8).collect();
        let mut best = f64::INFINITY;
        let mut alpha = AlphaMask { width: w, height: h, data: fixed };
        for bits in 0u32..1 << unknown {
            for (j, &i) in order[..unknown].iter().enumerate() {
                alpha.data[i] = (bits >> j & 1) as u8;
            }
            best = best.min(labeling_energy(&img, &alpha, &theta, gamma, beta));
        }
        if e_cut != best {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        mismatches == 0 && secs < 30.0,
        format!("200 instances up to {max_unknown} unknown pixels, {mismatches} mismatches, {secs:.2} s"),
    )
}

fn trace_nonincreasing(trace: &[f64]) -> bool {
    trace.windows(2).all(|p| p[1] <= p[0] + 1e-9)
}

fn grabcut_traces() -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    let params = GrabcutParams::default();
    let mut bad = 0;
    for _ in 0..20 {
        let (w, h) = (64, 64);
        let bg: [f64; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let fg: [f64; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let (x0, y0) = (rng.gen_range(8..24), rng.gen_range(8..24));
        let (x1, y1) = (rng.gen_range(36..56), rng.gen_range(36..56));
        let noise = rng.gen_range(0.02..0.3);
        let data = (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                let base = if (x0..x1).contains(&x) && (y0..y1).contains(&y) { fg } else { bg };
                base.map(|c| (c + rng.gen_range(-noise..noise)).clamp(0.0, 1.0))
            })
            .collect();
        let img = ColorImage::new(w, h, data).unwrap();
        let bbox = BBox::new(x0 as f64 - 4.0, y0 as f64 - 4.0, (x1 - x0) as f64 + 8.0, (y1 - y0) as f64 + 8.0);
        let out = grabcut(&img, &init_trimap(&bbox, w, h).unwrap(), &params).unwrap();
        if !trace_nonincreasing(&out.energy_trace) {
            bad += 1;
        }
    }

    let (w, h) = (24, 20);
    let data = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if (7..15).contains(&x) && (5..13).contains(&y) {
                [0.9, 0.2, 0.1]
            } else {
                [0.15, 0.25, 0.8]
            }
        })
        .collect();
    let img = ColorImage::new(w, h, data).unwrap();
    let out = grabcut(&img, &init_trimap(&BBox::new(4.0, 2.0, 14.0, 14.0), w, h).unwrap(), &params).unwrap();
    let mislabeled = (0..w * h)
        .filter(|&i| out.mask.data[i] != ((7..15).contains(&(i % w)) && (5..13).contains(&(i / w))) as u8)
        .count();
    let box_ok = trace_nonincreasing(&out.energy_trace);
    check(
        bad == 0 && box_ok && mislabeled == 0,
        format!("{bad}/20 random traces increased, box trace ok {box_ok}, box mislabeled {mislabeled}"),
    )
}

fn spot_values() -> Outcome {
    let mu = Vector3::new(0.3, 0.5, 0.7);
    let z = [0.3, 0.5, 0.7];
    let model = |pi: f64, s: f64| {
        let m = Mixture::new(vec![Gaussian::new(pi, mu, Matrix3::identity() * s).unwrap()]);
        GmmModel {
            background: m.clone(),
            foreground: m,
        }
    };
    let d1 = data_term(&z, 0, 0, &model(1.0, 1.0));
    let d2 = data_term(&z, 1, 0, &model(0.5, 0.01));
    let img = ColorImage::new(2, 1, vec![[0.4, 0.4, 0.4]; 2]).unwrap();
    let alpha = AlphaMask { width: 2, height: 1, data: vec![0, 1] };
    let v = smoothness_term(&img, &alpha, 50.0, compute_beta(&img));
    check(
        d1 == 0.0 && (d2 + 6.2146).abs() < 1e-3 && v == 50.0,
        format!("D(1, I) = {d1}, D(0.5, 0.01 I) = {d2:.5}, V = {v}"),
    )
}

/// Camera 2 relative to camera 1: 2 degrees about a skew axis, 1 cm shift.
fn ground_truth_camera() -> Pose {
    let axis = Vector3::new(0.3, 1.0, 0.2).normalize();
    let rot = Pose::exp(&Twist::new(Vector3::zeros(), axis * 2f64.to_radians()));
    Pose::new(rot.rotation, Vector3::new(0.008, -0.004, 0.0045)).unwrap()
}

fn pose_errors(est: &Pose, truth: &Pose) -> (f64, f64) {
    let d = est.compose(&truth.inverse());
    (d.rotation_angle().to_degrees(), (est.translation - truth.translation).norm())
}

fn jacobian_check() -> Outcome {
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
    let mut rng = StdRng::seed_from_u64(5);
    let h = 1e-6;
    let (mut checked, mut worst) = (0, 0.0f64);
    let c2 = ground_truth_camera();
    for scene in &scenes {
        let f1 = render(scene, &k, &Pose::identity(), 0.0, 0.0).frame;
        let f2 = render(scene, &k, &c2, 0.0, 0.0).frame;
        let p1 = PreparedFrame::new(&f1, None, 1, 0).unwrap();
        let p2 = PreparedFrame::new(&f2, None, 1, 0).unwrap();
        // away from the optimum so the residuals are nonzero
        let t = Pose::exp(&Twist::new(Vector3::new(0.002, 0.001, -0.003), Vector3::new(0.001, -0.002, 0.0)))
            .compose(&c2.inverse());
        let samples = linearize(&p1, &p2, &t, &k, 0);
        let mut n = 0;
        let mut tries = 0;
        while n < 40 && tries < 10_000 {
            tries += 1;
            let s = samples[rng.gen_range(0..samples.len())];
            let (x, y) = (s.pixel.x as usize, s.pixel.y as usize);
            let z = f1.depth.get(x, y);
            let p = t.transform_point(&Point3::new((s.pixel.x - k.ox) / k.fx * z, (s.pixel.y - k.oy) / k.fy * z, z));
            let frac = |v: f64| (v - v.round()).abs();
            // the interpolant has kinks on integer coordinates
            if frac(p.x / p.z * k.fx + k.ox) < 1e-3 || frac(p.y / p.z * k.fy + k.oy) < 1e-3 {
                continue;
            }
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
            if !ok {
                continue;
            }
            for (a, f) in [(s.j_i, fd_i), (s.j_z, fd_z)] {
                let scale = a.amax().max(f.amax()).max(1e-8);
                worst = worst.max((a - f).amax() / scale);
            }
            n += 1;
        }
        checked += n;
    }
    check(
        checked >= 100 && worst < 1e-4,
        format!("{checked} samples over 3 scenes, worst relative error {worst:.2e}"),
    )
}

fn mean_depth(depth: &[f64]) -> f64 {
    let valid: Vec<f64> = depth.iter().copied().filter(|z| *z > 0.0).collect();
    valid.iter().sum::<f64>() / valid.len() as f64
}

fn motion_recovery() -> Outcome {
    let k = default_intrinsics();
    let scene = Scene::plane_and_sphere();
    let c2 = ground_truth_camera();
    let f1 = render(&scene, &k, &Pose::identity(), 0.0, 0.0).frame;
    let f2 = render(&scene, &k, &c2, 0.1, 0.1).frame;
    let start = Instant::now();
    let r = align_frames(&f1, &f2, None, None, &k, &Pose::identity(), &AlignmentParams::default())
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let (rot, trans) = pose_errors(&r.pose, &c2.inverse());
    let bound = 0.01 * mean_depth(&f1.depth.data);
    check(
        rot < 0.5 && trans < bound && secs < 5.0,
        format!("rotation error {rot:.4} deg, translation error {trans:.5} m (bound {bound:.4} m), {secs:.2} s"),
    )
}

fn masking_improves_pose() -> Outcome {
    let k = default_intrinsics();
    let scene = Scene::plane_and_sphere().with_object(MovingBox {
        center: Point3::new(-0.3, 0.05, 1.0),
        half_extents: Vector3::new(0.23, 0.2, 0.1),
        velocity: Vector3::new(0.3, 0.1, 0.0),
        label: "person".into(),
    });
    let c2 = ground_truth_camera();
    let r1 = render(&scene, &k, &Pose::identity(), 0.0, 0.0);
    let r2 = render(&scene, &k, &c2, 0.1, 0.1);
    let fraction = r1.object_mask.count() as f64 / (k.width * k.height) as f64;
    let params = AlignmentParams::default();
    let truth = c2.inverse();
    let unmasked = align_frames(&r1.frame, &r2.frame, None, None, &k, &Pose::identity(), &params)
        .map_err(|e| e.to_string())?;
    let masked = align_frames(
        &r1.frame,
        &r2.frame,
        Some(&r1.object_mask),
        Some(&r2.object_mask),
        &k,
        &Pose::identity(),
        &params,
    )
    .map_err(|e| e.to_string())?;
    let (ur, ut) = pose_errors(&unmasked.pose, &truth);
    let (mr, mt) = pose_errors(&masked.pose, &truth);
    let bound = 0.01 * mean_depth(&r1.frame.depth.data);
    check(
        fraction >= 0.2 && mr < ur && mt < ut && mr < 0.5 && mt < bound,
        format!(
            "object covers {:.1}% of pixels; unmasked {ur:.4} deg {ut:.5} m, masked {mr:.4} deg {mt:.5} m",
            100.0 * fraction
        ),
    )
}

fn ply_positions(text: &str) -> Vec<Point3<f64>> {
    text.lines()
        .skip_while(|l| *l != "end_header")
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().take(3).map(|f| f.parse().unwrap()).collect();
            Point3::new(v[0], v[1], v[2])
        })
        .collect()
}

fn end_to_end_purity(dir: &Path) -> Outcome {
    let seq = moving_person_sequence(10);
    let paths = write_dataset(dir, &seq, 6.0).map_err(|e| e.to_string())?;
    let cfg = RawConfig::load(&paths.config)
        .and_then(|r| r.resolve())
        .map_err(|e| e.to_string())?;
    let start = Instant::now();
    let summary = run(&cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();

    let points = ply_positions(&fs::read_to_string(&cfg.out_ply).map_err(|e| e.to_string())?);
    let (lo, hi) = seq.scene.object.as_ref().unwrap().swept_bounds(&seq.times);
    let inside = points
        .iter()
        .filter(|p| (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i]))
        .count();
    let share = inside as f64 / points.len().max(1) as f64;

    let text = fs::read_to_string(&cfg.out_traj).map_err(|e| e.to_string())?;
    let mut lines = 0;
    let mut worst_norm = 0.0f64;
    for l in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let v: Vec<f64> = l.split_whitespace().map(|f| f.parse().unwrap()).collect();
        if v.len() != 8 {
            return Err(format!("trajectory line with {} fields", v.len()));
        }
        let n = (v[4] * v[4] + v[5] * v[5] + v[6] * v[6] + v[7] * v[7]).sqrt();
        worst_norm = worst_norm.max((n - 1.0).abs());
        lines += 1;
    }
    check(
        !points.is_empty() && share < 0.01 && lines == 10 && worst_norm < 1e-12 && secs < 120.0,
        format!(
            "{} points, {inside} inside the swept volume ({:.3}%), {lines} poses, max |q| - 1 = {worst_norm:.1e}, {} dynamic frames, {secs:.1} s",
            points.len(),
            100.0 * share,
            summary.frames_with_dynamic
        ),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let paths = write_dataset(dir, &moving_person_sequence(6), 6.0).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for tag in ["a", "b"] {
        let (ply, traj) = (dir.join(format!("{tag}.ply")), dir.join(format!("{tag}.txt")));
        let status = Command::new(BIN)
            .args(["run", "--config"])
            .arg(&paths.config)
            .arg("--out-ply")
            .arg(&ply)
            .arg("--out-traj")
            .arg(&traj)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("run exited with {:?}", status.status.code()));
        }
        outputs.push((fs::read(&ply).unwrap(), fs::read(&traj).unwrap()));
    }
    let same_ply = outputs[0].0 == outputs[1].0;
    let same_traj = outputs[0].1 == outputs[1].1;
    check(
        same_ply && same_traj,
        format!("PLY identical {same_ply} ({} bytes), trajectory identical {same_traj}", outputs[0].0.len()),
    )
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    let e2e = tmp.path().join("e2e");
    let det = tmp.path().join("det");
    let criteria: Vec<Criterion> = vec![
        ("geometry round trips", Box::new(geometry_round_trips)),
        ("min-cut optimality", Box::new(min_cut_optimality)),
        ("GrabCut energy traces", Box::new(grabcut_traces)),
        ("data and smoothness spot values", Box::new(spot_values)),
        ("Jacobian vs finite differences", Box::new(jacobian_check)),
        ("synthetic motion recovery", Box::new(motion_recovery)),
        ("dynamic masking improves pose", Box::new(masking_improves_pose)),
        ("end-to-end static purity", Box::new(move || end_to_end_purity(&e2e))),
        ("determinism", Box::new(move || determinism(&det))),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(d) => println!("criterion {}: PASS {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {d}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
