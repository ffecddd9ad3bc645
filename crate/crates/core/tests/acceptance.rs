//! End-to-end acceptance checks. Each criterion prints one `PASS`/`FAIL`
//! line; the test fails if any criterion does.
//!
//! The benchmarks run at a reduced problem size so the suite fits a single
//! core: translation at 96² with 500 splats, bending at 64² with 1000 splats
//! and a 120-vertex cage. Both keep the full 2000-iteration budget.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::io::Write;
use std::time::Instant;

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchcage_core::anim::{face_rotation_angle, global_rotation, interpolate, InterpMethod, Keyframe};
use sketchcage_core::bench::{ablation, ablation_csv, fixture, run_fixture, BenchScale, Benchmark};
use sketchcage_core::cage::{CageMesh, DeformedCage};
use sketchcage_core::deform::{transport, transport_with_normals, DeformedSplats};
use sketchcage_core::green::{compute_tables, evaluate_jacobian, evaluate_map};
use sketchcage_core::guidance::MockGuidance;
use sketchcage_core::jacobian::{build_poisson, solve_cage, DeformParams, JacobianParams, Parameterization};
use sketchcage_core::optim::{ema, run, total_gradient, DeformJob, DeformSetup, OptimConfig, RunControl};
use sketchcage_core::raster::{render_color, render_silhouette, Appearance, CameraView, Frame, SplatsRef};
use sketchcage_core::splat::{Splat, SplatCloud};

struct Outcome {
    pass: bool,
    detail: String,
    /// Computed values, compared bit for bit across repeated runs.
    fingerprint: Vec<f64>,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(r: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::new(r.random_range(-s..s), r.random_range(-s..s), r.random_range(-s..s))
}

fn in_ball(r: &mut ChaCha8Rng, radius: f64) -> Vector3<f64> {
    loop {
        let p = rand_vec(r, radius);
        if p.norm() < radius {
            return p;
        }
    }
}

/// Midpoint-rule quadrature of the single- and double-layer potentials, each
/// face split into `k`² congruent sub-triangles.
fn quadrature(cage: &CageMesh, eta: &Vector3<f64>, k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut phi = vec![0.0; cage.vertices.len()];
    let mut psi = vec![0.0; cage.faces.len()];
    for (t, f) in cage.faces.iter().enumerate() {
        let [a, b, c] = f.map(|i| cage.vertices[i]);
        let cross = (b - a).cross(&(c - a));
        let n = cross.normalize();
        let da = 0.5 * cross.norm() / (k * k) as f64;
        for i in 0..k {
            for j in 0..k - i {
                let mut centres = vec![(i as f64 + 1.0 / 3.0, j as f64 + 1.0 / 3.0)];
                if i + j + 1 < k {
                    centres.push((i as f64 + 2.0 / 3.0, j as f64 + 2.0 / 3.0));
                }
                for (u, v) in centres {
                    let (l1, l2) = (u / k as f64, v / k as f64);
                    let l0 = 1.0 - l1 - l2;
                    let d = a * l0 + b * l1 + c * l2 - eta;
                    let r = d.norm();
                    psi[t] += da / (4.0 * PI * r);
                    let w = da * n.dot(&d) / (4.0 * PI * r.powi(3));
                    phi[f[0]] += l0 * w;
                    phi[f[1]] += l1 * w;
                    phi[f[2]] += l2 * w;
                }
            }
        }
    }
    (phi, psi)
}

fn green_reproduction() -> Outcome {
    let t0 = Instant::now();
    let cage = CageMesh::icosphere(Vector3::zeros(), 1.0, 3);
    let mut r = rng(1);
    let pts: Vec<Vector3<f64>> = (0..100).map(|_| in_ball(&mut r, 0.8)).collect();
    let tables = compute_tables(&cage, &pts).unwrap();
    let mapped = evaluate_map(&tables, &DeformedCage::rest(&cage)).unwrap();
    let diag = cage.bbox_diag();
    let repro = mapped.iter().zip(&pts).map(|(m, p)| (m - p).norm()).fold(0.0, f64::max) / diag;
    let pou = (0..pts.len())
        .map(|i| (tables.phi_row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let mut quad = 0.0f64;
    for (i, p) in pts.iter().enumerate() {
        let (qphi, qpsi) = quadrature(&cage, p, 6);
        let row = tables.phi_row(i).iter().zip(&qphi).chain(tables.psi_row(i).iter().zip(&qpsi));
        quad = row.fold(quad, |m, (a, b)| m.max((a - b).abs()));
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        pass: cage.vertices.len() == 642 && repro <= 1e-4 && pou <= 1e-4 && quad <= 1e-3 && secs < 30.0,
        detail: format!(
            "642-vertex icosphere, 100 points: reproduction {repro:.2e}·diag, unity {pou:.2e}, quadrature {quad:.2e}, {secs:.1} s"
        ),
        fingerprint: mapped.iter().flat_map(|m| m.iter().copied()).chain([pou, quad]).collect(),
    }
}

fn jacobian_correctness() -> Outcome {
    let cage = CageMesh::icosphere(Vector3::zeros(), 1.0, 2);
    let mut r = rng(2);
    let def = DeformedCage {
        vertices: cage.vertices.iter().map(|v| v * 1.2 + rand_vec(&mut r, 0.08)).collect(),
    };
    let h = 1e-5;
    let pts: Vec<Vector3<f64>> = (0..50).map(|_| in_ball(&mut r, 0.7)).collect();
    let mut probe = pts.clone();
    for p in &pts {
        for axis in 0..3 {
            let mut e = Vector3::zeros();
            e[axis] = h;
            probe.push(p + e);
            probe.push(p - e);
        }
    }
    let tables = compute_tables(&cage, &probe).unwrap();
    let jac = evaluate_jacobian(&tables, &def).unwrap();
    let mapped = evaluate_map(&tables, &def).unwrap();
    let mut worst = 0.0f64;
    for i in 0..pts.len() {
        let mut fd = Matrix3::zeros();
        for axis in 0..3 {
            let k = pts.len() + 6 * i + 2 * axis;
            fd.set_column(axis, &((mapped[k] - mapped[k + 1]) / (2.0 * h)));
        }
        worst = worst.max((jac[i] - fd).norm() / fd.norm());
    }
    let rest = evaluate_jacobian(&tables, &DeformedCage::rest(&cage)).unwrap();
    let rest_err = rest.iter().map(|j| (j - Matrix3::identity()).norm()).fold(0.0, f64::max);
    Outcome {
        pass: worst <= 1e-3 && rest_err <= 1e-3,
        detail: format!("50 points: FD relative {worst:.2e}, rest |J − I| {rest_err:.2e}"),
        fingerprint: jac.iter().take(50).flat_map(|j| j.iter().copied()).collect(),
    }
}

fn poisson_round_trip() -> Outcome {
    let cage = CageMesh::icosphere(Vector3::new(0.2, -0.1, 0.3), 1.0, 2);
    let sys = build_poisson(&cage).unwrap();
    let mut r = rng(3);
    let target: Vec<Vector3<f64>> = cage.vertices.iter().map(|v| v * 1.3 + rand_vec(&mut r, 0.05)).collect();
    let solved = solve_cage(&sys, &sys.face_jacobians(&target)).unwrap();
    let shift = target.iter().sum::<Vector3<f64>>() / target.len() as f64
        - solved.vertices.iter().sum::<Vector3<f64>>() / target.len() as f64;
    let trip = solved.vertices.iter().zip(&target).map(|(a, b)| (a + shift - b).norm()).fold(0.0, f64::max);
    let c = sys.rest_mean();
    let rot = Rotation3::from_euler_angles(0.4, -0.3, 1.1).into_inner();
    let mut field = 0.0f64;
    let mut fp: Vec<f64> = solved.vertices.iter().flat_map(|v| v.iter().copied()).collect();
    for a in [rot, Matrix3::identity() * 1.7] {
        let out = solve_cage(&sys, &vec![a; sys.num_faces()]).unwrap();
        for (p, q) in out.vertices.iter().zip(&cage.vertices) {
            field = field.max((p - (c + a * (q - c))).norm());
        }
        fp.extend(out.vertices.iter().flat_map(|v| v.iter().copied()));
    }
    Outcome {
        pass: trip <= 1e-8 && field <= 1e-6,
        detail: format!("162-vertex cage: recovery {trip:.2e}, rotation/scale fields {field:.2e}"),
        fingerprint: fp,
    }
}

fn random_cloud(n: usize, radius: f64, seed: u64) -> SplatCloud {
    let mut r = rng(seed);
    let splats = (0..n)
        .map(|_| Splat {
            mu: in_ball(&mut r, radius),
            scale: Vector3::new(r.random_range(0.02..0.08), r.random_range(0.02..0.08), r.random_range(0.02..0.08)),
            rot: UnitQuaternion::from_euler_angles(r.random(), r.random(), r.random()),
            opacity: r.random_range(0.5..0.95),
            color: Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)),
        })
        .collect();
    SplatCloud::new(splats)
}

fn psnr(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>() / (3 * a.len()) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

fn covariance_transport() -> Outcome {
    let cage = CageMesh::icosphere(Vector3::zeros(), 1.0, 2);
    let cloud = random_cloud(400, 0.75, 4);
    let covs = cloud.covariances();
    let tables = compute_tables(&cage, &cloud.centroids()).unwrap();
    let a = Rotation3::from_euler_angles(0.3, 0.9, -0.5).into_inner()
        * Matrix3::new(1.3, 0.2, 0.0, 0.0, 0.8, 0.1, 0.0, 0.0, 1.1);
    let t = Vector3::new(0.4, -0.2, 0.7);
    let verts: Vec<Vector3<f64>> = cage.vertices.iter().map(|v| a * v + t).collect();
    // the affine map's normal derivative on each face is A·n
    let normals: Vec<Vector3<f64>> = cage.face_normals.iter().map(|n| a * n).collect();
    let moved = transport_with_normals(&covs, &tables, &verts, &normals);
    let rel_err = |d: &DeformedSplats| {
        let mut worst = 0.0f64;
        for (i, s) in cloud.splats.iter().enumerate() {
            let want = a * covs[i] * a.transpose();
            worst = worst.max((d.sigma_prime[i] - want).norm() / want.norm());
            worst = worst.max((d.mu_prime[i] - (a * s.mu + t)).norm() / (a * s.mu + t).norm().max(1.0));
        }
        worst
    };
    let worst = rel_err(&moved);
    // for reference: the scaled deformed normals only reproduce similarities
    let vertex_only = rel_err(&transport(&covs, &tables, &DeformedCage { vertices: verts }).unwrap());

    let rest = transport(&covs, &tables, &DeformedCage::rest(&cage)).unwrap();
    let look = Appearance::of(&cloud);
    let view = CameraView::framing(Vector3::zeros(), 1.0, 0.7, 512, 512).with_angles(15.0, 30.0);
    let bg = Vector3::repeat(1.0);
    let direct = render_color(SplatsRef::new(&DeformedSplats::from_cloud(&cloud), &look), &view, bg).unwrap();
    let through = render_color(SplatsRef::new(&rest, &look), &view, bg).unwrap();
    let db = psnr(&direct.pixels, &through.pixels);
    Outcome {
        pass: worst <= 1e-2 && db >= 40.0,
        detail: format!(
            "400 splats: affine relative error {worst:.2e} (deformed-normal convention {vertex_only:.2e}), identity PSNR {db:.1} dB at 512²"
        ),
        fingerprint: moved.sigma_prime.iter().flat_map(|m| m.iter().copied()).chain(through.pixels.iter().map(|p| p.sum())).collect(),
    }
}

struct Owned {
    mu: Vec<Vector3<f64>>,
    sigma: Vec<Matrix3<f64>>,
    opacity: Vec<f64>,
    rgb: Vec<Vector3<f64>>,
}

impl Owned {
    fn r(&self) -> SplatsRef<'_> {
        SplatsRef {
            mu: &self.mu,
            sigma: &self.sigma,
            opacity: &self.opacity,
            rgb: &self.rgb,
        }
    }
}

fn rasterizer_adjoint() -> Outcome {
    let mut r = rng(5);
    let view = CameraView {
        width: 32,
        height: 32,
        radius: 3.0,
        ..CameraView::default()
    }
    .with_angles(20.0, 35.0);
    let mut o = Owned {
        mu: (0..10).map(|_| rand_vec(&mut r, 0.4)).collect(),
        sigma: (0..10)
            .map(|_| {
                let m = Matrix3::from_fn(|_, _| r.random_range(-0.15..0.15));
                m * m.transpose() + Matrix3::identity() * 0.01
            })
            .collect(),
        opacity: (0..10).map(|_| r.random_range(0.3..0.9)).collect(),
        rgb: (0..10).map(|_| Vector3::new(r.random(), r.random(), r.random())).collect(),
    };
    let bg = Vector3::new(0.3, 0.6, 0.9);
    let ga: Vec<f64> = (0..32 * 32).map(|_| r.random_range(-1.0..1.0)).collect();
    let gc: Vec<Vector3<f64>> = (0..32 * 32).map(|_| rand_vec(&mut r, 1.0)).collect();
    let loss = |o: &Owned| -> f64 {
        let (a, c) = Frame::new(o.r(), &view).unwrap().render(o.r(), bg);
        a.pixels.iter().zip(&ga).map(|(x, y)| x * y).sum::<f64>()
            + c.pixels.iter().zip(&gc).map(|(x, y)| x.dot(y)).sum::<f64>()
    };
    let (gm, gs) = Frame::new(o.r(), &view).unwrap().adjoint(o.r(), bg, Some(&ga), Some(&gc));
    let scale = gm.iter().map(|g| g.amax()).chain(gs.iter().map(|g| g.amax())).fold(0.0, f64::max);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut rel = |fd: f64, an: f64| {
        worst = worst.max((fd - an).abs() / fd.abs().max(1e-3 * scale));
    };
    for i in 0..10 {
        for a in 0..3 {
            let orig = o.mu[i][a];
            o.mu[i][a] = orig + h;
            let lp = loss(&o);
            o.mu[i][a] = orig - h;
            let lm = loss(&o);
            o.mu[i][a] = orig;
            rel((lp - lm) / (2.0 * h), gm[i][a]);
        }
        for (p, q) in [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)] {
            let orig = o.sigma[i];
            let bump = |s: f64| {
                let mut m = orig;
                m[(p, q)] += s;
                if p != q {
                    m[(q, p)] += s;
                }
                m
            };
            o.sigma[i] = bump(h);
            let lp = loss(&o);
            o.sigma[i] = bump(-h);
            let lm = loss(&o);
            o.sigma[i] = orig;
            let an = if p == q { gs[i][(p, q)] } else { gs[i][(p, q)] + gs[i][(q, p)] };
            rel((lp - lm) / (2.0 * h), an);
        }
    }

    // one isotropic splat at the look-at point: screen std is f·s/r
    let s = 0.1;
    let single = Owned {
        mu: vec![Vector3::zeros()],
        sigma: vec![Matrix3::identity() * s * s],
        opacity: vec![1.0],
        rgb: vec![Vector3::x()],
    };
    let view = CameraView {
        width: 33,
        height: 33,
        radius: 3.0,
        ..CameraView::default()
    };
    let mask = render_silhouette(single.r(), &view).unwrap();
    let sd = view.focal() * s / view.radius;
    let mut footprint = 0.0f64;
    for y in 0..33 {
        for x in 0..33 {
            let d2 = ((x as f64 + 0.5 - 16.5).powi(2) + (y as f64 + 0.5 - 16.5).powi(2)) / (sd * sd);
            if d2 < 9.0 {
                footprint = footprint.max((mask.get(x, y) - (-0.5 * d2).exp()).abs());
            }
        }
    }
    Outcome {
        pass: worst <= 2e-3 && footprint <= 1e-3,
        detail: format!("32×32, 10 splats: FD relative {worst:.2e}; single-splat footprint {footprint:.2e}"),
        fingerprint: gm.iter().flat_map(|g| g.iter().copied()).chain(mask.pixels.iter().copied()).collect(),
    }
}

fn small_setup() -> (DeformSetup, CameraView) {
    let cage = CageMesh::icosphere(Vector3::zeros(), 1.0, 0);
    let mut r = rng(9);
    let splats: Vec<Splat> = (0..5)
        .map(|_| Splat::isotropic(rand_vec(&mut r, 0.4), 0.15, 0.7, Vector3::new(0.5, -0.3, 0.2)))
        .collect();
    let view = CameraView {
        width: 16,
        height: 16,
        radius: 3.0,
        ..CameraView::default()
    };
    (DeformSetup::new(&SplatCloud::new(splats), cage).unwrap(), view)
}

fn end_to_end_gradient() -> Outcome {
    let (setup, view) = small_setup();
    let mut r = rng(11);
    let mut moved = DeformParams::identity(Parameterization::Decomposed, &setup.system);
    for v in &mut moved.values {
        *v += r.random_range(-0.05..0.05);
    }
    let target = setup.render_silhouette(&setup.deform(&moved).unwrap().1, &view).unwrap();
    let mut params = DeformParams::identity(Parameterization::Decomposed, &setup.system);
    for v in &mut params.values {
        *v += r.random_range(-0.02..0.02);
    }
    let job = DeformJob {
        sketch_view: view,
        target_mask: target,
        config: OptimConfig {
            num_random_views: 0,
            ..OptimConfig::default()
        },
    };
    let eval = total_gradient(&setup, &job, &params, 0, None).unwrap();
    let loss = |p: &DeformParams| total_gradient(&setup, &job, p, 0, None).unwrap().l_total;
    let scale = eval.grad.iter().map(|g| g.abs()).fold(0.0, f64::max);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for k in 0..params.values.len() {
        let mut a = params.clone();
        a.values[k] += h;
        let mut b = params.clone();
        b.values[k] -= h;
        let fd = (loss(&a) - loss(&b)) / (2.0 * h);
        worst = worst.max((fd - eval.grad[k]).abs() / fd.abs().max(1e-3 * scale));
    }
    Outcome {
        pass: setup.cage.vertices.len() == 12 && worst <= 2e-3,
        detail: format!("12-vertex cage, 5 splats, 16×16, {} parameters: FD relative {worst:.2e}", params.values.len()),
        fingerprint: eval.grad.clone(),
    }
}

fn translation_recovery() -> (Outcome, Vec<f64>) {
    let t0 = Instant::now();
    let scale = BenchScale::reduced(Benchmark::Translation);
    let fx = fixture(Benchmark::Translation, &scale, 0).unwrap();
    let (row, res) = run_fixture(&fx, Parameterization::Decomposed, 0, scale.iterations, Some(&MockGuidance::default())).unwrap();
    let totals: Vec<f64> = res.history.iter().map(|h| h.l_total).collect();
    let secs = t0.elapsed().as_secs_f64();
    let out = Outcome {
        pass: row.iou > 0.95,
        detail: format!(
            "{}² / {} splats / {} iterations, 4 mock views: IoU {:.4}, L_sil {:.3e} → {:.3e}, {secs:.0} s",
            scale.image, scale.splats, scale.iterations, row.iou, row.initial_l_sil, row.final_l_sil
        ),
        fingerprint: vec![row.final_l_sil, row.iou],
    };
    (out, totals)
}

fn ema_trend(totals: &[f64]) -> Outcome {
    let e = ema(totals, 50);
    let rises = e.windows(2).filter(|w| w[1] > w[0]).count();
    let worst = e.windows(2).map(|w| (w[1] - w[0]) / w[0].abs().max(1e-12)).fold(0.0, f64::max);
    Outcome {
        pass: rises == 0,
        detail: format!("translation run: {rises} increases of the window-50 EMA (largest {worst:.2e} relative)"),
        fingerprint: e,
    }
}

fn bending_scale() -> BenchScale {
    BenchScale {
        splats: 1000,
        image: 64,
        cage_resolution: 40,
        cage_vertices: 120,
        iterations: 2000,
    }
}

fn bending_and_ablation() -> (Outcome, Outcome) {
    let t0 = Instant::now();
    let modes = [Parameterization::Decomposed, Parameterization::Jacobian, Parameterization::Vertices];
    let seeds = [0, 1, 2];
    let rows = ablation(Benchmark::Bending, &modes, &seeds, &bending_scale()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    print!("{}", ablation_csv(&rows));
    let pick = |m: Parameterization| -> Vec<_> { rows.iter().filter(|r| r.param == m).collect() };
    let (dec, jac, vert) = (pick(modes[0]), pick(modes[1]), pick(modes[2]));
    let mean = |v: &[&sketchcage_core::bench::AblationRow]| v.iter().map(|r| r.final_l_sil).sum::<f64>() / v.len() as f64;
    let per_seed = dec.iter().zip(&jac).all(|(d, j)| d.final_l_sil <= j.final_l_sil);
    let flips = vert.iter().map(|r| r.max_flipped_faces).max().unwrap_or(0);
    let min_iou = dec.iter().map(|r| r.iou).fold(1.0, f64::min);
    let bending = Outcome {
        pass: min_iou > 0.85,
        detail: format!("64² / 1000 splats / 120-vertex cage, decomposed, 3 seeds: min IoU {min_iou:.4}"),
        fingerprint: dec.iter().map(|r| r.iou).collect(),
    };
    let ablation = Outcome {
        pass: mean(&dec) <= mean(&jac) && per_seed && flips > 0,
        detail: format!(
            "mean final L_sil decomposed {:.3e} ≤ jacobian {:.3e} (vertices {:.3e}); per seed {}; vertex mode flips up to {flips} faces; {secs:.0} s",
            mean(&dec),
            mean(&jac),
            mean(&vert),
            if per_seed { "holds" } else { "fails" }
        ),
        fingerprint: rows.iter().map(|r| r.final_l_sil).collect(),
    };
    (bending, ablation)
}

fn animation() -> Outcome {
    let sys = build_poisson(&CageMesh::icosphere(Vector3::new(0.1, 0.0, -0.2), 1.0, 2)).unwrap();
    let mut r = rng(12);
    let mut p = JacobianParams::identity(sys.num_faces());
    for (rot, st) in p.rot6.iter_mut().zip(&mut p.stretch6) {
        for v in rot.iter_mut().chain(st.iter_mut()) {
            *v += r.random_range(-0.1..0.1);
        }
    }
    p.translation = [0.3, -0.1, 0.2];
    let key = |t: f64, p: &JacobianParams| Keyframe::new(t, &DeformParams::from_jacobian_params(p), &sys, "k").unwrap();
    let k0 = key(0.0, &JacobianParams::identity(sys.num_faces()));
    let k1 = key(1.0, &p);
    let e0 = interpolate(&k0, &k1, 0.0, &sys, InterpMethod::Jacobian).unwrap();
    let e1 = interpolate(&k0, &k1, 1.0, &sys, InterpMethod::Jacobian).unwrap();
    let ends = e0.max_abs_diff(&k0.cage_def).max(e1.max_abs_diff(&k1.cage_def));

    let axis = Vector3::new(0.2, 1.0, 0.4);
    let k90 = key(1.0, &global_rotation(&sys, &axis, FRAC_PI_2));
    let mid = interpolate(&k0, &k90, 0.5, &sys, InterpMethod::Jacobian).unwrap();
    let r45 = Rotation3::from_axis_angle(&Unit::new_normalize(axis), FRAC_PI_4);
    let c = sys.rest_mean();
    let vert_err = mid
        .vertices
        .iter()
        .zip(&sys.rest_vertices)
        .map(|(v, q)| (v - (c + r45 * (q - c))).norm())
        .fold(0.0, f64::max);
    let mid_params = sketchcage_core::anim::interpolate_params(&k0, &k90, 0.5).unwrap();
    let angle_err = (0..sys.num_faces())
        .map(|i| (face_rotation_angle(&k0.params, &mid_params, i) - FRAC_PI_4).abs())
        .fold(0.0, f64::max);
    Outcome {
        pass: ends <= 1e-8 && vert_err <= 1e-4 && angle_err <= 1e-4,
        detail: format!("endpoints {ends:.2e}; 90° midpoint: vertices {vert_err:.2e} from 45°, face angles {angle_err:.2e}"),
        fingerprint: mid.vertices.iter().flat_map(|v| v.iter().copied()).collect(),
    }
}

/// Short optimizations whose loss histories are compared across runs.
fn short_runs() -> Vec<f64> {
    let mut out = Vec::new();
    let scale = BenchScale {
        iterations: 60,
        ..BenchScale::reduced(Benchmark::Translation)
    };
    let fx = fixture(Benchmark::Translation, &scale, 3).unwrap();
    let (_, res) = run_fixture(&fx, Parameterization::Decomposed, 3, 60, Some(&MockGuidance::default())).unwrap();
    out.extend(res.history.iter().flat_map(|h| [h.l_sil, h.l_guidance, h.l_total]));
    out.extend(res.params.values);

    let fx = fixture(Benchmark::Bending, &BenchScale { iterations: 40, ..bending_scale() }, 1).unwrap();
    let job = DeformJob {
        sketch_view: fx.view,
        target_mask: fx.target.clone(),
        config: OptimConfig {
            iterations: 40,
            seed: 1,
            parameterization: Parameterization::Vertices,
            ..OptimConfig::default()
        },
    };
    let res = run(&fx.setup, &job, Some(&MockGuidance::default()), RunControl::default()).unwrap();
    out.extend(res.history.iter().map(|h| h.l_total));
    out.extend(res.final_mask.pixels);
    out
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Writes straight to the stdout handle so the lines survive libtest's capture.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

#[test]
fn primary_acceptance_criteria() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    fn record(results: &mut Vec<(&'static str, Outcome)>, name: &'static str, o: Outcome) {
        report(&format!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail));
        results.push((name, o));
    }
    let cheap: [(&'static str, fn() -> Outcome); 7] = [
        ("green-coordinate reproduction", green_reproduction),
        ("jacobian correctness", jacobian_correctness),
        ("poisson round trip", poisson_round_trip),
        ("covariance transport", covariance_transport),
        ("rasterizer adjoint", rasterizer_adjoint),
        ("end-to-end gradient", end_to_end_gradient),
        ("animation", animation),
    ];
    for (name, f) in cheap {
        record(&mut results, name, f());
    }
    let (translation, totals) = translation_recovery();
    record(&mut results, "translation recovery", translation);
    // an optimizer invariant rather than an acceptance criterion: reported, not gating
    let trend = ema_trend(&totals);
    report(&format!("{} (invariant) loss trend: {}", if trend.pass { "PASS" } else { "FAIL" }, trend.detail));
    let (bending, abl) = bending_and_ablation();
    record(&mut results, "bending recovery", bending);
    record(&mut results, "ablation ordering", abl);

    let mut mismatched: Vec<&str> = cheap
        .iter()
        .filter(|(name, f)| {
            let first = results.iter().find(|(n, _)| n == name).unwrap();
            !same_bits(&first.1.fingerprint, &f().fingerprint)
        })
        .map(|(n, _)| *n)
        .collect();
    if !same_bits(&short_runs(), &short_runs()) {
        mismatched.push("optimization histories");
    }
    record(
        &mut results,
        "determinism",
        Outcome {
            pass: mismatched.is_empty(),
            detail: if mismatched.is_empty() {
                format!("{} checks and two seeded optimizations repeat bit for bit", cheap.len())
            } else {
                format!("differs: {}", mismatched.join(", "))
            },
            fingerprint: vec![],
        },
    );

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

