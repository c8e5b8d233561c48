//! Acceptance criteria A1–A8. Each test prints one `A<n> PASS|FAIL` line.
//!
//! A1, A5 and A7 train on 100 frames each and take from several minutes to
//! tens of minutes on one core; they are ignored by default:
//! `cargo test --release -p neural-esdf --test acceptance -- --ignored --nocapture`.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::OnceLock;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use neural_esdf::app::{self, CameraSpec, RunConfig, RunSummary, Source};
use neural_esdf::evalout::{sample_region, sdf_error, EvalRegion};
use neural_esdf::fusion::{capture_distance, fuse_point, point_weight, FusionConfig, GridCell, GridStore, SurfaceSet};
use neural_esdf::mlpfield::{forward_with_gradient, load_checkpoint, EmbeddingConfig, FieldParams, NetworkConfig};
use neural_esdf::sampling::{
    block_irregularity, normal_render, pixel_normals, sample_pixels, sample_points, SampleKind, SamplingConfig,
};
use neural_esdf::scene::{DepthFrame, Scene, TrajectoryPolicy};
use neural_esdf::trainer::{
    batch_gradients, eik_loss, grad_loss, sdf_loss, total_loss, GridSource, LossConfig, Pipeline, TrainBatch, TrainItem,
};

fn report(id: &str, ok: bool, detail: String) {
    println!("{id} {}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{id}: {detail}");
}

fn synthetic(cfg: &mut RunConfig) -> &mut app::SyntheticSource {
    match &mut cfg.source {
        Source::Synthetic(s) => s,
        Source::Dataset(_) => unreachable!("default source is synthetic"),
    }
}

fn render(cfg: &RunConfig) -> Vec<DepthFrame> {
    cfg.frames().unwrap().collect::<Result<_, _>>().unwrap()
}

struct RoomRun {
    summary: RunSummary,
    out: PathBuf,
}

// The full-size room run, shared by A1 and A7.
fn room_run() -> &'static RoomRun {
    static RUN: OnceLock<RoomRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let out = tempfile::tempdir().unwrap().keep();
        let mut cfg = RunConfig::with_seed(1);
        cfg.out = Some(out.clone());
        let summary = app::run(&cfg).unwrap();
        RoomRun { summary, out }
    })
}

#[test]
#[ignore = "trains the full network on 100 frames; run with --ignored"]
fn a1_room_convergence() {
    let run = room_run();
    let m = run.summary.final_metrics().unwrap();
    let completion = m.mesh_completion_m.unwrap_or(f64::INFINITY);
    report(
        "A1",
        m.sdf_error_m <= 0.05 && completion <= 0.10,
        format!(
            "sdf error {:.4} m (<= 0.05), mesh completion {:.4} m (<= 0.10) after {} frames",
            m.sdf_error_m, completion, run.summary.frames
        ),
    );
}

#[test]
#[ignore = "trains the full network on 100 frames; run with --ignored"]
fn a7_eikonal_after_room_run() {
    let run = room_run();
    let params: FieldParams<f32> = load_checkpoint(&app::checkpoint_path(&run.out, run.summary.frames)).unwrap();
    let region = &run.summary.final_metrics().unwrap().region;
    let scene = Scene::demo_room();
    let pts = sample_region(&scene, region, 10_000, 77).unwrap();
    let q: Vec<[f32; 3]> = pts.iter().map(|p| p.map(|v| v as f32)).collect();
    let (_, grads) = forward_with_gradient(&params, &q).unwrap();
    let mean = grads
        .iter()
        .map(|g| (Vector3::new(g[0] as f64, g[1] as f64, g[2] as f64).norm() - 1.0).abs())
        .sum::<f64>()
        / grads.len() as f64;
    report("A7", mean <= 0.2, format!("mean |‖∇f‖ − 1| = {mean:.4} over {} free-space points (<= 0.2)", pts.len()));
}

#[test]
fn a2_gradients_match_finite_differences() {
    let cfg = LossConfig::default();
    let net = NetworkConfig {
        hidden_layers: 2,
        width: 8,
        skip_layer: None,
        output_init_scale: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut p: FieldParams<f64> = FieldParams::init(EmbeddingConfig::default(), net, &mut rng);
    for v in p.data_mut().iter_mut() {
        if *v == 0.0 {
            *v = rng.gen_range(-0.2..0.2);
        }
    }
    let items: Vec<TrainItem> = (0..12)
        .map(|i| {
            let d = if i % 2 == 0 { rng.gen_range(-0.09..0.09) } else { rng.gen_range(0.2..1.5) };
            let g = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            TrainItem {
                center: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0)],
                distance: d,
                gradient: g.into(),
                near_surface: d.abs() < cfg.truncation,
                source: GridSource::Current,
            }
        })
        .collect();
    let batch = TrainBatch { items };
    let (loss, grads) = batch_gradients(&batch, &p, &cfg).unwrap();
    assert!(loss.grad > 0.0 && loss.eik > 0.0, "every term must contribute");
    let h = 1e-6;
    let mut worst_param: f64 = 0.0;
    for k in 0..p.len() {
        let mut a = p.clone();
        a.data_mut()[k] += h;
        let mut b = p.clone();
        b.data_mut()[k] -= h;
        let fd = (total_loss(&batch, &a, &cfg).unwrap().total - total_loss(&batch, &b, &cfg).unwrap().total) / (2.0 * h);
        let rel = (fd - grads[k]).abs() / fd.abs().max(grads[k].abs()).max(1e-6);
        worst_param = worst_param.max(rel);
    }
    let mut worst_input: f64 = 0.0;
    for it in &batch.items {
        let g = p.input_gradient(it.center).unwrap();
        for j in 0..3 {
            let (mut a, mut b) = (it.center, it.center);
            a[j] += h;
            b[j] -= h;
            let fd = (p.forward(a).unwrap() - p.forward(b).unwrap()) / (2.0 * h);
            worst_input = worst_input.max((fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-6));
        }
    }
    report(
        "A2",
        worst_param < 1e-4 && worst_input < 1e-5,
        format!(
            "{} parameters: max rel err {worst_param:.2e} (< 1e-4); input gradient max rel err {worst_input:.2e} (< 1e-5)",
            p.len()
        ),
    );
}

fn fusion_frames() -> Vec<DepthFrame> {
    let mut cfg = RunConfig::with_seed(3);
    let s = synthetic(&mut cfg);
    s.frames = 10;
    s.camera = CameraSpec {
        width: 80,
        height: 60,
        ..CameraSpec::default()
    };
    render(&cfg)
}

#[test]
fn a3_fusion_matches_oracle() {
    let scfg = SamplingConfig::default();
    let fcfg = FusionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = GridStore::from_config(&fcfg);
    let mut oracle: HashMap<[i64; 3], (f64, f64)> = HashMap::new();
    let mut max_surface = 0;
    let mut captures = 0;
    for frame in fusion_frames() {
        let normals = pixel_normals(&frame);
        let xi = block_irregularity(&frame, &normal_render(&frame), &scfg);
        let sel = sample_pixels(&frame, &xi, &scfg, &mut rng).unwrap();
        let rays: Vec<_> = sel.pixels.iter().map(|&px| sample_points(px, &frame, &scfg, &mut rng).unwrap()).collect();
        let w = frame.width();
        let surface = SurfaceSet::from_rays(&rays, |(u, v)| normals[w * v + u]);
        max_surface = max_surface.max(surface.len());
        neural_esdf::fusion::integrate_frame(&mut store, &rays, &surface, &fcfg, frame.index).unwrap();

        for (r, ray) in rays.iter().enumerate() {
            let n = surface.normals()[r];
            for s in &ray.samples {
                let d = if s.kind == SampleKind::Surface {
                    0.0
                } else {
                    let nearest = surface
                        .points()
                        .iter()
                        .map(|x| (s.point - x).norm_squared())
                        .fold(f64::INFINITY, f64::min)
                        .sqrt();
                    let sign = if ray.surface_depth > s.depth { 1.0 } else { -1.0 };
                    let (got, _) = capture_distance(&s.point, s.depth, ray.surface_depth, &n, &surface).unwrap();
                    assert_eq!(got, sign * nearest, "capture distance differs from exhaustive scan");
                    captures += 1;
                    got
                };
                let weight = (-fcfg.decay * d.abs()).exp().max(fcfg.min_weight);
                let rel = (s.point - Point3::from(fcfg.origin)) / fcfg.resolution;
                let idx = [rel.x.floor() as i64, rel.y.floor() as i64, rel.z.floor() as i64];
                let (dist, wt) = oracle.entry(idx).or_insert((0.0, 0.0));
                *dist = (*wt * *dist + weight * d) / (*wt + weight);
                *wt = (*wt + weight).min(fcfg.max_weight);
            }
        }
    }
    assert_eq!(oracle.len(), store.len());
    let mut worst: f64 = 0.0;
    for (idx, (d, w)) in &oracle {
        let cell = store.get(idx).expect("oracle cell missing from store");
        worst = worst.max((cell.distance - d).abs()).max((cell.weight - w).abs());
    }

    let mut prng = ChaCha8Rng::seed_from_u64(6);
    let mut cell = GridCell::default();
    let (mut monotone, mut convex) = (true, true);
    for _ in 0..10_000 {
        let d = prng.gen_range(-2.0..2.0);
        let w = point_weight(prng.gen_range(-0.3..0.3), &fcfg);
        let g = Vector3::new(prng.gen_range(-1.0..1.0), prng.gen_range(-1.0..1.0), prng.gen_range(-1.0..1.0));
        let next = fuse_point(&cell, d, w, &g, fcfg.max_weight);
        monotone &= next.weight >= cell.weight && next.weight <= fcfg.max_weight;
        if cell.weight > 0.0 {
            let (lo, hi) = (cell.distance.min(d), cell.distance.max(d));
            convex &= next.distance >= lo - 1e-12 && next.distance <= hi + 1e-12;
        }
        cell = next;
        if prng.gen_bool(0.01) {
            cell = GridCell::default();
        }
    }
    report(
        "A3",
        worst <= 1e-9 && monotone && convex && max_surface <= 200,
        format!(
            "{captures} captures equal the exhaustive scan; {} cells, max |ΔD|,|ΔW| {worst:.1e} (<= 1e-9); \
             W monotone/clamped {monotone}, D convex {convex} over 1e4 updates",
            oracle.len()
        ),
    );
}

#[test]
fn a4_sampling_distribution() {
    let scfg = SamplingConfig::default();
    let mut cfg = RunConfig::with_seed(4);
    let s = synthetic(&mut cfg);
    s.frames = 1000;
    s.camera = CameraSpec {
        width: 64,
        height: 48,
        ..CameraSpec::default()
    };
    s.trajectory = TrajectoryPolicy::Orbit {
        center: [0.0, 0.0, 1.5],
        radius: 1.6,
        height: 0.0,
        start_deg: 0.0,
        sweep_deg: 360.0 * 7.0,
        target: Some([0.0, 0.0, 0.8]),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut observed = [0.0f64; 64];
    let mut expected = [0.0f64; 64];
    let mut sums_exact = true;
    let mut frames = 0;
    for frame in cfg.frames().unwrap() {
        let frame = frame.unwrap();
        let xi = block_irregularity(&frame, &normal_render(&frame), &scfg);
        let total: f64 = xi.iter().sum();
        let sel = sample_pixels(&frame, &xi, &scfg, &mut rng).unwrap();
        sums_exact &= sel.block_counts.iter().sum::<usize>() == scfg.pixels_per_frame
            && sel.pixels.len() == scfg.pixels_per_frame;
        for &(u, v) in &sel.pixels {
            observed[(v / 6) * 8 + u / 8] += 1.0;
        }
        for b in 0..64 {
            expected[b] += scfg.pixels_per_frame as f64 * xi[b] / total;
        }
        frames += 1;
    }
    let cells: Vec<usize> = (0..64).filter(|&b| expected[b] > 0.0).collect();
    let chi2: f64 = cells.iter().map(|&b| (observed[b] - expected[b]).powi(2) / expected[b]).sum();
    let dof = (cells.len() - 1) as f64;
    let p_value = 1.0 - ChiSquared::new(dof).unwrap().cdf(chi2);

    let frame = fusion_frames().remove(0);
    let mut hot = vec![0.0; 64];
    hot[27] = 1.0;
    let sel = sample_pixels(&frame, &hot, &scfg, &mut rng).unwrap();
    let bw = frame.width() / 8;
    let bh = frame.height() / 8;
    let routed = sel.pixels.len() == scfg.pixels_per_frame
        && sel.pixels.iter().all(|&(u, v)| (v / bh) * 8 + u / bw == 27)
        && sel.block_counts[27] == scfg.pixels_per_frame;

    report(
        "A4",
        frames == 1000 && sums_exact && p_value > 0.01 && routed,
        format!(
            "ΣM_b = M on all {frames} frames: {sums_exact}; chi-square {chi2:.3} on {dof} dof, p = {p_value:.4} (> 0.01); \
             single-hot routes all pixels: {routed}"
        ),
    );
}

#[test]
#[ignore = "two 100-frame training runs; run with --ignored"]
fn a5_forgetting_resistance() {
    let (base_a, base_b) = two_phase_errors(true);
    let (abl_a, abl_b) = two_phase_errors(false);
    let (base_ratio, abl_ratio) = (base_b / base_a, abl_b / abl_a);
    report(
        "A5",
        base_ratio <= 2.0 && abl_ratio > base_ratio,
        format!(
            "region-A error with history {base_a:.4} -> {base_b:.4} m (x{base_ratio:.2}, <= 2); \
             without history {abl_a:.4} -> {abl_b:.4} m (x{abl_ratio:.2}, must exceed x{base_ratio:.2})"
        ),
    );
}

// Region-A error after phase A and after phase B. Phase A sweeps the half of
// the room at y < 0 looking down, phase B the half at y > 0. The network is
// reduced to 3 x 64 to keep the run short.
fn two_phase_errors(history: bool) -> (f64, f64) {
    let mut cfg = RunConfig::with_seed(5);
    cfg.network = NetworkConfig {
        hidden_layers: 3,
        width: 64,
        skip_layer: Some(2),
        ..NetworkConfig::default()
    };
    if !history {
        cfg = app::Ablation::NoHistoryGrids.apply(&cfg);
    }
    let phase = |y: f64| {
        let mut c = cfg.clone();
        let s = synthetic(&mut c);
        s.frames = 50;
        s.trajectory = TrajectoryPolicy::Lawnmower {
            start: [-1.2, y, 2.2],
            row_axis: [2.4, 0.0, 0.0],
            col_axis: [0.0, 0.0, 0.0],
            rows: 1,
            look_dir: [0.0, 0.0, -1.0],
        };
        render(&c)
    };
    let scene = Scene::demo_room();
    let mut pipe = Pipeline::<f32>::new(cfg.pipeline(), cfg.seed).unwrap();
    for f in phase(-1.1) {
        pipe.train_frame(&f).unwrap();
    }
    let region_a = EvalRegion::observed(pipe.store()).unwrap();
    let pts = sample_region(&scene, &region_a, 5000, 99).unwrap();
    let after_a = sdf_error(pipe.params(), &scene, &pts).unwrap();
    for (i, mut f) in phase(1.1).into_iter().enumerate() {
        f.index = 50 + i;
        pipe.train_frame(&f).unwrap();
    }
    let after_b = sdf_error(pipe.params(), &scene, &pts).unwrap();
    (after_a, after_b)
}

#[test]
fn a6_loss_unit_values() {
    let c = LossConfig::default();
    let f = FusionConfig::default();
    let g = [3.0, -4.0, 12.0];
    let cases = [
        ("sdf near, pred = D", sdf_loss(0.04, 0.04, &c), 0.0),
        ("sdf free, pred 0.6", sdf_loss(0.6, 0.5, &c), 0.1),
        ("sdf free, pred -0.1", sdf_loss(-0.1, 0.5, &c), 0.5f64.exp() - 1.0),
        ("grad parallel", grad_loss(&g.map(|v| 2.0 * v), &g), 0.0),
        ("grad orthogonal", grad_loss(&[4.0, 3.0, 0.0], &g), 1.0),
        ("grad antiparallel", grad_loss(&g.map(|v| -v), &g), 2.0),
        ("eik unit", eik_loss(&[0.0, 0.6, 0.8], 0.5, &c), 0.0),
        ("eik norm 2", eik_loss(&[0.0, 0.0, 2.0], 0.5, &c), 1.0),
        ("eik near", eik_loss(&[0.0, 0.0, 5.0], 0.05, &c), 0.0),
        ("weight d = 0.01", point_weight(0.01, &f), (-0.5f64).exp()),
    ];
    let bad: Vec<_> = cases.iter().filter(|(_, got, want)| (got - want).abs() > 1e-9).collect();
    report("A6", bad.is_empty(), format!("{} of {} values within 1e-9; off: {bad:?}", cases.len() - bad.len(), cases.len()));
}

#[test]
fn a8_determinism_f64() {
    let run_once = |dir: &std::path::Path| {
        let mut cfg = RunConfig::with_seed(8);
        cfg.f64 = true;
        cfg.out = Some(dir.to_path_buf());
        cfg.checkpoint_every = 2;
        cfg.network = NetworkConfig {
            hidden_layers: 2,
            width: 16,
            skip_layer: None,
            ..NetworkConfig::default()
        };
        cfg.loss.iterations = 3;
        cfg.eval.sdf_samples = 500;
        cfg.eval.completion_samples = 500;
        cfg.eval.mesh_resolution = 0.2;
        let s = synthetic(&mut cfg);
        s.frames = 4;
        s.camera = CameraSpec {
            width: 64,
            height: 48,
            ..CameraSpec::default()
        };
        app::run(&cfg).unwrap()
    };
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (a, b) = (run_once(da.path()), run_once(db.path()));
    let read = |dir: &std::path::Path, rel: &str| std::fs::read(dir.join(rel)).unwrap();
    let mut files = vec!["metrics.json".to_string(), "metrics_series.json".to_string()];
    for n in [2, 4] {
        files.push(format!("checkpoints/frame_{n:06}.ckpt"));
    }
    let same_files = files.iter().all(|f| read(da.path(), f) == read(db.path(), f));
    let same_series = a.series == b.series;
    report(
        "A8",
        same_files && same_series && a.checkpoints.len() == 2,
        format!("{} checkpoints and metrics bitwise identical: {same_files}; series equal: {same_series}", a.checkpoints.len()),
    );
}
