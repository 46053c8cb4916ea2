//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 9 to 11 train the desk-scale models from `configs/desk.cfg` and
//! dominate the runtime. Exit status is non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use occhuman::autodiff::{Group, Tape, Tensor};
use occhuman::benchmark::{evaluate_occluded, occluded_frames, report_csv, BenchmarkReport};
use occhuman::field::Field;
use occhuman::geometry::{farthest_point_sample, KdTree, Vec3, NUM_SCALES};
use occhuman::hashgrid::{HashGrid, HashGridConfig};
use occhuman::metrics::{evaluate, psnr, ssim, EvalMode};
use occhuman::motion::MotionField;
use occhuman::occlusion::{covered_fraction, simulate_occlusion, union_mask};
use occhuman::renderer::{composite_taped, volume_render};
use occhuman::scene_io::{Image, Mask, SceneDataset};
use occhuman::synthgen::{synthesize, SynthConfig};
use occhuman::training::{
    build_field, comp_loss, draw_step, evaluate_step, train, TrainConfig, TrainOptions, TrainReport, TrainState,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn desk_config() -> TrainConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    let mut cfg = TrainConfig::default();
    cfg.apply_file(&path).expect("desk config");
    cfg
}

fn desk_scene() -> SceneDataset {
    let mut ds = synthesize(&SynthConfig::default()).expect("synthetic scene");
    simulate_occlusion(&mut ds, 0.5, 0.8, 0).expect("occlusion");
    ds
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn gradient_correctness() -> Outcome {
    let ds = desk_scene();
    let mut cfg = desk_config();
    cfg.iterations = 20;
    cfg.comp_warmup = 0;
    let (state, _) = train(&ds, &cfg, &TrainOptions::default()).unwrap();
    cfg.patch_size = 4;
    cfg.patches_per_step = 2;
    cfg.samples = 64;
    let motion = MotionField::new(&ds.template).unwrap();
    // neighbor sets and the inside mask are discrete: hold them fixed
    let draw = draw_step(&state.field, &ds, &motion, &cfg, cfg.iterations).unwrap().unwrap();
    let loss = |f: &Field| evaluate_step(f, &ds, &draw, &cfg, None).unwrap().stats.total;
    let analytic = evaluate_step(&state.field, &ds, &draw, &cfg, None).unwrap().gradients;

    let h = 1e-4;
    let mut field = state.field.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 3];
    let mut counts = [0usize; 3];
    let mut kinks = [0usize; 3];
    for (gi, g) in Group::ALL.into_iter().enumerate() {
        let grad = analytic.get(g);
        let mut candidates: Vec<usize> = (0..grad.len()).filter(|&i| grad[i].abs() > 1e-6).collect();
        candidates.shuffle(&mut rng);
        for &i in &candidates {
            if counts[gi] == 50 {
                break;
            }
            let mut central = |step: f64| -> f64 {
                let mut at = |delta: f64| {
                    nudge(&mut field, g, i, delta);
                    let l = loss(&field);
                    nudge(&mut field, g, i, -delta);
                    l
                };
                (at(step) - at(-step)) / (2.0 * step)
            };
            let (half, fd, double) = (central(h / 2.0), central(h), central(2.0 * h));
            // piecewise-smooth loss: a ReLU, |cos| or hash-cell kink inside
            // the stencil shows up as disagreement between step sizes
            let tol = 1e-5 * fd.abs() + 1e-11;
            if (half - fd).abs() > tol || (double - fd).abs() > tol {
                kinks[gi] += 1;
                continue;
            }
            worst[gi] = worst[gi].max(rel_err(fd, grad[i]));
            counts[gi] += 1;
        }
    }
    let pass = counts.iter().all(|&c| c >= 50) && worst.iter().all(|&w| w <= 1e-4);
    let names = ["mlp", "vertices", "grid"];
    let parts: Vec<String> = (0..3)
        .map(|k| format!("{} {:.1e} ({} checked, {} kinked)", names[k], worst[k], counts[k], kinks[k]))
        .collect();
    outcome(pass, format!("max rel err {}", parts.join(", ")))
}

fn nudge(field: &mut Field, g: Group, i: usize, delta: f64) {
    match g {
        Group::Mlp => field.mlp.params_mut()[i] += delta,
        Group::Grid => field.grid.params_mut()[i] += delta,
        Group::Vertices => {
            let mut flat = field.surface.flat_offsets();
            flat[i] += delta;
            field.surface.load_flat_offsets(&flat).unwrap();
        }
    }
}

fn closed_form_losses() -> Outcome {
    let beta = 10.0;
    let checks = [
        comp_loss(0.0, -0.5, beta) == 1.0,
        (comp_loss(10.0, -0.5, beta) - (-10f64).exp()).abs() <= 1e-12,
        comp_loss(3.0, 0.0, beta) == 0.0 && comp_loss(-2.0, 0.7, beta) == 0.0,
        comp_loss(-5.0, -0.5, beta) == 1.0,
    ];
    outcome(checks.iter().all(|&c| c), format!("{checks:?}"))
}

fn literal_composite(colors: &[[f64; 3]], sigmas: &[f64], deltas: &[f64]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for i in 0..sigmas.len() {
        let mut t = 1.0;
        for j in 0..i {
            t *= (-sigmas[j] * deltas[j]).exp();
        }
        let w = t * (1.0 - (-sigmas[i] * deltas[i]).exp());
        for k in 0..3 {
            out[k] += w * colors[i][k];
        }
        out[3] += w;
    }
    out
}

fn volume_rendering_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (rays, n) = (10_000, 32);
    let mut rgb = Vec::with_capacity(rays * n * 3);
    let mut sigma = Vec::with_capacity(rays * n);
    let mut delta = Vec::with_capacity(rays * n);
    for _ in 0..rays * n {
        rgb.extend([rng.gen::<f64>(), rng.gen(), rng.gen()]);
        sigma.push(if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..60.0) });
        delta.push(rng.gen_range(0.001..0.08));
    }
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::from_vec(rays * n, 3, rgb.clone()));
    let s = tape.constant(Tensor::column(sigma.clone()));
    let out = composite_taped(&mut tape, c, s, delta.clone(), n).unwrap();
    let batched = tape.value(out);
    let mut worst = 0.0f64;
    for r in 0..rays {
        let span = r * n..(r + 1) * n;
        let colors: Vec<[f64; 3]> = span.clone().map(|i| [rgb[3 * i], rgb[3 * i + 1], rgb[3 * i + 2]]).collect();
        let want = literal_composite(&colors, &sigma[span.clone()], &delta[span.clone()]);
        let (single, a) = volume_render(&colors, &sigma[span.clone()], &delta[span]).unwrap();
        for k in 0..4 {
            worst = worst.max((batched.data[4 * r + k] - want[k]).abs());
        }
        for k in 0..3 {
            worst = worst.max((single[k] - want[k]).abs());
        }
        worst = worst.max((a - want[3]).abs());
    }
    outcome(worst <= 1e-12, format!("max abs diff {worst:.1e} over {rays} rays"))
}

fn lattice_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    // integer coordinates make exact distance ties common
    (0..n)
        .map(|_| Vec3::new(rng.gen_range(0..6) as f64, rng.gen_range(0..6) as f64, rng.gen_range(0..6) as f64))
        .collect()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect()
}

fn brute_knn(points: &[Vec3], q: &Vec3, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| ((p - q).norm_squared(), i)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

fn brute_fps(points: &[Vec3], count: usize, seed: usize) -> Vec<usize> {
    let mut chosen = vec![seed];
    while chosen.len() < count {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, p) in points.iter().enumerate().filter(|(i, _)| !chosen.contains(i)) {
            let d = chosen.iter().map(|&c| (p - points[c]).norm_squared()).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

fn spatial_search_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut knn_bad, mut fps_bad) = (0, 0);
    for inst in 0..1000 {
        let n = rng.gen_range(1..300);
        let pts = if inst % 2 == 0 { lattice_points(&mut rng, n) } else { random_points(&mut rng, n) };
        let tree = KdTree::new(&pts);
        let q = if inst % 2 == 0 {
            Vec3::new(rng.gen_range(0..6) as f64, rng.gen_range(0..6) as f64, rng.gen_range(0..6) as f64)
        } else {
            Vec3::new(rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2))
        };
        let k = rng.gen_range(1..=n.min(12));
        let got: Vec<usize> = tree.nearest(&q, k).into_iter().map(|(_, i)| i).collect();
        knn_bad += usize::from(got != brute_knn(&pts, &q, k));
    }
    for inst in 0..1000 {
        let n = rng.gen_range(1..120);
        let pts = if inst % 2 == 0 { lattice_points(&mut rng, n) } else { random_points(&mut rng, n) };
        let count = rng.gen_range(1..=pts.len());
        let seed = rng.gen_range(0..pts.len());
        fps_bad += usize::from(farthest_point_sample(&pts, count, seed).unwrap() != brute_fps(&pts, count, seed));
    }
    outcome(
        knn_bad == 0 && fps_bad == 0,
        format!("knn mismatches {knn_bad}/1000, fps mismatches {fps_bad}/1000"),
    )
}

fn table_entry(g: &HashGrid, level: usize, corner: &[u32]) -> Vec<f64> {
    let c = g.config();
    let at = (level * c.table_size + g.slot(level, corner)) * c.features;
    g.params()[at..at + c.features].to_vec()
}

fn hash_grid_contracts() -> Outcome {
    let mut g = HashGrid::new(HashGridConfig::with_domain(vec![0.0; 4], vec![1.0; 4]), 5).unwrap();
    g.params_mut().iter_mut().for_each(|p| *p *= 1e4);
    let f = g.config().features;
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // levels with power-of-two resolution put corners on exact binary fractions
    let mut corner_ok = true;
    for level in [0usize, 7] {
        let res = g.level_resolution(level);
        for _ in 0..200 {
            let c: Vec<u32> = (0..4).map(|_| rng.gen_range(0..=res as u32)).collect();
            let coord: Vec<f64> = c.iter().map(|&v| v as f64 / res as f64).collect();
            let out = g.encode(&coord).unwrap();
            corner_ok &= out[level * f..(level + 1) * f] == table_entry(&g, level, &c)[..];
        }
    }

    let mut center_err = 0.0f64;
    let res = g.level_resolution(0);
    for _ in 0..200 {
        let base: Vec<u32> = (0..4).map(|_| rng.gen_range(0..res as u32)).collect();
        let coord: Vec<f64> = base.iter().map(|&v| (v as f64 + 0.5) / res as f64).collect();
        let out = g.encode(&coord).unwrap();
        let mut mean = vec![0.0; f];
        for c in 0..16 {
            let corner: Vec<u32> = (0..4).map(|d| base[d] + ((c >> d) & 1) as u32).collect();
            for (m, v) in mean.iter_mut().zip(table_entry(&g, 0, &corner)) {
                *m += v / 16.0;
            }
        }
        for k in 0..f {
            center_err = center_err.max((out[k] - mean[k]).abs() / 1e4);
        }
    }

    let mut affine_err = 0.0f64;
    let fine = g.level_resolution(7) as f64;
    for _ in 0..500 {
        let base: Vec<f64> = (0..4).map(|_| rng.gen_range(0..fine as u32) as f64 / fine).collect();
        let axis = rng.gen_range(0..4);
        let (u, v) = (rng.gen::<f64>() / fine, rng.gen::<f64>() / fine);
        let (mut a, mut b, mut m) = (base.clone(), base.clone(), base.clone());
        a[axis] += u;
        b[axis] += v;
        m[axis] += (u + v) / 2.0;
        let (fa, fb, fm) = (g.encode(&a).unwrap(), g.encode(&b).unwrap(), g.encode(&m).unwrap());
        // levels 0 and 7 nest (4 divides 128), so [a, b] lies in one cell of each
        for level in [0usize, 7] {
            for k in level * f..(level + 1) * f {
                affine_err = affine_err.max((fm[k] - (fa[k] + fb[k]) / 2.0).abs() / 1e4);
            }
        }
    }

    let coords: Vec<[f64; 4]> = (0..40).map(|_| [rng.gen(), rng.gen(), rng.gen(), rng.gen()]).collect();
    let ups: Vec<Vec<f64>> = (0..40).map(|_| (0..g.config().output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let loss = |g: &HashGrid| -> f64 {
        coords.iter().zip(&ups).map(|(c, u)| g.encode(c).unwrap().iter().zip(u).map(|(a, b)| a * b).sum::<f64>()).sum()
    };
    let mut grad = vec![0.0; g.params().len()];
    for (c, u) in coords.iter().zip(&ups) {
        g.backward_table(c, u, &mut grad);
    }
    let touched: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0).collect();
    let mut scatter_err = 0.0f64;
    let h = 1e-4;
    for _ in 0..100 {
        let i = touched[rng.gen_range(0..touched.len())];
        let p = g.params()[i];
        g.params_mut()[i] = p + h;
        let up = loss(&g);
        g.params_mut()[i] = p - h;
        let dn = loss(&g);
        g.params_mut()[i] = p;
        scatter_err = scatter_err.max(rel_err((up - dn) / (2.0 * h), grad[i]));
    }
    outcome(
        corner_ok && center_err <= 1e-12 && affine_err <= 1e-9 && scatter_err <= 1e-5,
        format!(
            "corners exact {corner_ok}, center err {center_err:.1e}, midpoint err {affine_err:.1e}, scatter rel err {scatter_err:.1e}"
        ),
    )
}

fn attention_scale_invariance() -> Outcome {
    let ds = desk_scene();
    let mut field = build_field(&ds.template, &TrainConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for sc in &mut field.surface.scales {
        sc.attention_mut().iter_mut().for_each(|a| *a = rng.gen_range(0.05..5.0));
    }
    let verts = &ds.template.vertices;
    let points: Vec<Vec3> = (0..200)
        .map(|_| verts[rng.gen_range(0..verts.len())] + Vec3::new(rng.gen(), rng.gen(), rng.gen()) * 0.3)
        .collect();
    let before: Vec<Vec<f64>> = points.iter().map(|p| field.surface_term(p).unwrap()).collect();
    let mut worst = 0.0f64;
    for lambda in [0.5, 3.0, 100.0] {
        for s in 0..NUM_SCALES {
            let mut scaled = field.clone();
            scaled.surface.scales[s].attention_mut().iter_mut().for_each(|a| *a *= lambda);
            for (p, b) in points.iter().zip(&before) {
                let after = scaled.surface_term(p).unwrap();
                for (x, y) in after.iter().zip(b) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    outcome(worst <= 1e-9, format!("max change {worst:.1e}"))
}

fn occlusion_protocol() -> Outcome {
    let base = synthesize(&SynthConfig::default()).unwrap();
    let (mut a, mut b) = (base.clone(), base.clone());
    let ra = simulate_occlusion(&mut a, 0.5, 0.8, 0).unwrap();
    let rb = simulate_occlusion(&mut b, 0.5, 0.8, 0).unwrap();
    let n = base.frames.len();
    let occluded = a.frames.iter().filter(|f| f.occlusion_mask.count() > 0).count();
    let fraction = covered_fraction(&union_mask(&a), &ra.rect);
    let same = ra == rb && a.frames.iter().zip(&b.frames).all(|(x, y)| x.occlusion_mask == y.occlusion_mask);
    let want = (0.8 * n as f64).round() as usize;
    outcome(
        (0.50..=0.51).contains(&fraction) && occluded == want && ra.occluded_frames.len() == want && same,
        format!("coverage {fraction:.4}, {occluded}/{n} frames occluded (want {want}), deterministic {same}"),
    )
}

fn metric_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (w, h) = (16, 12);
    let mut reference = Image::new(w, h);
    reference.data.iter_mut().for_each(|v| *v = rng.gen_range(0.0..0.9));
    let mut pred = reference.clone();
    pred.data.iter_mut().for_each(|v| *v += 0.1);
    let all = Mask {
        width: w,
        height: h,
        data: vec![true; w * h],
    };
    let p = psnr(&pred, &reference, &all).unwrap();
    let s = ssim(&reference, &reference, &all).unwrap();

    // perfect background, errors only on the subject
    let mut subject = Mask::new(w, h);
    for r in 3..9 {
        for c in 4..12 {
            subject.set(c, r, true);
        }
    }
    let mut bg_ref = Image::new(w, h);
    let mut bg_pred = Image::new(w, h);
    let mut alpha = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            if subject.get(c, r) {
                let v = rng.gen_range(0.2..0.8);
                bg_ref.set(c, r, [v, v, v]);
                bg_pred.set(c, r, [v + 0.2, v - 0.1, v]);
                alpha[r * w + c] = 1.0;
            }
        }
    }
    let occ = Mask::new(w, h);
    let (pf, _) = evaluate(&bg_pred, &alpha, &bg_ref, EvalMode::Full, &subject, &occ).unwrap();
    let (pv, _) = evaluate(&bg_pred, &alpha, &bg_ref, EvalMode::Vis, &subject, &occ).unwrap();
    outcome(
        p == 20.0 && s == 1.0 && pv <= pf,
        format!("psnr {p}, ssim(identical) {s}, vis {pv:.3} <= full {pf:.3}"),
    )
}

struct Trained {
    report: BenchmarkReport,
    train: TrainReport,
    seconds: f64,
}

fn train_and_measure(ds: &SceneDataset, cfg: &TrainConfig, frames: &[usize]) -> Trained {
    let t = Instant::now();
    let (state, train_report): (TrainState, TrainReport) = train(ds, cfg, &TrainOptions::default()).unwrap();
    let report = evaluate_occluded(&state.field, ds, frames, cfg.samples).unwrap();
    Trained {
        report,
        train: train_report,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn baseline_config(cfg: &TrainConfig) -> TrainConfig {
    let mut b = cfg.clone();
    b.apply_text("surface = false\nattention = false\nlambda_comp = 0").unwrap();
    b
}

/// Criterion 9 end to end: full model and ablated baseline, as CSV text.
fn directional_run(ds: &SceneDataset, cfg: &TrainConfig, frames: &[usize]) -> (Trained, Trained, String) {
    let full = train_and_measure(ds, cfg, frames);
    let base = train_and_measure(ds, &baseline_config(cfg), frames);
    let csv = report_csv(&[("full", full.report), ("baseline", base.report)]);
    (full, base, csv)
}

fn windowed_mse(r: &TrainReport, from: usize, to: usize) -> f64 {
    let v: Vec<f64> = r.history[from..to].iter().flatten().map(|s| s.mse).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn no_attention_determinism(ds: &SceneDataset, cfg: &TrainConfig, frames: &[usize]) -> (bool, String) {
    let mut c = cfg.clone();
    c.attention = false;
    c.iterations = 200;
    let few = &frames[..frames.len().min(4)];
    let a = train_and_measure(ds, &c, few).report;
    let b = train_and_measure(ds, &c, few).report;
    let same = report_csv(&[("a", a)]) == report_csv(&[("a", b)]);
    (same, format!("no-attention 200-step occluded psnr {:.2} dB, repeat identical {same}", a.occluded_psnr))
}

struct Line {
    id: &'static str,
    title: &'static str,
    result: Outcome,
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        }
    }
}

fn report(line: &Line) {
    let tag = if line.result.pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {:>2} {}: {}", line.id, line.title, line.result.detail);
}

fn main() {
    let quick: [(&str, &str, fn() -> Outcome); 8] = [
        ("1", "gradient correctness", gradient_correctness),
        ("2", "closed-form completeness loss", closed_form_losses),
        ("3", "volume rendering oracle", volume_rendering_oracle),
        ("4", "spatial search oracles", spatial_search_oracles),
        ("5", "hash grid contracts", hash_grid_contracts),
        ("6", "attention scale invariance", attention_scale_invariance),
        ("7", "occlusion protocol", occlusion_protocol),
        ("8", "metrics", metric_checks),
    ];
    // optional positional ids select criteria, e.g. `cargo test --test acceptance -- 2 7`
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |id: &str| wanted.is_empty() || wanted.iter().any(|w| w == id);
    let mut lines = Vec::new();
    for (id, title, f) in quick {
        if !selected(id) {
            continue;
        }
        let t = Instant::now();
        let mut result = guarded(f);
        result.detail.push_str(&format!(" [{:.1}s]", t.elapsed().as_secs_f64()));
        let line = Line { id, title, result };
        report(&line);
        lines.push(line);
    }

    if ["9", "10", "11"].iter().any(|id| selected(id)) {
        lines.extend(training_criteria());
    }

    let failed: Vec<&str> = lines.iter().filter(|l| !l.result.pass).map(|l| l.id).collect();
    if failed.is_empty() {
        println!("acceptance: {} checks pass", lines.len());
    } else {
        println!("acceptance: failing {}", failed.join(", "));
        std::process::exit(1);
    }
}

/// Criteria 9 to 11 share the trained full model.
fn training_criteria() -> Vec<Line> {
    let ds = desk_scene();
    let cfg = desk_config();
    let frames = occluded_frames(&ds, 1);

    let first = catch_unwind(AssertUnwindSafe(|| directional_run(&ds, &cfg, &frames)));
    let (c9, c10, c11, extra) = match first {
        Ok((full, base, csv)) => {
            let gain = full.report.occluded_psnr - base.report.occluded_psnr;
            let c9 = outcome(
                gain >= 1.0 && full.report.silhouette_alpha >= 0.8,
                format!(
                    "occluded psnr full {:.2} dB vs baseline {:.2} dB (gain {gain:+.2}), full silhouette alpha {:.3} [{:.0}s + {:.0}s]",
                    full.report.occluded_psnr, base.report.occluded_psnr, full.report.silhouette_alpha, full.seconds, base.seconds
                ),
            );

            let n = full.train.history.len();
            let (early, late) = (windowed_mse(&full.train, 100, 200), windowed_mse(&full.train, n - 100, n));
            let extra = outcome(
                late <= 0.5 * early,
                format!("training mse {early:.5} (iters 100-199) -> {late:.5} (last 100)"),
            );

            let c10 = guarded(|| {
                let mut nc = cfg.clone();
                nc.lambda_comp = 0.0;
                let nocomp = train_and_measure(&ds, &nc, &frames);
                let (det, note) = no_attention_determinism(&ds, &cfg, &frames);
                outcome(
                    nocomp.report.occluded_silhouette_alpha < full.report.occluded_silhouette_alpha && det,
                    format!(
                        "occluded-silhouette alpha without completeness {:.3} vs full {:.3}; {note}",
                        nocomp.report.occluded_silhouette_alpha, full.report.occluded_silhouette_alpha
                    ),
                )
            });

            let c11 = guarded(|| {
                // rerun on a different worker count; reductions are ordered
                let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
                let (_, _, again) = pool.install(|| directional_run(&ds, &cfg, &frames));
                outcome(again == csv, format!("metric CSV identical across runs: {}", again == csv))
            });
            print!("{csv}");
            (c9, c10, c11, extra)
        }
        Err(_) => {
            let failed = || outcome(false, "criterion 9 run panicked");
            (failed(), failed(), failed(), failed())
        }
    };
    let mut lines = Vec::new();
    for (id, title, result) in [
        ("9", "occluded-region directional claim", c9),
        ("9b", "training mse decrease", extra),
        ("10", "completeness ablation", c10),
        ("11", "reproducibility", c11),
    ] {
        let line = Line { id, title, result };
        report(&line);
        lines.push(line);
    }
    lines
}
