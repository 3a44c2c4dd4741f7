//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints its own PASS/FAIL line.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use virtual_markers::archetypal::{fit_archetypes, FitOptions};
use virtual_markers::dataset::{
    assemble_data_matrix, compute_symmetric_pairs, generate_synthetic_dataset, load_dataset, save_dataset,
    DataMatrix, MeshDataset, MeshSample, SynthConfig, DEFAULT_MIDLINE_TOLERANCE,
};
use virtual_markers::evaluation::{evaluate_meshes, mpjpe, pa_mpjpe, LossWeights, MeshTarget, MeshTerms, MetricReport};
use virtual_markers::heatmap::{soft_argmax, synthesize_heatmap, CorruptionSpec, MarkerEstimate, VoxelGrid};
use virtual_markers::markers::{baseline_random_markers, is_mirror_closed, MarkerSet};
use virtual_markers::reconstruction::{
    adapter_loss_grad, reconstruct_adaptive, reconstruct_fixed, train_adapter, AdapterTrainConfig,
    CoefficientAdapter,
};
use virtual_markers::simplex::{brute_force_simplex_ls, project_to_simplex, simplex_ls, SolverOptions};
use virtual_markers::vmat::{load_vmat, save_vmat};
use virtual_markers::Point3;
use vmarker_cli::{learn_markers, train_on_dataset, LearnReport, RunConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Learned {
    k: usize,
    set: MarkerSet,
    report: LearnReport,
}

struct Shared {
    dataset: MeshDataset,
    x: DataMatrix,
    learned: Vec<Learned>,
}

fn shared() -> &'static Shared {
    static CELL: OnceLock<Shared> = OnceLock::new();
    CELL.get_or_init(|| {
        let dataset = generate_synthetic_dataset(&SynthConfig::default(), 0).expect("synthetic dataset");
        let x = assemble_data_matrix(&dataset);
        let learned = [8, 16, 32, 64]
            .into_iter()
            .map(|k| {
                let fit = FitOptions { k, restarts: 5, ..Default::default() };
                let (set, report) = learn_markers(&dataset, &fit).expect("learn markers");
                Learned { k, set, report }
            })
            .collect();
        Shared { dataset, x, learned }
    })
}

fn learned(k: usize) -> &'static Learned {
    shared().learned.iter().find(|l| l.k == k).expect("K was learned")
}

fn solver_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let d = 1 + i % 4;
        let rows = rng.random_range(1..=6);
        let a = DMatrix::from_fn(rows, d, |_, _| rng.random_range(-5.0..5.0));
        let t = DVector::from_fn(rows, |_, _| rng.random_range(-5.0..5.0));
        let fast = simplex_ls(&a, &t, None, &SolverOptions::default()).map_err(|e| e.to_string())?;
        let slow = brute_force_simplex_ls(&a, &t, 1e-2).map_err(|e| e.to_string())?;
        let gap = (fast.objective - slow.objective).abs();
        worst = worst.max(gap);
        check(gap <= 1e-6, || format!("instance {i} (d = {d}): gap {gap:e}"))?;
    }
    Ok(format!("max |objective gap| = {worst:.2e} over 100 instances"))
}

fn archetype_exactness() -> Outcome {
    let mut details = Vec::new();
    for k in [3usize, 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + k as u64);
        let rows = 6;
        let extremes: Vec<DVector<f64>> =
            (0..k).map(|_| DVector::from_fn(rows, |_, _| rng.random_range(-50.0..50.0))).collect();
        let mut cols = extremes.clone();
        for _ in 0..60 {
            let raw: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
            let s: f64 = raw.iter().sum();
            let mut p = DVector::zeros(rows);
            for (w, e) in raw.iter().zip(&extremes) {
                p += e * (w / s);
            }
            cols.push(p);
        }
        let x = DataMatrix {
            x: DMatrix::from_columns(&cols),
            n_samples: rows / 3,
            n_vertices: cols.len(),
        };
        let opts = FitOptions { k, restarts: 5, seed: 3, ..Default::default() };
        let (model, hist) = fit_archetypes(&x, &opts).map_err(|e| e.to_string())?;
        let obj = *hist.objective_per_iter.last().unwrap();
        check(obj <= 1e-6, || format!("K = {k}: objective {obj:e}"))?;
        for (i, e) in extremes.iter().enumerate() {
            let found = (0..k).any(|j| (0..rows).all(|r| (model.z[(r, j)] - e[r]).abs() <= 1e-3));
            check(found, || format!("K = {k}: extreme point {i} not recovered"))?;
        }
        details.push(format!("K = {k} objective {obj:.1e}"));
    }
    Ok(details.join(", "))
}

fn k_monotonicity() -> Outcome {
    let s = shared();
    let mut line = Vec::new();
    let mut prev = f64::INFINITY;
    for l in &s.learned {
        let err = l.report.symmetric_error.frobenius_sq;
        let arch = l.report.archetype_error.frobenius_sq;
        let pca = l.report.pca_bound.frobenius_sq;
        check(err <= prev * 1.01, || format!("K = {}: refit error {err:.4e} above previous {prev:.4e}", l.k))?;
        check(pca <= arch, || format!("K = {}: PCA bound {pca:.4e} above archetypal error {arch:.4e}", l.k))?;
        prev = err;
        line.push(format!("K={} {:.2} mm", l.k, l.report.symmetric_error.mpve_mm));
    }
    Ok(format!("refit MPVE {}", line.join(", ")))
}

fn learned_vs_random() -> Outcome {
    let s = shared();
    let m = s.dataset.n_vertices();
    let mut line = Vec::new();
    for k in [16, 32] {
        let ours = learned(k).report.symmetric_error.mpve_mm;
        let mut random = 0.0;
        for seed in 0..5 {
            let set = baseline_random_markers(m, k, seed, &s.x).map_err(|e| e.to_string())?;
            random += set.refit_error(&s.x).map_err(|e| e.to_string())?.mean_per_vertex_mm / 5.0;
        }
        check(ours < random, || format!("K = {k}: learned {ours:.3} mm vs random mean {random:.3} mm"))?;
        line.push(format!("K={k} learned {ours:.2} vs random {random:.2} mm"));
    }
    Ok(line.join(", "))
}

fn symmetrization_cost() -> Outcome {
    let s = shared();
    let l = learned(16);
    let snapped = l.report.snapped_error.mpve_mm;
    let sym = l.report.symmetric_error.mpve_mm;
    let rel = (sym - snapped).abs() / snapped;
    check(rel <= 0.10, || format!("symmetric {sym:.3} vs snapped {snapped:.3} mm ({:.1}%)", rel * 100.0))?;
    let pairing = compute_symmetric_pairs(&s.dataset.template, DEFAULT_MIDLINE_TOLERANCE);
    check(is_mirror_closed(&l.set.vertex_indices, &pairing), || "marker set is not mirror-closed".into())?;
    Ok(format!("K=16 snapped {snapped:.2} mm, symmetric {sym:.2} mm ({:.1}%), mirror-closed", rel * 100.0))
}

fn soft_argmax_accuracy() -> Outcome {
    let grid = VoxelGrid::new([32; 3], [0.0; 3], [1.0; 3]).map_err(|e| e.to_string())?;
    let sigma = 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst, mut worst_shift): (f64, f64) = (0.0, 0.0);
    for i in 0..50 {
        let c: Point3 = [0; 3].map(|_| rng.random_range(3.0 * sigma..31.0 - 3.0 * sigma));
        let hm = synthesize_heatmap(&[c], &grid, sigma, &CorruptionSpec::none(), i).map_err(|e| e.to_string())?;
        let p = soft_argmax(&hm)[0];
        let err = (0..3).map(|d| (p[d] - c[d]).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(err);
        check(err <= 0.1, || format!("heatmap {i}: error {err:.4} voxel"))?;

        let t: Point3 = [0; 3].map(|_| rng.random_range(-250.0..250.0));
        let mut shifted = hm.clone();
        shifted.grid.origin = [0, 1, 2].map(|d| grid.origin[d] + t[d]);
        let q = soft_argmax(&shifted)[0];
        for d in 0..3 {
            let dev = (q[d] - p[d] - t[d]).abs();
            worst_shift = worst_shift.max(dev);
            check(dev <= 1e-9, || format!("heatmap {i}: origin shift deviates by {dev:e}"))?;
        }
    }
    Ok(format!("max error {worst:.4} voxel, max origin-shift deviation {worst_shift:.1e}"))
}

fn adapter_benefit() -> Outcome {
    let s = shared();
    let cfg = RunConfig::default();
    let (_, report) = train_on_dataset(&s.dataset, &learned(16).set, &cfg).map_err(|e| e.to_string())?;
    let (fixed, adaptive) = (report.eval_split.fixed_mpve, report.eval_split.adaptive_mpve);
    let gain = (fixed - adaptive) / fixed;
    check(gain >= 0.02, || format!("fixed {fixed:.3} mm, adaptive {adaptive:.3} mm ({:.1}%)", gain * 100.0))?;
    Ok(format!(
        "held-out MPVE fixed {fixed:.2} mm, adaptive {adaptive:.2} mm ({:.1}% lower)",
        gain * 100.0
    ))
}

fn zero_epoch_identity() -> Outcome {
    let s = shared();
    let set = &learned(16).set;
    let sample = |n: usize, c: f64| {
        let mesh = s.dataset.samples[n].clone();
        let p = set.vertex_indices.iter().map(|&i| mesh.vertices[i]).collect();
        virtual_markers::reconstruction::TrainSample {
            estimate: MarkerEstimate { p, c: vec![c; set.k()] },
            mesh,
        }
    };
    let train: Vec<_> = (1..5).map(|n| sample(n, 0.7)).collect();
    let cfg = AdapterTrainConfig { epochs: 0, ..Default::default() };
    let (trained, _) = train_adapter(&train, &s.dataset, &cfg, set).map_err(|e| e.to_string())?;
    let fresh = CoefficientAdapter::new(set.a_sym.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut count = 0;
    for n in 0..s.dataset.n_samples() {
        let p: Vec<Point3> = set.vertex_indices.iter().map(|&i| s.dataset.samples[n].vertices[i]).collect();
        let c: Vec<f64> = (0..set.k()).map(|_| rng.random_range(0.0..1.0)).collect();
        let fixed = reconstruct_fixed(&p, &set.a_sym).map_err(|e| e.to_string())?;
        for ad in [&trained, &fresh] {
            let adaptive = reconstruct_adaptive(&p, &c, ad).map_err(|e| e.to_string())?;
            let same = fixed
                .vertices
                .iter()
                .flatten()
                .zip(adaptive.vertices.iter().flatten())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            check(same, || format!("sample {n} differs"))?;
            count += 1;
        }
    }
    Ok(format!("{count} reconstructions bitwise identical"))
}

fn gradient_checks() -> Outcome {
    let terms = [
        ("vertex", MeshTerms { vertex: 1.0, pose: 0.0, normal: 0.0, edge: 0.0 }),
        ("pose", MeshTerms { vertex: 0.0, pose: 1.0, normal: 0.0, edge: 0.0 }),
        ("normal", MeshTerms { vertex: 0.0, pose: 0.0, normal: 1.0, edge: 0.0 }),
        ("edge", MeshTerms { vertex: 0.0, pose: 0.0, normal: 0.0, edge: 1.0 }),
        ("weighted sum", MeshTerms::from(&LossWeights::default())),
    ];
    let faces = vec![[0, 1, 2], [1, 3, 2], [2, 3, 4], [3, 5, 4], [4, 5, 6], [0, 2, 6]];
    let (k, m) = (3, 7);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut pts = |n: usize| -> Vec<Point3> { (0..n).map(|_| [0; 3].map(|_| rng.random_range(-100.0..100.0))).collect() };
        let p = pts(k);
        let gt = MeshSample::new(pts(m));
        let joints = pts(2);
        let mut base = DMatrix::zeros(k, m);
        let mut adapter_w = DMatrix::zeros(k * m, k);
        let mut adapter_b = DVector::zeros(k * m);
        for i in 0..m {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            base.set_column(i, &DVector::from_vec(project_to_simplex(&raw).into_inner()));
        }
        for v in adapter_w.iter_mut().chain(adapter_b.iter_mut()) {
            *v = rng.random_range(-0.1..0.1);
        }
        let reg = DMatrix::from_fn(m, 2, |_, _| rng.random_range(0.0..1.0));
        let c: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let est = MarkerEstimate { p, c };
        let mut adapter = CoefficientAdapter::new(base);
        adapter.w = adapter_w;
        adapter.b = adapter_b;
        let target = MeshTarget { mesh: &gt, joints: &joints, regressor: &reg, faces: &faces };
        for (name, t) in &terms {
            let (_, dw, db) = adapter_loss_grad(&adapter, &est, &target, t).map_err(|e| e.to_string())?;
            let loss = |ad: &CoefficientAdapter| adapter_loss_grad(ad, &est, &target, t).map(|r| r.0);
            let h = 1e-5;
            let n_w = adapter.w.len();
            for idx in 0..n_w + adapter.b.len() {
                let (mut plus, mut minus) = (adapter.clone(), adapter.clone());
                let analytic = if idx < n_w {
                    plus.w[idx] += h;
                    minus.w[idx] -= h;
                    dw[idx]
                } else {
                    plus.b[idx - n_w] += h;
                    minus.b[idx - n_w] -= h;
                    db[idx - n_w]
                };
                let fd = (loss(&plus).map_err(|e| e.to_string())? - loss(&minus).map_err(|e| e.to_string())?) / (2.0 * h);
                let dev = (fd - analytic).abs();
                let allowed = 1e-6f64.max(1e-4 * fd.abs());
                worst = worst.max(dev / allowed);
                check(dev <= allowed, || format!("seed {seed}, {name}, param {idx}: analytic {analytic:e} vs FD {fd:e}"))?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} partials, worst deviation {:.2} of tolerance", worst))
}

fn random_joints(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
    (0..n).map(|_| [0; 3].map(|_| rng.random_range(-500.0..500.0))).collect()
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    Rotation3::new(axis.normalize() * rng.random_range(0.0..std::f64::consts::PI))
}

fn transform(j: &[Point3], s: f64, r: &Rotation3<f64>, t: &Vector3<f64>) -> Vec<Point3> {
    j.iter()
        .map(|p| {
            let q = r * Vector3::from(*p) * s + t;
            [q.x, q.y, q.z]
        })
        .collect()
}

/// Best similarity alignment by coarse-to-fine search over Euler angles, with
/// the optimal scale and translation for each rotation in closed form.
fn grid_search_pa(src: &[Point3], dst: &[Point3]) -> f64 {
    let n = src.len() as f64;
    let mean = |p: &[Point3]| p.iter().fold(Vector3::zeros(), |a, q| a + Vector3::from(*q)) / n;
    let (ms, md) = (mean(src), mean(dst));
    let xs: Vec<Vector3<f64>> = src.iter().map(|p| Vector3::from(*p) - ms).collect();
    let ys: Vec<Vector3<f64>> = dst.iter().map(|p| Vector3::from(*p) - md).collect();
    let norm: f64 = xs.iter().map(|x| x.norm_squared()).sum();
    let score = |a: [f64; 3]| {
        let r = Rotation3::from_euler_angles(a[0], a[1], a[2]);
        let rx: Vec<Vector3<f64>> = xs.iter().map(|x| r * x).collect();
        let s = (rx.iter().zip(&ys).map(|(p, q)| p.dot(q)).sum::<f64>() / norm).max(0.0);
        rx.iter().zip(&ys).map(|(p, q)| (p * s - q).norm()).sum::<f64>() / n
    };
    let pi = std::f64::consts::PI;
    let mut best = ([0.0; 3], f64::INFINITY);
    let steps = 48;
    for i in 0..steps {
        for j in 0..=steps / 2 {
            for k in 0..steps {
                let a = [
                    -pi + 2.0 * pi * i as f64 / steps as f64,
                    -pi / 2.0 + pi * j as f64 / (steps / 2) as f64,
                    -pi + 2.0 * pi * k as f64 / steps as f64,
                ];
                let e = score(a);
                if e < best.1 {
                    best = (a, e);
                }
            }
        }
    }
    let mut h = 2.0 * pi / steps as f64;
    for _ in 0..40 {
        let center = best.0;
        for di in -3..=3 {
            for dj in -3..=3 {
                for dk in -3..=3 {
                    let a = [
                        center[0] + h * di as f64 / 3.0,
                        center[1] + h * dj as f64 / 3.0,
                        center[2] + h * dk as f64 / 3.0,
                    ];
                    let e = score(a);
                    if e < best.1 {
                        best = (a, e);
                    }
                }
            }
        }
        h *= 0.6;
    }
    best.1
}

fn procrustes_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let j = random_joints(&mut rng, 15);
        let s = rng.random_range(0.5..2.0);
        let r = random_rotation(&mut rng);
        let t = Vector3::from_fn(|_, _| rng.random_range(-1000.0..1000.0));
        let moved = transform(&j, s, &r, &t);
        let pa = pa_mpjpe(&j, &moved).map_err(|e| e.to_string())?;
        worst = worst.max(pa);
        check(pa <= 1e-9, || format!("transform {i}: pa_mpjpe {pa:e}"))?;
    }
    for i in 0..100 {
        let a = random_joints(&mut rng, 15);
        let b = random_joints(&mut rng, 15);
        let (pa, raw) = (pa_mpjpe(&a, &b).map_err(|e| e.to_string())?, mpjpe(&a, &b).map_err(|e| e.to_string())?);
        check(pa <= raw, || format!("random instance {i}: pa {pa} > mpjpe {raw}"))?;
    }
    let a = random_joints(&mut rng, 10);
    let r = random_rotation(&mut rng);
    let mut b = transform(&a, 1.3, &r, &Vector3::new(40.0, -20.0, 10.0));
    for p in &mut b {
        for v in p.iter_mut() {
            *v += rng.random_range(-30.0..30.0);
        }
    }
    let ours = pa_mpjpe(&a, &b).map_err(|e| e.to_string())?;
    let oracle = grid_search_pa(&a, &b);
    check((ours - oracle).abs() <= 0.5, || format!("closed form {ours:.4} vs grid search {oracle:.4}"))?;
    Ok(format!(
        "max pa_mpjpe on exact transforms {worst:.1e}; 10-point instance {ours:.3} vs grid search {oracle:.3} mm"
    ))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vmarker"))
}

fn run(args: &[&str]) -> Result<(), String> {
    let out = bin().args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("vmarker {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = d.join("data");
    run(&["synth", "--out", &s(&data), "--n-samples", "40", "--vertices", "200"])?;
    let ds = s(&data.join("dataset.vmds"));
    let mut learn_files = Vec::new();
    let mut train_files = Vec::new();
    for (tag, threads) in [("a", "1"), ("b", "1"), ("c", "4")] {
        let lo = d.join(format!("learn_{tag}"));
        run(&["learn", "--dataset", &ds, "-k", "8", "--threads", threads, "--out", &s(&lo)])?;
        let to = d.join(format!("train_{tag}"));
        run(&[
            "train-adapter",
            "--dataset",
            &ds,
            "--markers",
            &s(&lo.join("markers.json")),
            "--epochs",
            "5",
            "--threads",
            threads,
            "--out",
            &s(&to),
        ])?;
        learn_files.push(
            ["learn_report.json", "markers.json", "markers_A.vmat"]
                .iter()
                .map(|f| read(&lo.join(f)))
                .collect::<Result<Vec<_>, _>>()?,
        );
        train_files.push(
            ["train_log.json", "adapter.json", "adapter_W.vmat", "adapter_b.vmat"]
                .iter()
                .map(|f| read(&to.join(f)))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    check(learn_files[0] == learn_files[1], || "learn outputs differ between identical runs".into())?;
    check(learn_files[0] == learn_files[2], || "learn outputs differ between --threads 1 and 4".into())?;
    check(train_files[0] == train_files[1], || "train-adapter outputs differ between identical runs".into())?;
    check(train_files[0] == train_files[2], || "train-adapter outputs differ between --threads 1 and 4".into())?;
    Ok("learn and train-adapter outputs byte-identical across runs and thread counts".into())
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let s = shared();
    let vmds = dir.path().join("gt.vmds");
    save_dataset(&s.dataset, &vmds).map_err(|e| e.to_string())?;
    let back = load_dataset(&vmds).map_err(|e| e.to_string())?;
    check(back.faces == s.dataset.faces, || "faces differ after VMDS round trip".into())?;
    for (a, b) in back.samples.iter().zip(&s.dataset.samples) {
        check(bits_equal(a.vertices.as_flattened(), b.vertices.as_flattened()), || "vertices differ".into())?;
    }
    let (ra, rb) = (back.joint_regressor.as_ref().unwrap(), s.dataset.joint_regressor.as_ref().unwrap());
    check(bits_equal(ra.as_slice(), rb.as_slice()), || "regressor differs after VMDS round trip".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mat = DMatrix::from_fn(17, 9, |_, _| rng.random_range(-1e6..1e6) * rng.random::<f64>().powi(7));
    let vmat = dir.path().join("m.vmat");
    save_vmat(&mat, &vmat).map_err(|e| e.to_string())?;
    let mat2 = load_vmat(&vmat).map_err(|e| e.to_string())?;
    check(mat2.shape() == mat.shape() && bits_equal(mat.as_slice(), mat2.as_slice()), || "VMAT round trip differs".into())?;

    let pred: Vec<MeshSample> = s
        .dataset
        .samples
        .iter()
        .map(|m| MeshSample::new(m.vertices.iter().map(|v| v.map(|c| c + rng.random_range(-20.0..20.0))).collect()))
        .collect();
    let pred_ds = MeshDataset::new(pred.clone(), s.dataset.faces.clone(), None).map_err(|e| e.to_string())?;
    let pred_path = dir.path().join("pred.vmds");
    save_dataset(&pred_ds, &pred_path).map_err(|e| e.to_string())?;
    let out = dir.path().join("eval");
    run(&[
        "eval",
        "--pred",
        pred_path.to_str().unwrap(),
        "--gt",
        vmds.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])?;
    let text = String::from_utf8(read(&out.join("eval_report.json"))?).map_err(|e| e.to_string())?;
    let cli: MetricReport = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    // VMDS stores f32 coordinates, so compare on the files the CLI read
    let pred = load_dataset(&pred_path).map_err(|e| e.to_string())?.samples;
    let lib = evaluate_meshes(&pred, &back.samples, back.joint_regressor.as_ref()).map_err(|e| e.to_string())?;
    let rows = std::iter::once((&cli.aggregate, &lib.aggregate)).chain(cli.per_sample.iter().zip(&lib.per_sample));
    let mut worst: f64 = 0.0;
    for (a, b) in rows {
        let pairs = [
            (Some(a.mpve), Some(b.mpve)),
            (a.mpjpe, b.mpjpe),
            (a.pa_mpjpe, b.pa_mpjpe),
        ];
        for (x, y) in pairs {
            let (x, y) = (x.ok_or("missing CLI metric")?, y.ok_or("missing library metric")?);
            worst = worst.max((x - y).abs());
        }
    }
    check(cli.per_sample.len() == lib.per_sample.len(), || "row count differs".into())?;
    check(worst <= 1e-12, || format!("CLI and library metrics differ by {worst:e}"))?;
    Ok(format!("VMDS and VMAT bit-exact; CLI vs library metric deviation {worst:.1e}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("solver-oracle equivalence", solver_oracle),
        ("archetype exactness", archetype_exactness),
        ("K-monotonicity", k_monotonicity),
        ("learned vs random markers", learned_vs_random),
        ("symmetrization cost", symmetrization_cost),
        ("soft-argmax accuracy", soft_argmax_accuracy),
        ("adapter benefit", adapter_benefit),
        ("zero-epoch identity", zero_epoch_identity),
        ("gradient checks", gradient_checks),
        ("Procrustes invariance", procrustes_invariance),
        ("determinism", determinism),
        ("round-trips", round_trips),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {:2} PASS  {name}: {msg} [{secs:.1} s]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {:2} FAIL  {name}: {msg} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
