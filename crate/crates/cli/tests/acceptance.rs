//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and
//! exits non-zero if a hard requirement fails.

use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use hibbo::benchmarks::{figure2_sequences, lit_fraction, sin_manifold, sin_manifold_point, Family};
use hibbo::bo::{run, BoConfig, Method, Quartiles};
use hibbo::config::ExperimentConfig;
use hibbo::gp::{
    fit, log_marginal_likelihood, mismatch_diagnostics, select_hyperparams, GpHyperparams, ReferenceKernel,
};
use hibbo::hippo::{
    build_legs_operator, encode_sequence, hippo_distance, proposition1_check, reconstruct_signal, HippoState,
};
use hibbo::record::RunRecord;
use hibbo::rng::SeededRng;
use hibbo::vae::{evaluate_loss, Architecture, HippoCache, LossConfig, OutputActivation, ReconstructionNorm, VaeModel};
use hibbo::Matrix;

const ACKLEY_TOML: &str = include_str!("../../../configs/ackley.toml");
const SHAPE_TOML: &str = include_str!("../../../configs/shape.toml");
const SIN_MANIFOLD_TOML: &str = include_str!("../../../configs/sin_manifold.toml");

struct Outcome {
    pass: bool,
    /// A failing soft part that is reported without failing the suite.
    soft_fail: bool,
    detail: String,
}

fn hard(pass: bool, detail: String) -> Outcome {
    Outcome {
        pass,
        soft_fail: false,
        detail,
    }
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 10] = [
        (
            "similar-trend sequences have closer HiPPO memories",
            secs(10),
            c1_figure2,
        ),
        ("memory distance tracks average-kernel gap", secs(10), c2_proposition1),
        ("HiPPO reconstruction fidelity", secs(30), c3_fidelity),
        ("full loss gradients match finite differences", secs(60), c4_gradients),
        ("GP matches dense oracles", secs(10), c5_gp),
        ("zero-consistency HIBBO reproduces BASE", secs(60), c6_baseline),
        ("HIBBO latent kernel mismatch <= BASE", secs(300), c7_mismatch),
        ("Ackley d=60 end to end", secs(900), c8_ackley),
        ("shape task beats the training set", secs(900), c9_shapes),
        ("CLI outputs are deterministic", secs(60), c10_determinism),
    ];
    let mut hard_failures = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let mut o = check();
        let took = start.elapsed();
        if took > *limit {
            o.pass = false;
            o.soft_fail = false;
            o.detail.push_str(&format!(
                "; runtime {:.1}s exceeds {}s",
                took.as_secs_f64(),
                limit.as_secs()
            ));
        }
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {}: {tag}: {name} ({}; {:.1}s)",
            i + 1,
            o.detail,
            took.as_secs_f64()
        );
        if !o.pass && !o.soft_fail {
            hard_failures += 1;
        }
    }
    if hard_failures > 0 {
        println!("{hard_failures} hard requirement(s) failed");
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn scalar(v: &[f64]) -> Vec<Vec<f64>> {
    v.iter().map(|&x| vec![x]).collect()
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn c1_figure2() -> Outcome {
    let op = build_legs_operator(5).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (same, diff) in [
        ("sin-sin", "sin-tanh"),
        ("cos-cos", "cos-tanh"),
        ("tanh-tanh", "tanh-cos"),
    ] {
        let dist = |f: &str, seed| {
            let (x, y) = figure2_sequences(f.parse::<Family>().unwrap(), seed);
            let (cx, _) = encode_sequence(&op, &scalar(&x)).unwrap();
            let (cy, _) = encode_sequence(&op, &scalar(&y)).unwrap();
            hippo_distance(&cx, &cy).unwrap()
        };
        let wins = (0..50).filter(|&s| dist(same, s) < dist(diff, s)).count();
        ok &= wins >= 45;
        parts.push(format!("{same} vs {diff} {wins}/50"));
    }
    hard(ok, parts.join(", "))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && v[idx[j]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..j] {
            r[k] = (i + j - 1) as f64 / 2.0;
        }
        i = j;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn c2_proposition1() -> Outcome {
    // Base signal plus a perturbation of random size: a level shift, a
    // slope, and noise.
    let mut rng = SeededRng::new(2024);
    let t: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
    let (mut dist, mut gap) = (Vec::new(), Vec::new());
    for _ in 0..50 {
        let (a, ph, off) = (rng.uniform(0.5, 2.0), rng.uniform(0.0, 6.3), rng.normal());
        let x: Vec<f64> = t.iter().map(|&s| a * (6.0 * s + ph).sin() + off).collect();
        let size = rng.uniform(0.0, 1.5);
        let (shift, slope) = (rng.normal(), rng.normal());
        let y: Vec<f64> = x
            .iter()
            .zip(&t)
            .map(|(&v, &s)| v + size * (shift + slope * s) + 0.1 * rng.normal())
            .collect();
        let r = proposition1_check(&scalar(&x), &scalar(&y), 5, 1).unwrap();
        dist.push(r.hippo_distance);
        gap.push(r.kernel_gap);
    }
    let rho = pearson(&ranks(&dist), &ranks(&gap));
    hard(rho > 0.3, format!("Spearman {rho:.3} over 50 pairs"))
}

fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

fn shifted_legendre(n: usize, s: f64) -> f64 {
    let x = 2.0 * s - 1.0;
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return 1.0;
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    p1 * ((2 * n + 1) as f64).sqrt()
}

fn project(f: &dyn Fn(f64) -> f64, a: f64, b: f64, order: usize, nodes: &[(f64, f64)]) -> Vec<f64> {
    let (half, mid) = (0.5 * (b - a), 0.5 * (a + b));
    (0..order)
        .map(|n| {
            nodes
                .iter()
                .map(|&(x, w)| w * half * f(mid + half * x) * shifted_legendre(n, mid + half * x))
                .sum()
        })
        .collect()
}

fn reconstruct_from(order: usize, c: &[f64], pts: &[f64]) -> Vec<f64> {
    let op = build_legs_operator(order).unwrap();
    let state = HippoState::from_parts(Matrix::column(c), 1).unwrap();
    reconstruct_signal(&op, &state, pts).unwrap().into_vec()
}

fn c3_fidelity() -> Outcome {
    let nodes = gauss_legendre(80);
    let pts: Vec<f64> = (0..400).map(|i| (i as f64 + 0.5) / 400.0).collect();
    let mut rng = SeededRng::new(3);

    let mut poly_worst = 0.0f64;
    for order in [4, 8, 16, 32] {
        for _ in 0..3 {
            let coef: Vec<f64> = (0..order).map(|_| rng.normal()).collect();
            let f = |s: f64| coef.iter().rev().fold(0.0, |acc, &a| acc * s + a);
            let r = reconstruct_from(order, &project(&f, 0.0, 1.0, order, &nodes), &pts);
            let truth: Vec<f64> = pts.iter().map(|&s| f(s)).collect();
            poly_worst = poly_worst.max(rel_l2(&r, &truth));
        }
    }

    let sine = |s: f64| (2.0 * std::f64::consts::PI * s).sin();
    let truth: Vec<f64> = pts.iter().map(|&s| sine(s)).collect();
    let sine_errs: Vec<f64> = [4, 8, 16, 32]
        .iter()
        .map(|&o| rel_l2(&reconstruct_from(o, &project(&sine, 0.0, 1.0, o, &nodes), &pts), &truth))
        .collect();
    let monotone = sine_errs.windows(2).all(|w| w[1] <= w[0]);

    // Online recurrence vs projection of the held samples, order 8, 50 steps.
    let short = gauss_legendre(24);
    let op = build_legs_operator(8).unwrap();
    let mut online_worst = 0.0f64;
    for _ in 0..10 {
        let ph = rng.uniform(0.0, 6.3);
        let amp: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let xs: Vec<f64> = (1..=50)
            .map(|k| {
                let s = k as f64 / 50.0;
                amp[0] * (6.0 * s + ph).sin() + amp[1] * s + amp[2] * (15.0 * s).cos() + 0.1 * rng.normal()
            })
            .collect();
        let (state, _) = encode_sequence(&op, &scalar(&xs)).unwrap();
        let mut oracle = vec![0.0; 8];
        for (k, &x) in xs.iter().enumerate() {
            let part = project(&|_| x, k as f64 / 50.0, (k + 1) as f64 / 50.0, 8, &short);
            oracle.iter_mut().zip(part).for_each(|(o, p)| *o += p);
        }
        online_worst = online_worst.max(rel_l2(&state.coeffs().col(0), &oracle));
    }

    let ok = poly_worst < 1e-6 && monotone && sine_errs[3] < 0.05 && online_worst < 0.02;
    hard(
        ok,
        format!(
            "(a) polynomial rel L2 {poly_worst:.1e}; (b) sine errors {}; (c) online vs oracle {:.2}%",
            sine_errs
                .iter()
                .map(|e| format!("{e:.2e}"))
                .collect::<Vec<_>>()
                .join(" > "),
            100.0 * online_worst
        ),
    )
}

fn c4_gradients() -> Outcome {
    let mut rng = SeededRng::new(44);
    let mut worst = 0.0f64;
    for rep in 0..10 {
        let arch = Architecture {
            hidden_width: 6,
            hidden_layers: 2,
            output: if rep % 2 == 0 {
                OutputActivation::Linear
            } else {
                OutputActivation::Sigmoid
            },
            ..Architecture::new(5, 2)
        };
        let model = VaeModel::new(arch, &mut rng).unwrap();
        let data = rng.normal_matrix(4, 5);
        let eps = rng.normal_matrix(4, 2);
        let cfg = LossConfig {
            hippo_order: 5,
            reconstruction: if rep % 3 == 0 {
                ReconstructionNorm::SquaredL2
            } else {
                ReconstructionNorm::L2
            },
            ..LossConfig::default()
        };
        let loss = |m: &VaeModel| evaluate_loss(m, &data, None, &cfg, &eps, &mut HippoCache::default()).unwrap();
        let out = loss(&model);
        for _ in 0..20 {
            let p = rng.index(out.gradients.len());
            let e = rng.index(out.gradients[p].len());
            let h = 1e-6;
            let at = |d: f64| {
                let mut m = model.clone();
                m.params_mut()[p].data_mut()[e] += d;
                loss(&m).total
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let an = out.gradients[p].data()[e];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-4));
        }
    }
    hard(
        worst < 1e-4,
        format!("worst relative gap {worst:.2e} over 10 x 20 probes"),
    )
}

fn c5_gp() -> Outcome {
    let mut rng = SeededRng::new(55);
    let mut interp = 0.0f64;
    let mut oracle_gap = 0.0f64;
    for n in 1..=10 {
        let z = Matrix::from_fn(n, 2, |_, _| rng.uniform(-2.0, 2.0));
        let y: Vec<f64> = z.row_iter().map(|r| (2.0 * r[0]).sin() + r[1]).collect();
        let h0 = GpHyperparams::new(0.6, 1.0, 1e-10).unwrap();
        let post = fit(&z, &y, &h0).unwrap();
        for (r, &t) in z.row_iter().zip(&y) {
            interp = interp.max((post.predict(r).unwrap().mean - t).abs());
        }

        let h = GpHyperparams::new(0.9, 1.4, 0.05).unwrap();
        let kf = |a: &[f64], b: &[f64]| {
            h.signal_variance
                * (-0.5 * ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)) / (h.lengthscale * h.lengthscale)).exp()
        };
        // Dense inverse by Gauss-Jordan.
        let mut aug: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = (0..n)
                    .map(|j| kf(z.row(i), z.row(j)) + if i == j { h.noise_variance } else { 0.0 })
                    .collect();
                row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        let mut log_det = 0.0;
        for c in 0..n {
            let piv = (c..n)
                .max_by(|&a, &b| aug[a][c].abs().total_cmp(&aug[b][c].abs()))
                .unwrap();
            aug.swap(c, piv);
            let p = aug[c][c];
            log_det += p.abs().ln();
            aug[c].iter_mut().for_each(|v| *v /= p);
            for r in 0..n {
                if r != c {
                    let f = aug[r][c];
                    for j in 0..2 * n {
                        aug[r][j] -= f * aug[c][j];
                    }
                }
            }
        }
        let kinv: Vec<Vec<f64>> = aug.into_iter().map(|r| r[n..].to_vec()).collect();
        let m = y.iter().sum::<f64>() / n as f64;
        let res: Vec<f64> = y.iter().map(|v| v - m).collect();
        let post = fit(&z, &y, &h).unwrap();
        let q = [rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)];
        let ks: Vec<f64> = z.row_iter().map(|r| kf(r, &q)).collect();
        let kk: Vec<f64> = kinv
            .iter()
            .map(|row| row.iter().zip(&ks).map(|(a, b)| a * b).sum())
            .collect();
        let mean = m + kk.iter().zip(&res).map(|(a, b)| a * b).sum::<f64>();
        let var = h.signal_variance - ks.iter().zip(&kk).map(|(a, b)| a * b).sum::<f64>();
        let quad: f64 = (0..n)
            .map(|i| (0..n).map(|j| res[i] * kinv[i][j] * res[j]).sum::<f64>())
            .sum();
        let lml = -0.5 * quad - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        let p = post.predict(&q).unwrap();
        oracle_gap = oracle_gap
            .max((p.mean - mean).abs())
            .max((p.variance - var).abs())
            .max((log_marginal_likelihood(&z, &y, &h).unwrap() - lml).abs());
    }
    hard(
        interp < 1e-6 && oracle_gap < 1e-8,
        format!("interpolation error {interp:.1e}; oracle gap {oracle_gap:.1e}"),
    )
}

fn c6_baseline() -> Outcome {
    let cfg = |method| BoConfig {
        budget: 20,
        initial_samples: 10,
        frequency: 5,
        latent_dim: 1,
        hidden_width: 16,
        hidden_layers: 2,
        method,
        seed: 6,
        ..BoConfig::default()
    };
    let base = run(&sin_manifold(), &cfg(Method::Base)).unwrap().record;
    let mut h = cfg(Method::Hibbo);
    h.loss.consistency_weight = 0.0;
    let mut hibbo = run(&sin_manifold(), &h).unwrap().record;
    // The header names the method and hashes its config; everything else
    // must match bit for bit.
    hibbo.header.method = base.header.method.clone();
    hibbo.header.config_hash = base.header.config_hash.clone();
    let same = hibbo.to_jsonl() == base.to_jsonl();
    hard(same, format!("{} BO queries compared byte for byte", base.bo_queries()))
}

fn experiment(toml: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(toml).expect("shipped config parses")
}

fn median(v: &[f64]) -> f64 {
    Quartiles::of(v).median
}

fn c7_mismatch() -> Outcome {
    let exp = experiment(SIN_MANIFOLD_TOML);
    let mut dk = [Vec::new(), Vec::new()];
    for seed in 0..5u64 {
        for (slot, method) in [Method::Base, Method::Hibbo].into_iter().enumerate() {
            let p = sin_manifold();
            let out = run(&p, &exp.run_config(method, seed)).unwrap();
            let z = out.model.encode_mean_batch(&out.data).unwrap();
            let h = select_hyperparams(&z, &out.values, &exp.bo.gp_grid).unwrap();
            let post = fit(&z, &out.values, &h).unwrap();
            let probes = p.initial_design(50, &mut SeededRng::new(1000 + seed)).unwrap();
            let target = sin_manifold_point(1.0);
            let f = |x: &[f64]| -x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let r = mismatch_diagnostics(&out.model, &post, &probes, &f, ReferenceKernel::MedianHeuristic).unwrap();
            dk[slot].push(r.delta_kernel);
        }
    }
    let (base, hibbo) = (median(&dk[0]), median(&dk[1]));
    hard(
        hibbo <= base,
        format!("median delta_kernel HIBBO {hibbo:.4} vs BASE {base:.4}"),
    )
}

fn monotone(r: &RunRecord) -> bool {
    r.best_so_far().windows(2).all(|w| w[1] >= w[0])
}

fn c8_ackley() -> Outcome {
    let exp = experiment(ACKLEY_TOML);
    let problem = exp.problem.clone();
    let mut finals = [Vec::new(), Vec::new()];
    let mut hard_ok = true;
    for (slot, method) in [Method::Base, Method::Hibbo].into_iter().enumerate() {
        for &seed in &exp.seeds {
            let p = problem.build(seed).unwrap();
            let r = run(&p, &exp.run_config(method, seed)).unwrap().record;
            hard_ok &= monotone(&r) && r.final_best() > r.initial_best();
            finals[slot].push(r.final_best());
        }
    }
    let (base, hibbo) = (median(&finals[0]), median(&finals[1]));
    let ordered = hibbo >= base;
    let detail = format!(
        "median final HIBBO {hibbo:.3} vs BASE {base:.3} ({}); monotone and improving in every seed: {}",
        if ordered {
            "ordering holds"
        } else {
            "ordering FAILS, reported"
        },
        if hard_ok { "yes" } else { "NO" }
    );
    Outcome {
        pass: hard_ok && ordered,
        soft_fail: hard_ok && !ordered,
        detail,
    }
}

fn c9_shapes() -> Outcome {
    let exp = experiment(SHAPE_TOML);
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..5u64 {
        let p = exp.problem.build(seed).unwrap();
        let train_best = p
            .training_set()
            .unwrap()
            .row_iter()
            .map(lit_fraction)
            .fold(0.0, f64::max);
        let r = run(&p, &exp.run_config(Method::Hibbo, seed)).unwrap().record;
        if r.final_best() > train_best {
            wins += 1;
        }
        parts.push(format!("{:.3}>{:.3}", r.final_best(), train_best));
    }
    hard(
        wins >= 4,
        format!("{wins}/5 seeds beat the training set [{}]", parts.join(" ")),
    )
}

fn hibbo(args: &[&str]) -> std::process::ExitStatus {
    Command::new(env!("CARGO_BIN_EXE_hibbo"))
        .args(args)
        .env("HIBBO_LOG_LEVEL", "error")
        .stdout(Stdio::null())
        .status()
        .expect("binary runs")
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = walk(dir)
        .into_iter()
        .map(|p| {
            (
                p.strip_prefix(dir).unwrap().display().to_string(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn c10_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.toml");
    std::fs::write(&cfg, SIN_MANIFOLD_TOML.replace("budget = 30", "budget = 16")).unwrap();
    let mut ok = true;
    for (name, jobs) in [("a", "1"), ("b", "2")] {
        let out = tmp.path().join(name);
        let o = out.to_str().unwrap();
        ok &= hibbo(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            &format!("{o}/runs"),
            "--seeds",
            "0..2",
            "--jobs",
            jobs,
        ])
        .success();
        ok &= hibbo(&["report", &format!("{o}/runs")]).success();
        ok &= hibbo(&["fig2", "--seeds", "0..3", "--out", &format!("{o}/fig2.csv")]).success();
        ok &= hibbo(&["shapes", "--count", "4", "--out", &format!("{o}/shapes")]).success();
    }
    let (a, b) = (tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    let same = ok && !a.is_empty() && a == b;
    hard(
        same,
        format!("{} files compared across two invocations (--jobs 1 vs 2)", a.len()),
    )
}
