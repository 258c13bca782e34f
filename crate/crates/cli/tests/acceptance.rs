//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! ```text
//! cargo test --release -p htlane-cli --test acceptance
//! ```
//!
//! Set `HTLANE_ACCEPT=1,2,9` to run a subset.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use htlane::gradcheck::suite;
use htlane::losses::{max_bin_term, pool_to_table};
use htlane::model::init_params;
use htlane::synth::generate;
use htlane::trainer::train_with;
use htlane::{
    evaluate, global_argmax, lr_at, Checkpoint, Dataset, HoughConfig, HoughPreset, LossBundle,
    LossConfig, Metrics, Mode, RunConfig, SceneConfig, Tensor, TrainConfig, VoteTable,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Geometry written out independently of the crate's vote table.
struct Grid {
    h: usize,
    w: usize,
    n_rho: usize,
    n_theta: usize,
    rho_max: f64,
    delta_rho: f64,
}

impl Grid {
    fn new(c: &HoughConfig) -> Self {
        let rho_max = (((c.width as f64 - 1.0) / 2.0).powi(2) + ((c.height as f64 - 1.0) / 2.0).powi(2)).sqrt();
        Grid {
            h: c.height,
            w: c.width,
            n_rho: c.n_rho,
            n_theta: c.n_theta,
            rho_max,
            delta_rho: 2.0 * rho_max / (c.n_rho as f64 - 1.0),
        }
    }

    fn xy(&self, row: usize, col: usize) -> (f64, f64) {
        (col as f64 - (self.w as f64 - 1.0) / 2.0, row as f64 - (self.h as f64 - 1.0) / 2.0)
    }

    fn bin(&self, rho: f64) -> usize {
        ((rho + self.rho_max) / self.delta_rho).round().clamp(0.0, (self.n_rho - 1) as f64) as usize
    }

    /// Per-pixel voting loop.
    fn naive_ht(&self, f: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0f32; self.n_theta * self.n_rho];
        for row in 0..self.h {
            for col in 0..self.w {
                let v = f[row * self.w + col];
                let (x, y) = self.xy(row, col);
                for j in 0..self.n_theta {
                    let t = j as f64 * PI / self.n_theta as f64;
                    let k = self.bin(x * t.cos() + y * t.sin());
                    out[j * self.n_rho + k] += v;
                }
            }
        }
        out
    }
}

fn random_map(dims: &[usize], g: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(dims, |_| g.random_range(0.0..1.0))
}

fn c1_oracle() -> Outcome {
    let c = HoughConfig::desk();
    let table = VoteTable::new(c);
    let grid = Grid::new(&c);
    let mut g = rng(1);
    for case in 0..100 {
        let f = random_map(&[16, 40], &mut g);
        let got = table.ht_forward(&f).map_err(|e| e.to_string())?;
        let want = grid.naive_ht(f.data());
        if got.data().iter().zip(&want).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("map {case} differs from the voting loop"));
        }
    }
    Ok("100/100 maps bit-identical".into())
}

fn c2_adjoint() -> Outcome {
    let mut worst = 0.0f64;
    for preset in [HoughPreset::Desk, HoughPreset::Paper] {
        let c = preset.config();
        let table = VoteTable::new(c);
        let mut g = rng(2);
        for case in 0..50 {
            let f = random_map(&[c.height, c.width], &mut g);
            let h = random_map(&[c.n_theta, c.n_rho], &mut g);
            let dot = |a: &Tensor<f32>, b: &Tensor<f32>| -> f64 {
                a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum()
            };
            let lhs = dot(&table.ht_forward(&f).unwrap(), &h);
            let rhs = c.n_theta as f64 * dot(&f, &table.iht_forward(&h).unwrap());
            let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs());
            worst = worst.max(rel);
            if rel >= 1e-4 {
                return Err(format!("{preset} pair {case}: relative gap {rel:.3e}"));
            }
        }
    }
    Ok(format!("100 pairs over both presets, worst relative gap {worst:.2e}"))
}

fn c3_gradients() -> Outcome {
    let mut lines = Vec::new();
    let mut bad = Vec::new();
    for (name, r) in suite::all(10) {
        lines.push(format!("{name} {}/{}", r.checked - r.failures.len(), r.checked));
        if !r.passed() {
            bad.push(format!(
                "{name}: {} failures, {} refined of {}, max rel {:.2e}",
                r.failures.len(),
                r.refined,
                r.checked,
                r.max_rel_err
            ));
        }
    }
    if bad.is_empty() {
        Ok(format!("10 seeds each; {}", lines.join(", ")))
    } else {
        Err(bad.join("; "))
    }
}

fn c4_max_bin_arithmetic() -> Outcome {
    let eps = LossConfig::default().eps;
    let slack = 1e-5 + 2.0 * eps;
    let (n_theta, n_rho) = (30, 43);

    let mut one_hot = vec![0.0f64; n_theta * n_rho];
    one_hot[7 * n_rho + 19] = 1.0;
    let v0 = max_bin_term(&one_hot, n_rho, eps).ok_or("one-hot skipped")?.term;

    let mut uniform = vec![0.0f64; n_theta * n_rho];
    uniform[4 * n_rho..5 * n_rho].iter_mut().for_each(|v| *v = 1.0);
    let v1 = max_bin_term(&uniform, n_rho, eps).ok_or("uniform skipped")?.term;

    let v2 = max_bin_term(&[1.0f64, 3.0, 4.0, 2.0], 4, eps).ok_or("rigged skipped")?.term;

    let checks = [(v0, 0.0, "one-hot"), (v1, (n_rho as f64).ln(), "uniform"), (v2, -(0.4f64).ln(), "rigged")];
    for (got, want, name) in checks {
        if (got - want).abs() > slack {
            return Err(format!("{name}: {got} vs {want}"));
        }
    }
    Ok(format!("0 → {:.2e}, ln 43 → {v1:.6}, −ln 0.4 → {v2:.6}", v0.abs()))
}

fn c5_bound() -> Outcome {
    let table = VoteTable::new(HoughConfig::desk());
    let cap = 43f64.ln() + 1e-6;
    let mut g = rng(5);
    let mut worst = 0.0f64;
    let mut evaluated = 0;
    for case in 0..100 {
        // dense noise down to very sparse speckle
        let density = [1.0, 0.05, 0.005][case % 3];
        let m = Tensor::from_fn(&[64, 160], |_| {
            if g.random_bool(density) {
                g.random_range(0.0..1.0)
            } else {
                0.0
            }
        });
        let pooled = pool_to_table(m, &table).unwrap();
        let h = table.ht_forward(&pooled).unwrap();
        let Some(t) = max_bin_term(h.data(), 43, 1e-8) else { continue };
        evaluated += 1;
        if !(t.term >= 0.0 && t.term <= cap) {
            return Err(format!("channel {case}: term {} outside [0, ln 43]", t.term));
        }
        worst = worst.max(t.term);
    }
    Ok(format!("{evaluated} channels, largest term {worst:.4} ≤ {cap:.4}"))
}

fn c6_line_recovery() -> Outcome {
    let c = HoughConfig::desk();
    let table = VoteTable::new(c);
    let grid = Grid::new(&c);
    let mut g = rng(6);
    let mut lines = 0;
    let mut exact = 0;
    while lines < 50 {
        let j = g.random_range(0..c.n_theta);
        let theta = j as f64 * PI / c.n_theta as f64;
        let (s, co) = theta.sin_cos();
        // a line through a central pixel, snapped to the nearest bin centre
        let (x0, y0) = grid.xy(g.random_range(4..12), g.random_range(10..30));
        let k = grid.bin(x0 * co + y0 * s);
        let rho = k as f64 * grid.delta_rho - grid.rho_max;

        let mut m = vec![0.0f32; c.height * c.width];
        let mut put = |x: f64, y: f64| {
            let col = (x + (c.width as f64 - 1.0) / 2.0).round();
            let row = (y + (c.height as f64 - 1.0) / 2.0).round();
            if (0.0..c.width as f64).contains(&col) && (0.0..c.height as f64).contains(&row) {
                m[row as usize * c.width + col as usize] = 1.0;
            }
        };
        if co.abs() >= s.abs() {
            for row in 0..c.height {
                let y = grid.xy(row, 0).1;
                put((rho - y * s) / co, y);
            }
        } else {
            for col in 0..c.width {
                let x = grid.xy(0, col).0;
                put(x, (rho - x * co) / s);
            }
        }
        if m.iter().filter(|&&v| v > 0.0).count() < 10 {
            continue;
        }
        lines += 1;
        let h = table.ht_forward(&Tensor::new(&[c.height, c.width], m).unwrap()).unwrap();
        let best = global_argmax(&h).unwrap();
        let (bj, bk) = (best.theta_idx as i64, best.rho_idx as i64);
        let (j, k) = (j as i64, k as i64);
        let nt = c.n_theta as i64;
        let nr = c.n_rho as i64;
        let close = [(j, k), (j - nt, nr - 1 - k), (j + nt, nr - 1 - k)]
            .iter()
            .any(|&(cj, ck)| (bj - cj).abs() <= 1 && (bk - ck).abs() <= 1);
        if !close {
            return Err(format!("line {lines}: true bin ({j},{k}), argmax ({bj},{bk})"));
        }
        exact += usize::from(bj == j && bk == k);
    }
    Ok(format!("50/50 lines within ±1 bin, {exact} exact"))
}

fn c7_exactness() -> Outcome {
    let cfg = TrainConfig {
        lr0: 1e-2,
        decay_power: 0.9,
        ..TrainConfig::default()
    };
    let mut checked = 0;
    for total in 1..=60usize {
        for t in 0..=total {
            let want = 1e-2 * (1.0 - t as f64 / total as f64).powf(0.9);
            let got = lr_at(t, total, &cfg).map_err(|e| e.to_string())?;
            if got != want {
                return Err(format!("lr_at({t}, {total}) = {got:e}, expected {want:e}"));
            }
            checked += 1;
        }
    }
    let loss = LossConfig::default();
    if (loss.alpha, loss.beta) != (0.1, 0.01) {
        return Err(format!("default weights are α={} β={}", loss.alpha, loss.beta));
    }
    let mut g = rng(7);
    for _ in 0..1000 {
        let (a, b, c) = (g.random_range(0.0..5.0), g.random_range(0.0..5.0), g.random_range(0.0..5.0));
        let bundle = LossBundle::compose(a, b, c, &loss);
        if bundle.l_total != a + 0.1 * b + 0.01 * c {
            return Err(format!("compose({a}, {b}, {c}) = {}", bundle.l_total));
        }
    }
    Ok(format!("{checked} schedule points and 1000 compositions exact"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn c8_reproduction(scratch: &Path) -> Outcome {
    const SEEDS: [u64; 3] = [0, 1, 2];
    let scene = SceneConfig::default();
    let pool = generate(1000, 1, &scene).map_err(|e| e.to_string())?;
    let test = Dataset::new(generate(300, 2, &scene).map_err(|e| e.to_string())?);

    let mut scores: Vec<(Mode, Vec<f64>)> = Mode::ALL.iter().map(|&m| (m, Vec::new())).collect();
    for seed in SEEDS {
        let (labeled, _) = htlane::split_dataset(pool.len(), 0.10, seed).map_err(|e| e.to_string())?;
        let mut samples = pool.clone();
        for s in samples.iter_mut() {
            s.labeled = false;
        }
        for &i in &labeled {
            samples[i].labeled = true;
        }
        let train_set = Dataset::new(samples);
        for (mode, list) in scores.iter_mut() {
            let cfg = TrainConfig {
                mode: *mode,
                seed,
                ..TrainConfig::default()
            };
            let start = Instant::now();
            let out = train_with(&train_set, &cfg, init_params(seed), |_| {}).map_err(|e| e.to_string())?;
            let m: Metrics = evaluate(&out.params, cfg.hough, &test).map_err(|e| e.to_string())?;
            println!(
                "    seed {seed} {:<10} lane_f1 {:.4}  pixel_f1 {:.4}  exist_acc {:.4}  ({:.0}s)",
                mode.to_string(),
                m.lane_f1,
                m.pixel_f1,
                m.exist_acc,
                start.elapsed().as_secs_f64()
            );
            if seed == SEEDS[0] && *mode == Mode::Ht {
                let ckpt = Checkpoint {
                    config: RunConfig { scene, train: cfg },
                    params: out.params.clone(),
                    epoch: out.epochs as u32,
                    rng_state: out.rng_state,
                };
                ckpt.save(&scratch.join("ht_seed0.htln")).map_err(|e| e.to_string())?;
                htlane::save_dataset(&scratch.join("train"), &train_set).map_err(|e| e.to_string())?;
            }
            list.push(m.lane_f1);
        }
    }
    let med = |mode: Mode| median(scores.iter().find(|(m, _)| *m == mode).unwrap().1.clone());
    let (sup, ht, pseudo, pseudo_ht) = (med(Mode::Supervised), med(Mode::Ht), med(Mode::Pseudo), med(Mode::PseudoHt));
    let summary = format!(
        "median lane_f1: supervised {sup:.4}, ht {ht:.4} ({:+.2} pts), pseudo {pseudo:.4}, pseudo_ht {pseudo_ht:.4} ({:+.2} pts)",
        100.0 * (ht - sup),
        100.0 * (pseudo_ht - pseudo)
    );
    if ht - sup >= 0.02 && pseudo_ht >= pseudo - 0.005 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

/// A model from the reproduction run, applied through the CLI to the
/// training images it was fit on.
fn predict_golden(scratch: &Path) -> Outcome {
    let ckpt = scratch.join("ht_seed0.htln");
    if !ckpt.exists() {
        return Err("needs the criterion 8 model".into());
    }
    let data = htlane::load_dataset(&scratch.join("train")).map_err(|e| e.to_string())?;
    let mut hits = 0;
    let mut tried = 0;
    for s in data.samples.iter().filter(|s| s.labeled).take(20) {
        let out = run(&[
            "predict",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--image",
            scratch.join(format!("train/images/{}.pgm", s.id)).to_str().unwrap(),
            "--out-prefix",
            scratch.join(format!("pred_{}", s.id)).to_str().unwrap(),
        ])?;
        let drawn: usize = out.split(',').nth(1).and_then(|v| v.parse().ok()).ok_or(out.clone())?;
        let truth = s.exist.iter().filter(|&&e| e).count();
        tried += 1;
        hits += usize::from(drawn + 1 >= truth);
    }
    let summary = format!("{hits}/{tried} labeled training images show at least (true lanes − 1) lanes");
    if hits * 10 >= tried * 9 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn run(args: &[&str]) -> Result<String, String> {
    run_env(args, None)
}

fn run_env(args: &[&str], threads: Option<&str>) -> Result<String, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_htlane"));
    cmd.args(args).env_remove("HTLANE_THREADS");
    if let Some(t) = threads {
        cmd.env("HTLANE_THREADS", t);
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn c9_determinism(scratch: &Path) -> Outcome {
    let data = scratch.join("det_data");
    let d = data.to_str().unwrap();
    run(&["gen", "--out", d, "--n", "48", "--seed", "9"])?;
    let mut results = Vec::new();
    for (i, threads) in [None, None, Some("3")].into_iter().enumerate() {
        let ckpt = scratch.join(format!("det_{i}.htln"));
        let line = run_env(
            &[
                "train",
                "--data",
                d,
                "--mode",
                "pseudo_ht",
                "--labeled-frac",
                "0.25",
                "--seed",
                "5",
                "--out",
                ckpt.to_str().unwrap(),
                "--set",
                "train.epochs_phase1=3",
                "--set",
                "train.epochs_phase2=2",
            ],
            threads,
        )?;
        let bytes = fs::read(&ckpt).map_err(|e| e.to_string())?;
        let csv = fs::read(ckpt.with_extension("csv")).map_err(|e| e.to_string())?;
        results.push((line, bytes, csv));
    }
    let (first, rest) = results.split_first().unwrap();
    for (i, r) in rest.iter().enumerate() {
        if r.1 != first.1 || r.2 != first.2 || r.0 != first.0 {
            return Err(format!("run {} differs from run 0", i + 1));
        }
    }
    let digest = first.0.rsplit(',').next().unwrap_or("").to_string();
    Ok(format!("3 runs (1, 1, 3 threads) byte-identical, checkpoint {}", &digest[..16.min(digest.len())]))
}

fn main() -> ExitCode {
    let selected: Option<Vec<String>> = std::env::var("HTLANE_ACCEPT")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let wants = |id: &str| selected.as_ref().is_none_or(|s| s.iter().any(|x| x == id));
    let scratch = tempfile::tempdir().expect("temp dir");
    let dir = scratch.path();

    type Check<'a> = (&'a str, &'a str, Duration, Box<dyn Fn() -> Outcome + 'a>);
    let checks: Vec<Check> = vec![
        ("1", "HT equals the per-pixel voting loop", Duration::from_secs(10), Box::new(c1_oracle)),
        ("2", "adjoint identity", Duration::from_secs(10), Box::new(c2_adjoint)),
        ("3", "gradient suite", Duration::from_secs(300), Box::new(c3_gradients)),
        ("4", "max-bin arithmetic", Duration::from_secs(1), Box::new(c4_max_bin_arithmetic)),
        ("5", "max-bin loss bound", Duration::from_secs(10), Box::new(c5_bound)),
        ("6", "straight line recovery", Duration::from_secs(30), Box::new(c6_line_recovery)),
        ("7", "schedule and loss composition", Duration::from_secs(10), Box::new(c7_exactness)),
        ("8", "desk-scale semi-supervised ordering", Duration::from_secs(7200), Box::new(|| c8_reproduction(dir))),
        ("8p", "predict overlay on a trained model", Duration::from_secs(120), Box::new(|| predict_golden(dir))),
        ("9", "CLI determinism", Duration::from_secs(300), Box::new(|| c9_determinism(dir))),
    ];

    let mut failed = 0;
    for (id, name, budget, check) in &checks {
        let base = id.trim_end_matches('p');
        if !wants(id) && !wants(base) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let (verdict, detail) = match result {
            Ok(d) if took <= *budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over the {}s budget", budget.as_secs())),
            Err(d) => ("FAIL", d),
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!("criterion {id:<2} {verdict}  {name} [{:.1}s]: {detail}", took.as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
