//! Acceptance criteria. Every test prints one `[PASS]` or `[FAIL]` line
//! (straight to stderr, so it shows even when output is captured) and then
//! asserts at the stated tolerance.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use amad::parallel;
use amad::reports;
use amad_core::data::{synth_generate, SynthSpec};
use amad_core::gradcheck::{compare, describe, numeric_param_grad};
use amad_core::harness::{run_pipeline, Dataset, PipelineConfig, ABLATION_ROWS};
use amad_core::model::{automask_logits, init_params, model_forward, positions, AttentionPack, ModelConfig, ParamSet};
use amad_core::objective::{cad_from, cad_term, contrastive_loss, js_divergence, maxmin_losses, recon_term};
use amad_core::score::{flag, point_adjust, precision_recall_f1, threshold_from_percentile};
use amad_core::{Graph, Result, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: &str, what: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] {id} {what}: {detail}");
    assert!(pass, "{id} {what}: {detail}");
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0f64..4.0).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

// AC1 ------------------------------------------------------------------

const LAMBDA: f64 = 3.0;
const TAU: f64 = 0.07;

fn ac1_config() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        seed: 11,
        ..ModelConfig::desk(3, 6)
    }
}

/// `loss_min + loss_max + contrastive` with the detached attention supplied
/// as constants, which is the function the tape differentiates.
fn frozen_objective(
    cfg: &ModelConfig,
    weights: &ParamSet<Tensor>,
    x: &Tensor,
    frozen: &(Vec<Tensor>, Vec<Tensor>),
) -> Result<f64> {
    let mut p = init_params(cfg, cfg.seed)?;
    p.weights = weights.clone();
    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let xv = g.constant(x);
    let fwd = model_forward(&mut g, cfg, &bound, xv)?;
    let a0: Vec<Var> = frozen.0.iter().map(|t| g.constant(t)).collect();
    let s0: Vec<Var> = frozen.1.iter().map(|t| g.constant(t)).collect();
    let cad_min = cad_from(&mut g, &fwd.attn.automask, &s0)?;
    let cad_max = cad_from(&mut g, &a0, &fwd.attn.self_attn)?;
    let r = recon_term(&mut g, xv, fwd.recon)?;
    let tmin = cad_term(&mut g, cad_min, -LAMBDA);
    let tmax = cad_term(&mut g, cad_max, LAMBDA);
    let c = contrastive_loss(&mut g, &fwd.attn, TAU)?;
    Ok(2.0 * g.scalar(r) + g.scalar(tmin) + g.scalar(tmax) + g.scalar(c))
}

#[test]
fn ac1_gradient_finite_difference() {
    let start = Instant::now();
    let cfg = ac1_config();
    let params = init_params(&cfg, cfg.seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[2, 6, 3], 1.0);

    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let xv = g.constant(&x);
    let fwd = model_forward(&mut g, &cfg, &bound, xv).unwrap();
    let frozen = (
        fwd.attn.automask.iter().map(|&a| g.tensor(a)).collect::<Vec<_>>(),
        fwd.attn.self_attn.iter().map(|&s| g.tensor(s)).collect::<Vec<_>>(),
    );
    let mm = maxmin_losses(&mut g, xv, &fwd, LAMBDA).unwrap();
    let c = contrastive_loss(&mut g, &fwd.attn, TAU).unwrap();
    let both = g.add(mm.min, mm.max).unwrap();
    let total = g.add(both, c).unwrap();
    g.backward(total).unwrap();
    let analytic: Vec<Vec<f64>> = bound
        .weights
        .entries()
        .iter()
        .map(|(_, &v)| g.grad(v).unwrap().to_vec())
        .collect();
    let numeric =
        numeric_param_grad(&params.weights, 1e-5, |w| frozen_objective(&cfg, w, &x, &frozen)).unwrap();
    let cmp = compare(&analytic, &numeric, 1e-6);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "AC1",
        "gradient check",
        cmp.max_rel_err < 1e-4 && secs < 60.0,
        &format!(
            "max rel err {:.3e} over {} entries (worst {}), {secs:.2}s",
            cmp.max_rel_err,
            cmp.checked,
            describe(&params.weights, cmp.worst)
        ),
    );
}

// AC2 ------------------------------------------------------------------

#[test]
fn ac2_automask_logits_shift_invariant() {
    let (b, n, dm, h, d) = (2, 12, 16, 4, 3);
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: dm,
        n_heads: h,
        ..ModelConfig::desk(d, n)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = random_tensor(&mut rng, &[b, n, dm], 1.0);
        let wq = random_tensor(&mut rng, &[dm, dm], 0.5);
        let wk = random_tensor(&mut rng, &[dm, dm], 0.5);
        let omega = Tensor::new([h], (0..h).map(|_| rng.random_range(0.1..3.0)).collect()).unwrap();
        let logits_at = |offset: f64| {
            let mut g = Graph::new();
            let (xv, qv, kv, ov) = (g.constant(&x), g.constant(&wq), g.constant(&wk), g.constant(&omega));
            let q = g.matmul(xv, qv).unwrap();
            let k = g.matmul(xv, kv).unwrap();
            let l = automask_logits(&mut g, &cfg, q, k, ov, &positions(n, offset)).unwrap();
            g.value(l).to_vec()
        };
        let base = logits_at(0.0);
        for s in [1.0, 5.0, 50.0] {
            let shifted = logits_at(s);
            for (a, c) in base.iter().zip(&shifted) {
                worst = worst.max((a - c).abs());
            }
        }
    }
    verdict(
        "AC2",
        "AutoMask logit shift invariance",
        worst < 1e-8,
        &format!("max |diff| {worst:.3e} over 20 draws, shifts 1/5/50"),
    );
}

// AC3 ------------------------------------------------------------------

#[test]
fn ac3_js_and_cad_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ln2 = std::f64::consts::LN_2;
    let (mut asym, mut max_js, mut self_js, mut min_js): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, f64::MAX);
    for _ in 0..10_000 {
        let n = rng.random_range(2..20);
        let p = random_distribution(&mut rng, n);
        let q = random_distribution(&mut rng, n);
        let pq = js_divergence(&p, &q).unwrap();
        let qp = js_divergence(&q, &p).unwrap();
        asym = asym.max((pq - qp).abs());
        max_js = max_js.max(pq);
        min_js = min_js.min(pq);
        self_js = self_js.max(js_divergence(&p, &p).unwrap().abs());
    }

    let mut disjoint_err: f64 = 0.0;
    for n in 2..12 {
        let half = n / 2;
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        let pw = random_distribution(&mut rng, half);
        let qw = random_distribution(&mut rng, n - half);
        p[..half].copy_from_slice(&pw);
        q[half..].copy_from_slice(&qw);
        disjoint_err = disjoint_err.max((js_divergence(&p, &q).unwrap() - ln2).abs());
    }

    let mut g = Graph::new();
    let logits = g.constant(&random_tensor(&mut rng, &[2, 3, 5, 5], 3.0));
    let a = g.softmax_last_axis(logits).unwrap();
    let cad = cad_from(&mut g, &[a, a], &[a, a]).unwrap();
    let cad_exact_zero = g.value(cad).iter().all(|&v| v == 0.0);

    let pass = asym < 1e-12
        && self_js == 0.0
        && max_js <= ln2 + 1e-12
        && min_js >= 0.0
        && cad_exact_zero
        && disjoint_err < 1e-9;
    verdict(
        "AC3",
        "JS/CAD properties",
        pass,
        &format!(
            "asymmetry {asym:.3e}, JS(p,p) max {self_js:e}, JS range [{min_js:.3e}, {max_js:.6}] vs ln2 {ln2:.6}, \
             CAD(A,A)=0 exactly: {cad_exact_zero}, disjoint err {disjoint_err:.3e}"
        ),
    );
}

// AC4 ------------------------------------------------------------------

fn bitwise_zero(g: &Graph, v: Var) -> bool {
    g.grad(v).is_none_or(|gr| gr.iter().all(|x| x.to_bits() == 0))
}

fn nonzero(g: &Graph, v: Var) -> bool {
    g.grad(v).is_some_and(|gr| gr.iter().any(|&x| x != 0.0))
}

#[test]
fn ac4_detach_exactness() {
    let mut details = Vec::new();
    let mut pass = true;
    for n_layers in [1, 2] {
        let cfg = ModelConfig {
            n_layers,
            d_model: 16,
            n_heads: 2,
            seed: 4,
            ..ModelConfig::desk(3, 8)
        };
        let params = init_params(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, &[3, 8, 3], 1.0);
        // The stop-gradient cuts the path inside each layer, so the exact
        // zero holds for the final layer's projections.
        let last = n_layers - 1;
        for phase in ["min", "max"] {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let xv = g.constant(&x);
            let fwd = model_forward(&mut g, &cfg, &bound, xv).unwrap();
            let mm = maxmin_losses(&mut g, xv, &fwd, LAMBDA).unwrap();
            let l = &bound.weights.layers[last];
            let (zero, live): (Vec<Var>, Vec<Var>) = if phase == "min" {
                g.backward(mm.min_cad_term).unwrap();
                (vec![l.w_q, l.w_k], vec![l.automask_w_q, l.automask_w_k, l.omega])
            } else {
                g.backward(mm.max_cad_term).unwrap();
                (vec![l.automask_w_q, l.automask_w_k, l.omega], vec![l.w_q, l.w_k])
            };
            let zero_ok = zero.iter().all(|&v| bitwise_zero(&g, v));
            let live_ok = live.iter().all(|&v| nonzero(&g, v));
            pass &= zero_ok && live_ok;
            details.push(format!("L={n_layers} {phase}: detached zero {zero_ok}, other branch live {live_ok}"));
        }
    }
    verdict("AC4", "detach exactness", pass, &details.join("; "));
}

// AC5 ------------------------------------------------------------------

#[test]
fn ac5_contrastive_constant_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, n) = (2, 5);
    let mut worst: f64 = 0.0;
    for (b, layers) in [(2usize, 1usize), (4, 3)] {
        for tau in [0.07, 0.5] {
            let mut g = Graph::new();
            let mut pack = AttentionPack::default();
            for _ in 0..layers {
                for target in [&mut pack.automask, &mut pack.self_attn] {
                    let one: Vec<f64> = (0..h * n).flat_map(|_| random_distribution(&mut rng, n)).collect();
                    let data: Vec<f64> = (0..b).flat_map(|_| one.iter().copied()).collect();
                    target.push(g.constant_from(vec![b, h, n, n], data));
                }
            }
            let c = contrastive_loss(&mut g, &pack, tau).unwrap();
            let expected = layers as f64 * (b as f64).ln() / b as f64;
            worst = worst.max((g.scalar(c) - expected).abs());
        }
    }
    verdict(
        "AC5",
        "contrastive loss under batch-constant attention",
        worst <= 1e-9,
        &format!("max |loss - L ln B / B| {worst:.3e} for (B,L) in {{(2,1),(4,3)}}"),
    );
}

// AC6 ------------------------------------------------------------------

#[test]
fn ac6_thresholding_and_adjustment() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut scores: Vec<f64> = (0..1000).map(|i| i as f64 * 0.37 + 1.0).collect();
    scores.shuffle(&mut rng);
    let thr = threshold_from_percentile(&scores, 1.0).unwrap();
    let flagged = flag(&scores, thr).iter().filter(|&&f| f == 1).count();

    let mut violations = 0;
    for _ in 0..100 {
        let len = rng.random_range(20..400);
        let mut labels = vec![0u8; len];
        for _ in 0..rng.random_range(0..5) {
            let start = rng.random_range(0..len);
            let width = rng.random_range(1..30).min(len - start);
            labels[start..start + width].iter_mut().for_each(|l| *l = 1);
        }
        let p = rng.random_range(0.0..0.3);
        let flags: Vec<u8> = (0..len).map(|_| u8::from(rng.random_bool(p))).collect();
        let raw = precision_recall_f1(&flags, &labels).unwrap();
        let adj = precision_recall_f1(&point_adjust(&flags, &labels).unwrap(), &labels).unwrap();
        if adj.f1 < raw.f1 {
            violations += 1;
        }
    }
    verdict(
        "AC6",
        "percentile threshold and point adjustment",
        flagged == 10 && violations == 0,
        &format!("{flagged} of 1000 flagged at ar=1; adjusted F1 < raw F1 in {violations} of 100 pairs"),
    );
}

// AC7 ------------------------------------------------------------------

/// Adjusted F1 of the desk benchmark as calibrated on this implementation.
const DESK_F1_PINNED: f64 = 1.0;

#[test]
fn ac7_desk_benchmark() {
    let data = synth_generate(7, &SynthSpec::default()).unwrap();
    let cfg = PipelineConfig::desk(3);
    let mut runs = Vec::new();
    let mut times = Vec::new();
    for _ in 0..2 {
        let t = Instant::now();
        runs.push(run_pipeline(&data.train, &data.test, &cfg).unwrap());
        times.push(t.elapsed().as_secs_f64());
    }
    let (a, b) = (&runs[0], &runs[1]);
    let deterministic = a.report.scores.iter().zip(&b.report.scores).all(|(x, y)| x.to_bits() == y.to_bits())
        && a.adjusted == b.adjusted
        && a.model.params == b.model.params;
    let f1 = a.adjusted.f1;
    let pass = f1 >= 0.90
        && (f1 - DESK_F1_PINNED).abs() <= 0.02
        && times.iter().all(|&t| t < 600.0)
        && a.log.epochs.len() <= 10
        && deterministic;
    verdict(
        "AC7",
        "desk benchmark",
        pass,
        &format!(
            "adjusted F1 {f1:.4} (pinned {DESK_F1_PINNED} +-0.02, P {:.4} R {:.4}), epochs {}, \
             times {:.1}s/{:.1}s, deterministic {deterministic}",
            a.adjusted.precision,
            a.adjusted.recall,
            a.log.epochs.len(),
            times[0],
            times[1]
        ),
    );
}

// AC8 ------------------------------------------------------------------

fn amad(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_amad"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_contract_csv(path: &Path, len: usize, anomaly_at: Option<usize>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::from("temperature,label,pressure,flow\n");
    for t in 0..len {
        let phase = t as f64 * 0.2;
        let mut temp = phase.sin() + rng.random_range(-0.05..0.05);
        let label = anomaly_at.is_some_and(|a| (a..a + 5).contains(&t));
        if label {
            temp += 4.0;
        }
        let pressure = if t % 97 == 13 {
            "NaN".to_string()
        } else {
            (phase.cos() * 2.0 + rng.random_range(-0.05..0.05)).to_string()
        };
        let flow = 0.5 * (phase * 0.5).sin();
        text.push_str(&format!("{temp},{},{pressure},{flow}\n", u8::from(label)));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn ac8_csv_ingest_to_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = (dir.path().join("train.csv"), dir.path().join("test.csv"));
    write_contract_csv(&train, 400, None, 8);
    write_contract_csv(&test, 200, Some(120), 9);
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let run = dir.path().join("run");
    let out = amad(&[
        "train", "--preset", "desk", "--train", &s(&train), "--seed", "8", "--out", &s(&run),
        "--set", "model.d_model=8", "--set", "model.n_heads=2", "--set", "model.n_layers=1",
        "--set", "model.window_len=20", "--set", "train.max_epochs=2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let scored = dir.path().join("scored");
    let out = amad(&[
        "score", "--checkpoint", &s(&run.join("checkpoint.amad")), "--series", &s(&test),
        "--train", &s(&train), "--out", &s(&scored),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval = std::fs::read_to_string(scored.join("eval.csv")).unwrap();
    let mut lines = eval.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let cols: Vec<usize> = ["P", "R", "F1"]
        .iter()
        .filter_map(|c| header.iter().position(|h| h == c))
        .collect();
    let rows: Vec<Vec<f64>> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            cols.iter().map(|&i| f[i].parse::<f64>().unwrap()).collect()
        })
        .collect();
    let in_range = rows.iter().flatten().all(|v| (0.0..=1.0).contains(v));
    verdict(
        "AC8",
        "CSV ingest emits P/R/F1",
        cols.len() == 3 && rows.len() == 2 && in_range,
        &format!("columns {header:?}, rows {rows:?}"),
    );
}

// AC9 ------------------------------------------------------------------

#[test]
fn ac9_ablation_matrix() {
    let data = synth_generate(7, &SynthSpec::default()).unwrap();
    let datasets = vec![Dataset {
        name: "synth".into(),
        train: data.train,
        test: data.test,
    }];
    let base = PipelineConfig::desk(3);
    let workers = parallel::worker_count(ABLATION_ROWS.len()).unwrap();
    let t = Instant::now();
    let results = parallel::ablation(&ABLATION_ROWS, &datasets, &base, workers);
    let secs = t.elapsed().as_secs_f64();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ablation.csv");
    reports::save_ablation(&csv, &["synth".into()], &results).unwrap();
    let table_rows = std::fs::read_to_string(&csv).unwrap().lines().count() - 1;

    let f1 = |i: usize| results[i].metrics[0].as_ref().map(|m| m.f1).unwrap_or(f64::NAN);
    let all_ok = results.iter().all(|r| r.metrics.iter().all(|m| m.is_ok()));
    let (off, on) = (f1(0), f1(5));
    // The plain transformer row must never touch CAD or the contrastive loss.
    let off_clean = results[0].cad_evaluations == 0 && results[0].contrastive_evaluations == 0;
    let rows: Vec<String> = results
        .iter()
        .map(|r| {
            format!(
                "{}{}{}{}={:.3}",
                r.row.min as u8,
                r.row.max as u8,
                r.row.contrastive as u8,
                r.row.automask as u8,
                r.avg_f1.unwrap_or(f64::NAN)
            )
        })
        .collect();
    verdict(
        "AC9",
        "ablation matrix",
        all_ok && table_rows == 6 && off_clean && on >= off,
        &format!(
            "all-on F1 {on:.4} vs all-off {off:.4}; all-off CAD/contrastive evaluations zero: {off_clean}; rows {}; {secs:.0}s",
            rows.join(" ")
        ),
    );
}
