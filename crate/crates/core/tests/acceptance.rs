//! Acceptance gate: one PASS/FAIL line per criterion. Exits non-zero when
//! any criterion fails. Run with `cargo test -p pe-lab-core --test acceptance`.
//!
//! Criterion 8 trains nine small models and takes several minutes; set
//! `PE_LAB_SKIP_TRAINING=1` to report it as skipped.

use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array3;
use pe_lab::analysis::{appendix_derivatives, appendix_inequality_holds, verify_appendix_inequality};
use pe_lab::attention::{attention_backward, attention_forward, check_multiplicative_equivalence, AttentionInput};
use pe_lab::bias::{
    bias_csv, build_bias, decode_cache, encode_cache, multiplicative_view, parse_csv, BiasForm,
    BiasMeta, BiasPack,
};
use pe_lab::experiment::ExperimentConfig;
use pe_lab::fusion::{fused_kernel, fused_log_bias, grad_fusion, make_preset, FusionPreset, FusionSpec, PRESET_NAMES};
use pe_lab::kernel::{eval_log_kernel, grad_log_kernel_params, KernelKind};
use pe_lab::lm::{batch_loss, loss_and_grads, ModelConfig, Params, RunSpec};
use pe_lab::slopes::{slopes_for_heads, SlopeSchedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// training is allocation-heavy; the system allocator costs ~40% per step here
#[cfg(not(target_env = "msvc"))]
#[global_allocator]
static GLOBAL: tikv_jemallocator::Jemalloc = tikv_jemallocator::Jemalloc;

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

fn within_time(o: Outcome, elapsed: Duration, budget: Duration) -> Outcome {
    let fast = elapsed <= budget;
    outcome(
        o.pass && fast,
        format!("{}; runtime {:.2?} (budget {:.0?})", o.detail, elapsed, budget),
    )
}

fn geometric(heads: usize) -> pe_lab::slopes::SlopeVector {
    slopes_for_heads(&SlopeSchedule::Geometric { heads }).unwrap()
}

fn preset(name: &str, heads: usize) -> FusionPreset {
    FusionPreset::from_name(name, &geometric(heads)).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-9 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

fn random3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize), scale: f64) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.random_range(-scale..scale))
}

fn randomized_specs(name: &str, heads: usize, rng: &mut ChaCha8Rng) -> Vec<FusionSpec> {
    let p = preset(name, heads);
    (0..heads)
        .map(|h| {
            let mut spec = make_preset(&p, h).unwrap();
            for c in 0..spec.components().len() {
                let kind = &spec.components()[c].kind;
                let vals: Vec<f64> = kind
                    .learnable_params()
                    .iter()
                    .zip(kind.positive_params())
                    .map(|(v, pos)| if pos { v * rng.random_range(0.3..3.0) } else { rng.random_range(-1.0..1.0) })
                    .collect();
                spec.set_kernel_params(c, &vals).unwrap();
            }
            spec
        })
        .collect()
}

// 1 ------------------------------------------------------------------------
fn anchors() -> Outcome {
    let head = 5;
    let alibi = fused_kernel(&make_preset(&preset("alibi", 8), head).unwrap(), 511);
    let mep = fused_kernel(&make_preset(&preset("mep-free", 8), head).unwrap(), 511);
    let gauss = fused_kernel(&make_preset(&preset("gaussian", 8), head).unwrap(), 511);
    let pass = (alibi - 0.00035).abs() <= 5e-5 && (mep - 0.0062).abs() <= 5e-4 && gauss < 1e-12;
    outcome(
        pass,
        format!("alibi {alibi:.6} (0.00035±5e-5), mep-free {mep:.6} (0.0062±5e-4), gaussian {gauss:.3e} (<1e-12)"),
    )
}

// 2 ------------------------------------------------------------------------
fn slope_schedule() -> Outcome {
    let got = geometric(8);
    let expected: Vec<f64> = (1..=8).map(|n| 2f64.powi(-n)).collect();
    let exact = got
        .as_slice()
        .iter()
        .zip(&expected)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    outcome(exact && got.len() == 8, format!("{:?}", got.as_slice()))
}

// 3 ------------------------------------------------------------------------
fn equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let name = PRESET_NAMES[case % PRESET_NAMES.len()];
        let heads = rng.random_range(1..5);
        let len = rng.random_range(1..=128);
        let dh = rng.random_range(1..9);
        let specs = randomized_specs(name, heads, &mut rng);
        let pack = BiasPack::from_specs(specs, len, BiasMeta::default()).unwrap();
        let shape = (heads, len, dh);
        let input = AttentionInput::new(
            random3(&mut rng, shape, 2.0),
            random3(&mut rng, shape, 2.0),
            random3(&mut rng, shape, 2.0),
            &pack,
        )
        .unwrap();
        worst = worst.max(check_multiplicative_equivalence(&input).unwrap());
    }
    outcome(worst < 1e-10, format!("100 cases, max deviation {worst:.2e} (<1e-10)"))
}

// 4 ------------------------------------------------------------------------
fn weight_scale_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for name in PRESET_NAMES {
        let (heads, len, dh) = (4, 128, 8);
        let specs = randomized_specs(name, heads, &mut rng);
        let q = random3(&mut rng, (heads, len, dh), 1.0);
        let k = random3(&mut rng, (heads, len, dh), 1.0);
        let v = random3(&mut rng, (heads, len, dh), 1.0);
        let run = |specs: Vec<FusionSpec>| {
            let pack = BiasPack::from_specs(specs, len, BiasMeta::default()).unwrap();
            attention_forward(&AttentionInput::new(q.clone(), k.clone(), v.clone(), &pack).unwrap())
                .unwrap()
                .post_softmax
        };
        let base = run(specs.clone());
        for c in [0.33 * 3.0, 10.0, 1e-3] {
            let scaled = run(specs.iter().map(|s| s.scaled_weights(c).unwrap()).collect());
            worst = worst.max((&scaled - &base).iter().fold(0.0, |m, x| m.max(x.abs())));
        }
    }
    outcome(worst < 1e-10, format!("c in {{0.99, 10, 1e-3}}, max change {worst:.2e} (<1e-10)"))
}

// 5 ------------------------------------------------------------------------
fn kernel_grad_worst(rng: &mut ChaCha8Rng, instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let kind = match i % 3 {
            0 => KernelKind::KerpleLog {
                r1: rng.random_range(0.1..3.0),
                r2: rng.random_range(0.1..3.0),
            },
            1 => KernelKind::T5Bucket {
                num_buckets: 6,
                table: (0..7).map(|_| rng.random_range(-2.0..2.0)).collect(),
            },
            _ => KernelKind::KerpleLog {
                r1: rng.random_range(0.01..0.5),
                r2: rng.random_range(1.0..8.0),
            },
        };
        let d = rng.random_range(0..40);
        let params = kind.learnable_params();
        let g = grad_log_kernel_params(&kind, d).values();
        for j in 0..params.len() {
            let h = 1e-6 * params[j].abs().max(1.0);
            let mut p = params.clone();
            p[j] += h;
            let mut up = kind.clone();
            up.set_learnable_params(&p).unwrap();
            p[j] -= 2.0 * h;
            let mut down = kind.clone();
            down.set_learnable_params(&p).unwrap();
            let fd = (eval_log_kernel(&up, d) - eval_log_kernel(&down, d)) / (2.0 * h);
            worst = worst.max(rel_err(g[j], fd));
        }
    }
    worst
}

fn fusion_weight_grad_worst(rng: &mut ChaCha8Rng, instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let name = ["mep-free", "mep-param"][i % 2];
        let spec = randomized_specs(name, 8, rng).swap_remove(rng.random_range(0..8));
        let free = spec.scaled_weights(1.0).unwrap();
        let d = rng.random_range(0..200);
        let g = grad_fusion(&free, d);
        let w = free.effective_weights();
        for j in 0..w.len() {
            // log F is smooth in each weight: truncation error is at most
            // (h/w)²/3 relative, while a tiny step drowns negligible components in roundoff
            let h = 1e-3 * w[j];
            let mut ww = w.clone();
            ww[j] += h;
            let mut up = free.clone();
            up.set_weights(&ww).unwrap();
            ww[j] -= 2.0 * h;
            let mut down = free.clone();
            down.set_weights(&ww).unwrap();
            let fd = (fused_log_bias(&up, d) - fused_log_bias(&down, d)) / (2.0 * h);
            worst = worst.max(rel_err(g.weights[j], fd));
        }
    }
    worst
}

fn attention_objective(q: &Array3<f64>, k: &Array3<f64>, v: &Array3<f64>, specs: &[FusionSpec], up: &Array3<f64>) -> f64 {
    let pack = BiasPack::from_specs(specs.to_vec(), q.dim().1, BiasMeta::default()).unwrap();
    let out = attention_forward(&AttentionInput::new(q.clone(), k.clone(), v.clone(), &pack).unwrap()).unwrap();
    (&out.out * up).sum()
}

fn attention_grad_worst(rng: &mut ChaCha8Rng, instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let name = PRESET_NAMES[i % PRESET_NAMES.len()];
        let shape = (2, 8, 3);
        let q = random3(rng, shape, 1.0);
        let k = random3(rng, shape, 1.0);
        let v = random3(rng, shape, 1.0);
        let up = random3(rng, shape, 1.0);
        let specs = randomized_specs(name, 2, rng);
        let pack = BiasPack::from_specs(specs.clone(), 8, BiasMeta::default()).unwrap();
        let input = AttentionInput::new(q.clone(), k.clone(), v.clone(), &pack).unwrap();
        let out = attention_forward(&input).unwrap();
        let g = attention_backward(&input, &out, &up).unwrap();
        let h = 1e-6;
        for (which, analytic) in [(0, &g.dq), (1, &g.dk), (2, &g.dv)] {
            for idx in ndarray::indices(shape) {
                let mut arrays = [q.clone(), k.clone(), v.clone()];
                arrays[which][idx] += h;
                let plus = attention_objective(&arrays[0], &arrays[1], &arrays[2], &specs, &up);
                arrays[which][idx] -= 2.0 * h;
                let minus = attention_objective(&arrays[0], &arrays[1], &arrays[2], &specs, &up);
                worst = worst.max(rel_err(analytic[idx], (plus - minus) / (2.0 * h)));
            }
        }
        for (head, spec) in specs.iter().enumerate() {
            for c in 0..spec.components().len() {
                let params = spec.components()[c].kind.learnable_params();
                let analytic = g.bias_params[head].kernels[c].values();
                for j in 0..params.len() {
                    let step = h * params[j].abs().max(1.0);
                    let mut p = params.clone();
                    let mut perturbed = specs.clone();
                    p[j] += step;
                    perturbed[head].set_kernel_params(c, &p).unwrap();
                    let plus = attention_objective(&q, &k, &v, &perturbed, &up);
                    p[j] -= 2.0 * step;
                    perturbed[head].set_kernel_params(c, &p).unwrap();
                    let minus = attention_objective(&q, &k, &v, &perturbed, &up);
                    worst = worst.max(rel_err(analytic[j], (plus - minus) / (2.0 * step)));
                }
            }
        }
    }
    worst
}

fn micro_lm_grad_worst(rng: &mut ChaCha8Rng, instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let name = ["mep-param", "kerple-log", "t5", "mep-free"][i % 4];
        let cfg = ModelConfig {
            vocab: 11,
            d_model: 8,
            heads: 2,
            layers: 2,
            d_ff: 12,
            train_len: 8,
            preset: preset(name, 2),
            seed: i as u64,
        };
        let mut params = Params::init(&cfg).unwrap();
        let vals: Vec<f64> = params
            .bias_values()
            .iter()
            .zip(params.bias_positive())
            .map(|(v, p)| if p { v * rng.random_range(0.5..2.0) } else { rng.random_range(-0.5..0.5) })
            .collect();
        params.set_bias_values(&vals).unwrap();
        let seq: Vec<usize> = (0..9).map(|_| rng.random_range(0..11)).collect();
        let windows = [seq.as_slice()];
        let (_, grads) = loss_and_grads(&params, &cfg, &windows).unwrap();
        let h = 1e-5;
        // every bias parameter plus a random sample of weights
        for j in 0..vals.len() {
            let mut p = params.clone();
            let mut v = vals.clone();
            v[j] += h;
            p.set_bias_values(&v).unwrap();
            let plus = batch_loss(&p, &cfg, &windows).unwrap();
            v[j] -= 2.0 * h;
            p.set_bias_values(&v).unwrap();
            let minus = batch_loss(&p, &cfg, &windows).unwrap();
            worst = worst.max(rel_err(grads.bias[j], (plus - minus) / (2.0 * h)));
        }
        let analytic: Vec<Vec<f64>> = grads.weights.slices().iter().map(|s| s.to_vec()).collect();
        for _ in 0..60 {
            let t = rng.random_range(0..analytic.len());
            let j = rng.random_range(0..analytic[t].len());
            let mut p = params.clone();
            p.weights.slices_mut()[t][j] += h;
            let plus = batch_loss(&p, &cfg, &windows).unwrap();
            p.weights.slices_mut()[t][j] -= 2.0 * h;
            let minus = batch_loss(&p, &cfg, &windows).unwrap();
            worst = worst.max(rel_err(analytic[t][j], (plus - minus) / (2.0 * h)));
        }
    }
    worst
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 24;
    let kernel = kernel_grad_worst(&mut rng, n);
    let weights = fusion_weight_grad_worst(&mut rng, n);
    let attention = attention_grad_worst(&mut rng, n);
    let lm = micro_lm_grad_worst(&mut rng, n);
    let pass = kernel < 1e-4 && weights < 1e-4 && attention < 1e-4 && lm < 1e-3;
    outcome(
        pass,
        format!(
            "{n} instances each; max rel err kernel {kernel:.1e}, weights {weights:.1e}, attention {attention:.1e} (<1e-4), micro LM {lm:.1e} (<1e-3)"
        ),
    )
}

// 6 ------------------------------------------------------------------------
fn appendix() -> Outcome {
    let step = 0.005;
    let report = verify_appendix_inequality(1.0, 1.0, 50.0, step).unwrap();
    let (m3, e3) = appendix_derivatives(1.0, 1.0, 3.0);
    let (m1, e1) = appendix_derivatives(1.0, 1.0, 1.0);
    let hand = (m3.abs() - 0.0416).abs() < 5e-5
        && (e3.abs() - 0.0498).abs() < 5e-5
        && (m1.abs() - 0.487).abs() < 5e-4
        && (e1.abs() - 0.368).abs() < 5e-4;
    let first = (2.5 / step).round() as usize;
    let last = (50.0 / step).round() as usize;
    let failures: Vec<f64> = (first..=last)
        .map(|i| i as f64 * step)
        .filter(|&x| appendix_inequality_holds(1.0, 1.0, x) == Some(false))
        .collect();
    let fails_at_one = appendix_inequality_holds(1.0, 1.0, 1.0) == Some(false);
    let pass = hand && failures.is_empty() && fails_at_one;
    let gap = match (failures.first(), failures.last()) {
        (Some(a), Some(b)) => format!("inequality fails on [{a:.3}, {b:.3}] inside [2.5, 50]"),
        _ => "holds on all of [2.5, 50]".into(),
    };
    outcome(
        pass,
        format!(
            "{gap}; scanned x0 = {:?}; fails at x=1: {fails_at_one}; hand values |k'_MKL(3)|={:.4}, |k'_e(3)|={:.4}, |k'_MKL(1)|={:.3}, |k'_e(1)|={:.3}",
            report.x0,
            m3.abs(),
            e3.abs(),
            m1.abs(),
            e1.abs()
        ),
    )
}

// 7 ------------------------------------------------------------------------
fn toeplitz_and_monotone() -> Outcome {
    let (heads, len) = (8, 2048);
    let mut bad = Vec::new();
    for name in PRESET_NAMES {
        let pack = build_bias(&preset(name, heads), heads, len).unwrap();
        let mult = multiplicative_view(&pack);
        for h in 0..heads {
            let dense = pack.dense_additive(h);
            let m = &mult[h];
            'rows: for i in 0..len {
                for j in 0..=i {
                    let diag_ok = i == 0 || j == 0 || dense[[i, j]] == dense[[i - 1, j - 1]];
                    // row values rise towards the diagonal, i.e. fall with distance
                    let mono_ok = j == 0 || dense[[i, j - 1]] <= dense[[i, j]];
                    let mult_ok = m[[i, j]] == dense[[i, j]].exp();
                    if !(diag_ok && mono_ok && mult_ok) {
                        bad.push(format!("{name} head {h} row {i}"));
                        break 'rows;
                    }
                }
            }
        }
    }
    outcome(
        bad.is_empty(),
        format!("{} presets, H={heads}, L={len}; violations: {:?}", PRESET_NAMES.len(), bad),
    )
}

// 8 ------------------------------------------------------------------------
fn extrapolation_trend() -> Outcome {
    if std::env::var_os("PE_LAB_SKIP_TRAINING").is_some() {
        return outcome(false, "SKIPPED (PE_LAB_SKIP_TRAINING set)");
    }
    let mut cfg = ExperimentConfig::default();
    cfg.eval_lens = vec![256];
    let h9 = slopes_for_heads(&SlopeSchedule::UniformExponent { h: 9.0, heads: 8 }).unwrap();
    let runs = vec![
        RunSpec {
            label: "alibi".into(),
            preset: preset("alibi", 8),
        },
        RunSpec {
            label: "mep-free".into(),
            preset: preset("mep-free", 8),
        },
        RunSpec {
            label: "alibi-h9".into(),
            preset: FusionPreset::from_name("alibi", &h9).unwrap(),
        },
    ];
    let cmp = match cfg.compare(&runs) {
        Ok(c) => c,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let alibi = cmp.report.median("alibi", 256).unwrap();
    let mep = cmp.report.median("mep-free", 256).unwrap();
    let h9 = cmp.report.median("alibi-h9", 256).unwrap();
    let pass = mep <= alibi && h9 >= 2.0 * alibi;
    outcome(
        pass,
        format!(
            "median ppl@256 over seeds {:?}: mep-free {mep:.3} vs alibi {alibi:.3} (need <=); h=9 {h9:.3} vs geometric {alibi:.3} (need >= 2x, ratio {:.2})",
            cfg.seeds,
            h9 / alibi
        ),
    )
}

// 9 ------------------------------------------------------------------------
fn determinism() -> Outcome {
    let bias = || {
        let pack = build_bias(&preset("mep-param", 8), 8, 300).unwrap();
        (
            bias_csv(&pack, 3, BiasForm::Multiplicative, 1.0).unwrap(),
            encode_cache(&pack),
        )
    };
    let small = || {
        let cfg = ExperimentConfig::from_json(
            r#"{"model": {"vocab": 16, "d_model": 16, "heads": 2, "d_ff": 32, "train_len": 16},
                "train": {"steps": 15, "batch": 4},
                "task": {"kind": {"type": "markov-char", "order": 2}, "corpus_tokens": 12000},
                "presets": ["alibi", "mep-param", "t5"], "eval_lens": [16, 32], "seeds": [1, 2]}"#,
        )
        .unwrap();
        let cmp = cfg.compare(&cfg.runs().unwrap()).unwrap();
        (
            cmp.report.to_csv(),
            cmp.report.to_json(),
            pe_lab::lm::loss_curves_csv(&cmp.curves),
        )
    };
    let (b1, b2) = (bias(), bias());
    let (r1, r2) = (small(), small());
    let pass = b1 == b2 && r1 == r2;
    outcome(pass, format!("bias CSV/cache and report CSV/JSON/loss curves identical across reruns: {pass}"))
}

// 10 -----------------------------------------------------------------------
fn round_trip() -> Outcome {
    let mut worst_cache = 0.0f64;
    let mut worst_csv = 0.0f64;
    for name in PRESET_NAMES {
        let pack = build_bias(&preset(name, 8), 8, 257).unwrap();
        let back = decode_cache(&encode_cache(&pack), Path::new("memory")).unwrap();
        for h in 0..8 {
            for (a, b) in pack.distance_values(h).iter().zip(back.distance_values(h)) {
                worst_cache = worst_cache.max((a - b).abs());
            }
        }
        let mult = multiplicative_view(&pack);
        for (form, h) in [(BiasForm::Additive, 0), (BiasForm::Multiplicative, 7)] {
            let grid = parse_csv(&bias_csv(&pack, h, form, 1.0).unwrap(), Path::new("memory")).unwrap();
            for i in 0..257 {
                for j in 0..=i {
                    let want = match form {
                        BiasForm::Additive => pack.entry(h, i, j).unwrap(),
                        BiasForm::Multiplicative => mult[h][[i, j]],
                    };
                    let got = grid.cells[i][j].unwrap();
                    worst_csv = worst_csv.max(rel_err(got, want));
                }
            }
        }
    }
    outcome(
        worst_cache <= 1e-12 && worst_csv <= 1e-8,
        format!("cache max abs err {worst_cache:.1e} (<=1e-12), CSV max rel err {worst_csv:.1e} (<=1e-8)"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Option<u64>); 10] = [
        ("anchor values", anchors, None),
        ("geometric slope schedule", slope_schedule, None),
        ("additive/multiplicative equivalence", equivalence, Some(10)),
        ("weight-scale invariance", weight_scale_invariance, Some(5)),
        ("gradient suite", gradient_suite, Some(60)),
        ("appendix inequality", appendix, Some(1)),
        ("Toeplitz and monotone decay", toeplitz_and_monotone, Some(5)),
        ("desk-scale extrapolation trend", extrapolation_trend, Some(600)),
        ("determinism", determinism, None),
        ("round-trip", round_trip, None),
    ];
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let mut o = check();
        if let Some(secs) = budget {
            o = within_time(o, start.elapsed(), Duration::from_secs(*secs));
        }
        let status = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failed += 1;
        }
        println!("criterion {:>2} [{status}] {name}: {}", i + 1, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
