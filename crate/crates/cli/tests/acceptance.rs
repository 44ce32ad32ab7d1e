//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails at the end if any line failed. Criterion 5 trains six networks at
//! the shipped defaults and dominates the runtime.

use std::io::Write as _;
use std::time::{Duration, Instant};

use lsn_cli::Config;
use lsn_core::data::{self, Sample};
use lsn_core::eval::{self, f_measure, EvalImage, Mask};
use lsn_core::lsu::{self, LsuParams};
use lsn_core::span::{self, VectorStack, DEFAULT_RANK_TOL};
use lsn_core::train::{self, Checkpoint, Strategy, TrainConfig};
use lsn_core::{build_variant, model, verify, ParamSet32, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const TRAINING_BUDGET: Duration = Duration::from_secs(45 * 60);
const LSN3_FLOOR: f64 = 0.55;
const SEEDS: [u64; 3] = [0, 1, 2];
const ITERATIONS: u64 = 5000;
const TRAIN_COUNT: usize = 200;
const TEST_COUNT: usize = 50;
const IMAGE_SIZE: usize = 96;
const TRAIN_SEED: u64 = 1;
const TEST_SEED: u64 = 2;

/// Writes past the test harness's output capture so the lines show up in a
/// plain `cargo test` run.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

#[derive(Default)]
struct Ledger {
    failed: Vec<String>,
}

impl Ledger {
    fn report(&mut self, label: &str, pass: bool, detail: String) {
        say(&format!("{label}: {} ({detail})", if pass { "PASS" } else { "FAIL" }));
        if !pass {
            self.failed.push(label.to_string());
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn rand_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor64 {
    Tensor64::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn rand_columns(len: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn stack(len: usize, cols: Vec<Vec<f64>>) -> VectorStack {
    let labels = (0..cols.len()).map(|i| format!("v{i}")).collect();
    VectorStack::from_columns(len, cols, labels).unwrap()
}

fn combine(cols: &[Vec<f64>], count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let len = cols[0].len();
    (0..count)
        .map(|_| {
            let w: Vec<f64> = cols.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
            (0..len).map(|r| cols.iter().zip(&w).map(|(c, w)| w * c[r]).sum()).collect()
        })
        .collect()
}

fn criterion_1(ledger: &mut Ledger) {
    let t0 = Instant::now();
    let entries = verify::gradcheck_suite(0, None).unwrap();
    let elapsed = t0.elapsed();
    let worst = entries.iter().map(|e| e.worst).fold(0.0, f64::max);
    let failing: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    let has_network = entries.iter().any(|e| e.name == "lsn3_network");
    ledger.report(
        "criterion 1 gradient suite",
        failing.is_empty() && has_network && elapsed <= GRADCHECK_BUDGET,
        format!(
            "{} checks, worst relative error {worst:.2e} <= {:e}, failing {failing:?}, {:.1}s of {}s",
            entries.len(),
            verify::GRADCHECK_TOLERANCE,
            elapsed.as_secs_f64(),
            GRADCHECK_BUDGET.as_secs()
        ),
    );
}

/// Output pixel `j` of head `i` is `sum_k lambda[i, k] * c[k, j] + bias[i]`.
fn lsu_by_dot_product(inputs: &[Tensor64], lambda: &Tensor64, bias: &Tensor64, out_channel: usize, pixel: (usize, usize)) -> f64 {
    let mut channels = Vec::new();
    for x in inputs {
        for c in 0..x.channels() {
            channels.push(x.at(0, c, pixel.1, pixel.0));
        }
    }
    let m = channels.len();
    bias.data()[out_channel] + channels.iter().enumerate().map(|(k, v)| lambda.data()[out_channel * m + k] * v).sum::<f64>()
}

fn criterion_2(ledger: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let m = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=4);
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let mut sizes = Vec::new();
        let mut left = m;
        while left > 0 {
            let s = rng.gen_range(1..=left);
            sizes.push(s);
            left -= s;
        }
        let mut outs = Vec::new();
        let mut left = n;
        while left > 0 {
            let s = rng.gen_range(1..=left);
            outs.push(s);
            left -= s;
        }
        let inputs: Vec<Tensor64> = sizes.iter().map(|&c| rand_tensor([1, c, h, w], &mut rng)).collect();
        let p = LsuParams::new(rand_tensor([n, m, 1, 1], &mut rng), rand_tensor([n, 1, 1, 1], &mut rng), sizes, outs.clone()).unwrap();
        let refs: Vec<&Tensor64> = inputs.iter().collect();
        let got = lsu::lsu_forward(&refs, &p).unwrap();
        let mut base = 0;
        for (head, &width) in got.iter().zip(&outs) {
            for c in 0..width {
                for y in 0..h {
                    for x in 0..w {
                        let want = lsu_by_dot_product(&inputs, &p.lambda, &p.bias, base + c, (x, y));
                        worst = worst.max((head.at(0, c, y, x) - want).abs());
                    }
                }
            }
            base += width;
        }
    }
    ledger.report("criterion 2 LSU oracle", worst <= 1e-6, format!("1000 cases, max abs diff {worst:.2e} <= 1e-6"));
}

fn criterion_3(ledger: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let mut worst_rise = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let len = rng.gen_range(5..60);
        let k = rng.gen_range(0..8);
        let mut s = stack(len, rand_columns(len, k, &mut rng));
        let y: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let before = span::least_squares(&s, &y).unwrap().residual;
        s.push(&rand_columns(len, 1, &mut rng)[0], "new").unwrap();
        let after = span::least_squares(&s, &y).unwrap().residual;
        worst_rise = worst_rise.max(after - before);
    }
    let a = worst_rise <= 1e-9;

    let mut held = 0;
    for _ in 0..100 {
        let du = rng.gen_range(3..=8);
        let dv = rng.gen_range(3..=8);
        let shared = rng.gen_range(0..=du.min(dv));
        let basis = rand_columns(20, du + dv - shared, &mut rng);
        let u_dirs: Vec<Vec<f64>> = basis[..du].to_vec();
        let v_dirs: Vec<Vec<f64>> = basis[..shared].iter().chain(&basis[du..]).cloned().collect();
        let u = stack(20, combine(&u_dirs, du, &mut rng));
        let v = stack(20, combine(&v_dirs, dv, &mut rng));
        let d = span::dim_sum_check(&u, &v, 1e-8).unwrap();
        let expected = (du, dv, du + dv - shared, shared);
        if d.holds && (d.dim_u, d.dim_v, d.dim_sum, d.dim_intersection_measured) == expected {
            held += 1;
        }
    }
    let b = held == 100;

    let mut agree = 0;
    for i in 0..200 {
        let len = rng.gen_range(8..40);
        let k = rng.gen_range(1..6);
        let cols = rand_columns(len, k, &mut rng);
        let inside = i % 2 == 0;
        let y = if inside { combine(&cols, 1, &mut rng).remove(0) } else { rand_columns(len, 1, &mut rng).remove(0) };
        let c = span::consistency(&stack(len, cols), &y, DEFAULT_RANK_TOL).unwrap();
        if c.by_residual == inside && c.by_rank == inside {
            agree += 1;
        }
    }
    let c = agree == 200;
    ledger.report(
        "criterion 3 span theory",
        a && b && c,
        format!("(a) worst residual rise {worst_rise:.2e} <= 1e-9 over 1000; (b) identity held {held}/100; (c) agreement {agree}/200"),
    );
}

struct Trained {
    variant: usize,
    seed: u64,
    params: ParamSet32,
    report: eval::EvalReport,
}

fn train_and_score(cfg: &Config, train_set: &[Sample], test_set: &[Sample]) -> Trained {
    let spec = cfg.network().unwrap();
    let run = train::run::<f32>(&spec, train_set, &cfg.train_config(), None).unwrap();
    assert!(run.divergence.is_none(), "lsn{} seed {} diverged: {:?}", cfg.variant, cfg.seed, run.divergence);
    let predictions: Vec<EvalImage> = test_set
        .iter()
        .map(|s| EvalImage::new(train::predict(&spec, &run.checkpoint.params, s).unwrap(), s.gt.clone()).unwrap())
        .collect();
    let report = eval::evaluate(&predictions, &cfg.threshold_list(), cfg.tolerance_frac).unwrap();
    say(&format!(
        "  lsn{} seed {} {}: ODS {:.4} OIS {:.4} AP {:.4}",
        cfg.variant, cfg.seed, cfg.strategy, report.ods, report.ois, report.ap
    ));
    Trained {
        variant: cfg.variant,
        seed: cfg.seed,
        params: run.checkpoint.params,
        report,
    }
}

fn criterion_4(ledger: &mut Ledger, models: &[&Trained], test_set: &[Sample]) -> Vec<Vec<span::ResidualProfile>> {
    let mut checked = 0;
    let mut bad = 0;
    let mut profiles = Vec::new();
    for m in models {
        let spec = build_variant(m.variant, Config::default().width_multiplier).unwrap();
        let params = m.params.cast::<f64>();
        let mut per_model = Vec::new();
        for s in test_set {
            let stacks = span::extract_features(&spec, &params, &s.image_tensor::<f64>()).unwrap();
            let y: Vec<f64> = s.gt.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let p = span::residual_profile(&stacks, &y).unwrap();
            checked += 1;
            if !(p.is_non_increasing(1e-9) && p.terminal() <= p.best_single() + 1e-9) {
                bad += 1;
            }
            per_model.push(p);
        }
        profiles.push(per_model);
    }
    ledger.report(
        "criterion 4 cumulative vs independent spans",
        bad == 0 && test_set.len() >= 50,
        format!("{checked} profiles over {} test images from {} trained networks, {bad} violations", test_set.len(), models.len()),
    );
    profiles
}

fn toy_image(gt: &[(usize, usize)], probs: &[((usize, usize), f64)]) -> EvalImage {
    let mut g = Mask::new(5, 5);
    for &(x, y) in gt {
        g.set(x, y, true);
    }
    let mut p = vec![0.0; 25];
    for &((x, y), v) in probs {
        p[y * 5 + x] = v;
    }
    EvalImage::new(p, g).unwrap()
}

fn criterion_6(ledger: &mut Ledger, trained: &[Trained], test_set: &[Sample]) {
    // Three 5x5 images of isolated pixels at thresholds 0.25/0.5/0.75,
    // enumerated by hand: pooled (tp, fp, fn) per threshold and the summaries.
    let toy = vec![
        toy_image(&[(0, 0), (2, 2), (4, 4)], &[((0, 0), 0.9), ((2, 2), 0.6), ((4, 0), 0.8), ((4, 4), 0.3)]),
        toy_image(&[(1, 1), (3, 3)], &[((1, 1), 0.7), ((3, 3), 0.7), ((1, 3), 0.4), ((3, 1), 0.6)]),
        toy_image(&[], &[((2, 2), 0.55)]),
    ];
    let r = eval::evaluate(&toy, &[0.25, 0.5, 0.75], eval::DEFAULT_TOLERANCE_FRAC).unwrap();
    let expect = [
        (5, 4, 0, 5.0 / 9.0, 1.0, 5.0 / 7.0),
        (4, 3, 1, 4.0 / 7.0, 4.0 / 5.0, 2.0 / 3.0),
        (1, 1, 4, 1.0 / 2.0, 1.0 / 5.0, 2.0 / 7.0),
    ];
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let points_ok = r.points.iter().zip(expect).all(|(p, e)| {
        (p.tp, p.fp, p.fn_) == (e.0, e.1, e.2) && close(p.precision, e.3) && close(p.recall, e.4) && close(p.f(), e.5)
    });
    let toy_ok = points_ok && close(r.ods, 5.0 / 7.0) && close(r.ois, 31.0 / 35.0) && close(r.ap, 673.0 / 1260.0);

    let mut datasets: Vec<(String, eval::EvalReport)> = trained
        .iter()
        .map(|t| (format!("lsn{} seed {} predictions", t.variant, t.seed), t.report.clone()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for d in 0..10 {
        let noise = 0.1 + 0.08 * d as f64;
        let images: Vec<EvalImage> = test_set
            .iter()
            .take(10)
            .map(|s| {
                let p = s.gt.data.iter().map(|&b| ((if b { 0.7 } else { 0.2 }) + rng.gen_range(-noise..noise)).clamp(0.0, 1.0)).collect();
                EvalImage::new(p, s.gt.clone()).unwrap()
            })
            .collect();
        let report = eval::evaluate(&images, &eval::default_thresholds(99), eval::DEFAULT_TOLERANCE_FRAC).unwrap();
        datasets.push((format!("noisy labels {noise:.2}"), report));
    }
    let violations: Vec<String> = datasets
        .iter()
        .filter(|(_, r)| r.ois < r.ods)
        .map(|(n, r)| format!("{n}: OIS {:.4} < ODS {:.4}", r.ois, r.ods))
        .collect();
    let f_ok = f_measure(0.5, 1.0) == 2.0 / 3.0;
    ledger.report(
        "criterion 6 evaluation protocol",
        toy_ok && violations.is_empty() && f_ok,
        format!(
            "toy set {}, OIS >= ODS on {}/{} generated datasets {violations:?}, f(0.5, 1) = 2/3 {}",
            if toy_ok { "matches" } else { "differs" },
            datasets.len() - violations.len(),
            datasets.len(),
            if f_ok { "exactly" } else { "not exactly" }
        ),
    );
}

fn criterion_7(ledger: &mut Ledger) {
    let spec = build_variant(3, 0.25).unwrap();
    let samples: Vec<Sample> = data::generate(4, 32, 70).unwrap().into_iter().map(|g| g.sample).collect();
    let cfg = |iters| TrainConfig { max_iters: iters, seed: 11, ..Default::default() };
    let bits = |r: &train::TrainRun<f32>| -> Vec<u64> {
        r.trace.rows.iter().flat_map(|r| std::iter::once(r.total).chain(r.heads.iter().copied())).map(f64::to_bits).collect()
    };
    let a = train::train::<f32>(&spec, &samples, &cfg(20)).unwrap();
    let b = train::train::<f32>(&spec, &samples, &cfg(20)).unwrap();
    let traces = bits(&a) == bits(&b) && !a.trace.rows.is_empty();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    a.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    let round_trip = loaded == a.checkpoint
        && loaded.params.iter().all(|(n, t)| {
            let other = a.checkpoint.params.get(n).unwrap();
            t.data().iter().zip(other.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });

    let half = train::train::<f32>(&spec, &samples, &cfg(10)).unwrap();
    half.checkpoint.save(&path).unwrap();
    let resumed = train::run::<f32>(&spec, &samples, &cfg(20), Some(Checkpoint::load(&path).unwrap())).unwrap();
    let image = samples[0].image_tensor::<f32>();
    let fa = model::forward(&spec, &resumed.checkpoint.params, &image).unwrap();
    let fb = model::forward(&spec, &a.checkpoint.params, &image).unwrap();
    let resumed_ok = fa.heads.iter().zip(&fb.heads).all(|(x, y)| {
        x.logits.data().iter().zip(y.logits.data()).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    ledger.report(
        "criterion 7 determinism and persistence",
        traces && round_trip && resumed_ok,
        format!("identical traces {traces}, bit-exact checkpoint round trip {round_trip}, resumed forward bit-identical {resumed_ok}"),
    );
}

fn criterion_8(ledger: &mut Ledger) {
    let reference = TrainConfig { lr_multiplier: 1.0, ..Default::default() };
    let shipped = Config::default().train_config();
    let base = shipped.lr();
    let reference_ok = train::lr_at(0, &reference) == 1e-6 && train::lr_at(10_000, &reference) == 1e-7 && train::lr_at(25_000, &reference) == 1e-8;
    let shipped_ok =
        train::lr_at(0, &shipped) == base && train::lr_at(10_000, &shipped) == base / 10.0 && train::lr_at(25_000, &shipped) == base / 100.0;
    ledger.report(
        "criterion 8 learning-rate schedule",
        reference_ok && shipped_ok,
        format!(
            "reference rate 1e-6/1e-7/1e-8 {reference_ok}; shipped base {base:e} -> {:e} -> {:e}",
            train::lr_at(10_000, &shipped),
            train::lr_at(25_000, &shipped)
        ),
    );
}

#[test]
fn acceptance() {
    let mut ledger = Ledger::default();
    criterion_1(&mut ledger);
    criterion_2(&mut ledger);
    criterion_3(&mut ledger);

    let train_set: Vec<Sample> = data::generate(TRAIN_COUNT, IMAGE_SIZE, TRAIN_SEED).unwrap().into_iter().map(|g| g.sample).collect();
    let test_set: Vec<Sample> = data::generate(TEST_COUNT, IMAGE_SIZE, TEST_SEED).unwrap().into_iter().map(|g| g.sample).collect();
    let t0 = Instant::now();
    let mut trained = Vec::new();
    for seed in SEEDS {
        for variant in [1, 3] {
            let cfg = Config { variant, seed, max_iters: ITERATIONS, ..Config::default() };
            trained.push(train_and_score(&cfg, &train_set, &test_set));
        }
    }
    let elapsed = t0.elapsed();
    let f_of = |v: usize| -> Vec<f64> { trained.iter().filter(|t| t.variant == v).map(|t| t.report.ods).collect() };
    let (m1, m3) = (median(f_of(1)), median(f_of(3)));

    let lsn1 = trained.iter().find(|t| t.variant == 1 && t.seed == 0).unwrap();
    let lsn3 = trained.iter().find(|t| t.variant == 3 && t.seed == 0).unwrap();
    let profiles = criterion_4(&mut ledger, &[lsn1, lsn3], &test_set);

    ledger.report(
        "criterion 5 LSN_3 vs LSN_1",
        m3 >= m1 && m3 >= LSN3_FLOOR && elapsed <= TRAINING_BUDGET,
        format!(
            "median F lsn3 {m3:.4} vs lsn1 {m1:.4}, floor {LSN3_FLOOR}; lsn1 {:?} lsn3 {:?}; {:.1} min of {} min",
            f_of(1).iter().map(|f| format!("{f:.4}")).collect::<Vec<_>>(),
            f_of(3).iter().map(|f| format!("{f:.4}")).collect::<Vec<_>>(),
            elapsed.as_secs_f64() / 60.0,
            TRAINING_BUDGET.as_secs() / 60
        ),
    );
    criterion_6(&mut ledger, &trained, &test_set);
    criterion_7(&mut ledger);
    criterion_8(&mut ledger);

    // Derived checks that reuse the trained networks.
    let (l1, l3) = (&profiles[0], &profiles[1]);
    let strictly_better = l3.iter().filter(|p| p.terminal() < p.best_single() - 1e-9).count();
    ledger.report(
        "extra terminal span below best single stage",
        strictly_better * 5 >= l3.len() * 4,
        format!("lsn3 strictly below on {strictly_better}/{} test images, need 80%", l3.len()),
    );
    let med1 = median(l1.iter().map(|p| p.terminal()).collect());
    let med3 = median(l3.iter().map(|p| p.terminal()).collect());
    ledger.report(
        "extra lsn3 residual vs lsn1",
        med3 <= med1,
        format!("median terminal residual lsn3 {med3:.4} vs lsn1 {med1:.4}"),
    );
    let iterative: Vec<f64> = SEEDS
        .iter()
        .map(|&seed| {
            let cfg = Config { variant: 3, seed, max_iters: ITERATIONS, strategy: Strategy::Iterative(1), ..Config::default() };
            train_and_score(&cfg, &train_set, &test_set).report.ods
        })
        .collect();
    let mi = median(iterative.clone());
    ledger.report(
        "extra iterative vs end-to-end",
        mi >= m3 - 0.02,
        format!("median F iterative:1 {mi:.4} vs end-to-end {m3:.4} - 0.02; runs {iterative:?}"),
    );

    assert!(ledger.failed.is_empty(), "failed: {:?}", ledger.failed);
}
