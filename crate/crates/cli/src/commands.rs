use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lsn_core::data::{self, Sample};
use lsn_core::eval::{self, EvalImage, EvalReport};
use lsn_core::span::{self, ResidualProfile};
use lsn_core::tensor::OpKind;
use lsn_core::train::{self, Checkpoint, TrainRun};
use lsn_core::verify::{self, SuiteEntry};
use lsn_core::NetworkSpec;

use crate::config::Config;
use crate::{CliError, CliResult};

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Path of the config written next to a checkpoint.
pub fn sidecar_config(ckpt: &Path) -> PathBuf {
    with_suffix(ckpt, ".config")
}

pub fn loss_csv_path(ckpt: &Path) -> PathBuf {
    with_suffix(ckpt, ".loss.csv")
}

pub fn read_config(path: &Path) -> CliResult<Config> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Config::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Explicit config if given, else the sidecar of the checkpoint.
fn resolve_config(config: Option<&Path>, ckpt: Option<&Path>) -> CliResult<Config> {
    match (config, ckpt) {
        (Some(p), _) => read_config(p),
        (None, Some(c)) => {
            let side = sidecar_config(c);
            if !side.exists() {
                return Err(CliError::Usage(format!(
                    "no --config given and {} does not exist",
                    side.display()
                )));
            }
            read_config(&side)
        }
        (None, None) => Ok(Config::default()),
    }
}

fn load_nonempty(dir: &Path) -> CliResult<Vec<Sample>> {
    let samples = data::load_dataset(dir)?;
    if samples.is_empty() {
        return Err(CliError::Io(format!("{}: dataset is empty", dir.display())));
    }
    Ok(samples)
}

fn load_checkpoint(path: &Path, spec: &NetworkSpec) -> CliResult<Checkpoint<f32>> {
    let ck = Checkpoint::<f32>::load(path)?;
    ck.check_against(spec)?;
    if ck.fingerprint != train::fingerprint(spec) {
        return Err(CliError::Usage(format!(
            "{} was trained with a different network than lsn{} at width {}",
            path.display(),
            spec.variant,
            spec.width_multiplier
        )));
    }
    Ok(ck)
}

pub fn synth(out: &Path, count: usize, size: usize, seed: u64) -> CliResult {
    let samples = data::generate(count, size, seed)?;
    data::write_dataset(out, &samples)?;
    println!("wrote {count} samples of {size}x{size} to {}", out.display());
    Ok(())
}

pub struct TrainOutcome {
    pub run: TrainRun<f32>,
    pub seconds: f64,
}

pub fn train(data_dir: &Path, config: &Path, out: &Path, resume: Option<&Path>) -> CliResult<TrainOutcome> {
    let cfg = read_config(config)?;
    let spec = cfg.network()?;
    let tc = cfg.train_config();
    let start_ck = match resume {
        Some(p) => {
            let ck = Checkpoint::<f32>::load(p)?;
            if ck.iteration >= tc.max_iters {
                eprintln!("{} already at iteration {}; nothing to do", p.display(), ck.iteration);
                return Ok(TrainOutcome {
                    run: TrainRun {
                        checkpoint: ck,
                        trace: Default::default(),
                        phases: Vec::new(),
                        divergence: None,
                    },
                    seconds: 0.0,
                });
            }
            Some(ck)
        }
        None => None,
    };
    let samples = load_nonempty(data_dir)?;
    eprintln!(
        "training lsn{} ({} parameters) on {} samples, {} iterations, {}",
        spec.variant,
        spec.param_count(),
        samples.len(),
        tc.max_iters,
        tc.strategy
    );
    let t0 = Instant::now();
    let run = train::run::<f32>(&spec, &samples, &tc, start_ck)?;
    let seconds = t0.elapsed().as_secs_f64();
    for p in &run.phases {
        let frozen: Vec<String> = p.frozen.iter().map(|g| format!("{g:?}")).collect();
        eprintln!(
            "phase {}: iterations {}..{}, frozen [{}]",
            p.index,
            p.start,
            p.end,
            frozen.join(", ")
        );
    }
    run.checkpoint.save(out)?;
    write_file(&sidecar_config(out), cfg.to_text())?;
    write_file(&loss_csv_path(out), run.trace.to_csv())?;
    if let Some(e) = &run.divergence {
        return Err(CliError::Runtime(format!(
            "{e}; last good checkpoint (iteration {}) saved to {}",
            run.checkpoint.iteration,
            out.display()
        )));
    }
    match run.trace.rows.last() {
        Some(r) => println!("final loss {:.6} at iteration {}", r.total, r.iter),
        None => println!("final loss n/a (no iterations run)"),
    }
    println!("wall time {seconds:.2}s");
    Ok(TrainOutcome { run, seconds })
}

pub struct EvalArgs<'a> {
    pub data: &'a Path,
    pub ckpt: Option<&'a Path>,
    pub report: &'a Path,
    pub tolerance: Option<f64>,
    pub config: Option<&'a Path>,
    /// Scores every image with its own ground truth instead of a network.
    pub oracle_probs: bool,
}

pub fn eval(args: &EvalArgs<'_>) -> CliResult<EvalReport> {
    let cfg = resolve_config(args.config, args.ckpt)?;
    let tol = args.tolerance.unwrap_or(cfg.tolerance_frac);
    if !(tol >= 0.0 && tol.is_finite()) {
        return Err(CliError::Usage(format!("tolerance must be non-negative, got {tol}")));
    }
    let samples = load_nonempty(args.data)?;
    let images = if args.oracle_probs {
        samples
            .into_iter()
            .map(|s| {
                let probs = s.gt.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                EvalImage::new(probs, s.gt)
            })
            .collect::<lsn_core::Result<Vec<_>>>()?
    } else {
        let ckpt = args.ckpt.ok_or_else(|| CliError::Usage("--ckpt is required".into()))?;
        let spec = cfg.network()?;
        let ck = load_checkpoint(ckpt, &spec)?;
        predict_images(&spec, &ck, samples)?
    };
    let report = eval::evaluate(&images, &cfg.threshold_list(), tol)?;
    write_file(args.report, report.to_csv())?;
    println!(
        "ODS {:.4} OIS {:.4} AP {:.4} F {:.4}",
        report.ods, report.ois, report.ap, report.f_measure
    );
    Ok(report)
}

pub fn predict_images(spec: &NetworkSpec, ck: &Checkpoint<f32>, samples: Vec<Sample>) -> CliResult<Vec<EvalImage>> {
    samples
        .into_iter()
        .map(|s| {
            let probs = train::predict(spec, &ck.params, &s)?;
            Ok(EvalImage::new(probs, s.gt)?)
        })
        .collect()
}

pub fn analyze_header() -> &'static str {
    "image_id,stage,per_stage_residual,cumulative_residual,stack_rank\n"
}

/// One row per stage from deep to shallow, then a `cumulative` row holding
/// the best single-stage residual and the terminal cumulative residual.
pub fn analyze_rows(id: &str, spec: &NetworkSpec, profile: &ResidualProfile) -> String {
    let mut s = String::new();
    let n = spec.stage_count();
    for (i, (per, cum)) in profile.per_stage.iter().zip(&profile.cumulative).enumerate() {
        let _ = writeln!(s, "{id},{},{per},{cum},{}", n - i, profile.stage_ranks[i]);
    }
    let _ = writeln!(
        s,
        "{id},cumulative,{},{},{}",
        profile.best_single(),
        profile.terminal(),
        profile.cumulative_ranks.last().copied().unwrap_or(0)
    );
    s
}

pub fn profile_sample(spec: &NetworkSpec, params: &lsn_core::ParamSet64, sample: &Sample) -> CliResult<ResidualProfile> {
    let stacks = span::extract_features(spec, params, &sample.image_tensor::<f64>())?;
    let y: Vec<f64> = sample.gt.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(span::residual_profile(&stacks, &y)?)
}

pub fn analyze(data_dir: &Path, ckpt: &Path, report: &Path, config: Option<&Path>) -> CliResult<Vec<ResidualProfile>> {
    let cfg = resolve_config(config, Some(ckpt))?;
    let spec = cfg.network()?;
    let ck = load_checkpoint(ckpt, &spec)?;
    let params = ck.params.cast::<f64>();
    let samples = load_nonempty(data_dir)?;
    let mut csv = String::from(analyze_header());
    let mut profiles = Vec::with_capacity(samples.len());
    for s in &samples {
        let p = profile_sample(&spec, &params, s)?;
        csv.push_str(&analyze_rows(&s.id, &spec, &p));
        profiles.push(p);
    }
    write_file(report, csv)?;
    let mut terminal: Vec<f64> = profiles.iter().map(|p| p.terminal()).collect();
    terminal.sort_by(f64::total_cmp);
    let monotone = profiles.iter().filter(|p| p.is_non_increasing(1e-9)).count();
    println!(
        "{} images, median terminal residual {:.4}, cumulative non-increasing on {monotone}",
        profiles.len(),
        terminal[terminal.len() / 2]
    );
    Ok(profiles)
}

pub fn gradcheck(seed: u64, fault: Option<&str>) -> CliResult<Vec<SuiteEntry>> {
    let fault = fault
        .map(|name| {
            OpKind::parse(name).ok_or_else(|| {
                let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
                CliError::Usage(format!("unknown op `{name}`, expected one of {}", names.join(", ")))
            })
        })
        .transpose()?;
    let t0 = Instant::now();
    let entries = verify::gradcheck_suite(seed, fault)?;
    for e in &entries {
        println!("{:<22} {:.3e} {}", e.name, e.worst, if e.passed() { "ok" } else { "FAIL" });
    }
    println!("tolerance {:e}, {:.1}s", verify::GRADCHECK_TOLERANCE, t0.elapsed().as_secs_f64());
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    if failed.is_empty() {
        Ok(entries)
    } else {
        Err(CliError::Runtime(format!("gradient check failed: {}", failed.join(", "))))
    }
}
