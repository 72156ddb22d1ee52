use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;

use hcim_core::acim::{
    fit_noise_sigma, measure_snr, SnrProbe, DEFAULT_NOISE_SIGMA, NOISE_FIT_BOUNDARY,
    NOISE_FIT_SEED, NOISE_FIT_TARGET_DB, NOISE_FIT_TRIALS,
};
use hcim_core::calibration::calibrate_thresholds;
use hcim_core::cim_macro::{load_weights, run_mac, MacMode, MacroConfig};
use hcim_core::config::ExperimentConfig;
use hcim_core::harness::{
    boundary_histogram, bright_square, histogram_csv, saliency_map, CompiledNet, ImageLoss,
    InferenceReport,
};
use hcim_core::partition::partition_grid;
use hcim_core::probe::random_job;
use hcim_core::rng;
use hcim_core::scheduler::{
    account_energy, build_schedule, default_cost_priors, fit_energy_model, reference_schedule,
    EnergyModel, TimingParams, ADC_SHARE_TARGET, OSE_SHARE_TARGET,
};

use crate::{ConfigArgs, FitArgs, InferArgs, MacArgs, ModeArg, ReportArgs, SaliencyArgs, SnrArgs};

/// Bad flags or flag combinations detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    if e.downcast_ref::<UsageError>().is_some() {
        return ("usage", 2);
    }
    match e.downcast_ref::<hcim_core::Error>() {
        Some(hcim_core::Error::Usage(_)) => ("usage", 2),
        Some(c) if c.is_config() => ("config", 2),
        _ => ("runtime", 1),
    }
}

pub fn report_failure(kind: &str, message: &str, code: u8) {
    eprintln!("error: {message}");
    eprintln!(
        "{}",
        json!({"error": {"kind": kind, "message": message, "exit_code": code}})
    );
}

pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HCIM_THREADS") {
        let n = v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("HCIM_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(|e| match e {
        hcim_core::Error::Io { path, source } => hcim_core::Error::Config(format!(
            "cannot read config {}: {source}",
            path.display()
        ))
        .into(),
        other => other.into(),
    })
}

/// Loads the config and applies `--seed`; returns it with the output directory.
fn setup(c: &ConfigArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = load_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = c.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn apply_mode(cfg: &mut MacroConfig, mode: Option<ModeArg>, boundary: Option<usize>) -> Result<()> {
    cfg.mode = match (mode, boundary) {
        (Some(ModeArg::Osa), Some(_)) => return Err(usage("--boundary applies to --mode fixed only")),
        (Some(ModeArg::Osa), None) => MacMode::Osa,
        (Some(ModeArg::Fixed), None) => return Err(usage("--mode fixed needs --boundary")),
        (_, Some(b)) => MacMode::Fixed { boundary: b },
        (None, None) => cfg.mode,
    };
    cfg.validate()?;
    Ok(())
}

fn mode_tag(m: &MacMode) -> String {
    match m {
        MacMode::Fixed { boundary } => format!("fixed-b{boundary}"),
        MacMode::Osa => "osa".into(),
    }
}

/// `lo..hi` (inclusive) or a comma-separated list.
pub fn parse_boundaries(s: &str) -> Result<Vec<usize>> {
    let bad = || usage(format!("bad boundary list {s:?}; use lo..hi or a,b,c"));
    let v: Vec<usize> = if let Some((lo, hi)) = s.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        (lo..=hi).collect()
    } else {
        s.split(',')
            .map(|t| t.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if v.is_empty() {
        return Err(bad());
    }
    Ok(v)
}

pub fn mac(a: MacArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?.macro_cfg,
        None => MacroConfig::default(),
    };
    apply_mode(&mut cfg, a.mode, a.boundary)?;
    let cols = a.cols.unwrap_or(cfg.cols);
    if cols == 0 || cols > cfg.cols {
        return Err(usage(format!("--cols must be in 1..={}", cfg.cols)));
    }
    let job = random_job(&cfg, cols, &mut rng::stream(a.seed, &[0x3AC]))?;
    let state = load_weights(&job.weights, &cfg)?;
    let res = run_mac(&state, &job.acts, &cfg, rng::derive_seed(a.seed, &[1]))?;
    let weights: Vec<&[i32]> = (0..cfg.logical_rows())
        .map(|r| job.weights.row(r))
        .collect::<hcim_core::Result<_>>()?;
    let trace = json!({
        "seed": a.seed,
        "config": cfg,
        "activations": job.acts.values(),
        "weights": weights,
        "result": res,
        "energy_shares": res.energy.shares(),
    });
    write(&a.out, &pretty(&trace))?;
    println!(
        "boundary {} saliency {} max |error| {}",
        res.chosen_boundary,
        res.saliency.value,
        res.error.iter().map(|e| e.abs()).max().unwrap_or(0)
    );
    Ok(())
}

pub fn snr_sweep(a: SnrArgs) -> Result<()> {
    let bounds = parse_boundaries(&a.boundaries)?;
    if a.trials == 0 {
        return Err(usage("--trials must be > 0"));
    }
    let mut probe = SnrProbe {
        w: a.w,
        a: a.a,
        s: a.s,
        ..SnrProbe::default()
    };
    probe.analog.noise_sigma = a.sigma.unwrap_or(DEFAULT_NOISE_SIGMA);
    if let Some(b) = a.adc_bits {
        probe.analog.adc_bits = b;
    }
    if let Some(v) = a.window {
        probe.window = v;
    }
    if let Some(c) = a.cols {
        probe.cols = c;
    }
    probe.analog.validate()?;
    let timing = TimingParams::default();
    let energy = EnergyModel::default();
    let mut csv = String::from("boundary,snr_db,energy,makespan\n");
    for &b in &bounds {
        let part = partition_grid(probe.w as usize, probe.a as usize, probe.s, b, probe.window)?;
        let snr = measure_snr(&probe, b, a.trials, a.seed)?;
        let sched = build_schedule(&part, &timing);
        let e = account_energy(&sched, &energy)?;
        csv.push_str(&format!("{b},{snr},{:.6},{:.4}\n", e.total, sched.makespan));
    }
    write(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn calibrate(a: ConfigArgs) -> Result<()> {
    let (cfg, out) = setup(&a)?;
    let cal = &cfg.calibration;
    if cal.constraints.targets.is_empty() {
        return Err(usage("config has no calibration.constraints.targets"));
    }
    let net = cfg.load_net()?;
    let data = cfg.load_calibration_set()?;
    let cn = CompiledNet::new(&net, &cfg.macro_cfg)?;
    let oracle = ImageLoss::new(&cn, &data, &cfg.macro_cfg, cfg.seed)?;
    let outcome = calibrate_thresholds(
        cfg.macro_cfg.boundary_table.candidates(),
        &cal.constraints,
        &oracle,
    )?;

    // Written from the file as given so relative paths stay relative.
    let text = std::fs::read_to_string(&a.config)?;
    let mut calibrated = ExperimentConfig::from_json(&text, &a.config)?;
    calibrated.macro_cfg.boundary_table = outcome.table.clone();
    write(&out.join("calibrated-config.json"), &pretty(&calibrated))?;
    write(&out.join("calibration-trace.csv"), &outcome.trace_csv())?;
    let summary = json!({
        "table": outcome.table,
        "stages": outcome.stages,
        "eval_calls": outcome.eval_calls,
        "converged": outcome.converged(),
        "flagged": outcome.flagged(),
        "seed": cfg.seed,
        "images": data.len(),
    });
    write(&out.join("calibration.json"), &pretty(&summary))?;
    println!(
        "thresholds {:?} after {} loss evaluations",
        outcome.table.thresholds(),
        outcome.eval_calls
    );
    if outcome.flagged() {
        eprintln!("warning: some stages did not meet their target; see calibration.json");
    }
    Ok(())
}

fn write_report(out: &Path, r: &InferenceReport, cfg: &MacroConfig) -> Result<()> {
    let tag = mode_tag(&r.mode);
    write(&out.join(format!("report-{tag}.json")), &pretty(r))?;
    write(&out.join(format!("layers-{tag}.csv")), &r.layers_csv())?;
    write(
        &out.join(format!("histogram-{tag}.csv")),
        &histogram_csv(&boundary_histogram(r), &cfg.boundary_table),
    )?;
    Ok(())
}

pub fn infer(a: InferArgs) -> Result<()> {
    let (mut cfg, out) = setup(&a.common)?;
    apply_mode(&mut cfg.macro_cfg, a.mode, a.boundary)?;
    let net = cfg.load_net()?;
    let test = cfg.load_test()?;
    let r = CompiledNet::new(&net, &cfg.macro_cfg)?.infer(&test, &cfg.macro_cfg, cfg.seed)?;
    write_report(&out, &r, &cfg.macro_cfg)?;
    println!(
        "{}: top1 {:.4} over {} images, energy/image {:.2}",
        mode_tag(&r.mode),
        r.top1,
        r.images,
        r.energy_per_image
    );
    Ok(())
}

pub fn saliency(a: SaliencyArgs) -> Result<()> {
    let (cfg, out) = setup(&a.common)?;
    let net = cfg.load_net()?;
    let mut mcfg = cfg.macro_cfg.clone();
    mcfg.mode = MacMode::Osa;
    let cn = CompiledNet::new(&net, &mcfg)?;
    let (img, id, tag) = if a.synthetic_square {
        let i = net.input;
        (bright_square(i.channels, i.height, i.width), 0, "square".to_string())
    } else {
        let test = cfg.load_test()?;
        if a.image >= test.len() {
            return Err(usage(format!(
                "--image {} out of range ({} test images)",
                a.image,
                test.len()
            )));
        }
        (test.image(a.image).to_vec(), a.image as u64, format!("img{}", a.image))
    };
    let grid = saliency_map(&cn, &img, id, a.layer, &mcfg, cfg.seed)?;
    let stem = format!("saliency-{tag}-layer{}", a.layer);
    write(&out.join(format!("{stem}.pgm")), &grid.to_pgm())?;
    write(&out.join(format!("{stem}.csv")), &grid.to_csv())?;
    println!("{}x{} map written to {}", grid.height, grid.width, out.join(&stem).display());
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let (cfg, out) = setup(&a.common)?;
    let bounds = parse_boundaries(&a.boundaries)?;
    let net = cfg.load_net()?;
    let test = cfg.load_test()?;
    let cn = CompiledNet::new(&net, &cfg.macro_cfg)?;
    let run = |m: MacMode| -> Result<InferenceReport> {
        let mut c = cfg.macro_cfg.clone();
        c.mode = m;
        c.validate()?;
        Ok(cn.infer(&test, &c, cfg.seed)?)
    };
    let full = run(MacMode::Fixed { boundary: 0 })?;
    let mut csv =
        String::from("config,boundary,top1,mean_loss,energy_per_image,energy_ratio,mean_makespan\n");
    let mut row = |name: &str, b: String, r: &InferenceReport| {
        csv.push_str(&format!(
            "{name},{b},{:.4},{:.6},{:.4},{:.4},{:.4}\n",
            r.top1,
            r.mean_loss,
            r.energy_per_image,
            full.energy_per_image / r.energy_per_image,
            r.mean_makespan
        ));
    };
    for b in bounds {
        let r = if b == 0 { full.clone() } else { run(MacMode::Fixed { boundary: b })? };
        row("fixed", b.to_string(), &r);
    }
    let osa = run(MacMode::Osa)?;
    row("osa", "mixed".into(), &osa);
    write(&out.join("frontier.csv"), &csv)?;
    write_report(&out, &osa, &cfg.macro_cfg)?;
    print!("{csv}");
    Ok(())
}

pub fn fit_defaults(a: FitArgs) -> Result<()> {
    let sigma = fit_noise_sigma(
        &SnrProbe::default(),
        NOISE_FIT_BOUNDARY,
        NOISE_FIT_TARGET_DB,
        NOISE_FIT_TRIALS,
        NOISE_FIT_SEED,
    )?;
    let reference = reference_schedule();
    let model = fit_energy_model(&default_cost_priors(), &reference, ADC_SHARE_TARGET, OSE_SHARE_TARGET)?;
    let e = account_energy(&reference, &model)?;
    let doc = json!({
        "noise_sigma": sigma,
        "noise_fit": {
            "boundary": NOISE_FIT_BOUNDARY,
            "target_db": NOISE_FIT_TARGET_DB,
            "trials": NOISE_FIT_TRIALS,
            "seed": NOISE_FIT_SEED,
        },
        "energy": model,
        "reference_shares": e.shares(),
    });
    write(&a.out, &pretty(&doc))?;
    println!("noise_sigma {sigma:.6}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_lists() {
        assert_eq!(parse_boundaries("5..10").unwrap(), vec![5, 6, 7, 8, 9, 10]);
        assert_eq!(parse_boundaries("0, 4,9").unwrap(), vec![0, 4, 9]);
        for bad in ["", "3..1", "a..4", "1,,2"] {
            assert!(parse_boundaries(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn error_classes() {
        assert_eq!(classify(&usage("x")), ("usage", 2));
        assert_eq!(classify(&hcim_core::Error::Config("x".into()).into()), ("config", 2));
        assert_eq!(classify(&hcim_core::Error::Usage("x".into()).into()), ("usage", 2));
        assert_eq!(classify(&hcim_core::Error::Invariant("x".into()).into()), ("runtime", 1));
        assert_eq!(classify(&anyhow::anyhow!("disk full")), ("runtime", 1));
    }

    #[test]
    fn mode_flags() {
        let mut c = MacroConfig::default();
        apply_mode(&mut c, None, Some(7)).unwrap();
        assert_eq!(c.mode, MacMode::Fixed { boundary: 7 });
        assert!(apply_mode(&mut c, Some(ModeArg::Fixed), None).is_err());
        assert!(apply_mode(&mut c, Some(ModeArg::Osa), Some(3)).is_err());
        apply_mode(&mut c, Some(ModeArg::Osa), None).unwrap();
        assert_eq!(mode_tag(&c.mode), "osa");
    }
}
