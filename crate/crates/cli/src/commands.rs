use std::path::{Path, PathBuf};

use mandelq::fit::{
    fit_g2_two_exp, fit_lifetime, fit_pulsed_q, fit_rate_model, fit_saturation, FitResult,
    RateModelData,
};
use mandelq::format::{write, Format, TimestampFile};
use mandelq::models::{
    analytic_cw_q, analytic_cw_q_crossover, analytic_cw_q_limit, background_uncorrect, g2_two_exp,
    pulsed_q_limit, pulsed_q_model, saturation_rate, solve_rate_model, AnalyticCwQParams,
    PulsedQModelParams, SaturationParams, TwoExpG2Params,
};
use mandelq::report::{
    fmt_real, histogram_from_table, histogram_table, lifetime_from_table, lifetime_table, pnd_table,
    qseries_from_table, qseries_table, sweep_table, xy_table, Table, TOOLKIT_VERSION,
};
use mandelq::simulate::{inject_background, simulate, SimulationConfig};
use mandelq::stats::{
    estimate_deadtime, filter_width_sweep, g2_histogram_cw, g2_zero_pulsed, lifetime_histogram,
    mandel_q_series, photon_number_distribution, trigger_filter, window_origin, Binning,
    DeadtimeParams, QOptions,
};
use mandelq::{
    merge_channels, merge_detectors, Acquisition, DetectionChainParams, EmitterRates, ExcitationMode,
    TimestampSeries,
};

use crate::config::{parse_duration, Config};
use crate::io::{default_curve_path, read_columns, read_table, read_timestamps, write_atomic, write_table};
use crate::{CliError, Command, Common, FitCommand, FitIo, Io, ModelArgs, ModelCommand};

const IO_KEYS: [(&str, &str); 2] = [("io.inputs", ""), ("io.output", "")];

fn resolve(cmd_keys: &[(&str, &str)], common: &Common) -> Result<Config, CliError> {
    let mut keys: Vec<(&str, &str)> = IO_KEYS.to_vec();
    keys.extend_from_slice(cmd_keys);
    let mut cfg = Config::new(&keys);
    for path in &common.config {
        cfg.load_file(path)?;
    }
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    Ok(cfg)
}

fn set_inputs(cfg: &mut Config, inputs: &[PathBuf], output: &Path) {
    if !inputs.is_empty() {
        let joined: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
        cfg.set("io.inputs", joined.join(","));
    }
    cfg.set("io.output", output.display().to_string());
}

/// Input paths, sorted so multi-file output order does not depend on argv.
fn inputs(cfg: &Config) -> Result<Vec<PathBuf>, CliError> {
    let mut v: Vec<PathBuf> = cfg
        .str("io.inputs")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect();
    if v.is_empty() {
        return Err(CliError::Usage("no input files given".into()));
    }
    v.sort();
    Ok(v)
}

fn single_input(cfg: &Config) -> Result<PathBuf, CliError> {
    let v = inputs(cfg)?;
    if v.len() != 1 {
        return Err(CliError::Usage(format!("expected one input file, got {}", v.len())));
    }
    Ok(v.into_iter().next().unwrap())
}

fn load_acquisitions(paths: &[PathBuf]) -> Result<Vec<Acquisition>, CliError> {
    paths.iter().map(|p| Ok(read_timestamps(p)?.0.acquisition)).collect()
}

fn with_path<T>(path: &Path, r: mandelq::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| match CliError::from(e) {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// `auto` resolves to true when every acquisition is pulsed.
fn resolve_align(cfg: &mut Config, key: &str, acqs: &[Acquisition]) -> Result<bool, CliError> {
    if cfg.str(key) == "auto" {
        let pulsed = acqs.iter().all(|a| a.mode().is_pulsed());
        cfg.set(key, pulsed.to_string());
    }
    cfg.bool(key)
}

fn channel_pair(cfg: &Config, key: &str) -> Result<(u8, u8), CliError> {
    let v = cfg.f64_list(key)?;
    match v[..] {
        [a, b] if a.fract() == 0.0 && b.fract() == 0.0 && (0.0..256.0).contains(&a) && (0.0..256.0).contains(&b) => {
            Ok((a as u8, b as u8))
        }
        _ => Err(CliError::Usage(format!("{key}: expected two channels like 1,2, got '{}'", cfg.str(key)))),
    }
}

fn one_or_two<T: Copy>(v: Vec<T>, key: &str) -> Result<[T; 2], CliError> {
    match v[..] {
        [x] => Ok([x, x]),
        [x, y] => Ok([x, y]),
        _ => Err(CliError::Usage(format!("{key}: expected one value or two (per detector)"))),
    }
}

fn series(acq: &Acquisition, channel: u8, path: &Path) -> Result<TimestampSeries, CliError> {
    with_path(path, merge_channels(acq, &[channel]))
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate {
            common,
            output,
            seed,
            duration,
            mode,
            format,
        } => run_simulate(&common, &output, seed, duration, mode, format),
        Command::Q { common, io, t, grid } => run_q(&common, &io, t, grid),
        Command::Pnd { common, io, t } => run_pnd(&common, &io, t),
        Command::G2 { common, io } => run_g2(&common, &io),
        Command::G2zero { common, io } => run_g2zero(&common, &io),
        Command::Lifetime { common, io } => run_lifetime(&common, &io),
        Command::Filter {
            common,
            io,
            window,
            format,
        } => run_filter(&common, &io, window, format),
        Command::Deadtime { common, io } => run_deadtime(&common, &io),
        Command::SweepFilter { common, io } => run_sweep(&common, &io),
        Command::Fit(f) => run_fit(f),
        Command::Model(m) => run_model(m),
        Command::Convert { input, output, to, from } => run_convert(&input, &output, &to, from),
    }
}

const SIM_KEYS: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("sim.mode", "cw"),
    ("sim.duration_ps", "1s"),
    ("sim.tau12_ps", "auto"),
    ("sim.tau21_ps", "1.6ns"),
    ("sim.tau23_ps", "1.4ns"),
    ("sim.tau31_ps", "420ns"),
    ("sim.tau_rep_ps", "100ns"),
    ("sim.power_uw", ""),
    ("chain.efficiency", "0.248"),
    ("chain.deadtime_ps", "80ns"),
    ("chain.split_ratio", "0.5"),
    ("chain.background_hz", "0"),
    ("chain.inject_hz", "0"),
    ("io.format", "binary"),
];

fn run_simulate(
    common: &Common,
    output: &Path,
    seed: Option<u64>,
    duration: Option<String>,
    mode: Option<String>,
    format: Option<String>,
) -> Result<(), CliError> {
    let mut cfg = resolve(SIM_KEYS, common)?;
    cfg.set("io.output", output.display().to_string());
    if let Some(s) = seed {
        cfg.set("run.seed", s.to_string());
    }
    if let Some(d) = duration {
        cfg.set("sim.duration_ps", d);
    }
    if let Some(m) = mode {
        cfg.set("sim.mode", m);
    }
    if let Some(f) = format {
        cfg.set("io.format", f);
    }
    if cfg.str("sim.tau12_ps") == "auto" {
        // pulses excite within 100 ps; CW pumping is slow
        let t = if cfg.str("sim.mode") == "pulsed" { "100ps" } else { "205ns" };
        cfg.set("sim.tau12_ps", t);
    }
    let (tau12, tau21) = (cfg.ps("sim.tau12_ps")? as f64, cfg.ps("sim.tau21_ps")? as f64);
    let rates = match (cfg.opt_ps("sim.tau23_ps")?, cfg.opt_ps("sim.tau31_ps")?) {
        (Some(t23), Some(t31)) => EmitterRates::three_level(tau12, tau21, t23 as f64, t31 as f64)?,
        (None, _) => EmitterRates::two_level(tau12, tau21)?,
        (Some(_), None) => return Err(CliError::Usage("sim.tau23_ps is set but sim.tau31_ps is not".into())),
    };
    let power_uw = if cfg.is_set("sim.power_uw") {
        Some(cfg.f64("sim.power_uw")?)
    } else {
        None
    };
    let mode = match cfg.str("sim.mode") {
        "cw" => ExcitationMode::Cw { power_uw },
        "pulsed" => ExcitationMode::pulsed(cfg.ps("sim.tau_rep_ps")?),
        other => return Err(CliError::Usage(format!("sim.mode: expected cw or pulsed, got '{other}'"))),
    };
    let chain = DetectionChainParams {
        efficiency: cfg.f64("chain.efficiency")?,
        deadtime: one_or_two(cfg.ps_list("chain.deadtime_ps")?, "chain.deadtime_ps")?,
        split_ratio: cfg.f64("chain.split_ratio")?,
        background_hz: one_or_two(cfg.f64_list("chain.background_hz")?, "chain.background_hz")?,
    };
    let inject = one_or_two(cfg.f64_list("chain.inject_hz")?, "chain.inject_hz")?;
    let fmt: Format = cfg.str("io.format").parse()?;
    let seed = cfg.u64("run.seed")?;
    let sim = SimulationConfig {
        rates,
        chain,
        mode,
        duration: cfg.ps("sim.duration_ps")?,
        seed,
    };
    let mut acq = simulate(&sim)?;
    if inject.iter().any(|&h| h > 0.0) {
        acq = inject_background(&acq, &[(1, inject[0]), (2, inject[1])], seed)?;
    }
    let file = TimestampFile {
        acquisition: acq,
        extra: cfg.header("simulate"),
    };
    write_timestamps(output, &file, fmt)
}

fn write_timestamps(path: &Path, file: &TimestampFile, format: Format) -> Result<(), CliError> {
    let mut bytes = Vec::new();
    write(file, format, &mut bytes)?;
    write_atomic(path, &bytes)
}

const Q_KEYS: &[(&str, &str)] = &[
    ("q.t_values_ps", ""),
    ("q.t_grid", ""),
    ("q.k_max", "1e8"),
    ("q.pulsed_align", "auto"),
];

fn run_q(common: &Common, io: &Io, t: Option<String>, grid: Option<String>) -> Result<(), CliError> {
    let mut cfg = resolve(Q_KEYS, common)?;
    set_inputs(&mut cfg, &io.inputs, &io.output);
    if let Some(t) = t {
        cfg.set("q.t_values_ps", t);
        cfg.set("q.t_grid", "");
    }
    if let Some(g) = grid {
        cfg.set("q.t_grid", g);
        cfg.set("q.t_values_ps", "");
    }
    if cfg.is_set("q.t_values_ps") && cfg.is_set("q.t_grid") {
        return Err(CliError::Usage("q.t_values_ps and q.t_grid are mutually exclusive".into()));
    }
    let paths = inputs(&cfg)?;
    let acqs = load_acquisitions(&paths)?;
    let align = resolve_align(&mut cfg, "q.pulsed_align", &acqs)?;
    let tau_rep = acqs[0].mode().tau_rep();
    if !cfg.is_set("q.t_values_ps") && !cfg.is_set("q.t_grid") {
        match tau_rep.filter(|_| align) {
            // whole periods, log-spaced from 1 to 1000
            Some(rep) => {
                let mut ks: Vec<u64> = crate::config::log_grid(1.0, 1000.0, 31).iter().map(|k| k.round() as u64).collect();
                ks.dedup();
                let ts: Vec<String> = ks.iter().map(|k| (k * rep).to_string()).collect();
                cfg.set("q.t_values_ps", ts.join(","));
            }
            None => cfg.set("q.t_grid", "10ns:1ms:41"),
        }
    }
    let ts = if cfg.is_set("q.t_values_ps") {
        cfg.ps_list("q.t_values_ps")?
    } else {
        cfg.ps_grid("q.t_grid")?
    };
    let opts = QOptions {
        k_max: cfg.u64("q.k_max")?,
        pulsed_align: align,
    };
    let s = mandel_q_series(&acqs, &ts, &opts)?;
    let mut table = qseries_table(&s).with_meta(cfg.header("q"));
    if let Some(rep) = tau_rep {
        table = table.with_meta([("tau_rep_ps", rep.to_string())]);
    }
    write_table(&io.output, &table)
}

const PND_KEYS: &[(&str, &str)] = &[("pnd.t_ps", "100ns"), ("pnd.k_max", "1e8"), ("pnd.pulsed_align", "auto")];

fn run_pnd(common: &Common, io: &Io, t: Option<String>) -> Result<(), CliError> {
    let mut cfg = resolve(PND_KEYS, common)?;
    set_inputs(&mut cfg, &io.inputs, &io.output);
    if let Some(t) = t {
        cfg.set("pnd.t_ps", t);
    }
    let path = single_input(&cfg)?;
    let acq = read_timestamps(&path)?.0.acquisition;
    let align = resolve_align(&mut cfg, "pnd.pulsed_align", std::slice::from_ref(&acq))?;
    let s = with_path(&path, merge_detectors(&acq))?;
    let origin = window_origin(&acq, align)?;
    let p = with_path(&path, photon_number_distribution(&s, cfg.ps("pnd.t_ps")?, cfg.u64("pnd.k_max")?, origin))?;
    write_table(&io.output, &pnd_table(&p).with_meta(cfg.header("pnd")))
}

const G2_KEYS: &[(&str, &str)] = &[
    ("g2.channels", "1,2"),
    ("g2.max_lag_ps", "1us"),
    ("g2.binning", "linear"),
    ("g2.bin_width_ps", "1ns"),
    ("g2.min_lag_ps", "100ps"),
    ("g2.n_bins", "100"),
];

fn run_g2(common: &Common, io: &Io) -> Result<(), CliError> {
    let mut cfg = resolve(G2_KEYS, common)?;
    set_inputs(&mut cfg, &io.inputs, &io.output);
    let path = single_input(&cfg)?;
    let acq = read_timestamps(&path)?.0.acquisition;
    let (ca, cb) = channel_pair(&cfg, "g2.channels")?;
    let binning = match cfg.str("g2.binning") {
        "linear" => Binning::Linear {
            bin_width: cfg.ps("g2.bin_width_ps")?,
        },
        "log" => Binning::Log {
            min_lag: cfg.ps("g2.min_lag_ps")?,
            n_bins: cfg.usize("g2.n_bins")?,
        },
        other => return Err(CliError::Usage(format!("g2.binning: expected linear or log, got '{other}'"))),
    };
    let (a, b) = (series(&acq, ca, &path)?, series(&acq, cb, &path)?);
    let h = with_path(&path, g2_histogram_cw(&a, &b, cfg.ps("g2.max_lag_ps")?, &binning))?;
    let mut table = histogram_table(&h).with_meta(cfg.header("g2"));
    if let ExcitationMode::Cw { power_uw: Some(p) } = acq.mode() {
        table = table.with_meta([("power_uw", p.to_string())]);
    }
    write_table(&io.output, &table)
}

const G2ZERO_KEYS: &[(&str, &str)] = &[
    ("g2zero.channels", "1,2"),
    ("g2zero.half_width_ps", "10ns"),
    ("g2zero.n_side_peaks", "18"),
];

fn run_g2zero(common: &Common, io: &Io) -> Result<(), CliError> {
    let mut cfg = resolve(G2ZERO_KEYS, common)?;
    set_inputs(&mut cfg, &io.inputs, &io.output);
    let path = single_input(&cfg)?;
    let acq = read_timestamps(&path)?.0.acquisition;
    let tau_rep = acq
        .mode()
        .tau_rep()
        .ok_or_else(|| CliError::data(&path, "g2zero needs a pulsed acquisition"))?;
    let (ca, cb) = channel_pair(&cfg, "g2zero.channels")?;
    let (a, b) = (series(&acq, ca, &path)?, series(&acq, cb, &path)?);
    let r = with_path(
        &path,
        g2_zero_pulsed(
            &a,
            &b,
            &acq.triggers(),
            tau_rep,
            cfg.ps("g2zero.half_width_ps")?,
            cfg.usize("g2zero.n_side_peaks")?,
        ),
    )?;
    let side_mean = r.side_areas.iter().sum::<u64>() as f64 / r.side_areas.len().max(1) as f64;
    let mut table = Table::new("g2zero", &["g2_zero", "uncertainty", "zero_area", "mean_side_area", "n_side_peaks"])
        .with_meta(cfg.header("g2zero"));
    table.rows.push(vec![
        fmt_real(r.g2_zero),
        fmt_real(r.uncertainty),
        r.zero_area.to_string(),
        fmt_real(side_mean),
        r.side_areas.len().to_string(),
    ]);
    write_table(&io.output, &table)
}

const LIFETIME_KEYS: &[(&str, &str)] = &[("lifetime.bin_width_ps", "100ps")];

fn run_lifetime(common: &Common, io: &Io) -> Result<(), CliError> {
    let mut cfg = resolve(LIFETIME_KEYS, common)?;
    set_inputs(&mut cfg, &io.inputs, &io.output);
    let path = single_input(&cfg)?;
    let acq = read_timestamps(&path)?.0.acquisition;
    let h = with_path(&path, lifetime_histogram(&acq, cfg.ps("lifetime.bin_width_ps")?))?;
    write_table(&io.output, &lifetime_table(&h).with_meta(cfg.header("lifetime")))
}

const FILTER_KEYS: &[(&str, &str)] = &[("filter.start_ps", "0"), ("filter.width_ps", "5ns"), ("io.format", "auto")];

/// `7:12ns` -> (7 ns, 5 ns). A unit on the end applies to a bare start.
fn parse_window(s: &str) -> Result<(u64, u64), CliError> {
    let bad = |why: String| CliError::Usage(format!("--window expects start:end like 7:12ns, {why}"));
    let (a, b) = s.split_once(':').ok_or_else(|| bad(format!("got '{s}'")))?;
    let (a, b) = (a.trim(), b.trim());
    let unit: String = b.chars().skip_while(|c| !c.is_ascii_alphabetic() || *c == 'e').collect();
    let a_has_unit = a.chars().any(|c| c.is_ascii_alphabetic() && c != 'e');
    let start_text = if a_has_unit { a.to_string() } else { format!("{a}{unit}") };
    let start = parse_duration(&start_text).map_err(bad)?;
    let end = parse_duration(b).map_err(bad)?;
    if end < start {
        return Err(bad(format!("end precedes start in '{s}'")));
    }
    Ok((start, end - start))
}

fn run_filter(common: &Common, io: &Io, window: Option<String>, format: Option<String>) -> Result<(), CliError> {
    let mut cfg = resolve(FILTER_KEYS, common)?;
    set_inputs(&mut cfg, &io.inputs, &io.output);
    if let Some(w) = window {
        let (start, width) = parse_window(&w)?;
        cfg.set("filter.start_ps", start.to_string());
        cfg.set("filter.width_ps", width.to_string());
    }
    if let Some(f) = format {
        cfg.set("io.format", f);
    }
    let path = single_input(&cfg)?;
    let (file, was_binary) = read_timestamps(&path)?;
    let fmt = match cfg.str("io.format") {
        "auto" if was_binary => Format::Binary,
        "auto" => Format::Text,
        other => other.parse()?,
    };
    let filtered = with_path(
        &path,
        trigger_filter(&file.acquisition, cfg.ps("filter.start_ps")?, cfg.ps("filter.width_ps")?),
    )?;
    let mut extra = file.extra;
    extra.extend(cfg.header("filter"));
    write_timestamps(
        &io.output,
        &TimestampFile {
            acquisition: filtered,
            extra,
        },
        fmt,
    )
}

const DEADTIME_KEYS: &[(&str, &str)] = &[
    ("deadtime.channel", "1"),
    ("deadtime.bin_width_ps", "1ns"),
    ("deadtime.max_gap_ps", "1us"),
];

fn run_deadtime(common: &Common, io: &Io) -> Result<(), CliError> {
    let mut cfg = resolve(DEADTIME_KEYS, common)?;
    set_inputs(&mut cfg, &io.inputs, &io.output);
    let path = single_input(&cfg)?;
    let acq = read_timestamps(&path)?.0.acquisition;
    let ch = u8::try_from(cfg.u64("deadtime.channel")?)
        .map_err(|_| CliError::Usage("deadtime.channel exceeds 255".into()))?;
    let params = DeadtimeParams {
        bin_width: cfg.ps("deadtime.bin_width_ps")?,
        max_gap: cfg.ps("deadtime.max_gap_ps")?,
    };
    let est = with_path(&path, estimate_deadtime(&series(&acq, ch, &path)?, &params))?;
    let mut table = Table::new("deadtime", &["gap_left_ps", "gap_right_ps", "counts"])
        .with_meta(cfg.header("deadtime"))
        .with_meta([
            ("deadtime_ps", fmt_real(est.deadtime)),
            ("uncertainty_ps", fmt_real(est.uncertainty)),
            ("plateau", fmt_real(est.plateau)),
        ]);
    for (i, c) in est.counts.iter().enumerate() {
        let lo = i as u64 * est.bin_width;
        table.rows.push(vec![lo.to_string(), (lo + est.bin_width).to_string(), c.to_string()]);
    }
    write_table(&io.output, &table)
}

const SWEEP_KEYS: &[(&str, &str)] = &[
    ("sweep.start_ps", "0"),
    ("sweep.widths_ps", "0.1ns,0.25ns,0.5ns,1ns,2ns,3ns,5ns,7ns,10ns,20ns,50ns"),
    ("sweep.k_max", "1e8"),
];

fn run_sweep(common: &Common, io: &Io) -> Result<(), CliError> {
    let mut cfg = resolve(SWEEP_KEYS, common)?;
    set_inputs(&mut cfg, &io.inputs, &io.output);
    let acqs = load_acquisitions(&inputs(&cfg)?)?;
    let pts = filter_width_sweep(
        &acqs,
        cfg.ps("sweep.start_ps")?,
        &cfg.ps_list("sweep.widths_ps")?,
        cfg.u64("sweep.k_max")?,
    )?;
    write_table(&io.output, &sweep_table(&pts).with_meta(cfg.header("sweep-filter")))
}

fn run_convert(input: &Path, output: &Path, to: &str, from: Option<String>) -> Result<(), CliError> {
    let (file, was_binary) = read_timestamps(input)?;
    if let Some(f) = from {
        let expected: Format = f.parse()?;
        if (expected == Format::Binary) != was_binary {
            return Err(CliError::data(input, format!("input is not in {f} format")));
        }
    }
    // a lossless re-encoding: the header is carried over untouched
    write_timestamps(output, &file, to.parse()?)
}

const FIT_KEYS: &[(&str, &str)] = &[
    ("io.curve", ""),
    ("fit.exclude_ps", ""),
    ("fit.powers_uw", ""),
    ("fit.tau21_ps", "2.7ns"),
    ("fit.tau_rep_ps", ""),
];

fn fit_config(common: &Common, io: &FitIo) -> Result<(Config, PathBuf), CliError> {
    let mut cfg = resolve(FIT_KEYS, common)?;
    set_inputs(&mut cfg, &io.inputs, &io.output);
    let curve = io.curve.clone().unwrap_or_else(|| default_curve_path(&io.output));
    cfg.set("io.curve", curve.display().to_string());
    Ok((cfg, curve))
}

/// `lo:hi` ranges of |tau|, comma separated, e.g. `17ns:19ns`.
fn exclusions(cfg: &Config) -> Result<Vec<(f64, f64)>, CliError> {
    cfg.str("fit.exclude_ps")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|r| {
            let bad = |why: String| CliError::Usage(format!("fit.exclude_ps: {why}"));
            let (lo, hi) = r.split_once(':').ok_or_else(|| bad(format!("expected lo:hi, got '{r}'")))?;
            let lo = parse_duration(lo).map_err(bad)? as f64;
            let hi = parse_duration(hi).map_err(bad)? as f64;
            Ok((lo, hi))
        })
        .collect()
}

fn write_fit(
    cfg: &Config,
    cmd: &str,
    output: &Path,
    curve_path: &Path,
    fit: &FitResult,
    extra: serde_json::Value,
    curve: Table,
) -> Result<(), CliError> {
    let doc = serde_json::json!({
        "toolkit_version": TOOLKIT_VERSION,
        "schema": "mandelq-fit v1",
        "config": cfg.header(cmd),
        "fit": fit,
        "derived": extra,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("fit results serialize");
    text.push('\n');
    write_atomic(output, text.as_bytes())?;
    write_table(curve_path, &curve.with_meta(cfg.header(cmd)))?;
    if fit.converged {
        Ok(())
    } else {
        Err(CliError::NotConverged(format!(
            "fit did not converge after {} iterations; results written to {}",
            fit.iterations,
            output.display()
        )))
    }
}

fn run_fit(command: FitCommand) -> Result<(), CliError> {
    match command {
        FitCommand::Lifetime { common, io } => {
            let (cfg, curve_path) = fit_config(&common, &io)?;
            let path = single_input(&cfg)?;
            let hist = with_path(&path, lifetime_from_table(&read_table(&path)?))?;
            let fit = with_path(&path, fit_lifetime(&hist))?;
            let peak = hist
                .counts
                .iter()
                .enumerate()
                .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let centers = hist.centers();
            let (amp, tau, bg) = (fit.value("amplitude"), fit.value("tau21"), fit.value("background"));
            let x = &centers[peak..];
            let y: Vec<f64> = x.iter().map(|t| amp * (-(t - centers[peak]) / tau).exp() + bg).collect();
            let extra = serde_json::json!({ "background_hz": hist.per_bin_to_hz(bg) });
            write_fit(&cfg, "fit lifetime", &io.output, &curve_path, &fit, extra, xy_table("fit-curve", "t_ps", "counts", x, &y))
        }
        FitCommand::G2 { common, io } => {
            let (cfg, curve_path) = fit_config(&common, &io)?;
            let path = single_input(&cfg)?;
            let hist = with_path(&path, histogram_from_table(&read_table(&path)?))?;
            let fit = with_path(&path, fit_g2_two_exp(&hist, &exclusions(&cfg)?))?;
            let p = TwoExpG2Params {
                a: fit.value("a"),
                b: fit.value("b"),
                tau1: fit.value("tau1"),
                tau2: fit.value("tau2"),
            };
            let x = hist.centers();
            let y: Vec<f64> = x.iter().map(|&t| g2_two_exp(t, &p)).collect();
            let extra = serde_json::json!({
                "g2_zero": p.g2_zero(),
                "g2_zero_std_err": fit.std_err_of_difference("b", "a"),
            });
            write_fit(&cfg, "fit g2", &io.output, &curve_path, &fit, extra, xy_table("fit-curve", "tau_ps", "g2", &x, &y))
        }
        FitCommand::Rate { common, io } => {
            let (cfg, curve_path) = fit_config(&common, &io)?;
            // powers pair with inputs in the order given
            let paths: Vec<PathBuf> = cfg
                .str("io.inputs")
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(PathBuf::from)
                .collect();
            if paths.is_empty() {
                return Err(CliError::Usage("no input files given".into()));
            }
            let powers = cfg.f64_list("fit.powers_uw")?;
            if !powers.is_empty() && powers.len() != paths.len() {
                return Err(CliError::Usage(format!(
                    "fit.powers_uw has {} values for {} inputs",
                    powers.len(),
                    paths.len()
                )));
            }
            let excl = exclusions(&cfg)?;
            let mut data = Vec::new();
            for (i, path) in paths.iter().enumerate() {
                let table = read_table(path)?;
                let power_uw = match powers.get(i) {
                    Some(&p) => p,
                    None => table.meta_value::<f64>("power_uw").map_err(|_| {
                        CliError::Usage(format!("{}: no power_uw in header; set fit.powers_uw", path.display()))
                    })?,
                };
                data.push(RateModelData {
                    power_uw,
                    histogram: with_path(path, histogram_from_table(&table))?,
                    exclusions: excl.clone(),
                });
            }
            let tau21 = cfg.ps("fit.tau21_ps")? as f64;
            let fit = fit_rate_model(&data, tau21)?;
            let mut curve = Table::new("fit-curve", &["power_uw", "tau_ps", "g2_raw"]);
            for (d, pf) in data.iter().zip(&fit.per_power) {
                let sol = solve_rate_model(&pf.rates)?;
                for t in d.histogram.centers() {
                    let g = background_uncorrect(sol.g2(t.abs()), pf.sigma)?;
                    curve.rows.push(vec![fmt_real(pf.power_uw), fmt_real(t), fmt_real(g)]);
                }
            }
            let extra = serde_json::json!({ "alpha_per_ps_uw": fit.alpha, "per_power": fit.per_power });
            write_fit(&cfg, "fit rate", &io.output, &curve_path, &fit.fit, extra, curve)
        }
        FitCommand::PulsedQ { common, io } => {
            let (mut cfg, curve_path) = fit_config(&common, &io)?;
            let path = single_input(&cfg)?;
            let table = read_table(&path)?;
            if !cfg.is_set("fit.tau_rep_ps") {
                let rep: u64 = table
                    .meta_value("tau_rep_ps")
                    .map_err(|_| CliError::Usage(format!("{}: no tau_rep_ps in header; set fit.tau_rep_ps", path.display())))?;
                cfg.set("fit.tau_rep_ps", rep.to_string());
            }
            let tau_rep = cfg.ps("fit.tau_rep_ps")?;
            let s = with_path(&path, qseries_from_table(&table))?;
            let fit = with_path(&path, fit_pulsed_q(&s, tau_rep))?;
            let p = PulsedQModelParams {
                eta: fit.value("eta"),
                tau23: fit.value("tau23"),
                tau31: fit.value("tau31"),
                tau_rep: tau_rep as f64,
            };
            let mut curve = Table::new("fit-curve", &["k", "t_ps", "q"]);
            for e in &s.entries {
                let k = e.t / tau_rep;
                if k >= 1 {
                    curve.rows.push(vec![k.to_string(), e.t.to_string(), fmt_real(pulsed_q_model(k, &p)?)]);
                }
            }
            let extra = serde_json::json!({
                "beta": p.beta(),
                "q_limit": pulsed_q_limit(&p).ok().filter(|_| p.beta() < 2.0),
            });
            write_fit(&cfg, "fit pulsed-q", &io.output, &curve_path, &fit, extra, curve)
        }
        FitCommand::Saturation { common, io } => {
            let (cfg, curve_path) = fit_config(&common, &io)?;
            let path = single_input(&cfg)?;
            let cols = read_columns(&path, &["power_uw", "rate_hz"])?;
            let fit = with_path(&path, fit_saturation(&cols[0], &cols[1]))?;
            let p = SaturationParams {
                i_inf: fit.value("i_inf"),
                p_sat: fit.value("p_sat"),
                b: fit.value("b"),
                c: fit.value("c"),
            };
            let pmax = cols[0].iter().copied().fold(0.0, f64::max);
            let x: Vec<f64> = (0..=200).map(|i| pmax * i as f64 / 200.0).collect();
            let y = x.iter().map(|&pw| saturation_rate(pw, &p)).collect::<mandelq::Result<Vec<_>>>()?;
            write_fit(
                &cfg,
                "fit saturation",
                &io.output,
                &curve_path,
                &fit,
                serde_json::Value::Null,
                xy_table("fit-curve", "power_uw", "rate_hz", &x, &y),
            )
        }
    }
}

fn model_config(keys: &[(&str, &str)], args: &ModelArgs) -> Result<Config, CliError> {
    let mut cfg = resolve(keys, &args.common)?;
    cfg.set("io.output", args.output.display().to_string());
    Ok(cfg)
}

fn run_model(command: ModelCommand) -> Result<(), CliError> {
    match command {
        ModelCommand::CwQ(args) => {
            let cfg = model_config(
                &[
                    ("model.a", "0.3"),
                    ("model.t1_ps", "2.7ns"),
                    ("model.t2_ps", "200ns"),
                    ("model.rate_hz", "34e3"),
                    ("model.grid_ps", "0.1ns:10us:200"),
                ],
                &args,
            )?;
            let p = AnalyticCwQParams {
                a: cfg.f64("model.a")?,
                t1: cfg.ps("model.t1_ps")? as f64,
                t2: cfg.ps("model.t2_ps")? as f64,
                mean_rate: cfg.f64("model.rate_hz")?,
            };
            p.validate()?;
            let t: Vec<f64> = cfg.ps_grid("model.grid_ps")?.into_iter().map(|v| v as f64).collect();
            let q: Vec<f64> = t.iter().map(|&x| analytic_cw_q(x, &p)).collect();
            let (lo, hi) = (t[0], t[t.len() - 1]);
            let crossing = if hi > lo { analytic_cw_q_crossover(&p, lo, hi)? } else { None };
            let table = xy_table("model-cw-q", "t_ps", "q", &t, &q).with_meta(cfg.header("model cw-q")).with_meta([
                ("q_limit", fmt_real(analytic_cw_q_limit(&p))),
                ("crossover_ps", crossing.map(fmt_real).unwrap_or_default()),
            ]);
            write_table(&args.output, &table)
        }
        ModelCommand::PulsedQ(args) => {
            let cfg = model_config(
                &[
                    ("model.eta", "7.5e-4"),
                    ("model.tau23_ps", "153ns"),
                    ("model.tau31_ps", "665ns"),
                    ("model.tau_rep_ps", "100ns"),
                    ("model.k_max", "1000"),
                ],
                &args,
            )?;
            let p = PulsedQModelParams {
                eta: cfg.f64("model.eta")?,
                tau23: cfg.ps("model.tau23_ps")? as f64,
                tau31: cfg.ps("model.tau31_ps")? as f64,
                tau_rep: cfg.ps("model.tau_rep_ps")? as f64,
            };
            let mut table = Table::new("model-pulsed-q", &["k", "t_ps", "q"]).with_meta(cfg.header("model pulsed-q"));
            if p.validate()? == mandelq::models::BetaRegime::Convergent {
                table = table.with_meta([("q_limit", fmt_real(pulsed_q_limit(&p)?))]);
            }
            for k in 1..=cfg.u64("model.k_max")? {
                table.rows.push(vec![
                    k.to_string(),
                    fmt_real(k as f64 * p.tau_rep),
                    fmt_real(pulsed_q_model(k, &p)?),
                ]);
            }
            write_table(&args.output, &table)
        }
        ModelCommand::RateG2(args) => {
            let cfg = model_config(
                &[
                    ("model.tau12_ps", "415ns"),
                    ("model.tau21_ps", "2.7ns"),
                    ("model.tau23_ps", "1.93ns"),
                    ("model.tau31_ps", "204ns"),
                    ("model.sigma", "1"),
                    ("model.grid_ps", "10ps:10us:200"),
                ],
                &args,
            )?;
            let (t12, t21) = (cfg.ps("model.tau12_ps")? as f64, cfg.ps("model.tau21_ps")? as f64);
            let rates = match (cfg.opt_ps("model.tau23_ps")?, cfg.opt_ps("model.tau31_ps")?) {
                (Some(a), Some(b)) => EmitterRates::three_level(t12, t21, a as f64, b as f64)?,
                _ => EmitterRates::two_level(t12, t21)?,
            };
            let sol = solve_rate_model(&rates)?;
            let sigma = cfg.f64("model.sigma")?;
            let mut table = Table::new("model-rate-g2", &["tau_ps", "g2", "g2_raw"]).with_meta(cfg.header("model rate-g2"));
            for t in cfg.ps_grid("model.grid_ps")? {
                let g = sol.g2(t as f64);
                table.rows.push(vec![t.to_string(), fmt_real(g), fmt_real(background_uncorrect(g, sigma)?)]);
            }
            write_table(&args.output, &table)
        }
        ModelCommand::TwoExpG2(args) => {
            let cfg = model_config(
                &[
                    ("model.a", "0.7"),
                    ("model.b", "0.3"),
                    ("model.tau1_ps", "2.7ns"),
                    ("model.tau2_ps", "200ns"),
                    ("model.grid_ps", "10ps:10us:200"),
                ],
                &args,
            )?;
            let p = TwoExpG2Params {
                a: cfg.f64("model.a")?,
                b: cfg.f64("model.b")?,
                tau1: cfg.ps("model.tau1_ps")? as f64,
                tau2: cfg.ps("model.tau2_ps")? as f64,
            };
            let t: Vec<f64> = cfg.ps_grid("model.grid_ps")?.into_iter().map(|v| v as f64).collect();
            let g: Vec<f64> = t.iter().map(|&x| g2_two_exp(x, &p)).collect();
            let table = xy_table("model-two-exp-g2", "tau_ps", "g2", &t, &g).with_meta(cfg.header("model two-exp-g2"));
            write_table(&args.output, &table)
        }
        ModelCommand::Saturation(args) => {
            let cfg = model_config(
                &[
                    ("model.i_inf_hz", "60e3"),
                    ("model.p_sat_uw", "240"),
                    ("model.b", "0"),
                    ("model.c", "0"),
                    ("model.power_grid_uw", "1:2000:100"),
                ],
                &args,
            )?;
            let p = SaturationParams {
                i_inf: cfg.f64("model.i_inf_hz")?,
                p_sat: cfg.f64("model.p_sat_uw")?,
                b: cfg.f64("model.b")?,
                c: cfg.f64("model.c")?,
            };
            p.validate()?;
            let x = cfg.f64_grid("model.power_grid_uw")?;
            let y = x.iter().map(|&pw| saturation_rate(pw, &p)).collect::<mandelq::Result<Vec<_>>>()?;
            let table = xy_table("model-saturation", "power_uw", "rate_hz", &x, &y).with_meta(cfg.header("model saturation"));
            write_table(&args.output, &table)
        }
    }
}
