//! The three experiments. Each writes its files under the output directory
//! and returns a verdict; nothing here prints.

use std::fmt;

use anyhow::{bail, Result};
use clap::ValueEnum;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use sdex::circuit::{CrossbarConfig, CrossbarTile, NodalSystem, RestState};
use sdex::device::{DeviceClass, DeviceState};
use sdex::energy::{EnergyLedger, EnergyReport};
use sdex::gauss::{word_line_pairs, GaussianSource, SourceParams};
use sdex::sde::{
    bs_cdf, bs_mean, bs_reference_samples, bs_var, derive_seed, simulate_ensemble, CrossbarSetup,
    EnsembleOptions, EnsembleResult, NoiseSource, ParamMode, SdeProblem, CALIBRATION_STREAM,
    LAYOUT_STREAM, REFERENCE_STREAM,
};
use sdex::stats::{self, excess_kurtosis_se, moments, MomentStats, Trend};

use crate::config::ExperimentConfig;
use crate::output::{write_csv, write_json, Check, OutDir, Verdict};

/// Extra outputs not needed for a verdict.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Write the reduced nodal system of the experiment tile.
    pub dump_nodal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Crossbar noise, exact drift and diffusion.
    NoiseOnly,
    /// Crossbar noise, drift and diffusion on the crossbar.
    FullCrossbar,
    /// Software noise, exact drift and diffusion.
    Digital,
}

impl Mode {
    pub fn noise(self) -> NoiseSource {
        match self {
            Mode::Digital => NoiseSource::Digital,
            _ => NoiseSource::Crossbar,
        }
    }

    pub fn params(self) -> ParamMode {
        match self {
            Mode::FullCrossbar => ParamMode::Crossbar,
            _ => ParamMode::Digital,
        }
    }

    /// File-name tag.
    pub fn tag(self) -> &'static str {
        match self {
            Mode::NoiseOnly => "noise_only",
            Mode::FullCrossbar => "full_crossbar",
            Mode::Digital => "digital",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::NoiseOnly => "noise-only",
            Mode::FullCrossbar => "full-crossbar",
            Mode::Digital => "digital",
        })
    }
}

/// Energy JSON: the fixed report fields of the whole run, then breakdowns.
#[derive(Debug, Clone, Serialize)]
pub struct EnergyJson {
    #[serde(flatten)]
    pub total: EnergyReport,
    /// Gaussian samples drawn after setup.
    pub samples: u64,
    /// Write plus verify energy of the pair programs behind one sample.
    pub per_sample_program_j: f64,
    pub setup: EnergyReport,
    pub run: EnergyReport,
}

impl EnergyJson {
    pub fn new(setup: &EnergyLedger, run: &EnergyLedger, samples: u64) -> Self {
        let mut total = setup.clone();
        total.merge(run);
        let per_sample = if samples > 0 {
            (run.write_energy_j + run.verify_energy_j) / samples as f64
        } else {
            0.0
        };
        Self {
            total: total.report(),
            samples,
            per_sample_program_j: per_sample,
            setup: setup.report(),
            run: run.report(),
        }
    }
}

#[derive(Serialize)]
struct SampleRow {
    pair_index: usize,
    draw_index: usize,
    raw_current_diff_a: f64,
    z_value: f64,
}

#[derive(Serialize)]
struct MomentRow {
    pair_index: usize,
    mean: f64,
    std: f64,
    skew: f64,
    excess_kurtosis: f64,
}

#[derive(Serialize)]
struct ConductanceRow {
    row: usize,
    col: usize,
    class: &'static str,
    g_target_s: f64,
    g_actual_s: f64,
}

#[derive(Serialize)]
struct CurrentRow {
    step: usize,
    row: usize,
    col: usize,
    current_a: f64,
}

#[derive(Serialize)]
struct FinalRow {
    trajectory_id: usize,
    seed: u64,
    final_value: f64,
}

#[derive(Serialize)]
struct ReferenceRow {
    sample_id: usize,
    w: f64,
    final_value: f64,
}

#[derive(Serialize)]
struct PathRow {
    trajectory_id: usize,
    step: usize,
    t: f64,
    x: f64,
}

#[derive(Serialize)]
struct RngSummary {
    n_vectors: usize,
    vector_len: usize,
    rows: usize,
    cols: usize,
    r_line: f64,
    unused: RestState,
    /// Sampling std of the excess kurtosis of n normal draws.
    kurtosis_se: f64,
    skew_trend: Trend,
    kurtosis_trend: Trend,
    first_pair: MomentStats,
    last_pair: MomentStats,
    /// |mean difference| in pooled standard errors.
    first_last_mean_se: f64,
    /// std of the last pair over std of the first.
    first_last_std_ratio: f64,
}

fn class_name(d: &DeviceState) -> &'static str {
    match d.class {
        DeviceClass::Weight => "weight",
        DeviceClass::RandomSource => "random",
        DeviceClass::Unused => "unused",
    }
}

fn write_conductances(out: &OutDir, name: &str, tile: &CrossbarTile) -> Result<()> {
    let cols = tile.config().cols;
    write_csv(
        &out.path(name),
        tile.devices().iter().enumerate().map(|(k, d)| ConductanceRow {
            row: k / cols,
            col: k % cols,
            class: class_name(d),
            g_target_s: d.g_target,
            g_actual_s: d.g_actual,
        }),
    )
}

fn write_nodal_dump(out: &OutDir, name: &str, tile: &CrossbarTile, row: usize) -> Result<()> {
    let sys = NodalSystem::new(tile)?;
    let mut wl = vec![0.0; tile.config().rows];
    wl[row] = tile.config().v_read;
    let mut w = out.create(name)?;
    sys.write_dump(tile, &sys.read_sources(&wl), &mut w)?;
    Ok(())
}

/// Gaussian-source characterization: calibrate a word line of pairs on a
/// large tile, draw `n_vectors` vectors, and check moments and position
/// independence.
pub fn rng_characterize(cfg: &ExperimentConfig, out: &OutDir, opts: RunOptions) -> Result<Verdict> {
    let rc = &cfg.rng;
    if rc.n_vectors < 4 {
        bail!("rng.n_vectors must be at least 4, got {}", rc.n_vectors);
    }
    if rc.vector_len < 3 {
        bail!("rng.vector_len must be at least 3, got {}", rc.vector_len);
    }
    let crossbar = CrossbarConfig {
        rows: rc.rows,
        cols: rc.cols,
        ..cfg.crossbar
    };
    if 2 * rc.vector_len > rc.cols || rc.word_line >= rc.rows {
        bail!(
            "{} pairs on word line {} do not fit a {}x{} tile",
            rc.vector_len,
            rc.word_line,
            rc.rows,
            rc.cols
        );
    }
    let mut layout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, LAYOUT_STREAM));
    let tile = CrossbarTile::populated(crossbar, &cfg.device, rc.unused, &mut layout_rng)?;
    let params = SourceParams {
        calib_n: rc.calib_n,
        ..SourceParams::hrs(&cfg.device)
    };
    let mut source = GaussianSource::new(
        tile,
        word_line_pairs(rc.word_line, 0, rc.vector_len),
        params,
        &cfg.device,
        cfg.pulse,
        derive_seed(cfg.master_seed, CALIBRATION_STREAM),
    )?;
    let mut setup = EnergyLedger::new();
    source.calibrate(&mut setup)?;
    write_conductances(out, "rng_tile_conductance.csv", source.tile())?;
    if opts.dump_nodal {
        write_nodal_dump(out, "rng_nodal.txt", source.tile(), rc.word_line)?;
    }

    let d = rc.vector_len;
    let mut run = EnergyLedger::new();
    let mut raw = vec![Vec::with_capacity(rc.n_vectors); d];
    let mut z = vec![Vec::with_capacity(rc.n_vectors); d];
    let mut trace = Vec::new();
    for i in 0..rc.n_vectors {
        let r = source.draw_raw(&mut run)?;
        let zs = source.standardize(&r)?;
        for k in 0..d {
            raw[k].push(r[k]);
            z[k].push(zs[k]);
        }
        if i < 16 {
            for (row, currents) in source.last_currents() {
                for (col, &c) in currents.iter().enumerate() {
                    trace.push(CurrentRow {
                        step: i,
                        row: *row,
                        col,
                        current_a: c,
                    });
                }
            }
        }
    }

    write_csv(
        &out.path("rng_samples.csv"),
        (0..d).flat_map(|k| {
            let (raw, z) = (&raw[k], &z[k]);
            (0..rc.n_vectors).map(move |i| SampleRow {
                pair_index: k,
                draw_index: i,
                raw_current_diff_a: raw[i],
                z_value: z[i],
            })
        }),
    )?;
    write_csv(&out.path("rng_bitline_currents.csv"), trace)?;

    let pair_moments: Vec<MomentStats> = raw.iter().map(|xs| moments(xs)).collect::<sdex::Result<_>>()?;
    write_csv(
        &out.path("rng_moments.csv"),
        pair_moments.iter().enumerate().map(|(k, m)| MomentRow {
            pair_index: k,
            mean: m.mean,
            std: m.std,
            skew: m.skew,
            excess_kurtosis: m.excess_kurtosis,
        }),
    )?;

    let idx: Vec<f64> = (0..d).map(|k| k as f64).collect();
    let skews: Vec<f64> = pair_moments.iter().map(|m| m.skew).collect();
    let kurts: Vec<f64> = pair_moments.iter().map(|m| m.excess_kurtosis).collect();
    let skew_trend = stats::trend_slope(&idx, &skews)?;
    let kurtosis_trend = stats::trend_slope(&idx, &kurts)?;
    let (first, last) = (pair_moments[0], pair_moments[d - 1]);
    let n = rc.n_vectors as f64;
    let pooled_se = ((first.std.powi(2) + last.std.powi(2)) / n).sqrt();
    let mean_se = (first.mean - last.mean).abs() / pooled_se;
    let std_ratio = last.std / first.std;

    let summary = RngSummary {
        n_vectors: rc.n_vectors,
        vector_len: d,
        rows: rc.rows,
        cols: rc.cols,
        r_line: crossbar.r_line,
        unused: rc.unused,
        kurtosis_se: excess_kurtosis_se(rc.n_vectors),
        skew_trend,
        kurtosis_trend,
        first_pair: first,
        last_pair: last,
        first_last_mean_se: mean_se,
        first_last_std_ratio: std_ratio,
    };
    write_json(&out.path("rng_trend.json"), &summary)?;
    write_json(
        &out.path("rng_energy.json"),
        &EnergyJson::new(&setup, &run, rc.n_vectors as u64),
    )?;

    let th = &cfg.thresholds;
    let max_skew = skews.iter().fold(0.0f64, |a, s| a.max(s.abs()));
    let max_kurt = kurts.iter().fold(0.0f64, |a, s| a.max(s.abs()));
    let checks = vec![
        Check::below("max_abs_skew", max_skew, th.rng_moment_max),
        Check::below("max_abs_excess_kurtosis", max_kurt, th.rng_moment_max),
        Check::within("skew_trend_ci_low", skew_trend.ci_low, f64::NEG_INFINITY, 0.0),
        Check::within("skew_trend_ci_high", skew_trend.ci_high, 0.0, f64::INFINITY),
        Check::within("kurtosis_trend_ci_low", kurtosis_trend.ci_low, f64::NEG_INFINITY, 0.0),
        Check::within("kurtosis_trend_ci_high", kurtosis_trend.ci_high, 0.0, f64::INFINITY),
        Check::below("first_last_mean_se", mean_se, th.rng_mean_se),
        Check::within(
            "first_last_std_ratio",
            std_ratio,
            1.0 - th.rng_std_ratio_tol,
            1.0 + th.rng_std_ratio_tol,
        ),
    ];
    Ok(Verdict::new("rng-characterize", checks))
}

fn ensemble_options(cfg: &ExperimentConfig, device: sdex::device::DeviceSpec) -> EnsembleOptions {
    EnsembleOptions {
        master_seed: cfg.master_seed,
        crossbar: CrossbarSetup {
            config: cfg.crossbar,
            device,
            pulse: cfg.pulse,
            calib_n: cfg.bs.calib_n,
            x_max: cfg.bs.x_max_factor * cfg.bs.x0,
        },
        record_paths: cfg.bs.dump_paths,
        trace_steps: cfg.bs.trace_steps,
    }
}

fn run_mode(cfg: &ExperimentConfig, mode: Mode) -> Result<EnsembleResult> {
    let bs = &cfg.bs;
    if bs.m_trajectories == 0 {
        bail!("bs.m_trajectories must be at least 1");
    }
    let problem = SdeProblem::black_scholes(&bs.params(), bs.t1, bs.n_steps)?;
    Ok(simulate_ensemble(
        &problem,
        mode.noise(),
        mode.params(),
        bs.m_trajectories,
        &ensemble_options(cfg, cfg.device),
    )?)
}

#[derive(Serialize)]
struct Comparison {
    mode: Mode,
    r: f64,
    sigma: f64,
    t: f64,
    x0: f64,
    n_steps: usize,
    m: usize,
    kept: usize,
    flagged: usize,
    finals: MomentStats,
    analytic_mean: f64,
    analytic_var: f64,
    mean_se: f64,
    ks_vs_analytic: f64,
    ks_vs_reference_samples: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    ks_vs_digital: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    digital_skew: Option<f64>,
    /// Skew of the run with the same crossbar noise but exact parameters.
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_only_skew: Option<f64>,
}

/// Black-Scholes ensemble in `mode`, compared against the closed form and,
/// for crossbar modes, against the matching digital runs.
pub fn solve_bs(cfg: &ExperimentConfig, mode: Mode, out: &OutDir, opts: RunOptions) -> Result<Verdict> {
    let bs = &cfg.bs;
    let params = bs.params();
    let res = run_mode(cfg, mode)?;
    let tag = mode.tag();
    let finals = res.final_component(0);
    if finals.len() < 4 {
        bail!("only {} trajectories finished", finals.len());
    }

    write_csv(
        &out.path(&format!("bs_finals_{tag}.csv")),
        res.kept.iter().zip(&finals).map(|(&id, &x)| FinalRow {
            trajectory_id: id,
            seed: res.seeds[id],
            final_value: x,
        }),
    )?;
    let reference = bs_reference_samples(
        &params,
        bs.t1,
        bs.m_trajectories,
        derive_seed(cfg.master_seed, REFERENCE_STREAM),
    );
    write_csv(
        &out.path("bs_reference.csv"),
        reference.iter().enumerate().map(|(i, &(w, x))| ReferenceRow {
            sample_id: i,
            w,
            final_value: x,
        }),
    )?;
    if bs.dump_paths {
        write_csv(
            &out.path(&format!("bs_paths_{tag}.csv")),
            res.paths.iter().flat_map(|p| {
                let times = &res.times;
                p.states.iter().enumerate().map(move |(k, x)| PathRow {
                    trajectory_id: p.id,
                    step: k,
                    t: times[k],
                    x: x[0],
                })
            }),
        )?;
    }
    if let Some(tile) = &res.tile {
        write_conductances(out, &format!("bs_tile_conductance_{tag}.csv"), tile)?;
        write_csv(
            &out.path(&format!("bs_bitline_currents_{tag}.csv")),
            res.trace.iter().flat_map(|t| {
                t.currents.iter().enumerate().map(move |(col, &c)| CurrentRow {
                    step: t.step,
                    row: t.row,
                    col,
                    current_a: c,
                })
            }),
        )?;
        if opts.dump_nodal {
            write_nodal_dump(out, &format!("bs_nodal_{tag}.txt"), tile, 1)?;
        }
    }

    let m = moments(&finals)?;
    let mean = bs_mean(&params, bs.t1);
    let var = bs_var(&params, bs.t1);
    let mean_se = (m.mean - mean).abs() / (m.std / (finals.len() as f64).sqrt());
    let cdf = |x| bs_cdf(&params, bs.t1, x);
    let ref_values: Vec<f64> = reference.iter().map(|p| p.1).collect();
    let mut cmp = Comparison {
        mode,
        r: params.r,
        sigma: params.sigma,
        t: bs.t1,
        x0: params.x0,
        n_steps: bs.n_steps,
        m: bs.m_trajectories,
        kept: finals.len(),
        flagged: res.flagged.len(),
        finals: m,
        analytic_mean: mean,
        analytic_var: var,
        mean_se,
        ks_vs_analytic: stats::ks_one_sample(&finals, &cdf)?,
        ks_vs_reference_samples: stats::ks_two_sample(&finals, &ref_values)?,
        ks_vs_digital: None,
        digital_skew: None,
        noise_only_skew: None,
    };

    let th = &cfg.thresholds;
    let mut checks = vec![Check::below("flagged_trajectories", res.flagged.len() as f64, 0.5)];
    match mode {
        Mode::Digital => {
            checks.push(Check::below("mean_standard_errors", mean_se, th.bs_mean_se));
            checks.push(Check::below(
                "variance_relative_error",
                (m.std * m.std / var - 1.0).abs(),
                th.bs_var_rel,
            ));
        }
        Mode::NoiseOnly => {
            let digital = run_mode(cfg, Mode::Digital)?.final_component(0);
            let ks = stats::ks_two_sample(&finals, &digital)?;
            cmp.ks_vs_digital = Some(ks);
            cmp.digital_skew = Some(moments(&digital)?.skew);
            checks.push(Check::below("ks_vs_digital", ks, th.bs_ks_max));
            checks.push(Check::below("ks_vs_analytic", cmp.ks_vs_analytic, th.bs_ks_max));
        }
        Mode::FullCrossbar => {
            let digital = run_mode(cfg, Mode::Digital)?.final_component(0);
            let digital_skew = moments(&digital)?.skew;
            cmp.ks_vs_digital = Some(stats::ks_two_sample(&finals, &digital)?);
            cmp.digital_skew = Some(digital_skew);
            let noise_only = moments(&run_mode(cfg, Mode::NoiseOnly)?.final_component(0))?.skew;
            cmp.noise_only_skew = Some(noise_only);
            let diff = m.skew - digital_skew;
            if cfg.device.write_perturbation > 0.0 {
                checks.push(Check::above("skew_excess", diff, 0.0));
            } else {
                checks.push(Check::below("abs_skew_difference", diff.abs(), th.bs_skew_exact_max));
            }
        }
    }
    write_json(&out.path(&format!("bs_comparison_{tag}.json")), &cmp)?;
    write_json(
        &out.path(&format!("bs_energy_{tag}.json")),
        &EnergyJson::new(&res.setup_energy, &res.trajectory_energy, res.gaussian_draws),
    )?;
    Ok(Verdict::new("solve-bs", checks))
}

/// Energy of the default workload: the Black-Scholes ensemble with noise
/// and parameters on the crossbar.
pub fn energy_report(cfg: &ExperimentConfig, out: &OutDir) -> Result<Verdict> {
    let res = run_mode(cfg, Mode::FullCrossbar)?;
    let report = EnergyJson::new(&res.setup_energy, &res.trajectory_energy, res.gaussian_draws);
    write_json(&out.path("energy_report.json"), &report)?;
    let th = &cfg.thresholds;
    let pair = report.per_sample_program_j;
    let checks = vec![
        Check::factor("per_sample_program_j", pair, th.pair_energy_j, th.energy_factor),
        Check::factor("total_j", report.total.total_j, th.total_energy_j, th.energy_factor),
        Check::within(
            "write_operations",
            report.total.programs as f64,
            th.write_ops * (1.0 - th.write_ops_rel),
            th.write_ops * (1.0 + th.write_ops_rel),
        ),
        Check::factor("read_energy_j", report.total.read_energy_j, th.read_energy_j, th.energy_factor),
    ];
    Ok(Verdict::new("energy-report", checks))
}
