//! Euler-Maruyama ensembles with crossbar or digital noise, and the
//! Black-Scholes closed form they are checked against.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{CrossbarConfig, CrossbarTile, MappingParams, NodalSystem, RestState, WeightBlock};
use crate::device::DeviceSpec;
use crate::energy::{EnergyLedger, PulseModel};
use crate::error::{Error, Result};
use crate::gauss::{word_line_pairs, GaussianSource, SourceParams, DEFAULT_CALIB_N};
use crate::stats;

/// `(t, x) ↦ d-vector`.
pub type VectorField = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;
/// `(t, W_t) ↦ X_t` for a problem with a pathwise closed form.
pub type ExactSolution = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;

/// Trajectories beyond this magnitude are flagged as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Drift `A·x` and diffusion `B·x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCoefficients {
    pub drift: DMatrix<f64>,
    pub diffusion: DMatrix<f64>,
}

/// `dX = r(t, X) dt + σ(t, X) ⊙ dW` on `[t0, t1]`.
#[derive(Clone)]
pub struct SdeProblem {
    dim: usize,
    drift: VectorField,
    diffusion: VectorField,
    x0: Vec<f64>,
    t0: f64,
    t1: f64,
    n_steps: usize,
    linear: Option<LinearCoefficients>,
    exact: Option<ExactSolution>,
}

impl fmt::Debug for SdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeProblem")
            .field("dim", &self.dim)
            .field("x0", &self.x0)
            .field("t0", &self.t0)
            .field("t1", &self.t1)
            .field("n_steps", &self.n_steps)
            .field("linear", &self.linear)
            .field("exact", &self.exact.is_some())
            .finish()
    }
}

impl SdeProblem {
    pub fn new(
        x0: Vec<f64>,
        t0: f64,
        t1: f64,
        n_steps: usize,
        drift: VectorField,
        diffusion: VectorField,
    ) -> Result<Self> {
        if x0.is_empty() {
            return Err(Error::usage("x0 must have at least one component"));
        }
        if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
            return Err(Error::usage(format!("need t1 > t0, got [{t0}, {t1}]")));
        }
        if n_steps == 0 {
            return Err(Error::usage("n_steps must be at least 1"));
        }
        Ok(Self {
            dim: x0.len(),
            drift,
            diffusion,
            x0,
            t0,
            t1,
            n_steps,
            linear: None,
            exact: None,
        })
    }

    /// Linear problem `dX = A·X dt + (B·X) ⊙ dW`.
    pub fn linear(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        x0: Vec<f64>,
        t0: f64,
        t1: f64,
        n_steps: usize,
    ) -> Result<Self> {
        let d = x0.len();
        if a.shape() != (d, d) || b.shape() != (d, d) {
            return Err(Error::usage(format!("coefficients must be {d}x{d}")));
        }
        let (fa, fb) = (a.clone(), b.clone());
        let drift: VectorField = Arc::new(move |_, x| mat_vec(&fa, x));
        let diffusion: VectorField = Arc::new(move |_, x| mat_vec(&fb, x));
        let mut p = Self::new(x0, t0, t1, n_steps, drift, diffusion)?;
        p.linear = Some(LinearCoefficients { drift: a, diffusion: b });
        Ok(p)
    }

    /// `dX = rX dt − σX dW` on `[0, t1]`.
    pub fn black_scholes(params: &BlackScholesParams, t1: f64, n_steps: usize) -> Result<Self> {
        params.validate()?;
        let p = *params;
        let mut prob = Self::linear(
            DMatrix::from_element(1, 1, p.r),
            DMatrix::from_element(1, 1, -p.sigma),
            vec![p.x0],
            0.0,
            t1,
            n_steps,
        )?;
        // the diffusion carries a minus sign, so X_t is the closed form at −W_t
        prob.exact = Some(Arc::new(move |t, w| vec![bs_analytic_final(&p, t, -w[0])]));
        Ok(prob)
    }

    /// `dX = dW`.
    pub fn wiener(x0: f64, t1: f64, n_steps: usize) -> Result<Self> {
        let mut p = Self::new(
            vec![x0],
            0.0,
            t1,
            n_steps,
            Arc::new(|_, _| vec![0.0]),
            Arc::new(|_, _| vec![1.0]),
        )?;
        p.exact = Some(Arc::new(move |_, w| vec![x0 + w[0]]));
        Ok(p)
    }

    pub fn with_exact(mut self, exact: ExactSolution) -> Self {
        self.exact = Some(exact);
        self
    }

    pub fn with_steps(mut self, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::usage("n_steps must be at least 1"));
        }
        self.n_steps = n_steps;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn span(&self) -> (f64, f64) {
        (self.t0, self.t1)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }

    pub fn linear_coefficients(&self) -> Option<&LinearCoefficients> {
        self.linear.as_ref()
    }

    pub fn drift(&self, t: f64, x: &[f64]) -> Vec<f64> {
        (self.drift)(t, x)
    }

    pub fn diffusion(&self, t: f64, x: &[f64]) -> Vec<f64> {
        (self.diffusion)(t, x)
    }

    pub fn times(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..=self.n_steps).map(|i| self.t0 + i as f64 * dt).collect()
    }
}

fn mat_vec(a: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)] * x[j]).sum())
        .collect()
}

/// One forward Euler-Maruyama step `x + r(t,x)·dt + σ(t,x) ⊙ dw`.
pub fn em_step(x: &[f64], t: f64, dt: f64, dw: &[f64], problem: &SdeProblem) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::usage(format!("dt must be positive, got {dt}")));
    }
    let r = problem.drift(t, x);
    let s = problem.diffusion(t, x);
    if r.len() != x.len() || s.len() != x.len() || r.iter().chain(&s).any(|v| !v.is_finite()) {
        return Err(Error::Numerical { t, x: x.to_vec() });
    }
    Ok(em_update(x, &r, &s, dt, dw))
}

fn em_update(x: &[f64], r: &[f64], s: &[f64], dt: f64, dw: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(r.iter().zip(s))
        .zip(dw)
        .map(|((x, (r, s)), w)| x + r * dt + s * w)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlackScholesParams {
    pub r: f64,
    pub sigma: f64,
    pub x0: f64,
}

impl Default for BlackScholesParams {
    fn default() -> Self {
        Self {
            r: 0.1,
            sigma: 0.2,
            x0: 1.0,
        }
    }
}

impl BlackScholesParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !(self.x0 > 0.0) || !self.r.is_finite() {
            return Err(Error::usage(format!(
                "black-scholes needs sigma >= 0 and x0 > 0, got sigma {} x0 {}",
                self.sigma, self.x0
            )));
        }
        Ok(())
    }
}

/// `x0·exp(σw + (r − σ²/2)t)`.
pub fn bs_analytic_final(p: &BlackScholesParams, t: f64, w: f64) -> f64 {
    p.x0 * (p.sigma * w + (p.r - 0.5 * p.sigma * p.sigma) * t).exp()
}

pub fn bs_mean(p: &BlackScholesParams, t: f64) -> f64 {
    p.x0 * (p.r * t).exp()
}

pub fn bs_var(p: &BlackScholesParams, t: f64) -> f64 {
    p.x0 * p.x0 * (2.0 * p.r * t).exp() * ((p.sigma * p.sigma * t).exp_m1())
}

/// Lognormal CDF of `X_t`.
pub fn bs_cdf(p: &BlackScholesParams, t: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let s = p.sigma * t.sqrt();
    let m = (p.r - 0.5 * p.sigma * p.sigma) * t;
    if s == 0.0 {
        return if (x / p.x0).ln() >= m { 1.0 } else { 0.0 };
    }
    stats::normal_cdf(((x / p.x0).ln() - m) / s)
}

/// `n` closed-form values at time `t` on digital Wiener draws
/// `W_t ~ N(0, t)`, as `(w, x)` pairs.
pub fn bs_reference_samples(p: &BlackScholesParams, t: f64, n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = t.sqrt();
    (0..n)
        .map(|_| {
            let w = sd * rng.sample::<f64, _>(StandardNormal);
            (w, bs_analytic_final(p, t, w))
        })
        .collect()
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of stream `stream` under `master`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream))
}

/// Stream of the tile layout and weight writes.
pub const LAYOUT_STREAM: u64 = u64::MAX;
/// Stream of the random-source calibration.
pub const CALIBRATION_STREAM: u64 = u64::MAX - 1;
/// Stream of the digital reference draws.
pub const REFERENCE_STREAM: u64 = u64::MAX - 2;

/// Where the ΔW samples come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSource {
    /// A calibrated device pair per dimension on the crossbar.
    Crossbar,
    /// A seeded software normal generator.
    Digital,
}

/// How drift and diffusion are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamMode {
    /// Bit-serial VMM against the coefficients programmed as weights.
    Crossbar,
    /// Exact floating point.
    Digital,
}

/// Hardware used whenever a crossbar takes part in a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossbarSetup {
    pub config: CrossbarConfig,
    pub device: DeviceSpec,
    pub pulse: PulseModel,
    pub calib_n: usize,
    /// Largest state magnitude the VMM inputs accept.
    pub x_max: f64,
}

impl Default for CrossbarSetup {
    fn default() -> Self {
        Self {
            config: CrossbarConfig::default(),
            device: DeviceSpec::default(),
            pulse: PulseModel::default(),
            calib_n: DEFAULT_CALIB_N,
            x_max: 8.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EnsembleOptions {
    pub master_seed: u64,
    pub crossbar: CrossbarSetup,
    /// Keep every state of every trajectory.
    pub record_paths: bool,
    /// Keep the source tile's bit-line currents for this many steps of
    /// trajectory 0.
    pub trace_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: usize,
    pub states: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlaggedTrajectory {
    pub id: usize,
    pub step: usize,
    pub reason: String,
}

/// Bit-line currents of one random-source read.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRead {
    pub step: usize,
    pub row: usize,
    pub currents: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub times: Vec<f64>,
    /// Seed of every trajectory, flagged ones included.
    pub seeds: Vec<u64>,
    /// Ids of the trajectories in `finals`.
    pub kept: Vec<usize>,
    pub finals: Vec<Vec<f64>>,
    pub flagged: Vec<FlaggedTrajectory>,
    /// Weight programming and source calibration.
    pub setup_energy: EnergyLedger,
    /// Everything the trajectories did, merged in id order.
    pub trajectory_energy: EnergyLedger,
    pub gaussian_draws: u64,
    pub paths: Vec<Trajectory>,
    /// The tile as the trajectories found it, when a crossbar was used.
    pub tile: Option<CrossbarTile>,
    pub trace: Vec<TraceRead>,
}

impl EnsembleResult {
    pub fn total_energy(&self) -> EnergyLedger {
        let mut l = self.setup_energy.clone();
        l.merge(&self.trajectory_energy);
        l
    }

    /// Component `k` of every kept final state.
    pub fn final_component(&self, k: usize) -> Vec<f64> {
        self.finals.iter().map(|x| x[k]).collect()
    }
}

/// The shared, read-only part of a crossbar run; workers clone from it.
#[derive(Debug, Clone)]
struct Hardware {
    source: Option<GaussianSource>,
    system: Option<NodalSystem>,
    block: Option<WeightBlock>,
    tile: CrossbarTile,
}

/// Builds the tile: unused devices at a varied LRS, the coefficient matrix
/// `[A; B]` as a weight block at the origin, and one HRS random pair per
/// dimension on word line `d` starting at column `4d`.
fn build_hardware(
    problem: &SdeProblem,
    noise: NoiseSource,
    setup: &CrossbarSetup,
    master_seed: u64,
    program_weights: bool,
    ledger: &mut EnergyLedger,
) -> Result<Hardware> {
    let d = problem.dim();
    let cfg = setup.config;
    let spec = &setup.device;
    spec.validate()?;
    if cfg.rows < d + 1 || cfg.cols < 6 * d {
        return Err(Error::usage(format!(
            "a {d}-dimensional problem needs at least a {}x{} tile",
            d + 1,
            6 * d
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, LAYOUT_STREAM));
    let mut tile = CrossbarTile::populated(cfg, spec, RestState::Lrs, &mut rng)?;

    let mut block = None;
    let weights = problem.linear_coefficients().map(|c| {
        let mut w = DMatrix::zeros(2 * d, d);
        w.view_mut((0, 0), (d, d)).copy_from(&c.drift);
        w.view_mut((d, 0), (d, d)).copy_from(&c.diffusion);
        w
    });
    if program_weights {
        let w = weights
            .as_ref()
            .ok_or_else(|| Error::usage("crossbar parameters need a linear problem"))?;
        let w_max = w.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let params = MappingParams {
            w_max: if w_max > 0.0 { w_max } else { 1.0 },
            x_max: setup.x_max,
        };
        let before = NodalSystem::new(&tile)?;
        let (b, records) = WeightBlock::program(&mut tile, 0, 0, w, params, spec, &mut rng)?;
        for r in &records {
            ledger.charge_program(&before, r.row, r.col, spec.g_lrs, r.g_after, &setup.pulse);
        }
        block = Some(b);
    }

    match noise {
        NoiseSource::Crossbar => {
            let params = SourceParams {
                calib_n: setup.calib_n,
                ..SourceParams::hrs(spec)
            };
            let mut source = GaussianSource::new(
                tile,
                word_line_pairs(d, 4 * d, d),
                params,
                spec,
                setup.pulse,
                derive_seed(master_seed, CALIBRATION_STREAM),
            )?;
            if let (Some(b), Some(w)) = (block.as_mut(), weights.as_ref()) {
                b.trim(source.tile(), w)?;
            }
            source.calibrate(ledger)?;
            let tile = source.tile().clone();
            Ok(Hardware {
                source: Some(source),
                system: None,
                block,
                tile,
            })
        }
        NoiseSource::Digital => Ok(Hardware {
            source: None,
            system: Some(NodalSystem::new(&tile)?),
            block,
            tile,
        }),
    }
}

struct Outcome {
    final_state: std::result::Result<Vec<f64>, FlaggedTrajectory>,
    ledger: EnergyLedger,
    draws: u64,
    path: Option<Trajectory>,
    trace: Vec<TraceRead>,
}

fn run_trajectory(
    id: usize,
    seed: u64,
    problem: &SdeProblem,
    noise: NoiseSource,
    params: ParamMode,
    hw: Option<&Hardware>,
    opts: &EnsembleOptions,
) -> Result<Outcome> {
    let d = problem.dim();
    let dt = problem.dt();
    let sqrt_dt = dt.sqrt();
    let mut ledger = EnergyLedger::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut source = match noise {
        NoiseSource::Crossbar => Some(hw.and_then(|h| h.source.as_ref()).expect("crossbar source").fork(seed)),
        NoiseSource::Digital => None,
    };
    let mut x = problem.x0().to_vec();
    let mut path = opts.record_paths.then(|| vec![x.clone()]);
    let mut trace = Vec::new();
    let mut draws = 0;
    let flag = |step, reason: String| FlaggedTrajectory { id, step, reason };

    for step in 0..problem.n_steps() {
        let t = problem.t0 + step as f64 * dt;
        let z = match source.as_mut() {
            Some(s) => {
                let z = s.next_unit_normal(&mut ledger)?;
                draws += 1;
                if id == 0 && step < opts.trace_steps {
                    for (row, currents) in s.last_currents() {
                        trace.push(TraceRead {
                            step,
                            row: *row,
                            currents: currents.clone(),
                        });
                    }
                }
                z
            }
            None => (0..d).map(|_| rng.sample(StandardNormal)).collect(),
        };
        let dw: Vec<f64> = z.iter().map(|z| z * sqrt_dt).collect();
        let next = match params {
            ParamMode::Digital => em_step(&x, t, dt, &dw, problem)?,
            ParamMode::Crossbar => {
                let hw = hw.expect("crossbar hardware");
                let block = hw.block.as_ref().expect("weight block");
                let system = match source.as_ref() {
                    Some(s) => s.system(),
                    None => hw.system.as_ref().expect("weight tile system"),
                };
                match block.read(system, &x) {
                    Ok(out) => {
                        ledger.charge_vmm_read(&out.events);
                        em_update(&x, &out.y[..d], &out.y[d..], dt, &dw)
                    }
                    Err(Error::Range { value, .. }) => {
                        return Ok(Outcome {
                            final_state: Err(flag(step, format!("state {value} beyond the VMM input range"))),
                            ledger,
                            draws,
                            path: None,
                            trace,
                        });
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        x = next;
        if let Some(p) = path.as_mut() {
            p.push(x.clone());
        }
        if x.iter().any(|v| !(v.abs() <= DIVERGENCE_LIMIT)) {
            return Ok(Outcome {
                final_state: Err(flag(step + 1, "diverged".into())),
                ledger,
                draws,
                path: None,
                trace,
            });
        }
    }
    Ok(Outcome {
        final_state: Ok(x),
        ledger,
        draws,
        path: path.map(|states| Trajectory { id, states }),
        trace,
    })
}

/// Integrates `m` trajectories. Trajectory `k` draws from the seed
/// `derive_seed(master_seed, k)`, so results do not depend on how rayon
/// schedules the work.
pub fn simulate_ensemble(
    problem: &SdeProblem,
    noise: NoiseSource,
    params: ParamMode,
    m: usize,
    opts: &EnsembleOptions,
) -> Result<EnsembleResult> {
    if m == 0 {
        return Err(Error::usage("need at least one trajectory"));
    }
    let mut setup_energy = EnergyLedger::new();
    let uses_crossbar = noise == NoiseSource::Crossbar || params == ParamMode::Crossbar;
    let hw = if uses_crossbar {
        // weights go on the tile whenever the problem has them so that the
        // random pair sees the same neighbourhood in every crossbar mode
        let program = params == ParamMode::Crossbar || problem.linear_coefficients().is_some();
        Some(build_hardware(
            problem,
            noise,
            &opts.crossbar,
            opts.master_seed,
            program,
            &mut setup_energy,
        )?)
    } else {
        None
    };

    let seeds: Vec<u64> = (0..m).map(|k| derive_seed(opts.master_seed, k as u64)).collect();
    let outcomes: Vec<Outcome> = seeds
        .par_iter()
        .enumerate()
        .map(|(k, &seed)| run_trajectory(k, seed, problem, noise, params, hw.as_ref(), opts))
        .collect::<Result<_>>()?;

    let mut result = EnsembleResult {
        times: problem.times(),
        seeds,
        kept: Vec::with_capacity(m),
        finals: Vec::with_capacity(m),
        flagged: Vec::new(),
        setup_energy,
        trajectory_energy: EnergyLedger::new(),
        gaussian_draws: 0,
        paths: Vec::new(),
        tile: hw.map(|h| h.tile),
        trace: Vec::new(),
    };
    for (k, o) in outcomes.into_iter().enumerate() {
        result.trajectory_energy.merge(&o.ledger);
        result.gaussian_draws += o.draws;
        result.trace.extend(o.trace);
        match o.final_state {
            Ok(x) => {
                result.kept.push(k);
                result.finals.push(x);
            }
            Err(f) => result.flagged.push(f),
        }
        if let Some(p) = o.path {
            result.paths.push(p);
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceEstimate {
    /// Slope of `ln E|X_T^dt − X_T^ref|` against `ln dt`.
    pub slope: f64,
    pub dts: Vec<f64>,
    pub errors: Vec<f64>,
}

/// Refinement factor of the reference grid when no closed form exists.
const REFERENCE_REFINEMENT: usize = 64;

/// Strong error of digital-noise Euler-Maruyama at each step size in `dts`,
/// over `m` Brownian paths shared by every level. The reference is the
/// problem's closed form when it has one, else Euler-Maruyama on a grid 64
/// times finer than the smallest `dt`.
pub fn estimate_strong_order(
    problem: &SdeProblem,
    dts: &[f64],
    m: usize,
    seed: u64,
) -> Result<ConvergenceEstimate> {
    let mut levels: Vec<f64> = dts.to_vec();
    if levels.iter().any(|dt| !(*dt > 0.0)) {
        return Err(Error::usage("step sizes must be positive"));
    }
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs());
    if levels.len() < 3 {
        return Err(Error::usage(format!(
            "need at least 3 distinct step sizes, got {}",
            levels.len()
        )));
    }
    if m == 0 {
        return Err(Error::usage("need at least one path"));
    }
    let (t0, t1) = problem.span();
    let span = t1 - t0;
    let steps: Vec<usize> = levels
        .iter()
        .map(|dt| {
            let n = (span / dt).round();
            if n < 1.0 || (n * dt - span).abs() > 1e-9 * span {
                Err(Error::usage(format!("step {dt} does not divide [{t0}, {t1}]")))
            } else {
                Ok(n as usize)
            }
        })
        .collect::<Result<_>>()?;
    let finest = *steps.last().unwrap();
    let n_fine = if problem.exact.is_some() {
        finest
    } else {
        finest * REFERENCE_REFINEMENT
    };
    if steps.iter().any(|n| n_fine % n != 0) {
        return Err(Error::usage("step sizes must nest on a common grid"));
    }
    let d = problem.dim();
    let dt_fine = span / n_fine as f64;

    let per_path: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, p as u64));
            let sd = dt_fine.sqrt();
            let fine: Vec<f64> = (0..n_fine * d)
                .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let reference = match &problem.exact {
                Some(exact) => {
                    let mut w = vec![0.0; d];
                    for i in 0..n_fine {
                        for k in 0..d {
                            w[k] += fine[i * d + k];
                        }
                    }
                    exact(t1 - t0, &w)
                }
                None => integrate(problem, &fine, n_fine, 1)?,
            };
            steps
                .iter()
                .map(|&n| {
                    let x = integrate(problem, &fine, n, n_fine / n)?;
                    Ok(x.iter()
                        .zip(&reference)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt())
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let errors: Vec<f64> = (0..levels.len())
        .map(|l| per_path.iter().map(|e| e[l]).sum::<f64>() / m as f64)
        .collect();
    if errors.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Degenerate("zero strong error at some level".into()));
    }
    let lx: Vec<f64> = levels.iter().map(|dt| dt.ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let slope = stats::trend_slope(&lx, &ly)?.slope;
    Ok(ConvergenceEstimate {
        slope,
        dts: levels,
        errors,
    })
}

/// Euler-Maruyama over `n` steps, each summing `stride` fine increments.
fn integrate(problem: &SdeProblem, fine: &[f64], n: usize, stride: usize) -> Result<Vec<f64>> {
    let d = problem.dim();
    let (t0, t1) = problem.span();
    let dt = (t1 - t0) / n as f64;
    let mut x = problem.x0().to_vec();
    let mut dw = vec![0.0; d];
    for i in 0..n {
        dw.iter_mut().for_each(|w| *w = 0.0);
        for j in i * stride..(i + 1) * stride {
            for k in 0..d {
                dw[k] += fine[j * d + k];
            }
        }
        x = em_step(&x, t0 + i as f64 * dt, dt, &dw, problem)?;
    }
    Ok(x)
}
