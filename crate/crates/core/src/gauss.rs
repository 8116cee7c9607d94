//! Gaussian random vectors harvested from differential device pairs.
//!
//! Both devices of a pair are cycled to the same target conductance; the
//! difference of their bit-line currents under a read is a zero-mean
//! gaussian whose spread is set by the cycle-to-cycle variability. An
//! empirical calibration maps it onto a unit normal.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::circuit::{CrossbarConfig, CrossbarTile, MappedMatrix, MappingParams, NodalSystem};
use crate::device::{DeviceClass, DeviceSpec, DeviceState, ProgramStatus};
use crate::energy::{EnergyLedger, PulseModel};
use crate::error::{Error, Result};

/// Smallest calibrated spread accepted (A).
pub const SIGMA_FLOOR: f64 = 1e-15;
pub const DEFAULT_CALIB_N: usize = 1000;
/// Default input range of the covariance-shaping tile, in unit normals.
pub const DEFAULT_Z_MAX: f64 = 8.0;

/// Two devices on one word line; the output is `I(col_pos) − I(col_neg)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairAddress {
    pub row: usize,
    pub col_pos: usize,
    pub col_neg: usize,
}

/// `d` pairs on adjacent columns of `row`, starting at `col0`.
pub fn word_line_pairs(row: usize, col0: usize, d: usize) -> Vec<PairAddress> {
    (0..d)
        .map(|k| PairAddress {
            row,
            col_pos: col0 + 2 * k + 1,
            col_neg: col0 + 2 * k,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceParams {
    /// Conductance every random device is cycled to (S).
    pub g_target: f64,
    /// Relative cycle-to-cycle spread.
    pub variability: f64,
    pub calib_n: usize,
}

impl SourceParams {
    /// Devices cycled to the HRS with its variability.
    pub fn hrs(spec: &DeviceSpec) -> Self {
        Self {
            g_target: spec.g_hrs,
            variability: spec.hrs_variability,
            calib_n: DEFAULT_CALIB_N,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// A tile holding random-source pairs, with its own random stream.
#[derive(Debug, Clone)]
pub struct GaussianSource {
    tile: CrossbarTile,
    system: NodalSystem,
    pairs: Vec<PairAddress>,
    params: SourceParams,
    pulse: PulseModel,
    g_start: f64,
    // (row, indices of the pairs on it)
    read_rows: Vec<(usize, Vec<usize>)>,
    calibration: Option<Calibration>,
    rng: ChaCha8Rng,
    last_currents: Vec<(usize, Vec<f64>)>,
}

impl GaussianSource {
    /// Turns the devices at `pairs` into random sources at
    /// `params.g_target`. Faults already present on those devices are kept.
    pub fn new(
        mut tile: CrossbarTile,
        pairs: Vec<PairAddress>,
        params: SourceParams,
        spec: &DeviceSpec,
        pulse: PulseModel,
        seed: u64,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::usage("a gaussian source needs at least one pair"));
        }
        if !(0.0..1.0).contains(&params.variability) {
            return Err(Error::Range {
                what: "variability",
                value: params.variability,
                min: 0.0,
                max: 1.0,
            });
        }
        let cfg = *tile.config();
        let mut used = vec![false; cfg.rows * cfg.cols];
        for p in &pairs {
            if p.col_pos == p.col_neg {
                return Err(Error::usage(format!("pair on row {} uses one column twice", p.row)));
            }
            for col in [p.col_pos, p.col_neg] {
                if p.row >= cfg.rows || col >= cfg.cols {
                    return Err(Error::usage(format!(
                        "pair device ({}, {col}) outside a {}x{} tile",
                        p.row, cfg.rows, cfg.cols
                    )));
                }
                let k = p.row * cfg.cols + col;
                if std::mem::replace(&mut used[k], true) {
                    return Err(Error::usage(format!("device ({}, {col}) used by two pairs", p.row)));
                }
                let d = tile.device_mut(p.row, col);
                *d = DeviceState::exact(DeviceClass::RandomSource, params.g_target)
                    .with_fault(d.fault, spec);
            }
        }
        let mut read_rows: Vec<(usize, Vec<usize>)> = Vec::new();
        for (k, p) in pairs.iter().enumerate() {
            match read_rows.iter_mut().find(|(r, _)| *r == p.row) {
                Some((_, ks)) => ks.push(k),
                None => read_rows.push((p.row, vec![k])),
            }
        }
        let system = NodalSystem::new(&tile)?;
        Ok(Self {
            tile,
            system,
            pairs,
            params,
            pulse,
            g_start: spec.g_lrs,
            read_rows,
            calibration: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last_currents: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[PairAddress] {
        &self.pairs
    }

    pub fn tile(&self) -> &CrossbarTile {
        &self.tile
    }

    /// The factored tile in its current state.
    pub fn system(&self) -> &NodalSystem {
        &self.system
    }

    pub fn calibration(&self) -> Option<&Calibration> {
        self.calibration.as_ref()
    }

    /// Bit-line currents of the reads made by the latest draw, per row.
    pub fn last_currents(&self) -> &[(usize, Vec<f64>)] {
        &self.last_currents
    }

    /// Restarts the random stream, keeping tile and calibration.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// A copy running on its own stream.
    pub fn fork(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.reseed(seed);
        s
    }

    /// Cycles every pair, reads once per word line holding pairs and
    /// returns the raw current differences (A).
    pub fn draw_raw(&mut self, ledger: &mut EnergyLedger) -> Result<Vec<f64>> {
        let v = self.params.variability;
        for p in &self.pairs {
            for col in [p.col_pos, p.col_neg] {
                let d = self.tile.device_mut(p.row, col);
                if d.cycle_resample(v, &mut self.rng)? == ProgramStatus::Written {
                    let g = d.g_actual;
                    ledger.charge_program(&self.system, p.row, col, self.g_start, g, &self.pulse);
                }
            }
        }
        self.system.refactor(&self.tile)?;

        let rows = self.tile.config().rows;
        let v_read = self.tile.config().v_read;
        let mut diff = vec![0.0; self.pairs.len()];
        self.last_currents.clear();
        for (row, ks) in &self.read_rows {
            let mut wl = vec![0.0; rows];
            wl[*row] = v_read;
            let read = self.system.read(&wl)?;
            for &k in ks {
                let p = self.pairs[k];
                diff[k] = read.bitline_currents[p.col_pos] - read.bitline_currents[p.col_neg];
            }
            ledger.charge_vmm_read(&read.energy_events);
            self.last_currents.push((*row, read.bitline_currents));
        }
        Ok(diff)
    }

    /// Measures the mean and spread of every pair over `calib_n` draws.
    pub fn calibrate(&mut self, ledger: &mut EnergyLedger) -> Result<&Calibration> {
        let n = self.params.calib_n;
        if n < 100 {
            return Err(Error::usage(format!("calib_n must be at least 100, got {n}")));
        }
        let d = self.dim();
        let mut sum = vec![0.0; d];
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            let raw = self.draw_raw(ledger)?;
            for (s, x) in sum.iter_mut().zip(&raw) {
                *s += x;
            }
            draws.push(raw);
        }
        let mu: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sigma = vec![0.0; d];
        for raw in &draws {
            for k in 0..d {
                sigma[k] += (raw[k] - mu[k]).powi(2);
            }
        }
        for (k, s) in sigma.iter_mut().enumerate() {
            *s = (*s / (n - 1) as f64).sqrt();
            if !(*s >= SIGMA_FLOOR) {
                return Err(Error::Calibration {
                    pair: k,
                    sigma: *s,
                    floor: SIGMA_FLOOR,
                });
            }
        }
        self.calibration = Some(Calibration { mu, sigma });
        Ok(self.calibration.as_ref().unwrap())
    }

    /// Maps raw current differences onto unit normals.
    pub fn standardize(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let c = self
            .calibration
            .as_ref()
            .ok_or_else(|| Error::usage("gaussian source is not calibrated"))?;
        Ok(raw
            .iter()
            .zip(c.mu.iter().zip(&c.sigma))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }

    /// One fresh unit-normal vector.
    pub fn next_unit_normal(&mut self, ledger: &mut EnergyLedger) -> Result<Vec<f64>> {
        if self.calibration.is_none() {
            return Err(Error::usage("gaussian source is not calibrated"));
        }
        let raw = self.draw_raw(ledger)?;
        self.standardize(&raw)
    }

    /// `n` draws as the rows of an `n × d` matrix.
    pub fn sample_unit_normal(&mut self, n: usize, ledger: &mut EnergyLedger) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let mut out = DMatrix::zeros(n, d);
        for i in 0..n {
            let z = self.next_unit_normal(ledger)?;
            for (k, v) in z.into_iter().enumerate() {
                out[(i, k)] = v;
            }
        }
        Ok(out)
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = sigma.shape();
    if n != m {
        return Err(Error::usage(format!("covariance must be square, got {n}x{m}")));
    }
    let scale = sigma.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::usage(format!("covariance is not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut s = sigma[(j, j)];
        for k in 0..j {
            s -= l[(j, k)] * l[(j, k)];
        }
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Decomposition { pivot: j, value: s });
        }
        let d = s.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = sigma[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// A covariance and its Cholesky factor programmed onto crossbar tiles.
#[derive(Debug, Clone)]
pub struct CovarianceShaper {
    sigma: DMatrix<f64>,
    chol: DMatrix<f64>,
    matrix: MappedMatrix,
}

impl CovarianceShaper {
    /// Factors `sigma` and maps the factor with inputs up to `z_max`.
    /// Programming energy goes to `ledger`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        sigma: DMatrix<f64>,
        config: &CrossbarConfig,
        spec: &DeviceSpec,
        pulse: &PulseModel,
        z_max: f64,
        ledger: &mut EnergyLedger,
        rng: &mut R,
    ) -> Result<Self> {
        let chol = cholesky(&sigma)?;
        let w_max = chol.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let params = MappingParams { w_max, x_max: z_max };
        let (matrix, writes) = MappedMatrix::program(&chol, config, spec, params, rng)?;
        for tw in &writes {
            for r in &tw.records {
                ledger.charge_program(&tw.before, r.row, r.col, spec.g_lrs, r.g_after, pulse);
            }
        }
        Ok(Self { sigma, chol, matrix })
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn matrix(&self) -> &MappedMatrix {
        &self.matrix
    }
}

/// `n` draws of `L·z` computed on the shaper's tiles, as an `n × d` matrix.
pub fn sample_correlated(
    shaper: &CovarianceShaper,
    source: &mut GaussianSource,
    n: usize,
    ledger: &mut EnergyLedger,
) -> Result<DMatrix<f64>> {
    let d = shaper.dim();
    if source.dim() != d {
        return Err(Error::usage(format!(
            "shaper has dimension {d} but source has {}",
            source.dim()
        )));
    }
    let mut out = DMatrix::zeros(n, d);
    for i in 0..n {
        let z = source.next_unit_normal(ledger)?;
        let y = crate::circuit::vmm_read(&shaper.matrix, &z)?;
        ledger.charge_vmm_read(&y.events);
        for (k, v) in y.y.into_iter().enumerate() {
            out[(i, k)] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceClass;

    fn ideal_source(d: usize, g: f64, v: f64, seed: u64) -> GaussianSource {
        calibrated_with(d, g, v, seed, DEFAULT_CALIB_N)
    }

    fn calibrated_with(d: usize, g: f64, v: f64, seed: u64, calib_n: usize) -> GaussianSource {
        let cfg = CrossbarConfig::ideal(2, 2 * d);
        let tile = CrossbarTile::filled(cfg, DeviceState::exact(DeviceClass::Unused, 1e-5)).unwrap();
        let params = SourceParams {
            g_target: g,
            variability: v,
            calib_n,
        };
        GaussianSource::new(tile, word_line_pairs(0, 0, d), params, &DeviceSpec::default(), PulseModel::default(), seed)
            .unwrap()
    }

    #[test]
    fn zero_variability_fails_calibration() {
        let mut s = ideal_source(2, 1e-5, 0.0, 1);
        let err = s.calibrate(&mut EnergyLedger::new()).unwrap_err();
        assert!(matches!(err, Error::Calibration { pair: 0, .. }), "{err}");
    }

    #[test]
    fn calibration_matches_closed_form() {
        let mut s = ideal_source(3, 1e-5, 0.25, 2);
        let c = s.calibrate(&mut EnergyLedger::new()).unwrap().clone();
        let expected = 0.2 * 0.25 * 1e-5 * 2f64.sqrt();
        for k in 0..3 {
            // the mean of 1000 draws has a standard error of σ/√1000
            assert!(c.mu[k].abs() < 3.0 * expected / 1000f64.sqrt(), "{c:?}");
            assert!((c.sigma[k] / expected - 1.0).abs() < 0.05, "{c:?}");
        }
    }

    #[test]
    fn calibration_is_deterministic() {
        let mut a = ideal_source(2, 1e-5, 0.25, 9);
        let mut b = ideal_source(2, 1e-5, 0.25, 9);
        let ca = a.calibrate(&mut EnergyLedger::new()).unwrap().clone();
        let cb = b.calibrate(&mut EnergyLedger::new()).unwrap().clone();
        assert_eq!(ca, cb);
    }

    #[test]
    fn small_calibration_is_refused() {
        let mut s = ideal_source(1, 1e-5, 0.25, 1);
        s.params.calib_n = 50;
        assert!(matches!(s.calibrate(&mut EnergyLedger::new()), Err(Error::Usage(_))));
    }

    #[test]
    fn uncalibrated_sampling_is_refused() {
        let mut s = ideal_source(1, 1e-5, 0.25, 1);
        assert!(s.sample_unit_normal(3, &mut EnergyLedger::new()).is_err());
    }

    #[test]
    fn unit_normal_statistics() {
        // a long calibration keeps its own error out of the sample mean
        let mut s = calibrated_with(16, 1e-5, 0.25, 3, 100_000);
        let mut ledger = EnergyLedger::new();
        s.calibrate(&mut ledger).unwrap();
        let z = s.sample_unit_normal(5000, &mut ledger).unwrap();
        for k in 0..16 {
            let col: Vec<f64> = z.column(k).iter().copied().collect();
            let m = crate::stats::moments(&col).unwrap();
            assert!(m.mean.abs() < 3.0 / 5000f64.sqrt(), "pair {k}: {m:?}");
            assert!((0.96..=1.04).contains(&m.std), "pair {k}: {m:?}");
        }
    }

    #[test]
    fn each_draw_costs_two_writes_per_pair() {
        let mut s = ideal_source(4, 1e-5, 0.25, 3);
        s.calibrate(&mut EnergyLedger::new()).unwrap();
        let mut ledger = EnergyLedger::new();
        s.sample_unit_normal(25, &mut ledger).unwrap();
        assert_eq!(ledger.programs, 2 * 4 * 25);
        assert_eq!(ledger.write_pulse_count, 2 * 4 * 25 * 100);
        assert_eq!(ledger.vmm_read_count, 25);
    }

    #[test]
    fn same_seed_same_samples() {
        let run = || {
            let mut s = ideal_source(2, 1e-5, 0.25, 5);
            let mut l = EnergyLedger::new();
            s.calibrate(&mut l).unwrap();
            s.sample_unit_normal(20, &mut l).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn bad_pairs_are_rejected() {
        let cfg = CrossbarConfig::ideal(2, 4);
        let tile = CrossbarTile::filled(cfg, DeviceState::exact(DeviceClass::Unused, 1e-5)).unwrap();
        let spec = DeviceSpec::default();
        let params = SourceParams::hrs(&spec);
        let same = vec![PairAddress { row: 0, col_pos: 1, col_neg: 1 }];
        assert!(GaussianSource::new(tile.clone(), same, params, &spec, PulseModel::default(), 0).is_err());
        let outside = word_line_pairs(0, 2, 2);
        assert!(GaussianSource::new(tile.clone(), outside, params, &spec, PulseModel::default(), 0).is_err());
        let overlap = vec![word_line_pairs(0, 0, 1)[0], word_line_pairs(0, 0, 1)[0]];
        assert!(GaussianSource::new(tile, overlap, params, &spec, PulseModel::default(), 0).is_err());
    }

    #[test]
    fn cholesky_small_cases() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert_eq!(cholesky(&id).unwrap(), id);
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 5.0]);
        let l = cholesky(&a).unwrap();
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2.0]));
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = DMatrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
        let a = m.transpose() * &m + DMatrix::identity(8, 8);
        let l = cholesky(&a).unwrap();
        let err = (&l * l.transpose() - &a).norm() / a.norm();
        assert!(err < 1e-10, "{err}");
        for i in 0..8 {
            assert!(l[(i, i)] > 0.0);
            for j in i + 1..8 {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn cholesky_errors() {
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky(&indefinite), Err(Error::Decomposition { pivot: 1, .. })));
        let skew = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(cholesky(&skew), Err(Error::Usage(_))));
    }

    fn ideal_spec() -> DeviceSpec {
        DeviceSpec {
            write_perturbation: 0.0,
            ..Default::default()
        }
    }

    fn shaped(sigma: DMatrix<f64>, n: usize, seed: u64) -> DMatrix<f64> {
        let d = sigma.nrows();
        let mut src = calibrated_with(d, 1e-5, 0.25, seed, 100_000);
        let mut ledger = EnergyLedger::new();
        src.calibrate(&mut ledger).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let shaper = CovarianceShaper::new(
            sigma,
            &CrossbarConfig::ideal(8, 8),
            &ideal_spec(),
            &PulseModel::default(),
            DEFAULT_Z_MAX,
            &mut ledger,
            &mut rng,
        )
        .unwrap();
        sample_correlated(&shaper, &mut src, n, &mut ledger).unwrap()
    }

    fn covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.nrows() as f64;
        let mean = x.row_mean();
        let c = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mean[j]);
        c.transpose() * c / (n - 1.0)
    }

    #[test]
    fn identity_covariance_survives_shaping() {
        let y = shaped(DMatrix::identity(4, 4), 5000, 21);
        let err = (covariance(&y) - DMatrix::<f64>::identity(4, 4)).norm();
        assert!(err < 0.15, "{err}");
    }

    #[test]
    fn correlated_pair() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.8, 1.0]);
        let c = covariance(&shaped(sigma, 5000, 22));
        assert!((c[(0, 1)] - 0.8).abs() < 0.05, "{c}");
    }

    #[test]
    fn scalar_variance_gives_root_dt() {
        let dt = 0.01;
        let y = shaped(DMatrix::from_element(1, 1, dt), 5000, 23);
        let col: Vec<f64> = y.column(0).iter().copied().collect();
        let m = crate::stats::moments(&col).unwrap();
        assert!((m.std / dt.sqrt() - 1.0).abs() < 0.04, "{m:?}");
    }

    #[test]
    fn shaper_rejects_non_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let r = CovarianceShaper::new(
            bad,
            &CrossbarConfig::ideal(8, 8),
            &ideal_spec(),
            &PulseModel::default(),
            DEFAULT_Z_MAX,
            &mut EnergyLedger::new(),
            &mut rng,
        );
        assert!(matches!(r, Err(Error::Decomposition { .. })));
    }
}
