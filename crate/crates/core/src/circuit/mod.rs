//! Crossbar tiles, their resistive-network solution, and bit-serial VMM.

mod band;
mod nodal;
mod vmm;

use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::device::{DeviceClass, DeviceSpec, DeviceState, CONDUCTANCE_FLOOR};
use crate::error::{Error, Result};

pub use nodal::{NodalLayout, NodalSystem, PowerProfile, Solution};
pub use vmm::{vmm_read, MappedMatrix, MappingParams, ProgramRecord, TileWrites, VmmOutput, WeightBlock};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossbarConfig {
    pub rows: usize,
    pub cols: usize,
    /// Wire resistance between adjacent cells (Ω).
    pub r_line: f64,
    /// Driver resistance per word line (Ω).
    pub r_in: f64,
    /// Sense resistance per bit line (Ω).
    pub r_out: f64,
    /// Read voltage (V).
    pub v_read: f64,
    /// Input DAC resolution per sign phase.
    pub dac_bits: u32,
    /// Duration of one read slice (s).
    pub read_pulse_s: f64,
}

impl Default for CrossbarConfig {
    fn default() -> Self {
        Self {
            rows: 8,
            cols: 8,
            r_line: 5.0,
            r_in: 1000.0,
            r_out: 1000.0,
            v_read: 0.2,
            dac_bits: 16,
            read_pulse_s: 200e-9,
        }
    }
}

impl CrossbarConfig {
    /// Zero parasitics, otherwise default.
    pub fn ideal(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            r_line: 0.0,
            r_in: 0.0,
            r_out: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::usage("crossbar needs at least one row and column"));
        }
        for (what, v) in [
            ("r_line", self.r_line),
            ("r_in", self.r_in),
            ("r_out", self.r_out),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Range {
                    what,
                    value: v,
                    min: 0.0,
                    max: f64::INFINITY,
                });
            }
        }
        if !(1..=32).contains(&self.dac_bits) {
            return Err(Error::Range {
                what: "dac_bits",
                value: self.dac_bits as f64,
                min: 1.0,
                max: 32.0,
            });
        }
        if !(self.v_read > 0.0) {
            return Err(Error::usage("v_read must be positive"));
        }
        if !(self.read_pulse_s >= 0.0) {
            return Err(Error::usage("read_pulse_s must be non-negative"));
        }
        Ok(())
    }
}

/// Where unused devices are parked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestState {
    #[default]
    Lrs,
    Hrs,
}

/// An R×C grid of devices together with its parasitics.
#[derive(Debug, Clone)]
pub struct CrossbarTile {
    config: CrossbarConfig,
    devices: Vec<DeviceState>,
}

impl CrossbarTile {
    pub fn filled(config: CrossbarConfig, fill: DeviceState) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            devices: vec![fill; config.rows * config.cols],
            config,
        })
    }

    /// Every device unused, with a fault drawn from `spec` and one cycle to
    /// `state` behind it.
    pub fn populated<R: Rng + ?Sized>(
        config: CrossbarConfig,
        spec: &DeviceSpec,
        state: RestState,
        rng: &mut R,
    ) -> Result<Self> {
        let (g, variability) = match state {
            RestState::Lrs => (spec.g_lrs, spec.lrs_variability),
            RestState::Hrs => (spec.g_hrs, spec.hrs_variability),
        };
        let rest = DeviceState::exact(DeviceClass::Unused, g);
        let mut tile = Self::filled(config, rest)?;
        for d in &mut tile.devices {
            *d = rest.with_fault(spec.draw_fault(rng), spec);
            d.cycle_resample(variability, rng)?;
        }
        Ok(tile)
    }

    pub fn config(&self) -> &CrossbarConfig {
        &self.config
    }

    pub fn device(&self, row: usize, col: usize) -> &DeviceState {
        &self.devices[row * self.config.cols + col]
    }

    pub fn device_mut(&mut self, row: usize, col: usize) -> &mut DeviceState {
        &mut self.devices[row * self.config.cols + col]
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    /// Realized conductances, row-major.
    pub fn conductances(&self) -> Vec<f64> {
        self.devices.iter().map(|d| d.g_actual).collect()
    }

    /// Copy of the tile with every device sitting exactly on its target.
    pub fn at_targets(&self) -> Self {
        let mut t = self.clone();
        for d in &mut t.devices {
            if !d.is_faulted() {
                d.g_actual = d.g_target.max(CONDUCTANCE_FLOOR);
            }
        }
        t
    }
}

/// One electrical event on the array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyEvent {
    pub voltage: f64,
    pub duration_s: f64,
    /// Power dissipated in devices and parasitics while the event lasts (W).
    pub dissipation_w: f64,
}

impl EnergyEvent {
    pub fn energy_j(&self) -> f64 {
        self.dissipation_w * self.duration_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadResult {
    /// Output current of every bit line (A).
    pub bitline_currents: Vec<f64>,
    pub energy_events: Vec<EnergyEvent>,
}

/// Solves `tile` with the given word-line voltages.
pub fn solve_tile(tile: &CrossbarTile, wordline_voltages: &[f64]) -> Result<ReadResult> {
    NodalSystem::new(tile)?.read(wordline_voltages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceClass;

    #[test]
    fn zero_input_gives_zero_current() {
        let tile = CrossbarTile::filled(
            CrossbarConfig::default(),
            DeviceState::exact(DeviceClass::Unused, 1e-4),
        )
        .unwrap();
        let r = solve_tile(&tile, &[0.0; 8]).unwrap();
        assert!(r.bitline_currents.iter().all(|&i| i == 0.0));
        assert_eq!(r.energy_events[0].dissipation_w, 0.0);
    }

    #[test]
    fn single_ideal_cell_is_ohms_law() {
        let tile = CrossbarTile::filled(
            CrossbarConfig::ideal(1, 1),
            DeviceState::exact(DeviceClass::Weight, 1e-4),
        )
        .unwrap();
        let r = solve_tile(&tile, &[0.2]).unwrap();
        assert!((r.bitline_currents[0] - 20e-6).abs() < 1e-18);
        // 0.04 V² · 1e-4 S · 200 ns
        assert!((r.energy_events[0].energy_j() - 8e-13).abs() < 1e-25);
    }

    #[test]
    fn single_cell_with_parasitics_is_a_series_circuit() {
        let cfg = CrossbarConfig {
            rows: 1,
            cols: 1,
            ..Default::default()
        };
        let tile = CrossbarTile::filled(cfg, DeviceState::exact(DeviceClass::Weight, 1e-4)).unwrap();
        let r = solve_tile(&tile, &[0.2]).unwrap();
        let expected = 0.2 / (1000.0 + 1e4 + 1000.0);
        assert!((r.bitline_currents[0] / expected - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_and_range_checks() {
        let tile = CrossbarTile::filled(
            CrossbarConfig::default(),
            DeviceState::exact(DeviceClass::Unused, 1e-4),
        )
        .unwrap();
        assert!(matches!(solve_tile(&tile, &[0.2; 3]), Err(Error::Usage(_))));
        let mut v = [0.0; 8];
        v[2] = 0.5;
        assert!(matches!(solve_tile(&tile, &v), Err(Error::Range { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(CrossbarConfig::default().validate().is_ok());
        let bad = CrossbarConfig {
            dac_bits: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = CrossbarConfig {
            r_line: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn band_stays_narrow_on_wide_tiles() {
        let cfg = CrossbarConfig {
            rows: 4,
            cols: 32,
            ..Default::default()
        };
        let layout = NodalLayout::new(&cfg).unwrap();
        assert_eq!(layout.unknowns(), 2 * 4 * 32);
        assert_eq!(layout.bandwidth(), 2 * 4);
    }

    #[test]
    fn residual_is_tiny() {
        let tile = CrossbarTile::filled(
            CrossbarConfig::default(),
            DeviceState::exact(DeviceClass::Unused, 3e-5),
        )
        .unwrap();
        let sys = NodalSystem::new(&tile).unwrap();
        let s = sys.read_sources(&[0.2, 0.0, 0.1, 0.2, 0.0, 0.0, 0.2, 0.05]);
        assert!(sys.residual(&tile, &s).unwrap() < 1e-12);
    }

    #[test]
    fn power_profile_matches_refactoring() {
        let mut tile = CrossbarTile::filled(
            CrossbarConfig::default(),
            DeviceState::exact(DeviceClass::Unused, 1e-4),
        )
        .unwrap();
        tile.device_mut(2, 5).g_actual = 1e-5;
        let sys = NodalSystem::new(&tile).unwrap();
        let src = sys.half_select_sources(2, 5, 0.2);
        let profile = sys.power_profile(2, 5, &src);
        for g in [1e-5, 3e-5, 7.7e-5, 1e-4, 2e-4] {
            let mut t = tile.clone();
            t.device_mut(2, 5).g_actual = g;
            let s = NodalSystem::new(&t).unwrap();
            let p = s.dissipation(&s.solve(&src));
            assert!((profile.power(g) / p - 1.0).abs() < 1e-10, "g {g}");
        }
    }

    #[test]
    fn dump_is_written() {
        let tile = CrossbarTile::filled(
            CrossbarConfig::default(),
            DeviceState::exact(DeviceClass::Unused, 1e-4),
        )
        .unwrap();
        let sys = NodalSystem::new(&tile).unwrap();
        let mut buf = Vec::new();
        sys.write_dump(&tile, &sys.read_sources(&[0.2; 8]), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# unknowns 128 bandwidth 16"));
    }

    #[test]
    fn populated_tiles_sit_near_their_rest_state() {
        use rand::SeedableRng;
        let spec = DeviceSpec::default();
        for (state, g, v) in [
            (RestState::Lrs, spec.g_lrs, spec.lrs_variability),
            (RestState::Hrs, spec.g_hrs, spec.hrs_variability),
        ] {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
            let tile = CrossbarTile::populated(CrossbarConfig::default(), &spec, state, &mut rng).unwrap();
            let gs = tile.conductances();
            let mean = gs.iter().sum::<f64>() / gs.len() as f64;
            assert!(tile.devices().iter().all(|d| d.class == DeviceClass::Unused && d.g_target == g));
            assert!((mean / g - 1.0).abs() < 4.0 * v / 8.0);
            assert!(gs.iter().any(|&x| x != g));
        }
    }
}
