//! Write/verify/read energy accounting for the array.
//!
//! Programming a device is modeled as a train of write pulses, each followed
//! by a verify read. During the train the device conductance moves linearly
//! from its start value to where it lands. Verify reads use a half-select
//! bias (selected row at `verify_v`, selected column at 0, every other line
//! at `verify_v / 2`) and are charged with the dissipation of the whole tile
//! solved under that bias, parasitics included.
//!
//! Only the array is accounted; DACs, sense amplifiers and digital logic are
//! not.

use serde::{Deserialize, Serialize};

use crate::circuit::{EnergyEvent, NodalSystem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PulseModel {
    /// Write pulse amplitude (V).
    pub write_v: f64,
    /// Write pulse width (s).
    pub write_t: f64,
    pub writes_per_program: u32,
    /// Verify read amplitude (V).
    pub verify_v: f64,
    /// Verify read duration (s).
    pub verify_t: f64,
}

impl Default for PulseModel {
    fn default() -> Self {
        Self {
            write_v: 1.0,
            write_t: 200e-9,
            writes_per_program: 100,
            verify_v: 0.2,
            verify_t: 1e-3,
        }
    }
}

/// Cumulative pulse counts and energies. Ledgers merge by field-wise
/// addition.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub programs: u64,
    pub write_pulse_count: u64,
    pub verify_read_count: u64,
    pub vmm_read_count: u64,
    pub write_energy_j: f64,
    pub verify_energy_j: f64,
    pub read_energy_j: f64,
}

impl EnergyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn merge(&mut self, other: &EnergyLedger) {
        self.programs += other.programs;
        self.write_pulse_count += other.write_pulse_count;
        self.verify_read_count += other.verify_read_count;
        self.vmm_read_count += other.vmm_read_count;
        self.write_energy_j += other.write_energy_j;
        self.verify_energy_j += other.verify_energy_j;
        self.read_energy_j += other.read_energy_j;
    }

    pub fn total_j(&self) -> f64 {
        self.write_energy_j + self.verify_energy_j + self.read_energy_j
    }

    /// Charges one program-and-verify sequence of the device at
    /// `(row, col)`, whose conductance travels from `g_start` to `g_end`.
    ///
    /// `system` is the tile as it stood before the program began; every
    /// other device is held there for the verify reads.
    pub fn charge_program(
        &mut self,
        system: &NodalSystem,
        row: usize,
        col: usize,
        g_start: f64,
        g_end: f64,
        model: &PulseModel,
    ) {
        let n = model.writes_per_program;
        if n == 0 {
            self.programs += 1;
            return;
        }
        let conductance = |k: u32| {
            if n == 1 {
                g_end
            } else {
                g_start + (g_end - g_start) * k as f64 / (n - 1) as f64
            }
        };
        let write_scale = model.write_v * model.write_v * model.write_t;
        let write: f64 = (0..n).map(|k| write_scale * conductance(k)).sum();

        let verify = if model.verify_t > 0.0 && model.verify_v != 0.0 {
            let sources = system.half_select_sources(row, col, model.verify_v);
            let profile = system.power_profile(row, col, &sources);
            (0..n).map(|k| profile.power(conductance(k))).sum::<f64>() * model.verify_t
        } else {
            0.0
        };

        self.programs += 1;
        self.write_pulse_count += n as u64;
        self.verify_read_count += n as u64;
        self.write_energy_j += write;
        self.verify_energy_j += verify;
    }

    /// Charges the read slices of a VMM or tile read.
    pub fn charge_vmm_read(&mut self, events: &[EnergyEvent]) {
        for e in events {
            self.vmm_read_count += 1;
            self.read_energy_j += e.energy_j();
        }
    }

    pub fn report(&self) -> EnergyReport {
        let per_program = if self.programs > 0 {
            (self.write_energy_j + self.verify_energy_j) / self.programs as f64
        } else {
            0.0
        };
        EnergyReport {
            write_pulses: self.write_pulse_count,
            verify_reads: self.verify_read_count,
            vmm_reads: self.vmm_read_count,
            write_energy_j: self.write_energy_j,
            verify_energy_j: self.verify_energy_j,
            read_energy_j: self.read_energy_j,
            total_j: self.total_j(),
            programs: self.programs,
            per_program_j: per_program,
        }
    }
}

/// Summary of a ledger, serialized as the energy report JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub write_pulses: u64,
    pub verify_reads: u64,
    pub vmm_reads: u64,
    pub write_energy_j: f64,
    pub verify_energy_j: f64,
    pub read_energy_j: f64,
    pub total_j: f64,
    /// Device programs (write operations).
    pub programs: u64,
    /// Write plus verify energy per program.
    pub per_program_j: f64,
}
