//! Stochastic memristor device model.
//!
//! A device is a plain value: its target conductance, the conductance it
//! actually landed on, what it is used for and whether it is stuck. Two
//! programming paths exist:
//!
//! * [`DeviceState::program_weight`] writes a deterministic weight with a
//!   relative gaussian write error, as used for crossbar VMM weights.
//! * [`DeviceState::cycle_resample`] performs a full set/reset cycle whose
//!   landing conductance is gaussian around the target. This is the entropy
//!   source harvested by [`crate::gauss`].

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest conductance a device may take. Keeps the nodal matrix nonsingular.
pub const CONDUCTANCE_FLOOR: f64 = 1e-7;

/// Cycle-to-cycle draws are truncated at this many standard deviations.
pub const TRUNCATION_SIGMAS: f64 = 4.0;

/// Electrical and statistical parameters shared by every device on a crossbar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceSpec {
    /// Low resistance state conductance (S).
    pub g_lrs: f64,
    /// High resistance state conductance (S).
    pub g_hrs: f64,
    /// Relative std of the weight write error.
    pub write_perturbation: f64,
    /// Relative cycle-to-cycle std when landing in the LRS.
    pub lrs_variability: f64,
    /// Relative cycle-to-cycle std when landing in the HRS.
    pub hrs_variability: f64,
    /// Probability that a device is stuck at the LRS.
    pub stuck_on_rate: f64,
    /// Probability that a device is stuck at the HRS.
    pub stuck_off_rate: f64,
}

impl Default for DeviceSpec {
    fn default() -> Self {
        Self {
            g_lrs: 1e-4,
            g_hrs: 1e-5,
            write_perturbation: 0.05,
            lrs_variability: 0.10,
            hrs_variability: 0.25,
            stuck_on_rate: 0.0,
            stuck_off_rate: 0.0,
        }
    }
}

impl DeviceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.g_hrs > 0.0 && self.g_lrs > 0.0) {
            return Err(Error::usage("device conductances must be positive"));
        }
        if self.g_hrs >= self.g_lrs {
            return Err(Error::usage(format!(
                "g_hrs ({}) must be below g_lrs ({})",
                self.g_hrs, self.g_lrs
            )));
        }
        for (what, v) in [
            ("write_perturbation", self.write_perturbation),
            ("lrs_variability", self.lrs_variability),
            ("hrs_variability", self.hrs_variability),
            ("stuck_on_rate", self.stuck_on_rate),
            ("stuck_off_rate", self.stuck_off_rate),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Range {
                    what,
                    value: v,
                    min: 0.0,
                    max: 1.0,
                });
            }
        }
        if self.stuck_on_rate + self.stuck_off_rate >= 1.0 {
            return Err(Error::usage("fault rates sum to 1 or more"));
        }
        Ok(())
    }

    /// Midpoint and span of the programmable window, used by the
    /// differential weight map.
    pub fn window(&self) -> (f64, f64) {
        (0.5 * (self.g_lrs + self.g_hrs), self.g_lrs - self.g_hrs)
    }

    /// Bounds a written weight conductance is clamped to.
    pub fn write_clamp(&self) -> (f64, f64) {
        let p = self.write_perturbation;
        (self.g_hrs * (1.0 - 3.0 * p), self.g_lrs * (1.0 + 3.0 * p))
    }

    /// Draws a fault for a freshly fabricated device.
    pub fn draw_fault<R: Rng + ?Sized>(&self, rng: &mut R) -> Fault {
        if self.stuck_on_rate == 0.0 && self.stuck_off_rate == 0.0 {
            return Fault::None;
        }
        let u: f64 = rng.random();
        if u < self.stuck_on_rate {
            Fault::StuckOn
        } else if u < self.stuck_on_rate + self.stuck_off_rate {
            Fault::StuckOff
        } else {
            Fault::None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeviceClass {
    Weight,
    RandomSource,
    Unused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fault {
    None,
    StuckOn,
    StuckOff,
}

/// Outcome of a programming request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProgramStatus {
    Written,
    /// The device is stuck; its conductance did not change.
    Pinned,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceState {
    pub g_target: f64,
    pub g_actual: f64,
    pub class: DeviceClass,
    pub fault: Fault,
}

impl DeviceState {
    /// A device sitting exactly on `g`.
    pub fn exact(class: DeviceClass, g: f64) -> Self {
        Self {
            g_target: g,
            g_actual: g.max(CONDUCTANCE_FLOOR),
            class,
            fault: Fault::None,
        }
    }

    /// Pins the device according to `fault`. Stuck-off maps to the HRS, not
    /// to zero.
    pub fn with_fault(mut self, fault: Fault, spec: &DeviceSpec) -> Self {
        self.fault = fault;
        match fault {
            Fault::None => {}
            Fault::StuckOn => self.g_actual = spec.g_lrs,
            Fault::StuckOff => self.g_actual = spec.g_hrs.max(CONDUCTANCE_FLOOR),
        }
        self
    }

    pub fn is_faulted(&self) -> bool {
        self.fault != Fault::None
    }

    /// Writes `g_target` with a relative gaussian error of std
    /// `spec.write_perturbation`, clamped to the write window.
    pub fn program_weight<R: Rng + ?Sized>(
        &mut self,
        g_target: f64,
        spec: &DeviceSpec,
        rng: &mut R,
    ) -> Result<ProgramStatus> {
        if !(spec.g_hrs..=spec.g_lrs).contains(&g_target) {
            return Err(Error::Range {
                what: "g_target",
                value: g_target,
                min: spec.g_hrs,
                max: spec.g_lrs,
            });
        }
        if self.is_faulted() {
            return Ok(ProgramStatus::Pinned);
        }
        let z: f64 = rng.sample(StandardNormal);
        let (lo, hi) = spec.write_clamp();
        self.g_target = g_target;
        self.g_actual = (g_target * (1.0 + spec.write_perturbation * z))
            .clamp(lo, hi)
            .max(CONDUCTANCE_FLOOR);
        Ok(ProgramStatus::Written)
    }

    /// Runs one set/reset cycle: the device lands on
    /// `Normal(g_target, variability * g_target)` truncated at ±4σ.
    ///
    /// Weight devices are rejected so that random draws are always explicit.
    pub fn cycle_resample<R: Rng + ?Sized>(
        &mut self,
        variability: f64,
        rng: &mut R,
    ) -> Result<ProgramStatus> {
        if self.class == DeviceClass::Weight {
            return Err(Error::usage("cycle_resample called on a weight device"));
        }
        if !(0.0..1.0).contains(&variability) {
            return Err(Error::Range {
                what: "variability",
                value: variability,
                min: 0.0,
                max: 1.0,
            });
        }
        if self.is_faulted() {
            return Ok(ProgramStatus::Pinned);
        }
        let z = loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= TRUNCATION_SIGMAS {
                break z;
            }
        };
        self.g_actual = (self.g_target * (1.0 + variability * z)).max(CONDUCTANCE_FLOOR);
        Ok(ProgramStatus::Written)
    }
}
