//! Differential weight mapping and bit-serial vector-matrix multiplication.
//!
//! A logical weight `w ∈ [−w_max, w_max]` occupies two adjacent columns
//! holding `G⁺ = g_mid + w·Δg/(2·w_max)` and `G⁻ = g_mid − w·Δg/(2·w_max)`.
//! Inputs are encoded sign-magnitude with a 1-bit DAC: every bit plane of
//! the positive entries is read, then every bit plane of the negative
//! entries, and the slice outputs are recombined with binary weights off
//! the array.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CrossbarConfig, CrossbarTile, EnergyEvent, NodalSystem};
use crate::device::{DeviceClass, DeviceSpec, DeviceState, ProgramStatus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MappingParams {
    /// Largest weight magnitude; maps onto the full conductance window.
    pub w_max: f64,
    /// Largest input magnitude; maps onto the full DAC range.
    pub x_max: f64,
}

/// A device write performed while mapping weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgramRecord {
    pub row: usize,
    pub col: usize,
    pub g_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmmOutput {
    pub y: Vec<f64>,
    pub events: Vec<EnergyEvent>,
}

/// A weight matrix mapped onto a rectangular region of one tile.
#[derive(Debug, Clone)]
pub struct WeightBlock {
    row0: usize,
    col0: usize,
    n_in: usize,
    n_out: usize,
    params: MappingParams,
    v_read: f64,
    dac_bits: u32,
    delta_g: f64,
    gains: Vec<f64>,
}

impl WeightBlock {
    /// Programs `weights` (outputs × inputs, `y = W·x`) into `tile` with
    /// input `i` on row `row0 + i` and output `o` on columns
    /// `col0 + 2o` (G⁺) and `col0 + 2o + 1` (G⁻).
    ///
    /// The digital output gain of each column pair is trimmed against the
    /// response of the tile at its target conductances, which removes the
    /// deterministic IR-drop attenuation but leaves write errors in place.
    pub fn program<R: Rng + ?Sized>(
        tile: &mut CrossbarTile,
        row0: usize,
        col0: usize,
        weights: &DMatrix<f64>,
        params: MappingParams,
        spec: &DeviceSpec,
        rng: &mut R,
    ) -> Result<(Self, Vec<ProgramRecord>)> {
        let cfg = *tile.config();
        let (n_out, n_in) = weights.shape();
        if row0 + n_in > cfg.rows || col0 + 2 * n_out > cfg.cols {
            return Err(Error::usage(format!(
                "{n_out}x{n_in} weight block at ({row0}, {col0}) does not fit a {}x{} tile",
                cfg.rows, cfg.cols
            )));
        }
        if !(params.w_max > 0.0 && params.x_max > 0.0) {
            return Err(Error::usage("w_max and x_max must be positive"));
        }
        let (g_mid, delta_g) = spec.window();
        let mut records = Vec::with_capacity(2 * n_in * n_out);
        for i in 0..n_in {
            for o in 0..n_out {
                let w = weights[(o, i)];
                if !(w.abs() <= params.w_max) {
                    return Err(Error::Range {
                        what: "weight",
                        value: w,
                        min: -params.w_max,
                        max: params.w_max,
                    });
                }
                let half = w * delta_g / (2.0 * params.w_max);
                for (col, g) in [(col0 + 2 * o, g_mid + half), (col0 + 2 * o + 1, g_mid - half)] {
                    let d = tile.device_mut(row0 + i, col);
                    d.class = DeviceClass::Weight;
                    // rounding can leave g a hair outside the window
                    let g = g.clamp(spec.g_hrs, spec.g_lrs);
                    if d.program_weight(g, spec, rng)? == ProgramStatus::Written {
                        records.push(ProgramRecord {
                            row: row0 + i,
                            col,
                            g_after: d.g_actual,
                        });
                    }
                }
            }
        }
        let mut block = Self {
            row0,
            col0,
            n_in,
            n_out,
            params,
            v_read: cfg.v_read,
            dac_bits: cfg.dac_bits,
            delta_g,
            gains: vec![1.0; n_out],
        };
        block.trim(tile, weights)?;
        Ok((block, records))
    }

    /// Recomputes the per-output gain trim from `tile` at its targets.
    pub fn trim(&mut self, tile: &CrossbarTile, weights: &DMatrix<f64>) -> Result<()> {
        let reference = NodalSystem::new(&tile.at_targets())?;
        let rows = tile.config().rows;
        let scale = self.params.w_max / (self.v_read * self.delta_g);
        let mut num = vec![0.0; self.n_out];
        let mut den = vec![0.0; self.n_out];
        for i in 0..self.n_in {
            let mut wl = vec![0.0; rows];
            wl[self.row0 + i] = self.v_read;
            let currents = reference.read(&wl)?.bitline_currents;
            for o in 0..self.n_out {
                let c = self.col0 + 2 * o;
                let w_eff = (currents[c] - currents[c + 1]) * scale;
                num[o] += weights[(o, i)] * w_eff;
                den[o] += w_eff * w_eff;
            }
        }
        self.gains = num
            .iter()
            .zip(&den)
            .map(|(&n, &d)| if d > 0.0 && n != 0.0 { n / d } else { 1.0 })
            .collect();
        Ok(())
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn params(&self) -> MappingParams {
        self.params
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    /// Worst-case error of the sign-magnitude input quantization.
    pub fn quantization_bound(&self) -> f64 {
        quantization_bound(self.params, self.n_in, self.dac_bits)
    }

    /// Bit-serial read of `W·x` on the factored tile `system`.
    pub fn read(&self, system: &NodalSystem, x: &[f64]) -> Result<VmmOutput> {
        if x.len() != self.n_in {
            return Err(Error::usage(format!(
                "expected {} inputs, got {}",
                self.n_in,
                x.len()
            )));
        }
        let x_max = self.params.x_max;
        if let Some(&v) = x.iter().find(|v| !(v.abs() <= x_max)) {
            return Err(Error::Range {
                what: "vmm input",
                value: v,
                min: -x_max,
                max: x_max,
            });
        }
        let levels = ((1u64 << self.dac_bits) - 1) as f64;
        let codes: Vec<u64> = x
            .iter()
            .map(|v| (v.abs() / x_max * levels).round() as u64)
            .collect();
        let rows = system.config().rows;
        let mut acc = vec![0.0; self.n_out];
        let mut events = Vec::new();
        for sign in [1.0, -1.0] {
            for bit in 0..self.dac_bits {
                let mut wl = vec![0.0; rows];
                let mut driven = false;
                for (i, (&xi, &q)) in x.iter().zip(&codes).enumerate() {
                    if sign * xi > 0.0 && (q >> bit) & 1 == 1 {
                        wl[self.row0 + i] = self.v_read;
                        driven = true;
                    }
                }
                if !driven {
                    continue;
                }
                let read = system.read(&wl)?;
                let weight = sign * (1u64 << bit) as f64;
                for (o, a) in acc.iter_mut().enumerate() {
                    let c = self.col0 + 2 * o;
                    *a += weight * (read.bitline_currents[c] - read.bitline_currents[c + 1]);
                }
                events.extend(read.energy_events);
            }
        }
        let scale = x_max * self.params.w_max / (self.v_read * self.delta_g * levels);
        let y = acc
            .iter()
            .zip(&self.gains)
            .map(|(a, g)| a * scale * g)
            .collect();
        Ok(VmmOutput { y, events })
    }
}

/// `n_in · w_max · x_max / (2·(2ⁿ − 1))`: each input is rounded to the
/// nearest of `2ⁿ − 1` magnitude steps.
pub(crate) fn quantization_bound(params: MappingParams, n_in: usize, dac_bits: u32) -> f64 {
    let levels = ((1u64 << dac_bits) - 1) as f64;
    n_in as f64 * params.w_max * params.x_max / (2.0 * levels)
}

#[derive(Debug, Clone)]
struct MappedTile {
    tile: CrossbarTile,
    system: NodalSystem,
    block: WeightBlock,
    in_offset: usize,
    out_offset: usize,
}

/// A weight matrix spread over as many tiles as it needs, with partial
/// sums accumulated digitally.
#[derive(Debug, Clone)]
pub struct MappedMatrix {
    n_out: usize,
    n_in: usize,
    params: MappingParams,
    dac_bits: u32,
    tiles: Vec<MappedTile>,
}

/// Writes performed on one tile, with the tile's nodal system as it stood
/// before programming (what the verify reads saw).
#[derive(Debug, Clone)]
pub struct TileWrites {
    pub before: NodalSystem,
    pub records: Vec<ProgramRecord>,
}

impl MappedMatrix {
    /// Maps `weights` (outputs × inputs) onto `config`-sized tiles. Unused
    /// cells of edge tiles hold HRS devices.
    pub fn program<R: Rng + ?Sized>(
        weights: &DMatrix<f64>,
        config: &CrossbarConfig,
        spec: &DeviceSpec,
        params: MappingParams,
        rng: &mut R,
    ) -> Result<(Self, Vec<TileWrites>)> {
        if config.cols < 2 {
            return Err(Error::usage("differential mapping needs at least two columns"));
        }
        let (n_out, n_in) = weights.shape();
        let (tr, to) = (config.rows, config.cols / 2);
        let mut tiles = Vec::new();
        let mut writes = Vec::new();
        for in_offset in (0..n_in).step_by(tr) {
            for out_offset in (0..n_out).step_by(to) {
                let ni = tr.min(n_in - in_offset);
                let no = to.min(n_out - out_offset);
                let sub = weights.view((out_offset, in_offset), (no, ni)).into_owned();
                let mut tile =
                    CrossbarTile::filled(*config, DeviceState::exact(DeviceClass::Unused, spec.g_hrs))?;
                let before = NodalSystem::new(&tile)?;
                let (block, records) = WeightBlock::program(&mut tile, 0, 0, &sub, params, spec, rng)?;
                let system = NodalSystem::with_layout(before.layout().clone(), &tile)?;
                writes.push(TileWrites { before, records });
                tiles.push(MappedTile {
                    tile,
                    system,
                    block,
                    in_offset,
                    out_offset,
                });
            }
        }
        Ok((
            Self {
                n_out,
                n_in,
                params,
                dac_bits: config.dac_bits,
                tiles,
            },
            writes,
        ))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_out, self.n_in)
    }

    pub fn n_tiles(&self) -> usize {
        self.tiles.len()
    }

    pub fn tile(&self, k: usize) -> &CrossbarTile {
        &self.tiles[k].tile
    }

    /// Quantization bound of the full product (all tiles of a row band add).
    pub fn quantization_bound(&self) -> f64 {
        quantization_bound(self.params, self.n_in, self.dac_bits)
    }
}

/// Computes `W·x` on the crossbar.
pub fn vmm_read(matrix: &MappedMatrix, x: &[f64]) -> Result<VmmOutput> {
    if x.len() != matrix.n_in {
        return Err(Error::usage(format!(
            "expected {} inputs, got {}",
            matrix.n_in,
            x.len()
        )));
    }
    let mut y = vec![0.0; matrix.n_out];
    let mut events = Vec::new();
    for t in &matrix.tiles {
        let xs = &x[t.in_offset..t.in_offset + t.block.n_in()];
        let out = t.block.read(&t.system, xs)?;
        for (o, v) in out.y.iter().enumerate() {
            y[t.out_offset + o] += v;
        }
        events.extend(out.events);
    }
    Ok(VmmOutput { y, events })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ideal_spec() -> DeviceSpec {
        DeviceSpec {
            write_perturbation: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_input_reads_zero_without_pulses() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = DMatrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 });
        let params = MappingParams { w_max: 1.0, x_max: 4.0 };
        let (m, _) = MappedMatrix::program(&w, &CrossbarConfig::ideal(8, 8), &ideal_spec(), params, &mut rng).unwrap();
        let out = vmm_read(&m, &[0.0; 4]).unwrap();
        assert_eq!(out.y, vec![0.0; 4]);
        assert!(out.events.is_empty());
    }

    #[test]
    fn identity_on_ideal_tile() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = DMatrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 });
        let params = MappingParams { w_max: 1.0, x_max: 4.0 };
        let (m, _) = MappedMatrix::program(&w, &CrossbarConfig::ideal(4, 8), &ideal_spec(), params, &mut rng).unwrap();
        let out = vmm_read(&m, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let bound = m.quantization_bound();
        for (y, t) in out.y.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((y - t).abs() <= bound, "{y} vs {t}");
        }
    }

    #[test]
    fn signed_inputs_and_multiple_tiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = DMatrix::from_fn(11, 13, |i, j| ((i * 7 + j * 3) % 5) as f64 / 2.0 - 1.0);
        let x: Vec<f64> = (0..13).map(|i| (i as f64 * 0.37).sin()).collect();
        let params = MappingParams { w_max: 1.0, x_max: 1.0 };
        let (m, writes) = MappedMatrix::program(&w, &CrossbarConfig::ideal(8, 8), &ideal_spec(), params, &mut rng).unwrap();
        assert_eq!(m.n_tiles(), 2 * 3);
        assert_eq!(writes.iter().map(|t| t.records.len()).sum::<usize>(), 2 * 11 * 13);
        let exact = &w * nalgebra::DVector::from_vec(x.clone());
        let out = vmm_read(&m, &x).unwrap();
        for (y, t) in out.y.iter().zip(exact.iter()) {
            assert!((y - t).abs() <= m.quantization_bound());
        }
    }

    #[test]
    fn inputs_beyond_range_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = DMatrix::from_element(1, 1, 0.5);
        let params = MappingParams { w_max: 1.0, x_max: 1.0 };
        let (m, _) = MappedMatrix::program(&w, &CrossbarConfig::ideal(8, 8), &ideal_spec(), params, &mut rng).unwrap();
        assert!(matches!(vmm_read(&m, &[1.5]), Err(Error::Range { .. })));
        let big = DMatrix::from_element(1, 1, 2.0);
        assert!(MappedMatrix::program(&big, &CrossbarConfig::ideal(8, 8), &ideal_spec(), params, &mut rng).is_err());
    }

    #[test]
    fn gain_trim_undoes_ir_drop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = CrossbarConfig::default();
        let w = DMatrix::from_row_slice(2, 1, &[0.1, -0.2]);
        let params = MappingParams { w_max: 0.2, x_max: 8.0 };
        let mut tile = CrossbarTile::filled(cfg, DeviceState::exact(DeviceClass::Unused, 1e-4)).unwrap();
        let (block, _) = WeightBlock::program(&mut tile, 0, 0, &w, params, &ideal_spec(), &mut rng).unwrap();
        assert!(block.gains().iter().all(|&g| g > 1.05), "{:?}", block.gains());
        let sys = NodalSystem::new(&tile).unwrap();
        let out = block.read(&sys, &[1.3]).unwrap();
        assert!((out.y[0] - 0.13).abs() < 1e-4);
        assert!((out.y[1] + 0.26).abs() < 1e-4);
    }
}
