//! Two-node-per-cell nodal analysis of a crossbar tile.
//!
//! Every cell `(i, j)` owns a word-line node and a bit-line node joined by
//! the device conductance. Word line `i` is fed from driver `i` through
//! `r_in` at column 0 and chains through `r_line` segments. Bit line `j`
//! chains through `r_line` segments and leaves through `r_out` at the last
//! row into termination `j`. Drivers and terminations are ideal voltage
//! sources.
//!
//! Zero-ohm elements are handled by merging their end nodes, so the reduced
//! system over the remaining free nodes stays symmetric positive definite.
//! A group merged with a source is pinned to that source's voltage.

use std::io::{self, Write};
use std::sync::Arc;

use super::band::{BandCholesky, BandMatrix};
use super::{CrossbarConfig, CrossbarTile, EnergyEvent, ReadResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Free(usize),
    Source(usize),
}

#[derive(Debug, Clone, Copy)]
enum BranchRef {
    Static(usize),
    Device(usize),
}

#[derive(Debug, Clone, Copy)]
struct Crossing {
    branch: BranchRef,
    outside: usize,
    inside: usize,
}

/// Topology of a tile: node merging, unknown ordering and band structure.
/// Depends only on the crossbar configuration, so it is shared between all
/// factorizations of tiles with the same configuration.
#[derive(Debug)]
pub struct NodalLayout {
    config: CrossbarConfig,
    node_group: Vec<usize>,
    slots: Vec<Slot>,
    n_free: usize,
    bw: usize,
    /// Non-device branches between distinct groups: (group a, group b, g).
    static_branches: Vec<(usize, usize, f64)>,
    /// Per device, row-major: (word-line group, bit-line group).
    device_groups: Vec<(usize, usize)>,
    /// Per column: branches entering the termination group.
    outputs: Vec<Vec<Crossing>>,
    /// Static part of the band matrix.
    base: BandMatrix,
    /// Static right-hand-side couplings: (unknown, source, g).
    base_rhs: Vec<(usize, usize, f64)>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

impl NodalLayout {
    pub fn new(config: &CrossbarConfig) -> Result<Arc<Self>> {
        config.validate()?;
        let (r, c) = (config.rows, config.cols);
        let rc = r * c;
        let word = |i: usize, j: usize| i * c + j;
        let bit = |i: usize, j: usize| rc + i * c + j;
        let driver = |i: usize| 2 * rc + i;
        let term = |j: usize| 2 * rc + r + j;
        let n_nodes = 2 * rc + r + c;

        let conductance = |res: f64| if res > 0.0 { Some(1.0 / res) } else { None };
        let g_in = conductance(config.r_in);
        let g_line = conductance(config.r_line);
        let g_out = conductance(config.r_out);

        // (node a, node b, g); g = None marks a short
        let mut elements: Vec<(usize, usize, Option<f64>)> = Vec::new();
        for i in 0..r {
            elements.push((driver(i), word(i, 0), g_in));
            for j in 1..c {
                elements.push((word(i, j - 1), word(i, j), g_line));
            }
        }
        for j in 0..c {
            for i in 1..r {
                elements.push((bit(i - 1, j), bit(i, j), g_line));
            }
            elements.push((bit(r - 1, j), term(j), g_out));
        }

        let mut uf = UnionFind((0..n_nodes).collect());
        for &(a, b, g) in &elements {
            if g.is_none() {
                uf.union(a, b);
            }
        }

        // Order key spans the shorter tile dimension, which bounds the band.
        let col_major = r <= c;
        let key = |node: usize| -> usize {
            let (cell, is_bit) = if node < rc {
                (node, 0)
            } else {
                (node - rc, 1)
            };
            let (i, j) = (cell / c, cell % c);
            let lin = if col_major { j * r + i } else { i * c + j };
            2 * lin + is_bit
        };

        let mut root_group = vec![usize::MAX; n_nodes];
        let mut node_group = vec![0; n_nodes];
        let mut group_source: Vec<Option<usize>> = Vec::new();
        let mut group_key: Vec<usize> = Vec::new();
        for node in 0..n_nodes {
            let root = uf.find(node);
            if root_group[root] == usize::MAX {
                root_group[root] = group_source.len();
                group_source.push(None);
                group_key.push(usize::MAX);
            }
            let g = root_group[root];
            node_group[node] = g;
            if node >= 2 * rc {
                if group_source[g].is_some() {
                    return Err(Error::usage("two voltage sources shorted together"));
                }
                group_source[g] = Some(node - 2 * rc);
            } else {
                group_key[g] = group_key[g].min(key(node));
            }
        }

        let n_groups = group_source.len();
        let mut free: Vec<usize> = (0..n_groups).filter(|&g| group_source[g].is_none()).collect();
        free.sort_by_key(|&g| group_key[g]);
        let mut slots = vec![Slot::Free(0); n_groups];
        for (g, s) in group_source.iter().enumerate() {
            if let Some(s) = s {
                slots[g] = Slot::Source(*s);
            }
        }
        for (u, &g) in free.iter().enumerate() {
            slots[g] = Slot::Free(u);
        }
        let n_free = free.len();

        let static_branches: Vec<(usize, usize, f64)> = elements
            .iter()
            .filter_map(|&(a, b, g)| {
                let (ga, gb) = (node_group[a], node_group[b]);
                match g {
                    Some(g) if ga != gb => Some((ga, gb, g)),
                    _ => None,
                }
            })
            .collect();
        let device_groups: Vec<(usize, usize)> = (0..r)
            .flat_map(|i| (0..c).map(move |j| (i, j)))
            .map(|(i, j)| (node_group[word(i, j)], node_group[bit(i, j)]))
            .collect();

        let mut bw = 0;
        let pairs = static_branches
            .iter()
            .map(|&(a, b, _)| (a, b))
            .chain(device_groups.iter().copied());
        for (a, b) in pairs {
            if let (Slot::Free(u), Slot::Free(v)) = (slots[a], slots[b]) {
                bw = bw.max(u.abs_diff(v));
            }
        }

        let mut outputs = vec![Vec::new(); c];
        for (j, out) in outputs.iter_mut().enumerate() {
            let t = node_group[term(j)];
            let mut consider = |branch: BranchRef, a: usize, b: usize| {
                if a == t && b != t {
                    out.push(Crossing { branch, outside: b, inside: a });
                } else if b == t && a != t {
                    out.push(Crossing { branch, outside: a, inside: b });
                }
            };
            for (k, &(a, b, _)) in static_branches.iter().enumerate() {
                consider(BranchRef::Static(k), a, b);
            }
            for (k, &(a, b)) in device_groups.iter().enumerate() {
                consider(BranchRef::Device(k), a, b);
            }
        }

        let mut base = BandMatrix::zeros(n_free, bw);
        let mut base_rhs = Vec::new();
        for &(a, b, g) in &static_branches {
            stamp(&mut base, &mut base_rhs, &slots, a, b, g);
        }

        Ok(Arc::new(Self {
            config: *config,
            node_group,
            slots,
            n_free,
            bw,
            static_branches,
            device_groups,
            outputs,
            base,
            base_rhs,
        }))
    }

    pub fn config(&self) -> &CrossbarConfig {
        &self.config
    }

    /// Number of free unknowns in the reduced system.
    pub fn unknowns(&self) -> usize {
        self.n_free
    }

    /// Half bandwidth of the reduced system.
    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    /// Number of voltage sources: one driver per row then one termination
    /// per column.
    pub fn n_sources(&self) -> usize {
        self.config.rows + self.config.cols
    }

    /// Groups of the word-line and bit-line nodes of cell `(row, col)`.
    pub fn cell_groups(&self, row: usize, col: usize) -> (usize, usize) {
        let c = self.config.cols;
        let rc = self.config.rows * c;
        (self.node_group[row * c + col], self.node_group[rc + row * c + col])
    }
}

fn stamp(
    m: &mut BandMatrix,
    rhs: &mut Vec<(usize, usize, f64)>,
    slots: &[Slot],
    a: usize,
    b: usize,
    g: f64,
) {
    match (slots[a], slots[b]) {
        (Slot::Free(u), Slot::Free(v)) => {
            m.add(u, u, g);
            m.add(v, v, g);
            m.add(u, v, -g);
        }
        (Slot::Free(u), Slot::Source(s)) | (Slot::Source(s), Slot::Free(u)) => {
            m.add(u, u, g);
            rhs.push((u, s, g));
        }
        (Slot::Source(_), Slot::Source(_)) => {}
    }
}

/// Group voltages of a solved network.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    voltages: Vec<f64>,
}

impl Solution {
    pub fn group_voltages(&self) -> &[f64] {
        &self.voltages
    }

    /// Word-line and bit-line voltages at cell `(row, col)`.
    pub fn cell_voltages(&self, layout: &NodalLayout, row: usize, col: usize) -> (f64, f64) {
        let (w, b) = layout.cell_groups(row, col);
        (self.voltages[w], self.voltages[b])
    }
}

/// Dissipated power as a function of one device's conductance, all else
/// fixed. The network is linear, so the dependence is a Möbius map of the
/// conductance and two evaluations pin it down exactly.
#[derive(Debug, Clone, Copy)]
pub struct PowerProfile {
    g0: f64,
    p0: f64,
    slope: f64,
    d0: f64,
    r_th: f64,
}

impl PowerProfile {
    /// Extra current through the device when it moves from `g0` to `g`.
    fn extra_current(&self, g: f64) -> f64 {
        let dg = g - self.g0;
        dg * self.d0 / (1.0 + dg * self.r_th)
    }

    pub fn power(&self, g: f64) -> f64 {
        (self.p0 + self.slope * self.extra_current(g)).max(0.0)
    }
}

/// A tile's nodal system, assembled and factored for the tile's current
/// device conductances.
#[derive(Debug, Clone)]
pub struct NodalSystem {
    layout: Arc<NodalLayout>,
    g: Vec<f64>,
    chol: BandCholesky,
    rhs_terms: Vec<(usize, usize, f64)>,
}

impl NodalSystem {
    pub fn new(tile: &CrossbarTile) -> Result<Self> {
        let layout = NodalLayout::new(tile.config())?;
        Self::with_layout(layout, tile)
    }

    pub fn with_layout(layout: Arc<NodalLayout>, tile: &CrossbarTile) -> Result<Self> {
        let (m, rhs_terms, g) = Self::assemble(&layout, tile)?;
        let chol = m.factor()?;
        Ok(Self {
            layout,
            g,
            chol,
            rhs_terms,
        })
    }

    /// Refactors for the tile's current conductances, keeping the topology.
    pub fn refactor(&mut self, tile: &CrossbarTile) -> Result<()> {
        let (m, rhs_terms, g) = Self::assemble(&self.layout, tile)?;
        self.chol = m.factor()?;
        self.rhs_terms = rhs_terms;
        self.g = g;
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn assemble(
        layout: &NodalLayout,
        tile: &CrossbarTile,
    ) -> Result<(BandMatrix, Vec<(usize, usize, f64)>, Vec<f64>)> {
        let cfg = tile.config();
        if cfg.rows != layout.config.rows || cfg.cols != layout.config.cols {
            return Err(Error::usage("tile does not match nodal layout"));
        }
        let g = tile.conductances();
        let mut m = layout.base.clone();
        let mut rhs = layout.base_rhs.clone();
        for (&(a, b), &gd) in layout.device_groups.iter().zip(&g) {
            if !(gd > 0.0 && gd.is_finite()) {
                return Err(Error::usage(format!("device conductance {gd} not positive")));
            }
            if a != b {
                stamp(&mut m, &mut rhs, &layout.slots, a, b, gd);
            }
        }
        Ok((m, rhs, g))
    }

    pub fn layout(&self) -> &Arc<NodalLayout> {
        &self.layout
    }

    pub fn config(&self) -> &CrossbarConfig {
        &self.layout.config
    }

    /// Source vector for an ordinary read: word lines driven, bit lines at
    /// ground.
    pub fn read_sources(&self, wordline: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.layout.n_sources()];
        s[..wordline.len()].copy_from_slice(wordline);
        s
    }

    /// Source vector for a half-select access of `(row, col)`: the selected
    /// row at `v`, the selected column at 0 and every other line at `v / 2`.
    pub fn half_select_sources(&self, row: usize, col: usize, v: f64) -> Vec<f64> {
        let r = self.layout.config.rows;
        let mut s = vec![0.5 * v; self.layout.n_sources()];
        s[row] = v;
        s[r + col] = 0.0;
        s
    }

    /// Solves for all group voltages given the source voltages.
    pub fn solve(&self, sources: &[f64]) -> Solution {
        let mut x = vec![0.0; self.layout.n_free];
        for &(u, s, g) in &self.rhs_terms {
            x[u] += g * sources[s];
        }
        self.chol.solve_in_place(&mut x);
        let voltages = self
            .layout
            .slots
            .iter()
            .map(|slot| match *slot {
                Slot::Free(u) => x[u],
                Slot::Source(s) => sources[s],
            })
            .collect();
        Solution { voltages }
    }

    fn branch_current(&self, sol: &Solution, c: &Crossing) -> f64 {
        let g = match c.branch {
            BranchRef::Static(k) => self.layout.static_branches[k].2,
            BranchRef::Device(k) => self.g[k],
        };
        g * (sol.voltages[c.outside] - sol.voltages[c.inside])
    }

    /// Current delivered into each termination (A), i.e. the bit-line
    /// output currents.
    pub fn bitline_currents(&self, sol: &Solution) -> Vec<f64> {
        self.layout
            .outputs
            .iter()
            .map(|cs| cs.iter().map(|c| self.branch_current(sol, c)).sum())
            .collect()
    }

    /// Total power dissipated in devices and parasitic resistances (W).
    pub fn dissipation(&self, sol: &Solution) -> f64 {
        self.dissipation_with(sol, None)
    }

    fn dissipation_with(&self, sol: &Solution, replace: Option<(usize, f64)>) -> f64 {
        let v = &sol.voltages;
        let stat: f64 = self
            .layout
            .static_branches
            .iter()
            .map(|&(a, b, g)| g * (v[a] - v[b]).powi(2))
            .sum();
        let dev: f64 = self
            .layout
            .device_groups
            .iter()
            .zip(&self.g)
            .enumerate()
            .map(|(k, (&(a, b), &g))| {
                let g = match replace {
                    Some((d, gr)) if d == k => gr,
                    _ => g,
                };
                g * (v[a] - v[b]).powi(2)
            })
            .sum();
        stat + dev
    }

    /// Drives the word lines with `wordline` volts and returns the bit-line
    /// currents plus one energy event of the tile's read-pulse duration.
    pub fn read(&self, wordline: &[f64]) -> Result<ReadResult> {
        let cfg = &self.layout.config;
        if wordline.len() != cfg.rows {
            return Err(Error::usage(format!(
                "expected {} word-line voltages, got {}",
                cfg.rows,
                wordline.len()
            )));
        }
        let vmax = 2.0 * cfg.v_read;
        if let Some(&v) = wordline.iter().find(|v| !(v.abs() <= vmax)) {
            return Err(Error::Range {
                what: "word-line voltage",
                value: v,
                min: -vmax,
                max: vmax,
            });
        }
        let sol = self.solve(&self.read_sources(wordline));
        let currents = self.bitline_currents(&sol);
        let power = self.dissipation(&sol);
        let peak = wordline.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        Ok(ReadResult {
            bitline_currents: currents,
            energy_events: vec![EnergyEvent {
                voltage: peak,
                duration_s: cfg.read_pulse_s,
                dissipation_w: power,
            }],
        })
    }

    /// Power drawn under `sources` as a function of the conductance of the
    /// device at `(row, col)`, with every other device held at its current
    /// conductance.
    pub fn power_profile(&self, row: usize, col: usize, sources: &[f64]) -> PowerProfile {
        let cfg = &self.layout.config;
        let k = row * cfg.cols + col;
        let (a, b) = self.layout.device_groups[k];
        let g0 = self.g[k];
        let v0 = self.solve(sources);
        let p0 = self.dissipation(&v0);
        let d0 = v0.voltages[a] - v0.voltages[b];

        // response to a unit current drawn from the word node into the bit node
        let mut z = vec![0.0; self.layout.n_free];
        if let Slot::Free(u) = self.layout.slots[a] {
            z[u] += 1.0;
        }
        if let Slot::Free(u) = self.layout.slots[b] {
            z[u] -= 1.0;
        }
        self.chol.solve_in_place(&mut z);
        let zg = |grp: usize| match self.layout.slots[grp] {
            Slot::Free(u) => z[u],
            Slot::Source(_) => 0.0,
        };
        let r_th = zg(a) - zg(b);

        let mut profile = PowerProfile {
            g0,
            p0,
            slope: 0.0,
            d0,
            r_th,
        };
        let g1 = 2.0 * g0;
        let j1 = profile.extra_current(g1);
        if j1 != 0.0 {
            let voltages = v0
                .voltages
                .iter()
                .enumerate()
                .map(|(grp, v)| v - j1 * zg(grp))
                .collect();
            let p1 = self.dissipation_with(&Solution { voltages }, Some((k, g1)));
            profile.slope = (p1 - p0) / j1;
        }
        profile
    }

    /// Writes the assembled reduced matrix, right-hand side and solution for
    /// `sources` as plain text.
    pub fn write_dump<W: Write>(&self, tile: &CrossbarTile, sources: &[f64], mut w: W) -> io::Result<()> {
        let (m, rhs_terms, _) =
            Self::assemble(&self.layout, tile).map_err(|e| io::Error::other(e.to_string()))?;
        let n = m.n();
        writeln!(w, "# unknowns {} bandwidth {}", n, self.layout.bw)?;
        writeln!(w, "# matrix i j value")?;
        for i in 0..n {
            for j in i.saturating_sub(self.layout.bw)..=i {
                let a = m.get(i, j);
                if a != 0.0 {
                    writeln!(w, "{i} {j} {a:e}")?;
                }
            }
        }
        let mut b = vec![0.0; n];
        for &(u, s, g) in &rhs_terms {
            b[u] += g * sources[s];
        }
        writeln!(w, "# rhs i value")?;
        for (i, v) in b.iter().enumerate() {
            writeln!(w, "{i} {v:e}")?;
        }
        let sol = self.solve(sources);
        writeln!(w, "# solution group value")?;
        for (i, v) in sol.voltages.iter().enumerate() {
            writeln!(w, "{i} {v:e}")?;
        }
        Ok(())
    }

    /// Relative residual `|A x − b| / |b|` of the reduced solve, for checks.
    pub fn residual(&self, tile: &CrossbarTile, sources: &[f64]) -> Result<f64> {
        let (m, rhs_terms, _) = Self::assemble(&self.layout, tile)?;
        let mut b = vec![0.0; m.n()];
        for &(u, s, g) in &rhs_terms {
            b[u] += g * sources[s];
        }
        let mut x = b.clone();
        self.chol.solve_in_place(&mut x);
        let ax = m.mul(&x);
        let num: f64 = ax.iter().zip(&b).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(if den == 0.0 { num } else { num / den })
    }
}
