//! Dense modified nodal analysis of a crossbar tile, written independently
//! of the banded solver. Zero-ohm elements become 0 V sources with their own
//! current unknowns instead of being merged away.

use nalgebra::{DMatrix, DVector};
use sdex::circuit::CrossbarTile;

pub struct Oracle {
    /// Current into each bit-line termination (A).
    pub currents: Vec<f64>,
    /// Power dissipated in every resistive element (W).
    pub dissipation: f64,
}

enum Element {
    Resistor(usize, usize, f64),
    Short(usize, usize),
}

/// `sources` holds the driver voltages of every row followed by the
/// termination voltages of every column.
pub fn solve(tile: &CrossbarTile, sources: &[f64]) -> Oracle {
    let cfg = tile.config();
    let (r, c) = (cfg.rows, cfg.cols);
    assert_eq!(sources.len(), r + c);
    // node 0 is ground; word, bit, driver and termination nodes follow
    let word = |i: usize, j: usize| 1 + i * c + j;
    let bit = |i: usize, j: usize| 1 + r * c + i * c + j;
    let driver = |i: usize| 1 + 2 * r * c + i;
    let term = |j: usize| 1 + 2 * r * c + r + j;
    let n_nodes = 1 + 2 * r * c + r + c;

    let wire = |a, b, res: f64| {
        if res == 0.0 {
            Element::Short(a, b)
        } else {
            Element::Resistor(a, b, 1.0 / res)
        }
    };
    let mut elements = Vec::new();
    for i in 0..r {
        elements.push(wire(driver(i), word(i, 0), cfg.r_in));
        for j in 1..c {
            elements.push(wire(word(i, j - 1), word(i, j), cfg.r_line));
        }
    }
    for j in 0..c {
        for i in 1..r {
            elements.push(wire(bit(i - 1, j), bit(i, j), cfg.r_line));
        }
    }
    let out_element = elements.len();
    for j in 0..c {
        elements.push(wire(bit(r - 1, j), term(j), cfg.r_out));
    }
    for i in 0..r {
        for j in 0..c {
            elements.push(Element::Resistor(word(i, j), bit(i, j), tile.device(i, j).g_actual));
        }
    }

    // unknowns: node voltages 1.., one current per short, one per source
    let n_short = elements.iter().filter(|e| matches!(e, Element::Short(..))).count();
    let nv = n_nodes - 1;
    let n = nv + n_short + r + c;
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    let mut short_index = vec![usize::MAX; elements.len()];
    let mut k = nv;
    for (e, el) in elements.iter().enumerate() {
        match *el {
            Element::Resistor(p, q, g) => {
                let (p, q) = (p - 1, q - 1);
                a[(p, p)] += g;
                a[(q, q)] += g;
                a[(p, q)] -= g;
                a[(q, p)] -= g;
            }
            Element::Short(p, q) => {
                // current k flows p -> q
                let (p, q) = (p - 1, q - 1);
                a[(p, k)] += 1.0;
                a[(q, k)] -= 1.0;
                a[(k, p)] += 1.0;
                a[(k, q)] -= 1.0;
                short_index[e] = k;
                k += 1;
            }
        }
    }
    let source_nodes = (0..r).map(driver).chain((0..c).map(term));
    for (s, node) in source_nodes.enumerate() {
        let p = node - 1;
        a[(p, k)] += 1.0;
        a[(k, p)] += 1.0;
        b[k] = sources[s];
        k += 1;
    }
    let x = a.lu().solve(&b).expect("oracle system is singular");
    let v = |node: usize| x[node - 1];

    let currents = (0..c)
        .map(|j| match elements[out_element + j] {
            Element::Resistor(p, q, g) => g * (v(p) - v(q)),
            Element::Short(..) => x[short_index[out_element + j]],
        })
        .collect();
    let dissipation = elements
        .iter()
        .map(|e| match *e {
            Element::Resistor(p, q, g) => g * (v(p) - v(q)).powi(2),
            Element::Short(..) => 0.0,
        })
        .sum();
    Oracle { currents, dissipation }
}

/// Largest absolute difference over the largest magnitude of `want`.
pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = got.iter().zip(want).fold(0.0f64, |m, (g, w)| m.max((g - w).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
