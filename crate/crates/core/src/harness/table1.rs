//! Mean `|λ₂(W)|²` over independent connected graph draws.

use rayon::prelude::*;
use serde::Serialize;

use super::spec::GraphSpec;
use super::{config_hash, mean_sd, opt, preamble, OutputDir};
use crate::error::{Error, Result};
use crate::mixing::{build_weights, second_abs_eigenvalue, WeightRule};
use crate::rng::Streams;

/// Published reference means, keyed by family, parameter and `n`.
pub const REFERENCE_TABLE1: &[(&str, f64, [f64; 3])] = &[
    ("geographic", 0.35, [0.78, 0.87, 0.83]),
    ("geographic", 0.5, [0.7, 0.64, 0.56]),
    ("geographic", 0.65, [0.41, 0.33, 0.34]),
    ("random", 0.3, [0.7, 0.62, 0.4]),
    ("random", 0.5, [0.42, 0.29, 0.17]),
    ("random", 0.7, [0.25, 0.13, 0.083]),
];

/// Sizes the reference values are given for.
pub const REFERENCE_SIZES: [usize; 3] = [10, 20, 40];

pub fn reference_value(graph: &GraphSpec, n: usize) -> Option<f64> {
    let (family, param) = match *graph {
        GraphSpec::Geographic {
            radius,
            augment_path: false,
        } => ("geographic", radius),
        GraphSpec::Random { p, augment_path: false } => ("random", p),
        _ => return None,
    };
    let col = REFERENCE_SIZES.iter().position(|&s| s == n)?;
    REFERENCE_TABLE1
        .iter()
        .find(|(f, v, _)| *f == family && *v == param)
        .map(|(_, _, row)| row[col])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1Grid {
    pub sizes: Vec<usize>,
    pub radii: Vec<f64>,
    pub probs: Vec<f64>,
    pub weight_rule: WeightRule,
    pub realizations: usize,
    pub seed: u64,
}

impl Default for Table1Grid {
    fn default() -> Self {
        Self {
            sizes: REFERENCE_SIZES.to_vec(),
            radii: vec![0.35, 0.5, 0.65],
            probs: vec![0.3, 0.5, 0.7],
            weight_rule: WeightRule::default(),
            realizations: 10,
            seed: 0,
        }
    }
}

impl Table1Grid {
    /// Row order: radii, then probabilities.
    pub fn rows(&self) -> Vec<GraphSpec> {
        let geo = self.radii.iter().map(|&radius| GraphSpec::Geographic {
            radius,
            augment_path: false,
        });
        let er = self.probs.iter().map(|&p| GraphSpec::Random { p, augment_path: false });
        geo.chain(er).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Cell {
    pub graph: GraphSpec,
    pub n: usize,
    pub values: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    /// Disconnected draws discarded across all realizations.
    pub rejections: usize,
    pub reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1 {
    pub grid: Table1Grid,
    pub cells: Vec<Table1Cell>,
    pub hash: String,
}

/// Cell `c` (row-major over [`Table1Grid::rows`] × sizes) uses graph slot `c`;
/// realization `r` is connected draw `r` of that slot.
pub fn cmd_table1(grid: &Table1Grid) -> Result<Table1> {
    if grid.realizations == 0 {
        return Err(Error::Config("need at least one realization".into()));
    }
    let streams = Streams::new(grid.seed);
    let jobs: Vec<(GraphSpec, usize)> = grid
        .rows()
        .into_iter()
        .flat_map(|g| grid.sizes.iter().map(move |&n| (g, n)))
        .collect();
    let cells = jobs
        .par_iter()
        .enumerate()
        .map(|(slot, &(graph, n))| {
            let mut values = Vec::with_capacity(grid.realizations);
            let mut rejections = 0;
            for r in 0..grid.realizations {
                let (g, rej) = graph.draw_connected(n, &streams, slot as u64, r as u64)?;
                rejections += rej;
                let w = build_weights(&g, grid.weight_rule)?;
                let l2 = second_abs_eigenvalue(w.matrix())?;
                values.push(l2 * l2);
            }
            let (mean, sd) = mean_sd(&values);
            Ok(Table1Cell {
                graph,
                n,
                values,
                mean,
                sd,
                rejections,
                reference: reference_value(&graph, n),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Table1 {
        grid: grid.clone(),
        cells,
        hash: config_hash(grid)?,
    })
}

impl Table1 {
    pub fn cell(&self, graph: &GraphSpec, n: usize) -> Option<&Table1Cell> {
        self.cells.iter().find(|c| c.graph == *graph && c.n == n)
    }

    /// One row per graph family and parameter, one column per size.
    pub fn to_wide_csv(&self) -> String {
        let mut out = preamble(&self.hash, &self.grid.seed.to_string());
        out.push_str("graph");
        for n in &self.grid.sizes {
            out.push_str(&format!(",n{n}"));
        }
        out.push('\n');
        for g in self.grid.rows() {
            out.push_str(&g.label());
            for &n in &self.grid.sizes {
                let mean = self.cell(&g, n).map(|c| c.mean);
                out.push(',');
                out.push_str(&opt(mean));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_long_csv(&self) -> String {
        let mut out = preamble(&self.hash, &self.grid.seed.to_string());
        out.push_str("graph,n,realizations,mean,sd,rejections,reference,abs_diff\n");
        for c in &self.cells {
            let diff = c.reference.map(|r| (c.mean - r).abs());
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.graph.label(),
                c.n,
                c.values.len(),
                c.mean,
                c.sd,
                c.rejections,
                opt(c.reference),
                opt(diff)
            ));
        }
        out
    }

    pub fn write(&self, out: &OutputDir) -> Result<()> {
        out.write("table1.csv", &self.to_wide_csv())?;
        out.write("table1_long.csv", &self.to_long_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complete_graph_cell_is_zero() {
        let grid = Table1Grid {
            sizes: vec![5, 12],
            radii: vec![],
            probs: vec![1.0],
            realizations: 3,
            ..Table1Grid::default()
        };
        let t = cmd_table1(&grid).unwrap();
        for c in &t.cells {
            assert!(c.mean < 1e-24, "{}", c.mean);
            assert_eq!(c.rejections, 0);
        }
    }

    #[test]
    fn reference_lookup() {
        let g = GraphSpec::Geographic {
            radius: 0.5,
            augment_path: false,
        };
        assert_eq!(reference_value(&g, 20), Some(0.64));
        assert_eq!(
            reference_value(
                &GraphSpec::Random {
                    p: 0.7,
                    augment_path: false
                },
                40
            ),
            Some(0.083)
        );
        assert_eq!(reference_value(&g, 30), None);
    }

    #[test]
    fn wide_layout() {
        let grid = Table1Grid {
            sizes: vec![6],
            radii: vec![0.8],
            probs: vec![],
            realizations: 2,
            ..Table1Grid::default()
        };
        let csv = cmd_table1(&grid).unwrap().to_wide_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# feddec config_hash="));
        assert_eq!(lines[1], "graph,n6");
        assert!(lines[2].starts_with("geographic_r0.8,"));
    }
}
