//! Loose, tight and offset-only noise bounds over a grid of horizons.

use std::io::Write;

use koopdeepc::bounds::{self, BoundReport};
use koopdeepc::{GeneratorParams64, OperatingRegion64};
use serde::Serialize;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LadderRow {
    pub l_pred: usize,
    pub eps_bar: f64,
    pub eps_bar_tight: f64,
    pub eps_bar_0: f64,
    pub loose_over_tight: f64,
    pub eps0_over_e_bar: f64,
    /// `eps_bar_0 <= eps_bar_tight <= eps_bar`.
    pub ordered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LadderTable {
    pub eps_a: f64,
    pub c0: f64,
    pub c0_over_eps_a: f64,
    pub e_bar: f64,
    pub diam_z: f64,
    pub rows: Vec<LadderRow>,
    pub all_ordered: bool,
}

impl From<&BoundReport> for LadderRow {
    fn from(r: &BoundReport) -> Self {
        Self {
            l_pred: r.l_pred,
            eps_bar: r.eps_bar,
            eps_bar_tight: r.eps_bar_tight,
            eps_bar_0: r.eps_bar_0,
            loose_over_tight: r.loose_over_tight,
            eps0_over_e_bar: r.eps_bar_0 / r.e_bar,
            ordered: r.ordered(),
        }
    }
}

/// Bound reports at every horizon in `horizons`.
pub fn compare_bound_ladder(
    p: &GeneratorParams64,
    r: &OperatingRegion64,
    horizons: &[usize],
    n_grid: usize,
) -> Result<LadderTable> {
    let base = bounds::generator_bound_inputs(p, r, 2, n_grid)?;
    let mut rows = Vec::with_capacity(horizons.len());
    let mut e_bar = 0.0;
    for &l in horizons {
        let bi = bounds::BoundInputs { l_pred: l, ..base.clone() };
        let rep = bounds::bound_report(&bi)?;
        e_bar = rep.e_bar;
        rows.push(LadderRow::from(&rep));
    }
    let all_ordered = rows.iter().all(|r| r.ordered);
    Ok(LadderTable {
        eps_a: base.cert.eps_a,
        c0: base.cert.c0,
        c0_over_eps_a: base.cert.c0 / base.cert.eps_a,
        e_bar,
        diam_z: base.diam_z,
        rows,
        all_ordered,
    })
}

impl LadderTable {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "l_pred,eps_bar,eps_bar_tight,eps_bar_0,loose_over_tight,eps0_over_e_bar,ordered")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.l_pred, r.eps_bar, r.eps_bar_tight, r.eps_bar_0, r.loose_over_tight, r.eps0_over_e_bar, r.ordered
            )?;
        }
        Ok(())
    }

    pub fn row(&self, l: usize) -> Option<&LadderRow> {
        self.rows.iter().find(|r| r.l_pred == l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_is_ordered_and_collapses_at_two() {
        let p = GeneratorParams64::default();
        let r = OperatingRegion64::default();
        let t = compare_bound_ladder(&p, &r, &[2, 14], 11).unwrap();
        assert!(t.all_ordered);
        let bi = bounds::generator_bound_inputs(&p, &r, 2, 11).unwrap();
        let two = bounds::bound_report(&bi).unwrap();
        // Single-term sums: S_2 = |C| and the loose bound is |C| e_bar.
        assert!((two.s_l - two.norm_c).abs() < 1e-12);
        assert!((two.eps_bar - two.norm_c * two.e_bar).abs() < 1e-12 * two.eps_bar);
        assert_eq!(t.row(2).unwrap().eps_bar, two.eps_bar);
        let l14 = t.row(14).unwrap();
        assert!(l14.loose_over_tight > 1.3 && l14.loose_over_tight < 4.0);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }
}
