//! CSV serialization of fields, strategies, verdicts, and trajectories.
//! Floats are written with 17 significant digits so re-runs are
//! byte-identical and round-trips are exact.

use std::io::{BufRead, Write};

use crate::grid::{Grid, ValueField};
use crate::model::{Action, State, WaitTime};
use crate::sim::Trajectory;
use crate::verify::DifEqVerdict;
use crate::{Error, Result};

/// 17-significant-digit scientific formatting; round-trips f64 exactly.
pub fn fmt_f64(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".to_string()
    } else if x == f64::NEG_INFINITY {
        "-inf".to_string()
    } else if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.16e}")
    }
}

fn fmt_wait(w: WaitTime) -> String {
    match w {
        WaitTime::Finite(t) => fmt_f64(t),
        WaitTime::Infinite => "inf".to_string(),
    }
}

fn coord_header(dim: usize) -> String {
    (1..=dim).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",")
}

/// Value-field CSV: `x1,..,xd,V,theta_star,action`, one row per masked
/// node; infinite waits written as the literal `inf`.
pub fn write_field_csv<W: Write>(
    w: &mut W,
    field: &ValueField,
    waits: &[WaitTime],
    actions: &[Action],
) -> Result<()> {
    let grid = &field.grid;
    writeln!(w, "{},V,theta_star,action", coord_header(grid.dim()))?;
    for &idx in grid.masked_indices() {
        let x = grid.node_state(idx);
        let coords =
            x.coords().iter().map(|c| fmt_f64(*c)).collect::<Vec<_>>().join(",");
        writeln!(
            w,
            "{coords},{},{},{}",
            fmt_f64(field.values[idx]),
            fmt_wait(waits[idx]),
            actions[idx].0
        )?;
    }
    Ok(())
}

/// Strategy CSV: `x1,..,xd,theta_star,action`.
pub fn write_strategy_csv<W: Write>(
    w: &mut W,
    grid: &Grid,
    waits: &[WaitTime],
    actions: &[Action],
) -> Result<()> {
    writeln!(w, "{},theta_star,action", coord_header(grid.dim()))?;
    for &idx in grid.masked_indices() {
        let x = grid.node_state(idx);
        let coords =
            x.coords().iter().map(|c| fmt_f64(*c)).collect::<Vec<_>>().join(",");
        writeln!(w, "{coords},{},{}", fmt_wait(waits[idx]), actions[idx].0)?;
    }
    Ok(())
}

/// Reads a value field back from its CSV against the grid it was written
/// on. Wait/action columns are tolerated and ignored.
pub fn read_field_csv<R: BufRead>(r: R, grid: std::sync::Arc<Grid>) -> Result<ValueField> {
    let mut values = vec![0.0; grid.len()];
    let mut seen = vec![false; grid.len()];
    let dim = grid.dim();
    let snap = 1e-9
        * grid.ranges().iter().map(|(a, b)| (b - a).abs()).fold(1.0, f64::max);
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < dim + 1 {
            return Err(Error::Invalid(format!("field csv line {}: too few columns", lineno + 1)));
        }
        let mut coords = Vec::with_capacity(dim);
        for f in &fields[..dim] {
            coords.push(f.trim().parse::<f64>().map_err(|e| {
                Error::Invalid(format!("field csv line {}: {e}", lineno + 1))
            })?);
        }
        let v = fields[dim].trim().parse::<f64>().map_err(|e| {
            Error::Invalid(format!("field csv line {}: {e}", lineno + 1))
        })?;
        let x = State::new(coords);
        let idx = grid.node_at(&x, snap).ok_or_else(|| {
            Error::Invalid(format!("field csv line {}: {x:?} is not a grid node", lineno + 1))
        })?;
        values[idx] = v;
        seen[idx] = true;
    }
    for &idx in grid.masked_indices() {
        if !seen[idx] {
            return Err(Error::Invalid(format!(
                "field csv is missing node {:?}",
                grid.node_state(idx)
            )));
        }
    }
    Ok(ValueField::new(grid, values, 0))
}

/// Verdict CSV: `x1,..,xd,case,forward_residual,impulse_gap`.
pub fn write_verdicts_csv<W: Write>(w: &mut W, dim: usize, verdicts: &[DifEqVerdict]) -> Result<()> {
    writeln!(w, "{},case,forward_residual,impulse_gap", coord_header(dim))?;
    for v in verdicts {
        let coords =
            v.location.coords().iter().map(|c| fmt_f64(*c)).collect::<Vec<_>>().join(",");
        writeln!(
            w,
            "{coords},{},{},{}",
            v.case,
            fmt_f64(v.forward_residual.unwrap_or(f64::NAN)),
            fmt_f64(v.impulse_gap)
        )?;
    }
    Ok(())
}

/// Trajectory CSV: `t,x1,..,xd,phase` with flow samples and zero-duration
/// `impulse` rows at each jump (pre and post states).
pub fn write_trajectory_csv<W: Write>(w: &mut W, dim: usize, traj: &Trajectory) -> Result<()> {
    writeln!(w, "t,{},phase", coord_header(dim))?;
    let mut write_row = |t: f64, x: &State, phase: &str| -> Result<()> {
        let coords = x.coords().iter().map(|c| fmt_f64(*c)).collect::<Vec<_>>().join(",");
        writeln!(w, "{},{coords},{phase}", fmt_f64(t))?;
        Ok(())
    };
    let mut events = traj.impulses.iter().peekable();
    for seg in &traj.segments {
        while let Some(ev) = events.peek() {
            if ev.time <= seg.start_time {
                write_row(ev.time, &ev.pre, "impulse")?;
                write_row(ev.time, &ev.post, "impulse")?;
                events.next();
            } else {
                break;
            }
        }
        for (t, x) in &seg.samples {
            write_row(*t, x, "flow")?;
        }
    }
    for ev in events {
        write_row(ev.time, &ev.pre, "impulse")?;
        write_row(ev.time, &ev.post, "impulse")?;
    }
    Ok(())
}

/// Threshold-line CSV: `x1,x2` samples.
pub fn write_line_csv<W: Write>(w: &mut W, points: &[(f64, f64)]) -> Result<()> {
    writeln!(w, "x1,x2")?;
    for (a, b) in points {
        writeln!(w, "{},{}", fmt_f64(*a), fmt_f64(*b))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StateBounds;
    use std::io::BufReader;
    use std::sync::Arc;

    #[test]
    fn fmt_round_trips_exactly() {
        for &x in &[0.0, 1.0, -3.3896484375, 1.0 / 3.0, 2.5e-17, 8.0f64.sqrt()] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
    }

    #[test]
    fn field_csv_round_trip() {
        let bounds = StateBounds::new_box(vec![(0.0, 1.0), (0.0, 1.0)])
            .with_linear_constraint(vec![1.0, 1.0], 1.0);
        let grid =
            Arc::new(Grid::new(vec![(0.0, 1.0), (0.0, 1.0)], vec![5, 5], &bounds).unwrap());
        let values: Vec<f64> =
            (0..grid.len()).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let field = ValueField::new(grid.clone(), values, 3);
        let n = grid.len();
        let waits = vec![WaitTime::Infinite; n];
        let actions = vec![Action(0); n];

        let mut buf = Vec::new();
        write_field_csv(&mut buf, &field, &waits, &actions).unwrap();
        let parsed = read_field_csv(BufReader::new(&buf[..]), grid.clone()).unwrap();
        for &idx in grid.masked_indices() {
            assert_eq!(parsed.values[idx], field.values[idx]);
        }
    }
}
