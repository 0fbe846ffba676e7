//! Rectangular grids with a domain mask, multilinear interpolation, and
//! sampled value fields.

use std::sync::Arc;

use crate::model::{State, StateBounds};
use crate::{Error, Result};

/// Node membership tolerance, relative to the axis extent.
const MASK_TOL: f64 = 1e-9;

/// A rectangular grid with a mask of nodes inside the state space.
/// Node indexing is row-major with the first axis slowest.
#[derive(Clone, Debug)]
pub struct Grid {
    ranges: Vec<(f64, f64)>,
    nodes: Vec<usize>,
    steps: Vec<f64>,
    strides: Vec<usize>,
    mask: Vec<bool>,
    masked: Vec<usize>,
}

impl Grid {
    pub fn new(ranges: Vec<(f64, f64)>, nodes: Vec<usize>, bounds: &StateBounds) -> Result<Grid> {
        if ranges.len() != nodes.len() || ranges.is_empty() {
            return Err(Error::Invalid("grid ranges and node counts must match".into()));
        }
        for (&n, &(lo, hi)) in nodes.iter().zip(&ranges) {
            if n < 2 {
                return Err(Error::Invalid("grid needs at least 2 nodes per axis".into()));
            }
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Invalid(format!("bad grid range [{lo}, {hi}]")));
            }
        }
        let steps: Vec<f64> = ranges
            .iter()
            .zip(&nodes)
            .map(|((lo, hi), &n)| (hi - lo) / (n - 1) as f64)
            .collect();
        let mut strides = vec![1usize; nodes.len()];
        for ax in (0..nodes.len().saturating_sub(1)).rev() {
            strides[ax] = strides[ax + 1] * nodes[ax + 1];
        }
        let len: usize = nodes.iter().product();
        let tol = ranges
            .iter()
            .map(|(lo, hi)| (hi - lo).abs())
            .fold(1.0f64, f64::max)
            * MASK_TOL;
        let mut grid = Grid { ranges, nodes, steps, strides, mask: vec![false; len], masked: vec![] };
        for idx in 0..len {
            let s = grid.node_state(idx);
            if bounds.contains(&s, tol) {
                grid.mask[idx] = true;
                grid.masked.push(idx);
            }
        }
        Ok(grid)
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn nodes_per_axis(&self) -> &[usize] {
        &self.nodes
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    pub fn step(&self, axis: usize) -> f64 {
        self.steps[axis]
    }

    pub fn is_masked_in(&self, idx: usize) -> bool {
        self.mask[idx]
    }

    /// Flat indices of the nodes inside the state space.
    pub fn masked_indices(&self) -> &[usize] {
        &self.masked
    }

    pub fn multi_index(&self, idx: usize) -> Vec<usize> {
        let mut rem = idx;
        self.strides
            .iter()
            .map(|&s| {
                let i = rem / s;
                rem %= s;
                i
            })
            .collect()
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn node_state(&self, idx: usize) -> State {
        let multi = self.multi_index(idx);
        State::new(
            multi
                .iter()
                .zip(self.ranges.iter().zip(&self.steps))
                .map(|(&i, ((lo, _), h))| lo + h * i as f64)
                .collect(),
        )
    }

    /// The flat index of a node coinciding with `x` within `snap_tol`.
    pub fn node_at(&self, x: &State, snap_tol: f64) -> Option<usize> {
        if x.dim() != self.dim() {
            return None;
        }
        let mut multi = Vec::with_capacity(self.dim());
        for ax in 0..self.dim() {
            let pos = (x.coord(ax) - self.ranges[ax].0) / self.steps[ax];
            let i = pos.round();
            if i < 0.0 || i as usize >= self.nodes[ax] {
                return None;
            }
            if (pos - i).abs() * self.steps[ax] > snap_tol {
                return None;
            }
            multi.push(i as usize);
        }
        Some(self.flat_index(&multi))
    }

    /// Chebyshev distance between two nodes, in cells.
    pub fn chebyshev(&self, a: usize, b: usize) -> usize {
        let ma = self.multi_index(a);
        let mb = self.multi_index(b);
        ma.iter().zip(&mb).map(|(x, y)| x.abs_diff(*y)).max().unwrap_or(0)
    }

    /// Masked-in axis neighbors (±1 per axis) of a node.
    pub fn neighbors(&self, idx: usize) -> Vec<usize> {
        let multi = self.multi_index(idx);
        let mut out = Vec::with_capacity(2 * self.dim());
        for ax in 0..self.dim() {
            if multi[ax] > 0 {
                let mut m = multi.clone();
                m[ax] -= 1;
                out.push(self.flat_index(&m));
            }
            if multi[ax] + 1 < self.nodes[ax] {
                let mut m = multi.clone();
                m[ax] += 1;
                out.push(self.flat_index(&m));
            }
        }
        out
    }

    /// Multilinear interpolation of node `values` at `x`, clamped to the
    /// box. Cells straddling the domain boundary renormalize the weights
    /// over the masked-in corners.
    pub fn interpolate(&self, values: &[f64], x: &State) -> f64 {
        let d = self.dim();
        let mut base = Vec::with_capacity(d);
        let mut frac = Vec::with_capacity(d);
        for ax in 0..d {
            let (lo, hi) = self.ranges[ax];
            let c = x.coord(ax).clamp(lo, hi);
            let pos = (c - lo) / self.steps[ax];
            let mut i = pos.floor() as isize;
            if i as usize >= self.nodes[ax] - 1 {
                i = (self.nodes[ax] - 2) as isize;
            }
            if i < 0 {
                i = 0;
            }
            base.push(i as usize);
            frac.push((pos - i as f64).clamp(0.0, 1.0));
        }
        let mut acc = 0.0;
        let mut wsum = 0.0;
        let mut best_corner = (0.0, f64::MAX);
        for bits in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0;
            let mut corner_dist = 0.0f64;
            for ax in 0..d {
                let hi_side = bits >> ax & 1 == 1;
                w *= if hi_side { frac[ax] } else { 1.0 - frac[ax] };
                let off = frac[ax] - if hi_side { 1.0 } else { 0.0 };
                corner_dist = corner_dist.max(off.abs());
                idx += (base[ax] + usize::from(hi_side)) * self.strides[ax];
            }
            if self.mask[idx] {
                acc += w * values[idx];
                wsum += w;
                if corner_dist < best_corner.1 {
                    best_corner = (values[idx], corner_dist);
                }
            }
        }
        if wsum > 1e-12 {
            acc / wsum
        } else if best_corner.1 < f64::MAX {
            best_corner.0
        } else {
            // Query in a fully masked-out cell; nothing sensible to return.
            0.0
        }
    }
}

/// A value function sampled on a grid, evaluated off-node by multilinear
/// interpolation. `version` is the sweep counter that produced it.
#[derive(Clone, Debug)]
pub struct ValueField {
    pub grid: Arc<Grid>,
    pub values: Vec<f64>,
    pub version: u32,
}

impl ValueField {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>, version: u32) -> Self {
        assert_eq!(grid.len(), values.len());
        ValueField { grid, values, version }
    }

    pub fn constant(grid: Arc<Grid>, v: f64) -> Self {
        let n = grid.len();
        ValueField { grid, values: vec![v; n], version: 0 }
    }

    pub fn eval(&self, x: &State) -> f64 {
        self.grid.interpolate(&self.values, x)
    }
}

/// Anything usable as a value function over states.
pub trait ValueFn: Sync {
    fn value(&self, x: &State) -> f64;
}

impl ValueFn for ValueField {
    fn value(&self, x: &State) -> f64 {
        self.eval(x)
    }
}

impl<F> ValueFn for F
where
    F: Fn(&State) -> f64 + Sync,
{
    fn value(&self, x: &State) -> f64 {
        self(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle_grid(n: usize) -> Grid {
        let bounds = StateBounds::new_box(vec![(0.0, 10.0), (0.0, 10.0)])
            .with_linear_constraint(vec![1.0, 1.0], 10.0);
        Grid::new(vec![(0.0, 10.0), (0.0, 10.0)], vec![n, n], &bounds).unwrap()
    }

    #[test]
    fn mask_covers_closed_triangle() {
        let g = triangle_grid(11);
        // Nodes with x1 + x2 <= 10 are in: 11 + 10 + ... + 1 = 66.
        assert_eq!(g.masked_indices().len(), 66);
        let idx = g.node_at(&State::of(&[10.0, 0.0]), 1e-9).unwrap();
        assert!(g.is_masked_in(idx));
        let idx = g.node_at(&State::of(&[10.0, 1.0]), 1e-9).unwrap();
        assert!(!g.is_masked_in(idx));
    }

    #[test]
    fn interpolation_is_exact_for_linear_functions() {
        let g = triangle_grid(11);
        let f = |x: &State| 2.0 * x.coord(0) - 0.5 * x.coord(1) + 1.0;
        let values: Vec<f64> = (0..g.len()).map(|i| f(&g.node_state(i))).collect();
        for &(a, b) in &[(0.3, 0.4), (4.9, 5.0), (2.05, 7.8), (0.0, 10.0)] {
            let x = State::of(&[a, b]);
            assert!((g.interpolate(&values, &x) - f(&x)).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_near_hypotenuse_renormalizes() {
        let g = triangle_grid(11);
        let f = |x: &State| x.coord(0);
        let values: Vec<f64> =
            (0..g.len()).map(|i| if g.is_masked_in(i) { f(&g.node_state(i)) } else { f64::NAN })
                .collect();
        // A point inside the triangle whose cell has one corner outside.
        let x = State::of(&[5.3, 4.5]);
        let v = g.interpolate(&values, &x);
        assert!(v.is_finite());
        assert!((v - 5.3).abs() < 0.5, "v = {v}");
    }

    #[test]
    fn node_roundtrip() {
        let g = triangle_grid(21);
        for &idx in g.masked_indices() {
            let s = g.node_state(idx);
            assert_eq!(g.node_at(&s, 1e-9), Some(idx));
        }
    }
}
