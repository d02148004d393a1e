//! Periodicity cell, perforations, periodic grids and oscillating coefficients.
//!
//! The cell `Y = (0,b_1) x ... x (0,b_d)` is discretized by `N` elements per
//! axis. Nodes live on the periodic lattice, so node `N` along an axis is the
//! same unknown as node `0`. A perforation `Y_0` is represented by a
//! staircase mask: an element belongs to the fluid part `Y_1` iff its center
//! lies outside the (open) hole.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoleShape {
    Box,
    Ball,
}

/// A single hole per cell. For a box `size` is the side length, for a ball
/// the radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoleSpec {
    pub shape: HoleShape,
    pub center: Vec<f64>,
    pub size: f64,
}

impl HoleSpec {
    fn half_extent(&self) -> f64 {
        match self.shape {
            HoleShape::Box => 0.5 * self.size,
            HoleShape::Ball => self.size,
        }
    }

    /// Open-set membership.
    pub fn contains(&self, y: &[f64]) -> bool {
        match self.shape {
            HoleShape::Box => y
                .iter()
                .zip(&self.center)
                .all(|(yk, ck)| (yk - ck).abs() < 0.5 * self.size),
            HoleShape::Ball => {
                let r2: f64 = y
                    .iter()
                    .zip(&self.center)
                    .map(|(yk, ck)| (yk - ck).powi(2))
                    .sum();
                r2 < self.size * self.size
            }
        }
    }

    pub fn measure(&self) -> f64 {
        let d = self.center.len() as i32;
        match (self.shape, d) {
            (HoleShape::Box, _) => self.size.powi(d),
            (HoleShape::Ball, 1) => 2.0 * self.size,
            (HoleShape::Ball, _) => PI * self.size * self.size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellGeometry {
    pub dim: usize,
    pub lengths: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hole: Option<HoleSpec>,
}

impl CellGeometry {
    pub fn unit(dim: usize) -> Self {
        CellGeometry {
            dim,
            lengths: vec![1.0; dim],
            hole: None,
        }
    }

    pub fn unit_square_with_hole(shape: HoleShape, size: f64) -> Self {
        CellGeometry {
            dim: 2,
            lengths: vec![1.0, 1.0],
            hole: Some(HoleSpec {
                shape,
                center: vec![0.5, 0.5],
                size,
            }),
        }
    }

    pub fn measure(&self) -> f64 {
        self.lengths.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.dim) {
            return Err(Error::Geometry(format!(
                "cell dimension must be 1 or 2, got {}",
                self.dim
            )));
        }
        if self.lengths.len() != self.dim {
            return Err(Error::Geometry(format!(
                "expected {} cell lengths, got {}",
                self.dim,
                self.lengths.len()
            )));
        }
        if self.lengths.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(Error::Geometry("cell lengths must be positive".into()));
        }
        if let Some(hole) = &self.hole {
            if self.dim != 2 {
                return Err(Error::Geometry(
                    "a hole requires a 2-D cell (a 1-D hole disconnects the cell)".into(),
                ));
            }
            if hole.center.len() != self.dim {
                return Err(Error::Geometry("hole center has wrong dimension".into()));
            }
            if !(hole.size > 0.0 && hole.size.is_finite()) {
                return Err(Error::Geometry("hole size must be positive".into()));
            }
            let r = hole.half_extent();
            for (c, b) in hole.center.iter().zip(&self.lengths) {
                if !(c - r > 0.0 && c + r < *b) {
                    return Err(Error::Geometry(
                        "closure of the hole must lie strictly inside the cell".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Uniform periodic grid on the cell with the fluid mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGrid {
    geometry: CellGeometry,
    resolution: usize,
    spacing: Vec<f64>,
    fluid: Vec<bool>,
    cell_measure: f64,
    fluid_measure: f64,
}

pub fn build_cell_grid(geometry: &CellGeometry, resolution: usize) -> Result<CellGrid> {
    CellGrid::new(geometry.clone(), resolution)
}

impl CellGrid {
    pub fn new(geometry: CellGeometry, resolution: usize) -> Result<Self> {
        geometry.validate()?;
        if resolution < 4 {
            return Err(Error::Resolution(format!(
                "resolution must be at least 4, got {resolution}"
            )));
        }
        let d = geometry.dim;
        let spacing: Vec<f64> = geometry
            .lengths
            .iter()
            .map(|b| b / resolution as f64)
            .collect();
        let n_el = resolution.pow(d as u32);
        let mut grid = CellGrid {
            cell_measure: geometry.measure(),
            geometry,
            resolution,
            spacing,
            fluid: vec![true; n_el],
            fluid_measure: 0.0,
        };
        if let Some(hole) = grid.geometry.hole.clone() {
            let mut masked = 0;
            for e in 0..n_el {
                if hole.contains(&grid.element_center(e)) {
                    grid.fluid[e] = false;
                    masked += 1;
                }
            }
            if masked == 0 {
                return Err(Error::Resolution(
                    "hole does not cover any element center; refine the grid".into(),
                ));
            }
            if masked == n_el {
                return Err(Error::Geometry("hole covers the whole cell".into()));
            }
        }
        let n_fluid = grid.fluid.iter().filter(|&&f| f).count();
        grid.fluid_measure = n_fluid as f64 * grid.element_volume();
        if n_fluid == n_el {
            grid.fluid_measure = grid.cell_measure;
        }
        Ok(grid)
    }

    pub fn geometry(&self) -> &CellGeometry {
        &self.geometry
    }

    pub fn dim(&self) -> usize {
        self.geometry.dim
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn element_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn num_elements(&self) -> usize {
        self.resolution.pow(self.dim() as u32)
    }

    /// Number of distinct (periodically identified) nodes.
    pub fn num_nodes(&self) -> usize {
        self.num_elements()
    }

    pub fn cell_measure(&self) -> f64 {
        self.cell_measure
    }

    pub fn fluid_measure(&self) -> f64 {
        self.fluid_measure
    }

    pub fn fluid_fraction(&self) -> f64 {
        self.fluid_measure / self.cell_measure
    }

    pub fn has_hole(&self) -> bool {
        self.geometry.hole.is_some()
    }

    pub fn is_fluid(&self, element: usize) -> bool {
        self.fluid[element]
    }

    pub fn fluid_mask(&self) -> &[bool] {
        &self.fluid
    }

    /// Multi-index of an element or node, axis 0 fastest.
    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        let n = self.resolution;
        let mut rest = flat;
        (0..self.dim())
            .map(|_| {
                let i = rest % n;
                rest /= n;
                i
            })
            .collect()
    }

    /// Flat node index of a multi-index, wrapping periodically.
    pub fn node_index(&self, idx: &[usize]) -> usize {
        let n = self.resolution;
        idx.iter().rev().fold(0, |acc, &i| acc * n + (i % n))
    }

    pub fn element_center(&self, element: usize) -> Vec<f64> {
        self.multi_index(element)
            .iter()
            .zip(&self.spacing)
            .map(|(&i, h)| (i as f64 + 0.5) * h)
            .collect()
    }

    pub fn node_coordinates(&self, node: usize) -> Vec<f64> {
        self.multi_index(node)
            .iter()
            .zip(&self.spacing)
            .map(|(&i, h)| i as f64 * h)
            .collect()
    }

    /// Nodes of an element, corner `c` having bit `m` set when the corner sits
    /// at the upper end of axis `m`.
    pub fn element_nodes(&self, element: usize) -> Vec<usize> {
        let base = self.multi_index(element);
        let d = self.dim();
        (0..1usize << d)
            .map(|c| {
                let idx: Vec<usize> = (0..d).map(|m| base[m] + ((c >> m) & 1)).collect();
                self.node_index(&idx)
            })
            .collect()
    }

    /// Stable identifier used in cache keys.
    pub fn id(&self) -> String {
        let hole = match &self.geometry.hole {
            None => "none".to_string(),
            Some(h) => format!("{:?}:{:?}:{}", h.shape, h.center, h.size),
        };
        format!("{:?}/{}/{}", self.geometry.lengths, self.resolution, hole)
    }
}

/// User-supplied closed form `P_k(y)`; `k` is the axis.
#[derive(Clone)]
pub struct CoefficientFn(pub Arc<dyn Fn(usize, &[f64]) -> f64 + Send + Sync>);

impl fmt::Debug for CoefficientFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CoefficientFn(..)")
    }
}

/// Description of the diagonal coefficient `P(y) = diag(P_1, ..., P_d)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientSpec {
    /// `P_k` constant, one value per axis.
    Constant { values: Vec<f64> },
    /// Piecewise constant in slabs normal to `axis`. `breaks` are increasing
    /// fractions of the cell length in (0,1); `values[p][k]` is `P_k` in
    /// phase `p`, so there are `breaks.len() + 1` phases.
    Layered {
        axis: usize,
        breaks: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
    /// `P_k(y) = mean_k + amplitude_k * sin(2 pi y_axis / b_axis)`.
    Sinusoid {
        axis: usize,
        mean: Vec<f64>,
        amplitude: Vec<f64>,
    },
    #[serde(skip)]
    Function(CoefficientFn),
}

impl CoefficientSpec {
    pub fn constant(values: &[f64]) -> Self {
        CoefficientSpec::Constant {
            values: values.to_vec(),
        }
    }

    /// Two equal-volume phases along axis 0 with isotropic values `lo`, `hi`.
    pub fn two_phase(dim: usize, lo: f64, hi: f64) -> Self {
        CoefficientSpec::Layered {
            axis: 0,
            breaks: vec![0.5],
            values: vec![vec![lo; dim], vec![hi; dim]],
        }
    }

    pub fn function(f: impl Fn(usize, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        CoefficientSpec::Function(CoefficientFn(Arc::new(f)))
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Coefficient(m.to_string()));
        match self {
            CoefficientSpec::Constant { values } => {
                if values.len() != dim {
                    return bad("constant coefficient needs one value per axis");
                }
            }
            CoefficientSpec::Layered {
                axis,
                breaks,
                values,
            } => {
                if *axis >= dim {
                    return bad("layer axis out of range");
                }
                if values.len() != breaks.len() + 1 || values.iter().any(|v| v.len() != dim) {
                    return bad(
                        "layered coefficient needs breaks.len()+1 phases of one value per axis",
                    );
                }
                let mut prev = 0.0;
                for &b in breaks {
                    if !(b > prev && b < 1.0) {
                        return bad("layer breaks must increase strictly within (0,1)");
                    }
                    prev = b;
                }
            }
            CoefficientSpec::Sinusoid {
                axis,
                mean,
                amplitude,
            } => {
                if *axis >= dim || mean.len() != dim || amplitude.len() != dim {
                    return bad("sinusoid needs a valid axis and one mean/amplitude per axis");
                }
            }
            CoefficientSpec::Function(_) => {}
        }
        Ok(())
    }

    /// `P_axis(y)` for `y` in cell coordinates; `y` is wrapped periodically.
    pub fn eval(&self, axis: usize, y: &[f64], lengths: &[f64]) -> f64 {
        match self {
            CoefficientSpec::Constant { values } => values[axis],
            CoefficientSpec::Layered {
                axis: layer_axis,
                breaks,
                values,
            } => {
                let b = lengths[*layer_axis];
                let t = (y[*layer_axis] / b).rem_euclid(1.0);
                let phase = breaks.iter().take_while(|&&br| br <= t).count();
                values[phase][axis]
            }
            CoefficientSpec::Sinusoid {
                axis: s_axis,
                mean,
                amplitude,
            } => {
                let b = lengths[*s_axis];
                mean[axis] + amplitude[axis] * (2.0 * PI * y[*s_axis] / b).sin()
            }
            CoefficientSpec::Function(f) => (f.0)(axis, y),
        }
    }
}

/// `P` sampled at element centers, `values[k][e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicCoefficient {
    values: Vec<Vec<f64>>,
    lower_bound: f64,
}

pub fn sample_coefficient(spec: &CoefficientSpec, grid: &CellGrid) -> Result<PeriodicCoefficient> {
    spec.validate(grid.dim())?;
    let lengths = &grid.geometry().lengths;
    let centers: Vec<Vec<f64>> = (0..grid.num_elements())
        .map(|e| grid.element_center(e))
        .collect();
    let values: Vec<Vec<f64>> = (0..grid.dim())
        .map(|k| centers.iter().map(|y| spec.eval(k, y, lengths)).collect())
        .collect();
    PeriodicCoefficient::from_values(values)
}

impl PeriodicCoefficient {
    pub fn from_values(values: Vec<Vec<f64>>) -> Result<Self> {
        let mut lower_bound = f64::INFINITY;
        for (k, axis) in values.iter().enumerate() {
            for (e, &v) in axis.iter().enumerate() {
                if !v.is_finite() || v <= 0.0 {
                    return Err(Error::Coefficient(format!(
                        "P_{} = {v} at element {e}; coefficients must be finite and positive",
                        k + 1
                    )));
                }
                lower_bound = lower_bound.min(v);
            }
        }
        Ok(PeriodicCoefficient {
            values,
            lower_bound,
        })
    }

    /// Constant `P` on a grid.
    pub fn uniform(grid: &CellGrid, per_axis: &[f64]) -> Result<Self> {
        Self::from_values(
            per_axis
                .iter()
                .map(|&p| vec![p; grid.num_elements()])
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn lower_bound(&self) -> f64 {
        self.lower_bound
    }

    pub fn axis(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    pub fn value(&self, k: usize, element: usize) -> f64 {
        self.values[k][element]
    }

    /// `Some(p)` when every axis is constant over the grid.
    pub fn constant_values(&self) -> Option<Vec<f64>> {
        self.values
            .iter()
            .map(|v| {
                let first = v[0];
                v.iter().all(|&x| x == first).then_some(first)
            })
            .collect()
    }

    pub fn arithmetic_mean(&self, k: usize) -> f64 {
        let v = &self.values[k];
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn harmonic_mean(&self, k: usize) -> f64 {
        let v = &self.values[k];
        v.len() as f64 / v.iter().map(|x| 1.0 / x).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_square_without_hole() {
        let g = build_cell_grid(&CellGeometry::unit(2), 8).unwrap();
        assert_eq!(g.num_elements(), 64);
        assert_eq!(g.fluid_fraction(), 1.0);
    }

    #[test]
    fn aligned_box_hole_fraction_is_exact() {
        // Element centers (i + 1/2)/8 fall inside (1/4, 3/4) for i = 2..=5:
        // 4 x 4 = 16 of 64 elements masked.
        let geo = CellGeometry::unit_square_with_hole(HoleShape::Box, 0.5);
        let g = build_cell_grid(&geo, 8).unwrap();
        assert_eq!(g.fluid_mask().iter().filter(|f| !**f).count(), 16);
        assert_eq!(g.fluid_fraction(), 0.75);
        for n in [16, 32, 64] {
            assert_eq!(build_cell_grid(&geo, n).unwrap().fluid_fraction(), 0.75);
        }
    }

    #[test]
    fn ball_hole_leaving_cell_is_rejected() {
        let geo = CellGeometry::unit_square_with_hole(HoleShape::Ball, 0.6);
        assert!(matches!(build_cell_grid(&geo, 8), Err(Error::Geometry(_))));
    }

    #[test]
    fn touching_hole_is_rejected() {
        let geo = CellGeometry::unit_square_with_hole(HoleShape::Box, 1.0);
        assert!(matches!(geo.validate(), Err(Error::Geometry(_))));
    }

    #[test]
    fn hole_in_1d_is_rejected() {
        let geo = CellGeometry {
            dim: 1,
            lengths: vec![1.0],
            hole: Some(HoleSpec {
                shape: HoleShape::Box,
                center: vec![0.5],
                size: 0.2,
            }),
        };
        assert!(matches!(geo.validate(), Err(Error::Geometry(_))));
    }

    #[test]
    fn unresolved_hole_and_small_resolution() {
        let geo = CellGeometry::unit_square_with_hole(HoleShape::Box, 0.05);
        assert!(matches!(
            build_cell_grid(&geo, 8),
            Err(Error::Resolution(_))
        ));
        assert!(matches!(
            build_cell_grid(&CellGeometry::unit(1), 3),
            Err(Error::Resolution(_))
        ));
    }

    #[test]
    fn ball_fluid_measure_converges_first_order() {
        let r = 0.3;
        let geo = CellGeometry::unit_square_with_hole(HoleShape::Ball, r);
        let exact = 1.0 - PI * r * r;
        let mut prev = f64::INFINITY;
        for n in [16, 64, 256] {
            let err = (build_cell_grid(&geo, n).unwrap().fluid_measure() - exact).abs();
            assert!(err < 2.0 / n as f64, "N={n} err={err}");
            assert!(err < prev);
            prev = err;
        }
    }

    #[test]
    fn periodic_node_identification() {
        let g = build_cell_grid(&CellGeometry::unit(2), 4).unwrap();
        assert_eq!(g.node_index(&[4, 1]), g.node_index(&[0, 1]));
        assert_eq!(g.node_index(&[2, 4]), g.node_index(&[2, 0]));
        // The last element wraps to node 0.
        assert!(g.element_nodes(15).contains(&0));
    }

    #[test]
    fn constant_sampling() {
        let g = build_cell_grid(&CellGeometry::unit(2), 5).unwrap();
        let p = sample_coefficient(&CoefficientSpec::constant(&[2.0, 3.0]), &g).unwrap();
        assert!(p.axis(0).iter().all(|&v| v == 2.0));
        assert!(p.axis(1).iter().all(|&v| v == 3.0));
        assert_eq!(p.lower_bound(), 2.0);
    }

    #[test]
    fn two_phase_sampling() {
        let g = build_cell_grid(&CellGeometry::unit(1), 64).unwrap();
        let p = sample_coefficient(&CoefficientSpec::two_phase(1, 1.0, 4.0), &g).unwrap();
        assert_eq!(p.axis(0).iter().filter(|&&v| v == 1.0).count(), 32);
        assert_eq!(p.axis(0).iter().filter(|&&v| v == 4.0).count(), 32);
        assert_eq!(p.lower_bound(), 1.0);
    }

    #[test]
    fn sinusoid_sampled_at_centers() {
        let g = build_cell_grid(&CellGeometry::unit(1), 4).unwrap();
        let spec = CoefficientSpec::Sinusoid {
            axis: 0,
            mean: vec![2.0],
            amplitude: vec![1.0],
        };
        let p = sample_coefficient(&spec, &g).unwrap();
        for (i, &v) in p.axis(0).iter().enumerate() {
            let expected = 2.0 + ((2 * i + 1) as f64 * PI / 4.0).sin();
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn nonpositive_sample_is_rejected() {
        let g = build_cell_grid(&CellGeometry::unit(1), 8).unwrap();
        let spec = CoefficientSpec::Sinusoid {
            axis: 0,
            mean: vec![0.5],
            amplitude: vec![1.0],
        };
        assert!(matches!(
            sample_coefficient(&spec, &g),
            Err(Error::Coefficient(_))
        ));
    }

    #[test]
    fn spec_roundtrips_through_json() {
        let spec = CoefficientSpec::two_phase(1, 1.0, 4.0);
        let s = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            s,
            r#"{"kind":"layered","axis":0,"breaks":[0.5],"values":[[1.0],[4.0]]}"#
        );
        let back: CoefficientSpec = serde_json::from_str(&s).unwrap();
        assert!(matches!(back, CoefficientSpec::Layered { .. }));
    }
}
