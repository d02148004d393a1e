//! Implicit Euler in entropy variables with cell-centered two-point fluxes on
//! 1-D and 2-D tensor grids, for the oscillating (micro) and homogenized
//! (macro) systems.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::effective::{dhom, effective_tensor_local, EffectiveTensor, TensorCache, TensorKind};
use crate::error::{Error, Result};
use crate::geometry::{CellGrid, CoefficientSpec, PeriodicCoefficient};
use crate::linalg::BandMatrix;
use crate::models::{DegeneracyKind, DiffusionModel, PRODUCTION_CLAMP};

/// Uniform cell-centered grid on `(0, L_1) x ... x (0, L_d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainGrid {
    pub lengths: Vec<f64>,
    pub cells: Vec<usize>,
}

impl DomainGrid {
    pub fn new(lengths: Vec<f64>, cells: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() || lengths.len() > 2 || lengths.len() != cells.len() {
            return Err(Error::Config(
                "domain must be 1-D or 2-D with one cell count per axis".into(),
            ));
        }
        if lengths.iter().any(|l| !(*l > 0.0 && l.is_finite())) || cells.contains(&0) {
            return Err(Error::Config(
                "domain lengths and cell counts must be positive".into(),
            ));
        }
        Ok(DomainGrid { lengths, cells })
    }

    pub fn interval(length: f64, cells: usize) -> Result<Self> {
        Self::new(vec![length], vec![cells])
    }

    pub fn dim(&self) -> usize {
        self.lengths.len()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.cells[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|m| self.spacing(m)).product()
    }

    fn stride(&self, axis: usize) -> usize {
        self.cells[..axis].iter().product()
    }

    pub fn multi_index(&self, cell: usize) -> Vec<usize> {
        let mut rest = cell;
        self.cells
            .iter()
            .map(|&n| {
                let i = rest % n;
                rest /= n;
                i
            })
            .collect()
    }

    pub fn center(&self, cell: usize) -> Vec<f64> {
        self.multi_index(cell)
            .iter()
            .enumerate()
            .map(|(m, &i)| (i as f64 + 0.5) * self.spacing(m))
            .collect()
    }

    /// Interior faces as `(lower cell, upper cell, axis)`.
    pub fn faces(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for m in 0..self.dim() {
            let stride = self.stride(m);
            for c in 0..self.num_cells() {
                if self.multi_index(c)[m] + 1 < self.cells[m] {
                    out.push((c, c + stride, m));
                }
            }
        }
        out
    }

    /// Distance-2 coloring of the five-point stencil.
    fn color(&self, cell: usize) -> usize {
        let idx = self.multi_index(cell);
        match self.dim() {
            1 => idx[0] % 3,
            _ => (idx[0] + 2 * idx[1]) % 5,
        }
    }

    fn num_colors(&self) -> usize {
        if self.dim() == 1 {
            3
        } else {
            5
        }
    }

    fn neighbors(&self, cell: usize) -> Vec<usize> {
        let idx = self.multi_index(cell);
        let mut out = Vec::with_capacity(4);
        for m in 0..self.dim() {
            let s = self.stride(m);
            if idx[m] > 0 {
                out.push(cell - s);
            }
            if idx[m] + 1 < self.cells[m] {
                out.push(cell + s);
            }
        }
        out
    }
}

/// Cell values `u_i` (cell-major: `values[c * n + i]`) at time `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateField {
    pub grid: DomainGrid,
    pub n: usize,
    pub values: Vec<f64>,
    pub time: f64,
    /// Per-species mass when the field was created.
    pub initial_mass: Vec<f64>,
}

const REGION_TOL: f64 = 1e-12;

impl StateField {
    pub fn new(
        grid: DomainGrid,
        model: &DiffusionModel,
        values: Vec<f64>,
        time: f64,
    ) -> Result<Self> {
        let n = model.n;
        if values.len() != grid.num_cells() * n {
            return Err(Error::Input(format!(
                "expected {} values, got {}",
                grid.num_cells() * n,
                values.len()
            )));
        }
        for (c, u) in values.chunks(n).enumerate() {
            if !model.in_closure(u, REGION_TOL) {
                return Err(Error::Input(format!(
                    "cell {c} holds {u:?}, outside the admissible region"
                )));
            }
        }
        let mut s = StateField {
            grid,
            n,
            values,
            time,
            initial_mass: Vec::new(),
        };
        s.initial_mass = s.mass();
        Ok(s)
    }

    /// Sample `f(x)` at cell centers.
    pub fn from_fn(
        grid: DomainGrid,
        model: &DiffusionModel,
        f: impl Fn(&[f64]) -> Vec<f64>,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.num_cells() * model.n);
        for c in 0..grid.num_cells() {
            let u = f(&grid.center(c));
            if u.len() != model.n {
                return Err(Error::Input("initial profile has the wrong arity".into()));
            }
            values.extend(u);
        }
        Self::new(grid, model, values, 0.0)
    }

    pub fn cell(&self, c: usize) -> &[f64] {
        &self.values[c * self.n..(c + 1) * self.n]
    }

    pub fn mass(&self) -> Vec<f64> {
        let vol = self.grid.cell_volume();
        let mut m = vec![0.0; self.n];
        for u in self.values.chunks(self.n) {
            for (mi, ui) in m.iter_mut().zip(u) {
                *mi += ui * vol;
            }
        }
        m
    }

    /// `max_i |m_i - m_i(0)| / |m_i(0)|` (absolute when the initial mass is zero).
    pub fn mass_drift(&self) -> f64 {
        self.mass()
            .iter()
            .zip(&self.initial_mass)
            .map(|(m, m0)| (m - m0).abs() / if *m0 != 0.0 { m0.abs() } else { 1.0 })
            .fold(0.0, f64::max)
    }

    /// `H(u) = sum_cells h(u) |cell|`.
    pub fn entropy(&self, model: &DiffusionModel) -> f64 {
        let vol = self.grid.cell_volume();
        self.values
            .chunks(self.n)
            .map(|u| model.entropy(u) * vol)
            .sum()
    }

    pub fn in_closure(&self, model: &DiffusionModel) -> bool {
        self.values
            .chunks(self.n)
            .all(|u| model.in_closure(u, REGION_TOL))
    }

    pub fn in_region(&self, model: &DiffusionModel) -> bool {
        self.values.chunks(self.n).all(|u| model.in_region(u))
    }

    /// Conservative average onto a coarser grid whose cells are unions of
    /// whole cells of this grid.
    pub fn restrict_to(&self, coarse: &DomainGrid) -> Result<Vec<f64>> {
        if coarse.dim() != self.grid.dim()
            || coarse
                .lengths
                .iter()
                .zip(&self.grid.lengths)
                .any(|(a, b)| (a - b).abs() > 1e-12 * b.abs())
            || coarse
                .cells
                .iter()
                .zip(&self.grid.cells)
                .any(|(c, f)| f % c != 0)
        {
            return Err(Error::Input(
                "coarse grid must cover the same domain with an integer refinement ratio".into(),
            ));
        }
        let n = self.n;
        let ratio: Vec<usize> = coarse
            .cells
            .iter()
            .zip(&self.grid.cells)
            .map(|(c, f)| f / c)
            .collect();
        let per: f64 = ratio.iter().product::<usize>() as f64;
        let mut out = vec![0.0; coarse.num_cells() * n];
        for c in 0..self.grid.num_cells() {
            let idx = self.grid.multi_index(c);
            let coarse_idx = idx
                .iter()
                .zip(&ratio)
                .enumerate()
                .rev()
                .fold(0, |acc, (m, (i, r))| acc * coarse.cells[m] + i / r);
            for i in 0..n {
                out[coarse_idx * n + i] += self.values[c * n + i] / per;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    /// Target `|R|_inf / scale`.
    pub rel_tol: f64,
    /// Residual accepted when the line search stagnates.
    pub accept_tol: f64,
    pub max_iter: usize,
    pub max_backtracks: usize,
    /// Relative clamp moving boundary states inside before taking `h'` for
    /// the initial iterate.
    pub start_clamp: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            rel_tol: 1e-12,
            accept_tol: 1e-10,
            max_iter: 50,
            max_backtracks: 30,
            start_clamp: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepperConfig {
    pub dt: f64,
    pub newton: NewtonOptions,
    pub max_halvings: usize,
    /// Factor on the storage and reaction terms, `theta d_t u = div(..) +
    /// theta f`. Set to the fluid fraction for the perforated macroscopic
    /// system with porosity scaling; `1` otherwise.
    pub porosity: f64,
}

impl StepperConfig {
    pub fn new(dt: f64) -> Self {
        StepperConfig {
            dt,
            newton: NewtonOptions::default(),
            max_halvings: 5,
            porosity: 1.0,
        }
    }
}

/// How the flux coefficient of a face is formed.
#[derive(Debug, Clone)]
enum FaceLaw {
    /// `weight * A(u_face)`.
    ScaledMobility,
    /// `weight * M_face`, with `M_face` frozen during a step.
    Frozen,
}

#[derive(Debug, Clone, Copy)]
struct Face {
    left: usize,
    right: usize,
    axis: usize,
    weight: f64,
}

/// Tensor source for the homogenized system.
#[derive(Debug, Clone)]
pub enum MacroTensor {
    /// Flux `D_hom[m][m] A(u) d_m u`; exact for the nonlocal kind and for the
    /// local kind whenever `B(u) = A(u) (x) D_hom`.
    Separable(EffectiveTensor),
    /// `B(u)` looked up per cell at the previous time level.
    Lagged(Arc<TensorCache>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MacroRoute {
    /// Separable when the probe tensor factorizes, lagged otherwise.
    #[default]
    Auto,
    Separable,
    Lagged,
}

/// Tolerance on `|B - A (x) D_hom|` (relative to `|B|`) for the automatic
/// route to pick the separable flux.
pub const SEPARABLE_TOL: f64 = 1e-8;

/// Build the macroscopic tensor source for `P` on a cell grid.
pub fn build_macro_tensor(
    model: &DiffusionModel,
    p: &PeriodicCoefficient,
    cell_grid: &CellGrid,
    route: MacroRoute,
    delta: f64,
    quantization: f64,
) -> Result<MacroTensor> {
    let d_hom = dhom(p, cell_grid)?;
    if model.kind() == DegeneracyKind::NonlocalDegenerate {
        if route == MacroRoute::Lagged {
            return Err(Error::Config(
                "the lagged tensor route applies to local-degeneracy models only".into(),
            ));
        }
        return Ok(MacroTensor::Separable(d_hom));
    }
    let lagged = || -> Result<MacroTensor> {
        Ok(MacroTensor::Lagged(Arc::new(TensorCache::new(
            model,
            p,
            cell_grid,
            delta,
            quantization,
        )?)))
    };
    match route {
        MacroRoute::Separable => Ok(MacroTensor::Separable(d_hom)),
        MacroRoute::Lagged => lagged(),
        MacroRoute::Auto => {
            let probe = vec![1.0 / (model.n as f64 + 1.0); model.n];
            let b = effective_tensor_local(model, &probe, p, cell_grid, delta)?;
            let scale = b
                .values
                .iter()
                .fold(0.0f64, |m, x| m.max(x.abs()))
                .max(1e-300);
            if b.separable_defect(model, &d_hom) <= SEPARABLE_TOL * scale {
                Ok(MacroTensor::Separable(d_hom))
            } else {
                lagged()
            }
        }
    }
}

/// Implicit Euler stepper for one spatial operator.
#[derive(Debug, Clone)]
pub struct Stepper {
    model: DiffusionModel,
    grid: DomainGrid,
    faces: Vec<Face>,
    law: FaceLaw,
    cache: Option<Arc<TensorCache>>,
    pub config: StepperConfig,
}

/// Result of one (possibly subdivided) step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: StateField,
    pub newton_iters: usize,
    /// Smallest substep actually taken.
    pub dt_used: f64,
}

fn transmissibility(grid: &DomainGrid, axis: usize) -> f64 {
    let h = grid.spacing(axis);
    grid.cell_volume() / (h * h)
}

fn check_config(config: &StepperConfig) -> Result<()> {
    if !(config.dt > 0.0 && config.dt.is_finite()) {
        return Err(Error::Config(format!(
            "dt must be positive, got {}",
            config.dt
        )));
    }
    if !(config.porosity > 0.0 && config.porosity <= 1.0) {
        return Err(Error::Config(format!(
            "porosity must lie in (0, 1], got {}",
            config.porosity
        )));
    }
    Ok(())
}

impl Stepper {
    /// Homogenized system.
    pub fn macroscopic(
        model: &DiffusionModel,
        grid: &DomainGrid,
        tensor: &MacroTensor,
        config: StepperConfig,
    ) -> Result<Self> {
        check_config(&config)?;
        let d = grid.dim();
        let (law, cache, diag) = match tensor {
            MacroTensor::Separable(t) => {
                if t.kind != TensorKind::TwoIndex || t.d != d {
                    return Err(Error::Config(format!(
                        "D_hom must be a {d}x{d} two-index tensor"
                    )));
                }
                let scale = t.values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                for k in 0..d {
                    for l in 0..d {
                        if k != l && t.dhom(k, l).abs() > 1e-8 * scale {
                            return Err(Error::Config(
                                "two-point fluxes cannot represent off-diagonal effective coefficients"
                                    .into(),
                            ));
                        }
                    }
                }
                (
                    FaceLaw::ScaledMobility,
                    None,
                    (0..d).map(|m| t.dhom(m, m)).collect(),
                )
            }
            MacroTensor::Lagged(cache) => {
                if cache.model().id() != model.id() {
                    return Err(Error::Config(
                        "tensor cache was built for another model".into(),
                    ));
                }
                (FaceLaw::Frozen, Some(Arc::clone(cache)), vec![1.0; d])
            }
        };
        let faces = grid
            .faces()
            .into_iter()
            .map(|(left, right, axis)| Face {
                left,
                right,
                axis,
                weight: transmissibility(grid, axis) * diag[axis],
            })
            .collect();
        Ok(Stepper {
            model: model.clone(),
            grid: grid.clone(),
            faces,
            law,
            cache,
            config,
        })
    }

    /// Oscillating system with `P(x / eps)`; the cell of periodicity has side
    /// lengths `cell_lengths`.
    pub fn microscopic(
        model: &DiffusionModel,
        grid: &DomainGrid,
        p: &CoefficientSpec,
        cell_lengths: &[f64],
        eps: f64,
        config: StepperConfig,
    ) -> Result<Self> {
        check_config(&config)?;
        let d = grid.dim();
        p.validate(d)?;
        if cell_lengths.len() != d {
            return Err(Error::Config("cell and domain dimensions differ".into()));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {eps}")));
        }
        for m in 0..d {
            let per_period = eps * cell_lengths[m] / grid.spacing(m);
            if per_period < 8.0 - 1e-9 {
                return Err(Error::Config(format!(
                    "grid resolves eps = {eps} with {per_period:.2} cells per period along axis {}; at least 8 are required",
                    m + 1
                )));
            }
        }
        let coeff = |axis: usize, cell: usize| -> f64 {
            let y: Vec<f64> = grid.center(cell).iter().map(|x| x / eps).collect();
            p.eval(axis, &y, cell_lengths)
        };
        let mut faces = Vec::new();
        for (left, right, axis) in grid.faces() {
            let (a, b) = (coeff(axis, left), coeff(axis, right));
            if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                return Err(Error::Coefficient(format!(
                    "P_{} must be finite and positive, got {a} and {b}",
                    axis + 1
                )));
            }
            faces.push(Face {
                left,
                right,
                axis,
                weight: transmissibility(grid, axis) * 2.0 * a * b / (a + b),
            });
        }
        Ok(Stepper {
            model: model.clone(),
            grid: grid.clone(),
            faces,
            law: FaceLaw::ScaledMobility,
            cache: None,
            config,
        })
    }

    pub fn model(&self) -> &DiffusionModel {
        &self.model
    }

    pub fn grid(&self) -> &DomainGrid {
        &self.grid
    }

    pub fn cache(&self) -> Option<&Arc<TensorCache>> {
        self.cache.as_ref()
    }

    /// Per-face `n x n` matrices from per-cell tensors at `state`.
    fn frozen_matrices(&self, state: &StateField) -> Result<Vec<Vec<f64>>> {
        let Some(cache) = &self.cache else {
            return Ok(Vec::new());
        };
        let n = self.model.n;
        let tensors: Vec<Arc<EffectiveTensor>> = (0..self.grid.num_cells())
            .into_par_iter()
            .map(|c| cache.lookup(state.cell(c)))
            .collect::<Result<_>>()?;
        let d = self.grid.dim();
        for t in tensors.iter() {
            let scale = t.values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for i in 0..n {
                for l in 0..n {
                    for m in 0..d {
                        for k in 0..d {
                            if m != k && t.b(i, l, m, k).abs() > 1e-6 * scale {
                                return Err(Error::Config(
                                    "two-point fluxes cannot represent off-diagonal effective coefficients"
                                        .into(),
                                ));
                            }
                        }
                    }
                }
            }
        }
        Ok(self
            .faces
            .iter()
            .map(|f| {
                let (a, b) = (&tensors[f.left], &tensors[f.right]);
                let mut m = vec![0.0; n * n];
                for i in 0..n {
                    for l in 0..n {
                        m[i * n + l] =
                            0.5 * (a.b(i, l, f.axis, f.axis) + b.b(i, l, f.axis, f.axis));
                    }
                }
                m
            })
            .collect())
    }

    /// Face coefficient matrix into `out` (row-major `n x n`), without the
    /// face weight.
    fn face_matrix(&self, face: usize, uf: &[f64], frozen: &[Vec<f64>], out: &mut [f64]) {
        match self.law {
            FaceLaw::ScaledMobility => self.model.fill_diffusion_matrix(uf, out),
            FaceLaw::Frozen => out.copy_from_slice(&frozen[face]),
        }
    }

    /// `R_K = theta |K| (u_K - u_K^old) / dt + sum_faces F_{K->L} - theta |K| f(u_K)`.
    fn residual(&self, u: &[f64], old: &[f64], dt: f64, frozen: &[Vec<f64>], r: &mut [f64]) {
        let n = self.model.n;
        let vol = self.config.porosity * self.grid.cell_volume();
        for c in 0..self.grid.num_cells() {
            let uc = &u[c * n..(c + 1) * n];
            let f = self.model.reaction(uc);
            for i in 0..n {
                r[c * n + i] = vol * (uc[i] - old[c * n + i]) / dt - vol * f[i];
            }
        }
        let mut uf = vec![0.0; n];
        let mut mat = vec![0.0; n * n];
        for (idx, face) in self.faces.iter().enumerate() {
            let (ul, ur) = (
                &u[face.left * n..(face.left + 1) * n],
                &u[face.right * n..(face.right + 1) * n],
            );
            for i in 0..n {
                uf[i] = 0.5 * (ul[i] + ur[i]);
            }
            self.face_matrix(idx, &uf, frozen, &mut mat);
            for i in 0..n {
                // Flux from left to right.
                let mut flux = 0.0;
                for l in 0..n {
                    flux -= mat[i * n + l] * (ur[l] - ul[l]);
                }
                flux *= face.weight;
                r[face.left * n + i] += flux;
                r[face.right * n + i] -= flux;
            }
        }
    }

    fn states_from_entropy_variables(&self, w: &[f64]) -> Result<Vec<f64>> {
        let n = self.model.n;
        let mut u = Vec::with_capacity(w.len());
        for chunk in w.chunks(n) {
            u.extend(self.model.entropy_gradient_inverse(chunk)?);
        }
        Ok(u)
    }

    fn jacobian(
        &self,
        w: &[f64],
        r0: &[f64],
        old: &[f64],
        dt: f64,
        frozen: &[Vec<f64>],
    ) -> Result<BandMatrix> {
        let n = self.model.n;
        let cells = self.grid.num_cells();
        let unknowns = cells * n;
        let half = if self.grid.dim() == 1 {
            2 * n - 1
        } else {
            n * self.grid.cells[0] + n - 1
        };
        let mut jac = BandMatrix::zeros(unknowns, half, half);
        let colors = self.grid.num_colors();
        let color_of: Vec<usize> = (0..cells).map(|c| self.grid.color(c)).collect();
        let neighbors: Vec<Vec<usize>> = (0..cells).map(|c| self.grid.neighbors(c)).collect();
        let columns: Vec<(usize, usize)> = (0..colors)
            .flat_map(|k| (0..n).map(move |i| (k, i)))
            .collect();
        let evaluated: Vec<Result<(Vec<f64>, Vec<f64>)>> = columns
            .par_iter()
            .map(|&(color, i)| {
                let mut wp = w.to_vec();
                let mut steps = vec![0.0; cells];
                for c in 0..cells {
                    if color_of[c] == color {
                        let h = f64::EPSILON.sqrt() * w[c * n + i].abs().max(1.0);
                        wp[c * n + i] += h;
                        steps[c] = wp[c * n + i] - w[c * n + i];
                    }
                }
                let up = self.states_from_entropy_variables(&wp)?;
                let mut rp = vec![0.0; unknowns];
                self.residual(&up, old, dt, frozen, &mut rp);
                Ok((rp, steps))
            })
            .collect();
        for (&(color, i), res) in columns.iter().zip(evaluated) {
            let (rp, steps) = res?;
            for k in 0..cells {
                let source = std::iter::once(k)
                    .chain(neighbors[k].iter().copied())
                    .find(|&c| color_of[c] == color);
                if let Some(c) = source {
                    for row in 0..n {
                        let v = (rp[k * n + row] - r0[k * n + row]) / steps[c];
                        jac.add(k * n + row, c * n + i, v);
                    }
                }
            }
        }
        Ok(jac)
    }

    /// One implicit step of size `dt` without subdivision.
    fn newton_step(
        &self,
        state: &StateField,
        dt: f64,
        frozen: &[Vec<f64>],
    ) -> Result<(Vec<f64>, usize)> {
        let n = self.model.n;
        let opts = &self.config.newton;
        let old = &state.values;
        let vol = self.config.porosity * self.grid.cell_volume();
        let scale = old.iter().fold(0.0f64, |m, x| m.max(x.abs())) * vol / dt;
        let scale = if scale > 0.0 { scale } else { vol / dt };
        let mut w = Vec::with_capacity(old.len());
        for u in old.chunks(n) {
            let start = if self.model.in_region(u) {
                u.to_vec()
            } else {
                self.model.interior_clamp(u, opts.start_clamp)
            };
            w.extend(self.model.entropy_gradient(&start));
        }
        let mut u = self.states_from_entropy_variables(&w)?;
        let mut r = vec![0.0; old.len()];
        self.residual(&u, old, dt, frozen, &mut r);
        let norm = |r: &[f64]| r.iter().fold(0.0f64, |m, x| m.max(x.abs())) / scale;
        let mut rn = norm(&r);
        let fail = |msg: String| Error::Step {
            time: state.time,
            message: msg,
        };
        for iter in 0..opts.max_iter {
            if rn <= opts.rel_tol {
                return Ok((u, iter));
            }
            let jac = self.jacobian(&w, &r, old, dt, frozen)?;
            let lu = jac
                .factor()
                .map_err(|e| fail(format!("singular Newton matrix: {e}")))?;
            let mut dx: Vec<f64> = r.iter().map(|x| -x).collect();
            lu.solve_in_place(&mut dx);
            let mut lambda = 1.0;
            let mut accepted = false;
            let mut rt = vec![0.0; r.len()];
            for _ in 0..=opts.max_backtracks {
                let wt: Vec<f64> = w.iter().zip(&dx).map(|(a, b)| a + lambda * b).collect();
                if let Ok(ut) = self.states_from_entropy_variables(&wt) {
                    self.residual(&ut, old, dt, frozen, &mut rt);
                    let rtn = norm(&rt);
                    if rtn.is_finite() && rtn < rn {
                        w = wt;
                        u = ut;
                        std::mem::swap(&mut r, &mut rt);
                        rn = rtn;
                        accepted = true;
                        break;
                    }
                }
                lambda *= 0.5;
            }
            if !accepted {
                if rn <= opts.accept_tol {
                    return Ok((u, iter + 1));
                }
                return Err(fail(format!(
                    "Newton stagnated at relative residual {rn:.3e}"
                )));
            }
        }
        if rn <= opts.accept_tol {
            return Ok((u, opts.max_iter));
        }
        Err(fail(format!(
            "Newton did not converge in {} iterations (relative residual {rn:.3e})",
            opts.max_iter
        )))
    }

    fn step_recursive(
        &self,
        state: &StateField,
        dt: f64,
        depth: usize,
        frozen: &[Vec<f64>],
    ) -> Result<StepOutcome> {
        match self.newton_step(state, dt, frozen) {
            Ok((u, iters)) => {
                let mut next = state.clone();
                next.values = u;
                next.time = state.time + dt;
                Ok(StepOutcome {
                    state: next,
                    newton_iters: iters,
                    dt_used: dt,
                })
            }
            Err(e @ Error::Step { .. }) | Err(e @ Error::Input(_)) => {
                if depth >= self.config.max_halvings {
                    return Err(match e {
                        Error::Step { message, .. } => Error::Step {
                            time: state.time,
                            message: format!("{message} after {depth} dt halvings"),
                        },
                        other => other,
                    });
                }
                let first = self.step_recursive(state, 0.5 * dt, depth + 1, frozen)?;
                let second = self.step_recursive(&first.state, 0.5 * dt, depth + 1, frozen)?;
                Ok(StepOutcome {
                    newton_iters: first.newton_iters + second.newton_iters,
                    dt_used: first.dt_used.min(second.dt_used),
                    state: second.state,
                })
            }
            Err(e) => Err(e),
        }
    }

    /// Advance by `dt`, halving up to `max_halvings` times on failure.
    pub fn step(&self, state: &StateField, dt: f64) -> Result<StepOutcome> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        if state.grid != self.grid || state.n != self.model.n {
            return Err(Error::Input("state does not match the stepper grid".into()));
        }
        let frozen = self.frozen_matrices(state)?;
        self.step_recursive(state, dt, 0, &frozen)
    }

    /// Discrete entropy production `sum_faces T du^T h''(u_f) C_f du`. The
    /// flag is set when some face state had to be moved inside the region.
    pub fn entropy_production(&self, state: &StateField) -> Result<(f64, bool)> {
        let n = self.model.n;
        let frozen = self.frozen_matrices(state)?;
        let mut total = 0.0;
        let mut clamped = false;
        let mut mat = vec![0.0; n * n];
        for (idx, face) in self.faces.iter().enumerate() {
            let (ul, ur) = (state.cell(face.left), state.cell(face.right));
            let mut uf: Vec<f64> = ul.iter().zip(ur).map(|(a, b)| 0.5 * (a + b)).collect();
            self.face_matrix(idx, &uf, &frozen, &mut mat);
            if !self.model.in_region(&uf) {
                uf = self.model.interior_clamp(&uf, PRODUCTION_CLAMP);
                clamped = true;
            }
            let hess = self.model.entropy_hessian(&uf);
            let c = DMatrix::from_row_slice(n, n, &mat);
            let du = nalgebra::DVector::from_iterator(n, ul.iter().zip(ur).map(|(a, b)| b - a));
            total += face.weight * (du.transpose() * hess * c * &du)[(0, 0)];
        }
        Ok((total, clamped))
    }
}

/// Implicit step for the homogenized system.
pub fn step_macro(
    state: &StateField,
    model: &DiffusionModel,
    tensor: &MacroTensor,
    dt: f64,
) -> Result<StepOutcome> {
    Stepper::macroscopic(model, &state.grid, tensor, StepperConfig::new(dt))?.step(state, dt)
}

/// Implicit step for the oscillating system on an `eps`-resolved grid with a
/// unit cell of periodicity.
pub fn step_micro(
    state: &StateField,
    model: &DiffusionModel,
    p: &CoefficientSpec,
    eps: f64,
    dt: f64,
) -> Result<StepOutcome> {
    let cell = vec![1.0; state.grid.dim()];
    Stepper::microscopic(model, &state.grid, p, &cell, eps, StepperConfig::new(dt))?.step(state, dt)
}

/// Per-step record of a transient run; all columns share one length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryLog {
    pub n: usize,
    pub times: Vec<f64>,
    pub entropy: Vec<f64>,
    pub production: Vec<f64>,
    pub production_clamped: Vec<bool>,
    pub mass: Vec<Vec<f64>>,
    pub newton_iters: Vec<usize>,
    pub dt: Vec<f64>,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn push(&mut self, stepper: &Stepper, state: &StateField, iters: usize, dt: f64) -> Result<()> {
        let (prod, clamped) = stepper.entropy_production(state)?;
        self.times.push(state.time);
        self.entropy.push(state.entropy(stepper.model()));
        self.production.push(prod);
        self.production_clamped.push(clamped);
        self.mass.push(state.mass());
        self.newton_iters.push(iters);
        self.dt.push(dt);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,H,production");
        for i in 0..self.n {
            out.push_str(&format!(",mass_{}", i + 1));
        }
        out.push_str(",newton_iters,dt\n");
        for s in 0..self.len() {
            out.push_str(&format!(
                "{},{},{}",
                self.times[s], self.entropy[s], self.production[s]
            ));
            for m in &self.mass[s] {
                out.push_str(&format!(",{m}"));
            }
            out.push_str(&format!(",{},{}\n", self.newton_iters[s], self.dt[s]));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    /// Largest single-step entropy increase.
    pub fn max_entropy_increase(&self) -> f64 {
        self.entropy
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_production(&self) -> f64 {
        self.production
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct TransientRun {
    pub state: StateField,
    pub log: TrajectoryLog,
}

/// A run that stopped early; `partial` holds every completed step.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub partial: TrajectoryLog,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({} logged states)", self.error, self.partial.len())
    }
}

impl std::error::Error for RunFailure {}

impl From<RunFailure> for Error {
    fn from(r: RunFailure) -> Self {
        r.error
    }
}

/// Fixed-`dt` loop to `t_end`; the last step is shortened to land on `t_end`.
pub fn run_transient(
    initial: &StateField,
    stepper: &Stepper,
    t_end: f64,
) -> std::result::Result<TransientRun, RunFailure> {
    let mut log = TrajectoryLog {
        n: initial.n,
        ..Default::default()
    };
    let bail = |error: Error, log: TrajectoryLog| RunFailure {
        error,
        partial: log,
    };
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(bail(
            Error::Config(format!("t_end must be non-negative, got {t_end}")),
            log,
        ));
    }
    if let Err(e) = log.push(stepper, initial, 0, 0.0) {
        return Err(bail(e, log));
    }
    let dt = stepper.config.dt;
    let t0 = initial.time;
    let steps = ((t_end / dt) - 1e-9).ceil().max(0.0) as usize;
    let mut state = initial.clone();
    for s in 0..steps {
        let target = if s + 1 == steps {
            t0 + t_end
        } else {
            t0 + (s + 1) as f64 * dt
        };
        let h = target - state.time;
        match stepper.step(&state, h) {
            Ok(out) => {
                state = out.state;
                state.time = target;
                if let Err(e) = log.push(stepper, &state, out.newton_iters, out.dt_used) {
                    return Err(bail(e, log));
                }
            }
            Err(e) => return Err(bail(e, log)),
        }
    }
    Ok(TransientRun { state, log })
}
