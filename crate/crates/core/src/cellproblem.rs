//! Periodic unit-cell (corrector) problems discretized with multilinear
//! finite elements on the uniform cell grid.
//!
//! Scalar problem, one per direction `l`:
//! `div_y(P (grad w^l + e_l)) = 0`, periodic, zero mean.
//!
//! Coupled problem, one per `(k, l)`:
//! `div_y(P Ahat (grad W^{kl} + e_k e_l)) = 0`, where the forcing matrix has
//! entry `(m, j) = delta_km delta_jl` (row = space direction, column = species).
//!
//! Masked (hole) elements are left out of the bilinear form, which imposes the
//! no-flux condition on the hole boundary weakly.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CellGrid, PeriodicCoefficient};
use crate::linalg::{bicgstab, inverse_diagonal, pcg, CsrMatrix, KrylovOptions, LinearOperator};

pub const DEFAULT_DELTA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellSolutionKind {
    Scalar,
    Coupled,
}

/// Starting iterate for the Krylov solver.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum InitialGuess {
    #[default]
    Zero,
    /// Uniform random values in `[-1, 1]`, seeded.
    Random(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CellSolveOptions {
    pub krylov: KrylovOptions,
    pub initial_guess: InitialGuess,
}

/// Assembled cell operator for a coefficient `P` on a grid.
///
/// `K_ab = sum_e sum_k P_k(e) int_e d_k phi_a d_k phi_b` and the load vectors
/// `f^l_a = sum_e P_l(e) int_e d_l phi_a`.
#[derive(Debug, Clone)]
pub struct CellAssembly {
    grid: Arc<CellGrid>,
    stiffness: CsrMatrix,
    loads: Vec<Vec<f64>>,
    /// Lumped fluid weights; integrate multilinear functions exactly.
    weights: Vec<f64>,
    pinned: Vec<bool>,
    weight_total: f64,
    /// `int_{Y_1} P_k`.
    coefficient_integrals: Vec<f64>,
}

fn local_matrices(spacing: &[f64]) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let d = spacing.len();
    let vol: f64 = spacing.iter().product();
    let corners = 1usize << d;
    let mass1 = [[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]];
    let bit = |c: usize, m: usize| (c >> m) & 1;
    let sign = |c: usize, m: usize| if bit(c, m) == 1 { 1.0 } else { -1.0 };
    let stiff = (0..d)
        .map(|k| {
            (0..corners)
                .map(|a| {
                    (0..corners)
                        .map(|b| {
                            let mut v = vol / (spacing[k] * spacing[k]) * sign(a, k) * sign(b, k);
                            for q in (0..d).filter(|&q| q != k) {
                                v *= mass1[bit(a, q)][bit(b, q)];
                            }
                            v
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let grad = (0..d)
        .map(|k| {
            (0..corners)
                .map(|a| vol / spacing[k] * sign(a, k) * 0.5f64.powi(d as i32 - 1))
                .collect()
        })
        .collect();
    (stiff, grad)
}

impl CellAssembly {
    pub fn new(p: &PeriodicCoefficient, grid: &CellGrid) -> Result<Self> {
        let d = grid.dim();
        if p.dim() != d {
            return Err(Error::Coefficient(format!(
                "coefficient has {} axes, grid has dimension {d}",
                p.dim()
            )));
        }
        let n_el = grid.num_elements();
        if (0..d).any(|k| p.axis(k).len() != n_el) {
            return Err(Error::Coefficient(
                "coefficient was sampled on a different grid".into(),
            ));
        }
        let nodes = grid.num_nodes();
        let (stiff, grad) = local_matrices(grid.spacing());
        let corners = 1usize << d;
        let vol = grid.element_volume();
        let mut triplets = Vec::with_capacity(grid.num_elements() * corners * corners);
        let mut loads = vec![vec![0.0; nodes]; d];
        let mut weights = vec![0.0; nodes];
        let mut coefficient_integrals = vec![0.0; d];
        for e in 0..n_el {
            if !grid.is_fluid(e) {
                continue;
            }
            let en = grid.element_nodes(e);
            for a in 0..corners {
                weights[en[a]] += vol / corners as f64;
                for b in 0..corners {
                    let v: f64 = (0..d).map(|k| p.value(k, e) * stiff[k][a][b]).sum();
                    triplets.push((en[a], en[b], v));
                }
                for (k, load) in loads.iter_mut().enumerate() {
                    load[en[a]] += p.value(k, e) * grad[k][a];
                }
            }
            for (k, c) in coefficient_integrals.iter_mut().enumerate() {
                *c += p.value(k, e) * vol;
            }
        }
        let pinned: Vec<bool> = weights.iter().map(|&w| w == 0.0).collect();
        let weight_total = weights.iter().sum();
        Ok(CellAssembly {
            grid: Arc::new(grid.clone()),
            stiffness: CsrMatrix::from_triplets(nodes, triplets),
            loads,
            weights,
            pinned,
            weight_total,
            coefficient_integrals,
        })
    }

    pub fn grid(&self) -> &CellGrid {
        &self.grid
    }

    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    /// `f^l`.
    pub fn load(&self, l: usize) -> &[f64] {
        &self.loads[l]
    }

    /// `int_{Y_1} P_k(y) dy`.
    pub fn coefficient_integral(&self, k: usize) -> f64 {
        self.coefficient_integrals[k]
    }

    /// `int_{Y_1} P_m d_m v dy` for a nodal field `v`, with the same
    /// quadrature as the assembly.
    pub fn weighted_derivative_integral(&self, m: usize, v: &[f64]) -> f64 {
        self.loads[m].iter().zip(v).map(|(f, x)| f * x).sum()
    }

    /// Discrete mean over the fluid part.
    pub fn mean(&self, v: &[f64]) -> f64 {
        self.weights.iter().zip(v).map(|(w, x)| w * x).sum::<f64>() / self.weight_total
    }

    /// `L^2(Y_1)` norm.
    pub fn l2_norm(&self, v: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(v)
            .map(|(w, x)| w * x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Make each node block orthogonal to the fluid constants and zero
    /// pinned nodes, so residuals stay in the range of the stiffness.
    fn deflate(&self, r: &mut [f64]) {
        let nodes = self.grid.num_nodes();
        let active = self.pinned.iter().filter(|p| !**p).count() as f64;
        for chunk in r.chunks_mut(nodes) {
            let sum: f64 = chunk
                .iter()
                .zip(&self.pinned)
                .filter(|(_, p)| !**p)
                .map(|(x, _)| x)
                .sum();
            let mean = sum / active;
            for (x, &pin) in chunk.iter_mut().zip(&self.pinned) {
                *x = if pin { 0.0 } else { *x - mean };
            }
        }
    }

    /// Remove the mean from each `block`-sized chunk and zero pinned nodes.
    fn project(&self, v: &mut [f64]) {
        let nodes = self.grid.num_nodes();
        for chunk in v.chunks_mut(nodes) {
            let mean = self.mean(chunk);
            for (x, &pin) in chunk.iter_mut().zip(&self.pinned) {
                *x = if pin { 0.0 } else { *x - mean };
            }
        }
    }
}

/// `Ahat (x) K` acting on species-major vectors.
struct KroneckerOperator<'a> {
    ahat: &'a DMatrix<f64>,
    stiffness: &'a CsrMatrix,
}

impl LinearOperator for KroneckerOperator<'_> {
    fn dim(&self) -> usize {
        self.ahat.nrows() * self.stiffness.n()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let nodes = self.stiffness.n();
        let n = self.ahat.nrows();
        let mut kx = vec![0.0; nodes * n];
        for j in 0..n {
            self.stiffness.matvec(
                &x[j * nodes..(j + 1) * nodes],
                &mut kx[j * nodes..(j + 1) * nodes],
            );
        }
        y.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let yi = &mut y[i * nodes..(i + 1) * nodes];
            for j in 0..n {
                let a = self.ahat[(i, j)];
                if a != 0.0 {
                    for (yv, kv) in yi.iter_mut().zip(&kx[j * nodes..(j + 1) * nodes]) {
                        *yv += a * kv;
                    }
                }
            }
        }
    }
}

/// Corrector fields and solve statistics.
#[derive(Debug, Clone)]
pub struct CellSolutionSet {
    pub kind: CellSolutionKind,
    pub assembly: Arc<CellAssembly>,
    /// Number of species per field (1 for the scalar kind).
    pub species: usize,
    /// Scalar: `fields[l]`. Coupled: `fields[k * n + l]`, species-major
    /// (`W_j` occupies `[j * nodes, (j + 1) * nodes)`).
    pub fields: Vec<Vec<f64>>,
    pub delta: Option<f64>,
    pub residual_norms: Vec<f64>,
    pub iterations: Vec<usize>,
}

impl CellSolutionSet {
    pub fn grid(&self) -> &CellGrid {
        self.assembly.grid()
    }

    pub fn dim(&self) -> usize {
        self.grid().dim()
    }

    /// `w^l`.
    pub fn scalar(&self, l: usize) -> &[f64] {
        assert_eq!(self.kind, CellSolutionKind::Scalar);
        &self.fields[l]
    }

    /// `W^{kl}_j`.
    pub fn coupled(&self, k: usize, l: usize, j: usize) -> &[f64] {
        assert_eq!(self.kind, CellSolutionKind::Coupled);
        let nodes = self.grid().num_nodes();
        &self.fields[k * self.species + l][j * nodes..(j + 1) * nodes]
    }

    pub fn max_norm(&self) -> f64 {
        self.fields
            .iter()
            .flatten()
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// `L^2(Y_1)` norm of the difference of two solution sets on the same grid.
    pub fn l2_distance(&self, other: &CellSolutionSet) -> Result<f64> {
        if self.fields.len() != other.fields.len()
            || self.grid().num_nodes() != other.grid().num_nodes()
        {
            return Err(Error::Input("solution sets are not comparable".into()));
        }
        let nodes = self.grid().num_nodes();
        let mut sum = 0.0;
        for (a, b) in self.fields.iter().zip(&other.fields) {
            let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            for chunk in diff.chunks(nodes) {
                sum += self.assembly.l2_norm(chunk).powi(2);
            }
        }
        Ok(sum.sqrt())
    }

    fn field_names(&self) -> Vec<String> {
        match self.kind {
            CellSolutionKind::Scalar => (0..self.fields.len())
                .map(|l| format!("w_{}", l + 1))
                .collect(),
            CellSolutionKind::Coupled => {
                let n = self.species;
                let mut names = Vec::new();
                for k in 0..self.dim() {
                    for l in 0..n {
                        for j in 0..n {
                            names.push(format!("W_{}_{}_{}", k + 1, l + 1, j + 1));
                        }
                    }
                }
                names
            }
        }
    }

    /// Nodal values as CSV: `y_1[,y_2]` followed by one column per field
    /// component.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let grid = self.grid();
        let d = grid.dim();
        let nodes = grid.num_nodes();
        let mut out = String::new();
        let mut header: Vec<String> = (0..d).map(|k| format!("y_{}", k + 1)).collect();
        header.extend(self.field_names());
        out.push_str(&header.join(","));
        out.push('\n');
        for a in 0..nodes {
            let mut row: Vec<String> = grid
                .node_coordinates(a)
                .iter()
                .map(|y| format!("{y}"))
                .collect();
            for field in &self.fields {
                for chunk in field.chunks(nodes) {
                    row.push(format!("{}", chunk[a]));
                }
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn initial_vector(len: usize, guess: InitialGuess, stream: u64) -> Vec<f64> {
    match guess {
        InitialGuess::Zero => vec![0.0; len],
        InitialGuess::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            (0..len).map(|_| rng.gen_range(-1.0..=1.0)).collect()
        }
    }
}

pub fn solve_scalar_cell(p: &PeriodicCoefficient, grid: &CellGrid) -> Result<CellSolutionSet> {
    solve_scalar_cell_with(p, grid, &CellSolveOptions::default())
}

pub fn solve_scalar_cell_with(
    p: &PeriodicCoefficient,
    grid: &CellGrid,
    opts: &CellSolveOptions,
) -> Result<CellSolutionSet> {
    let assembly = Arc::new(CellAssembly::new(p, grid)?);
    solve_scalar_on(&assembly, opts)
}

/// Scalar correctors on an existing assembly.
pub fn solve_scalar_on(
    assembly: &Arc<CellAssembly>,
    opts: &CellSolveOptions,
) -> Result<CellSolutionSet> {
    let d = assembly.grid().dim();
    let inv_diag = inverse_diagonal(&assembly.stiffness.diagonal());
    let results: Vec<Result<(Vec<f64>, f64, usize)>> = (0..d)
        .into_par_iter()
        .map(|l| {
            let b: Vec<f64> = assembly.load(l).iter().map(|f| -f).collect();
            let mut x = initial_vector(b.len(), opts.initial_guess, l as u64);
            assembly.project(&mut x);
            let stats = pcg(
                &assembly.stiffness,
                &inv_diag,
                &b,
                &mut x,
                &opts.krylov,
                &|v| assembly.project(v),
                &|r| assembly.deflate(r),
            )?;
            Ok((x, stats.rel_residual, stats.iterations))
        })
        .collect();
    let mut set = CellSolutionSet {
        kind: CellSolutionKind::Scalar,
        assembly: Arc::clone(assembly),
        species: 1,
        fields: Vec::with_capacity(d),
        delta: None,
        residual_norms: Vec::with_capacity(d),
        iterations: Vec::with_capacity(d),
    };
    for r in results {
        let (x, res, it) = r?;
        set.fields.push(x);
        set.residual_norms.push(res);
        set.iterations.push(it);
    }
    Ok(set)
}

pub fn solve_coupled_cell(
    ahat: &DMatrix<f64>,
    p: &PeriodicCoefficient,
    grid: &CellGrid,
    delta: f64,
) -> Result<CellSolutionSet> {
    solve_coupled_cell_with(ahat, p, grid, delta, &CellSolveOptions::default())
}

fn is_spd(m: &DMatrix<f64>) -> bool {
    let sym = (m - m.transpose()).abs().max() <= 1e-14 * m.abs().max();
    sym && m.clone().cholesky().is_some()
}

pub fn solve_coupled_cell_with(
    ahat: &DMatrix<f64>,
    p: &PeriodicCoefficient,
    grid: &CellGrid,
    delta: f64,
    opts: &CellSolveOptions,
) -> Result<CellSolutionSet> {
    let assembly = Arc::new(CellAssembly::new(p, grid)?);
    solve_coupled_on(&assembly, ahat, delta, opts)
}

/// Coupled correctors on an existing assembly.
pub fn solve_coupled_on(
    assembly: &Arc<CellAssembly>,
    ahat: &DMatrix<f64>,
    delta: f64,
    opts: &CellSolveOptions,
) -> Result<CellSolutionSet> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Parameter(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let n = ahat.nrows();
    if n == 0 || ahat.ncols() != n || ahat.iter().any(|x| !x.is_finite()) {
        return Err(Error::Parameter(
            "Ahat must be a finite square matrix".into(),
        ));
    }
    let d = assembly.grid().dim();
    let nodes = assembly.grid().num_nodes();
    let op = KroneckerOperator {
        ahat,
        stiffness: &assembly.stiffness,
    };
    let kdiag = assembly.stiffness.diagonal();
    let mut diag = Vec::with_capacity(n * nodes);
    for i in 0..n {
        diag.extend(kdiag.iter().map(|k| ahat[(i, i)] * k));
    }
    let inv_diag = inverse_diagonal(&diag);
    let symmetric = is_spd(ahat);

    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|k| (0..n).map(move |l| (k, l))).collect();
    let results: Vec<Result<(Vec<f64>, f64, usize)>> = pairs
        .par_iter()
        .map(|&(k, l)| {
            let fk = assembly.load(k);
            let mut b = vec![0.0; n * nodes];
            for i in 0..n {
                let a = ahat[(i, l)];
                for (bv, f) in b[i * nodes..(i + 1) * nodes].iter_mut().zip(fk) {
                    *bv = -a * f;
                }
            }
            let mut x = initial_vector(b.len(), opts.initial_guess, (k * n + l) as u64);
            assembly.project(&mut x);
            let project = |v: &mut [f64]| assembly.project(v);
            let deflate = |v: &mut [f64]| assembly.deflate(v);
            let stats = if symmetric {
                pcg(&op, &inv_diag, &b, &mut x, &opts.krylov, &project, &deflate)?
            } else {
                bicgstab(&op, &inv_diag, &b, &mut x, &opts.krylov, &project, &deflate)?
            };
            Ok((x, stats.rel_residual, stats.iterations))
        })
        .collect();
    let mut set = CellSolutionSet {
        kind: CellSolutionKind::Coupled,
        assembly: Arc::clone(assembly),
        species: n,
        fields: Vec::with_capacity(pairs.len()),
        delta: Some(delta),
        residual_norms: Vec::with_capacity(pairs.len()),
        iterations: Vec::with_capacity(pairs.len()),
    };
    for r in results {
        let (x, res, it) = r?;
        set.fields.push(x);
        set.residual_norms.push(res);
        set.iterations.push(it);
    }
    Ok(set)
}

/// Outcome of a sweep over decreasing regularization parameters.
#[derive(Debug, Clone)]
pub struct DeltaContinuation {
    pub deltas: Vec<f64>,
    pub solutions: Vec<CellSolutionSet>,
    /// `gaps[k] = |W_{delta_k} - W_{delta_{k+1}}|_{L^2(Y)}`.
    pub gaps: Vec<f64>,
    pub non_increasing: bool,
    pub strictly_decreasing: bool,
    /// First failing `delta` and the error message; earlier results are kept.
    pub failure: Option<(f64, String)>,
}

/// Solve the coupled cell problem for each `delta`; `ahat_of(delta)` supplies
/// the regularized matrix.
pub fn delta_continuation(
    ahat_of: &dyn Fn(f64) -> DMatrix<f64>,
    p: &PeriodicCoefficient,
    grid: &CellGrid,
    deltas: &[f64],
    opts: &CellSolveOptions,
) -> Result<DeltaContinuation> {
    if deltas.is_empty() {
        return Err(Error::Parameter("delta sequence is empty".into()));
    }
    if deltas.iter().any(|d| !(*d > 0.0 && d.is_finite()))
        || deltas.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(Error::Parameter(
            "delta sequence must be positive and strictly decreasing".into(),
        ));
    }
    let assembly = Arc::new(CellAssembly::new(p, grid)?);
    let mut out = DeltaContinuation {
        deltas: Vec::new(),
        solutions: Vec::new(),
        gaps: Vec::new(),
        non_increasing: true,
        strictly_decreasing: true,
        failure: None,
    };
    for &delta in deltas {
        match solve_coupled_on(&assembly, &ahat_of(delta), delta, opts) {
            Ok(sol) => {
                if let Some(prev) = out.solutions.last() {
                    out.gaps.push(prev.l2_distance(&sol)?);
                }
                out.deltas.push(delta);
                out.solutions.push(sol);
            }
            Err(e) => {
                out.failure = Some((delta, e.to_string()));
                break;
            }
        }
    }
    out.non_increasing = out.gaps.windows(2).all(|w| w[1] <= w[0]);
    out.strictly_decreasing = out.gaps.windows(2).all(|w| w[1] < w[0]);
    Ok(out)
}
