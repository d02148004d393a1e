//! Homogenized tensors assembled from cell solutions, the `delta`-clamp, and a
//! memoization cache over quantized macroscopic states.
//!
//! Index conventions: the four-index tensor is `B[i][l][m][k]` (species `i`,
//! `l`; space `m`, `k`) and enters the macroscopic flux of species `i` along
//! `m` as `sum_{l,k} B[i][l][m][k] d_k u_l`. The two-index tensor is
//! `D_hom[k][l]`.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cellproblem::{
    solve_coupled_on, solve_scalar_on, CellAssembly, CellSolutionKind, CellSolutionSet,
    CellSolveOptions,
};
use crate::error::{Error, Result};
use crate::geometry::{CellGrid, PeriodicCoefficient};
use crate::models::{DegeneracyKind, DiffusionModel};

/// Which measure divides the cell averages in the perforated formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AverageNormalization {
    /// `|Y_1|^{-1} int_{Y_1}`.
    #[default]
    Fluid,
    /// `|Y|^{-1} int_{Y_1}`; rescales the fluid-normalized tensor by the
    /// porosity `|Y_1|/|Y|`.
    Cell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    FourIndex,
    TwoIndex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveTensor {
    pub kind: TensorKind,
    /// Species count (1 for the two-index kind).
    pub n: usize,
    pub d: usize,
    /// Row-major in the documented index order.
    pub values: Vec<f64>,
    pub state: Option<Vec<f64>>,
    pub delta: Option<f64>,
    pub provenance: String,
}

/// `u_delta = (u + delta/2) / (1 + delta)`, after clipping `u` to `[0, 1]`.
pub fn clamp_state(u: &[f64], delta: f64) -> Vec<f64> {
    u.iter()
        .map(|x| (x.clamp(0.0, 1.0) + 0.5 * delta) / (1.0 + delta))
        .collect()
}

/// `(s_j + 1) u_j^{s_j}` at the clamped state.
fn scaling_factors(model: &DiffusionModel, ud: &[f64]) -> Result<Vec<f64>> {
    let s = model.exponents().ok_or_else(|| {
        Error::Parameter(format!(
            "model '{}' has nonlocal degeneracy; Ahat is defined for the local kind only",
            model.name
        ))
    })?;
    Ok(ud
        .iter()
        .zip(s)
        .map(|(u, s)| (s + 1.0) * u.powf(*s))
        .collect())
}

fn check_state(model: &DiffusionModel, u: &[f64]) -> Result<()> {
    if u.len() != model.n {
        return Err(Error::Input(format!(
            "state has {} components, model '{}' has {}",
            u.len(),
            model.name,
            model.n
        )));
    }
    if !model.in_closure(u, 1e-12) {
        return Err(Error::Input(format!(
            "state {u:?} is outside the admissible region"
        )));
    }
    Ok(())
}

/// `Ahat_ij = a_ij(u_delta) / ((s_j + 1) u_{delta,j}^{s_j})`.
pub fn ahat(model: &DiffusionModel, u: &[f64], delta: f64) -> Result<DMatrix<f64>> {
    check_state(model, u)?;
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::Parameter(format!(
            "delta must be non-negative, got {delta}"
        )));
    }
    let ud = clamp_state(u, delta);
    let f = scaling_factors(model, &ud)?;
    let a = model.diffusion_matrix(&ud);
    Ok(DMatrix::from_fn(model.n, model.n, |i, j| a[(i, j)] / f[j]))
}

impl EffectiveTensor {
    pub fn b(&self, i: usize, l: usize, m: usize, k: usize) -> f64 {
        debug_assert_eq!(self.kind, TensorKind::FourIndex);
        let (n, d) = (self.n, self.d);
        self.values[((i * n + l) * d + m) * d + k]
    }

    pub fn dhom(&self, k: usize, l: usize) -> f64 {
        debug_assert_eq!(self.kind, TensorKind::TwoIndex);
        self.values[k * self.d + l]
    }

    /// Two-index tensor as a matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d, self.d, &self.values[..self.d * self.d])
    }

    /// Eigenvalues of the symmetric part of the two-index tensor, ascending.
    pub fn symmetric_eigenvalues(&self) -> Vec<f64> {
        let m = self.matrix();
        let sym = (&m + m.transpose()) * 0.5;
        let mut ev: Vec<f64> = SymmetricEigen::new(sym)
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn to_json(&self) -> Value {
        let nested = match self.kind {
            TensorKind::TwoIndex => json!((0..self.d)
                .map(|k| (0..self.d).map(|l| self.dhom(k, l)).collect::<Vec<_>>())
                .collect::<Vec<_>>()),
            TensorKind::FourIndex => json!((0..self.n)
                .map(|i| (0..self.n)
                    .map(|l| (0..self.d)
                        .map(|m| (0..self.d).map(|k| self.b(i, l, m, k)).collect::<Vec<_>>())
                        .collect::<Vec<_>>())
                    .collect::<Vec<_>>())
                .collect::<Vec<_>>()),
        };
        let order = match self.kind {
            TensorKind::TwoIndex => "k,l",
            TensorKind::FourIndex => "i,l,m,k",
        };
        json!({
            "kind": self.kind,
            "index_order": order,
            "n": self.n,
            "d": self.d,
            "state": self.state,
            "delta": self.delta,
            "provenance": self.provenance,
            "values": nested,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json())
            .map_err(|e| Error::Internal(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// One row per entry: `k,l,value` or `i,l,m,k,value` (1-based indices).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        match self.kind {
            TensorKind::TwoIndex => {
                out.push_str("k,l,value\n");
                for k in 0..self.d {
                    for l in 0..self.d {
                        out.push_str(&format!("{},{},{}\n", k + 1, l + 1, self.dhom(k, l)));
                    }
                }
            }
            TensorKind::FourIndex => {
                out.push_str("i,l,m,k,value\n");
                for i in 0..self.n {
                    for l in 0..self.n {
                        for m in 0..self.d {
                            for k in 0..self.d {
                                out.push_str(&format!(
                                    "{},{},{},{},{}\n",
                                    i + 1,
                                    l + 1,
                                    m + 1,
                                    k + 1,
                                    self.b(i, l, m, k)
                                ));
                            }
                        }
                    }
                }
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// `max |B[i][l][m][k] - a_il(u_delta) D[m][k]|`, the distance to the
    /// separable form `A (x) D_hom`.
    pub fn separable_defect(&self, model: &DiffusionModel, dhom: &EffectiveTensor) -> f64 {
        let (Some(u), Some(delta)) = (&self.state, self.delta) else {
            return f64::INFINITY;
        };
        let a = model.diffusion_matrix(&clamp_state(u, delta));
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for l in 0..self.n {
                for m in 0..self.d {
                    for k in 0..self.d {
                        let sep = a[(i, l)] * dhom.dhom(m, k);
                        worst = worst.max((self.b(i, l, m, k) - sep).abs());
                    }
                }
            }
        }
        worst
    }
}

fn normalizer(grid: &CellGrid, normalization: AverageNormalization) -> f64 {
    match normalization {
        AverageNormalization::Fluid => grid.fluid_measure(),
        AverageNormalization::Cell => grid.cell_measure(),
    }
}

/// Four-index tensor from coupled correctors solved at `ahat(model, u, delta)`.
pub fn effective_tensor_from_cells(
    model: &DiffusionModel,
    u: &[f64],
    cells: &CellSolutionSet,
    normalization: AverageNormalization,
) -> Result<EffectiveTensor> {
    if cells.kind != CellSolutionKind::Coupled || cells.species != model.n {
        return Err(Error::Input(
            "coupled cell solutions for this model are required".into(),
        ));
    }
    let delta = cells
        .delta
        .ok_or_else(|| Error::Input("coupled solutions carry no delta".into()))?;
    let n = model.n;
    let grid = cells.grid();
    let d = grid.dim();
    let asm = &cells.assembly;
    let measure = normalizer(grid, normalization);
    let ud = clamp_state(u, delta);
    let f = scaling_factors(model, &ud)?;
    let a = model.diffusion_matrix(&ud);
    let mut values = vec![0.0; n * n * d * d];
    for i in 0..n {
        for l in 0..n {
            for m in 0..d {
                for k in 0..d {
                    let mut v = 0.0;
                    if k == m {
                        v += a[(i, l)] * asm.coefficient_integral(m) / measure;
                    }
                    for j in 0..n {
                        let avg =
                            asm.weighted_derivative_integral(m, cells.coupled(k, l, j)) / measure;
                        v += a[(i, j)] * f[l] / f[j] * avg;
                    }
                    values[((i * n + l) * d + m) * d + k] = v;
                }
            }
        }
    }
    Ok(EffectiveTensor {
        kind: TensorKind::FourIndex,
        n,
        d,
        values,
        state: Some(u.to_vec()),
        delta: Some(delta),
        provenance: format!("coupled cell solve, {}", grid.id()),
    })
}

fn local_tensor_on(
    model: &DiffusionModel,
    u: &[f64],
    assembly: &Arc<CellAssembly>,
    delta: f64,
    normalization: AverageNormalization,
    opts: &CellSolveOptions,
) -> Result<EffectiveTensor> {
    let ah = ahat(model, u, delta)?;
    let cells = solve_coupled_on(assembly, &ah, delta, opts)?;
    effective_tensor_from_cells(model, u, &cells, normalization)
}

/// `B(u)` for the local-degeneracy kind.
pub fn effective_tensor_local(
    model: &DiffusionModel,
    u: &[f64],
    p: &PeriodicCoefficient,
    grid: &CellGrid,
    delta: f64,
) -> Result<EffectiveTensor> {
    let assembly = Arc::new(CellAssembly::new(p, grid)?);
    local_tensor_on(
        model,
        u,
        &assembly,
        delta,
        AverageNormalization::Fluid,
        &CellSolveOptions::default(),
    )
}

/// `B_2(u)` on a perforated cell (`P = 1`, averages over the fluid part).
pub fn effective_tensor_perforated(
    model: &DiffusionModel,
    u: &[f64],
    grid: &CellGrid,
    delta: f64,
    normalization: AverageNormalization,
) -> Result<EffectiveTensor> {
    let p = PeriodicCoefficient::uniform(grid, &vec![1.0; grid.dim()])?;
    let assembly = Arc::new(CellAssembly::new(&p, grid)?);
    local_tensor_on(
        model,
        u,
        &assembly,
        delta,
        normalization,
        &CellSolveOptions::default(),
    )
}

/// `D_hom[k][l] = avg P_k (delta_kl + d_k w^l)` from scalar correctors.
pub fn dhom_from_cells(
    cells: &CellSolutionSet,
    normalization: AverageNormalization,
) -> Result<EffectiveTensor> {
    if cells.kind != CellSolutionKind::Scalar {
        return Err(Error::Input("scalar cell solutions are required".into()));
    }
    let grid = cells.grid();
    let d = grid.dim();
    let asm = &cells.assembly;
    let measure = normalizer(grid, normalization);
    let mut values = vec![0.0; d * d];
    for k in 0..d {
        for l in 0..d {
            let mut v = asm.weighted_derivative_integral(k, cells.scalar(l));
            if k == l {
                v += asm.coefficient_integral(k);
            }
            values[k * d + l] = v / measure;
        }
    }
    Ok(EffectiveTensor {
        kind: TensorKind::TwoIndex,
        n: 1,
        d,
        values,
        state: None,
        delta: None,
        provenance: format!("scalar cell solve, {}", grid.id()),
    })
}

pub fn dhom(p: &PeriodicCoefficient, grid: &CellGrid) -> Result<EffectiveTensor> {
    let assembly = Arc::new(CellAssembly::new(p, grid)?);
    let cells = solve_scalar_on(&assembly, &CellSolveOptions::default())?;
    dhom_from_cells(&cells, AverageNormalization::Fluid)
}

pub fn dhom_perforated(
    grid: &CellGrid,
    normalization: AverageNormalization,
) -> Result<EffectiveTensor> {
    let p = PeriodicCoefficient::uniform(grid, &vec![1.0; grid.dim()])?;
    let assembly = Arc::new(CellAssembly::new(&p, grid)?);
    let cells = solve_scalar_on(&assembly, &CellSolveOptions::default())?;
    dhom_from_cells(&cells, normalization)
}

pub const DEFAULT_QUANTIZATION: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub entries: usize,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    context: u64,
    lattice: Vec<i64>,
}

/// Memoized `B(u)` on the lattice `q Z^n`, clipped to `[0, 1]^n`.
///
/// Lookups may run concurrently. Two threads missing on the same key both
/// assemble; the first insertion wins and both return equal tensors.
pub struct TensorCache {
    model: DiffusionModel,
    assembly: Arc<CellAssembly>,
    delta: f64,
    q: f64,
    normalization: AverageNormalization,
    context: u64,
    map: RwLock<HashMap<CacheKey, Arc<EffectiveTensor>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl std::fmt::Debug for TensorCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TensorCache")
            .field("model", &self.model.name)
            .field("q", &self.q)
            .field("delta", &self.delta)
            .field("stats", &self.stats())
            .finish()
    }
}

impl TensorCache {
    pub fn new(
        model: &DiffusionModel,
        p: &PeriodicCoefficient,
        grid: &CellGrid,
        delta: f64,
        q: f64,
    ) -> Result<Self> {
        if !(q > 0.0 && q.is_finite()) {
            return Err(Error::Parameter(format!(
                "quantization step must be positive, got {q}"
            )));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Parameter(format!(
                "delta must be positive, got {delta}"
            )));
        }
        if model.kind() != DegeneracyKind::LocalDegenerate {
            return Err(Error::Parameter(format!(
                "tensor cache requires a local-degeneracy model, got '{}'",
                model.name
            )));
        }
        let assembly = Arc::new(CellAssembly::new(p, grid)?);
        let mut h = DefaultHasher::new();
        model.id().hash(&mut h);
        grid.id().hash(&mut h);
        delta.to_bits().hash(&mut h);
        for k in 0..p.dim() {
            for v in p.axis(k) {
                v.to_bits().hash(&mut h);
            }
        }
        Ok(TensorCache {
            model: model.clone(),
            assembly,
            delta,
            q,
            normalization: AverageNormalization::Fluid,
            context: h.finish(),
            map: RwLock::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn quantization(&self) -> f64 {
        self.q
    }

    pub fn model(&self) -> &DiffusionModel {
        &self.model
    }

    /// Lattice point nearest to `u`, clipped to the unit box.
    pub fn quantize(&self, u: &[f64]) -> Vec<f64> {
        let top = (1.0 / self.q).floor() as i64;
        self.lattice(u)
            .iter()
            .map(|&c| c.clamp(0, top) as f64 * self.q)
            .collect()
    }

    fn lattice(&self, u: &[f64]) -> Vec<i64> {
        let top = (1.0 / self.q).floor() as i64;
        u.iter()
            .map(|x| ((x / self.q).round() as i64).clamp(0, top))
            .collect()
    }

    pub fn lookup(&self, u: &[f64]) -> Result<Arc<EffectiveTensor>> {
        if u.len() != self.model.n || u.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input(format!("invalid state {u:?}")));
        }
        let key = CacheKey {
            context: self.context,
            lattice: self.lattice(u),
        };
        if let Some(t) = self.map.read().expect("cache lock").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(t));
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let state: Vec<f64> = key.lattice.iter().map(|&c| c as f64 * self.q).collect();
        let tensor = Arc::new(local_tensor_on(
            &self.model,
            &state,
            &self.assembly,
            self.delta,
            self.normalization,
            &CellSolveOptions::default(),
        )?);
        let mut map = self.map.write().expect("cache lock");
        Ok(Arc::clone(map.entry(key).or_insert(tensor)))
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            entries: self.map.read().expect("cache lock").len(),
        }
    }
}
