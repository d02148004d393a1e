//! Configuration, epsilon-sweep convergence studies, and report emission.
//! The command-line driver is a thin layer over the `run_*` functions here.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cellproblem::{
    solve_coupled_on, solve_scalar_on, CellAssembly, CellSolveOptions, DEFAULT_DELTA,
};
use crate::effective::{
    ahat, dhom_from_cells, effective_tensor_from_cells, AverageNormalization, EffectiveTensor,
    TensorKind, DEFAULT_QUANTIZATION,
};
use crate::error::{Error, Result};
use crate::geometry::{
    sample_coefficient, CellGeometry, CellGrid, CoefficientSpec, PeriodicCoefficient,
};
use crate::models::{
    builtin_model, check_assumptions, AssumptionReport, DegeneracyKind, DiffusionModel,
};
use crate::timestepping::{
    build_macro_tensor, run_transient, DomainGrid, MacroRoute, MacroTensor, StateField, Stepper,
    StepperConfig, TrajectoryLog,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub params: Value,
}

fn default_resolution() -> usize {
    64
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub geometry: CellGeometry,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Defaults to `P = 1` on every axis.
    #[serde(default)]
    pub coefficient: Option<CoefficientSpec>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub normalization: AverageNormalization,
    /// State at which the `cell` command also solves the coupled problem.
    #[serde(default)]
    pub state: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub lengths: Vec<f64>,
    pub cells: Vec<usize>,
}

/// Initial profile, evaluated at cell centers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialProfile {
    Constant {
        values: Vec<f64>,
    },
    /// `base_i + amplitude_i cos(wavenumber pi x_1 / L_1)`.
    Cosine {
        base: Vec<f64>,
        amplitude: Vec<f64>,
        #[serde(default = "one_usize")]
        wavenumber: usize,
    },
    /// `left` for `x_1 < split`, `right` otherwise.
    Step {
        split: f64,
        left: Vec<f64>,
        right: Vec<f64>,
    },
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    /// Defaults to `1e-3 L_1^2`.
    #[serde(default)]
    pub dt: Option<f64>,
    pub t_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteConfig {
    #[default]
    Auto,
    Separable,
    Lagged,
}

fn default_quantization() -> f64 {
    DEFAULT_QUANTIZATION
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroConfig {
    #[serde(default)]
    pub route: RouteConfig,
    #[serde(default = "default_quantization")]
    pub quantization: f64,
    /// Multiply the storage term by the fluid fraction of a perforated cell.
    #[serde(default)]
    pub porosity_scaling: bool,
}

impl Default for MacroConfig {
    fn default() -> Self {
        MacroConfig {
            route: RouteConfig::Auto,
            quantization: DEFAULT_QUANTIZATION,
            porosity_scaling: false,
        }
    }
}

fn default_cells_per_period() -> usize {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicroConfig {
    #[serde(default = "default_cells_per_period")]
    pub cells_per_period: usize,
    /// Fixed micro grid for every `eps`; overrides `cells_per_period`.
    #[serde(default)]
    pub cells: Option<Vec<usize>>,
    /// Used by the `micro` command when `--eps` is absent.
    #[serde(default)]
    pub eps: Option<f64>,
}

impl Default for MicroConfig {
    fn default() -> Self {
        MicroConfig {
            cells_per_period: 16,
            cells: None,
            eps: None,
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub eps: Vec<f64>,
    /// Compare the macro reference with a run on twice as many cells.
    #[serde(default = "yes")]
    pub self_check: bool,
    /// The macro reference runs on `reference_refinement` times the domain
    /// cells and is averaged back onto the domain grid, where errors are
    /// measured.
    #[serde(default = "one_usize")]
    pub reference_refinement: usize,
}

/// A complete run description. Sections not used by a command may be omitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub cell: CellConfig,
    #[serde(default)]
    pub domain: Option<DomainConfig>,
    #[serde(default)]
    pub initial: Option<InitialProfile>,
    #[serde(default)]
    pub time: Option<TimeConfig>,
    #[serde(default, rename = "macro")]
    pub macro_: MacroConfig,
    #[serde(default)]
    pub micro: MicroConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub seed: u64,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn model(&self) -> Result<DiffusionModel> {
        builtin_model(&self.model.name, &self.model.params).map_err(|e| match e {
            Error::Parameter(m) => Error::Config(m),
            other => other,
        })
    }

    pub fn cell_grid(&self) -> Result<CellGrid> {
        CellGrid::new(self.cell.geometry.clone(), self.cell.resolution)
    }

    pub fn coefficient_spec(&self) -> CoefficientSpec {
        self.cell
            .coefficient
            .clone()
            .unwrap_or_else(|| CoefficientSpec::constant(&vec![1.0; self.cell.geometry.dim]))
    }

    pub fn coefficient(&self, grid: &CellGrid) -> Result<PeriodicCoefficient> {
        sample_coefficient(&self.coefficient_spec(), grid)
    }

    fn domain(&self) -> Result<&DomainConfig> {
        self.domain
            .as_ref()
            .ok_or_else(|| Error::Config("missing 'domain' section".into()))
    }

    fn time(&self) -> Result<&TimeConfig> {
        self.time
            .as_ref()
            .ok_or_else(|| Error::Config("missing 'time' section".into()))
    }

    pub fn dt(&self) -> Result<f64> {
        let dom = self.domain()?;
        Ok(self
            .time()?
            .dt
            .unwrap_or(1e-3 * dom.lengths[0] * dom.lengths[0]))
    }

    fn route(&self) -> MacroRoute {
        match self.macro_.route {
            RouteConfig::Auto => MacroRoute::Auto,
            RouteConfig::Separable => MacroRoute::Separable,
            RouteConfig::Lagged => MacroRoute::Lagged,
        }
    }

    fn check_domain_matches_cell(&self, allow_hole: bool) -> Result<()> {
        let dom = self.domain()?;
        if dom.lengths.len() != self.cell.geometry.dim {
            return Err(Error::Config(
                "domain and cell must have the same dimension".into(),
            ));
        }
        if self.cell.geometry.hole.is_some() {
            if !allow_hole {
                return Err(Error::Config(
                    "oscillating runs on perforated domains are not supported; use the macro, cell and effective commands"
                        .into(),
                ));
            }
            if self.cell.normalization == AverageNormalization::Cell {
                return Err(Error::Config(
                    "macro runs use fluid-normalized tensors; set macro.porosity_scaling for the storage factor"
                        .into(),
                ));
            }
        }
        Ok(())
    }
}

/// Initial state on `grid`.
pub fn initial_state(
    model: &DiffusionModel,
    profile: &InitialProfile,
    grid: &DomainGrid,
) -> Result<StateField> {
    let n = model.n;
    let arity = |v: &[f64]| -> Result<()> {
        if v.len() == n {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "initial profile needs {n} values per state, got {}",
                v.len()
            )))
        }
    };
    let l0 = grid.lengths[0];
    match profile {
        InitialProfile::Constant { values } => {
            arity(values)?;
            StateField::from_fn(grid.clone(), model, |_| values.clone())
        }
        InitialProfile::Cosine {
            base,
            amplitude,
            wavenumber,
        } => {
            arity(base)?;
            arity(amplitude)?;
            let k = *wavenumber as f64;
            StateField::from_fn(grid.clone(), model, |x| {
                let c = (k * std::f64::consts::PI * x[0] / l0).cos();
                base.iter().zip(amplitude).map(|(b, a)| b + a * c).collect()
            })
        }
        InitialProfile::Step { split, left, right } => {
            arity(left)?;
            arity(right)?;
            StateField::from_fn(grid.clone(), model, |x| {
                if x[0] < *split {
                    left.clone()
                } else {
                    right.clone()
                }
            })
        }
    }
    .map_err(|e| match e {
        Error::Input(m) => Error::Config(m),
        other => other,
    })
}

/// Everything a transient run needs, resolved from a config.
struct Setup {
    model: DiffusionModel,
    cell_grid: CellGrid,
    coefficient: PeriodicCoefficient,
    dt: f64,
    t_end: f64,
    porosity: f64,
}

impl Setup {
    fn macro_stepping(&self) -> StepperConfig {
        StepperConfig {
            porosity: self.porosity,
            ..StepperConfig::new(self.dt)
        }
    }
}

fn setup(config: &Config, allow_hole: bool) -> Result<Setup> {
    config.check_domain_matches_cell(allow_hole)?;
    let model = config.model()?;
    let cell_grid = config.cell_grid()?;
    let coefficient = config.coefficient(&cell_grid)?;
    let dt = config.dt()?;
    let t_end = config.time()?.t_end;
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::Config(format!(
            "t_end must be non-negative, got {t_end}"
        )));
    }
    let porosity = if config.macro_.porosity_scaling {
        cell_grid.fluid_fraction()
    } else {
        1.0
    };
    Ok(Setup {
        model,
        cell_grid,
        coefficient,
        dt,
        t_end,
        porosity,
    })
}

fn macro_tensor(config: &Config, s: &Setup) -> Result<MacroTensor> {
    build_macro_tensor(
        &s.model,
        &s.coefficient,
        &s.cell_grid,
        config.route(),
        config.cell.delta,
        config.macro_.quantization,
    )
}

fn initial_profile(config: &Config) -> Result<&InitialProfile> {
    config
        .initial
        .as_ref()
        .ok_or_else(|| Error::Config("missing 'initial' section".into()))
}

fn run_on(
    stepper: &Stepper,
    initial: &StateField,
    t_end: f64,
) -> Result<(StateField, TrajectoryLog)> {
    let run = run_transient(initial, stepper, t_end)?;
    Ok((run.state, run.log))
}

/// Macro stepper, initial state and `t_end` for a config.
pub fn prepare_macro(config: &Config) -> Result<(Stepper, StateField, f64)> {
    let s = setup(config, true)?;
    let dom = config.domain()?;
    let grid = DomainGrid::new(dom.lengths.clone(), dom.cells.clone())?;
    let tensor = macro_tensor(config, &s)?;
    let stepper = Stepper::macroscopic(&s.model, &grid, &tensor, s.macro_stepping())?;
    let init = initial_state(&s.model, initial_profile(config)?, &grid)?;
    Ok((stepper, init, s.t_end))
}

/// Macroscopic run on the configured domain.
pub fn run_macro(config: &Config) -> Result<(StateField, TrajectoryLog, Stepper)> {
    let (stepper, init, t_end) = prepare_macro(config)?;
    let (state, log) = run_on(&stepper, &init, t_end)?;
    Ok((state, log, stepper))
}

/// `L / eps` as an integer, or a configuration error.
fn periods(length: f64, eps: f64) -> Result<usize> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let r = length / eps;
    let k = r.round();
    if k < 1.0 || (r - k).abs() > 1e-9 * r {
        return Err(Error::Config(format!(
            "eps = {eps} does not tile a domain of length {length}; use eps = L / integer"
        )));
    }
    Ok(k as usize)
}

fn micro_grid(config: &Config, eps: f64) -> Result<DomainGrid> {
    let dom = config.domain()?;
    let cpp = config.micro.cells_per_period;
    for (&l, &b) in dom.lengths.iter().zip(&config.cell.geometry.lengths) {
        periods(l, eps * b)?;
    }
    if let Some(cells) = &config.micro.cells {
        return DomainGrid::new(dom.lengths.clone(), cells.clone());
    }
    let cells = dom
        .lengths
        .iter()
        .zip(&config.cell.geometry.lengths)
        .map(|(&l, &b)| Ok(periods(l, eps * b)? * cpp))
        .collect::<Result<Vec<_>>>()?;
    DomainGrid::new(dom.lengths.clone(), cells)
}

fn micro_stepper(config: &Config, s: &Setup, eps: f64) -> Result<Stepper> {
    let grid = micro_grid(config, eps)?;
    Stepper::microscopic(
        &s.model,
        &grid,
        &config.coefficient_spec(),
        &config.cell.geometry.lengths,
        eps,
        StepperConfig::new(s.dt),
    )
}

/// Micro stepper, initial state and `t_end` for a config and `eps`.
pub fn prepare_micro(config: &Config, eps: f64) -> Result<(Stepper, StateField, f64)> {
    let s = setup(config, false)?;
    let stepper = micro_stepper(config, &s, eps)?;
    let init = initial_state(&s.model, initial_profile(config)?, stepper.grid())?;
    Ok((stepper, init, s.t_end))
}

/// Oscillating run with `cells_per_period` cells per period.
pub fn run_micro(config: &Config, eps: f64) -> Result<(StateField, TrajectoryLog)> {
    let (stepper, init, t_end) = prepare_micro(config, eps)?;
    run_on(&stepper, &init, t_end)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub eps: f64,
    pub l1_error: f64,
    pub l2_error: f64,
    pub linf_error: f64,
    pub micro_cells: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfCheck {
    /// `L^2` distance between macro solutions on `N` and `2N` cells.
    pub macro_gap: f64,
    /// `macro_gap / min micro-macro gap`; required below 0.1.
    pub ratio: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub model: String,
    pub eps_list: Vec<f64>,
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of `log L2` against `log eps`; needs three
    /// successful rows.
    pub rate: Option<f64>,
    pub fit_residual: Option<f64>,
    /// `L2` errors strictly decreasing with `eps`.
    pub monotone: bool,
    pub macro_cells: Vec<usize>,
    pub cells_per_period: usize,
    pub dt: f64,
    pub t_end: f64,
    pub route: String,
    pub self_check: Option<SelfCheck>,
}

impl ConvergenceReport {
    pub fn empty(model: &str) -> Self {
        ConvergenceReport {
            model: model.into(),
            eps_list: Vec::new(),
            rows: Vec::new(),
            rate: None,
            fit_residual: None,
            monotone: true,
            macro_cells: Vec::new(),
            cells_per_period: 0,
            dt: 0.0,
            t_end: 0.0,
            route: String::new(),
            self_check: None,
        }
    }

    fn finish(&mut self) {
        let ok: Vec<&SweepRow> = self.rows.iter().filter(|r| r.failure.is_none()).collect();
        self.monotone =
            ok.len() == self.rows.len() && ok.windows(2).all(|w| w[1].l2_error < w[0].l2_error);
        if ok.len() >= 3 && ok.iter().all(|r| r.l2_error > 0.0) {
            let xs: Vec<f64> = ok.iter().map(|r| r.eps.ln()).collect();
            let ys: Vec<f64> = ok.iter().map(|r| r.l2_error.ln()).collect();
            let (slope, intercept) = least_squares(&xs, &ys);
            let rss: f64 = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| (y - slope * x - intercept).powi(2))
                .sum();
            self.rate = Some(slope);
            self.fit_residual = Some((rss / xs.len() as f64).sqrt());
        } else {
            self.rate = None;
            self.fit_residual = None;
        }
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("eps,l1_error,l2_error,linf_error\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.eps, r.l1_error, r.l2_error, r.linf_error
            );
        }
        out
    }

    /// Log-log plot of the `L2` errors with the fitted line.
    pub fn svg(&self) -> Option<String> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.failure.is_none() && r.l2_error > 0.0)
            .map(|r| (r.eps.log10(), r.l2_error.log10()))
            .collect();
        if pts.is_empty() {
            return None;
        }
        Some(render_svg(&pts, self.rate, self.fit_intercept()))
    }

    fn fit_intercept(&self) -> Option<f64> {
        let rate = self.rate?;
        let ok: Vec<&SweepRow> = self.rows.iter().filter(|r| r.failure.is_none()).collect();
        let n = ok.len() as f64;
        let mx = ok.iter().map(|r| r.eps.log10()).sum::<f64>() / n;
        let my = ok.iter().map(|r| r.l2_error.log10()).sum::<f64>() / n;
        Some(my - rate * mx)
    }
}

/// Slope and intercept of the ordinary least-squares line.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

fn render_svg(pts: &[(f64, f64)], rate: Option<f64>, intercept: Option<f64>) -> String {
    let (w, h, margin) = (480.0, 360.0, 60.0);
    let (mut x0, mut x1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
            (a.min(p.0), b.max(p.0))
        });
    let (mut y0, mut y1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
            (a.min(p.1), b.max(p.1))
        });
    x0 = x0.floor();
    x1 = x1.ceil().max(x0 + 1.0);
    y0 = y0.floor();
    y1 = y1.ceil().max(y0 + 1.0);
    let sx = |x: f64| margin + (x - x0) / (x1 - x0) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - y0) / (y1 - y0) * (h - 2.0 * margin);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{:.2} {:.2} L{:.2} {:.2} L{:.2} {:.2}" fill="none" stroke="black"/>"#,
        margin,
        margin,
        margin,
        h - margin,
        w - margin,
        h - margin
    );
    let mut e = x0 as i64;
    while e as f64 <= x1 {
        let x = sx(e as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#,
            h - margin,
            h - margin + 5.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" font-size="11" text-anchor="middle">1e{e}</text>"#,
            h - margin + 18.0
        );
        e += 1;
    }
    let mut e = y0 as i64;
    while e as f64 <= y1 {
        let y = sy(e as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{margin:.2}" y2="{y:.2}" stroke="black"/>"#,
            margin - 5.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">1e{e}</text>"#,
            margin - 8.0,
            y + 4.0
        );
        e += 1;
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">eps</text>"#,
        w / 2.0,
        h - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 15 {:.2})">L2 error</text>"#,
        h / 2.0,
        h / 2.0
    );
    if let (Some(r), Some(b)) = (rate, intercept) {
        let (xa, xb) = pts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, c), p| {
                (a.min(p.0), c.max(p.0))
            });
        let _ = writeln!(
            s,
            r#"<line class="fit" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="steelblue" stroke-dasharray="6 4"/>"#,
            sx(xa),
            sy(r * xa + b),
            sx(xb),
            sy(r * xb + b)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12">slope {r:.3}</text>"#,
            w - margin - 90.0,
            margin - 10.0
        );
    }
    for &(x, y) in pts {
        let _ = writeln!(
            s,
            r#"<circle class="marker" cx="{:.2}" cy="{:.2}" r="4" fill="crimson"/>"#,
            sx(x),
            sy(y)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// `(L1, L2, Linf)` of `a - b` for cell-major fields on `grid`.
fn error_norms(a: &[f64], b: &[f64], grid: &DomainGrid) -> (f64, f64, f64) {
    let vol = grid.cell_volume();
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    let mut linf = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let e = (x - y).abs();
        l1 += vol * e;
        l2 += vol * e * e;
        linf = linf.max(e);
    }
    (l1, l2.sqrt(), linf)
}

/// Micro solutions for each `eps` against one macro reference, all at `t_end`.
pub fn eps_sweep(config: &Config) -> Result<ConvergenceReport> {
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("missing 'sweep' section".into()))?;
    let s = setup(config, false)?;
    let mut eps = sweep.eps.clone();
    if eps.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(Error::Config("eps values must be positive".into()));
    }
    eps.sort_by(|a, b| b.total_cmp(a));
    if eps.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("eps values must be distinct".into()));
    }
    // Validate every micro grid before any solve.
    let dom = config.domain()?;
    let macro_grid = DomainGrid::new(dom.lengths.clone(), dom.cells.clone())?;
    for &e in &eps {
        let g = micro_grid(config, e)?;
        if g.cells
            .iter()
            .zip(&macro_grid.cells)
            .any(|(f, c)| f % c != 0)
        {
            return Err(Error::Config(format!(
                "micro grid {:?} for eps = {e} is not a refinement of the macro grid {:?}",
                g.cells, macro_grid.cells
            )));
        }
    }
    let tensor = macro_tensor(config, &s)?;
    let route = match tensor {
        MacroTensor::Separable(_) => "separable",
        MacroTensor::Lagged(_) => "lagged",
    };
    let profile = initial_profile(config)?;
    if sweep.reference_refinement == 0 {
        return Err(Error::Config(
            "reference_refinement must be positive".into(),
        ));
    }
    let reference_on = |factor: usize| -> Result<Vec<f64>> {
        let grid = DomainGrid::new(
            dom.lengths.clone(),
            dom.cells.iter().map(|c| factor * c).collect(),
        )?;
        let stepper = Stepper::macroscopic(&s.model, &grid, &tensor, s.macro_stepping())?;
        let init = initial_state(&s.model, profile, &grid)?;
        let (state, _) = run_on(&stepper, &init, s.t_end)?;
        state.restrict_to(&macro_grid)
    };
    let reference = reference_on(sweep.reference_refinement)?;

    let rows: Vec<SweepRow> = eps
        .par_iter()
        .map(|&e| {
            let attempt = || -> Result<SweepRow> {
                let stepper = micro_stepper(config, &s, e)?;
                let init = initial_state(&s.model, profile, stepper.grid())?;
                let (state, _) = run_on(&stepper, &init, s.t_end)?;
                let avg = state.restrict_to(&macro_grid)?;
                let (l1, l2, linf) = error_norms(&avg, &reference, &macro_grid);
                Ok(SweepRow {
                    eps: e,
                    l1_error: l1,
                    l2_error: l2,
                    linf_error: linf,
                    micro_cells: stepper.grid().num_cells(),
                    failure: None,
                })
            };
            attempt().unwrap_or_else(|err| SweepRow {
                eps: e,
                l1_error: f64::NAN,
                l2_error: f64::NAN,
                linf_error: f64::NAN,
                micro_cells: 0,
                failure: Some(err.to_string()),
            })
        })
        .collect();

    let self_check = if sweep.self_check {
        let fine = reference_on(2 * sweep.reference_refinement)?;
        let (_, gap, _) = error_norms(&fine, &reference, &macro_grid);
        let smallest = rows
            .iter()
            .filter(|r| r.failure.is_none())
            .map(|r| r.l2_error)
            .fold(f64::INFINITY, f64::min);
        let ratio = gap / smallest;
        Some(SelfCheck {
            macro_gap: gap,
            ratio,
            passed: ratio < 0.1,
        })
    } else {
        None
    };

    let mut report = ConvergenceReport {
        model: s.model.name.clone(),
        eps_list: eps,
        rows,
        rate: None,
        fit_residual: None,
        monotone: true,
        macro_cells: macro_grid.cells.clone(),
        cells_per_period: config.micro.cells_per_period,
        dt: s.dt,
        t_end: s.t_end,
        route: route.into(),
        self_check,
    };
    report.finish();
    Ok(report)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn to_json_text<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::Internal(e.to_string()))
}

/// Things that can be written to an output directory.
pub enum Report<'a> {
    Convergence(&'a ConvergenceReport),
    Trajectory(&'a TrajectoryLog),
    Tensor(&'a EffectiveTensor),
}

/// Write `report` into `out_dir`; returns the files written.
pub fn emit_report(report: Report<'_>, out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    ensure_dir(out_dir)?;
    let mut written = Vec::new();
    match report {
        Report::Convergence(r) => {
            let csv = out_dir.join("sweep.csv");
            write(&csv, &r.csv())?;
            written.push(csv);
            let json = out_dir.join("sweep.json");
            write(&json, &to_json_text(r)?)?;
            written.push(json);
            if let Some(svg) = r.svg() {
                let path = out_dir.join("sweep.svg");
                write(&path, &svg)?;
                written.push(path);
            }
        }
        Report::Trajectory(log) => {
            let path = out_dir.join("trajectory.csv");
            log.write_csv(&path)?;
            written.push(path);
        }
        Report::Tensor(t) => {
            let json = out_dir.join("tensor.json");
            t.write_json(&json)?;
            written.push(json);
            let csv = out_dir.join("tensor.csv");
            t.write_csv(&csv)?;
            written.push(csv);
        }
    }
    Ok(written)
}

fn state_csv(state: &StateField) -> String {
    let d = state.grid.dim();
    let mut out = String::new();
    let cols: Vec<String> = (0..d)
        .map(|k| format!("x_{}", k + 1))
        .chain((0..state.n).map(|i| format!("u_{}", i + 1)))
        .collect();
    out.push_str(&cols.join(","));
    out.push('\n');
    for c in 0..state.grid.num_cells() {
        let row: Vec<String> = state
            .grid
            .center(c)
            .iter()
            .chain(state.cell(c))
            .map(|v| format!("{v}"))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Summary of a transient run, written as `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub model: String,
    pub cells: Vec<usize>,
    pub steps: usize,
    pub t_end: f64,
    pub mass_drift: f64,
    pub max_entropy_increase: Option<f64>,
    pub min_production: f64,
    pub in_region: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<crate::effective::CacheStats>,
}

fn write_run(
    out_dir: &Path,
    model: &DiffusionModel,
    state: &StateField,
    log: &TrajectoryLog,
    cache: Option<crate::effective::CacheStats>,
) -> Result<RunSummary> {
    emit_report(Report::Trajectory(log), out_dir)?;
    write(&out_dir.join("final_state.csv"), &state_csv(state))?;
    let summary = RunSummary {
        model: model.name.clone(),
        cells: state.grid.cells.clone(),
        steps: log.len().saturating_sub(1),
        t_end: state.time,
        mass_drift: state.mass_drift(),
        max_entropy_increase: (log.len() > 1).then(|| log.max_entropy_increase()),
        min_production: log.min_production(),
        in_region: state.in_closure(model),
        cache,
    };
    write(&out_dir.join("summary.json"), &to_json_text(&summary)?)?;
    Ok(summary)
}

/// `macro` command.
pub fn command_macro(config: &Config, out_dir: &Path) -> Result<RunSummary> {
    let (state, log, stepper) = run_macro(config)?;
    ensure_dir(out_dir)?;
    write_run(
        out_dir,
        stepper.model(),
        &state,
        &log,
        stepper.cache().map(|c| c.stats()),
    )
}

/// `micro` command; `eps` overrides `micro.eps`.
pub fn command_micro(config: &Config, eps: Option<f64>, out_dir: &Path) -> Result<RunSummary> {
    let eps = eps.or(config.micro.eps).ok_or_else(|| {
        Error::Config("eps is required for micro runs (--eps or micro.eps)".into())
    })?;
    let (state, log) = run_micro(config, eps)?;
    ensure_dir(out_dir)?;
    write_run(out_dir, &config.model()?, &state, &log, None)
}

/// `sweep` command.
pub fn command_sweep(config: &Config, out_dir: &Path) -> Result<ConvergenceReport> {
    let report = eps_sweep(config)?;
    emit_report(Report::Convergence(&report), out_dir)?;
    Ok(report)
}

/// Four-index tensor at `u`. For the nonlocal kind it is `A(u) (x) D_hom`.
pub fn tensor_at_state(config: &Config, u: &[f64]) -> Result<EffectiveTensor> {
    let model = config.model()?;
    let grid = config.cell_grid()?;
    let p = config.coefficient(&grid)?;
    let assembly = Arc::new(CellAssembly::new(&p, &grid)?);
    let normalization = config.cell.normalization;
    if u.len() != model.n || !model.in_closure(u, 1e-12) {
        return Err(Error::Config(format!(
            "state {u:?} is not admissible for model '{}'",
            model.name
        )));
    }
    match model.kind() {
        DegeneracyKind::LocalDegenerate => {
            let ah = ahat(&model, u, config.cell.delta)?;
            let cells = solve_coupled_on(
                &assembly,
                &ah,
                config.cell.delta,
                &CellSolveOptions::default(),
            )?;
            effective_tensor_from_cells(&model, u, &cells, normalization)
        }
        DegeneracyKind::NonlocalDegenerate => {
            let cells = solve_scalar_on(&assembly, &CellSolveOptions::default())?;
            let d_hom = dhom_from_cells(&cells, normalization)?;
            let a = model.diffusion_matrix(u);
            let (n, d) = (model.n, grid.dim());
            let mut values = vec![0.0; n * n * d * d];
            for i in 0..n {
                for l in 0..n {
                    for m in 0..d {
                        for k in 0..d {
                            values[((i * n + l) * d + m) * d + k] = a[(i, l)] * d_hom.dhom(m, k);
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
                delta: None,
                provenance: format!("A(u) x D_hom, {}", grid.id()),
            })
        }
    }
}

/// Read a state from `[u_1, ...]` or `{"u": [u_1, ...]}`.
pub fn parse_state(text: &str) -> Result<Vec<f64>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum StateFile {
        Plain(Vec<f64>),
        Wrapped { u: Vec<f64> },
    }
    match serde_json::from_str::<StateFile>(text) {
        Ok(StateFile::Plain(u)) | Ok(StateFile::Wrapped { u }) => Ok(u),
        Err(e) => Err(Error::Config(format!("state file: {e}"))),
    }
}

/// `effective` command.
pub fn command_effective(config: &Config, u: &[f64], out_dir: &Path) -> Result<EffectiveTensor> {
    let t = tensor_at_state(config, u)?;
    emit_report(Report::Tensor(&t), out_dir)?;
    Ok(t)
}

/// `cell` command: scalar correctors and `D_hom`, plus the coupled
/// correctors and `B` when `cell.state` is set for a local model.
pub fn command_cell(config: &Config, out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let model = config.model()?;
    let grid = config.cell_grid()?;
    let p = config.coefficient(&grid)?;
    let assembly = Arc::new(CellAssembly::new(&p, &grid)?);
    ensure_dir(out_dir)?;
    let mut written = Vec::new();
    let scalar = solve_scalar_on(&assembly, &CellSolveOptions::default())?;
    let path = out_dir.join("correctors_scalar.csv");
    scalar.write_csv(&path)?;
    written.push(path);
    let d_hom = dhom_from_cells(&scalar, config.cell.normalization)?;
    let path = out_dir.join("dhom.json");
    d_hom.write_json(&path)?;
    written.push(path);
    let path = out_dir.join("dhom.csv");
    d_hom.write_csv(&path)?;
    written.push(path);
    if let Some(u) = &config.cell.state {
        if model.kind() == DegeneracyKind::LocalDegenerate {
            let delta = config.cell.delta;
            let ah = ahat(&model, u, delta).map_err(|e| match e {
                Error::Input(m) => Error::Config(m),
                other => other,
            })?;
            let coupled = solve_coupled_on(&assembly, &ah, delta, &CellSolveOptions::default())?;
            let path = out_dir.join("correctors_coupled.csv");
            coupled.write_csv(&path)?;
            written.push(path);
            let b = effective_tensor_from_cells(&model, u, &coupled, config.cell.normalization)?;
            let path = out_dir.join("tensor.json");
            b.write_json(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// `check` command: the assumption report as pretty JSON.
pub fn command_check(
    name: &str,
    params: &Value,
    samples: usize,
    seed: u64,
) -> Result<(AssumptionReport, String)> {
    let model = builtin_model(name, params).map_err(|e| match e {
        Error::Parameter(m) => Error::Config(m),
        other => other,
    })?;
    if samples == 0 {
        return Err(Error::Config("samples must be positive".into()));
    }
    let report = check_assumptions(&model, samples, seed)?;
    let text = to_json_text(&report)?;
    Ok((report, text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base_config() -> Value {
        json!({
            "model": {"name": "scalar_affine", "params": {"a0": 1.0, "a1": 1.0}},
            "cell": {
                "geometry": {"dim": 1, "lengths": [1.0]},
                "resolution": 64,
                "coefficient": {"kind": "layered", "axis": 0, "breaks": [0.5], "values": [[1.0], [4.0]]}
            },
            "domain": {"lengths": [1.0], "cells": [16]},
            "initial": {"kind": "cosine", "base": [0.5], "amplitude": [0.25]},
            "time": {"dt": 1e-3, "t_end": 0.01},
            "micro": {"cells_per_period": 8},
            "sweep": {"eps": [0.25, 0.125, 0.0625]}
        })
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = base_config();
        v["tyop"] = json!(1);
        assert!(matches!(
            Config::from_json(&v.to_string()),
            Err(Error::Config(_))
        ));
        let mut v = base_config();
        v["time"]["dtt"] = json!(1);
        assert!(matches!(
            Config::from_json(&v.to_string()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn eps_must_tile_domain() {
        let mut v = base_config();
        v["sweep"]["eps"] = json!([0.3, 0.125, 0.0625]);
        let c = Config::from_json(&v.to_string()).unwrap();
        assert!(matches!(eps_sweep(&c), Err(Error::Config(_))));
    }

    #[test]
    fn small_sweep_report() {
        let c = Config::from_json(&base_config().to_string()).unwrap();
        let r = eps_sweep(&c).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert!(r.rate.is_some());
        assert_eq!(r.route, "separable");
        assert!(r.rows.iter().all(|row| row.l2_error.is_finite()));
        let csv = r.csv();
        assert_eq!(csv.lines().count(), 4);
        let svg = r.svg().unwrap();
        assert_eq!(svg.matches("class=\"marker\"").count(), 3);
        assert_eq!(svg.matches("class=\"fit\"").count(), 1);
    }

    #[test]
    fn constant_coefficient_sweep_is_eps_independent() {
        let mut v = base_config();
        v["cell"]["coefficient"] = json!({"kind": "constant", "values": [2.0]});
        v["micro"] = json!({"cells": [128]});
        let c = Config::from_json(&v.to_string()).unwrap();
        let r = eps_sweep(&c).unwrap();
        let first = r.rows[0].l2_error;
        for row in &r.rows {
            assert!((row.l2_error - first).abs() <= 1e-10);
        }
    }

    #[test]
    fn perforated_cell_runs_macro_only() {
        let mut v = base_config();
        v["model"] = json!({"name": "biofilm", "params": {}});
        v["cell"] = json!({
            "geometry": {"dim": 2, "lengths": [1.0, 1.0],
                         "hole": {"shape": "box", "center": [0.5, 0.5], "size": 0.5}},
            "resolution": 32
        });
        v["domain"] = json!({"lengths": [1.0, 1.0], "cells": [8, 8]});
        v["initial"] = json!({"kind": "cosine", "base": [0.3, 0.3], "amplitude": [0.1, -0.1]});
        v["macro"] = json!({"porosity_scaling": true});
        let c = Config::from_json(&v.to_string()).unwrap();
        let (stepper, _, _) = prepare_macro(&c).unwrap();
        assert!((stepper.config.porosity - 0.75).abs() < 1e-12);
        let (state, _, _) = run_macro(&c).unwrap();
        assert!(state.mass_drift() <= 1e-9);
        assert!(matches!(run_micro(&c, 0.25), Err(Error::Config(_))));

        v["cell"]["normalization"] = json!("cell");
        let c = Config::from_json(&v.to_string()).unwrap();
        assert!(matches!(run_macro(&c), Err(Error::Config(_))));
    }

    #[test]
    fn empty_report_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let r = ConvergenceReport::empty("x");
        let files = emit_report(Report::Convergence(&r), dir.path()).unwrap();
        assert!(!files.iter().any(|f| f.extension().unwrap() == "svg"));
        let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(text, "eps,l1_error,l2_error,linf_error\n");
    }

    #[test]
    fn state_file_forms() {
        assert_eq!(parse_state("[0.25, 0.25]").unwrap(), vec![0.25, 0.25]);
        assert_eq!(parse_state(r#"{"u": [0.5]}"#).unwrap(), vec![0.5]);
        assert!(matches!(parse_state("{}"), Err(Error::Config(_))));
    }

    #[test]
    fn least_squares_recovers_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x - 1.0).collect();
        let (s, b) = least_squares(&xs, &ys);
        assert!((s - 2.0).abs() < 1e-14 && (b + 1.0).abs() < 1e-14);
    }
}
