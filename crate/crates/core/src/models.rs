//! Cross-diffusion models: diffusion matrix `A(u)`, entropy density and its
//! derivatives, reactions, degeneracy data, and a sampling-based checker for
//! the structural assumptions (degenerate coercivity, growth bounds).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegeneracyKind {
    LocalDegenerate,
    NonlocalDegenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum MobilityLaw {
    /// Saturated three-species biofilm, `u_3 = 1 - u_1 - u_2`.
    Biofilm { d1: f64, d2: f64 },
    /// Avascular tumor growth (tumor cells, extracellular matrix, water).
    Tumor { beta: f64, theta: f64 },
    /// `a_ij = D_i (delta_ij u_{n+1} + u_i)`.
    IonTransport { diffusivities: Vec<f64> },
    /// Single species, `a(u) = a0 + a1 u`.
    ScalarAffine { a0: f64, a1: f64 },
    /// State-independent matrix, row-major.
    Constant { matrix: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum EntropyLaw {
    /// `h(u) = sum_{i=1}^{n+1} u_i (log u_i - 1) + offset`, `u_{n+1} = 1 - sum u_i`.
    /// The entropy variables are the logits `log(u_i / u_{n+1})`.
    SimplexLogit { offset: f64 },
    /// `h(u) = |u|^2 / 2` on the open unit box.
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Degeneracy {
    Local { exponents: Vec<f64> },
    Nonlocal { diffusivities: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum Reaction {
    #[default]
    None,
    /// `f_i = r_i u_i u_{n+1}`.
    Logistic { rates: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionModel {
    pub name: String,
    pub n: usize,
    pub mobility: MobilityLaw,
    pub entropy: EntropyLaw,
    pub degeneracy: Degeneracy,
    #[serde(default)]
    pub reaction: Reaction,
}

/// A state together with an accurately represented complement
/// `u_{n+1} = 1 - sum u_i`. Carrying the complement separately keeps the
/// entropy variables accurate when `u_{n+1}` is far below machine epsilon
/// relative to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    pub fractions: Vec<f64>,
    pub complement: f64,
}

impl Composition {
    pub fn from_fractions(u: &[f64]) -> Self {
        Composition {
            fractions: u.to_vec(),
            complement: 1.0 - u.iter().sum::<f64>(),
        }
    }
}

fn xlogx_minus_x(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * (x.ln() - 1.0)
    }
}

impl DiffusionModel {
    pub fn kind(&self) -> DegeneracyKind {
        match self.degeneracy {
            Degeneracy::Local { .. } => DegeneracyKind::LocalDegenerate,
            Degeneracy::Nonlocal { .. } => DegeneracyKind::NonlocalDegenerate,
        }
    }

    /// Degeneracy exponents `s_i` (local kind only).
    pub fn exponents(&self) -> Option<&[f64]> {
        match &self.degeneracy {
            Degeneracy::Local { exponents } => Some(exponents),
            Degeneracy::Nonlocal { .. } => None,
        }
    }

    /// Identifier that changes whenever any model parameter changes.
    pub fn id(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|_| self.name.clone())
    }

    /// Row-major `A(u)` into `out` (length `n*n`).
    pub fn fill_diffusion_matrix(&self, u: &[f64], out: &mut [f64]) {
        let n = self.n;
        match &self.mobility {
            MobilityLaw::Biofilm { d1, d2 } => {
                out[0] = d1 * (1.0 - u[0]);
                out[1] = -d2 * u[0];
                out[2] = -d1 * u[1];
                out[3] = d2 * (1.0 - u[1]);
            }
            MobilityLaw::Tumor { beta, theta } => {
                let (u1, u2) = (u[0], u[1]);
                out[0] = 2.0 * u1 * (1.0 - u1) - beta * theta * u1 * u2 * u2;
                out[1] = -2.0 * beta * u1 * u2 * (1.0 + theta * u1);
                out[2] = -2.0 * u1 * u2 + beta * theta * (1.0 - u2) * u2 * u2;
                out[3] = 2.0 * beta * u2 * (1.0 - u2) * (1.0 + theta * u1);
            }
            MobilityLaw::IonTransport { diffusivities } => {
                let solvent = 1.0 - u.iter().sum::<f64>();
                for i in 0..n {
                    for j in 0..n {
                        let delta = if i == j { solvent } else { 0.0 };
                        out[i * n + j] = diffusivities[i] * (delta + u[i]);
                    }
                }
            }
            MobilityLaw::ScalarAffine { a0, a1 } => out[0] = a0 + a1 * u[0],
            MobilityLaw::Constant { matrix } => {
                for i in 0..n {
                    for j in 0..n {
                        out[i * n + j] = matrix[i][j];
                    }
                }
            }
        }
    }

    pub fn diffusion_matrix(&self, u: &[f64]) -> DMatrix<f64> {
        let mut buf = vec![0.0; self.n * self.n];
        self.fill_diffusion_matrix(u, &mut buf);
        DMatrix::from_row_slice(self.n, self.n, &buf)
    }

    /// Entropy density with the convention `0 log 0 = 0`.
    pub fn entropy(&self, u: &[f64]) -> f64 {
        match &self.entropy {
            EntropyLaw::SimplexLogit { offset } => {
                let solvent = 1.0 - u.iter().sum::<f64>();
                u.iter().map(|&x| xlogx_minus_x(x)).sum::<f64>() + xlogx_minus_x(solvent) + offset
            }
            EntropyLaw::Quadratic => 0.5 * u.iter().map(|x| x * x).sum::<f64>(),
        }
    }

    pub fn entropy_variables(&self, c: &Composition) -> Vec<f64> {
        match &self.entropy {
            EntropyLaw::SimplexLogit { .. } => {
                let ls = c.complement.ln();
                c.fractions.iter().map(|x| x.ln() - ls).collect()
            }
            EntropyLaw::Quadratic => c.fractions.clone(),
        }
    }

    /// `h'(u)`.
    pub fn entropy_gradient(&self, u: &[f64]) -> Vec<f64> {
        self.entropy_variables(&Composition::from_fractions(u))
    }

    /// `h''(u)`.
    pub fn entropy_hessian(&self, u: &[f64]) -> DMatrix<f64> {
        let n = self.n;
        match &self.entropy {
            EntropyLaw::SimplexLogit { .. } => {
                let solvent = 1.0 - u.iter().sum::<f64>();
                DMatrix::from_fn(n, n, |i, j| {
                    let diag = if i == j { 1.0 / u[i] } else { 0.0 };
                    diag + 1.0 / solvent
                })
            }
            EntropyLaw::Quadratic => DMatrix::identity(n, n),
        }
    }

    /// `h''(u) A(u)`.
    pub fn hessian_mobility(&self, u: &[f64]) -> DMatrix<f64> {
        self.entropy_hessian(u) * self.diffusion_matrix(u)
    }

    /// Inverse of the entropy gradient, keeping the complement.
    pub fn composition_from_entropy_variables(&self, w: &[f64]) -> Result<Composition> {
        if w.len() != self.n {
            return Err(Error::Input(format!(
                "expected {} entropy variables, got {}",
                self.n,
                w.len()
            )));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("entropy variables must be finite".into()));
        }
        Ok(match &self.entropy {
            EntropyLaw::SimplexLogit { .. } => {
                let shift = w.iter().fold(0.0f64, |m, &x| m.max(x));
                let exps: Vec<f64> = w.iter().map(|&x| (x - shift).exp()).collect();
                let base = (-shift).exp();
                let denom = base + exps.iter().sum::<f64>();
                Composition {
                    fractions: exps.iter().map(|e| e / denom).collect(),
                    complement: base / denom,
                }
            }
            EntropyLaw::Quadratic => Composition::from_fractions(w),
        })
    }

    /// `(h')^{-1}(w)`; lands strictly inside the admissible region for the
    /// simplex-logit entropies.
    pub fn entropy_gradient_inverse(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(self.composition_from_entropy_variables(w)?.fractions)
    }

    pub fn reaction(&self, u: &[f64]) -> Vec<f64> {
        match &self.reaction {
            Reaction::None => vec![0.0; self.n],
            Reaction::Logistic { rates } => {
                let solvent = 1.0 - u.iter().sum::<f64>();
                u.iter().zip(rates).map(|(x, r)| r * x * solvent).collect()
            }
        }
    }

    pub fn has_reaction(&self) -> bool {
        !matches!(self.reaction, Reaction::None)
    }

    /// Open admissible region.
    pub fn in_region(&self, u: &[f64]) -> bool {
        if u.len() != self.n || u.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return false;
        }
        match &self.entropy {
            EntropyLaw::SimplexLogit { .. } => u.iter().sum::<f64>() < 1.0,
            EntropyLaw::Quadratic => u.iter().all(|&x| x < 1.0),
        }
    }

    /// Closure of the admissible region, up to `tol`.
    pub fn in_closure(&self, u: &[f64], tol: f64) -> bool {
        if u.len() != self.n || u.iter().any(|x| !(x.is_finite() && *x >= -tol)) {
            return false;
        }
        match &self.entropy {
            EntropyLaw::SimplexLogit { .. } => u.iter().sum::<f64>() <= 1.0 + tol,
            EntropyLaw::Quadratic => u.iter().all(|&x| x <= 1.0 + tol),
        }
    }

    /// Move a state of the closure strictly inside by a relative amount `delta`.
    pub fn interior_clamp(&self, u: &[f64], delta: f64) -> Vec<f64> {
        let mut v: Vec<f64> = u.iter().map(|x| x.clamp(0.0, 1.0)).collect();
        match &self.entropy {
            EntropyLaw::SimplexLogit { .. } => {
                let s: f64 = v.iter().sum();
                if s > 1.0 {
                    v.iter_mut().for_each(|x| *x /= s);
                }
                let share = delta / (self.n as f64 + 1.0);
                v.iter_mut().for_each(|x| *x = (*x + share) / (1.0 + delta));
            }
            EntropyLaw::Quadratic => {
                v.iter_mut()
                    .for_each(|x| *x = (*x + 0.5 * delta) / (1.0 + delta));
            }
        }
        v
    }

    /// Draw a state by sampling the entropy variables uniformly in
    /// `[-half_width, half_width]^n` and mapping back; for the quadratic
    /// entropy the variables are drawn in the unit box.
    pub fn sample_state<R: Rng>(&self, rng: &mut R, half_width: f64) -> Vec<f64> {
        match &self.entropy {
            EntropyLaw::SimplexLogit { .. } => {
                let w: Vec<f64> = (0..self.n)
                    .map(|_| rng.gen_range(-half_width..=half_width))
                    .collect();
                self.entropy_gradient_inverse(&w).expect("finite draw")
            }
            EntropyLaw::Quadratic => (0..self.n)
                .map(|_| rng.gen_range(1e-6..1.0 - 1e-6))
                .collect(),
        }
    }

    fn logit_corners(&self, half_width: f64) -> Vec<Vec<f64>> {
        if !matches!(self.entropy, EntropyLaw::SimplexLogit { .. }) || self.n > 6 {
            return Vec::new();
        }
        let levels = [-half_width, 0.0, half_width];
        let total = 3usize.pow(self.n as u32);
        (0..total)
            .map(|mut c| {
                let w: Vec<f64> = (0..self.n)
                    .map(|_| {
                        let l = levels[c % 3];
                        c /= 3;
                        l
                    })
                    .collect();
                self.entropy_gradient_inverse(&w).expect("finite corner")
            })
            .collect()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct BiofilmParams {
    #[serde(default = "one")]
    d1: f64,
    #[serde(default = "one")]
    d2: f64,
    #[serde(default)]
    reaction_rate: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TumorParams {
    #[serde(default = "one")]
    beta: f64,
    #[serde(default = "one")]
    theta: f64,
    #[serde(default)]
    reaction_rate: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct IonTransportParams {
    #[serde(default = "two_ones")]
    diffusivities: Vec<f64>,
    #[serde(default)]
    reaction_rate: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScalarAffineParams {
    #[serde(default = "one")]
    a0: f64,
    #[serde(default)]
    a1: f64,
    #[serde(default)]
    reaction_rate: Option<f64>,
}

fn one() -> f64 {
    1.0
}

fn two_ones() -> Vec<f64> {
    vec![1.0, 1.0]
}

fn logistic(rate: Option<f64>, n: usize) -> Reaction {
    match rate {
        Some(r) => Reaction::Logistic { rates: vec![r; n] },
        None => Reaction::None,
    }
}

fn parse_params<T: serde::de::DeserializeOwned>(name: &str, params: &Value) -> Result<T> {
    let v = if params.is_null() {
        Value::Object(Default::default())
    } else {
        params.clone()
    };
    serde_json::from_value(v).map_err(|e| Error::Parameter(format!("{name}: {e}")))
}

/// Coercivity constant of the tumor model: the best lower bound obtained by
/// splitting the off-diagonal term with Young's inequality, maximized over
/// the splitting weight in (0, 2).
pub fn tumor_coercivity(beta: f64, theta: f64) -> f64 {
    // Intersection of the decreasing branch 2 - e with the increasing
    // branch 2 beta (1 - beta theta^2 / (8 e)).
    let e = -(beta - 1.0) + ((beta - 1.0).powi(2) + beta * beta * theta * theta / 4.0).sqrt();
    if e >= 2.0 {
        // Both branches cannot be positive simultaneously.
        2.0 * beta * (1.0 - beta * theta * theta / 16.0)
    } else {
        2.0 - e
    }
}

pub const BUILTIN_MODELS: [&str; 4] = ["biofilm", "tumor", "ion_transport", "scalar_affine"];

/// Construct a registered model. `params` is a JSON object; missing keys take
/// their defaults (unit diffusivities, `beta = theta = 1`).
pub fn builtin_model(name: &str, params: &Value) -> Result<DiffusionModel> {
    let positive = |what: &str, v: f64| -> Result<()> {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::Parameter(format!(
                "{what} must be positive, got {v}"
            )))
        }
    };
    match name {
        "biofilm" => {
            let p: BiofilmParams = parse_params(name, params)?;
            positive("d1", p.d1)?;
            positive("d2", p.d2)?;
            Ok(DiffusionModel {
                name: name.into(),
                n: 2,
                mobility: MobilityLaw::Biofilm { d1: p.d1, d2: p.d2 },
                entropy: EntropyLaw::SimplexLogit { offset: 0.0 },
                degeneracy: Degeneracy::Local {
                    exponents: vec![-0.5, -0.5],
                },
                reaction: logistic(p.reaction_rate, 2),
            })
        }
        "tumor" => {
            let p: TumorParams = parse_params(name, params)?;
            positive("beta", p.beta)?;
            positive("theta", p.theta)?;
            if p.theta >= 4.0 * p.beta.sqrt() {
                return Err(Error::Parameter(format!(
                    "tumor model requires theta < 4 sqrt(beta); got theta = {}, beta = {}",
                    p.theta, p.beta
                )));
            }
            if tumor_coercivity(p.beta, p.theta) <= 0.0 {
                return Err(Error::Parameter(format!(
                    "tumor model requires beta theta^2 < 16 for a positive coercivity constant; got {}",
                    p.beta * p.theta * p.theta
                )));
            }
            Ok(DiffusionModel {
                name: name.into(),
                n: 2,
                mobility: MobilityLaw::Tumor {
                    beta: p.beta,
                    theta: p.theta,
                },
                entropy: EntropyLaw::SimplexLogit { offset: 0.0 },
                degeneracy: Degeneracy::Local {
                    exponents: vec![0.0, 0.0],
                },
                reaction: logistic(p.reaction_rate, 2),
            })
        }
        "ion_transport" => {
            let p: IonTransportParams = parse_params(name, params)?;
            if p.diffusivities.is_empty() {
                return Err(Error::Parameter("at least one diffusivity required".into()));
            }
            for &d in &p.diffusivities {
                positive("diffusivity", d)?;
            }
            let n = p.diffusivities.len();
            Ok(DiffusionModel {
                name: name.into(),
                n,
                mobility: MobilityLaw::IonTransport {
                    diffusivities: p.diffusivities.clone(),
                },
                entropy: EntropyLaw::SimplexLogit {
                    offset: (n + 1) as f64,
                },
                degeneracy: Degeneracy::Nonlocal {
                    diffusivities: p.diffusivities,
                },
                reaction: logistic(p.reaction_rate, n),
            })
        }
        "scalar_affine" => {
            let p: ScalarAffineParams = parse_params(name, params)?;
            positive("a0", p.a0)?;
            positive("a0 + a1", p.a0 + p.a1)?;
            Ok(DiffusionModel {
                name: name.into(),
                n: 1,
                mobility: MobilityLaw::ScalarAffine { a0: p.a0, a1: p.a1 },
                entropy: EntropyLaw::SimplexLogit { offset: 0.0 },
                degeneracy: Degeneracy::Local {
                    exponents: vec![0.0],
                },
                reaction: logistic(p.reaction_rate, 1),
            })
        }
        other => Err(Error::Parameter(format!(
            "unknown model '{other}'; expected one of {BUILTIN_MODELS:?}"
        ))),
    }
}

/// A sampled counterexample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub assumption: String,
    pub u: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z: Option<Vec<f64>>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub model: String,
    pub kind: DegeneracyKind,
    pub samples: usize,
    /// Number of `(u, z)` pairs evaluated on the sphere design.
    pub pairs: usize,
    /// Largest coercivity constant valid on every sample. For the local kind
    /// this is the A2 constant; for the nonlocal kind it is the constant in
    /// front of `u_{n+1} sum z_i^2/u_i + (sum z_i)^2/(2 u_{n+1})`.
    pub alpha_estimate: f64,
    /// Growth constant over species with `s_j > 0`; `None` when no species
    /// has a positive exponent.
    #[serde(rename = "CA_estimate")]
    pub ca_estimate: Option<f64>,
    #[serde(rename = "A6_constant")]
    pub a6_constant: Option<f64>,
    /// Reaction growth constant; `None` without reactions.
    #[serde(rename = "Cf_estimate")]
    pub cf_estimate: Option<f64>,
    pub violation_count: usize,
    pub violations: Vec<Violation>,
}

const MAX_WITNESSES: usize = 64;
const LOGIT_HALF_WIDTH: f64 = 16.0;

/// Unit vectors: the `2n` signed axes, a deterministic low-discrepancy set
/// (equispaced on the circle for `n = 2`, Fibonacci sphere for `n = 3`) and
/// `random` seeded draws.
fn sphere_design<R: Rng>(n: usize, random: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut zs = Vec::new();
    for i in 0..n {
        for s in [1.0, -1.0] {
            let mut z = vec![0.0; n];
            z[i] = s;
            zs.push(z);
        }
    }
    match n {
        2 => {
            let k = 32;
            for j in 0..k {
                let a = std::f64::consts::PI * (j as f64 + 0.5) / k as f64;
                zs.push(vec![a.cos(), a.sin()]);
            }
        }
        3 => {
            let k = 48;
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            for j in 0..k {
                let y = 1.0 - 2.0 * (j as f64 + 0.5) / k as f64;
                let r = (1.0 - y * y).sqrt();
                let phi = golden * j as f64;
                zs.push(vec![r * phi.cos(), y, r * phi.sin()]);
            }
        }
        _ => {}
    }
    let mut drawn = 0;
    while drawn < random {
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            zs.push(z.iter().map(|x| x / norm).collect());
            drawn += 1;
        }
    }
    zs
}

fn quadratic_form(m: &DMatrix<f64>, z: &[f64]) -> f64 {
    let zv = DVector::from_column_slice(z);
    (zv.transpose() * m * &zv)[(0, 0)]
}

/// Smallest eigenvalue and eigenvector of the symmetric part of `m`.
fn min_sym_eig(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let (k, &lam) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    (lam, eig.eigenvectors.column(k).into_owned())
}

/// Sample the admissible region and the unit sphere and estimate the
/// structural constants. Deterministic for a given seed.
pub fn check_assumptions(
    model: &DiffusionModel,
    sample_count: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    if sample_count == 0 {
        return Err(Error::Parameter("sample_count must be positive".into()));
    }
    let n = model.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = model.logit_corners(LOGIT_HALF_WIDTH);
    states.truncate(sample_count);
    while states.len() < sample_count {
        let u = model.sample_state(&mut rng, LOGIT_HALF_WIDTH);
        states.push(u);
    }
    let zs = sphere_design(n, 8, &mut rng);

    let mut report = AssumptionReport {
        model: model.name.clone(),
        kind: model.kind(),
        samples: states.len(),
        pairs: 0,
        alpha_estimate: f64::INFINITY,
        ca_estimate: None,
        a6_constant: None,
        cf_estimate: None,
        violation_count: 0,
        violations: Vec::new(),
    };
    let record = |report: &mut AssumptionReport, v: Violation| {
        report.violation_count += 1;
        if report.violations.len() < MAX_WITNESSES {
            report.violations.push(v);
        }
    };

    for u in &states {
        if !model.in_region(u) {
            return Err(Error::Internal(format!(
                "sampler produced a state outside the admissible region: {u:?}"
            )));
        }
        let m = model.hessian_mobility(u);
        let a = model.diffusion_matrix(u);
        match &model.degeneracy {
            Degeneracy::Local { exponents } => {
                let weight: Vec<f64> = u.iter().zip(exponents).map(|(x, s)| x.powf(*s)).collect();
                // Exact minimum of z^T M z / sum (u_i^{s_i} z_i)^2 over z.
                let winv = DMatrix::from_diagonal(&DVector::from_iterator(
                    n,
                    weight.iter().map(|w| 1.0 / w),
                ));
                let scaled = &winv * &m * &winv;
                let (lam, vec) = min_sym_eig(&scaled);
                let mut local_min = lam;
                let mut witness: Vec<f64> = vec.iter().zip(&weight).map(|(y, w)| y / w).collect();
                for z in &zs {
                    let denom: f64 = z.iter().zip(&weight).map(|(zi, w)| (zi * w).powi(2)).sum();
                    let ratio = quadratic_form(&m, z) / denom;
                    report.pairs += 1;
                    if ratio < local_min {
                        local_min = ratio;
                        witness = z.clone();
                    }
                }
                report.alpha_estimate = report.alpha_estimate.min(local_min);
                if local_min.is_nan() || local_min <= 1e-12 {
                    let norm = witness.iter().map(|x| x * x).sum::<f64>().sqrt();
                    record(
                        &mut report,
                        Violation {
                            assumption: "A2".into(),
                            u: u.clone(),
                            z: Some(witness.iter().map(|x| x / norm).collect()),
                            value: local_min,
                        },
                    );
                }
                for j in 0..n {
                    if exponents[j] > 0.0 {
                        for i in 0..n {
                            let r = a[(i, j)].abs() / weight[j];
                            let c = report.ca_estimate.get_or_insert(0.0);
                            *c = c.max(r);
                            if !r.is_finite() {
                                record(
                                    &mut report,
                                    Violation {
                                        assumption: "A3".into(),
                                        u: u.clone(),
                                        z: None,
                                        value: r,
                                    },
                                );
                            }
                        }
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        let r = m[(i, j)] / (weight[i] * weight[j]);
                        let c = report.a6_constant.get_or_insert(0.0);
                        *c = c.max(r);
                        if !r.is_finite() {
                            record(
                                &mut report,
                                Violation {
                                    assumption: "A6".into(),
                                    u: u.clone(),
                                    z: None,
                                    value: r,
                                },
                            );
                        }
                    }
                }
            }
            Degeneracy::Nonlocal { diffusivities } => {
                let solvent = 1.0 - u.iter().sum::<f64>();
                let mut structural = 0.0f64;
                for i in 0..n {
                    for j in 0..n {
                        let delta = if i == j { solvent } else { 0.0 };
                        let expected = diffusivities[i] * (delta + u[i]);
                        structural = structural.max((a[(i, j)] - expected).abs());
                    }
                }
                if structural > 1e-12 {
                    record(
                        &mut report,
                        Violation {
                            assumption: "nonlocal_structure".into(),
                            u: u.clone(),
                            z: None,
                            value: structural,
                        },
                    );
                }
                // Reference form G = u_{n+1} diag(1/u) + 11^T / (2 u_{n+1}).
                let g = DMatrix::from_fn(n, n, |i, j| {
                    let d = if i == j { solvent / u[i] } else { 0.0 };
                    d + 0.5 / solvent
                });
                let chol = g.clone().cholesky().ok_or_else(|| {
                    Error::Internal("reference form not positive definite".into())
                })?;
                let linv = chol
                    .l()
                    .try_inverse()
                    .ok_or_else(|| Error::Internal("singular Cholesky factor".into()))?;
                let scaled = &linv * &m * linv.transpose();
                let (lam, _) = min_sym_eig(&scaled);
                let mut local_min = lam;
                let mut witness = None;
                for z in &zs {
                    let ratio = quadratic_form(&m, z) / quadratic_form(&g, z);
                    report.pairs += 1;
                    if ratio < local_min {
                        local_min = ratio;
                        witness = Some(z.clone());
                    }
                }
                report.alpha_estimate = report.alpha_estimate.min(local_min);
                let p0 = diffusivities.iter().cloned().fold(f64::INFINITY, f64::min);
                if local_min < p0 * (1.0 - 1e-9) {
                    record(
                        &mut report,
                        Violation {
                            assumption: "nonlocal_coercivity".into(),
                            u: u.clone(),
                            z: witness,
                            value: local_min,
                        },
                    );
                }
            }
        }
        if model.has_reaction() {
            let f = model.reaction(u);
            let w = model.entropy_gradient(u);
            let growth =
                f.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / (1.0 + model.entropy(u));
            let c = report.cf_estimate.get_or_insert(0.0);
            *c = c.max(growth);
        }
    }
    Ok(report)
}

/// Local entropy production `grad u : h''(u) A(u) grad u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductionDensity {
    pub value: f64,
    /// True when `u` sat on the boundary of the admissible region and was
    /// moved inside before evaluating `h''`.
    pub clamped: bool,
}

pub const PRODUCTION_CLAMP: f64 = 1e-10;

/// `grad_u[i][k]` is the derivative of species `i` along axis `k`.
pub fn entropy_production_density(
    model: &DiffusionModel,
    u: &[f64],
    grad_u: &[Vec<f64>],
) -> Result<ProductionDensity> {
    if grad_u.len() != model.n {
        return Err(Error::Input(format!(
            "gradient must have {} rows, got {}",
            model.n,
            grad_u.len()
        )));
    }
    let clamped = !model.in_region(u);
    let state = if clamped {
        model.interior_clamp(u, PRODUCTION_CLAMP)
    } else {
        u.to_vec()
    };
    let m = model.hessian_mobility(&state);
    let d = grad_u.first().map_or(0, |g| g.len());
    let mut value = 0.0;
    for k in 0..d {
        let g: Vec<f64> = grad_u.iter().map(|row| row[k]).collect();
        value += quadratic_form(&m, &g);
    }
    Ok(ProductionDensity { value, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn biofilm_hessian_mobility_quarter() {
        let m = builtin_model("biofilm", &json!({"d1": 1.0, "d2": 1.0})).unwrap();
        let hm = m.hessian_mobility(&[0.25, 0.25]);
        assert!(close(hm[(0, 0)], 4.0, 1e-12));
        assert!(close(hm[(1, 1)], 4.0, 1e-12));
        assert!(close(hm[(0, 1)], 0.0, 1e-12));
        assert!(close(hm[(1, 0)], 0.0, 1e-12));
    }

    #[test]
    fn tumor_hessian_mobility_matches_closed_form() {
        let m = builtin_model("tumor", &json!({"beta": 1.0, "theta": 1.0})).unwrap();
        let hm = m.hessian_mobility(&[0.5, 0.25]);
        assert!(close(hm[(0, 0)], 2.0, 1e-12));
        assert!(close(hm[(0, 1)], 0.0, 1e-12));
        assert!(close(hm[(1, 0)], 0.25, 1e-12));
        assert!(close(hm[(1, 1)], 3.0, 1e-12));
    }

    #[test]
    fn ion_transport_matrix() {
        let m = builtin_model("ion_transport", &json!({"diffusivities": [1.0, 1.0]})).unwrap();
        let third = 1.0 / 3.0;
        let a = m.diffusion_matrix(&[third, third]);
        assert!(close(a[(0, 0)], 2.0 * third, 1e-15));
        assert!(close(a[(0, 1)], third, 1e-15));
        assert!(close(a[(1, 0)], third, 1e-15));
        assert!(close(a[(1, 1)], 2.0 * third, 1e-15));
        assert_eq!(m.kind(), DegeneracyKind::NonlocalDegenerate);
        assert!(m.exponents().is_none());
    }

    #[test]
    fn builtin_exponents_and_kinds() {
        let b = builtin_model("biofilm", &Value::Null).unwrap();
        assert_eq!(b.exponents(), Some(&[-0.5, -0.5][..]));
        let t = builtin_model("tumor", &Value::Null).unwrap();
        assert_eq!(t.exponents(), Some(&[0.0, 0.0][..]));
        assert!(matches!(
            builtin_model("nope", &Value::Null),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            builtin_model("biofilm", &json!({"d1": -1.0})),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            builtin_model("biofilm", &json!({"typo": 1.0})),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn tumor_parameter_admissibility() {
        assert!(matches!(
            builtin_model("tumor", &json!({"beta": 1.0, "theta": 4.0})),
            Err(Error::Parameter(_))
        ));
        // Admitted by theta < 4 sqrt(beta) but beta theta^2 = 36 >= 16.
        assert!(matches!(
            builtin_model("tumor", &json!({"beta": 4.0, "theta": 3.0})),
            Err(Error::Parameter(_))
        ));
        assert!(builtin_model("tumor", &json!({"beta": 1.0, "theta": 3.9})).is_ok());
    }

    #[test]
    fn tumor_coercivity_closed_form_matches_brute_force() {
        for &(beta, theta) in &[(1.0, 1.0), (2.0, 1.5), (0.5, 3.0), (1.0, 3.5)] {
            let mut best = f64::NEG_INFINITY;
            let k = 200_000;
            for j in 1..k {
                let e = 2.0 * j as f64 / k as f64;
                let v = (2.0 - e).min(2.0 * beta * (1.0 - beta * theta * theta / (8.0 * e)));
                best = best.max(v);
            }
            let kappa = tumor_coercivity(beta, theta);
            assert!((kappa - best).abs() < 1e-4, "beta={beta} theta={theta}");
        }
        assert!((tumor_coercivity(1.0, 1.0) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn logit_inverse_examples() {
        let m = builtin_model("ion_transport", &Value::Null).unwrap();
        let u = m.entropy_gradient_inverse(&[0.0, 0.0]).unwrap();
        assert!(close(u[0], 1.0 / 3.0, 1e-15) && close(u[1], 1.0 / 3.0, 1e-15));
        let u = m.entropy_gradient_inverse(&[2f64.ln(), 0.0]).unwrap();
        assert!(close(u[0], 0.5, 1e-15) && close(u[1], 0.25, 1e-15));
        assert!(matches!(
            m.entropy_gradient_inverse(&[f64::NAN, 0.0]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn entropy_convention_at_boundary() {
        let m = builtin_model("ion_transport", &Value::Null).unwrap();
        // u_3 = 0: 0 log 0 = 0, h = 2 (0.5 (log 0.5 - 1)) + 3.
        let h = m.entropy(&[0.5, 0.5]);
        assert!(close(h, 0.5f64.ln() - 1.0 + 3.0, 1e-15));
        // Continuity as the solvent fraction vanishes.
        let eps = 1e-12;
        let h2 = m.entropy(&[0.5 - eps, 0.5]);
        assert!((h - h2).abs() < 1e-9);
    }

    #[test]
    fn production_density_examples() {
        let b = builtin_model("biofilm", &Value::Null).unwrap();
        let p = entropy_production_density(&b, &[0.25, 0.25], &[vec![1.0], vec![0.0]]).unwrap();
        assert!(close(p.value, 4.0, 1e-12) && !p.clamped);
        let zero = entropy_production_density(&b, &[0.25, 0.25], &[vec![0.0], vec![0.0]]).unwrap();
        assert_eq!(zero.value, 0.0);
        let t = builtin_model("tumor", &Value::Null).unwrap();
        let p = entropy_production_density(&t, &[0.5, 0.25], &[vec![1.0], vec![1.0]]).unwrap();
        assert!(close(p.value, 5.25, 1e-12));
        let p = entropy_production_density(&b, &[0.0, 0.25], &[vec![1.0], vec![1.0]]).unwrap();
        assert!(p.clamped && p.value.is_finite() && p.value >= 0.0);
    }

    #[test]
    fn biofilm_assumption_report() {
        let m = builtin_model("biofilm", &json!({"d1": 1.0, "d2": 1.0})).unwrap();
        let r = check_assumptions(&m, 300, 0).unwrap();
        assert!(r.violations.is_empty());
        // Round-off in the solvent fraction near the vertices costs a few digits.
        assert!(r.alpha_estimate >= 1.0 - 1e-6, "alpha {}", r.alpha_estimate);
        assert!(r.ca_estimate.is_none());
        // (h''A)_ii / u_i^{-1} = D_i.
        assert!((r.a6_constant.unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tumor_assumption_report_reaches_kappa() {
        let m = builtin_model("tumor", &json!({"beta": 1.0, "theta": 1.0})).unwrap();
        let r = check_assumptions(&m, 500, 3).unwrap();
        assert!(r.violations.is_empty());
        let kappa = tumor_coercivity(1.0, 1.0);
        assert!(r.alpha_estimate >= kappa - 1e-9);
        assert!(
            (r.alpha_estimate - kappa).abs() < 1e-6,
            "alpha {}",
            r.alpha_estimate
        );
    }

    #[test]
    fn antisymmetric_model_violates_coercivity() {
        let m = DiffusionModel {
            name: "antisymmetric".into(),
            n: 2,
            mobility: MobilityLaw::Constant {
                matrix: vec![vec![0.0, 1.0], vec![-1.0, 0.0]],
            },
            entropy: EntropyLaw::Quadratic,
            degeneracy: Degeneracy::Local {
                exponents: vec![0.0, 0.0],
            },
            reaction: Reaction::None,
        };
        let r = check_assumptions(&m, 20, 0).unwrap();
        assert_eq!(r.violation_count, 20);
        assert_eq!(r.violations[0].assumption, "A2");
        assert!(r.alpha_estimate.abs() < 1e-12);
    }

    #[test]
    fn ion_transport_coercivity_report() {
        let m = builtin_model("ion_transport", &json!({"diffusivities": [0.5, 2.0, 1.0]})).unwrap();
        let r = check_assumptions(&m, 200, 1).unwrap();
        assert!(r.violations.is_empty(), "{:?}", r.violations.first());
        assert!(r.alpha_estimate >= 0.5 * (1.0 - 1e-9));
    }

    #[test]
    fn report_is_deterministic_and_serializes() {
        let m = builtin_model("tumor", &Value::Null).unwrap();
        let a = serde_json::to_string(&check_assumptions(&m, 50, 7).unwrap()).unwrap();
        let b = serde_json::to_string(&check_assumptions(&m, 50, 7).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("\"alpha_estimate\"") && a.contains("\"A6_constant\""));
    }

    #[test]
    fn logistic_reaction_growth_is_reported() {
        let m = builtin_model("biofilm", &json!({"reaction_rate": 0.5})).unwrap();
        let r = check_assumptions(&m, 100, 0).unwrap();
        let cf = r.cf_estimate.unwrap();
        assert!(cf.is_finite());
    }
}
