//! Control problems: coefficients with their symbolic derivatives, the
//! control domain, horizon and the mean-constraint threshold.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::expr::{parse_coefficient, CoefficientExpr, Expr, ExprError, Shape, Variables};

/// Lattice resolution used when a box domain has to be enumerated.
pub const BOX_LATTICE_POINTS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum ControlDomain {
    Finite { points: Vec<Vec<f64>> },
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

impl ControlDomain {
    pub fn finite(points: Vec<Vec<f64>>) -> Result<Self> {
        let Some(k) = points.first().map(Vec::len) else {
            return Err(Error::Config("finite control domain needs at least one point".into()));
        };
        if k == 0 || points.iter().any(|p| p.len() != k) {
            return Err(Error::Dimension("control points must share a positive dimension".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if points[..i].iter().any(|q| q == p) {
                return Err(Error::Config(format!("duplicate control point {p:?}")));
            }
        }
        Ok(ControlDomain::Finite { points })
    }

    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Dimension("box bounds must have equal positive length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::Config("box control domain needs lower <= upper".into()));
        }
        Ok(ControlDomain::Box { lower, upper })
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlDomain::Finite { points } => points[0].len(),
            ControlDomain::Box { lower, .. } => lower.len(),
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        if u.len() != self.dim() {
            return false;
        }
        match self {
            ControlDomain::Finite { points } => points
                .iter()
                .any(|p| p.iter().zip(u).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs()))),
            ControlDomain::Box { lower, upper } => {
                u.iter().zip(lower.iter().zip(upper)).all(|(v, (l, h))| *l <= *v && *v <= *h)
            }
        }
    }

    /// All points for a finite domain; a `per_axis`-point lattice for a box.
    pub fn evaluation_points(&self, per_axis: usize) -> Vec<Vec<f64>> {
        match self {
            ControlDomain::Finite { points } => points.clone(),
            ControlDomain::Box { lower, upper } => {
                let axes: Vec<Vec<f64>> = lower
                    .iter()
                    .zip(upper)
                    .map(|(l, h)| {
                        if per_axis <= 1 || l == h {
                            vec![*l]
                        } else {
                            (0..per_axis).map(|i| l + (h - l) * i as f64 / (per_axis - 1) as f64).collect()
                        }
                    })
                    .collect();
                let mut out = vec![Vec::new()];
                for axis in &axes {
                    out = out
                        .into_iter()
                        .flat_map(|prefix| {
                            axis.iter().map(move |v| {
                                let mut p = prefix.clone();
                                p.push(*v);
                                p
                            })
                        })
                        .collect();
                }
                out
            }
        }
    }
}

/// A coefficient with its first and second state derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Differentiated {
    pub value: CoefficientExpr,
    pub dx: CoefficientExpr,
    pub dxx: CoefficientExpr,
}

impl Differentiated {
    pub fn new(value: CoefficientExpr, vars: &Variables) -> Self {
        let dx = value.jacobian(vars);
        let dxx = dx.jacobian(vars);
        Differentiated { value, dx, dxx }
    }
}

/// Full problem definition. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub name: String,
    pub state_dim: usize,
    pub noise_dim: usize,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub alpha: f64,
    pub domain: ControlDomain,
    /// Seed carried by the problem source, if any.
    pub seed: Option<u64>,
    pub vars: Variables,
    /// Drift, `[m]`.
    pub b: Differentiated,
    /// Diffusion, `[m, d]`; column `j` is the `j`-th noise loading.
    pub sigma: Differentiated,
    pub f: Differentiated,
    pub g: Differentiated,
    pub phi: Differentiated,
    /// Constraint rate integrand `phi_x' b + 1/2 sum_j sigma_j' phi_xx sigma_j`.
    pub l: Differentiated,
}

/// Sources for every coefficient; vector/matrix entries row-major.
#[derive(Debug, Clone)]
pub struct ProblemSource<'a> {
    pub name: &'a str,
    pub state_dim: usize,
    pub noise_dim: usize,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub alpha: f64,
    pub domain: ControlDomain,
    pub seed: Option<u64>,
    pub b: &'a str,
    pub sigma: &'a str,
    pub f: &'a str,
    pub g: &'a str,
    pub phi: &'a str,
}

impl ProblemSpec {
    pub fn build(src: ProblemSource<'_>) -> Result<Self> {
        let (m, d) = (src.state_dim, src.noise_dim);
        if m == 0 || d == 0 {
            return Err(Error::Dimension("state and noise dimensions must be positive".into()));
        }
        if src.x0.len() != m {
            return Err(Error::Dimension(format!("x0 has {} entries, expected {m}", src.x0.len())));
        }
        if !(src.horizon > 0.0) || !src.horizon.is_finite() {
            return Err(Error::Config("horizon T must be positive".into()));
        }
        let k = src.domain.dim();
        let vars = Variables::standard(m, k);
        let parse = |what: &str, s: &str, shape: Shape| {
            parse_coefficient(s, shape, &vars).map_err(|e| Error::Coefficient { what: what.to_string(), source: e })
        };
        let vector = if m == 1 { Shape::Scalar } else { Shape::Vector(m) };
        let mut b = parse("b", src.b, vector)?;
        if m == 1 {
            b = CoefficientExpr::new(vec![1], vec![b.expr(0).clone()]);
        }
        let sigma_src = parse("sigma", src.sigma, if m * d == 1 { Shape::Scalar } else { Shape::Matrix(m, d) })?;
        let sigma = CoefficientExpr::new(vec![m, d], (0..m * d).map(|i| sigma_src.expr(i).clone()).collect());
        let f = parse("f", src.f, Shape::Scalar)?;
        let g = parse("g", src.g, Shape::Scalar)?;
        let phi = parse("phi", src.phi, Shape::Scalar)?;
        for (what, c) in [("g", &g), ("phi", &phi)] {
            if (0..k).any(|i| c.depends_on(vars.control(i))) {
                return Err(Error::Coefficient {
                    what: what.to_string(),
                    source: ExprError::ControlDependent(what.to_string()),
                });
            }
        }

        let b = Differentiated::new(b, &vars);
        let sigma = Differentiated::new(sigma, &vars);
        let phi = Differentiated::new(phi, &vars);
        let l = CoefficientExpr::new(vec![], vec![constraint_integrand(&b.value, &sigma.value, &phi, m, d)]);

        let spec = ProblemSpec {
            name: src.name.to_string(),
            state_dim: m,
            noise_dim: d,
            x0: src.x0,
            horizon: src.horizon,
            alpha: src.alpha,
            domain: src.domain,
            seed: src.seed,
            b,
            sigma,
            f: Differentiated::new(f, &vars),
            g: Differentiated::new(g, &vars),
            phi,
            l: Differentiated::new(l, &vars),
            vars,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let phi0 = self.phi.value.eval_checked(&self.point(&self.x0, &vec![0.0; self.control_dim()]), &self.vars)?[0];
        if !(self.alpha > phi0) {
            return Err(Error::Trivial { alpha: self.alpha, phi0 });
        }
        for u in self.domain.evaluation_points(BOX_LATTICE_POINTS) {
            let pt = self.point(&self.x0, &u);
            for c in [&self.b, &self.sigma, &self.f, &self.g, &self.phi, &self.l] {
                c.value.eval_checked(&pt, &self.vars)?;
                c.dx.eval_checked(&pt, &self.vars)?;
                c.dxx.eval_checked(&pt, &self.vars)?;
            }
        }
        Ok(())
    }

    /// Same problem with a different constraint threshold.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        let spec = ProblemSpec { alpha, ..self.clone() };
        spec.validate()?;
        Ok(spec)
    }

    pub fn control_dim(&self) -> usize {
        self.domain.dim()
    }

    /// Variable vector `[x, u]` for expression evaluation.
    pub fn point(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(x.len() + u.len());
        v.extend_from_slice(x);
        v.extend_from_slice(u);
        v
    }

    /// True when the diffusion coefficient is symbolically zero.
    pub fn is_deterministic(&self) -> bool {
        self.sigma.value.is_identically_zero()
    }

    pub fn phi_at(&self, x: &[f64]) -> f64 {
        let mut pt = x.to_vec();
        pt.resize(self.vars.len(), 0.0);
        self.phi.value.eval_scalar(&pt)
    }
}

fn constraint_integrand(b: &CoefficientExpr, sigma: &CoefficientExpr, phi: &Differentiated, m: usize, d: usize) -> Expr {
    let mut acc = Expr::Const(0.0);
    for i in 0..m {
        acc = Expr::sum(acc, Expr::product(phi.dx.expr(i).clone(), b.expr(i).clone()));
    }
    for j in 0..d {
        for a in 0..m {
            for c in 0..m {
                let hess = phi.dxx.expr(a * m + c);
                if hess.is_zero() {
                    continue;
                }
                let term = Expr::product(
                    Expr::product(sigma.expr(a * d + j).clone(), hess.clone()),
                    sigma.expr(c * d + j).clone(),
                );
                acc = Expr::sum(acc, Expr::product(Expr::Const(0.5), term));
            }
        }
    }
    acc.simplify()
}

// ---------------------------------------------------------------------------
// Registry

/// Names accepted by [`load_problem`] besides file paths.
pub const REGISTRY: &[&str] = &["example1", "example2", "lq-linear", "nonlinear"];

/// Parameters of the `lq-linear` registry problem.
pub mod lq {
    pub const A: f64 = 0.5;
    pub const C: f64 = 1.0;
    pub const S0: f64 = 0.3;
}

const DEFAULT_SEED: u64 = 20_240_601;

pub fn registry_problem(name: &str) -> Result<ProblemSpec> {
    let two_points = || ControlDomain::finite(vec![vec![1.0], vec![2.0]]);
    let base = |name, x0: f64, b, sigma, f, g, phi| -> Result<ProblemSpec> {
        ProblemSpec::build(ProblemSource {
            name,
            state_dim: 1,
            noise_dim: 1,
            x0: vec![x0],
            horizon: 1.0,
            alpha: 1.0,
            domain: two_points()?,
            seed: Some(DEFAULT_SEED),
            b,
            sigma,
            f,
            g,
            phi,
        })
    };
    match name {
        "example1" => base("example1", 0.0, "x + u", "0", "u", "0", "x"),
        "example2" => base("example2", 0.5, "1", "u", "u", "0", "x"),
        "lq-linear" => {
            let b = format!("{}*x + {}*u", lq::A, lq::C);
            let s = format!("{}", lq::S0);
            base("lq-linear", 0.0, &b, &s, "0.5*x^2", "0.5*x^2", "x")
        }
        "nonlinear" => base("nonlinear", 0.0, "x + u", "0.3*u", "u", "0", "x^2"),
        other => Err(Error::UnknownProblem(other.to_string())),
    }
}

// ---------------------------------------------------------------------------
// Problem files

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    problem: ProblemSection,
    coefficients: CoefficientSection,
    control: ControlSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemSection {
    #[serde(default)]
    name: Option<String>,
    m: usize,
    d: usize,
    k: usize,
    #[serde(rename = "T")]
    horizon: f64,
    alpha: f64,
    x0: OneOrMany,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoefficientSection {
    b: String,
    sigma: String,
    f: String,
    g: String,
    phi: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
enum ControlSection {
    Finite { points: Vec<OneOrMany> },
    Box { lower: OneOrMany, upper: OneOrMany },
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    fn into_vec(self) -> Vec<f64> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

/// Parses a problem file (TOML with `[problem]`, `[coefficients]`,
/// `[control]` sections). Only scalar state and noise are accepted here;
/// multi-dimensional problems come from the registry.
pub fn parse_problem_file(text: &str) -> Result<ProblemSpec> {
    let file: ProblemFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let p = file.problem;
    if p.m != 1 || p.d != 1 {
        return Err(Error::Dimension("problem files support m = d = 1 only".into()));
    }
    let domain = match file.control {
        ControlSection::Finite { points } => ControlDomain::finite(points.into_iter().map(OneOrMany::into_vec).collect())?,
        ControlSection::Box { lower, upper } => ControlDomain::boxed(lower.into_vec(), upper.into_vec())?,
    };
    if domain.dim() != p.k {
        return Err(Error::Dimension(format!("control points have dimension {}, k = {}", domain.dim(), p.k)));
    }
    let c = &file.coefficients;
    ProblemSpec::build(ProblemSource {
        name: p.name.as_deref().unwrap_or("file"),
        state_dim: p.m,
        noise_dim: p.d,
        x0: p.x0.into_vec(),
        horizon: p.horizon,
        alpha: p.alpha,
        domain,
        seed: p.seed,
        b: &c.b,
        sigma: &c.sigma,
        f: &c.f,
        g: &c.g,
        phi: &c.phi,
    })
}

/// Registry name or path to a problem file.
pub fn load_problem(source: &str) -> Result<ProblemSpec> {
    if REGISTRY.contains(&source) {
        return registry_problem(source);
    }
    let path = Path::new(source);
    if path.exists() {
        let text = std::fs::read_to_string(path)?;
        return parse_problem_file(&text);
    }
    Err(Error::UnknownProblem(source.to_string()))
}
