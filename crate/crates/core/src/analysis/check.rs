//! Finite-difference checks of every topology and of a small MicroVGG
//! trained through the loss.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Model};
use crate::error::{Error, Result};
use crate::params::{InitScheme, ParamDecl, ParamRole, ParamStore};
use crate::tensor::{numeric_gradient, GradCheckReport, Real, Shape, Tensor4};
use crate::topology::{Topology, TopologyId, TopologySpec};
use crate::train::cross_entropy;

pub const DEFAULT_EPS: f64 = 1e-2;
pub const TOL_32: f64 = 1e-4;
pub const TOL_64: f64 = 1e-6;
pub const COMPOSITE_NAME: &str = "MicroVGG+loss";

/// Name under which the input tensor joins the parameters being checked.
const INPUT: &str = "input";
/// Spread of the random offset added to biases and logits, so their
/// derivatives are not all taken at the symmetric zero point.
const OFFSET_SIGMA: f64 = 0.1;
/// Kaiming weights are halved at the check point. At full scale the narrow
/// attention MLPs drive sigmoid logits far enough into saturation that the
/// derivatives of interest vanish below what differences can resolve.
const WEIGHT_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn default_tol(self) -> f64 {
        match self {
            Precision::Single => TOL_32,
            Precision::Double => TOL_64,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Single => "f32",
            Precision::Double => "f64",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CheckTarget {
    Topology(TopologyId),
    /// Two-stage MicroVGG with CSA after each stage, through the
    /// label-smoothed loss.
    Composite,
}

impl CheckTarget {
    /// Every topology followed by the composite.
    pub fn all() -> Vec<CheckTarget> {
        TopologyId::ALL
            .into_iter()
            .map(CheckTarget::Topology)
            .chain([CheckTarget::Composite])
            .collect()
    }

    /// A topology name, or the composite's name (case-insensitive).
    pub fn parse(s: &str) -> Result<CheckTarget> {
        if s.eq_ignore_ascii_case(COMPOSITE_NAME) || s.eq_ignore_ascii_case("microvgg") {
            return Ok(CheckTarget::Composite);
        }
        TopologyId::parse(s).map(CheckTarget::Topology)
    }
}

impl fmt::Display for CheckTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckTarget::Topology(id) => f.write_str(id.name()),
            CheckTarget::Composite => f.write_str(COMPOSITE_NAME),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub shape: Shape,
    pub eps: f64,
    /// Overrides the per-precision default tolerance.
    pub tol: Option<f64>,
    pub seeds: Vec<u64>,
    pub precisions: Vec<Precision>,
    /// Doubles every analytic gradient of this target.
    pub corrupt: Option<CheckTarget>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            shape: Shape::new(2, 16, 8, 8),
            eps: DEFAULT_EPS,
            tol: None,
            seeds: vec![0, 1, 2],
            precisions: vec![Precision::Single, Precision::Double],
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckRow {
    pub target: CheckTarget,
    pub precision: Precision,
    pub seed: u64,
    pub report: GradCheckReport,
}

/// Runs every `(target, seed)` pair, in parallel, and returns one row per
/// precision in `(target, seed, precision)` order.
pub fn run_checks(targets: &[CheckTarget], opts: &CheckOptions) -> Result<Vec<CheckRow>> {
    let jobs: Vec<(CheckTarget, u64)> = targets
        .iter()
        .flat_map(|&t| opts.seeds.iter().map(move |&s| (t, s)))
        .collect();
    let rows: Vec<Vec<CheckRow>> = jobs
        .into_par_iter()
        .map(|(target, seed)| {
            let corrupt = opts.corrupt == Some(target);
            let reports = check_one(
                target,
                opts.shape,
                seed,
                opts.eps,
                &opts.precisions,
                opts.tol,
                corrupt,
            )?;
            Ok(reports
                .into_iter()
                .map(|(precision, report)| CheckRow {
                    target,
                    precision,
                    seed,
                    report,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// Checks one target at one seed in each requested precision. The point is
/// f32-representable, so a single set of f64 central differences serves as
/// the reference for both precisions.
pub fn check_one(
    target: CheckTarget,
    shape: Shape,
    seed: u64,
    eps: f64,
    precisions: &[Precision],
    tol: Option<f64>,
    corrupt: bool,
) -> Result<Vec<(Precision, GradCheckReport)>> {
    let problem: Box<dyn Problem> = match target {
        CheckTarget::Topology(id) => Box::new(TopologyProblem::new(id, shape, seed)?),
        CheckTarget::Composite => Box::new(CompositeProblem::new(shape, seed)?),
    };
    let mut store = problem.init(seed)?.cast::<f32>().cast::<f64>();
    let numeric = numeric_gradient(&mut store, |s| problem.objective(s), eps)?;
    precisions
        .iter()
        .map(|&precision| {
            let mut analytic = match precision {
                Precision::Double => {
                    let mut s = store.clone();
                    problem.gradients64(&mut s)?;
                    s
                }
                Precision::Single => {
                    let mut s32 = store.cast::<f32>();
                    problem.gradients32(&mut s32)?;
                    s32.cast::<f64>()
                }
            };
            if corrupt {
                for (_, p) in analytic.iter_mut() {
                    p.grad = p.grad.scale(2.0);
                }
            }
            let tol = tol.unwrap_or(precision.default_tol());
            Ok((precision, numeric.compare(&analytic, tol)?))
        })
        .collect()
}

/// Scalar objective over a store holding the parameters plus `input`.
trait Problem: Send + Sync {
    fn decls(&self) -> Vec<ParamDecl>;
    fn input_shape(&self) -> Shape;
    fn objective(&self, store: &ParamStore<f64>) -> Result<f64>;
    fn gradients64(&self, store: &mut ParamStore<f64>) -> Result<()>;
    fn gradients32(&self, store: &mut ParamStore<f32>) -> Result<()>;

    fn init(&self, seed: u64) -> Result<ParamStore<f64>> {
        let decls = self.decls();
        let mut store: ParamStore<f64> =
            crate::params::init_from_decls(&decls, InitScheme::Kaiming, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0ff5);
        for d in &decls {
            if matches!(d.role, ParamRole::Weight { .. }) {
                let v = store.value(&d.name)?.scale(WEIGHT_SCALE);
                *store.value_mut(&d.name)? = v;
            }
            if matches!(d.role, ParamRole::Bias | ParamRole::Logit) {
                let noise = Tensor4::<f64>::randn(d.shape, OFFSET_SIGMA, &mut rng);
                store.value_mut(&d.name)?.add_assign(&noise)?;
            }
        }
        store.insert(INPUT, Tensor4::randn(self.input_shape(), 1.0, &mut rng))?;
        Ok(store)
    }
}

/// `Σ R ⊙ T(x)` for a fixed random `R`.
struct TopologyProblem {
    topology: Topology,
    shape: Shape,
    probe: Tensor4<f64>,
}

impl TopologyProblem {
    fn new(id: TopologyId, shape: Shape, seed: u64) -> Result<Self> {
        let topology = Topology::new(TopologySpec::new(id, shape.c))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0bec_7175);
        Ok(TopologyProblem {
            topology,
            shape,
            probe: Tensor4::randn(shape, 1.0, &mut rng),
        })
    }

    fn grads<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.zero_grad();
        let x = store.value(INPUT)?.clone();
        let (_, cache) = self.topology.forward(store, "", &x)?;
        let g = self.probe.cast::<T>();
        let gx = self.topology.backward(store, "", &cache, &g)?;
        store.accumulate_grad(INPUT, &gx)
    }
}

impl Problem for TopologyProblem {
    fn decls(&self) -> Vec<ParamDecl> {
        self.topology.decls("")
    }

    fn input_shape(&self) -> Shape {
        self.shape
    }

    fn objective(&self, store: &ParamStore<f64>) -> Result<f64> {
        let (out, _) = self.topology.forward(store, "", store.value(INPUT)?)?;
        Ok(compensated_dot(out.data(), self.probe.data()))
    }

    fn gradients64(&self, store: &mut ParamStore<f64>) -> Result<()> {
        self.grads(store)
    }

    fn gradients32(&self, store: &mut ParamStore<f32>) -> Result<()> {
        self.grads(store)
    }
}

/// Dot product accurate to about one rounding of the exact result, so the
/// objective's own summation noise does not swamp small differences.
fn compensated_dot(a: &[f64], b: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let p = x * y;
        comp += x.mul_add(y, -p);
        let t = sum + p;
        comp += if sum.abs() >= p.abs() {
            (sum - t) + p
        } else {
            (p - t) + sum
        };
        sum = t;
    }
    sum + comp
}

/// Label-smoothed cross-entropy of a batch-normed MicroVGG.
struct CompositeProblem {
    model: Model,
    shape: Shape,
    labels: Vec<u32>,
}

const COMPOSITE_CLASSES: usize = 3;
const COMPOSITE_SMOOTHING: f64 = 0.1;

impl CompositeProblem {
    fn new(shape: Shape, seed: u64) -> Result<Self> {
        let cfg = BackboneConfig::new((shape.c, shape.h, shape.w), COMPOSITE_CLASSES)
            .with_stages(vec![8, 16])
            .with_attention(Some(TopologySpec::new(TopologyId::Csa, 8)));
        let cfg = BackboneConfig {
            convs_per_stage: 1,
            ..cfg
        };
        let labels = (0..shape.n as u64)
            .map(|i| ((i + seed) % COMPOSITE_CLASSES as u64) as u32)
            .collect();
        Ok(CompositeProblem {
            model: Model::new(&cfg)?,
            shape,
            labels,
        })
    }

    fn grads<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.zero_grad();
        let x = store.value(INPUT)?.clone();
        let (logits, cache) = self.model.forward_train(store, &x)?;
        let (_, g) = cross_entropy(&logits, &self.labels, COMPOSITE_SMOOTHING, None)?;
        let gx = self.model.backward(store, &cache, &g)?;
        store.accumulate_grad(INPUT, &gx)
    }
}

impl Problem for CompositeProblem {
    fn decls(&self) -> Vec<ParamDecl> {
        self.model.decls()
    }

    fn input_shape(&self) -> Shape {
        self.shape
    }

    fn objective(&self, store: &ParamStore<f64>) -> Result<f64> {
        let (logits, _) = self.model.forward_train(store, store.value(INPUT)?)?;
        Ok(cross_entropy(&logits, &self.labels, COMPOSITE_SMOOTHING, None)?.0)
    }

    fn gradients64(&self, store: &mut ParamStore<f64>) -> Result<()> {
        self.grads(store)
    }

    fn gradients32(&self, store: &mut ParamStore<f32>) -> Result<()> {
        self.grads(store)
    }
}

/// Fails with [`Error::Evaluation`] naming every failing row.
pub fn require_all_pass(rows: &[CheckRow]) -> Result<()> {
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.report.pass)
        .map(|r| format!("{} {} seed {}", r.target, r.precision, r.seed))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Evaluation(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}

/// Plain-text table, one line per row.
pub fn format_rows(rows: &[CheckRow]) -> String {
    let mut out = format!(
        "{:<14} {:<4} {:>4} {:>12} {:>12} {:>8} {:>7}  {}\n",
        "target", "prec", "seed", "max_rel_err", "norm_rel_err", "checked", "kinks", "result"
    );
    for r in rows {
        let worst = r
            .report
            .worst_coordinate
            .as_ref()
            .map(|c| c.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{:<14} {:<4} {:>4} {:>12.3e} {:>12.3e} {:>8} {:>7}  {} {}\n",
            r.target.to_string(),
            r.precision.to_string(),
            r.seed,
            r.report.max_rel_error,
            r.report.norm_rel_error,
            r.report.checked,
            r.report.skipped_nonsmooth,
            if r.report.pass { "pass" } else { "FAIL" },
            worst
        ));
    }
    out
}
