//! Reverse-mode differentiation and Adam with restarts.
//!
//! [`Tape`] records a scalar computation graph (a Wengert list). Each node
//! stores its value and the local partial derivatives with respect to its
//! parents, so [`Tape::backward`] is a single reverse sweep. Besides the
//! elementary operations, [`Tape::custom`] inserts a node whose partials the
//! caller computed analytically; the models use it to splice hand-derived
//! vector-Jacobian products (kernel sums, network passes) into the graph.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::numerics::{Matrix, RngStream};
use crate::{Error, Result};

#[derive(Default)]
struct Nodes {
    values: Vec<f64>,
    offsets: Vec<usize>,
    parents: Vec<u32>,
    partials: Vec<f64>,
}

/// Append-only computation graph.
pub struct Tape {
    nodes: RefCell<Nodes>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        let nodes = Nodes { offsets: vec![0], ..Default::default() };
        Tape { nodes: RefCell::new(nodes) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: f64, edges: &[(u32, f64)]) -> Var<'_> {
        let mut n = self.nodes.borrow_mut();
        let idx = n.values.len() as u32;
        n.values.push(value);
        for &(p, d) in edges {
            n.parents.push(p);
            n.partials.push(d);
        }
        let end = n.parents.len();
        n.offsets.push(end);
        Var { tape: self, idx }
    }

    /// A leaf (input or constant).
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, &[])
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    /// Node with caller-supplied value and partials `∂value/∂parents[i]`.
    pub fn custom<'t>(&'t self, parents: &[Var<'t>], value: f64, partials: &[f64]) -> Var<'t> {
        assert_eq!(parents.len(), partials.len(), "one partial per parent");
        let mut n = self.nodes.borrow_mut();
        let idx = n.values.len() as u32;
        n.values.push(value);
        for (p, &d) in parents.iter().zip(partials) {
            debug_assert!(std::ptr::eq(p.tape, self));
            if d != 0.0 {
                n.parents.push(p.idx);
                n.partials.push(d);
            }
        }
        let end = n.parents.len();
        n.offsets.push(end);
        Var { tape: self, idx }
    }

    pub fn sum<'t>(&'t self, xs: &[Var<'t>]) -> Var<'t> {
        let value = xs.iter().map(|x| x.value()).sum();
        self.custom(xs, value, &vec![1.0; xs.len()])
    }

    /// `Σ xs[i]·coeffs[i]` with constant coefficients.
    pub fn dot<'t>(&'t self, xs: &[Var<'t>], coeffs: &[f64]) -> Var<'t> {
        assert_eq!(xs.len(), coeffs.len());
        let value = xs.iter().zip(coeffs).map(|(x, c)| x.value() * c).sum();
        self.custom(xs, value, coeffs)
    }

    /// `Σ xs[i]·ys[i]`.
    pub fn dot_vars<'t>(&'t self, xs: &[Var<'t>], ys: &[Var<'t>]) -> Var<'t> {
        assert_eq!(xs.len(), ys.len());
        let mut parents = Vec::with_capacity(2 * xs.len());
        let mut partials = Vec::with_capacity(2 * xs.len());
        let mut value = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            value += x.value() * y.value();
            parents.push(*x);
            partials.push(y.value());
            parents.push(*y);
            partials.push(x.value());
        }
        self.custom(&parents, value, &partials)
    }

    /// Constant matrix times a vector of variables.
    pub fn matvec<'t>(&'t self, m: &Matrix, x: &[Var<'t>]) -> Vec<Var<'t>> {
        (0..m.rows()).map(|r| self.dot(x, m.row(r))).collect()
    }

    /// Reverse sweep from `output`; returns adjoints of every node.
    pub fn backward(&self, output: Var<'_>) -> Adjoints {
        let n = self.nodes.borrow();
        let len = output.idx as usize + 1;
        let mut adj = vec![0.0; len];
        adj[len - 1] = 1.0;
        for i in (0..len).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            for e in n.offsets[i]..n.offsets[i + 1] {
                adj[n.parents[e] as usize] += a * n.partials[e];
            }
        }
        Adjoints { adj }
    }
}

/// Adjoints from one reverse sweep.
pub struct Adjoints {
    adj: Vec<f64>,
}

impl Adjoints {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.adj.get(v.idx as usize).copied().unwrap_or(0.0)
    }

    pub fn wrt_all(&self, vs: &[Var<'_>]) -> Vec<f64> {
        vs.iter().map(|v| self.wrt(*v)).collect()
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({})", self.idx, self.value())
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.tape.nodes.borrow().values[self.idx as usize]
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    fn unary(self, value: f64, d: f64) -> Var<'t> {
        self.tape.push(value, &[(self.idx, d)])
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value().exp();
        self.unary(e, e)
    }

    pub fn ln(self) -> Var<'t> {
        let x = self.value();
        self.unary(x.ln(), 1.0 / x)
    }

    pub fn sin(self) -> Var<'t> {
        let x = self.value();
        self.unary(x.sin(), x.cos())
    }

    pub fn cos(self) -> Var<'t> {
        let x = self.value();
        self.unary(x.cos(), -x.sin())
    }

    /// Square root; the derivative at zero is taken as zero.
    pub fn sqrt(self) -> Var<'t> {
        let s = self.value().sqrt();
        self.unary(s, if s > 0.0 { 0.5 / s } else { 0.0 })
    }

    pub fn tanh(self) -> Var<'t> {
        let t = self.value().tanh();
        self.unary(t, 1.0 - t * t)
    }

    pub fn square(self) -> Var<'t> {
        let x = self.value();
        self.unary(x * x, 2.0 * x)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        let x = self.value();
        self.unary(x.powf(p), p * x.powf(p - 1.0))
    }

    pub fn recip(self) -> Var<'t> {
        let x = self.value();
        self.unary(1.0 / x, -1.0 / (x * x))
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(self) -> Var<'t> {
        let x = self.value();
        self.unary(softplus(x), sigmoid(x))
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: Var<'t>) -> Var<'t> {
        self.tape.push(self.value() + o.value(), &[(self.idx, 1.0), (o.idx, 1.0)])
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: Var<'t>) -> Var<'t> {
        self.tape.push(self.value() - o.value(), &[(self.idx, 1.0), (o.idx, -1.0)])
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), o.value());
        self.tape.push(a * b, &[(self.idx, b), (o.idx, a)])
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, o: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), o.value());
        self.tape.push(a / b, &[(self.idx, 1.0 / b), (o.idx, -a / (b * b))])
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.value(), -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.unary(self.value() + c, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self.unary(self.value() - c, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.unary(self.value() * c, c)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, c: f64) -> Var<'t> {
        self.unary(self.value() / c, 1.0 / c)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, v: Var<'t>) -> Var<'t> {
        v + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, v: Var<'t>) -> Var<'t> {
        v.unary(self - v.value(), -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, v: Var<'t>) -> Var<'t> {
        v * self
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, v: Var<'t>) -> Var<'t> {
        let x = v.value();
        v.unary(self / x, -self / (x * x))
    }
}

/// Named block of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Restart inits draw `init_center + init_scale · N(0, 1)`.
    pub init_center: f64,
    pub init_scale: f64,
}

/// Flat parameter vector with a named layout.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParamVector {
    pub fn new() -> ParamVector {
        ParamVector::default()
    }

    /// Appends a segment whose restart distribution is `N(0, init_scale²)`.
    pub fn with_segment(mut self, name: &str, values: Vec<f64>, init_scale: f64) -> ParamVector {
        self.push_segment(name, values, 0.0, init_scale);
        self
    }

    pub fn push_segment(&mut self, name: &str, values: Vec<f64>, init_center: f64, init_scale: f64) {
        let offset = self.values.len();
        self.layout.push(Segment {
            name: name.to_string(),
            offset,
            len: values.len(),
            init_center,
            init_scale,
        });
        self.values.extend(values);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.layout.iter().find(|s| s.name == name)?.clone();
        Some(&mut self.values[s.offset..s.offset + s.len])
    }

    /// Name of the segment containing flat index `i`.
    pub fn segment_of(&self, i: usize) -> &str {
        self.layout
            .iter()
            .find(|s| i >= s.offset && i < s.offset + s.len)
            .map_or("<unnamed>", |s| s.name.as_str())
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> ParamVector {
        assert_eq!(values.len(), self.values.len());
        ParamVector { values, layout: self.layout.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let total: usize = self.layout.iter().map(|s| s.len).sum();
        if total != self.values.len() {
            return Err(Error::invalid(format!(
                "layout covers {total} values, vector has {}",
                self.values.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::EvaluationFailure {
                segment: self.segment_of(i).to_string(),
                reason: format!("parameter {i} is {}", self.values[i]),
            });
        }
        Ok(())
    }

    /// Fresh draw from every segment's restart distribution.
    pub fn randomized(&self, rng: &mut RngStream) -> ParamVector {
        let mut out = self.clone();
        for s in &self.layout {
            for v in &mut out.values[s.offset..s.offset + s.len] {
                *v = s.init_center + s.init_scale * rng.normal();
            }
        }
        out
    }
}

/// A differentiable scalar objective. Implementations may be stochastic
/// (mini-batches, resampled noise) as long as they are seeded.
pub trait Objective {
    /// Value and gradient with respect to `params.values()`.
    fn evaluate(&mut self, params: &ParamVector) -> Result<(f64, Vec<f64>)>;
}

/// Objective written directly against the tape.
pub struct TapeObjective<F> {
    f: F,
}

impl<F> TapeObjective<F>
where
    F: for<'t> FnMut(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    pub fn new(f: F) -> Self {
        TapeObjective { f }
    }
}

impl<F> Objective for TapeObjective<F>
where
    F: for<'t> FnMut(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    fn evaluate(&mut self, params: &ParamVector) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let inputs = tape.vars(params.values());
        let out = (self.f)(&tape, &inputs)?;
        let adj = tape.backward(out);
        Ok((out.value(), adj.wrt_all(&inputs)))
    }
}

/// Gradient of `objective` at `p`, with finiteness checks.
pub fn gradient(objective: &mut dyn Objective, p: &ParamVector) -> Result<Vec<f64>> {
    checked_evaluate(objective, p).map(|(_, g)| g)
}

fn checked_evaluate(objective: &mut dyn Objective, p: &ParamVector) -> Result<(f64, Vec<f64>)> {
    p.validate()?;
    let (value, grad) = objective.evaluate(p)?;
    if grad.len() != p.len() {
        return Err(Error::invalid(format!(
            "objective returned {} partials for {} parameters",
            grad.len(),
            p.len()
        )));
    }
    let bad_grad = grad.iter().position(|g| !g.is_finite());
    if !value.is_finite() || bad_grad.is_some() {
        let segment = bad_grad.map_or_else(
            || p.layout().first().map_or("<objective>", |s| s.name.as_str()),
            |i| p.segment_of(i),
        );
        return Err(Error::EvaluationFailure {
            segment: segment.to_string(),
            reason: format!("objective value {value}"),
        });
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub restarts: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Relative improvement that resets the early-stopping counter.
    pub rel_improvement: f64,
    /// Optional cap on the gradient's Euclidean norm.
    pub clip_norm: Option<f64>,
    /// Return each run's final iterate instead of its best one (for noisy
    /// mini-batch objectives, where the best value is mostly a lucky batch).
    #[serde(default)]
    pub keep_last: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 0.01,
            max_steps: 500,
            restarts: 1,
            patience: 20,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            rel_improvement: 1e-6,
            clip_norm: None,
            keep_last: false,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.restarts >= 1
            && self.patience >= 1
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer config {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub params: ParamVector,
    pub value: f64,
    pub evaluations: usize,
    /// Objective evaluations spent by each restart.
    pub steps_per_restart: Vec<usize>,
}

/// Adam with restarts and early stopping.
///
/// The first run starts from `init`, later ones from `init.randomized(rng)`.
/// A run stops once `patience` consecutive evaluations fail to improve its
/// best value by `rel_improvement` (relative). The best parameters seen over
/// all runs are returned.
pub fn optimize(
    objective: &mut dyn Objective,
    init: &ParamVector,
    cfg: &OptimConfig,
    rng: &mut RngStream,
) -> Result<OptimOutcome> {
    cfg.validate()?;
    let mut best: Option<(ParamVector, f64)> = None;
    let mut evaluations = 0;
    let mut steps_per_restart = Vec::with_capacity(cfg.restarts);
    let mut last_err = None;
    for restart in 0..cfg.restarts {
        let mut p = if restart == 0 { init.clone() } else { init.randomized(rng) };
        let n = p.len();
        let mut m = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut run_best = f64::INFINITY;
        let mut stall = 0;
        let mut steps = 0;
        let mut last: Option<(ParamVector, f64)> = None;
        for t in 1..=cfg.max_steps.max(1) {
            let (f, mut g) = match checked_evaluate(objective, &p) {
                Ok(r) => r,
                Err(e) => {
                    last_err = Some(e);
                    break;
                }
            };
            evaluations += 1;
            steps += 1;
            if cfg.keep_last {
                last = Some((p.clone(), f));
            } else if best.as_ref().map_or(true, |(_, b)| f < *b) {
                best = Some((p.clone(), f));
            }
            if !run_best.is_finite() || f < run_best - cfg.rel_improvement * run_best.abs() {
                run_best = f;
                stall = 0;
            } else {
                stall += 1;
                if stall >= cfg.patience {
                    break;
                }
            }
            if t == cfg.max_steps.max(1) {
                break;
            }
            if let Some(c) = cfg.clip_norm {
                let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > c {
                    g.iter_mut().for_each(|x| *x *= c / norm);
                }
            }
            let bc1 = 1.0 - cfg.beta1.powi(t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(t as i32);
            let vals = p.values_mut();
            for i in 0..n {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                vals[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
            }
        }
        steps_per_restart.push(steps);
        if let Some((lp, lf)) = last {
            if best.as_ref().map_or(true, |(_, b)| lf < *b) {
                best = Some((lp, lf));
            }
        }
    }
    match best {
        Some((params, value)) => Ok(OptimOutcome { params, value, evaluations, steps_per_restart }),
        None => Err(Error::OptimizationFailure(format!(
            "all {} restarts failed: {}",
            cfg.restarts,
            last_err.map_or_else(|| "no evaluations".to_string(), |e| e.to_string())
        ))),
    }
}
