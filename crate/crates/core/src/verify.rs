//! Reference oracles and the check suites built on them.
//!
//! The finite-difference oracles only call the plain forward passes, so they
//! share no code with the derivative engine or the gradient tape.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::activation::Activation;
use crate::deriv::{compute_all, DerivConfig, DerivKey, Slot};
use crate::encoders::{gather_index, identity_diagonal, EncoderDims};
use crate::error::{Error, Result};
use crate::graph::{gen_bounded_degree, rwse, Graph, Task};
use crate::hod::{ds_gnn_oracle, taylor_subgraph_approx, BaseInit, HodModel, HodSpec, NodeEncoderKind};
use crate::mpnn::{rwse_init, MpnnModel, RandomGin};
use crate::train::{fd_grads, loss_and_grads, Loss};

/// Activations with convergent Taylor series.
pub const ANALYTIC: [Activation; 4] = [Activation::Tanh, Activation::Sin, Activation::Exp, Activation::Silu];

/// A random analytic activation and a depth up to `max_depth`. Stacked
/// exponentials overflow, so `exp` only appears in single-layer networks.
fn analytic_layers<R: Rng>(rng: &mut R, max_depth: usize) -> (Activation, usize) {
    let act = ANALYTIC[rng.gen_range(0..ANALYTIC.len())];
    let depth = if act == Activation::Exp { 1 } else { rng.gen_range(1..=max_depth) };
    (act, depth)
}

/// Base step of the stencil for each total order.
const STEPS: [f64; 5] = [0.0, 0.01, 0.02, 0.05, 0.1];

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// One central stencil `sum_i (-1)^i C(a, i) f(x + (a/2 - i) h) / h^a` per
/// perturbed coordinate, taken as a tensor product.
fn central<F>(f: &F, x: &Array2<f64>, slots: &[(usize, usize, usize)], h: f64) -> Array2<f64>
where
    F: Fn(&Array2<f64>) -> Array2<f64>,
{
    let mut acc: Option<Array2<f64>> = None;
    let counts: Vec<usize> = slots.iter().map(|s| s.2 + 1).collect();
    let total: usize = counts.iter().product();
    for flat in 0..total {
        let mut rem = flat;
        let mut xp = x.clone();
        let mut coef = 1.0;
        for (s, &(u, j, a)) in slots.iter().enumerate() {
            let i = rem % counts[s];
            rem /= counts[s];
            coef *= if i.is_multiple_of(2) { 1.0 } else { -1.0 } * binomial(a, i);
            xp[[u, j]] += (a as f64 / 2.0 - i as f64) * h;
        }
        let y = f(&xp) * coef;
        match &mut acc {
            Some(a) => *a += &y,
            None => acc = Some(y),
        }
    }
    let order: usize = slots.iter().map(|s| s.2).sum();
    acc.expect("at least one stencil point") / h.powi(order as i32)
}

/// Mixed partial derivative of `f` at `x` with respect to the listed
/// `(row, column, order)` coordinates, by Richardson-extrapolated central
/// differences.
pub fn fd_partial<F>(f: &F, x: &Array2<f64>, slots: &[(usize, usize, usize)]) -> Array2<f64>
where
    F: Fn(&Array2<f64>) -> Array2<f64>,
{
    let order: usize = slots.iter().map(|s| s.2).sum();
    let h = STEPS[order.min(STEPS.len() - 1)];
    let coarse = central(f, x, slots, h);
    let fine = central(f, x, slots, h / 2.0);
    (fine * 4.0 - coarse) / 3.0
}

fn close(expected: f64, found: f64, rtol: f64, atol: f64) -> bool {
    (expected - found).abs() <= rtol * expected.abs().max(found.abs()) + atol
}

/// Tolerances of the derivative check.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FdTolerance {
    pub rtol_low: f64,
    /// Used from total order 3 on.
    pub rtol_high: f64,
    pub atol: f64,
    /// Largest finite-difference magnitude allowed for an absent key.
    pub absent: f64,
}

impl Default for FdTolerance {
    fn default() -> Self {
        FdTolerance { rtol_low: 1e-4, rtol_high: 1e-3, atol: 1e-8, absent: 1e-6 }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct FdReport {
    pub stored_checked: usize,
    pub stored_failed: usize,
    pub absent_checked: usize,
    pub absent_failed: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: Option<String>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.stored_failed == 0 && self.absent_failed == 0
    }

    fn merge(&mut self, other: FdReport) {
        self.stored_checked += other.stored_checked;
        self.stored_failed += other.stored_failed;
        self.absent_checked += other.absent_checked;
        self.absent_failed += other.absent_failed;
        self.skipped += other.skipped;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Every derivative key up to total order `max_order` over the given input
/// features, with one or (for `k = 2`) two distinct variables.
pub fn all_keys(n: usize, features: &[usize], k: usize, max_order: usize) -> Vec<DerivKey> {
    let vars: Vec<(usize, usize)> = (0..n).flat_map(|u| features.iter().map(move |&j| (u, j))).collect();
    let mut keys = Vec::new();
    for &(u, j) in &vars {
        for a in 1..=max_order {
            keys.push(DerivKey::single(u, j, a));
        }
    }
    if k == 2 {
        for (x, &(u1, j1)) in vars.iter().enumerate() {
            for &(u2, j2) in &vars[x + 1..] {
                for a1 in 1..max_order {
                    for a2 in 1..=max_order - a1 {
                        keys.push(DerivKey::new(&[Slot::new(u1, j1, a1), Slot::new(u2, j2, a2)]).unwrap());
                    }
                }
            }
        }
    }
    keys
}

/// Compares every stored entry of the node and output tensors with finite
/// differences of the forward pass, and checks that every absent key has a
/// vanishing finite difference. With ReLU networks, node rows whose final
/// pre-activations lie within `1e-3` of the kink are skipped.
pub fn fd_check(model: &MpnnModel, g: &Graph, k: usize, max_order: usize, tol: FdTolerance) -> Result<FdReport> {
    let d = compute_all(model, g, &DerivConfig::new(k, max_order)?)?;
    let features: Vec<usize> = (0..g.feature_width()).collect();
    let keys = all_keys(g.num_nodes(), &features, k, max_order);
    let x = g.features().clone();
    // node outputs row by row, then the graph output, as a single row
    let forward = |xp: &Array2<f64>| -> Array2<f64> {
        let rec = model.forward_features(g, xp).expect("widths were validated");
        let flat: Vec<f64> = rec.node_out.iter().chain(rec.output.iter().flatten()).copied().collect();
        Array2::from_shape_vec((1, flat.len()), flat).unwrap()
    };
    let width = model.node_width();
    let kinked = kinked_rows(model, &d.record.preacts);
    let n = g.num_nodes();
    let reports: Vec<FdReport> = keys
        .par_iter()
        .map(|key| {
            let slots: Vec<(usize, usize, usize)> = key.slots().iter().map(|s| (s.node, s.feature, s.order)).collect();
            let fd = fd_partial(&forward, &x, &slots).remove_axis(Axis(0));
            let rtol = if key.total_order() >= 3 { tol.rtol_high } else { tol.rtol_low };
            let mut report = FdReport::default();
            let mut compare = |label: String, stored: Option<&[f64]>, row: ndarray::ArrayView1<f64>| match stored {
                Some(e) => {
                    report.stored_checked += 1;
                    let mut ok = true;
                    for (&ei, &fi) in e.iter().zip(row) {
                        let rel = (ei - fi).abs() / ei.abs().max(fi.abs()).max(1e-300);
                        if !close(ei, fi, rtol, tol.atol) {
                            ok = false;
                        }
                        if (ei - fi).abs() > tol.atol && rel > report.max_rel_error {
                            report.max_rel_error = rel;
                            report.worst = Some(format!("{label}: engine {ei:e} vs fd {fi:e}"));
                        }
                    }
                    report.stored_failed += usize::from(!ok);
                }
                None => {
                    report.absent_checked += 1;
                    if row.iter().any(|f| f.abs() >= tol.absent) {
                        report.absent_failed += 1;
                        report.worst = Some(format!("{label}: absent but fd {:e}", row.iter().fold(0.0f64, |m, f| m.max(f.abs()))));
                    }
                }
            };
            for v in 0..n {
                if kinked[v] {
                    report.skipped += 1;
                    continue;
                }
                compare(format!("v={v} {key:?}"), d.node.get(v, key), fd.slice(ndarray::s![v * width..(v + 1) * width]));
            }
            if let Some(out) = &d.out {
                if kinked.iter().any(|&b| b) {
                    report.skipped += 1;
                } else {
                    compare(format!("out {key:?}"), out.get(0, key), fd.slice(ndarray::s![n * width..]));
                }
            }
            report
        })
        .collect();
    let mut total = FdReport::default();
    for r in reports {
        total.merge(r);
    }
    Ok(total)
}

fn kinked_rows(model: &MpnnModel, preacts: &[Vec<Array2<f64>>]) -> Vec<bool> {
    let n = preacts.first().and_then(|p| p.first()).map_or(0, |z| z.nrows());
    let mut out = vec![false; n];
    for (layer, zs) in model.layers.iter().zip(preacts) {
        for (l, z) in zs.iter().enumerate() {
            if layer.mlp.activation_at(l) == Activation::Relu {
                for (v, row) in z.axis_iter(Axis(0)).enumerate() {
                    out[v] |= row.iter().any(|x| x.abs() < 1e-3);
                }
            }
        }
    }
    out
}

/// A random small graph and analytic GIN model for the derivative check.
#[derive(Clone, Debug)]
pub struct FdCase {
    pub graph: Graph,
    pub model: MpnnModel,
    pub k: usize,
    pub max_order: usize,
}

pub fn random_fd_case(seed: u64, max_order: usize) -> Result<FdCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..=10);
    let graph = gen_bounded_degree(n, rng.gen_range(0.3..0.7), 4, rng.gen())?;
    let width = rng.gen_range(1..=2);
    let x = Array2::from_shape_fn((n, width), |_| rng.gen_range(-1.0..1.0));
    let graph = graph.with_features(x)?;
    let (activation, depth) = analytic_layers(&mut rng, 3);
    let spec = RandomGin {
        input_width: width,
        hidden: rng.gen_range(2..=3),
        depth,
        activation,
        concat: rng.gen_bool(0.3),
        residual: rng.gen_bool(0.3),
        readout: rng.gen_bool(0.5).then_some(2),
        bound: 0.5,
    };
    let model = spec.sample(&mut rng);
    let k = rng.gen_range(1..=2);
    Ok(FdCase { graph, model, k, max_order: rng.gen_range(1..=max_order) })
}

#[derive(Clone, Debug, Serialize)]
pub struct TrialResult<T: Serialize> {
    pub check: String,
    pub seed: u64,
    pub pass: bool,
    #[serde(flatten)]
    pub detail: T,
}

pub fn fd_suite(seed: u64, trials: usize, max_order: usize) -> Result<Vec<TrialResult<FdReport>>> {
    (0..trials as u64)
        .map(|t| {
            let s = seed.wrapping_mul(1000).wrapping_add(t);
            let case = random_fd_case(s, max_order)?;
            let report = fd_check(&case.model, &case.graph, case.k, case.max_order, FdTolerance::default())?;
            Ok(TrialResult { check: "fd".into(), seed: s, pass: report.passed(), detail: report })
        })
        .collect()
}

// ---- RWSE ----

/// Largest deviation between the random-walk encoding read off the engine's
/// diagonal derivatives and the direct computation.
pub fn rwse_deviation(g: &Graph, steps: usize) -> Result<f64> {
    let model = rwse_init(steps, steps)?;
    let ones = g.clone().with_features(Array2::ones((g.num_nodes(), steps)))?;
    let d = compute_all(&model, &ones, &DerivConfig::new(1, 1)?)?;
    let dims = EncoderDims { features: steps, max_order: 1, width: model.node_width() };
    let encoded = identity_diagonal(dims).encode(&d.node, steps)?;
    let expected = rwse(g, steps)?;
    let mut worst = 0.0f64;
    for v in 0..g.num_nodes() {
        for c in 0..steps {
            let found = encoded[[v, gather_index(c, 1, c, 1, dims.width)]];
            worst = worst.max((found - expected[[v, c]]).abs());
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize)]
pub struct Deviation {
    pub steps: usize,
    pub max_abs_error: f64,
}

// ---- Taylor expansion ----

#[derive(Clone, Debug, Serialize)]
pub struct TaylorReport {
    pub epsilon: f64,
    pub order: usize,
    pub error_first: f64,
    pub error: f64,
}

pub fn random_taylor_case(seed: u64) -> Result<(MpnnModel, Graph, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..=8);
    let graph = gen_bounded_degree(n, rng.gen_range(0.3..0.8), 4, rng.gen())?;
    let (activation, depth) = analytic_layers(&mut rng, 2);
    let spec = RandomGin {
        input_width: graph.feature_width() + 1,
        hidden: rng.gen_range(2..=3),
        depth,
        activation,
        concat: false,
        residual: false,
        readout: Some(1),
        bound: 0.5,
    };
    let model = spec.sample(&mut rng);
    let v = rng.gen_range(0..n);
    Ok((model, graph, v))
}

fn max_abs_diff(a: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Errors of the first-order and `order`-th order expansions against the
/// marked forward pass.
pub fn taylor_trial(seed: u64, epsilon: f64, order: usize) -> Result<TaylorReport> {
    let (model, graph, v) = random_taylor_case(seed)?;
    let oracle = ds_gnn_oracle(&model, &graph, v, epsilon)?;
    let first = taylor_subgraph_approx(&model, &graph, v, epsilon, 1)?;
    let approx = taylor_subgraph_approx(&model, &graph, v, epsilon, order)?;
    Ok(TaylorReport { epsilon, order, error_first: max_abs_diff(&first, &oracle), error: max_abs_diff(&approx, &oracle) })
}

pub fn taylor_suite(seed: u64, trials: usize, epsilon: f64, order: usize) -> Result<Vec<TrialResult<TaylorReport>>> {
    (0..trials as u64)
        .map(|t| {
            let s = seed.wrapping_mul(1000).wrapping_add(t);
            let r = taylor_trial(s, epsilon, order)?;
            let pass = r.error < 1e-3 && (order <= 1 || r.error < r.error_first);
            Ok(TrialResult { check: "taylor".into(), seed: s, pass, detail: r })
        })
        .collect()
}

// ---- gradient check ----

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradReport {
    pub params: usize,
    pub checked: usize,
    pub failed: usize,
    pub max_rel_error: f64,
    pub worst: Option<String>,
}

/// Compares tape gradients of the loss on `g` with central differences.
pub fn grad_check(model: &HodModel, g: &Graph, task: Task, loss: Loss, rtol: f64, atol: f64) -> Result<GradReport> {
    let (_, tape) = loss_and_grads(model, g, task, loss)?;
    let (_, fd) = fd_grads(model, g, task, loss, 1e-5)?;
    let mut report = GradReport { params: model.num_params(), ..GradReport::default() };
    for (name, f) in &fd {
        let t = tape.get(name).ok_or_else(|| Error::Tape(format!("tape has no gradient for '{name}'")))?;
        for (i, (&a, &b)) in t.iter().zip(f).enumerate() {
            report.checked += 1;
            if !close(b, a, rtol, atol) {
                report.failed += 1;
            }
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
            if (a - b).abs() > atol && rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(format!("{name}[{i}]: tape {a:e} vs fd {b:e}"));
            }
        }
    }
    Ok(report)
}

/// A random full pipeline with a graph-level head and a labelled graph.
pub fn random_grad_case(seed: u64) -> Result<(HodModel, Graph)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..=7);
    let graph = gen_bounded_degree(n, rng.gen_range(0.3..0.8), 4, rng.gen())?;
    let label = rng.gen_range(-1.0..1.0);
    let graph = graph.with_graph_label(vec![label]);
    let max_order = rng.gen_range(1..=2);
    let node_encoder = [NodeEncoderKind::Diagonal, NodeEncoderKind::Deepsets][rng.gen_range(0..2)];
    // exp stacked through the base, its readout and the output encoder overflows
    let smooth = [Activation::Tanh, Activation::Sin, Activation::Silu];
    let base_activation = smooth[rng.gen_range(0..smooth.len())];
    let base_depth = rng.gen_range(1..=2);
    let spec = HodSpec {
        input_width: 1,
        base_hidden: rng.gen_range(2..=3),
        base_depth,
        base_activation,
        base_init: BaseInit::Random { bound: 0.7 },
        residual: rng.gen_bool(0.5),
        k: rng.gen_range(1..=2),
        max_order,
        node_encoder,
        encoder_width: rng.gen_range(2..=3),
        use_out: rng.gen_bool(0.5),
        use_base: rng.gen_bool(0.7),
        hidden: rng.gen_range(2..=3),
        depth: 1,
        activation: smooth[rng.gen_range(0..smooth.len())],
        output_width: 1,
        graph_level: true,
        bound: 0.8,
    };
    Ok((spec.build(&mut rng)?, graph))
}

/// Largest model the gradient suite samples.
pub const MAX_GRAD_CASE_PARAMS: usize = 500;

pub fn grad_suite(seed: u64, trials: usize) -> Result<Vec<TrialResult<GradReport>>> {
    (0..trials as u64)
        .map(|t| {
            let s = seed.wrapping_mul(1000).wrapping_add(t);
            let (model, graph) = random_grad_case(s)?;
            let r = grad_check(&model, &graph, Task::GraphRegression, Loss::Mse, 1e-4, 1e-8)?;
            let pass = r.failed == 0 && r.params <= MAX_GRAD_CASE_PARAMS;
            Ok(TrialResult { check: "grad".into(), seed: s, pass, detail: r })
        })
        .collect()
}

// ---- sparsity ----

/// `min(n^k, d^(k t))`, the growth term of the sparsity bound.
pub fn sparsity_reference(n: usize, max_degree: usize, k: usize, t: usize) -> f64 {
    (n as f64).powi(k as i32).min((max_degree.max(1) as f64).powi((k * t) as i32))
}

/// A-priori constant `m^k * d_in^(k+1) * 2^t`, the last factor covering the
/// node itself in every neighborhood.
pub fn prior_constant(k: usize, max_order: usize, input_width: usize, t: usize) -> f64 {
    (max_order as f64).powi(k as i32) * (input_width as f64).powi(k as i32 + 1) * 2f64.powi(t.max(1) as i32)
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerSparsity {
    pub seed: u64,
    pub layer: usize,
    /// Largest per-node entry count.
    pub s_max: usize,
    pub nnz: usize,
    pub reference: f64,
}

/// Per-layer sparsity of a random tanh GIN of width 2 on `g`. Layer 0 is the
/// initial tensor.
pub fn sparsity_profile(g: &Graph, layers: usize, k: usize, max_order: usize, seed: u64) -> Result<Vec<LayerSparsity>> {
    let d_max = g.max_degree();
    let n = g.num_nodes();
    let row = |layer: usize, t: &crate::deriv::DerivTensor| {
        let stats = t.stats();
        LayerSparsity { seed, layer, s_max: stats.max, nnz: stats.total, reference: sparsity_reference(n, d_max, k, layer) }
    };
    let cfg = DerivConfig::new(k, max_order)?;
    if layers == 0 {
        let d0 = crate::deriv::deriv_init(g, k, max_order, None)?;
        return Ok(vec![row(0, &d0)]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = RandomGin {
        input_width: g.feature_width(),
        hidden: 2,
        depth: layers,
        activation: Activation::Tanh,
        concat: false,
        residual: false,
        readout: None,
        bound: 0.5,
    }
    .sample(&mut rng);
    let d = compute_all(&model, g, &cfg)?;
    Ok(d.layers.iter().enumerate().map(|(t, x)| row(t, x)).collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct SparsityBench {
    pub rows: Vec<LayerSparsity>,
    /// Largest `s_max / reference` over all rows.
    pub fitted_c: f64,
    pub prior_c: f64,
    /// Rows above `fitted_c * reference`.
    pub violations: usize,
    /// Layers whose total entry count dropped below the previous layer's.
    pub non_monotone: usize,
}

impl SparsityBench {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.non_monotone == 0 && self.fitted_c <= self.prior_c
    }
}

/// Sparsity on Erdős–Rényi graphs for seeds `0..seeds`.
pub fn sparsity_bench(n: usize, p: f64, layers: usize, k: usize, max_order: usize, seeds: usize) -> Result<SparsityBench> {
    if seeds == 0 {
        return Err(Error::Validation("the sparsity bench needs at least one seed".into()));
    }
    let rows: Vec<LayerSparsity> = (0..seeds as u64)
        .into_par_iter()
        .map(|s| sparsity_profile(&crate::graph::gen_erdos_renyi(n, p, s)?, layers, k, max_order, s))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let fitted_c = rows.iter().map(|r| r.s_max as f64 / r.reference).fold(0.0, f64::max);
    let violations = rows.iter().filter(|r| r.s_max as f64 > fitted_c * r.reference).count();
    let non_monotone = rows.windows(2).filter(|w| w[0].seed == w[1].seed && w[1].nnz < w[0].nnz).count();
    Ok(SparsityBench { rows, fitted_c, prior_c: prior_constant(k, max_order, 1, layers), violations, non_monotone })
}

// ---- permutation symmetry ----

#[derive(Clone, Debug, Default, Serialize)]
pub struct InvarianceReport {
    pub prediction: f64,
    pub h_der: f64,
}

/// Deviations after relabeling node `v` as `perm[v]`: graph predictions must
/// be unchanged, node predictions and `h^der` permuted.
pub fn invariance_deviation(model: &HodModel, g: &Graph, perm: &[usize]) -> Result<InvarianceReport> {
    let a = model.forward(g)?;
    let b = model.forward(&g.permuted(perm)?)?;
    let node_level = a.prediction.nrows() == g.num_nodes() && model.downstream.readout.is_none();
    let rows = |x: &Array2<f64>, y: &Array2<f64>| -> f64 {
        let mut worst = 0.0f64;
        for (v, &pv) in perm.iter().enumerate() {
            for (p, q) in x.row(v).iter().zip(y.row(pv)) {
                worst = worst.max((p - q).abs());
            }
        }
        worst
    };
    let prediction = if node_level {
        rows(&a.prediction, &b.prediction)
    } else {
        (&a.prediction - &b.prediction).iter().fold(0.0f64, |m, x| m.max(x.abs()))
    };
    Ok(InvarianceReport { prediction, h_der: rows(&a.h_der, &b.h_der) })
}

pub fn random_permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm
}
