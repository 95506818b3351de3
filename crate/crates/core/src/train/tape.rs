//! Reverse-mode gradient tape over dense matrices and sparse derivative
//! tensors.
//!
//! Every recorded operation keeps its inputs by index; `backward` walks the
//! records in reverse and accumulates vector-Jacobian products. Derivative
//! tensors are recorded with structural support, so their key sets do not
//! depend on parameter values and the tape is differentiable everywhere the
//! activations are.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, HashMap};

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::activation::{Activation, MAX_ACT_ORDER};
use crate::deriv::ops::{activation_table, for_each_term};
use crate::deriv::{deriv_activation, deriv_affine, deriv_aggregate, deriv_concat, deriv_pool, DerivTensor, PartitionTable, Support};
use crate::encoders::{gather_diagonal, gather_index, gather_out, segment_sum, PatternTable};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mpnn::Aggregation;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
pub enum Value {
    Dense(Array2<f64>),
    Deriv(DerivTensor),
}

impl Value {
    fn dense(&self) -> &Array2<f64> {
        match self {
            Value::Dense(x) => x,
            Value::Deriv(_) => panic!("expected a dense value"),
        }
    }

    fn deriv(&self) -> &DerivTensor {
        match self {
            Value::Deriv(d) => d,
            Value::Dense(_) => panic!("expected a derivative tensor"),
        }
    }
}

/// Aggregation whose GIN epsilon may be a parameter.
#[derive(Clone, Copy, Debug)]
pub enum TapeAgg {
    Gin(Var),
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Mse,
    Mae,
    /// Binary cross-entropy on logits.
    #[serde(rename = "bce")]
    BceLogits,
}

impl std::str::FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Loss::Mse),
            "mae" => Ok(Loss::Mae),
            "bce" => Ok(Loss::BceLogits),
            other => Err(Error::Validation(format!("unknown loss '{other}'"))),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    Linear { x: Var, w: Var, b: Option<Var> },
    Activation { x: Var, act: Activation },
    Aggregate { x: Var, agg: TapeAgg, concat: bool },
    ConcatCols(Vec<Var>),
    Scale { x: Var, s: f64 },
    SumRows(Var),
    GatherRows { table: Var, index: Vec<usize> },
    SegmentSum { x: Var, segments: Vec<usize> },
    Loss { pred: Var, target: Array2<f64>, kind: Loss },
    DerivAggregate { d: Var, agg: TapeAgg, concat: bool },
    DerivAffine { d: Var, w: Var },
    DerivActivation { d: Var, y: Var, act: Activation },
    DerivPool(Var),
    DerivConcat(Vec<(Var, f64)>),
    GatherDiagonal { d: Var, features: usize },
    GatherOut { d: Var, features: usize },
    EntryValues(Var),
}

pub struct Tape<'g> {
    graph: &'g Graph,
    values: Vec<Value>,
    ops: Vec<Op>,
    tables: BTreeMap<usize, PartitionTable>,
    consumed: bool,
}

/// Flattened entries of a tensor recorded by [`Tape::entry_values`].
pub struct EntryIndex {
    pub nodes: Vec<usize>,
    pub patterns: Vec<usize>,
}

impl<'g> Tape<'g> {
    pub fn new(graph: &'g Graph) -> Self {
        Tape { graph, values: Vec::new(), ops: Vec::new(), tables: BTreeMap::new(), consumed: false }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, value: Value, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.values[v.0]
    }

    pub fn dense(&self, v: Var) -> &Array2<f64> {
        self.values[v.0].dense()
    }

    pub fn deriv(&self, v: Var) -> &DerivTensor {
        self.values[v.0].deriv()
    }

    fn table(&mut self, order: usize) -> Result<&PartitionTable> {
        match self.tables.entry(order) {
            Entry::Occupied(e) => Ok(e.into_mut()),
            Entry::Vacant(e) => Ok(e.insert(PartitionTable::new(order)?)),
        }
    }

    fn agg_value(&self, agg: TapeAgg) -> Aggregation {
        match agg {
            TapeAgg::Gin(eps) => Aggregation::Gin { eps: self.dense(eps)[[0, 0]] },
            TapeAgg::Mean => Aggregation::Mean,
        }
    }

    // ---- dense ----

    pub fn input(&mut self, x: Array2<f64>) -> Var {
        self.push(Value::Dense(x), Op::Leaf)
    }

    pub fn param(&mut self, name: &str, x: Array2<f64>) -> Var {
        self.push(Value::Dense(x), Op::Param(name.to_string()))
    }

    /// `x · wᵀ + b` with `w` of shape `(out, in)` and `b` of shape `(1, out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.dense(x), self.dense(w));
        if xv.ncols() != wv.ncols() {
            return Err(Error::width("linear input", wv.ncols(), xv.ncols()));
        }
        let mut y = xv.dot(&wv.t());
        if let Some(b) = b {
            y += self.dense(b);
        }
        Ok(self.push(Value::Dense(y), Op::Linear { x, w, b }))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let y = self.dense(x).mapv(|z| act.value(z));
        self.push(Value::Dense(y), Op::Activation { x, act })
    }

    pub fn aggregate(&mut self, x: Var, agg: TapeAgg, concat: bool) -> Result<Var> {
        let xv = self.dense(x);
        let mut y = crate::mpnn::aggregate(self.graph, xv, &self.agg_value(agg))?;
        if concat {
            y = concatenate![Axis(1), xv.view(), y.view()];
        }
        Ok(self.push(Value::Dense(y), Op::Aggregate { x, agg, concat }))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let views: Vec<_> = xs.iter().map(|&x| self.dense(x).view()).collect();
        let y = concatenate(Axis(1), &views).expect("concatenated blocks share a row count");
        self.push(Value::Dense(y), Op::ConcatCols(xs.to_vec()))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.dense(x) * s;
        self.push(Value::Dense(y), Op::Scale { x, s })
    }

    pub fn sum_rows(&mut self, x: Var) -> Var {
        let y = self.dense(x).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(Value::Dense(y), Op::SumRows(x))
    }

    pub fn gather_rows(&mut self, table: Var, index: Vec<usize>) -> Var {
        let y = self.dense(table).select(Axis(0), &index);
        self.push(Value::Dense(y), Op::GatherRows { table, index })
    }

    pub fn segment_sum(&mut self, x: Var, segments: Vec<usize>, num_segments: usize) -> Var {
        let y = segment_sum(self.dense(x), &segments, num_segments);
        self.push(Value::Dense(y), Op::SegmentSum { x, segments })
    }

    /// Mean loss over all entries, as a `(1, 1)` value.
    pub fn loss(&mut self, pred: Var, target: Array2<f64>, kind: Loss) -> Result<Var> {
        let p = self.dense(pred);
        if p.dim() != target.dim() {
            return Err(Error::width("loss target", p.len(), target.len()));
        }
        let value = loss_value(p, &target, kind);
        Ok(self.push(Value::Dense(Array2::from_elem((1, 1), value)), Op::Loss { pred, target, kind }))
    }

    // ---- derivative tensors ----

    pub fn deriv_input(&mut self, d: DerivTensor) -> Var {
        self.push(Value::Deriv(d), Op::Leaf)
    }

    pub fn deriv_aggregate(&mut self, d: Var, agg: TapeAgg, concat: bool) -> Result<Var> {
        let out = deriv_aggregate(self.deriv(d), self.graph, &self.agg_value(agg), concat, Support::Structural)?;
        Ok(self.push(Value::Deriv(out), Op::DerivAggregate { d, agg, concat }))
    }

    pub fn deriv_affine(&mut self, d: Var, w: Var) -> Result<Var> {
        let out = deriv_affine(self.deriv(d), self.dense(w), Support::Structural)?;
        Ok(self.push(Value::Deriv(out), Op::DerivAffine { d, w }))
    }

    /// Chain rule through `act`, with `y` the pre-activation values.
    pub fn deriv_activation(&mut self, d: Var, y: Var, act: Activation) -> Result<Var> {
        let order = self.deriv(d).max_order();
        if order + 1 > MAX_ACT_ORDER {
            return Err(Error::OrderOverflow { requested: order + 1, max: MAX_ACT_ORDER });
        }
        self.table(order)?;
        let out = deriv_activation(self.deriv(d), self.dense(y), act, &self.tables[&order], Support::Structural)?;
        Ok(self.push(Value::Deriv(out), Op::DerivActivation { d, y, act }))
    }

    pub fn deriv_pool(&mut self, d: Var) -> Var {
        let out = deriv_pool(self.deriv(d));
        self.push(Value::Deriv(out), Op::DerivPool(d))
    }

    pub fn deriv_concat(&mut self, parts: &[(Var, f64)]) -> Result<Var> {
        let refs: Vec<(&DerivTensor, f64)> = parts.iter().map(|&(p, s)| (self.deriv(p), s)).collect();
        let out = deriv_concat(&refs)?;
        Ok(self.push(Value::Deriv(out), Op::DerivConcat(parts.to_vec())))
    }

    pub fn gather_diagonal(&mut self, d: Var, features: usize) -> Var {
        let y = gather_diagonal(self.deriv(d), features);
        self.push(Value::Dense(y), Op::GatherDiagonal { d, features })
    }

    pub fn gather_out(&mut self, d: Var, features: usize) -> Result<Var> {
        let y = gather_out(self.deriv(d), self.graph.num_nodes(), features)?;
        Ok(self.push(Value::Dense(y), Op::GatherOut { d, features }))
    }

    /// One row per stored entry, in canonical order, with the entry's node
    /// and pattern index.
    pub fn entry_values(&mut self, d: Var, table: &PatternTable) -> Result<(Var, EntryIndex)> {
        let batch = crate::encoders::entry_batch(self.deriv(d), table)?;
        let index = EntryIndex { nodes: batch.nodes, patterns: batch.patterns };
        Ok((self.push(Value::Dense(batch.values), Op::EntryValues(d)), index))
    }

    // ---- backward ----

    /// Propagates `seed` from `output` back to every parameter and returns the
    /// gradients by parameter name. The tape can be replayed only once.
    pub fn backward(&mut self, output: Var, seed: Array2<f64>) -> Result<HashMap<String, Array2<f64>>> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        self.consumed = true;
        if self.dense(output).dim() != seed.dim() {
            return Err(Error::width("seed gradient", self.dense(output).len(), seed.len()));
        }
        let mut grads: Vec<Option<Value>> = vec![None; self.values.len()];
        grads[output.0] = Some(Value::Dense(seed));
        let mut params: HashMap<String, Array2<f64>> = HashMap::new();
        for idx in (0..self.ops.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_op(idx, g, &mut grads, &mut params)?;
        }
        for (op, value) in self.ops.iter().zip(&self.values) {
            if let Op::Param(name) = op {
                params.entry(name.clone()).or_insert_with(|| Array2::zeros(value.dense().raw_dim()));
            }
        }
        self.values.clear();
        Ok(params)
    }

    fn backward_op(&self, idx: usize, g: Value, grads: &mut [Option<Value>], params: &mut HashMap<String, Array2<f64>>) -> Result<()> {
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::Param(name) => {
                let g = into_dense(g);
                match params.get_mut(name) {
                    Some(acc) => *acc += &g,
                    None => {
                        params.insert(name.clone(), g);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let g = into_dense(g);
                acc_dense(grads, *x, g.dot(self.dense(*w)));
                acc_dense(grads, *w, g.t().dot(self.dense(*x)));
                if let Some(b) = b {
                    acc_dense(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Activation { x, act } => {
                let mut g = into_dense(g);
                let xv = self.dense(*x);
                g.zip_mut_with(xv, |gi, &z| *gi *= act.deriv(1, z).unwrap());
                acc_dense(grads, *x, g);
            }
            Op::Aggregate { x, agg, concat } => {
                let g = into_dense(g);
                let xv = self.dense(*x);
                let w = xv.ncols();
                let (ga, pass) = if *concat { (g.slice(s![.., w..]).to_owned(), Some(g.slice(s![.., ..w]).to_owned())) } else { (g, None) };
                let agg_v = self.agg_value(*agg);
                let mut gx = ga.clone() * agg_v.self_coef();
                for v in 0..self.graph.num_nodes() {
                    let b = agg_v.neighbor_coef(self.graph, v);
                    for &u in self.graph.neighbors(v) {
                        gx.row_mut(u).scaled_add(b, &ga.row(v));
                    }
                }
                if let Some(p) = pass {
                    gx += &p;
                }
                acc_dense(grads, *x, gx);
                if let TapeAgg::Gin(eps) = agg {
                    let ge = (&ga * xv).sum();
                    acc_dense(grads, *eps, Array2::from_elem((1, 1), ge));
                }
            }
            Op::ConcatCols(xs) => {
                let g = into_dense(g);
                let mut off = 0;
                for &x in xs {
                    let w = self.dense(x).ncols();
                    acc_dense(grads, x, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::Scale { x, s } => acc_dense(grads, *x, into_dense(g) * *s),
            Op::SumRows(x) => {
                let g = into_dense(g);
                let n = self.dense(*x).nrows();
                acc_dense(grads, *x, g.broadcast((n, g.ncols())).unwrap().to_owned());
            }
            Op::GatherRows { table, index } => {
                let g = into_dense(g);
                let mut gt = Array2::zeros(self.dense(*table).raw_dim());
                for (r, &i) in index.iter().enumerate() {
                    let mut row = gt.row_mut(i);
                    row += &g.row(r);
                }
                acc_dense(grads, *table, gt);
            }
            Op::SegmentSum { x, segments } => {
                let g = into_dense(g);
                acc_dense(grads, *x, g.select(Axis(0), segments));
            }
            Op::Loss { pred, target, kind } => {
                let scale = into_dense(g)[[0, 0]];
                acc_dense(grads, *pred, loss_grad(self.dense(*pred), target, *kind) * scale);
            }
            Op::DerivAggregate { d, agg, concat } => {
                let g = into_deriv(g);
                let dv = self.deriv(*d);
                let w = dv.width();
                let off = if *concat { w } else { 0 };
                let agg_v = self.agg_value(*agg);
                let mut gd = zeros_like(dv);
                let mut ge = 0.0;
                for (v, row) in g.rows().iter().enumerate() {
                    for (key, gk) in row {
                        let ga = &gk[off..off + w];
                        if *concat {
                            if let Some(t) = gd.rows[v].get_mut(key) {
                                add(t, &gk[..w], 1.0);
                            }
                        }
                        if let Some(t) = gd.rows[v].get_mut(key) {
                            add(t, ga, agg_v.self_coef());
                        }
                        if let (TapeAgg::Gin(_), Some(x)) = (agg, dv.get(v, key)) {
                            ge += dot(ga, x);
                        }
                        let b = agg_v.neighbor_coef(self.graph, v);
                        for &u in self.graph.neighbors(v) {
                            if let Some(t) = gd.rows[u].get_mut(key) {
                                add(t, ga, b);
                            }
                        }
                    }
                }
                acc_deriv(grads, *d, gd);
                if let TapeAgg::Gin(eps) = agg {
                    acc_dense(grads, *eps, Array2::from_elem((1, 1), ge));
                }
            }
            Op::DerivAffine { d, w } => {
                let g = into_deriv(g);
                let dv = self.deriv(*d);
                let wv = self.dense(*w);
                let mut gd = zeros_like(dv);
                let mut gw = Array2::zeros(wv.raw_dim());
                for (v, row) in g.rows().iter().enumerate() {
                    for (key, gk) in row {
                        let x = dv.get(v, key).expect("affine keeps keys");
                        let t = gd.rows[v].get_mut(key).unwrap();
                        for (o, &go) in gk.iter().enumerate() {
                            if go != 0.0 {
                                for (i, ti) in t.iter_mut().enumerate() {
                                    *ti += wv[[o, i]] * go;
                                    gw[[o, i]] += go * x[i];
                                }
                            }
                        }
                    }
                }
                acc_deriv(grads, *d, gd);
                acc_dense(grads, *w, gw);
            }
            Op::DerivActivation { d, y, act } => {
                let g = into_deriv(g);
                if *act == Activation::Identity {
                    acc_deriv(grads, *d, g);
                    return Ok(());
                }
                let dv = self.deriv(*d);
                let yv = self.dense(*y);
                let table = &self.tables[&dv.max_order()];
                let mut gd = zeros_like(dv);
                let mut gy = Array2::zeros(yv.raw_dim());
                for (v, row) in g.rows().iter().enumerate() {
                    let sig = activation_table(*act, yv.row(v), dv.max_order() + 1);
                    let src = dv.row(v);
                    let gdrow = &mut gd.rows[v];
                    for (key, gk) in row {
                        for_each_term(src, key, table, |count, subkeys, factors| {
                            let n = factors.len();
                            for (i, &gi) in gk.iter().enumerate() {
                                if gi == 0.0 {
                                    continue;
                                }
                                let prod: f64 = factors.iter().map(|x| x[i]).product();
                                gy[[v, i]] += gi * count * sig[i][n + 1] * prod;
                                for (b, sub) in subkeys.iter().enumerate() {
                                    let others: f64 = factors.iter().enumerate().filter(|&(c, _)| c != b).map(|(_, x)| x[i]).product();
                                    gdrow.get_mut(sub).unwrap()[i] += gi * count * sig[i][n] * others;
                                }
                            }
                        });
                    }
                }
                acc_deriv(grads, *d, gd);
                acc_dense(grads, *y, gy);
            }
            Op::DerivPool(d) => {
                let g = into_deriv(g);
                let dv = self.deriv(*d);
                let mut gd = zeros_like(dv);
                for row in gd.rows.iter_mut() {
                    for (key, t) in row.iter_mut() {
                        if let Some(gk) = g.get(0, key) {
                            add(t, gk, 1.0);
                        }
                    }
                }
                acc_deriv(grads, *d, gd);
            }
            Op::DerivConcat(parts) => {
                let g = into_deriv(g);
                let mut off = 0;
                for &(p, scale) in parts {
                    let pv = self.deriv(p);
                    let w = pv.width();
                    let mut gp = zeros_like(pv);
                    for (v, row) in gp.rows.iter_mut().enumerate() {
                        for (key, t) in row.iter_mut() {
                            if let Some(gk) = g.get(v, key) {
                                add(t, &gk[off..off + w], scale);
                            }
                        }
                    }
                    acc_deriv(grads, p, gp);
                    off += w;
                }
            }
            Op::GatherDiagonal { d, features } => {
                let g = into_dense(g);
                let dv = self.deriv(*d);
                let (m, w) = (dv.max_order(), dv.width());
                let mut gd = zeros_like(dv);
                for (v, row) in gd.rows.iter_mut().enumerate() {
                    for (key, t) in row.iter_mut() {
                        let s = key.slots()[0];
                        if key.arity() == 1 && s.node == v && s.feature < *features {
                            for (i, ti) in t.iter_mut().enumerate() {
                                *ti += g[[v, gather_index(s.feature, s.order, i, m, w)]];
                            }
                        }
                    }
                }
                acc_deriv(grads, *d, gd);
            }
            Op::GatherOut { d, features } => {
                let g = into_dense(g);
                let dv = self.deriv(*d);
                let (m, w) = (dv.max_order(), dv.width());
                let mut gd = zeros_like(dv);
                for (key, t) in gd.rows[0].iter_mut() {
                    let s = key.slots()[0];
                    if key.arity() == 1 && s.node < g.nrows() && s.feature < *features {
                        for (i, ti) in t.iter_mut().enumerate() {
                            *ti += g[[s.node, gather_index(s.feature, s.order, i, m, w)]];
                        }
                    }
                }
                acc_deriv(grads, *d, gd);
            }
            Op::EntryValues(d) => {
                let g = into_dense(g);
                let mut gd = zeros_like(self.deriv(*d));
                for (e, t) in gd.rows.iter_mut().flat_map(|r| r.values_mut()).enumerate() {
                    add(t, g.row(e).as_slice().unwrap(), 1.0);
                }
                acc_deriv(grads, *d, gd);
            }
        }
        Ok(())
    }
}

fn into_dense(v: Value) -> Array2<f64> {
    match v {
        Value::Dense(x) => x,
        Value::Deriv(_) => panic!("dense gradient expected"),
    }
}

fn into_deriv(v: Value) -> DerivTensor {
    match v {
        Value::Deriv(d) => d,
        Value::Dense(_) => panic!("derivative-tensor gradient expected"),
    }
}

fn zeros_like(d: &DerivTensor) -> DerivTensor {
    let mut out = d.clone();
    for x in out.rows.iter_mut().flat_map(|r| r.values_mut()) {
        x.fill(0.0);
    }
    out
}

fn add(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn acc_dense(grads: &mut [Option<Value>], x: Var, g: Array2<f64>) {
    match &mut grads[x.0] {
        Some(Value::Dense(acc)) => *acc += &g,
        slot => *slot = Some(Value::Dense(g)),
    }
}

fn acc_deriv(grads: &mut [Option<Value>], x: Var, g: DerivTensor) {
    match &mut grads[x.0] {
        Some(Value::Deriv(acc)) => {
            for (v, row) in g.rows.into_iter().enumerate() {
                for (key, gk) in row {
                    match acc.rows[v].get_mut(&key) {
                        Some(t) => add(t, &gk, 1.0),
                        None => {
                            acc.rows[v].insert(key, gk);
                        }
                    }
                }
            }
        }
        slot => *slot = Some(Value::Deriv(g)),
    }
}

pub fn loss_value(p: &Array2<f64>, t: &Array2<f64>, kind: Loss) -> f64 {
    let n = p.len().max(1) as f64;
    let total: f64 = p
        .iter()
        .zip(t)
        .map(|(&z, &y)| match kind {
            Loss::Mse => (z - y) * (z - y),
            Loss::Mae => (z - y).abs(),
            Loss::BceLogits => z.max(0.0) - z * y + (-z.abs()).exp().ln_1p(),
        })
        .sum();
    total / n
}

fn loss_grad(p: &Array2<f64>, t: &Array2<f64>, kind: Loss) -> Array2<f64> {
    let n = p.len().max(1) as f64;
    let mut g = p.clone();
    g.zip_mut_with(t, |z, &y| {
        *z = match kind {
            Loss::Mse => 2.0 * (*z - y) / n,
            Loss::Mae => (*z - y).signum() * ((*z - y) != 0.0) as u8 as f64 / n,
            Loss::BceLogits => (1.0 / (1.0 + (-*z).exp()) - y) / n,
        }
    });
    g
}
