//! The derivative-informed pipeline: base network, derivative tensors,
//! encoders, and the downstream network fed with `h^der`. Also hosts the
//! node-marking reference model and its Taylor approximation.

use std::time::Instant;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::deriv::{compute_all, DerivConfig, DerivKey, MAX_ORDER};
use crate::encoders::{encode_out, random_deepsets, DeepSets, EncoderDims, NodeEncoder, PatternTable};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::json::{from_rows, to_rows};
use crate::mpnn::{factorial, Aggregation, Layer, Mlp, MpnnModel};

/// Parameter group, each with its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Base,
    Downstream,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HodConfig {
    pub k: usize,
    /// Largest derivative order; 0 disables both derivative streams.
    pub max_order: usize,
    /// Include the base network's node features in `h^der`.
    #[serde(default = "default_true")]
    pub use_base: bool,
    /// Feed derivatives of the base readout through the output encoder.
    #[serde(default)]
    pub use_out: bool,
    /// Input features to differentiate with respect to; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<usize>>,
}

fn default_true() -> bool {
    true
}

/// Callback receiving `(name, group, shape, values)` for each parameter.
pub type ParamVisitor<'a> = dyn FnMut(&str, Group, (usize, usize), &mut [f64]) + 'a;

/// Owned `(name, group, shape, values)`.
pub type ParamEntry = (String, Group, (usize, usize), Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct HodModel {
    pub base: MpnnModel,
    pub node_encoder: Option<NodeEncoder>,
    pub out_encoder: Option<Mlp>,
    pub downstream: MpnnModel,
    pub config: HodConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct StageWidths {
    pub base: usize,
    pub out: usize,
    pub node: usize,
    pub h_der: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Diagnostics {
    pub widths: StageWidths,
    pub nnz_per_layer: Vec<usize>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct HodOutput {
    pub h_der: Array2<f64>,
    /// Node predictions `(n, out)` or the graph prediction `(1, out)`.
    pub prediction: Array2<f64>,
    pub diagnostics: Diagnostics,
}

impl HodModel {
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        self.base.validate()?;
        self.downstream.validate()?;
        if cfg.max_order > MAX_ORDER {
            return Err(Error::OrderOverflow { requested: cfg.max_order, max: MAX_ORDER });
        }
        if !(1..=2).contains(&cfg.k) {
            return Err(Error::UnsupportedArity(cfg.k));
        }
        if cfg.max_order == 0 && (self.node_encoder.is_some() || self.out_encoder.is_some()) {
            return Err(Error::Validation("derivative encoders need max_order >= 1".into()));
        }
        if cfg.use_out != self.out_encoder.is_some() {
            return Err(Error::Validation("use_out must match the presence of an output encoder".into()));
        }
        let dims = self.node_dims();
        match &self.node_encoder {
            Some(NodeEncoder::Diagonal(mlp)) if mlp.input_width() != dims.gathered() => {
                return Err(Error::width("diagonal encoder input", dims.gathered(), mlp.input_width()));
            }
            Some(NodeEncoder::DeepSets(ds)) => {
                if ds.phi.input_width() != dims.width + ds.embedding.ncols() {
                    return Err(Error::width("DeepSets input", dims.width + ds.embedding.ncols(), ds.phi.input_width()));
                }
                if ds.embedding.nrows() != ds.table.len() {
                    return Err(Error::width("pattern embedding rows", ds.table.len(), ds.embedding.nrows()));
                }
                if ds.table.dims() != (cfg.k, cfg.max_order, dims.features) {
                    return Err(Error::Validation("pattern table does not match the derivative config".into()));
                }
            }
            _ => {}
        }
        if let Some(mlp) = &self.out_encoder {
            let readout = self.base.readout.as_ref().ok_or_else(|| Error::Validation("output encoder needs a base readout".into()))?;
            let expected = dims.features * cfg.max_order * readout.output_width();
            if mlp.input_width() != expected {
                return Err(Error::width("output encoder input", expected, mlp.input_width()));
            }
        }
        let widths = self.widths();
        if self.downstream.input_width() != widths.h_der {
            return Err(Error::width("downstream input", widths.h_der, self.downstream.input_width()));
        }
        Ok(())
    }

    pub fn node_dims(&self) -> EncoderDims {
        EncoderDims { features: self.base.input_width(), max_order: self.config.max_order, width: self.base.node_width() }
    }

    pub fn widths(&self) -> StageWidths {
        let base = if self.config.use_base { self.base.node_width() } else { 0 };
        let out = self.out_encoder.as_ref().map_or(0, Mlp::output_width);
        let node = self.node_encoder.as_ref().map_or(0, NodeEncoder::output_width);
        StageWidths { base, out, node, h_der: base + out + node }
    }

    pub fn deriv_config(&self) -> Result<DerivConfig> {
        let cfg = DerivConfig::new(self.config.k, self.config.max_order)?;
        Ok(match &self.config.features {
            Some(f) => cfg.with_features(f.clone()),
            None => cfg,
        })
    }

    pub fn num_params(&self) -> usize {
        self.base.num_params()
            + self.node_encoder.as_ref().map_or(0, NodeEncoder::num_params)
            + self.out_encoder.as_ref().map_or(0, Mlp::num_params)
            + self.downstream.num_params()
    }

    /// Visits every trainable parameter with a stable name, its group, its
    /// matrix shape and its values in row-major order.
    pub fn visit_params(&mut self, f: &mut ParamVisitor) {
        visit_mpnn("base", &mut self.base, Group::Base, f);
        match &mut self.node_encoder {
            Some(NodeEncoder::Diagonal(mlp)) => visit_mlp("encoders.node.mlp", mlp, Group::Downstream, f),
            Some(NodeEncoder::DeepSets(ds)) => {
                let shape = ds.embedding.dim();
                f("encoders.node.embedding", Group::Downstream, shape, ds.embedding.as_slice_mut().unwrap());
                visit_mlp("encoders.node.phi", &mut ds.phi, Group::Downstream, f);
                visit_mlp("encoders.node.rho", &mut ds.rho, Group::Downstream, f);
            }
            None => {}
        }
        if let Some(mlp) = &mut self.out_encoder {
            visit_mlp("encoders.out", mlp, Group::Downstream, f);
        }
        visit_mpnn("downstream", &mut self.downstream, Group::Downstream, f);
    }

    /// `(name, group, shape, values)` for every parameter.
    pub fn param_list(&self) -> Vec<ParamEntry> {
        let mut copy = self.clone();
        let mut out = Vec::new();
        copy.visit_params(&mut |name, group, shape, values| out.push((name.to_string(), group, shape, values.to_vec())));
        out
    }

    pub fn forward(&self, g: &Graph) -> Result<HodOutput> {
        let start = Instant::now();
        let widths = self.widths();
        let mut blocks: Vec<Array2<f64>> = Vec::new();
        let mut nnz_per_layer = Vec::new();
        if self.config.max_order == 0 || (self.node_encoder.is_none() && self.out_encoder.is_none()) {
            let rec = self.base.forward(g)?;
            if self.config.use_base {
                blocks.push(rec.node_out);
            }
        } else {
            let d = compute_all(&self.base, g, &self.deriv_config()?)?;
            nnz_per_layer = d.layers.iter().map(|t| t.nnz()).collect();
            let features = self.base.input_width();
            if self.config.use_base {
                blocks.push(d.record.node_out.clone());
            }
            if let Some(mlp) = &self.out_encoder {
                let out = d.out.as_ref().ok_or_else(|| Error::Validation("missing output derivatives".into()))?;
                blocks.push(encode_out(out, mlp, g.num_nodes(), features)?);
            }
            if let Some(enc) = &self.node_encoder {
                blocks.push(enc.encode(&d.node, features)?);
            }
        }
        let h_der = if blocks.is_empty() {
            Array2::zeros((g.num_nodes(), 0))
        } else {
            let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
            concatenate(Axis(1), &views).expect("blocks share a row count")
        };
        let rec = self.downstream.forward_features(g, &h_der)?;
        let prediction = rec.output.unwrap_or(rec.node_out);
        let diagnostics = Diagnostics { widths, nnz_per_layer, seconds: start.elapsed().as_secs_f64() };
        Ok(HodOutput { h_der, prediction, diagnostics })
    }
}

pub(crate) fn weight_name(prefix: &str, l: usize) -> String {
    format!("{prefix}.{l}.weight")
}

pub(crate) fn bias_name(prefix: &str, l: usize) -> String {
    format!("{prefix}.{l}.bias")
}

pub(crate) fn eps_name(prefix: &str, t: usize) -> String {
    format!("{prefix}.layers.{t}.eps")
}

pub(crate) fn layer_mlp_prefix(prefix: &str, t: usize) -> String {
    format!("{prefix}.layers.{t}.mlp")
}

pub(crate) fn readout_prefix(prefix: &str) -> String {
    format!("{prefix}.readout")
}

fn visit_mlp(prefix: &str, mlp: &mut Mlp, group: Group, f: &mut ParamVisitor) {
    for (l, (w, b)) in mlp.weights.iter_mut().zip(mlp.biases.iter_mut()).enumerate() {
        let shape = w.dim();
        f(&weight_name(prefix, l), group, shape, w.as_slice_mut().expect("weights are contiguous"));
        let len = b.len();
        f(&bias_name(prefix, l), group, (1, len), b.as_slice_mut().expect("biases are contiguous"));
    }
}

fn visit_mpnn(prefix: &str, model: &mut MpnnModel, group: Group, f: &mut ParamVisitor) {
    for (t, layer) in model.layers.iter_mut().enumerate() {
        if let Aggregation::Gin { eps } = &mut layer.agg {
            f(&eps_name(prefix, t), group, (1, 1), std::slice::from_mut(eps));
        }
        visit_mlp(&layer_mlp_prefix(prefix, t), &mut layer.mlp, group, f);
    }
    if let Some(r) = &mut model.readout {
        visit_mlp(&readout_prefix(prefix), r, group, f);
    }
}

// ---- construction ----

/// How the base network's weights start out.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BaseInit {
    /// Uniform weights in `[-bound, bound]`.
    Random { bound: f64 },
    /// Identity weights, `eps = -1`, zero biases, plus uniform noise.
    Identity { noise: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeEncoderKind {
    None,
    Diagonal,
    Deepsets,
}

/// Architecture description used to build fresh models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HodSpec {
    pub input_width: usize,
    pub base_hidden: usize,
    pub base_depth: usize,
    pub base_activation: Activation,
    pub base_init: BaseInit,
    #[serde(default)]
    pub residual: bool,
    pub k: usize,
    pub max_order: usize,
    pub node_encoder: NodeEncoderKind,
    pub encoder_width: usize,
    #[serde(default)]
    pub use_out: bool,
    #[serde(default = "default_true")]
    pub use_base: bool,
    pub hidden: usize,
    pub depth: usize,
    pub activation: Activation,
    /// Width of the prediction.
    pub output_width: usize,
    /// Graph-level prediction through a sum-pool readout.
    pub graph_level: bool,
    /// Bound of the uniform initialization of everything except the base.
    #[serde(default = "default_bound")]
    pub bound: f64,
}

fn default_bound() -> f64 {
    0.5
}

impl HodSpec {
    pub fn build<R: Rng>(&self, rng: &mut R) -> Result<HodModel> {
        let base = self.build_base(rng);
        let config = HodConfig {
            k: self.k,
            max_order: self.max_order,
            use_base: self.use_base,
            use_out: self.use_out && self.max_order > 0,
            features: None,
        };
        let dims = EncoderDims { features: self.input_width, max_order: self.max_order, width: base.node_width() };
        let bound = self.bound;
        let node_encoder = match (self.node_encoder, self.max_order) {
            (_, 0) | (NodeEncoderKind::None, _) => None,
            (NodeEncoderKind::Diagonal, _) => Some(NodeEncoder::Diagonal(Mlp::random(
                &[dims.gathered(), self.encoder_width, self.encoder_width],
                self.activation,
                false,
                scaled(bound, dims.gathered()),
                rng,
            ))),
            (NodeEncoderKind::Deepsets, _) => Some(NodeEncoder::DeepSets(random_deepsets(
                dims,
                self.k,
                self.encoder_width,
                self.encoder_width,
                self.encoder_width,
                self.activation,
                bound,
                rng,
            ))),
        };
        let out_encoder = if config.use_out {
            let readout_width = base.readout.as_ref().map_or(0, Mlp::output_width);
            let input = self.input_width * self.max_order * readout_width;
            Some(Mlp::random(&[input, self.encoder_width, self.encoder_width], self.activation, false, scaled(bound, input), rng))
        } else {
            None
        };
        let h_der = (if self.use_base { base.node_width() } else { 0 })
            + node_encoder.as_ref().map_or(0, NodeEncoder::output_width)
            + out_encoder.as_ref().map_or(0, Mlp::output_width);
        if h_der == 0 {
            return Err(Error::Validation("the configuration leaves h_der empty".into()));
        }
        let downstream = self.build_downstream(h_der, rng);
        let model = HodModel { base, node_encoder, out_encoder, downstream, config };
        model.validate()?;
        Ok(model)
    }

    fn build_base<R: Rng>(&self, rng: &mut R) -> MpnnModel {
        let width = self.base_hidden;
        let act = self.base_activation;
        let mut layers = Vec::with_capacity(self.base_depth);
        let mut input = self.input_width;
        for _ in 0..self.base_depth {
            let (agg, mlp) = match self.base_init {
                BaseInit::Random { bound } => (
                    Aggregation::Gin { eps: rng.gen_range(-bound..=bound) },
                    Mlp::random(&[input, width, width], act, true, scaled(bound, input), rng),
                ),
                BaseInit::Identity { noise } => {
                    let mut mlp = Mlp::zeros(&[input, width, width], act, true);
                    for w in &mut mlp.weights {
                        for ((r, c), x) in w.indexed_iter_mut() {
                            *x = if r == c { 1.0 } else { 0.0 };
                        }
                    }
                    add_noise(&mut mlp, noise, rng);
                    (Aggregation::Gin { eps: -1.0 + rng.gen_range(-noise..=noise) }, mlp)
                }
            };
            layers.push(Layer { agg, concat: false, mlp });
            input = width;
        }
        let node_width = if self.residual { width * self.base_depth } else { width };
        let readout = self.use_out.then(|| {
            let bound = match self.base_init {
                BaseInit::Random { bound } => bound,
                BaseInit::Identity { noise } => noise.max(0.1),
            };
            Mlp::random(&[node_width, width, 1], act, false, scaled(bound, node_width), rng)
        });
        MpnnModel { layers, readout, residual: self.residual }
    }

    fn build_downstream<R: Rng>(&self, input: usize, rng: &mut R) -> MpnnModel {
        let mut layers = Vec::with_capacity(self.depth);
        let mut width = input;
        for _ in 0..self.depth {
            let mlp = Mlp::random(&[width, self.hidden, self.hidden], self.activation, true, scaled(self.bound, width), rng);
            layers.push(Layer { agg: Aggregation::Gin { eps: 0.0 }, concat: false, mlp });
            width = self.hidden;
        }
        let head = Mlp::random(&[width, self.hidden, self.output_width], self.activation, false, scaled(self.bound, width), rng);
        if self.graph_level {
            MpnnModel { layers, readout: Some(head), residual: false }
        } else {
            // node-level head: a final layer that ignores neighbors
            layers.push(Layer { agg: Aggregation::Gin { eps: -1.0 }, concat: true, mlp: node_head(head) });
            MpnnModel { layers, readout: None, residual: false }
        }
    }
}

fn scaled(bound: f64, fan_in: usize) -> f64 {
    bound / (fan_in.max(1) as f64).sqrt()
}

fn add_noise<R: Rng>(mlp: &mut Mlp, noise: f64, rng: &mut R) {
    if noise > 0.0 {
        for x in mlp.weights.iter_mut().flat_map(|w| w.iter_mut()).chain(mlp.biases.iter_mut().flat_map(|b| b.iter_mut())) {
            *x += rng.gen_range(-noise..=noise);
        }
    }
}

/// Widens the first weight of `head` so it reads only the node's own half of
/// a concatenated input.
fn node_head(mut head: Mlp) -> Mlp {
    let w = &head.weights[0];
    let mut wide = Array2::zeros((w.nrows(), 2 * w.ncols()));
    wide.slice_mut(ndarray::s![.., ..w.ncols()]).assign(w);
    head.weights[0] = wide;
    head
}

// ---- node marking ----

/// Appends one channel per mark, holding `value` at `node` and 0 elsewhere.
pub fn with_marks(g: &Graph, marks: &[(usize, f64)]) -> Result<Graph> {
    let n = g.num_nodes();
    let d = g.feature_width();
    let mut x = Array2::zeros((n, d + marks.len()));
    x.slice_mut(ndarray::s![.., ..d]).assign(g.features());
    for (c, &(node, value)) in marks.iter().enumerate() {
        if node >= n {
            return Err(Error::Validation(format!("marked node {node} out of range")));
        }
        x[[node, d + c]] = value;
    }
    g.clone().with_features(x)
}

fn pooled_output(base: &MpnnModel, g: &Graph) -> Result<Array1<f64>> {
    let rec = base.forward(g)?;
    rec.graph_output().ok_or_else(|| Error::Validation("base network needs a readout".into()))
}

/// Output of `base` on `g` with a marking channel equal to `epsilon` at `v`.
pub fn ds_gnn_oracle(base: &MpnnModel, g: &Graph, v: usize, epsilon: f64) -> Result<Array1<f64>> {
    pooled_output(base, &with_marks(g, &[(v, epsilon)])?)
}

/// Largest graph for the pairwise marking bag.
pub const MAX_PAIR_BAG_NODES: usize = 12;

/// Outputs for every marked node (`k = 1`) or ordered node pair (`k = 2`).
pub fn ds_gnn_bag(base: &MpnnModel, g: &Graph, k: usize, epsilon: f64) -> Result<Vec<Array1<f64>>> {
    use rayon::prelude::*;
    let n = g.num_nodes();
    let tuples: Vec<Vec<(usize, f64)>> = match k {
        1 => (0..n).map(|v| vec![(v, epsilon)]).collect(),
        2 => {
            if n > MAX_PAIR_BAG_NODES {
                return Err(Error::Validation(format!("pair marking limited to {MAX_PAIR_BAG_NODES} nodes")));
            }
            (0..n).flat_map(|a| (0..n).map(move |b| vec![(a, epsilon), (b, epsilon)])).collect()
        }
        other => return Err(Error::UnsupportedArity(other)),
    };
    tuples.par_iter().map(|marks| pooled_output(base, &with_marks(g, marks)?)).collect()
}

/// `sum_{i <= order} eps^i / i! * d^i out / d(mark at v)^i`, with the
/// derivatives taken by the engine on the marking channel.
pub fn taylor_subgraph_approx(base: &MpnnModel, g: &Graph, v: usize, epsilon: f64, order: usize) -> Result<Array1<f64>> {
    if base.layers.iter().any(|l| !l.mlp.activation.is_analytic()) || base.readout.as_ref().is_some_and(|r| !r.activation.is_analytic()) {
        log::warn!("Taylor expansion of a non-analytic network may not converge");
    }
    let marked = with_marks(g, &[(v, 0.0)])?;
    let channel = marked.feature_width() - 1;
    if order == 0 {
        return pooled_output(base, &marked);
    }
    let cfg = DerivConfig::new(1, order)?.with_features(vec![channel]);
    let d = compute_all(base, &marked, &cfg)?;
    let mut total = d.record.graph_output().ok_or_else(|| Error::Validation("base network needs a readout".into()))?;
    let out = d.out.expect("readout present");
    for i in 1..=order {
        if let Some(x) = out.get(0, &DerivKey::single(v, channel, i)) {
            let scale = epsilon.powi(i as i32) / factorial(i);
            total.zip_mut_with(&Array1::from(x.to_vec()), |t, &xi| *t += scale * xi);
        }
    }
    Ok(total)
}

/// Whether two outputs differ by more than `tol` in some coordinate.
pub fn distinguish(a: &Array1<f64>, b: &Array1<f64>, tol: f64) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::width("compared outputs", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).any(|(x, y)| (x - y).abs() > tol))
}

// ---- JSON layout ----

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum NodeEncoderFile {
    Diagonal { mlp: Mlp },
    Deepsets { k: usize, max_order: usize, features: usize, embedding: Vec<Vec<f64>>, phi: Mlp, rho: Mlp },
}

#[derive(Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct EncodersFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node: Option<NodeEncoderFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out: Option<Mlp>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HodFile {
    base: MpnnModel,
    #[serde(default)]
    encoders: EncodersFile,
    downstream: MpnnModel,
    config: HodConfig,
}

impl Serialize for HodModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let node = self.node_encoder.as_ref().map(|e| match e {
            NodeEncoder::Diagonal(mlp) => NodeEncoderFile::Diagonal { mlp: mlp.clone() },
            NodeEncoder::DeepSets(ds) => {
                let (k, max_order, features) = ds.table.dims();
                NodeEncoderFile::Deepsets {
                    k,
                    max_order,
                    features,
                    embedding: to_rows(&ds.embedding),
                    phi: ds.phi.clone(),
                    rho: ds.rho.clone(),
                }
            }
        });
        HodFile {
            base: self.base.clone(),
            encoders: EncodersFile { node, out: self.out_encoder.clone() },
            downstream: self.downstream.clone(),
            config: self.config.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for HodModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let file = HodFile::deserialize(d)?;
        let node_encoder = match file.encoders.node {
            None => None,
            Some(NodeEncoderFile::Diagonal { mlp }) => Some(NodeEncoder::Diagonal(mlp)),
            Some(NodeEncoderFile::Deepsets { k, max_order, features, embedding, phi, rho }) => {
                let table = PatternTable::new(k, max_order, features);
                let cols = phi.input_width().saturating_sub(file.base.node_width());
                let embedding = from_rows(embedding, cols, "pattern embedding").map_err(D::Error::custom)?;
                Some(NodeEncoder::DeepSets(DeepSets { table, embedding, phi, rho }))
            }
        };
        let model =
            HodModel { base: file.base, node_encoder, out_encoder: file.encoders.out, downstream: file.downstream, config: file.config };
        model.validate().map_err(D::Error::custom)?;
        Ok(model)
    }
}
