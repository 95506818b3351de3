//! Message-passing networks: GIN-style sum aggregation and degree-mean
//! aggregation layers, two-layer node MLPs, and an optional sum-pool readout.

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Aggregation {
    /// `(1 + eps) h_v + sum of neighbors`.
    Gin { eps: f64 },
    /// Mean over neighbors; the node itself is excluded.
    Mean,
}

impl Aggregation {
    /// Weight of the node's own row.
    pub fn self_coef(&self) -> f64 {
        match *self {
            Aggregation::Gin { eps } => 1.0 + eps,
            Aggregation::Mean => 0.0,
        }
    }

    /// Weight of each neighbor row when aggregating into `v`.
    pub fn neighbor_coef(&self, g: &Graph, v: usize) -> f64 {
        match self {
            Aggregation::Gin { .. } => 1.0,
            Aggregation::Mean => 1.0 / g.degree(v) as f64,
        }
    }

    pub(crate) fn check(&self, g: &Graph) -> Result<()> {
        if let Aggregation::Mean = self {
            if let Some(v) = g.first_isolated() {
                return Err(Error::IsolatedNode(v));
            }
        }
        Ok(())
    }
}

pub fn aggregate(g: &Graph, h: &Array2<f64>, agg: &Aggregation) -> Result<Array2<f64>> {
    if h.nrows() != g.num_nodes() {
        return Err(Error::width("aggregation rows", g.num_nodes(), h.nrows()));
    }
    agg.check(g)?;
    let mut out = h * agg.self_coef();
    for v in 0..g.num_nodes() {
        let b = agg.neighbor_coef(g, v);
        let mut row = out.row_mut(v);
        for &u in g.neighbors(v) {
            row.scaled_add(b, &h.row(u));
        }
    }
    Ok(out)
}

/// Dense feed-forward stack. Weight `l` has shape `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub activation: Activation,
    /// Whether the activation also follows the last affine map.
    pub activate_last: bool,
}

impl Mlp {
    pub fn new(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>, activation: Activation, activate_last: bool) -> Result<Self> {
        let mlp = Mlp { weights, biases, activation, activate_last };
        mlp.validate()?;
        Ok(mlp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.biases.len() {
            return Err(Error::Validation("MLP needs one bias per weight and at least one layer".into()));
        }
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.nrows() != b.len() {
                return Err(Error::width(format!("MLP layer {l} bias"), w.nrows(), b.len()));
            }
            if l > 0 && w.ncols() != self.weights[l - 1].nrows() {
                return Err(Error::width(format!("MLP layer {l} input"), self.weights[l - 1].nrows(), w.ncols()));
            }
            if w.iter().chain(b.iter()).any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!("MLP layer {l} has non-finite parameters")));
            }
        }
        Ok(())
    }

    pub fn identity(width: usize, depth: usize, activation: Activation) -> Self {
        Mlp { weights: vec![Array2::eye(width); depth], biases: vec![Array1::zeros(width); depth], activation, activate_last: true }
    }

    pub fn zeros(widths: &[usize], activation: Activation, activate_last: bool) -> Self {
        Mlp {
            weights: widths.windows(2).map(|w| Array2::zeros((w[1], w[0]))).collect(),
            biases: widths[1..].iter().map(|&w| Array1::zeros(w)).collect(),
            activation,
            activate_last,
        }
    }

    /// Weights and biases drawn uniformly from `[-bound, bound]`.
    pub fn random<R: Rng>(widths: &[usize], activation: Activation, activate_last: bool, bound: f64, rng: &mut R) -> Self {
        let mut mlp = Mlp::zeros(widths, activation, activate_last);
        for x in mlp.weights.iter_mut().flat_map(|w| w.iter_mut()) {
            *x = rng.gen_range(-bound..=bound);
        }
        for x in mlp.biases.iter_mut().flat_map(|b| b.iter_mut()) {
            *x = rng.gen_range(-bound..=bound);
        }
        mlp
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn input_width(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_width(&self) -> usize {
        self.weights.last().unwrap().nrows()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width()).chain(self.weights.iter().map(|w| w.nrows())).collect()
    }

    /// Activation applied after layer `l`, if any.
    pub fn activation_at(&self, l: usize) -> Activation {
        if l + 1 < self.depth() || self.activate_last {
            self.activation
        } else {
            Activation::Identity
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Applies the MLP row-wise, returning the output and each layer's
    /// pre-activation.
    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
        if x.ncols() != self.input_width() {
            return Err(Error::width("MLP input", self.input_width(), x.ncols()));
        }
        let mut preacts = Vec::with_capacity(self.depth());
        let mut h = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = h.dot(&w.t()) + b;
            let act = self.activation_at(l);
            h = z.mapv(|v| act.value(v));
            preacts.push(z);
        }
        Ok((h, preacts))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub agg: Aggregation,
    /// Feed `h_v ⊕ agg(h)_v` to the MLP instead of `agg(h)_v` alone.
    pub concat: bool,
    pub mlp: Mlp,
}

impl Layer {
    pub fn input_width(&self) -> usize {
        if self.concat {
            self.mlp.input_width() / 2
        } else {
            self.mlp.input_width()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpnnModel {
    pub layers: Vec<Layer>,
    pub readout: Option<Mlp>,
    /// Replace the final node features by `⊕_t h^(t) / t!`.
    pub residual: bool,
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardRecord {
    /// `h^(0)` through `h^(T)`.
    pub hidden: Vec<Array2<f64>>,
    /// MLP input of each layer, after aggregation and optional concatenation.
    pub aggregated: Vec<Array2<f64>>,
    /// Pre-activations of each MLP layer, per message-passing layer.
    pub preacts: Vec<Vec<Array2<f64>>>,
    /// Final node features: `h^(T)` or its residual concatenation.
    pub node_out: Array2<f64>,
    /// Readout pre-activations, each of shape `(1, width)`.
    pub readout_preacts: Vec<Array2<f64>>,
    /// Readout output, shape `(1, width)`.
    pub output: Option<Array2<f64>>,
}

impl ForwardRecord {
    pub fn graph_output(&self) -> Option<Array1<f64>> {
        self.output.as_ref().map(|o| o.row(0).to_owned())
    }
}

pub fn factorial(t: usize) -> f64 {
    (1..=t).map(|i| i as f64).product()
}

/// Concatenates `hidden[t] / t!` for `t = 1..=T`.
pub fn residual_concat(hidden: &[Array2<f64>]) -> Array2<f64> {
    let blocks: Vec<Array2<f64>> = hidden.iter().enumerate().skip(1).map(|(t, h)| h / factorial(t)).collect();
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    concatenate(Axis(1), &views).expect("hidden blocks share a row count")
}

impl MpnnModel {
    pub fn new(layers: Vec<Layer>, readout: Option<Mlp>, residual: bool) -> Result<Self> {
        let model = MpnnModel { layers, readout, residual };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Validation("model needs at least one layer".into()));
        }
        for (t, layer) in self.layers.iter().enumerate() {
            layer.mlp.validate()?;
            if layer.concat && layer.mlp.input_width() % 2 != 0 {
                return Err(Error::Validation(format!("layer {t} concatenates but has odd MLP input width")));
            }
            if t > 0 {
                let prev = self.layers[t - 1].mlp.output_width();
                if layer.input_width() != prev {
                    return Err(Error::width(format!("layer {t} input"), prev, layer.input_width()));
                }
            }
        }
        if let Some(r) = &self.readout {
            r.validate()?;
            if r.input_width() != self.node_width() {
                return Err(Error::width("readout input", self.node_width(), r.input_width()));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    /// Width of the final node features.
    pub fn node_width(&self) -> usize {
        if self.residual {
            self.layers.iter().map(|l| l.mlp.output_width()).sum()
        } else {
            self.layers.last().unwrap().mlp.output_width()
        }
    }

    pub fn num_params(&self) -> usize {
        let gin = self.layers.iter().filter(|l| matches!(l.agg, Aggregation::Gin { .. })).count();
        self.layers.iter().map(|l| l.mlp.num_params()).sum::<usize>() + self.readout.as_ref().map_or(0, Mlp::num_params) + gin
    }

    pub fn forward(&self, g: &Graph) -> Result<ForwardRecord> {
        self.forward_features(g, g.features())
    }

    /// Forward pass with `features` in place of the graph's own.
    pub fn forward_features(&self, g: &Graph, features: &Array2<f64>) -> Result<ForwardRecord> {
        if features.ncols() != self.input_width() {
            return Err(Error::width("node features", self.input_width(), features.ncols()));
        }
        let mut hidden = vec![features.clone()];
        let mut aggregated = Vec::with_capacity(self.depth());
        let mut preacts = Vec::with_capacity(self.depth());
        for layer in &self.layers {
            let h = hidden.last().unwrap();
            let mut x = aggregate(g, h, &layer.agg)?;
            if layer.concat {
                x = concatenate![Axis(1), h.view(), x.view()];
            }
            let (out, z) = layer.mlp.forward(&x)?;
            aggregated.push(x);
            preacts.push(z);
            hidden.push(out);
        }
        let node_out = if self.residual { residual_concat(&hidden) } else { hidden.last().unwrap().clone() };
        let (readout_preacts, output) = match &self.readout {
            Some(r) => {
                let pooled = node_out.sum_axis(Axis(0)).insert_axis(Axis(0));
                let (out, z) = r.forward(&pooled)?;
                (z, Some(out))
            }
            None => (Vec::new(), None),
        };
        Ok(ForwardRecord { hidden, aggregated, preacts, node_out, readout_preacts, output })
    }
}

/// `depth` GIN layers with identity MLPs and identity activations, so that
/// `h^(t) = (A + (1 + eps) I)^t X`.
pub fn gin_identity_init(depth: usize, width: usize, eps: f64) -> MpnnModel {
    let layers = (0..depth)
        .map(|_| Layer { agg: Aggregation::Gin { eps }, concat: false, mlp: Mlp::identity(width, 2, Activation::Identity) })
        .collect();
    MpnnModel { layers, readout: None, residual: false }
}

/// Mean-aggregation ReLU network over an all-ones input of width `steps`
/// whose coordinate `c` is averaged over neighbors exactly `c + 1` times.
/// The first-order diagonal derivative of output coordinate `c` with respect
/// to input coordinate `c` is then the `c + 1`-step return probability.
pub fn rwse_init(depth: usize, steps: usize) -> Result<MpnnModel> {
    if depth != steps || steps == 0 {
        return Err(Error::Validation(format!("random-walk initialization needs depth == steps >= 1, got {depth} and {steps}")));
    }
    let layers = (0..depth)
        .map(|t| {
            let mut select = Array2::zeros((steps, 2 * steps));
            for c in 0..steps {
                let col = if c >= t { steps + c } else { c };
                select[[c, col]] = 1.0;
            }
            let mlp = Mlp {
                weights: vec![select, Array2::eye(steps)],
                biases: vec![Array1::zeros(steps); 2],
                activation: Activation::Relu,
                activate_last: false,
            };
            Layer { agg: Aggregation::Mean, concat: true, mlp }
        })
        .collect();
    MpnnModel::new(layers, None, false)
}

/// Shape of a randomly initialized GIN model.
#[derive(Clone, Debug)]
pub struct RandomGin {
    pub input_width: usize,
    pub hidden: usize,
    pub depth: usize,
    pub activation: Activation,
    pub concat: bool,
    pub residual: bool,
    /// Readout output width, if any.
    pub readout: Option<usize>,
    pub bound: f64,
}

fn scale_by_fan_in(mut mlp: Mlp) -> Mlp {
    for w in &mut mlp.weights {
        let scale = 1.0 / (w.ncols().max(1) as f64).sqrt();
        w.mapv_inplace(|x| x * scale);
    }
    mlp
}

impl RandomGin {
    /// Weights are uniform in `±bound / sqrt(fan_in)`; biases and GIN
    /// epsilons in `±bound`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> MpnnModel {
        let mut layers = Vec::with_capacity(self.depth);
        let mut width = self.input_width;
        for _ in 0..self.depth {
            let input = if self.concat { 2 * width } else { width };
            let mlp = scale_by_fan_in(Mlp::random(&[input, self.hidden, self.hidden], self.activation, true, self.bound, rng));
            let eps = rng.gen_range(-self.bound..=self.bound);
            layers.push(Layer { agg: Aggregation::Gin { eps }, concat: self.concat, mlp });
            width = self.hidden;
        }
        let node_width = if self.residual { self.hidden * self.depth } else { self.hidden };
        let readout =
            self.readout.map(|out| scale_by_fan_in(Mlp::random(&[node_width, self.hidden, out], self.activation, false, self.bound, rng)));
        MpnnModel { layers, readout, residual: self.residual }
    }
}

// ---- JSON layout ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpFile {
    widths: Vec<usize>,
    activation: Activation,
    #[serde(default = "yes")]
    activate_last: bool,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
}

fn yes() -> bool {
    true
}

impl Serialize for Mlp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MlpFile {
            widths: self.widths(),
            activation: self.activation,
            activate_last: self.activate_last,
            weights: self.weights.iter().map(crate::json::to_rows).collect(),
            biases: self.biases.iter().map(|b| b.to_vec()).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mlp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let file = MlpFile::deserialize(d)?;
        if file.widths.len() != file.weights.len() + 1 {
            return Err(D::Error::custom("MLP widths must have one more entry than weights"));
        }
        let mut weights = Vec::new();
        for (l, rows) in file.weights.into_iter().enumerate() {
            let (out, inp) = (file.widths[l + 1], file.widths[l]);
            if rows.len() != out || rows.iter().any(|r| r.len() != inp) {
                return Err(D::Error::custom(format!("MLP weight {l} is not {out}x{inp}")));
            }
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            weights.push(Array2::from_shape_vec((out, inp), flat).map_err(D::Error::custom)?);
        }
        let biases = file.biases.into_iter().map(Array1::from).collect();
        Mlp::new(weights, biases, file.activation, file.activate_last).map_err(D::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    agg: Aggregation,
    #[serde(default)]
    concat: bool,
    mlp: Mlp,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    layers: Vec<LayerFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    readout: Option<Mlp>,
    #[serde(default)]
    residual: bool,
}

impl Serialize for MpnnModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ModelFile {
            layers: self.layers.iter().map(|l| LayerFile { agg: l.agg, concat: l.concat, mlp: l.mlp.clone() }).collect(),
            readout: self.readout.clone(),
            residual: self.residual,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MpnnModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let file = ModelFile::deserialize(d)?;
        let layers = file.layers.into_iter().map(|l| Layer { agg: l.agg, concat: l.concat, mlp: l.mlp }).collect();
        MpnnModel::new(layers, file.readout, file.residual).map_err(D::Error::custom)
    }
}

pub fn load_model_json(path: impl AsRef<std::path::Path>) -> Result<MpnnModel> {
    let path = path.as_ref();
    crate::graph::parse_json_file(path)
}
