//! Records a [`HodModel`] forward pass on a gradient tape. The derivative
//! streams share parameter variables with the dense pass, so gradients flow
//! through both.

use ndarray::{Array2, Axis};

use super::tape::{Tape, TapeAgg, Var};
use crate::deriv::{deriv_init, MAX_PAIR_NODES};
use crate::encoders::NodeEncoder;
use crate::error::{Error, Result};
use crate::hod::{bias_name, eps_name, layer_mlp_prefix, readout_prefix, weight_name, HodModel};
use crate::mpnn::{factorial, Aggregation, Mlp, MpnnModel};

struct MlpTrace {
    out: Var,
    weights: Vec<Var>,
    preacts: Vec<Var>,
}

fn record_mlp(tape: &mut Tape, prefix: &str, mlp: &Mlp, x: Var) -> Result<MlpTrace> {
    let mut h = x;
    let mut weights = Vec::with_capacity(mlp.depth());
    let mut preacts = Vec::with_capacity(mlp.depth());
    for (l, (w, b)) in mlp.weights.iter().zip(&mlp.biases).enumerate() {
        let wv = tape.param(&weight_name(prefix, l), w.clone());
        let bv = tape.param(&bias_name(prefix, l), b.clone().insert_axis(Axis(0)));
        let z = tape.linear(h, wv, Some(bv))?;
        weights.push(wv);
        preacts.push(z);
        h = tape.activation(z, mlp.activation_at(l));
    }
    Ok(MlpTrace { out: h, weights, preacts })
}

struct MpnnTrace {
    node_out: Var,
    output: Option<Var>,
    aggs: Vec<TapeAgg>,
    layers: Vec<MlpTrace>,
    readout: Option<MlpTrace>,
}

fn record_mpnn(tape: &mut Tape, prefix: &str, model: &MpnnModel, x: Var) -> Result<MpnnTrace> {
    let mut h = x;
    let mut hidden = Vec::with_capacity(model.depth());
    let mut aggs = Vec::with_capacity(model.depth());
    let mut layers = Vec::with_capacity(model.depth());
    for (t, layer) in model.layers.iter().enumerate() {
        let agg = match layer.agg {
            Aggregation::Gin { eps } => TapeAgg::Gin(tape.param(&eps_name(prefix, t), Array2::from_elem((1, 1), eps))),
            Aggregation::Mean => TapeAgg::Mean,
        };
        let a = tape.aggregate(h, agg, layer.concat)?;
        let trace = record_mlp(tape, &layer_mlp_prefix(prefix, t), &layer.mlp, a)?;
        h = trace.out;
        hidden.push(h);
        aggs.push(agg);
        layers.push(trace);
    }
    let node_out = if model.residual {
        let parts: Vec<Var> = hidden.iter().enumerate().map(|(t, &h)| tape.scale(h, 1.0 / factorial(t + 1))).collect();
        tape.concat_cols(&parts)
    } else {
        h
    };
    let readout = match &model.readout {
        Some(r) => {
            let pooled = tape.sum_rows(node_out);
            Some(record_mlp(tape, &readout_prefix(prefix), r, pooled)?)
        }
        None => None,
    };
    Ok(MpnnTrace { node_out, output: readout.as_ref().map(|r| r.out), aggs, layers, readout })
}

fn record_deriv_mlp(tape: &mut Tape, mlp: &Mlp, trace: &MlpTrace, mut d: Var) -> Result<Var> {
    for l in 0..mlp.depth() {
        d = tape.deriv_affine(d, trace.weights[l])?;
        d = tape.deriv_activation(d, trace.preacts[l], mlp.activation_at(l))?;
    }
    Ok(d)
}

/// Records the full pipeline and returns the prediction variable: `(n, out)`
/// for node-level models, `(1, out)` for graph-level ones.
pub fn record_hod(tape: &mut Tape, model: &HodModel) -> Result<Var> {
    let g = tape.graph();
    let cfg = &model.config;
    let x = tape.input(g.features().clone());
    let base = record_mpnn(tape, "base", &model.base, x)?;
    let mut blocks = Vec::new();
    if cfg.use_base {
        blocks.push(base.node_out);
    }
    let uses_derivs = cfg.max_order > 0 && (model.node_encoder.is_some() || model.out_encoder.is_some());
    if uses_derivs {
        if cfg.k == 2 && g.num_nodes() > MAX_PAIR_NODES {
            return Err(Error::Validation(format!("pairwise derivatives are limited to {MAX_PAIR_NODES} nodes")));
        }
        let mut d = tape.deriv_input(deriv_init(g, cfg.k, cfg.max_order, cfg.features.as_deref())?);
        let mut layers = Vec::with_capacity(model.base.depth());
        for (t, layer) in model.base.layers.iter().enumerate() {
            d = tape.deriv_aggregate(d, base.aggs[t], layer.concat)?;
            d = record_deriv_mlp(tape, &layer.mlp, &base.layers[t], d)?;
            layers.push(d);
        }
        let node = if model.base.residual {
            let parts: Vec<(Var, f64)> = layers.iter().enumerate().map(|(t, &d)| (d, 1.0 / factorial(t + 1))).collect();
            tape.deriv_concat(&parts)?
        } else {
            d
        };
        let features = model.base.input_width();
        if let Some(mlp) = &model.out_encoder {
            let (readout, trace) = match (&model.base.readout, &base.readout) {
                (Some(r), Some(t)) => (r, t),
                _ => return Err(Error::Validation("output encoder needs a base readout".into())),
            };
            let pooled = tape.deriv_pool(node);
            let out = record_deriv_mlp(tape, readout, trace, pooled)?;
            let gathered = tape.gather_out(out, features)?;
            blocks.push(record_mlp(tape, "encoders.out", mlp, gathered)?.out);
        }
        match &model.node_encoder {
            Some(NodeEncoder::Diagonal(mlp)) => {
                let gathered = tape.gather_diagonal(node, features);
                blocks.push(record_mlp(tape, "encoders.node.mlp", mlp, gathered)?.out);
            }
            Some(NodeEncoder::DeepSets(ds)) => {
                let (values, index) = tape.entry_values(node, &ds.table)?;
                let table = tape.param("encoders.node.embedding", ds.embedding.clone());
                let emb = tape.gather_rows(table, index.patterns);
                let joined = tape.concat_cols(&[values, emb]);
                let phi = record_mlp(tape, "encoders.node.phi", &ds.phi, joined)?;
                let pooled = tape.segment_sum(phi.out, index.nodes, g.num_nodes());
                blocks.push(record_mlp(tape, "encoders.node.rho", &ds.rho, pooled)?.out);
            }
            None => {}
        }
    }
    let h_der = if blocks.is_empty() { tape.input(Array2::zeros((g.num_nodes(), 0))) } else { tape.concat_cols(&blocks) };
    let down = record_mpnn(tape, "downstream", &model.downstream, h_der)?;
    Ok(down.output.unwrap_or(down.node_out))
}
