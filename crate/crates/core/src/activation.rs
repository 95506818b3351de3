//! Pointwise activations with closed-form derivatives of every order.
//!
//! `tanh` and the logistic sigmoid have derivatives that are polynomials in the
//! function value itself; the coefficient tables are built once on first use.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest derivative order the tables cover. The gradient tape needs one
/// order beyond the largest derivative-tensor order.
pub const MAX_ACT_ORDER: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Exp,
    Sin,
    Tanh,
    Silu,
}

impl Activation {
    pub const ALL: [Activation; 6] =
        [Activation::Identity, Activation::Relu, Activation::Exp, Activation::Sin, Activation::Tanh, Activation::Silu];

    pub fn is_analytic(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Exp => x.exp(),
            Activation::Sin => x.sin(),
            Activation::Tanh => x.tanh(),
            Activation::Silu => x * sigmoid(x),
        }
    }

    /// The `order`-th derivative at `x`; order 0 is the value.
    pub fn deriv(self, order: usize, x: f64) -> Result<f64> {
        if order > MAX_ACT_ORDER {
            return Err(Error::OrderOverflow { requested: order, max: MAX_ACT_ORDER });
        }
        let mut out = [0.0; MAX_ACT_ORDER + 1];
        self.derivs(x, &mut out[..=order]);
        Ok(out[order])
    }

    /// Fills `out[j]` with the `j`-th derivative for `j < out.len()`.
    ///
    /// # Panics
    /// If `out.len() > MAX_ACT_ORDER + 1`.
    pub fn derivs(self, x: f64, out: &mut [f64]) {
        assert!(out.len() <= MAX_ACT_ORDER + 1, "activation order table exceeded");
        match self {
            Activation::Identity => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = match j {
                        0 => x,
                        1 => 1.0,
                        _ => 0.0,
                    };
                }
            }
            Activation::Relu => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = match j {
                        0 => x.max(0.0),
                        1 if x > 0.0 => 1.0,
                        _ => 0.0,
                    };
                }
            }
            Activation::Exp => out.fill(x.exp()),
            Activation::Sin => {
                let (s, c) = x.sin_cos();
                for (j, o) in out.iter_mut().enumerate() {
                    *o = [s, c, -s, -c][j % 4];
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                let table = tanh_table();
                for (j, o) in out.iter_mut().enumerate() {
                    *o = horner(&table[j], t);
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                let table = sigmoid_table();
                let mut prev = 0.0;
                for (j, o) in out.iter_mut().enumerate() {
                    let sj = horner(&table[j], s);
                    *o = x * sj + j as f64 * prev;
                    prev = sj;
                }
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "exp" => Ok(Activation::Exp),
            "sin" => Ok(Activation::Sin),
            "tanh" => Ok(Activation::Tanh),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::Validation(format!("unknown activation '{other}'"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Exp => "exp",
            Activation::Sin => "sin",
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        };
        f.write_str(name)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

type PolyTable = Vec<Vec<f64>>;

/// Polynomials `p_j` with `f^(j)(x) = p_j(f(x))`, given `f' = g(f)`.
fn derivative_polys(chain: &[f64]) -> PolyTable {
    let mut table = vec![vec![0.0, 1.0]];
    for _ in 0..MAX_ACT_ORDER {
        let p = table.last().unwrap();
        let dp: Vec<f64> = p.iter().enumerate().skip(1).map(|(i, &c)| i as f64 * c).collect();
        let mut next = vec![0.0; dp.len() + chain.len() - 1];
        for (i, &a) in dp.iter().enumerate() {
            for (k, &b) in chain.iter().enumerate() {
                next[i + k] += a * b;
            }
        }
        table.push(next);
    }
    table
}

fn tanh_table() -> &'static PolyTable {
    static TABLE: OnceLock<PolyTable> = OnceLock::new();
    TABLE.get_or_init(|| derivative_polys(&[1.0, 0.0, -1.0]))
}

fn sigmoid_table() -> &'static PolyTable {
    static TABLE: OnceLock<PolyTable> = OnceLock::new();
    TABLE.get_or_init(|| derivative_polys(&[0.0, 1.0, -1.0]))
}
