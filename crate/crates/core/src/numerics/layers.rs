//! Small parameterised building blocks composed from graph ops.

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::ParameterStore;
use super::Tensor;
use crate::error::{Error, Result};

/// Registers `{prefix}.w` of shape `[out, in]` and `{prefix}.b` of shape `[out]`.
pub fn init_linear<R: Rng>(
    store: &mut ParameterStore,
    prefix: &str,
    input: usize,
    output: usize,
    rng: &mut R,
) -> Result<()> {
    store.add_weight(&format!("{prefix}.w"), &[output, input], input, rng)?;
    store.add_zeros(&format!("{prefix}.b"), &[output])
}

pub fn linear_layer(g: &mut Graph, store: &ParameterStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    g.linear(x, w, Some(b))
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmDims {
    pub input: usize,
    pub hidden: usize,
}

/// Registers one LSTM cell: `{prefix}.w` is `[4H, in + H]`, gate order
/// input, forget, candidate, output. Forget biases start at 1 so early
/// inputs survive long sequences before training has shaped the gates.
pub fn init_lstm<R: Rng>(
    store: &mut ParameterStore,
    prefix: &str,
    dims: LstmDims,
    rng: &mut R,
) -> Result<()> {
    let LstmDims { input, hidden } = dims;
    store.add_weight(
        &format!("{prefix}.w"),
        &[4 * hidden, input + hidden],
        input + hidden,
        rng,
    )?;
    let mut bias = vec![0.0; 4 * hidden];
    bias[hidden..2 * hidden].fill(1.0);
    store.insert(&format!("{prefix}.b"), Tensor::vector(bias).with_requires_grad(true))
}

pub fn lstm_dims(store: &ParameterStore, prefix: &str) -> Result<LstmDims> {
    let w = store.tensor(&format!("{prefix}.w"))?;
    let hidden = w.shape()[0] / 4;
    Ok(LstmDims {
        input: w.shape()[1] - hidden,
        hidden,
    })
}

/// One LSTM step. `h' = o ⊙ tanh(c')` with `c' = f ⊙ c + i ⊙ g`.
pub fn lstm_cell(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    x: NodeId,
    state: LstmState,
) -> Result<LstmState> {
    let dims = lstm_dims(store, prefix)?;
    let hidden = dims.hidden;
    if g.shape(x) != [dims.input] {
        return Err(Error::dim("lstm_cell input", g.shape(x), &[dims.input]));
    }
    if g.shape(state.h) != [hidden] || g.shape(state.c) != [hidden] {
        return Err(Error::dim("lstm_cell state", g.shape(state.h), &[hidden]));
    }
    let xh = g.concat(&[x, state.h], 0)?;
    let gates = linear_layer(g, store, prefix, xh)?;
    let i = g.slice(gates, 0, 0, hidden)?;
    let f = g.slice(gates, 0, hidden, hidden)?;
    let cand = g.slice(gates, 0, 2 * hidden, hidden)?;
    let o = g.slice(gates, 0, 3 * hidden, hidden)?;
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let cand = g.tanh(cand)?;
    let o = g.sigmoid(o)?;
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok(LstmState { h, c })
}

pub fn zero_state(g: &mut Graph, hidden: usize) -> LstmState {
    let h = g.constant(Tensor::zeros(&[hidden]));
    let c = g.constant(Tensor::zeros(&[hidden]));
    LstmState { h, c }
}
