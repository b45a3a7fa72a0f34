//! Small trainable encoders: a shared-weight patch perceptron for images and
//! an embedding + LSTM encoder for reports and sentences.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::layers::{init_linear, init_lstm, linear_layer, zero_state};
use crate::numerics::{lstm_cell, Graph, LstmDims, NodeId, ParameterStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageEncoderDims {
    /// Input image side, in pixels.
    pub grid: usize,
    /// Feature-map side `k`.
    pub cells: usize,
    pub hidden: usize,
    /// Channels per cell `d`.
    pub features: usize,
}

impl ImageEncoderDims {
    pub fn patch(&self) -> usize {
        self.grid / self.cells
    }

    fn check(&self) -> Result<()> {
        if self.cells == 0 || self.grid % self.cells != 0 {
            return Err(Error::Config(format!(
                "image side {} is not divisible by feature-map side {}",
                self.grid, self.cells
            )));
        }
        Ok(())
    }
}

pub fn init_image_encoder<R: Rng>(
    store: &mut ParameterStore,
    prefix: &str,
    dims: ImageEncoderDims,
    rng: &mut R,
) -> Result<()> {
    dims.check()?;
    let p = dims.patch();
    init_linear(store, &format!("{prefix}.l1"), p * p, dims.hidden, rng)?;
    init_linear(store, &format!("{prefix}.l2"), dims.hidden, dims.features, rng)
}

/// Rearranges a row-major `grid × grid` view into `[k·k, p·p]` patch rows,
/// cells in row-major order.
pub fn patchify(view: &[f64], dims: ImageEncoderDims) -> Result<Tensor> {
    dims.check()?;
    let (g, k, p) = (dims.grid, dims.cells, dims.patch());
    if view.len() != g * g {
        return Err(Error::dim("encode_image", &[view.len()], &[g * g]));
    }
    let mut out = Vec::with_capacity(g * g);
    for cy in 0..k {
        for cx in 0..k {
            for y in 0..p {
                let row = (cy * p + y) * g + cx * p;
                out.extend_from_slice(&view[row..row + p]);
            }
        }
    }
    Tensor::new(&[k * k, p * p], out)
}

/// `k × k × d` feature map: linear → tanh → linear applied to every patch.
pub fn encode_image(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    view: &[f64],
    dims: ImageEncoderDims,
) -> Result<NodeId> {
    let patches = g.constant(patchify(view, dims)?);
    let h = linear_layer(g, store, &format!("{prefix}.l1"), patches)?;
    let h = g.tanh(h)?;
    let f = linear_layer(g, store, &format!("{prefix}.l2"), h)?;
    g.reshape(f, &[dims.cells, dims.cells, dims.features])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextLevel {
    Report,
    Sentence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextEncoderDims {
    pub embed: usize,
    pub hidden: usize,
    pub output: usize,
    /// Leading tokens kept; the rest are dropped.
    pub max_tokens: usize,
}

pub fn init_embedding<R: Rng>(
    store: &mut ParameterStore,
    name: &str,
    vocab: usize,
    dim: usize,
    rng: &mut R,
) -> Result<()> {
    // Unit-scale rows so distinct tokens start well separated.
    store.add_weight(name, &[vocab, dim], 1, rng)
}

/// Registers `{prefix}.lstm` and `{prefix}.proj`; the embedding table is separate.
pub fn init_text_encoder<R: Rng>(
    store: &mut ParameterStore,
    prefix: &str,
    dims: TextEncoderDims,
    rng: &mut R,
) -> Result<()> {
    init_lstm(
        store,
        &format!("{prefix}.lstm"),
        LstmDims {
            input: dims.embed,
            hidden: dims.hidden,
        },
        rng,
    )?;
    init_linear(store, &format!("{prefix}.proj"), dims.hidden, dims.output, rng)
}

/// Embedding lookup → LSTM over the (truncated) sequence → final hidden
/// state → linear projection. `embedding` is a node holding the `[V, e]` table.
pub fn encode_text(
    g: &mut Graph,
    store: &ParameterStore,
    embedding: NodeId,
    prefix: &str,
    tokens: &[usize],
    dims: TextEncoderDims,
) -> Result<NodeId> {
    if tokens.is_empty() {
        return Err(Error::Validation("cannot encode an empty token sequence".into()));
    }
    let vocab = g.shape(embedding)[0];
    if let Some(&t) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::Validation(format!(
            "token id {t} is outside the vocabulary of {vocab}; map it to UNK first"
        )));
    }
    let tokens = &tokens[..tokens.len().min(dims.max_tokens)];
    let lstm = format!("{prefix}.lstm");
    let emb = g.gather(embedding, tokens)?;
    let mut state = zero_state(g, dims.hidden);
    for i in 0..tokens.len() {
        let x = g.row(emb, i)?;
        state = lstm_cell(g, store, &lstm, x, state)?;
    }
    linear_layer(g, store, &format!("{prefix}.proj"), state.h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DIMS: ImageEncoderDims = ImageEncoderDims {
        grid: 8,
        cells: 2,
        hidden: 5,
        features: 3,
    };

    #[test]
    fn patchify_orders_cells_row_major() {
        let view: Vec<f64> = (0..64).map(f64::from).collect();
        let p = patchify(&view, DIMS).unwrap();
        assert_eq!(p.shape(), &[4, 16]);
        assert_eq!(&p.row(0)[..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&p.row(1)[..4], &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(p.row(2)[0], 32.0);
    }

    #[test]
    fn indivisible_grid_rejected() {
        let dims = ImageEncoderDims { grid: 9, ..DIMS };
        let mut s = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            init_image_encoder(&mut s, "img", dims, &mut rng),
            Err(Error::Config(_))
        ));
    }
}
