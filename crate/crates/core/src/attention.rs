//! Spatial attention over feature-map cells and multi-query attention over
//! retrieved items.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParameterStore, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct SpatialAttention {
    /// Raw scores `a_v`, shape `[k, k]`.
    pub scores: NodeId,
    /// Softmax over all cells, shape `[k, k]`.
    pub weights: NodeId,
}

/// Registers `{prefix}.wv` `[a, d]`, `{prefix}.wc` `[a, q]` and `{prefix}.wa` `[1, a]`.
pub fn init_spatial_attention<R: Rng>(
    store: &mut ParameterStore,
    prefix: &str,
    features: usize,
    condition: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    store.add_weight(&format!("{prefix}.wv"), &[hidden, features], features, rng)?;
    store.add_weight(&format!("{prefix}.wc"), &[hidden, condition], condition, rng)?;
    store.add_weight(&format!("{prefix}.wa"), &[1, hidden], hidden, rng)
}

/// `W_v · map(x, y)` for every cell, as `[k·k, a]`. Independent of the
/// condition, so callers that score one map many times compute it once.
pub fn project_cells(g: &mut Graph, store: &ParameterStore, prefix: &str, map: NodeId) -> Result<NodeId> {
    let shape = g.shape(map).to_vec();
    if shape.len() != 3 || shape[0] != shape[1] {
        return Err(Error::dim("spatial attention map", &shape, &[0, 0, 0]));
    }
    let cells = g.reshape(map, &[shape[0] * shape[1], shape[2]])?;
    let wv = g.param(store, &format!("{prefix}.wv"))?;
    g.linear(cells, wv, None)
}

pub fn spatial_scores_projected(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    projected: NodeId,
    condition: NodeId,
) -> Result<SpatialAttention> {
    let cells = g.shape(projected)[0];
    let k = (cells as f64).sqrt().round() as usize;
    let wc = g.param(store, &format!("{prefix}.wc"))?;
    let wa = g.param(store, &format!("{prefix}.wa"))?;
    let cond = g.linear(condition, wc, None)?;
    let pre = g.add_row(projected, cond)?;
    let act = g.tanh(pre)?;
    let a = g.linear(act, wa, None)?;
    let flat = g.reshape(a, &[cells])?;
    let alpha = g.softmax(flat, 0)?;
    Ok(SpatialAttention {
        scores: g.reshape(flat, &[k, k])?,
        weights: g.reshape(alpha, &[k, k])?,
    })
}

/// `a_v(x, y) = W_a · tanh(W_v · map(x, y) + W_c · condition)`, softmaxed over cells.
pub fn spatial_scores(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    map: NodeId,
    condition: NodeId,
) -> Result<SpatialAttention> {
    let projected = project_cells(g, store, prefix, map)?;
    spatial_scores_projected(g, store, prefix, projected, condition)
}

/// `Σ_{x,y} α(x, y) · map(x, y)`.
pub fn attend_spatial(g: &mut Graph, map: NodeId, weights: NodeId) -> Result<NodeId> {
    let shape = g.shape(map).to_vec();
    if shape.len() != 3 || g.shape(weights) != [shape[0], shape[1]] {
        return Err(Error::dim("attend_spatial", &shape, g.shape(weights)));
    }
    let cells = shape[0] * shape[1];
    let m = g.reshape(map, &[cells, shape[2]])?;
    let w = g.reshape(weights, &[cells])?;
    g.matmul(w, m)
}

/// Registers the fusion matrix `W_f` of shape `[b·d, d]`.
pub fn init_fusion<R: Rng>(
    store: &mut ParameterStore,
    name: &str,
    views: usize,
    features: usize,
    rng: &mut R,
) -> Result<()> {
    store.add_weight(name, &[views * features, features], views * features, rng)
}

/// `concat(v'_1 .. v'_b) · W_f`.
pub fn fuse_views(g: &mut Graph, store: &ParameterStore, name: &str, attended: &[NodeId]) -> Result<NodeId> {
    let wf = g.param(store, name)?;
    let (rows, d) = (g.shape(wf)[0], g.shape(wf)[1]);
    if attended.len() * d != rows {
        return Err(Error::Validation(format!(
            "fusion expects {} views, got {}",
            rows / d,
            attended.len()
        )));
    }
    let joined = g.concat(attended, 0)?;
    g.matmul(joined, wf)
}

/// Builds the `[n + m, d]` query matrix: keyword embeddings (zero-padded to
/// `n` rows) stacked above the disease embeddings `[m, d]`.
pub fn query_set(g: &mut Graph, keywords: &[Vec<f64>], n: usize, diseases: NodeId) -> Result<NodeId> {
    let d = g.shape(diseases)[1];
    if keywords.len() > n {
        return Err(Error::Validation(format!(
            "{} keyword queries exceed the {n} slots",
            keywords.len()
        )));
    }
    if n == 0 {
        return Ok(diseases);
    }
    let mut rows = vec![0.0; n * d];
    for (i, k) in keywords.iter().enumerate() {
        if k.len() != d {
            return Err(Error::dim("keyword query", &[k.len()], &[d]));
        }
        rows[i * d..(i + 1) * d].copy_from_slice(k);
    }
    let kw = g.constant(Tensor::new(&[n, d], rows)?);
    g.concat(&[kw, diseases], 0)
}

/// Registers `{prefix}.wk`, `{prefix}.wv` (`[d, d]`) and `{prefix}.wo` (`[q·d, d]`).
pub fn init_multi_query<R: Rng>(
    store: &mut ParameterStore,
    prefix: &str,
    features: usize,
    queries: usize,
    rng: &mut R,
) -> Result<()> {
    store.add_weight(&format!("{prefix}.wk"), &[features, features], features, rng)?;
    store.add_weight(&format!("{prefix}.wv"), &[features, features], features, rng)?;
    store.add_weight(
        &format!("{prefix}.wo"),
        &[queries * features, features],
        queries * features,
        rng,
    )
}

/// The anchor-independent half of multi-query attention. Since
/// `(values_j + anchor)·W^K = values_j·W^K + anchor·W^K`, the first term is
/// computed once and reused for every anchor.
#[derive(Clone, Copy, Debug)]
pub struct QueryMemory {
    queries: NodeId,
    keys: NodeId,
    values: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct MultiQueryOutput {
    pub output: NodeId,
    /// Per-query attention over the values, `[n + m, L]`.
    pub weights: NodeId,
}

pub fn prepare_memory(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    queries: NodeId,
    values: NodeId,
) -> Result<QueryMemory> {
    let vs = g.shape(values).to_vec();
    if vs.len() != 2 {
        return Err(Error::dim("multi_query_attention values", &vs, &[0, 0]));
    }
    let qs = g.shape(queries).to_vec();
    if qs.len() != 2 || qs[1] != vs[1] {
        return Err(Error::dim("multi_query_attention queries", &qs, &vs));
    }
    let wk = g.param(store, &format!("{prefix}.wk"))?;
    let wv = g.param(store, &format!("{prefix}.wv"))?;
    Ok(QueryMemory {
        queries,
        keys: g.matmul(values, wk)?,
        values: g.matmul(values, wv)?,
    })
}

pub fn attend_memory(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    memory: &QueryMemory,
    anchor: NodeId,
) -> Result<MultiQueryOutput> {
    let wk = g.param(store, &format!("{prefix}.wk"))?;
    let wo = g.param(store, &format!("{prefix}.wo"))?;
    let d = g.shape(memory.values)[1];
    let q = g.shape(memory.queries)[0];
    if g.shape(wo) != [q * d, d] {
        return Err(Error::dim("multi_query_attention output", g.shape(wo), &[q * d, d]));
    }
    let shift = g.matmul(anchor, wk)?;
    let keys = g.add_row(memory.keys, shift)?;
    let raw = g.linear(memory.queries, keys, None)?;
    let scaled = g.scale(raw, 1.0 / (d as f64).sqrt())?;
    let weights = g.softmax(scaled, 1)?;
    let attn = g.matmul(weights, memory.values)?;
    let flat = g.reshape(attn, &[q * d])?;
    Ok(MultiQueryOutput {
        output: g.matmul(flat, wo)?,
        weights,
    })
}

/// Each query attends over the values with keys `(values_j + anchor)·W^K`;
/// the per-query results are concatenated and projected by `W^O`.
pub fn multi_query_attention(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    queries: NodeId,
    anchor: NodeId,
    values: NodeId,
) -> Result<MultiQueryOutput> {
    let memory = prepare_memory(g, store, prefix, queries, values)?;
    attend_memory(g, store, prefix, &memory, anchor)
}

/// Stacks value vectors into a constant `[L, d]` node.
pub fn stack_values(g: &mut Graph, values: &[Vec<f64>]) -> Result<NodeId> {
    let first = values
        .first()
        .ok_or_else(|| Error::Validation("multi-query attention needs at least one value".into()))?;
    let d = first.len();
    let mut data = Vec::with_capacity(values.len() * d);
    for v in values {
        if v.len() != d {
            return Err(Error::dim("stack_values", &[v.len()], &[d]));
        }
        data.extend_from_slice(v);
    }
    Ok(g.constant(Tensor::new(&[values.len(), d], data)?))
}

/// Attention weights captured for inspection: one `k × k` grid per view per
/// step, and per-query weights over retrieved items.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub spatial: Vec<Vec<Vec<Vec<f64>>>>,
    pub queries: Vec<Vec<Vec<f64>>>,
}

pub fn grid_of(g: &Graph, weights: NodeId) -> Vec<Vec<f64>> {
    let k = g.shape(weights)[1];
    g.data(weights).chunks(k).map(<[f64]>::to_vec).collect()
}
