//! Residual spatial-neighbor message passing.
//!
//! Each layer gates geometric and spatial evidence into the node features,
//! adds the element-wise max over gated neighbor features (edge messages
//! only), then updates edges and nodes with residual triplet messages.

use rand_chacha::ChaCha8Rng;

use crate::nn::{glorot, Bound, Mlp, ParamId, ParamStore};
use crate::scene::Box3D;
use crate::tensor::{Result, Tape, Var};

pub const EDGE_DESCRIPTOR_DIM: usize = 11;

/// Displacement, size difference, log volume and length ratios and the
/// unit direction from `src` to `dst`.
pub fn edge_descriptor(src: &Box3D, dst: &Box3D) -> [f64; EDGE_DESCRIPTOR_DIM] {
    let mut d = [0.0; EDGE_DESCRIPTOR_DIM];
    let mut norm2 = 0.0;
    for a in 0..3 {
        d[a] = dst.centroid[a] - src.centroid[a];
        d[3 + a] = dst.dims[a] - src.dims[a];
        norm2 += d[a] * d[a];
    }
    d[6] = (dst.volume() / src.volume()).ln();
    d[7] = (dst.length() / src.length()).ln();
    let norm = norm2.sqrt();
    if norm > 0.0 {
        for a in 0..3 {
            d[8 + a] = d[a] / norm;
        }
    }
    d
}

/// Directed edges plus the undirected neighborhood they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphStructure {
    pub node_count: usize,
    pub edges: Vec<(usize, usize)>,
    /// `neighbors[i]` = `(j, edge)` for every `j` adjacent to `i`, where
    /// `edge` is `i→j` when present and `j→i` otherwise.
    pub neighbors: Vec<Vec<(usize, usize)>>,
}

impl GraphStructure {
    /// `order_key` fixes the neighbor order (node ids, so the result does
    /// not depend on node positions).
    pub fn new<K: Ord>(node_count: usize, edges: Vec<(usize, usize)>, order_key: impl Fn(usize) -> K) -> Self {
        let mut out: Vec<Vec<Option<usize>>> = vec![Vec::new(); node_count];
        let mut incoming: Vec<Vec<Option<usize>>> = vec![Vec::new(); node_count];
        for v in out.iter_mut().chain(incoming.iter_mut()) {
            v.resize(node_count, None);
        }
        for (e, &(s, d)) in edges.iter().enumerate() {
            out[s][d] = Some(e);
            incoming[d][s] = Some(e);
        }
        let neighbors = (0..node_count)
            .map(|i| {
                let mut list: Vec<(usize, usize)> = (0..node_count)
                    .filter_map(|j| out[i][j].or(incoming[i][j]).map(|e| (j, e)))
                    .collect();
                list.sort_by(|a, b| order_key(a.0).cmp(&order_key(b.0)));
                list
            })
            .collect();
        Self {
            node_count,
            edges,
            neighbors,
        }
    }

    pub fn neighbor_ids(&self, i: usize) -> Vec<usize> {
        self.neighbors[i].iter().map(|(j, _)| *j).collect()
    }
}

/// `v + σ(w·[v, evidence]) · σ(evidence)` with a scalar gate.
pub fn gate(tape: &mut Tape, v: Var, evidence: Var, w: Var) -> Result<Var> {
    let joined = tape.concat(&[v, evidence], 0)?;
    let score = tape.matmul(joined, w)?;
    let g = tape.sigmoid(score)?;
    let e = tape.sigmoid(evidence)?;
    let term = tape.mul(e, g)?;
    tape.add(v, term)
}

pub fn geometric_gate(tape: &mut Tape, v: Var, v_geo: Var, w_g: Var) -> Result<Var> {
    gate(tape, v, v_geo, w_g)
}

pub fn spatial_gate(tape: &mut Tape, v_hat: Var, v_spat: Var, w_s: Var) -> Result<Var> {
    gate(tape, v_hat, v_spat, w_s)
}

/// `v + max(neighbors)`; an empty neighborhood adds nothing.
pub fn neighbor_residual(tape: &mut Tape, v: Var, neighbors: &[Var]) -> Result<Var> {
    if neighbors.is_empty() {
        return Ok(v);
    }
    let pooled = tape.max_pool_set(neighbors)?;
    tape.add(v, pooled)
}

/// `mlp([source, edge, target])`.
pub fn triplet_message(tape: &mut Tape, params: &Bound, mlp: &Mlp, source: Var, edge: Var, target: Var) -> Result<Var> {
    let joined = tape.concat(&[source, edge, target], 0)?;
    mlp.forward(tape, params, joined)
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    /// `[2h×1]`
    pub w_geo: ParamId,
    /// `[2h×1]`
    pub w_spat: ParamId,
    pub edge_mlp: Mlp,
    pub node_mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct RsnGnn {
    pub hidden: usize,
    pub edge_embed: Mlp,
    pub layers: Vec<LayerParams>,
    pub neighbor_residual: bool,
}

/// Per-node inputs, each an `[h]` vector on the tape.
#[derive(Debug, Clone, Copy)]
pub struct NodeInputs {
    pub v: Var,
    pub v_geo: Var,
    pub v_spat: Var,
}

#[derive(Debug, Clone)]
pub struct GraphState {
    pub nodes: Vec<Var>,
    pub edges: Vec<Var>,
}

impl RsnGnn {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, hidden: usize, layers: usize, neighbor_residual: bool) -> Self {
        let h = hidden;
        let edge_embed = Mlp::new(store, rng, "gnn.edge_embed", &[EDGE_DESCRIPTOR_DIM, h, h]);
        let layers = (0..layers)
            .map(|l| LayerParams {
                w_geo: store.add(format!("gnn.{l}.w_geo"), glorot(rng, 2 * h, 1, vec![2 * h, 1])),
                w_spat: store.add(format!("gnn.{l}.w_spat"), glorot(rng, 2 * h, 1, vec![2 * h, 1])),
                edge_mlp: Mlp::new(store, rng, &format!("gnn.{l}.edge_mlp"), &[3 * h, h, h]),
                node_mlp: Mlp::new(store, rng, &format!("gnn.{l}.node_mlp"), &[3 * h, h, h]),
            })
            .collect();
        Self {
            hidden,
            edge_embed,
            layers,
            neighbor_residual,
        }
    }

    pub fn embed_edges(&self, tape: &mut Tape, params: &Bound, descriptors: &[Var]) -> Result<Vec<Var>> {
        descriptors.iter().map(|d| self.edge_embed.forward(tape, params, *d)).collect()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        inputs: &[NodeInputs],
        edges0: Vec<Var>,
        graph: &GraphStructure,
    ) -> Result<GraphState> {
        let mut nodes: Vec<Var> = inputs.iter().map(|n| n.v).collect();
        let mut edges = edges0;
        for layer in &self.layers {
            let w_geo = params.get(layer.w_geo);
            let w_spat = params.get(layer.w_spat);
            let mut gated = Vec::with_capacity(nodes.len());
            for (v, inp) in nodes.iter().zip(inputs) {
                let v_hat = geometric_gate(tape, *v, inp.v_geo, w_geo)?;
                gated.push(spatial_gate(tape, v_hat, inp.v_spat, w_spat)?);
            }

            let with_context: Vec<Var> = if self.neighbor_residual {
                (0..nodes.len())
                    .map(|i| {
                        let neigh: Vec<Var> = graph.neighbors[i].iter().map(|(j, _)| gated[*j]).collect();
                        neighbor_residual(tape, gated[i], &neigh)
                    })
                    .collect::<Result<_>>()?
            } else {
                gated.clone()
            };

            let mut next_edges = Vec::with_capacity(edges.len());
            for (e, &(s, d)) in graph.edges.iter().enumerate() {
                let m = triplet_message(tape, params, &layer.edge_mlp, with_context[s], edges[e], with_context[d])?;
                next_edges.push(tape.add(edges[e], m)?);
            }

            let mut next_nodes = Vec::with_capacity(nodes.len());
            for i in 0..nodes.len() {
                if graph.neighbors[i].is_empty() {
                    next_nodes.push(gated[i]);
                    continue;
                }
                let msgs = graph.neighbors[i]
                    .iter()
                    .map(|&(j, e)| triplet_message(tape, params, &layer.node_mlp, gated[i], edges[e], gated[j]))
                    .collect::<Result<Vec<_>>>()?;
                let agg = tape.mean_pool_set(&msgs)?;
                next_nodes.push(tape.add(gated[i], agg)?);
            }
            nodes = next_nodes;
            edges = next_edges;
        }
        Ok(GraphState { nodes, edges })
    }
}
