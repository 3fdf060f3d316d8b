//! User-conditioned multi-head relation attention over the knowledge graph.
//!
//! Each layer projects entity states into `k` heads, scores every incoming
//! edge `(e ← e', r)` with a relation-specific bilinear form that is scaled
//! by the user's affinity for that relation, normalizes the scores per head
//! over the neighbors of `e`, and aggregates relation-transformed messages
//! followed by a GELU and a residual connection.
//!
//! Two routes are provided: [`RelationAttentionLayer`] evaluates one entity
//! at a time on plain matrices, and [`encode_on_tape`] evaluates all
//! entities at once on the autograd tape. The former is the readable
//! reference; the latter is what training uses.

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;

use crate::autograd::Var;
use crate::config::RecConfig;
use crate::corpus::EdgeList;
use crate::error::{CcrsError, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{gelu, glorot, glorot_blocks, softmax, Matrix};

pub const EMB_ENTITY: &str = "rec.emb_e";
pub const EMB_USER: &str = "rec.emb_u";

pub fn layer_param(layer: usize, name: &str) -> String {
    format!("rec.l{layer}.{name}")
}

/// Names of every encoder parameter group for `cfg`.
pub fn encoder_param_names(cfg: &RecConfig) -> Vec<String> {
    let mut names = vec![EMB_ENTITY.to_string(), EMB_USER.to_string()];
    for l in 0..cfg.layers {
        for n in ["w_t", "w_s", "att_rel", "msg_rel", "w_m", "w_u", "w_a"] {
            names.push(layer_param(l, n));
        }
    }
    names
}

/// Glorot-initialized encoder groups.
pub fn init_encoder<R: Rng + ?Sized>(
    cfg: &RecConfig,
    n_entities: usize,
    n_users: usize,
    n_relation_slots: usize,
    rng: &mut R,
) -> ParamStore {
    let (d, k, dk) = (cfg.dim, cfg.heads, cfg.head_dim());
    let mut p = ParamStore::new();
    p.insert(EMB_ENTITY, glorot(n_entities, d, rng));
    p.insert(EMB_USER, glorot(n_users.max(1), cfg.user_dim(), rng));
    for l in 0..cfg.layers {
        p.insert(layer_param(l, "w_t"), glorot(d, d, rng));
        p.insert(layer_param(l, "w_s"), glorot(d, d, rng));
        let mut att = Array2::zeros((n_relation_slots * d, dk));
        let mut msg = Array2::zeros((n_relation_slots * d, dk));
        for r in 0..n_relation_slots {
            att.slice_mut(s![r * d..(r + 1) * d, ..]).assign(&glorot_blocks(k, dk, rng));
            msg.slice_mut(s![r * d..(r + 1) * d, ..]).assign(&glorot_blocks(k, dk, rng));
        }
        p.insert(layer_param(l, "att_rel"), att);
        p.insert(layer_param(l, "msg_rel"), msg);
        p.insert(layer_param(l, "w_m"), glorot(d, d, rng));
        p.insert(layer_param(l, "w_u"), glorot(dk * dk, cfg.user_dim(), rng));
        p.insert(layer_param(l, "w_a"), glorot(d, d, rng));
    }
    p
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadRole {
    Target,
    Source,
}

/// One encoder layer on plain matrices.
///
/// Projections `w_t`, `w_s`, `w_m` are `d × d` with head `i` occupying rows
/// `i·d/k .. (i+1)·d/k`. Relation matrices are stored per relation slot as
/// `k` stacked `d/k × d/k` blocks.
#[derive(Clone, Debug)]
pub struct RelationAttentionLayer {
    pub heads: usize,
    pub w_t: Matrix,
    pub w_s: Matrix,
    pub att_rel: Vec<Matrix>,
    pub msg_rel: Vec<Matrix>,
    pub w_m: Matrix,
    pub w_u: Matrix,
    pub w_a: Matrix,
    /// Divisor applied to attention logits.
    pub scale: f64,
}

impl RelationAttentionLayer {
    pub fn from_params(p: &ParamStore, layer: usize, cfg: &RecConfig, n_slots: usize) -> Result<Self> {
        let d = cfg.dim;
        let split = |m: &Matrix| -> Vec<Matrix> {
            (0..n_slots).map(|r| m.slice(s![r * d..(r + 1) * d, ..]).to_owned()).collect()
        };
        Ok(Self {
            heads: cfg.heads,
            w_t: p.get(&layer_param(layer, "w_t"))?.clone(),
            w_s: p.get(&layer_param(layer, "w_s"))?.clone(),
            att_rel: split(p.get(&layer_param(layer, "att_rel"))?),
            msg_rel: split(p.get(&layer_param(layer, "msg_rel"))?),
            w_m: p.get(&layer_param(layer, "w_m"))?.clone(),
            w_u: p.get(&layer_param(layer, "w_u"))?.clone(),
            w_a: p.get(&layer_param(layer, "w_a"))?.clone(),
            scale: attention_scale(cfg),
        })
    }

    pub fn dim(&self) -> usize {
        self.w_t.ncols()
    }

    fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    fn block<'a>(&self, stacked: &'a Matrix, head: usize) -> ndarray::ArrayView2<'a, f64> {
        let b = self.head_dim();
        stacked.slice(s![head * b..(head + 1) * b, ..])
    }

    /// Per-head projections of an entity state.
    pub fn project_heads(&self, h: ArrayView1<f64>, role: HeadRole) -> Result<Vec<Array1<f64>>> {
        if h.len() != self.dim() {
            return Err(CcrsError::Dimension(format!("state has {} entries, layer expects {}", h.len(), self.dim())));
        }
        let w = match role {
            HeadRole::Target => &self.w_t,
            HeadRole::Source => &self.w_s,
        };
        let b = self.head_dim();
        Ok((0..self.heads).map(|i| w.slice(s![i * b..(i + 1) * b, ..]).dot(&h)).collect())
    }

    /// `γ = Vec(A_r^i) · (W_u u)` with row-major flattening.
    pub fn relation_user_affinity(&self, relation: usize, user: ArrayView1<f64>, head: usize) -> Result<f64> {
        let a = self
            .att_rel
            .get(relation)
            .ok_or_else(|| CcrsError::UnknownRelation(format!("slot {relation}")))?;
        if user.len() != self.w_u.ncols() {
            return Err(CcrsError::Dimension(format!("user vector has {} entries", user.len())));
        }
        let wu = self.w_u.dot(&user);
        let flat: Vec<f64> = self.block(a, head).iter().copied().collect();
        Ok(flat.iter().zip(wu.iter()).map(|(x, y)| x * y).sum())
    }

    /// Head-`i` logit `S_i(e')ᵀ A_r^i T_i(e) · γ / scale`.
    pub fn attention_logit(
        &self,
        target: ArrayView1<f64>,
        source: ArrayView1<f64>,
        relation: usize,
        user: ArrayView1<f64>,
        head: usize,
    ) -> Result<f64> {
        let t = &self.project_heads(target, HeadRole::Target)?[head];
        let sv = &self.project_heads(source, HeadRole::Source)?[head];
        let gamma = self.relation_user_affinity(relation, user, head)?;
        let a = self.block(&self.att_rel[relation], head);
        Ok(bilinear(sv.view(), a, t.view()) * gamma / self.scale)
    }

    /// Per-head softmax over the neighbors of `target`; returns one row of
    /// `k` weights per `(source, relation)` neighbor, in input order.
    pub fn neighbor_attention(
        &self,
        states: &Matrix,
        target: usize,
        neighbors: &[(usize, usize)],
        user: ArrayView1<f64>,
    ) -> Result<Matrix> {
        let mut logits = Array2::zeros((neighbors.len(), self.heads));
        for (j, &(src, rel)) in neighbors.iter().enumerate() {
            for i in 0..self.heads {
                logits[[j, i]] = self.attention_logit(states.row(target), states.row(src), rel, user, i)?;
            }
        }
        let mut weights = Array2::zeros(logits.dim());
        for i in 0..self.heads {
            let col: Vec<f64> = logits.column(i).to_vec();
            for (j, w) in softmax(&col).into_iter().enumerate() {
                weights[[j, i]] = w;
            }
        }
        Ok(weights)
    }

    /// `F(e') = concat_i M_r^i W_i^M h(e')`.
    pub fn message(&self, source: ArrayView1<f64>, relation: usize) -> Result<Array1<f64>> {
        let m = self
            .msg_rel
            .get(relation)
            .ok_or_else(|| CcrsError::UnknownRelation(format!("slot {relation}")))?;
        if source.len() != self.dim() {
            return Err(CcrsError::Dimension(format!("state has {} entries", source.len())));
        }
        let b = self.head_dim();
        let mut out = Array1::zeros(self.dim());
        for i in 0..self.heads {
            let proj = self.w_m.slice(s![i * b..(i + 1) * b, ..]).dot(&source);
            out.slice_mut(s![i * b..(i + 1) * b]).assign(&self.block(m, i).dot(&proj));
        }
        Ok(out)
    }

    /// Weighted head-wise message sum followed by `GELU(W_A h*) + h_prev`.
    pub fn aggregate_and_update(
        &self,
        states: &Matrix,
        target: usize,
        neighbors: &[(usize, usize)],
        user: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        let weights = self.neighbor_attention(states, target, neighbors, user)?;
        let messages: Vec<Array1<f64>> = neighbors
            .iter()
            .map(|&(src, rel)| self.message(states.row(src), rel))
            .collect::<Result<_>>()?;
        let h_star = weighted_head_sum(&weights, &messages, self.heads);
        let z = self.w_a.dot(&h_star).mapv(gelu);
        Ok(z + states.row(target))
    }
}

/// `Σ_j` head-wise `weights[j, i] · messages[j][segment i]`.
pub fn weighted_head_sum(weights: &Matrix, messages: &[Array1<f64>], heads: usize) -> Array1<f64> {
    let d = messages.first().map_or(0, |m| m.len());
    let b = d / heads;
    let mut out = Array1::zeros(d);
    for (j, msg) in messages.iter().enumerate() {
        for i in 0..heads {
            let mut seg = out.slice_mut(s![i * b..(i + 1) * b]);
            seg.scaled_add(weights[[j, i]], &msg.slice(s![i * b..(i + 1) * b]));
        }
    }
    out
}

fn bilinear(x: ArrayView1<f64>, a: ndarray::ArrayView2<f64>, y: ArrayView1<f64>) -> f64 {
    x.dot(&a.dot(&y))
}

pub fn attention_scale(cfg: &RecConfig) -> f64 {
    if cfg.scale_full_dim {
        (cfg.dim as f64).sqrt()
    } else {
        (cfg.head_dim() as f64).sqrt()
    }
}

/// Reference encoder: applies every layer entity by entity.
pub fn encode_entities(
    params: &ParamStore,
    cfg: &RecConfig,
    edges: &EdgeList,
    user: ArrayView1<f64>,
) -> Result<Matrix> {
    let emb = params.get(EMB_ENTITY)?;
    if emb.nrows() != edges.n_entities {
        return Err(CcrsError::Dimension(format!(
            "entity table has {} rows, graph has {} entities",
            emb.nrows(),
            edges.n_entities
        )));
    }
    let mut states = emb.clone();
    let neighbors: Vec<Vec<(usize, usize)>> = (0..edges.n_entities).map(|e| edges.neighbors(e)).collect();
    for l in 0..cfg.layers {
        let layer = RelationAttentionLayer::from_params(params, l, cfg, edges.n_relation_slots)?;
        let mut next = Array2::zeros(states.dim());
        for e in 0..edges.n_entities {
            next.row_mut(e).assign(&layer.aggregate_and_update(&states, e, &neighbors[e], user)?);
        }
        states = next;
    }
    Ok(states)
}

/// Row of the user table, or the mean row for unknown users.
pub fn user_vector(params: &ParamStore, user: Option<usize>) -> Result<Array1<f64>> {
    let table = params.get(EMB_USER)?;
    Ok(match user {
        Some(u) if u < table.nrows() => table.row(u).to_owned(),
        _ => table.mean_axis(ndarray::Axis(0)).expect("user table has rows"),
    })
}

/// Tape route: all entity states after the last layer (`|E| × d`).
///
/// `user` is the `1 × d_u` user row, already on the tape.
pub fn encode_on_tape<'t>(p: &Bound<'t, '_>, cfg: &RecConfig, edges: &EdgeList, user: Var<'t>) -> Var<'t> {
    let (d, k, dk) = (cfg.dim, cfg.heads, cfg.head_dim());
    let scale = 1.0 / attention_scale(cfg);
    let groups = edges.by_relation();
    let mut h = p.get(EMB_ENTITY);
    for l in 0..cfg.layers {
        let w_t = p.get(&layer_param(l, "w_t"));
        let w_s = p.get(&layer_param(l, "w_s"));
        let w_m = p.get(&layer_param(l, "w_m"));
        let att = p.get(&layer_param(l, "att_rel"));
        let msg = p.get(&layer_param(l, "msg_rel"));
        let w_u = p.get(&layer_param(l, "w_u"));
        let w_a = p.get(&layer_param(l, "w_a"));

        let t_all = h.matmul(w_t.t());
        let s_all = h.matmul(w_s.t());
        let m_all = h.matmul(w_m.t());
        let user_proj = user.matmul(w_u.t()); // 1 × dk²

        let mut logit_parts = Vec::new();
        let mut msg_parts = Vec::new();
        let mut seg = Vec::with_capacity(edges.len());
        for (r, ids) in groups.iter().enumerate() {
            if ids.is_empty() {
                continue;
            }
            let tgt: Vec<usize> = ids.iter().map(|&e| edges.targets[e]).collect();
            let src: Vec<usize> = ids.iter().map(|&e| edges.sources[e]).collect();
            let a_r = att.slice_rows(r * d, d);
            let gamma = a_r.reshape(k, dk * dk).matmul(user_proj.t()).t(); // 1 × k
            let at = t_all.gather_rows(&tgt).matmul(a_r.block_diag(k).t());
            let logits = s_all.gather_rows(&src).segment_dot(at, k).mul_row(gamma).scale(scale);
            let m_r = msg.slice_rows(r * d, d).block_diag(k);
            let f = m_all.gather_rows(&src).matmul(m_r.t());
            logit_parts.push(logits);
            msg_parts.push(f);
            seg.extend(tgt);
        }
        let logits = Var::concat_rows(&logit_parts);
        let messages = Var::concat_rows(&msg_parts);
        let weights = logits.segment_softmax(&seg);
        let h_star = messages.head_scale(weights, k).scatter_add_rows(&seg, edges.n_entities);
        h = h_star.matmul(w_a.t()).gelu().add(h);
    }
    h
}
