//! Knowledge-graph storage, relational graph convolution and attention pooling.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numcore::{gaussian, Ctx, ParamGroup, ParamId, ParamStore, SparseRows, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

/// Typed relations between entities.
///
/// `neighbors(r, e)` is the set of tails `e'` with `⟨e, r, e'⟩` in the graph;
/// messages flow from tail to head.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entity_names: Vec<String>,
    relation_names: Vec<String>,
    entity_index: HashMap<String, usize>,
    triples: Vec<Triple>,
    adjacency: Vec<Vec<Vec<usize>>>,
    normalized: Vec<Arc<SparseRows>>,
    relation_used: Vec<bool>,
}

impl KnowledgeGraph {
    /// Builds a graph from id triples. Fails on out-of-range ids and duplicates.
    pub fn new(entity_names: Vec<String>, relation_names: Vec<String>, triples: Vec<Triple>) -> Result<Self> {
        let n_e = entity_names.len();
        let n_r = relation_names.len();
        let mut seen = BTreeSet::new();
        for t in &triples {
            if t.head >= n_e || t.tail >= n_e || t.relation >= n_r {
                return Err(Error::Invalid(format!("triple {t:?} out of range ({n_e} entities, {n_r} relations)")));
            }
            if !seen.insert(*t) {
                return Err(Error::Invalid(format!("duplicate triple {t:?}")));
            }
        }
        let mut adjacency = vec![vec![Vec::new(); n_e]; n_r];
        for t in &triples {
            adjacency[t.relation][t.head].push(t.tail);
        }
        let normalized = adjacency
            .iter()
            .map(|per_entity| {
                let rows = per_entity
                    .iter()
                    .map(|nb| {
                        let z = nb.len() as f64;
                        nb.iter().map(|&j| (j, 1.0 / z)).collect()
                    })
                    .collect();
                Arc::new(SparseRows { n_cols: n_e, rows })
            })
            .collect();
        let entity_index = entity_names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let mut relation_used = vec![false; n_r];
        for t in &triples {
            relation_used[t.relation] = true;
        }
        Ok(Self { entity_names, relation_names, entity_index, triples, adjacency, normalized, relation_used })
    }

    /// Interns string triples in order of first appearance; duplicates are
    /// dropped and counted.
    pub fn from_named<'a, I>(named: I) -> Result<(Self, usize)>
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        let mut ents = Interner::default();
        let mut rels = Interner::default();
        let mut seen = BTreeSet::new();
        let mut triples = Vec::new();
        let mut dups = 0;
        for (h, r, t) in named {
            let tr = Triple { head: ents.intern(h), relation: rels.intern(r), tail: ents.intern(t) };
            if seen.insert(tr) {
                triples.push(tr);
            } else {
                dups += 1;
            }
        }
        Ok((Self::new(ents.names, rels.names, triples)?, dups))
    }

    /// Graph with no triples.
    pub fn empty() -> Self {
        Self::new(Vec::new(), Vec::new(), Vec::new()).expect("empty graph")
    }

    pub fn n_entities(&self) -> usize {
        self.entity_names.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entity_names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn entity_name(&self, id: usize) -> &str {
        &self.entity_names[id]
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_index.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_names.iter().position(|r| r == name)
    }

    pub fn neighbors(&self, relation: usize, entity: usize) -> &[usize] {
        &self.adjacency[relation][entity]
    }

    pub fn has(&self, head: usize, relation: usize, tail: usize) -> bool {
        self.adjacency[relation][head].contains(&tail)
    }

    /// Row-normalized adjacency of one relation (`1/Z_{e,r}` weights).
    pub fn normalized(&self, relation: usize) -> Arc<SparseRows> {
        Arc::clone(&self.normalized[relation])
    }

    /// Triples recovered from the adjacency lists.
    pub fn reconstruct_triples(&self) -> BTreeSet<Triple> {
        let mut out = BTreeSet::new();
        for (r, per_entity) in self.adjacency.iter().enumerate() {
            for (h, nb) in per_entity.iter().enumerate() {
                for &t in nb {
                    out.insert(Triple { head: h, relation: r, tail: t });
                }
            }
        }
        out
    }
}

#[derive(Default)]
struct Interner {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    fn intern(&mut self, s: &str) -> usize {
        if let Some(&i) = self.index.get(s) {
            return i;
        }
        self.names.push(s.to_string());
        self.index.insert(s.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }
}

/// One relational convolution layer: a matrix per relation plus a self-loop.
#[derive(Clone, Debug)]
pub struct RgcnLayer {
    pub relation_weights: Vec<ParamId>,
    pub self_weight: ParamId,
}

impl RgcnLayer {
    pub fn init(store: &mut ParamStore, prefix: &str, n_relations: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let relation_weights = (0..n_relations)
            .map(|r| store.add(&format!("{prefix}.w_rel{r}"), ParamGroup::Rec, gaussian(rng, dim, dim, std)))
            .collect();
        let self_weight = store.add(&format!("{prefix}.w_self"), ParamGroup::Rec, gaussian(rng, dim, dim, std));
        Self { relation_weights, self_weight }
    }
}

/// `h'_e = ReLU( Σ_r Σ_{e'∈N_r(e)} W_r h_{e'} / |N_r(e)| + W_self h_e )`, rows of `h` are entities.
pub fn rgcn_forward(ctx: &mut Ctx, graph: &KnowledgeGraph, h: Var, layer: &RgcnLayer) -> Result<Var> {
    let (n, d) = ctx.tape.shape(h);
    if n != graph.n_entities() {
        return Err(shape_err("rgcn_forward", format!("{n} embedding rows for {} entities", graph.n_entities())));
    }
    if layer.relation_weights.len() != graph.n_relations() {
        return Err(shape_err("rgcn_forward", "one weight matrix per relation required"));
    }
    let w_self = ctx.param(layer.self_weight);
    if ctx.tape.shape(w_self) != (d, d) {
        return Err(shape_err("rgcn_forward", format!("self weight {:?} for width {d}", ctx.tape.shape(w_self))));
    }
    let mut acc = ctx.tape.matmul_bt(h, w_self)?;
    for (r, &wid) in layer.relation_weights.iter().enumerate() {
        if !graph.relation_used[r] {
            continue;
        }
        let w = ctx.param(wid);
        let msg = ctx.tape.sparse_matmul(graph.normalized(r), h)?;
        let msg = ctx.tape.matmul_bt(msg, w)?;
        acc = ctx.tape.add(acc, msg)?;
    }
    Ok(ctx.tape.relu(acc))
}

/// Self-attention pooling `α = softmax(b₁ᵀ tanh(W_a H))`, `pooled = H α`.
#[derive(Clone, Debug)]
pub struct AttentionPooler {
    pub w_a: ParamId,
    pub b1: ParamId,
}

impl AttentionPooler {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let w_a = store.add(&format!("{prefix}.w_a"), ParamGroup::Rec, gaussian(rng, dim, dim, std));
        let b1 = store.add(&format!("{prefix}.b1"), ParamGroup::Rec, gaussian(rng, 1, dim, std));
        Self { w_a, b1 }
    }
}

pub struct Pooled {
    /// `[1, n]` attention weights.
    pub weights: Var,
    /// `[1, d]` pooled vector.
    pub pooled: Var,
}

/// Pools the rows of `h` (`[n, d]`, one row per entity).
pub fn attention_pool(ctx: &mut Ctx, pooler: &AttentionPooler, h: Var) -> Result<Pooled> {
    let w_a = ctx.param(pooler.w_a);
    let b1 = ctx.param(pooler.b1);
    let (_, d) = ctx.tape.shape(h);
    if ctx.tape.shape(w_a) != (d, d) || ctx.tape.shape(b1) != (1, d) {
        return Err(shape_err("attention_pool", format!("pooler does not match width {d}")));
    }
    let proj = ctx.tape.matmul_bt(h, w_a)?;
    let act = ctx.tape.tanh(proj);
    let scores = ctx.tape.matmul_bt(b1, act)?;
    let weights = ctx.tape.softmax_rows(scores);
    let pooled = ctx.tape.matmul(weights, h)?;
    Ok(Pooled { weights, pooled })
}

/// Pools the listed rows of `table`; errors when `rows` is empty.
pub fn pool_rows(ctx: &mut Ctx, pooler: &AttentionPooler, table: Var, rows: &[usize]) -> Result<Pooled> {
    if rows.is_empty() {
        return Err(Error::NoMentionedEntities);
    }
    let h = ctx.tape.gather_rows(table, rows)?;
    attention_pool(ctx, pooler, h)
}

/// Trainable base embeddings, a stack of relational layers and the pooler
/// producing the graph-aware conversation vector.
#[derive(Clone, Debug)]
pub struct KgEncoder {
    pub base: ParamId,
    pub layers: Vec<RgcnLayer>,
    pub pooler: AttentionPooler,
}

impl KgEncoder {
    pub fn init(store: &mut ParamStore, graph: &KnowledgeGraph, dim: usize, n_layers: usize, rng: &mut impl Rng) -> Self {
        let base = store.add("kg.base", ParamGroup::Rec, gaussian(rng, graph.n_entities().max(1), dim, 0.02));
        let layers = (0..n_layers)
            .map(|l| RgcnLayer::init(store, &format!("kg.layer{l}"), graph.n_relations(), dim, rng))
            .collect();
        let pooler = AttentionPooler::init(store, "kg.pool", dim, rng);
        Self { base, layers, pooler }
    }

    /// Final-layer embeddings of every entity, `[N, d]`.
    pub fn entity_table(&self, ctx: &mut Ctx, graph: &KnowledgeGraph) -> Result<Var> {
        let mut h = ctx.param(self.base);
        for layer in &self.layers {
            h = rgcn_forward(ctx, graph, h, layer)?;
        }
        Ok(h)
    }
}

/// Runs the layer stack and pools the mentioned entities into `h_G`.
pub fn encode_kg_conversation(ctx: &mut Ctx, graph: &KnowledgeGraph, kg: &KgEncoder, mentioned: &[usize]) -> Result<Var> {
    if mentioned.iter().any(|&e| e >= graph.n_entities()) {
        return Err(Error::Invalid("mentioned entity out of range".into()));
    }
    let table = kg.entity_table(ctx, graph)?;
    Ok(pool_rows(ctx, &kg.pooler, table, mentioned)?.pooled)
}
