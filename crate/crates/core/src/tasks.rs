//! Model assembly, recommendation and generation heads, losses, training
//! stages and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Conversation, Dataset, Planted, CLS, EOS};
use crate::disentangle::{self, contrastive_loss, counterfactual_loss, split, Disentangler, DominanceLabel, SimilarityMode};
use crate::encode::{center_rows, encode_context, entity_semantic_table, encode_entities, fuse_prompt, truncate_left};
use crate::encode::{EncoderConfig, FrozenSequenceEncoder, Mode, Segment};
use crate::error::{Error, Result};
use crate::graph::{pool_rows, AttentionPooler, KgEncoder, KnowledgeGraph};
use crate::numcore::{gaussian, AdamW, Ctx, ParamGroup, ParamId, ParamStore, SeedStreams, Tape, Tensor, Var};
use crate::prompt::{as_sequence, build_pool, fuse_pool, pool_with_weights, select, PromptSelector, SelectMode};

/// How the prompt entry fed to the fuser is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PromptMode {
    /// η-entry pool with the learnable selector.
    Pool,
    /// A single entry with this focus weight; the selector is bypassed.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub fuser_depth: usize,
    pub rgcn_layers: usize,
    pub eta: usize,
    pub lambda: f64,
    pub margin: f64,
    pub tau: f64,
    pub n_soft: usize,
    pub selector_hidden: usize,
    /// Selection used while training; evaluation is always hard.
    pub select_mode: SelectMode,
    pub similarity: SimilarityMode,
    /// Reuse the dominance labels computed at the end of pretraining.
    pub freeze_labels: bool,
    /// Add the disentanglement terms to the rec stage as well.
    pub dis_in_rec: bool,
    pub use_cd: bool,
    pub use_ci: bool,
    /// Let the counterfactual term move the target item's embedding.
    pub ci_item_grad: bool,
    pub prompt: PromptMode,
    pub max_context: usize,
    pub max_response: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            encoder_depth: 1,
            fuser_depth: 1,
            rgcn_layers: 1,
            eta: 10,
            lambda: 1.0,
            margin: 0.2,
            tau: 1.0,
            n_soft: 10,
            selector_hidden: 32,
            select_mode: SelectMode::Train,
            similarity: SimilarityMode::Shifted,
            freeze_labels: false,
            dis_in_rec: false,
            use_cd: true,
            use_ci: true,
            ci_item_grad: false,
            prompt: PromptMode::Pool,
            max_context: 40,
            max_response: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("dim must be a positive multiple of heads");
        }
        if self.encoder_depth == 0 || self.fuser_depth == 0 {
            return bad("encoder depths must be at least 1");
        }
        if self.eta == 0 {
            return bad("eta must be at least 1");
        }
        if self.margin < 0.0 || self.lambda < 0.0 || self.tau <= 0.0 {
            return bad("margin and lambda must be >= 0, tau > 0");
        }
        if self.n_soft == 0 || self.selector_hidden == 0 || self.max_context == 0 {
            return bad("n_soft, selector_hidden and max_context must be positive");
        }
        if let PromptMode::Fixed(w) = self.prompt {
            if !(0.0..=1.0).contains(&w) {
                return bad("fixed fusion weight must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// Positions the fuser must hold: summary token, both prompts, a response and its end token.
    pub fn fuser_max_len(&self) -> usize {
        1 + 3 + 2 * (self.n_soft + self.max_context) + self.max_response + 1
    }
}

/// Conversation with its constant features precomputed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    /// Context tokens fed to the prompts (oldest tokens dropped when long).
    pub context: Vec<usize>,
    pub context_truncated: bool,
    pub h_cls: Tensor,
    pub mentions: Vec<usize>,
    pub mention_targets: Vec<usize>,
    pub target: Option<usize>,
    pub response: Vec<usize>,
    pub response_truncated: bool,
    pub planted: Option<Planted>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Rec,
    Gen,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Rec => "rec",
            Stage::Gen => "gen",
        }
    }

    pub fn group(self) -> ParamGroup {
        match self {
            Stage::Gen => ParamGroup::Gen,
            _ => ParamGroup::Rec,
        }
    }
}

/// Intermediate vectors of one conversation.
pub struct Features {
    pub h_cls: Var,
    pub h_f: Var,
    pub h_b: Var,
    pub h_p: Option<Var>,
    pub h_g: Var,
    /// `[2, d]` selected prompt entry.
    pub t_select: Var,
    pub selected: Option<usize>,
    pub selection_weights: Vec<f64>,
}

/// Per-batch tensors shared by every conversation on one tape.
#[derive(Clone, Copy)]
pub struct Shared {
    /// `[N, d]` entity scoring table (final graph-layer output).
    pub table: Var,
    /// `[M, d]` rows of the items.
    pub items: Var,
}

pub struct DisTerms {
    pub cd: Option<f64>,
    pub ci: Option<f64>,
    pub label: Option<DominanceLabel>,
}

/// Every component of the recommender and generator.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub graph: KnowledgeGraph,
    pub items: Vec<usize>,
    item_pos: HashMap<usize, usize>,
    pub vocab_size: usize,
    pub encoder: FrozenSequenceEncoder,
    pub fuser: FrozenSequenceEncoder,
    pub store: ParamStore,
    pub kg: KgEncoder,
    pub sem_pooler: AttentionPooler,
    pub dis: Disentangler,
    pub selector: PromptSelector,
    pub soft_rec: ParamId,
    pub soft_gen: ParamId,
    pub w_s: ParamId,
    pub w_kg: ParamId,
    pub out_proj: ParamId,
    entity_sem: Tensor,
    pub frozen_labels: BTreeMap<String, DominanceLabel>,
    pub completed: Option<Stage>,
}

impl Model {
    pub fn new(config: ModelConfig, data: &Dataset, seed: u64) -> Result<Self> {
        config.validate()?;
        if data.items.is_empty() {
            return Err(Error::Invalid("dataset has no items".into()));
        }
        let d = config.dim;
        let streams = SeedStreams::new(seed);
        let vocab_size = data.vocab.len();
        let enc_cfg = EncoderConfig {
            vocab_size,
            dim: d,
            heads: config.heads,
            depth: config.encoder_depth,
            max_len: config.max_context.max(8) + 1,
            summary_id: CLS,
        };
        let encoder = FrozenSequenceEncoder::new(enc_cfg, &mut streams.stream("encoder.semantic"))?;
        let fuser_cfg = EncoderConfig {
            vocab_size,
            dim: d,
            heads: config.heads,
            depth: config.fuser_depth,
            max_len: config.fuser_max_len(),
            summary_id: CLS,
        };
        let fuser = FrozenSequenceEncoder::new(fuser_cfg, &mut streams.stream("encoder.fuser"))?;
        let entity_sem = center_rows(&entity_semantic_table(&encoder, &data.entity_tokens())?);

        let mut store = ParamStore::new();
        let mut rng = streams.stream("params");
        let kg = KgEncoder::init(&mut store, &data.graph, d, config.rgcn_layers, &mut rng);
        let sem_pooler = AttentionPooler::init(&mut store, "sem.pool", d, &mut rng);
        let dis = Disentangler::init(&mut store, d, config.margin, &mut rng);
        let selector = PromptSelector::init(&mut store, d, config.selector_hidden, config.tau, &mut rng);
        let soft_rec = store.add("rec.soft", ParamGroup::Rec, gaussian(&mut rng, config.n_soft, d, 1.0));
        let std = 1.0 / (d as f64).sqrt();
        let w_s = store.add("rec.w_s", ParamGroup::Rec, gaussian(&mut rng, d, d, std));
        let w_kg = store.add("rec.w_kg", ParamGroup::Rec, gaussian(&mut rng, d, d, std));
        let soft_gen = store.add("gen.soft", ParamGroup::Gen, gaussian(&mut rng, config.n_soft, d, 1.0));
        let out_proj = store.add("gen.out_proj", ParamGroup::Gen, gaussian(&mut rng, vocab_size, d, std));

        let item_pos = data.items.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        Ok(Self {
            config,
            seed,
            graph: data.graph.clone(),
            items: data.items.clone(),
            item_pos,
            vocab_size,
            encoder,
            fuser,
            store,
            kg,
            sem_pooler,
            dis,
            selector,
            soft_rec,
            soft_gen,
            w_s,
            w_kg,
            out_proj,
            entity_sem,
            frozen_labels: BTreeMap::new(),
            completed: None,
        })
    }

    /// Hashes of both frozen encoders.
    pub fn frozen_hashes(&self) -> [String; 2] {
        [self.encoder.param_hash(), self.fuser.param_hash()]
    }

    pub fn item_index(&self, entity: usize) -> Option<usize> {
        self.item_pos.get(&entity).copied()
    }

    pub fn prepare(&self, conv: &Conversation) -> Result<Prepared> {
        let all = conv.context_tokens();
        let h_cls = encode_context(&self.encoder, &all)?.h_cls;
        let (context, context_truncated) = truncate_left(&all, self.config.max_context);
        let (response, response_truncated) = if conv.gold_response.len() > self.config.max_response {
            (conv.gold_response[..self.config.max_response].to_vec(), true)
        } else {
            (conv.gold_response.clone(), false)
        };
        Ok(Prepared {
            id: conv.id.clone(),
            context: context.to_vec(),
            context_truncated,
            h_cls,
            mentions: conv.mentioned_entities.clone(),
            mention_targets: conv.distinct_mentions(),
            target: conv.target_item,
            response,
            response_truncated,
            planted: conv.planted.clone(),
        })
    }

    pub fn prepare_all(&self, convs: &[Conversation]) -> Result<Vec<Prepared>> {
        convs.iter().map(|c| self.prepare(c)).collect()
    }

    pub fn shared(&self, ctx: &mut Ctx) -> Result<Shared> {
        let table = self.kg.entity_table(ctx, &self.graph)?;
        let items = ctx.tape.gather_rows(table, &self.items)?;
        Ok(Shared { table, items })
    }

    pub fn features(&self, ctx: &mut Ctx, shared: Shared, p: &Prepared, mode: SelectMode) -> Result<Features> {
        let d = self.config.dim;
        let h_cls = ctx.tape.constant(p.h_cls.clone());
        let (h_f, h_b) = split(ctx, &self.dis, h_cls)?;
        let (h_p, h_g) = if p.mentions.is_empty() {
            (None, ctx.tape.constant(Tensor::zeros(1, d)))
        } else {
            let h_p = encode_entities(ctx, &self.entity_sem, &self.sem_pooler, &p.mentions)?.h_p;
            (Some(h_p), pool_rows(ctx, &self.kg.pooler, shared.table, &p.mentions)?.pooled)
        };
        let (entry, selected, selection_weights) = match self.config.prompt {
            PromptMode::Pool => {
                let pool = build_pool(h_f, h_b, h_cls, self.config.eta)?;
                let t_c = fuse_pool(&mut ctx.tape, &pool)?;
                let s = select(ctx, &self.selector, t_c, mode)?;
                (s.t_select, Some(s.index), s.weights)
            }
            PromptMode::Fixed(w) => {
                let pool = pool_with_weights(h_f, h_b, h_cls, vec![w])?;
                (fuse_pool(&mut ctx.tape, &pool)?, None, vec![1.0])
            }
        };
        let t_select = as_sequence(&mut ctx.tape, entry)?;
        Ok(Features { h_cls, h_f, h_b, h_p, h_g, t_select, selected, selection_weights })
    }

    /// Both recommendation prompts as fuser segments.
    pub fn rec_prompts<'a>(&self, ctx: &mut Ctx, f: &Features, context: &'a [usize]) -> [Vec<Segment<'a>>; 2] {
        let soft = ctx.param(self.soft_rec);
        build_prompts(f.t_select, f.h_g, soft, context)
    }

    /// `h_rec`, the `[1, d]` user representation.
    pub fn user_vector(&self, ctx: &mut Ctx, f: &Features, p: &Prepared) -> Result<Var> {
        let [sel, kg] = self.rec_prompts(ctx, f, &p.context);
        let h_sel = fuse_prompt(&mut ctx.tape, &self.fuser, &sel)?;
        let h_kg = fuse_prompt(&mut ctx.tape, &self.fuser, &kg)?;
        let w_s = ctx.param(self.w_s);
        let w_kg = ctx.param(self.w_kg);
        user_repr(&mut ctx.tape, w_s, w_kg, h_sel, h_kg)
    }

    fn label_for(&self, p: &Prepared, stage: Stage) -> Option<DominanceLabel> {
        (self.config.freeze_labels && stage != Stage::Pretrain).then(|| self.frozen_labels.get(&p.id).copied()).flatten()
    }

    /// λ-weighted disentanglement terms for one conversation.
    fn dis_terms(&self, ctx: &mut Ctx, shared: Shared, f: &Features, p: &Prepared, stage: Stage) -> Result<(Option<Var>, DisTerms)> {
        let mut terms = DisTerms { cd: None, ci: None, label: None };
        let Some(h_p) = f.h_p else { return Ok((None, terms)) };
        let mut parts = Vec::new();
        if self.config.use_cd {
            let cd = contrastive_loss(&mut ctx.tape, f.h_f, f.h_b, h_p, self.dis.margin)?;
            terms.cd = Some(ctx.tape.scalar(cd));
            parts.push(cd);
        }
        if self.config.use_ci {
            if let Some(t) = p.target {
                let mut h_t = ctx.tape.gather_rows(shared.table, &[t])?;
                if !self.config.ci_item_grad {
                    h_t = ctx.tape.detach(h_t);
                }
                let (ci, label) = counterfactual_loss(&mut ctx.tape, f.h_f, f.h_b, h_t, self.label_for(p, stage), self.config.similarity)?;
                terms.ci = Some(ctx.tape.scalar(ci));
                terms.label = Some(label);
                parts.push(ci);
            }
        }
        if parts.is_empty() {
            return Ok((None, terms));
        }
        let sum = ctx.tape.add_all(&parts)?;
        Ok((Some(ctx.tape.scale(sum, self.config.lambda)), terms))
    }

    /// Entity multi-label loss plus the disentanglement terms.
    pub fn pretrain_conversation(&self, ctx: &mut Ctx, shared: Shared, p: &Prepared, mode: SelectMode) -> Result<(Var, DisTerms)> {
        let f = self.features(ctx, shared, p, mode)?;
        let h_rec = self.user_vector(ctx, &f, p)?;
        let logits = ctx.tape.matmul_bt(h_rec, shared.table)?;
        let ce = multilabel_ce(&mut ctx.tape, logits, &p.mention_targets)?;
        let (dis, terms) = self.dis_terms(ctx, shared, &f, p, Stage::Pretrain)?;
        let loss = match dis {
            Some(d) => ctx.tape.add(ce, d)?,
            None => ce,
        };
        Ok((loss, terms))
    }

    /// Item cross-entropy (plus disentanglement terms when enabled).
    pub fn rec_conversation(&self, ctx: &mut Ctx, shared: Shared, p: &Prepared, mode: SelectMode) -> Result<Var> {
        let target = p.target.ok_or_else(|| Error::Invalid(format!("conversation {} has no target item", p.id)))?;
        let pos = self.item_index(target).ok_or(Error::UnknownItem(target))?;
        let f = self.features(ctx, shared, p, mode)?;
        let h_rec = self.user_vector(ctx, &f, p)?;
        let logits = ctx.tape.matmul_bt(h_rec, shared.items)?;
        let ce = multilabel_ce(&mut ctx.tape, logits, &[pos])?;
        if !self.config.dis_in_rec {
            return Ok(ce);
        }
        match self.dis_terms(ctx, shared, &f, p, Stage::Rec)?.0 {
            Some(d) => ctx.tape.add(ce, d),
            None => Ok(ce),
        }
    }

    fn gen_input<'a>(&self, ctx: &mut Ctx, f: &Features, context: &'a [usize], prefix: &'a [usize]) -> (Vec<Segment<'a>>, usize) {
        let soft = ctx.param(self.soft_gen);
        let [mut sel, kg] = build_prompts(f.t_select, f.h_g, soft, context);
        sel.extend(kg);
        sel.push(Segment::Tokens(prefix));
        let prompt_len = 3 + 2 * (self.config.n_soft + context.len());
        (sel, 1 + prompt_len)
    }

    /// Teacher-forced negative log-likelihood of `response + <eos>`.
    pub fn gen_conversation(&self, ctx: &mut Ctx, shared: Shared, p: &Prepared) -> Result<Var> {
        let f = self.features(ctx, shared, p, SelectMode::Infer)?;
        let (segments, start) = self.gen_input(ctx, &f, &p.context, &p.response);
        let hidden = self.fuser.forward(&mut ctx.tape, &segments, Mode::Causal)?;
        let n_pred = p.response.len() + 1;
        let rows = ctx.tape.slice_rows(hidden, start - 1, n_pred)?;
        let proj = ctx.param(self.out_proj);
        let logits = ctx.tape.matmul_bt(rows, proj)?;
        let lsm = ctx.tape.log_softmax_rows(logits);
        let mut pick = Tensor::zeros(n_pred, self.vocab_size);
        for (j, &tok) in p.response.iter().chain([&EOS]).enumerate() {
            pick.set(j, tok, 1.0);
        }
        let pick = ctx.tape.constant(pick);
        let ll = ctx.tape.mul(lsm, pick)?;
        let ll = ctx.tape.sum(ll);
        Ok(ctx.tape.scale(ll, -1.0))
    }

    /// Summed pretraining loss of a batch.
    pub fn pretrain_loss(&self, ctx: &mut Ctx, batch: &[&Prepared], mode: SelectMode) -> Result<Var> {
        let shared = self.shared(ctx)?;
        let parts = batch.iter().map(|p| Ok(self.pretrain_conversation(ctx, shared, p, mode)?.0)).collect::<Result<Vec<_>>>()?;
        ctx.tape.add_all(&parts)
    }

    /// Summed item loss of a batch.
    pub fn rec_loss(&self, ctx: &mut Ctx, batch: &[&Prepared], mode: SelectMode) -> Result<Var> {
        let shared = self.shared(ctx)?;
        let parts = batch.iter().map(|p| self.rec_conversation(ctx, shared, p, mode)).collect::<Result<Vec<_>>>()?;
        ctx.tape.add_all(&parts)
    }

    /// Mean generation loss of a batch.
    pub fn gen_loss(&self, ctx: &mut Ctx, batch: &[&Prepared]) -> Result<Var> {
        let shared = self.shared(ctx)?;
        let parts = batch.iter().map(|p| self.gen_conversation(ctx, shared, p)).collect::<Result<Vec<_>>>()?;
        let sum = ctx.tape.add_all(&parts)?;
        Ok(ctx.tape.scale(sum, 1.0 / batch.len() as f64))
    }

    /// Greedy decoding; stops at `<eos>` (not returned) or `max_len` tokens.
    pub fn generate(&self, p: &Prepared, max_len: usize) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        if max_len == 0 {
            return Ok(out);
        }
        let mut ctx = Ctx::new(&self.store, false);
        let shared = self.shared(&mut ctx)?;
        let f = self.features(&mut ctx, shared, p, SelectMode::Infer)?;
        let proj = self.store.value(self.out_proj).clone();
        let limit = max_len.min(self.config.max_response);
        while out.len() < limit {
            let (segments, _) = self.gen_input(&mut ctx, &f, &p.context, &out);
            let hidden = self.fuser.forward(&mut ctx.tape, &segments, Mode::Causal)?;
            let h = ctx.tape.value(hidden);
            let last = h.row_slice(h.rows() - 1);
            let mut best = (f64::NEG_INFINITY, 0);
            for t in 0..self.vocab_size {
                let s: f64 = proj.row_slice(t).iter().zip(last).map(|(a, b)| a * b).sum();
                if s > best.0 {
                    best = (s, t);
                }
            }
            if best.1 == EOS {
                break;
            }
            out.push(best.1);
        }
        Ok(out)
    }

    /// Items ranked by descending score for each conversation.
    pub fn rank_items(&self, preps: &[Prepared]) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(preps.len());
        let table = {
            let mut ctx = Ctx::new(&self.store, false);
            let s = self.shared(&mut ctx)?;
            (ctx.tape.value(s.table).clone(), ctx.tape.value(s.items).clone())
        };
        for p in preps {
            let mut ctx = Ctx::new(&self.store, false);
            let shared = Shared { table: ctx.tape.constant(table.0.clone()), items: ctx.tape.constant(table.1.clone()) };
            let f = self.features(&mut ctx, shared, p, SelectMode::Infer)?;
            let h = self.user_vector(&mut ctx, &f, p)?;
            let scores = ctx.tape.matmul_bt(h, shared.items)?;
            let s = ctx.tape.value(scores).data().to_vec();
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
            out.push(idx.into_iter().map(|i| self.items[i]).collect());
        }
        Ok(out)
    }

    /// `(h_f, h_b)` values for each conversation.
    pub fn representations(&self, preps: &[Prepared]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        preps
            .iter()
            .map(|p| {
                let mut ctx = Ctx::new(&self.store, false);
                let h = ctx.tape.constant(p.h_cls.clone());
                let (f, b) = split(&mut ctx, &self.dis, h)?;
                Ok((ctx.tape.value(f).data().to_vec(), ctx.tape.value(b).data().to_vec()))
            })
            .collect()
    }

    /// Records current dominance labels for later stages.
    pub fn freeze_labels_now(&mut self, preps: &[Prepared]) -> Result<()> {
        let mut labels = BTreeMap::new();
        let mut ctx = Ctx::new(&self.store, false);
        let shared = self.shared(&mut ctx)?;
        for p in preps {
            if let Some(t) = p.target {
                let h = ctx.tape.constant(p.h_cls.clone());
                let (f, b) = split(&mut ctx, &self.dis, h)?;
                let tv = ctx.tape.value(shared.table).row_slice(t).to_vec();
                let label = disentangle::dominance(ctx.tape.value(f).data(), ctx.tape.value(b).data(), &tv, self.config.similarity)?;
                labels.insert(p.id.clone(), label);
            }
        }
        self.frozen_labels = labels;
        Ok(())
    }

    pub fn checkpoint(&self, stage: Option<Stage>, config_echo: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            stage,
            seed: self.seed,
            model: self.config.clone(),
            config: config_echo,
            frozen_hashes: self.frozen_hashes(),
            frozen_labels: self.frozen_labels.clone(),
            tensors: self.store.snapshot(),
        }
    }

    /// Loads trainable tensors and labels; the frozen encoders must match.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format {} v{}", ck.format, ck.version)));
        }
        if ck.frozen_hashes != self.frozen_hashes() {
            return Err(Error::Checkpoint("frozen encoder hashes differ from this model".into()));
        }
        self.store.restore(&ck.tensors)?;
        self.frozen_labels = ck.frozen_labels.clone();
        self.completed = ck.stage;
        Ok(())
    }
}

/// `prompt_select = [T_select; soft; C]`, `prompt_kg = [h_G; soft; C]`.
pub fn build_prompts<'a>(t_select: Var, h_g: Var, soft: Var, context: &'a [usize]) -> [Vec<Segment<'a>>; 2] {
    [
        vec![Segment::Vectors(t_select), Segment::Vectors(soft), Segment::Tokens(context)],
        vec![Segment::Vectors(h_g), Segment::Vectors(soft), Segment::Tokens(context)],
    ]
}

/// `h_rec = W_s h_sel + W_kg h_kg` on `[1, d]` rows.
pub fn user_repr(tape: &mut Tape, w_s: Var, w_kg: Var, h_sel: Var, h_kg: Var) -> Result<Var> {
    let a = tape.matmul_bt(h_sel, w_s)?;
    let b = tape.matmul_bt(h_kg, w_kg)?;
    tape.add(a, b)
}

/// `softmax(h_rec · tableᵀ)` over the `K` rows of `table`.
pub fn score_candidates(tape: &mut Tape, h_rec: Var, table: Var) -> Result<Var> {
    let logits = tape.matmul_bt(h_rec, table)?;
    Ok(tape.softmax_rows(logits))
}

/// `-Σ_k [y_k log p_k + (1 - y_k) log(1 - p_k)]` with `p = softmax(logits)`.
pub fn multilabel_ce(tape: &mut Tape, logits: Var, positives: &[usize]) -> Result<Var> {
    let (_, k) = tape.shape(logits);
    let mut y = vec![0.0; k];
    for &i in positives {
        if i >= k {
            return Err(Error::Invalid(format!("label {i} outside {k} candidates")));
        }
        y[i] = 1.0;
    }
    let pos: Vec<usize> = (0..k).filter(|&i| y[i] == 1.0).collect();
    let neg: Vec<usize> = (0..k).filter(|&i| y[i] == 0.0).collect();
    let lp = tape.log_softmax_rows(logits);
    let col = tape.transpose(lp);
    let mut parts = Vec::new();
    if !pos.is_empty() {
        let p = tape.gather_rows(col, &pos)?;
        parts.push(tape.sum(p));
    }
    // gather first so an entry with p = 1 never reaches log(1 - p)
    if !neg.is_empty() {
        let n = tape.gather_rows(col, &neg)?;
        let n = tape.log1m_exp(n);
        parts.push(tape.sum(n));
    }
    let s = tape.add_all(&parts)?;
    Ok(tape.scale(s, -1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let lr = if stage == Stage::Gen { 0.0001 } else { 0.0005 };
        Self { epochs: 1, lr, batch_size: 24, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: usize,
    /// Loss of every optimizer step.
    pub losses: Vec<f64>,
    pub frozen_before: [String; 2],
    pub frozen_after: [String; 2],
}

fn usable(p: &Prepared, stage: Stage) -> bool {
    match stage {
        Stage::Pretrain => true,
        Stage::Rec => p.target.is_some(),
        Stage::Gen => !p.response.is_empty(),
    }
}

/// Mini-batch training of one stage with a fresh optimizer.
///
/// Batches are drawn from a stream seeded by the model seed and the stage
/// name, so a stage run from a checkpoint repeats the uninterrupted run.
pub fn run_stage(model: &mut Model, stage: Stage, data: &[Prepared], cfg: &TrainConfig) -> Result<StageReport> {
    if let Some(done) = model.completed {
        if stage < done {
            return Err(Error::Stage(format!("cannot run {} after {}", stage.name(), done.name())));
        }
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let frozen_before = model.frozen_hashes();
    let usable: Vec<&Prepared> = data.iter().filter(|p| usable(p, stage)).collect();
    let ids = model.store.group_ids(stage.group());
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut rng = SeedStreams::new(model.seed).stream(&format!("train.{}", stage.name()));
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..usable.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| usable[i]).collect();
            let bp = {
                let mut ctx = Ctx::for_group(&model.store, stage.group());
                let loss = match stage {
                    Stage::Pretrain => model.pretrain_loss(&mut ctx, &batch, model.config.select_mode)?,
                    Stage::Rec => model.rec_loss(&mut ctx, &batch, model.config.select_mode)?,
                    Stage::Gen => model.gen_loss(&mut ctx, &batch)?,
                };
                ctx.finish(loss)?
            };
            if !bp.loss.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|p| p.id.as_str()).collect();
                eprintln!("non-finite loss {} in {} batch {}: conversations {ids:?}", bp.loss, stage.name(), losses.len());
                return Err(Error::NonFinite { stage: stage.name().into(), batch: losses.len() });
            }
            model.store.zero_grad();
            model.store.accumulate(&bp.binding, &bp.grads);
            opt.step(&mut model.store, &ids);
            losses.push(bp.loss);
        }
    }
    if stage == Stage::Pretrain && model.config.freeze_labels {
        model.freeze_labels_now(data)?;
    }
    model.completed = Some(stage);
    let frozen_after = model.frozen_hashes();
    if frozen_after != frozen_before {
        return Err(Error::Invalid("frozen encoder parameters changed during training".into()));
    }
    Ok(StageReport { stage, steps: losses.len(), losses, frozen_before, frozen_after })
}

pub const CHECKPOINT_FORMAT: &str = "disencrs-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON container of the trainable tensors.
///
/// Fields: `format` and `version` identify the layout, `stage` is the last
/// completed stage, `seed` and `model` rebuild the frozen parts, `config`
/// echoes the experiment configuration, `frozen_hashes` guard against a
/// mismatched rebuild, and `tensors` maps parameter names to values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub stage: Option<Stage>,
    pub seed: u64,
    pub model: ModelConfig,
    pub config: serde_json::Value,
    pub frozen_hashes: [String; 2],
    pub frozen_labels: BTreeMap<String, DominanceLabel>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_slice(&fs::read(path)?)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, CorpusSpec};

    pub(crate) fn tiny() -> (Dataset, ModelConfig) {
        let spec = CorpusSpec { n_items: 20, n_attributes: 4, n_background_tags: 3, vocab_size: 120, n_conversations: 12, ..CorpusSpec::default() };
        let (ds, _) = generate_corpus(&spec).unwrap();
        let cfg = ModelConfig { dim: 8, heads: 2, n_soft: 2, eta: 3, selector_hidden: 4, max_context: 24, max_response: 8, ..ModelConfig::default() };
        (ds, cfg)
    }

    #[test]
    fn uniform_multilabel_ce() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(1, 4));
        let l = multilabel_ce(&mut t, z, &[2]).unwrap();
        let want = -(0.25f64).ln() - 3.0 * (0.75f64).ln();
        assert!((t.scalar(l) - want).abs() < 1e-12);
        assert!((want - 2.2493).abs() < 1e-4);
        let k = 7.0f64;
        let z = t.constant(Tensor::zeros(1, 7));
        let l = multilabel_ce(&mut t, z, &[0]).unwrap();
        assert!((t.scalar(l) - (-(1.0 / k).ln() - (k - 1.0) * (1.0 - 1.0 / k).ln())).abs() < 1e-12);
        let sharp = t.constant(Tensor::row(vec![60.0, 0.0, 0.0]));
        let l = multilabel_ce(&mut t, sharp, &[0]).unwrap();
        assert!(t.scalar(l) >= 0.0 && t.scalar(l) < 1e-20);
    }

    #[test]
    fn candidate_scores_are_distributions() {
        let mut t = Tape::new();
        let h = t.constant(Tensor::row(vec![0.0, 0.0]));
        let table = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.1, 0.1]]).unwrap());
        let p = score_candidates(&mut t, h, table).unwrap();
        assert!(t.value(p).data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let one = t.constant(Tensor::row(vec![1.0, 2.0]));
        let h = t.constant(Tensor::row(vec![0.3, -0.7]));
        let p = score_candidates(&mut t, h, one).unwrap();
        assert_eq!(t.value(p).data(), &[1.0]);
        let p = score_candidates(&mut t, h, table).unwrap();
        let dots = [0.3 - 1.4, -0.9 - 0.35, 0.03 - 0.07];
        let z: f64 = dots.iter().map(|d: &f64| d.exp()).sum();
        for (got, d) in t.value(p).data().iter().zip(dots) {
            assert!((got - d.exp() / z).abs() < 1e-12);
        }
        assert!((t.value(p).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn user_repr_examples() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(2));
        let z = t.constant(Tensor::zeros(2, 2));
        let a = t.constant(Tensor::row(vec![0.5, -1.5]));
        let b = t.constant(Tensor::row(vec![9.0, 9.0]));
        let h = user_repr(&mut t, i, z, a, b).unwrap();
        assert_eq!(t.value(h).data(), &[0.5, -1.5]);
        let zr = t.constant(Tensor::row(vec![0.0, 0.0]));
        let h = user_repr(&mut t, i, i, zr, zr).unwrap();
        assert_eq!(t.value(h).data(), &[0.0, 0.0]);
        let ws = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let wk = t.constant(Tensor::from_rows(&[vec![0.5, 0.0], vec![-1.0, 1.0]]).unwrap());
        let h = user_repr(&mut t, ws, wk, a, b).unwrap();
        let want = [1.0 * 0.5 + 2.0 * -1.5 + 0.5 * 9.0, 3.0 * 0.5 + 4.0 * -1.5 + (-1.0 + 1.0) * 9.0];
        assert_eq!(t.value(h).data(), &want);
    }

    #[test]
    fn prompt_lengths() {
        let (ds, cfg) = tiny();
        let model = Model::new(cfg, &ds, 1).unwrap();
        let p = model.prepare(&ds.conversations[0]).unwrap();
        let mut ctx = Ctx::new(&model.store, false);
        let shared = model.shared(&mut ctx).unwrap();
        let f = model.features(&mut ctx, shared, &p, SelectMode::Infer).unwrap();
        let [sel, kg] = model.rec_prompts(&mut ctx, &f, &p.context);
        let len = |segs: &[Segment], t: &Tape| -> usize {
            segs.iter().map(|s| match s {
                Segment::Vectors(v) => t.shape(*v).0,
                Segment::Tokens(x) => x.len(),
            }).sum()
        };
        assert_eq!(len(&sel, &ctx.tape), 2 + 2 + p.context.len());
        assert_eq!(len(&kg, &ctx.tape), 1 + 2 + p.context.len());
        let [e1, e2] = model.rec_prompts(&mut ctx, &f, &[]);
        assert!(e1.iter().chain(&e2).all(|s| matches!(s, Segment::Vectors(_) | Segment::Tokens(&[]))));
    }

    #[test]
    fn unknown_item_is_rejected() {
        let (ds, cfg) = tiny();
        let model = Model::new(cfg, &ds, 1).unwrap();
        let mut p = model.prepare(&ds.conversations[0]).unwrap();
        p.target = Some(ds.graph.entity_id("attr_00").unwrap());
        let mut ctx = Ctx::new(&model.store, false);
        assert!(matches!(model.rec_loss(&mut ctx, &[&p], SelectMode::Train), Err(Error::UnknownItem(_))));
    }

    #[test]
    fn rec_loss_is_additive() {
        let (ds, cfg) = tiny();
        let model = Model::new(cfg, &ds, 2).unwrap();
        let preps = model.prepare_all(&ds.conversations).unwrap();
        let mut ctx = Ctx::new(&model.store, false);
        let both = model.rec_loss(&mut ctx, &[&preps[0], &preps[1]], SelectMode::Train).unwrap();
        let a = model.rec_loss(&mut ctx, &[&preps[0]], SelectMode::Train).unwrap();
        let b = model.rec_loss(&mut ctx, &[&preps[1]], SelectMode::Train).unwrap();
        let twice = model.rec_loss(&mut ctx, &[&preps[0], &preps[0]], SelectMode::Train).unwrap();
        assert!((ctx.tape.scalar(both) - ctx.tape.scalar(a) - ctx.tape.scalar(b)).abs() < 1e-9);
        assert_eq!(ctx.tape.scalar(twice), 2.0 * ctx.tape.scalar(a));
        assert!(ctx.tape.scalar(a) >= 0.0);
    }

    #[test]
    fn lambda_enters_linearly() {
        let (ds, cfg) = tiny();
        let m0 = Model::new(ModelConfig { lambda: 0.0, ..cfg.clone() }, &ds, 3).unwrap();
        let m3 = Model::new(ModelConfig { lambda: 3.0, ..cfg }, &ds, 3).unwrap();
        let preps = m0.prepare_all(&ds.conversations[..3]).unwrap();
        let mut c0 = Ctx::new(&m0.store, false);
        let mut c3 = Ctx::new(&m3.store, false);
        let s0 = m0.shared(&mut c0).unwrap();
        let s3 = m3.shared(&mut c3).unwrap();
        let mut diff = 0.0;
        let mut dis = 0.0;
        for p in &preps {
            let (l0, t) = m0.pretrain_conversation(&mut c0, s0, p, SelectMode::Train).unwrap();
            let (l3, _) = m3.pretrain_conversation(&mut c3, s3, p, SelectMode::Train).unwrap();
            diff += c3.tape.scalar(l3) - c0.tape.scalar(l0);
            dis += t.cd.unwrap() + t.ci.unwrap();
        }
        assert!((diff - 3.0 * dis).abs() < 1e-9);
    }

    #[test]
    fn single_token_vocabulary_has_zero_gen_loss() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(5, 1));
        let lsm = t.log_softmax_rows(logits);
        let s = t.sum(lsm);
        assert_eq!(t.scalar(s), 0.0);
    }

    #[test]
    fn uniform_head_gen_loss_is_length_times_log_v() {
        let (ds, cfg) = tiny();
        let mut model = Model::new(cfg, &ds, 4).unwrap();
        let v = model.vocab_size;
        model.store.set(model.out_proj, Tensor::zeros(v, 8)).unwrap();
        let preps = model.prepare_all(&ds.conversations[..4]).unwrap();
        let batch: Vec<&Prepared> = preps.iter().collect();
        let mut ctx = Ctx::new(&model.store, false);
        let l = model.gen_loss(&mut ctx, &batch).unwrap();
        let mean_len = preps.iter().map(|p| (p.response.len() + 1) as f64).sum::<f64>() / 4.0;
        assert!((ctx.tape.scalar(l) - mean_len * (v as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn generation_edge_cases() {
        let (ds, cfg) = tiny();
        let model = Model::new(cfg, &ds, 5).unwrap();
        let p = model.prepare(&ds.conversations[0]).unwrap();
        assert!(model.generate(&p, 0).unwrap().is_empty());
        assert_eq!(model.generate(&p, 5).unwrap(), model.generate(&p, 5).unwrap());
    }

    #[test]
    fn zero_lr_keeps_parameters_and_training_is_deterministic() {
        let (ds, cfg) = tiny();
        let mut model = Model::new(cfg.clone(), &ds, 6).unwrap();
        let preps = model.prepare_all(&ds.conversations).unwrap();
        let before = model.store.snapshot();
        let tc = TrainConfig { epochs: 2, lr: 0.0, batch_size: 5, weight_decay: 0.01 };
        for stage in [Stage::Pretrain, Stage::Rec, Stage::Gen] {
            let r = run_stage(&mut model, stage, &preps, &tc).unwrap();
            assert_eq!(r.frozen_before, r.frozen_after);
        }
        assert_eq!(before, model.store.snapshot());

        let tc = TrainConfig { epochs: 1, lr: 0.01, batch_size: 5, weight_decay: 0.01 };
        let mut traces = Vec::new();
        for _ in 0..2 {
            let mut m = Model::new(cfg.clone(), &ds, 6).unwrap();
            traces.push(run_stage(&mut m, Stage::Rec, &preps, &tc).unwrap().losses);
        }
        assert_eq!(traces[0], traces[1]);
    }

    #[test]
    fn stage_order_enforced() {
        let (ds, cfg) = tiny();
        let mut model = Model::new(cfg, &ds, 7).unwrap();
        let preps = model.prepare_all(&ds.conversations).unwrap();
        let tc = TrainConfig { epochs: 0, lr: 0.0, batch_size: 4, weight_decay: 0.0 };
        run_stage(&mut model, Stage::Rec, &preps, &tc).unwrap();
        assert!(matches!(run_stage(&mut model, Stage::Pretrain, &preps, &tc), Err(Error::Stage(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (ds, cfg) = tiny();
        let mut model = Model::new(cfg.clone(), &ds, 8).unwrap();
        let preps = model.prepare_all(&ds.conversations).unwrap();
        let tc = TrainConfig { epochs: 1, lr: 0.01, batch_size: 6, weight_decay: 0.01 };
        run_stage(&mut model, Stage::Pretrain, &preps, &tc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        model.checkpoint(Some(Stage::Pretrain), serde_json::Value::Null).save(&path).unwrap();
        assert!(!dir.path().join("ck.tmp").exists());
        let mut fresh = Model::new(cfg.clone(), &ds, 8).unwrap();
        fresh.restore(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(fresh.store.snapshot(), model.store.snapshot());
        let a = run_stage(&mut model, Stage::Rec, &preps, &tc).unwrap();
        let b = run_stage(&mut fresh, Stage::Rec, &preps, &tc).unwrap();
        assert_eq!(a.losses, b.losses);
        let mut other = Model::new(cfg, &ds, 9).unwrap();
        assert!(other.restore(&Checkpoint::load(&path).unwrap()).is_err());
    }

    fn loss_of(model: &Model, stage: Stage, batch: &[&Prepared]) -> f64 {
        let mut ctx = Ctx::new(&model.store, false);
        let l = match stage {
            Stage::Pretrain => model.pretrain_loss(&mut ctx, batch, SelectMode::Train),
            Stage::Rec => model.rec_loss(&mut ctx, batch, SelectMode::Train),
            Stage::Gen => model.gen_loss(&mut ctx, batch),
        }
        .unwrap();
        ctx.tape.scalar(l)
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (ds, mut cfg) = tiny();
        // a detached h_t is invisible to the tape but not to finite differences
        cfg.ci_item_grad = true;
        let mut model = Model::new(cfg, &ds, 10).unwrap();
        let preps = model.prepare_all(&ds.conversations[..2]).unwrap();
        let batch: Vec<&Prepared> = preps.iter().collect();
        let checks = [
            (Stage::Pretrain, "rec.w_s"),
            (Stage::Pretrain, "dis.p_f"),
            (Stage::Pretrain, "kg.layer0.w_self"), (Stage::Pretrain, "kg.base"),
            (Stage::Rec, "rec.soft"),
            (Stage::Rec, "sel.w1"),
            (Stage::Gen, "gen.out_proj"),
            (Stage::Gen, "gen.soft"),
        ];
        for (stage, name) in checks {
            let Some(id) = model.store.id(name) else { panic!("no parameter {name}") };
            let bp = {
                let mut ctx = Ctx::for_group(&model.store, stage.group());
                let l = match stage {
                    Stage::Pretrain => model.pretrain_loss(&mut ctx, &batch, SelectMode::Train),
                    Stage::Rec => model.rec_loss(&mut ctx, &batch, SelectMode::Train),
                    Stage::Gen => model.gen_loss(&mut ctx, &batch),
                }
                .unwrap();
                ctx.finish(l).unwrap()
            };
            model.store.zero_grad();
            model.store.accumulate(&bp.binding, &bp.grads);
            let grad = model.store.grad(id).clone();
            for k in [0, 3, 5] {
                let h = 1e-5;
                let orig = model.store.value(id).data()[k];
                model.store.value_mut(id).data_mut()[k] = orig + h;
                let up = loss_of(&model, stage, &batch);
                model.store.value_mut(id).data_mut()[k] = orig - h;
                let down = loss_of(&model, stage, &batch);
                model.store.value_mut(id).data_mut()[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let g = grad.data()[k];
                assert!((fd - g).abs() <= 1e-4 * (1.0 + fd.abs()), "{name}[{k}] in {}: fd {fd} vs {g}", stage.name());
            }
        }
    }

    #[test]
    fn stages_overfit_a_tiny_batch() {
        let (ds, cfg) = tiny();
        let mut model = Model::new(cfg, &ds, 11).unwrap();
        let preps = model.prepare_all(&ds.conversations[..4]).unwrap();
        let batch: Vec<&Prepared> = preps.iter().collect();
        for (stage, epochs) in [(Stage::Pretrain, 60), (Stage::Rec, 60), (Stage::Gen, 200)] {
            let before = loss_of(&model, stage, &batch);
            let tc = TrainConfig { epochs, lr: 0.02, batch_size: 4, weight_decay: 0.0 };
            let r = run_stage(&mut model, stage, &preps, &tc).unwrap();
            let after = loss_of(&model, stage, &batch);
            assert!(after < 0.5 * before, "{}: {before} -> {after} ({:?})", stage.name(), &r.losses[r.losses.len() - 3..]);
        }
        // positions shared by every response are context-free and must be reproduced
        let shared: Vec<usize> = (0..preps[0].response.len()).filter(|&i| preps.iter().all(|p| p.response.get(i) == preps[0].response.get(i))).collect();
        assert!(shared.len() >= 3);
        for p in &preps {
            let out = model.generate(p, 16).unwrap();
            assert_eq!(out.len(), p.response.len());
            for &i in &shared {
                assert_eq!(out[i], p.response[i]);
            }
        }
    }
}
