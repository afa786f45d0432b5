//! Ranking and text metrics, linear probes, paired bootstrap, ablation
//! variants and sweeps.
//!
//! Conventions:
//! - NDCG uses binary relevance with one relevant item, so the ideal DCG is 1.
//! - BLEU is corpus-level with uniform weights, no smoothing and the usual
//!   brevity penalty; any zero precision makes the score 0.
//! - ROUGE-2 is bigram recall with clipped counts. ROUGE-L is the LCS
//!   F-measure with β = 1.2.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{Conversation, Dataset};
use crate::error::{Error, Result};
use crate::numcore::SeedStreams;
use crate::tasks::{run_stage, Model, ModelConfig, Prepared, PromptMode, Stage, StageReport, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub id: String,
    /// Item ids by descending score.
    pub items: Vec<usize>,
    pub truth: usize,
}

impl RankedList {
    /// 1-based rank of the ground truth.
    pub fn rank(&self) -> Option<usize> {
        self.items.iter().position(|&i| i == self.truth).map(|p| p + 1)
    }
}

fn mean_over(lists: &[RankedList], k: usize, f: impl Fn(usize) -> f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if lists.is_empty() {
        return Err(Error::Empty("ranked lists"));
    }
    let total: f64 = lists.iter().map(|l| l.rank().filter(|&r| r <= k).map_or(0.0, &f)).sum();
    Ok(total / lists.len() as f64)
}

pub fn recall_at_k(lists: &[RankedList], k: usize) -> Result<f64> {
    mean_over(lists, k, |_| 1.0)
}

pub fn ndcg_at_k(lists: &[RankedList], k: usize) -> Result<f64> {
    mean_over(lists, k, |r| 1.0 / ((1 + r) as f64).log2())
}

pub fn mrr_at_k(lists: &[RankedList], k: usize) -> Result<f64> {
    mean_over(lists, k, |r| 1.0 / r as f64)
}

fn ngrams<T: Hash + Eq + Clone>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if n > 0 && seq.len() >= n {
        for w in seq.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Unique n-grams over total n-grams across all responses.
pub fn distinct_n<T: Hash + Eq + Clone>(responses: &[Vec<T>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Invalid("n must be at least 1".into()));
    }
    let mut seen = std::collections::HashSet::new();
    let mut total = 0usize;
    for r in responses {
        if r.len() >= n {
            for w in r.windows(n) {
                seen.insert(w);
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::NoNgrams(n));
    }
    Ok(seen.len() as f64 / total as f64)
}

/// Corpus BLEU over orders `1..=n` against one reference per hypothesis.
pub fn bleu_n<T: Hash + Eq + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>], n: usize) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Empty("hypothesis corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Invalid(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    if n == 0 {
        return Err(Error::Invalid("n must be at least 1".into()));
    }
    let mut log_p = 0.0;
    for order in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let rc = ngrams(r, order);
            for (g, c) in ngrams(h, order) {
                matched += c.min(rc.get(g).copied().unwrap_or(0));
                total += c;
            }
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_p += (matched as f64 / total as f64).ln() / n as f64;
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * log_p.exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rouge {
    Two,
    L,
}

pub const ROUGE_L_BETA: f64 = 1.2;

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub fn rouge<T: Hash + Eq + Clone>(hyp: &[T], reference: &[T], variant: Rouge) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("reference"));
    }
    match variant {
        Rouge::Two => {
            let rc = ngrams(reference, 2);
            let total: usize = rc.values().sum();
            if total == 0 {
                return Err(Error::NoNgrams(2));
            }
            let hc = ngrams(hyp, 2);
            let hit: usize = rc.iter().map(|(g, &c)| c.min(hc.get(g).copied().unwrap_or(0))).sum();
            Ok(hit as f64 / total as f64)
        }
        Rouge::L => {
            let l = lcs_len(hyp, reference);
            if l == 0 {
                return Ok(0.0);
            }
            let r = l as f64 / reference.len() as f64;
            let p = l as f64 / hyp.len() as f64;
            let b2 = ROUGE_L_BETA * ROUGE_L_BETA;
            Ok((1.0 + b2) * r * p / (r + b2 * p))
        }
    }
}

/// Mean per-pair ROUGE.
pub fn rouge_corpus<T: Hash + Eq + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>], variant: Rouge) -> Result<f64> {
    if hyps.is_empty() || hyps.len() != refs.len() {
        return Err(Error::Invalid("rouge needs equally many non-empty hypotheses and references".into()));
    }
    let mut s = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        s += rouge(h, r, variant)?;
    }
    Ok(s / hyps.len() as f64)
}

pub const PROBE_L2: f64 = 1e-3;
const PROBE_MAX_ITERS: usize = 3000;

/// Test accuracy of a multinomial logistic probe on a seeded 80/20 split.
///
/// Features are centered on the training mean and divided by one global
/// scale, so accuracy does not change under rotations of the inputs.
/// Training is full-batch gradient descent from zero with an L2 penalty.
pub fn linear_probe(reps: &[Vec<f64>], labels: &[usize], seed: u64) -> Result<f64> {
    if reps.len() != labels.len() || reps.len() < 5 {
        return Err(Error::Invalid("probe needs at least 5 labelled representations".into()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Invalid("probe labels have a single class".into()));
    }
    let cls: HashMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let y: Vec<usize> = labels.iter().map(|l| cls[l]).collect();
    let d = reps[0].len();
    if reps.iter().any(|r| r.len() != d) {
        return Err(Error::Invalid("probe representations differ in width".into()));
    }
    let mut order: Vec<usize> = (0..reps.len()).collect();
    order.shuffle(&mut SeedStreams::new(seed).stream("probe.split"));
    let n_train = (reps.len() * 4).div_ceil(5).min(reps.len() - 1);
    let (train, test) = order.split_at(n_train);

    let mut mean = vec![0.0; d];
    for &i in train {
        for (m, x) in mean.iter_mut().zip(&reps[i]) {
            *m += x / train.len() as f64;
        }
    }
    let centered = |i: usize| -> Vec<f64> { reps[i].iter().zip(&mean).map(|(x, m)| x - m).collect() };
    let ms: f64 = train.iter().map(|&i| centered(i).iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / train.len() as f64;
    let scale = if ms > 0.0 { 1.0 / ms.sqrt() } else { 1.0 };
    let feats = |i: usize| -> Vec<f64> { centered(i).into_iter().map(|x| x * scale).collect() };
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| feats(i)).collect();
    let k = classes.len();
    let mut w = vec![vec![0.0; d]; k];
    let mut b = vec![0.0; k];
    let lr = 1.0;
    let mut p = vec![0.0; k];
    for _ in 0..PROBE_MAX_ITERS {
        let mut gw = vec![vec![0.0; d]; k];
        let mut gb = vec![0.0; k];
        for (x, &i) in xs.iter().zip(train) {
            for c in 0..k {
                p[c] = b[c] + w[c].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
            crate::numcore::softmax_in_place(&mut p);
            p[y[i]] -= 1.0;
            for c in 0..k {
                gb[c] += p[c];
                for (g, xv) in gw[c].iter_mut().zip(x) {
                    *g += p[c] * xv;
                }
            }
        }
        let inv = 1.0 / xs.len() as f64;
        let mut norm = 0.0;
        for c in 0..k {
            gb[c] *= inv;
            b[c] -= lr * gb[c];
            norm += gb[c] * gb[c];
            for j in 0..d {
                let g = gw[c][j] * inv + PROBE_L2 * w[c][j];
                w[c][j] -= lr * g;
                norm += g * g;
            }
        }
        if norm.sqrt() < 1e-6 {
            break;
        }
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let x = feats(i);
            let scores: Vec<f64> = (0..k).map(|c| b[c] + w[c].iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()).collect();
            let mut best = 0;
            for c in 1..k {
                if scores[c] > scores[best] {
                    best = c;
                }
            }
            best == y[i]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bootstrap {
    /// Mean of `a - b`.
    pub mean_diff: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Half-width of the 90% interval.
    pub half_width: f64,
    /// Two-sided p-value for a zero difference.
    pub p_value: f64,
}

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

/// Paired bootstrap over per-conversation scores.
pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<Bootstrap> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Invalid("paired bootstrap needs two equal, non-empty samples".into()));
    }
    if resamples == 0 {
        return Err(Error::Invalid("at least one resample required".into()));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diff.len();
    let mean_diff = diff.iter().sum::<f64>() / n as f64;
    let mut rng = SeedStreams::new(seed).stream("bootstrap");
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| diff[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let q = |p: f64| means[((p * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    let (ci_low, ci_high) = (q(0.05), q(0.95));
    let le = means.iter().filter(|&&m| m <= 0.0).count() as f64 / resamples as f64;
    let ge = means.iter().filter(|&&m| m >= 0.0).count() as f64 / resamples as f64;
    Ok(Bootstrap { mean_diff, ci_low, ci_high, half_width: (ci_high - ci_low) / 2.0, p_value: (2.0 * le.min(ge)).min(1.0) })
}

/// Significance stars for a p-value.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoCd,
    NoCid,
    NoDual,
    Fc,
    Bg,
    Fw(f64),
}

impl Variant {
    pub const ABLATIONS: [Variant; 4] = [Variant::Full, Variant::NoCd, Variant::NoCid, Variant::NoDual];

    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoCd => c.use_cd = false,
            Variant::NoCid => c.use_ci = false,
            Variant::NoDual => {
                c.use_cd = false;
                c.use_ci = false;
            }
            Variant::Fc => c.prompt = PromptMode::Fixed(1.0),
            Variant::Bg => c.prompt = PromptMode::Fixed(0.0),
            Variant::Fw(w) => c.prompt = PromptMode::Fixed(w),
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => write!(f, "full"),
            Variant::NoCd => write!(f, "no_cd"),
            Variant::NoCid => write!(f, "no_cid"),
            Variant::NoDual => write!(f, "no_dual"),
            Variant::Fc => write!(f, "fc"),
            Variant::Bg => write!(f, "bg"),
            Variant::Fw(w) => write!(f, "fw({w})"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts the display names; `fw(0.3)` and `fw:0.3` are equivalent.
    fn from_str(s: &str) -> Result<Self> {
        let v = match s.trim() {
            "full" => Variant::Full,
            "no_cd" => Variant::NoCd,
            "no_cid" => Variant::NoCid,
            "no_dual" => Variant::NoDual,
            "fc" => Variant::Fc,
            "bg" => Variant::Bg,
            other => {
                let w = other
                    .strip_prefix("fw(")
                    .and_then(|r| r.strip_suffix(')'))
                    .or_else(|| other.strip_prefix("fw:"))
                    .ok_or_else(|| Error::Invalid(format!("unknown variant {other:?}")))?;
                let w: f64 = w.parse().map_err(|_| Error::Invalid(format!("bad fusion weight in {other:?}")))?;
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::Invalid(format!("fusion weight {w} outside [0, 1]")));
                }
                Variant::Fw(w)
            }
        };
        Ok(v)
    }
}

/// Everything needed to train and evaluate one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub rec: TrainConfig,
    pub gen: TrainConfig,
    /// Fit linear probes on planted factors after pretraining.
    pub probes: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let stage = |s, epochs, lr| TrainConfig { epochs, lr, ..TrainConfig::for_stage(s) };
        Self {
            seed: 0,
            model: ModelConfig::default(),
            pretrain: stage(Stage::Pretrain, 10, 0.005),
            rec: stage(Stage::Rec, 3, 0.005),
            gen: stage(Stage::Gen, 5, 0.001),
            probes: true,
        }
    }
}

/// A corpus divided into train, validation and test conversations.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub data: Dataset,
    pub train: Vec<Conversation>,
    pub valid: Vec<Conversation>,
    pub test: Vec<Conversation>,
}

impl Corpus {
    pub fn split(data: Dataset, ratios: [f64; 3], seed: u64) -> Result<Self> {
        let [train, valid, test] = crate::data::split_corpus(&data.conversations, ratios, seed)?;
        Ok(Self { data, train, valid, test })
    }
}

/// Probe accuracies of `h_f` and `h_b` on the planted factors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Probes {
    pub focus_on_attr: f64,
    pub background_on_attr: f64,
    pub focus_on_tag: f64,
    pub background_on_tag: f64,
}

pub fn probe_model(model: &Model, preps: &[Prepared], seed: u64) -> Result<Probes> {
    let planted: Vec<(&Prepared, _)> = preps.iter().filter_map(|p| p.planted.as_ref().map(|pl| (p, pl))).collect();
    let only: Vec<Prepared> = planted.iter().map(|(p, _)| (*p).clone()).collect();
    let reps = model.representations(&only)?;
    let (hf, hb): (Vec<Vec<f64>>, Vec<Vec<f64>>) = reps.into_iter().unzip();
    let attr: Vec<usize> = planted.iter().map(|(_, pl)| pl.focus_attr).collect();
    let tag: Vec<usize> = planted.iter().map(|(_, pl)| pl.background_tag).collect();
    Ok(Probes {
        focus_on_attr: linear_probe(&hf, &attr, seed)?,
        background_on_attr: linear_probe(&hb, &attr, seed)?,
        focus_on_tag: linear_probe(&hf, &tag, seed)?,
        background_on_tag: linear_probe(&hb, &tag, seed)?,
    })
}

/// Trains all three stages (skipping those with zero epochs).
pub fn train_model(cfg: &RunConfig, corpus: &Corpus) -> Result<(Model, Vec<StageReport>, Option<Probes>)> {
    let mut model = Model::new(cfg.model.clone(), &corpus.data, cfg.seed)?;
    let train = model.prepare_all(&corpus.train)?;
    let mut reports = Vec::new();
    let mut probes = None;
    for (stage, tc) in [(Stage::Pretrain, &cfg.pretrain), (Stage::Rec, &cfg.rec), (Stage::Gen, &cfg.gen)] {
        reports.push(run_stage(&mut model, stage, &train, tc)?);
        if stage == Stage::Pretrain && cfg.probes {
            let all = model.prepare_all(&corpus.data.conversations)?;
            probes = Some(probe_model(&model, &all, cfg.seed)?);
        }
    }
    Ok((model, reports, probes))
}

pub const RANK_KS: [usize; 3] = [1, 10, 50];

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: BTreeMap<String, f64>,
    pub lists: Vec<RankedList>,
    /// Generated responses, when the generator was trained.
    pub generated: Option<Vec<Vec<usize>>>,
}

impl Evaluation {
    /// Per-conversation Recall@k indicators.
    pub fn hits(&self, k: usize) -> Vec<f64> {
        self.lists.iter().map(|l| if l.rank().is_some_and(|r| r <= k) { 1.0 } else { 0.0 }).collect()
    }
}

/// Ranking metrics on conversations with a target; text metrics when `text` is set.
pub fn evaluate(model: &Model, convs: &[Conversation], text: bool) -> Result<Evaluation> {
    let preps: Vec<Prepared> = model.prepare_all(convs)?.into_iter().filter(|p| p.target.is_some()).collect();
    let ranked = model.rank_items(&preps)?;
    let lists: Vec<RankedList> = preps
        .iter()
        .zip(ranked)
        .map(|(p, items)| RankedList { id: p.id.clone(), items, truth: p.target.unwrap_or_default() })
        .collect();
    let mut metrics = BTreeMap::new();
    for k in RANK_KS {
        metrics.insert(format!("recall@{k}"), recall_at_k(&lists, k)?);
    }
    for k in [10, 50] {
        metrics.insert(format!("ndcg@{k}"), ndcg_at_k(&lists, k)?);
        metrics.insert(format!("mrr@{k}"), mrr_at_k(&lists, k)?);
    }
    let mut generated = None;
    if text {
        let with_resp: Vec<&Prepared> = preps.iter().filter(|p| !p.response.is_empty()).collect();
        let hyps = with_resp.iter().map(|p| model.generate(p, model.config.max_response)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<Vec<usize>> = with_resp.iter().map(|p| p.response.clone()).collect();
        for n in [2, 3, 4] {
            metrics.insert(format!("distinct@{n}"), distinct_n(&hyps, n).unwrap_or(0.0));
        }
        for n in [2, 3] {
            metrics.insert(format!("bleu@{n}"), bleu_n(&hyps, &refs, n)?);
        }
        metrics.insert("rouge@2".into(), rouge_corpus(&hyps, &refs, Rouge::Two)?);
        metrics.insert("rouge@l".into(), rouge_corpus(&hyps, &refs, Rouge::L)?);
        generated = Some(hyps);
    }
    Ok(Evaluation { metrics, lists, generated })
}

pub const REPORT_FORMAT: &str = "disencrs-report";

/// JSON metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub version: u32,
    pub variant: String,
    pub seed: u64,
    pub config: Value,
    pub metrics: BTreeMap<String, f64>,
    pub probes: Option<Probes>,
    pub n_test: usize,
}

/// Checks the layout of a report and the ranges of its values.
pub fn validate_report(v: &Value) -> Result<()> {
    let bad = |m: String| Err(Error::Invalid(format!("report: {m}")));
    let Some(obj) = v.as_object() else { return bad("not an object".into()) };
    for key in ["format", "version", "variant", "seed", "config", "metrics", "n_test"] {
        if !obj.contains_key(key) {
            return bad(format!("missing {key}"));
        }
    }
    if obj["format"] != REPORT_FORMAT {
        return bad("wrong format tag".into());
    }
    let Some(metrics) = obj["metrics"].as_object() else { return bad("metrics is not an object".into()) };
    for k in ["recall@1", "recall@10", "recall@50", "ndcg@10", "ndcg@50", "mrr@10", "mrr@50"] {
        if !metrics.contains_key(k) {
            return bad(format!("missing metric {k}"));
        }
    }
    for (k, m) in metrics {
        match m.as_f64() {
            Some(x) if (0.0..=1.0).contains(&x) => {}
            _ => return bad(format!("metric {k} is not a number in [0, 1]")),
        }
    }
    if let Some(p) = obj.get("probes").filter(|p| !p.is_null()) {
        let Some(p) = p.as_object() else { return bad("probes is not an object".into()) };
        if p.values().any(|x| !x.as_f64().is_some_and(|x| (0.0..=1.0).contains(&x))) {
            return bad("probe accuracy outside [0, 1]".into());
        }
    }
    serde_json::from_value::<Report>(v.clone()).map(|_| ()).map_err(|e| Error::Invalid(format!("report: {e}")))
}

pub struct VariantRun {
    pub variant: Variant,
    pub report: Report,
    pub evaluation: Evaluation,
    pub stages: Vec<StageReport>,
    pub model: Model,
}

/// Trains and evaluates one variant; everything but the variant is shared.
pub fn run_variant(variant: Variant, corpus: &Corpus, cfg: &RunConfig) -> Result<VariantRun> {
    let cfg = RunConfig { model: variant.apply(&cfg.model), ..cfg.clone() };
    let (model, stages, probes) = train_model(&cfg, corpus)?;
    let evaluation = evaluate(&model, &corpus.test, cfg.gen.epochs > 0)?;
    let report = Report {
        format: REPORT_FORMAT.into(),
        version: 1,
        variant: variant.to_string(),
        seed: cfg.seed,
        config: serde_json::to_value(&cfg)?,
        metrics: evaluation.metrics.clone(),
        probes,
        n_test: evaluation.lists.len(),
    };
    Ok(VariantRun { variant, report, evaluation, stages, model })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    Eta,
    Lambda,
}

impl SweepParam {
    pub fn defaults(self) -> Vec<f64> {
        match self {
            SweepParam::Eta => vec![5.0, 10.0, 15.0, 20.0],
            SweepParam::Lambda => vec![1.0, 3.0, 5.0, 7.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Eta => "eta",
            SweepParam::Lambda => "lambda",
        }
    }

    fn set(self, cfg: &mut ModelConfig, v: f64) -> Result<()> {
        match self {
            SweepParam::Eta => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(Error::Invalid(format!("eta must be a positive integer, got {v}")));
                }
                cfg.eta = v as usize;
            }
            SweepParam::Lambda => cfg.lambda = v,
        }
        cfg.validate()
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eta" => Ok(SweepParam::Eta),
            "lambda" => Ok(SweepParam::Lambda),
            _ => Err(Error::Invalid(format!("unknown sweep parameter {s:?} (eta or lambda)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub metrics: BTreeMap<String, f64>,
}

/// One full run per value with the shared seed.
pub fn sweep(param: SweepParam, values: &[f64], corpus: &Corpus, cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Invalid("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            param.set(&mut c.model, v)?;
            let run = run_variant(Variant::Full, corpus, &c)?;
            Ok(SweepRow { value: v, metrics: run.report.metrics })
        })
        .collect()
}

/// CSV with one row per value and one column per metric.
pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let keys: Vec<&String> = rows.first().map(|r| r.metrics.keys().collect()).unwrap_or_default();
    let mut out = String::from(param.name());
    for k in &keys {
        out.push(',');
        out.push_str(k);
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.value.to_string());
        for k in &keys {
            out.push_str(&format!(",{}", r.metrics.get(*k).copied().unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    out
}

/// Comparison CSV of variants against the first one, with stars from the
/// paired bootstrap on per-conversation Recall@10.
pub fn ablation_csv(runs: &[VariantRun], seed: u64) -> Result<String> {
    let Some(base) = runs.first() else { return Err(Error::Empty("variant runs")) };
    let keys: Vec<String> = base.report.metrics.keys().cloned().collect();
    let mut out = String::from("variant");
    for k in &keys {
        out.push(',');
        out.push_str(k);
    }
    out.push_str(",diff_recall@10,ci90_half_width,p_value,stars\n");
    let base_hits = base.evaluation.hits(10);
    for r in runs {
        out.push_str(&r.variant.to_string());
        for k in &keys {
            out.push_str(&format!(",{}", r.report.metrics.get(k).copied().unwrap_or(f64::NAN)));
        }
        let b = paired_bootstrap(&base_hits, &r.evaluation.hits(10), BOOTSTRAP_RESAMPLES, seed)?;
        out.push_str(&format!(",{},{},{},{}\n", b.mean_diff, b.half_width, b.p_value, stars(b.p_value)));
    }
    Ok(out)
}

/// Builds a report JSON value with the given metrics (used for fixtures).
pub fn report_value(variant: &str, seed: u64, metrics: &BTreeMap<String, f64>) -> Value {
    json!({
        "format": REPORT_FORMAT,
        "version": 1,
        "variant": variant,
        "seed": seed,
        "config": {},
        "metrics": metrics,
        "probes": null,
        "n_test": 0,
    })
}
