//! Conversations, the synthetic corpus generator, file formats and splits.
//!
//! # Files
//!
//! A dataset directory holds
//!
//! - `corpus.jsonl`: one [`Conversation`] per line,
//! - `kg.tsv`: `head<TAB>relation<TAB>tail`, string names,
//! - `vocab.txt`: one token per line, line number is the token id,
//! - `items.txt`: names of the recommendable entities,
//! - `manifest.json`: seed, generator spec and sha256 of every file above.
//!
//! # ReDial-format input
//!
//! [`load_redial`] reads JSON lines with the fields
//!
//! ```text
//! {"conversationId": "2001",
//!  "initiatorWorkerId": 7,
//!  "movieMentions": {"111": "Heat (1995)"},            // optional
//!  "messages": [{"senderWorkerId": 7, "text": "I loved @111"}, ...]}
//! ```
//!
//! A directory with `redial.jsonl`, `kg.tsv` and `items.txt` (and optionally
//! `vocab.txt`) but no `corpus.jsonl` loads through [`Dataset::load`], so it
//! can be passed as `data` to every command.
//!
//! `@<id>` marks a movie mention. It resolves to the KG entity whose name is
//! `<id>`, or failing that the title in `movieMentions`. The last message from
//! the respondent that mentions a resolvable movie is the gold response; its
//! first such movie is the target item and earlier messages form the context.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::disentangle::DominanceLabel;
use crate::error::{Error, Result};
use crate::graph::KnowledgeGraph;
use crate::numcore::SeedStreams;

pub const CLS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const USER: usize = 3;
pub const RECOMMENDER: usize = 4;
const SPECIALS: [&str; 5] = ["<cls>", "<eos>", "<unk>", "<user>", "<rec>"];

/// ReDial-format conversations inside a dataset directory.
pub const REDIAL_FILE: &str = "redial.jsonl";

pub const HAS_ATTR: &str = "has_attr";
pub const SUITS_CONTEXT: &str = "suits_context";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// Vocabulary holding only the special tokens.
    pub fn new() -> Self {
        let mut v = Self { words: Vec::new(), index: HashMap::new() };
        for s in SPECIALS {
            v.add(s);
        }
        v
    }

    pub fn add(&mut self, word: &str) -> usize {
        if let Some(&i) = self.index.get(word) {
            return i;
        }
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), self.words.len() - 1);
        self.words.len() - 1
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("<unk>", String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Whitespace tokens; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    /// Whitespace tokens, adding unseen words.
    pub fn encode_growing(&mut self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.add(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = self.words.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut v = Self { words: Vec::new(), index: HashMap::new() };
        for (i, line) in text.lines().enumerate() {
            if v.index.contains_key(line) {
                return Err(Error::Parse { path: path.into(), line: i + 1, msg: format!("duplicate token {line:?}") });
            }
            v.add(line);
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if v.id(s) != Some(i) {
                return Err(Error::Parse { path: path.into(), line: i + 1, msg: format!("expected special token {s}") });
            }
        }
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Recommender,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub tokens: Vec<usize>,
}

/// Ground-truth factors of a synthetic conversation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Planted {
    pub focus_attr: usize,
    pub background_tag: usize,
    pub dominance: DominanceLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub mentioned_entities: Vec<usize>,
    pub target_item: Option<usize>,
    pub gold_response: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<Planted>,
}

impl Conversation {
    /// Flattened context, each utterance preceded by its speaker token.
    pub fn context_tokens(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for u in &self.utterances {
            out.push(match u.speaker {
                Speaker::User => USER,
                Speaker::Recommender => RECOMMENDER,
            });
            out.extend_from_slice(&u.tokens);
        }
        out
    }

    /// Mentioned entities with repeats removed, first occurrence order.
    pub fn distinct_mentions(&self) -> Vec<usize> {
        let mut seen = Vec::new();
        for &e in &self.mentioned_entities {
            if !seen.contains(&e) {
                seen.push(e);
            }
        }
        seen
    }
}

/// Knowledge graph, vocabulary, item subset and conversations.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: KnowledgeGraph,
    pub vocab: Vocab,
    /// Entity ids that can be recommended.
    pub items: Vec<usize>,
    pub conversations: Vec<Conversation>,
}

impl Dataset {
    /// Token ids of every entity name.
    pub fn entity_tokens(&self) -> Vec<Vec<usize>> {
        self.graph.entity_names().iter().map(|n| self.vocab.encode(n)).collect()
    }

    pub fn save(&self, dir: &Path, extra: Value) -> Result<Manifest> {
        fs::create_dir_all(dir)?;
        write_corpus(&dir.join("corpus.jsonl"), &self.conversations)?;
        write_kg(&dir.join("kg.tsv"), &self.graph)?;
        self.vocab.write(&dir.join("vocab.txt"))?;
        let mut items = String::new();
        for &i in &self.items {
            items.push_str(self.graph.entity_name(i));
            items.push('\n');
        }
        fs::write(dir.join("items.txt"), items)?;
        let manifest = Manifest::for_files(dir, &["corpus.jsonl", "kg.tsv", "vocab.txt", "items.txt"], extra)?;
        manifest.write(&dir.join("manifest.json"))?;
        Ok(manifest)
    }

    /// Reads a dataset directory; without `corpus.jsonl`, a `redial.jsonl`
    /// is ingested instead and `vocab.txt` becomes optional.
    pub fn load(dir: &Path) -> Result<Self> {
        let (graph, _) = load_kg(&dir.join("kg.tsv"))?;
        let corpus_path = dir.join("corpus.jsonl");
        let vocab_path = dir.join("vocab.txt");
        let mut vocab = if corpus_path.is_file() || vocab_path.is_file() { Vocab::read(&vocab_path)? } else { Vocab::new() };
        let items_path = dir.join("items.txt");
        let mut items = Vec::new();
        for (i, line) in fs::read_to_string(&items_path)?.lines().enumerate() {
            let id = graph.entity_id(line).ok_or_else(|| Error::Parse {
                path: items_path.clone(),
                line: i + 1,
                msg: format!("item {line:?} is not a KG entity"),
            })?;
            items.push(id);
        }
        let conversations = if corpus_path.is_file() {
            read_corpus(&corpus_path)?
        } else {
            load_redial(&dir.join(REDIAL_FILE), &graph, &mut vocab)?.0
        };
        let ds = Self { graph, vocab, items, conversations };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.graph.n_entities();
        for c in &self.conversations {
            if c.mentioned_entities.iter().any(|&e| e >= n) {
                return Err(Error::Invalid(format!("conversation {} mentions an unknown entity", c.id)));
            }
            if let Some(t) = c.target_item {
                if !self.items.contains(&t) {
                    return Err(Error::UnknownItem(t));
                }
            }
            let v = self.vocab.len();
            if c.gold_response.iter().chain(c.utterances.iter().flat_map(|u| &u.tokens)).any(|&t| t >= v) {
                return Err(Error::Invalid(format!("conversation {} has tokens outside the vocabulary", c.id)));
            }
        }
        Ok(())
    }
}

/// Sidecar record of how a set of files was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub extra: Value,
    /// File name → hex sha256 of its bytes.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn for_files(dir: &Path, names: &[&str], extra: Value) -> Result<Self> {
        let mut files = BTreeMap::new();
        for n in names {
            files.insert(n.to_string(), file_sha256(&dir.join(n))?);
        }
        Ok(Self { format: "disencrs-manifest-v1".into(), extra, files })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

pub fn write_corpus(path: &Path, conversations: &[Conversation]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for c in conversations {
        serde_json::to_writer(&mut f, c)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Conversation>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let c = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { path: path.into(), line: i + 1, msg: e.to_string() })?;
        out.push(c);
    }
    Ok(out)
}

pub fn write_kg(path: &Path, graph: &KnowledgeGraph) -> Result<()> {
    let mut s = String::new();
    for t in graph.triples() {
        s.push_str(&format!(
            "{}\t{}\t{}\n",
            graph.entity_name(t.head),
            graph.relation_names()[t.relation],
            graph.entity_name(t.tail)
        ));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Reads a TSV triple file. Returns the graph and the number of duplicate
/// triples dropped.
pub fn load_kg(path: &Path) -> Result<(KnowledgeGraph, usize)> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Parse { path: path.into(), line: i + 1, msg: format!("expected 3 columns, found {}", cols.len()) });
        }
        rows.push((cols[0], cols[1], cols[2]));
    }
    let (graph, dups) = KnowledgeGraph::from_named(rows)?;
    if dups > 0 {
        eprintln!("warning: {}: dropped {dups} duplicate triple(s)", path.display());
    }
    Ok((graph, dups))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub conversations: usize,
    pub utterances: usize,
    pub mentions_resolved: usize,
    pub mentions_dropped: usize,
    /// Resolved movie entities, sorted.
    pub items: Vec<usize>,
}

fn field<'a>(obj: &'a Value, name: &str, line: usize) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| Error::MissingField { field: name.into(), line })
}

/// Reads ReDial-style JSON lines (schema in the module docs), growing `vocab`
/// with unseen words.
pub fn load_redial(path: &Path, graph: &KnowledgeGraph, vocab: &mut Vocab) -> Result<(Vec<Conversation>, LoadReport)> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    let mut report = LoadReport::default();
    let mut items = std::collections::BTreeSet::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let obj: Value = serde_json::from_str(&line).map_err(|e| Error::Parse { path: path.into(), line: ln, msg: e.to_string() })?;
        let id = match field(&obj, "conversationId", ln)? {
            Value::String(s) => s.clone(),
            v => v.to_string(),
        };
        let initiator = field(&obj, "initiatorWorkerId", ln)?.clone();
        let titles = obj.get("movieMentions").and_then(Value::as_object);
        let messages = field(&obj, "messages", ln)?
            .as_array()
            .ok_or_else(|| Error::Parse { path: path.into(), line: ln, msg: "`messages` must be an array".into() })?;
        let mut utterances = Vec::new();
        let mut mentions_per_msg = Vec::new();
        for m in messages {
            let text = field(m, "text", ln)?
                .as_str()
                .ok_or_else(|| Error::Parse { path: path.into(), line: ln, msg: "`text` must be a string".into() })?;
            let sender = field(m, "senderWorkerId", ln)?;
            let speaker = if *sender == initiator { Speaker::User } else { Speaker::Recommender };
            let mut toks = Vec::new();
            let mut ents = Vec::new();
            for w in text.split_whitespace() {
                if let Some(raw) = w.strip_prefix('@') {
                    let key: String = raw.chars().take_while(char::is_ascii_digit).collect();
                    let resolved = graph.entity_id(&key).or_else(|| {
                        titles.and_then(|t| t.get(&key)).and_then(Value::as_str).and_then(|name| graph.entity_id(name))
                    });
                    match resolved {
                        Some(e) => {
                            report.mentions_resolved += 1;
                            ents.push(e);
                            toks.extend(vocab.encode_growing(graph.entity_name(e)));
                        }
                        None => {
                            report.mentions_dropped += 1;
                            toks.push(UNK);
                        }
                    }
                } else {
                    toks.push(vocab.add(&w.to_lowercase()));
                }
            }
            utterances.push(Utterance { speaker, tokens: toks });
            mentions_per_msg.push(ents);
        }
        report.utterances += utterances.len();
        let target_at = (0..utterances.len())
            .rev()
            .find(|&k| utterances[k].speaker == Speaker::Recommender && !mentions_per_msg[k].is_empty());
        let (context, target_item, gold_response) = match target_at {
            Some(k) => {
                let t = mentions_per_msg[k][0];
                items.insert(t);
                (k, Some(t), utterances[k].tokens.clone())
            }
            None => (utterances.len(), None, Vec::new()),
        };
        for ents in &mentions_per_msg {
            items.extend(ents.iter().copied());
        }
        let mentioned_entities = mentions_per_msg[..context].concat();
        utterances.truncate(context);
        out.push(Conversation { id, utterances, mentioned_entities, target_item, gold_response, planted: None });
    }
    report.conversations = out.len();
    report.items = items.into_iter().collect();
    Ok((out, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_items: usize,
    pub n_attributes: usize,
    pub n_background_tags: usize,
    pub vocab_size: usize,
    pub n_conversations: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub p_focus: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_items: 200,
            n_attributes: 12,
            n_background_tags: 6,
            vocab_size: 500,
            n_conversations: 2000,
            min_utterances: 4,
            max_utterances: 6,
            p_focus: 0.7,
            noise: 0.1,
            seed: 0,
        }
    }
}

const TEMPLATE_WORDS: &str = "i want something really like ones is what am looking for it will watch planning tonight \
     with about how you might enjoy what kind do any occasion tell me more sure great maybe this that and a the \
     of to be good fun recommend suggest try ? .";

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.n_attributes == 0 || self.n_background_tags == 0 || self.n_conversations == 0 {
            return Err(Error::Invalid("corpus counts must be at least 1".into()));
        }
        if self.n_items < self.n_attributes * self.n_background_tags {
            return Err(Error::Invalid(format!(
                "n_items {} must cover every attribute/tag pair ({} × {})",
                self.n_items, self.n_attributes, self.n_background_tags
            )));
        }
        if !(0.0..=1.0).contains(&self.p_focus) || !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Invalid("p_focus and noise must lie in [0, 1]".into()));
        }
        if self.min_utterances < 2 || self.max_utterances < self.min_utterances {
            return Err(Error::Invalid("utterance range must satisfy 2 <= min <= max".into()));
        }
        let needed = self.reserved_words() + 1;
        if self.vocab_size < needed {
            return Err(Error::Invalid(format!("vocab_size {} too small, need at least {needed}", self.vocab_size)));
        }
        Ok(())
    }

    fn reserved_words(&self) -> usize {
        SPECIALS.len() + self.n_attributes + self.n_background_tags + self.n_items + TEMPLATE_WORDS.split_whitespace().count()
    }
}

pub fn attr_name(i: usize) -> String {
    format!("attr_{i:02}")
}

pub fn tag_name(i: usize) -> String {
    format!("ctx_{i:02}")
}

pub fn item_name(i: usize) -> String {
    format!("item_{i:03}")
}

/// Per-item planted properties of a synthetic corpus, keyed by entity id.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemTable {
    pub attribute: BTreeMap<usize, usize>,
    pub tag: BTreeMap<usize, usize>,
}

impl ItemTable {
    /// Recovers item properties by querying the graph.
    pub fn from_graph(graph: &KnowledgeGraph, items: &[usize]) -> Result<Self> {
        let has = graph.relation_id(HAS_ATTR).ok_or_else(|| Error::Invalid("graph has no has_attr relation".into()))?;
        let suits = graph.relation_id(SUITS_CONTEXT).ok_or_else(|| Error::Invalid("graph has no suits_context relation".into()))?;
        let mut attribute = BTreeMap::new();
        let mut tag = BTreeMap::new();
        for &i in items {
            if let Some(&a) = graph.neighbors(has, i).first() {
                attribute.insert(i, a);
            }
            if let Some(&t) = graph.neighbors(suits, i).first() {
                tag.insert(i, t);
            }
        }
        Ok(Self { attribute, tag })
    }

    /// Whether `item` satisfies the planted constraint of `p`.
    pub fn satisfies(&self, item: usize, p: &Planted) -> bool {
        let attr_ok = self.attribute.get(&item) == Some(&p.focus_attr);
        let tag_ok = self.tag.get(&item) == Some(&p.background_tag);
        match p.dominance {
            DominanceLabel::Focus => attr_ok && !tag_ok,
            DominanceLabel::Background => attr_ok && tag_ok,
        }
    }
}

/// Builds the KG and a corpus with planted focus/background factors.
///
/// Every item has one attribute and one background tag; the first
/// `attributes × tags` items cover every pair. A conversation states a focus
/// attribute (as entity mentions) and a background tag (as plain words).
/// Focus-dominated targets share the attribute but not the tag; background
/// dominated targets share both. Focus-dominated conversations mention the
/// attribute more often, background-dominated ones repeat the tag words.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<(Dataset, ItemTable)> {
    spec.validate()?;
    let streams = SeedStreams::new(spec.seed);
    let mut rng = streams.stream("corpus.items");
    let (na, nt) = (spec.n_attributes, spec.n_background_tags);
    let mut pairs: Vec<(usize, usize)> = (0..spec.n_items)
        .map(|i| if i < na * nt { (i % na, i / na) } else { (rng.random_range(0..na), rng.random_range(0..nt)) })
        .collect();
    pairs.shuffle(&mut rng);

    let item_names: Vec<String> = (0..spec.n_items).map(item_name).collect();
    let attr_names: Vec<String> = (0..na).map(attr_name).collect();
    let tag_names: Vec<String> = (0..nt).map(tag_name).collect();
    let mut named = Vec::new();
    for (i, &(a, t)) in pairs.iter().enumerate() {
        named.push((item_names[i].as_str(), HAS_ATTR, attr_names[a].as_str()));
        named.push((item_names[i].as_str(), SUITS_CONTEXT, tag_names[t].as_str()));
    }
    let (graph, _) = KnowledgeGraph::from_named(named)?;
    let eid = |name: &str| graph.entity_id(name).expect("interned entity");
    let items: Vec<usize> = item_names.iter().map(|n| eid(n)).collect();
    let attrs: Vec<usize> = attr_names.iter().map(|n| eid(n)).collect();
    let tags: Vec<usize> = tag_names.iter().map(|n| eid(n)).collect();
    let table = ItemTable::from_graph(&graph, &items)?;

    let mut vocab = Vocab::new();
    for n in attr_names.iter().chain(&tag_names).chain(&item_names) {
        vocab.add(n);
    }
    for w in TEMPLATE_WORDS.split_whitespace() {
        vocab.add(w);
    }
    let filler: Vec<usize> = (0..spec.vocab_size - vocab.len()).map(|k| vocab.add(&format!("w_{k:03}"))).collect();
    let w = |s: &str| vocab.encode(s);

    let mut by_pair: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (i, &(a, t)) in pairs.iter().enumerate() {
        by_pair.entry((a, t)).or_default().push(items[i]);
    }
    let focus_pool = |a: usize, t: usize| -> Vec<usize> {
        (0..nt).filter(|&u| u != t).flat_map(|u| by_pair.get(&(a, u)).cloned().unwrap_or_default()).collect()
    };

    let attr_templates = [
        "i want something {}",
        "i really like {} ones",
        "{} is what i want",
        "maybe something {} ?",
        "i am looking for {}",
    ];
    let tag_templates = ["it is for {}", "planning {} tonight", "i will watch it {}", "this is {} and fun"];
    let rec_templates = ["what kind do you like ?", "any occasion ?", "tell me more", "sure . what about it ?"];

    let mut crng = streams.stream("corpus.conversations");
    let mut conversations = Vec::with_capacity(spec.n_conversations);
    for ci in 0..spec.n_conversations {
        let dominance = if crng.random_bool(spec.p_focus) { DominanceLabel::Focus } else { DominanceLabel::Background };
        let mut chosen = None;
        for _ in 0..100 {
            let a = crng.random_range(0..na);
            let t = crng.random_range(0..nt);
            let pool = match dominance {
                DominanceLabel::Focus => focus_pool(a, t),
                DominanceLabel::Background => by_pair.get(&(a, t)).cloned().unwrap_or_default(),
            };
            if let Some(&target) = pool.choose(&mut crng) {
                chosen = Some((a, t, target));
                break;
            }
        }
        let (a, t, target) = chosen.ok_or(Error::Unsatisfiable(100))?;
        let (n_attr, n_tag) = match dominance {
            DominanceLabel::Focus => (crng.random_range(2..=3), 1),
            DominanceLabel::Background => (1, crng.random_range(2..=3)),
        };
        let mut phrases: Vec<(Vec<usize>, usize)> = Vec::new();
        for _ in 0..n_attr {
            let tpl = attr_templates.choose(&mut crng).unwrap();
            phrases.push((w(&tpl.replace("{}", &attr_names[a])), 1));
        }
        for _ in 0..n_tag {
            let tpl = tag_templates.choose(&mut crng).unwrap();
            phrases.push((w(&tpl.replace("{}", &tag_names[t])), 0));
        }
        if crng.random_bool(spec.noise) {
            let other = (t + crng.random_range(1..nt.max(2))) % nt;
            let tpl = tag_templates.choose(&mut crng).unwrap();
            phrases.push((w(&tpl.replace("{}", &tag_names[other])), 0));
        }
        phrases.shuffle(&mut crng);

        let n_utt = crng.random_range(spec.min_utterances..=spec.max_utterances);
        let n_user = n_utt.div_ceil(2);
        let mut user_turns: Vec<Vec<usize>> = vec![Vec::new(); n_user];
        let mut mentions_in: Vec<usize> = vec![0; n_user];
        for (k, (p, is_attr)) in phrases.into_iter().enumerate() {
            let slot = if k < n_user { k } else { crng.random_range(0..n_user) };
            user_turns[slot].extend(p);
            mentions_in[slot] += is_attr;
        }
        let mut utterances = Vec::with_capacity(n_utt);
        let mut mentioned_entities = Vec::new();
        for k in 0..n_utt {
            if k % 2 == 0 {
                let mut toks = std::mem::take(&mut user_turns[k / 2]);
                for _ in 0..crng.random_range(0..=2) {
                    toks.push(*filler.choose(&mut crng).unwrap());
                }
                for tok in toks.iter_mut() {
                    if filler.contains(tok) && crng.random_bool(spec.noise) {
                        *tok = *filler.choose(&mut crng).unwrap();
                    }
                }
                mentioned_entities.extend(std::iter::repeat_n(attrs[a], mentions_in[k / 2]));
                utterances.push(Utterance { speaker: Speaker::User, tokens: toks });
            } else {
                let tpl = rec_templates.choose(&mut crng).unwrap();
                utterances.push(Utterance { speaker: Speaker::Recommender, tokens: w(tpl) });
            }
        }
        let target_word = graph.entity_name(target).to_string();
        let reason = match dominance {
            DominanceLabel::Focus => format!("with {}", attr_names[a]),
            DominanceLabel::Background => format!("for {}", tag_names[t]),
        };
        let gold_response = w(&format!("you might enjoy {target_word} {reason}"));
        conversations.push(Conversation {
            id: format!("syn-{ci:05}"),
            utterances,
            mentioned_entities,
            target_item: Some(target),
            gold_response,
            planted: Some(Planted { focus_attr: attrs[a], background_tag: tags[t], dominance }),
        });
    }
    let ds = Dataset { graph, vocab, items, conversations };
    ds.validate()?;
    Ok((ds, table))
}

/// Seeded, stratified three-way split by the given ratios.
///
/// Conversations are grouped by planted dominance, shuffled within each
/// group and interleaved by relative rank before being cut into contiguous
/// pieces, so every piece carries each group in proportion.
pub fn split_corpus(conversations: &[Conversation], ratios: [f64; 3], seed: u64) -> Result<[Vec<Conversation>; 3]> {
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("split ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    let mut rng = SeedStreams::new(seed).stream("split");
    let mut strata: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, c) in conversations.iter().enumerate() {
        let key = match c.planted.as_ref().map(|p| p.dominance) {
            None => 0,
            Some(DominanceLabel::Focus) => 1,
            Some(DominanceLabel::Background) => 2,
        };
        strata.entry(key).or_default().push(i);
    }
    let mut keyed = Vec::with_capacity(conversations.len());
    for (s, idx) in strata.iter_mut() {
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        for (rank, &i) in idx.iter().enumerate() {
            keyed.push(((rank as f64 + 0.5) / n, *s, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = conversations.len();
    let n_train = (n as f64 * ratios[0]).round() as usize;
    let n_valid = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let take = |r: std::ops::Range<usize>| keyed[r].iter().map(|k| conversations[k.2].clone()).collect::<Vec<_>>();
    Ok([take(0..n_train), take(n_train..n_train + n_valid), take(n_train + n_valid..n)])
}
