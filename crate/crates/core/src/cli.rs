//! Command-line experiments: `gen-corpus`, `train`, `eval`, `ablate`, `sweep`.
//!
//! Configuration is layered: built-in defaults, then a `--config` file, then
//! flags. The file is flat `key = value` text (`#` starts a comment) and may
//! also be a run manifest, whose `config` object is read back so a run can
//! be repeated exactly. Every key is also a flag of the same name.
//!
//! Keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `seed` | model and training seed; corpus seed for `gen-corpus` |
//! | `data` | corpus directory written by `gen-corpus` (default: generate in memory) |
//! | `corpus_seed` | seed of the in-memory synthetic corpus |
//! | `n_items`, `n_attributes`, `n_background_tags`, `vocab_size`, `n_conversations`, `min_utterances`, `max_utterances`, `p_focus`, `noise` | synthetic corpus |
//! | `split_train`, `split_valid`, `split_test`, `split_seed` | corpus split |
//! | `dim`, `heads`, `encoder_depth`, `fuser_depth`, `rgcn_layers`, `n_soft`, `selector_hidden`, `max_context`, `max_response` | model sizes |
//! | `eta`, `lambda`, `margin`, `tau` | pool size, loss weight, contrastive margin, selector temperature |
//! | `select_mode` (`train`, `straight_through`), `similarity` (`shifted`, `raw`) | selection relaxation, dominance similarity |
//! | `freeze_labels`, `dis_in_rec`, `ci_item_grad`, `probes` | booleans |
//! | `lr_pretrain`, `lr_rec`, `lr_gen`, `batch_size`, `weight_decay` | optimizer |
//! | `epochs_pretrain`, `epochs_rec`, `epochs_gen` | epochs per stage |
//! | `variant` | `full`, `no_cd`, `no_cid`, `no_dual`, `fc`, `bg`, `fw(w)`; `ablate` takes a comma list of extras |
//! | `out` | output root (default: `$DISENCRS_OUT`, else `runs`) |
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 non-finite loss.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde_json::{json, Value};

use crate::data::{file_sha256, generate_corpus, CorpusSpec, Dataset, Manifest, REDIAL_FILE};
use crate::disentangle::SimilarityMode;
use crate::error::{Error, Result};
use crate::eval::{ablation_csv, evaluate, probe_model, run_variant, sweep, sweep_csv, validate_report, Corpus, Report, RunConfig, SweepParam, Variant, REPORT_FORMAT};
use crate::prompt::SelectMode;
use crate::tasks::{Checkpoint, Model, Stage};

pub const OUT_ENV: &str = "DISENCRS_OUT";

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub corpus: CorpusSpec,
    pub data: Option<PathBuf>,
    pub split: [f64; 3],
    pub split_seed: u64,
    pub variants: Vec<Variant>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            corpus: CorpusSpec::default(),
            data: None,
            split: [0.7, 0.1, 0.2],
            split_seed: 0,
            variants: vec![Variant::Full],
            out: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed", "data", "corpus_seed", "n_items", "n_attributes", "n_background_tags", "vocab_size", "n_conversations",
    "min_utterances", "max_utterances", "p_focus", "noise", "split_train", "split_valid", "split_test", "split_seed", "dim",
    "heads", "encoder_depth", "fuser_depth", "rgcn_layers", "n_soft", "selector_hidden", "max_context", "max_response", "eta",
    "lambda", "margin", "tau", "select_mode", "similarity", "freeze_labels", "dis_in_rec", "ci_item_grad", "probes", "lr_pretrain", "lr_rec",
    "lr_gen", "batch_size", "weight_decay", "epochs_pretrain", "epochs_rec", "epochs_gen", "variant", "out",
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Invalid(format!("bad value {v:?} for {key}")))
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.run.model;
        let c = &mut self.corpus;
        match key {
            "seed" => self.run.seed = parse(key, v)?,
            "data" => self.data = (!v.trim().is_empty()).then(|| PathBuf::from(v.trim())),
            "corpus_seed" => c.seed = parse(key, v)?,
            "n_items" => c.n_items = parse(key, v)?,
            "n_attributes" => c.n_attributes = parse(key, v)?,
            "n_background_tags" => c.n_background_tags = parse(key, v)?,
            "vocab_size" => c.vocab_size = parse(key, v)?,
            "n_conversations" => c.n_conversations = parse(key, v)?,
            "min_utterances" => c.min_utterances = parse(key, v)?,
            "max_utterances" => c.max_utterances = parse(key, v)?,
            "p_focus" => c.p_focus = parse(key, v)?,
            "noise" => c.noise = parse(key, v)?,
            "split_train" => self.split[0] = parse(key, v)?,
            "split_valid" => self.split[1] = parse(key, v)?,
            "split_test" => self.split[2] = parse(key, v)?,
            "split_seed" => self.split_seed = parse(key, v)?,
            "dim" => m.dim = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "encoder_depth" => m.encoder_depth = parse(key, v)?,
            "fuser_depth" => m.fuser_depth = parse(key, v)?,
            "rgcn_layers" => m.rgcn_layers = parse(key, v)?,
            "n_soft" => m.n_soft = parse(key, v)?,
            "selector_hidden" => m.selector_hidden = parse(key, v)?,
            "max_context" => m.max_context = parse(key, v)?,
            "max_response" => m.max_response = parse(key, v)?,
            "eta" => m.eta = parse(key, v)?,
            "lambda" => m.lambda = parse(key, v)?,
            "margin" => m.margin = parse(key, v)?,
            "tau" => m.tau = parse(key, v)?,
            "select_mode" => {
                m.select_mode = match v.trim() {
                    "train" => SelectMode::Train,
                    "straight_through" => SelectMode::StraightThrough,
                    _ => return Err(Error::Invalid(format!("select_mode must be train or straight_through, got {v:?}"))),
                }
            }
            "similarity" => {
                m.similarity = match v.trim() {
                    "shifted" => SimilarityMode::Shifted,
                    "raw" => SimilarityMode::Raw,
                    _ => return Err(Error::Invalid(format!("similarity must be shifted or raw, got {v:?}"))),
                }
            }
            "freeze_labels" => m.freeze_labels = parse(key, v)?,
            "dis_in_rec" => m.dis_in_rec = parse(key, v)?,
            "ci_item_grad" => m.ci_item_grad = parse(key, v)?,
            "probes" => self.run.probes = parse(key, v)?,
            "lr_pretrain" => self.run.pretrain.lr = parse(key, v)?,
            "lr_rec" => self.run.rec.lr = parse(key, v)?,
            "lr_gen" => self.run.gen.lr = parse(key, v)?,
            "batch_size" => {
                let b = parse(key, v)?;
                self.run.pretrain.batch_size = b;
                self.run.rec.batch_size = b;
                self.run.gen.batch_size = b;
            }
            "weight_decay" => {
                let w = parse(key, v)?;
                self.run.pretrain.weight_decay = w;
                self.run.rec.weight_decay = w;
                self.run.gen.weight_decay = w;
            }
            "epochs_pretrain" => self.run.pretrain.epochs = parse(key, v)?,
            "epochs_rec" => self.run.rec.epochs = parse(key, v)?,
            "epochs_gen" => self.run.gen.epochs = parse(key, v)?,
            "variant" => self.variants = v.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_>>()?,
            "out" => self.out = Some(PathBuf::from(v.trim())),
            _ => return Err(Error::Invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Flat key/value form, readable by [`ExperimentConfig::set`].
    pub fn pairs(&self) -> BTreeMap<&'static str, String> {
        let m = &self.run.model;
        let c = &self.corpus;
        let r = &self.run;
        let mut p = BTreeMap::new();
        let mut put = |k: &'static str, v: String| {
            p.insert(k, v);
        };
        put("seed", r.seed.to_string());
        put("data", self.data.as_ref().map(|d| d.display().to_string()).unwrap_or_default());
        put("corpus_seed", c.seed.to_string());
        put("n_items", c.n_items.to_string());
        put("n_attributes", c.n_attributes.to_string());
        put("n_background_tags", c.n_background_tags.to_string());
        put("vocab_size", c.vocab_size.to_string());
        put("n_conversations", c.n_conversations.to_string());
        put("min_utterances", c.min_utterances.to_string());
        put("max_utterances", c.max_utterances.to_string());
        put("p_focus", c.p_focus.to_string());
        put("noise", c.noise.to_string());
        put("split_train", self.split[0].to_string());
        put("split_valid", self.split[1].to_string());
        put("split_test", self.split[2].to_string());
        put("split_seed", self.split_seed.to_string());
        put("dim", m.dim.to_string());
        put("heads", m.heads.to_string());
        put("encoder_depth", m.encoder_depth.to_string());
        put("fuser_depth", m.fuser_depth.to_string());
        put("rgcn_layers", m.rgcn_layers.to_string());
        put("n_soft", m.n_soft.to_string());
        put("selector_hidden", m.selector_hidden.to_string());
        put("max_context", m.max_context.to_string());
        put("max_response", m.max_response.to_string());
        put("eta", m.eta.to_string());
        put("lambda", m.lambda.to_string());
        put("margin", m.margin.to_string());
        put("tau", m.tau.to_string());
        put("select_mode", if m.select_mode == SelectMode::StraightThrough { "straight_through" } else { "train" }.into());
        put("similarity", if m.similarity == SimilarityMode::Raw { "raw" } else { "shifted" }.into());
        put("freeze_labels", m.freeze_labels.to_string());
        put("dis_in_rec", m.dis_in_rec.to_string());
        put("ci_item_grad", m.ci_item_grad.to_string());
        put("probes", r.probes.to_string());
        put("lr_pretrain", r.pretrain.lr.to_string());
        put("lr_rec", r.rec.lr.to_string());
        put("lr_gen", r.gen.lr.to_string());
        put("batch_size", r.rec.batch_size.to_string());
        put("weight_decay", r.rec.weight_decay.to_string());
        put("epochs_pretrain", r.pretrain.epochs.to_string());
        put("epochs_rec", r.rec.epochs.to_string());
        put("epochs_gen", r.gen.epochs.to_string());
        put("variant", self.variants.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
        p
    }

    pub fn echo(&self) -> Value {
        json!(self.pairs())
    }

    pub fn validate(&self) -> Result<()> {
        self.run.model.validate()?;
        self.corpus.validate()?;
        for t in [&self.run.pretrain, &self.run.rec, &self.run.gen] {
            if t.batch_size == 0 || t.lr.is_nan() || t.lr < 0.0 || t.weight_decay.is_nan() || t.weight_decay < 0.0 {
                return Err(Error::Invalid("batch_size must be positive; lr and weight_decay nonnegative".into()));
            }
        }
        if self.variants.is_empty() {
            return Err(Error::Invalid("at least one variant required".into()));
        }
        Ok(())
    }

    /// Reads a flat key/value file or a run manifest.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        if text.trim_start().starts_with('{') {
            let v: Value = serde_json::from_str(&text)?;
            let cfg = v.get("config").and_then(Value::as_object).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "manifest has no config object".into(),
            })?;
            for (k, v) in cfg {
                let v = v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string());
                self.set(k, &v)?;
            }
            return Ok(());
        }
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected key = value".into(),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })?;
        }
        Ok(())
    }

    pub fn from_matches(m: &ArgMatches) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = m.get_one::<String>("config") {
            cfg.load_file(Path::new(p))?;
        }
        for key in KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        let data = match &self.data {
            Some(dir) => {
                if !dir.join("corpus.jsonl").is_file() && !dir.join(REDIAL_FILE).is_file() {
                    return Err(Error::Invalid(format!("no corpus at {}", dir.display())));
                }
                Dataset::load(dir)?
            }
            None => generate_corpus(&self.corpus)?.0,
        };
        Corpus::split(data, self.split, self.split_seed)
    }
}

pub fn command() -> Command {
    let mut common = vec![Arg::new("config").long("config").value_name("FILE").help("flat key = value file or run manifest")];
    for key in KEYS {
        common.push(Arg::new(*key).long(*key).value_name("VALUE").help(format!("overrides config key {key}")));
    }
    let sub = |name: &'static str, about: &'static str| Command::new(name).about(about).args(common.clone());
    Command::new("disencrs")
        .about("Disentangled-context conversational recommender experiments")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub("gen-corpus", "Generate the synthetic corpus"))
        .subcommand(
            sub("train", "Run the pretrain, rec and gen stages")
                .arg(Arg::new("resume").long("resume").value_name("CHECKPOINT").help("continue after the checkpoint's stage")),
        )
        .subcommand(sub("eval", "Evaluate a checkpoint").arg(Arg::new("checkpoint").long("checkpoint").value_name("FILE").required(true)))
        .subcommand(sub("ablate", "Compare full, no_cd, no_cid and no_dual (plus --variant extras)"))
        .subcommand(
            sub("sweep", "Sweep eta or lambda")
                .arg(Arg::new("param").long("param").value_name("eta|lambda").required(true))
                .arg(Arg::new("values").long("values").value_name("LIST").help("comma-separated; defaults per parameter")),
        )
        .arg(Arg::new("quiet").long("quiet").short('q').action(ArgAction::SetTrue).global(true))
}

/// A fresh, never reused directory under the output root.
pub fn run_dir(cfg: &ExperimentConfig, cmd: &str) -> Result<PathBuf> {
    let root = cfg.out.clone().or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&root).map_err(|e| Error::Invalid(format!("cannot create output root {}: {e}", root.display())))?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    for n in 0.. {
        let name = if n == 0 { format!("{cmd}-{stamp}") } else { format!("{cmd}-{stamp}-{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::Invalid(format!("cannot create run directory under {}: {e}", root.display()))),
        }
    }
    unreachable!()
}

/// Writes `manifest.json` with the config echo and hashes of every file in `dir`.
pub fn write_manifest(dir: &Path, cmd: &str, cfg: &ExperimentConfig, inputs: BTreeMap<String, String>) -> Result<Manifest> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.json")
        .collect();
    names.sort();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let extra = json!({ "command": cmd, "config": cfg.echo(), "seed": cfg.run.seed, "inputs": inputs });
    let mut m = Manifest::for_files(dir, &refs, extra)?;
    m.format = "disencrs-run-v1".into();
    let mut v = serde_json::to_value(&m)?;
    // lift the config so the manifest can be passed straight back to --config
    v["config"] = cfg.echo();
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(m)
}

fn corpus_inputs(cfg: &ExperimentConfig) -> Result<BTreeMap<String, String>> {
    let mut inputs = BTreeMap::new();
    if let Some(d) = &cfg.data {
        for n in ["corpus.jsonl", REDIAL_FILE, "kg.tsv", "vocab.txt", "items.txt"] {
            if d.join(n).is_file() {
                inputs.insert(format!("data/{n}"), file_sha256(&d.join(n))?);
            }
        }
    }
    Ok(inputs)
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

pub fn cmd_gen_corpus(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = run_dir(cfg, "gen-corpus")?;
    let spec = CorpusSpec { seed: cfg.run.seed, ..cfg.corpus.clone() };
    let (ds, _) = generate_corpus(&spec)?;
    ds.save(&dir, json!({ "spec": spec }))?;
    write_manifest(&dir, "gen-corpus", cfg, BTreeMap::new())?;
    Ok(dir)
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

pub fn cmd_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let corpus = cfg.load_corpus()?;
    let dir = run_dir(cfg, "train")?;
    let mut model = Model::new(cfg.run.model.clone(), &corpus.data, cfg.run.seed)?;
    let mut inputs = corpus_inputs(cfg)?;
    if let Some(p) = resume {
        let ck = Checkpoint::load(p)?;
        model.restore(&ck)?;
        inputs.insert("resume".into(), file_sha256(p)?);
    }
    let train = model.prepare_all(&corpus.train)?;
    for (stage, tc) in [(Stage::Pretrain, &cfg.run.pretrain), (Stage::Rec, &cfg.run.rec), (Stage::Gen, &cfg.run.gen)] {
        if model.completed.is_some_and(|done| stage <= done) {
            continue;
        }
        let report = crate::tasks::run_stage(&mut model, stage, &train, tc)?;
        fs::write(dir.join(format!("losses_{}.csv", stage.name())), loss_csv(&report.losses))?;
        model.checkpoint(Some(stage), cfg.echo()).save(&dir.join(format!("checkpoint_{}.json", stage.name())))?;
    }
    write_manifest(&dir, "train", cfg, inputs)?;
    Ok(dir)
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<PathBuf> {
    let ck = Checkpoint::load(checkpoint)?;
    let Some(stage) = ck.stage.filter(|&s| s >= Stage::Rec) else {
        return Err(Error::Stage(format!("checkpoint lacks the rec stage (has {:?})", ck.stage.map(Stage::name))));
    };
    let corpus = cfg.load_corpus()?;
    let mut model = Model::new(ck.model.clone(), &corpus.data, ck.seed)?;
    model.restore(&ck)?;
    let evaluation = evaluate(&model, &corpus.test, stage >= Stage::Gen)?;
    let probes = if cfg.run.probes && corpus.data.conversations.iter().any(|c| c.planted.is_some()) {
        Some(probe_model(&model, &model.prepare_all(&corpus.data.conversations)?, ck.seed)?)
    } else {
        None
    };
    let report = Report {
        format: REPORT_FORMAT.into(),
        version: 1,
        variant: cfg.variants[0].to_string(),
        seed: ck.seed,
        config: ck.config.clone(),
        metrics: evaluation.metrics,
        probes,
        n_test: evaluation.lists.len(),
    };
    validate_report(&serde_json::to_value(&report)?)?;
    let dir = run_dir(cfg, "eval")?;
    write_json(&dir.join("report.json"), &report)?;
    let mut inputs = corpus_inputs(cfg)?;
    inputs.insert("checkpoint".into(), file_sha256(checkpoint)?);
    write_manifest(&dir, "eval", cfg, inputs)?;
    Ok(dir)
}

pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let corpus = cfg.load_corpus()?;
    let dir = run_dir(cfg, "ablate")?;
    let mut variants = Variant::ABLATIONS.to_vec();
    for v in &cfg.variants {
        if !variants.contains(v) {
            variants.push(*v);
        }
    }
    let mut runs = Vec::new();
    for v in variants {
        let run = run_variant(v, &corpus, &cfg.run)?;
        write_json(&dir.join(format!("report_{}.json", run.variant)), &run.report)?;
        runs.push(run);
    }
    fs::write(dir.join("ablation.csv"), ablation_csv(&runs, cfg.run.seed)?)?;
    write_manifest(&dir, "ablate", cfg, corpus_inputs(cfg)?)?;
    Ok(dir)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<PathBuf> {
    let corpus = cfg.load_corpus()?;
    let dir = run_dir(cfg, "sweep")?;
    let rows = sweep(param, values, &corpus, &cfg.run)?;
    fs::write(dir.join("sweep.csv"), sweep_csv(param, &rows))?;
    let mut inputs = corpus_inputs(cfg)?;
    inputs.insert("param".into(), param.name().into());
    inputs.insert("values".into(), values.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
    write_manifest(&dir, "sweep", cfg, inputs)?;
    Ok(dir)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn dispatch(name: &str, m: &ArgMatches) -> Result<PathBuf> {
    let cfg = ExperimentConfig::from_matches(m)?;
    match name {
        "gen-corpus" => cmd_gen_corpus(&cfg),
        "train" => cmd_train(&cfg, m.get_one::<String>("resume").map(Path::new)),
        "eval" => cmd_eval(&cfg, Path::new(m.get_one::<String>("checkpoint").expect("required"))),
        "ablate" => cmd_ablate(&cfg),
        "sweep" => {
            let param: SweepParam = m.get_one::<String>("param").expect("required").parse()?;
            let values = match m.get_one::<String>("values") {
                Some(list) => list.split(',').map(|v| parse::<f64>("values", v)).collect::<Result<Vec<_>>>()?,
                None => param.defaults(),
            };
            cmd_sweep(&cfg, param, &values)
        }
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match dispatch(name, sub) {
        Ok(dir) => {
            if !matches.get_flag("quiet") {
                println!("{}", dir.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_round_trip_through_set() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("lambda", "3.5").unwrap();
        cfg.set("variant", "no_cd,fw(0.25)").unwrap();
        cfg.set("select_mode", "straight_through").unwrap();
        let mut back = ExperimentConfig::default();
        for (k, v) in cfg.pairs() {
            back.set(k, &v).unwrap();
        }
        back.out = cfg.out.clone();
        assert_eq!(back, cfg);
        assert_eq!(cfg.pairs().len(), KEYS.len() - 1);
    }

    #[test]
    fn config_file_and_flag_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.conf");
        fs::write(&path, "# desk run\nlambda = 2\neta=5\n\nseed = 9 # trailing\n").unwrap();
        let m = command().try_get_matches_from(["disencrs", "ablate", "--config", path.to_str().unwrap(), "--eta", "7"]).unwrap();
        let cfg = ExperimentConfig::from_matches(m.subcommand().unwrap().1).unwrap();
        assert_eq!(cfg.run.model.lambda, 2.0);
        assert_eq!(cfg.run.model.eta, 7);
        assert_eq!(cfg.run.seed, 9);
        fs::write(&path, "lambda 2\n").unwrap();
        let m = command().try_get_matches_from(["disencrs", "ablate", "--config", path.to_str().unwrap()]).unwrap();
        assert!(matches!(ExperimentConfig::from_matches(m.subcommand().unwrap().1), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn validation_errors_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["disencrs", "gen-corpus", "--n_conversations", "0", "--out", out]), 2);
        assert_eq!(run(["disencrs", "train", "--data", "/nonexistent/corpus", "--out", out]), 2);
        assert_eq!(run(["disencrs", "bogus"]), 2);
        assert_eq!(run(["disencrs", "sweep", "--param", "depth", "--out", out]), 2);
    }
}
