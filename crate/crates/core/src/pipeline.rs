//! Experiment configuration, the cached stage pipeline and report emission.
//!
//! Stages run in order: ingest, split, tokenize, augment, train, evaluate.
//! Each stage's outputs live in `cache_dir/<stage>/<key>/`, where the key
//! hashes the code version, the stage's config slice and the output hashes
//! of the stages it reads. A stage is reused when its entry exists, verifies
//! against its manifest, and no upstream stage ran in the same invocation.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{build_augmented_trainset, AugmentationPlan, AugmentedSequence};
use crate::data::{read_interactions, split_dataset, write_interactions, BehaviorSchema, Dataset, IngestReport, SplitDataset, UserId};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, EvalTask, Generative, MetricRow, Perturbation, RecentItems, Recommender};
use crate::model::{checkpoint, Layout, Model, ModelConfig};
use crate::ranking::{auroc, ranking_samples, score_examples, session_examples, RankingExample};
use crate::synth::{generate_synthetic, SyntheticSpec};
use crate::tokenizer::{read_features, write_codebooks, IdKind, ItemTokenizer};
use crate::train::{build_train_samples, build_val_samples, train, EpochRecord, Sample, TrainConfig};

/// Part of every cache key; bump when an artifact format changes.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+artifacts.1");

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Interaction TSV; exclusive with `synthetic`.
    pub interactions: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    /// Schema document; defaults to the short-video preset.
    pub schema: Option<PathBuf>,
    /// Item feature TSV for trained SIDs.
    pub features: Option<PathBuf>,
    #[serde(default)]
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKind {
    SidTrain,
    SidImport,
    Cid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub kind: TokenizerKind,
    /// Code length for trained SIDs; chunked IDs derive it from the catalog.
    pub levels: usize,
    pub codebook_size: usize,
    pub seed: u64,
    /// SID TSV for `sid-import`.
    pub codes: Option<PathBuf>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { kind: TokenizerKind::SidTrain, levels: 4, codebook_size: 8192, seed: 0, codes: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub x: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { cache_dir: PathBuf::from(".hiergen-cache"), output_dir: PathBuf::from("out") }
    }
}

fn default_eval() -> Vec<EvalTask> {
    vec![EvalTask::default()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_eval")]
    pub eval: Vec<EvalTask>,
    #[serde(default)]
    pub perturbation: Option<Perturbation>,
    #[serde(default)]
    pub paths: PathsConfig,
}

/// Seed keys that must be written out in a config document.
const REQUIRED_SEEDS: [&[&str]; 3] = [&["augmentation", "seed"], &["train", "seed"], &["tokenizer", "seed"]];

impl ExperimentConfig {
    /// Parses a TOML document. Relative paths resolve against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for path in REQUIRED_SEEDS {
            let mut node = Some(&raw);
            for key in &path[..path.len() - 1] {
                node = node.and_then(|t| t.get(*key)).and_then(|v| v.as_table());
            }
            if node.and_then(|t| t.get(path[path.len() - 1])).is_none() {
                return Err(Error::Config(format!("`{}` must be set explicitly", path.join("."))));
            }
        }
        if let Some(syn) = raw.get("data").and_then(|d| d.get("synthetic")) {
            if syn.get("seed").is_none() {
                return Err(Error::Config("`data.synthetic.seed` must be set explicitly".into()));
            }
        }
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.data.interactions, &mut self.data.schema, &mut self.data.features, &mut self.tokenizer.codes]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.paths.cache_dir);
        fix(&mut self.paths.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match (&d.interactions, &d.synthetic) {
            (Some(_), Some(_)) => return Err(Error::Config("set only one of data.interactions and data.synthetic".into())),
            (None, None) => return Err(Error::Config("set data.interactions or data.synthetic".into())),
            (_, Some(s)) => s.validate()?,
            _ => {}
        }
        for p in [&d.interactions, &d.schema, &d.features, &self.tokenizer.codes].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        match self.tokenizer.kind {
            TokenizerKind::SidTrain if d.features.is_none() && d.synthetic.is_none() => {
                return Err(Error::Config("sid-train needs data.features".into()))
            }
            TokenizerKind::SidImport if self.tokenizer.codes.is_none() => {
                return Err(Error::Config("sid-import needs tokenizer.codes".into()))
            }
            _ => {}
        }
        if self.tokenizer.codebook_size < 2 || (self.tokenizer.kind == TokenizerKind::SidTrain && self.tokenizer.levels == 0) {
            return Err(Error::Config("tokenizer needs codebook_size >= 2 and at least one level".into()));
        }
        self.train.validate()?;
        if self.eval.is_empty() {
            return Err(Error::Config("at least one eval task is required".into()));
        }
        for t in &self.eval {
            t.validate()?;
        }
        if let Some(p) = &self.perturbation {
            if !(0.0..=1.0).contains(&p.r) {
                return Err(Error::Config(format!("perturbation.r = {} outside [0, 1]", p.r)));
            }
        }
        Ok(())
    }

    /// The effective configuration, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn schema(&self) -> Result<BehaviorSchema> {
        match (&self.data.synthetic, &self.data.schema) {
            (Some(s), _) => Ok(s.schema()),
            (None, Some(p)) => BehaviorSchema::load(p),
            (None, None) => Ok(BehaviorSchema::short_video()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Split,
    Tokenize,
    Augment,
    Train,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Split => "split",
            Stage::Tokenize => "tokenize",
            Stage::Augment => "augment",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    Cached,
    Ran,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub status: StageStatus,
    pub output_hash: String,
}

/// A stage's cache entry.
#[derive(Debug, Clone)]
pub struct Entry {
    pub dir: PathBuf,
    pub hash: String,
    pub ran: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    stage: String,
    key: String,
    files: Vec<(String, String)>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha_hex(&std::fs::read(path)?))
}

fn manifest_files(dir: &Path) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let e = e?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name != "manifest.json" && e.file_type()?.is_file() {
            files.push((name, hash_file(&e.path())?));
        }
    }
    files.sort();
    Ok(files)
}

/// Single-writer guard over the cache directory.
struct CacheLock(PathBuf);

impl CacheLock {
    fn acquire(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        let path = root.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "cache {} is locked by another run; remove {} if no run is active",
                root.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for CacheLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

pub struct StageCache<'a> {
    root: PathBuf,
    log: &'a mut dyn Write,
    pub records: Vec<StageRecord>,
    _lock: CacheLock,
}

impl<'a> StageCache<'a> {
    pub fn open(root: &Path, log: &'a mut dyn Write) -> Result<Self> {
        let lock = CacheLock::acquire(root)?;
        Ok(Self { root: root.to_path_buf(), log, records: Vec::new(), _lock: lock })
    }

    /// Returns the entry for `stage`, building it with `build` unless a
    /// valid one exists and nothing upstream ran.
    pub fn run<S: Serialize>(
        &mut self,
        stage: Stage,
        slice: &S,
        upstream: &[&Entry],
        files: &[String],
        build: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<Entry> {
        let name = stage.name();
        let key_doc = serde_json::json!({
            "version": CODE_VERSION,
            "stage": name,
            "slice": slice,
            "upstream": upstream.iter().map(|e| &e.hash).collect::<Vec<_>>(),
            "files": files,
        });
        let key = sha_hex(serde_json::to_string(&key_doc)?.as_bytes());
        let dir = self.root.join(name).join(&key);
        let force = upstream.iter().any(|e| e.ran);
        if !force {
            if let Some(hash) = self.verify(&dir)? {
                return self.record(name, key, dir, hash, false);
            }
        }
        let stage_err = |e: Error| Error::Stage { stage: name.to_string(), source: Box::new(e) };
        let tmp = self.root.join(name).join(format!("{key}.tmp"));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;
        build(&tmp).map_err(stage_err)?;
        let manifest = Manifest { stage: name.into(), key: key.clone(), files: manifest_files(&tmp)? };
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(tmp.join("manifest.json"), &text)?;
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::rename(&tmp, &dir)?;
        self.record(name, key, dir, sha_hex(text.as_bytes()), true)
    }

    /// Manifest hash of a complete, unmodified entry.
    fn verify(&self, dir: &Path) -> Result<Option<String>> {
        let Ok(text) = std::fs::read_to_string(dir.join("manifest.json")) else { return Ok(None) };
        let Ok(m) = serde_json::from_str::<Manifest>(&text) else { return Ok(None) };
        Ok((manifest_files(dir)? == m.files).then(|| sha_hex(text.as_bytes())))
    }

    fn record(&mut self, stage: &str, key: String, dir: PathBuf, hash: String, ran: bool) -> Result<Entry> {
        let rec = StageRecord {
            stage: stage.into(),
            key,
            status: if ran { StageStatus::Ran } else { StageStatus::Cached },
            output_hash: hash.clone(),
        };
        writeln!(self.log, "{}", serde_json::to_string(&rec)?)?;
        self.records.push(rec);
        Ok(Entry { dir, hash, ran })
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

/// Reads a stored dataset and rebuilds its name lookups.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut d: Dataset = read_json(path)?;
    d.reindex();
    Ok(d)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenizerFile {
    kind: IdKind,
    codebook_size: usize,
    codes: Vec<Vec<u32>>,
}

pub fn save_tokenizer(path: &Path, tok: &ItemTokenizer) -> Result<()> {
    write_json(path, &TokenizerFile { kind: tok.kind(), codebook_size: tok.codebook_size(), codes: tok.all_codes().to_vec() })
}

pub fn load_tokenizer(path: &Path) -> Result<ItemTokenizer> {
    let f: TokenizerFile = read_json(path)?;
    ItemTokenizer::new(f.kind, f.codebook_size, f.codes)
}

/// Model shape completed from the tokenizer and schema.
pub fn resolve_model_config(base: &ModelConfig, tok: &ItemTokenizer, schema: &BehaviorSchema) -> Result<ModelConfig> {
    let cfg = ModelConfig {
        sid_len: tok.code_len(),
        codebook_size: tok.codebook_size(),
        num_behaviors: schema.len(),
        ..base.clone()
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn build_tokenizer(cfg: &TokenizerConfig, dataset: &Dataset, features: Option<&[Vec<f64>]>) -> Result<ItemTokenizer> {
    match cfg.kind {
        TokenizerKind::SidTrain => {
            let f = features.ok_or_else(|| Error::Config("sid-train needs item features".into()))?;
            Ok(ItemTokenizer::from_features(f, cfg.levels, cfg.codebook_size, cfg.seed)?.0)
        }
        TokenizerKind::SidImport => {
            let path = cfg.codes.as_ref().ok_or_else(|| Error::Config("sid-import needs tokenizer.codes".into()))?;
            ItemTokenizer::import_tsv(path, &dataset.items, cfg.codebook_size)
        }
        TokenizerKind::Cid => ItemTokenizer::from_counts(&dataset.item_counts(), cfg.codebook_size),
    }
}

/// Training and validation samples for the generative layout.
pub fn generative_samples(
    split: &SplitDataset,
    trainset: &[AugmentedSequence],
    schema: &BehaviorSchema,
    tok: &ItemTokenizer,
    model: &ModelConfig,
    policy: crate::train::LossMask,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let train = build_train_samples(trainset.iter().map(|a| a.sessions.as_slice()), schema, tok, model, policy)?;
    let val = build_val_samples(split, schema, tok, model, policy)?;
    Ok((train, val))
}

/// Ranking examples: every train session after the first against the
/// sessions before it, the validation session, and the test session.
pub fn ranking_examples(split: &SplitDataset, schema: &BehaviorSchema) -> (Vec<RankingExample>, Vec<RankingExample>, Vec<RankingExample>) {
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for u in &split.users {
        for i in 1..u.train.len() {
            train.extend(session_examples(u.user, &u.train[..i], &u.train[i], schema));
        }
        val.extend(session_examples(u.user, &u.train, &u.val, schema));
        test.extend(session_examples(u.user, &u.history_before_test(), &u.test, schema));
    }
    (train, val, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
    pub train_samples: usize,
    pub val_samples: usize,
}

/// AUROC of one behavior against all others; `None` with a single class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AurocRow {
    pub behavior: String,
    pub examples: usize,
    pub positives: usize,
    pub auroc: Option<f64>,
}

/// Metric rows of the final evaluate stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// `(recommender, row)`.
    pub rows: Vec<(String, MetricRow)>,
    pub auroc: Vec<AurocRow>,
    pub leakage_violations: usize,
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub records: Vec<StageRecord>,
    pub entries: Vec<(Stage, Entry)>,
    pub eval: Option<EvalSummary>,
    pub output_dir: PathBuf,
}

impl PipelineOutput {
    pub fn entry(&self, stage: Stage) -> Option<&Entry> {
        self.entries.iter().find(|(s, _)| *s == stage).map(|(_, e)| e)
    }
}

/// Runs stages up to and including `until`, then copies that stage's
/// outputs, the run log and the effective config into the output
/// directory.
pub fn run_pipeline(cfg: &ExperimentConfig, until: Stage, log: &mut dyn Write) -> Result<PipelineOutput> {
    cfg.validate()?;
    let schema = cfg.schema()?;
    let mut run_log: Vec<u8> = Vec::new();
    writeln!(run_log, "{}", serde_json::json!({ "config": cfg, "version": CODE_VERSION }))?;
    let mut tee = Tee(log, &mut run_log);
    let mut cache = StageCache::open(&cfg.paths.cache_dir, &mut tee)?;
    let mut entries: Vec<(Stage, Entry)> = Vec::new();

    let mut files = Vec::new();
    for p in [&cfg.data.interactions, &cfg.data.schema, &cfg.data.features].into_iter().flatten() {
        files.push(hash_file(p)?);
    }
    let ingest_slice = serde_json::json!({ "synthetic": cfg.data.synthetic, "strict": cfg.data.strict, "schema": schema });
    let ingest = cache.run(Stage::Ingest, &ingest_slice, &[], &files, |dir| {
        let (dataset, report, features) = match &cfg.data.synthetic {
            Some(spec) => {
                let c = generate_synthetic(spec)?;
                write_json(&dir.join("truth.json"), &c.truth)?;
                let report = IngestReport {
                    valid_rows: c.dataset.interaction_count(),
                    users: c.dataset.users.len(),
                    items: c.dataset.items.len(),
                    rejected: Vec::new(),
                };
                (c.dataset, report, Some(c.features))
            }
            None => {
                let path = cfg.data.interactions.as_ref().expect("validated");
                let (dataset, report) = read_interactions(path, &schema, cfg.data.strict)?;
                let features = cfg.data.features.as_ref().map(|p| read_features(p, &dataset.items)).transpose()?;
                (dataset, report, features)
            }
        };
        write_json(&dir.join("dataset.json"), &dataset)?;
        write_json(&dir.join("ingest_report.json"), &report)?;
        if let Some(f) = features {
            write_json(&dir.join("features.json"), &f)?;
        }
        Ok(())
    })?;
    entries.push((Stage::Ingest, ingest.clone()));

    let mut eval = None;
    if until > Stage::Ingest {
        let split = cache.run(Stage::Split, &serde_json::json!({}), &[&ingest], &[], |dir| {
            let dataset = load_dataset(&ingest.dir.join("dataset.json"))?;
            let split = split_dataset(&dataset)?;
            if split.users.is_empty() {
                return Err(Error::Data("no user has the three sessions a split needs".into()));
            }
            write_json(&dir.join("split.json"), &split)
        })?;
        entries.push((Stage::Split, split.clone()));

        if until > Stage::Split {
            let mut files = Vec::new();
            if let Some(p) = &cfg.tokenizer.codes {
                files.push(hash_file(p)?);
            }
            let tokenize = cache.run(Stage::Tokenize, &cfg.tokenizer, &[&ingest], &files, |dir| {
                let dataset = load_dataset(&ingest.dir.join("dataset.json"))?;
                let fpath = ingest.dir.join("features.json");
                let features: Option<Vec<Vec<f64>>> = if fpath.exists() { Some(read_json(&fpath)?) } else { None };
                let tok = build_tokenizer(&cfg.tokenizer, &dataset, features.as_deref())?;
                save_tokenizer(&dir.join("tokenizer.json"), &tok)?;
                tok.write_tsv(std::fs::File::create(dir.join("codes.tsv"))?, &dataset.items)?;
                if cfg.tokenizer.kind == TokenizerKind::SidTrain {
                    let books = crate::tokenizer::train_residual_quantizer(features.as_deref().expect("checked"), cfg.tokenizer.levels, cfg.tokenizer.codebook_size, cfg.tokenizer.seed)?;
                    write_codebooks(std::fs::File::create(dir.join("codebooks.bin"))?, &books)?;
                }
                Ok(())
            })?;
            entries.push((Stage::Tokenize, tokenize.clone()));

            if until > Stage::Tokenize {
                let augment = cache.run(Stage::Augment, &cfg.augmentation, &[&ingest, &split], &[], |dir| {
                    let dataset = load_dataset(&ingest.dir.join("dataset.json"))?;
                    let split: SplitDataset = read_json(&split.dir.join("split.json"))?;
                    let users: Vec<(UserId, Vec<_>)> = split.users.iter().map(|u| (u.user, u.train.clone())).collect();
                    let set = build_augmented_trainset(&users, &AugmentationPlan::new(cfg.augmentation.x, cfg.augmentation.seed), &schema)?;
                    write_json(&dir.join("trainset.json"), &set)?;
                    let (rows, folds): (Vec<_>, Vec<_>) =
                        set.iter().flat_map(|a| a.sessions.iter().flat_map(|s| s.interactions.iter().map(|i| (*i, a.fold)))).unzip();
                    write_interactions(std::io::BufWriter::new(std::fs::File::create(dir.join("trainset.tsv"))?), &dataset, &rows, Some(&folds))
                })?;
                entries.push((Stage::Augment, augment.clone()));

                if until > Stage::Augment {
                    let slice = serde_json::json!({ "model": cfg.model, "train": cfg.train });
                    let trained = cache.run(Stage::Train, &slice, &[&split, &tokenize, &augment], &[], |dir| {
                        let split: SplitDataset = read_json(&split.dir.join("split.json"))?;
                        let tok = load_tokenizer(&tokenize.dir.join("tokenizer.json"))?;
                        let model_cfg = resolve_model_config(&cfg.model, &tok, &schema)?;
                        let (tr, va) = match model_cfg.layout {
                            Layout::Generative => {
                                let set: Vec<AugmentedSequence> = read_json(&augment.dir.join("trainset.json"))?;
                                generative_samples(&split, &set, &schema, &tok, &model_cfg, cfg.train.loss_mask)?
                            }
                            Layout::Ranking => {
                                let (tr, va, _) = ranking_examples(&split, &schema);
                                (ranking_samples(&tr, &schema, &tok, &model_cfg)?, ranking_samples(&va, &schema, &tok, &model_cfg)?)
                            }
                        };
                        let mut log = std::io::BufWriter::new(std::fs::File::create(dir.join("train_log.jsonl"))?);
                        let report = train(Model::init(model_cfg, cfg.train.seed)?, &tr, &va, &cfg.train, Some(&mut log))?;
                        log.flush()?;
                        checkpoint::save(&report.model, &dir.join("model.hgck"))?;
                        let summary = TrainSummary {
                            best_epoch: report.best_epoch,
                            best_val_loss: report.best_val_loss,
                            history: report.history,
                            train_samples: tr.len(),
                            val_samples: va.len(),
                        };
                        write_json(&dir.join("train_summary.json"), &summary)
                    })?;
                    entries.push((Stage::Train, trained.clone()));

                    if until > Stage::Train {
                        let slice = serde_json::json!({ "eval": cfg.eval, "perturbation": cfg.perturbation });
                        let evaluated = cache.run(Stage::Evaluate, &slice, &[&split, &tokenize, &trained], &[], |dir| {
                            let split: SplitDataset = read_json(&split.dir.join("split.json"))?;
                            let tok = load_tokenizer(&tokenize.dir.join("tokenizer.json"))?;
                            let model_cfg = resolve_model_config(&cfg.model, &tok, &schema)?;
                            let model = checkpoint::load_expecting(&trained.dir.join("model.hgck"), &model_cfg)?;
                            let summary = evaluate_stage(cfg, &model, &tok, &schema, &split, dir)?;
                            write_json(&dir.join("summary.json"), &summary)
                        })?;
                        eval = Some(read_json(&evaluated.dir.join("summary.json"))?);
                        entries.push((Stage::Evaluate, evaluated));
                    }
                }
            }
        }
    }

    let records = cache.records.clone();
    drop(cache);
    let out = &cfg.paths.output_dir;
    std::fs::create_dir_all(out)?;
    let (_, last) = entries.last().expect("ingest always runs");
    for e in std::fs::read_dir(&last.dir)? {
        let e = e?;
        if e.file_type()?.is_file() {
            std::fs::copy(e.path(), out.join(e.file_name()))?;
        }
    }
    std::fs::write(out.join("run_log.jsonl"), &run_log)?;
    std::fs::write(out.join("config.resolved.toml"), cfg.to_toml()?)?;
    Ok(PipelineOutput { records, entries, eval, output_dir: out.clone() })
}

struct Tee<'a, 'b>(&'a mut dyn Write, &'b mut Vec<u8>);

impl Write for Tee<'_, '_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.write_all(buf)?;
        self.1.extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.flush()
    }
}

fn evaluate_stage(cfg: &ExperimentConfig, model: &Model, tok: &ItemTokenizer, schema: &BehaviorSchema, split: &SplitDataset, dir: &Path) -> Result<EvalSummary> {
    let mut summary = EvalSummary::default();
    if model.config().layout == Layout::Ranking {
        let (_, _, test) = ranking_examples(split, schema);
        for b in 0..schema.len() as u16 {
            let scores = score_examples(model, &test, schema, tok, b)?;
            let positives = scores.iter().filter(|s| s.label).count();
            let value = if positives == 0 || positives == scores.len() { None } else { Some(auroc(&scores)?) };
            summary.auroc.push(AurocRow { behavior: schema.name(b).into(), examples: scores.len(), positives, auroc: value });
        }
        let mut w = std::fs::File::create(dir.join("auroc.tsv"))?;
        writeln!(w, "behavior\texamples\tpositives\tauroc")?;
        for r in &summary.auroc {
            let v = r.auroc.map_or("NA".to_string(), |v| format!("{v:.6}"));
            writeln!(w, "{}\t{}\t{}\t{}", r.behavior, r.examples, r.positives, v)?;
        }
        return Ok(summary);
    }
    let generative = Generative { model, tokenizer: tok, schema, beam: 0 };
    let mut users = std::io::BufWriter::new(std::fs::File::create(dir.join("users.jsonl"))?);
    for task in &cfg.eval {
        let g = Generative { beam: task.beam, ..generative };
        let recs: [(&str, &dyn Recommender); 2] = [("model", &g), ("recent-items", &RecentItems)];
        for (name, rec) in recs {
            let report: EvalReport = evaluate(rec, split, schema, task, cfg.perturbation.as_ref())?;
            summary.leakage_violations += report.leakage_violations;
            for u in &report.users {
                writeln!(users, "{}", serde_json::json!({ "recommender": name, "record": u }))?;
            }
            summary.rows.extend(report.rows.into_iter().map(|r| (name.to_string(), r)));
        }
    }
    users.flush()?;
    let mut lines = String::new();
    for (name, row) in &summary.rows {
        writeln!(lines, "{}", serde_json::json!({ "recommender": name, "row": row })).expect("string write");
    }
    std::fs::write(dir.join("metrics.jsonl"), lines)?;
    let table = ReportTable::from_eval(&summary);
    std::fs::write(dir.join("report.tsv"), emit_report(&table, ReportFormat::Tsv))?;
    std::fs::write(dir.join("report.md"), emit_report(&table, ReportFormat::Markdown))?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Tsv,
    Markdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub keys: Vec<String>,
    pub metrics: Option<MetricRow>,
    pub note: String,
}

/// Metric rows with leading key columns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub key_names: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn from_eval(summary: &EvalSummary) -> Self {
        Self {
            key_names: vec!["recommender".into()],
            rows: summary.rows.iter().map(|(n, r)| ReportRow { keys: vec![n.clone()], metrics: Some(r.clone()), note: String::new() }).collect(),
        }
    }

    /// One row per metric row of each ablation cell; failed cells get one
    /// row carrying the error.
    pub fn from_ablation(rows: &[crate::eval::AblationRow]) -> Self {
        let mut out = Self { key_names: vec!["x".into(), "architecture".into(), "ids".into()], rows: Vec::new() };
        for r in rows {
            let keys = vec![
                r.cell.x.to_string(),
                serde_json::to_value(r.cell.architecture).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                serde_json::to_value(r.cell.ids).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            ];
            match &r.error {
                Some(e) => out.rows.push(ReportRow { keys, metrics: None, note: e.clone() }),
                None => out.rows.extend(r.rows.iter().map(|m| ReportRow { keys: keys.clone(), metrics: Some(m.clone()), note: String::new() })),
            }
        }
        out
    }

    fn ks(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = self.rows.iter().filter_map(|r| r.metrics.as_ref()).flat_map(|m| m.ks.iter().copied()).collect();
        ks.sort_unstable();
        ks.dedup();
        ks
    }
}

/// Renders `table` with key columns, then task, behavior, evaluated users,
/// and HR, Recall and NDCG at each K. Both formats print the same values.
pub fn emit_report(table: &ReportTable, format: ReportFormat) -> String {
    let ks = table.ks();
    let mut header: Vec<String> = table.key_names.clone();
    header.extend(["task", "behavior", "users"].map(String::from));
    for prefix in ["HR", "R", "N"] {
        header.extend(ks.iter().map(|k| format!("{prefix}@{k}")));
    }
    header.push("note".into());
    let mut lines: Vec<Vec<String>> = Vec::with_capacity(table.rows.len());
    for r in &table.rows {
        let mut cells = r.keys.clone();
        match &r.metrics {
            Some(m) => {
                let task = serde_json::to_value(m.task).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                cells.extend([task, m.behavior.clone(), m.users.to_string()]);
                let cols: [fn(&MetricRow, usize) -> Option<f64>; 3] = [MetricRow::hr_at, MetricRow::recall_at, MetricRow::ndcg_at];
                for f in cols {
                    cells.extend(ks.iter().map(|&k| f(m, k).map_or("NA".to_string(), |v| format!("{v:.6}"))));
                }
            }
            None => cells.extend(std::iter::repeat_n("NA".to_string(), 3 + 3 * ks.len())),
        }
        cells.push(r.note.replace(['\t', '\n', '|'], " "));
        lines.push(cells);
    }
    let mut out = String::new();
    match format {
        ReportFormat::Tsv => {
            out.push_str(&header.join("\t"));
            out.push('\n');
            for l in lines {
                out.push_str(&l.join("\t"));
                out.push('\n');
            }
        }
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
            for l in lines {
                let _ = writeln!(out, "| {} |", l.join(" | "));
            }
        }
    }
    out
}

/// Parses a TSV produced by [`emit_report`] back into header and rows.
pub fn parse_report_tsv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines.next().map(|h| h.split('\t').map(String::from).collect()).unwrap_or_default();
    (header, lines.map(|l| l.split('\t').map(String::from).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{AblationCell, AblationRow, Architecture, TaskKind};

    fn row(users: usize, v: f64) -> MetricRow {
        MetricRow {
            task: TaskKind::Target,
            behavior: "conversion".into(),
            users,
            ks: vec![5, 10],
            hr: vec![v, v + 0.1],
            recall: vec![v / 2.0, v],
            ndcg: vec![v / 3.0, v / 1.5],
        }
    }

    fn tiny_config(dir: &Path) -> String {
        format!(
            r#"
[data.synthetic]
users = 60
topics = 4
items_per_topic = 8
popular_per_topic = 3
seed = 3

[tokenizer]
kind = "sid-train"
levels = 2
codebook_size = 16
seed = 1

[augmentation]
x = 1
seed = 2

[model]
dim = 16
inner_dim = 16
heads = 2
head_dim = 8
layers = 1
max_tokens = 48

[train]
batch_size = 16
epochs = 1
base_lr = 0.003
seed = 4

[[eval]]
kind = "target"
ks = [5, 10]
beam = 10
top_n = 10

[paths]
cache_dir = "{0}/cache"
output_dir = "{0}/out"
"#,
            dir.display()
        )
    }

    #[test]
    fn single_cell_report_has_one_row() {
        let t = ReportTable { key_names: vec![], rows: vec![ReportRow { keys: vec![], metrics: Some(row(7, 0.5)), note: String::new() }] };
        let tsv = emit_report(&t, ReportFormat::Tsv);
        assert_eq!(tsv.lines().count(), 2);
        assert!(tsv.starts_with("task\tbehavior\tusers\tHR@5\tHR@10\tR@5\tR@10\tN@5\tN@10\tnote\n"));
        assert!(tsv.contains("\t7\t"));
        let md = emit_report(&t, ReportFormat::Markdown);
        assert_eq!(md.lines().count(), 3);
    }

    #[test]
    fn markdown_and_tsv_values_agree() {
        let t = ReportTable {
            key_names: vec!["recommender".into()],
            rows: vec![
                ReportRow { keys: vec!["a".into()], metrics: Some(row(3, 0.25)), note: String::new() },
                ReportRow { keys: vec!["b".into()], metrics: Some(row(4, 0.123456789)), note: String::new() },
            ],
        };
        let (h, rows) = parse_report_tsv(&emit_report(&t, ReportFormat::Tsv));
        let md = emit_report(&t, ReportFormat::Markdown);
        let md_rows: Vec<Vec<String>> = md
            .lines()
            .skip(2)
            .map(|l| l.trim_matches('|').split('|').map(|c| c.trim().to_string()).collect())
            .collect();
        let md_head: Vec<String> = md.lines().next().unwrap().trim_matches('|').split('|').map(|c| c.trim().to_string()).collect();
        assert_eq!(h, md_head);
        assert_eq!(rows, md_rows);
    }

    #[test]
    fn ablation_table_is_sorted_and_keeps_errors() {
        let cells = [
            AblationCell { x: 4, architecture: Architecture::Plain, ids: IdKind::Sid },
            AblationCell { x: 0, architecture: Architecture::BehaviorLayer, ids: IdKind::Cid },
        ];
        let rows = crate::eval::run_ablation(&cells, |c| if c.x == 4 { Err(Error::Data("bad cell".into())) } else { Ok(vec![row(2, 0.3)]) });
        let t = ReportTable::from_ablation(&rows);
        let (h, body) = parse_report_tsv(&emit_report(&t, ReportFormat::Tsv));
        assert_eq!(&h[..3], ["x", "architecture", "ids"]);
        assert_eq!(body[0][..3], ["0", "behavior-layer", "cid"]);
        assert_eq!(body[1][..3], ["4", "plain", "sid"]);
        assert!(body[1].last().unwrap().contains("bad cell"));
        let _ = AblationRow { cell: cells[0], rows: vec![], error: None };
    }

    #[test]
    fn seeds_must_be_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let text = tiny_config(dir.path()).replace("seed = 4\n", "");
        let err = ExperimentConfig::from_toml_str(&text, dir.path()).unwrap_err();
        assert!(err.to_string().contains("train.seed"), "{err}");
        let text = tiny_config(dir.path()).replace("seed = 3\n", "");
        assert!(ExperimentConfig::from_toml_str(&text, dir.path()).is_err());
    }

    #[test]
    fn missing_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let text = "[data]\ninteractions = \"nope.tsv\"\n[tokenizer]\nseed = 0\n[augmentation]\nseed = 0\n[train]\nseed = 0\n";
        let err = ExperimentConfig::from_toml_str(text, dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("does not exist"));
    }

    #[test]
    fn cache_reuse_and_invalidation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_toml_str(&tiny_config(dir.path()), dir.path()).unwrap();
        let statuses = |o: &PipelineOutput| o.records.iter().map(|r| (r.stage.clone(), r.status)).collect::<Vec<_>>();
        let first = run_pipeline(&cfg, Stage::Evaluate, &mut std::io::sink()).unwrap();
        assert!(first.records.iter().all(|r| r.status == StageStatus::Ran));
        let eval = first.eval.clone().unwrap();
        assert_eq!(eval.leakage_violations, 0);
        assert!(dir.path().join("out/report.tsv").exists());

        let second = run_pipeline(&cfg, Stage::Evaluate, &mut std::io::sink()).unwrap();
        assert!(second.records.iter().all(|r| r.status == StageStatus::Cached));
        assert_eq!(second.eval.unwrap(), eval);

        let mut edited = cfg.clone();
        edited.eval[0].beam = 12;
        let third = run_pipeline(&edited, Stage::Evaluate, &mut std::io::sink()).unwrap();
        let s = statuses(&third);
        assert!(s[..5].iter().all(|(_, st)| *st == StageStatus::Cached), "{s:?}");
        assert_eq!(s[5].1, StageStatus::Ran);

        std::fs::remove_dir_all(&first.entry(Stage::Tokenize).unwrap().dir).unwrap();
        let fourth = run_pipeline(&cfg, Stage::Evaluate, &mut std::io::sink()).unwrap();
        let s = statuses(&fourth);
        let ran: Vec<&str> = s.iter().filter(|(_, st)| *st == StageStatus::Ran).map(|(n, _)| n.as_str()).collect();
        assert_eq!(ran, ["tokenize", "train", "evaluate"]);
        assert_eq!(fourth.eval.unwrap(), eval);
    }

    #[test]
    fn stage_failure_is_scoped() {
        let dir = tempfile::tempdir().unwrap();
        let text = tiny_config(dir.path()).replace("codebook_size = 16", "codebook_size = 2");
        let cfg = ExperimentConfig::from_toml_str(&text, dir.path()).unwrap();
        let err = run_pipeline(&cfg, Stage::Tokenize, &mut std::io::sink()).unwrap_err();
        assert!(matches!(&err, Error::Stage { stage, .. } if stage == "tokenize"), "{err}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_toml_str(&tiny_config(dir.path()), dir.path()).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap(), dir.path()).unwrap();
        assert_eq!(cfg, again);
    }
}
