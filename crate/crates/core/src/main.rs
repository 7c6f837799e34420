use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hiergen::data::{sessionize, SplitDataset};
use hiergen::eval::{ablation_grid, run_ablation, Architecture, EvalTask, MetricRow, Perturbation, TaskKind};
use hiergen::model::{checkpoint, Layout};
use hiergen::pipeline::{
    emit_report, load_dataset, load_tokenizer, run_pipeline, ExperimentConfig, PipelineOutput, ReportFormat, ReportRow, ReportTable, Stage,
    TokenizerKind,
};
use hiergen::ranking::{auroc, score_candidates, BinaryScore};
use hiergen::synth::{generate_synthetic, SyntheticSpec};
use hiergen::tokenizer::IdKind;
use hiergen::train::LossMask;
use hiergen::{model::tokenize_history, Error, Result};

/// Multi-behavior generative recommendation: data preparation, training,
/// evaluation and ranking.
#[derive(Parser)]
#[command(name = "hiergen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArg {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with planted structure.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// TOML file with synthetic spec fields; flags override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Read and validate interactions.
    Ingest(ConfigArg),
    /// Cut histories into sessions and print per-user session counts.
    Sessionize(ConfigArg),
    /// Leave-one-session-out split.
    Split(ConfigArg),
    /// Assign item code tuples.
    Tokenize {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long)]
        codebook_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the augmented training set (TSV with a fold column).
    Augment {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        x: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Evaluate a trained model against held-out sessions.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        #[arg(long)]
        behavior: Option<String>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        topn: Option<usize>,
        /// Comma-separated cutoffs.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// Drop this share of lowest-level history interactions.
        #[arg(long)]
        perturb_r: Option<f64>,
        /// Also drop history interactions on target items.
        #[arg(long)]
        drop_targets: bool,
        #[arg(long, default_value_t = 0)]
        perturb_seed: u64,
    },
    /// Score candidates with a ranking-layout checkpoint.
    Rank {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// TSV `user\titem[\tbehavior]`; a behavior column enables AUROC.
        #[arg(long)]
        candidates: PathBuf,
        /// Behavior whose probability is emitted; defaults to the target.
        #[arg(long)]
        behavior: Option<String>,
        /// Write scores here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the pipeline over a grid of augmentation, architecture and ID
    /// choices.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_delimiter = ',', default_value = "0,4")]
        x: Vec<usize>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "plain,behavior-layer")]
        arch: Vec<ArchArg>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "sid")]
        ids: Vec<IdsArg>,
    },
    /// Render metric records as a table.
    Report {
        /// `metrics.jsonl` from an evaluate run.
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, value_enum, default_value = "tsv")]
        format: FormatArg,
    },
}

#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, value_enum)]
    loss_mask: Option<LossMaskArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    SidTrain,
    SidImport,
    Cid,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Target,
    Specific,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Plain,
    BehaviorLayer,
}

#[derive(Clone, Copy, ValueEnum)]
enum IdsArg {
    Sid,
    Cid,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Tsv,
    Markdown,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossMaskArg {
    All,
    SidOnly,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn pipeline(cfg: &ExperimentConfig, until: Stage) -> Result<PipelineOutput> {
    let mut err = std::io::stderr();
    let out = run_pipeline(cfg, until, &mut err)?;
    println!("outputs: {}", out.output_dir.display());
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, spec, users, seed } => {
            let mut s = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                    toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
                }
                None => SyntheticSpec::default(),
            };
            s.users = users.unwrap_or(s.users);
            s.seed = seed.unwrap_or(s.seed);
            let corpus = generate_synthetic(&s)?;
            corpus.write(&out)?;
            println!("wrote {} interactions for {} users to {}", corpus.dataset.interaction_count(), s.users, out.display());
        }
        Command::Ingest(c) => {
            let out = pipeline(&ExperimentConfig::load(&c.config)?, Stage::Ingest)?;
            print!("{}", std::fs::read_to_string(out.output_dir.join("ingest_report.json"))?);
        }
        Command::Sessionize(c) => {
            let out = pipeline(&ExperimentConfig::load(&c.config)?, Stage::Ingest)?;
            let dataset = load_dataset(&out.output_dir.join("dataset.json"))?;
            let rule = dataset.schema.session_rule();
            let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
            for h in &dataset.histories {
                *hist.entry(sessionize(h, rule)?.len()).or_default() += 1;
            }
            println!("sessions\tusers");
            for (s, n) in hist {
                println!("{s}\t{n}");
            }
        }
        Command::Split(c) => {
            let out = pipeline(&ExperimentConfig::load(&c.config)?, Stage::Split)?;
            let split: SplitDataset = serde_json::from_reader(BufReader::new(std::fs::File::open(out.output_dir.join("split.json"))?))?;
            println!("users {} excluded {}", split.users.len(), split.excluded.len());
        }
        Command::Tokenize { config, kind, levels, codebook_size, seed } => {
            let mut cfg = ExperimentConfig::load(&config.config)?;
            if let Some(k) = kind {
                cfg.tokenizer.kind = match k {
                    KindArg::SidTrain => TokenizerKind::SidTrain,
                    KindArg::SidImport => TokenizerKind::SidImport,
                    KindArg::Cid => TokenizerKind::Cid,
                };
            }
            cfg.tokenizer.levels = levels.unwrap_or(cfg.tokenizer.levels);
            cfg.tokenizer.codebook_size = codebook_size.unwrap_or(cfg.tokenizer.codebook_size);
            cfg.tokenizer.seed = seed.unwrap_or(cfg.tokenizer.seed);
            let out = pipeline(&cfg, Stage::Tokenize)?;
            let tok = load_tokenizer(&out.output_dir.join("tokenizer.json"))?;
            println!("items {} code length {} codebook {}", tok.num_items(), tok.code_len(), tok.codebook_size());
        }
        Command::Augment { config, x, seed } => {
            let mut cfg = ExperimentConfig::load(&config.config)?;
            cfg.augmentation.x = x.unwrap_or(cfg.augmentation.x);
            cfg.augmentation.seed = seed.unwrap_or(cfg.augmentation.seed);
            let out = pipeline(&cfg, Stage::Augment)?;
            println!("trainset: {}", out.output_dir.join("trainset.tsv").display());
        }
        Command::Train { config, flags } => {
            let mut cfg = ExperimentConfig::load(&config.config)?;
            apply_train_flags(&mut cfg, &flags);
            cfg.validate()?;
            let out = pipeline(&cfg, Stage::Train)?;
            print!("{}", std::fs::read_to_string(out.output_dir.join("train_log.jsonl"))?);
        }
        Command::Evaluate { config, task, behavior, beam, topn, ks, perturb_r, drop_targets, perturb_seed } => {
            let mut cfg = ExperimentConfig::load(&config.config)?;
            if task.is_some() || behavior.is_some() || beam.is_some() || topn.is_some() || ks.is_some() {
                let base = cfg.eval.first().cloned().unwrap_or_default();
                cfg.eval = vec![EvalTask {
                    kind: match task {
                        Some(TaskArg::Target) => TaskKind::Target,
                        Some(TaskArg::Specific) => TaskKind::Specific,
                        None => base.kind,
                    },
                    behavior: behavior.or(base.behavior),
                    ks: ks.unwrap_or(base.ks),
                    beam: beam.unwrap_or(base.beam),
                    top_n: topn.unwrap_or(base.top_n),
                }];
            }
            if let Some(r) = perturb_r {
                cfg.perturbation = Some(Perturbation { r, drop_targets, seed: perturb_seed });
            } else if drop_targets {
                return Err(Error::Config("--drop-targets needs --perturb-r".into()));
            }
            cfg.validate()?;
            let out = pipeline(&cfg, Stage::Evaluate)?;
            let report = out.output_dir.join(if out.eval.as_ref().is_some_and(|e| !e.auroc.is_empty()) { "auroc.tsv" } else { "report.tsv" });
            print!("{}", std::fs::read_to_string(report)?);
        }
        Command::Rank { config, checkpoint: ckpt, candidates, behavior, out } => {
            rank(&ExperimentConfig::load(&config.config)?, &ckpt, &candidates, behavior.as_deref(), out.as_deref())?;
        }
        Command::Ablate { config, x, arch, ids } => ablate(&ExperimentConfig::load(&config.config)?, &x, &arch, &ids)?,
        Command::Report { metrics, format } => {
            let f = std::fs::File::open(&metrics).map_err(|e| Error::Config(format!("cannot open {}: {e}", metrics.display())))?;
            let mut table = ReportTable { key_names: vec!["recommender".into()], rows: Vec::new() };
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                #[derive(serde::Deserialize)]
                struct Rec {
                    recommender: String,
                    row: MetricRow,
                }
                let r: Rec = serde_json::from_str(&line)
                    .map_err(|e| Error::Parse { path: metrics.clone(), line: i + 1, msg: e.to_string() })?;
                table.rows.push(ReportRow { keys: vec![r.recommender], metrics: Some(r.row), note: String::new() });
            }
            if table.rows.is_empty() {
                return Err(Error::Data(format!("{} holds no metric records", metrics.display())));
            }
            let format = match format {
                FormatArg::Tsv => ReportFormat::Tsv,
                FormatArg::Markdown => ReportFormat::Markdown,
            };
            print!("{}", emit_report(&table, format));
        }
    }
    Ok(())
}

fn apply_train_flags(cfg: &mut ExperimentConfig, f: &TrainFlags) {
    let t = &mut cfg.train;
    t.batch_size = f.batch_size.unwrap_or(t.batch_size);
    t.base_lr = f.base_lr.unwrap_or(t.base_lr);
    t.min_lr = f.min_lr.unwrap_or(t.min_lr);
    t.epochs = f.epochs.unwrap_or(t.epochs);
    t.warmup_fraction = f.warmup_fraction.unwrap_or(t.warmup_fraction);
    t.weight_decay = f.weight_decay.unwrap_or(t.weight_decay);
    t.seed = f.seed.unwrap_or(t.seed);
    t.clip_norm = f.clip_norm.unwrap_or(t.clip_norm);
    t.patience = f.patience.unwrap_or(t.patience);
    if let Some(m) = f.loss_mask {
        t.loss_mask = match m {
            LossMaskArg::All => LossMask::All,
            LossMaskArg::SidOnly => LossMask::SidOnly,
        };
    }
}

fn rank(cfg: &ExperimentConfig, ckpt: &Path, candidates: &Path, behavior: Option<&str>, out: Option<&Path>) -> Result<()> {
    for p in [ckpt, candidates] {
        if !p.is_file() {
            return Err(Error::Config(format!("{} does not exist", p.display())));
        }
    }
    let run = run_pipeline(cfg, Stage::Tokenize, &mut std::io::stderr())?;
    let ingest = run.entry(Stage::Ingest).expect("ingest ran");
    let tokenize = run.entry(Stage::Tokenize).expect("tokenize ran");
    let dataset = load_dataset(&ingest.dir.join("dataset.json"))?;
    let tok = load_tokenizer(&tokenize.dir.join("tokenizer.json"))?;
    let model = checkpoint::load(ckpt)?;
    let mcfg = model.config().clone();
    if mcfg.layout != Layout::Ranking {
        return Err(Error::Config(format!("{} is not a ranking checkpoint", ckpt.display())));
    }
    if mcfg.sid_len != tok.code_len() || mcfg.codebook_size != tok.codebook_size() || mcfg.num_behaviors != dataset.schema.len() {
        return Err(Error::Config("checkpoint shape does not match the configured tokenizer and schema".into()));
    }
    let schema = &dataset.schema;
    let scored = match behavior {
        Some(name) => schema.id(name)?,
        None => schema.target(),
    };

    let text = std::fs::read_to_string(candidates)?;
    let parse_err = |line: usize, msg: String| Error::Parse { path: candidates.to_path_buf(), line, msg };
    let mut lines = text.lines().enumerate();
    let header: Vec<&str> = lines.next().map(|(_, h)| h.split('\t').collect()).unwrap_or_default();
    let labelled = match header.as_slice() {
        ["user", "item"] => false,
        ["user", "item", "behavior"] => true,
        _ => return Err(parse_err(1, "expected header user\\titem[\\tbehavior]".into())),
    };
    // Candidates grouped by user so each history prefix runs once.
    let mut by_user: BTreeMap<u32, Vec<(usize, String, u32, Option<u16>)>> = BTreeMap::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != header.len() {
            return Err(parse_err(i + 1, format!("expected {} fields", header.len())));
        }
        let user = dataset.users.get(f[0]).ok_or_else(|| parse_err(i + 1, format!("unknown user {:?}", f[0])))?;
        let item = dataset.items.get(f[1]).ok_or_else(|| parse_err(i + 1, format!("unknown item {:?}", f[1])))?;
        let label = if labelled { Some(schema.id(f[2]).map_err(|e| parse_err(i + 1, e.to_string()))?) } else { None };
        by_user.entry(user).or_default().push((i, f[0].to_string(), item, label));
    }

    let mut rows: Vec<(usize, String, String, f64, Option<u16>, Vec<f64>)> = Vec::new();
    for (user, cands) in &by_user {
        let sessions = sessionize(&dataset.histories[*user as usize], schema.session_rule())?;
        let history = tokenize_history(&sessions, schema, &tok, &mcfg, mcfg.max_tokens - mcfg.run_len())?;
        let codes: Vec<&[u32]> = cands
            .iter()
            .map(|c| tok.codes(c.2).ok_or_else(|| Error::Data(format!("item {} has no code tuple", dataset.items.name(c.2)))))
            .collect::<Result<_>>()?;
        let per_behavior: Vec<Vec<f64>> = (0..schema.len() as u16)
            .map(|b| score_candidates(&model, &history, &codes, schema, b))
            .collect::<Result<_>>()?;
        for (k, c) in cands.iter().enumerate() {
            let probs: Vec<f64> = per_behavior.iter().map(|p| p[k]).collect();
            rows.push((c.0, c.1.clone(), dataset.items.name(c.2).to_string(), probs[scored as usize], c.3, probs));
        }
    }
    rows.sort_by_key(|r| r.0);
    let mut w: Box<dyn Write> = match out {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(w, "user\titem\tscore")?;
    for r in &rows {
        writeln!(w, "{}\t{}\t{:.9}", r.1, r.2, r.3)?;
    }
    w.flush()?;
    if labelled {
        eprintln!("behavior\texamples\tpositives\tauroc");
        for b in 0..schema.len() as u16 {
            let scores: Vec<BinaryScore> = rows.iter().map(|r| BinaryScore { score: r.5[b as usize], label: r.4 == Some(b) }).collect();
            let pos = scores.iter().filter(|s| s.label).count();
            let v = if pos == 0 || pos == scores.len() { "NA".to_string() } else { format!("{:.6}", auroc(&scores)?) };
            eprintln!("{}\t{}\t{}\t{}", schema.name(b), scores.len(), pos, v);
        }
    }
    Ok(())
}

fn ablate(cfg: &ExperimentConfig, xs: &[usize], arch: &[ArchArg], ids: &[IdsArg]) -> Result<()> {
    let archs: Vec<Architecture> = arch
        .iter()
        .map(|a| match a {
            ArchArg::Plain => Architecture::Plain,
            ArchArg::BehaviorLayer => Architecture::BehaviorLayer,
        })
        .collect();
    let kinds: Vec<IdKind> = ids
        .iter()
        .map(|i| match i {
            IdsArg::Sid => IdKind::Sid,
            IdsArg::Cid => IdKind::Cid,
        })
        .collect();
    let cells = ablation_grid(xs, &archs, &kinds);
    let root = cfg.paths.output_dir.join("ablation");
    let rows = run_ablation(&cells, |cell| {
        let mut c = cfg.clone();
        c.augmentation.x = cell.x;
        c.model.behavior_layer = cell.architecture == Architecture::BehaviorLayer;
        c.tokenizer.kind = match (cell.ids, cfg.tokenizer.kind) {
            (IdKind::Cid, _) => TokenizerKind::Cid,
            (IdKind::Sid, TokenizerKind::Cid) => TokenizerKind::SidTrain,
            (IdKind::Sid, k) => k,
        };
        let arch = if c.model.behavior_layer { "behavior-layer" } else { "plain" };
        let ids = if cell.ids == IdKind::Cid { "cid" } else { "sid" };
        c.paths.output_dir = root.join(format!("x{}-{arch}-{ids}", cell.x));
        c.validate()?;
        let out = run_pipeline(&c, Stage::Evaluate, &mut std::io::stderr())?;
        let eval = out.eval.unwrap_or_default();
        Ok(eval.rows.into_iter().filter(|(n, _)| n == "model").map(|(_, r)| r).collect())
    });
    let table = ReportTable::from_ablation(&rows);
    std::fs::create_dir_all(&root)?;
    let tsv = emit_report(&table, ReportFormat::Tsv);
    std::fs::write(root.join("ablation.tsv"), &tsv)?;
    std::fs::write(root.join("ablation.md"), emit_report(&table, ReportFormat::Markdown))?;
    print!("{tsv}");
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed; see the note column", rows.len());
    }
    Ok(())
}
