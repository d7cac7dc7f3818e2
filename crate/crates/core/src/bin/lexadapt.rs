use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use lexadapt::augment::{run_job, AugmentJob, GenerationSettings, LawText, TemplateRegistry};
use lexadapt::clients::Clients;
use lexadapt::corpus::{self, AnchorSet, BuildOptions, DEFAULT_MIN_YEAR};
use lexadapt::elements::ElementCatalog;
use lexadapt::fixture::write_fixture;
use lexadapt::grpo::{train_grpo, GrpoConfig};
use lexadapt::metrics::{aggregate_by_group, embed_score, extraction_counts, rouge, SlotMap};
use lexadapt::pipeline::{emit_report, run_pipeline, PipelineConfig, PipelineError, RunManifest};
use lexadapt::policy::{encode_text_pairs, train_sft, vocab_from_texts, SftConfig, TextPair, ToyPolicy};
use lexadapt::retrieve::{
    build_context, chunk_text, compare_augmentation, match_elements_top_k, LabeledDocument, DEFAULT_MAX_CHUNK_TOKENS,
};
use lexadapt::rewards::{combined_reward, format_reward, process_reward, AmountTask, FormatSpec, RewardConfig};

#[derive(Parser)]
#[command(name = "lexadapt", version, about = "Legal-domain adaptation toolkit")]
struct Cli {
    /// Pipeline configuration (TOML); its client and embed sections apply
    /// to every command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the offline generator and embedder.
    #[arg(long, global = true)]
    stub: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the structured corpus.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Generate QA pairs from statute text.
    #[command(subcommand)]
    Augment(AugmentCmd),
    /// Train the toy policy.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Retrieval-based instruction refinement.
    #[command(subcommand)]
    Retrieve(RetrieveCmd),
    /// Score outputs.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Run or report the whole pipeline.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Subcommand)]
enum CorpusCmd {
    Build {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_YEAR)]
        min_year: u32,
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum AugmentCmd {
    Run {
        /// Also generate pairs from each element's augmented description.
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// JSONL of {article, text}.
        #[arg(long)]
        laws: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        num_qa: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    Sft(SftArgs),
    Grpo(GrpoArgs),
}

#[derive(Args)]
struct SftArgs {
    /// JSONL of {input, output}.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    accum: usize,
    /// Pairs per micro-batch; 0 uses the whole dataset.
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Continue from a checkpoint instead of a uniform policy.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 24)]
    max_input_tokens: usize,
    #[arg(long, default_value_t = 40)]
    max_target_tokens: usize,
    #[arg(long)]
    out: PathBuf,
    /// Training curve CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RewardArg {
    Format,
    Process,
    Combined,
}

#[derive(Args)]
struct GrpoArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// JSONL of {input, output}; the inputs are the training prompts.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "combined")]
    reward: RewardArg,
    #[arg(long)]
    format_spec: Option<PathBuf>,
    #[arg(long = "G", default_value_t = 8)]
    group_size: usize,
    #[arg(long, default_value_t = 0.2)]
    eps: f64,
    #[arg(long, default_value_t = 0.01)]
    beta: f64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    updates: usize,
    #[arg(long, default_value_t = 24)]
    max_len: usize,
    #[arg(long, default_value_t = 24)]
    max_input_tokens: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum RetrieveCmd {
    Match {
        #[arg(long)]
        doc: PathBuf,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        augmented: bool,
        #[arg(long, default_value_t = 1)]
        topk: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_CHUNK_TOKENS)]
        max_chunk_tokens: usize,
    },
    Eval {
        /// JSONL of {id, text, true_elements}.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_CHUNK_TOKENS)]
        max_chunk_tokens: usize,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Per-group extraction scores from gold and predicted JSONL files of
    /// {id, group, values}.
    Extraction {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Writes `<out>.csv` and `<out>.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// ROUGE and embedding scores for a JSONL of {candidate, reference}.
    Text {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PipelineCmd {
    Run,
    Report {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for report.txt, report.csv and report.json; prints the
        /// summary when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic corpus with a matching configuration.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        docs: usize,
    },
}

#[derive(Deserialize)]
struct ExtractionLine {
    id: String,
    #[serde(default)]
    group: String,
    values: SlotMap,
}

#[derive(Deserialize)]
struct TextLine {
    candidate: String,
    reference: String,
}

#[derive(Serialize)]
struct MatchOutput<'a> {
    matches: &'a [lexadapt::retrieve::ChunkMatch],
    matched_elements: &'a [String],
    instruction: String,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = String::new();
    for item in items {
        buf.push_str(&serde_json::to_string(item)?);
        buf.push('\n');
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

fn load_catalog(path: Option<&Path>) -> Result<ElementCatalog> {
    match path {
        Some(p) => Ok(ElementCatalog::load(p)?),
        None => Ok(ElementCatalog::starter()),
    }
}

fn log_path(out: &Path, log: Option<PathBuf>) -> PathBuf {
    log.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.csv");
        PathBuf::from(s)
    })
}

struct Env {
    config: PipelineConfig,
    clients: Clients,
}

fn environment(cli: &Cli) -> Result<Env> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.stub {
        config.client.stub = true;
    }
    let clients = Clients::from_env(&config.client_config(), config.client.stub);
    Ok(Env { config, clients })
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let env = environment(&cli)?;
    let seed = env.config.seed;
    match cli.command {
        Command::Corpus(CorpusCmd::Build {
            input,
            meta,
            out,
            min_year,
            anchors,
            catalog,
        }) => {
            let catalog = load_catalog(catalog.as_deref())?;
            let anchors = match anchors {
                Some(p) => AnchorSet::load(&p)?,
                None => AnchorSet::default(),
            };
            let metas = corpus::read_metadata(&meta)?;
            let (built, stats) = corpus::build_corpus(&input, &metas, &catalog, &BuildOptions { min_year, anchors })?;
            corpus::write_records(&out, built.iter().map(|b| &b.record))?;
            eprintln!("{}", serde_json::to_string(&stats)?);
        }
        Command::Augment(AugmentCmd::Run {
            catalog,
            laws,
            num_qa,
            out,
        }) => {
            let mut sources: Vec<LawText> = match laws {
                Some(p) => read_jsonl(&p)?,
                None => Vec::new(),
            };
            if let Some(p) = catalog {
                for e in load_catalog(Some(&p))?.elements() {
                    if let Some(text) = &e.augmented_description {
                        sources.push(LawText {
                            article: e.name.clone(),
                            text: text.clone(),
                        });
                    }
                }
            }
            if sources.is_empty() {
                bail!("nothing to augment: pass --laws and/or --catalog");
            }
            let registry = TemplateRegistry::default();
            let mut pairs = Vec::new();
            for (i, src) in sources.iter().enumerate() {
                let settings = GenerationSettings {
                    seed: Some(lexadapt::seeds::derive_seed(seed, &[i as u64])),
                    ..Default::default()
                };
                let job = AugmentJob::new(src.text.clone(), num_qa);
                let parsed = run_job(&job, Some(&src.article), &registry, env.clients.generator.as_ref(), &settings)
                    .with_context(|| format!("augmenting {}", src.article))?;
                for d in &parsed.diagnostics {
                    eprintln!("{}: {}", src.article, serde_json::to_string(d)?);
                }
                pairs.extend(parsed.pairs);
            }
            write_jsonl(&out, &pairs)?;
            eprintln!("{} pairs written", pairs.len());
        }
        Command::Train(TrainCmd::Sft(a)) => {
            let pairs: Vec<TextPair> = read_jsonl(&a.data)?;
            let mut policy = match &a.init {
                Some(p) => ToyPolicy::load(p)?,
                None => {
                    let texts = pairs.iter().flat_map(|p| [p.input.as_str(), p.output.as_str()]);
                    ToyPolicy::uniform(Arc::new(vocab_from_texts(texts)?))
                }
            };
            let data = encode_text_pairs(policy.vocab(), &pairs, a.max_input_tokens, a.max_target_tokens)?;
            let cfg = SftConfig {
                steps: a.steps,
                lr: a.lr,
                grad_accum: a.accum,
                batch_size: a.batch,
                seed,
            };
            let log = train_sft(&mut policy, &data, &cfg)?;
            policy.save(&a.out)?;
            fs::write(log_path(&a.out, a.log), log.to_csv())?;
            if let Some(last) = log.rows.last() {
                eprintln!("final loss {:.4} nats/token", last.loss);
            }
        }
        Command::Train(TrainCmd::Grpo(a)) => {
            let init = ToyPolicy::load(&a.ckpt)?;
            let pairs: Vec<TextPair> = read_jsonl(&a.data)?;
            let queries: Vec<_> = encode_text_pairs(init.vocab(), &pairs, a.max_input_tokens, 1)?
                .into_iter()
                .map(|(x, _)| x)
                .collect();
            let spec = match &a.format_spec {
                Some(p) => FormatSpec::load(p)?,
                None => FormatSpec::supervision_decision(),
            };
            let task = AmountTask::default();
            let reward_cfg = RewardConfig::default();
            let vocab = init.vocab().clone();
            let reward = |q: &[usize], o: &[usize]| {
                let text = vocab.decode(o);
                let source = queries
                    .iter()
                    .position(|x| x.as_slice() == q)
                    .map_or("", |i| pairs[i].input.as_str());
                match a.reward {
                    RewardArg::Format => format_reward(&text, &spec),
                    RewardArg::Process => process_reward(&text, &task).total(),
                    RewardArg::Combined => combined_reward(&text, source, &spec, &task, &reward_cfg).total(),
                }
            };
            let cfg = GrpoConfig {
                group_size: a.group_size,
                eps: a.eps,
                beta: a.beta,
                lr: a.lr,
                updates: a.updates,
                seed,
                max_len: a.max_len,
                inner_steps: 1,
            };
            let (policy, log) = train_grpo(&init, &queries, &reward, &cfg)?;
            policy.save(&a.out)?;
            fs::write(log_path(&a.out, a.log), log.to_csv())?;
            if let Some(last) = log.rows.last() {
                eprintln!("final mean reward {:.4}, kl {:.4}", last.mean_reward, last.kl);
            }
        }
        Command::Retrieve(RetrieveCmd::Match {
            doc,
            catalog,
            augmented,
            topk,
            max_chunk_tokens,
        }) => {
            let catalog = load_catalog(catalog.as_deref())?;
            let text = fs::read_to_string(&doc)?;
            let chunks = chunk_text(&text, max_chunk_tokens)?;
            let matches = match_elements_top_k(&chunks, &catalog, env.clients.embedder.as_ref(), augmented, topk)?;
            let ctx = build_context(&text, &matches);
            let out = MatchOutput {
                matches: &matches,
                matched_elements: &ctx.matched_elements,
                instruction: ctx.render_instruction(&catalog),
            };
            serde_json::to_writer_pretty(io::stdout().lock(), &out)?;
            println!();
        }
        Command::Retrieve(RetrieveCmd::Eval {
            data,
            catalog,
            out,
            max_chunk_tokens,
        }) => {
            let catalog = load_catalog(catalog.as_deref())?;
            let docs: Vec<LabeledDocument> = read_jsonl(&data)?;
            let report = compare_augmentation(&docs, &catalog, env.clients.embedder.as_ref(), max_chunk_tokens)?;
            report.write_csv(fs::File::create(&out)?)?;
            eprintln!(
                "mean overlap accuracy: original {:.4}, augmented {:.4}",
                report.mean_original, report.mean_augmented
            );
        }
        Command::Eval(EvalCmd::Extraction { gold, pred, out }) => {
            let gold: Vec<ExtractionLine> = read_jsonl(&gold)?;
            let pred: IndexMap<String, SlotMap> = read_jsonl::<ExtractionLine>(&pred)?
                .into_iter()
                .map(|l| (l.id, l.values))
                .collect();
            let empty = SlotMap::new();
            let counts: Vec<_> = gold
                .iter()
                .map(|g| extraction_counts(&g.values, pred.get(&g.id).unwrap_or(&empty)))
                .collect();
            let labels: Vec<&str> = gold.iter().map(|g| g.group.as_str()).collect();
            let report = aggregate_by_group(&counts, &labels)?;
            fs::write(out.with_extension("csv"), report.to_csv()?)?;
            fs::write(out.with_extension("json"), report.to_json()?)?;
            print!("{}", report.to_csv()?);
        }
        Command::Eval(EvalCmd::Text { data, out }) => {
            let lines: Vec<TextLine> = read_jsonl(&data)?;
            let mut csv = String::from("index,rouge1_f1,rouge2_f1,rougeL_f1,embed_f1\n");
            for (i, l) in lines.iter().enumerate() {
                let r = rouge(&l.candidate, &l.reference)?;
                let e = embed_score(&l.candidate, &l.reference, env.clients.embedder.as_ref())?;
                csv.push_str(&format!(
                    "{i},{:.4},{:.4},{:.4},{:.4}\n",
                    r.rouge1.f1, r.rouge2.f1, r.rouge_l.f1, e.f1
                ));
            }
            match out {
                Some(p) => fs::write(p, csv)?,
                None => io::stdout().write_all(csv.as_bytes())?,
            }
        }
        Command::Pipeline(PipelineCmd::Run) => {
            if cli.config.is_none() {
                bail!("pipeline run needs --config FILE");
            }
            match run_pipeline(&env.config, &env.clients) {
                Ok(manifest) => print!("{}", emit_report(&manifest).summary),
                Err(PipelineError::StageFailed { stage, cause, manifest }) => {
                    eprint!("{}", emit_report(&manifest).summary);
                    bail!("stage {stage} failed: {cause}");
                }
                Err(e) => return Err(e.into()),
            }
        }
        Command::Pipeline(PipelineCmd::Report { manifest, out }) => {
            let report = emit_report(&RunManifest::load(&manifest)?);
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir)?;
                    fs::write(dir.join("report.txt"), &report.summary)?;
                    fs::write(dir.join("report.csv"), &report.csv)?;
                    fs::write(dir.join("report.json"), &report.json)?;
                }
                None => print!("{}", report.summary),
            }
        }
        Command::Pipeline(PipelineCmd::Fixture { out, docs }) => {
            let paths = write_fixture(&out, docs, seed)?;
            println!("{}", paths.config.display());
        }
    }
    Ok(())
}
