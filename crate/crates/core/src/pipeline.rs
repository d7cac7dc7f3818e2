//! End-to-end run: corpus → augment → sft → grpo → retrieve → evaluate.
//!
//! Every stage writes its artifacts into `out_dir` and later stages read
//! them back from there, so a stage can be disabled and its upstream output
//! reused. All randomness comes from the global seed via per-stage derived
//! seeds; artifacts are recorded with SHA-256 digests in the run manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{run_job, AugmentJob, GenerationSettings, LawText, QaPair, TemplateRegistry};
use crate::clients::{ClientConfig, Clients, DEFAULT_EMBED_DIM, DEFAULT_TIMEOUT_MS};
use crate::corpus::{self, AnchorSet, BuildOptions, DocRecord, DEFAULT_MIN_YEAR};
use crate::elements::{extract_rule_based, parse_value, ElementCatalog};
use crate::grpo::{train_grpo, GrpoConfig};
use crate::metrics::{aggregate_by_group, embed_score, extraction_counts, rouge, ExtractionReport, SlotMap};
use crate::policy::{encode_text_pairs, train_sft, vocab_from_texts, SftConfig, TextPair, ToyPolicy};
use crate::retrieve::{build_context, chunk_text, compare_augmentation, match_elements, LabeledDocument};
use crate::rewards::{combined_reward, format_reward, process_reward, AmountTask, FormatSpec, RewardConfig};
use crate::seeds::{derive_seed, stage_seed};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Corpus,
    Augment,
    Sft,
    Grpo,
    Retrieve,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Corpus,
        Stage::Augment,
        Stage::Sft,
        Stage::Grpo,
        Stage::Retrieve,
        Stage::Evaluate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Augment => "augment",
            Stage::Sft => "sft",
            Stage::Grpo => "grpo",
            Stage::Retrieve => "retrieve",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub corpus: bool,
    pub augment: bool,
    pub sft: bool,
    pub grpo: bool,
    pub retrieve: bool,
    pub evaluate: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            corpus: true,
            augment: true,
            sft: true,
            grpo: true,
            retrieve: true,
            evaluate: true,
        }
    }
}

impl StageToggles {
    pub fn enabled(&self, stage: Stage) -> bool {
        match stage {
            Stage::Corpus => self.corpus,
            Stage::Augment => self.augment,
            Stage::Sft => self.sft,
            Stage::Grpo => self.grpo,
            Stage::Retrieve => self.retrieve,
            Stage::Evaluate => self.evaluate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientSection {
    pub timeout_ms: u64,
    /// Use the offline clients even when endpoints are configured.
    pub stub: bool,
}

impl Default for ClientSection {
    fn default() -> Self {
        Self {
            timeout_ms: DEFAULT_TIMEOUT_MS,
            stub: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedSection {
    pub dim: usize,
}

impl Default for EmbedSection {
    fn default() -> Self {
        Self { dim: DEFAULT_EMBED_DIM }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub input_dir: PathBuf,
    pub metadata: PathBuf,
    pub min_year: u32,
    pub anchors: Option<PathBuf>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            input_dir: PathBuf::from("docs"),
            metadata: PathBuf::from("metadata.jsonl"),
            min_year: DEFAULT_MIN_YEAR,
            anchors: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSection {
    pub laws: PathBuf,
    pub num_qa: u32,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            laws: PathBuf::from("laws.jsonl"),
            num_qa: 3,
            max_tokens: 1024,
            temperature: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftSection {
    pub steps: usize,
    pub lr: f64,
    pub grad_accum: usize,
    pub batch_size: usize,
    pub max_input_tokens: usize,
    pub max_target_tokens: usize,
}

impl Default for SftSection {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.5,
            grad_accum: 4,
            batch_size: 2,
            max_input_tokens: 24,
            max_target_tokens: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Format,
    Process,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoSection {
    pub group_size: usize,
    pub eps: f64,
    pub beta: f64,
    pub lr: f64,
    pub updates: usize,
    pub max_len: usize,
    /// Number of training prompts taken from the SFT data.
    pub queries: usize,
    pub reward: RewardKind,
    /// Template for the format reward; the supervision-decision template
    /// when unset.
    pub format_spec: Option<PathBuf>,
}

impl Default for GrpoSection {
    fn default() -> Self {
        Self {
            group_size: 8,
            eps: 0.2,
            beta: 0.01,
            lr: 0.1,
            updates: 20,
            max_len: 24,
            queries: 4,
            reward: RewardKind::Combined,
            format_spec: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieveSection {
    pub max_chunk_tokens: usize,
    /// Match against augmented descriptions when building contexts.
    pub use_augmented: bool,
}

impl Default for RetrieveSection {
    fn default() -> Self {
        Self {
            max_chunk_tokens: 64,
            use_augmented: false,
        }
    }
}

/// One file defines a run. Relative paths are resolved against the
/// directory of the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Element catalog JSONL; the starter catalog when unset.
    pub catalog: Option<PathBuf>,
    pub stages: StageToggles,
    pub client: ClientSection,
    pub embed: EmbedSection,
    pub corpus: CorpusSection,
    pub augment: AugmentSection,
    pub sft: SftSection,
    pub grpo: GrpoSection,
    pub retrieve: RetrieveSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            catalog: None,
            stages: StageToggles::default(),
            client: ClientSection::default(),
            embed: EmbedSection::default(),
            corpus: CorpusSection::default(),
            augment: AugmentSection::default(),
            sft: SftSection::default(),
            grpo: GrpoSection::default(),
            retrieve: RetrieveSection::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("stage {stage} failed: {cause}")]
    StageFailed {
        stage: Stage,
        cause: String,
        manifest: Box<RunManifest>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::ConfigInvalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Makes every relative path relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.corpus.input_dir);
        fix(&mut self.corpus.metadata);
        fix(&mut self.augment.laws);
        for p in [&mut self.catalog, &mut self.corpus.anchors, &mut self.grpo.format_spec]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn client_config(&self) -> ClientConfig {
        ClientConfig {
            timeout_ms: self.client.timeout_ms,
            embed_dim: self.embed.dim,
        }
    }

    fn grpo_config(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.grpo.group_size,
            eps: self.grpo.eps,
            beta: self.grpo.beta,
            lr: self.grpo.lr,
            updates: self.grpo.updates,
            seed: stage_seed(self.seed, Stage::Grpo.as_str()),
            max_len: self.grpo.max_len,
            inner_steps: 1,
        }
    }

    /// Checks parameters and that the inputs of enabled stages exist.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let invalid = |m: String| Err(PipelineError::ConfigInvalid(m));
        let must_exist = |p: &Path, what: &str| -> Result<(), PipelineError> {
            if p.exists() {
                Ok(())
            } else {
                Err(PipelineError::ConfigInvalid(format!("{what} not found: {}", p.display())))
            }
        };
        if let Some(c) = &self.catalog {
            must_exist(c, "catalog")?;
        }
        if self.stages.corpus {
            must_exist(&self.corpus.input_dir, "corpus.input_dir")?;
            must_exist(&self.corpus.metadata, "corpus.metadata")?;
            if let Some(a) = &self.corpus.anchors {
                must_exist(a, "corpus.anchors")?;
            }
        }
        if self.stages.augment {
            must_exist(&self.augment.laws, "augment.laws")?;
            if self.augment.num_qa == 0 {
                return invalid("augment.num_qa must be at least 1".into());
            }
        }
        if self.stages.sft {
            let s = &self.sft;
            if s.steps == 0 || s.grad_accum == 0 || s.max_input_tokens == 0 || s.max_target_tokens == 0 {
                return invalid("sft.steps, grad_accum and token limits must be at least 1".into());
            }
            if !(s.lr.is_finite() && s.lr >= 0.0) {
                return invalid("sft.lr must be finite and non-negative".into());
            }
        }
        if self.stages.grpo {
            if let Some(f) = &self.grpo.format_spec {
                must_exist(f, "grpo.format_spec")?;
            }
            if self.grpo.queries == 0 {
                return invalid("grpo.queries must be at least 1".into());
            }
            self.grpo_config()
                .validate()
                .map_err(|e| PipelineError::ConfigInvalid(format!("grpo: {e}")))?;
        }
        if self.stages.retrieve && self.retrieve.max_chunk_tokens == 0 {
            return invalid("retrieve.max_chunk_tokens must be at least 1".into());
        }
        if self.embed.dim == 0 {
            return invalid("embed.dim must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: Stage,
    pub seconds: f64,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub corpus_kept: Option<usize>,
    pub qa_pairs: Option<usize>,
    pub qa_diagnostics: Option<usize>,
    pub sft_final_loss: Option<f64>,
    pub grpo_final_mean_reward: Option<f64>,
    pub retrieval_original: Option<f64>,
    pub retrieval_augmented: Option<f64>,
    pub rouge_l_f1: Option<f64>,
    pub embed_f1: Option<f64>,
    pub extraction: Option<ExtractionReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Option<PipelineConfig>,
    pub stages: Vec<StageEntry>,
    pub metrics: MetricSummary,
}

impl RunManifest {
    /// Artifact path → digest over every completed stage.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.stages
            .iter()
            .flat_map(|s| &s.artifacts)
            .map(|a| (a.path.clone(), a.sha256.clone()))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let raw = fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| PipelineError::ConfigInvalid(format!("manifest: {e}")))
    }
}

/// Document group labels, kept next to the records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct DocGroup {
    id: String,
    province: String,
    crime_type: String,
}

struct StageOutput {
    artifacts: Vec<Artifact>,
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    clients: &'a Clients,
    catalog: ElementCatalog,
    out: PathBuf,
    metrics: MetricSummary,
}

type StageResult = Result<StageOutput, String>;

fn err<E: std::fmt::Display>(what: &str) -> impl FnOnce(E) -> String + '_ {
    move |e| format!("{what}: {e}")
}

impl Ctx<'_> {
    fn write(&self, name: &str, bytes: &[u8]) -> Result<Artifact, String> {
        let path = self.out.join(name);
        fs::write(&path, bytes).map_err(err(name))?;
        Ok(Artifact {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
        })
    }

    fn read(&self, name: &str) -> Result<String, String> {
        fs::read_to_string(self.out.join(name)).map_err(err(name))
    }

    fn records(&self) -> Result<Vec<DocRecord>, String> {
        corpus::read_records(&self.out.join("records.jsonl")).map_err(err("records.jsonl"))
    }

    fn groups(&self) -> Result<IndexMap<String, DocGroup>, String> {
        jsonl::<DocGroup>(&self.read("groups.jsonl")?)
            .map(|gs| gs.into_iter().map(|g| (g.id.clone(), g)).collect())
            .map_err(err("groups.jsonl"))
    }

    fn corpus(&mut self) -> StageResult {
        let c = &self.cfg.corpus;
        let anchors = match &c.anchors {
            Some(p) => AnchorSet::load(p).map_err(err("anchors"))?,
            None => AnchorSet::default(),
        };
        let metas = corpus::read_metadata(&c.metadata).map_err(err("metadata"))?;
        let opts = BuildOptions {
            min_year: c.min_year,
            anchors,
        };
        let (built, stats) = corpus::build_corpus(&c.input_dir, &metas, &self.catalog, &opts).map_err(err("corpus"))?;
        let mut records = String::new();
        let mut groups = String::new();
        for b in &built {
            records.push_str(&serde_json::to_string(&b.record).map_err(err("record"))?);
            records.push('\n');
            let g = DocGroup {
                id: b.record.index.clone(),
                province: b.province.clone(),
                crime_type: b.crime_type.clone(),
            };
            groups.push_str(&serde_json::to_string(&g).map_err(err("group"))?);
            groups.push('\n');
        }
        self.metrics.corpus_kept = Some(stats.kept);
        let stats_json = serde_json::to_string_pretty(&stats).map_err(err("stats"))?;
        Ok(StageOutput {
            artifacts: vec![
                self.write("records.jsonl", records.as_bytes())?,
                self.write("groups.jsonl", groups.as_bytes())?,
                self.write("corpus_stats.json", stats_json.as_bytes())?,
            ],
        })
    }

    fn augment(&mut self) -> StageResult {
        let a = &self.cfg.augment;
        let laws: Vec<LawText> =
            jsonl(&fs::read_to_string(&a.laws).map_err(err("laws"))?).map_err(err("laws"))?;
        let registry = TemplateRegistry::default();
        let base = stage_seed(self.cfg.seed, Stage::Augment.as_str());
        let mut out = String::new();
        let mut diagnostics = 0usize;
        let mut count = 0usize;
        for (i, law) in laws.iter().enumerate() {
            let settings = GenerationSettings {
                max_tokens: a.max_tokens,
                temperature: a.temperature,
                seed: Some(derive_seed(base, &[i as u64])),
            };
            let job = AugmentJob::new(law.text.clone(), a.num_qa);
            let parsed = run_job(&job, Some(&law.article), &registry, self.clients.generator.as_ref(), &settings)
                .map_err(err(&law.article))?;
            diagnostics += parsed.diagnostics.len();
            for p in &parsed.pairs {
                out.push_str(&serde_json::to_string(p).map_err(err("qa"))?);
                out.push('\n');
                count += 1;
            }
        }
        self.metrics.qa_pairs = Some(count);
        self.metrics.qa_diagnostics = Some(diagnostics);
        Ok(StageOutput {
            artifacts: vec![self.write("qa.jsonl", out.as_bytes())?],
        })
    }

    /// Record-derived pairs (document sections → rendered elements) followed
    /// by the generated QA pairs.
    fn sft_pairs(&self) -> Result<Vec<TextPair>, String> {
        let mut pairs = Vec::new();
        if self.out.join("records.jsonl").exists() {
            for r in self.records()? {
                pairs.push(TextPair {
                    input: record_text(&r),
                    output: render_elements(&r.features, &self.catalog),
                });
            }
        }
        if self.out.join("qa.jsonl").exists() {
            for q in jsonl::<QaPair>(&self.read("qa.jsonl")?).map_err(err("qa.jsonl"))? {
                pairs.push(TextPair {
                    input: q.input,
                    output: q.output,
                });
            }
        }
        pairs.retain(|p| !p.output.trim().is_empty());
        if pairs.is_empty() {
            return Err("no training pairs: run the corpus or augment stage first".into());
        }
        Ok(pairs)
    }

    fn sft(&mut self) -> StageResult {
        let s = &self.cfg.sft;
        let pairs = self.sft_pairs()?;
        let vocab = vocab_from_texts(pairs.iter().flat_map(|p| [p.input.as_str(), p.output.as_str()]))
            .map_err(err("vocabulary"))?;
        let data = encode_text_pairs(&vocab, &pairs, s.max_input_tokens, s.max_target_tokens).map_err(err("encode"))?;
        let mut policy = ToyPolicy::uniform(std::sync::Arc::new(vocab));
        let cfg = SftConfig {
            steps: s.steps,
            lr: s.lr,
            grad_accum: s.grad_accum,
            batch_size: s.batch_size,
            seed: stage_seed(self.cfg.seed, Stage::Sft.as_str()),
        };
        let log = train_sft(&mut policy, &data, &cfg).map_err(err("train"))?;
        self.metrics.sft_final_loss = log.rows.last().map(|r| r.loss);
        let data_jsonl: String = pairs
            .iter()
            .map(|p| serde_json::to_string(p).expect("pair serializes") + "\n")
            .collect();
        let ckpt = self.out.join("sft_policy.json");
        policy.save(&ckpt).map_err(err("checkpoint"))?;
        let ckpt_bytes = fs::read(&ckpt).map_err(err("checkpoint"))?;
        Ok(StageOutput {
            artifacts: vec![
                self.write("sft_data.jsonl", data_jsonl.as_bytes())?,
                self.write("sft_policy.json", &ckpt_bytes)?,
                self.write("sft_log.csv", log.to_csv().as_bytes())?,
            ],
        })
    }

    fn grpo(&mut self) -> StageResult {
        let g = &self.cfg.grpo;
        let init = ToyPolicy::load(&self.out.join("sft_policy.json")).map_err(err("sft_policy.json"))?;
        let pairs: Vec<TextPair> = jsonl(&self.read("sft_data.jsonl")?).map_err(err("sft_data.jsonl"))?;
        let pairs: Vec<TextPair> = pairs.into_iter().take(g.queries).collect();
        let encoded = encode_text_pairs(init.vocab(), &pairs, self.cfg.sft.max_input_tokens, 1).map_err(err("encode"))?;
        let queries: Vec<_> = encoded.into_iter().map(|(x, _)| x).collect();
        let spec = match &g.format_spec {
            Some(p) => FormatSpec::load(p).map_err(err("format spec"))?,
            None => FormatSpec::supervision_decision(),
        };
        let task = AmountTask::default();
        let reward_cfg = RewardConfig::default();
        let vocab = init.vocab().clone();
        let sources: Vec<&str> = pairs.iter().map(|p| p.input.as_str()).collect();
        let reward = |q: &[usize], o: &[usize]| {
            let text = vocab.decode(o);
            let source = queries
                .iter()
                .position(|x| x.as_slice() == q)
                .map(|i| sources[i])
                .unwrap_or("");
            match g.reward {
                RewardKind::Format => format_reward(&text, &spec),
                RewardKind::Process => process_reward(&text, &task).total(),
                RewardKind::Combined => combined_reward(&text, source, &spec, &task, &reward_cfg).total(),
            }
        };
        let (policy, log) = train_grpo(&init, &queries, &reward, &self.cfg.grpo_config()).map_err(err("train"))?;
        self.metrics.grpo_final_mean_reward = log.rows.last().map(|r| r.mean_reward);
        let ckpt = self.out.join("grpo_policy.json");
        policy.save(&ckpt).map_err(err("checkpoint"))?;
        let ckpt_bytes = fs::read(&ckpt).map_err(err("checkpoint"))?;
        Ok(StageOutput {
            artifacts: vec![
                self.write("grpo_policy.json", &ckpt_bytes)?,
                self.write("grpo_log.csv", log.to_csv().as_bytes())?,
            ],
        })
    }

    fn labeled_documents(&self) -> Result<Vec<LabeledDocument>, String> {
        Ok(self
            .records()?
            .into_iter()
            .filter(|r| !r.features.is_empty())
            .map(|r| LabeledDocument {
                id: r.index.clone(),
                text: record_text(&r),
                true_elements: r.features.keys().cloned().collect(),
            })
            .collect())
    }

    fn retrieve(&mut self) -> StageResult {
        let r = &self.cfg.retrieve;
        let embedder = self.clients.embedder.as_ref();
        let docs = self.labeled_documents()?;
        let mut contexts = String::new();
        for d in &docs {
            let chunks = chunk_text(&d.text, r.max_chunk_tokens).map_err(err(&d.id))?;
            let matches = match_elements(&chunks, &self.catalog, embedder, r.use_augmented).map_err(err(&d.id))?;
            let ctx = build_context(&d.text, &matches);
            contexts.push_str(&serde_json::to_string(&(&d.id, &ctx.matched_elements)).map_err(err("context"))?);
            contexts.push('\n');
        }
        let mut artifacts = vec![self.write("contexts.jsonl", contexts.as_bytes())?];
        if self.catalog.has_all_augmented() {
            let report = compare_augmentation(&docs, &self.catalog, embedder, r.max_chunk_tokens)
                .map_err(err("compare"))?;
            self.metrics.retrieval_original = Some(report.mean_original);
            self.metrics.retrieval_augmented = Some(report.mean_augmented);
            let mut csv = Vec::new();
            report.write_csv(&mut csv).map_err(err("retrieval.csv"))?;
            artifacts.push(self.write("retrieval.csv", &csv)?);
        }
        Ok(StageOutput { artifacts })
    }

    fn evaluate(&mut self) -> StageResult {
        let records = self.records()?;
        let groups = self.groups()?;
        let contexts: IndexMap<String, Vec<String>> = if self.out.join("contexts.jsonl").exists() {
            jsonl::<(String, Vec<String>)>(&self.read("contexts.jsonl")?)
                .map_err(err("contexts.jsonl"))?
                .into_iter()
                .collect()
        } else {
            IndexMap::new()
        };
        let mut counts = Vec::new();
        let mut labels = Vec::new();
        for r in records.iter().filter(|r| !r.features.is_empty()) {
            let gold = gold_slots(&r.features, &self.catalog);
            let text = record_text(r);
            let candidates: Vec<_> = match contexts.get(&r.index) {
                Some(names) if !names.is_empty() => names.iter().filter_map(|n| self.catalog.get(n)).collect(),
                _ => self.catalog.elements().iter().collect(),
            };
            let pred: SlotMap = extract_rule_based(&text, candidates)
                .into_iter()
                .map(|v| (v.name, v.value))
                .collect();
            counts.push(extraction_counts(&gold, &pred));
            labels.push(groups.get(&r.index).map(|g| g.province.clone()).unwrap_or_default());
        }
        let report = aggregate_by_group(&counts, &labels).map_err(err("aggregate"))?;
        let mut artifacts = vec![
            self.write("extraction.csv", report.to_csv().map_err(err("csv"))?.as_bytes())?,
            self.write("extraction.json", report.to_json().map_err(err("json"))?.as_bytes())?,
        ];
        self.metrics.extraction = Some(report);

        let ckpt = ["grpo_policy.json", "sft_policy.json"]
            .iter()
            .map(|f| self.out.join(f))
            .find(|p| p.exists());
        if let Some(ckpt) = ckpt {
            let policy = ToyPolicy::load(&ckpt).map_err(err("checkpoint"))?;
            let pairs: Vec<TextPair> = jsonl(&self.read("sft_data.jsonl")?).map_err(err("sft_data.jsonl"))?;
            let encoded = encode_text_pairs(policy.vocab(), &pairs, self.cfg.sft.max_input_tokens, 1)
                .map_err(err("encode"))?;
            let mut csv = String::from("index,rouge1_f1,rouge2_f1,rougeL_f1,embed_f1\n");
            let (mut rl, mut ef, mut n) = (0.0, 0.0, 0usize);
            for (i, ((x, _), p)) in encoded.iter().zip(&pairs).enumerate() {
                let out = policy.vocab().decode(&policy.greedy(x, self.cfg.sft.max_target_tokens + 1));
                if out.trim().is_empty() {
                    writeln!(csv, "{i},0,0,0,0").expect("string write");
                    n += 1;
                    continue;
                }
                let s = rouge(&out, &p.output).map_err(err("rouge"))?;
                let e = embed_score(&out, &p.output, self.clients.embedder.as_ref()).map_err(err("embed"))?;
                writeln!(
                    csv,
                    "{i},{:.4},{:.4},{:.4},{:.4}",
                    s.rouge1.f1, s.rouge2.f1, s.rouge_l.f1, e.f1
                )
                .expect("string write");
                rl += s.rouge_l.f1;
                ef += e.f1;
                n += 1;
            }
            if n > 0 {
                self.metrics.rouge_l_f1 = Some(rl / n as f64);
                self.metrics.embed_f1 = Some(ef / n as f64);
            }
            artifacts.push(self.write("text_metrics.csv", csv.as_bytes())?);
        }
        Ok(StageOutput { artifacts })
    }

    fn run_stage(&mut self, stage: Stage) -> StageResult {
        match stage {
            Stage::Corpus => self.corpus(),
            Stage::Augment => self.augment(),
            Stage::Sft => self.sft(),
            Stage::Grpo => self.grpo(),
            Stage::Retrieve => self.retrieve(),
            Stage::Evaluate => self.evaluate(),
        }
    }
}

fn jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Section texts joined in document order, each preceded by its anchor.
pub fn record_text(r: &DocRecord) -> String {
    r.sections
        .iter()
        .map(|(a, s)| format!("{a}{s}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Normalized gold values; raw strings that fail to parse are kept as text.
pub fn gold_slots(features: &IndexMap<String, String>, catalog: &ElementCatalog) -> SlotMap {
    features
        .iter()
        .map(|(name, raw)| {
            let value = catalog
                .get(name)
                .and_then(|def| parse_value(def, raw).ok())
                .unwrap_or_else(|| crate::elements::Value::Text(raw.clone()));
            (name.clone(), value)
        })
        .collect()
}

/// `名称：值；` for every feature, in catalog order.
pub fn render_elements(features: &IndexMap<String, String>, catalog: &ElementCatalog) -> String {
    let gold = gold_slots(features, catalog);
    catalog
        .names()
        .filter_map(|n| gold.get(n).map(|v| format!("{n}：{v}；")))
        .collect()
}

/// Runs the enabled stages in order and writes `manifest.json` into the
/// output directory, including after a failure.
pub fn run_pipeline(cfg: &PipelineConfig, clients: &Clients) -> Result<RunManifest, PipelineError> {
    cfg.validate()?;
    let catalog = match &cfg.catalog {
        Some(p) => ElementCatalog::load(p).map_err(|e| PipelineError::ConfigInvalid(format!("catalog: {e}")))?,
        None => ElementCatalog::starter(),
    };
    fs::create_dir_all(&cfg.out_dir)?;
    let mut ctx = Ctx {
        cfg,
        clients,
        catalog,
        out: cfg.out_dir.clone(),
        metrics: MetricSummary::default(),
    };
    let mut manifest = RunManifest {
        config: Some(cfg.clone()),
        ..Default::default()
    };
    for stage in Stage::ALL.into_iter().filter(|s| cfg.stages.enabled(*s)) {
        let started = Instant::now();
        let result = ctx.run_stage(stage);
        manifest.metrics = ctx.metrics.clone();
        match result {
            Ok(out) => manifest.stages.push(StageEntry {
                stage,
                seconds: started.elapsed().as_secs_f64(),
                artifacts: out.artifacts,
            }),
            Err(cause) => {
                fs::write(cfg.out_dir.join(MANIFEST_FILE), manifest.to_json())?;
                return Err(PipelineError::StageFailed {
                    stage,
                    cause,
                    manifest: Box::new(manifest),
                });
            }
        }
    }
    fs::write(cfg.out_dir.join(MANIFEST_FILE), manifest.to_json())?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub summary: String,
    /// Extraction table: group, accuracy, recall, precision, f1 (percent).
    pub csv: String,
    pub json: String,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".to_string())
}

/// Renders the manifest as a readable summary plus machine tables. Pure in
/// the manifest.
pub fn emit_report(manifest: &RunManifest) -> Report {
    let report = manifest.metrics.extraction.clone().unwrap_or_default();
    let csv = report.to_csv().expect("report serializes");
    let json = serde_json::to_string_pretty(&manifest.metrics).expect("metrics serialize");
    let mut s = String::new();
    writeln!(s, "Run report").unwrap();
    writeln!(s, "==========").unwrap();
    for st in &manifest.stages {
        writeln!(s, "{:<9} {:>8.2}s  {} artifact(s)", st.stage.as_str(), st.seconds, st.artifacts.len()).unwrap();
    }
    let m = &manifest.metrics;
    writeln!(s).unwrap();
    writeln!(s, "corpus records kept      {}", m.corpus_kept.map_or("-".into(), |v| v.to_string())).unwrap();
    writeln!(s, "generated QA pairs       {}", m.qa_pairs.map_or("-".into(), |v| v.to_string())).unwrap();
    writeln!(s, "final SFT loss           {}", opt(m.sft_final_loss)).unwrap();
    writeln!(s, "final GRPO mean reward   {}", opt(m.grpo_final_mean_reward)).unwrap();
    writeln!(s, "overlap acc. original    {}", opt(m.retrieval_original)).unwrap();
    writeln!(s, "overlap acc. augmented   {}", opt(m.retrieval_augmented)).unwrap();
    writeln!(s, "ROUGE-L f1               {}", opt(m.rouge_l_f1)).unwrap();
    writeln!(s, "embedding f1             {}", opt(m.embed_f1)).unwrap();
    writeln!(s).unwrap();
    writeln!(s, "{:<10} {:>8} {:>8} {:>9} {:>6}", "Group", "Accuracy", "Recall", "Precision", "F1").unwrap();
    for r in report.all_rows() {
        writeln!(
            s,
            "{:<10} {:>8.1} {:>8.1} {:>9.1} {:>6.1}",
            r.group,
            r.accuracy * 100.0,
            r.recall * 100.0,
            r.precision * 100.0,
            r.f1 * 100.0
        )
        .unwrap();
    }
    Report { summary: s, csv, json }
}
