//! End-to-end experiment driver: configuration, the staged pipeline with its
//! manifest, the per-segment reward dump, and the ablation matrix.
//!
//! Every stage reads its inputs from and writes its outputs to the run
//! directory, so any stage can be rerun alone once its upstream artifacts
//! exist. A stage is skipped when the manifest holds a record with the same
//! key (stage name, the config slice it reads, upstream checksums) and its
//! outputs still hash to the recorded values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::interp::InterpStrategy;
use crate::lm::{self, init_params, Checkpoint, ModelDims, ModelParams, SftConfig};
use crate::normalizer::{self, calibration_samples, group_by_location, FitMethod, NormDataset, NormStrategy, NormalizerFn, PointWeight};
use crate::numerics::{self, write_loss_csv};
use crate::ppo::{self, write_metrics_csv, EvalSummary, Frozen, PPOConfig, RewardSource};
use crate::reward::{self, segment_response, Granularity, RewardTrainConfig, SegmentedPair};
use crate::rng::derive_seed;
use crate::segment::{self, SegmentSpan};
use crate::task::{self, PairRecord, PreferencePair, TaskParams, TaskSpec, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_sft: usize,
    pub sft_quality: f64,
    pub n_pairs: usize,
    pub n_eval_pairs: usize,
    pub n_train_prompts: usize,
    pub n_eval_prompts: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_sft: 4000, sft_quality: 0.5, n_pairs: 1000, n_eval_pairs: 200, n_train_prompts: 2048, n_eval_prompts: 500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormConfig {
    pub method: FitMethod,
    pub weight: PointWeight,
    pub p_round: u32,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self { method: FitMethod::Huber, weight: PointWeight::Count, p_round: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_len: usize,
    pub temperature: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_len: 64, temperature: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub task: TaskParams,
    pub data: DataConfig,
    pub model: ModelDims,
    pub sft: SftConfig,
    pub reward: RewardTrainConfig,
    pub norm: NormConfig,
    pub ppo: PPOConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            task: TaskParams::default(),
            data: DataConfig::default(),
            model: ModelDims::default(),
            sft: SftConfig::default(),
            reward: RewardTrainConfig::default(),
            norm: NormConfig::default(),
            ppo: PPOConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    /// Parses a TOML document, applies `key=value` overrides (dotted keys,
    /// TOML-typed values, bare words taken as strings) and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(config_err)?;
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| config_err(format!("override `{o}` is not key=value")))?;
            set_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.sft.validate()?;
        self.reward.validate()?;
        self.ppo.validate()?;
        let d = &self.data;
        if d.n_sft == 0 || d.n_pairs == 0 || d.n_eval_pairs == 0 || d.n_train_prompts == 0 || d.n_eval_prompts == 0 {
            return Err(config_err("data: every count must be positive"));
        }
        if !(0.0..=1.0).contains(&d.sft_quality) {
            return Err(config_err("data.sft_quality must be in [0, 1]"));
        }
        if self.reward.c_ent != self.ppo.c_ent {
            return Err(config_err(format!("reward.c_ent ({}) and ppo.c_ent ({}) must match", self.reward.c_ent, self.ppo.c_ent)));
        }
        if self.eval.max_len == 0 || !(self.eval.temperature >= 0.0) {
            return Err(config_err("eval: max_len must be positive and temperature ≥ 0"));
        }
        if self.norm.p_round > 12 {
            return Err(config_err("norm.p_round must be at most 12"));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding of every field.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| config_err(format!("`{part}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    TrainSft,
    SegmentCache,
    TrainRm,
    FitNorm,
    TrainPpo,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [Stage::GenData, Stage::TrainSft, Stage::SegmentCache, Stage::TrainRm, Stage::FitNorm, Stage::TrainPpo, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainSft => "train-sft",
            Stage::SegmentCache => "segment-cache",
            Stage::TrainRm => "train-rm",
            Stage::FitNorm => "fit-norm",
            Stage::TrainPpo => "train-ppo",
            Stage::Eval => "eval",
        }
    }

    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::GenData => &[files::SPEC, files::SFT_CORPUS, files::PAIRS_TRAIN, files::PAIRS_EVAL, files::PROMPTS_TRAIN, files::PROMPTS_EVAL],
            Stage::TrainSft => &[files::SFT, files::SFT_LOSS],
            Stage::SegmentCache => &[files::SEGMENTS_TRAIN, files::SEGMENTS_EVAL],
            Stage::TrainRm => &[files::RM, files::RM_LOSS],
            Stage::FitNorm => &[files::NORMALIZER, files::D_NORM],
            Stage::TrainPpo => &[files::POLICY, files::METRICS],
            Stage::Eval => &[files::EVAL, files::EVAL_SAMPLES],
        }
    }

    fn upstream(self) -> &'static [Stage] {
        let i = Stage::ALL.iter().position(|&s| s == self).expect("listed");
        &Stage::ALL[..i]
    }

    /// The part of the config this stage reads, as JSON.
    fn config_slice(self, cfg: &ExperimentConfig) -> serde_json::Value {
        use serde_json::json;
        match self {
            Stage::GenData => json!({ "seed": cfg.seed, "task": cfg.task, "data": cfg.data }),
            Stage::TrainSft => json!({ "seed": cfg.seed, "model": cfg.model, "sft": cfg.sft }),
            Stage::SegmentCache => json!({ "granularity": cfg.ppo.reward_model_granularity(), "c_ent": cfg.reward.c_ent }),
            Stage::TrainRm => json!({ "seed": cfg.seed, "reward": cfg.reward }),
            Stage::FitNorm => json!({
                "norm": cfg.norm,
                "strategy": cfg.ppo.norm_strategy,
                "granularity": cfg.ppo.action_granularity(),
                "c_ent": cfg.ppo.c_ent,
            }),
            Stage::TrainPpo => json!({ "seed": cfg.seed, "ppo": cfg.ppo }),
            Stage::Eval => json!({ "seed": cfg.seed, "eval": cfg.eval }),
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.iter().copied().find(|s| s.name() == name)
    }
}

/// Artifact file names inside a run directory.
pub mod files {
    pub const MANIFEST: &str = "manifest.json";
    pub const CONFIG: &str = "config.toml";
    pub const SPEC: &str = "spec.toml";
    pub const SFT_CORPUS: &str = "sft_corpus.jsonl";
    pub const PAIRS_TRAIN: &str = "pairs_train.jsonl";
    pub const PAIRS_EVAL: &str = "pairs_eval.jsonl";
    pub const PROMPTS_TRAIN: &str = "prompts_train.jsonl";
    pub const PROMPTS_EVAL: &str = "prompts_eval.jsonl";
    pub const SFT: &str = "sft.ckpt.json";
    pub const SFT_LOSS: &str = "sft_loss.csv";
    pub const SEGMENTS_TRAIN: &str = "pairs_train.segments.jsonl";
    pub const SEGMENTS_EVAL: &str = "pairs_eval.segments.jsonl";
    pub const RM: &str = "rm.ckpt.json";
    pub const RM_LOSS: &str = "rm_loss.csv";
    pub const NORMALIZER: &str = "normalizer.toml";
    pub const D_NORM: &str = "d_norm.csv";
    pub const POLICY: &str = "policy.ckpt.json";
    pub const METRICS: &str = "metrics.csv";
    pub const EVAL: &str = "eval.json";
    pub const EVAL_SAMPLES: &str = "eval_samples.jsonl";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub key: String,
    /// File name to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: Option<ExperimentConfig>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(files::MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(files::MANIFEST), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    fn upstream_checksums(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut all = BTreeMap::new();
        for up in stage.upstream() {
            let rec = self.stages.get(up.name()).ok_or_else(|| Error::Stage {
                stage: stage.name(),
                source: Box::new(Error::Checkpoint(format!("upstream stage `{}` has not run", up.name()))),
            })?;
            all.extend(rec.outputs.clone());
        }
        Ok(all)
    }

    /// Stage key, or an error when an upstream stage is missing.
    pub fn stage_key(&self, stage: Stage, cfg: &ExperimentConfig) -> Result<String> {
        let payload = serde_json::json!({
            "stage": stage.name(),
            "config": stage.config_slice(cfg),
            "upstream": self.upstream_checksums(stage)?,
        });
        Ok(sha256_hex(&serde_json::to_vec(&payload)?))
    }

    /// Whether the stored record for `stage` matches `key` and the files on disk.
    fn is_fresh(&self, stage: Stage, key: &str, dir: &Path) -> bool {
        let Some(rec) = self.stages.get(stage.name()) else { return false };
        rec.key == key
            && stage.outputs().iter().all(|f| rec.outputs.get(*f).is_some_and(|h| fs::read(dir.join(f)).is_ok_and(|b| &sha256_hex(&b) == h)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub prompt_tokens: Vec<usize>,
}

/// Segment-cache sidecar record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRecord {
    pub id: String,
    pub boundaries: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sft: EvalSummary,
    pub policy: EvalSummary,
    pub rm_accuracy: f64,
    /// Mean tokens per action over the policy's evaluation responses.
    pub avg_segment_length: f64,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut out, &it)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut items = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            items.push(serde_json::from_str(&line)?);
        }
    }
    Ok(items)
}

/// A run directory bound to its config.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    manifest: Manifest,
}

impl Run {
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.out_dir.clone();
        fs::create_dir_all(&dir)?;
        let mut manifest = Manifest::load(&dir)?;
        manifest.config_hash = cfg.hash();
        manifest.config = Some(cfg.clone());
        fs::write(dir.join(files::CONFIG), cfg.to_toml())?;
        manifest.save(&dir)?;
        Ok(Self { cfg, dir, manifest })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.cfg.seed, label, 0)
    }

    /// Runs one stage unless its recorded outputs are current.
    pub fn run_stage(&mut self, stage: Stage, force: bool) -> Result<StageOutcome> {
        let key = self.manifest.stage_key(stage, &self.cfg)?;
        if !force && self.manifest.is_fresh(stage, &key, &self.dir) {
            return Ok(StageOutcome::Skipped);
        }
        self.execute(stage).map_err(|e| Error::Stage { stage: stage.name(), source: Box::new(e) })?;
        let mut outputs = BTreeMap::new();
        for f in stage.outputs() {
            outputs.insert(f.to_string(), sha256_hex(&fs::read(self.path(f))?));
        }
        self.manifest.stages.insert(stage.name().to_string(), StageRecord { key, outputs });
        self.manifest.save(&self.dir)?;
        Ok(StageOutcome::Ran)
    }

    /// Every stage in order.
    pub fn run_all(&mut self) -> Result<Vec<(Stage, StageOutcome)>> {
        Stage::ALL.iter().map(|&s| Ok((s, self.run_stage(s, false)?))).collect()
    }

    /// Copies the leading stages of another run directory whose keys match
    /// this config, so shared prefixes (data, SFT) are computed once.
    pub fn import_prefix(&mut self, other: &Path) -> Result<usize> {
        let theirs = Manifest::load(other)?;
        let mut copied = 0;
        for stage in Stage::ALL {
            let key = self.manifest.stage_key(stage, &self.cfg)?;
            if self.manifest.is_fresh(stage, &key, &self.dir) {
                copied += 1;
                continue;
            }
            if !theirs.is_fresh(stage, &key, other) {
                break;
            }
            for f in stage.outputs() {
                fs::copy(other.join(f), self.path(f))?;
            }
            self.manifest.stages.insert(stage.name().to_string(), theirs.stages[stage.name()].clone());
            copied += 1;
        }
        self.manifest.save(&self.dir)?;
        Ok(copied)
    }

    fn execute(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::GenData => self.gen_data(),
            Stage::TrainSft => self.train_sft(),
            Stage::SegmentCache => self.segment_cache(),
            Stage::TrainRm => self.train_rm(),
            Stage::FitNorm => self.fit_norm(),
            Stage::TrainPpo => self.train_ppo(),
            Stage::Eval => self.eval(),
        }
    }

    pub fn spec(&self) -> Result<TaskSpec> {
        TaskSpec::from_toml(&fs::read_to_string(self.path(files::SPEC))?)
    }

    pub fn pairs(&self, name: &str) -> Result<Vec<PreferencePair>> {
        Ok(read_jsonl::<PairRecord>(&self.path(name))?.into_iter().map(PreferencePair::from).collect())
    }

    pub fn prompts(&self, name: &str) -> Result<Vec<Vec<usize>>> {
        Ok(read_jsonl::<PromptRecord>(&self.path(name))?.into_iter().map(|r| r.prompt_tokens).collect())
    }

    pub fn model(&self, name: &str, spec: &TaskSpec) -> Result<ModelParams> {
        Checkpoint::load(&self.path(name))?.model(&spec.hash())
    }

    pub fn normalizer(&self) -> Result<NormalizerFn> {
        NormalizerFn::from_toml(&fs::read_to_string(self.path(files::NORMALIZER))?)
    }

    pub fn eval_report(&self) -> Result<EvalReport> {
        Ok(serde_json::from_slice(&fs::read(self.path(files::EVAL))?)?)
    }

    fn gen_data(&self) -> Result<()> {
        let d = &self.cfg.data;
        let spec = task::gen_task_spec(self.seed("task"), &self.cfg.task)?;
        fs::write(self.path(files::SPEC), spec.to_toml())?;
        let corpus = task::make_sft_corpus(&spec, d.n_sft, d.sft_quality, self.seed("sft-corpus"));
        write_jsonl(&self.path(files::SFT_CORPUS), &corpus)?;
        for (name, n, label) in [(files::PAIRS_TRAIN, d.n_pairs, "pairs-train"), (files::PAIRS_EVAL, d.n_eval_pairs, "pairs-eval")] {
            let pairs = task::make_pref_dataset(&spec, n, self.seed(label));
            write_jsonl(&self.path(name), pairs.iter().map(PairRecord::from))?;
        }
        for (name, n, label) in [(files::PROMPTS_TRAIN, d.n_train_prompts, "prompts-train"), (files::PROMPTS_EVAL, d.n_eval_prompts, "prompts-eval")]
        {
            let prompts = task::make_prompts(&spec, n, self.seed(label));
            let recs = prompts.into_iter().enumerate().map(|(i, p)| PromptRecord { id: format!("{label}-{i}"), prompt_tokens: p });
            write_jsonl(&self.path(name), recs)?;
        }
        Ok(())
    }

    fn train_sft(&self) -> Result<()> {
        let spec = self.spec()?;
        let corpus: Vec<TokenSequence> = read_jsonl(&self.path(files::SFT_CORPUS))?;
        let init = init_params(&spec, self.cfg.model, self.seed("init"));
        let (model, curve) = lm::train_sft(&init, &corpus, &self.cfg.sft, self.seed("sft"))?;
        let mut ck = Checkpoint::new(&model, &spec.hash());
        ck.metadata.insert("role".into(), "sft".into());
        ck.save(&self.path(files::SFT))?;
        write_loss_csv(&curve, &self.path(files::SFT_LOSS))
    }

    fn segment_cache(&self) -> Result<()> {
        let spec = self.spec()?;
        let sft = self.model(files::SFT, &spec)?;
        let g = self.cfg.ppo.reward_model_granularity();
        for (src, dst) in [(files::PAIRS_TRAIN, files::SEGMENTS_TRAIN), (files::PAIRS_EVAL, files::SEGMENTS_EVAL)] {
            let seg = reward::segment_dataset(&self.pairs(src)?, g, &sft, &spec, self.cfg.reward.c_ent)?;
            let recs = seg.iter().flat_map(|sp| {
                [
                    BoundaryRecord { id: sp.pair.chosen.id.clone(), boundaries: segment::starts_of(&sp.spans_w) },
                    BoundaryRecord { id: sp.pair.rejected.id.clone(), boundaries: segment::starts_of(&sp.spans_l) },
                ]
            });
            write_jsonl(&self.path(dst), recs)?;
        }
        Ok(())
    }

    /// Pairs joined with their cached boundaries.
    pub fn segmented_pairs(&self, pairs_file: &str, segments_file: &str) -> Result<Vec<SegmentedPair>> {
        let bounds: BTreeMap<String, Vec<usize>> =
            read_jsonl::<BoundaryRecord>(&self.path(segments_file))?.into_iter().map(|r| (r.id, r.boundaries)).collect();
        let spans = |seq: &TokenSequence| -> Result<Vec<SegmentSpan>> {
            let b = bounds.get(&seq.id).ok_or_else(|| Error::Checkpoint(format!("no cached boundaries for {}", seq.id)))?;
            let spans = segment::spans_from_starts(b, seq.response_tokens.len());
            segment::check_partition(&spans, seq.response_tokens.len())?;
            Ok(spans)
        };
        self.pairs(pairs_file)?.into_iter().map(|p| Ok(SegmentedPair { spans_w: spans(&p.chosen)?, spans_l: spans(&p.rejected)?, pair: p })).collect()
    }

    fn train_rm(&self) -> Result<()> {
        let spec = self.spec()?;
        let sft = self.model(files::SFT, &spec)?;
        let data = self.segmented_pairs(files::PAIRS_TRAIN, files::SEGMENTS_TRAIN)?;
        let (rm, curve) = reward::train_reward_model(&sft, &data, &self.cfg.reward, self.seed("rm"))?;
        let mut ck = Checkpoint::new(&rm, &spec.hash());
        ck.metadata.insert("role".into(), "reward".into());
        ck.metadata.insert("granularity".into(), self.cfg.ppo.reward_model_granularity().as_str().into());
        ck.metadata.insert("c_ent".into(), self.cfg.reward.c_ent.to_string());
        ck.save(&self.path(files::RM))?;
        write_loss_csv(&curve, &self.path(files::RM_LOSS))
    }

    fn fit_norm(&self) -> Result<()> {
        let spec = self.spec()?;
        let sft = self.model(files::SFT, &spec)?;
        let rm = self.model(files::RM, &spec)?;
        let calib: Vec<TokenSequence> = self.pairs(files::PAIRS_TRAIN)?.into_iter().flat_map(|p| [p.chosen, p.rejected]).collect();
        let data = calibration_dataset(&rm, &sft, &spec, &calib, self.cfg.ppo.action_granularity(), self.cfg.ppo.c_ent, self.cfg.norm.p_round)?;
        let f = normalizer::fit_strategy(&data, self.cfg.ppo.norm_strategy, self.cfg.norm.method, self.cfg.norm.weight)?;
        fs::write(self.path(files::NORMALIZER), f.to_toml())?;
        data.write_csv(&self.path(files::D_NORM))
    }

    fn ppo_config(&self) -> PPOConfig {
        PPOConfig { seed: derive_seed(self.cfg.seed, "ppo", self.cfg.ppo.seed), ..self.cfg.ppo.clone() }
    }

    fn train_ppo(&self) -> Result<()> {
        let spec = self.spec()?;
        let sft = self.model(files::SFT, &spec)?;
        let rm = self.model(files::RM, &spec)?;
        let norm = self.normalizer()?;
        let prompts = self.prompts(files::PROMPTS_TRAIN)?;
        let (policy, rows) = ppo::train_ppo(Frozen { spec: &spec, sft: &sft, reward: &rm }, &norm, &prompts, &self.ppo_config())?;
        let mut ck = Checkpoint::new(&policy, &spec.hash());
        ck.metadata.insert("role".into(), "policy".into());
        ck.save(&self.path(files::POLICY))?;
        write_metrics_csv(&rows, &self.path(files::METRICS))
    }

    fn eval(&self) -> Result<()> {
        let spec = self.spec()?;
        let sft = self.model(files::SFT, &spec)?;
        let rm = self.model(files::RM, &spec)?;
        let policy = self.model(files::POLICY, &spec)?;
        let prompts = self.prompts(files::PROMPTS_EVAL)?;
        let seed = self.seed("eval");
        let e = &self.cfg.eval;
        let sft_summary = ppo::evaluate_policy(&sft, &spec, &prompts, e.max_len, e.temperature, seed)?;
        let samples = sample_responses(&policy, &spec, &prompts, e.max_len, e.temperature, seed)?;
        let n = samples.len() as f64;
        let policy_summary = EvalSummary {
            mean_oracle_score: samples.iter().map(|s| task::oracle_score(&spec, &s.prompt_tokens, &s.response_tokens)).sum::<f64>() / n,
            mean_resp_len: samples.iter().map(|s| s.response_tokens.len() as f64).sum::<f64>() / n,
        };
        let g = self.cfg.ppo.action_granularity();
        let spans = samples
            .iter()
            .filter(|s| !s.response_tokens.is_empty())
            .map(|s| segment_response(g, &sft, &spec, &s.prompt_tokens, &s.response_tokens, self.cfg.ppo.c_ent))
            .collect::<Result<Vec<_>>>()?;
        let held_out = self.segmented_pairs(files::PAIRS_EVAL, files::SEGMENTS_EVAL)?;
        let report = EvalReport {
            sft: sft_summary,
            policy: policy_summary,
            rm_accuracy: reward::pref_accuracy(&rm, &held_out)?,
            avg_segment_length: segment::average_segment_length(&spans),
        };
        fs::write(self.path(files::EVAL), serde_json::to_vec_pretty(&report)?)?;
        write_jsonl(&self.path(files::EVAL_SAMPLES), &samples)
    }
}

/// One sampled response per prompt with the evaluation seed streams.
pub fn sample_responses(
    policy: &ModelParams,
    spec: &TaskSpec,
    prompts: &[Vec<usize>],
    max_len: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<TokenSequence>> {
    prompts
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let s = lm::sample(policy, p, max_len, temperature, spec.eos_token, derive_seed(seed, "eval", k as u64))?;
            Ok(TokenSequence { id: format!("eval-{k}"), ..s.sequence })
        })
        .collect()
}

/// Reward statistics by location over `calib`, with spans from `granularity`.
pub fn calibration_dataset(
    rm: &ModelParams,
    sft: &ModelParams,
    spec: &TaskSpec,
    calib: &[TokenSequence],
    granularity: Granularity,
    c_ent: f64,
    p_round: u32,
) -> Result<NormDataset> {
    let spans =
        calib.iter().map(|s| segment_response(granularity, sft, spec, &s.prompt_tokens, &s.response_tokens, c_ent)).collect::<Result<Vec<_>>>()?;
    Ok(group_by_location(&calibration_samples(rm, calib, &spans)?, p_round))
}

/// Runs (or resumes) the full pipeline for `cfg`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<(Run, Vec<(Stage, StageOutcome)>)> {
    let mut run = Run::open(cfg.clone())?;
    let outcomes = run.run_all()?;
    Ok((run, outcomes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRewardRow {
    pub index: usize,
    pub tokens: Vec<usize>,
    pub raw: f64,
    pub normalized: f64,
    pub p: f64,
}

/// Per-segment rewards of one response, plus the sequence evaluation `e_φ`.
pub fn segment_reward_rows(
    rm: &ModelParams,
    sft: &ModelParams,
    norm: &NormalizerFn,
    seq: &TokenSequence,
    c_ent: f64,
) -> Result<(Vec<SegmentRewardRow>, f64)> {
    let ents = lm::predictive_entropies(sft, &seq.prompt_tokens, &seq.response_tokens)?;
    let spans = segment::segment_by_entropy(&ents, c_ent)?;
    let raw = lm::reward_forward(rm, &seq.prompt_tokens, &seq.response_tokens, &spans)?;
    let normed = normalizer::normalize_spans(&raw, &spans, norm)?;
    let rows = spans
        .iter()
        .zip(raw.iter().zip(&normed))
        .map(|(s, (&r, &n))| SegmentRewardRow { index: s.index, tokens: seq.response_tokens[s.start..s.end].to_vec(), raw: r, normalized: n, p: s.p })
        .collect();
    Ok((rows, reward::seq_eval(&raw)?))
}

/// Text table of [`segment_reward_rows`]; token roles are shown when `spec` is given.
pub fn dump_segment_rewards(
    rm: &ModelParams,
    sft: &ModelParams,
    norm: &NormalizerFn,
    seq: &TokenSequence,
    c_ent: f64,
    spec: Option<&TaskSpec>,
) -> Result<String> {
    let (rows, e) = segment_reward_rows(rm, sft, norm, seq, c_ent)?;
    let mut out = String::new();
    let _ = writeln!(out, "{:>4}  {:>6}  {:>10}  {:>10}  tokens", "seg", "p", "raw", "normalized");
    for r in &rows {
        let toks: Vec<String> = r.tokens.iter().map(|&t| token_label(t, spec)).collect();
        let _ = writeln!(out, "{:>4}  {:>6.3}  {:>10.4}  {:>10.4}  {}", r.index, r.p, r.raw, r.normalized, toks.join(" "));
    }
    let _ = writeln!(out, "e_phi = {e:.6}  ({} segments)", rows.len());
    Ok(out)
}

fn token_label(t: usize, spec: Option<&TaskSpec>) -> String {
    match spec.map(|s| s.role(t)) {
        Some(task::TokenRole::Keyphrase { phrase, pos }) => format!("k{phrase}.{pos}"),
        Some(task::TokenRole::Filler) => format!("f{t}"),
        Some(task::TokenRole::Delimiter) => format!("d{t}"),
        Some(task::TokenRole::Eos) => "<eos>".into(),
        Some(task::TokenRole::Sep) => "<sep>".into(),
        _ => t.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Granularity,
    Normalizer,
    Interpolation,
    CEntSweep,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Granularity => "granularity",
            Self::Normalizer => "normalizer",
            Self::Interpolation => "interpolation",
            Self::CEntSweep => "c_ent_sweep",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Self::Granularity, Self::Normalizer, Self::Interpolation, Self::CEntSweep].into_iter().find(|a| a.name() == s)
    }

    /// Variant names with their config edits.
    pub fn variants(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Self::Granularity => {
                let matched = |g: Granularity| {
                    (
                        g.as_str().to_string(),
                        with(&|c| {
                            c.ppo.reward_granularity = g;
                            c.ppo.reward_source = RewardSource::Matched;
                        }),
                    )
                };
                let mut v: Vec<_> = [Granularity::Bandit, Granularity::Sentence, Granularity::Segment, Granularity::Token].map(matched).into();
                for (name, src) in [("bandit_as_segment", RewardSource::BanditAsSegment), ("segment_as_bandit", RewardSource::SegmentAsBandit)] {
                    v.push((name.to_string(), with(&|c| c.ppo.reward_source = src)));
                }
                v
            }
            Self::Normalizer => NormStrategy::ALL.iter().map(|&s| (s.as_str().to_string(), with(&|c| c.ppo.norm_strategy = s))).collect(),
            Self::Interpolation => InterpStrategy::ALL.iter().map(|&s| (s.as_str().to_string(), with(&|c| c.ppo.interp_strategy = s))).collect(),
            Self::CEntSweep => C_ENT_SWEEP
                .iter()
                .map(|&c| {
                    let v = c * C_ENT_SCALE;
                    (
                        format!("{c}"),
                        with(&|cfg| {
                            cfg.reward.c_ent = v;
                            cfg.ppo.c_ent = v;
                        }),
                    )
                })
                .collect(),
        }
    }
}

/// Default sweep values.
pub const C_ENT_SWEEP: [f64; 4] = [1.5, 1.75, 2.0, 2.25];
/// The sweep values are used unscaled: the synthetic boundary entropy (ln 8 plus
/// filler mass for the learned SFT model) sits in the same range.
pub const C_ENT_SCALE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub n_seeds: usize,
    pub oracle_mean: f64,
    pub oracle_std: f64,
    pub resp_len_mean: f64,
    pub resp_len_std: f64,
    pub avg_seg_len_mean: f64,
    pub avg_seg_len_std: f64,
    pub sft_oracle_mean: f64,
    pub failed_cells: usize,
}

/// Runs every variant of `axis` for every seed under `base.out_dir/ablate/<axis>`.
/// Cells sharing a seed reuse data and SFT artifacts. Failed cells are counted
/// and skipped; surviving cells still produce a row.
pub fn run_ablation_matrix(base: &ExperimentConfig, axis: AblationAxis, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(config_err("ablation needs at least one seed"));
    }
    let root = base.out_dir.join("ablate").join(axis.name());
    let mut rows = Vec::new();
    let mut first_for_seed: BTreeMap<u64, PathBuf> = BTreeMap::new();
    for (variant, cfg) in axis.variants(base) {
        let mut reports = Vec::new();
        let mut failed = 0;
        for &seed in seeds {
            let cell = ExperimentConfig { seed, out_dir: root.join(&variant).join(format!("seed{seed}")), ..cfg.clone() };
            let result = (|| -> Result<EvalReport> {
                let mut run = Run::open(cell.clone())?;
                if let Some(prev) = first_for_seed.get(&seed) {
                    run.import_prefix(prev)?;
                }
                run.run_all()?;
                run.eval_report()
            })();
            match result {
                Ok(r) => {
                    first_for_seed.entry(seed).or_insert(cell.out_dir.clone());
                    reports.push(r)
                }
                Err(e) => {
                    eprintln!("ablation cell {}/{variant}/seed{seed} failed: {e}", axis.name());
                    failed += 1;
                }
            }
        }
        let col = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).collect::<Vec<f64>>();
        let ms = |v: Vec<f64>| if v.is_empty() { (f64::NAN, f64::NAN) } else { (numerics::mean(&v), numerics::sample_std(&v)) };
        let (om, os) = ms(col(&|r| r.policy.mean_oracle_score));
        let (lm_, ls) = ms(col(&|r| r.policy.mean_resp_len));
        let (sm, ss) = ms(col(&|r| r.avg_segment_length));
        let (bm, _) = ms(col(&|r| r.sft.mean_oracle_score));
        rows.push(AblationRow {
            axis: axis.name().into(),
            variant,
            n_seeds: reports.len(),
            oracle_mean: om,
            oracle_std: os,
            resp_len_mean: lm_,
            resp_len_std: ls,
            avg_seg_len_mean: sm,
            avg_seg_len_std: ss,
            sft_oracle_mean: bm,
            failed_cells: failed,
        });
    }
    fs::create_dir_all(&root)?;
    let mut w = csv::Writer::from_path(root.join("ablation.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_with_overrides(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(ExperimentConfig::from_toml_with_overrides("", &[]).unwrap(), cfg);
    }

    #[test]
    fn dotted_overrides() {
        let cfg = ExperimentConfig::from_toml_with_overrides(
            "seed = 3\n[ppo]\nkl_beta = 0.5\n",
            &["ppo.kl_beta=0.02".into(), "ppo.norm_strategy=global".into(), "task.max_len=40".into(), "out_dir=x/y".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.ppo.kl_beta, 0.02);
        assert_eq!(cfg.ppo.norm_strategy, NormStrategy::Global);
        assert_eq!(cfg.task.max_len, 40);
        assert_eq!(cfg.out_dir, PathBuf::from("x/y"));
    }

    #[test]
    fn unknown_and_inconsistent_keys_rejected() {
        for bad in [vec!["ppo.nope=1".to_string()], vec!["bogus=1".into()], vec!["reward.c_ent=2.0".into()], vec!["novalue".into()]] {
            let e = ExperimentConfig::from_toml_with_overrides("", &bad).unwrap_err();
            assert!(e.is_config(), "{bad:?}: {e}");
        }
        assert!(ExperimentConfig::from_toml_with_overrides("[ppo]\nkl_beta = \"x\"\n", &[]).is_err());
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.ppo.value_clip += 1e-9;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.norm.weight = PointWeight::Uniform;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn ablation_variant_names() {
        let base = ExperimentConfig::default();
        let names = |a: AblationAxis| a.variants(&base).into_iter().map(|v| v.0).collect::<Vec<_>>();
        assert_eq!(names(AblationAxis::Granularity), ["bandit", "sentence", "segment", "token", "bandit_as_segment", "segment_as_bandit"]);
        assert_eq!(names(AblationAxis::Normalizer), ["none", "global", "last", "regression"]);
        assert_eq!(names(AblationAxis::Interpolation), ["none", "repeat", "even_split"]);
        assert_eq!(names(AblationAxis::CEntSweep), ["1.5", "1.75", "2", "2.25"]);
        for (_, c) in AblationAxis::CEntSweep.variants(&base) {
            c.validate().unwrap();
        }
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::from_name(s.name()), Some(s));
        }
    }
}
