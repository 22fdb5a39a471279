//! End-to-end training loops (contrastive fusion; preference-trained text
//! tower), the zero-shot evaluation mode, Recall@K evaluation over the
//! leakage-safe gallery, early stopping, and the JSON report rendering.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{CheckpointError, LoadedCheckpoint};
use crate::dataset::{
    load_gallery, load_triplets, DataError, Gallery, PlantedTruth, Split, SynthConfig, TripletSet,
};
use crate::encoders::{
    quantize_trainable, EncoderError, FusionModel, Grads, ModelConfig, TextTower, VisionStub,
};
use crate::index::{FlatIpIndex, IndexError};
use crate::losses::{dpo_loss, info_nce, similarity_scores, LossConfig, LossError};
use crate::optim::{adamw_step, onecycle_lr, AdamWConfig, AdamWState, OneCycleConfig, OptimError};
use crate::tensor::{Matrix, SeededRng, TensorError};

pub const GALLERY_FILE: &str = "gallery.emb1";
pub const TRIPLETS_FILE: &str = "triplets.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("target id {id:?} is not in the evaluation gallery")]
    UnknownTarget { id: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Caps rayon's worker count. First call wins; later calls are no-ops.
pub fn init_thread_pool(threads: Option<usize>) {
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    InfonceFusion,
    RetrievalDpo,
    ZeroshotEval,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::InfonceFusion => "infonce_fusion",
            Mode::RetrievalDpo => "retrieval_dpo",
            Mode::ZeroshotEval => "zeroshot_eval",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleConfig {
    Constant,
    OneCycle {
        max_lr: f64,
        #[serde(default = "default_div_factor")]
        div_factor: f64,
        #[serde(default = "default_final_div_factor")]
        final_div_factor: f64,
        /// Defaults to 1.5 / epochs when absent.
        #[serde(default)]
        pct_start: Option<f64>,
    },
}

fn default_div_factor() -> f64 {
    100.0
}

fn default_final_div_factor() -> f64 {
    10_000.0
}

/// Which splits feed the hard-negative mining index. The evaluation gallery
/// is always train+val; mining defaults to train only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningSplit {
    Train,
    TrainVal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub optim: AdamWConfig,
    pub schedule: ScheduleConfig,
    pub mining_k: usize,
    pub mining_split: MiningSplit,
    pub eval_ks: Vec<usize>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::fusion_default()
    }
}

impl TrainConfig {
    /// Contrastive fusion mode: batches of 128 with a one-cycle schedule.
    /// Training from scratch at desk scale needs a far larger peak rate than
    /// fine-tuning pretrained towers; 5e-2 converges well within ten epochs
    /// on the default synthetic dataset.
    pub fn fusion_default() -> Self {
        Self {
            mode: Mode::InfonceFusion,
            batch_size: 128,
            epochs: 5,
            patience: 3,
            seed: 7,
            loss: LossConfig::default(),
            optim: AdamWConfig::fusion_dpo(),
            schedule: ScheduleConfig::OneCycle {
                max_lr: 5e-2,
                div_factor: 100.0,
                final_div_factor: 10_000.0,
                pct_start: None,
            },
            mining_k: 50,
            mining_split: MiningSplit::Train,
            eval_ks: vec![1, 5, 10, 50],
            model: ModelConfig::default(),
        }
    }

    /// Preference mode: batches of 256, constant lr 1e-4, text tower only.
    pub fn dpo_default() -> Self {
        Self {
            mode: Mode::RetrievalDpo,
            batch_size: 256,
            schedule: ScheduleConfig::Constant,
            ..Self::fusion_default()
        }
    }

    pub fn zeroshot_default() -> Self {
        Self {
            mode: Mode::ZeroshotEval,
            ..Self::fusion_default()
        }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::InfonceFusion => Self::fusion_default(),
            Mode::RetrievalDpo => Self::dpo_default(),
            Mode::ZeroshotEval => Self::zeroshot_default(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.batch_size == 0 {
            return Err(PipelineError::InvalidConfig(
                "batch_size must be >= 1".into(),
            ));
        }
        if self.epochs == 0 || self.epochs > 10 {
            return Err(PipelineError::InvalidConfig(
                "epochs must be between 1 and 10".into(),
            ));
        }
        if self.patience == 0 {
            return Err(PipelineError::InvalidConfig("patience must be >= 1".into()));
        }
        if self.mining_k == 0 {
            return Err(PipelineError::InvalidConfig("mining_k must be >= 1".into()));
        }
        if self.eval_ks.is_empty() || self.eval_ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PipelineError::InvalidConfig(
                "eval_ks must be nonempty and strictly ascending".into(),
            ));
        }
        if self.eval_ks.contains(&0) {
            return Err(PipelineError::InvalidConfig(
                "eval_ks entries must be >= 1".into(),
            ));
        }
        if self.mode != Mode::ZeroshotEval && !self.eval_ks.contains(&10) {
            return Err(PipelineError::InvalidConfig(
                "training modes stop early on Recall@10; eval_ks must contain 10".into(),
            ));
        }
        if !(self.loss.temperature > 0.0 && self.loss.beta > 0.0 && self.loss.logit_scale > 0.0) {
            return Err(PipelineError::InvalidConfig(
                "temperature, beta, and logit_scale must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Fits the tower widths to a gallery's embedding dim: prompt and image
    /// widths follow the data, and the patch count drops to the largest
    /// divisor of the width at or below its configured value.
    pub fn adapt_to_gallery_dim(&mut self, dim: usize) {
        if self.model.d_img == dim {
            return;
        }
        self.model.d_img = dim;
        self.model.d_txt = dim;
        let mut p = self.model.patch_count.min(dim).max(1);
        while !dim.is_multiple_of(p) {
            p -= 1;
        }
        self.model.patch_count = p;
    }

    /// Effective warmup fraction: explicit, or the 1.5/epochs rule.
    fn pct_start(&self) -> f64 {
        let pct = match &self.schedule {
            ScheduleConfig::OneCycle {
                pct_start: Some(p), ..
            } => *p,
            _ => 1.5 / self.epochs as f64,
        };
        pct.clamp(0.01, 0.99)
    }

    fn one_cycle(&self, total_steps: usize) -> Option<OneCycleConfig> {
        match &self.schedule {
            ScheduleConfig::Constant => None,
            ScheduleConfig::OneCycle {
                max_lr,
                div_factor,
                final_div_factor,
                ..
            } => Some(OneCycleConfig {
                max_lr: *max_lr,
                total_steps: total_steps.max(2),
                div_factor: *div_factor,
                final_div_factor: *final_div_factor,
                pct_start: self.pct_start(),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset bundle
// ---------------------------------------------------------------------------

/// A gallery plus its triplet records.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub gallery: Gallery,
    pub triplets: TripletSet,
}

impl Dataset {
    pub fn generate(cfg: &SynthConfig) -> Result<(Self, PlantedTruth), PipelineError> {
        let (gallery, triplets, truth) = crate::dataset::generate_synthetic(cfg)?;
        Ok((Self { gallery, triplets }, truth))
    }

    /// Loads `gallery.emb1` and `triplets.jsonl` from a data directory.
    pub fn load(dir: &Path, vocab_size: usize, max_len: usize) -> Result<Self, PipelineError> {
        let gallery = load_gallery(&dir.join(GALLERY_FILE))?;
        let triplets = load_triplets(&dir.join(TRIPLETS_FILE), &gallery, vocab_size, max_len)?;
        Ok(Self { gallery, triplets })
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        crate::dataset::save_gallery(&self.gallery, &dir.join(GALLERY_FILE))?;
        crate::dataset::save_triplets(&self.triplets, &dir.join(TRIPLETS_FILE))?;
        Ok(())
    }
}

/// Records carry tokens from whatever tokenizer produced the dataset; when
/// a model expects a different sequence length or vocabulary, re-tokenize
/// every caption from its ground-truth string.
fn normalize_tokens<'a>(data: &'a Dataset, model: &ModelConfig) -> std::borrow::Cow<'a, Dataset> {
    let mismatched = data.triplets.records.iter().any(|rec| {
        rec.caption_tokens.ids.len() != model.max_len
            || rec
                .caption_tokens
                .ids
                .iter()
                .any(|&id| id as usize >= model.vocab_size)
    });
    if !mismatched {
        return std::borrow::Cow::Borrowed(data);
    }
    let mut owned = data.clone();
    for rec in &mut owned.triplets.records {
        rec.caption_tokens = crate::dataset::tokenize(&rec.caption, model.vocab_size, model.max_len);
    }
    std::borrow::Cow::Owned(owned)
}

/// Fixed seed of the linear vision stub, so the same frozen map is rebuilt
/// by every run and checkpoint evaluation regardless of the training seed.
const VISION_STUB_SEED: u64 = 0x5649_5349_4f4e; // "VISION"

/// Vision stub for a model config: identity when gallery and prompt widths
/// agree, otherwise the fixed seeded linear map into prompt space.
pub fn vision_stub_for_model(model: &ModelConfig) -> VisionStub {
    if model.d_img == model.d_txt {
        VisionStub::identity(model.d_img)
    } else {
        VisionStub::seeded_linear(model.d_img, model.d_txt, VISION_STUB_SEED)
    }
}

pub fn vision_stub_for(cfg: &TrainConfig) -> VisionStub {
    vision_stub_for_model(&cfg.model)
}

/// Maps every gallery row through the frozen vision stub.
pub fn encoded_gallery(g: &Gallery, stub: &VisionStub) -> Result<Gallery, PipelineError> {
    let mut rows = Vec::with_capacity(g.len());
    for r in 0..g.len() {
        rows.push(stub.encode(g.embeddings().row(r))?);
    }
    Ok(Gallery::new(g.ids().to_vec(), Matrix::from_rows(&rows)?)?)
}

/// The leakage-safe evaluation gallery: union of train and val image ids,
/// deduplicated, rows ordered by ascending id. Test-split images never
/// appear here.
pub fn build_eval_gallery(data: &Dataset) -> Result<Gallery, PipelineError> {
    let keep = data.triplets.image_ids(&[Split::Train, Split::Val]);
    Ok(data.gallery.subset_sorted(&keep)?)
}

/// Gallery feeding the hard-negative mining index.
pub fn build_mining_gallery(data: &Dataset, split: MiningSplit) -> Result<Gallery, PipelineError> {
    let splits: &[Split] = match split {
        MiningSplit::Train => &[Split::Train],
        MiningSplit::TrainVal => &[Split::Train, Split::Val],
    };
    let keep = data.triplets.image_ids(splits);
    Ok(data.gallery.subset_sorted(&keep)?)
}

// ---------------------------------------------------------------------------
// Recall evaluation and reporting
// ---------------------------------------------------------------------------

/// One evaluation query: a prompt embedding plus its ground truth.
#[derive(Debug, Clone)]
pub struct RecallQuery {
    pub prompt: Vec<f64>,
    pub target_id: String,
    pub category: String,
}

/// Per-category and averaged Recall@K.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub per_category: BTreeMap<String, BTreeMap<usize, f64>>,
    pub average: BTreeMap<usize, f64>,
    pub query_count: usize,
}

impl RecallReport {
    /// Builds a report from per-category recalls, recomputing the unweighted
    /// average so the invariant holds by construction.
    pub fn from_per_category(
        per_category: BTreeMap<String, BTreeMap<usize, f64>>,
        query_count: usize,
    ) -> Self {
        let mut average = BTreeMap::new();
        if !per_category.is_empty() {
            let mut ks: Vec<usize> = Vec::new();
            for recalls in per_category.values() {
                for &k in recalls.keys() {
                    if !ks.contains(&k) {
                        ks.push(k);
                    }
                }
            }
            for k in ks {
                let vals: Vec<f64> = per_category
                    .values()
                    .filter_map(|m| m.get(&k).copied())
                    .collect();
                average.insert(k, vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        Self {
            per_category,
            average,
            query_count,
        }
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.average.get(&k).copied()
    }
}

/// Exact Recall@K over the index: each query searches the top max(ks) and a
/// hit at K means the true target id appears among the first K results.
pub fn evaluate_recall(
    ix: &FlatIpIndex,
    queries: &[RecallQuery],
    ks: &[usize],
) -> Result<RecallReport, PipelineError> {
    let mut ks: Vec<usize> = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() || ks[0] == 0 {
        return Err(PipelineError::InvalidConfig("ks must be >= 1".into()));
    }
    for q in queries {
        if ix.row_of(&q.target_id).is_none() {
            return Err(PipelineError::UnknownTarget {
                id: q.target_id.clone(),
            });
        }
    }
    let k_max = ks[ks.len() - 1].min(ix.len());

    // Rank of the target per query; parallel and order-preserving.
    let ranks: Vec<Result<Option<usize>, PipelineError>> = queries
        .par_iter()
        .map(|q| {
            let res = ix.search(&q.prompt, k_max)?;
            Ok(res.rank_of(&q.target_id))
        })
        .collect();

    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut hits: BTreeMap<String, BTreeMap<usize, usize>> = BTreeMap::new();
    for (q, rank) in queries.iter().zip(ranks) {
        let rank = rank?;
        *counts.entry(q.category.clone()).or_insert(0) += 1;
        let cat_hits = hits.entry(q.category.clone()).or_default();
        for &k in &ks {
            if let Some(r) = rank {
                if r < k {
                    *cat_hits.entry(k).or_insert(0) += 1;
                }
            }
        }
    }

    let mut per_category = BTreeMap::new();
    for (cat, n) in &counts {
        let cat_hits = hits.get(cat).cloned().unwrap_or_default();
        let mut recalls = BTreeMap::new();
        for &k in &ks {
            let h = cat_hits.get(&k).copied().unwrap_or(0);
            recalls.insert(k, h as f64 / *n as f64);
        }
        per_category.insert(cat.clone(), recalls);
    }
    Ok(RecallReport::from_per_category(per_category, queries.len()))
}

#[derive(Serialize, Deserialize)]
struct ReportJson {
    categories: BTreeMap<String, BTreeMap<String, f64>>,
    average: BTreeMap<String, f64>,
    query_count: usize,
}

fn pct2(x: f64) -> f64 {
    (x * 100.0 * 100.0).round() / 100.0
}

/// Renders the report: recalls as percentages with two decimals, `R@K` keys,
/// newline-terminated JSON.
pub fn report_json(r: &RecallReport) -> String {
    let to_keys = |m: &BTreeMap<usize, f64>| -> BTreeMap<String, f64> {
        m.iter()
            .map(|(k, v)| (format!("R@{k}"), pct2(*v)))
            .collect()
    };
    let doc = ReportJson {
        categories: r
            .per_category
            .iter()
            .map(|(cat, m)| (cat.clone(), to_keys(m)))
            .collect(),
        average: to_keys(&r.average),
        query_count: r.query_count,
    };
    let mut s = serde_json::to_string(&doc).expect("report serializes");
    s.push('\n');
    s
}

/// Parses a rendered report back; values come back at 2-decimal precision.
pub fn parse_report(text: &str) -> Result<RecallReport, PipelineError> {
    let doc: ReportJson = serde_json::from_str(text.trim())
        .map_err(|e| PipelineError::InvalidConfig(format!("report parse: {e}")))?;
    let from_keys = |m: &BTreeMap<String, f64>| -> Result<BTreeMap<usize, f64>, PipelineError> {
        m.iter()
            .map(|(k, v)| {
                let k = k
                    .strip_prefix("R@")
                    .and_then(|s| s.parse::<usize>().ok())
                    .ok_or_else(|| PipelineError::InvalidConfig(format!("bad recall key {k:?}")))?;
                Ok((k, v / 100.0))
            })
            .collect()
    };
    let mut per_category = BTreeMap::new();
    for (cat, m) in &doc.categories {
        per_category.insert(cat.clone(), from_keys(m)?);
    }
    Ok(RecallReport {
        per_category,
        average: from_keys(&doc.average)?,
        query_count: doc.query_count,
    })
}

// ---------------------------------------------------------------------------
// Training history
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_recall: BTreeMap<usize, f64>,
    pub lr_last: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Zero-based index of the epoch with the best validation Recall@10
    /// (earliest on ties).
    pub best_epoch: usize,
}

impl TrainHistory {
    /// One JSON line per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch stats serialize"));
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Shared evaluation plumbing
// ---------------------------------------------------------------------------

fn fusion_queries(
    model: &FusionModel,
    data: &Dataset,
    split: Split,
) -> Result<Vec<RecallQuery>, PipelineError> {
    let mut queries = Vec::new();
    for rec in data.triplets.split(split) {
        let reference = data
            .gallery
            .embedding_of(&rec.reference_id)
            .ok_or_else(|| PipelineError::UnknownTarget {
                id: rec.reference_id.clone(),
            })?;
        let patches = model.synthesize_patches(reference)?;
        let (prompt, _) = model.fuse(&patches, &rec.caption_tokens)?;
        queries.push(RecallQuery {
            prompt,
            target_id: rec.target_id.clone(),
            category: rec.category.clone(),
        });
    }
    Ok(queries)
}

fn text_queries(
    tower: &TextTower,
    data: &Dataset,
    split: Split,
) -> Result<Vec<RecallQuery>, PipelineError> {
    let mut queries = Vec::new();
    for rec in data.triplets.split(split) {
        let (prompt, _) = tower.encode(&rec.caption_tokens)?;
        queries.push(RecallQuery {
            prompt,
            target_id: rec.target_id.clone(),
            category: rec.category.clone(),
        });
    }
    Ok(queries)
}

fn quantize_state(state: &mut AdamWState) {
    for m in state.m.values_mut() {
        m.quantize_f32();
    }
    for v in state.v.values_mut() {
        v.quantize_f32();
    }
}

struct EarlyStop {
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStop {
    fn new() -> Self {
        Self {
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Returns true when this epoch strictly improved Recall@10.
    fn observe(&mut self, epoch: usize, r10: f64) -> bool {
        if r10 > self.best {
            self.best = r10;
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    fn should_stop(&self, patience: usize) -> bool {
        self.since_best >= patience
    }
}

// ---------------------------------------------------------------------------
// Training: contrastive fusion
// ---------------------------------------------------------------------------

pub struct FusionRun {
    pub model: FusionModel,
    pub optim: AdamWState,
    pub history: TrainHistory,
    /// Validation report of the best epoch.
    pub best_report: RecallReport,
}

/// Trains the fusion head with in-batch InfoNCE against frozen image
/// embeddings; per epoch, evaluates val Recall over the leakage-safe
/// gallery and stops early when Recall@10 stalls. Returns the best-epoch
/// model.
pub fn train_fusion_infonce(data: &Dataset, cfg: &TrainConfig) -> Result<FusionRun, PipelineError> {
    cfg.validate()?;
    let data = normalize_tokens(data, &cfg.model);
    let data = data.as_ref();
    if data.gallery.dim() != cfg.model.d_img {
        return Err(PipelineError::InvalidConfig(format!(
            "gallery dim {} does not match model d_img {}",
            data.gallery.dim(),
            cfg.model.d_img
        )));
    }
    let train: Vec<&crate::dataset::TripletRecord> = data.triplets.split(Split::Train).collect();
    if train.is_empty() {
        return Err(PipelineError::InvalidConfig("no training records".into()));
    }
    let stub = vision_stub_for(cfg);
    let eval_index = FlatIpIndex::build(&encoded_gallery(&build_eval_gallery(data)?, &stub)?)?;

    let mut model = FusionModel::init(&cfg.model, cfg.seed);
    let mut state = AdamWState::new();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = cfg.one_cycle(cfg.epochs * steps_per_epoch);

    let mut shuffle_rng = SeededRng::derive(cfg.seed, "fusion-shuffle");
    let mut stop = EarlyStop::new();
    let mut history = TrainHistory::default();
    let mut best: Option<(FusionModel, AdamWState, RecallReport)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut lr_last = cfg.optim.lr;
        for batch in order.chunks(cfg.batch_size) {
            let lr = match &schedule {
                Some(oc) => onecycle_lr(step, oc)?,
                None => cfg.optim.lr,
            };
            lr_last = lr;

            let mut prompt_rows = Vec::with_capacity(batch.len());
            let mut target_rows = Vec::with_capacity(batch.len());
            let mut caches = Vec::with_capacity(batch.len());
            for &i in batch {
                let rec = train[i];
                let reference = data
                    .gallery
                    .embedding_of(&rec.reference_id)
                    .expect("validated reference id");
                let patches = model.synthesize_patches(reference)?;
                let (prompt, cache) = model.fuse(&patches, &rec.caption_tokens)?;
                prompt_rows.push(prompt);
                caches.push(cache);
                let target = data
                    .gallery
                    .embedding_of(&rec.target_id)
                    .expect("validated target id");
                target_rows.push(stub.encode(target)?);
            }
            let prompts = Matrix::from_rows(&prompt_rows)?;
            let targets = Matrix::from_rows(&target_rows)?;
            let out = info_nce(
                &prompts,
                &targets,
                cfg.loss.temperature,
                cfg.loss.exclude_positive,
            )?;
            epoch_loss += out.value * batch.len() as f64;

            let d_prompts = &out.grads["prompts"];
            let mut grads = Grads::new();
            for (i, cache) in caches.iter().enumerate() {
                model.fuse_backward(cache, d_prompts.row(i), &mut grads);
            }
            adamw_step(&mut model, &grads, &mut state, &cfg.optim, lr)?;
            quantize_trainable(&mut model);
            quantize_state(&mut state);
            step += 1;
        }

        let report = evaluate_recall(
            &eval_index,
            &fusion_queries(&model, data, Split::Val)?,
            &cfg.eval_ks,
        )?;
        let r10 = report.recall_at(10).unwrap_or(0.0);
        history.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_recall: report.average.clone(),
            lr_last,
        });
        if stop.observe(epoch, r10) {
            best = Some((model.clone(), state.clone(), report));
        }
        if stop.should_stop(cfg.patience) {
            break;
        }
    }

    history.best_epoch = stop.best_epoch;
    let (model, optim, best_report) = best.expect("at least one epoch ran");
    Ok(FusionRun {
        model,
        optim,
        history,
        best_report,
    })
}

// ---------------------------------------------------------------------------
// Training: preference-optimized text tower
// ---------------------------------------------------------------------------

pub struct DpoRun {
    pub tower: TextTower,
    pub optim: AdamWState,
    pub history: TrainHistory,
    pub best_report: RecallReport,
}

/// Fine-tunes only the text tower's block under the pairwise preference
/// loss. Positives are the frozen-encoded targets; negatives are mined per
/// record, each epoch, from a static flat index over the mining gallery.
pub fn train_retrieval_dpo(
    data: &Dataset,
    cfg: &TrainConfig,
    mining_index: Option<FlatIpIndex>,
) -> Result<DpoRun, PipelineError> {
    cfg.validate()?;
    let data = normalize_tokens(data, &cfg.model);
    let data = data.as_ref();
    let train: Vec<&crate::dataset::TripletRecord> = data.triplets.split(Split::Train).collect();
    if train.is_empty() {
        return Err(PipelineError::InvalidConfig("no training records".into()));
    }
    let stub = vision_stub_for(cfg);
    let eval_index = FlatIpIndex::build(&encoded_gallery(&build_eval_gallery(data)?, &stub)?)?;
    let mining_index = match mining_index {
        Some(ix) => ix,
        None => FlatIpIndex::build(&encoded_gallery(
            &build_mining_gallery(data, cfg.mining_split)?,
            &stub,
        )?)?,
    };

    let mut tower = TextTower::init(&cfg.model, cfg.seed);
    let mut state = AdamWState::new();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = cfg.one_cycle(cfg.epochs * steps_per_epoch);

    let mut shuffle_rng = SeededRng::derive(cfg.seed, "dpo-shuffle");
    let mut stop = EarlyStop::new();
    let mut history = TrainHistory::default();
    let mut best: Option<(TextTower, AdamWState, RecallReport)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut lr_last = cfg.optim.lr;
        for batch in order.chunks(cfg.batch_size) {
            let lr = match &schedule {
                Some(oc) => onecycle_lr(step, oc)?,
                None => cfg.optim.lr,
            };
            lr_last = lr;

            let mut s_plus = Vec::with_capacity(batch.len());
            let mut s_minus = Vec::with_capacity(batch.len());
            let mut items = Vec::with_capacity(batch.len());
            for &i in batch {
                let rec = train[i];
                let (prompt, cache) = tower.encode(&rec.caption_tokens)?;
                let positive_row = mining_index.row_of(&rec.target_id).ok_or_else(|| {
                    PipelineError::UnknownTarget {
                        id: rec.target_id.clone(),
                    }
                })?;
                let negative_row = mining_index.mine_hard_negative(positive_row, cfg.mining_k)?;
                let negative_id = &mining_index.ids()[negative_row];
                let positive = stub.encode(
                    data.gallery
                        .embedding_of(&rec.target_id)
                        .expect("validated target id"),
                )?;
                let negative = stub.encode(
                    data.gallery
                        .embedding_of(negative_id)
                        .expect("mining ids come from the gallery"),
                )?;
                let (sp, sn) =
                    similarity_scores(&prompt, &positive, &negative, cfg.loss.logit_scale)?;
                s_plus.push(sp);
                s_minus.push(sn);
                items.push((cache, positive, negative));
            }
            let out = dpo_loss(&s_plus, &s_minus, cfg.loss.beta)?;
            epoch_loss += out.value * batch.len() as f64;

            let g_plus = &out.grads["s_plus"];
            let g_minus = &out.grads["s_minus"];
            let mut grads = Grads::new();
            for (i, (cache, positive, negative)) in items.iter().enumerate() {
                // d loss / d prompt = scale * (g⁺ · pos + g⁻ · neg).
                let mut d_prompt = vec![0.0; positive.len()];
                crate::tensor::axpy(
                    &mut d_prompt,
                    positive,
                    g_plus.get(0, i) * cfg.loss.logit_scale,
                );
                crate::tensor::axpy(
                    &mut d_prompt,
                    negative,
                    g_minus.get(0, i) * cfg.loss.logit_scale,
                );
                tower.encode_backward(cache, &d_prompt, &mut grads);
            }
            adamw_step(&mut tower, &grads, &mut state, &cfg.optim, lr)?;
            quantize_trainable(&mut tower);
            quantize_state(&mut state);
            step += 1;
        }

        let report = evaluate_recall(
            &eval_index,
            &text_queries(&tower, data, Split::Val)?,
            &cfg.eval_ks,
        )?;
        let r10 = report.recall_at(10).unwrap_or(0.0);
        history.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_recall: report.average.clone(),
            lr_last,
        });
        if stop.observe(epoch, r10) {
            best = Some((tower.clone(), state.clone(), report));
        }
        if stop.should_stop(cfg.patience) {
            break;
        }
    }

    history.best_epoch = stop.best_epoch;
    let (tower, optim, best_report) = best.expect("at least one epoch ran");
    Ok(DpoRun {
        tower,
        optim,
        history,
        best_report,
    })
}

// ---------------------------------------------------------------------------
// Zero-shot evaluation
// ---------------------------------------------------------------------------

/// Chance-level baseline: prompts come from the untrained seeded text tower
/// and are evaluated exactly like the trained modes.
pub fn zeroshot_eval(data: &Dataset, cfg: &TrainConfig) -> Result<RecallReport, PipelineError> {
    zeroshot_eval_split(data, cfg, Split::Val)
}

pub fn zeroshot_eval_split(
    data: &Dataset,
    cfg: &TrainConfig,
    split: Split,
) -> Result<RecallReport, PipelineError> {
    let data = normalize_tokens(data, &cfg.model);
    let data = data.as_ref();
    let stub = vision_stub_for(cfg);
    let eval_index = FlatIpIndex::build(&encoded_gallery(&build_eval_gallery(data)?, &stub)?)?;
    let tower = TextTower::init(&cfg.model, cfg.seed);
    evaluate_recall(
        &eval_index,
        &text_queries(&tower, data, split)?,
        &cfg.eval_ks,
    )
}

// ---------------------------------------------------------------------------
// Checkpoint evaluation
// ---------------------------------------------------------------------------

/// Re-evaluates a saved checkpoint on a split: a pure function of
/// (checkpoint, data, ks). Prompts use the same construction the mode
/// trained with.
pub fn eval_checkpoint(
    data: &Dataset,
    ckpt: &LoadedCheckpoint,
    split: Split,
    ks: &[usize],
) -> Result<RecallReport, PipelineError> {
    let model_cfg = &ckpt.header.model;
    let data = normalize_tokens(data, model_cfg);
    let data = data.as_ref();
    let stub = vision_stub_for_model(model_cfg);
    let eval_index = FlatIpIndex::build(&encoded_gallery(&build_eval_gallery(data)?, &stub)?)?;
    let queries = match ckpt.header.mode.as_str() {
        "infonce_fusion" => {
            let model = FusionModel::from_tensor_map(&ckpt.tensors, model_cfg.patch_count)?;
            fusion_queries(&model, data, split)?
        }
        "retrieval_dpo" | "zeroshot_eval" => {
            let tower = TextTower::from_tensor_map(&ckpt.tensors)?;
            text_queries(&tower, data, split)?
        }
        other => {
            return Err(PipelineError::InvalidConfig(format!(
                "unknown checkpoint mode {other:?}"
            )))
        }
    };
    evaluate_recall(&eval_index, &queries, ks)
}

/// Builds the mining index, preferring a valid cache file. Returns the index
/// and whether it came from the cache.
pub fn mining_index_with_cache(
    data: &Dataset,
    cfg: &TrainConfig,
    cache: Option<&PathBuf>,
) -> Result<(FlatIpIndex, bool), PipelineError> {
    let stub = vision_stub_for(cfg);
    let expected = build_mining_gallery(data, cfg.mining_split)?;
    if let Some(path) = cache {
        if path.exists() {
            if let Ok(ix) = crate::index::load_index(path) {
                if ix.ids() == expected.ids() && ix.dim() == cfg.model.d_txt {
                    return Ok((ix, true));
                }
            }
        }
    }
    let ix = FlatIpIndex::build(&encoded_gallery(&expected, &stub)?)?;
    if let Some(path) = cache {
        crate::index::save_index(&ix, path)?;
    }
    Ok((ix, false))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dataset() -> Dataset {
        let cfg = SynthConfig {
            gallery_size: 120,
            ..SynthConfig::default()
        };
        let (data, _) = Dataset::generate(&cfg).unwrap();
        data
    }

    #[test]
    fn eval_gallery_unions_train_and_val() {
        let data = small_dataset();
        let g = build_eval_gallery(&data).unwrap();
        let train = data.triplets.image_ids(&[Split::Train]);
        let val = data.triplets.image_ids(&[Split::Val]);
        assert_eq!(g.len(), train.len() + val.len());
        let test = data.triplets.image_ids(&[Split::Test]);
        for id in g.ids() {
            assert!(!test.contains(id), "test id {id} leaked into eval gallery");
        }
        // Sorted by id.
        for w in g.ids().windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn eval_gallery_deduplicates_overlapping_ids() {
        // Build a tiny gallery and two records sharing one image.
        let m = crate::tensor::gaussian_matrix(4, 4, &mut SeededRng::new(1), 1.0);
        let ids: Vec<String> = (0..4).map(|i| format!("i{i}")).collect();
        let gallery = Gallery::new(ids, m).unwrap();
        let tok = crate::dataset::tokenize("x", 50, 8);
        let rec = |r: &str, t: &str, split| crate::dataset::TripletRecord {
            caption: "x".into(),
            caption_tokens: tok.clone(),
            reference_id: r.into(),
            target_id: t.into(),
            category: "shirt".into(),
            split,
        };
        let triplets = TripletSet {
            records: vec![rec("i0", "i1", Split::Train), rec("i1", "i2", Split::Train)],
        };
        let data = Dataset { gallery, triplets };
        let g = build_eval_gallery(&data).unwrap();
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn recall_single_query_rank_first() {
        let m = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        let ids: Vec<String> = (0..3).map(|i| format!("i{i}")).collect();
        let ix = FlatIpIndex::build(&Gallery::new(ids, m).unwrap()).unwrap();
        let q = RecallQuery {
            prompt: vec![1.0, 0.05],
            target_id: "i0".into(),
            category: "shirt".into(),
        };
        let report = evaluate_recall(&ix, &[q], &[1, 2, 3]).unwrap();
        for k in [1usize, 2, 3] {
            assert_eq!(report.recall_at(k), Some(1.0));
        }
        assert_eq!(report.query_count, 1);
    }

    #[test]
    fn recall_unknown_target_errors() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let ids: Vec<String> = (0..2).map(|i| format!("i{i}")).collect();
        let ix = FlatIpIndex::build(&Gallery::new(ids, m).unwrap()).unwrap();
        let q = RecallQuery {
            prompt: vec![1.0, 0.0],
            target_id: "missing".into(),
            category: "shirt".into(),
        };
        assert!(matches!(
            evaluate_recall(&ix, &[q], &[1]),
            Err(PipelineError::UnknownTarget { .. })
        ));
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let data = small_dataset();
        let cfg = TrainConfig::zeroshot_default();
        let report = zeroshot_eval(&data, &cfg).unwrap();
        for recalls in report.per_category.values() {
            let vals: Vec<f64> = recalls.values().copied().collect();
            for w in vals.windows(2) {
                assert!(w[0] <= w[1] + 1e-12);
            }
        }
        let vals: Vec<f64> = report.average.values().copied().collect();
        for w in vals.windows(2) {
            assert!(w[0] <= w[1] + 1e-12);
        }
    }

    #[test]
    fn category_fixture_renders_rounded_averages() {
        let mut per_category = BTreeMap::new();
        let entry = |r10: f64, r50: f64| {
            let mut m = BTreeMap::new();
            m.insert(10usize, r10 / 100.0);
            m.insert(50usize, r50 / 100.0);
            m
        };
        per_category.insert("dress".to_string(), entry(40.06, 63.47));
        per_category.insert("toptee".to_string(), entry(50.43, 72.11));
        per_category.insert("shirt".to_string(), entry(45.58, 67.12));
        let report = RecallReport::from_per_category(per_category, 6016);
        let text = report_json(&report);
        assert!(text.ends_with('\n'));
        let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(doc["average"]["R@10"], serde_json::json!(45.36));
        assert_eq!(doc["average"]["R@50"], serde_json::json!(67.57));
        assert_eq!(doc["categories"]["dress"]["R@10"], serde_json::json!(40.06));
    }

    #[test]
    fn empty_report_renders_empty_maps() {
        let report = RecallReport::from_per_category(BTreeMap::new(), 0);
        assert_eq!(
            report_json(&report),
            "{\"categories\":{},\"average\":{},\"query_count\":0}\n"
        );
    }

    #[test]
    fn report_round_trips_at_two_decimals() {
        let mut per_category = BTreeMap::new();
        let mut m = BTreeMap::new();
        m.insert(1usize, 0.123456);
        m.insert(10usize, 0.98765);
        per_category.insert("shirt".to_string(), m);
        let report = RecallReport::from_per_category(per_category, 42);
        let text = report_json(&report);
        let parsed = parse_report(&text).unwrap();
        assert_eq!(report_json(&parsed), text);
        assert_eq!(parsed.query_count, 42);
        let v = parsed.per_category["shirt"][&1];
        assert!((v - 0.1235).abs() < 1e-9, "parsed {v}");
    }

    #[test]
    fn zeroshot_is_deterministic() {
        let data = small_dataset();
        let cfg = TrainConfig::zeroshot_default();
        let a = zeroshot_eval(&data, &cfg).unwrap();
        let b = zeroshot_eval(&data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_respects_early_stop_and_best_epoch() {
        let data = small_dataset();
        let mut cfg = TrainConfig::fusion_default();
        cfg.epochs = 4;
        cfg.patience = 1;
        let run = train_fusion_infonce(&data, &cfg).unwrap();
        let h = &run.history;
        // best_epoch is the argmax of val Recall@10 (earliest on ties).
        let best_r10 = h.epochs[h.best_epoch].val_recall[&10];
        for e in &h.epochs {
            assert!(e.val_recall[&10] <= best_r10);
        }
        // Never more than best_epoch + patience epochs.
        assert!(h.epochs.len() <= h.best_epoch + 1 + cfg.patience);
    }

    #[test]
    fn vision_stub_output_is_bitwise_stable_across_training() {
        let data = small_dataset();
        let mut cfg = TrainConfig::fusion_default();
        cfg.epochs = 2;
        let stub = vision_stub_for(&cfg);
        let probe = data.gallery.embeddings().row(0).to_vec();
        let before = stub.encode(&probe).unwrap();
        let _ = train_fusion_infonce(&data, &cfg).unwrap();
        let after = vision_stub_for(&cfg).encode(&probe).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn first_batch_zero_margin_loss_is_ln_two() {
        // Prompt orthogonal to both images: the warm-start loss is ln 2.
        let prompt = [1.0, 0.0, 0.0];
        let pos = [0.0, 1.0, 0.0];
        let neg = [0.0, 0.0, 1.0];
        let (sp, sn) = crate::losses::similarity_scores(&prompt, &pos, &neg, 100.0).unwrap();
        let out = crate::losses::dpo_loss(&[sp], &[sn], 0.1).unwrap();
        assert!((out.value - std::f64::consts::LN_2).abs() < 0.05);
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut cfg = TrainConfig::fusion_default();
        cfg.epochs = 11;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::fusion_default();
        cfg.eval_ks = vec![5, 1];
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::fusion_default();
        cfg.eval_ks = vec![1, 5, 50];
        assert!(
            cfg.validate().is_err(),
            "eval_ks without 10 cannot early-stop"
        );
        let mut cfg = TrainConfig::zeroshot_default();
        cfg.eval_ks = vec![1, 5, 50];
        assert!(cfg.validate().is_ok(), "zeroshot does not early-stop");
    }
}
