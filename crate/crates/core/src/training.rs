//! Dataset ingestion, the optimisation loop, checkpoints and ablations.

use crate::alignment::{
    frame_labels, parse_alignment, sample_pairs, FramePair, PairSampleConfig, PhonemeAlignment,
    PhonemeId, PhonemeInventory,
};
use crate::autodiff::{Tape, Var};
use crate::inference::{ProbeConfig, ProbeReport};
use crate::dsp::{load_audio, mel_spectrogram, read_mel_cache, write_mel_cache, MelConfig, MelSpectrogram};
use crate::losses::{graph, sample_segments, total_loss, LossComponents, LossReport, LossWeights, SegmentSpec};
use crate::models::{
    init_params, pack_ranges, stack_rows, BatchNormStats, BilinearScorer, Mode, ModelConfig,
    ModelParams, Network,
};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use thiserror::Error;

/// Utterances with fewer mel frames are rejected at ingestion.
pub const MIN_UTTERANCE_FRAMES: usize = 8;
/// Largest tolerated fraction of failed manifest entries.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;
/// Name under which the scorer matrix is optimised and checkpointed.
pub const SCORER_TENSOR: &str = "scorer.w";

const CHECKPOINT_MAGIC: &[u8; 5] = b"CTVC1";
const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const DTYPE_U64: u8 = 2;
const DTYPE_U8: u8 = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset build failed: {failed} of {total} entries could not be ingested (first: {first})")]
    DatasetBuild {
        failed: usize,
        total: usize,
        first: String,
    },
    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { step: u64, term: &'static str },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
    #[error(transparent)]
    Alignment(#[from] crate::alignment::AlignmentError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Probe(Box<crate::inference::InferenceError>),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<crate::inference::InferenceError> for TrainError {
    fn from(e: crate::inference::InferenceError) -> Self {
        Self::Probe(Box::new(e))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio: PathBuf,
    pub alignment: PathBuf,
    pub speaker: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub num_speakers: usize,
}

impl Manifest {
    /// Checks that speaker ids are dense in `[0, K)` with `K >= 2`.
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Result<Self> {
        let k = entries.iter().map(|e| e.speaker + 1).max().unwrap_or(0);
        let mut seen = vec![false; k];
        for e in &entries {
            seen[e.speaker] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(TrainError::InvalidConfig(format!(
                "speaker ids must be dense; id {missing} has no utterances"
            )));
        }
        if k < 2 {
            return Err(TrainError::InvalidConfig("manifest needs at least 2 speakers".into()));
        }
        Ok(Self {
            entries,
            num_speakers: k,
        })
    }

    /// Reads JSON Lines; relative paths resolve against the manifest's
    /// directory. File existence is checked per entry at dataset build time.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let file = std::fs::File::open(path)?;
        let mut entries = Vec::new();
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut e: ManifestEntry =
                serde_json::from_str(&line).map_err(|err| TrainError::Manifest {
                    path: path.to_path_buf(),
                    line: n + 1,
                    msg: err.to_string(),
                })?;
            e.audio = base.join(&e.audio);
            e.alignment = base.join(&e.alignment);
            entries.push(e);
        }
        Self::from_entries(entries)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub name: String,
    pub speaker: usize,
    pub mel: MelSpectrogram,
    pub alignment: PhonemeAlignment,
    pub labels: Vec<PhonemeId>,
}

impl Utterance {
    pub fn new(name: String, speaker: usize, mel: MelSpectrogram, alignment: PhonemeAlignment) -> Self {
        let labels = frame_labels(&alignment);
        Self {
            name,
            speaker,
            mel,
            alignment,
            labels,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.mel.num_frames()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub num_speakers: usize,
    pub inventory: PhonemeInventory,
    pub mel_config: MelConfig,
    pub cache_hits: usize,
    /// One line per rejected manifest entry.
    pub rejected: Vec<String>,
}

impl Dataset {
    pub fn from_utterances(
        utterances: Vec<Utterance>,
        num_speakers: usize,
        inventory: PhonemeInventory,
        mel_config: MelConfig,
    ) -> Self {
        Self {
            utterances,
            num_speakers,
            inventory,
            mel_config,
            cache_hits: 0,
            rejected: Vec::new(),
        }
    }

    /// Utterance indices grouped by speaker.
    pub fn by_speaker(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_speakers];
        for (i, u) in self.utterances.iter().enumerate() {
            groups[u.speaker].push(i);
        }
        groups
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    /// Mean and standard deviation over every log-mel entry.
    pub fn mel_statistics(&self) -> (f64, f64) {
        let n: usize = self.utterances.iter().map(|u| u.mel.frames.len()).sum();
        if n == 0 {
            return (0.0, 0.0);
        }
        let values = || self.utterances.iter().flat_map(|u| u.mel.frames.iter());
        let mean = values().sum::<f64>() / n as f64;
        let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        (mean, var.sqrt())
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    pub cache_dir: Option<PathBuf>,
    pub threads: usize,
    /// Existing phoneme ids, so a held-out set shares the training labels.
    pub inventory: Option<PhonemeInventory>,
}

fn cache_key(audio: &Path, mel: &MelConfig) -> String {
    // FNV-1a over the audio path and the serialised feature config.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let cfg = serde_json::to_string(mel).unwrap_or_default();
    for b in audio.to_string_lossy().bytes().chain([0]).chain(cfg.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}.mel")
}

fn extract(entry: &ManifestEntry, mel: &MelConfig, cache: Option<&Path>) -> Result<(MelSpectrogram, bool)> {
    let cached = cache.map(|d| d.join(cache_key(&entry.audio, mel)));
    if let Some(p) = &cached {
        if p.exists() {
            if let Ok(m) = read_mel_cache(p, mel) {
                return Ok((m, true));
            }
        }
    }
    let wave = load_audio(&entry.audio, mel.sample_rate)?;
    let m = mel_spectrogram(&wave, mel)?;
    if let Some(p) = &cached {
        write_mel_cache(p, &m)?;
        // Round through f32 so cold and warm builds see identical features.
        return Ok((read_mel_cache(p, mel)?, false));
    }
    Ok((m, false))
}

/// Extracts (or loads cached) mels and parses alignments for every entry.
/// Failed entries are reported and skipped unless more than 10% fail.
pub fn build_dataset(manifest: &Manifest, mel: &MelConfig, opts: &BuildOptions) -> Result<Dataset> {
    mel.validate()?;
    if let Some(d) = &opts.cache_dir {
        std::fs::create_dir_all(d)?;
    }
    let cache = opts.cache_dir.as_deref();
    let threads = opts.threads.max(1).min(manifest.entries.len().max(1));
    let chunk = manifest.entries.len().div_ceil(threads).max(1);
    let features: Vec<Result<(MelSpectrogram, bool)>> = std::thread::scope(|s| {
        let handles: Vec<_> = manifest
            .entries
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|e| extract(e, mel, cache)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("feature worker panicked"))
            .collect()
    });
    let mut inventory = opts.inventory.clone().unwrap_or_default();
    let mut utterances = Vec::new();
    let mut rejected = Vec::new();
    let mut cache_hits = 0;
    for (entry, feat) in manifest.entries.iter().zip(features) {
        let name = entry.audio.display().to_string();
        let outcome = feat.and_then(|(m, hit)| {
            if m.num_frames() < MIN_UTTERANCE_FRAMES {
                return Err(TrainError::InvalidConfig(format!(
                    "{} frames, need at least {MIN_UTTERANCE_FRAMES}",
                    m.num_frames()
                )));
            }
            let a = parse_alignment(&entry.alignment, m.num_frames(), mel.hop_seconds(), &mut inventory)?;
            Ok((m, a, hit))
        });
        match outcome {
            Ok((m, a, hit)) => {
                cache_hits += hit as usize;
                utterances.push(Utterance::new(name, entry.speaker, m, a));
            }
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                rejected.push(format!("{name}: {e}"));
            }
        }
    }
    let total = manifest.entries.len();
    if rejected.len() as f64 > MAX_FAILURE_FRACTION * total as f64 || utterances.is_empty() {
        return Err(TrainError::DatasetBuild {
            failed: rejected.len(),
            total,
            first: rejected.first().cloned().unwrap_or_default(),
        });
    }
    Ok(Dataset {
        utterances,
        num_speakers: manifest.num_speakers,
        inventory,
        mel_config: mel.clone(),
        cache_hits,
        rejected,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub disable_adv_cls: bool,
    pub disable_tir: bool,
    pub disable_sim: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling applied before each update.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub rng_seed: u64,
    pub ablation_flags: AblationFlags,
    pub pairs: PairSampleConfig,
    pub model: ModelConfig,
    pub mel: MelConfig,
    pub optimizer: AdamConfig,
    /// Save an intermediate checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Replace `model.mel_mean`/`model.mel_std` with training-set statistics.
    pub fit_normalization: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            batch_size: 4,
            steps: 2000,
            learning_rate: 1e-3,
            rng_seed: 0,
            ablation_flags: AblationFlags::default(),
            pairs: PairSampleConfig::default(),
            model: ModelConfig::desk(),
            mel: MelConfig::default(),
            optimizer: AdamConfig::default(),
            checkpoint_every: 500,
            fit_normalization: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.steps < 1 {
            return bad("steps must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        let w = &self.weights;
        if ![w.alpha, w.beta, w.lambda].iter().all(|v| v.is_finite()) {
            return bad("loss weights must be finite");
        }
        self.pairs.validate()?;
        self.model.validate()?;
        self.mel.validate()?;
        if self.model.mel_bins != self.mel.mel_bins {
            return bad("model.mel_bins must equal mel.mel_bins");
        }
        Ok(())
    }
}

/// Adam moments keyed by tensor name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adam {
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
    pub t: u64,
}

impl Adam {
    fn new(tensors: &BTreeMap<String, Array2<f64>>) -> Self {
        let zeros: BTreeMap<_, _> = tensors
            .iter()
            .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Clips `grads` to the global norm ceiling, then applies one update.
    fn step(
        &mut self,
        tensors: &mut BTreeMap<String, &mut Array2<f64>>,
        grads: &BTreeMap<String, Array2<f64>>,
        lr: f64,
        cfg: &AdamConfig,
    ) {
        let norm = grads
            .values()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let clip = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, p) in tensors.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every tensor");
            let v = self.v.get_mut(name).expect("moment for every tensor");
            ndarray::Zip::from(&mut **p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * clip;
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
                });
        }
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub scorer: BilinearScorer,
    pub adam: Adam,
    pub config: TrainConfig,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh state. The model's speaker count, and with
    /// `fit_normalization` its input statistics, come from the dataset.
    pub fn new(config: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        let mut config = config.clone();
        config.model.num_speakers = dataset.num_speakers;
        if config.fit_normalization {
            let (mean, std) = dataset.mel_statistics();
            if std > 0.0 {
                config.model.mel_mean = mean;
                config.model.mel_std = std;
            }
        }
        config.validate()?;
        let params = init_params(&config.model, config.rng_seed)?;
        let scorer = BilinearScorer::init(config.model.speaker_dim);
        let mut all = params.tensors.clone();
        all.insert(SCORER_TENSOR.into(), scorer.w.clone());
        let adam = Adam::new(&all);
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        Ok(Self {
            params,
            scorer,
            adam,
            config,
            step: 0,
            rng,
        })
    }

    pub fn ensure_model(&self, expected: &ModelConfig) -> Result<()> {
        if &self.config.model != expected {
            return Err(TrainError::ConfigMismatch(format!(
                "checkpoint model {:?} differs from expected {:?}",
                self.config.model, expected
            )));
        }
        Ok(())
    }
}

/// One batch element: an utterance with its retrieval segments and
/// contrastive pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub utterance: usize,
    pub segments: SegmentSpec,
    pub pairs: Vec<FramePair>,
}

/// Draws `batch_size` utterances from distinct speakers (cycling through a
/// speaker permutation when the batch is larger than the speaker count).
/// The random draws do not depend on ablation flags.
pub fn sample_batch<R: Rng>(
    dataset: &Dataset,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<BatchItem>> {
    let groups = dataset.by_speaker();
    let mut speakers: Vec<usize> = (0..groups.len()).filter(|&k| !groups[k].is_empty()).collect();
    if speakers.len() < 2 {
        return Err(TrainError::InvalidConfig("dataset needs at least 2 speakers".into()));
    }
    speakers.shuffle(rng);
    let mut batch = Vec::with_capacity(config.batch_size);
    for n in 0..config.batch_size {
        let group = &groups[speakers[n % speakers.len()]];
        let utterance = group[rng.gen_range(0..group.len())];
        let u = &dataset.utterances[utterance];
        let segments = sample_segments(u.num_frames(), rng);
        let pair_cfg = PairSampleConfig {
            rng_seed: rng.gen(),
            ..config.pairs.clone()
        };
        let pairs = sample_pairs(&u.labels, &pair_cfg)?.pairs;
        batch.push(BatchItem {
            utterance,
            segments,
            pairs,
        });
    }
    Ok(batch)
}

/// Loss node to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Total,
    Recon,
    Sim,
    Style,
    AdvCls,
}

/// Forward graph of one training step.
pub struct StepGraph {
    pub recon: Var,
    pub sim: Option<Var>,
    pub style: Option<Var>,
    pub adv_cls: Option<Var>,
    pub total: Var,
    pub scorer: Var,
    pub bn: BatchNormStats,
}

fn windows(items: &[(usize, crate::losses::FrameWindow)], starts: &[usize]) -> Vec<Range<usize>> {
    items
        .iter()
        .map(|(b, w)| starts[*b] + w.start..starts[*b] + w.end())
        .collect()
}

/// Builds the full step graph on `tape`. Disabled terms are not computed.
pub fn build_step_graph(
    tape: &mut Tape,
    net: &Network,
    scorer: &BilinearScorer,
    dataset: &Dataset,
    batch: &[BatchItem],
    config: &TrainConfig,
) -> Result<StepGraph> {
    let flags = config.ablation_flags;
    let w = &config.weights;
    let utts: Vec<&Utterance> = batch.iter().map(|b| &dataset.utterances[b.utterance]).collect();
    let lengths: Vec<usize> = utts.iter().map(|u| u.num_frames()).collect();
    let seqs = pack_ranges(&lengths);
    let starts: Vec<usize> = seqs.iter().map(|r| r.start).collect();
    let mels: Vec<&Array2<f64>> = utts.iter().map(|u| &u.mel.frames).collect();
    let target = stack_rows(&mels);
    let x = net.normalized_input(tape, &target);
    let mut bn = BatchNormStats::default();
    let content = net.content(tape, x, &seqs, Mode::Train, &mut bn);

    // Phoneme-level pooling, broadcast back to frames for the decoder.
    let mut seg_ranges = Vec::new();
    let mut owner = Vec::with_capacity(target.nrows());
    for (u, &s) in utts.iter().zip(&starts) {
        for r in u.alignment.segment_ranges() {
            owner.extend(std::iter::repeat_n(seg_ranges.len(), r.len()));
            seg_ranges.push(s + r.start..s + r.end);
        }
    }
    let pooled = tape.segment_mean(content, Rc::new(seg_ranges));
    let expanded = tape.gather(pooled, Rc::new(owner));

    let speakers = net.speaker(tape, x, &seqs);
    let decoded = net.decode(tape, expanded, speakers, &seqs);
    let recon = graph::reconstruction(tape, decoded, &target);

    let sim = (!flags.disable_sim).then(|| {
        let pairs: Vec<(usize, usize, bool)> = batch
            .iter()
            .zip(&starts)
            .flat_map(|(b, &s)| b.pairs.iter().map(move |p| (s + p.i, s + p.j, p.same_phoneme)))
            .collect();
        graph::similarity(tape, content, &pairs)
    });

    let adv_cls = (!flags.disable_adv_cls).then(|| {
        let reversed = tape.grl(content, 1.0);
        let logits = net.classify(tape, reversed, &seqs);
        let targets: Vec<usize> = utts.iter().map(|u| u.speaker).collect();
        graph::cross_entropy(tape, logits, &targets)
    });

    let scorer_var = tape.leaf(scorer.w.clone());
    let style = if flags.disable_tir {
        None
    } else {
        let halves: Vec<usize> = (0..batch.len())
            .filter(|&b| batch[b].segments.seg1.is_some() && batch[b].segments.seg2.is_some())
            .collect();
        let halves = if halves.len() >= 2 { halves } else { Vec::new() };
        let whole: Vec<usize> = (0..batch.len())
            .filter(|&b| batch[b].segments.seg3.is_some())
            .collect();
        let whole = if whole.len() >= 2 { whole } else { Vec::new() };
        let mut parts: Vec<(usize, crate::losses::FrameWindow)> = Vec::new();
        parts.extend(halves.iter().map(|&b| (b, batch[b].segments.seg1.unwrap())));
        parts.extend(halves.iter().map(|&b| (b, batch[b].segments.seg2.unwrap())));
        parts.extend(whole.iter().map(|&b| (b, batch[b].segments.seg3.unwrap())));
        if parts.is_empty() {
            None
        } else {
            let ranges = windows(&parts, &starts);
            let rows: Vec<usize> = ranges.iter().flat_map(|r| r.clone()).collect();
            let xs = tape.gather(x, Rc::new(rows));
            let seg_seqs = pack_ranges(&ranges.iter().map(|r| r.len()).collect::<Vec<_>>());
            let emb = net.speaker(tape, xs, &seg_seqs);
            let h = halves.len();
            let n = whole.len();
            let pair = |tape: &mut Tape, a: Range<usize>, b: Range<usize>| {
                (tape.slice_rows(emb, a), tape.slice_rows(emb, b))
            };
            let halves_var = (h > 0).then(|| pair(tape, 0..h, h..2 * h));
            let whole_var = (n > 0).then(|| {
                let sx = tape.gather(speakers, Rc::new(whole.clone()));
                let s3 = tape.slice_rows(emb, 2 * h..2 * h + n);
                (sx, s3)
            });
            graph::style(
                tape,
                &graph::StyleEmbeddings {
                    halves: halves_var,
                    whole: whole_var,
                },
                scorer_var,
            )
        }
    };

    let mut total = recon;
    for (term, k) in [(sim, w.alpha), (style, w.beta), (adv_cls, w.lambda)] {
        if let Some(t) = term {
            let scaled = tape.scale(t, k);
            total = tape.add(total, scaled);
        }
    }
    Ok(StepGraph {
        recon,
        sim,
        style,
        adv_cls,
        total,
        scorer: scorer_var,
        bn,
    })
}

/// Loss values and gradients for every trainable tensor (including
/// [`SCORER_TENSOR`]) on a fixed batch.
pub struct StepGradients {
    pub components: LossComponents,
    pub grads: BTreeMap<String, Array2<f64>>,
    pub bn: BatchNormStats,
}

pub fn compute_gradients(
    params: &ModelParams,
    scorer: &BilinearScorer,
    dataset: &Dataset,
    batch: &[BatchItem],
    config: &TrainConfig,
    root: LossTerm,
) -> Result<StepGradients> {
    let mut tape = Tape::new();
    let net = Network::bind(params, &mut tape);
    let g = build_step_graph(&mut tape, &net, scorer, dataset, batch, config)?;
    let value = |v: Option<Var>| v.map(|v| tape.scalar(v));
    let components = LossComponents {
        recon: tape.scalar(g.recon),
        sim: value(g.sim),
        style: value(g.style),
        adv_cls: value(g.adv_cls),
    };
    let root_var = match root {
        LossTerm::Total => Some(g.total),
        LossTerm::Recon => Some(g.recon),
        LossTerm::Sim => g.sim,
        LossTerm::Style => g.style,
        LossTerm::AdvCls => g.adv_cls,
    };
    let mut grads = BTreeMap::new();
    if let Some(r) = root_var {
        let back = tape.backward(r);
        for (name, &v) in net.vars() {
            grads.insert(name.clone(), back.get_or_zeros(v, tape.shape(v)));
        }
        grads.insert(SCORER_TENSOR.to_string(), back.get_or_zeros(g.scorer, scorer.w.dim()));
    }
    Ok(StepGradients {
        components,
        grads,
        bn: g.bn,
    })
}

fn check_finite(c: &LossComponents, step: u64) -> Result<()> {
    let terms = [
        ("recon", Some(c.recon)),
        ("sim", c.sim),
        ("style", c.style),
        ("adv_cls", c.adv_cls),
    ];
    for (term, v) in terms {
        if v.is_some_and(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteLoss { step, term });
        }
    }
    Ok(())
}

/// Applies one optimiser update computed on `batch`.
pub fn train_step_on(state: &mut TrainState, dataset: &Dataset, batch: &[BatchItem]) -> Result<LossReport> {
    let g = compute_gradients(
        &state.params,
        &state.scorer,
        dataset,
        batch,
        &state.config,
        LossTerm::Total,
    )?;
    let step = state.step + 1;
    check_finite(&g.components, step)?;
    let total = total_loss(&g.components, &state.config.weights)?;
    if g.grads.values().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(TrainError::NonFiniteLoss { step, term: "gradient" });
    }
    let mut tensors: BTreeMap<String, &mut Array2<f64>> = state
        .params
        .tensors
        .iter_mut()
        .map(|(k, v)| (k.clone(), v))
        .collect();
    tensors.insert(SCORER_TENSOR.to_string(), &mut state.scorer.w);
    state
        .adam
        .step(&mut tensors, &g.grads, state.config.learning_rate, &state.config.optimizer);
    g.bn.apply(&mut state.params);
    state.step = step;
    let c = g.components;
    Ok(LossReport {
        step,
        recon: c.recon,
        sim: c.sim,
        style: c.style,
        adv_cls: c.adv_cls,
        total,
    })
}

/// Samples a batch from the state's generator and applies one update.
pub fn train_step(state: &mut TrainState, dataset: &Dataset) -> Result<LossReport> {
    let batch = sample_batch(dataset, &state.config, &mut state.rng)?;
    train_step_on(state, dataset, &batch)
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub reports: Vec<LossReport>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// Trains from scratch for `config.steps` steps. With `out_dir`, appends
/// each report to the training log and writes periodic and final
/// checkpoints there.
pub fn train(config: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let state = TrainState::new(config, dataset)?;
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
        std::fs::File::create(d.join(LOG_FILE))?;
    }
    resume(state, dataset, out_dir)
}

/// Continues training until `state.config.steps`.
pub fn resume(mut state: TrainState, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    state.config.validate()?;
    if state.config.model.num_speakers != dataset.num_speakers {
        return Err(TrainError::ConfigMismatch(format!(
            "model has {} speakers, dataset has {}",
            state.config.model.num_speakers, dataset.num_speakers
        )));
    }
    let mut log = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(d.join(LOG_FILE))?,
            )
        }
        None => None,
    };
    let mut reports = Vec::new();
    while state.step < state.config.steps {
        let r = train_step(&mut state, dataset)?;
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&r)?)?;
        }
        if r.step % 100 == 0 || r.step == state.config.steps {
            log::info!(
                "step {} recon {:.4} total {:.4}",
                r.step,
                r.recon,
                r.total
            );
        }
        let every = state.config.checkpoint_every;
        if let Some(d) = out_dir {
            if every > 0 && r.step % every == 0 && r.step < state.config.steps {
                save_checkpoint(&state, d.join(checkpoint_name(r.step)))?;
            }
        }
        reports.push(r);
    }
    if let Some(d) = out_dir {
        save_checkpoint(&state, d.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { state, reports })
}

/// The four training variants compared by [`ablate`].
pub fn ablation_variants() -> [(&'static str, AblationFlags); 4] {
    let off = AblationFlags::default();
    [
        ("full", off),
        (
            "w/o adv-cls",
            AblationFlags {
                disable_adv_cls: true,
                ..off
            },
        ),
        (
            "w/o TIR",
            AblationFlags {
                disable_tir: true,
                ..off
            },
        ),
        (
            "w/o sim",
            AblationFlags {
                disable_sim: true,
                ..off
            },
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub flags: AblationFlags,
    pub final_recon: f64,
    pub report: ProbeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub steps: u64,
    pub rows: Vec<AblationRow>,
}

/// Trains every variant with the same seed and data, then probes each on
/// (`fit`, `eval`).
pub fn ablate(
    base: &TrainConfig,
    train_set: &Dataset,
    fit: &Dataset,
    eval: &Dataset,
    probe_cfg: &ProbeConfig,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (name, flags) in ablation_variants() {
        let config = TrainConfig {
            ablation_flags: flags,
            ..base.clone()
        };
        let outcome = train(&config, train_set, None)?;
        let report = crate::inference::probe(&outcome.state.params, fit, eval, probe_cfg)?;
        log::info!("ablation {name}: {}", serde_json::to_string(&report)?);
        rows.push(AblationRow {
            variant: name.to_string(),
            flags,
            final_recon: outcome.reports.last().map_or(f64::NAN, |r| r.recon),
            report,
        });
    }
    Ok(AblationTable {
        seed: base.rng_seed,
        steps: base.steps,
        rows,
    })
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    train_config: TrainConfig,
    init_seed: u64,
}

fn put_record(buf: &mut Vec<u8>, name: &str, dtype: u8, shape: &[usize], payload: &[u8]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(dtype);
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    buf.extend_from_slice(payload);
}

fn put_f64(buf: &mut Vec<u8>, name: &str, t: &Array2<f64>) {
    let payload: Vec<u8> = t.iter().flat_map(|v| v.to_le_bytes()).collect();
    put_record(buf, name, DTYPE_F64, &[t.nrows(), t.ncols()], &payload);
}

fn put_u64(buf: &mut Vec<u8>, name: &str, values: &[u64]) {
    let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    put_record(buf, name, DTYPE_U64, &[values.len()], &payload);
}

pub fn checkpoint_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut records = Vec::new();
    let mut count = 0u32;
    let mut add = |f: &mut dyn FnMut(&mut Vec<u8>)| {
        f(&mut records);
        count += 1;
    };
    for (k, t) in &state.params.tensors {
        add(&mut |b| put_f64(b, &format!("param/{k}"), t));
    }
    for (k, t) in &state.params.buffers {
        add(&mut |b| put_f64(b, &format!("buffer/{k}"), t));
    }
    add(&mut |b| put_f64(b, "scorer/w", &state.scorer.w));
    for (k, t) in &state.adam.m {
        add(&mut |b| put_f64(b, &format!("adam_m/{k}"), t));
    }
    for (k, t) in &state.adam.v {
        add(&mut |b| put_f64(b, &format!("adam_v/{k}"), t));
    }
    add(&mut |b| put_u64(b, "state/step", &[state.step]));
    add(&mut |b| put_u64(b, "state/adam_t", &[state.adam.t]));
    let seed = state.rng.get_seed();
    add(&mut |b| put_record(b, "state/rng_seed", DTYPE_U8, &[seed.len()], &seed));
    add(&mut |b| put_u64(b, "state/rng_stream", &[state.rng.get_stream()]));
    let pos = state.rng.get_word_pos();
    add(&mut |b| put_u64(b, "state/rng_word_pos", &[pos as u64, (pos >> 64) as u64]));
    let trailer = serde_json::to_vec(&Trailer {
        train_config: state.config.clone(),
        init_seed: state.params.seed,
    })?;
    let mut buf = Vec::with_capacity(records.len() + trailer.len() + 32);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&records);
    buf.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
    buf.extend_from_slice(&trailer);
    Ok(buf)
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let bytes = checkpoint_bytes(state)?;
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(TrainError::CorruptCheckpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

enum Record {
    F64(Array2<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::CorruptCheckpoint(msg.into())
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len()).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut records = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| corrupt("record name is not UTF-8"))?
            .to_string();
        let dtype = r.take(1)?[0];
        let ndim = r.u32()? as usize;
        if ndim > 2 {
            return Err(corrupt(format!("{name}: rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let rec = match dtype {
            DTYPE_F64 if ndim == 2 => {
                let raw = r.take(len.checked_mul(8).ok_or_else(|| corrupt("size overflow"))?)?;
                let vals = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
                Record::F64(
                    Array2::from_shape_vec((shape[0], shape[1]), vals.collect())
                        .map_err(|e| corrupt(e.to_string()))?,
                )
            }
            DTYPE_U64 => {
                let raw = r.take(len.checked_mul(8).ok_or_else(|| corrupt("size overflow"))?)?;
                Record::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            DTYPE_U8 => Record::U8(r.take(len)?.to_vec()),
            _ => return Err(corrupt(format!("{name}: bad dtype {dtype}"))),
        };
        records.insert(name, rec);
    }
    let trailer_len = r.u64()? as usize;
    let trailer: Trailer = serde_json::from_slice(r.take(trailer_len)?).map_err(|e| corrupt(e.to_string()))?;
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }

    let template = init_params(&trailer.train_config.model, trailer.init_seed)?;
    let mut take_f64 = |name: String, shape: (usize, usize)| -> Result<Array2<f64>> {
        match records.remove(&name) {
            Some(Record::F64(t)) if t.dim() == shape => Ok(t),
            Some(Record::F64(t)) => Err(TrainError::ConfigMismatch(format!(
                "{name} has shape {:?}, config implies {shape:?}",
                t.dim()
            ))),
            _ => Err(corrupt(format!("missing tensor {name}"))),
        }
    };
    let mut tensors = BTreeMap::new();
    for (k, t) in &template.tensors {
        tensors.insert(k.clone(), take_f64(format!("param/{k}"), t.dim())?);
    }
    let mut buffers = BTreeMap::new();
    for (k, t) in &template.buffers {
        buffers.insert(k.clone(), take_f64(format!("buffer/{k}"), t.dim())?);
    }
    let d = trailer.train_config.model.speaker_dim;
    let scorer = BilinearScorer {
        w: take_f64("scorer/w".into(), (d, d))?,
    };
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let shapes = tensors
        .iter()
        .map(|(k, t)| (k.clone(), t.dim()))
        .chain([(SCORER_TENSOR.to_string(), (d, d))]);
    for (k, shape) in shapes {
        m.insert(k.clone(), take_f64(format!("adam_m/{k}"), shape)?);
        v.insert(k.clone(), take_f64(format!("adam_v/{k}"), shape)?);
    }
    let mut scalar = |name: &str, n: usize| match records.remove(name) {
        Some(Record::U64(x)) if x.len() == n => Ok(x),
        _ => Err(corrupt(format!("missing {name}"))),
    };
    let step = scalar("state/step", 1)?[0];
    let t = scalar("state/adam_t", 1)?[0];
    let stream = scalar("state/rng_stream", 1)?[0];
    let pos = scalar("state/rng_word_pos", 2)?;
    let seed: [u8; 32] = match records.remove("state/rng_seed") {
        Some(Record::U8(s)) if s.len() == 32 => s.try_into().unwrap(),
        _ => return Err(corrupt("missing state/rng_seed")),
    };
    if let Some(extra) = records.keys().next() {
        return Err(corrupt(format!("unexpected record {extra}")));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos[0] as u128 | ((pos[1] as u128) << 64));
    Ok(TrainState {
        params: ModelParams {
            config: trailer.train_config.model.clone(),
            seed: trailer.init_seed,
            tensors,
            buffers,
        },
        scorer,
        adam: Adam { m, v, t },
        config: trailer.train_config,
        step,
        rng,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
