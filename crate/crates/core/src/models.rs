//! Content encoder, speaker encoder, decoder and adversarial speaker
//! classifier, plus the bilinear scorer used by the mutual-information
//! objective.
//!
//! Networks operate on packed batches: the frames of every utterance are
//! stacked into one matrix and `seqs` records each utterance's row range.
//! Convolutions and recurrences never cross a sequence boundary.

use crate::autodiff::{Tape, Var};
use crate::dsp::{MelConfig, MelSpectrogram};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ops::Range;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("utterance has {frames} frames, speaker encoder needs at least {min}")]
    UtteranceTooShort { frames: usize, min: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input")]
    Empty,
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub mel_bins: usize,
    pub kernel_size: usize,
    pub content_channels: usize,
    pub content_conv_layers: usize,
    /// Hidden size of each direction of the content recurrence.
    pub content_rnn_hidden: usize,
    pub content_dim: usize,
    pub speaker_channels: usize,
    pub speaker_conv_layers: usize,
    pub speaker_dim: usize,
    pub decoder_rnn_hidden: usize,
    pub decoder_channels: usize,
    pub decoder_conv_layers: usize,
    pub classifier_hidden: usize,
    pub num_speakers: usize,
    pub min_speaker_frames: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Fixed affine normalisation of log-mel inputs and decoder outputs.
    pub mel_mean: f64,
    pub mel_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mel_bins: 80,
            kernel_size: 5,
            content_channels: 256,
            content_conv_layers: 3,
            content_rnn_hidden: 128,
            content_dim: 64,
            speaker_channels: 256,
            speaker_conv_layers: 3,
            speaker_dim: 128,
            decoder_rnn_hidden: 512,
            decoder_channels: 512,
            decoder_conv_layers: 2,
            classifier_hidden: 256,
            num_speakers: 4,
            min_speaker_frames: 16,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            mel_mean: -5.0,
            mel_std: 3.0,
        }
    }
}

impl ModelConfig {
    /// Reduced widths for single-core CPU training on small corpora.
    pub fn desk() -> Self {
        Self {
            content_channels: 64,
            content_rnn_hidden: 32,
            content_dim: 16,
            speaker_channels: 64,
            speaker_dim: 32,
            decoder_rnn_hidden: 96,
            decoder_channels: 96,
            classifier_hidden: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.kernel_size.is_multiple_of(2) {
            return bad("kernel_size must be odd");
        }
        let dims = [
            self.mel_bins,
            self.content_channels,
            self.content_rnn_hidden,
            self.content_dim,
            self.speaker_channels,
            self.speaker_dim,
            self.decoder_rnn_hidden,
            self.decoder_channels,
            self.classifier_hidden,
        ];
        if dims.contains(&0) {
            return bad("all layer widths must be positive");
        }
        if self.num_speakers < 2 {
            return bad("need at least 2 speakers");
        }
        if self.min_speaker_frames == 0 {
            return bad("min_speaker_frames must be positive");
        }
        if !(self.mel_std > 0.0) || !self.mel_mean.is_finite() {
            return bad("mel normalisation must be finite with positive std");
        }
        Ok(())
    }

    /// Shapes of every trainable tensor, in a fixed order.
    fn param_shapes(&self) -> Vec<(String, (usize, usize), Init)> {
        let k = self.kernel_size;
        let mut v = Vec::new();
        let conv = |v: &mut Vec<_>, name: String, cin: usize, cout: usize| {
            v.push((format!("{name}.w"), (k * cin, cout), Init::Uniform(k * cin)));
            v.push((format!("{name}.b"), (1, cout), Init::Zero));
        };
        let mut cin = self.mel_bins;
        for i in 0..self.content_conv_layers {
            conv(&mut v, format!("content.conv{i}"), cin, self.content_channels);
            v.push((format!("content.bn{i}.gamma"), (1, self.content_channels), Init::One));
            v.push((format!("content.bn{i}.beta"), (1, self.content_channels), Init::Zero));
            cin = self.content_channels;
        }
        for dir in ["gru_f", "gru_b"] {
            gru_shapes(&mut v, &format!("content.{dir}"), cin, self.content_rnn_hidden);
        }
        linear_shapes(&mut v, "content.out", 2 * self.content_rnn_hidden, self.content_dim);

        let mut cin = self.mel_bins;
        for i in 0..self.speaker_conv_layers {
            conv(&mut v, format!("speaker.conv{i}"), cin, self.speaker_channels);
            cin = self.speaker_channels;
        }
        linear_shapes(&mut v, "speaker.out", cin, self.speaker_dim);

        gru_shapes(
            &mut v,
            "decoder.gru",
            self.content_dim + self.speaker_dim,
            self.decoder_rnn_hidden,
        );
        let mut cin = self.decoder_rnn_hidden;
        for i in 0..self.decoder_conv_layers {
            conv(&mut v, format!("decoder.conv{i}"), cin, self.decoder_channels);
            cin = self.decoder_channels;
        }
        linear_shapes(&mut v, "decoder.out", cin, self.mel_bins);

        linear_shapes(&mut v, "classifier.l1", self.content_dim, self.classifier_hidden);
        linear_shapes(&mut v, "classifier.l2", self.classifier_hidden, self.num_speakers);
        v
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(usize),
    Zero,
    One,
}

fn linear_shapes(v: &mut Vec<(String, (usize, usize), Init)>, name: &str, i: usize, o: usize) {
    v.push((format!("{name}.w"), (i, o), Init::Uniform(i)));
    v.push((format!("{name}.b"), (1, o), Init::Zero));
}

fn gru_shapes(v: &mut Vec<(String, (usize, usize), Init)>, name: &str, i: usize, h: usize) {
    v.push((format!("{name}.wi"), (i, 3 * h), Init::Uniform(h)));
    v.push((format!("{name}.bi"), (1, 3 * h), Init::Zero));
    v.push((format!("{name}.wh"), (h, 3 * h), Init::Uniform(h)));
    v.push((format!("{name}.bh"), (1, 3 * h), Init::Zero));
}

/// Which network a parameter belongs to, from its name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    ContentEncoder,
    SpeakerEncoder,
    Decoder,
    Classifier,
    Scorer,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        match name.split('.').next()? {
            "content" => Some(Self::ContentEncoder),
            "speaker" => Some(Self::SpeakerEncoder),
            "decoder" => Some(Self::Decoder),
            "classifier" => Some(Self::Classifier),
            "scorer" => Some(Self::Scorer),
            _ => None,
        }
    }
}

/// Trainable tensors of all four networks plus batch-norm running
/// statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub seed: u64,
    pub tensors: BTreeMap<String, Array2<f64>>,
    pub buffers: BTreeMap<String, Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilinearScorer {
    pub w: Array2<f64>,
}

impl BilinearScorer {
    pub fn identity(dim: usize) -> Self {
        Self {
            w: Array2::eye(dim),
        }
    }

    pub fn init(dim: usize) -> Self {
        Self {
            w: Array2::eye(dim) / (dim as f64).sqrt(),
        }
    }
}

pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape, init) in config.param_shapes() {
        let t = match init {
            Init::Zero => Array2::zeros(shape),
            Init::One => Array2::ones(shape),
            Init::Uniform(fan_in) => {
                let a = 1.0 / (fan_in as f64).sqrt();
                Array2::from_shape_simple_fn(shape, || rng.gen_range(-a..a))
            }
        };
        tensors.insert(name, t);
    }
    let mut buffers = BTreeMap::new();
    for i in 0..config.content_conv_layers {
        let c = config.content_channels;
        buffers.insert(format!("content.bn{i}.mean"), Array2::zeros((1, c)));
        buffers.insert(format!("content.bn{i}.var"), Array2::ones((1, c)));
    }
    Ok(ModelParams {
        config: config.clone(),
        seed,
        tensors,
        buffers,
    })
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .values()
            .chain(self.buffers.values())
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContentEmbedding {
    pub frames: Array2<f64>,
}

impl ContentEmbedding {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub vector: Array1<f64>,
}

impl SpeakerEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// Element-wise mean of several embeddings.
    pub fn average(items: &[SpeakerEmbedding]) -> Result<Self> {
        let first = items.first().ok_or(ModelError::Empty)?;
        let mut acc = Array1::zeros(first.dim());
        for e in items {
            if e.dim() != first.dim() {
                return Err(ModelError::DimensionMismatch {
                    expected: first.dim(),
                    got: e.dim(),
                });
            }
            acc += &e.vector;
        }
        Ok(Self {
            vector: acc / items.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierLogits {
    pub scores: Array1<f64>,
}

impl ClassifierLogits {
    pub fn argmax(&self) -> usize {
        argmax(self.scores.iter().copied())
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    values
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Batch-norm behaviour of the content encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalise with batch statistics and record them.
    Train,
    /// Normalise with running statistics.
    Eval,
}

/// Batch statistics observed in training mode, keyed by buffer prefix.
#[derive(Debug, Default, Clone)]
pub struct BatchNormStats {
    pub entries: Vec<(String, Array1<f64>, Array1<f64>)>,
}

impl BatchNormStats {
    /// `running = (1 - m) * running + m * batch`
    pub fn apply(&self, params: &mut ModelParams) {
        let m = params.config.bn_momentum;
        for (prefix, mean, var) in &self.entries {
            for (suffix, batch) in [("mean", mean), ("var", var)] {
                if let Some(buf) = params.buffers.get_mut(&format!("{prefix}.{suffix}")) {
                    let updated = &buf.row(0) * (1.0 - m) + batch * m;
                    buf.row_mut(0).assign(&updated);
                }
            }
        }
    }
}

/// Row ranges of sequences stacked back to back.
pub fn pack_ranges(lengths: &[usize]) -> Rc<Vec<Range<usize>>> {
    let mut start = 0;
    Rc::new(
        lengths
            .iter()
            .map(|&l| {
                let r = start..start + l;
                start += l;
                r
            })
            .collect(),
    )
}

/// For each packed row, the index of the sequence it belongs to.
pub fn row_owner(seqs: &[Range<usize>]) -> Vec<usize> {
    seqs.iter()
        .enumerate()
        .flat_map(|(k, r)| std::iter::repeat_n(k, r.len()))
        .collect()
}

pub fn stack_rows(parts: &[&Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("stack_rows: column mismatch")
}

/// Model parameters bound to tape leaves for one forward/backward pass.
pub struct Network<'p> {
    pub params: &'p ModelParams,
    vars: BTreeMap<String, Var>,
}

impl<'p> Network<'p> {
    pub fn bind(params: &'p ModelParams, tape: &mut Tape) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        Self { params, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    fn cfg(&self) -> &ModelConfig {
        &self.params.config
    }

    fn linear(&self, tape: &mut Tape, x: Var, name: &str) -> Var {
        let y = tape.matmul(x, self.var(&format!("{name}.w")));
        tape.add_row(y, self.var(&format!("{name}.b")))
    }

    fn conv(&self, tape: &mut Tape, x: Var, name: &str, seqs: &Rc<Vec<Range<usize>>>) -> Var {
        let cols = tape.im2col(x, self.cfg().kernel_size, seqs.clone());
        self.linear(tape, cols, name)
    }

    fn gru(
        &self,
        tape: &mut Tape,
        x: Var,
        name: &str,
        seqs: &Rc<Vec<Range<usize>>>,
        reverse: bool,
    ) -> Var {
        let xp = tape.matmul(x, self.var(&format!("{name}.wi")));
        let xp = tape.add_row(xp, self.var(&format!("{name}.bi")));
        tape.gru(
            xp,
            self.var(&format!("{name}.wh")),
            self.var(&format!("{name}.bh")),
            seqs.clone(),
            reverse,
        )
    }

    fn batch_norm(
        &self,
        tape: &mut Tape,
        x: Var,
        name: &str,
        mode: Mode,
        stats: &mut BatchNormStats,
    ) -> Var {
        let eps = self.cfg().bn_eps;
        let normed = match mode {
            Mode::Train => {
                let mean = tape.mean_rows(x);
                let centered = tape.sub_row(x, mean);
                let sq = tape.square(centered);
                let var = tape.mean_rows(sq);
                stats.entries.push((
                    name.to_string(),
                    tape.value(mean).row(0).to_owned(),
                    tape.value(var).row(0).to_owned(),
                ));
                let inv = tape.rsqrt(var, eps);
                tape.mul_row(centered, inv)
            }
            Mode::Eval => {
                let mean = &self.params.buffers[&format!("{name}.mean")];
                let var = &self.params.buffers[&format!("{name}.var")];
                let mean = tape.leaf(mean.clone());
                let inv = tape.leaf(var.mapv(|v| 1.0 / (v + eps).sqrt()));
                let centered = tape.sub_row(x, mean);
                tape.mul_row(centered, inv)
            }
        };
        let y = tape.mul_row(normed, self.var(&format!("{name}.gamma")));
        tape.add_row(y, self.var(&format!("{name}.beta")))
    }

    /// `(x - mel_mean) / mel_std` on a constant input.
    pub fn normalized_input(&self, tape: &mut Tape, mels: &Array2<f64>) -> Var {
        let (mu, sd) = (self.cfg().mel_mean, self.cfg().mel_std);
        tape.leaf(mels.mapv(|v| (v - mu) / sd))
    }

    /// Convolutional front of the content encoder (before the recurrence).
    pub fn content_conv_features(
        &self,
        tape: &mut Tape,
        x: Var,
        seqs: &Rc<Vec<Range<usize>>>,
        mode: Mode,
        stats: &mut BatchNormStats,
    ) -> Var {
        let mut h = x;
        for i in 0..self.cfg().content_conv_layers {
            h = self.conv(tape, h, &format!("content.conv{i}"), seqs);
            h = self.batch_norm(tape, h, &format!("content.bn{i}"), mode, stats);
            h = tape.relu(h);
        }
        h
    }

    /// Frame-level content features, `N x content_dim`.
    pub fn content(
        &self,
        tape: &mut Tape,
        x: Var,
        seqs: &Rc<Vec<Range<usize>>>,
        mode: Mode,
        stats: &mut BatchNormStats,
    ) -> Var {
        let h = self.content_conv_features(tape, x, seqs, mode, stats);
        let fwd = self.gru(tape, h, "content.gru_f", seqs, false);
        let bwd = self.gru(tape, h, "content.gru_b", seqs, true);
        let both = tape.concat_cols(&[fwd, bwd]);
        self.linear(tape, both, "content.out")
    }

    /// One speaker embedding per sequence, `seqs.len() x speaker_dim`.
    pub fn speaker(&self, tape: &mut Tape, x: Var, seqs: &Rc<Vec<Range<usize>>>) -> Var {
        let mut h = x;
        for i in 0..self.cfg().speaker_conv_layers {
            h = self.conv(tape, h, &format!("speaker.conv{i}"), seqs);
            h = tape.relu(h);
        }
        let pooled = tape.segment_mean(h, seqs.clone());
        self.linear(tape, pooled, "speaker.out")
    }

    /// Predicted log-mel frames (denormalised), `N x mel_bins`. `speakers`
    /// holds one row per sequence and is broadcast over its frames.
    pub fn decode(
        &self,
        tape: &mut Tape,
        content: Var,
        speakers: Var,
        seqs: &Rc<Vec<Range<usize>>>,
    ) -> Var {
        let spk = tape.gather(speakers, Rc::new(row_owner(seqs)));
        let joined = tape.concat_cols(&[content, spk]);
        let mut h = self.gru(tape, joined, "decoder.gru", seqs, false);
        for i in 0..self.cfg().decoder_conv_layers {
            h = self.conv(tape, h, &format!("decoder.conv{i}"), seqs);
            h = tape.relu(h);
        }
        let y = self.linear(tape, h, "decoder.out");
        let (mu, sd) = (self.cfg().mel_mean, self.cfg().mel_std);
        let y = tape.scale(y, sd);
        let offset = tape.leaf(Array2::from_elem((1, self.cfg().mel_bins), mu));
        tape.add_row(y, offset)
    }

    /// Speaker logits from temporally mean-pooled content, one row per
    /// sequence.
    pub fn classify(&self, tape: &mut Tape, content: Var, seqs: &Rc<Vec<Range<usize>>>) -> Var {
        let pooled = tape.segment_mean(content, seqs.clone());
        let h = self.linear(tape, pooled, "classifier.l1");
        let h = tape.relu(h);
        self.linear(tape, h, "classifier.l2")
    }
}

fn check_bins(params: &ModelParams, m: &MelSpectrogram) -> Result<()> {
    if m.num_bins() != params.config.mel_bins {
        return Err(ModelError::DimensionMismatch {
            expected: params.config.mel_bins,
            got: m.num_bins(),
        });
    }
    if m.num_frames() == 0 {
        return Err(ModelError::Empty);
    }
    Ok(())
}

/// Eval-mode content encoding of one utterance.
pub fn content_encode(params: &ModelParams, m: &MelSpectrogram) -> Result<ContentEmbedding> {
    check_bins(params, m)?;
    let mut tape = Tape::new();
    let net = Network::bind(params, &mut tape);
    let seqs = pack_ranges(&[m.num_frames()]);
    let x = net.normalized_input(&mut tape, &m.frames);
    let c = net.content(&mut tape, x, &seqs, Mode::Eval, &mut BatchNormStats::default());
    Ok(ContentEmbedding {
        frames: tape.value(c).clone(),
    })
}

pub fn speaker_encode(params: &ModelParams, m: &MelSpectrogram) -> Result<SpeakerEmbedding> {
    check_bins(params, m)?;
    let min = params.config.min_speaker_frames;
    if m.num_frames() < min {
        return Err(ModelError::UtteranceTooShort {
            frames: m.num_frames(),
            min,
        });
    }
    let mut tape = Tape::new();
    let net = Network::bind(params, &mut tape);
    let seqs = pack_ranges(&[m.num_frames()]);
    let x = net.normalized_input(&mut tape, &m.frames);
    let s = net.speaker(&mut tape, x, &seqs);
    Ok(SpeakerEmbedding {
        vector: tape.value(s).row(0).to_owned(),
    })
}

pub fn decode(
    params: &ModelParams,
    c: &ContentEmbedding,
    s: &SpeakerEmbedding,
    mel_config: &MelConfig,
) -> Result<MelSpectrogram> {
    let cfg = &params.config;
    if c.num_frames() == 0 {
        return Err(ModelError::Empty);
    }
    if c.dim() != cfg.content_dim {
        return Err(ModelError::DimensionMismatch {
            expected: cfg.content_dim,
            got: c.dim(),
        });
    }
    if s.dim() != cfg.speaker_dim {
        return Err(ModelError::DimensionMismatch {
            expected: cfg.speaker_dim,
            got: s.dim(),
        });
    }
    let mut tape = Tape::new();
    let net = Network::bind(params, &mut tape);
    let seqs = pack_ranges(&[c.num_frames()]);
    let cv = tape.leaf(c.frames.clone());
    let sv = tape.leaf(s.vector.clone().insert_axis(Axis(0)));
    let y = net.decode(&mut tape, cv, sv, &seqs);
    MelSpectrogram::from_frames(tape.value(y).clone(), mel_config.clone())
        .map_err(|e| ModelError::InvalidConfig(e.to_string()))
}

pub fn classify_speaker(params: &ModelParams, c: &ContentEmbedding) -> Result<ClassifierLogits> {
    if c.num_frames() == 0 {
        return Err(ModelError::Empty);
    }
    let mut tape = Tape::new();
    let net = Network::bind(params, &mut tape);
    let seqs = pack_ranges(&[c.num_frames()]);
    let cv = tape.leaf(c.frames.clone());
    let logits = net.classify(&mut tape, cv, &seqs);
    Ok(ClassifierLogits {
        scores: tape.value(logits).row(0).to_owned(),
    })
}

/// Gradient reversal, forward direction: the identity.
pub fn grl_forward(x: &Array2<f64>) -> Array2<f64> {
    x.clone()
}

/// Gradient reversal, backward direction: `-scale * upstream`.
pub fn grl_backward(upstream: &Array2<f64>, scale: f64) -> Array2<f64> {
    upstream.mapv(|g| -scale * g)
}

/// `u^T W v`
pub fn bilinear_score(
    scorer: &BilinearScorer,
    u: &SpeakerEmbedding,
    v: &SpeakerEmbedding,
) -> Result<f64> {
    let d = scorer.w.nrows();
    for got in [scorer.w.ncols(), u.dim(), v.dim()] {
        if got != d {
            return Err(ModelError::DimensionMismatch { expected: d, got });
        }
    }
    Ok(u.vector.dot(&scorer.w.dot(&v.vector)))
}
