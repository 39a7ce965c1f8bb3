//! Voice conversion and representation probes.

use crate::alignment::{compress, expand, sample_pairs, PairSampleConfig, PhonemeAlignment};
use crate::dsp::{griffin_lim, load_audio, mcd, mel_spectrogram, write_wav, MelSpectrogram, Waveform};
use crate::losses::cosine_similarity;
use crate::models::{content_encode, decode, speaker_encode, ContentEmbedding, ModelParams, SpeakerEmbedding};
use crate::training::{load_checkpoint, Dataset, TrainConfig};
use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

/// Cepstral order used for every MCD figure reported here.
pub const MCD_ORDER: usize = 13;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("checkpoint does not match the input: {0}")]
    CheckpointMismatch(String),
    #[error("utterance has {frames} frames, need at least {min}")]
    UtteranceTooShort { frames: usize, min: usize },
    #[error("dataset too small for probing: {0}")]
    DatasetTooSmall(String),
    #[error("no target reference given")]
    NoReference,
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Alignment(#[from] crate::alignment::AlignmentError),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

fn ensure_length(params: &ModelParams, m: &MelSpectrogram) -> Result<()> {
    let min = params.config.min_speaker_frames;
    if m.num_frames() < min {
        return Err(InferenceError::UtteranceTooShort {
            frames: m.num_frames(),
            min,
        });
    }
    if m.num_bins() != params.config.mel_bins {
        return Err(InferenceError::CheckpointMismatch(format!(
            "model expects {} mel bins, input has {}",
            params.config.mel_bins,
            m.num_bins()
        )));
    }
    Ok(())
}

/// Content of `source` decoded with the (averaged) speaker embedding of
/// `targets`. With an alignment the content is pooled per phoneme and
/// broadcast back, as in training; without one the raw frame features are
/// used.
pub fn convert_mel(
    params: &ModelParams,
    source: &MelSpectrogram,
    targets: &[&MelSpectrogram],
    source_alignment: Option<&PhonemeAlignment>,
) -> Result<MelSpectrogram> {
    if targets.is_empty() {
        return Err(InferenceError::NoReference);
    }
    ensure_length(params, source)?;
    let embeddings = targets
        .iter()
        .map(|t| {
            ensure_length(params, t)?;
            Ok(speaker_encode(params, t)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let speaker = SpeakerEmbedding::average(&embeddings)?;
    let mut content = content_encode(params, source)?;
    if let Some(a) = source_alignment {
        let pooled = compress(content.frames.view(), a)?;
        content = ContentEmbedding {
            frames: expand(pooled.view(), a)?,
        };
    }
    Ok(decode(params, &content, &speaker, &source.config)?)
}

/// Self-conversion: the utterance decoded with its own speaker embedding.
pub fn reconstruct(
    params: &ModelParams,
    m: &MelSpectrogram,
    alignment: Option<&PhonemeAlignment>,
) -> Result<MelSpectrogram> {
    convert_mel(params, m, &[m], alignment)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionRequest {
    pub source_audio: PathBuf,
    /// One or more reference recordings of the target speaker; several are
    /// averaged in embedding space.
    pub target_references: Vec<PathBuf>,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
    pub vocoder_iterations: usize,
}

pub struct Conversion {
    pub mel: MelSpectrogram,
    pub waveform: Waveform,
}

/// Runs the conversion from files and writes the waveform to `req.output`.
pub fn convert(req: &ConversionRequest) -> Result<Conversion> {
    let state = load_checkpoint(&req.checkpoint)?;
    convert_with(&state.params, &state.config, req)
}

pub fn convert_with(params: &ModelParams, config: &TrainConfig, req: &ConversionRequest) -> Result<Conversion> {
    let mel_cfg = &config.mel;
    let load = |p: &PathBuf| -> Result<MelSpectrogram> {
        let w = load_audio(p, mel_cfg.sample_rate)?;
        Ok(mel_spectrogram(&w, mel_cfg)?)
    };
    let source = load(&req.source_audio)?;
    let targets = req
        .target_references
        .iter()
        .map(load)
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&MelSpectrogram> = targets.iter().collect();
    let mel = convert_mel(params, &source, &refs, None)?;
    let waveform = griffin_lim(&mel, req.vocoder_iterations.max(1))?;
    write_wav(&req.output, &waveform)?;
    Ok(Conversion { mel, waveform })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeFitConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeFitConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.05,
            l2: 1e-3,
        }
    }
}

/// Multinomial logistic regression on standardised features, fitted by
/// full-batch Adam from a zero start.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    mean: Array1<f64>,
    scale: Array1<f64>,
    w: Array2<f64>,
    b: Array1<f64>,
}

fn softmax_rows(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    z
}

impl LinearProbe {
    pub fn fit(x: &Array2<f64>, y: &[usize], classes: usize, cfg: &ProbeFitConfig) -> Self {
        let (n, d) = x.dim();
        let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(d));
        let scale = x
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-12 { 1.0 / s } else { 1.0 });
        let xs = (x - &mean) * &scale;
        let mut onehot = Array2::<f64>::zeros((n, classes));
        for (i, &c) in y.iter().enumerate() {
            onehot[[i, c]] = 1.0;
        }
        let mut w = Array2::<f64>::zeros((d, classes));
        let mut b = Array1::<f64>::zeros(classes);
        let (mut mw, mut vw) = (w.clone(), w.clone());
        let (mut mb, mut vb) = (b.clone(), b.clone());
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        for t in 1..=cfg.epochs {
            let p = softmax_rows(xs.dot(&w) + &b);
            let err = (p - &onehot) / n as f64;
            let gw = xs.t().dot(&err) + &(&w * cfg.l2);
            let gb = err.sum_axis(Axis(0));
            let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
            mw = &mw * b1 + &gw * (1.0 - b1);
            vw = &vw * b2 + &(&gw * &gw) * (1.0 - b2);
            mb = &mb * b1 + &gb * (1.0 - b1);
            vb = &vb * b2 + &(&gb * &gb) * (1.0 - b2);
            w -= &(cfg.learning_rate * (&mw / c1) / ((&vw / c2).mapv(f64::sqrt) + eps));
            b -= &(cfg.learning_rate * (&mb / c1) / ((&vb / c2).mapv(f64::sqrt) + eps));
        }
        Self { mean, scale, w, b }
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        let z = ((x - &self.mean) * &self.scale).dot(&self.w) + &self.b;
        z.rows()
            .into_iter()
            .map(|r| crate::models::argmax(r.iter().copied()))
            .collect()
    }

    pub fn accuracy(&self, x: &Array2<f64>, y: &[usize]) -> f64 {
        if y.is_empty() {
            return 0.0;
        }
        let hits = self.predict(x).iter().zip(y).filter(|(a, b)| a == b).count();
        hits as f64 / y.len() as f64
    }
}

/// Utterance-level summary of a mel: per-bin mean followed by per-bin
/// standard deviation over frames.
pub fn mel_summary(m: &MelSpectrogram) -> Array1<f64> {
    let mean = m.frames.mean_axis(Axis(0)).expect("non-empty mel");
    let std = m.frames.std_axis(Axis(0), 0.0);
    ndarray::concatenate(Axis(0), &[mean.view(), std.view()]).expect("same rank")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub seed: u64,
    /// Frames per utterance fed to the content probe.
    pub frames_per_utterance: usize,
    pub pairs_per_utterance: usize,
    pub fit: ProbeFitConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames_per_utterance: 64,
            pairs_per_utterance: 256,
            fit: ProbeFitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Frame-level linear probe from content features to speaker; lower
    /// means less speaker information.
    pub content_probe_speaker_accuracy: f64,
    /// Utterance-level linear probe from speaker embeddings to speaker.
    pub speaker_probe_accuracy: f64,
    pub chance_accuracy: f64,
    pub intra_phoneme_sim: f64,
    pub inter_phoneme_sim: f64,
    /// Mean cosine between speaker embeddings of the two halves of the
    /// same utterance.
    pub segment_style_sim: f64,
    /// Same, with halves taken from utterances of different speakers.
    pub cross_speaker_style_sim: f64,
    /// Mean MCD of alignment-free reconstructions of the evaluation set.
    pub recon_mcd: f64,
}

fn check_probe_set(ds: &Dataset, role: &str) -> Result<()> {
    let groups = ds.by_speaker();
    let populated = groups.iter().filter(|g| !g.is_empty()).count();
    if populated < 2 {
        return Err(InferenceError::DatasetTooSmall(format!("{role} set has {populated} speakers")));
    }
    if let Some(g) = groups.iter().find(|g| !g.is_empty() && g.len() < 2) {
        return Err(InferenceError::DatasetTooSmall(format!(
            "{role} set has a speaker with {} utterance(s)",
            g.len()
        )));
    }
    Ok(())
}

/// Splits each speaker's utterances alternately into fit and evaluation
/// halves and probes. Needs at least 4 utterances per speaker.
pub fn probe_split(params: &ModelParams, ds: &Dataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let groups = ds.by_speaker();
    if groups.iter().filter(|g| !g.is_empty()).count() < 2 || groups.iter().any(|g| !g.is_empty() && g.len() < 4) {
        return Err(InferenceError::DatasetTooSmall(
            "need at least 2 speakers with 4 utterances each".into(),
        ));
    }
    let mut fit = ds.clone();
    let mut eval = ds.clone();
    fit.utterances.clear();
    eval.utterances.clear();
    for g in groups {
        for (k, &i) in g.iter().enumerate() {
            let target = if k % 2 == 0 { &mut fit } else { &mut eval };
            target.utterances.push(ds.utterances[i].clone());
        }
    }
    probe(params, &fit, &eval, cfg)
}

/// Linear probes are fitted on `fit` and scored on `eval`; similarity and
/// MCD figures come from `eval` alone.
pub fn probe(params: &ModelParams, fit: &Dataset, eval: &Dataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    check_probe_set(fit, "fit")?;
    check_probe_set(eval, "evaluation")?;
    let classes = fit.num_speakers.max(eval.num_speakers);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let contents = |ds: &Dataset| -> Result<Vec<ContentEmbedding>> {
        ds.utterances
            .iter()
            .map(|u| Ok(content_encode(params, &u.mel)?))
            .collect()
    };
    let fit_content = contents(fit)?;
    let eval_content = contents(eval)?;

    let mut frames = |ds: &Dataset, cs: &[ContentEmbedding]| -> (Array2<f64>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (u, c) in ds.utterances.iter().zip(cs) {
            let t = c.num_frames();
            let k = cfg.frames_per_utterance.min(t);
            let mut idx = sample(&mut rng, t, k).into_vec();
            idx.sort_unstable();
            for i in idx {
                rows.push(c.frames.row(i).to_owned());
                labels.push(u.speaker);
            }
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        (ndarray::stack(Axis(0), &views).expect("equal widths"), labels)
    };
    let (xf, yf) = frames(fit, &fit_content);
    let (xe, ye) = frames(eval, &eval_content);
    let content_probe = LinearProbe::fit(&xf, &yf, classes, &cfg.fit);
    let content_probe_speaker_accuracy = content_probe.accuracy(&xe, &ye);

    let embed = |ds: &Dataset| -> Result<(Array2<f64>, Vec<usize>)> {
        let rows = ds
            .utterances
            .iter()
            .map(|u| Ok(speaker_encode(params, &u.mel)?.vector))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        Ok((
            ndarray::stack(Axis(0), &views).expect("equal widths"),
            ds.utterances.iter().map(|u| u.speaker).collect(),
        ))
    };
    let (sf, sfy) = embed(fit)?;
    let (se, sey) = embed(eval)?;
    let speaker_probe_accuracy = LinearProbe::fit(&sf, &sfy, classes, &cfg.fit).accuracy(&se, &sey);

    let mut intra = (0.0, 0usize);
    let mut inter = (0.0, 0usize);
    for (u, c) in eval.utterances.iter().zip(&eval_content) {
        let pairs = sample_pairs(
            &u.labels,
            &PairSampleConfig {
                pairs_per_utterance: cfg.pairs_per_utterance,
                balance_ratio: 0.5,
                rng_seed: rand::Rng::gen(&mut rng),
            },
        )?;
        for p in pairs.pairs {
            let g = cosine_similarity(
                c.frames.row(p.i).as_slice().expect("contiguous"),
                c.frames.row(p.j).as_slice().expect("contiguous"),
            )
            .expect("equal widths")
            .value;
            let acc = if p.same_phoneme { &mut intra } else { &mut inter };
            acc.0 += g;
            acc.1 += 1;
        }
    }
    let mean = |(s, n): (f64, usize)| if n > 0 { s / n as f64 } else { 0.0 };

    let min = params.config.min_speaker_frames;
    let mut halves = Vec::new();
    for u in &eval.utterances {
        let t = u.num_frames();
        if t / 2 < min {
            continue;
        }
        let a = speaker_encode(params, &u.mel.slice_frames(0, t / 2))?;
        let b = speaker_encode(params, &u.mel.slice_frames(t / 2, t - t / 2))?;
        halves.push((u.speaker, a.vector, b.vector));
    }
    let cos = |a: &Array1<f64>, b: &Array1<f64>| {
        cosine_similarity(a.as_slice().unwrap(), b.as_slice().unwrap())
            .expect("equal widths")
            .value
    };
    let mut same = (0.0, 0usize);
    let mut cross = (0.0, 0usize);
    for (i, (si, ai, bi)) in halves.iter().enumerate() {
        same.0 += cos(ai, bi);
        same.1 += 1;
        for (j, (sj, _, bj)) in halves.iter().enumerate() {
            if i != j && si != sj {
                cross.0 += cos(ai, bj);
                cross.1 += 1;
            }
        }
    }

    let mut mcd_sum = 0.0;
    for u in &eval.utterances {
        let r = reconstruct(params, &u.mel, None)?;
        mcd_sum += mcd(&u.mel, &r, MCD_ORDER)?;
    }

    Ok(ProbeReport {
        content_probe_speaker_accuracy,
        speaker_probe_accuracy,
        chance_accuracy: 1.0 / classes as f64,
        intra_phoneme_sim: mean(intra),
        inter_phoneme_sim: mean(inter),
        segment_style_sim: mean(same),
        cross_speaker_style_sim: mean(cross),
        recon_mcd: mcd_sum / eval.utterances.len() as f64,
    })
}

/// Mean MCD between each utterance and its reconstruction.
pub fn reconstruction_mcd(params: &ModelParams, ds: &Dataset, use_alignment: bool) -> Result<f64> {
    let mut total = 0.0;
    for u in &ds.utterances {
        let r = reconstruct(params, &u.mel, use_alignment.then_some(&u.alignment))?;
        total += mcd(&u.mel, &r, MCD_ORDER)?;
    }
    Ok(total / ds.utterances.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn probe_separates_separable_points() {
        let x = arr2(&[[0.0, 1.0], [0.1, 0.9], [1.0, 0.0], [0.9, 0.2], [0.5, 2.0], [2.0, 0.4]]);
        let y = [0, 0, 1, 1, 0, 1];
        let p = LinearProbe::fit(&x, &y, 2, &ProbeFitConfig::default());
        assert_eq!(p.accuracy(&x, &y), 1.0);
    }

    #[test]
    fn probe_on_constant_features_predicts_one_class() {
        let x = Array2::from_elem((4, 3), 2.0);
        let p = LinearProbe::fit(&x, &[0, 1, 0, 1], 2, &ProbeFitConfig::default());
        let pred = p.predict(&x);
        assert!(pred.iter().all(|&c| c == pred[0]));
    }

    #[test]
    fn summary_layout() {
        let frames = arr2(&[[1.0, 2.0], [3.0, 2.0]]);
        let m = MelSpectrogram::from_frames(frames, crate::dsp::MelConfig { mel_bins: 2, ..Default::default() }).unwrap();
        assert_eq!(mel_summary(&m).to_vec(), vec![2.0, 2.0, 1.0, 0.0]);
    }
}
