//! Parametric multi-speaker corpus with exact phoneme alignments.
//!
//! A speaker is a fundamental frequency plus a spectral tilt; a phoneme is a
//! set of three formant resonances. Utterances are harmonic sums whose
//! amplitudes follow the current phoneme's formant envelope, with short
//! raised-cosine crossfades at segment boundaries. Segment boundaries fall on hop
//! multiples so the written alignment is exact.

use crate::alignment::{PhonemeAlignment, PhonemeId, PhonemeInventory};
use crate::dsp::{write_wav, MelConfig, Waveform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
    #[error(transparent)]
    Alignment(#[from] crate::alignment::AlignmentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Silence label used at utterance edges.
pub const SILENCE: &str = "sil";

/// Vowel-like formant triples in Hz.
const PHONEMES: [(&str, [f64; 3]); 8] = [
    ("aa", [730.0, 1090.0, 2440.0]),
    ("iy", [270.0, 2290.0, 3010.0]),
    ("uw", [300.0, 870.0, 2240.0]),
    ("eh", [530.0, 1840.0, 2480.0]),
    ("ao", [570.0, 840.0, 2410.0]),
    ("ih", [390.0, 1990.0, 2550.0]),
    ("er", [490.0, 1350.0, 1690.0]),
    ("ae", [660.0, 1720.0, 2410.0]),
];
const FORMANT_BANDWIDTH: [f64; 3] = [80.0, 100.0, 120.0];
const FORMANT_GAIN: [f64; 3] = [1.0, 0.6, 0.3];
const CROSSFADE_SAMPLES: usize = 128;
const PEAK: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Extra utterances per speaker written to a separate manifest.
    pub heldout_per_speaker: usize,
    pub duration_secs: f64,
    /// Number of non-silence phonemes in use (at most 8).
    pub num_phonemes: usize,
    pub min_phoneme_frames: usize,
    pub max_phoneme_frames: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_speakers: 4,
            utterances_per_speaker: 8,
            heldout_per_speaker: 2,
            duration_secs: 3.0,
            num_phonemes: 8,
            min_phoneme_frames: 8,
            max_phoneme_frames: 20,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.num_speakers < 2 {
            return bad("need at least 2 speakers");
        }
        if self.num_phonemes < 2 || self.num_phonemes > PHONEMES.len() {
            return bad("num_phonemes must be in 2..=8");
        }
        if self.min_phoneme_frames == 0 || self.min_phoneme_frames > self.max_phoneme_frames {
            return bad("phoneme frame range is empty");
        }
        if !(self.duration_secs > 0.0) {
            return bad("duration must be positive");
        }
        Ok(())
    }
}

/// Voice parameters of one synthetic speaker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Voice {
    pub f0: f64,
    /// Spectral slope in dB per octave above 100 Hz.
    pub tilt_db_per_octave: f64,
}

/// Voices spread geometrically in pitch from 100 to 240 Hz. Tilts are
/// scattered by a golden-ratio sequence so pitch and slope are not
/// correlated.
pub fn voices(num_speakers: usize) -> Vec<Voice> {
    let k = num_speakers.max(2);
    (0..num_speakers)
        .map(|i| {
            let pos = i as f64 / (k - 1) as f64;
            let scatter = (0.5 + i as f64 * 0.618_033_988_75).fract();
            Voice {
                f0: 100.0 * 2.4f64.powf(pos),
                tilt_db_per_octave: -3.0 - 9.0 * scatter,
            }
        })
        .collect()
}

pub struct SynthUtterance {
    pub waveform: Waveform,
    pub alignment: PhonemeAlignment,
    pub speaker: usize,
}

/// Phoneme inventory with silence at id 0 followed by the vowel set.
pub fn inventory(num_phonemes: usize) -> PhonemeInventory {
    let mut inv = PhonemeInventory::new();
    inv.intern(SILENCE);
    for (name, _) in PHONEMES.iter().take(num_phonemes) {
        inv.intern(name);
    }
    inv
}

fn formants(inv: &PhonemeInventory, id: PhonemeId) -> Option<[f64; 3]> {
    let name = inv.name(id)?;
    PHONEMES.iter().find(|(n, _)| *n == name).map(|(_, f)| *f)
}

fn harmonic_amplitudes(voice: &Voice, formants: Option<[f64; 3]>, nyquist: f64) -> Vec<f64> {
    let Some(fm) = formants else {
        return Vec::new();
    };
    let count = ((0.95 * nyquist) / voice.f0).floor() as usize;
    (1..=count)
        .map(|h| {
            let f = h as f64 * voice.f0;
            let tilt = 10f64.powf(voice.tilt_db_per_octave * (f / 100.0).log2() / 20.0);
            let env: f64 = (0..3)
                .map(|i| {
                    let d = (f - fm[i]) / FORMANT_BANDWIDTH[i];
                    FORMANT_GAIN[i] / (1.0 + d * d)
                })
                .sum();
            tilt * env
        })
        .collect()
}

/// Renders one utterance for `voice` from a phoneme alignment.
pub fn render(
    voice: &Voice,
    alignment: &PhonemeAlignment,
    inv: &PhonemeInventory,
    mel: &MelConfig,
) -> Waveform {
    let hop = mel.hop_length;
    let len = (alignment.total_frames() - 1) * hop;
    let nyquist = mel.sample_rate as f64 / 2.0;
    let amps: Vec<Vec<f64>> = alignment
        .segments()
        .iter()
        .map(|s| harmonic_amplitudes(voice, formants(inv, s.phoneme), nyquist))
        .collect();
    let harmonics = amps.iter().map(|a| a.len()).max().unwrap_or(0);
    let at = |seg: usize, h: usize| amps[seg].get(h).copied().unwrap_or(0.0);
    let owner: Vec<usize> = alignment.frame_to_segment();
    let boundaries: Vec<usize> = alignment.segments()[1..]
        .iter()
        .map(|s| s.start * hop)
        .collect();
    let w = 2.0 * PI * voice.f0 / mel.sample_rate as f64;
    let half = CROSSFADE_SAMPLES / 2;
    let mut samples = vec![0.0; len];
    for (n, out) in samples.iter_mut().enumerate() {
        let seg = owner[(n / hop).min(owner.len() - 1)];
        // Crossfade weight toward the neighbouring segment near a boundary.
        let mut blend: Option<(usize, f64)> = None;
        if let Some(b) = boundaries.iter().find(|&&b| n + half >= b && n < b + half) {
            let x = (n + half - b) as f64 / CROSSFADE_SAMPLES as f64;
            let t = 0.5 - 0.5 * (PI * x).cos();
            let k = boundaries.iter().position(|x| x == b).unwrap();
            blend = Some((k, t));
        }
        let mut acc = 0.0;
        for h in 0..harmonics {
            let a = match blend {
                Some((k, t)) => (1.0 - t) * at(k, h) + t * at(k + 1, h),
                None => at(seg, h),
            };
            if a != 0.0 {
                acc += a * ((h + 1) as f64 * w * n as f64).sin();
            }
        }
        *out = acc;
    }
    // One gain per voice, bounded by the loudest vowel's amplitude sum, so
    // the same vowel has the same level in every utterance.
    let bound = (1..inv.len() as PhonemeId)
        .map(|id| harmonic_amplitudes(voice, formants(inv, id), nyquist).iter().sum::<f64>())
        .fold(0.0, f64::max);
    let gain = if bound > 0.0 { PEAK / bound } else { 0.0 };
    for s in samples.iter_mut() {
        *s *= gain;
    }
    Waveform {
        samples,
        sample_rate: mel.sample_rate,
    }
}

/// Random phoneme sequence of roughly `duration_secs`, framed by silence.
pub fn random_alignment<R: Rng>(
    cfg: &CorpusConfig,
    mel: &MelConfig,
    rng: &mut R,
) -> Result<PhonemeAlignment> {
    let target = (cfg.duration_secs * mel.sample_rate as f64 / mel.hop_length as f64).round() as usize;
    let mut runs: Vec<(PhonemeId, usize)> = vec![(0, rng.gen_range(cfg.min_phoneme_frames..=cfg.max_phoneme_frames))];
    let mut used = runs[0].1;
    let mut prev = 0;
    let edge = cfg.min_phoneme_frames;
    while used + edge < target {
        let mut p = rng.gen_range(1..=cfg.num_phonemes as PhonemeId);
        while p == prev {
            p = rng.gen_range(1..=cfg.num_phonemes as PhonemeId);
        }
        let d = rng
            .gen_range(cfg.min_phoneme_frames..=cfg.max_phoneme_frames)
            .min(target - used - edge)
            .max(1);
        runs.push((p, d));
        used += d;
        prev = p;
    }
    runs.push((0, (target.saturating_sub(used)).max(edge)));
    Ok(PhonemeAlignment::from_durations(&runs)?)
}

/// Generates all utterances in memory: for each speaker, the training
/// utterances followed by the held-out ones.
pub fn generate(cfg: &CorpusConfig, mel: &MelConfig) -> Result<Vec<SynthUtterance>> {
    cfg.validate()?;
    let inv = inventory(cfg.num_phonemes);
    let voices = voices(cfg.num_speakers);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per = cfg.utterances_per_speaker + cfg.heldout_per_speaker;
    let mut out = Vec::with_capacity(per * cfg.num_speakers);
    for (speaker, voice) in voices.iter().enumerate() {
        for _ in 0..per {
            let alignment = random_alignment(cfg, mel, &mut rng)?;
            let waveform = render(voice, &alignment, &inv, mel);
            out.push(SynthUtterance {
                waveform,
                alignment,
                speaker,
            });
        }
    }
    Ok(out)
}

/// Paths of a corpus written to disk.
#[derive(Debug, Clone)]
pub struct CorpusFiles {
    pub train_manifest: PathBuf,
    pub heldout_manifest: PathBuf,
}

/// Writes WAVs, alignment TSVs and two manifests (`train.jsonl`,
/// `heldout.jsonl`) under `dir`.
pub fn write_corpus(cfg: &CorpusConfig, mel: &MelConfig, dir: &Path) -> Result<CorpusFiles> {
    let utts = generate(cfg, mel)?;
    let inv = inventory(cfg.num_phonemes);
    std::fs::create_dir_all(dir)?;
    let files = CorpusFiles {
        train_manifest: dir.join("train.jsonl"),
        heldout_manifest: dir.join("heldout.jsonl"),
    };
    let mut train = std::fs::File::create(&files.train_manifest)?;
    let mut heldout = std::fs::File::create(&files.heldout_manifest)?;
    let per = cfg.utterances_per_speaker + cfg.heldout_per_speaker;
    for (n, u) in utts.iter().enumerate() {
        let k = n % per;
        let stem = format!("spk{}_utt{:02}", u.speaker, k);
        let wav = format!("{stem}.wav");
        let tsv = format!("{stem}.tsv");
        write_wav(dir.join(&wav), &u.waveform)?;
        u.alignment.write_tsv(dir.join(&tsv), &inv)?;
        let line = serde_json::json!({"audio": wav, "alignment": tsv, "speaker": u.speaker});
        let sink = if k < cfg.utterances_per_speaker {
            &mut train
        } else {
            &mut heldout
        };
        writeln!(sink, "{line}")?;
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::mel_spectrogram;

    #[test]
    fn voices_are_distinct() {
        let v = voices(4);
        for i in 0..4 {
            for j in i + 1..4 {
                assert!((v[i].f0 - v[j].f0).abs() > 10.0);
                assert!(v[i].tilt_db_per_octave != v[j].tilt_db_per_octave);
            }
        }
    }

    #[test]
    fn silence_sits_on_the_log_floor() {
        let mel = MelConfig::default();
        let inv = inventory(2);
        let a = PhonemeAlignment::from_durations(&[(0, 12), (1, 12), (0, 12)]).unwrap();
        let w = render(&voices(3)[1], &a, &inv, &mel);
        let m = mel_spectrogram(&w, &mel).unwrap();
        for b in 0..mel.mel_bins {
            assert_eq!(m.frames[[2, b]], mel.log_floor());
            assert_eq!(m.frames[[33, b]], mel.log_floor());
        }
        assert!(m.frames.row(18).iter().any(|v| *v > mel.log_floor() + 5.0));
    }

    #[test]
    fn alignment_matches_mel_frames() {
        let cfg = CorpusConfig {
            num_speakers: 2,
            utterances_per_speaker: 1,
            heldout_per_speaker: 0,
            duration_secs: 1.0,
            ..CorpusConfig::default()
        };
        let mel = MelConfig::default();
        let utts = generate(&cfg, &mel).unwrap();
        assert_eq!(utts.len(), 2);
        for u in &utts {
            let m = mel_spectrogram(&u.waveform, &mel).unwrap();
            assert_eq!(m.num_frames(), u.alignment.total_frames());
            assert!(u.waveform.peak() <= PEAK + 1e-9);
            let segs = u.alignment.segments();
            assert_eq!(segs[0].phoneme, 0);
            assert_eq!(segs[segs.len() - 1].phoneme, 0);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = CorpusConfig {
            num_speakers: 2,
            utterances_per_speaker: 1,
            heldout_per_speaker: 0,
            duration_secs: 0.5,
            ..CorpusConfig::default()
        };
        let mel = MelConfig::default();
        let a = generate(&cfg, &mel).unwrap();
        let b = generate(&cfg, &mel).unwrap();
        assert_eq!(a[1].waveform.samples, b[1].waveform.samples);
        assert_eq!(a[1].alignment, b[1].alignment);
    }
}
