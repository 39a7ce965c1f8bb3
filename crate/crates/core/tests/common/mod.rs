//! Independent oracles and check routines shared by the integration tests
//! and the acceptance harness.

#![allow(dead_code)]

use ctvc::alignment::{
    compress, expand, frame_labels, sample_pairs, FramePair, PairSampleConfig, PhonemeAlignment,
};
use ctvc::autodiff::{Tape, Var};
use ctvc::dsp::{cepstra_to_mel, mcd, mel_spectrogram, mel_to_cepstra, MelConfig, MelSpectrogram, Waveform};
use ctvc::losses::{
    self, adversarial_classifier_loss, cosine_similarity, graph, infonce, infonce_from_scores,
    reconstruction_loss, similarity_contrastive_loss, total_loss, LossComponents, LossWeights,
};
use ctvc::models::{bilinear_score, grl_backward, BilinearScorer, SpeakerEmbedding};
use ndarray::{arr1, arr2, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

pub mod oracle {
    //! Direct transcriptions of the definitions, unstabilised and unvectorised.

    use super::*;

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += a[i] * b[i];
        }
        s
    }

    pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
    }

    pub fn similarity(c: &Array2<f64>, pairs: &[(usize, usize, bool)]) -> f64 {
        let mut s = 0.0;
        for &(i, j, same) in pairs {
            let g = cosine(&c.row(i).to_vec(), &c.row(j).to_vec());
            s += if same { -g } else { g };
        }
        s / pairs.len() as f64
    }

    pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        -(logits[target].exp() / z).ln()
    }

    pub fn bilinear(u: &[f64], w: &Array2<f64>, v: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..u.len() {
            for j in 0..v.len() {
                s += u[i] * w[[i, j]] * v[j];
            }
        }
        s
    }

    /// `(1/N) sum_i log[ exp f_ii / ((1/N) sum_j exp f_ij) ]`
    pub fn infonce_scores(f: &Array2<f64>) -> f64 {
        let n = f.nrows();
        let mut total = 0.0;
        for i in 0..n {
            let mut denom = 0.0;
            for j in 0..n {
                denom += f[[i, j]].exp();
            }
            total += (f[[i, i]].exp() / (denom / n as f64)).ln();
        }
        total / n as f64
    }

    pub fn infonce(u: &Array2<f64>, v: &Array2<f64>, w: &Array2<f64>) -> f64 {
        let n = u.nrows();
        let f = Array2::from_shape_fn((n, n), |(i, j)| {
            bilinear(&u.row(i).to_vec(), w, &v.row(j).to_vec())
        });
        infonce_scores(&f)
    }

    pub fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let mut s = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            s += (x - y) * (x - y);
        }
        s / a.len() as f64
    }

    /// Orthonormal DCT-II coefficient `k` of `x`, by direct summation.
    pub fn dct(x: &[f64], k: usize) -> f64 {
        let n = x.len();
        let mut s = 0.0;
        for (i, v) in x.iter().enumerate() {
            s += v * (PI / n as f64 * (i as f64 + 0.5) * k as f64).cos();
        }
        let norm = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        norm * s
    }

    /// Mel-cepstral distortion by direct summation over frames and
    /// coefficients `1..order`.
    pub fn mcd(a: &Array2<f64>, b: &Array2<f64>, order: usize) -> f64 {
        let scale = 10.0 / std::f64::consts::LN_10 * 2f64.sqrt();
        let mut total = 0.0;
        for t in 0..a.nrows() {
            let (ra, rb) = (a.row(t).to_vec(), b.row(t).to_vec());
            let mut d = 0.0;
            for k in 1..order {
                d += (dct(&ra, k) - dct(&rb, k)).powi(2);
            }
            total += d.sqrt();
        }
        scale * total / a.nrows() as f64
    }

    /// Frequency of the largest DFT magnitude, by direct summation over
    /// integer bins of a zero-padded length.
    pub fn peak_frequency(samples: &[f64], rate: f64, bins: usize) -> f64 {
        let mut best = (0.0, 0usize);
        for k in 1..bins / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, x) in samples.iter().enumerate() {
                let ph = -2.0 * PI * k as f64 * n as f64 / bins as f64;
                re += x * ph.cos();
                im += x * ph.sin();
            }
            let mag = re * re + im * im;
            if mag > best.0 {
                best = (mag, k);
            }
        }
        best.1 as f64 * rate / bins as f64
    }

    /// Brute-force best constant per segment over a grid around the data.
    pub fn best_constant(rows: &[f64]) -> f64 {
        let lo = rows.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = rows.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut best = (f64::INFINITY, lo);
        let steps = 20_000;
        for s in 0..=steps {
            let c = lo + (hi - lo) * s as f64 / steps as f64;
            let e: f64 = rows.iter().map(|r| (r - c) * (r - c)).sum();
            if e < best.0 {
                best = (e, c);
            }
        }
        best.1
    }
}

/// One comparison of the implementation against an oracle value.
#[derive(Debug, Clone)]
pub struct Case {
    pub name: &'static str,
    pub expected: f64,
    pub got: f64,
    pub tol: f64,
}

impl Case {
    pub fn new(name: &'static str, expected: f64, got: f64, tol: f64) -> Self {
        Self { name, expected, got, tol }
    }

    pub fn ok(&self) -> bool {
        (self.expected - self.got).abs() <= self.tol
    }
}

fn sine(freq: f64, secs: f64, rate: u32) -> Waveform {
    let n = (secs * rate as f64) as usize;
    let samples = (0..n)
        .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin())
        .collect();
    Waveform::new(samples, rate).unwrap()
}

/// Every derived example, each evaluated by its oracle and by the crate.
pub fn oracle_cases() -> Vec<Case> {
    let mut cases = Vec::new();
    let cfg = MelConfig::default();

    // Frame count of 1 s with centre padding: count window starts.
    let len = 16_000usize;
    let mut counted = 0;
    let mut start = 0usize;
    while start <= len {
        counted += 1;
        start += cfg.hop_length;
    }
    let m = mel_spectrogram(&sine(440.0, 1.0, 16_000), &cfg).unwrap();
    cases.push(Case::new("mel frame count", counted as f64, m.num_frames() as f64, 0.0));

    // 440 Hz sine: argmax bin constant and equal to the filter whose
    // triangle peaks nearest 440 Hz.
    let fb = ctvc::dsp::mel_filterbank(&cfg);
    let fft_bin = (440.0 * cfg.fft_size as f64 / cfg.sample_rate as f64).round() as usize;
    let mut best = 0;
    for b in 0..fb.nrows() {
        if fb[[b, fft_bin]] > fb[[best, fft_bin]] {
            best = b;
        }
    }
    let interior: Vec<usize> = (4..m.num_frames() - 4)
        .map(|t| argmax(&m.frames.row(t).to_vec()))
        .collect();
    let constant = interior.iter().all(|&b| b == interior[0]);
    cases.push(Case::new("sine argmax bin constant", 1.0, constant as u8 as f64, 0.0));
    cases.push(Case::new("sine argmax bin matches filterbank", best as f64, interior[0] as f64, 0.0));

    // Loaded 440 Hz sine has its DFT peak within one bin of 440 Hz.
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("sine.wav");
    ctvc::dsp::write_wav(&wav, &sine(440.0, 0.25, 16_000)).unwrap();
    let loaded = ctvc::dsp::load_audio(&wav, 16_000).unwrap();
    let bins = 4000;
    let peak = oracle::peak_frequency(&loaded.samples, 16_000.0, bins);
    let bin_hz = 16_000.0 / bins as f64;
    cases.push(Case::new("loaded sine peak (Hz)", 440.0, peak, bin_hz));

    // Cepstra against a direct DCT-II sum.
    let mut r = rng(11);
    let frame = random_matrix(&mut r, 1, 80).mapv(|v| v * 4.0 - 2.0);
    let mel = MelSpectrogram::from_frames(frame.clone(), cfg.clone()).unwrap();
    let c = mel_to_cepstra(&mel, 80).unwrap();
    let row = frame.row(0).to_vec();
    let worst = (0..80).map(|k| (c[[0, k]] - oracle::dct(&row, k)).abs()).fold(0.0, f64::max);
    cases.push(Case::new("DCT-II max abs deviation", 0.0, worst, 1e-9));
    let back = cepstra_to_mel(&c, 80).unwrap();
    let worst = back.iter().zip(frame.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    cases.push(Case::new("DCT inverse round trip", 0.0, worst, 1e-7));

    // MCD of one frame differing in one included coefficient by 1.0.
    let base = MelSpectrogram::from_frames(Array2::zeros((1, 80)), cfg.clone()).unwrap();
    let mut unit = Array2::zeros((1, 13));
    unit[[0, 5]] = 1.0;
    let shifted = MelSpectrogram::from_frames(cepstra_to_mel(&unit, 80).unwrap(), cfg.clone()).unwrap();
    let expected = 10.0 / 10f64.ln() * 2f64.sqrt();
    cases.push(Case::new("MCD unit coefficient", expected, mcd(&base, &shifted, 13).unwrap(), 1e-9));
    let a = random_matrix(&mut r, 6, 80);
    let b = random_matrix(&mut r, 6, 80);
    let ma = MelSpectrogram::from_frames(a.clone(), cfg.clone()).unwrap();
    let mb = MelSpectrogram::from_frames(b.clone(), cfg.clone()).unwrap();
    cases.push(Case::new("MCD random frames", oracle::mcd(&a, &b, 13), mcd(&ma, &mb, 13).unwrap(), 1e-9));

    // TextGrid rounding: 0.048 / 0.016 = 3, 0.080 / 0.016 = 5.
    let tg = dir.path().join("a.TextGrid");
    std::fs::write(&tg, textgrid(&[(0.0, 0.048, "A"), (0.048, 0.080, "B")])).unwrap();
    let mut inv = ctvc::alignment::PhonemeInventory::new();
    let al = ctvc::alignment::parse_alignment(&tg, 5, 0.016, &mut inv).unwrap();
    let ends: Vec<usize> = al.segments().iter().map(|s| s.end).collect();
    let oracle_ends: Vec<usize> = [0.048f64, 0.080].iter().map(|t| (t / 0.016).round() as usize).collect();
    cases.push(Case::new("TextGrid boundaries", 1.0, (ends == oracle_ends) as u8 as f64, 0.0));

    // Pair sampling on [A, A, B]: membership in the enumerated classes.
    let labels = [0u32, 0, 1];
    let mut same_class = Vec::new();
    let mut diff_class = Vec::new();
    for i in 0..3 {
        for j in i + 1..3 {
            if labels[i] == labels[j] {
                same_class.push((i, j));
            } else {
                diff_class.push((i, j));
            }
        }
    }
    let pc = PairSampleConfig { pairs_per_utterance: 2, balance_ratio: 0.5, rng_seed: 3 };
    let sample = sample_pairs(&labels, &pc).unwrap();
    let member = |p: &FramePair| {
        let key = (p.i.min(p.j), p.i.max(p.j));
        if p.same_phoneme { same_class.contains(&key) } else { diff_class.contains(&key) }
    };
    let nsame = sample.pairs.iter().filter(|p| p.same_phoneme).count();
    let good = sample.pairs.len() == 2 && nsame == 1 && sample.pairs.iter().all(member);
    cases.push(Case::new("pair classes [A,A,B]", 1.0, good as u8 as f64, 0.0));

    // Segment mean [[1,1],[3,3]] -> [2,2].
    let al = PhonemeAlignment::from_durations(&[(0, 2)]).unwrap();
    let p = compress(arr2(&[[1.0, 1.0], [3.0, 3.0]]).view(), &al).unwrap();
    cases.push(Case::new("compress mean", 2.0, p[[0, 0]], 1e-12));
    cases.push(Case::new("compress mean col 2", 2.0, p[[0, 1]], 1e-12));

    // expand(compress(c)) is the least-squares constant per segment.
    let al = PhonemeAlignment::from_durations(&[(0, 3), (1, 2)]).unwrap();
    let c = random_matrix(&mut r, 5, 2);
    let rec = expand(compress(c.view(), &al).unwrap().view(), &al).unwrap();
    let mut worst: f64 = 0.0;
    for seg in al.segment_ranges() {
        for col in 0..2 {
            let rows: Vec<f64> = seg.clone().map(|t| c[[t, col]]).collect();
            worst = worst.max((oracle::best_constant(&rows) - rec[[seg.start, col]]).abs());
        }
    }
    let grid = 2.0 / 20_000.0;
    cases.push(Case::new("expand(compress) least squares", 0.0, worst, grid));
    let _ = frame_labels(&al);

    // GRL backward with scale 0.5.
    let g = grl_backward(&arr2(&[[2.0, -4.0]]), 0.5);
    cases.push(Case::new("GRL scale 0.5 [0]", -1.0, g[[0, 0]], 0.0));
    cases.push(Case::new("GRL scale 0.5 [1]", 2.0, g[[0, 1]], 0.0));

    // Bilinear [[2,0],[0,3]], u=[1,1], v=[1,-1].
    let w = arr2(&[[2.0, 0.0], [0.0, 3.0]]);
    let (u, v) = ([1.0, 1.0], [1.0, -1.0]);
    let scorer = BilinearScorer { w: w.clone() };
    let got = bilinear_score(&scorer, &emb(&u), &emb(&v)).unwrap();
    cases.push(Case::new("bilinear score", oracle::bilinear(&u, &w, &v), got, 1e-12));

    // Cosine [1,2] vs [2,1].
    let (a, b) = ([1.0, 2.0], [2.0, 1.0]);
    cases.push(Case::new("cosine", oracle::cosine(&a, &b), cosine_similarity(&a, &b).unwrap().value, 1e-12));

    // Similarity loss on the listed pairs.
    let c = arr2(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
    let pairs = [(0, 1, true), (0, 2, false), (1, 2, false)];
    let fp: Vec<FramePair> = pairs.iter().map(|&(i, j, s)| FramePair { i, j, same_phoneme: s }).collect();
    cases.push(Case::new(
        "similarity loss",
        oracle::similarity(&c, &pairs),
        similarity_contrastive_loss(c.view(), &fp).unwrap(),
        1e-12,
    ));

    // Cross-entropy [2,0,0].
    let l = [2.0, 0.0, 0.0];
    cases.push(Case::new(
        "adversarial loss [2,0,0]",
        oracle::cross_entropy(&l, 0),
        adversarial_classifier_loss(arr1(&l).view(), 0).unwrap(),
        1e-12,
    ));

    // 2x2 InfoNCE with +-10.
    let f = arr2(&[[10.0, -10.0], [-10.0, 10.0]]);
    cases.push(Case::new("InfoNCE 2x2 +-10", oracle::infonce_scores(&f), infonce_from_scores(f.view()), 1e-9));
    cases.push(Case::new("InfoNCE 2x2 +-10 vs ln 2", 2f64.ln(), infonce_from_scores(f.view()), 1e-6));

    // Style loss, N=2, orthogonal unit embeddings per speaker, W = I.
    let e = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
    let eye = Array2::eye(2);
    let term = oracle::infonce(&e, &e, &eye);
    let mut tape = Tape::new();
    let vars: Vec<Var> = (0..4).map(|_| tape.leaf(e.clone())).collect();
    let wv = tape.leaf(eye.clone());
    let emb4 = graph::StyleEmbeddings { halves: Some((vars[0], vars[1])), whole: Some((vars[2], vars[3])) };
    let style = graph::style(&mut tape, &emb4, wv).unwrap();
    cases.push(Case::new("style loss N=2 orthogonal", 4.0 * term, tape.scalar(style), 1e-9));
    cases.push(Case::new("style loss N=2 closed form", 1.5195, tape.scalar(style), 1e-4));
    let _ = infonce(e.view(), e.view(), &BilinearScorer::identity(2)).unwrap();

    // Reconstruction: one element off by 0.5 in 4x5.
    let x = Array2::zeros((4, 5));
    let mut xh = x.clone();
    xh[[2, 3]] = 0.5;
    cases.push(Case::new("reconstruction 4x5", oracle::mse(&x, &xh), reconstruction_loss(x.view(), xh.view()).unwrap(), 1e-12));

    // Total with the default weights.
    let comps = LossComponents { recon: 1.0, sim: Some(2.0), style: Some(3.0), adv_cls: Some(4.0) };
    let expected = 1.0 + 0.01 * 2.0 + (-0.1) * 3.0 + 0.5 * 4.0;
    cases.push(Case::new("total loss", expected, total_loss(&comps, &LossWeights::default()).unwrap(), 1e-9));

    // Segment ranges for T = 100 (checked by enumeration over seeds).
    let mut ok = true;
    for seed in 0..200 {
        let s = losses::sample_segments(100, &mut rng(seed));
        let (s1, s2, s3) = (s.seg1.unwrap(), s.seg2.unwrap(), s.seg3.unwrap());
        ok &= s1.start <= 18 && (50..=68).contains(&s2.start) && (51..=100).contains(&s3.len);
        ok &= s3.end() <= 100;
    }
    cases.push(Case::new("segment ranges T=100", 1.0, ok as u8 as f64, 0.0));

    cases
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn emb(v: &[f64]) -> SpeakerEmbedding {
    SpeakerEmbedding { vector: Array1::from(v.to_vec()) }
}

pub fn textgrid(intervals: &[(f64, f64, &str)]) -> String {
    let xmax = intervals.last().map(|i| i.1).unwrap_or(0.0);
    let mut s = format!(
        "File type = \"ooTextFile\"\nObject class = \"TextGrid\"\n\nxmin = 0\nxmax = {xmax}\ntiers? <exists>\nsize = 1\nitem []:\n    item [1]:\n        class = \"IntervalTier\"\n        name = \"phones\"\n        xmin = 0\n        xmax = {xmax}\n        intervals: size = {}\n",
        intervals.len()
    );
    for (k, (a, b, t)) in intervals.iter().enumerate() {
        s += &format!(
            "        intervals [{}]:\n            xmin = {a}\n            xmax = {b}\n            text = \"{t}\"\n",
            k + 1
        );
    }
    s
}

/// Norm-wise relative error between analytic and numeric gradients.
pub fn rel_err(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric.iter()).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
        + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Central finite differences of `f` with respect to each entry of `x`.
pub fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let h = 1e-5;
    let mut g = Array2::zeros(x.dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let mut p = x.clone();
        p[[r, c]] += h;
        let mut m = x.clone();
        m[[r, c]] -= h;
        g[[r, c]] = (f(&p) - f(&m)) / (2.0 * h);
    }
    g
}

/// Worst gradient-check error over the instances of one loss.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub loss: &'static str,
    pub instances: usize,
    pub worst: f64,
}

/// Builds a loss on a fresh tape from leaf inputs and returns
/// `(value, gradients of each input)`.
fn tape_grads(inputs: &[Array2<f64>], build: impl Fn(&mut Tape, &[Var]) -> Var) -> (f64, Vec<Array2<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root);
    let g = vars.iter().zip(inputs).map(|(v, x)| grads.get_or_zeros(*v, x.dim())).collect();
    (tape.scalar(root), g)
}

fn value_of(inputs: &[Array2<f64>], build: &impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = build(&mut tape, &vars);
    tape.scalar(root)
}

/// Checks the tape gradient of every input against finite differences of
/// `reference`, a plain-array evaluation of the same loss.
fn check(
    inputs: &[Array2<f64>],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    reference: impl Fn(&[Array2<f64>]) -> f64,
) -> f64 {
    let (value, grads) = tape_grads(inputs, &build);
    assert!((value - reference(inputs)).abs() < 1e-9, "tape and reference disagree");
    assert!((value - value_of(inputs, &build)).abs() == 0.0);
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        let numeric = numeric_grad(&inputs[k], |x| {
            let mut v = inputs.to_vec();
            v[k] = x.clone();
            reference(&v)
        });
        worst = worst.max(rel_err(&grads[k], &numeric));
    }
    worst
}

/// Finite-difference checks of every objective on `instances` random
/// inputs each.
pub fn gradient_suite(instances: usize) -> Vec<GradCheck> {
    let mut out = Vec::new();
    let mut r = rng(2024);

    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let t = r.gen_range(3..7);
        let c = random_matrix(&mut r, t, 4);
        let pairs: Vec<(usize, usize, bool)> = (0..6)
            .map(|_| {
                let i = r.gen_range(0..t);
                let j = (i + r.gen_range(1..t)) % t;
                (i, j, r.gen_bool(0.5))
            })
            .collect();
        let fp: Vec<FramePair> = pairs.iter().map(|&(i, j, s)| FramePair { i, j, same_phoneme: s }).collect();
        worst = worst.max(check(
            &[c],
            |tape, v| graph::similarity(tape, v[0], &pairs),
            |x| similarity_contrastive_loss(x[0].view(), &fp).unwrap(),
        ));
    }
    out.push(GradCheck { loss: "similarity", instances, worst });

    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = r.gen_range(1..5);
        let k = r.gen_range(2..6);
        let logits = random_matrix(&mut r, n, k).mapv(|v| 3.0 * v);
        let targets: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        worst = worst.max(check(
            &[logits],
            |tape, v| graph::cross_entropy(tape, v[0], &targets),
            |x| {
                (0..n)
                    .map(|i| adversarial_classifier_loss(x[0].row(i), targets[i]).unwrap())
                    .sum::<f64>()
                    / n as f64
            },
        ));
    }
    out.push(GradCheck { loss: "adversarial classifier", instances, worst });

    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = r.gen_range(2..6);
        let d = r.gen_range(2..5);
        let u = random_matrix(&mut r, n, d);
        let v = random_matrix(&mut r, n, d);
        let w = random_matrix(&mut r, d, d);
        worst = worst.max(check(
            &[u, v, w],
            |tape, x| graph::infonce(tape, x[0], x[1], x[2]),
            |x| infonce(x[0].view(), x[1].view(), &BilinearScorer { w: x[2].clone() }).unwrap(),
        ));
    }
    out.push(GradCheck { loss: "infonce", instances, worst });

    // Style: the reference holds each stop-gradient partner at its base
    // value, so the finite difference only sees the non-detached slot.
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = r.gen_range(2..5);
        let d = r.gen_range(2..4);
        let base: Vec<Array2<f64>> = (0..4).map(|_| random_matrix(&mut r, n, d)).collect();
        let w = random_matrix(&mut r, d, d);
        let mut inputs = base.clone();
        inputs.push(w);
        let frozen = base.clone();
        worst = worst.max(check(
            &inputs,
            |tape, x| {
                let emb = graph::StyleEmbeddings { halves: Some((x[0], x[1])), whole: Some((x[2], x[3])) };
                graph::style(tape, &emb, x[4]).unwrap()
            },
            |x| {
                let s = BilinearScorer { w: x[4].clone() };
                let i = |a: &Array2<f64>, b: &Array2<f64>| infonce(a.view(), b.view(), &s).unwrap();
                i(&x[0], &frozen[1]) + i(&x[1], &frozen[0]) + i(&x[2], &frozen[3]) + i(&x[3], &frozen[2])
            },
        ));
    }
    out.push(GradCheck { loss: "style", instances, worst });

    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (t, b) = (r.gen_range(1..5), r.gen_range(1..6));
        let pred = random_matrix(&mut r, t, b);
        let target = random_matrix(&mut r, t, b);
        let tc = target.clone();
        worst = worst.max(check(
            &[pred],
            move |tape, x| graph::reconstruction(tape, x[0], &tc),
            |x| reconstruction_loss(target.view(), x[0].view()).unwrap(),
        ));
    }
    out.push(GradCheck { loss: "reconstruction", instances, worst });

    // Weighted total over all four terms sharing one content matrix.
    let mut worst: f64 = 0.0;
    let wts = LossWeights::default();
    for _ in 0..instances {
        let t = 5;
        let c = random_matrix(&mut r, t, 3);
        let pairs = vec![(0, 1, true), (1, 3, false), (2, 4, false), (0, 4, true)];
        let fp: Vec<FramePair> = pairs.iter().map(|&(i, j, s)| FramePair { i, j, same_phoneme: s }).collect();
        let target = random_matrix(&mut r, t, 3);
        let e: Vec<Array2<f64>> = (0..4).map(|_| random_matrix(&mut r, 3, 2)).collect();
        let w = random_matrix(&mut r, 2, 2);
        let cls = random_matrix(&mut r, 3, 4);
        let tgt = vec![0usize, 2, 3, 1, 0];
        let mut inputs = vec![c, w, cls];
        inputs.extend(e.iter().cloned());
        let (tc, pc, tg) = (target.clone(), pairs.clone(), tgt.clone());
        worst = worst.max(check(
            &inputs,
            move |tape, x| {
                let recon = graph::reconstruction(tape, x[0], &tc);
                let sim = graph::similarity(tape, x[0], &pc);
                let logits = tape.matmul(x[0], x[2]);
                let adv = graph::cross_entropy(tape, logits, &tg);
                let emb = graph::StyleEmbeddings { halves: Some((x[3], x[4])), whole: Some((x[5], x[6])) };
                let style = graph::style(tape, &emb, x[1]).unwrap();
                let mut total = recon;
                for (term, k) in [(sim, wts.alpha), (style, wts.beta), (adv, wts.lambda)] {
                    let s = tape.scale(term, k);
                    total = tape.add(total, s);
                }
                total
            },
            |x| {
                let s = BilinearScorer { w: x[1].clone() };
                let i = |a: &Array2<f64>, b: &Array2<f64>| infonce(a.view(), b.view(), &s).unwrap();
                let logits = x[0].dot(&x[2]);
                let comps = LossComponents {
                    recon: reconstruction_loss(target.view(), x[0].view()).unwrap(),
                    sim: Some(similarity_contrastive_loss(x[0].view(), &fp).unwrap()),
                    style: Some(i(&x[3], &e[1]) + i(&x[4], &e[0]) + i(&x[5], &e[3]) + i(&x[6], &e[2])),
                    adv_cls: Some(
                        (0..t).map(|k| adversarial_classifier_loss(logits.row(k), tgt[k]).unwrap()).sum::<f64>()
                            / t as f64,
                    ),
                };
                total_loss(&comps, &wts).unwrap()
            },
        ));
    }
    out.push(GradCheck { loss: "total", instances, worst });
    out
}

/// Exactness of gradient reversal and stop-gradient: returns
/// `(grl_bitwise_ok, max |grad| reaching detached style inputs)`.
pub fn exactness_checks() -> (bool, f64) {
    let mut r = rng(99);
    let mut grl_ok = true;
    for _ in 0..50 {
        let x = random_matrix(&mut r, 3, 4);
        let up = random_matrix(&mut r, 3, 4).mapv(|v| v * 1e3);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let upv = tape.leaf(up.clone());
        let y = tape.grl(xv, 1.0);
        let prod = tape.mul(y, upv);
        let root = tape.sum_all(prod);
        let g = tape.backward(root).get_or_zeros(xv, x.dim());
        grl_ok &= g.iter().zip(up.iter()).all(|(a, b)| a.to_bits() == (-b).to_bits());
        grl_ok &= tape.value(y) == x;
        let direct = grl_backward(&up, 1.0);
        grl_ok &= direct.iter().zip(up.iter()).all(|(a, b)| a.to_bits() == (-b).to_bits());
    }

    // Each detached partner is a separate leaf routed only through the
    // detached slot, so any gradient reaching it is a leak.
    let mut leak: f64 = 0.0;
    for _ in 0..50 {
        let n = 3;
        let a = random_matrix(&mut r, n, 2);
        let b = random_matrix(&mut r, n, 2);
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let bv = tape.leaf(b.clone());
        let bd = tape.detach(bv);
        let w = tape.leaf(Array2::eye(2));
        let root = graph::infonce(&mut tape, av, bd, w);
        let g = tape.backward(root);
        leak = leak.max(g.get_or_zeros(bv, b.dim()).iter().fold(0.0, |m, v| m.max(v.abs())));
        if g.get(av).is_none() {
            leak = f64::INFINITY;
        }
    }
    (grl_ok, leak)
}

/// `(max estimate - ln N, max |estimate| on constant matrices)` over
/// `draws` random score matrices for each `n`.
pub fn infonce_bound(n: usize, draws: usize) -> (f64, f64) {
    let mut r = rng(n as u64);
    let ln_n = (n as f64).ln();
    let mut excess = f64::NEG_INFINITY;
    let mut constant: f64 = 0.0;
    for k in 0..draws {
        let scale = [0.1, 1.0, 10.0, 100.0][k % 4];
        let f = random_matrix(&mut r, n, n).mapv(|v| v * scale);
        excess = excess.max(infonce_from_scores(f.view()) - ln_n);
        let c = Array2::from_elem((n, n), r.gen_range(-50.0..50.0));
        constant = constant.max(infonce_from_scores(c.view()).abs());
    }
    (excess, constant)
}

/// Training and held-out datasets built in memory from the synthetic
/// corpus.
pub fn synthetic_datasets(cfg: &ctvc::synth::CorpusConfig) -> (ctvc::training::Dataset, ctvc::training::Dataset) {
    use ctvc::training::{Dataset, Utterance};
    let mel = MelConfig::default();
    let utts = ctvc::synth::generate(cfg, &mel).unwrap();
    let per = cfg.utterances_per_speaker + cfg.heldout_per_speaker;
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, u) in utts.into_iter().enumerate() {
        let m = mel_spectrogram(&u.waveform, &mel).unwrap();
        let utt = Utterance::new(format!("spk{}_utt{:02}", u.speaker, i % per), u.speaker, m, u.alignment);
        if i % per < cfg.utterances_per_speaker {
            train.push(utt);
        } else {
            held.push(utt);
        }
    }
    let inv = ctvc::synth::inventory(cfg.num_phonemes);
    (
        Dataset::from_utterances(train, cfg.num_speakers, inv.clone(), mel.clone()),
        Dataset::from_utterances(held, cfg.num_speakers, inv, mel),
    )
}

/// A small corpus and model for fast training tests.
pub fn tiny_setup() -> (ctvc::training::Dataset, ctvc::training::TrainConfig) {
    let corpus = ctvc::synth::CorpusConfig {
        num_speakers: 3,
        utterances_per_speaker: 2,
        heldout_per_speaker: 0,
        duration_secs: 1.2,
        num_phonemes: 4,
        seed: 5,
        ..Default::default()
    };
    let (ds, _) = synthetic_datasets(&corpus);
    let model = ctvc::models::ModelConfig {
        content_channels: 8,
        content_rnn_hidden: 4,
        content_dim: 4,
        speaker_channels: 8,
        speaker_dim: 6,
        decoder_rnn_hidden: 8,
        decoder_channels: 8,
        classifier_hidden: 8,
        ..ctvc::models::ModelConfig::desk()
    };
    let cfg = ctvc::training::TrainConfig {
        batch_size: 3,
        steps: 6,
        checkpoint_every: 0,
        model,
        pairs: PairSampleConfig { pairs_per_utterance: 32, ..Default::default() },
        ..Default::default()
    };
    (ds, cfg)
}
