//! Synthetic instrument categories: harmonic note sequences with ADSR
//! envelopes and vibrato, and motion features derived from the same note
//! sequence so that the visual stream predicts the audio envelope.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::io;

pub const HARMONICS: usize = 8;
pub const MOTION_CHANNELS: usize = 4;
/// Minimum L2 distance between the normalized harmonic profiles of any two
/// categories.
pub const MIN_PROFILE_DISTANCE: f64 = 0.1;
/// Rendered clips are scaled to this peak so that a mixture of two stays
/// within `[-1, 1]`.
pub const CLIP_PEAK: f64 = 0.5;
const F0_FLOOR_HZ: f64 = 50.0;
const ONSET_DECAY_S: f64 = 0.1;
const MOTION_SUBSAMPLES: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub category_id: u32,
    /// Relative amplitude of harmonics 1..=8, unit L2 norm.
    pub harmonics: Vec<f64>,
    pub f0_range_hz: (f64, f64),
    pub attack_s: f64,
    pub decay_s: f64,
    pub sustain: f64,
    pub release_s: f64,
    pub vibrato_rate_hz: f64,
    /// Peak frequency deviation as a fraction of f0.
    pub vibrato_depth: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub sample_rate_hz: u32,
    pub clip_seconds: f64,
    pub train_categories: usize,
    pub test_categories: usize,
    pub clips_per_category: usize,
    pub motion_frames: usize,
    pub motion_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sample_rate_hz: 8000,
            clip_seconds: 6.0,
            train_categories: 8,
            test_categories: 3,
            clips_per_category: 12,
            motion_frames: 24,
            motion_noise: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub category_id: u32,
    pub video_id: u32,
    /// Relative to the dataset directory.
    pub waveform_path: String,
    pub motion_path: String,
    pub duration_s: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SynthConfig,
    pub categories: Vec<CategorySpec>,
    pub train_categories: Vec<u32>,
    pub test_categories: Vec<u32>,
    pub clips: Vec<ClipRecord>,
}

/// A rendered clip: audio plus its `T_v x C_v` motion features.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub waveform: Waveform,
    pub motion: Array2<f64>,
}

/// Manifest with every clip loaded; `clips[i]` belongs to
/// `manifest.clips[i]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clips: Vec<Clip>,
}

/// Indices into the manifest's clip list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairIndices {
    pub p: usize,
    pub q: usize,
    pub template_p: usize,
    pub template_q: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestPair {
    pub pair_id: usize,
    pub clips: PairIndices,
}

fn nyquist_f0_cap(sample_rate_hz: u32) -> f64 {
    sample_rate_hz as f64 / 2.0 / HARMONICS as f64
}

fn draw_profile(rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let rolloff = rng.random_range(0.0..1.5);
        let p: Vec<f64> = (1..=HARMONICS)
            .map(|h| {
                if h > 1 && rng.random_bool(0.3) {
                    0.0
                } else {
                    rng.random_range(0.05..1.0) / (h as f64).powf(rolloff)
                }
            })
            .collect();
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            return p.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// Deterministic category from `seed`, for an 8 kHz sample rate.
pub fn make_category(seed: u64) -> CategorySpec {
    make_category_distinct(seed, 8000, &[])
}

/// Like [`make_category`], redrawing the harmonic profile until it is more
/// than [`MIN_PROFILE_DISTANCE`] away from every profile in `existing`.
pub fn make_category_distinct(seed: u64, sample_rate_hz: u32, existing: &[CategorySpec]) -> CategorySpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = nyquist_f0_cap(sample_rate_hz);
    let (lo_c, hi_c) = ((F0_FLOOR_HZ * 1.5).ln(), (cap / 1.25).ln());
    let center = rng.random_range(lo_c..hi_c).exp();
    let f0_range_hz = ((center / 1.2).max(F0_FLOOR_HZ + 1.0), (center * 1.2).min(cap - 1.0));
    let attack_s = rng.random_range(0.005..0.1);
    let decay_s = rng.random_range(0.05..0.3);
    let sustain = rng.random_range(0.2..0.9);
    let release_s = rng.random_range(0.02..0.2);
    let vibrato_rate_hz = rng.random_range(3.0..8.0);
    let vibrato_depth = rng.random_range(0.0..0.02);
    let harmonics = loop {
        let p = draw_profile(&mut rng);
        let far = existing.iter().all(|c| {
            c.harmonics
                .iter()
                .zip(&p)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                > MIN_PROFILE_DISTANCE
        });
        if far {
            break p;
        }
    };
    CategorySpec {
        category_id: existing.len() as u32,
        harmonics,
        f0_range_hz,
        attack_s,
        decay_s,
        sustain,
        release_s,
        vibrato_rate_hz,
        vibrato_depth,
        seed,
    }
}

/// One category per seed, ids in order, pairwise-distinct profiles.
pub fn make_categories(seeds: &[u64], sample_rate_hz: u32) -> Vec<CategorySpec> {
    let mut out: Vec<CategorySpec> = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let c = make_category_distinct(s, sample_rate_hz, &out);
        out.push(c);
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Note {
    onset: f64,
    length: f64,
    f0: f64,
    velocity: f64,
}

impl CategorySpec {
    fn envelope(&self, n: &Note, t: f64) -> f64 {
        let dt = t - n.onset;
        if dt < 0.0 {
            return 0.0;
        }
        let level = if dt < self.attack_s {
            dt / self.attack_s
        } else if dt < self.attack_s + self.decay_s {
            1.0 - (1.0 - self.sustain) * (dt - self.attack_s) / self.decay_s
        } else {
            self.sustain
        };
        let held = n.length.max(self.attack_s);
        let gain = if dt < held {
            1.0
        } else if dt < held + self.release_s {
            1.0 - (dt - held) / self.release_s
        } else {
            0.0
        };
        n.velocity * level * gain
    }

    fn note_span(&self, n: &Note) -> (f64, f64) {
        (n.onset, n.onset + n.length.max(self.attack_s) + self.release_s)
    }

    fn validate(&self, sample_rate_hz: u32) -> Result<()> {
        let cap = nyquist_f0_cap(sample_rate_hz);
        let (lo, hi) = self.f0_range_hz;
        if !(F0_FLOOR_HZ < lo && lo <= hi && hi < cap) {
            return Err(Error::InvalidArgument(format!(
                "category {}: f0 range ({lo}, {hi}) outside ({F0_FLOOR_HZ}, {cap})",
                self.category_id
            )));
        }
        if self.harmonics.len() != HARMONICS
            || self.harmonics.iter().any(|&a| a < 0.0)
            || self.harmonics.iter().all(|&a| a == 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "category {}: harmonic profile must have {HARMONICS} nonnegative entries, not all zero",
                self.category_id
            )));
        }
        Ok(())
    }
}

fn note_sequence(spec: &CategorySpec, duration_s: f64, rng: &mut ChaCha8Rng) -> Vec<Note> {
    let (lo, hi) = (spec.f0_range_hz.0.ln(), spec.f0_range_hz.1.ln());
    let mut notes = Vec::new();
    let mut t = rng.random_range(0.0..0.3);
    while t < duration_s {
        let length = rng.random_range(0.25..0.9);
        notes.push(Note {
            onset: t,
            length,
            f0: rng.random_range(lo..=hi).exp(),
            velocity: rng.random_range(0.4..1.0),
        });
        t += length + rng.random_range(0.0..0.35);
    }
    notes
}

/// Renders a clip of `duration_s` seconds and its `motion_frames x 4`
/// motion features: onset strength, note envelope, pitch position within
/// the audible range, and vibrato phase, each frame-averaged, plus
/// Gaussian noise of standard deviation `motion_noise`.
pub fn render_clip(
    spec: &CategorySpec,
    duration_s: f64,
    sample_rate_hz: u32,
    motion_frames: usize,
    motion_noise: f64,
    seed: u64,
) -> Result<Clip> {
    spec.validate(sample_rate_hz)?;
    if !(duration_s > 0.0) || motion_frames == 0 || !(motion_noise >= 0.0) {
        return Err(Error::InvalidArgument(
            "duration and motion frame count must be positive, noise nonnegative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let notes = note_sequence(spec, duration_s, &mut rng);
    let phases: Vec<f64> = (0..HARMONICS).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let sr = sample_rate_hz as f64;
    let n = (duration_s * sr).round() as usize;
    let nyquist = sr / 2.0;
    let mut samples = vec![0.0; n];
    let wr = 2.0 * PI * spec.vibrato_rate_hz;
    for note in &notes {
        let (start, end) = spec.note_span(note);
        let (i0, i1) = ((start * sr).ceil() as usize, ((end * sr).ceil() as usize).min(n));
        for (i, s) in samples.iter_mut().enumerate().take(i1).skip(i0) {
            let t = i as f64 / sr;
            let env = spec.envelope(note, t);
            if env == 0.0 {
                continue;
            }
            let dt = t - note.onset;
            // integral of f0 * (1 + depth * sin(wr * t))
            let phase = 2.0 * PI * note.f0 * (dt + spec.vibrato_depth * (1.0 - (wr * dt).cos()) / wr);
            let mut v = 0.0;
            for (h, (&a, &ph)) in spec.harmonics.iter().zip(&phases).enumerate() {
                let k = (h + 1) as f64;
                if a == 0.0 || k * note.f0 * (1.0 + spec.vibrato_depth) >= nyquist {
                    continue;
                }
                v += a * (k * phase + ph).sin();
            }
            *s += env * v;
        }
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = CLIP_PEAK / peak;
        samples.iter_mut().for_each(|v| *v = (*v * g) as f32 as f64);
    }

    let pitch_span = (nyquist_f0_cap(sample_rate_hz) / F0_FLOOR_HZ).ln();
    let noise = Normal::new(0.0, motion_noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let frame_len = duration_s / motion_frames as f64;
    let mut motion = Array2::zeros((motion_frames, MOTION_CHANNELS));
    for f in 0..motion_frames {
        let mut acc = [0.0; MOTION_CHANNELS];
        for s in 0..MOTION_SUBSAMPLES {
            let t = (f as f64 + (s as f64 + 0.5) / MOTION_SUBSAMPLES as f64) * frame_len;
            let mut strongest = (0.0, 0.0);
            for note in &notes {
                let dt = t - note.onset;
                if dt < 0.0 {
                    continue;
                }
                let env = spec.envelope(note, t);
                acc[0] += note.velocity * (-dt / ONSET_DECAY_S).exp();
                acc[1] += env;
                acc[3] += env * (wr * dt).sin();
                if env > strongest.0 {
                    strongest = (env, (note.f0 / F0_FLOOR_HZ).ln() / pitch_span);
                }
            }
            acc[2] += strongest.0 * strongest.1;
        }
        for (c, a) in acc.iter().enumerate() {
            let jitter = if motion_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            motion[[f, c]] = (a / MOTION_SUBSAMPLES as f64 + jitter) as f32 as f64;
        }
    }
    Ok(Clip {
        waveform: Waveform::new(samples, sample_rate_hz)?,
        motion,
    })
}

impl DatasetManifest {
    /// Disjoint splits, known categories, and at least two clips per
    /// category so that templates can be drawn.
    pub fn validate(&self) -> Result<()> {
        let train: BTreeSet<u32> = self.train_categories.iter().copied().collect();
        let test: BTreeSet<u32> = self.test_categories.iter().copied().collect();
        if let Some(c) = train.intersection(&test).next() {
            return Err(Error::Dataset(format!("category {c} is in both splits")));
        }
        if train.len() < 2 || test.len() < 2 {
            return Err(Error::Dataset("each split needs at least two categories".into()));
        }
        let known: BTreeSet<u32> = self.categories.iter().map(|c| c.category_id).collect();
        for (c, n) in self.clips_per_category() {
            if !known.contains(&c) {
                return Err(Error::Dataset(format!("clip of unknown category {c}")));
            }
            if n < 2 {
                return Err(Error::Dataset(format!(
                    "category {c} has {n} clip(s); templates need at least 2"
                )));
            }
        }
        for c in train.iter().chain(&test) {
            if !self.clips.iter().any(|r| r.category_id == *c) {
                return Err(Error::Dataset(format!("category {c} has no clips")));
            }
        }
        Ok(())
    }

    fn clips_per_category(&self) -> BTreeMap<u32, usize> {
        let mut m = BTreeMap::new();
        for r in &self.clips {
            *m.entry(r.category_id).or_insert(0) += 1;
        }
        m
    }

    fn by_category(&self, cats: &[u32]) -> Vec<Vec<usize>> {
        cats.iter()
            .map(|&c| {
                self.clips
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.category_id == c)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect()
    }

    pub fn is_train_clip(&self, index: usize) -> bool {
        self.clips
            .get(index)
            .is_some_and(|r| self.train_categories.contains(&r.category_id))
    }

    pub fn load_clips(&self, dir: &Path) -> Result<Vec<Clip>> {
        self.clips
            .iter()
            .map(|r| {
                Ok(Clip {
                    waveform: io::read_waveform(&dir.join(&r.waveform_path))?,
                    motion: io::read_matrix(&dir.join(&r.motion_path))?,
                })
            })
            .collect()
    }
}

fn pick_other(rng: &mut ChaCha8Rng, pool: &[usize], not: usize) -> usize {
    loop {
        let c = pool[rng.random_range(0..pool.len())];
        if c != not {
            return c;
        }
    }
}

/// Two clips of different training categories, each with a template clip
/// of its own category.
pub fn sample_training_pair(manifest: &DatasetManifest, rng: &mut ChaCha8Rng) -> Result<PairIndices> {
    let groups = manifest.by_category(&manifest.train_categories);
    if groups.len() < 2 || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::Dataset(
            "training split needs two categories with at least two clips each".into(),
        ));
    }
    let a = rng.random_range(0..groups.len());
    let mut b = rng.random_range(0..groups.len() - 1);
    if b >= a {
        b += 1;
    }
    let p = groups[a][rng.random_range(0..groups[a].len())];
    let q = groups[b][rng.random_range(0..groups[b].len())];
    Ok(PairIndices {
        p,
        q,
        template_p: pick_other(rng, &groups[a], p),
        template_q: pick_other(rng, &groups[b], q),
    })
}

/// `n_pairs` distinct cross-category pairs from the test split, with
/// templates, deterministic in `seed`.
pub fn build_test_set(manifest: &DatasetManifest, n_pairs: usize, seed: u64) -> Result<Vec<TestPair>> {
    let groups = manifest.by_category(&manifest.test_categories);
    if groups.len() < 2 || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::Dataset(
            "test split needs two categories with at least two clips each".into(),
        ));
    }
    let mut available = 0;
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            available += groups[i].len() * groups[j].len();
        }
    }
    if n_pairs > available {
        return Err(Error::Dataset(format!(
            "requested {n_pairs} test pairs, only {available} distinct cross-category pairs exist"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n_pairs);
    while out.len() < n_pairs {
        let a = rng.random_range(0..groups.len());
        let mut b = rng.random_range(0..groups.len() - 1);
        if b >= a {
            b += 1;
        }
        let p = groups[a][rng.random_range(0..groups[a].len())];
        let q = groups[b][rng.random_range(0..groups[b].len())];
        if !seen.insert((p.min(q), p.max(q))) {
            continue;
        }
        out.push(TestPair {
            pair_id: out.len(),
            clips: PairIndices {
                p,
                q,
                template_p: pick_other(&mut rng, &groups[a], p),
                template_q: pick_other(&mut rng, &groups[b], q),
            },
        });
    }
    Ok(out)
}

/// Renders every clip in memory.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    if config.clips_per_category < 2 {
        return Err(Error::Dataset(format!(
            "{} clip(s) per category; templates need at least 2",
            config.clips_per_category
        )));
    }
    if config.train_categories < 2 || config.test_categories < 2 {
        return Err(Error::Dataset("each split needs at least two categories".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_cat = config.train_categories + config.test_categories;
    let seeds: Vec<u64> = (0..n_cat).map(|_| rng.random()).collect();
    let categories = make_categories(&seeds, config.sample_rate_hz);
    let mut records = Vec::new();
    let mut clips = Vec::new();
    for cat in &categories {
        for v in 0..config.clips_per_category as u32 {
            let seed: u64 = rng.random();
            let stem = format!("clips/c{:02}_v{:03}", cat.category_id, v);
            clips.push(render_clip(
                cat,
                config.clip_seconds,
                config.sample_rate_hz,
                config.motion_frames,
                config.motion_noise,
                seed,
            )?);
            records.push(ClipRecord {
                category_id: cat.category_id,
                video_id: v,
                waveform_path: format!("{stem}.f32"),
                motion_path: format!("{stem}.motion.f32"),
                duration_s: config.clip_seconds,
                seed,
            });
        }
    }
    let ids: Vec<u32> = categories.iter().map(|c| c.category_id).collect();
    let manifest = DatasetManifest {
        config: config.clone(),
        categories,
        train_categories: ids[..config.train_categories].to_vec(),
        test_categories: ids[config.train_categories..].to_vec(),
        clips: records,
    };
    manifest.validate()?;
    Ok(Dataset { manifest, clips })
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("clips")).map_err(|e| Error::io(dir, e))?;
        for (r, c) in self.manifest.clips.iter().zip(&self.clips) {
            io::write_waveform(&dir.join(&r.waveform_path), &c.waveform)?;
            io::write_matrix(&dir.join(&r.motion_path), &c.motion)?;
        }
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        let clips = manifest.load_clips(dir)?;
        Ok(Dataset { manifest, clips })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SynthConfig {
        SynthConfig {
            clip_seconds: 1.0,
            train_categories: 2,
            test_categories: 2,
            clips_per_category: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn categories_are_deterministic_and_valid() {
        assert_eq!(make_category(7), make_category(7));
        for s in 0..200 {
            let c = make_category(s);
            c.validate(8000).unwrap();
            assert!(c.harmonics.iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn hundred_profiles_are_pairwise_distinct() {
        let cats = make_categories(&(0..100).collect::<Vec<_>>(), 8000);
        for i in 0..100 {
            for j in i + 1..100 {
                let d: f64 = cats[i]
                    .harmonics
                    .iter()
                    .zip(&cats[j].harmonics)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(d > MIN_PROFILE_DISTANCE);
            }
        }
    }

    #[test]
    fn clips_are_bounded_and_deterministic() {
        let spec = make_category(3);
        let a = render_clip(&spec, 2.0, 8000, 8, 0.05, 11).unwrap();
        let b = render_clip(&spec, 2.0, 8000, 8, 0.05, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.waveform.len(), 16000);
        assert_eq!(a.motion.dim(), (8, MOTION_CHANNELS));
        let peak = a.waveform.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak <= 1.0 && peak > 0.0);
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn motion_energy_tracks_audio_rms() {
        let frames = 24;
        let mut total = 0.0;
        for k in 0..50u64 {
            let spec = make_category(100 + k % 10);
            let clip = render_clip(&spec, 6.0, 8000, frames, 0.0, k).unwrap();
            let s = clip.waveform.samples();
            let hop = s.len() / frames;
            let rms: Vec<f64> = (0..frames)
                .map(|f| (s[f * hop..(f + 1) * hop].iter().map(|v| v * v).sum::<f64>() / hop as f64).sqrt())
                .collect();
            let energy: Vec<f64> = (0..frames).map(|f| clip.motion[[f, 1]]).collect();
            let r = pearson(&energy, &rms);
            assert!(r > 0.5, "clip {k}: correlation {r}");
            total += r;
        }
        assert!(total / 50.0 > 0.8);
    }

    #[test]
    fn training_pairs_respect_categories() {
        let ds = generate(&small_config()).unwrap();
        let m = &ds.manifest;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cat = |i: usize| m.clips[i].category_id;
        let mut seen = BTreeSet::new();
        for _ in 0..10_000 {
            let p = sample_training_pair(m, &mut rng).unwrap();
            assert_ne!(cat(p.p), cat(p.q));
            assert_eq!(cat(p.p), cat(p.template_p));
            assert_eq!(cat(p.q), cat(p.template_q));
            assert_ne!(p.p, p.template_p);
            assert_ne!(p.q, p.template_q);
            assert!(m.is_train_clip(p.p) && m.is_train_clip(p.q));
            seen.insert((cat(p.p), cat(p.q)));
        }
        // two training categories: both orders and nothing else
        let t = &m.train_categories;
        assert_eq!(seen, BTreeSet::from([(t[0], t[1]), (t[1], t[0])]));
    }

    #[test]
    fn test_set_is_deterministic_and_from_test_split() {
        let ds = generate(&small_config()).unwrap();
        let m = &ds.manifest;
        let a = build_test_set(m, 9, 4).unwrap();
        assert_eq!(a, build_test_set(m, 9, 4).unwrap());
        for tp in &a {
            for i in [tp.clips.p, tp.clips.q, tp.clips.template_p, tp.clips.template_q] {
                assert!(m.test_categories.contains(&m.clips[i].category_id));
            }
        }
        assert!(build_test_set(m, 10, 4).is_err());
    }

    #[test]
    fn single_clip_categories_are_rejected() {
        let cfg = SynthConfig {
            clips_per_category: 1,
            ..small_config()
        };
        assert!(generate(&cfg).is_err());
        let mut m = generate(&small_config()).unwrap().manifest;
        m.clips.retain(|r| !(r.category_id == 0 && r.video_id > 0));
        assert!(m.validate().is_err());
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let mut m = generate(&small_config()).unwrap().manifest;
        m.test_categories.push(m.train_categories[0]);
        assert!(m.validate().is_err());
    }

    #[test]
    fn save_and_load_round_trip() {
        let ds = generate(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        assert_eq!(back.clips, ds.clips);
    }
}
