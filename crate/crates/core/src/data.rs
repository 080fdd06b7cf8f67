//! Synthetic grounding pairs, the JSONL annotation format with binary
//! feature sidecars, and prediction files.
//!
//! A dataset directory holds `pairs.jsonl` plus one `CGFEAT01` file per
//! video under `features/video/` and per query under `features/text/`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::types::{FeatureSequence, GroundTruth, MomentSpan, Prediction, SALIENCY_MAX};

pub const FEATURE_MAGIC: &[u8; 8] = b"CGFEAT01";
pub const DEFAULT_CLIP_SECONDS: f64 = 2.0;
pub const ANNOTATIONS_FILE: &str = "pairs.jsonl";

/// One annotated video-query pair with its features.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub features: FeatureSequence,
    pub gt: GroundTruth,
    pub duration_s: f64,
    pub query: String,
}

/// Parameters of the planted-moment generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_pairs: usize,
    pub num_clips: usize,
    pub feature_dim: usize,
    pub n_concepts: usize,
    /// Inclusive range of concept words per query (before the end token).
    pub words_per_query: [usize; 2],
    /// Inclusive range of the moment's share of the video.
    pub moment_fraction: [f64; 2],
    /// Noise norm on query words and moment clips.
    pub noise_in: f64,
    /// Noise norm on background clips.
    pub noise_out: f64,
    pub clip_seconds: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_pairs: 200,
            num_clips: 32,
            feature_dim: 64,
            n_concepts: 16,
            words_per_query: [2, 4],
            moment_fraction: [0.2, 0.5],
            noise_in: 0.05,
            noise_out: 0.5,
            clip_seconds: DEFAULT_CLIP_SECONDS,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.num_clips < 2 {
            errs.push("num_clips must be at least 2".to_string());
        }
        if self.feature_dim == 0 {
            errs.push("feature_dim must be positive".to_string());
        }
        let [lo, hi] = self.words_per_query;
        if lo == 0 || lo > hi {
            errs.push(format!("words_per_query [{lo}, {hi}] must satisfy 1 <= lo <= hi"));
        }
        if self.n_concepts <= hi {
            errs.push(format!("n_concepts {} must exceed the largest query size {hi}", self.n_concepts));
        }
        let [a, b] = self.moment_fraction;
        if !(a > 0.0 && a <= b && b < 1.0) {
            errs.push(format!("moment_fraction [{a}, {b}] must lie inside (0, 1) and be ordered"));
        }
        for (name, v) in [("noise_in", self.noise_in), ("noise_out", self.noise_out)] {
            if !(v.is_finite() && v >= 0.0) {
                errs.push(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.clip_seconds.is_finite() && self.clip_seconds > 0.0) {
            errs.push("clip_seconds must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Isotropic Gaussian noise whose expected norm is about `scale`.
fn noise(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    let s = scale / (dim as f64).sqrt();
    (0..dim).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Rounds through `f32` so in-memory data equals what the sidecars store.
fn as_stored(v: f64) -> f64 {
    v as f32 as f64
}

/// Generates `n_pairs` planted-moment pairs, each on its own video.
///
/// Words are noisy copies of 2-4 concept vectors followed by an end token
/// shared by every query. One contiguous window of clips holds the mean of
/// the query concepts plus small noise; every other clip holds a random
/// concept outside the query plus large noise. Inside the window the noise
/// scale grows quadratically from the center to the edges, and saliency is
/// 4 minus the rounded excess of the measured noise norm over the base
/// scale, floored at 1.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<DatasetRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;
    let concepts: Vec<Vec<f64>> = (0..spec.n_concepts).map(|_| unit_vector(&mut rng, d)).collect();
    let eos = unit_vector(&mut rng, d);
    let n = spec.num_clips;
    let mut out = Vec::with_capacity(spec.n_pairs);
    for k in 0..spec.n_pairs {
        let n_words = rng.random_range(spec.words_per_query[0]..=spec.words_per_query[1]);
        let mut ids: Vec<usize> = (0..spec.n_concepts).collect();
        ids.shuffle(&mut rng);
        let (chosen, others) = ids.split_at(n_words);

        let mut words = Matrix::zeros(n_words + 1, d);
        for (r, &c) in chosen.iter().enumerate() {
            let e = noise(&mut rng, d, spec.noise_in);
            for j in 0..d {
                words.set(r, j, as_stored(concepts[c][j] + e[j]));
            }
        }
        for j in 0..d {
            words.set(n_words, j, as_stored(eos[j]));
        }
        let mut mean = vec![0.0; d];
        for &c in chosen {
            for j in 0..d {
                mean[j] += concepts[c][j] / n_words as f64;
            }
        }

        let frac = rng.random_range(spec.moment_fraction[0]..=spec.moment_fraction[1]);
        let len = ((frac * n as f64).round() as usize).clamp(1, n - 1);
        let start = rng.random_range(0..=n - len);
        let mut clips = Matrix::zeros(n, d);
        let mut saliency = vec![0u8; n];
        let half = len as f64 / 2.0;
        for i in 0..n {
            let inside = i >= start && i < start + len;
            let (base, e) = if inside {
                let dist = ((i - start) as f64 + 0.5 - half).abs() / half;
                let scale = 1.0 + 3.0 * dist * dist;
                let e = noise(&mut rng, d, spec.noise_in * scale);
                saliency[i] = if spec.noise_in > 0.0 {
                    let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let excess = (norm / spec.noise_in - 1.0).round().max(0.0);
                    (SALIENCY_MAX as f64 - excess).max(1.0) as u8
                } else {
                    SALIENCY_MAX
                };
                (&mean, e)
            } else {
                let c = others[rng.random_range(0..others.len())];
                (&concepts[c], noise(&mut rng, d, spec.noise_out))
            };
            for j in 0..d {
                clips.set(i, j, as_stored(base[j] + e[j]));
            }
        }

        let span = MomentSpan::from_start_end(start as f64 / n as f64, (start + len) as f64 / n as f64)?;
        let gt = GroundTruth::new(vec![span], saliency)?;
        let query = chosen.iter().map(|c| format!("concept{c}")).chain(["<eos>".to_string()]).collect::<Vec<_>>();
        let features = FeatureSequence::new(clips, words, format!("vid{k:05}"), format!("q{k:05}"))?;
        out.push(DatasetRecord { features, gt, duration_s: n as f64 * spec.clip_seconds, query: query.join(" ") });
    }
    Ok(out)
}

// ---- CGFEAT01 ------------------------------------------------------------

/// Writes a matrix as `CGFEAT01`, `u32` rows, `u32` cols, then row-major
/// little-endian `f32`.
pub fn write_features(path: &Path, m: &Matrix) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * m.len());
    encode_features(&mut buf, m)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn encode_features(buf: &mut Vec<u8>, m: &Matrix) -> Result<()> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::Format("too many rows".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::Format("too many columns".into()))?;
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    for &v in m.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let mut f = File::open(path)?;
    decode_features(&mut f).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn decode_features(r: &mut impl Read) -> Result<Matrix> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|_| Error::Format("truncated header".into()))?;
    if &head[..8] != FEATURE_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let rows = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(head[12..16].try_into().expect("4 bytes")) as usize;
    let mut payload = vec![0u8; rows * cols * 4];
    r.read_exact(&mut payload).map_err(|_| Error::Format("truncated payload".into()))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

// ---- annotations ---------------------------------------------------------

/// A saliency entry: one score or several annotator scores.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SaliencyEntry {
    Single(f64),
    Multi(Vec<f64>),
}

impl SaliencyEntry {
    /// Rounded mean of the annotator scores.
    fn level(&self) -> Result<u8> {
        let v = match self {
            SaliencyEntry::Single(v) => *v,
            SaliencyEntry::Multi(vs) if vs.is_empty() => 0.0,
            SaliencyEntry::Multi(vs) => vs.iter().sum::<f64>() / vs.len() as f64,
        };
        if !(0.0..=SALIENCY_MAX as f64).contains(&v) {
            return Err(Error::Range(format!("saliency score {v} outside 0..={SALIENCY_MAX}")));
        }
        Ok(v.round() as u8)
    }
}

/// One line of the annotation file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Annotation {
    pub qid: String,
    pub query: String,
    pub duration: f64,
    pub vid: String,
    pub relevant_windows: Vec<[f64; 2]>,
    /// Per-clip scores, or per listed clip when `relevant_clip_ids` is given.
    pub saliency_scores: Vec<SaliencyEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevant_clip_ids: Option<Vec<usize>>,
}

pub fn video_feature_path(dir: &Path, vid: &str) -> PathBuf {
    dir.join("features").join("video").join(format!("{vid}.cgfeat"))
}

pub fn text_feature_path(dir: &Path, qid: &str) -> PathBuf {
    dir.join("features").join("text").join(format!("{qid}.cgfeat"))
}

/// Writes `pairs.jsonl` and the feature sidecars under `dir`.
pub fn save_dataset(dir: &Path, records: &[DatasetRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(ANNOTATIONS_FILE))?);
    for r in records {
        let a = Annotation {
            qid: r.features.query_id.clone(),
            query: r.query.clone(),
            duration: r.duration_s,
            vid: r.features.video_id.clone(),
            relevant_windows: r
                .gt
                .spans
                .iter()
                .map(|s| {
                    let (a, b) = s.to_start_end();
                    [a * r.duration_s, b * r.duration_s]
                })
                .collect(),
            saliency_scores: r.gt.saliency.iter().map(|&s| SaliencyEntry::Single(s as f64)).collect(),
            relevant_clip_ids: None,
        };
        serde_json::to_writer(&mut w, &a)?;
        w.write_all(b"\n")?;
        write_features(&video_feature_path(dir, &r.features.video_id), &r.features.clips)?;
        write_features(&text_feature_path(dir, &r.features.query_id), &r.features.words)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a dataset directory written by [`save_dataset`] or laid out the
/// same way.
pub fn load_dataset(dir: &Path, clip_seconds: f64) -> Result<Vec<DatasetRecord>> {
    load_jsonl(&dir.join(ANNOTATIONS_FILE), clip_seconds)
}

/// Parses an annotation file, resolving features from sidecars next to it.
pub fn load_jsonl(path: &Path, clip_seconds: f64) -> Result<Vec<DatasetRecord>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        out.push(annotation_to_record(dir, &a, clip_seconds)?);
    }
    Ok(out)
}

/// Normalizes windows, collapses saliency and attaches sidecar features.
pub fn annotation_to_record(dir: &Path, a: &Annotation, clip_seconds: f64) -> Result<DatasetRecord> {
    if !(a.duration.is_finite() && a.duration > 0.0) {
        return Err(Error::Range(format!("{}: duration {} must be positive", a.qid, a.duration)));
    }
    let spans = windows_to_spans(&a.relevant_windows, a.duration)?;
    let n = (a.duration / clip_seconds - 1e-9).ceil().max(1.0) as usize;
    let mut saliency = vec![0u8; n];
    match &a.relevant_clip_ids {
        Some(ids) => {
            if ids.len() != a.saliency_scores.len() {
                return Err(Error::Shape(format!("{}: clip ids and saliency scores differ in length", a.qid)));
            }
            for (&c, s) in ids.iter().zip(&a.saliency_scores) {
                if c >= n {
                    return Err(Error::Range(format!("{}: clip id {c} beyond {n} clips", a.qid)));
                }
                saliency[c] = s.level()?;
            }
        }
        None => {
            if a.saliency_scores.len() != n {
                return Err(Error::Shape(format!(
                    "{}: {} saliency scores for {n} clips",
                    a.qid,
                    a.saliency_scores.len()
                )));
            }
            for (slot, s) in saliency.iter_mut().zip(&a.saliency_scores) {
                *slot = s.level()?;
            }
        }
    }
    let clips = read_features(&video_feature_path(dir, &a.vid))?;
    let words = read_features(&text_feature_path(dir, &a.qid))?;
    if clips.rows() != n {
        return Err(Error::Shape(format!("{}: video features have {} rows, expected {n}", a.vid, clips.rows())));
    }
    Ok(DatasetRecord {
        features: FeatureSequence::new(clips, words, a.vid.clone(), a.qid.clone())?,
        gt: GroundTruth::new(spans, saliency)?,
        duration_s: a.duration,
        query: a.query.clone(),
    })
}

/// Converts second-valued windows to normalized spans.
pub fn windows_to_spans(windows: &[[f64; 2]], duration: f64) -> Result<Vec<MomentSpan>> {
    windows
        .iter()
        .map(|&[s, e]| {
            if !(s >= 0.0 && e <= duration) {
                return Err(Error::Range(format!("window [{s}, {e}] outside [0, {duration}]")));
            }
            MomentSpan::from_start_end(s / duration, e / duration)
        })
        .collect()
}

// ---- predictions ---------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionLine {
    pub qid: String,
    pub vid: String,
    pub duration: f64,
    /// `[start_s, end_s, confidence]`, highest confidence first.
    pub pred_relevant_windows: Vec<[f64; 3]>,
    pub pred_saliency_scores: Vec<f64>,
}

pub fn save_predictions(preds: &[Prediction], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in preds {
        let line = PredictionLine {
            qid: p.query_id.clone(),
            vid: p.video_id.clone(),
            duration: p.duration_s,
            pred_relevant_windows: p
                .spans
                .iter()
                .map(|(s, c)| {
                    let (a, b) = s.to_start_end();
                    [a * p.duration_s, b * p.duration_s, *c]
                })
                .collect(),
            pred_saliency_scores: p.saliency.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        let spans = p
            .pred_relevant_windows
            .iter()
            .map(|&[s, e, c]| Ok((MomentSpan::from_start_end(s / p.duration, e / p.duration)?, c)))
            .collect::<Result<Vec<_>>>()?;
        out.push(Prediction::new(p.qid, p.vid, p.duration, spans, p.pred_saliency_scores));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec { seed, n_pairs: 12, ..SynthSpec::default() }
    }

    #[test]
    fn generation_is_deterministic_to_the_byte() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_dataset(a.path(), &generate_synthetic(&small(7)).unwrap()).unwrap();
        save_dataset(b.path(), &generate_synthetic(&small(7)).unwrap()).unwrap();
        let read = |d: &Path, rel: &str| fs::read(d.join(rel)).unwrap();
        assert_eq!(read(a.path(), ANNOTATIONS_FILE), read(b.path(), ANNOTATIONS_FILE));
        assert_eq!(read(a.path(), "features/video/vid00003.cgfeat"), read(b.path(), "features/video/vid00003.cgfeat"));
        assert_ne!(generate_synthetic(&small(8)).unwrap(), generate_synthetic(&small(7)).unwrap());
    }

    #[test]
    fn zero_noise_moments_are_exact_concept_means() {
        let spec = SynthSpec { noise_in: 0.0, ..small(1) };
        for r in generate_synthetic(&spec).unwrap() {
            let n_words = r.features.num_words() - 1;
            let mut mean = vec![0.0; spec.feature_dim];
            for w in 0..n_words {
                for (m, v) in mean.iter_mut().zip(r.features.words.row(w)) {
                    *m += v / n_words as f64;
                }
            }
            for i in r.gt.positive_clips() {
                assert_eq!(r.gt.saliency[i], 4);
                for (a, b) in r.features.clips.row(i).iter().zip(&mean) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn shapes_and_consistency() {
        let spec = SynthSpec { n_pairs: 200, ..SynthSpec::default() };
        let data = generate_synthetic(&spec).unwrap();
        assert_eq!(data.len(), 200);
        for r in &data {
            assert_eq!(r.gt.saliency.len(), 32);
            assert_eq!(r.features.clips.shape(), (32, 64));
            assert!(r.gt.inconsistent_clips().is_empty());
            assert!(r.gt.saliency.iter().all(|&s| s <= 4));
            assert!((3..=5).contains(&r.features.num_words()));
            assert_eq!(r.duration_s, 64.0);
            let positives = r.gt.positive_clips().len();
            assert!((6..=16).contains(&positives), "{positives}");
            assert!(r.gt.saliency.contains(&4));
        }
    }

    #[test]
    fn moment_clips_are_closer_to_the_query() {
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        for seed in 0..5 {
            let data = generate_synthetic(&small(seed)).unwrap();
            let (mut inside, mut outside) = (Vec::new(), Vec::new());
            for r in &data {
                let n = r.features.num_words() - 1;
                let mut mean = vec![0.0; 64];
                for w in 0..n {
                    for (m, v) in mean.iter_mut().zip(r.features.words.row(w)) {
                        *m += v;
                    }
                }
                for i in 0..r.features.num_clips() {
                    let c = cos(r.features.clips.row(i), &mean);
                    if r.gt.relevance[i] { inside.push(c) } else { outside.push(c) }
                }
            }
            let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            assert!(avg(&inside) > avg(&outside) + 0.5, "seed {seed}");
        }
    }

    #[test]
    fn invalid_spec_lists_problems() {
        let spec = SynthSpec { n_concepts: 3, moment_fraction: [0.6, 0.2], ..SynthSpec::default() };
        match generate_synthetic(&spec) {
            Err(Error::Config(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn feature_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_rows(&[vec![1.5, -2.0, 0.25], vec![3.0, 0.0, -0.125]]);
        let p = dir.path().join("x.cgfeat");
        write_features(&p, &m).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"CGFEAT01");
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(read_features(&p).unwrap(), m);
        fs::write(&p, b"CGFEAT02\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_features(&p), Err(Error::Format(_))));
    }

    fn write_pair(dir: &Path, line: &str, clips: usize) {
        fs::write(dir.join(ANNOTATIONS_FILE), line).unwrap();
        write_features(&video_feature_path(dir, "v1"), &Matrix::filled(clips, 2, 0.5)).unwrap();
        write_features(&text_feature_path(dir, "q1"), &Matrix::filled(2, 2, 1.0)).unwrap();
    }

    #[test]
    fn jsonl_windows_and_saliency() {
        let dir = tempfile::tempdir().unwrap();
        let line = r#"{"qid":"q1","query":"a b","duration":20,"vid":"v1","relevant_windows":[[0,10]],"saliency_scores":[[4,3,4],[2,2,3],[1,1,1],[3,4,4],[4,4,4],[0,0,0],[0,0,0],[0,0,0],[0,0,0],[0,0,0]]}"#;
        write_pair(dir.path(), line, 10);
        let data = load_jsonl(&dir.path().join(ANNOTATIONS_FILE), 2.0).unwrap();
        assert_eq!(data.len(), 1);
        let s = data[0].gt.spans[0];
        assert!((s.center - 0.25).abs() < 1e-12 && (s.width - 0.5).abs() < 1e-12);
        assert_eq!(&data[0].gt.saliency[..5], &[4, 2, 1, 4, 4]);
    }

    #[test]
    fn jsonl_with_clip_ids() {
        let dir = tempfile::tempdir().unwrap();
        let line = r#"{"qid":"q1","query":"a","duration":7,"vid":"v1","relevant_windows":[[2,4]],"relevant_clip_ids":[1],"saliency_scores":[[2,3,3]]}"#;
        write_pair(dir.path(), line, 4);
        let data = load_jsonl(&dir.path().join(ANNOTATIONS_FILE), 2.0).unwrap();
        assert_eq!(data[0].gt.saliency, vec![0, 3, 0, 0]);
    }

    #[test]
    fn jsonl_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(ANNOTATIONS_FILE);
        fs::write(&p, "").unwrap();
        assert!(load_jsonl(&p, 2.0).unwrap().is_empty());
        fs::write(&p, "{\n").unwrap();
        assert!(matches!(load_jsonl(&p, 2.0), Err(Error::Parse { line: 1, .. })));
        let line = r#"{"qid":"q1","query":"a","duration":4,"vid":"v1","relevant_windows":[[2,6]],"saliency_scores":[0,1]}"#;
        write_pair(dir.path(), line, 2);
        assert!(matches!(load_jsonl(&p, 2.0), Err(Error::Range(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic(&small(3)).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        assert_eq!(load_dataset(dir.path(), 2.0).unwrap(), data);
    }

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("preds.jsonl");
        let pred = Prediction::new(
            "q1",
            "v1",
            20.0,
            vec![(MomentSpan::new(0.25, 0.5).unwrap(), 0.9), (MomentSpan::new(0.7, 0.2).unwrap(), 0.3)],
            vec![0.1, -0.4],
        );
        save_predictions(std::slice::from_ref(&pred), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["pred_relevant_windows"][0], serde_json::json!([0.0, 10.0, 0.9]));
        let back = load_predictions(&p).unwrap();
        for ((a, ca), (b, cb)) in back[0].spans.iter().zip(&pred.spans) {
            assert!((a.center - b.center).abs() < 1e-6 && (a.width - b.width).abs() < 1e-6 && ca == cb);
        }
        assert_eq!(back[0].saliency, pred.saliency);

        save_predictions(&[], &p).unwrap();
        assert!(fs::read(&p).unwrap().is_empty());
    }
}
