//! Training loop, evaluation over a dataset, and checkpoints.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::DatasetRecord;
use crate::error::{Error, Result};
use crate::eval::{correspondence_alignment_analysis, evaluate, AlignmentAnalysis, MetricReport};
use crate::model::{Model, PairSummary, StepPlan};
use crate::nn::{Ctx, ParamStore};
use crate::objectives::{sample_margin_pair, total_loss, LossParts};
use crate::optim::{clip_grad_norm, AdamW};
use crate::tensor::Matrix;
use crate::types::{Components, LossWeights, ModelConfig, Prediction};

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Evaluate every this many epochs (and after the last); 0 only at the end.
    pub eval_every: usize,
    /// Lowest ground-truth saliency counted as a highlight.
    pub positive_level: u8,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 1e-4,
            grad_clip: 0.1,
            seed: 0,
            eval_every: 0,
            positive_level: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".to_string());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            errs.push("lr must be positive".to_string());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            errs.push("weight_decay must be non-negative".to_string());
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            errs.push("grad_clip must be non-negative".to_string());
        }
        if self.positive_level == 0 || self.positive_level > crate::types::SALIENCY_MAX {
            errs.push("positive_level must be in 1..=4".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Everything needed to reproduce a run besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(self) -> Result<Self> {
        let mut errs = Vec::new();
        for r in [
            crate::types::validate_config(self.model.clone()).map(|_| ()),
            self.loss.clone().validate().map(|_| ()),
            self.train.validate(),
        ] {
            match r {
                Err(Error::Config(e)) => errs.extend(e),
                Err(e) => return Err(e),
                Ok(()) => {}
            }
        }
        if errs.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(errs))
        }
    }
}

impl RunConfig {
    /// Desk-scale setting for synthetic features of width `feature_dim`.
    pub fn desk(feature_dim: usize) -> Self {
        Self {
            model: ModelConfig {
                video_dim: feature_dim,
                text_dim: feature_dim,
                hidden: 32,
                n_heads: 4,
                ff_dim: 64,
                num_dummies: 3,
                pool_size: 10,
                top_k: 1,
                n_moment_queries: 10,
                enc_layers: 2,
                dec_layers: 2,
                aca_layers: 1,
                dummy_enc_layers: 1,
                moment_enc_layers: 1,
                sentence_enc_layers: 1,
                ..ModelConfig::default()
            },
            loss: LossWeights::default(),
            train: TrainConfig { lr: 1e-3, ..TrainConfig::default() },
        }
    }

    /// Same run with the components of ablation row `row`.
    pub fn with_row(mut self, row: char) -> Result<Self> {
        self.model.components =
            Components::row(row).ok_or_else(|| Error::config(format!("unknown ablation row '{row}'")))?;
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch-averaged unweighted terms.
    pub parts: LossParts,
    /// Batch-averaged weighted total.
    pub total: f64,
    /// Evaluation summary without per-query rows.
    pub eval: Option<MetricReport>,
}

/// Model, optimizer and progress of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub run: RunConfig,
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        let run = run.validate()?;
        let model = Model::new(run.model.clone(), run.train.seed)?;
        let opt = AdamW::new(&model.store, run.train.lr, run.train.weight_decay);
        Ok(Self { model, opt, run, epoch: 0, history: Vec::new() })
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.run.train.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    /// One pass over `data` in a seeded order. On a non-finite loss the
    /// parameters and optimizer are restored to their state at the start of
    /// the epoch and a numerics error is returned.
    pub fn train_epoch(&mut self, data: &[DatasetRecord]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let snapshot = (self.model.store.clone(), self.opt.clone());
        match self.epoch_steps(data) {
            Ok((parts, total, n)) => {
                self.epoch += 1;
                let inv = 1.0 / n as f64;
                self.history.push(EpochLog { epoch: self.epoch, parts: parts.scaled(inv), total: total * inv, eval: None });
                Ok(())
            }
            Err(e) => {
                self.model.store = snapshot.0;
                self.opt = snapshot.1;
                Err(e)
            }
        }
    }

    fn epoch_steps(&mut self, data: &[DatasetRecord]) -> Result<(LossParts, f64, usize)> {
        let mut rng = self.epoch_rng(self.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut parts = LossParts::default();
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.run.train.batch_size) {
            let batch: Vec<&DatasetRecord> = chunk.iter().map(|&i| &data[i]).collect();
            let plan = sample_plan(&batch, &mut rng);
            let dropout_seed = rng.random::<u64>();
            let (p, t) = self.step(&batch, &plan, dropout_seed)?;
            parts.add(&p);
            total += t;
            steps += 1;
        }
        Ok((parts, total, steps))
    }

    fn step(&mut self, batch: &[&DatasetRecord], plan: &StepPlan, dropout_seed: u64) -> Result<(LossParts, f64)> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::train(&self.model.store, self.model.cfg.dropout, dropout_seed);
        let losses = self.model.batch_objective(&mut tape, &mut ctx, batch, &self.run.loss, plan)?;
        let total = tape.scalar(losses.total);
        if !total.is_finite() {
            return Err(Error::Numerics(format!("loss became {total} at epoch {}", self.epoch + 1)));
        }
        let mut grads = tape.backward(losses.total).into_param_grads(&tape);
        if grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::Numerics(format!("non-finite gradient at epoch {}", self.epoch + 1)));
        }
        if self.run.train.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, self.run.train.grad_clip);
        }
        self.opt.update(&mut self.model.store, &grads);
        debug_assert!((total_loss(&losses.parts, &self.run.loss) - total).abs() <= 1e-9 * total.abs().max(1.0));
        Ok((losses.parts, total))
    }

    /// Trains until `epochs` total epochs are done, evaluating on `eval`
    /// at the configured interval. `on_epoch` sees the trainer after every
    /// epoch (for checkpoints and logs).
    pub fn fit(
        &mut self,
        data: &[DatasetRecord],
        eval: Option<&[DatasetRecord]>,
        epochs: usize,
        mut on_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < epochs {
            self.train_epoch(data)?;
            let every = self.run.train.eval_every;
            let due = self.epoch == epochs || (every > 0 && self.epoch.is_multiple_of(every));
            if let (Some(ev), true) = (eval, due) {
                let mut report = self.evaluate(ev)?.report;
                report.queries.clear();
                self.history.last_mut().expect("epoch logged").eval = Some(report);
            }
            on_epoch(self)?;
        }
        Ok(())
    }

    pub fn evaluate(&self, data: &[DatasetRecord]) -> Result<Evaluation> {
        evaluate_model(&self.model, data, self.run.train.positive_level)
    }
}

/// Negative partners (another video in the batch) and margin pairs.
pub fn sample_plan(batch: &[&DatasetRecord], rng: &mut ChaCha8Rng) -> StepPlan {
    let negatives = (0..batch.len())
        .map(|b| {
            let vid = &batch[b].features.video_id;
            let cands: Vec<usize> = (0..batch.len()).filter(|&j| &batch[j].features.video_id != vid).collect();
            (!cands.is_empty()).then(|| cands[rng.random_range(0..cands.len())])
        })
        .collect();
    let margin_pairs = batch.iter().map(|r| sample_margin_pair(&r.gt.saliency, rng)).collect();
    StepPlan { negatives, margin_pairs, ..Default::default() }
}

/// Predictions, metrics and per-pair intermediates over a dataset.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub predictions: Vec<Prediction>,
    pub summaries: Vec<PairSummary>,
    pub report: MetricReport,
}

impl Evaluation {
    /// Binned cosine between correspondence and saliency against per-query mAP.
    pub fn alignment(&self, data: &[DatasetRecord], n_bins: usize) -> Result<Option<AlignmentAnalysis>> {
        let Some(a) = self.summaries.iter().map(|s| s.a_bar.clone()).collect::<Option<Vec<_>>>() else {
            return Ok(None);
        };
        let sal: Vec<Vec<u8>> = data.iter().map(|r| r.gt.saliency.clone()).collect();
        let maps: Vec<f64> = self.report.queries.iter().map(|q| q.map_avg).collect();
        correspondence_alignment_analysis(&a, &sal, &maps, n_bins).map(Some)
    }
}

pub fn evaluate_model(model: &Model, data: &[DatasetRecord], positive_level: u8) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(data.len());
    let mut summaries = Vec::with_capacity(data.len());
    for r in data {
        let (p, s) = model.predict(r)?;
        predictions.push(p);
        summaries.push(s);
    }
    let gts: Vec<_> = data.iter().map(|r| r.gt.clone()).collect();
    let report = evaluate(&predictions, &gts, positive_level)?;
    Ok(Evaluation { predictions, summaries, report })
}

/// Trains a fresh model for `run.train.epochs` epochs and evaluates it on `eval`.
pub fn train_and_evaluate(run: RunConfig, train: &[DatasetRecord], eval: &[DatasetRecord]) -> Result<(Trainer, Evaluation)> {
    let epochs = run.train.epochs;
    let mut t = Trainer::new(run)?;
    t.fit(train, None, epochs, |_| Ok(()))?;
    let e = t.evaluate(eval)?;
    Ok((t, e))
}

/// Mean and sample standard deviation of each report field.
pub fn summarize(reports: &[MetricReport]) -> Vec<(&'static str, f64, f64)> {
    if reports.is_empty() {
        return Vec::new();
    }
    let n = reports.len() as f64;
    let fields: Vec<_> = reports.iter().map(MetricReport::fields).collect();
    (0..fields[0].len())
        .map(|k| {
            let vals: Vec<f64> = fields.iter().map(|f| f[k].1).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = if vals.len() > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            (fields[0][k].0, mean, var.sqrt())
        })
        .collect()
}

// ---- checkpoints ----------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"CGCKPT01";
/// Same layout as the feature sidecars but with `f64` payload, so that
/// parameters and optimizer moments round-trip bit-exactly.
const TENSOR_MAGIC: &[u8; 8] = b"CGFEAT64";

/// JSON side of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub run: RunConfig,
    pub epoch: usize,
    pub optimizer_step: u64,
    pub history: Vec<EpochLog>,
    pub tensors: Vec<String>,
}

pub fn manifest_path(ckpt: &Path) -> std::path::PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, m: &Matrix) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (a, b) = buf.split_at(n);
    *buf = b;
    Ok(a)
}

fn take_u32(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().expect("4 bytes")))
}

fn get_tensor(buf: &mut &[u8]) -> Result<(String, Matrix)> {
    let len = take_u32(buf)? as usize;
    let name = String::from_utf8(take(buf, len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
    if take(buf, 8)? != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor header for {name}")));
    }
    let rows = take_u32(buf)? as usize;
    let cols = take_u32(buf)? as usize;
    let data = take(buf, rows * cols * 8)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((name, Matrix::from_vec(rows, cols, data)))
}

impl Trainer {
    /// Writes the binary tensor blob to `path` and the manifest next to it.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let (m, v) = self.opt.moments();
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        let count = 3 * self.model.store.len();
        buf.extend_from_slice(&(count as u32).to_le_bytes());
        let mut names = Vec::with_capacity(count);
        for (id, p) in self.model.store.iter() {
            put_tensor(&mut buf, &p.name, &p.value);
            names.push(p.name.clone());
            let k = id.index();
            for (prefix, t) in [("adam.m.", &m[k]), ("adam.v.", &v[k])] {
                let n = format!("{prefix}{}", p.name);
                put_tensor(&mut buf, &n, t);
                names.push(n);
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::File::create(path)?.write_all(&buf)?;
        let manifest = CheckpointManifest {
            version: 1,
            run: self.run.clone(),
            epoch: self.epoch,
            optimizer_step: self.opt.step,
            history: self.history.clone(),
            tensors: names,
        };
        fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut buf = bytes.as_slice();
        if take(&mut buf, 8)? != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let count = take_u32(&mut buf)? as usize;
        if count % 3 != 0 {
            return Err(Error::Format("checkpoint tensor count is not a multiple of 3".into()));
        }
        let mut store = ParamStore::new();
        let mut moments = (Vec::new(), Vec::new());
        for _ in 0..count / 3 {
            let (name, value) = get_tensor(&mut buf)?;
            let (_, m) = get_tensor(&mut buf)?;
            let (_, v) = get_tensor(&mut buf)?;
            store.add(name, value);
            moments.0.push(m);
            moments.1.push(v);
        }
        let model = Model::from_store(manifest.run.model.clone(), store)?;
        let mut opt = AdamW::new(&model.store, manifest.run.train.lr, manifest.run.train.weight_decay);
        opt.step = manifest.optimizer_step;
        opt.set_moments(moments.0, moments.1)?;
        Ok(Self { model, opt, run: manifest.run, epoch: manifest.epoch, history: manifest.history })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::gradcheck::probe_config;

    fn small_run(seed: u64) -> (RunConfig, Vec<DatasetRecord>) {
        let model = ModelConfig { video_dim: 8, text_dim: 8, ..probe_config() };
        let spec = SynthSpec { seed: 4, n_pairs: 12, num_clips: 8, feature_dim: 8, n_concepts: 6, ..Default::default() };
        let run = RunConfig {
            model,
            loss: LossWeights::default(),
            train: TrainConfig { batch_size: 4, lr: 1e-3, seed, ..Default::default() },
        };
        (run, generate_synthetic(&spec).unwrap())
    }

    fn params(t: &Trainer) -> Vec<Matrix> {
        t.model.store.iter().map(|(_, p)| p.value.clone()).collect()
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let (run, data) = small_run(0);
        let mut t = Trainer::new(run.clone()).unwrap();
        let before = params(&t);
        t.fit(&data, None, 0, |_| Ok(())).unwrap();
        assert_eq!(params(&t), before);
        assert_eq!(params(&t), params(&Trainer::new(run).unwrap()));
    }

    #[test]
    fn identical_seeds_identical_curves() {
        let (run, data) = small_run(3);
        let mut a = Trainer::new(run.clone()).unwrap();
        let mut b = Trainer::new(run.clone()).unwrap();
        a.fit(&data, Some(&data[..4]), 3, |_| Ok(())).unwrap();
        b.fit(&data, Some(&data[..4]), 3, |_| Ok(())).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(params(&a), params(&b));
        let mut other = run;
        other.train.seed = 4;
        let mut c = Trainer::new(other).unwrap();
        c.fit(&data, None, 1, |_| Ok(())).unwrap();
        assert_ne!(a.history[0].total, c.history[0].total);
    }

    #[test]
    fn training_reduces_the_loss() {
        let (run, data) = small_run(1);
        let mut t = Trainer::new(run).unwrap();
        t.fit(&data, None, 15, |_| Ok(())).unwrap();
        assert!(t.history.last().unwrap().total < t.history[0].total);
    }

    #[test]
    fn non_finite_loss_restores_the_epoch_start() {
        let (run, mut data) = small_run(0);
        let mut t = Trainer::new(run).unwrap();
        t.train_epoch(&data).unwrap();
        let before = (params(&t), t.opt.clone());
        data[7].features.clips.data_mut()[0] = f64::NAN;
        assert!(matches!(t.train_epoch(&data), Err(Error::Numerics(_))));
        assert_eq!(params(&t), before.0);
        assert_eq!(t.opt, before.1);
        assert_eq!(t.epoch, 1);
        assert_eq!(t.history.len(), 1);
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let (run, data) = small_run(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");

        let mut unbroken = Trainer::new(run.clone()).unwrap();
        unbroken.fit(&data, None, 4, |_| Ok(())).unwrap();

        let mut first = Trainer::new(run).unwrap();
        first.fit(&data, None, 2, |_| Ok(())).unwrap();
        first.save_checkpoint(&path).unwrap();
        let mut resumed = Trainer::load_checkpoint(&path).unwrap();
        assert_eq!(params(&resumed), params(&first));
        assert_eq!(resumed.opt, first.opt);
        assert_eq!(resumed.model.predict(&data[0]).unwrap(), first.model.predict(&data[0]).unwrap());

        resumed.fit(&data, None, 4, |_| Ok(())).unwrap();
        assert_eq!(resumed.history, unbroken.history);
        assert_eq!(params(&resumed), params(&unbroken));
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let (run, _) = small_run(0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        Trainer::new(run).unwrap().save_checkpoint(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Trainer::load_checkpoint(&path), Err(Error::Format(_))));
        fs::write(&path, b"NOTACKPT").unwrap();
        assert!(matches!(Trainer::load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn plans_pair_with_other_videos() {
        let (_, data) = small_run(0);
        let batch: Vec<&DatasetRecord> = data.iter().take(3).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = sample_plan(&batch, &mut rng);
        for (b, n) in plan.negatives.iter().enumerate() {
            assert_ne!(n.unwrap(), b);
        }
        assert_eq!(sample_plan(&batch[..1], &mut rng).negatives, vec![None]);
    }

    #[test]
    fn run_config_reports_every_problem() {
        let (mut run, _) = small_run(0);
        run.train.batch_size = 0;
        run.train.lr = -1.0;
        run.model.hidden = 0;
        match run.validate() {
            Err(Error::Config(errs)) => assert!(errs.len() >= 3, "{errs:?}"),
            other => panic!("{other:?}"),
        }
    }
}
