use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TrainExample, Vocab, PAD};
use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu, CiderScorer, CorpusStats, MAX_N};
use crate::model::{Dlct, ForwardCtx};
use crate::numerics::Tape;

use super::beam::decode_example;
use super::checkpoint::{save_checkpoint, Checkpoint, CheckpointManifest, RngState, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
use super::loss::{teacher_forcing, weighted_log_likelihood};
use super::optim::{clip_global_norm, global_norm, Adam};
use super::schedule::{lr_schedule, TrainConfig};
use super::scst::scst_sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Xe,
    Scst,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Xe => "xe",
            Phase::Scst => "scst",
        }
    }
}

/// Which phases a training run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PhaseSelection {
    Xe,
    Scst,
    #[default]
    Both,
}

impl std::str::FromStr for PhaseSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xe" => Ok(Self::Xe),
            "scst" => Ok(Self::Scst),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!("unknown phase {other:?}, expected xe, scst or both"))),
        }
    }
}

/// Completed epochs of the current phase and optimizer steps overall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: Phase,
    pub epoch: usize,
    pub step: u64,
}

/// One line of the metric log. `loss`, `cider_d` and `bleu4` are measured on
/// the validation split after the epoch; `train_loss` is the mean training
/// loss during XE and the mean reward during SCST.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub cider_d: f64,
    pub bleu4: f64,
    pub lr: f64,
    pub wall_ms: u64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean summed negative log-likelihood per reference caption.
    pub loss: f64,
    pub cider_d: f64,
    pub cider_each: Vec<f64>,
    /// Corpus BLEU-1 through BLEU-4.
    pub bleu: Vec<f64>,
    /// Best beam per example, without the end marker.
    pub captions: Vec<Vec<usize>>,
    /// Sum over examples of the best beam's log-probability.
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScstStepReport {
    pub mean_reward: f64,
    pub loss: f64,
    pub grad_norm: f64,
    /// False when every advantage vanished and the update was skipped.
    pub applied: bool,
}

/// Worker threads: `DLCT_THREADS` when set, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var("DLCT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Reference captions used for an example with `n` captions in `epoch`.
fn caption_choice(n: usize, epoch: usize, per_example: usize) -> Vec<usize> {
    let r = per_example.min(n);
    (0..r).map(|j| (epoch * r + j) % n).collect()
}

fn words(vocab: &Vocab, ids: &[usize]) -> Vec<String> {
    vocab.decode(ids)
}

/// Word-string references of every example.
pub fn reference_words(vocab: &Vocab, examples: &[TrainExample]) -> Vec<Vec<Vec<String>>> {
    examples.iter().map(|e| e.captions.iter().map(|c| words(vocab, c)).collect()).collect()
}

/// Summed log-likelihood of `captions` for one example; gradients when `train`.
fn caption_nll(model: &Dlct, ex: &TrainExample, captions: &[usize], train: bool, dropout_seed: u64) -> Result<(f64, Vec<Vec<f64>>)> {
    let seqs: Vec<&[usize]> = captions.iter().map(|&c| ex.captions[c].as_slice()).collect();
    let (inputs, targets) = teacher_forcing(&seqs);
    let weights = targets.iter().flatten().map(|&y| if y == PAD { 0.0 } else { 1.0 }).collect();
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, train);
    let mut ctx = if train {
        ForwardCtx::with_dropout(model.config().dropout, ChaCha8Rng::seed_from_u64(dropout_seed))
    } else {
        ForwardCtx::default()
    };
    let memory = model.encode(&mut tape, &bound, &ex.features, &mut ctx)?;
    let logits = model.decode(&mut tape, &bound, memory, &inputs, &mut ctx)?;
    let loss = weighted_log_likelihood(&mut tape, logits, &targets, weights, -1.0)?;
    if !train {
        return Ok((tape.value(loss).item(), Vec::new()));
    }
    tape.backward(loss)?;
    Ok((tape.value(loss).item(), bound.grads(&tape)))
}

/// Decodes and scores `examples` with beam width `beam`. CIDEr-D document
/// frequencies come from the references of `examples` themselves.
pub fn evaluate(model: &Dlct, examples: &[TrainExample], vocab: &Vocab, beam: usize, threads: usize) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let per: Vec<Result<(Vec<usize>, f64, f64, usize)>> = pool(threads)?.install(|| {
        examples
            .par_iter()
            .map(|ex| {
                let decoded = decode_example(model, &ex.features, beam)?;
                let all: Vec<usize> = (0..ex.captions.len()).collect();
                let (nll, _) = caption_nll(model, ex, &all, false, 0)?;
                Ok((decoded.best_words().to_vec(), decoded.log_probs[0], nll, all.len()))
            })
            .collect()
    });
    let mut captions = Vec::with_capacity(examples.len());
    let (mut log_prob, mut nll, mut count) = (0.0, 0.0, 0);
    for r in per {
        let (c, lp, l, n) = r?;
        captions.push(c);
        log_prob += lp;
        nll += l;
        count += n;
    }
    let refs = reference_words(vocab, examples);
    let cands: Vec<Vec<String>> = captions.iter().map(|c| words(vocab, c)).collect();
    let scorer = CiderScorer::new(CorpusStats::build(&refs)?);
    let (cider_d, cider_each) = scorer.corpus(&cands, &refs)?;
    let bleu = corpus_bleu(&cands, &refs, MAX_N)?;
    Ok(EvalReport { loss: nll / count.max(1) as f64, cider_d, cider_each, bleu, captions, log_prob })
}

/// Optimizer state and model under training.
pub struct Trainer {
    model: Dlct,
    cfg: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    progress: Progress,
    threads: usize,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(model: Dlct, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(model.params(), cfg.beta1, cfg.beta2, cfg.eps);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let threads = thread_count();
        Ok(Self { model, cfg, adam, rng, progress: Progress { phase: Phase::Xe, epoch: 0, step: 0 }, threads, pool: pool(threads)? })
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        c.manifest.train.validate()?;
        let model = Dlct::from_params(c.manifest.model.clone(), c.params)?;
        let threads = thread_count();
        Ok(Self {
            model,
            cfg: c.manifest.train,
            adam: c.adam,
            rng: c.manifest.rng.restore()?,
            progress: c.manifest.progress,
            threads,
            pool: pool(threads)?,
        })
    }

    /// Caps worker threads. Results do not depend on the count.
    pub fn set_threads(&mut self, threads: usize) -> Result<()> {
        self.threads = threads.max(1);
        self.pool = pool(self.threads)?;
        Ok(())
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn model(&self) -> &Dlct {
        &self.model
    }

    pub fn into_model(self) -> Dlct {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    /// Sums per-item gradients in item order, whatever the thread count.
    fn sum_gradients<T, V, F>(&self, items: &[T], f: F) -> Result<(Vec<Vec<f64>>, Vec<V>)>
    where
        T: Sync,
        V: Send,
        F: Fn(&T) -> Result<(V, Vec<Vec<f64>>)> + Sync + Send,
    {
        let mut total: Vec<Vec<f64>> = self.model.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        let mut values = Vec::with_capacity(items.len());
        for chunk in items.chunks(self.threads) {
            let results: Vec<Result<(V, Vec<Vec<f64>>)>> = self.pool.install(|| chunk.par_iter().map(&f).collect());
            for r in results {
                let (v, g) = r?;
                values.push(v);
                for (acc, g) in total.iter_mut().zip(&g) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
        }
        Ok((total, values))
    }

    /// One XE update on `batch` using the captions scheduled for `epoch`;
    /// returns the mean per-caption loss before the update.
    pub fn xe_step(&mut self, batch: &[&TrainExample], epoch: usize, lr: f64) -> Result<f64> {
        let per = self.cfg.xe_refs_per_example;
        let seeds: Vec<u64> = batch.iter().map(|_| self.rng.gen()).collect();
        let items: Vec<(&TrainExample, u64)> = batch.iter().copied().zip(seeds).collect();
        let model = &self.model;
        let (mut grads, losses) = self.sum_gradients(&items, |&(ex, seed)| {
            let caps = caption_choice(ex.captions.len(), epoch, per);
            caption_nll(model, ex, &caps, true, seed)
        })?;
        let n: usize = batch.iter().map(|ex| caption_choice(ex.captions.len(), epoch, per).len()).sum();
        let scale = 1.0 / n.max(1) as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
        self.adam.step(self.model.params_mut(), &grads, lr)?;
        self.progress.step += 1;
        Ok(losses.iter().sum::<f64>() * scale)
    }

    /// One SCST update rewarding beam candidates with CIDEr-D against each
    /// example's references under `scorer`.
    pub fn scst_step(&mut self, batch: &[&TrainExample], scorer: &CiderScorer, vocab: &Vocab, lr: f64) -> Result<ScstStepReport> {
        self.scst_step_with(batch, lr, |ex, w| {
            let refs: Vec<Vec<String>> = ex.captions.iter().map(|c| words(vocab, c)).collect();
            Ok(scorer.score(&words(vocab, w), &refs)?)
        })
    }

    /// One SCST update under an arbitrary sequence reward.
    pub fn scst_step_with<R>(&mut self, batch: &[&TrainExample], lr: f64, reward: R) -> Result<ScstStepReport>
    where
        R: Fn(&TrainExample, &[usize]) -> Result<f64> + Sync + Send,
    {
        let k = self.cfg.beam_size;
        let model = &self.model;
        let (mut grads, values) = self.sum_gradients(batch, |&ex| {
            let s = scst_sample(model, &ex.features, k, |w| reward(ex, w))?;
            let mean = s.rewards.iter().sum::<f64>() / s.rewards.len() as f64;
            Ok(((s.loss, mean), s.grads))
        })?;
        let scale = 1.0 / batch.len().max(1) as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
        let mean_reward = values.iter().map(|v| v.1).sum::<f64>() * scale;
        let loss = values.iter().map(|v| v.0).sum::<f64>() * scale;
        let applied = grads.iter().flatten().any(|&g| g != 0.0);
        let grad_norm = if self.cfg.scst_clip > 0.0 { clip_global_norm(&mut grads, self.cfg.scst_clip) } else { global_norm(&grads) };
        if applied {
            self.adam.step(self.model.params_mut(), &grads, lr)?;
            self.progress.step += 1;
        }
        Ok(ScstStepReport { mean_reward, loss, grad_norm, applied })
    }

    fn shuffled(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order
    }

    /// Runs the next XE epoch; returns mean training loss and the final rate.
    pub fn xe_epoch(&mut self, train: &[TrainExample]) -> Result<(f64, f64)> {
        let epoch = self.progress.epoch;
        let order = self.shuffled(train.len());
        let spe = order.len().div_ceil(self.cfg.xe_batch);
        let (mut total, mut lr) = (0.0, 0.0);
        for (s, idx) in order.chunks(self.cfg.xe_batch).enumerate() {
            lr = lr_schedule(epoch, s, spe, &self.cfg);
            let batch: Vec<&TrainExample> = idx.iter().map(|&i| &train[i]).collect();
            total += self.xe_step(&batch, epoch, lr)?;
        }
        self.progress.epoch += 1;
        Ok((total / spe.max(1) as f64, lr))
    }

    /// Runs the next SCST epoch; returns the mean reward.
    pub fn scst_epoch(&mut self, train: &[TrainExample], scorer: &CiderScorer, vocab: &Vocab) -> Result<f64> {
        let order = self.shuffled(train.len());
        let steps = order.len().div_ceil(self.cfg.scst_batch);
        let mut total = 0.0;
        for idx in order.chunks(self.cfg.scst_batch) {
            let batch: Vec<&TrainExample> = idx.iter().map(|&i| &train[i]).collect();
            total += self.scst_step(&batch, scorer, vocab, self.cfg.scst_lr)?.mean_reward;
        }
        self.progress.epoch += 1;
        Ok(total / steps.max(1) as f64)
    }

    /// Switches to the SCST phase with fresh optimizer moments.
    pub fn begin_scst(&mut self) {
        if self.progress.phase == Phase::Xe {
            self.progress = Progress { phase: Phase::Scst, epoch: 0, step: self.progress.step };
            let c = &self.cfg;
            self.adam = Adam::new(self.model.params(), c.beta1, c.beta2, c.eps);
        }
    }

    pub fn evaluate(&self, examples: &[TrainExample], vocab: &Vocab) -> Result<EvalReport> {
        evaluate(&self.model, examples, vocab, self.cfg.beam_size, self.threads)
    }

    /// Writes a checkpoint. Parameters and moments are first rounded to the
    /// 32-bit precision of the file format so that a resumed run continues
    /// from exactly the state this one continues from.
    pub fn save_checkpoint(&mut self, dir: &Path) -> Result<()> {
        for t in self.model.params_mut().tensors_mut() {
            t.quantize_f32();
        }
        for t in self.adam.m.iter_mut().chain(self.adam.v.iter_mut()) {
            t.quantize_f32();
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: super::checkpoint::config_hash(self.model.config()),
            model: self.model.config().clone(),
            train: self.cfg.clone(),
            progress: self.progress,
            adam_steps: self.adam.t,
            rng: RngState::capture(&self.rng),
            params: self.model.params().names().to_vec(),
        };
        save_checkpoint(dir, &manifest, self.model.params(), &self.adam)
    }
}

/// Where a training run writes its metric log and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub phases: PhaseSelection,
    pub out_dir: Option<PathBuf>,
    /// Validation examples scored after each epoch; `None` uses the whole split.
    pub val_limit: Option<usize>,
}

pub const METRIC_LOG: &str = "metrics.jsonl";

fn append_record(dir: &Path, record: &EpochRecord) -> Result<()> {
    let path = dir.join(METRIC_LOG);
    let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
}

/// Name of the checkpoint directory written after `epoch` of `phase`.
pub fn checkpoint_name(phase: Phase, epoch: usize) -> String {
    format!("{}-{epoch:03}", phase.name())
}

/// Runs the selected phases to completion from the trainer's current
/// progress, evaluating on the validation split after every epoch. With an
/// output directory, each record is appended to the metric log and a
/// checkpoint is written under `checkpoints/`.
pub fn train(trainer: &mut Trainer, data: &Dataset, opts: &TrainOptions) -> Result<Vec<EpochRecord>> {
    let vocab = data.vocab()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("training needs non-empty train and validation splits".into()));
    }
    let val = &data.val[..opts.val_limit.unwrap_or(data.val.len()).clamp(1, data.val.len())];
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
    }
    let mut records = Vec::new();
    let mut finish = |trainer: &mut Trainer, started: Instant, lr: f64, train_loss: f64| -> Result<()> {
        let report = trainer.evaluate(val, &vocab)?;
        let p = trainer.progress();
        let record = EpochRecord {
            epoch: p.epoch,
            phase: p.phase,
            loss: report.loss,
            cider_d: report.cider_d,
            bleu4: report.bleu[3],
            lr,
            wall_ms: started.elapsed().as_millis() as u64,
            train_loss,
        };
        log::info!(
            "{} epoch {}: val loss {:.4} CIDEr-D {:.4} BLEU-4 {:.4}",
            p.phase.name(),
            p.epoch,
            record.loss,
            record.cider_d,
            record.bleu4
        );
        if let Some(dir) = &opts.out_dir {
            let ckpt = dir.join("checkpoints");
            let name = checkpoint_name(p.phase, p.epoch);
            trainer.save_checkpoint(&ckpt.join(&name))?;
            fs::write(ckpt.join("latest"), format!("{name}\n")).map_err(|e| Error::io(&ckpt, e))?;
            append_record(dir, &record)?;
        }
        records.push(record);
        Ok(())
    };

    if opts.phases != PhaseSelection::Scst && trainer.progress.phase == Phase::Xe {
        while trainer.progress.epoch < trainer.cfg.xe_epochs {
            let started = Instant::now();
            let (loss, lr) = trainer.xe_epoch(&data.train)?;
            finish(trainer, started, lr, loss)?;
        }
    }
    if opts.phases != PhaseSelection::Xe {
        trainer.begin_scst();
        let scorer = CiderScorer::new(CorpusStats::build(&reference_words(&vocab, &data.train))?);
        while trainer.progress.epoch < trainer.cfg.scst_epochs {
            let started = Instant::now();
            let reward = trainer.scst_epoch(&data.train, &scorer, &vocab)?;
            let lr = trainer.cfg.scst_lr;
            finish(trainer, started, lr, reward)?;
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;
    use crate::geometry::GridLayout;
    use crate::model::ModelConfig;
    use crate::training::checkpoint::load_checkpoint;

    fn small() -> (Dataset, ModelConfig) {
        let grid = GridLayout::new(2, 2).unwrap();
        let data = generate_corpus(40, 5, grid).unwrap();
        let mut c = ModelConfig::desk(data.manifest.vocab.len());
        c.grid = grid;
        c.d_model = 16;
        c.d_ff = 32;
        c.layers = 1;
        (data, c)
    }

    fn cfg() -> TrainConfig {
        TrainConfig { xe_epochs: 2, scst_epochs: 1, xe_batch: 8, scst_batch: 8, beam_size: 2, warmup_epochs: 1, ..TrainConfig::desk() }
    }

    #[test]
    fn caption_rotation_covers_all_references() {
        let mut seen = std::collections::BTreeSet::new();
        for epoch in 0..5 {
            seen.extend(caption_choice(5, epoch, 1));
        }
        assert_eq!(seen.len(), 5);
        assert_eq!(caption_choice(5, 0, 9), vec![0, 1, 2, 3, 4]);
        assert_eq!(caption_choice(5, 1, 2), vec![2, 3]);
    }

    #[test]
    fn gradients_do_not_depend_on_thread_count() {
        let (data, c) = small();
        let batch: Vec<&TrainExample> = data.train.iter().take(6).collect();
        let mut params = Vec::new();
        for threads in [1, 3] {
            let mut t = Trainer::new(Dlct::new(c.clone(), 1).unwrap(), cfg(), 2).unwrap();
            t.set_threads(threads).unwrap();
            t.xe_step(&batch, 0, 1e-3).unwrap();
            params.push(t.model().params().clone());
        }
        assert_eq!(params[0], params[1]);
    }

    #[test]
    fn repeated_steps_reduce_batch_loss() {
        let (data, c) = small();
        let batch: Vec<&TrainExample> = data.train.iter().take(4).collect();
        let mut t = Trainer::new(Dlct::new(c, 1).unwrap(), cfg(), 2).unwrap();
        let first = t.xe_step(&batch, 0, 1e-3).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = t.xe_step(&batch, 0, 1e-3).unwrap();
        }
        assert!(last < first * 0.8, "{first} -> {last}");
    }

    #[test]
    fn training_run_is_reproducible_and_logs_each_epoch() {
        let (data, c) = small();
        let run = |dir: &Path| {
            let mut t = Trainer::new(Dlct::new(c.clone(), 1).unwrap(), cfg(), 2).unwrap();
            let opts = TrainOptions { phases: PhaseSelection::Both, out_dir: Some(dir.to_path_buf()), val_limit: None };
            train(&mut t, &data, &opts).unwrap()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = run(a.path());
        let rb = run(b.path());
        assert_eq!(ra.len(), 3);
        assert_eq!(ra.iter().map(|r| r.phase).collect::<Vec<_>>(), vec![Phase::Xe, Phase::Xe, Phase::Scst]);
        for (x, y) in ra.iter().zip(&rb) {
            assert_eq!((x.loss.to_bits(), x.cider_d.to_bits(), x.train_loss.to_bits()), (y.loss.to_bits(), y.cider_d.to_bits(), y.train_loss.to_bits()));
        }
        let log = fs::read_to_string(a.path().join(METRIC_LOG)).unwrap();
        assert_eq!(log.lines().count(), 3);
        let latest = fs::read_to_string(a.path().join("checkpoints/latest")).unwrap();
        assert_eq!(latest.trim(), "scst-001");
    }

    #[test]
    fn resume_reproduces_the_next_step_bitwise() {
        let (data, c) = small();
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(Dlct::new(c, 1).unwrap(), cfg(), 2).unwrap();
        t.xe_epoch(&data.train).unwrap();
        t.save_checkpoint(dir.path()).unwrap();
        let mut resumed = Trainer::from_checkpoint(load_checkpoint(dir.path()).unwrap()).unwrap();
        assert_eq!(resumed.progress(), t.progress());
        let batch: Vec<&TrainExample> = data.train.iter().skip(3).take(5).collect();
        for _ in 0..2 {
            let a = t.xe_step(&batch, 1, 1e-4).unwrap();
            let b = resumed.xe_step(&batch, 1, 1e-4).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let (ea, eb) = (t.xe_epoch(&data.train).unwrap(), resumed.xe_epoch(&data.train).unwrap());
        assert_eq!(ea.0.to_bits(), eb.0.to_bits());
    }

    #[test]
    fn constant_rewards_leave_parameters_untouched() {
        let (data, c) = small();
        let mut t = Trainer::new(Dlct::new(c, 1).unwrap(), cfg(), 2).unwrap();
        let batch: Vec<&TrainExample> = data.train.iter().take(3).collect();
        t.xe_step(&batch, 0, 1e-3).unwrap();
        let before = t.model().params().clone();
        let report = t.scst_step_with(&batch, 1.0, |_, _| Ok(0.75)).unwrap();
        assert!(!report.applied);
        assert_eq!(report.mean_reward, 0.75);
        assert_eq!(t.model().params(), &before);
    }

    #[test]
    fn evaluation_reports_bounded_scores() {
        let (data, c) = small();
        let model = Dlct::new(c, 1).unwrap();
        let r = evaluate(&model, &data.val, &data.vocab().unwrap(), 3, 2).unwrap();
        assert_eq!(r.captions.len(), data.val.len());
        assert!((0.0..=10.0).contains(&r.cider_d));
        assert!(r.bleu.iter().all(|b| (0.0..=1.0).contains(b)));
        assert!(r.loss > 0.0);
        let again = evaluate(&model, &data.val, &data.vocab().unwrap(), 3, 1).unwrap();
        assert_eq!(r, again);
    }
}
