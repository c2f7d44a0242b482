//! Epoch loop with BCE loss, Adam, and early stopping on dev-set AUC.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{chunk_frames, make_chunks, Chunk, ChunkMode, Utterance};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{forward_tensors, loss_and_grads, FrameScores, FusionConfig};
use crate::tensor::{AdamConfig, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub chunk_s: f64,
    pub patience: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            chunk_s: 2.0,
            patience: 5,
            seed: 0,
            optimizer: AdamConfig::default(),
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs, patience and batch_size must be at least 1".into()));
        }
        if !(self.chunk_s > 0.0 && self.chunk_s.is_finite()) {
            return Err(Error::InvalidConfig(format!("chunk_s must be positive, got {}", self.chunk_s)));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub stopped_epoch: usize,
}

impl TrainLog {
    pub fn mean_epoch_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.wall_clock_s).sum::<f64>() / self.epochs.len().max(1) as f64
    }
}

/// Patience counter. An epoch improves only if its AUC is strictly greater
/// than the best so far; ties keep the earlier epoch.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, stale: 0 }
    }

    /// Records an epoch; returns true if it became the new best.
    pub fn observe(&mut self, epoch: usize, auc: f64) -> bool {
        match self.best {
            Some((_, b)) if !(auc > b) => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some((epoch, auc));
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Rank-sum AUC with midranks for tied scores.
pub fn compute_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k] != 0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn chunk_tensors(c: &Chunk) -> (Option<Tensor<f32>>, Option<Tensor<f32>>, Vec<f32>) {
    (
        c.mfcc.as_ref().map(|m| m.to_tensor()),
        c.ptm.as_ref().map(|m| m.to_tensor()),
        c.labels.iter().map(|&l| l as f32).collect(),
    )
}

/// Mean loss and mean gradients over `batch`, reduced in input order.
pub fn batch_gradients(
    params: &ParamStore<f32>,
    cfg: &FusionConfig,
    batch: &[Chunk],
    exec: Exec,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let per_chunk = exec.map(batch, |c| {
        let (m, p, y) = chunk_tensors(c);
        loss_and_grads(params, cfg, m.as_ref(), p.as_ref(), &y).map(|(l, g)| (l, g.into_params()))
    });
    let scale = 1.0 / batch.len() as f32;
    let mut loss = 0.0;
    let mut total: Vec<Tensor<f32>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    for r in per_chunk {
        let (l, g) = r?;
        loss += l as f64;
        for (acc, gi) in total.iter_mut().zip(&g) {
            for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += scale * b;
            }
        }
    }
    Ok((loss / batch.len() as f64, total))
}

/// One Adam step on `batch`; returns the loss before the update.
pub fn train_step(
    params: &mut ParamStore<f32>,
    cfg: &FusionConfig,
    batch: &[Chunk],
    adam: &AdamConfig,
    exec: Exec,
) -> Result<f64> {
    let (loss, grads) = batch_gradients(params, cfg, batch, exec)?;
    if !loss.is_finite() || !grads.iter().all(Tensor::is_finite) {
        return Err(Error::Numerical(format!("non-finite loss or gradient (loss = {loss})")));
    }
    params.adam_step(&grads, adam)?;
    Ok(loss)
}

/// Frame scores for a whole file, predicted chunk by chunk on the eval tiling.
pub fn predict(params: &ParamStore<f32>, cfg: &FusionConfig, utt: &Utterance, chunk_s: f64) -> Result<FrameScores> {
    let chunks = make_chunks::<ChaCha8Rng>(utt, chunk_s, ChunkMode::Eval)?;
    let mut p = Vec::with_capacity(utt.frames());
    for c in &chunks {
        let (m, pt, _) = chunk_tensors(c);
        let m = m.filter(|_| cfg.mode.uses_mfcc());
        let pt = pt.filter(|_| cfg.mode.uses_ptm());
        p.extend(forward_tensors(params, cfg, m.as_ref(), pt.as_ref())?.into_iter().map(f64::from));
    }
    Ok(FrameScores { p, hop_ms: utt.hop_ms() })
}

/// Scores for every file, in input order.
pub fn predict_all(
    params: &ParamStore<f32>,
    cfg: &FusionConfig,
    utts: &[Utterance],
    chunk_s: f64,
    exec: Exec,
) -> Result<Vec<FrameScores>> {
    exec.map(utts, |u| predict(params, cfg, u, chunk_s)).into_iter().collect()
}

/// Frame-level AUC pooled over all files.
pub fn evaluate_auc(
    params: &ParamStore<f32>,
    cfg: &FusionConfig,
    utts: &[Utterance],
    chunk_s: f64,
    exec: Exec,
) -> Result<f64> {
    let scores = predict_all(params, cfg, utts, chunk_s, exec)?;
    let s: Vec<f64> = scores.into_iter().flat_map(|f| f.p).collect();
    let l: Vec<u8> = utts.iter().flat_map(|u| u.labels.iter().copied()).collect();
    compute_auc(&s, &l)
}

pub struct TrainOutcome {
    /// Parameters from the best dev-AUC epoch.
    pub params: ParamStore<f32>,
    pub log: TrainLog,
}

fn check_inputs(cfg: &FusionConfig, utts: &[Utterance], which: &str) -> Result<()> {
    if utts.is_empty() {
        return Err(Error::InvalidInput(format!("{which} split is empty")));
    }
    for u in utts {
        for (used, stream, dim, name) in
            [(cfg.mode.uses_mfcc(), &u.mfcc, cfg.d_mfcc, "mfcc"), (cfg.mode.uses_ptm(), &u.ptm, cfg.d_ptm, "ptm")]
        {
            if !used {
                continue;
            }
            let s = stream.as_ref().ok_or(Error::MissingStream(name))?;
            if s.dim() != dim {
                return Err(Error::Shape(format!(
                    "{}: {name} features have {} dims, model expects {dim}",
                    u.file_id,
                    s.dim()
                )));
            }
        }
    }
    Ok(())
}

/// Trains from `init`, printing one progress line per epoch to stderr.
pub fn train(
    cfg: &FusionConfig,
    init: ParamStore<f32>,
    train_set: &[Utterance],
    dev_set: &[Utterance],
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(cfg, init, train_set, dev_set, tc, |r| {
        eprintln!("epoch={} loss={:.6} val_auc={:.6} sec={:.3}", r.epoch, r.train_loss, r.val_auc, r.wall_clock_s)
    })
}

/// Epoch-at-a-time training state. `train_with` drives it to completion;
/// callers that interleave several runs can step it directly.
pub struct Trainer<'a> {
    cfg: &'a FusionConfig,
    train_set: &'a [Utterance],
    dev_set: &'a [Utterance],
    tc: &'a TrainConfig,
    params: ParamStore<f32>,
    best: ParamStore<f32>,
    stopper: EarlyStopping,
    records: Vec<EpochRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: &'a FusionConfig,
        init: ParamStore<f32>,
        train_set: &'a [Utterance],
        dev_set: &'a [Utterance],
        tc: &'a TrainConfig,
    ) -> Result<Self> {
        tc.validate()?;
        cfg.validate()?;
        check_inputs(cfg, train_set, "train")?;
        check_inputs(cfg, dev_set, "dev")?;
        crate::model::check_store(&init, cfg)?;
        for u in train_set {
            chunk_frames(tc.chunk_s, u.hop_ms())?;
        }
        Ok(Self {
            cfg,
            train_set,
            dev_set,
            tc,
            best: init.clone(),
            params: init,
            stopper: EarlyStopping::new(tc.patience),
            records: Vec::new(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.records.len() >= self.tc.epochs || self.stopper.should_stop()
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    /// Runs one epoch, or returns `None` once the epoch cap or patience is reached.
    pub fn step(&mut self) -> Result<Option<&EpochRecord>> {
        if self.is_done() {
            return Ok(None);
        }
        let (cfg, tc) = (self.cfg, self.tc);
        let epoch = self.records.len() + 1;
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        rng.set_stream(epoch as u64);
        let mut chunks = Vec::new();
        for u in self.train_set {
            chunks.extend(make_chunks(u, tc.chunk_s, ChunkMode::Train(&mut rng))?);
        }
        if chunks.is_empty() {
            return Err(Error::InvalidInput(format!("no training file is at least {} s long", tc.chunk_s)));
        }
        chunks.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in chunks.chunks(tc.batch_size).enumerate() {
            let loss = train_step(&mut self.params, cfg, batch, &tc.optimizer, tc.exec).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, batch {}: {m}", b + 1)),
                other => other,
            })?;
            loss_sum += loss * batch.len() as f64;
        }
        let val_auc = evaluate_auc(&self.params, cfg, self.dev_set, tc.chunk_s, tc.exec)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / chunks.len() as f64,
            val_auc,
            wall_clock_s: started.elapsed().as_secs_f64(),
        };
        if self.stopper.observe(epoch, val_auc) {
            self.best = self.params.clone();
        }
        self.records.push(record);
        Ok(self.records.last())
    }

    /// Best-AUC parameters and the log. Errors if no epoch has run.
    pub fn finish(self) -> Result<TrainOutcome> {
        let (best_epoch, best_val_auc) =
            self.stopper.best().ok_or_else(|| Error::InvalidInput("no epoch has been run".into()))?;
        let stopped_epoch = self.records.len();
        Ok(TrainOutcome {
            params: self.best,
            log: TrainLog { epochs: self.records, best_epoch, best_val_auc, stopped_epoch },
        })
    }
}

/// Like [`train`] but hands each epoch record to `on_epoch`.
pub fn train_with(
    cfg: &FusionConfig,
    init: ParamStore<f32>,
    train_set: &[Utterance],
    dev_set: &[Utterance],
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, init, train_set, dev_set, tc)?;
    while let Some(record) = trainer.step()? {
        on_epoch(record);
    }
    trainer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(compute_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(compute_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(compute_auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(matches!(compute_auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn scripted_early_stop() {
        let aucs = [0.60, 0.70, 0.69, 0.68, 0.67, 0.66, 0.65, 0.9];
        let mut s = EarlyStopping::new(5);
        let mut last = 0;
        for (i, &a) in aucs.iter().enumerate() {
            s.observe(i + 1, a);
            last = i + 1;
            if s.should_stop() {
                break;
            }
        }
        assert_eq!(last, 7);
        assert_eq!(s.best(), Some((2, 0.70)));
    }

    #[test]
    fn ties_do_not_count_as_improvement() {
        let mut s = EarlyStopping::new(2);
        assert!(s.observe(1, 0.5));
        assert!(!s.observe(2, 0.5));
        assert!(!s.observe(3, 0.5));
        assert!(s.should_stop());
        assert_eq!(s.best(), Some((1, 0.5)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { chunk_s: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
