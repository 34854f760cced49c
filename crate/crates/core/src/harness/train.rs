//! The optimization loop.

use std::fmt::Write as _;
use std::path::PathBuf;

use kpt_tensor::nn::ParamGroup;
use kpt_tensor::optim::{Adam, AdamConfig};
use kpt_tensor::Graph;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::model::{compute_losses, forward_batch, loss_values, prepare, LossValues, Model, PreparedSample};
use crate::error::{KptError, Result};
use crate::synthgen::SceneSample;

/// Mixes the run seed with stream identifiers into one RNG seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    // splitmix64 over the sequence
    let mut x = seed;
    for &p in parts {
        x ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x = z ^ (z >> 31);
    }
    x
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub losses: LossValues,
    pub skipped: usize,
}

#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub identity_loss: bool,
    pub records: Vec<StepRecord>,
}

impl RunLog {
    pub fn header(identity_loss: bool) -> String {
        if identity_loss {
            "step,epoch,l_h,l_ki,l_hand,l_obj,total,skipped".into()
        } else {
            "step,epoch,l_h,l_hand,l_obj,total,skipped".into()
        }
    }

    /// One CSV row. Values print as `f32` so equal losses give equal text.
    pub fn row(r: &StepRecord, identity_loss: bool) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{}", x as f32)).unwrap_or_default();
        let l = &r.losses;
        let mut s = format!("{},{},{}", r.step, r.epoch, f(Some(l.l_h)));
        if identity_loss {
            let _ = write!(s, ",{}", f(l.l_ki));
        }
        let _ = write!(s, ",{},{},{},{}", f(l.l_hand), f(l.l_obj), f(Some(l.total)), r.skipped);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::header(self.identity_loss);
        out.push('\n');
        for r in &self.records {
            out.push_str(&Self::row(r, self.identity_loss));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Written every `checkpoint_every` steps and at the end.
    pub checkpoint: Option<PathBuf>,
    /// CSV loss log, appended to row by row.
    pub log: Option<PathBuf>,
    /// Overrides `config.max_steps`.
    pub max_steps: Option<usize>,
    pub progress: bool,
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam<f32>,
    /// Completed optimizer steps.
    pub step: usize,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let model = Model::new(config)?;
        let optimizer = Adam::new(&model.store, AdamConfig::default());
        Self::assemble(model, optimizer, 0)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(&ck.config)?;
        if model.store.len() != ck.params.len() {
            return Err(KptError::InvalidModel(format!("checkpoint has {} parameters, model expects {}", ck.params.len(), model.store.len())));
        }
        for (have, want) in ck.params.iter().zip(model.store.iter()) {
            if have.name != want.name || have.group != want.group || have.tensor.shape() != want.tensor.shape() {
                return Err(KptError::InvalidModel(format!("checkpoint parameter {} {:?} does not match model parameter {} {:?}", have.name, have.tensor.shape(), want.name, want.tensor.shape())));
            }
        }
        model.store = ck.params.clone();
        Self::assemble(model, ck.optimizer.clone(), ck.step as usize)
    }

    fn assemble(model: Model, optimizer: Adam<f32>, step: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(model.config.prep_threads.max(1))
            .build()
            .map_err(|e| KptError::InvalidConfig(format!("thread pool: {e}")))?;
        Ok(Self { model, optimizer, step, pool })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.model.config
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.config().batch_size)
    }

    pub fn checkpoint(&self, dataset_len: usize) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            epoch: (self.step / self.steps_per_epoch(dataset_len).max(1)) as u64,
            step: self.step as u64,
            params: self.model.store.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Dataset indices of batch `step`, from a per-epoch shuffle.
    pub fn batch_indices(&self, dataset_len: usize, step: usize) -> (usize, Vec<usize>) {
        let spe = self.steps_per_epoch(dataset_len);
        let epoch = step / spe;
        let pos = step % spe;
        let mut order: Vec<usize> = (0..dataset_len).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.config().seed, &[1, epoch as u64])));
        let bs = self.config().batch_size;
        let end = ((pos + 1) * bs).min(dataset_len);
        (epoch, order[pos * bs..end].to_vec())
    }

    pub fn prepare_batch(&self, dataset: &[SceneSample], step: usize, indices: &[usize]) -> Vec<PreparedSample> {
        let cfg = &self.model.config;
        let seed = cfg.seed;
        self.pool.install(|| {
            indices
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let aug = cfg.augment.enabled.then(|| derive_seed(seed, &[2, step as u64, k as u64]));
                    prepare(&dataset[i], cfg, aug, derive_seed(seed, &[3, step as u64, k as u64]))
                })
                .collect()
        })
    }

    /// Schedule multiplier for step `step` (0-based). The horizon is
    /// `max_steps` when set, else every epoch.
    pub fn lr_factor(&self, dataset_len: usize, step: usize) -> f64 {
        let cfg = self.config();
        let horizon = cfg.max_steps.unwrap_or(cfg.epochs * self.steps_per_epoch(dataset_len)).max(1);
        let progress = (step as f64 / horizon as f64).min(1.0);
        let f = cfg.lr_final_fraction;
        f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Runs the next optimizer step. A non-finite loss aborts before any
    /// parameter is touched.
    pub fn train_step(&mut self, dataset: &[SceneSample]) -> Result<StepRecord> {
        if dataset.is_empty() {
            return Err(KptError::InvalidConfig("training set is empty".into()));
        }
        let (epoch, indices) = self.batch_indices(dataset.len(), self.step);
        let batch = self.prepare_batch(dataset, self.step, &indices);
        let cfg = self.model.config.clone();
        let mut g = Graph::<f32>::new();
        let p = self.model.store.bind(&mut g);
        let fwd = forward_batch(&mut g, &self.model, &p, &batch, epoch, cfg.nms_threshold_train)?;
        let nodes = compute_losses(&mut g, &self.model, &batch, &fwd)?;
        let losses = loss_values(&g, &nodes);
        let named = [("l_h", Some(losses.l_h)), ("l_ki", losses.l_ki), ("l_hand", losses.l_hand), ("l_obj", losses.l_obj), ("total", Some(losses.total))];
        if let Some((term, _)) = named.iter().find(|(_, v)| v.is_some_and(|x| !x.is_finite())) {
            return Err(KptError::NonFiniteLoss { term: (*term).into() });
        }
        g.backward(nodes.total)?;
        let grads = self.model.store.collect_grads(&g, &p);
        let f = self.lr_factor(dataset.len(), self.step);
        let (lr_t, lr_b) = (cfg.lr_transformer * f, cfg.lr_backbone * f);
        self.optimizer.step(&mut self.model.store, &grads, |group| match group {
            ParamGroup::Transformer => lr_t,
            ParamGroup::Backbone => lr_b,
        })?;
        self.step += 1;
        Ok(StepRecord { step: self.step, epoch, losses, skipped: fwd.skipped(batch.len()) })
    }

    pub fn total_steps(&self, dataset_len: usize, opts: &TrainOptions) -> usize {
        let full = self.config().epochs * self.steps_per_epoch(dataset_len);
        match opts.max_steps.or(self.config().max_steps) {
            Some(m) => m.min(full),
            None => full,
        }
    }

    /// Trains until the step budget is used up.
    pub fn run(&mut self, dataset: &[SceneSample], opts: &TrainOptions) -> Result<RunLog> {
        use std::io::Write;
        let identity = !self.config().ablations.disable_identity_loss;
        let mut log = RunLog { identity_loss: identity, records: Vec::new() };
        let mut file = match &opts.log {
            Some(path) => {
                let append = self.step > 0 && path.exists();
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(append)
                    .write(true)
                    .truncate(!append)
                    .open(path)
                    .map_err(|e| KptError::io(path, e))?;
                if !append {
                    writeln!(f, "{}", RunLog::header(identity)).map_err(|e| KptError::io(path, e))?;
                }
                Some((path.clone(), f))
            }
            None => None,
        };
        let total = self.total_steps(dataset.len(), opts);
        let every = self.config().checkpoint_every.max(1);
        while self.step < total {
            let rec = self.train_step(dataset)?;
            if let Some((path, f)) = &mut file {
                writeln!(f, "{}", RunLog::row(&rec, identity)).map_err(|e| KptError::io(path, e))?;
            }
            if opts.progress && (rec.step % 50 == 0 || rec.step == 1) {
                eprintln!("step {} epoch {} total {:.5}", rec.step, rec.epoch, rec.losses.total);
            }
            log.records.push(rec);
            if let Some(path) = &opts.checkpoint {
                if self.step % every == 0 || self.step == total {
                    self.checkpoint(dataset.len()).save(path)?;
                }
            }
        }
        Ok(log)
    }
}
