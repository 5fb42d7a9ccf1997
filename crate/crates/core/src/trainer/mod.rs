//! Sample pools, mixed-task optimisation, validation and early stopping.

mod sampler;
mod samples;

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EntityIndex, ReviewSet, SplitSet};
use crate::distiller::Quadruplet;
use crate::model::{
    load_checkpoint, save_checkpoint, AdamW, AdamWConfig, CheckpointMeta, ModelConfig, ModelError, Seq2Seq,
};
use crate::task::TaskGroup;
use crate::textcodec::{item_surface, user_surface, CodecError, Vocab};

pub use sampler::{TaskRatio, TaskSampler};
pub use samples::{segment_from_index, SampleBuilder, TrainingSample, MAX_HISTORY};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("history of {0} item(s) is too short for a sequential sample")]
    HistoryTooShort(usize),
    #[error("need {needed} negative candidates but only {available} items are available")]
    InsufficientUniverse { needed: usize, available: usize },
    #[error("pool for task group {0:?} is empty")]
    EmptyPool(TaskGroup),
    #[error("unknown entity '{0}'")]
    UnknownEntity(String),
    #[error("trainer config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}; best checkpoint: {checkpoint:?}")]
    Diverged {
        epoch: u32,
        step: u64,
        checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Learning rate tuned for the bundled synthetic corpus.
pub const SYNTHETIC_LR: f64 = 3e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_epochs: u32,
    /// Defaults to `ceil(total pool size / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    /// Set from the run seed.
    #[serde(skip)]
    pub seed: u64,
    /// Set from the run-level ratios.
    #[serde(skip)]
    pub ratios: TaskRatio,
    pub n_negatives: usize,
    /// Include the rationale-generation (RG) pools.
    pub use_rationales: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.01,
            patience: 5,
            max_epochs: 300,
            steps_per_epoch: None,
            seed: 42,
            ratios: TaskRatio::default(),
            n_negatives: 99,
            use_rationales: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        let err = |k: &str, m: String| Err((k.to_string(), m));
        if self.batch_size == 0 {
            return err("batch_size", "must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err("lr", format!("must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return err("weight_decay", "must be non-negative".into());
        }
        if self.patience == 0 {
            return err("patience", "must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return err("max_epochs", "must be at least 1".into());
        }
        if self.steps_per_epoch == Some(0) {
            return err("steps_per_epoch", "must be at least 1".into());
        }
        if self.n_negatives == 0 {
            return err("n_negatives", "must be at least 1".into());
        }
        self.ratios.validate().or_else(|m| err("ratios", m))?;
        Ok(())
    }

    fn enabled(&self) -> [bool; 4] {
        TaskGroup::ALL.map(|g| g != TaskGroup::Rg || self.use_rationales)
    }
}

/// Deterministic evaluation candidates for (user, positive): independent of
/// iteration order.
pub fn candidate_rng(seed: u64, user: u32, positive: u32) -> ChaCha8Rng {
    let mix = seed ^ ((user as u64) << 32 | positive as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    ChaCha8Rng::seed_from_u64(mix)
}

/// Everything the loop samples from, already numbered and encoded.
#[derive(Debug, Clone)]
pub struct TrainData {
    /// (user, training history) for users with at least two training items.
    pub sr_pool: Vec<(u32, Vec<u32>)>,
    /// (user, training positive).
    pub tr_pool: Vec<(u32, u32)>,
    pub interacted: HashMap<u32, HashSet<u32>>,
    pub universe: Vec<u32>,
    pub eg_pool: Vec<TrainingSample>,
    pub rg_pool: Vec<TrainingSample>,
    /// Validation samples per group, indexed by `TaskGroup as usize`.
    pub val: [Vec<TrainingSample>; 4],
    pub n_negatives: usize,
}

impl TrainData {
    /// Builds pools for training and validation.
    ///
    /// Nothing held out leaks into training: SR uses only each user's
    /// training prefix; TR positives are training items and negatives avoid
    /// everything the user touched; EG and RG use the explanation training
    /// partition minus any (user, item) pair that is a sequential validation
    /// or test label.
    pub fn build(
        rs: &ReviewSet,
        splits: &SplitSet,
        quads: &[Quadruplet],
        entities: &EntityIndex,
        vocab: &Vocab,
        cfg: &TrainerConfig,
    ) -> Result<Self, TrainError> {
        let b = SampleBuilder::new(vocab, entities);
        let num_u = |u: &str| entities.user_number(u).ok_or_else(|| TrainError::UnknownEntity(u.into()));
        let num_i = |i: &str| entities.item_number(i).ok_or_else(|| TrainError::UnknownEntity(i.into()));
        let universe: Vec<u32> = entities.item_numbers().collect();

        let mut held_out: HashSet<(&str, &str)> = HashSet::new();
        let mut sr_pool = Vec::new();
        let mut tr_pool = Vec::new();
        let mut interacted = HashMap::new();
        let mut val: [Vec<TrainingSample>; 4] = Default::default();
        for seq in &splits.seq.users {
            held_out.insert((&seq.user, &seq.val));
            held_out.insert((&seq.user, &seq.test));
            let user = num_u(&seq.user)?;
            let train: Vec<u32> = seq.train.iter().map(|i| num_i(i)).collect::<Result<_, _>>()?;
            let all: HashSet<u32> = rs.user_items(&seq.user).iter().map(|i| num_i(i)).collect::<Result<_, _>>()?;
            let val_item = num_i(&seq.val)?;
            if train.len() >= 2 {
                sr_pool.push((user, train.clone()));
            }
            tr_pool.extend(train.iter().map(|&i| (user, i)));
            val[TaskGroup::Sr as usize].push(b.sr_pair(user, &train, val_item)?);
            let mut rng = candidate_rng(cfg.seed, user, val_item);
            val[TaskGroup::Tr as usize].push(b.make_tr_sample(
                user,
                val_item,
                &all,
                &universe,
                cfg.n_negatives,
                &mut rng,
            )?);
            interacted.insert(user, all);
        }

        let xs = rs.interactions();
        let mut eg_pool = Vec::new();
        for &i in &splits.expl.train {
            let x = &xs[i];
            if held_out.contains(&(x.user_id.as_str(), x.item_id.as_str())) {
                continue;
            }
            eg_pool.extend(b.make_eg_sample(x)?);
        }
        for &i in &splits.expl.val {
            val[TaskGroup::Eg as usize].extend(b.make_eg_sample(&xs[i])?);
        }

        let tags = splits.expl.tag_of(xs.len());
        let mut tag_of: HashMap<(&str, &str), crate::corpus::SplitTag> = HashMap::new();
        for (x, t) in xs.iter().zip(&tags) {
            tag_of.entry((x.user_id.as_str(), x.item_id.as_str())).or_insert(*t);
        }
        let mut rg_pool = Vec::new();
        if cfg.use_rationales {
            for q in quads {
                let key = (q.user.as_str(), q.item.as_str());
                match tag_of.get(&key) {
                    Some(crate::corpus::SplitTag::Train) if !held_out.contains(&key) => {
                        rg_pool.extend(b.make_rationale_samples(q)?)
                    }
                    Some(crate::corpus::SplitTag::Val) => val[TaskGroup::Rg as usize].extend(b.make_rationale_samples(q)?),
                    _ => {}
                }
            }
        }
        Ok(Self {
            sr_pool,
            tr_pool,
            interacted,
            universe,
            eg_pool,
            rg_pool,
            val,
            n_negatives: cfg.n_negatives,
        })
    }

    pub fn pool_sizes(&self) -> [usize; 4] {
        let mut s = [0; 4];
        s[TaskGroup::Eg as usize] = self.eg_pool.len();
        s[TaskGroup::Rg as usize] = self.rg_pool.len();
        s[TaskGroup::Sr as usize] = self.sr_pool.len();
        s[TaskGroup::Tr as usize] = self.tr_pool.len();
        s
    }

    /// Materialises one draw; SR segments and TR negatives are fresh each time.
    pub fn realise(
        &self,
        builder: &SampleBuilder<'_>,
        group: TaskGroup,
        idx: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrainingSample, TrainError> {
        match group {
            TaskGroup::Eg => Ok(self.eg_pool[idx].clone()),
            TaskGroup::Rg => Ok(self.rg_pool[idx].clone()),
            TaskGroup::Sr => {
                let (user, hist) = &self.sr_pool[idx];
                builder.make_sr_sample(*user, hist, rng)
            }
            TaskGroup::Tr => {
                let (user, pos) = self.tr_pool[idx];
                builder.make_tr_sample(user, pos, &self.interacted[&user], &self.universe, self.n_negatives, rng)
            }
        }
    }
}

/// Texts a vocabulary should cover: template words, entity surface digits,
/// and the training-side targets.
pub fn vocab_corpus(rs: &ReviewSet, splits: &SplitSet, quads: &[Quadruplet]) -> Vec<String> {
    use crate::textcodec::{render_task_input, TaskInput};
    let mut texts: Vec<String> = [
        TaskInput::Sequential {
            user: 1,
            history: vec![2],
        },
        TaskInput::TopN {
            user: 1,
            candidates: vec![2],
        },
        TaskInput::Explanation { user: 1, item: 2 },
        TaskInput::Preference { user: 1 },
        TaskInput::Attribute { item: 2 },
    ]
    .iter()
    .map(|t| render_task_input(t).text)
    .collect();
    texts.push(format!("{} {}", user_surface(1), item_surface(1)));
    let xs = rs.interactions();
    let train: HashSet<usize> = splits.expl.train.iter().copied().collect();
    let mut train_pairs: HashSet<(&str, &str)> = HashSet::new();
    for &i in &splits.expl.train {
        texts.push(xs[i].review_text.clone());
        train_pairs.insert((&xs[i].user_id, &xs[i].item_id));
    }
    debug_assert_eq!(train.len(), splits.expl.train.len());
    for q in quads {
        if train_pairs.contains(&(q.user.as_str(), q.item.as_str())) {
            texts.push(q.preference.clone());
            texts.push(q.attribute.clone());
        }
    }
    texts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Strict-improvement early stopping.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<u32>,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            bad: 0,
        }
    }

    pub fn observe(&mut self, epoch: u32, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.bad = 0;
            StopDecision {
                improved: true,
                stop: false,
            }
        } else {
            self.bad += 1;
            StopDecision {
                improved: false,
                stop: self.bad >= self.patience,
            }
        }
    }

    pub fn best(&self) -> Option<(u32, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRecord {
    pub epoch: u32,
    pub task: String,
    pub split: String,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub records: Vec<LossRecord>,
    /// Mean training loss of every optimisation step, in order.
    pub step_losses: Vec<f64>,
}

impl LossHistory {
    fn push(&mut self, epoch: u32, task: &str, split: &str, loss: f64) {
        self.records.push(LossRecord {
            epoch,
            task: task.to_string(),
            split: split.to_string(),
            loss,
        });
    }

    pub fn series(&self, task: &str, split: &str) -> Vec<(u32, f64)> {
        self.records
            .iter()
            .filter(|r| r.task == task && r.split == split)
            .map(|r| (r.epoch, r.loss))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,task,split,loss\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.task, r.split, r.loss);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub best_epoch: u32,
    pub best_val_loss: f64,
    pub epochs_run: u32,
    pub steps: u64,
    pub history: LossHistory,
    /// Parameters of the best epoch, reloaded from disk.
    pub model: Seq2Seq<f32>,
}

impl TrainOutcome {
    /// Mean training loss over the best epoch's steps.
    pub fn best_train_loss(&self) -> Option<f64> {
        self.history
            .series("total", "train")
            .into_iter()
            .find(|(e, _)| *e == self.best_epoch)
            .map(|(_, l)| l)
    }
}

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "loss_history.csv";

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Mean per-sample loss of each group's validation set.
pub fn validation_losses(model: &Seq2Seq<f32>, data: &TrainData) -> Result<[Option<f64>; 4], TrainError> {
    let mut out = [None; 4];
    for g in TaskGroup::ALL {
        let mut losses = Vec::with_capacity(data.val[g as usize].len());
        for s in &data.val[g as usize] {
            losses.push(model.forward(&s.example())?.loss);
        }
        out[g as usize] = mean(&losses);
    }
    Ok(out)
}

/// Ratio-weighted mean over the groups that are enabled and have samples.
pub fn weighted_validation(per_group: &[Option<f64>; 4], cfg: &TrainerConfig) -> f64 {
    let enabled = cfg.enabled();
    let (mut num, mut den) = (0.0, 0.0);
    for g in TaskGroup::ALL {
        if let (true, Some(l)) = (enabled[g as usize], per_group[g as usize]) {
            let w = cfg.ratios.weight(g) as f64;
            num += w * l;
            den += w;
        }
    }
    if den == 0.0 {
        f64::NAN
    } else {
        num / den
    }
}

/// Runs the optimisation loop and returns the reloaded best checkpoint.
pub fn train(
    data: &TrainData,
    vocab: &Vocab,
    entities: &EntityIndex,
    model_cfg: ModelConfig,
    cfg: &TrainerConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate().map_err(|(k, m)| TrainError::Config(format!("{k}: {m}")))?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let builder = SampleBuilder::new(vocab, entities);

    let mut model = Seq2Seq::<f32>::new(model_cfg.clone(), cfg.seed)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        model.params(),
    );
    let enabled = cfg.enabled();
    let sizes = data.pool_sizes();
    let mut sampler = TaskSampler::with_enabled(cfg.ratios, sizes, enabled)?;
    let total: usize = TaskGroup::ALL.iter().filter(|g| enabled[**g as usize]).map(|g| sizes[*g as usize]).sum();
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| total.div_ceil(cfg.batch_size));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = LossHistory::default();
    let mut step = 0u64;
    let mut epochs_run = 0;
    let fingerprint = vocab.fingerprint();
    log::info!(
        "training {} parameters; pools eg={} rg={} sr={} tr={}; {steps} steps/epoch",
        model.params().n_scalars(),
        sizes[0],
        sizes[1],
        sizes[2],
        sizes[3]
    );

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut per_group: [Vec<f64>; 4] = Default::default();
        let mut all = Vec::new();
        for _ in 0..steps {
            let draws: Vec<(TaskGroup, usize)> = (0..cfg.batch_size).map(|_| sampler.draw(&mut rng)).collect();
            let batch: Vec<TrainingSample> = draws
                .iter()
                .map(|&(g, i)| data.realise(&builder, g, i, &mut rng))
                .collect::<Result<_, _>>()?;
            let examples: Vec<_> = batch.iter().map(TrainingSample::example).collect();
            let diverged = || TrainError::Diverged {
                epoch,
                step,
                checkpoint: stopper.best().map(|_| ckpt.clone()),
            };
            let grad = match model.forward_backward(&examples) {
                Ok(g) => g,
                Err(ModelError::NonFinite { .. }) => return Err(diverged()),
                Err(e) => return Err(e.into()),
            };
            if !grad.loss.is_finite() {
                return Err(diverged());
            }
            match opt.step(model.params_mut(), &grad.grads) {
                Ok(()) => {}
                Err(ModelError::NanGradient(_)) => return Err(diverged()),
                Err(e) => return Err(e.into()),
            }
            step += 1;
            history.step_losses.push(grad.loss);
            for ((g, _), l) in draws.iter().zip(&grad.per_sample) {
                per_group[*g as usize].push(*l);
            }
            all.push(grad.loss);
        }
        for g in TaskGroup::ALL {
            if let Some(l) = mean(&per_group[g as usize]) {
                history.push(epoch, g.tag(), "train", l);
            }
        }
        history.push(epoch, "total", "train", mean(&all).unwrap_or(f64::NAN));

        let val = validation_losses(&model, data)?;
        for g in TaskGroup::ALL {
            if let Some(l) = val[g as usize] {
                history.push(epoch, g.tag(), "val", l);
            }
        }
        let val_total = weighted_validation(&val, cfg);
        history.push(epoch, "total", "val", val_total);
        if !val_total.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                step,
                checkpoint: stopper.best().map(|_| ckpt.clone()),
            });
        }
        let decision = stopper.observe(epoch, val_total);
        log::info!(
            "epoch {epoch}: train {:.4} val {val_total:.4}{}",
            mean(&all).unwrap_or(f64::NAN),
            if decision.improved { " *" } else { "" }
        );
        if decision.improved {
            save_checkpoint(
                &ckpt,
                &model,
                &CheckpointMeta {
                    step,
                    epoch,
                    val_loss: val_total,
                    vocab_fingerprint: Some(fingerprint.clone()),
                },
            )?;
        }
        if decision.stop {
            break;
        }
    }

    let history_path = out_dir.join(HISTORY_FILE);
    std::fs::write(&history_path, history.to_csv()).map_err(io(&history_path))?;
    let (best_epoch, best_val_loss) = stopper.best().expect("at least one finite epoch");
    let (model, _) = load_checkpoint(&ckpt, Some(&model_cfg))?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        best_epoch,
        best_val_loss,
        epochs_run,
        steps: step,
        history,
        model,
    })
}
