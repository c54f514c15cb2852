use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lanpose_core::geomfeat::NoiseConfig;
use lanpose_core::instruction::Grammar;
use lanpose_core::metrics::{recall_from_scores, recall_table, RecallRow};
use lanpose_core::scene::{record_seed, DatasetRecord};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{
    assembly_target, object_sample, object_target, relative_target, train_noise_seed, MapBatch, ObjectSample,
    PoseTarget, Role, TokenBatch,
};
use crate::graph::Graph;
use crate::loss::{loss_assembly, loss_geom, loss_pose, loss_total};
use crate::model::{Bound, FusionVariant, ModelConfig, Network};
use crate::optim::{Adam, AdamState};
use crate::predict::{object_scores, predict};
use crate::NetError;

pub const DIRECT_PREFIX: &str = "direct.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub warmup_steps: u64,
    /// Cosine decay of the learning rate to zero over each stage.
    pub cosine_decay: bool,
    pub noise: NoiseConfig,
    pub model: ModelConfig,
    /// Validate every n-th epoch (and always after the last one); 0 disables validation.
    pub validate_every: usize,
    /// Keep a checkpoint per epoch in addition to `last.ckpt`.
    pub keep_epoch_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs_stage1: 30,
            epochs_stage2: 30,
            batch_size: 32,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            warmup_steps: 100,
            cosine_decay: true,
            noise: NoiseConfig::default(),
            model: ModelConfig::default(),
            validate_every: 1,
            keep_epoch_checkpoints: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |f: &str| Err(NetError::InvalidConfig(f.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr");
        }
        if !(self.noise.sigma.is_finite() && self.noise.sigma >= 0.0) {
            return bad("noise.sigma");
        }
        if !(0.0..=1.0).contains(&self.noise.flip_p) {
            return bad("noise.flip_p");
        }
        self.model.validate().map_err(|e| match e {
            NetError::InvalidConfig(f) => NetError::InvalidConfig(format!("model.{f}")),
            e => e,
        })
    }

    fn adam(&self) -> Adam {
        Adam { warmup_steps: self.warmup_steps, ..Adam::default() }
    }

    fn epochs(&self, stage: u8) -> usize {
        if stage == 1 {
            self.epochs_stage1
        } else {
            self.epochs_stage2
        }
    }
}

/// Validation summary for one branch after one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub stage: u8,
    pub epoch: usize,
    /// `direct` (object pose) or `language` (assembly pose).
    pub branch: &'static str,
    pub train_loss: f64,
    pub mean: RecallRow,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub history: Vec<EpochMetrics>,
    /// Batch losses in step order, per stage.
    pub step_losses: [Vec<f64>; 2],
}

const CSV_HEADER: &str = "stage,epoch,branch,train_loss,add_0.02d,add_0.05d,add_0.1d,2deg2cm,5deg5cm";

fn csv_row(m: &EpochMetrics) -> String {
    format!(
        "{},{},{},{:.6},{:.2},{:.2},{:.2},{:.2},{:.2}",
        m.stage, m.epoch, m.branch, m.train_loss, m.mean.add[0], m.mean.add[1], m.mean.add[2], m.mean.deg_cm[0], m.mean.deg_cm[1]
    )
}

/// Epoch visiting order for a stage.
fn epoch_order(seed: u64, stage: u8, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(seed ^ 0x5_4ff1e, ((stage as u64) << 32) | epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Stage 1 trains on base or target objects, picked per (seed, epoch, record).
fn stage1_role(seed: u64, epoch: usize, rec: &DatasetRecord) -> Role {
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(seed ^ 0x0b1e_c7, record_seed(epoch as u64, rec.id)));
    if rng.random::<bool>() {
        Role::Target
    } else {
        Role::Base
    }
}

struct Ctx<'a> {
    cfg: &'a TrainConfig,
    train: &'a [DatasetRecord],
    val: &'a [DatasetRecord],
    out_dir: &'a Path,
    grammar: &'static Grammar,
}

impl Ctx<'_> {
    fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    fn lr_at(&self, stage: u8, step: u64) -> f64 {
        let total = (self.cfg.epochs(stage) * self.steps_per_epoch()) as f64;
        if self.cfg.cosine_decay && total > 0.0 {
            self.cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total).cos())
        } else {
            self.cfg.lr
        }
    }
}

/// One optimizer step on a batch; returns the batch loss.
fn train_step(
    ctx: &Ctx,
    net: &mut Network,
    adam: &mut AdamState,
    stage: u8,
    epoch: usize,
    step_in_epoch: usize,
    recs: &[&DatasetRecord],
) -> Result<f64, NetError> {
    let diverged = |detail: String| NetError::NonFiniteLoss { stage, epoch, step: step_in_epoch, detail };
    let mut g = Graph::new();
    let b = Bound::new(&net.params, &mut g, true)?;
    let loss = match forward(ctx, net, &mut g, &b, stage, epoch, recs) {
        Err(NetError::Degenerate6d) => return Err(diverged("degenerate 6D rotation output".into())),
        r => r?,
    };
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(diverged(format!("batch of {} records starting at id {}", recs.len(), recs[0].id)));
    }
    let grads = g.backward(loss);
    let per_param: Vec<Option<Vec<f64>>> = (0..net.params.len()).map(|i| grads.get(b.var(i)).map(<[f64]>::to_vec)).collect();
    drop(b);
    let refs: Vec<Option<&[f64]>> = per_param.iter().map(|o| o.as_deref()).collect();
    let lr = ctx.lr_at(stage, adam.step);
    ctx.cfg.adam().step(&mut net.params, &refs, adam, lr);
    Ok(value)
}

/// Batch-mean loss of the given stage.
fn forward(
    ctx: &Ctx,
    net: &Network,
    g: &mut Graph,
    b: &Bound,
    stage: u8,
    epoch: usize,
    recs: &[&DatasetRecord],
) -> Result<crate::Var, NetError> {
    let cfg = ctx.cfg;
    let size = net.cfg.map_size;
    Ok(if stage == 1 {
        let samples: Vec<ObjectSample> = recs
            .iter()
            .map(|r| {
                let role = stage1_role(cfg.seed, epoch, r);
                object_sample(r, role, size, &cfg.noise, train_noise_seed(cfg.seed, 1, epoch, r, role))
            })
            .collect::<Result<_, _>>()?;
        let batch = MapBatch::from_samples(&samples.iter().collect::<Vec<_>>());
        let targets: Vec<PoseTarget> = samples.iter().map(object_target).collect::<Result<_, _>>()?;
        let out = net.direct_branch(g, &b, &batch)?;
        let pose = loss_pose(g, &out.pose, &targets)?;
        let geom = loss_geom(g, &out, &batch)?;
        loss_total(g, 1, pose.total, Some(geom))?
    } else {
        let samples: Vec<ObjectSample> = recs
            .iter()
            .map(|r| object_sample(r, Role::Base, size, &cfg.noise, train_noise_seed(cfg.seed, 2, epoch, r, Role::Base)))
            .collect::<Result<_, _>>()?;
        let batch = MapBatch::from_samples(&samples.iter().collect::<Vec<_>>());
        let texts: Vec<&str> = recs.iter().map(|r| r.instruction.as_str()).collect();
        let tokens = TokenBatch::from_texts(&ctx.grammar, &texts);
        let targets: Vec<PoseTarget> = recs
            .iter()
            .map(|r| match net.cfg.variant {
                FusionVariant::Relative => relative_target(r),
                _ => assembly_target(r),
            })
            .collect::<Result<_, _>>()?;
        let out = net.direct_branch(g, &b, &batch)?;
        let text = net.text_encode(g, &b, &tokens)?;
        let pred = net.language_branch(g, &b, out.features, text, &tokens, &batch)?;
        let l = loss_assembly(g, &pred, &targets)?;
        loss_total(g, 2, l.total, None)?
    })
}

fn validate(ctx: &Ctx, net: &Network, stage: u8, epoch: usize, train_loss: f64) -> Result<Vec<EpochMetrics>, NetError> {
    let row = |branch, mean| EpochMetrics { stage, epoch, branch, train_loss, mean };
    if stage == 1 {
        let scores = object_scores(net, ctx.val, &ctx.cfg.noise)?;
        Ok(vec![row("direct", recall_from_scores(&scores).mean)])
    } else {
        let preds = predict(net, ctx.val, &ctx.cfg.noise)?;
        let report = recall_table(ctx.val, &preds).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        Ok(vec![row("direct", report.object.mean), row("language", report.assembly.mean)])
    }
}

fn write_metrics(path: &Path, history: &[EpochMetrics]) -> Result<(), NetError> {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for m in history {
        writeln!(s, "{}", csv_row(m)).expect("string write");
    }
    fs::write(path, s)?;
    Ok(())
}

/// Trains stage 1 then stage 2, writing `last.ckpt`, `stage1.ckpt`, `final.ckpt`
/// and `metrics.csv` into `out_dir`.
pub fn train(train: &[DatasetRecord], val: &[DatasetRecord], cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome, NetError> {
    train_resume(train, val, cfg, out_dir, None)
}

/// Like [`train`], continuing from `resume` when given. The run is a pure
/// function of data, config and seed, so resuming reproduces an uninterrupted
/// run bit-exactly.
pub fn train_resume(
    train: &[DatasetRecord],
    val: &[DatasetRecord],
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome, NetError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(NetError::InvalidConfig("train records".into()));
    }
    fs::create_dir_all(out_dir)?;
    let ctx = Ctx { cfg, train, val, out_dir, grammar: Grammar::builtin() };
    let (mut net, mut stage, mut epoch, adam) = match resume {
        Some(ck) => {
            if ck.network.cfg != cfg.model {
                return Err(NetError::Checkpoint("model config differs from the training config".into()));
            }
            (ck.network, ck.header.stage, ck.header.epoch, ck.adam)
        }
        None => (Network::new(cfg.model.clone(), cfg.seed)?, 1, 0, None),
    };
    let mut adam = adam.unwrap_or_else(|| AdamState::new(&net.params));
    let metrics_csv = out_dir.join("metrics.csv");
    let mut history = Vec::new();
    let mut step_losses = [Vec::new(), Vec::new()];

    while stage <= 2 {
        if stage == 2 {
            net.params.freeze_prefix(DIRECT_PREFIX);
        }
        while epoch < cfg.epochs(stage) {
            let order = epoch_order(cfg.seed, stage, epoch, train.len());
            let mut sum = 0.0;
            for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let recs: Vec<&DatasetRecord> = chunk.iter().map(|&i| &train[i]).collect();
                let l = train_step(&ctx, &mut net, &mut adam, stage, epoch, step, &recs)?;
                step_losses[stage as usize - 1].push(l);
                sum += l;
            }
            let train_loss = sum / ctx.steps_per_epoch() as f64;
            epoch += 1;
            let last = epoch == cfg.epochs(stage);
            if !val.is_empty() && cfg.validate_every > 0 && (last || epoch % cfg.validate_every == 0) {
                let rows = validate(&ctx, &net, stage, epoch, train_loss)?;
                for r in &rows {
                    log::info!(
                        "stage {} epoch {}/{} {}: loss {:.4}, ADD(-S)-0.1d {:.2}, 5deg5cm {:.2}",
                        stage,
                        epoch,
                        cfg.epochs(stage),
                        r.branch,
                        train_loss,
                        r.mean.add[2],
                        r.mean.deg_cm[1]
                    );
                }
                history.extend(rows);
                write_metrics(&metrics_csv, &history)?;
            } else {
                log::info!("stage {stage} epoch {epoch}/{}: loss {train_loss:.4}", cfg.epochs(stage));
            }
            let ck = Checkpoint::new(net.clone(), stage, epoch, Some(adam.clone()));
            save_checkpoint(&ctx.out_dir.join("last.ckpt"), &ck)?;
            if cfg.keep_epoch_checkpoints {
                save_checkpoint(&ctx.out_dir.join(format!("stage{stage}_epoch{epoch:03}.ckpt")), &ck)?;
            }
        }
        if stage == 1 {
            save_checkpoint(&out_dir.join("stage1.ckpt"), &Checkpoint::new(net.clone(), 2, 0, None))?;
        }
        stage += 1;
        epoch = 0;
        adam = AdamState::new(&net.params);
    }
    net.params.unfreeze_all();
    let checkpoint = out_dir.join("final.ckpt");
    save_checkpoint(&checkpoint, &Checkpoint::new(net.clone(), 3, 0, None))?;
    write_metrics(&metrics_csv, &history)?;
    Ok(TrainOutcome { network: net, checkpoint, metrics_csv, history, step_losses })
}
