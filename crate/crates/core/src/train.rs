//! Codec training: the phased loss-weight schedule, the optimization loop,
//! per-epoch snapshots and bitrate-targeted checkpoint selection.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::codec::{decode_forward, encode_forward, Codec, CodecConfig, PRIOR_LOGITS};
use crate::entropy::{hyper_decode, hyper_encode, uniform_noise};
use crate::error::{Error, Result};
use crate::imageio::csv_err;
use crate::optim::{collect_grads, Optimizer, OptimizerConfig};
use crate::pipeline::encode_image;
use crate::task::{batch_of, shuffled, task_forward, task_metric, ProxySample, TaskNetwork};
use crate::{parallel, rng};

/// Constants of the five-phase weight schedule.
///
/// `time_scale` maps run epochs onto schedule time: the growth curves are
/// evaluated at `(e - p) * time_scale`. Compressing the phase boundaries by
/// some factor and setting `time_scale` to the same factor replays the
/// full-length curves on a shorter run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub p1: u32,
    pub p2: u32,
    pub p3: u32,
    pub p4: u32,
    pub a1: f64,
    pub a2: f64,
    pub scale: f64,
    pub m_task: f64,
    pub m_rate: f64,
    pub time_scale: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            p1: 50,
            p2: 75,
            p3: 120,
            p4: 165,
            a1: 1.01,
            a2: 1.02,
            scale: 1e-3,
            m_task: 4.0,
            m_rate: 2.0,
            time_scale: 1.0,
        }
    }
}

impl ScheduleParams {
    /// Phase boundaries divided by `factor`, growth curves stretched to match.
    pub fn compressed(factor: u32) -> Result<Self> {
        let d = Self::default();
        let ps = [d.p1, d.p2, d.p3, d.p4];
        if factor == 0 || ps.iter().any(|p| p % factor != 0) {
            return Err(Error::Config(format!("compression factor {factor} does not divide the phase boundaries")));
        }
        Ok(ScheduleParams {
            p1: d.p1 / factor,
            p2: d.p2 / factor,
            p3: d.p3 / factor,
            p4: d.p4 / factor,
            time_scale: f64::from(factor),
            ..d
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = self.p1 < self.p2 && self.p2 < self.p3 && self.p3 < self.p4;
        let positive = [self.a1, self.a2, self.scale, self.time_scale].iter().all(|v| *v > 0.0 && v.is_finite());
        if !ordered || !positive || self.m_task < 0.0 || self.m_rate < 0.0 {
            return Err(Error::Config(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }

    pub fn f_w(&self, x: f64, a: f64) -> f64 {
        self.scale * (a.powf(x) - 1.0)
    }

    /// Plateau rate weight; equals the third-phase curve one epoch before `p3`.
    pub fn plateau(&self) -> f64 {
        self.m_rate * self.f_w(f64::from(self.p3 - self.p2 - 1) * self.time_scale, self.a1)
    }

    /// Phase number 1..=5 of `epoch`.
    pub fn phase(&self, epoch: u32) -> u8 {
        match epoch {
            e if e < self.p1 => 1,
            e if e < self.p2 => 2,
            e if e < self.p3 => 3,
            e if e < self.p4 => 4,
            _ => 5,
        }
    }

    pub fn boundaries(&self) -> [u32; 4] {
        [self.p1, self.p2, self.p3, self.p4]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_rate: f64,
    pub w_mse: f64,
    pub w_task: f64,
}

pub fn loss_weights(epoch: u32, sp: &ScheduleParams) -> LossWeights {
    let since = |p: u32| f64::from(epoch - p) * sp.time_scale;
    let w_task = if epoch < sp.p1 { 0.0 } else { sp.m_task * sp.f_w(since(sp.p1), sp.a1) };
    let w_rate = if epoch < sp.p2 {
        0.0
    } else if epoch < sp.p3 {
        sp.m_rate * sp.f_w(since(sp.p2), sp.a1)
    } else if epoch < sp.p4 {
        sp.plateau()
    } else {
        sp.plateau() + sp.m_rate * sp.f_w(since(sp.p4), sp.a2)
    };
    LossWeights { w_rate, w_mse: 1.0, w_task }
}

pub fn total_loss(l_rate: f64, l_mse: f64, l_task: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("rate", l_rate), ("mse", l_mse), ("task", l_task)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {v}")));
        }
    }
    Ok(w.w_rate * l_rate + w.w_mse * l_mse + w.w_task * l_task)
}

/// Graph version of [`total_loss`].
pub fn total_loss_var(g: &mut Graph, rate: Var, mse: Var, task: Var, w: &LossWeights) -> Result<Var> {
    let r = g.scale(rate, w.w_rate)?;
    let m = g.scale(mse, w.w_mse)?;
    let t = g.scale(task, w.w_task)?;
    let rm = g.add(r, m)?;
    g.add(rm, t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_interval: u32,
    pub seed: u64,
    pub schedule: ScheduleParams,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 8,
            learning_rate: 1e-3,
            lr_decay: 0.9,
            lr_interval: 20,
            seed: 0,
            schedule: ScheduleParams::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.lr_interval == 0 {
            return Err(Error::Config("epochs, batch_size and lr_interval must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive and decay {} in (0, 1]",
                self.learning_rate, self.lr_decay
            )));
        }
        Ok(())
    }
}

pub fn lr_schedule(epoch: u32, cfg: &TrainConfig) -> f64 {
    cfg.learning_rate * cfg.lr_decay.powi((epoch / cfg.lr_interval.max(1)) as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub l_rate: f64,
    pub l_mse: f64,
    pub l_task: f64,
    /// Noise-mode rate estimate divided by the pixel count.
    pub bpp_estimate: f64,
}

struct StepLosses {
    rate: f64,
    mse: f64,
    task: f64,
}

/// Codec parameters plus optimizer state; `next_epoch` is the epoch the
/// next call to [`Trainer::train_epoch`] runs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub codec: Codec,
    pub optimizer: Optimizer,
    pub next_epoch: u32,
}

impl Trainer {
    pub fn new(codec: Codec, optimizer: OptimizerConfig) -> Self {
        Trainer { codec, optimizer: Optimizer::new(optimizer), next_epoch: 0 }
    }

    /// Continues from a checkpoint written after epoch `e`; the next epoch is `e + 1`.
    pub fn resume(path: &Path, config: CodecConfig, optimizer: OptimizerConfig) -> Result<Self> {
        let ck = load_checkpoint(path, Some(&config.fingerprint()))?;
        let codec = Codec::new(config, ck.params)?;
        let optimizer = match ck.optimizer {
            Some(state) => Optimizer::with_state(optimizer, state)?,
            None => Optimizer::new(optimizer),
        };
        Ok(Trainer { codec, optimizer, next_epoch: ck.epoch + 1 })
    }

    fn step(&mut self, batch: &[&ProxySample], task: &TaskNetwork, w: &LossWeights, noise_seed: (u64, &str, u64), lr: f64) -> Result<StepLosses> {
        let cfg = self.codec.config.clone();
        let (x, labels) = batch_of(batch)?;
        let mut g = Graph::new();
        let b = self.codec.params.bind(&mut g, |_| true)?;
        let xv = g.constant(x)?;
        let mut noise = rng::indexed_stream(noise_seed.0, noise_seed.1, noise_seed.2);
        let y = encode_forward(&mut g, &b, &cfg, xv)?;
        let y_noisy = g.add_noise(y, &uniform_noise(g.shape(y), &mut noise))?;
        let xhat = decode_forward(&mut g, &b, &cfg, y_noisy)?;
        let xhat = g.clamp_ste(xhat, 0.0, 1.0)?;
        let z = hyper_encode(&mut g, &b, &cfg, y)?;
        let z_noisy = g.add_noise(z, &uniform_noise(g.shape(z), &mut noise))?;
        let (mu, sigma) = hyper_decode(&mut g, &b, &cfg, z_noisy)?;
        let py = g.gaussian_likelihood(y_noisy, mu, sigma)?;
        let pz = g.factorized_likelihood(z_noisy, b.var(PRIOR_LOGITS)?)?;
        let rate = g.rate_bits(&[py, pz], batch.len())?;
        let mse = g.mse_loss(xv, xhat)?;
        let tb = task.bind(&mut g)?;
        let logits = task_forward(&mut g, &tb, xhat)?.logits;
        let task_l = g.softmax_cross_entropy(logits, &labels)?;
        let loss = total_loss_var(&mut g, rate, mse, task_l, w)?;
        let losses = StepLosses { rate: g.value(rate).item(), mse: g.value(mse).item(), task: g.value(task_l).item() };
        let total = g.value(loss).item();
        if !total.is_finite() {
            return Err(Error::Numeric(format!("total loss {total}")));
        }
        g.backward(loss)?;
        self.optimizer.step(&mut self.codec.params, &collect_grads(&g, &b), lr)?;
        Ok(losses)
    }

    /// One pass over `data` with additive-noise quantization.
    pub fn train_epoch(&mut self, data: &[ProxySample], task: &TaskNetwork, cfg: &TrainConfig) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        if !task.is_frozen() {
            return Err(Error::InvalidArgument("codec training needs a frozen task network".into()));
        }
        let epoch = self.next_epoch;
        let weights = loss_weights(epoch, &cfg.schedule);
        let lr = lr_schedule(epoch, cfg);
        let order = shuffled(data.len(), cfg.seed, "codec.shuffle", u64::from(epoch));
        let label = format!("codec.noise.{epoch}");
        let (mut rate, mut mse, mut tl) = (0.0, 0.0, 0.0);
        let mut batches = 0u64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ProxySample> = chunk.iter().map(|&i| &data[i]).collect();
            let l = self.step(&batch, task, &weights, (cfg.seed, &label, batches), lr).map_err(|e| match e {
                Error::Numeric(d) => Error::Divergence { epoch, detail: format!("batch {batches}: {d}") },
                other => other,
            })?;
            rate += l.rate;
            mse += l.mse;
            tl += l.task;
            batches += 1;
        }
        let nb = batches as f64;
        let pixels = (data[0].image.shape().h * data[0].image.shape().w) as f64;
        self.next_epoch += 1;
        Ok(EpochMetrics {
            epoch,
            weights,
            learning_rate: lr,
            l_rate: rate / nb,
            l_mse: mse / nb,
            l_task: tl / nb,
            bpp_estimate: rate / nb / pixels,
        })
    }
}

/// Mean actual bpp of real bitstreams and task accuracy on the decoded images.
pub fn validate(codec: &Codec, task: &TaskNetwork, val: &[ProxySample]) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    let results = parallel::map_indexed(val.len(), |i| -> Result<(f64, Tensor)> {
        let enc = encode_image(codec, &val[i].image)?;
        Ok((enc.bpp(), codec.decode(&enc.yhat)?))
    });
    let mut bpp = 0.0;
    let mut recon = Vec::with_capacity(val.len());
    for r in results {
        let (b, x) = r?;
        bpp += b;
        recon.push(x);
    }
    let labels: Vec<usize> = val.iter().map(|s| s.label).collect();
    Ok((bpp / val.len() as f64, task_metric(task, &recon, &labels)?))
}

/// One record of the snapshot index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: u32,
    pub checkpoint: String,
    pub val_bpp: f64,
    pub val_acc: f64,
    pub l_rate: f64,
    pub l_mse: f64,
    pub l_task: f64,
}

pub const SNAPSHOT_INDEX: &str = "snapshots.csv";

pub fn write_snapshots(path: &Path, snaps: &[Snapshot]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for s in snaps {
        w.serialize(s).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshots(path: &Path) -> Result<Vec<Snapshot>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|s| s.map_err(csv_err)).collect()
}

/// Distances closer than this count as ties.
const TIE_TOLERANCE: f64 = 1e-12;

/// Snapshot whose validation bpp is nearest `target`; ties go to the later epoch.
pub fn select_checkpoint(snaps: &[Snapshot], target: f64) -> Result<&Snapshot> {
    let mut best: Option<&Snapshot> = None;
    for s in snaps {
        best = match best {
            None => Some(s),
            Some(b) => {
                let (ds, db) = ((s.val_bpp - target).abs(), (b.val_bpp - target).abs());
                let tie = (ds - db).abs() <= TIE_TOLERANCE;
                if ds < db - TIE_TOLERANCE || (tie && s.epoch > b.epoch) {
                    Some(s)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.ok_or_else(|| Error::Empty("snapshot index".into()))
}

pub fn checkpoint_name(epoch: u32) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// Everything one epoch produced.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub metrics: EpochMetrics,
    pub snapshot: Snapshot,
}

/// Runs epochs `trainer.next_epoch .. cfg.epochs`, validating after each and
/// writing `epoch_NNNN.ckpt` plus the snapshot index into `out_dir`.
/// A resumed run keeps index records of earlier epochs.
pub fn run_training(
    trainer: &mut Trainer,
    train: &[ProxySample],
    val: &[ProxySample],
    task: &TaskNetwork,
    cfg: &TrainConfig,
    out_dir: &Path,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Vec<Snapshot>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let index = out_dir.join(SNAPSHOT_INDEX);
    let mut snaps: Vec<Snapshot> = if index.exists() && trainer.next_epoch > 0 {
        read_snapshots(&index)?.into_iter().filter(|s| s.epoch < trainer.next_epoch).collect()
    } else {
        Vec::new()
    };
    while trainer.next_epoch < cfg.epochs {
        let metrics = trainer.train_epoch(train, task, cfg)?;
        let (val_bpp, val_acc) = validate(&trainer.codec, task, val)?;
        let name = checkpoint_name(metrics.epoch);
        save_checkpoint(&out_dir.join(&name), &trainer.codec.params, Some(&trainer.optimizer.state), metrics.epoch)?;
        let snapshot = Snapshot {
            epoch: metrics.epoch,
            checkpoint: name,
            val_bpp,
            val_acc,
            l_rate: metrics.l_rate,
            l_mse: metrics.l_mse,
            l_task: metrics.l_task,
        };
        snaps.push(snapshot.clone());
        write_snapshots(&index, &snaps)?;
        on_epoch(&EpochReport { metrics, snapshot });
    }
    Ok(snaps)
}

/// Path of a snapshot's checkpoint relative to its run directory.
pub fn snapshot_path(run_dir: &Path, s: &Snapshot) -> PathBuf {
    run_dir.join(&s.checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(epoch: u32, bpp: f64) -> Snapshot {
        Snapshot { epoch, checkpoint: checkpoint_name(epoch), val_bpp: bpp, val_acc: 0.0, l_rate: 0.0, l_mse: 0.0, l_task: 0.0 }
    }

    #[test]
    fn schedule_spot_values() {
        let sp = ScheduleParams::default();
        assert_eq!(loss_weights(0, &sp), LossWeights { w_rate: 0.0, w_mse: 1.0, w_task: 0.0 });
        assert_eq!(loss_weights(50, &sp).w_task, 0.0);
        assert!((loss_weights(100, &sp).w_task - 2.5786e-3).abs() < 1e-7);
        assert!((loss_weights(130, &sp).w_rate - 1.0986e-3).abs() < 1e-7);
        assert_eq!(loss_weights(119, &sp).w_rate, sp.plateau());
        assert_eq!(sp.phase(49), 1);
        assert_eq!(sp.phase(165), 5);
    }

    #[test]
    fn compressed_schedule_replays_curves() {
        let full = ScheduleParams::default();
        let fast = ScheduleParams::compressed(5).unwrap();
        assert_eq!(fast.boundaries(), [10, 15, 24, 33]);
        assert_eq!(loss_weights(20, &fast).w_task, loss_weights(100, &full).w_task);
        assert!(ScheduleParams::compressed(7).is_err());
    }

    #[test]
    fn lr_decays_stepwise() {
        let cfg = TrainConfig { learning_rate: 1.0, lr_decay: 0.5, lr_interval: 10, ..Default::default() };
        assert_eq!(lr_schedule(0, &cfg), 1.0);
        assert_eq!(lr_schedule(25, &cfg), 0.25);
        assert!((0..100).all(|e| lr_schedule(e + 1, &cfg) <= lr_schedule(e, &cfg)));
    }

    #[test]
    fn total_loss_examples() {
        let ones = LossWeights { w_rate: 1.0, w_mse: 1.0, w_task: 1.0 };
        assert_eq!(total_loss(1.0, 2.0, 3.0, &ones).unwrap(), 6.0);
        let base = LossWeights { w_rate: 0.0, w_mse: 1.0, w_task: 0.0 };
        assert_eq!(total_loss(5.0, 2.0, 7.0, &base).unwrap(), 2.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &ones).unwrap(), 0.0);
        assert!(total_loss(f64::NAN, 0.0, 0.0, &ones).is_err());
    }

    #[test]
    fn checkpoint_selection() {
        let s = [snap(10, 0.30), snap(20, 0.10)];
        assert_eq!(select_checkpoint(&s, 0.12).unwrap().epoch, 20);
        assert_eq!(select_checkpoint(&s, 0.30).unwrap().epoch, 10);
        let t = [snap(3, 0.2), snap(4, 0.1)];
        assert_eq!(select_checkpoint(&t, 0.15).unwrap().epoch, 4);
        let t = [snap(4, 0.1), snap(3, 0.2)];
        assert_eq!(select_checkpoint(&t, 0.15).unwrap().epoch, 4);
        assert!(select_checkpoint(&[], 0.1).is_err());
    }

    #[test]
    fn snapshot_index_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(SNAPSHOT_INDEX);
        let s = vec![snap(0, 0.123456789012345), snap(1, 1.0 / 3.0)];
        write_snapshots(&p, &s).unwrap();
        assert_eq!(read_snapshots(&p).unwrap(), s);
    }
}
