//! Mini-batch SGD on the hinge loss with a geometric learning-rate schedule.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dataset::{resolve_image_path, BinaryClass, Consensus, DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::eval::{accuracy, binary_decision};
use crate::model::{record_params, save_checkpoint, scores_on_tape, ArchitectureSpec, CheckpointMeta, ModelParams};
use crate::optim::sgd_step;
use crate::preprocess::{prepare, RawImage};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Forward-only batches are capped at this many images.
const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
    /// Write a checkpoint every this many epochs (the last epoch always is).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr_start: 0.01,
            lr_end: 0.0001,
            batch_size: 32,
            seed: 0,
            shuffle_each_epoch: true,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start && self.lr_start.is_finite()) {
            return bad(format!(
                "learning rates must satisfy 0 < lr_end <= lr_start, got {} and {}",
                self.lr_start, self.lr_end
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        Ok(())
    }
}

/// Geometric interpolation from `lr_start` at epoch 1 to `lr_end` at the
/// last epoch. Both endpoints are returned exactly.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    cfg.validate()?;
    if epoch == 0 || epoch > cfg.epochs {
        return Err(Error::Config(format!("epoch {epoch} outside 1..={}", cfg.epochs)));
    }
    if epoch == 1 {
        return Ok(cfg.lr_start);
    }
    if epoch == cfg.epochs {
        return Ok(cfg.lr_end);
    }
    let t = (epoch - 1) as f64 / (cfg.epochs - 1) as f64;
    Ok(cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_train_loss: f64,
    pub train_accuracy: f64,
    /// Seconds spent on the epoch. Not part of the determinism contract.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// One JSON record per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.epochs {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        let epochs = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        Ok(Self { epochs })
    }

    /// Equal in everything but wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.learning_rate.to_bits() == b.learning_rate.to_bits()
                    && a.mean_train_loss.to_bits() == b.mean_train_loss.to_bits()
                    && a.train_accuracy.to_bits() == b.train_accuracy.to_bits()
            })
    }
}

/// Preprocessed images with their consensus categories.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages<T> {
    pub ids: Vec<String>,
    /// Each `[1, 3, side, side]`.
    pub images: Vec<Tensor<T>>,
    pub categories: Vec<Consensus>,
}

impl<T: Scalar> LabeledImages<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Decodes and preprocesses every entry accepted by `keep`, in manifest
    /// order.
    pub fn load(
        manifest: &DatasetManifest,
        manifest_path: &Path,
        side: usize,
        keep: impl Fn(&ManifestEntry) -> bool,
    ) -> Result<Self> {
        let chosen: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| keep(e)).collect();
        let images = chosen
            .par_iter()
            .map(|e| {
                let path = resolve_image_path(manifest_path, e);
                let img = RawImage::read(&path)?;
                prepare::<T>(&img, side).map_err(|err| match err {
                    Error::AllDark { .. } => {
                        Error::Input(format!("{}: {err}", path.display()))
                    }
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ids: chosen.iter().map(|e| e.image_id.clone()).collect(),
            images,
            categories: chosen.iter().map(|e| e.consensus).collect(),
        })
    }

    /// Entries of the given split.
    pub fn load_split(manifest: &DatasetManifest, manifest_path: &Path, side: usize, split: Split) -> Result<Self> {
        Self::load(manifest, manifest_path, side, |e| e.split == split)
    }

    /// Binary labels, failing on any entry without a unanimous class.
    pub fn binary_labels(&self) -> Result<Vec<BinaryClass>> {
        self.categories
            .iter()
            .zip(&self.ids)
            .map(|(c, id)| {
                c.binary()
                    .ok_or_else(|| Error::Consistency(format!("image {id} has consensus {c:?}, not a training class")))
            })
            .collect()
    }

    /// Stacks the selected images into `[B, 3, H, W]` with ±1 labels.
    /// Refuses any image without a binary class, so ambiguous images can
    /// never reach a backward pass.
    fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<T>)> {
        let first = self.images.first().ok_or_else(|| Error::Config("empty image set".into()))?;
        let mut shape = first.shape().to_vec();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * first.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let class = self.categories[i].binary().ok_or_else(|| {
                Error::Consistency(format!("image {} ({:?}) entered a training batch", self.ids[i], self.categories[i]))
            })?;
            data.extend_from_slice(self.images[i].data());
            labels.push(class.sign());
        }
        Ok((Tensor::new(shape, data)?, labels))
    }

    fn stack(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let first = self.images.first().ok_or_else(|| Error::Config("empty image set".into()))?;
        let mut shape = first.shape().to_vec();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * first.len());
        for &i in idx {
            data.extend_from_slice(self.images[i].data());
        }
        Tensor::new(shape, data)
    }
}

/// Classifier scores for every image, in order.
pub fn score_all<T: Scalar>(arch: &ArchitectureSpec, params: &ModelParams<T>, data: &LabeledImages<T>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = data.stack(chunk)?;
        let mut tape = Tape::new();
        let vars = record_params(&mut tape, params);
        let x = tape.input(batch);
        let s = scores_on_tape(&mut tape, arch, &vars, x)?;
        out.extend(tape.value(s)?.iter().map(|v| v.as_f64()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Mean hinge loss and sign-rule accuracy over a split of accept/reject
/// images.
pub fn evaluate_epoch<T: Scalar>(
    arch: &ArchitectureSpec,
    params: &ModelParams<T>,
    data: &LabeledImages<T>,
) -> Result<EpochEval> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let labels = data.binary_labels()?;
    let scores = score_all(arch, params, data)?;
    let loss = scores
        .iter()
        .zip(&labels)
        .map(|(s, l)| (1.0 - l.sign::<f64>() * s).max(0.0))
        .sum::<f64>()
        / scores.len() as f64;
    let decisions = scores.iter().map(|&s| binary_decision(s)).collect::<Result<Vec<_>>>()?;
    Ok(EpochEval {
        mean_loss: loss,
        accuracy: accuracy(&decisions, &labels)?,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub history: TrainHistory,
}

/// Shuffle order for `epoch`, seeded by `seed XOR epoch` so any epoch can be
/// replayed in isolation.
pub fn epoch_order(cfg: &TrainConfig, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.shuffle_each_epoch {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch as u64);
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
    }
    order
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch}.fqc"))
}

/// One forward/backward/update step. Returns the batch loss.
fn step<T: Scalar>(
    arch: &ArchitectureSpec,
    params: &mut ModelParams<T>,
    batch: Tensor<T>,
    labels: &[T],
    lr: T,
    epoch: usize,
    batch_index: usize,
) -> Result<f64> {
    let (loss, grads, vars) = {
        let mut tape = Tape::new();
        let vars = record_params(&mut tape, params);
        let x = tape.input(batch);
        let s = scores_on_tape(&mut tape, arch, &vars, x)?;
        let l = tape.hinge_loss(s, labels)?;
        let loss = tape.value(l)?[0].as_f64();
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: batch_index,
                loss,
            });
        }
        (loss, tape.backward(l)?, vars)
    };
    let mut tensors = params.tensors_mut();
    for (v, t) in vars.flat().into_iter().zip(tensors.iter_mut()) {
        grads.accumulate_into(v, t)?;
    }
    sgd_step(&mut tensors, lr)?;
    Ok(loss)
}

/// Trains from seeded initial parameters.
pub fn train<T: Scalar>(
    arch: &ArchitectureSpec,
    data: &LabeledImages<T>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let params = ModelParams::init(arch, cfg.seed)?;
    resume(arch, params, 0, TrainHistory::default(), data, cfg, checkpoint_dir)
}

/// Continues training `params`, which have completed `done` epochs, up to
/// `cfg.epochs`. `history` holds the records of the completed epochs.
pub fn resume<T: Scalar>(
    arch: &ArchitectureSpec,
    mut params: ModelParams<T>,
    done: usize,
    mut history: TrainHistory,
    data: &LabeledImages<T>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    params.check(arch)?;
    if done > cfg.epochs {
        return Err(Error::Config(format!("{done} epochs done but only {} configured", cfg.epochs)));
    }
    if data.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let labels = data.binary_labels()?;
    if !labels.contains(&BinaryClass::Accept) || !labels.contains(&BinaryClass::Reject) {
        return Err(Error::Config("training split must contain both accept and reject images".into()));
    }
    if history.epochs.len() != done || history.epochs.iter().enumerate().any(|(i, r)| r.epoch != i + 1) {
        return Err(Error::Config(format!("history must list epochs 1..={done} in order")));
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for epoch in done + 1..=cfg.epochs {
        let started = Instant::now();
        let lr = lr_at_epoch(cfg, epoch)?;
        let order = epoch_order(cfg, epoch, data.len());
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (batch, y) = data.batch(idx)?;
            step(arch, &mut params, batch, &y, T::lit(lr), epoch, b + 1)?;
        }
        params.check(arch).map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
                loss: f64::NAN,
            },
            other => other,
        })?;
        let eval = evaluate_epoch(arch, &params, data)?;
        history.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            mean_train_loss: eval.mean_loss,
            train_accuracy: eval.accuracy,
            wall_time: started.elapsed().as_secs_f64(),
        });
        if let Some(dir) = checkpoint_dir {
            if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
                let meta = CheckpointMeta {
                    seed: Some(cfg.seed),
                    epoch: Some(epoch),
                    created_at: None,
                };
                save_checkpoint(&params, arch, &meta, checkpoint_path(dir, epoch))?;
            }
            write_history(&dir.join("history.jsonl"), &history)?;
        }
    }
    Ok(TrainOutcome { params, history })
}

fn write_history(path: &Path, history: &TrainHistory) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(history.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_reduced_arch;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 1).unwrap(), 0.01);
        assert_eq!(lr_at_epoch(&cfg, 20).unwrap(), 0.0001);
        let e11 = lr_at_epoch(&cfg, 11).unwrap();
        let want = 0.01 * 10f64.powf(-2.0 * 10.0 / 19.0);
        assert!((e11 - want).abs() <= 1e-8 * want);
        assert!((e11 - 8.8587e-4).abs() < 1e-8);
        assert!(lr_at_epoch(&cfg, 0).is_err());
        assert!(lr_at_epoch(&cfg, 21).is_err());
        let one = TrainConfig { epochs: 1, ..cfg };
        assert_eq!(lr_at_epoch(&one, 1).unwrap(), 0.01);
    }

    #[test]
    fn config_validation() {
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            matches!(c.validate(), Err(Error::Config(_)))
        };
        assert!(bad(|c| c.epochs = 0));
        assert!(bad(|c| c.batch_size = 0));
        assert!(bad(|c| c.lr_end = 0.02));
        assert!(bad(|c| c.lr_end = 0.0));
    }

    fn toy(n: usize, ambiguous: bool) -> (ArchitectureSpec, LabeledImages<f64>) {
        let arch = build_reduced_arch(8).unwrap();
        let i = arch.input;
        let mut images = Vec::new();
        let mut categories = Vec::new();
        for k in 0..n {
            let accept = k % 2 == 0;
            let level = if accept { 0.3 } else { -0.3 };
            images.push(Tensor::from_fn([1, 3, i.height, i.width], |j| {
                level + 0.05 * ((j * 7 + k * 13) as f64).sin()
            }));
            categories.push(if accept { Consensus::Accept } else { Consensus::Reject });
        }
        if ambiguous {
            categories[0] = Consensus::Ambiguous;
        }
        let ids = (0..n).map(|k| format!("t{k}")).collect();
        (arch, LabeledImages { ids, images, categories })
    }

    #[test]
    fn ambiguous_never_reaches_a_batch() {
        let (arch, data) = toy(4, true);
        let cfg = TrainConfig { epochs: 1, batch_size: 2, ..Default::default() };
        assert!(matches!(train(&arch, &data, &cfg, None), Err(Error::Consistency(_))));
        assert!(data.batch(&[0]).is_err());
        assert!(data.batch(&[1, 2]).is_ok());
    }

    #[test]
    fn single_class_is_config_error() {
        let (arch, mut data) = toy(4, false);
        data.categories = vec![Consensus::Accept; 4];
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        assert!(matches!(train(&arch, &data, &cfg, None), Err(Error::Config(_))));
    }

    #[test]
    fn zero_params_accuracy_is_accept_fraction() {
        let (arch, data) = toy(5, false);
        let p = ModelParams::<f64>::zeros(&arch).unwrap();
        let e = evaluate_epoch(&arch, &p, &data).unwrap();
        assert_eq!(e.accuracy, 3.0 / 5.0);
        assert_eq!(e.mean_loss, 1.0);
        assert_eq!(evaluate_epoch(&arch, &p, &data).unwrap(), e);
    }

    #[test]
    fn shuffle_is_seeded_per_epoch() {
        let cfg = TrainConfig { seed: 3, ..Default::default() };
        assert_eq!(epoch_order(&cfg, 2, 10), epoch_order(&cfg, 2, 10));
        assert_ne!(epoch_order(&cfg, 2, 10), epoch_order(&cfg, 3, 10));
        let fixed = TrainConfig { shuffle_each_epoch: false, ..cfg };
        assert_eq!(epoch_order(&fixed, 5, 4), vec![0, 1, 2, 3]);
    }

    #[test]
    fn history_jsonl_round_trip() {
        let h = TrainHistory {
            epochs: vec![EpochRecord {
                epoch: 1,
                learning_rate: 0.01,
                mean_train_loss: 0.5,
                train_accuracy: 0.75,
                wall_time: 1.5,
            }],
        };
        let back = TrainHistory::from_jsonl(&h.to_jsonl().unwrap()).unwrap();
        assert_eq!(back, h);
    }
}
