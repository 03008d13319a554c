use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;

use super::config::{EpochRecord, LossKind, TrainConfig, TrainReport};
use crate::data::{Dataset, Split, SplitKind};
use crate::error::{Error, Result};
use crate::models::{Features, ModelGraph};
use crate::nn::{adam_step, AdamConfig, Binding, EarlyStopper, StopDecision};
use crate::rng::{stream, Stream};
use crate::tensor::{Tape, Tensor, Var};

/// A per-batch loss over the train and validation splits.
pub(crate) trait Objective {
    fn len(&self, split: SplitKind) -> usize;
    fn loss(&self, model: &ModelGraph, tape: &mut Tape, b: &Binding, split: SplitKind, idx: &[usize]) -> Result<Var>;
}

/// Frozen-encoder outputs of a split, computed once.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub latent: Tensor,
    pub skip: Tensor,
}

impl FeatureCache {
    pub fn new(model: &ModelGraph, split: &Split) -> Result<Self> {
        let (latent, skip) = model.encode(&all_images(split)?)?;
        Ok(FeatureCache { latent, skip })
    }

    pub(crate) fn record(&self, tape: &mut Tape, idx: &[usize]) -> Result<Features> {
        Ok(Features {
            latent: tape.constant(self.latent.select(idx)?),
            skip: tape.constant(self.skip.select(idx)?),
        })
    }
}

pub(crate) fn all_images(split: &Split) -> Result<Tensor> {
    if split.is_empty() {
        return Err(Error::arg(format!("the {} split is empty", split.kind.name())));
    }
    split.batch(&(0..split.len()).collect::<Vec<_>>())
}

struct Supervised<'a> {
    train: &'a Split,
    val: &'a Split,
}

impl Supervised<'_> {
    fn split(&self, kind: SplitKind) -> &Split {
        if kind == SplitKind::Train {
            self.train
        } else {
            self.val
        }
    }
}

impl Objective for Supervised<'_> {
    fn len(&self, split: SplitKind) -> usize {
        self.split(split).len()
    }

    fn loss(&self, model: &ModelGraph, tape: &mut Tape, b: &Binding, split: SplitKind, idx: &[usize]) -> Result<Var> {
        let s = self.split(split);
        let x = tape.constant(s.batch(idx)?);
        let t = model.record_forward(tape, b, x)?;
        tape.bce_loss(t, &s.labels_f(idx))
    }
}

/// Regression of the network output (or, with `map_targets`, the E-map
/// itself) on precomputed targets from cached encoder features.
pub(crate) struct CachedRegression {
    pub train: (FeatureCache, Tensor),
    pub val: (FeatureCache, Tensor),
    pub map_targets: bool,
}

impl Objective for CachedRegression {
    fn len(&self, split: SplitKind) -> usize {
        let part = if split == SplitKind::Train {
            &self.train
        } else {
            &self.val
        };
        part.1.len_outer()
    }

    fn loss(&self, model: &ModelGraph, tape: &mut Tape, b: &Binding, split: SplitKind, idx: &[usize]) -> Result<Var> {
        let (cache, targets) = if split == SplitKind::Train {
            &self.train
        } else {
            &self.val
        };
        let f = cache.record(tape, idx)?;
        let out = if self.map_targets {
            model.record_decoder(tape, b, f)?
        } else {
            model.record_head(tape, b, f)?
        };
        tape.mse_loss(out, &targets.select(idx)?)
    }
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, batch },
        other => other,
    }
}

fn mean_val_loss(model: &ModelGraph, obj: &dyn Objective, batch_size: usize) -> Result<f64> {
    let n = obj.len(SplitKind::Val);
    let mut tape = Tape::new();
    let mut total = 0.0;
    for start in (0..n).step_by(batch_size) {
        let idx: Vec<usize> = (start..n.min(start + batch_size)).collect();
        tape.clear();
        let b = model.params.bind_frozen(&mut tape);
        let loss = obj.loss(model, &mut tape, &b, SplitKind::Val, &idx)?;
        total += tape.value(loss).item() as f64 * idx.len() as f64;
    }
    Ok(total / n as f64)
}

/// Adam with patience-based early stopping on the validation loss.
pub(crate) fn fit(
    model: &mut ModelGraph,
    obj: &dyn Objective,
    cfg: &TrainConfig,
    protocol: &str,
) -> Result<TrainReport> {
    cfg.validate()?;
    let n = obj.len(SplitKind::Train);
    if n == 0 || obj.len(SplitKind::Val) == 0 {
        return Err(Error::arg("training needs non-empty train and validation splits"));
    }
    let started = Instant::now();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = model.params.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut tape = Tape::new();
    model.params.reset_optimizer();

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(cfg.seed, Stream::Shuffle, &[epoch as u64]));
        let mut train_total = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            tape.clear();
            let b = model.params.bind(&mut tape);
            let loss = obj
                .loss(model, &mut tape, &b, SplitKind::Train, idx)
                .map_err(|e| diverged(e, epoch, bi + 1))?;
            train_total += tape.value(loss).item() as f64 * idx.len() as f64;
            let grads = tape.backward(loss).map_err(|e| diverged(e, epoch, bi + 1))?;
            model.params.collect_grads(&grads, &b);
            adam_step(&mut model.params, &adam)?;
        }
        let val_loss = mean_val_loss(model, obj, cfg.batch_size).map_err(|e| diverged(e, epoch, 0))?;
        let rec = EpochRecord {
            epoch,
            train_loss: train_total / n as f64,
            val_loss,
        };
        log::info!(
            "{protocol}: epoch {epoch} train_loss {:.6} val_loss {:.6}",
            rec.train_loss,
            rec.val_loss
        );
        epochs.push(rec);
        let decision = stopper.observe(val_loss);
        if stopper.improved() {
            best = model.params.clone();
        }
        if decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }
    if cfg.restore_best {
        model.params = best;
    }
    model.params.reset_optimizer();
    Ok(TrainReport {
        protocol: protocol.to_string(),
        stop_epoch: epochs.len(),
        stopped_early,
        best_epoch: stopper.best_epoch().unwrap_or(0),
        best_val_loss: stopper.best_loss().unwrap_or(f64::NAN),
        epochs,
        wall_time_secs: started.elapsed().as_secs_f64(),
        final_metrics: BTreeMap::new(),
    })
}

fn accuracy(model: &ModelGraph, split: &Split) -> Result<f64> {
    let t = model.forward(&all_images(split)?)?;
    let correct = t
        .data()
        .iter()
        .zip(&split.labels)
        .filter(|(&t, &l)| (t > 0.0) == (l == 1))
        .count();
    Ok(correct as f64 / split.len() as f64)
}

/// Supervised BCE training of a black-box classifier.
pub fn train_blackbox(model: &mut ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if model.is_interpretable() {
        return Err(Error::arg("train_blackbox needs a black-box model"));
    }
    if cfg.loss_kind != LossKind::Bce {
        return Err(Error::Config("black-box training uses the bce loss".into()));
    }
    let obj = Supervised {
        train: &data.train,
        val: &data.val,
    };
    let mut report = fit(model, &obj, cfg, "blackbox")?;
    report
        .final_metrics
        .insert("val_accuracy".into(), accuracy(model, &data.val)?);
    Ok(report)
}

/// BCE training of an interpretable network from labels, encoder included.
pub fn direct_train_interpretable(model: &mut ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if !model.is_interpretable() {
        return Err(Error::arg("direct training needs an interpretable model"));
    }
    if cfg.loss_kind != LossKind::Bce {
        return Err(Error::Config("direct training uses the bce loss".into()));
    }
    let obj = Supervised {
        train: &data.train,
        val: &data.val,
    };
    let mut report = fit(model, &obj, cfg, "direct")?;
    report
        .final_metrics
        .insert("val_accuracy".into(), accuracy(model, &data.val)?);
    Ok(report)
}

/// Teacher test statistics `[N, 1]` of a split.
pub fn teacher_targets(teacher: &ModelGraph, split: &Split) -> Result<Tensor> {
    teacher.forward(&all_images(split)?)
}

pub(crate) fn check_frozen_encoder(student: &ModelGraph, teacher: &ModelGraph) -> Result<()> {
    if let Some(p) = student
        .params
        .iter()
        .find(|p| p.name.starts_with("enc.") && p.trainable)
    {
        return Err(Error::Invariant(format!(
            "encoder parameter `{}` is trainable during distillation",
            p.name
        )));
    }
    if student.encoder_bytes() != teacher.encoder_bytes() {
        return Err(Error::Invariant(
            "student encoder differs from the teacher's feature extractor".into(),
        ));
    }
    Ok(())
}

/// Regresses the unity-sum output of `student` on the teacher's test statistic.
pub fn distill_interpretable(
    student: &mut ModelGraph,
    teacher: &ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if !student.is_interpretable() || teacher.is_interpretable() {
        return Err(Error::arg(
            "distillation needs an interpretable student and a black-box teacher",
        ));
    }
    if cfg.loss_kind != LossKind::Mse {
        return Err(Error::Config("distillation uses the mse loss".into()));
    }
    check_frozen_encoder(student, teacher)?;
    let teacher_bytes = teacher.params.bytes_with_prefix("");
    let obj = CachedRegression {
        train: (
            FeatureCache::new(student, &data.train)?,
            teacher_targets(teacher, &data.train)?,
        ),
        val: (
            FeatureCache::new(student, &data.val)?,
            teacher_targets(teacher, &data.val)?,
        ),
        map_targets: false,
    };
    let mut report = fit(student, &obj, cfg, "distill")?;
    check_frozen_encoder(student, teacher)?;
    if teacher.params.bytes_with_prefix("") != teacher_bytes {
        return Err(Error::Invariant(
            "teacher parameters changed during distillation".into(),
        ));
    }
    report
        .final_metrics
        .insert("val_accuracy".into(), accuracy(student, &data.val)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, DatasetConfig};
    use crate::models::{BlackBoxSpec, DecoderSpec};
    use crate::nn::InitScheme;

    fn tiny_data(size: usize) -> Dataset {
        gen_dataset(&DatasetConfig {
            image_size: size,
            train_per_class: 12,
            val_per_class: 4,
            test_per_class: 4,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_bb(size: usize) -> ModelGraph {
        let spec = BlackBoxSpec {
            conv_layers: 1,
            filters: 2,
            kernel: 3,
        };
        ModelGraph::build_blackbox(spec, size, InitScheme::glorot(1)).unwrap()
    }

    fn tiny_dec() -> DecoderSpec {
        DecoderSpec {
            conv_layers: 0,
            filters: 2,
            kernel: 3,
            ..Default::default()
        }
    }

    fn cfg(lr: f64, loss: LossKind) -> TrainConfig {
        TrainConfig {
            lr,
            max_epochs: 5,
            batch_size: 8,
            loss_kind: loss,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn constant_data_drives_bce_below_ln2() {
        let mut data = tiny_data(8);
        for s in [&mut data.train, &mut data.val] {
            s.images.fill(0.0);
            s.labels.fill(0);
        }
        let mut bb = tiny_bb(8);
        let r = train_blackbox(&mut bb, &data, &cfg(1e-2, LossKind::Bce)).unwrap();
        assert!(r.best_val_loss < std::f64::consts::LN_2, "{r:?}");
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let data = tiny_data(8);
        let mut bb = tiny_bb(8);
        let before = bb.params.bytes_with_prefix("");
        let r = train_blackbox(&mut bb, &data, &cfg(0.0, LossKind::Bce)).unwrap();
        assert_eq!(bb.params.bytes_with_prefix(""), before);
        assert!(r.epochs.iter().all(|e| e.val_loss == r.epochs[0].val_loss));
        assert!(r
            .epochs
            .iter()
            .all(|e| (e.train_loss - r.epochs[0].train_loss).abs() < 1e-6));
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data(8);
        let run = || {
            let mut bb = tiny_bb(8);
            let r = train_blackbox(&mut bb, &data, &cfg(1e-3, LossKind::Bce)).unwrap();
            (r, bb.params.bytes_with_prefix(""))
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert!(a.same_run(&b));
        assert_eq!(pa, pb);
    }

    #[test]
    fn distillation_of_a_constant_teacher() {
        let data = tiny_data(8);
        let mut bb = tiny_bb(8);
        for p in bb.params.iter_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        bb.params.get_mut("fc.bias").unwrap().value = Tensor::scalar(0.5);
        let mut student = ModelGraph::build_interpretable(&bb, tiny_dec(), InitScheme::glorot(2)).unwrap();
        let enc = student.encoder_bytes();
        let c = TrainConfig {
            max_epochs: 60,
            patience: 60,
            ..cfg(1e-2, LossKind::Mse)
        };
        let r = distill_interpretable(&mut student, &bb, &data, &c).unwrap();
        assert!(r.best_val_loss <= 1e-4, "{}", r.best_val_loss);
        assert_eq!(student.encoder_bytes(), enc);
        let t = student.forward(&all_images(&data.test).unwrap()).unwrap();
        assert!(t.data().iter().all(|&v| (v - 0.5).abs() < 0.02));
    }

    #[test]
    fn distillation_rejects_a_trainable_encoder() {
        let data = tiny_data(8);
        let bb = tiny_bb(8);
        let mut student = ModelGraph::build_interpretable(&bb, tiny_dec(), InitScheme::glorot(2)).unwrap();
        student.params.set_trainable("enc.", true);
        let err = distill_interpretable(&mut student, &bb, &data, &cfg(1e-3, LossKind::Mse)).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn direct_training_updates_the_encoder() {
        let data = tiny_data(8);
        let mut m = ModelGraph::build_interpretable_from_scratch(
            BlackBoxSpec {
                conv_layers: 1,
                filters: 2,
                kernel: 3,
            },
            tiny_dec(),
            8,
            InitScheme::glorot(5),
        )
        .unwrap();
        let enc = m.encoder_bytes();
        let c = TrainConfig {
            restore_best: false,
            ..cfg(1e-3, LossKind::Bce)
        };
        let r = direct_train_interpretable(&mut m, &data, &c).unwrap();
        assert!(r.final_metrics.contains_key("val_accuracy"));
        assert_ne!(m.encoder_bytes(), enc);
    }

    #[test]
    fn wrong_loss_kind_is_a_config_error() {
        let data = tiny_data(8);
        let mut bb = tiny_bb(8);
        assert!(matches!(
            train_blackbox(&mut bb, &data, &cfg(1e-3, LossKind::Mse)),
            Err(Error::Config(_))
        ));
    }
}
