use alloc::format;
use alloc::vec::Vec;

use super::config::{SearchConfig, TrainConfig};
use super::optim::Sgd;
use crate::data::{Augmenter, PersonImage};
use crate::error::{Error, Result};
use crate::nas::estimate_gradients;
use crate::nn::Model;
use crate::params::ParamGroup;
use crate::rng::{derive, permutation, SeededRng};
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;

/// Images (`3 × H × W` each) with class labels in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl TrainSet {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if images.len() != labels.len() {
            return Err(Error::Config(format!("{} images but {} labels", images.len(), labels.len())));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(TrainSet { images, labels, classes })
    }

    /// Relabels identities to `0..K` in increasing identity order.
    pub fn from_people(people: &[PersonImage]) -> Result<Self> {
        let mut ids: Vec<usize> = people.iter().map(|p| p.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        let labels = people.iter().map(|p| ids.binary_search(&p.identity).unwrap_or(0)).collect();
        let mut set = Self::new(people.iter().map(|p| p.image.clone()).collect(), labels)?;
        set.classes = ids.len();
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchEpoch {
    pub epoch: usize,
    pub temperature: f64,
    pub lr: f64,
    pub loss: f64,
    /// `softmax(π)` of every block at the end of the epoch.
    pub probabilities: Vec<[f64; 4]>,
}

const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const GUMBEL_STREAM: u64 = 3;

/// Seeded shuffle into batches. A trailing singleton batch is dropped since
/// batch statistics need at least two samples.
fn epoch_batches(n: usize, batch: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let order = permutation(n, rng);
    order.chunks(batch).filter(|c| c.len() > 1 || n == 1).map(<[usize]>::to_vec).collect()
}

fn assemble(set: &TrainSet, idx: &[usize], aug: &mut Augmenter, rng: &mut SeededRng) -> Result<(Tensor, Vec<usize>)> {
    let imgs: Vec<Tensor> = idx.iter().map(|&i| aug.apply(&set.images[i], rng)).collect();
    let refs: Vec<&Tensor> = imgs.iter().collect();
    Ok((Tensor::stack(&refs)?, idx.iter().map(|&i| set.labels[i]).collect()))
}

fn check_classifier(model: &Model, set: &TrainSet) -> Result<()> {
    let width = model.net.classifier.as_ref().map_or(0, |c| c.d_out);
    if width != set.classes {
        return Err(Error::Contract(format!("classifier width {width} but {} classes", set.classes)));
    }
    if let Some(&bad) = set.labels.iter().find(|&&l| l >= set.classes) {
        return Err(Error::Contract(format!("label {bad} out of range for {} classes", set.classes)));
    }
    Ok(())
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == l
        })
        .count()
}

/// Prefixes non-finite failures with the position in the schedule.
fn at(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch} batch {batch}: {m}")),
        other => other,
    }
}

/// Runs one batch; on failure the running statistics it touched are put back.
fn guarded<T>(model: &mut Model, batch: impl FnOnce(&mut Model) -> Result<T>) -> Result<T> {
    let saved = model.store.all_stats().to_vec();
    let result = batch(model);
    if result.is_err() {
        model.store.all_stats_mut().clone_from_slice(&saved);
    }
    result
}

fn grads_finite(model: &Model) -> bool {
    model.store.params().iter().all(|p| p.grad.iter().all(|g| g.is_finite()))
}

pub fn train(model: &mut Model, set: &TrainSet, config: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    train_with(model, set, config, |_, _| Ok(()))
}

/// Runs the full schedule, calling `on_epoch` after each epoch. A
/// non-finite loss or gradient stops training with [`Error::NonFinite`]
/// and leaves the model at its last finite state.
pub fn train_with<F>(model: &mut Model, set: &TrainSet, config: &TrainConfig, mut on_epoch: F) -> Result<Vec<EpochMetrics>>
where
    F: FnMut(&EpochMetrics, &Model) -> Result<()>,
{
    config.validate()?;
    check_classifier(model, set)?;
    let mut shuffle = derive(config.seed, SHUFFLE_STREAM);
    let mut aug_rng = derive(config.seed, AUGMENT_STREAM);
    let mut aug = Augmenter::new(config.augment.clone());
    let mut opt = Sgd::new(&model.store, config.momentum, config.weight_decay);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        model.store.set_group_trainable(ParamGroup::Base, epoch >= config.frozen_base_epochs);
        let lr = config.lr(epoch);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0, 0);
        for (b, idx) in epoch_batches(set.len(), config.batch_size, &mut shuffle).into_iter().enumerate() {
            let (x, y) = assemble(set, &idx, &mut aug, &mut aug_rng)?;
            let (value, batch_hits) = guarded(model, |model| {
                let mut tape = Tape::new();
                let out = model.forward(&mut tape, &x, Mode::Train, None).map_err(at(epoch, b))?;
                let logits = out.logits.ok_or_else(|| Error::Contract("model has no classifier".into()))?;
                let loss = tape.label_smoothed_ce(logits, &y, config.label_smoothing)?;
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("epoch {epoch} batch {b}: loss {value}")));
                }
                model.store.zero_grads();
                tape.backward(loss)?;
                tape.accumulate_param_grads(&mut model.store);
                if !grads_finite(model) {
                    return Err(Error::NonFinite(format!("epoch {epoch} batch {b}: non-finite gradient")));
                }
                if !opt.step_is_finite(&model.store, lr) {
                    return Err(Error::NonFinite(format!("epoch {epoch} batch {b}: update overflows")));
                }
                opt.step(&mut model.store, lr);
                Ok((value, correct(tape.value(logits), &y)))
            })?;
            loss_sum += value * y.len() as f64;
            hits += batch_hits;
            seen += y.len();
        }
        let m = EpochMetrics { epoch, lr, loss: loss_sum / seen.max(1) as f64, accuracy: hits as f64 / seen.max(1) as f64 };
        log::info!("epoch {epoch} lr {lr:.5} loss {:.4} acc {:.3}", m.loss, m.accuracy);
        on_epoch(&m, model)?;
        log.push(m);
    }
    model.store.set_group_trainable(ParamGroup::Base, true);
    Ok(log)
}

pub fn search(model: &mut Model, set: &TrainSet, config: &SearchConfig) -> Result<Vec<SearchEpoch>> {
    search_with(model, set, config, |_, _| Ok(()))
}

/// Joint SGD on weights and architecture logits with Monte-Carlo
/// Gumbel-Softmax gradients, the temperature following its schedule.
pub fn search_with<F>(model: &mut Model, set: &TrainSet, config: &SearchConfig, mut on_epoch: F) -> Result<Vec<SearchEpoch>>
where
    F: FnMut(&SearchEpoch, &Model) -> Result<()>,
{
    config.validate()?;
    if !model.net.is_search() {
        return Err(Error::Contract("search needs a supernet".into()));
    }
    check_classifier(model, set)?;
    let tc = &config.train;
    let mut shuffle = derive(tc.seed, SHUFFLE_STREAM);
    let mut aug_rng = derive(tc.seed, AUGMENT_STREAM);
    let mut gumbel = derive(tc.seed, GUMBEL_STREAM);
    let mut aug = Augmenter::new(tc.augment.clone());
    let mut opt = Sgd::new(&model.store, tc.momentum, tc.weight_decay);
    opt.arch_weight_decay = config.arch_weight_decay;
    let mut log = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let lr = tc.lr(epoch);
        let temperature = config.temperature.at(epoch);
        let (mut loss_sum, mut seen) = (0.0, 0);
        for (b, idx) in epoch_batches(set.len(), tc.batch_size, &mut shuffle).into_iter().enumerate() {
            let (x, y) = assemble(set, &idx, &mut aug, &mut aug_rng)?;
            let est = guarded(model, |model| {
                let est = estimate_gradients(model, &x, &y, tc.label_smoothing, config.samples, temperature, &mut gumbel)
                    .map_err(at(epoch, b))?;
                if !est.loss.is_finite() || !grads_finite(model) || !opt.step_is_finite(&model.store, lr) {
                    return Err(Error::NonFinite(format!("search epoch {epoch} batch {b}: loss {}", est.loss)));
                }
                opt.step(&mut model.store, lr);
                Ok(est)
            })?;
            loss_sum += est.loss * y.len() as f64;
            seen += y.len();
        }
        let probabilities = model.arch_params(temperature).probabilities();
        let row = SearchEpoch { epoch, temperature, lr, loss: loss_sum / seen.max(1) as f64, probabilities };
        log::info!("search epoch {epoch} lambda {temperature} loss {:.4}", row.loss);
        on_epoch(&row, model)?;
        log.push(row);
    }
    Ok(log)
}
