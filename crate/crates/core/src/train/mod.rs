//! Minibatch training, evaluation, checkpointing and resume.
//!
//! Everything random in a run is a pure function of `(seed, iteration)`:
//! epoch permutations come from a stream keyed by the epoch number and the
//! augmentation draws of a batch from a stream keyed by its iteration. A
//! resumed run therefore needs nothing beyond the weights and optimizer
//! moments stored in the checkpoint.

pub mod metrics;
pub mod optim;

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{center_crop, images_to_batch, random_crop, shift_augment, Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::{margin_loss, predictions};
use crate::model::checkpoint::Checkpoint;
use crate::model::network::Network;
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

pub use metrics::{MetricLog, MetricRecord};
pub use optim::{Optimizer, OptimizerKind};

/// Per-sample training-time transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Augment {
    None,
    /// Integer translation uniform in `[-max_shift, max_shift]^2`, zero fill.
    Shift { max_shift: usize },
    /// Uniformly placed crop to the network's input size.
    RandomCrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Evaluation cadence in iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Training images (from the front of the set) scored at each evaluation.
    pub eval_train_samples: usize,
    /// Test images scored at each evaluation; `None` uses all.
    pub eval_test_samples: Option<usize>,
    pub augment: Augment,
    /// Checkpoint cadence in iterations; the final state is always saved.
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    pub fn mnist() -> Self {
        TrainConfig {
            base_lr: 0.002,
            decay_factor: 0.5,
            decay_every: 4000,
            batch_size: 128,
            max_iterations: 30_000,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            clip_norm: None,
            eval_every: 500,
            eval_train_samples: 10_000,
            eval_test_samples: None,
            augment: Augment::Shift { max_shift: 2 },
            checkpoint_every: Some(5000),
        }
    }

    pub fn cifar() -> Self {
        TrainConfig {
            base_lr: 0.001,
            decay_every: 10_000,
            batch_size: 256,
            max_iterations: 50_000,
            augment: Augment::RandomCrop,
            ..Self::mnist()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("decay factor must lie in (0, 1]"));
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return Err(Error::config("decay interval and batch size must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip norm must be positive"));
            }
        }
        Ok(())
    }
}

/// `base_lr * decay_factor^floor(iteration / decay_every)`.
pub fn lr_at(iteration: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.decay_factor.powi((iteration / cfg.decay_every) as i32)
}

/// Training images consumed by one iteration: consecutive slices of a
/// fresh random permutation per epoch.
pub struct EpochSampler {
    len: usize,
    batch: usize,
    seed: u64,
    cached: Option<(usize, Vec<usize>)>,
}

const SAMPLER_SALT: u64 = 0x5a4d_504c_4552;
const AUGMENT_SALT: u64 = 0x4155_474d_454e;

impl EpochSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Self {
        EpochSampler {
            len,
            batch,
            seed,
            cached: None,
        }
    }

    fn permutation(&mut self, epoch: usize) -> &[usize] {
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ SAMPLER_SALT);
            rng.set_stream(epoch as u64);
            let mut perm: Vec<usize> = (0..self.len).collect();
            perm.shuffle(&mut rng);
            self.cached = Some((epoch, perm));
        }
        &self.cached.as_ref().expect("just filled").1
    }

    pub fn indices(&mut self, iteration: usize) -> Vec<usize> {
        let start = iteration * self.batch;
        (start..start + self.batch)
            .map(|pos| {
                let (epoch, offset) = (pos / self.len, pos % self.len);
                self.permutation(epoch)[offset]
            })
            .collect()
    }
}

fn augment_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ AUGMENT_SALT);
    rng.set_stream(iteration as u64);
    rng
}

fn input_dims<T: Scalar>(net: &Network<T>) -> (usize, usize, usize) {
    let s = net.config().input_shape;
    (s.height, s.width, s.capsule.len())
}

fn check_dataset<T: Scalar>(net: &Network<T>, ds: &Dataset) -> Result<()> {
    let (h, w, c) = input_dims(net);
    if ds.channels != c || ds.height < h || ds.width < w || net.config().input_shape.channels != 1 {
        return Err(Error::config(format!(
            "{} images of {}x{}x{} cannot feed network input {}",
            ds.split,
            ds.height,
            ds.width,
            ds.channels,
            net.config().input_shape
        )));
    }
    if ds.classes != net.classes() {
        return Err(Error::config(format!(
            "dataset has {} classes, network {}",
            ds.classes,
            net.classes()
        )));
    }
    Ok(())
}

/// Evaluation-time batch: images center-cropped to the network input.
fn eval_batch<T: Scalar>(net: &Network<T>, ds: &Dataset, indices: &[usize]) -> Result<FeatureMap<T>> {
    let (h, w, c) = input_dims(net);
    if (ds.height, ds.width) == (h, w) {
        return Ok(ds.batch(indices).0);
    }
    let dims = (ds.height, ds.width, ds.channels);
    let images: Vec<Vec<f32>> = indices
        .iter()
        .map(|&i| center_crop(ds.image(i), dims, (h, w)))
        .collect();
    images_to_batch(&images, (h, w, c))
}

fn train_batch<T: Scalar>(
    net: &Network<T>,
    ds: &Dataset,
    indices: &[usize],
    augment: Augment,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureMap<T>> {
    let (h, w, c) = input_dims(net);
    let dims = (ds.height, ds.width, ds.channels);
    let images: Vec<Vec<f32>> = indices
        .iter()
        .map(|&i| {
            let im = ds.image(i);
            match augment {
                Augment::None if dims == (h, w, c) => im.to_vec(),
                Augment::None => center_crop(im, dims, (h, w)),
                Augment::Shift { max_shift } => {
                    let shifted = shift_augment(im, dims, max_shift, rng).0;
                    if dims == (h, w, c) {
                        shifted
                    } else {
                        center_crop(&shifted, dims, (h, w))
                    }
                }
                Augment::RandomCrop => random_crop(im, dims, (h, w), rng),
            }
        })
        .collect();
    images_to_batch(&images, (h, w, c))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub count: usize,
}

/// Accuracy and mean margin loss over the first `limit` items (all when
/// `None`). Images larger than the network input are center-cropped.
pub fn evaluate<T: Scalar>(net: &Network<T>, ds: &Dataset, limit: Option<usize>) -> Result<Evaluation> {
    check_dataset(net, ds)?;
    let count = limit.unwrap_or(ds.len()).min(ds.len());
    if count == 0 {
        return Err(Error::config(format!("{} set is empty", ds.split)));
    }
    const CHUNK: usize = 500;
    let (mut correct, mut loss_sum) = (0usize, 0.0f64);
    for start in (0..count).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(count)).collect();
        let x = eval_batch(net, ds, &idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let scores = net.scores(&x)?;
        let (loss, _) = margin_loss(&scores, net.classes(), &labels, &net.config().loss)?;
        loss_sum += loss.as_f64() * idx.len() as f64;
        correct += predictions(&scores, net.classes())
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(Evaluation {
        accuracy: correct as f64 / count as f64,
        loss: loss_sum / count as f64,
        count,
    })
}

/// Optional inputs of [`train`].
#[derive(Default)]
pub struct RunOptions<'a, T> {
    /// Directory for `metrics.csv`, `timing.csv` and checkpoints.
    pub out_dir: Option<&'a Path>,
    /// Checkpoint to continue from plus the log written so far.
    pub resume: Option<(Checkpoint<T>, MetricLog)>,
    /// Called after every evaluation.
    pub progress: Option<&'a mut dyn FnMut(&MetricRecord)>,
}

pub struct TrainOutcome<T> {
    pub network: Network<T>,
    pub optimizer: Optimizer<T>,
    pub log: MetricLog,
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(iteration: usize) -> String {
    format!("iter_{iteration:07}.ckpt")
}

/// Runs `cfg.max_iterations` minibatch updates of `network` on `train_set`,
/// scoring `test_set` (and a fixed slice of `train_set`) at every evaluation.
pub fn train<T: Scalar>(
    mut network: Network<T>,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    mut opts: RunOptions<'_, T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    check_dataset(&network, train_set)?;
    check_dataset(&network, test_set)?;
    if train_set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if let Some(dir) = opts.out_dir {
        fs::create_dir_all(dir.join("checkpoints"))
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }

    let (start, mut optimizer, mut log) = match opts.resume.take() {
        Some((ck, mut log)) => {
            if ck.config != *network.config() {
                return Err(Error::config("checkpoint was written for a different model"));
            }
            if ck.seed != cfg.seed {
                return Err(Error::config(format!(
                    "checkpoint seed {} differs from run seed {}",
                    ck.seed, cfg.seed
                )));
            }
            let params = ck.params;
            let optimizer = match ck.optimizer {
                Some(state) => Optimizer::from_state(state, &params)?,
                None => return Err(Error::Checkpoint("checkpoint has no optimizer state".into())),
            };
            if optimizer.kind() != cfg.optimizer {
                return Err(Error::config("checkpoint optimizer differs from run optimizer"));
            }
            network.set_params(params)?;
            let k = ck.iteration as usize;
            log.truncate_after(k);
            (k, optimizer, log)
        }
        None => {
            let optimizer = Optimizer::new(cfg.optimizer, &network.params());
            (0, optimizer, MetricLog::default())
        }
    };

    let clock = Instant::now();
    let mut sampler = EpochSampler::new(train_set.len(), cfg.batch_size, cfg.seed);

    let mut record = |net: &Network<T>, done: usize, log: &mut MetricLog| -> Result<()> {
        let lr = lr_at(done.saturating_sub(1), cfg);
        let tr = evaluate(net, train_set, Some(cfg.eval_train_samples.max(1)))?;
        let te = evaluate(net, test_set, cfg.eval_test_samples)?;
        for (split, ev) in [(Split::Train, tr), (Split::Test, te)] {
            let r = MetricRecord {
                iteration: done,
                split,
                loss: ev.loss,
                accuracy: ev.accuracy,
                lr,
            };
            log.push(r)?;
            if let Some(p) = opts.progress.as_mut() {
                p(&r);
            }
        }
        log.timing.push((done, clock.elapsed().as_secs_f64()));
        if let Some(dir) = opts.out_dir {
            log.write(dir)?;
        }
        Ok(())
    };

    if start == 0 && cfg.eval_every > 0 {
        record(&network, 0, &mut log)?;
    }

    let save = |net: &Network<T>, opt: &Optimizer<T>, done: usize, name: &str| -> Result<()> {
        let Some(dir) = opts.out_dir else {
            return Ok(());
        };
        Checkpoint {
            config: net.config().clone(),
            iteration: done as u64,
            seed: cfg.seed,
            params: net.params(),
            optimizer: Some(opt.state()),
        }
        .save(&dir.join(name))
    };

    for it in start..cfg.max_iterations {
        let indices = sampler.indices(it);
        let mut rng = augment_rng(cfg.seed, it);
        let x = train_batch(&network, train_set, &indices, cfg.augment, &mut rng)?;
        let labels: Vec<usize> = indices.iter().map(|&i| train_set.labels[i]).collect();
        let out = network.loss_and_gradients(&x, &labels)?;
        let mut grads = out.gradients.kernels;
        let gnorm = grads.global_norm();
        if !out.loss.as_f64().is_finite() || !gnorm.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                layer_norms: network.params().layer_norms(),
            });
        }
        if let Some(c) = cfg.clip_norm {
            if gnorm > c {
                grads.scale(T::lit(c / gnorm));
            }
        }
        optimizer.update(&mut network, &grads, lr_at(it, cfg));

        let done = it + 1;
        let eval_now = done == cfg.max_iterations || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        if eval_now {
            record(&network, done, &mut log)?;
        }
        if cfg.checkpoint_every.is_some_and(|c| c > 0 && done % c == 0) {
            save(&network, &optimizer, done, &format!("checkpoints/{}", checkpoint_name(done)))?;
        }
    }
    if start >= cfg.max_iterations && log.last(Split::Test).is_none() {
        record(&network, start, &mut log)?;
    }
    save(&network, &optimizer, cfg.max_iterations.max(start), FINAL_CHECKPOINT)?;
    Ok(TrainOutcome {
        network,
        optimizer,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::msra_init;
    use crate::model::presets::preset;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::mnist();
        assert_eq!(lr_at(0, &cfg), 0.002);
        assert_eq!(lr_at(3999, &cfg), 0.002);
        assert_eq!(lr_at(4000, &cfg), 0.001);
        assert!((lr_at(12345, &cfg) - 0.00025).abs() < 1e-18);
        let c = TrainConfig::cifar();
        assert_eq!((c.base_lr, c.decay_every, c.batch_size, c.max_iterations), (0.001, 10_000, 256, 50_000));
        assert_eq!(lr_at(10_000, &c), 0.0005);
    }

    #[test]
    fn schedule_non_increasing() {
        let cfg = TrainConfig::mnist();
        let mut prev = f64::INFINITY;
        for it in (0..40_000).step_by(97) {
            let lr = lr_at(it, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = EpochSampler::new(10, 4, 7);
        let all: Vec<usize> = (0..5).flat_map(|i| s.indices(i)).collect();
        let mut e0 = all[..10].to_vec();
        e0.sort_unstable();
        assert_eq!(e0, (0..10).collect::<Vec<_>>());
        let mut e1 = all[10..20].to_vec();
        e1.sort_unstable();
        assert_eq!(e1, (0..10).collect::<Vec<_>>());
        assert_ne!(all[..10], all[10..20]);
        // random access matches sequential access
        let mut fresh = EpochSampler::new(10, 4, 7);
        assert_eq!(fresh.indices(3), all[12..16]);
    }

    fn toy_data(n: usize, seed: u64) -> Dataset {
        // class k: bright 3x3 block at a class-specific corner
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 3;
            let (oy, ox) = [(0, 0), (0, 4), (4, 2)][label];
            let mut im = vec![0.0f32; 49];
            for y in 0..3 {
                for x in 0..3 {
                    im[(oy + y) * 7 + ox + x] = 1.0;
                }
            }
            for v in im.iter_mut() {
                *v += 0.1 * rand::Rng::random_range(&mut rng, 0.0..1.0f32);
            }
            images.extend(im);
            labels.push(label);
        }
        Dataset::new(images, labels, (7, 7, 1), 3, Split::Train).unwrap()
    }

    fn toy_cfg(iters: usize) -> TrainConfig {
        TrainConfig {
            base_lr: 0.02,
            decay_every: 1000,
            batch_size: 8,
            max_iterations: iters,
            seed: 5,
            eval_every: 10,
            eval_train_samples: 30,
            augment: Augment::None,
            checkpoint_every: Some(10),
            ..TrainConfig::mnist()
        }
    }

    fn toy_net() -> Network<f64> {
        let c = preset("toy").unwrap();
        let p = msra_init(&c, 5);
        Network::new(c, p).unwrap()
    }

    #[test]
    fn toy_run_learns() {
        let (tr, te) = (toy_data(60, 1), toy_data(30, 2));
        let out = train(toy_net(), &tr, &te, &toy_cfg(60), RunOptions::default()).unwrap();
        let first = out.log.split(Split::Test).next().unwrap().loss;
        let last = out.log.last(Split::Test).unwrap();
        assert!(last.loss < first, "{} -> {}", first, last.loss);
        assert!(last.accuracy > 0.9, "{last:?}");
        assert_eq!(out.optimizer.step_count(), 60);
    }

    #[test]
    fn resume_is_bitwise_identical() {
        let (tr, te) = (toy_data(40, 1), toy_data(12, 2));
        let cfg = toy_cfg(30);
        let full_dir = tempfile::tempdir().unwrap();
        train(
            toy_net(),
            &tr,
            &te,
            &cfg,
            RunOptions {
                out_dir: Some(full_dir.path()),
                ..Default::default()
            },
        )
        .unwrap();

        let ck = Checkpoint::<f64>::load(&full_dir.path().join("checkpoints").join(checkpoint_name(10))).unwrap();
        let log = MetricLog::from_csv(&fs::read_to_string(full_dir.path().join("metrics.csv")).unwrap()).unwrap();
        let resumed_dir = tempfile::tempdir().unwrap();
        train(
            toy_net(),
            &tr,
            &te,
            &cfg,
            RunOptions {
                out_dir: Some(resumed_dir.path()),
                resume: Some((ck, log)),
                progress: None,
            },
        )
        .unwrap();
        for name in ["metrics.csv", FINAL_CHECKPOINT] {
            let a = fs::read(full_dir.path().join(name)).unwrap();
            let b = fs::read(resumed_dir.path().join(name)).unwrap();
            assert!(a == b, "{name} differs");
        }
    }

    #[test]
    fn divergence_reports_layer_norms() {
        let (tr, te) = (toy_data(20, 1), toy_data(6, 2));
        let mut net = toy_net();
        for k in net.kernels_mut() {
            k[0] = f64::NAN;
        }
        let err = train(net, &tr, &te, &toy_cfg(5), RunOptions::default()).err().unwrap();
        match err {
            Error::NonFinite { iteration, layer_norms } => {
                assert_eq!(iteration, 0);
                assert_eq!(layer_norms.len(), 2);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn perfect_classifier_scores_one() {
        // 1x1 input, one layer mapping the scalar to class capsules so that
        // class = sign of the pixel
        let c = crate::model::config::ModelConfig::from_toml(
            "name = \"sign\"\ninput = \"1x1x1x(1x1x1)\"\nlayers = [\"1x1x1x2x(1x1x1->1)\"]\n",
        )
        .unwrap();
        let mut p = crate::model::params::ParamBundle::<f64>::zeros(&c);
        p.kernels[0].data_mut().copy_from_slice(&[1.0, -1.0]);
        let net = Network::new(c, p).unwrap();
        let ds = Dataset::new(
            vec![0.9, -0.8, 0.5, -0.3, 0.7, -0.6, 0.2, -0.9, 0.4, -0.1],
            vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1],
            (1, 1, 1),
            2,
            Split::Test,
        )
        .unwrap();
        let ev = evaluate(&net, &ds, None).unwrap();
        assert_eq!(ev.accuracy, 1.0);
        assert_eq!(ev.count, 10);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::mnist();
        c.base_lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::mnist();
        c.clip_norm = Some(-1.0);
        assert!(c.validate().is_err());
    }
}
