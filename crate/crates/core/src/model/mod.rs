//! Conditional GAN over 64×64 flow images.
//!
//! The generator embeds the condition label and projects it to a 1×4×4
//! plane, projects a 4,096-dim standard-normal latent to 127×4×4, stacks the
//! two into a 128×4×4 seed and upsamples it with four transposed
//! convolutions to a 1×64×64 image. The discriminator projects the condition
//! to a full 1×64×64 plane, stacks it with the image (2×64×64), downsamples
//! with four convolutions and ends in a linear layer and a sigmoid.
//!
//! Training alternates a discriminator update (real labelled 1, generated
//! labelled 0) with a non-saturating generator update. The same type doubles
//! as the persisted checkpoint; see [`checkpoint`].

pub mod checkpoint;
mod layers;
mod nets;

use std::io::Write;

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{FlowImage, IMAGE_LEN, IMAGE_SIDE};
use crate::tensor::{adam_step, AdamConfig, Graph, ParamId, ParamStore, Tensor, TensorError};
use layers::Pass;
use nets::{Discriminator, Generator};

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, CHECKPOINT_VERSION};
pub use nets::{EMBED_DIM, LATENT_CHANNELS, LATENT_DIM, LEAKY_SLOPE, SEED_CHANNELS};

/// `(stage, shape)` pairs recorded during a forward pass.
pub type ShapeTrace = Vec<(&'static str, Vec<usize>)>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{stage} has shape {got:?}, expected {expected:?}")]
    ShapeContract {
        stage: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("unknown condition {0:?}")]
    UnknownCondition(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss in epoch {epoch}; rolled back to the last completed epoch")]
    DivergenceDetected {
        epoch: usize,
        last_good: Box<FlowGan>,
    },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("checkpoint holds a {found:?} model, expected {expected:?}")]
    ModeMismatch {
        expected: ConditionMode,
        found: ConditionMode,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Whether the condition label reaches the networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    Conditional,
    /// Condition pathway fed a constant index; a plain DCGAN over the pooled data.
    Unconditional,
}

/// Condition labels in index order, each with the active matrix size of the
/// map it refers to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionVocab {
    labels: Vec<String>,
    sizes: Vec<usize>,
}

impl ConditionVocab {
    pub fn new(entries: Vec<(String, usize)>) -> Result<Self> {
        let mut labels = Vec::new();
        let mut sizes = Vec::new();
        for (label, n) in entries {
            if labels.contains(&label) {
                return Err(ModelError::InvalidDataset(format!("duplicate condition {label:?}")));
            }
            if n == 0 || n > IMAGE_SIDE {
                return Err(ModelError::InvalidDataset(format!("condition {label:?} has size {n}")));
            }
            labels.push(label);
            sizes.push(n);
        }
        if labels.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        Ok(ConditionVocab { labels, sizes })
    }

    /// Labels in order of first appearance in `samples`.
    pub fn from_samples(samples: &[ConditionedSample]) -> Result<Self> {
        let mut entries: Vec<(String, usize)> = Vec::new();
        for s in samples {
            match entries.iter().find(|(l, _)| *l == s.condition) {
                Some((_, n)) if *n != s.image.n() => {
                    return Err(ModelError::InvalidDataset(format!(
                        "condition {:?} mixes sizes {n} and {}",
                        s.condition,
                        s.image.n()
                    )))
                }
                Some(_) => {}
                None => entries.push((s.condition.clone(), s.image.n())),
            }
        }
        ConditionVocab::new(entries)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn size_of(&self, label: &str) -> Option<usize> {
        self.index_of(label).map(|i| self.sizes[i])
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }
}

/// One training record: an encoded OD image and its condition label.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedSample {
    pub image: FlowImage,
    pub condition: String,
    pub day: NaiveDate,
    pub group: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Target for real images in the discriminator loss; below 1 smooths labels.
    pub real_label: f64,
    pub fake_label: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            adam: AdamConfig::default(),
            real_label: 1.0,
            fake_label: 0.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let ok = self.batch_size > 0
            && a.lr > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0
            && (0.0..=1.0).contains(&self.real_label)
            && (0.0..=1.0).contains(&self.fake_label);
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
}

/// Writes the `epoch,d_loss,g_loss` log.
pub fn write_loss_log<W: Write>(log: &[EpochLoss], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "d_loss", "g_loss"])?;
    for e in log {
        w.write_record([e.epoch.to_string(), e.d_loss.to_string(), e.g_loss.to_string()])?;
    }
    w.flush()
}

/// A trained (or training) generator/discriminator pair with everything
/// needed to resume training or generate: parameters, optimizer moments,
/// batch-norm statistics, RNG state, vocabulary and codec scale.
#[derive(Debug, Clone)]
pub struct FlowGan {
    pub(crate) mode: ConditionMode,
    pub(crate) vocab: ConditionVocab,
    pub(crate) scale: f64,
    pub(crate) config: TrainConfig,
    pub(crate) store: ParamStore,
    pub(crate) generator: Generator,
    pub(crate) discriminator: Discriminator,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) step: u64,
    pub(crate) epochs_done: u64,
}

impl PartialEq for FlowGan {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode
            && self.vocab == other.vocab
            && self.scale.to_bits() == other.scale.to_bits()
            && self.config == other.config
            && same_state(&self.store, &other.store)
            && self.generator == other.generator
            && self.discriminator == other.discriminator
            && self.rng == other.rng
            && self.step == other.step
            && self.epochs_done == other.epochs_done
    }
}

/// Parameter values, moments and step counters; gradients are scratch space.
fn same_state(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((_, p), (_, q))| {
            p.name == q.name
                && p.step == q.step
                && p.value == q.value
                && p.first_moment == q.first_moment
                && p.second_moment == q.second_moment
        })
}

/// 1 inside the active `n × n` block off the diagonal, 0 elsewhere. Generated
/// images pass through it before the discriminator sees them, matching the
/// post-processing applied at generation time.
fn layout_mask(n: usize) -> impl Iterator<Item = f64> {
    (0..IMAGE_LEN).map(move |k| {
        let (r, c) = (k / IMAGE_SIDE, k % IMAGE_SIDE);
        if r < n && c < n && r != c {
            1.0
        } else {
            0.0
        }
    })
}

/// A trained model plus its per-epoch losses.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FlowGan,
    pub log: Vec<EpochLoss>,
}

/// Trains a conditional model on `samples` for `config.epochs` epochs.
pub fn train(samples: &[ConditionedSample], config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    train_mode(samples, config, seed, ConditionMode::Conditional)
}

/// Same pipeline with the condition replaced by a constant.
pub fn train_unconditional(
    samples: &[ConditionedSample],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train_mode(samples, config, seed, ConditionMode::Unconditional)
}

fn train_mode(
    samples: &[ConditionedSample],
    config: &TrainConfig,
    seed: u64,
    mode: ConditionMode,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let scale = samples[0].image.scale();
    if samples.iter().any(|s| s.image.scale() != scale) {
        return Err(ModelError::InvalidDataset("samples use different codec scales".into()));
    }
    let vocab = ConditionVocab::from_samples(samples)?;
    let mut model = FlowGan::new(vocab, scale, mode, *config, seed)?;
    let log = model.train_epochs(samples, config.epochs)?;
    Ok(TrainOutcome { model, log })
}

impl FlowGan {
    /// Freshly initialized networks.
    pub fn new(
        vocab: ConditionVocab,
        scale: f64,
        mode: ConditionMode,
        config: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(ModelError::InvalidDataset(format!("invalid codec scale {scale}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net_vocab = match mode {
            ConditionMode::Conditional => vocab.len(),
            ConditionMode::Unconditional => 1,
        };
        let generator = Generator::new(&mut store, net_vocab, &mut rng);
        let discriminator = Discriminator::new(&mut store, net_vocab, &mut rng);
        Ok(FlowGan {
            mode,
            vocab,
            scale,
            config,
            store,
            generator,
            discriminator,
            rng,
            step: 0,
            epochs_done: 0,
        })
    }

    pub fn mode(&self) -> ConditionMode {
        self.mode
    }

    pub fn vocab(&self) -> &ConditionVocab {
        &self.vocab
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epochs_done(&self) -> u64 {
        self.epochs_done
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    fn generator_params(&self) -> Vec<ParamId> {
        self.generator.params()
    }

    fn discriminator_params(&self) -> Vec<ParamId> {
        self.discriminator.params()
    }

    /// Network-side index of a condition label.
    fn condition_index(&self, label: &str) -> Result<usize> {
        let idx = self
            .vocab
            .index_of(label)
            .ok_or_else(|| ModelError::UnknownCondition(label.to_string()))?;
        Ok(match self.mode {
            ConditionMode::Conditional => idx,
            ConditionMode::Unconditional => 0,
        })
    }

    /// Continues training for `epochs` more epochs. A model restored from a
    /// checkpoint continues exactly as the uninterrupted run would have.
    pub fn train_epochs(&mut self, samples: &[ConditionedSample], epochs: usize) -> Result<Vec<EpochLoss>> {
        if samples.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let mut conds = Vec::with_capacity(samples.len());
        for s in samples {
            if s.image.scale() != self.scale {
                return Err(ModelError::InvalidDataset(format!(
                    "sample scale {} differs from model scale {}",
                    s.image.scale(),
                    self.scale
                )));
            }
            conds.push(self.condition_index(&s.condition)?);
        }

        let mut log = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let epoch = self.epochs_done as usize;
            let snapshot = self.clone();
            match self.run_epoch(samples, &conds) {
                Ok((d_loss, g_loss)) => {
                    self.epochs_done += 1;
                    log.push(EpochLoss {
                        epoch,
                        d_loss,
                        g_loss,
                    })
                }
                Err(ModelError::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(ModelError::DivergenceDetected {
                        epoch,
                        last_good: Box::new(snapshot),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        Ok(log)
    }

    fn run_epoch(&mut self, samples: &[ConditionedSample], conds: &[usize]) -> Result<(f64, f64)> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut d_total, mut g_total, mut batches) = (0.0, 0.0, 0);
        for batch in order.chunks(self.config.batch_size) {
            let (d, g) = self.train_step(samples, conds, batch)?;
            if !(d.is_finite() && g.is_finite()) {
                return Err(TensorError::NonFinite { op: "loss" }.into());
            }
            d_total += d;
            g_total += g;
            batches += 1;
        }
        Ok((d_total / batches as f64, g_total / batches as f64))
    }

    fn train_step(
        &mut self,
        samples: &[ConditionedSample],
        all_conds: &[usize],
        batch: &[usize],
    ) -> Result<(f64, f64)> {
        let n = batch.len();
        let conds: Vec<usize> = batch.iter().map(|&i| all_conds[i]).collect();
        let mut real = Vec::with_capacity(n * IMAGE_LEN);
        for &i in batch {
            real.extend_from_slice(samples[i].image.pixels());
        }
        let real = Tensor::new(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], real)?;
        let mut mask = Vec::with_capacity(n * IMAGE_LEN);
        for &i in batch {
            mask.extend(layout_mask(samples[i].image.n()));
        }
        let mask = Tensor::new(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], mask)?;
        let z = Tensor::randn(&[n, LATENT_DIM], 0.0, 1.0, &mut self.rng);
        let real_labels = vec![self.config.real_label; n];
        let fake_labels = vec![self.config.fake_label; n];
        let mut trace = ShapeTrace::new();

        let d_ids = self.discriminator_params();
        let g_ids = self.generator_params();

        // Discriminator update; the generator runs frozen.
        self.store.zero_grad(&d_ids);
        let (d_loss, grads) = {
            let mut g = Graph::with_params(&self.store);
            let zv = g.constant(z.clone());
            let frozen = Pass {
                train: true,
                track_params: false,
                update_running: false,
            };
            let fake = self.generator.forward(&mut g, zv, &conds, frozen, &mut trace)?;
            let mv = g.constant(mask.clone());
            let fake = g.mul(fake, mv)?;
            let tracked = Pass {
                train: true,
                track_params: true,
                update_running: true,
            };
            let rv = g.constant(real);
            let p_real = self.discriminator.forward(&mut g, rv, &conds, tracked, &mut trace)?;
            let l_real = g.bce_loss(p_real, &real_labels)?;
            let p_fake = self.discriminator.forward(&mut g, fake, &conds, tracked, &mut trace)?;
            let l_fake = g.bce_loss(p_fake, &fake_labels)?;
            let loss = g.add(l_real, l_fake)?;
            let value = g.value(loss).data()[0];
            (value, g.backward(loss)?)
        };
        grads.accumulate_into(&mut self.store);
        adam_step(&mut self.store, &d_ids, &self.config.adam);

        // Generator update against the refreshed, frozen discriminator.
        self.store.zero_grad(&g_ids);
        let (g_loss, grads) = {
            let mut g = Graph::with_params(&self.store);
            let zv = g.constant(z);
            let tracked = Pass {
                train: true,
                track_params: true,
                update_running: true,
            };
            let fake = self.generator.forward(&mut g, zv, &conds, tracked, &mut trace)?;
            let mv = g.constant(mask);
            let fake = g.mul(fake, mv)?;
            let frozen = Pass {
                train: true,
                track_params: false,
                update_running: false,
            };
            let p = self.discriminator.forward(&mut g, fake, &conds, frozen, &mut trace)?;
            let loss = g.bce_loss(p, &real_labels)?;
            let value = g.value(loss).data()[0];
            (value, g.backward(loss)?)
        };
        grads.accumulate_into(&mut self.store);
        adam_step(&mut self.store, &g_ids, &self.config.adam);

        self.step += 1;
        Ok((d_loss, g_loss))
    }

    /// Generates one image; `seed` fixes the latent draw.
    pub fn generate(&self, condition: &str, seed: Option<u64>) -> Result<FlowImage> {
        let mut rng = match seed {
            Some(s) => ChaCha8Rng::seed_from_u64(s),
            None => ChaCha8Rng::from_rng(&mut rand::rng()),
        };
        let z = Tensor::randn(&[1, LATENT_DIM], 0.0, 1.0, &mut rng);
        Ok(self.generate_from_latent(condition, &z)?.remove(0))
    }

    /// Generates `count` images from a single seeded latent stream.
    pub fn generate_batch(&self, condition: &str, count: usize, seed: u64) -> Result<Vec<FlowImage>> {
        const CHUNK: usize = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        let mut left = count;
        while left > 0 {
            let n = left.min(CHUNK);
            let z = Tensor::randn(&[n, LATENT_DIM], 0.0, 1.0, &mut rng);
            out.extend(self.generate_from_latent(condition, &z)?);
            left -= n;
        }
        Ok(out)
    }

    /// Runs the generator in evaluation mode on latents `z: [N, LATENT_DIM]`.
    /// Padding beyond the condition's active size and the diagonal are zeroed.
    pub fn generate_from_latent(&self, condition: &str, z: &Tensor) -> Result<Vec<FlowImage>> {
        let idx = self.condition_index(condition)?;
        let active = self.vocab.size_of(condition).expect("checked above");
        if z.shape().len() != 2 || z.shape()[1] != LATENT_DIM {
            return Err(ModelError::ShapeContract {
                stage: "generator.latent_input",
                expected: vec![z.shape().first().copied().unwrap_or(0), LATENT_DIM],
                got: z.shape().to_vec(),
            });
        }
        let n = z.shape()[0];
        let mut generator = self.generator.clone();
        let mut g = Graph::with_params(&self.store);
        let zv = g.constant(z.clone());
        let img = generator.forward(&mut g, zv, &vec![idx; n], Pass::EVAL, &mut ShapeTrace::new())?;
        let data = g.value(img).data();
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let mut px = data[k * IMAGE_LEN..(k + 1) * IMAGE_LEN].to_vec();
            for r in 0..IMAGE_SIDE {
                for c in 0..IMAGE_SIDE {
                    let v = &mut px[r * IMAGE_SIDE + c];
                    *v = if r >= active || c >= active || r == c {
                        0.0
                    } else {
                        v.clamp(0.0, 1.0)
                    };
                }
            }
            out.push(FlowImage::new(active, self.scale, px).map_err(|e| {
                ModelError::InvalidDataset(format!("generated image invalid: {e}"))
            })?);
        }
        Ok(out)
    }

    /// Probability (evaluation-mode discriminator) that `image` is real
    /// under `condition`.
    pub fn discriminate(&self, image: &FlowImage, condition: &str) -> Result<f64> {
        let idx = self.condition_index(condition)?;
        let mut disc = self.discriminator.clone();
        let mut g = Graph::with_params(&self.store);
        let x = g.constant(Tensor::new(vec![1, 1, IMAGE_SIDE, IMAGE_SIDE], image.pixels().to_vec())?);
        let p = disc.forward(&mut g, x, &[idx], Pass::EVAL, &mut ShapeTrace::new())?;
        Ok(g.value(p).data()[0])
    }

    /// Runs one evaluation-mode generator and discriminator pass on a batch of
    /// `batch` random inputs and returns every checked stage shape.
    pub fn shape_trace(&self, batch: usize, seed: u64) -> Result<ShapeTrace> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conds: Vec<usize> = (0..batch)
            .map(|i| match self.mode {
                ConditionMode::Conditional => i % self.vocab.len(),
                ConditionMode::Unconditional => 0,
            })
            .collect();
        let mut trace = ShapeTrace::new();
        let mut generator = self.generator.clone();
        let mut disc = self.discriminator.clone();
        let mut g = Graph::with_params(&self.store);
        let z = g.constant(Tensor::randn(&[batch, LATENT_DIM], 0.0, 1.0, &mut rng));
        let img = generator.forward(&mut g, z, &conds, Pass::EVAL, &mut trace)?;
        disc.forward(&mut g, img, &conds, Pass::EVAL, &mut trace)?;
        Ok(trace)
    }
}

#[cfg(test)]
mod tests;
