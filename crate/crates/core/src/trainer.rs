//! End-to-end training: Nesterov-SGD steps on the supervised layers against
//! the LDA eigenvalue objective (or cross-entropy for the ablation), and
//! periodic line-searched gradient steps on the log-parametrized GMM
//! vocabulary.
//!
//! Sign convention: every objective here is *maximized*. The LDA objective is
//! the mean of the active eigenvalues; the cross-entropy run maximizes the
//! negated loss. Parameter updates descend on the negated objective.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{pca_fit, DescriptorSet, PcaModel};
use crate::error::{Error, Result};
use crate::fisher::{fv_encode_image, fv_grad_gmm, FvGradOptions, GmmGradient};
use crate::gmm::{gmm_fit_em_with, EmOptions, GmmModel};
use crate::lda::{lda_grad_hidden, lda_objective};
use crate::net::{cross_entropy_loss, ForwardTrace, Mode, NetGrads, NetParams, NetSpec, ParamKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Lda,
    CrossEntropy,
}

/// One descriptor channel: a column range of the raw descriptors with its
/// own PCA and GMM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSpec {
    pub name: String,
    /// Half-open column range `[start, end)` of the raw descriptors.
    pub columns: (usize, usize),
    pub pca_dim: usize,
    pub components: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to biases and batch-norm parameters as well.
    pub decay_all_params: bool,
    pub lr_halving_period_epochs: usize,
    pub epochs: usize,
    pub lambda_reg: f64,
    pub epsilon_offset: f64,
    /// `0` disables GMM updates.
    pub gmm_update_period_epochs: usize,
    pub line_search_grid: Vec<f64>,
    pub gamma_threshold: f64,
    pub subsample_fraction: f64,
    pub loss_kind: LossKind,
    pub seed: u64,
    pub min_per_class: usize,
    /// `None` means one pass worth of batches: `max(1, N_train / batch_size)`.
    pub batches_per_epoch: Option<usize>,
    /// Number of fixed batches used for GMM gradients, line search and the logged objective.
    pub gmm_sample_batches: usize,
    pub hidden_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub batch_norm: bool,
    pub channels: Vec<ChannelSpec>,
    pub em_max_iters: usize,
    pub em_tol: f64,
    /// Upper bound on descriptors pooled for PCA and EM.
    pub fit_sample_limit: usize,
    /// Stop when the logged objective moved less than `1e-5` over 10 epochs.
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr_init: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_all_params: false,
            lr_halving_period_epochs: 50,
            epochs: 50,
            lambda_reg: crate::lda::DEFAULT_LAMBDA,
            epsilon_offset: crate::lda::DEFAULT_EPSILON,
            gmm_update_period_epochs: 5,
            line_search_grid: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            gamma_threshold: 1e-5,
            subsample_fraction: 0.10,
            loss_kind: LossKind::Lda,
            seed: 0,
            min_per_class: 2,
            batches_per_epoch: None,
            gmm_sample_batches: 4,
            hidden_widths: vec![4096, 1024, 1024],
            dropout_rate: 0.2,
            batch_norm: true,
            channels: vec![
                ChannelSpec {
                    name: "sift".into(),
                    columns: (0, 80),
                    pca_dim: 80,
                    components: 256,
                },
                ChannelSpec {
                    name: "lab".into(),
                    columns: (80, 128),
                    pca_dim: 48,
                    components: 256,
                },
            ],
            em_max_iters: 100,
            em_tol: 1e-6,
            fit_sample_limit: 200_000,
            early_stop: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.min_per_class < 2 {
            return bad(format!("min_per_class must be >= 2, got {}", self.min_per_class));
        }
        if self.batch_size < 2 * self.min_per_class {
            return bad(format!(
                "batch_size {} cannot hold two classes of {} samples",
                self.batch_size, self.min_per_class
            ));
        }
        let rates = [
            ("lr_init", self.lr_init),
            ("lambda_reg", self.lambda_reg),
            ("subsample_fraction", self.subsample_fraction),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 || self.epsilon_offset < 0.0 || self.gamma_threshold < 0.0 {
            return bad("weight_decay, epsilon_offset and gamma_threshold must be nonnegative".into());
        }
        if self.subsample_fraction > 1.0 {
            return bad("subsample_fraction must not exceed 1".into());
        }
        if self.lr_halving_period_epochs == 0 {
            return bad("lr_halving_period_epochs must be positive".into());
        }
        if self.line_search_grid.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return bad("line_search_grid entries must be positive".into());
        }
        if self.channels.is_empty() {
            return bad("at least one descriptor channel is required".into());
        }
        for c in &self.channels {
            if c.columns.0 >= c.columns.1 || c.pca_dim == 0 || c.components == 0 {
                return bad(format!("channel {} is malformed", c.name));
            }
        }
        if self.gmm_sample_batches == 0 {
            return bad("gmm_sample_batches must be positive".into());
        }
        Ok(())
    }

    /// `lr_init · 2^(−⌊epoch/period⌋)`
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let halvings = (epoch / self.lr_halving_period_epochs.max(1)) as i32;
        self.lr_init * libm::pow(2.0, -(halvings as f64))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// The LDA objective (maximized) or the cross-entropy loss (minimized),
    /// evaluated on the fixed sample batches.
    pub loss: f64,
    pub lr: f64,
    pub eigenvalues: Vec<f64>,
    /// Step adopted by a GMM update in this epoch, if one ran.
    pub eta: Option<f64>,
}

/// Everything needed to continue training or to embed images.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub channels: Vec<ChannelSpec>,
    pub pcas: Vec<PcaModel>,
    pub gmms: Vec<GmmModel>,
    pub net: NetParams,
    pub momentum: NetGrads,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed parameter steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Training labels in class-index order.
    pub classes: Vec<usize>,
    pub log: Vec<EpochRecord>,
}

impl TrainState {
    /// PCA-projected descriptors of every channel.
    pub fn project_channels(&self, image: &DescriptorSet) -> Result<Vec<DMatrix<f64>>> {
        self.channels
            .iter()
            .zip(&self.pcas)
            .map(|(c, p)| p.project(&image.columns(c.columns.0, c.columns.1)?))
            .collect()
    }

    /// Concatenated normalized Fisher vector of an image.
    pub fn encode(&self, image: &DescriptorSet) -> Result<DVector<f64>> {
        self.check_ready()?;
        Ok(fv_encode_image(&self.gmms, &self.project_channels(image)?)?.values)
    }

    pub fn fv_dim(&self) -> usize {
        self.gmms.iter().map(|g| 2 * g.num_components() * g.dim()).sum()
    }

    pub fn check_ready(&self) -> Result<()> {
        if self.gmms.len() != self.channels.len() || self.pcas.len() != self.channels.len() {
            return Err(Error::State(format!(
                "{} channels but {} PCA models and {} GMMs",
                self.channels.len(),
                self.pcas.len(),
                self.gmms.len()
            )));
        }
        if self.net.input_dim() != self.fv_dim() {
            return Err(Error::State(format!(
                "network expects {} inputs, Fisher vectors have {}",
                self.net.input_dim(),
                self.fv_dim()
            )));
        }
        self.net.validate()
    }
}

/// Draws a class-balanced batch: classes are chosen uniformly without
/// replacement among those with at least `min_per_class` samples, each gets
/// `min_per_class` samples, and leftover slots are spread round-robin over
/// the chosen classes while they have unused samples. Returns sample indices.
pub fn sample_batch<R: Rng>(
    labels: &[usize],
    batch_size: usize,
    min_per_class: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if min_per_class == 0 || batch_size < 2 * min_per_class {
        return Err(Error::Sampling(format!(
            "batch size {batch_size} cannot hold two classes of {min_per_class}"
        )));
    }
    let mut by_class: alloc::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let (eligible, short): (Vec<_>, Vec<_>) = by_class
        .into_iter()
        .partition(|(_, members)| members.len() >= min_per_class);
    if eligible.len() < 2 {
        let names: Vec<String> = short.iter().map(|(l, m)| format!("{l} ({} samples)", m.len())).collect();
        return Err(Error::Sampling(format!(
            "need two classes with at least {min_per_class} samples; {} eligible, too small: [{}]",
            eligible.len(),
            names.join(", ")
        )));
    }

    let n_classes = (batch_size / min_per_class).min(eligible.len());
    let chosen = index::sample(rng, eligible.len(), n_classes).into_vec();
    let mut pools: Vec<Vec<usize>> = chosen
        .iter()
        .map(|&c| {
            let mut members = eligible[c].1.clone();
            members.shuffle(rng);
            members
        })
        .collect();

    let mut taken = vec![min_per_class; pools.len()];
    let mut remaining = batch_size - n_classes * min_per_class;
    while remaining > 0 {
        let mut progressed = false;
        for (t, pool) in taken.iter_mut().zip(&pools) {
            if remaining == 0 {
                break;
            }
            if *t < pool.len() {
                *t += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    let mut batch = Vec::with_capacity(batch_size - remaining);
    for (pool, t) in pools.iter_mut().zip(taken) {
        pool.truncate(t);
        batch.extend_from_slice(pool);
    }
    Ok(batch)
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const MONITOR_STREAM: u64 = 0x6d6f;
const INIT_STREAM: u64 = 0x1a17;
const SAMPLER_STREAM: u64 = 0x5a3e;

/// Result of evaluating the objective on one batch.
#[derive(Debug, Clone)]
pub struct BatchEval {
    /// Quantity being maximized.
    pub objective: f64,
    /// Value written to the log (LDA objective or cross-entropy loss).
    pub reported: f64,
    pub eigenvalues: Vec<f64>,
    /// Gradients of the objective, present when requested.
    pub grads: Option<(NetGrads, DMatrix<f64>)>,
    pub trace: ForwardTrace,
}

/// Evaluates the configured objective on a batch of network inputs.
pub fn evaluate_batch(
    net: &NetParams,
    inputs: &DMatrix<f64>,
    class_idx: &[usize],
    config: &TrainConfig,
    dropout_seed: Option<u64>,
    want_grads: bool,
) -> Result<BatchEval> {
    let (hidden, trace) = match dropout_seed {
        Some(seed) => net.forward(inputs, Mode::Train, seed)?,
        None => net.forward_with(inputs, Mode::Train, 0, false)?,
    };
    if hidden.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("network output is not finite".into()));
    }
    match config.loss_kind {
        LossKind::Lda => {
            let (value, solution, mask) =
                lda_objective(&hidden, class_idx, config.lambda_reg, config.epsilon_offset)?;
            let grads = if want_grads {
                let up = lda_grad_hidden(&hidden, class_idx, &solution, &mask)?;
                Some(net.backward(&trace, &up)?)
            } else {
                None
            };
            Ok(BatchEval {
                objective: value,
                reported: value,
                eigenvalues: solution.eigenvalues.iter().copied().collect(),
                grads,
                trace,
            })
        }
        LossKind::CrossEntropy => {
            let head = net
                .head
                .as_ref()
                .ok_or_else(|| Error::State("cross-entropy objective needs a classification head".into()))?;
            let logits = head.forward(&hidden)?;
            let (loss, dlogits) = cross_entropy_loss(&logits, class_idx)?;
            let grads = if want_grads {
                // gradient of the objective −loss
                let dlogits = -dlogits;
                let (head_grad, dhidden) = head.backward(&hidden, &dlogits);
                let (mut g, dx) = net.backward(&trace, &dhidden)?;
                g.head = Some(head_grad);
                Some((g, dx))
            } else {
                None
            };
            Ok(BatchEval {
                objective: -loss,
                reported: loss,
                eigenvalues: Vec::new(),
                grads,
                trace,
            })
        }
    }
}

/// Metrics of one parameter step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub objective: f64,
    pub reported: f64,
    pub eigenvalues: Vec<f64>,
}

/// Outcome of one GMM update round.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmStep {
    /// Adopted step (`0` means no update).
    pub eta: f64,
    pub objective_before: f64,
    pub objective_after: f64,
    /// `(η, objective)` for `η = 0` followed by the grid.
    pub candidates: Vec<(f64, f64)>,
    pub gradient_norm: f64,
}

/// Picks the candidate with the largest finite objective; the first wins ties.
pub fn line_search_select(candidates: &[(f64, f64)]) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for &(eta, obj) in candidates {
        if !obj.is_finite() {
            continue;
        }
        if best.is_none_or(|(_, b)| obj > b) {
            best = Some((eta, obj));
        }
    }
    best.ok_or(Error::LineSearch)
}

/// `G + η·direction` with the variance and weight floors enforced.
pub fn step_gmm(model: &GmmModel, direction: &GmmGradient, eta: f64) -> GmmModel {
    let mut out = model.clone();
    out.log_weights_unnorm.axpy(eta, &direction.d_log_weights, 1.0);
    out.means += &direction.d_means * eta;
    out.log_vars += &direction.d_log_vars * eta;
    out.enforce_floors();
    out
}

/// Training driver over an in-memory training split.
pub struct Trainer<'a> {
    config: TrainConfig,
    images: &'a [DescriptorSet],
    class_idx: Vec<usize>,
    projected: Vec<Vec<DMatrix<f64>>>,
    fv_cache: DMatrix<f64>,
    monitor: Vec<Vec<usize>>,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    /// Fits PCA and EM per channel, initializes the network and evaluates
    /// the epoch-0 objective.
    pub fn new(config: TrainConfig, images: &'a [DescriptorSet]) -> Result<Self> {
        config.validate()?;
        let classes = class_list(images)?;

        let mut pcas = Vec::with_capacity(config.channels.len());
        let mut gmms = Vec::with_capacity(config.channels.len());
        for (ci, ch) in config.channels.iter().enumerate() {
            let pooled = pool_descriptors(images, ch, config.fit_sample_limit, mix_seed(config.seed, 1, ci as u64))?;
            let pca = pca_fit(&pooled, ch.pca_dim)?;
            let projected = pca.project(&pooled)?;
            let fit = gmm_fit_em_with(
                &projected,
                ch.components,
                &EmOptions {
                    max_iters: config.em_max_iters,
                    tol: config.em_tol,
                    seed: mix_seed(config.seed, 2, ci as u64),
                    ..EmOptions::default()
                },
            )?;
            pcas.push(pca);
            gmms.push(fit.model);
        }

        let fv_dim = gmms.iter().map(|g| 2 * g.num_components() * g.dim()).sum();
        let mut init_rng = crate::seeded_rng(config.seed, INIT_STREAM);
        let net = NetParams::init(
            &NetSpec {
                input_dim: fv_dim,
                widths: config.hidden_widths.clone(),
                dropout_rate: config.dropout_rate,
                batch_norm: config.batch_norm,
                head_classes: (config.loss_kind == LossKind::CrossEntropy).then_some(classes.len()),
            },
            &mut init_rng,
        )?;
        if config.loss_kind == LossKind::Lda && net.output_dim() < classes.len().saturating_sub(1).min(config.batch_size) {
            log::warn!(
                "output width {} is below C-1 = {}; the eigenproblem keeps only {} eigenvalues",
                net.output_dim(),
                classes.len() - 1,
                net.output_dim()
            );
        }
        let momentum = NetGrads::zeros_like(&net);
        let state = TrainState {
            channels: config.channels.clone(),
            pcas,
            gmms,
            net,
            momentum,
            epoch: 0,
            step: 0,
            rng: crate::seeded_rng(config.seed, SAMPLER_STREAM),
            classes,
            log: Vec::new(),
        };
        let mut trainer = Self::resume(config, images, state)?;
        let (loss, eig) = trainer.monitor_objective()?;
        let lr = trainer.config.learning_rate(0);
        trainer.state.log.push(EpochRecord {
            epoch: 0,
            loss,
            lr,
            eigenvalues: eig,
            eta: None,
        });
        Ok(trainer)
    }

    /// Rebuilds caches around an existing state (e.g. one loaded from a checkpoint).
    pub fn resume(config: TrainConfig, images: &'a [DescriptorSet], state: TrainState) -> Result<Self> {
        config.validate()?;
        state.check_ready()?;
        if state.channels != config.channels {
            return Err(Error::State("checkpoint channels differ from the configuration".into()));
        }
        let classes = class_list(images)?;
        if classes != state.classes {
            return Err(Error::State("training identities differ from the checkpoint".into()));
        }
        let class_idx = images
            .iter()
            .map(|im| classes.binary_search(&im.label).unwrap_or(0))
            .collect::<Vec<_>>();
        let projected = images
            .iter()
            .map(|im| state.project_channels(im))
            .collect::<Result<Vec<_>>>()?;

        let mut monitor_rng = crate::seeded_rng(config.seed, MONITOR_STREAM);
        let monitor = (0..config.gmm_sample_batches)
            .map(|_| sample_batch(&class_idx, config.batch_size, config.min_per_class, &mut monitor_rng))
            .collect::<Result<Vec<_>>>()?;

        let mut trainer = Self {
            config,
            images,
            class_idx,
            projected,
            fv_cache: DMatrix::zeros(0, 0),
            monitor,
            state,
        };
        trainer.refresh_fv_cache()?;
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    /// The fixed batches used for GMM updates and the logged objective.
    pub fn monitor_batches(&self) -> &[Vec<usize>] {
        &self.monitor
    }

    fn refresh_fv_cache(&mut self) -> Result<()> {
        self.fv_cache = encode_all(&self.state.gmms, &self.projected, self.state.fv_dim())?;
        Ok(())
    }

    fn batch_inputs(&self, batch: &[usize]) -> (DMatrix<f64>, Vec<usize>) {
        (
            self.fv_cache.select_rows(batch.iter()),
            batch.iter().map(|&i| self.class_idx[i]).collect(),
        )
    }

    /// Draws a batch from the training RNG stream.
    pub fn sample_batch(&mut self) -> Result<Vec<usize>> {
        sample_batch(
            &self.class_idx,
            self.config.batch_size,
            self.config.min_per_class,
            &mut self.state.rng,
        )
    }

    /// Mean objective over the fixed sample batches (no dropout) and the
    /// eigenvalue spectrum of the first one.
    pub fn monitor_objective(&self) -> Result<(f64, Vec<f64>)> {
        let mut total = 0.0;
        let mut spectrum = Vec::new();
        for (i, b) in self.monitor.iter().enumerate() {
            let (x, y) = self.batch_inputs(b);
            let e = evaluate_batch(&self.state.net, &x, &y, &self.config, None, false)?;
            total += e.reported;
            if i == 0 {
                spectrum = e.eigenvalues;
            }
        }
        Ok((total / self.monitor.len() as f64, spectrum))
    }

    /// One Nesterov-SGD step on the network parameters.
    pub fn train_step_theta(&mut self, batch: &[usize], lr: f64) -> Result<StepMetrics> {
        let (x, y) = self.batch_inputs(batch);
        let seed = mix_seed(self.config.seed, 3, self.state.step);
        let eval = evaluate_batch(&self.state.net, &x, &y, &self.config, Some(seed), true)?;
        let (grads, _) = eval.grads.expect("gradients requested");
        if !eval.objective.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence(format!(
                "step {}: objective {} or its gradient is not finite",
                self.state.step, eval.objective
            )));
        }

        let momentum = self.config.momentum;
        let decay = self.config.weight_decay;
        let decay_all = self.config.decay_all_params;
        self.state
            .net
            .zip_params_mut(&grads, &mut self.state.momentum, |kind, p, g, v| {
                let decayed = decay_all || kind == ParamKind::Weight;
                for i in 0..p.len() {
                    // descend on −objective
                    let mut step = -g[i];
                    if decayed {
                        step += decay * p[i];
                    }
                    v[i] = momentum * v[i] + step;
                    p[i] -= lr * (step + momentum * v[i]);
                }
            });
        self.state.net.absorb_batch_stats(&eval.trace);
        self.state.step += 1;
        Ok(StepMetrics {
            objective: eval.objective,
            reported: eval.reported,
            eigenvalues: eval.eigenvalues,
        })
    }

    /// Gradient of the mean sample-batch objective with respect to every
    /// channel's GMM, chained through the network and the Fisher encoding.
    pub fn gmm_gradient(&self) -> Result<Vec<GmmGradient>> {
        let mut acc: Vec<GmmGradient> = self
            .state
            .gmms
            .iter()
            .map(|g| GmmGradient::zeros(g.num_components(), g.dim()))
            .collect();
        let offsets = channel_offsets(&self.state.gmms);
        let scale = 1.0 / self.monitor.len() as f64;
        for b in &self.monitor {
            let (x, y) = self.batch_inputs(b);
            let e = evaluate_batch(&self.state.net, &x, &y, &self.config, None, true)?;
            let (_, d_input) = e.grads.expect("gradients requested");
            for (r, &img) in b.iter().enumerate() {
                for (c, gmm) in self.state.gmms.iter().enumerate() {
                    let (off, len) = offsets[c];
                    let upstream = d_input.row(r).columns(off, len).transpose();
                    let opts = FvGradOptions {
                        gamma_threshold: self.config.gamma_threshold,
                        subsample_fraction: self.config.subsample_fraction,
                        seed: mix_seed(self.config.seed, 4 + self.state.epoch as u64, (img * 131 + c) as u64),
                    };
                    let g = fv_grad_gmm(gmm, &self.projected[img][c], &upstream, &opts)?;
                    acc[c].add_scaled(&g, scale);
                }
            }
        }
        Ok(acc)
    }

    fn candidate_objective(&self, gmms: &[GmmModel]) -> Result<f64> {
        let mut total = 0.0;
        for b in &self.monitor {
            let mut x = DMatrix::zeros(b.len(), self.state.fv_dim());
            for (r, &img) in b.iter().enumerate() {
                let fv = fv_encode_image(gmms, &self.projected[img])?;
                x.set_row(r, &fv.values.transpose());
            }
            let y: Vec<usize> = b.iter().map(|&i| self.class_idx[i]).collect();
            total += evaluate_batch(&self.state.net, &x, &y, &self.config, None, false)?.objective;
        }
        Ok(total / self.monitor.len() as f64)
    }

    /// One GMM update round: gradient, line search over `{0} ∪ grid`,
    /// adoption of the best candidate and re-encoding of cached vectors.
    pub fn train_step_gmm(&mut self) -> Result<GmmStep> {
        let direction = self.gmm_gradient()?;
        let gradient_norm = libm::sqrt(direction.iter().map(GmmGradient::norm_squared).sum());
        if !gradient_norm.is_finite() {
            return Err(Error::Divergence("GMM gradient is not finite".into()));
        }
        let mut candidates = Vec::with_capacity(self.config.line_search_grid.len() + 1);
        for eta in core::iter::once(0.0).chain(self.config.line_search_grid.iter().copied()) {
            let gmms: Vec<GmmModel> = self
                .state
                .gmms
                .iter()
                .zip(&direction)
                .map(|(g, d)| step_gmm(g, d, eta))
                .collect();
            let obj = self.candidate_objective(&gmms).unwrap_or(f64::NAN);
            candidates.push((eta, obj));
        }
        let (eta, objective_after) = line_search_select(&candidates)?;
        let objective_before = candidates[0].1;
        if eta != 0.0 {
            self.state.gmms = self
                .state
                .gmms
                .iter()
                .zip(&direction)
                .map(|(g, d)| step_gmm(g, d, eta))
                .collect();
            self.refresh_fv_cache()?;
        }
        Ok(GmmStep {
            eta,
            objective_before,
            objective_after,
            candidates,
            gradient_norm,
        })
    }

    /// Runs one epoch of parameter steps, then a GMM round when due, and
    /// appends the epoch record to the log.
    pub fn run_epoch(&mut self) -> Result<(EpochRecord, Option<GmmStep>)> {
        let lr = self.config.learning_rate(self.state.epoch);
        let batches = self
            .config
            .batches_per_epoch
            .unwrap_or((self.images.len() / self.config.batch_size).max(1));
        for _ in 0..batches {
            let batch = self.sample_batch()?;
            self.train_step_theta(&batch, lr)?;
        }
        self.state.epoch += 1;

        let period = self.config.gmm_update_period_epochs;
        let gmm_step = if period > 0 && self.state.epoch.is_multiple_of(period) {
            Some(self.train_step_gmm()?)
        } else {
            None
        };
        let (loss, eigenvalues) = self.monitor_objective()?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("epoch {}: objective is not finite", self.state.epoch)));
        }
        let record = EpochRecord {
            epoch: self.state.epoch,
            loss,
            lr,
            eigenvalues,
            eta: gmm_step.as_ref().map(|s| s.eta),
        };
        self.state.log.push(record.clone());
        Ok((record, gmm_step))
    }

    fn plateaued(&self) -> bool {
        let log = &self.state.log;
        log.len() > 10 && libm::fabs(log[log.len() - 1].loss - log[log.len() - 11].loss) < 1e-5
    }

    /// Trains until `config.epochs` epochs are complete (or an early stop).
    pub fn run(&mut self) -> Result<Vec<GmmStep>> {
        let mut steps = Vec::new();
        while self.state.epoch < self.config.epochs {
            let (_, step) = self.run_epoch()?;
            steps.extend(step);
            if self.config.early_stop && self.plateaued() {
                log::info!("early stop after epoch {}", self.state.epoch);
                break;
            }
        }
        Ok(steps)
    }
}

/// Fits the whole pipeline on the training images.
pub fn fit(config: TrainConfig, images: &[DescriptorSet]) -> Result<TrainState> {
    let mut trainer = Trainer::new(config, images)?;
    trainer.run()?;
    Ok(trainer.into_state())
}

fn class_list(images: &[DescriptorSet]) -> Result<Vec<usize>> {
    let classes: BTreeSet<usize> = images.iter().map(|i| i.label).collect();
    if classes.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "training needs at least 2 identities, got {}",
            classes.len()
        )));
    }
    Ok(classes.into_iter().collect())
}

fn channel_offsets(gmms: &[GmmModel]) -> Vec<(usize, usize)> {
    let mut off = 0;
    gmms.iter()
        .map(|g| {
            let len = 2 * g.num_components() * g.dim();
            let r = (off, len);
            off += len;
            r
        })
        .collect()
}

fn encode_all(gmms: &[GmmModel], projected: &[Vec<DMatrix<f64>>], dim: usize) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(projected.len(), dim);
    for (i, channels) in projected.iter().enumerate() {
        let fv = fv_encode_image(gmms, channels)?;
        out.set_row(i, &fv.values.transpose());
    }
    Ok(out)
}

/// Stacks (a seeded subsample of) every image's descriptors for one channel.
fn pool_descriptors(
    images: &[DescriptorSet],
    channel: &ChannelSpec,
    limit: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let (start, end) = channel.columns;
    let total: usize = images.iter().map(|i| i.descriptors.nrows()).sum();
    let width = end.saturating_sub(start);
    let mut all = DMatrix::zeros(total, width);
    let mut r = 0;
    for im in images {
        let cols = im.columns(start, end)?;
        all.rows_mut(r, cols.nrows()).copy_from(&cols);
        r += cols.nrows();
    }
    if total <= limit {
        return Ok(all);
    }
    let mut rng = crate::seeded_rng(seed, 0x9001);
    let mut idx = index::sample(&mut rng, total, limit).into_vec();
    idx.sort_unstable();
    Ok(all.select_rows(idx.iter()))
}
