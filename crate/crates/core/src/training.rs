//! Optimization of anomaly models under the three phase regimes.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment, AugmentConfig, WindowSet};
use crate::detect::{reconstruct, InferenceConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{AnomalyModel, Context, PhaseType, Reconstructions};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    /// Wall-clock budget, checked before every batch.
    pub max_train_seconds: Option<f64>,
    /// Tail fraction of the training windows held out for early stopping.
    pub val_fraction: f64,
    /// Epochs without improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Training windows drawn per epoch; all when unset.
    pub max_train_windows: Option<usize>,
    /// Iterative pathway: passes per batch and the loss change that ends them.
    pub max_iters: usize,
    pub convergence_eps: f64,
    /// Weight of the squared loss-change terms in the iterative objective.
    pub self_adv_weight: f64,
    /// Per-epoch decay of the reconstruction weight in the 2phase objective.
    pub adversarial_decay: f64,
    pub clip_norm: f64,
    /// Training stops once the reconstruction loss exceeds this multiple of
    /// its first value.
    pub divergence_factor: f64,
    pub warp_strength: f64,
    pub mask_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            seed: 0,
            max_train_seconds: None,
            val_fraction: 0.0,
            early_stop_patience: 3,
            max_train_windows: None,
            max_iters: 5,
            convergence_eps: 1e-5,
            self_adv_weight: 0.0,
            adversarial_decay: 0.95,
            clip_norm: 5.0,
            divergence_factor: 1e3,
            warp_strength: 0.2,
            mask_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Contract("epochs must be at least 1".into()));
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return Err(Error::Contract(format!("val_fraction {} outside [0, 0.5)", self.val_fraction)));
        }
        if self.max_iters == 0 || !(self.convergence_eps > 0.0) {
            return Err(Error::Contract("iterative refinement needs max_iters >= 1 and eps > 0".into()));
        }
        if !(self.clip_norm > 0.0) || !(self.divergence_factor > 1.0) {
            return Err(Error::Contract("clip_norm must be positive and divergence_factor above 1".into()));
        }
        if matches!(self.max_train_seconds, Some(s) if !(s > 0.0)) {
            return Err(Error::Contract("max_train_seconds must be positive".into()));
        }
        Ok(())
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            max_iters: self.max_iters,
            convergence_eps: self.convergence_eps,
            ..InferenceConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean optimized objective of the last epoch.
    pub final_train_loss: f64,
    /// Mean optimized objective per epoch.
    pub loss_curve: Vec<f64>,
    /// Mean reconstruction loss per epoch (the adversarial terms excluded).
    pub reconstruction_curve: Vec<f64>,
    /// Held-out reconstruction loss per epoch, when a validation split exists.
    pub validation_curve: Vec<f64>,
    pub epochs_run: usize,
    pub batches_run: usize,
    pub wall_clock_seconds: f64,
    pub stopped_early: bool,
    pub stop_reason: Option<String>,
    pub diverged: bool,
    /// Iterative pathway: batches whose refinement hit `max_iters`.
    pub nonconverged_batches: usize,
    pub parameter_count: usize,
}

impl TrainReport {
    /// `epoch,train_loss,reconstruction_loss,validation_loss`.
    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("# schema_version: 1\nepoch,train_loss,reconstruction_loss,validation_loss\n");
        for (i, l) in self.loss_curve.iter().enumerate() {
            let val = self.validation_curve.get(i).map_or(String::new(), |v| v.to_string());
            out.push_str(&format!("{i},{l},{},{val}\n", self.reconstruction_curve[i]));
        }
        out
    }
}

/// Stops a refinement loop once consecutive losses differ by less than
/// `eps`, or after `max_iters` losses.
#[derive(Debug, Clone)]
pub struct ConvergenceMonitor {
    eps: f64,
    max_iters: usize,
    losses: Vec<f64>,
    converged: bool,
}

impl ConvergenceMonitor {
    pub fn new(eps: f64, max_iters: usize) -> Result<Self> {
        if !(eps > 0.0) || max_iters == 0 {
            return Err(Error::Contract(format!("convergence needs eps > 0 and max_iters >= 1, got {eps}, {max_iters}")));
        }
        Ok(ConvergenceMonitor {
            eps,
            max_iters,
            losses: Vec::new(),
            converged: false,
        })
    }

    /// Records one iteration's loss; true when the loop should stop.
    pub fn record(&mut self, loss: f64) -> bool {
        if let Some(&prev) = self.losses.last() {
            if (loss - prev).abs() < self.eps {
                self.converged = true;
            }
        }
        self.losses.push(loss);
        self.converged || self.losses.len() >= self.max_iters
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    /// Index and value of the lowest recorded loss (first on ties).
    pub fn best(&self) -> Option<(usize, f64)> {
        self.losses
            .iter()
            .copied()
            .enumerate()
            .fold(None, |acc, (i, l)| match acc {
                Some((_, b)) if b <= l => acc,
                _ => Some((i, l)),
            })
    }
}

/// The optimized scalar of one batch and its diagnostics.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: Var,
    /// Reconstruction-side loss: plain MSE for 1phase, focus plus first
    /// adversarial reconstruction for 2phase, best iteration for iterative.
    pub reconstruction: f64,
    /// Iterative pathway: per-iteration losses and whether they converged.
    pub iterations: Option<(Vec<f64>, bool)>,
}

/// Reconstruction weight of the 2phase objective at `epoch`.
pub fn adversarial_weight(epoch: usize, decay: f64) -> f64 {
    decay.powi(epoch as i32)
}

/// Builds the phase-specific objective for input `x` and clean target `w`.
///
/// - 1phase: `MSE(O, W)` of the final reconstruction.
/// - 2phase: `a * MSE(O_initial, W) + (1 - a) * (MSE(O_adv1, W) - MSE(O_adv2, W))`
///   with `a = decay^epoch`.
/// - iterative: passes conditioned on the previous deviation until the loss
///   settles; the lowest loss plus `self_adv_weight` times the summed squared
///   loss changes.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    model: &AnomalyModel,
    g: &mut Graph,
    p: &[Var],
    x: Var,
    w: Var,
    epoch: usize,
    cfg: &TrainConfig,
    ctx: &mut Context<'_>,
) -> Result<Objective> {
    if model.genome().phase_type == PhaseType::Iterative {
        return iterate(model, g, p, x, w, cfg, ctx);
    }
    match model.forward(g, p, x, None, ctx)? {
        Reconstructions::Single(o) | Reconstructions::SelfConditioned { output: o, .. } => {
            let loss = g.mse(o, w)?;
            Ok(Objective {
                loss,
                reconstruction: g.value(loss).item(),
                iterations: None,
            })
        }
        Reconstructions::TwoPhase { initial, adv1, adv2 } => {
            let a = adversarial_weight(epoch, cfg.adversarial_decay);
            let focus = g.mse(initial, w)?;
            let l1 = g.mse(adv1, w)?;
            let l2 = g.mse(adv2, w)?;
            let adv = g.sub(l1, l2)?;
            let lf = g.scale(focus, a);
            let la = g.scale(adv, 1.0 - a);
            let loss = g.add(lf, la)?;
            Ok(Objective {
                loss,
                reconstruction: g.value(focus).item() + g.value(l1).item(),
                iterations: None,
            })
        }
    }
}

/// Iterative refinement of one batch inside `g`. Each pass is conditioned on
/// the previous pass's squared deviation from the input (zeros first).
pub fn iterate(
    model: &AnomalyModel,
    g: &mut Graph,
    p: &[Var],
    x: Var,
    w: Var,
    cfg: &TrainConfig,
    ctx: &mut Context<'_>,
) -> Result<Objective> {
    let mut monitor = ConvergenceMonitor::new(cfg.convergence_eps, cfg.max_iters)?;
    let mut losses: Vec<Var> = Vec::new();
    let mut cond = None;
    loop {
        let o = model.forward(g, p, x, cond, ctx)?.score_pair().0;
        let l = g.mse(o, w)?;
        losses.push(l);
        if monitor.record(g.value(l).item()) {
            break;
        }
        cond = Some(AnomalyModel::focus(g, o, x)?);
    }
    let (best, best_value) = monitor.best().expect("at least one iteration");
    let mut loss = losses[best];
    if cfg.self_adv_weight != 0.0 {
        for pair in losses.windows(2) {
            let d = g.sub(pair[0], pair[1])?;
            let sq = g.square(d);
            let term = g.scale(sq, cfg.self_adv_weight);
            loss = g.add(loss, term)?;
        }
    }
    Ok(Objective {
        loss,
        reconstruction: best_value,
        iterations: Some((monitor.losses().to_vec(), monitor.converged())),
    })
}

/// Adaptive-moment optimizer.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.learning_rate * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

fn require_phase(model: &AnomalyModel, phase: PhaseType) -> Result<()> {
    if model.genome().phase_type != phase {
        return Err(Error::Contract(format!(
            "model has phase type {}, this trainer needs {phase}",
            model.genome().phase_type
        )));
    }
    Ok(())
}

pub fn train_1phase(model: &mut AnomalyModel, windows: &WindowSet, cfg: &TrainConfig) -> Result<TrainReport> {
    require_phase(model, PhaseType::OnePhase)?;
    train(model, windows, cfg)
}

pub fn train_2phase(model: &mut AnomalyModel, windows: &WindowSet, cfg: &TrainConfig) -> Result<TrainReport> {
    require_phase(model, PhaseType::TwoPhase)?;
    train(model, windows, cfg)
}

pub fn train_iterative(model: &mut AnomalyModel, windows: &WindowSet, cfg: &TrainConfig) -> Result<TrainReport> {
    require_phase(model, PhaseType::Iterative)?;
    train(model, windows, cfg)
}

/// Mean reconstruction error of the score pair over `indices`, in
/// evaluation mode.
pub fn evaluation_loss(model: &AnomalyModel, windows: &WindowSet, indices: &[usize], cfg: &InferenceConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in indices.chunks(cfg.batch_windows.max(1)) {
        let x = windows.stack(chunk);
        let (r1, r2) = reconstruct(model, &x, cfg)?;
        for ((a, b), w) in r1.data().iter().zip(r2.data()).zip(x.data()) {
            total += 0.5 * (a - w) * (a - w) + 0.5 * (b - w) * (b - w);
        }
        count += x.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Trains `model` on `windows` with the regime of its phase type.
pub fn train(model: &mut AnomalyModel, windows: &WindowSet, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if windows.feature_count() != model.feature_count() || windows.window_size() != model.window_size() {
        return Err(Error::dim(
            "train",
            &[windows.window_size(), windows.feature_count()],
            &[model.window_size(), model.feature_count()],
        ));
    }
    let start = Instant::now();
    let genome = model.genome().clone();
    let k = genome.window_size;
    let n = windows.len();
    let n_val = (cfg.val_fraction * n as f64).floor() as usize;
    let n_train = n - n_val;
    if n_train == 0 {
        return Err(Error::Contract("no training windows left after the validation split".into()));
    }
    let val: Vec<usize> = (n_train..n).collect();
    let aug = AugmentConfig {
        noise_std: genome.gaussian_noise,
        time_warping: genome.time_warping,
        time_masking: genome.time_masking,
        warp_strength: cfg.warp_strength,
        mask_fraction: cfg.mask_fraction,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(genome.learning_rate, model.parameters());
    let mut report = TrainReport {
        final_train_loss: f64::NAN,
        loss_curve: Vec::new(),
        reconstruction_curve: Vec::new(),
        validation_curve: Vec::new(),
        epochs_run: 0,
        batches_run: 0,
        wall_clock_seconds: 0.0,
        stopped_early: false,
        stop_reason: None,
        diverged: false,
        nonconverged_batches: 0,
        parameter_count: model.parameter_count(),
    };
    let mut initial_recon: Option<f64> = None;
    let mut best_monitor = f64::INFINITY;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..n_train).collect();

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let take = cfg.max_train_windows.map_or(n_train, |c| c.clamp(1, n_train));
        let mut obj_sum = 0.0;
        let mut rec_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order[..take].chunks(genome.batch_size).enumerate() {
            if let Some(budget) = cfg.max_train_seconds {
                if start.elapsed().as_secs_f64() > budget {
                    report.stopped_early = true;
                    report.stop_reason = Some("time budget".into());
                    break 'epochs;
                }
            }
            let target = windows.stack(chunk);
            let input = augment(&target, k, &aug, &mut rng);
            let mut g = Graph::new();
            let p = model.bind(&mut g, true);
            let x = g.constant(input);
            let w = g.constant(target);
            let mut ctx = Context::train(&mut rng);
            let obj = objective(model, &mut g, &p, x, w, epoch, cfg, &mut ctx)?;
            let value = g.value(obj.loss).item();
            if !value.is_finite() || !obj.reconstruction.is_finite() {
                return Err(Error::NonFinite {
                    loss: value,
                    epoch,
                    batch: b,
                    learning_rate: genome.learning_rate,
                });
            }
            if let Some((_, false)) = obj.iterations {
                report.nonconverged_batches += 1;
            }
            let first = *initial_recon.get_or_insert(obj.reconstruction);
            g.backward(obj.loss)?;
            let mut grads: Vec<Tensor> = p
                .iter()
                .zip(model.parameters())
                .map(|(v, t)| g.take_grad(*v).unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
                .collect();
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.step(model.parameters_mut(), &grads);
            model.absorb_statistics(ctx);
            obj_sum += value;
            rec_sum += obj.reconstruction;
            batches += 1;
            report.batches_run += 1;
            if first > 0.0 && obj.reconstruction > cfg.divergence_factor * first {
                report.diverged = true;
                report.stopped_early = true;
                report.stop_reason = Some(format!(
                    "diverged: reconstruction loss {} exceeds {}x its initial {first}",
                    obj.reconstruction, cfg.divergence_factor
                ));
            }
            if report.diverged {
                break;
            }
        }
        if batches > 0 {
            report.loss_curve.push(obj_sum / batches as f64);
            report.reconstruction_curve.push(rec_sum / batches as f64);
            report.epochs_run = epoch + 1;
        }
        if report.diverged {
            break;
        }
        let monitored = if val.is_empty() {
            rec_sum / batches.max(1) as f64
        } else {
            let v = evaluation_loss(model, windows, &val, &cfg.inference())?;
            report.validation_curve.push(v);
            v
        };
        if monitored < best_monitor {
            best_monitor = monitored;
            stale = 0;
        } else {
            stale += 1;
            if cfg.early_stop_patience > 0 && stale >= cfg.early_stop_patience && epoch + 1 < cfg.epochs {
                report.stopped_early = true;
                report.stop_reason = Some(format!("no improvement for {stale} epochs"));
                break;
            }
        }
    }
    report.final_train_loss = report.loss_curve.last().copied().unwrap_or(f64::NAN);
    report.wall_clock_seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    Ok(report)
}
