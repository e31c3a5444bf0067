//! A federated client: local alternating minimization over its private head
//! and a local copy of the shared network, reporting averaged shared-network
//! gradients and its inverse training rate.

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    backward_with_input, forward, restricted_norm, Gradient, MlpSpec, ParamVector,
};
use crate::taskgen::{loss_and_grad, LocalDataset, TaskSpec};

/// Lower bound applied to losses used as divisors or numerators of training
/// rates, so the inverse training rate stays finite and positive.
pub const LOSS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadOptimizer {
    GradientDescent,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl HeadOptimizer {
    pub fn adam() -> Self {
        HeadOptimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-round local training settings shared by every client.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalConfig {
    pub tau_h: usize,
    pub tau_w: usize,
    /// Step size for the local shared-network steps.
    pub beta: f64,
    /// Step size for the head steps.
    pub head_lr: f64,
    pub head_optimizer: HeadOptimizer,
    /// `None` means full-batch gradients.
    pub batch_size: Option<usize>,
}

impl LocalConfig {
    pub fn new(tau_h: usize, tau_w: usize, beta: f64) -> Self {
        Self {
            tau_h,
            tau_w,
            beta,
            head_lr: beta,
            head_optimizer: HeadOptimizer::GradientDescent,
            batch_size: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_h == 0 || self.tau_w == 0 {
            return Err(Error::invalid("tau_h and tau_w must be at least 1"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.head_lr > 0.0 && self.head_lr.is_finite()) {
            return Err(Error::invalid(format!(
                "head step must be positive, got {}",
                self.head_lr
            )));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// What a client sends to the server after a local round.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub client_id: usize,
    /// Mean of the `tau_w` local shared-network gradients.
    pub avg_grad: Gradient,
    /// ℓ2 norm of `avg_grad` over the tail block.
    pub tail_norm: f64,
    /// `raw_loss / F_0`, with `raw_loss` floored at [`LOSS_FLOOR`].
    pub inverse_rate: f64,
    /// Mean local loss over the `tau_w` shared-network steps.
    pub raw_loss: f64,
    /// Set when `raw_loss` fell below [`LOSS_FLOOR`] and was floored.
    pub loss_floored: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub task: TaskSpec,
    pub data: LocalDataset,
    pub head_spec: MlpSpec,
    head: ParamVector,
    initial_loss: Option<f64>,
    rng_seed: u64,
    rounds_done: usize,
    adam: Option<AdamState>,
}

struct Evaluation {
    head_grad: Gradient,
    shared_grad: Gradient,
}

impl ClientState {
    pub fn new(
        id: usize,
        task: TaskSpec,
        data: LocalDataset,
        head_spec: MlpSpec,
        head: ParamVector,
        rng_seed: u64,
    ) -> Result<Self> {
        task.validate()?;
        data.check_kind(task.kind)?;
        if head_spec.output_width() != task.kind.label_width() {
            return Err(Error::Shape(format!(
                "client {id}: head emits {} values, task expects {}",
                head_spec.output_width(),
                task.kind.label_width()
            )));
        }
        if head.layout().num_layers() != head_spec.num_layers()
            || head.len() != head_spec.param_count()
        {
            return Err(Error::LayoutMismatch(format!(
                "client {id}: head parameters do not match the head network"
            )));
        }
        Ok(Self {
            id,
            task,
            data,
            head_spec,
            head,
            initial_loss: None,
            rng_seed,
            rounds_done: 0,
            adam: None,
        })
    }

    pub fn head(&self) -> &ParamVector {
        &self.head
    }

    /// Replaces the head parameters; the layout must match the current head.
    pub fn set_head(&mut self, head: ParamVector) -> Result<()> {
        if head.layout().segments() != self.head.layout().segments() {
            return Err(Error::LayoutMismatch(format!(
                "client {}: replacement head",
                self.id
            )));
        }
        self.head = head;
        Ok(())
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.initial_loss
    }

    pub fn rounds_done(&self) -> usize {
        self.rounds_done
    }

    /// Full-batch loss of `head ∘ shared` on the local data.
    pub fn full_loss(&self, shared_spec: &MlpSpec, shared: &ParamVector) -> Result<f64> {
        let repr = forward(shared_spec, shared, self.data.inputs())?;
        let pred = forward(&self.head_spec, &self.head, &repr)?;
        let (l, _) = loss_and_grad(self.task.kind, &pred, self.data.labels())?;
        Ok(l)
    }

    /// Records `F_0` at the initial model. Losses below [`LOSS_FLOOR`] are
    /// clamped up to it.
    pub fn set_initial_loss(&mut self, shared_spec: &MlpSpec, shared: &ParamVector) -> Result<f64> {
        if self.initial_loss.is_some() {
            return Err(Error::InitialLossAlreadySet(self.id));
        }
        let l = self.full_loss(shared_spec, shared)?;
        if !l.is_finite() {
            return Err(Error::non_finite(format!(
                "client {}: initial loss {l}",
                self.id
            )));
        }
        let l = if l < LOSS_FLOOR {
            warn!(
                "client {}: initial loss {l:e} is below {LOSS_FLOOR:e}; clamping",
                self.id
            );
            LOSS_FLOOR
        } else {
            l
        };
        self.initial_loss = Some(l);
        Ok(l)
    }

    fn evaluate(
        &self,
        shared_spec: &MlpSpec,
        shared: &ParamVector,
        head: &ParamVector,
        data: &LocalDataset,
    ) -> Result<Evaluation> {
        let repr = forward(shared_spec, shared, data.inputs())?;
        let pred = forward(&self.head_spec, head, &repr)?;
        let (loss, dpred) = loss_and_grad(self.task.kind, &pred, data.labels())?;
        if !loss.is_finite() {
            return Err(Error::non_finite(format!(
                "client {}: loss {loss}",
                self.id
            )));
        }
        let (head_grad, drepr) = backward_with_input(&self.head_spec, head, &repr, &dpred)?;
        let (shared_grad, _) = backward_with_input(shared_spec, shared, data.inputs(), &drepr)?;
        Ok(Evaluation {
            head_grad,
            shared_grad,
        })
    }

    fn head_step(&mut self, grad: &Gradient, cfg: &LocalConfig) -> Result<()> {
        match cfg.head_optimizer {
            HeadOptimizer::GradientDescent => self.head.descend(grad, cfg.head_lr),
            HeadOptimizer::Adam { beta1, beta2, eps } => {
                let n = self.head.len();
                let state = self.adam.get_or_insert_with(|| AdamState {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: 0,
                });
                state.t += 1;
                let c1 = 1.0 - beta1.powi(state.t);
                let c2 = 1.0 - beta2.powi(state.t);
                for (i, (&g, w)) in grad.values().iter().zip(self.head.values_mut()).enumerate() {
                    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
                    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = state.m[i] / c1;
                    let v_hat = state.v[i] / c2;
                    *w -= cfg.head_lr * m_hat / (v_hat.sqrt() + eps);
                }
                Ok(())
            }
        }
    }

    /// Runs one round of local training against the broadcast `shared`.
    ///
    /// The head takes `tau_h` steps with the shared network frozen at
    /// `shared`; then a local copy of the shared network takes `tau_w` steps
    /// with the head frozen. Only the report leaves the client: the local
    /// copy is dropped.
    pub fn local_round(
        &mut self,
        shared: &ParamVector,
        shared_spec: &MlpSpec,
        cfg: &LocalConfig,
    ) -> Result<GradReport> {
        cfg.validate()?;
        if self.initial_loss.is_none() {
            if self.rounds_done > 0 {
                return Err(Error::InitialLossUnset(self.id));
            }
            self.set_initial_loss(shared_spec, shared)?;
        }
        let initial_loss = self.initial_loss.expect("set above");

        let plan = self.batch_plan(cfg);
        for step in 0..cfg.tau_h {
            let batch = plan.as_ref().map(|p| self.data.select(&p[step]));
            let data = batch.as_ref().unwrap_or(&self.data);
            let eval = self.evaluate(shared_spec, shared, &self.head, data)?;
            self.head_step(&eval.head_grad, cfg)?;
        }

        // Alternating phase: local shared copy moves, head stays fixed.
        let mut local = shared.clone();
        let mut grad_sum = Gradient::zeros(shared.layout().clone());
        let mut loss_sum = 0.0;
        for step in cfg.tau_h..cfg.tau_h + cfg.tau_w {
            let batch = plan.as_ref().map(|p| self.data.select(&p[step]));
            let data = batch.as_ref().unwrap_or(&self.data);
            let eval = self.evaluate(shared_spec, &local, &self.head, data)?;
            grad_sum.add_scaled(&eval.shared_grad, 1.0)?;
            local.descend(&eval.shared_grad, cfg.beta)?;
            // Loss after the step, as accumulated per local update.
            let after = self.evaluate_loss(shared_spec, &local, data)?;
            loss_sum += after;
        }
        drop(local);

        let tau_w = cfg.tau_w as f64;
        let mut avg_grad = grad_sum;
        if cfg.tau_w > 1 {
            avg_grad.scale(1.0 / tau_w);
        }
        if !avg_grad.is_finite() {
            return Err(Error::non_finite(format!(
                "client {}: shared gradient",
                self.id
            )));
        }
        let raw_loss = loss_sum / tau_w;
        let loss_floored = raw_loss < LOSS_FLOOR;
        let tail_norm = restricted_norm(&avg_grad, shared.layout().tail())?;
        self.rounds_done += 1;
        Ok(GradReport {
            client_id: self.id,
            avg_grad,
            tail_norm,
            inverse_rate: raw_loss.max(LOSS_FLOOR) / initial_loss,
            raw_loss,
            loss_floored,
        })
    }

    fn evaluate_loss(
        &self,
        shared_spec: &MlpSpec,
        shared: &ParamVector,
        data: &LocalDataset,
    ) -> Result<f64> {
        let repr = forward(shared_spec, shared, data.inputs())?;
        let pred = forward(&self.head_spec, &self.head, &repr)?;
        let (l, _) = loss_and_grad(self.task.kind, &pred, data.labels())?;
        if !l.is_finite() {
            return Err(Error::non_finite(format!("client {}: loss {l}", self.id)));
        }
        Ok(l)
    }

    /// Sample indices for every local step of this round, drawn from a
    /// stream reseeded by `(rng_seed, round)`. `None` means full batch.
    fn batch_plan(&self, cfg: &LocalConfig) -> Option<Vec<Vec<usize>>> {
        let size = cfg.batch_size?;
        let n = self.data.len();
        if size >= n {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(self.rounds_done as u64);
        let plan = (0..cfg.tau_h + cfg.tau_w)
            .map(|_| {
                let mut idx = sample(&mut rng, n, size).into_vec();
                idx.sort_unstable();
                idx
            })
            .collect();
        Some(plan)
    }
}
