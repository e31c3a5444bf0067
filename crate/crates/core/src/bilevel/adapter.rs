//! The federated round loop viewed as a bilevel problem.
//!
//! Upper variable: every client head followed by the shared parameters.
//! Lower variable: the loss weights. The upper objective is the weighted mean
//! of the client losses and the lower objective is the gradient-balancing
//! loss with its targets frozen at the start of each outer iteration.
//!
//! Evaluating either objective at an upper iterate means running the clients'
//! local rounds from it, which `begin_outer` does once per outer iteration.
//! The outer step is the federated one: heads come back from local training
//! and the shared parameters take the aggregated step, so an ITD run with one
//! inner step per outer iteration replays the server's weight dynamics.

use std::sync::Arc;

use crate::client::{ClientState, GradReport, HeadOptimizer, LocalConfig};
use crate::error::{Error, Result};
use crate::numerics::{Layout, MlpSpec, ParamVector};
use crate::server::{
    aggregate_and_step, compute_targets, update_weights, GradNormTargets, LossWeights, ServerConfig,
};

use super::BilevelObjective;

struct RoundCache {
    x_u: Vec<f64>,
    reports: Vec<GradReport>,
    heads: Vec<ParamVector>,
    targets: GradNormTargets,
}

pub struct FedGradNormBilevel {
    clients: Vec<ClientState>,
    shared_spec: MlpSpec,
    shared_layout: Arc<Layout>,
    initial_shared: ParamVector,
    local: LocalConfig,
    server: ServerConfig,
    cache: Option<RoundCache>,
}

impl FedGradNormBilevel {
    /// Wraps a configured simulation. Clients without an initial loss get it
    /// measured at `shared`. Local training must be deterministic in the upper
    /// iterate: full batch with plain gradient-descent heads.
    pub fn new(
        mut clients: Vec<ClientState>,
        shared_spec: MlpSpec,
        shared: ParamVector,
        local: LocalConfig,
        server: ServerConfig,
    ) -> Result<Self> {
        local.validate()?;
        server.validate()?;
        if clients.len() < 2 {
            return Err(Error::invalid(
                "the bilevel view needs at least two clients",
            ));
        }
        if local.batch_size.is_some() || local.head_optimizer != HeadOptimizer::GradientDescent {
            return Err(Error::invalid(
                "the bilevel view needs full-batch gradient-descent local training",
            ));
        }
        for (i, c) in clients.iter_mut().enumerate() {
            if c.id != i {
                return Err(Error::invalid(format!(
                    "client at position {i} has id {}",
                    c.id
                )));
            }
            if c.initial_loss().is_none() {
                c.set_initial_loss(&shared_spec, &shared)?;
            }
        }
        Ok(Self {
            clients,
            shared_spec,
            shared_layout: shared.layout().clone(),
            initial_shared: shared,
            local,
            server,
            cache: None,
        })
    }

    /// Heads followed by shared parameters, at construction time.
    pub fn initial_upper(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.upper_dim());
        for c in &self.clients {
            x.extend_from_slice(c.head().values());
        }
        x.extend_from_slice(self.initial_shared.values());
        x
    }

    pub fn initial_lower(&self) -> Vec<f64> {
        vec![1.0; self.clients.len()]
    }

    /// Splits an upper iterate into per-client heads and shared parameters.
    fn unpack(&self, x_u: &[f64]) -> Result<(Vec<ParamVector>, ParamVector)> {
        if x_u.len() != self.upper_dim() {
            return Err(Error::invalid(format!(
                "upper iterate has {} entries, expected {}",
                x_u.len(),
                self.upper_dim()
            )));
        }
        let mut offset = 0;
        let mut heads = Vec::with_capacity(self.clients.len());
        for c in &self.clients {
            let n = c.head().len();
            heads.push(ParamVector::new(
                x_u[offset..offset + n].to_vec(),
                c.head().layout().clone(),
            )?);
            offset += n;
        }
        let shared = ParamVector::new(x_u[offset..].to_vec(), self.shared_layout.clone())?;
        Ok((heads, shared))
    }

    fn cached(&self, x_u: &[f64]) -> Result<&RoundCache> {
        match &self.cache {
            Some(c) if c.x_u == x_u => Ok(c),
            Some(_) => Err(Error::invalid(
                "upper iterate differs from the one this round was run at",
            )),
            None => Err(Error::invalid("no round has been run yet")),
        }
    }

    fn weights(&self, x_l: &[f64]) -> Result<LossWeights> {
        if x_l.len() != self.clients.len() {
            return Err(Error::invalid(format!(
                "lower iterate has {} entries, expected {}",
                x_l.len(),
                self.clients.len()
            )));
        }
        LossWeights::new(x_l.to_vec())
    }
}

impl BilevelObjective for FedGradNormBilevel {
    fn upper_dim(&self) -> usize {
        self.clients.iter().map(|c| c.head().len()).sum::<usize>() + self.shared_layout.len()
    }

    fn lower_dim(&self) -> usize {
        self.clients.len()
    }

    fn begin_outer(&mut self, _k: usize, x_u: &[f64], x_l: &[f64]) -> Result<()> {
        let anchor = self.weights(x_l)?;
        let (heads, shared) = self.unpack(x_u)?;
        let mut reports = Vec::with_capacity(heads.len());
        let mut new_heads = Vec::with_capacity(heads.len());
        for (client, head) in self.clients.iter().zip(heads) {
            let mut c = client.clone();
            c.set_head(head)?;
            reports.push(c.local_round(&shared, &self.shared_spec, &self.local)?);
            new_heads.push(c.head().clone());
        }
        let targets = compute_targets(&reports, &anchor, self.server.gamma)?;
        self.cache = Some(RoundCache {
            x_u: x_u.to_vec(),
            reports,
            heads: new_heads,
            targets,
        });
        Ok(())
    }

    fn upper_value(&self, x_u: &[f64], x_l: &[f64]) -> Result<f64> {
        let cache = self.cached(x_u)?;
        if x_l.len() != cache.reports.len() {
            return Err(Error::invalid("lower iterate length"));
        }
        let sum: f64 = cache
            .reports
            .iter()
            .zip(x_l)
            .map(|(r, p)| p * r.raw_loss)
            .sum();
        Ok(sum / x_l.len() as f64)
    }

    fn lower_value(&self, x_u: &[f64], x_l: &[f64]) -> Result<f64> {
        let cache = self.cached(x_u)?;
        self.server
            .fgrad_norm
            .value_at(&cache.reports, x_l, &cache.targets)
    }

    fn lower_grad(&self, x_u: &[f64], x_l: &[f64]) -> Result<Vec<f64>> {
        let cache = self.cached(x_u)?;
        self.server
            .fgrad_norm
            .gradient_at(&cache.reports, x_l, &cache.targets)
    }

    /// Shared block: the weighted mean of the clients' averaged gradients.
    /// Head blocks: the local head displacement divided by the head step.
    fn upper_grad(&self, x_u: &[f64], x_l: &[f64]) -> Result<Vec<f64>> {
        let cache = self.cached(x_u)?;
        let weights = self.weights(x_l)?;
        let (heads, _) = self.unpack(x_u)?;
        let mut g = Vec::with_capacity(x_u.len());
        for (old, new) in heads.iter().zip(&cache.heads) {
            g.extend(
                old.values()
                    .iter()
                    .zip(new.values())
                    .map(|(a, b)| (a - b) / self.local.head_lr),
            );
        }
        let n = cache.reports.len() as f64;
        let mut agg = vec![0.0; self.shared_layout.len()];
        for (r, p) in cache.reports.iter().zip(weights.as_slice()) {
            for (a, v) in agg.iter_mut().zip(r.avg_grad.values()) {
                *a += p * v;
            }
        }
        g.extend(agg.into_iter().map(|a| a * (1.0 / n)));
        Ok(g)
    }

    /// Gradient step on the weights followed by renormalization.
    fn inner_step(&self, x_u: &[f64], x_l: &[f64], alpha: f64) -> Result<Vec<f64>> {
        let weights = self.weights(x_l)?;
        let grad = self.lower_grad(x_u, x_l)?;
        Ok(update_weights(&weights, &grad, alpha)?.as_slice().to_vec())
    }

    /// Heads move to their locally trained values; the shared parameters take
    /// the aggregated step.
    fn outer_step(&mut self, x_u: &[f64], x_l: &[f64], beta: f64) -> Result<Vec<f64>> {
        let weights = self.weights(x_l)?;
        let (_, shared) = self.unpack(x_u)?;
        let cache = self.cached(x_u)?;
        let next_shared = aggregate_and_step(&shared, &cache.reports, &weights, beta)?;
        let mut next = Vec::with_capacity(x_u.len());
        for h in &cache.heads {
            next.extend_from_slice(h.values());
        }
        next.extend_from_slice(next_shared.values());
        Ok(next)
    }
}
